#pragma once

#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hist/config.hpp"
#include "hist/eval.hpp"
#include "hist/localization.hpp"
#include "hist/train.hpp"

namespace hist {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// dataset generation
// ---------------------------------------------------------------------------

struct DatasetSummary {
    size_t train_scenes = 0;
    size_t test_scenes = 0;
    size_t train_pairs = 0;
};

inline std::vector<DataTuple> pairs_for(const std::vector<Scene>& scenes, uint64_t data_seed) {
    std::vector<DataTuple> out;
    for (size_t i = 0; i < scenes.size(); ++i) {
        std::vector<DataTuple> t = scene_pairs(scenes[i], derive_seed(data_seed, 0xFA1 + i));
        out.insert(out.end(), t.begin(), t.end());
    }
    return out;
}

inline DatasetSummary cmd_gen_data(const RunConfig& rc, std::ostream& out = std::cout) {
    rc.validate();
    const SceneGenConfig gen = rc.gen_config();
    const std::vector<Scene> train = generate_dataset(gen, rc.seeds.data, rc.data.n_train, "train");
    const std::vector<Scene> test = generate_dataset(gen, rc.seeds.data, rc.data.n_test, "test");
    const std::vector<DataTuple> pairs = pairs_for(train, rc.seeds.data);

    const fs::path root(rc.data.dir);
    write_dataset(train, (root / "train").string());
    write_pairs(pairs, (root / "train" / "pairs.jsonl").string());
    write_dataset(test, (root / "test").string());

    DatasetSummary s{train.size(), test.size(), pairs.size()};
    out << "wrote " << s.train_scenes << " train scenes, " << s.test_scenes << " test scenes, "
        << s.train_pairs << " pairs to " << rc.data.dir << "\n";
    if (s.train_pairs == 0)
        out << "warning: no composable phrase pairs (need scenes with two distinct subjects)\n";
    return s;
}

inline std::vector<Scene> load_split(const RunConfig& rc, const std::string& split) {
    return read_dataset((fs::path(rc.data.dir) / split).string());
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

inline std::string cmd_train(const RunConfig& rc, std::ostream& out = std::cout) {
    rc.validate();
    const std::vector<Scene> scenes = load_split(rc, "train");
    const std::vector<DataTuple> tuples = read_pairs((fs::path(rc.data.dir) / "train" / "pairs.jsonl").string());
    const Vocab vocab = Vocab::standard();

    ModelState state(rc.model);
    state.init(rc.seeds.model);
    fs::create_directories(rc.out_dir);
    rc.save((fs::path(rc.out_dir) / "config.json").string());

    const std::vector<TrainLogRecord> log = run_training(state, scenes, tuples, rc, vocab, rc.out_dir);
    const std::string ckpt = (fs::path(rc.out_dir) / "ckpt_final.hckp").string();
    out << "trained " << log.size() << " steps over " << rc.train.epochs << " epochs; final total "
        << std::setprecision(6) << log.back().losses.total << "; checkpoint " << ckpt << "\n";
    return ckpt;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

inline EvalReport cmd_eval(const RunConfig& rc, const std::string& ckpt_path, EvalMode mode,
                           uint64_t seed, std::ostream& out = std::cout) {
    if (!fs::exists(ckpt_path)) throw DataError("checkpoint not found: " + ckpt_path);
    ModelState state = load_checkpoint(ckpt_path, &rc.model);
    const std::vector<Scene> scenes = load_split(rc, "test");
    const Vocab vocab = Vocab::standard();

    EvalReport report = evaluate(state, scenes, mode, vocab, rc.loc, seed);
    fs::create_directories(rc.out_dir);
    const std::string tag = mode == EvalMode::kSinglePhrase ? "single_phrase" : "composite";
    write_report(report, (fs::path(rc.out_dir) / ("eval_" + tag + ".json")).string(),
                 (fs::path(rc.out_dir) / ("eval_" + tag + "_samples.jsonl")).string());
    out << tag << ": n=" << report.n_samples << " pointing=" << std::setprecision(4)
        << report.pointing_accuracy << " hit_rate=" << report.multi_object_hit_rate
        << " ciou=" << report.ciou_proxy << "\n";
    return report;
}

// ---------------------------------------------------------------------------
// heatmap export
// ---------------------------------------------------------------------------

inline void cmd_heatmap(const RunConfig& rc, const std::string& ckpt_path, const std::string& scene_id,
                        const std::string& phrase, const std::string& out_path,
                        std::ostream& out = std::cout) {
    if (!fs::exists(ckpt_path)) throw DataError("checkpoint not found: " + ckpt_path);
    ModelState state = load_checkpoint(ckpt_path, &rc.model);
    const Vocab vocab = Vocab::standard();

    const Scene* scene = nullptr;
    std::vector<Scene> scenes;
    for (const char* split : {"test", "train"}) {
        if (!fs::exists(fs::path(rc.data.dir) / split / "scenes.jsonl")) continue;
        std::vector<Scene> part = load_split(rc, split);
        for (Scene& s : part)
            if (s.scene_id == scene_id) {
                scenes.push_back(std::move(s));
                scene = &scenes.back();
                break;
            }
        if (scene != nullptr) break;
    }
    if (scene == nullptr) throw DataError("scene not found in dataset: " + scene_id);

    LocalizationMap map = localize(state, *scene, phrase, vocab, rc.loc);
    export_heatmap(map, out_path);
    PointingResult peak = pointing_game(map, scene->objects.front());
    out << "wrote " << out_path << " (peak at " << peak.row << "," << peak.col << ")\n";
}

// ---------------------------------------------------------------------------
// ablation sweep
// ---------------------------------------------------------------------------

struct AblationRow {
    std::string name;
    LossFlags flags;
    double pointing = 0.0;
    double hit_rate = 0.0;
    double ciou = 0.0;
    std::vector<double> pointing_runs, hit_rate_runs, ciou_runs;
};

struct AblationTable {
    std::vector<AblationRow> rows;

    const AblationRow& row(const std::string& name) const {
        for (const AblationRow& r : rows)
            if (r.name == name) return r;
        throw ConfigError("no ablation row named " + name);
    }

    nlohmann::json to_json() const {
        nlohmann::json rs = nlohmann::json::array();
        for (const AblationRow& r : rows)
            rs.push_back({{"name", r.name},
                          {"pointing", r.pointing},
                          {"hit_rate", r.hit_rate},
                          {"ciou", r.ciou},
                          {"pointing_runs", r.pointing_runs},
                          {"hit_rate_runs", r.hit_rate_runs},
                          {"ciou_runs", r.ciou_runs}});
        return {{"rows", rs}};
    }

    std::string table_str() const {
        std::ostringstream os;
        os << std::left << std::setw(14) << "variant" << std::right << std::setw(10) << "pointing"
           << std::setw(10) << "hit_rate" << std::setw(10) << "ciou" << "\n";
        for (const AblationRow& r : rows) {
            os << std::left << std::setw(14) << r.name << std::right << std::fixed
               << std::setprecision(4) << std::setw(10) << r.pointing << std::setw(10) << r.hit_rate
               << std::setw(10) << r.ciou << "\n";
        }
        return os.str();
    }
};

inline double median(std::vector<double> v) {
    if (v.empty()) throw DataError("median of empty list");
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<std::pair<std::string, LossFlags>> ablation_variants(bool exclusion) {
    LossFlags phrase_only{true, false, false, false};
    LossFlags plus_subject{true, true, false, false};
    LossFlags plus_comp{true, false, true, exclusion};
    LossFlags both{true, true, true, exclusion};
    return {{"phrase", phrase_only},
            {"+subject", plus_subject},
            {"+composition", plus_comp},
            {"+both", both}};
}

// Trains every variant on the stored dataset with shared per-seed streams and
// reports median metrics; the only difference between rows is the loss flags.
inline AblationTable cmd_ablate(const RunConfig& rc, std::ostream& out = std::cout) {
    rc.validate();
    const std::vector<Scene> scenes = load_split(rc, "train");
    const std::vector<Scene> test = load_split(rc, "test");
    const std::vector<DataTuple> tuples = read_pairs((fs::path(rc.data.dir) / "train" / "pairs.jsonl").string());
    const Vocab vocab = Vocab::standard();

    AblationTable table;
    for (const auto& [name, flags] : ablation_variants(rc.train.flags.exclusion)) {
        AblationRow row;
        row.name = name;
        row.flags = flags;
        for (size_t s = 0; s < rc.ablate_seeds; ++s) {
            RunConfig vrc = rc;
            vrc.train.flags = flags;
            vrc.seeds.model = rc.seeds.model + s;
            vrc.seeds.train = rc.seeds.train + s;
            ModelState state(vrc.model);
            state.init(vrc.seeds.model);
            run_training(state, scenes, tuples, vrc, vocab, "");

            EvalReport sp = evaluate(state, test, EvalMode::kSinglePhrase, vocab, rc.loc, rc.seeds.eval);
            EvalReport co = evaluate(state, test, EvalMode::kComposite, vocab, rc.loc, rc.seeds.eval);
            row.pointing_runs.push_back(sp.pointing_accuracy);
            row.hit_rate_runs.push_back(co.multi_object_hit_rate);
            row.ciou_runs.push_back(co.ciou_proxy);
            out << name << " seed " << s << ": pointing=" << std::setprecision(4)
                << sp.pointing_accuracy << " hit_rate=" << co.multi_object_hit_rate
                << " ciou=" << co.ciou_proxy << "\n";
        }
        row.pointing = median(row.pointing_runs);
        row.hit_rate = median(row.hit_rate_runs);
        row.ciou = median(row.ciou_runs);
        table.rows.push_back(std::move(row));
    }

    fs::create_directories(rc.out_dir);
    std::ofstream js(fs::path(rc.out_dir) / "ablation.json");
    if (!js) throw DataError("cannot write ablation results under " + rc.out_dir);
    js << table.to_json().dump(2) << "\n";
    out << table.table_str();

    const double base = table.row("phrase").hit_rate;
    if (table.row("+subject").hit_rate < base || table.row("+composition").hit_rate < base ||
        table.row("+both").hit_rate < table.row("+composition").hit_rate)
        out << "warning: ablation trend violated (see table)\n";
    return table;
}

}  // namespace hist

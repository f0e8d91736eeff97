#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "hist/config.hpp"
#include "hist/losses.hpp"
#include "hist/model.hpp"

namespace hist {

// SGD with heavy-ball momentum; velocity buffers live here, keyed by the
// parameter names visit_online reports, so one optimizer follows one model.
struct SgdOptimizer {
    double lr = 1e-2;
    double momentum = 0.9;
    std::unordered_map<std::string, std::vector<double>> velocity;

    void step(ModelState& state) {
        state.visit_online([&](const std::string& name, Tensor& t) {
            const std::vector<double>& g = t.grad();
            std::vector<double>& v = velocity[name];
            if (v.size() != g.size()) v.assign(g.size(), 0.0);
            for (size_t i = 0; i < g.size(); ++i) {
                v[i] = momentum * v[i] + g[i];
                t.at(i) -= lr * v[i];
            }
        });
    }
};

struct TrainLogRecord {
    size_t step = 0;
    size_t epoch = 0;
    double alpha = 0.0;
    LossValues losses;
    double wall_ms = 0.0;

    // wall_ms stays out of the serialized record so metrics files are
    // byte-identical across repeat runs
    nlohmann::json to_json() const {
        return {{"step", step},
                {"epoch", epoch},
                {"alpha", alpha},
                {"itc", losses.itc},
                {"itm", losses.itm},
                {"mlm", losses.mlm},
                {"phrase", losses.phrase},
                {"subject", losses.subject},
                {"composition", losses.composition},
                {"exclusion", losses.exclusion},
                {"total", losses.total}};
    }
};

inline void check_finite(const LossValues& v, size_t step) {
    auto bad = [&](const char* name, double x) {
        if (!std::isfinite(x))
            throw NumericError(std::string(name) + " went non-finite at step " + std::to_string(step));
    };
    bad("itc", v.itc);
    bad("itm", v.itm);
    bad("mlm", v.mlm);
    bad("phrase", v.phrase);
    bad("subject", v.subject);
    bad("composition", v.composition);
    bad("exclusion", v.exclusion);
    bad("total", v.total);
}

// One optimization pass over the tuple list. Writes metrics.jsonl plus
// per-epoch and final checkpoints when out_dir is nonempty; an empty out_dir
// keeps everything in memory for tests.
inline std::vector<TrainLogRecord> run_training(ModelState& state, const std::vector<Scene>& scenes,
                                                const std::vector<DataTuple>& tuples,
                                                const RunConfig& rc, const Vocab& vocab,
                                                const std::string& out_dir) {
    namespace fs = std::filesystem;
    using clock = std::chrono::steady_clock;

    rc.train.flags.validate();
    if (tuples.empty()) throw DataError("training needs at least one tuple");
    std::unordered_map<std::string, const Scene*> by_id;
    for (const Scene& s : scenes) by_id[s.scene_id] = &s;
    for (const DataTuple& t : tuples)
        if (by_id.find(t.scene_id) == by_id.end())
            throw DataError("tuple references unknown scene " + t.scene_id);

    const size_t batch = rc.train.batch_size;
    const size_t steps_per_epoch = (tuples.size() + batch - 1) / batch;
    SgdOptimizer opt{rc.train.lr, rc.train.sgd_momentum, {}};
    Rng shuffle_rng(derive_seed(rc.seeds.train, 0x0eda));
    Rng plan_rng(derive_seed(rc.seeds.train, 0x91a));

    std::ofstream metrics;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        metrics.open(fs::path(out_dir) / "metrics.jsonl");
        if (!metrics) throw DataError("cannot write metrics under " + out_dir);
    }

    std::vector<TrainLogRecord> log;
    log.reserve(steps_per_epoch * rc.train.epochs);
    std::vector<size_t> order(tuples.size());
    std::iota(order.begin(), order.end(), size_t{0});

    size_t global_step = 0;
    for (size_t epoch = 0; epoch < rc.train.epochs; ++epoch) {
        for (size_t i = 0; i + 1 < order.size(); ++i)
            std::swap(order[i], order[i + uniform_index(shuffle_rng, order.size() - i)]);

        for (size_t b0 = 0; b0 < order.size(); b0 += batch) {
            const auto t0 = clock::now();
            const size_t b1 = std::min(order.size(), b0 + batch);
            std::vector<const Scene*> batch_scenes;
            std::vector<DataTuple> batch_tuples;
            for (size_t k = b0; k < b1; ++k) {
                batch_tuples.push_back(tuples[order[k]]);
                batch_scenes.push_back(by_id.at(batch_tuples.back().scene_id));
            }

            const double alpha = rc.train.alpha.at(global_step, steps_per_epoch);
            BatchPlan plan = prepare_batch_plan(state, batch_scenes, batch_tuples, vocab,
                                                rc.train.hyper, rc.loc, rc.train.flags, plan_rng);
            Tape tape;
            ModelVars m = bind_model(tape, state, true);
            LossBundle bundle = batch_total_loss(tape, m, state, batch_scenes, plan, alpha,
                                                 rc.train.flags, rc.train.hyper, rc.loc);
            TrainLogRecord rec;
            rec.step = global_step;
            rec.epoch = epoch;
            rec.alpha = alpha;
            rec.losses = read_bundle(tape, bundle);
            check_finite(rec.losses, global_step);

            state.zero_grads();
            tape.backward(bundle.total);
            opt.step(state);

            std::vector<const Tensor*> images;
            std::vector<TokenSequence> texts;
            for (const Scene* s : batch_scenes) {
                images.push_back(&s->image);
                texts.push_back(tokenize(s->full_caption(), vocab, state.cfg.max_tokens));
            }
            momentum_update(state, images, texts);

            rec.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
            if (metrics.is_open()) metrics << rec.to_json().dump() << "\n";
            log.push_back(rec);
            ++global_step;
        }
        if (!out_dir.empty())
            save_checkpoint(state, (fs::path(out_dir) / ("ckpt_epoch_" + std::to_string(epoch + 1) + ".hckp")).string());
    }
    if (!out_dir.empty()) save_checkpoint(state, (fs::path(out_dir) / "ckpt_final.hckp").string());
    return log;
}

}  // namespace hist

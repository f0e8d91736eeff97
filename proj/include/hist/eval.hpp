#pragma once

#include <algorithm>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "hist/caption.hpp"
#include "hist/errors.hpp"
#include "hist/localization.hpp"
#include "hist/model.hpp"
#include "hist/rng.hpp"
#include "hist/scene.hpp"

namespace hist {

// Cells picked from a map, sorted by descending value with ties broken by
// (row, col) ascending.
struct PointPrediction {
    std::vector<std::pair<size_t, size_t>> points;
};

struct PointingResult {
    bool hit = false;
    size_t row = 0, col = 0;
};

// Argmax cell (first in row-major order on ties) against one inclusive box.
inline PointingResult pointing_game(const LocalizationMap& map, const SceneObject& box) {
    const Tensor& g = map.grid;
    if (g.rank() != 2) throw ShapeError("pointing_game: map must be rank 2");
    size_t best = 0;
    for (size_t i = 1; i < g.size(); ++i)
        if (g.at(i) > g.at(best)) best = i;
    PointingResult res;
    res.row = best / g.cols();
    res.col = best % g.cols();
    res.hit = box.contains(res.row, res.col);
    return res;
}

inline PointPrediction top_k_points(const LocalizationMap& map, size_t k = 4) {
    const Tensor& g = map.grid;
    if (g.rank() != 2) throw ShapeError("top_k_points: map must be rank 2");
    if (k > g.size())
        throw ConfigError("top_k_points: k=" + std::to_string(k) + " exceeds " + std::to_string(g.size()) +
                          " cells");
    struct Cell {
        double v;
        size_t r, c;
    };
    std::vector<Cell> cells;
    cells.reserve(g.size());
    for (size_t r = 0; r < g.rows(); ++r)
        for (size_t c = 0; c < g.cols(); ++c) cells.push_back({g.at2(r, c), r, c});
    std::sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) {
        if (a.v != b.v) return a.v > b.v;
        if (a.r != b.r) return a.r < b.r;
        return a.c < b.c;
    });
    PointPrediction pred;
    for (size_t i = 0; i < k; ++i) pred.points.emplace_back(cells[i].r, cells[i].c);
    return pred;
}

struct MultiObjectResult {
    double hit_rate = 0.0;
    double ciou_proxy = 0.0;
};

// hit_rate: fraction of boxes containing at least one point. The predicted
// region is the union of hit boxes' cells; ciou_proxy compares it against the
// union of all boxes' cells.
inline MultiObjectResult multi_object_metrics(const PointPrediction& pred,
                                              const std::vector<SceneObject>& boxes) {
    if (boxes.empty()) throw DataError("multi_object_metrics: no ground-truth boxes");
    std::set<std::pair<size_t, size_t>> gt_union, pred_region;
    size_t hits = 0;
    for (const SceneObject& box : boxes) {
        bool hit = false;
        for (const auto& [r, c] : pred.points) hit = hit || box.contains(r, c);
        for (size_t r = box.r0; r <= box.r1; ++r)
            for (size_t c = box.c0; c <= box.c1; ++c) {
                gt_union.insert({r, c});
                if (hit) pred_region.insert({r, c});
            }
        if (hit) ++hits;
    }
    size_t inter = 0;
    for (const auto& cell : pred_region) inter += gt_union.count(cell);
    const size_t uni = gt_union.size() + pred_region.size() - inter;
    MultiObjectResult res;
    res.hit_rate = static_cast<double>(hits) / static_cast<double>(boxes.size());
    res.ciou_proxy = uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
    return res;
}

// ---------------------------------------------------------------------------
// Dataset-level evaluation
// ---------------------------------------------------------------------------

enum class EvalMode { kSinglePhrase, kComposite };

inline EvalMode parse_eval_mode(const std::string& s) {
    if (s == "single_phrase") return EvalMode::kSinglePhrase;
    if (s == "composite") return EvalMode::kComposite;
    throw ConfigError("eval mode must be single_phrase or composite, got '" + s + "'");
}

struct EvalSample {
    std::string scene_id;
    std::string phrase;
    bool hit = false;          // single-phrase mode
    double hit_rate = 0.0;     // composite mode
    double ciou_proxy = 0.0;   // composite mode
    std::vector<std::pair<size_t, size_t>> points;

    nlohmann::json to_json(EvalMode mode) const {
        nlohmann::json j{{"scene_id", scene_id}, {"phrase", phrase}};
        if (mode == EvalMode::kSinglePhrase) {
            j["hit"] = hit;
        } else {
            j["hit_rate"] = hit_rate;
            j["ciou_proxy"] = ciou_proxy;
        }
        nlohmann::json pts = nlohmann::json::array();
        for (const auto& [r, c] : points) pts.push_back({r, c});
        j["points"] = pts;
        return j;
    }
};

struct EvalReport {
    EvalMode mode = EvalMode::kSinglePhrase;
    size_t n_samples = 0;
    double pointing_accuracy = 0.0;
    double multi_object_hit_rate = 0.0;
    double ciou_proxy = 0.0;
    std::vector<EvalSample> samples;

    nlohmann::json to_json() const {
        return {{"mode", mode == EvalMode::kSinglePhrase ? "single_phrase" : "composite"},
                {"n_samples", n_samples},
                {"pointing_accuracy", pointing_accuracy},
                {"multi_object_hit_rate", multi_object_hit_rate},
                {"ciou_proxy", ciou_proxy}};
    }
};

inline void write_report(const EvalReport& report, const std::string& json_path,
                         const std::string& jsonl_path) {
    std::ofstream js(json_path);
    if (!js) throw DataError("cannot write report: " + json_path);
    js << report.to_json().dump(2) << "\n";
    std::ofstream jl(jsonl_path);
    if (!jl) throw DataError("cannot write samples: " + jsonl_path);
    for (const EvalSample& s : report.samples) jl << s.to_json(report.mode).dump() << "\n";
}

using Localizer = std::function<LocalizationMap(const Scene&, const std::string& phrase)>;

// Single-phrase protocol: every (scene, object phrase, its box) is a sample.
// Composite protocol: per scene, two distinct-subject object phrases chosen by
// the seeded stream are joined with the connective and scored against both
// boxes via top-4 points.
inline EvalReport evaluate_with(const std::vector<Scene>& scenes, EvalMode mode, uint64_t seed,
                                const Localizer& localizer) {
    if (scenes.empty()) throw DataError("evaluate: empty test set");
    EvalReport report;
    report.mode = mode;

    for (size_t idx = 0; idx < scenes.size(); ++idx) {
        const Scene& scene = scenes[idx];
        if (mode == EvalMode::kSinglePhrase) {
            for (size_t o = 0; o < scene.objects.size(); ++o) {
                const std::string& phrase = scene.captions[o];
                LocalizationMap map = localizer(scene, phrase);
                PointingResult res = pointing_game(map, scene.objects[o]);
                EvalSample s;
                s.scene_id = scene.scene_id;
                s.phrase = phrase;
                s.hit = res.hit;
                s.points = {{res.row, res.col}};
                report.samples.push_back(std::move(s));
            }
        } else {
            if (scene.objects.size() < 2) continue;
            Rng rng(derive_seed(seed, idx));
            const size_t i = uniform_index(rng, scene.objects.size());
            std::vector<size_t> partners;
            for (size_t o = 0; o < scene.objects.size(); ++o)
                if (scene.objects[o].noun != scene.objects[i].noun) partners.push_back(o);
            if (partners.empty()) continue;
            const size_t j = partners[uniform_index(rng, partners.size())];

            const std::string phrase = compose_phrases(scene.captions[i], scene.captions[j]);
            LocalizationMap map = localizer(scene, phrase);
            PointPrediction pred = top_k_points(map, std::min<size_t>(4, map.grid.size()));
            MultiObjectResult res = multi_object_metrics(pred, {scene.objects[i], scene.objects[j]});
            EvalSample s;
            s.scene_id = scene.scene_id;
            s.phrase = phrase;
            s.hit_rate = res.hit_rate;
            s.ciou_proxy = res.ciou_proxy;
            s.points = pred.points;
            report.samples.push_back(std::move(s));
        }
    }

    report.n_samples = report.samples.size();
    for (const EvalSample& s : report.samples) {
        report.pointing_accuracy += s.hit ? 1.0 : 0.0;
        report.multi_object_hit_rate += s.hit_rate;
        report.ciou_proxy += s.ciou_proxy;
    }
    if (report.n_samples > 0) {
        report.pointing_accuracy /= static_cast<double>(report.n_samples);
        report.multi_object_hit_rate /= static_cast<double>(report.n_samples);
        report.ciou_proxy /= static_cast<double>(report.n_samples);
    }
    return report;
}

inline EvalReport evaluate(ModelState& state, const std::vector<Scene>& scenes, EvalMode mode,
                           const Vocab& vocab, const LocalizationConfig& loc, uint64_t seed) {
    return evaluate_with(scenes, mode, seed, [&](const Scene& sc, const std::string& phrase) {
        return localize(state, sc, phrase, vocab, loc);
    });
}

}  // namespace hist

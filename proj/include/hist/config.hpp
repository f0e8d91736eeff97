#pragma once

#include <cstdlib>
#include <fstream>
#include <string>

#include "json.hpp"

#include "hist/errors.hpp"
#include "hist/localization.hpp"
#include "hist/losses.hpp"
#include "hist/model.hpp"
#include "hist/scene.hpp"

namespace hist {

struct DataConfig {
    std::string dir = "data";
    size_t n_train = 500;
    size_t n_test = 100;
    SceneGenConfig gen;

    nlohmann::json to_json() const {
        return {{"dir", dir},
                {"n_train", n_train},
                {"n_test", n_test},
                {"n_objects_min", gen.n_objects_min},
                {"n_objects_max", gen.n_objects_max},
                {"noise", gen.noise}};
    }
    static DataConfig from_json(const nlohmann::json& j) {
        DataConfig d;
        d.dir = j.at("dir").get<std::string>();
        d.n_train = j.at("n_train").get<size_t>();
        d.n_test = j.at("n_test").get<size_t>();
        d.gen.n_objects_min = j.at("n_objects_min").get<size_t>();
        d.gen.n_objects_max = j.at("n_objects_max").get<size_t>();
        d.gen.noise = j.at("noise").get<double>();
        return d;
    }
};

struct TrainConfig {
    size_t epochs = 6;
    size_t batch_size = 8;
    double lr = 1e-2;
    double sgd_momentum = 0.9;  // 0 disables the velocity term
    AlphaSchedule alpha;
    LossFlags flags;
    TrainHyper hyper;

    nlohmann::json to_json() const {
        return {{"epochs", epochs},
                {"batch_size", batch_size},
                {"lr", lr},
                {"sgd_momentum", sgd_momentum},
                {"alpha_epochs_to_one", alpha.epochs_to_one},
                {"alpha_invert", alpha.invert},
                {"hist", flags.hist},
                {"subject", flags.subject},
                {"composition", flags.composition},
                {"exclusion", flags.exclusion},
                {"lambda_soft", hyper.lambda_soft},
                {"p_mask", hyper.p_mask}};
    }
    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig t;
        t.epochs = j.at("epochs").get<size_t>();
        t.batch_size = j.at("batch_size").get<size_t>();
        t.lr = j.at("lr").get<double>();
        t.sgd_momentum = j.at("sgd_momentum").get<double>();
        t.alpha.epochs_to_one = j.at("alpha_epochs_to_one").get<size_t>();
        t.alpha.invert = j.at("alpha_invert").get<bool>();
        t.flags.hist = j.at("hist").get<bool>();
        t.flags.subject = j.at("subject").get<bool>();
        t.flags.composition = j.at("composition").get<bool>();
        t.flags.exclusion = j.at("exclusion").get<bool>();
        t.hyper.lambda_soft = j.at("lambda_soft").get<double>();
        t.hyper.p_mask = j.at("p_mask").get<double>();
        return t;
    }
};

struct SeedConfig {
    uint64_t data = 1;
    uint64_t model = 2;
    uint64_t train = 3;
    uint64_t eval = 4;

    nlohmann::json to_json() const {
        return {{"data", data}, {"model", model}, {"train", train}, {"eval", eval}};
    }
    static SeedConfig from_json(const nlohmann::json& j) {
        SeedConfig s;
        s.data = j.at("data").get<uint64_t>();
        s.model = j.at("model").get<uint64_t>();
        s.train = j.at("train").get<uint64_t>();
        s.eval = j.at("eval").get<uint64_t>();
        return s;
    }
};

struct RunConfig {
    ModelConfig model;
    DataConfig data;
    TrainConfig train;
    LocalizationConfig loc;
    SeedConfig seeds;
    size_t ablate_seeds = 5;
    std::string out_dir = "runs/default";

    RunConfig() { model.vocab_size = Vocab::standard().size(); }

    void validate() const {
        // scene geometry and patch grid share one set of knobs
        model.validate(train.batch_size);
        train.flags.validate();
        loc.validate(model);
        if (train.epochs == 0) throw ConfigError("epochs must be >= 1");
        if (train.batch_size == 0) throw ConfigError("batch_size must be >= 1");
        if (train.lr <= 0.0) throw ConfigError("lr must be positive");
        if (train.sgd_momentum < 0.0 || train.sgd_momentum >= 1.0)
            throw ConfigError("sgd_momentum must lie in [0,1)");
        if (data.n_train == 0) throw ConfigError("n_train must be >= 1");
        if (ablate_seeds == 0) throw ConfigError("ablate_seeds must be >= 1");
        SceneGenConfig g = gen_config();
        g.validate();
    }

    // scene generation inherits the model's grid and pixel depth
    SceneGenConfig gen_config() const {
        SceneGenConfig g = data.gen;
        g.grid_p = model.grid_p;
        g.d_pix = model.d_pix;
        return g;
    }

    nlohmann::json to_json() const {
        return {{"model", model.to_json()},
                {"data", data.to_json()},
                {"train", train.to_json()},
                {"localization",
                 {{"layer", loc.layer}, {"head", loc.head.str()}, {"include_cls", loc.include_cls}}},
                {"seeds", seeds.to_json()},
                {"ablate_seeds", ablate_seeds},
                {"out_dir", out_dir}};
    }

    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig rc;
        try {
            rc.model = ModelConfig::from_json(j.at("model"));
            rc.data = DataConfig::from_json(j.at("data"));
            rc.train = TrainConfig::from_json(j.at("train"));
            const nlohmann::json& l = j.at("localization");
            rc.loc.layer = l.at("layer").get<size_t>();
            rc.loc.head = HeadSelector::parse(l.at("head").is_string()
                                                  ? l.at("head").get<std::string>()
                                                  : l.at("head").dump());
            rc.loc.include_cls = l.at("include_cls").get<bool>();
            rc.seeds = SeedConfig::from_json(j.at("seeds"));
            rc.ablate_seeds = j.at("ablate_seeds").get<size_t>();
            rc.out_dir = j.at("out_dir").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("bad run config: ") + e.what());
        }
        return rc;
    }

    static RunConfig load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot open config file: " + path);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(is);
        } catch (const std::exception& e) {
            throw ConfigError(path + ": invalid JSON (" + e.what() + ")");
        }
        return from_json(j);
    }

    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw DataError("cannot write config: " + path);
        os << to_json().dump(2) << "\n";
    }
};

// Sets one dotted key ("train.lr=0.02") on the JSON form of a config. The key
// must already exist; values parse as JSON scalars with a string fallback.
inline void set_dotted_key(nlohmann::json& root, const std::string& assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override must look like section.key=value, got '" + assignment + "'");
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);

    nlohmann::json* cur = &root;
    size_t start = 0;
    while (true) {
        const size_t dot = path.find('.', start);
        const std::string seg = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (!cur->is_object() || !cur->contains(seg))
            throw ConfigError("no such config key: " + path);
        cur = &(*cur)[seg];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    nlohmann::json parsed = nlohmann::json::parse(raw, nullptr, false);
    if (parsed.is_discarded() || ((parsed.is_object() || parsed.is_array()) && !cur->is_structured()))
        parsed = raw;  // plain strings (paths, head selectors) arrive unquoted
    if (cur->is_string() && !parsed.is_string()) parsed = raw;
    *cur = parsed;
}

inline RunConfig apply_overrides(const RunConfig& base, const std::vector<std::string>& assignments) {
    nlohmann::json j = base.to_json();
    for (const std::string& a : assignments) set_dotted_key(j, a);
    return RunConfig::from_json(j);
}

// HIST_SEED reseeds every stream from one base value.
inline void apply_seed_env(RunConfig& rc) {
    const char* env = std::getenv("HIST_SEED");
    if (env == nullptr || *env == '\0') return;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == nullptr || *end != '\0') throw ConfigError(std::string("HIST_SEED must be an integer, got '") + env + "'");
    rc.seeds.data = v;
    rc.seeds.model = v + 1;
    rc.seeds.train = v + 2;
    rc.seeds.eval = v + 3;
}

}  // namespace hist

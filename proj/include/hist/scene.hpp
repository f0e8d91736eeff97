#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "hist/caption.hpp"
#include "hist/errors.hpp"
#include "hist/rng.hpp"
#include "hist/tensor.hpp"

namespace hist {

// Grid-aligned ground truth box, inclusive bounds, 0-based.
struct SceneObject {
    std::string noun;
    std::string color;
    std::string size;
    size_t r0 = 0, c0 = 0, r1 = 0, c1 = 0;

    bool contains(size_t r, size_t c) const { return r >= r0 && r <= r1 && c >= c0 && c <= c1; }
    size_t area() const { return (r1 - r0 + 1) * (c1 - c0 + 1); }
    bool overlaps(const SceneObject& o) const {
        return !(o.r0 > r1 || o.r1 < r0 || o.c0 > c1 || o.c1 < c0);
    }
    bool operator==(const SceneObject& o) const = default;
};

struct Scene {
    std::string scene_id;
    size_t grid_p = 0;
    Tensor image;  // [P, P, D_pix]
    std::vector<SceneObject> objects;
    std::vector<std::string> captions;  // one phrase caption per object, then the full caption

    const std::string& full_caption() const { return captions.back(); }

    bool operator==(const Scene& o) const {
        return scene_id == o.scene_id && grid_p == o.grid_p && objects == o.objects && captions == o.captions &&
               image.shape() == o.image.shape() && image.vec() == o.image.vec();
    }
};

struct SceneGenConfig {
    size_t grid_p = 8;
    size_t d_pix = 16;
    size_t n_objects_min = 2;
    size_t n_objects_max = 2;
    double noise = 0.05;

    void validate() const {
        if (grid_p < 4) throw ConfigError("grid_p must be >= 4, got " + std::to_string(grid_p));
        if (d_pix < 2) throw ConfigError("d_pix must be >= 2");
        if (n_objects_min < 1 || n_objects_min > n_objects_max)
            throw ConfigError("object count range [" + std::to_string(n_objects_min) + "," +
                              std::to_string(n_objects_max) + "] is invalid");
        const size_t cap = (grid_p / 2) * (grid_p / 2);
        if (n_objects_max > cap)
            throw ConfigError("n_objects_max " + std::to_string(n_objects_max) + " exceeds grid capacity " +
                              std::to_string(cap));
        if (n_objects_max > lexicon::kNouns.size())
            throw ConfigError("n_objects_max exceeds noun pool; subjects must be unique per scene");
        if (noise < 0.0) throw ConfigError("noise must be >= 0");
    }
};

// Fixed per-dataset attribute vectors. Gaussian directions in D_pix are
// nearly orthogonal, which keeps cells linearly separable without being
// one-hot trivial.
struct AttributeCodebook {
    std::unordered_map<std::string, std::vector<double>> noun_vecs;
    std::unordered_map<std::string, std::vector<double>> color_vecs;
    std::unordered_map<std::string, std::vector<double>> size_vecs;
    std::vector<double> background;

    static AttributeCodebook make(size_t d_pix, uint64_t seed) {
        AttributeCodebook cb;
        Rng rng(derive_seed(seed, 0xC0DEB00Cull));
        auto draw = [&] {
            std::vector<double> v(d_pix);
            const double sd = 1.0 / std::sqrt(static_cast<double>(d_pix));
            for (double& x : v) x = gauss(rng, 0.0, sd);
            return v;
        };
        for (const auto& w : lexicon::kNouns) cb.noun_vecs[w] = draw();
        for (const auto& w : lexicon::kColors) cb.color_vecs[w] = draw();
        for (const auto& w : lexicon::kSizes) cb.size_vecs[w] = draw();
        cb.background = draw();
        return cb;
    }
};

namespace detail {
inline size_t box_side(const std::string& size) { return size == "large" ? 3 : 2; }
}

inline std::string phrase_for_object(const SceneObject& obj, int tmpl) {
    if (tmpl == 0) return "the " + obj.color + " " + obj.noun;
    return "a " + obj.size + " " + obj.color + " " + obj.noun;
}

inline Scene generate_scene(const SceneGenConfig& cfg, const AttributeCodebook& codebook, uint64_t seed,
                            const std::string& scene_id) {
    cfg.validate();
    Rng rng(seed);
    const size_t p = cfg.grid_p;
    const size_t n_objects =
        cfg.n_objects_min + uniform_index(rng, cfg.n_objects_max - cfg.n_objects_min + 1);

    Scene scene;
    scene.scene_id = scene_id;
    scene.grid_p = p;

    // Subjects drawn without replacement so every noun is unique in-scene.
    std::vector<std::string> nouns = lexicon::kNouns;
    for (size_t i = 0; i < n_objects; ++i) std::swap(nouns[i], nouns[i + uniform_index(rng, nouns.size() - i)]);

    for (size_t i = 0; i < n_objects; ++i) {
        SceneObject obj;
        obj.noun = nouns[i];
        obj.color = lexicon::kColors[uniform_index(rng, lexicon::kColors.size())];
        obj.size = lexicon::kSizes[uniform_index(rng, lexicon::kSizes.size())];
        const size_t side = detail::box_side(obj.size);
        bool placed = false;
        for (int attempt = 0; attempt < 500 && !placed; ++attempt) {
            obj.r0 = uniform_index(rng, p - side + 1);
            obj.c0 = uniform_index(rng, p - side + 1);
            obj.r1 = obj.r0 + side - 1;
            obj.c1 = obj.c0 + side - 1;
            placed = true;
            for (const auto& other : scene.objects)
                if (obj.overlaps(other)) {
                    placed = false;
                    break;
                }
        }
        if (!placed)
            throw DataError("cannot place object " + std::to_string(i) + " of scene " + scene_id +
                            " without overlap (grid too crowded)");
        scene.objects.push_back(obj);
    }

    for (const auto& obj : scene.objects) {
        const int tmpl = static_cast<int>(uniform_index(rng, 2));
        scene.captions.push_back(phrase_for_object(obj, tmpl));
    }
    std::string full = scene.captions[0];
    for (size_t i = 1; i < scene.captions.size(); ++i) full = compose_phrases(full, scene.captions[i]);
    scene.captions.push_back(full);

    // Per-cell features: attribute sum on object cells, background elsewhere,
    // plus fresh Gaussian noise of amplitude cfg.noise everywhere.
    scene.image = Tensor(Shape{p, p, cfg.d_pix});
    for (size_t r = 0; r < p; ++r) {
        for (size_t c = 0; c < p; ++c) {
            const SceneObject* owner = nullptr;
            for (const auto& obj : scene.objects)
                if (obj.contains(r, c)) {
                    owner = &obj;
                    break;
                }
            double* cell = scene.image.data() + (r * p + c) * cfg.d_pix;
            for (size_t d = 0; d < cfg.d_pix; ++d) {
                double base = owner ? codebook.noun_vecs.at(owner->noun)[d] + codebook.color_vecs.at(owner->color)[d] +
                                          codebook.size_vecs.at(owner->size)[d]
                                    : codebook.background[d];
                cell[d] = base + cfg.noise * gauss(rng);
            }
        }
    }
    return scene;
}

inline std::vector<Scene> generate_dataset(const SceneGenConfig& cfg, uint64_t data_seed, size_t count,
                                           const std::string& id_prefix) {
    const AttributeCodebook codebook = AttributeCodebook::make(cfg.d_pix, data_seed);
    // Split prefixes keep train/test scene streams disjoint for one data seed.
    const uint64_t split_stream = splitmix64(std::hash<std::string>{}(id_prefix));
    std::vector<Scene> out;
    out.reserve(count);
    for (size_t i = 0; i < count; ++i) {
        char id[64];
        std::snprintf(id, sizeof(id), "%s_%05zu", id_prefix.c_str(), i);
        out.push_back(generate_scene(cfg, codebook, derive_seed(data_seed, split_stream + i), id));
    }
    return out;
}

// Tuples for one scene, drawn from the parsed full caption with a per-scene
// seeded stream.
inline std::vector<DataTuple> scene_pairs(const Scene& scene, uint64_t pair_seed) {
    const auto phrases = parse_caption(scene.full_caption(), static_cast<int>(scene.captions.size()) - 1);
    return build_pairs(scene.scene_id, phrases, pair_seed);
}

// ---------------------------------------------------------------------------
// Dataset persistence: scenes.jsonl plus one tensor blob per scene image.
// ---------------------------------------------------------------------------

inline void write_dataset(const std::vector<Scene>& scenes, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "blobs");
    std::ofstream os(fs::path(dir) / "scenes.jsonl");
    if (!os) throw DataError("cannot open for write: " + dir + "/scenes.jsonl");
    for (const auto& scene : scenes) {
        const std::string rel = "blobs/" + scene.scene_id + ".hten";
        save_tensor_file(scene.image, (fs::path(dir) / rel).string());
        nlohmann::json objs = nlohmann::json::array();
        for (const auto& o : scene.objects)
            objs.push_back({{"noun", o.noun},
                            {"color", o.color},
                            {"size", o.size},
                            {"box", {o.r0, o.c0, o.r1, o.c1}}});
        nlohmann::json line = {{"scene_id", scene.scene_id},
                               {"P", scene.grid_p},
                               {"image_blob", rel},
                               {"objects", objs},
                               {"captions", scene.captions}};
        os << line.dump() << "\n";
    }
}

inline std::vector<Scene> read_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const std::string jsonl = (fs::path(dir) / "scenes.jsonl").string();
    std::ifstream is(jsonl);
    if (!is) throw DataError("cannot open dataset: " + jsonl);
    std::vector<Scene> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw DataError(jsonl + ":" + std::to_string(line_no) + ": malformed JSONL line (" + e.what() + ")");
        }
        Scene scene;
        try {
            scene.scene_id = j.at("scene_id").get<std::string>();
            scene.grid_p = j.at("P").get<size_t>();
            scene.captions = j.at("captions").get<std::vector<std::string>>();
            for (const auto& jo : j.at("objects")) {
                SceneObject o;
                o.noun = jo.at("noun").get<std::string>();
                o.color = jo.at("color").get<std::string>();
                o.size = jo.at("size").get<std::string>();
                const auto& box = jo.at("box");
                o.r0 = box.at(0).get<size_t>();
                o.c0 = box.at(1).get<size_t>();
                o.r1 = box.at(2).get<size_t>();
                o.c1 = box.at(3).get<size_t>();
                scene.objects.push_back(o);
            }
            const std::string rel = j.at("image_blob").get<std::string>();
            try {
                scene.image = load_tensor_file((fs::path(dir) / rel).string());
            } catch (const DataError& e) {
                throw DataError("scene " + scene.scene_id + ": " + e.what());
            }
        } catch (const nlohmann::json::exception& e) {
            throw DataError(jsonl + ":" + std::to_string(line_no) + ": missing or mistyped field (" + e.what() +
                            ")");
        }
        if (scene.image.rank() != 3 || scene.image.shape()[0] != scene.grid_p ||
            scene.image.shape()[1] != scene.grid_p)
            throw DataError("scene " + scene.scene_id + ": image blob shape " + shape_str(scene.image.shape()) +
                            " does not match P=" + std::to_string(scene.grid_p));
        out.push_back(std::move(scene));
    }
    return out;
}

inline void write_pairs(const std::vector<DataTuple>& tuples, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open for write: " + path);
    for (const auto& t : tuples) {
        nlohmann::json line = {{"scene_id", t.scene_id}, {"c_i", t.c_i.text},       {"s_i", t.c_i.subject},
                               {"c_j", t.c_j.text},      {"s_j", t.c_j.subject},    {"c_ij", t.c_ij}};
        os << line.dump() << "\n";
    }
}

inline std::vector<DataTuple> read_pairs(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open pairs file: " + path);
    std::vector<DataTuple> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": malformed JSONL line (" + e.what() + ")");
        }
        try {
            DataTuple t;
            t.scene_id = j.at("scene_id").get<std::string>();
            t.c_i = PhraseRecord{j.at("c_i").get<std::string>(), j.at("s_i").get<std::string>(), 0};
            t.c_j = PhraseRecord{j.at("c_j").get<std::string>(), j.at("s_j").get<std::string>(), 0};
            t.c_ij = j.at("c_ij").get<std::string>();
            out.push_back(std::move(t));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": missing or mistyped field (" + e.what() + ")");
        }
    }
    return out;
}

}  // namespace hist

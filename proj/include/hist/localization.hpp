#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "hist/errors.hpp"
#include "hist/model.hpp"
#include "hist/scene.hpp"
#include "hist/tape.hpp"
#include "hist/tensor.hpp"

namespace hist {

// Which attention heads feed a localization map: the mean over all heads or a
// single head index.
struct HeadSelector {
    bool mean = true;
    size_t head = 0;

    static HeadSelector mean_all() { return {}; }
    static HeadSelector single(size_t k) { return {false, k}; }

    static HeadSelector parse(const std::string& text) {
        if (text == "mean") return mean_all();
        try {
            size_t pos = 0;
            const unsigned long long k = std::stoull(text, &pos);
            if (pos != text.size()) throw std::invalid_argument(text);
            return single(static_cast<size_t>(k));
        } catch (const std::exception&) {
            throw ConfigError("head selector must be 'mean' or a head index, got '" + text + "'");
        }
    }

    std::string str() const { return mean ? "mean" : std::to_string(head); }
};

struct LocalizationConfig {
    size_t layer = 1;
    HeadSelector head = HeadSelector::mean_all();
    // The fusion layers attend row-locally, so the matching logit's gradient
    // reaches only the [CLS] query row; dropping that row from the token mean
    // would zero every gradient map. Disable only for attention-value studies.
    bool include_cls = true;

    void validate(const ModelConfig& cfg) const {
        if (layer >= cfg.n_cross_layers)
            throw ConfigError("localization layer " + std::to_string(layer) + " out of range (have " +
                              std::to_string(cfg.n_cross_layers) + ")");
        if (!head.mean && head.head >= cfg.n_heads)
            throw ConfigError("localization head " + std::to_string(head.head) + " out of range (have " +
                              std::to_string(cfg.n_heads) + ")");
    }
};

struct LocalizationMap {
    Tensor grid;  // [P x P], nonnegative
    std::string phrase;
    size_t layer = 0;
    HeadSelector head;
    std::string scene_id;
};

// Per-layer attention tensors [n_heads x k_max x P^2]. Only the first n_real
// rows of each head are meaningful; rows past n_real are stored as zeros.
struct AttentionStack {
    std::vector<Tensor> layers;
    size_t n_real = 0;
    size_t grid_p = 0;
};

namespace detail {

inline std::pair<size_t, size_t> token_row_range(size_t n_real, bool include_cls) {
    if (include_cls || n_real == 1) return {0, n_real};
    return {1, n_real};  // skip the [CLS] row
}

inline AttentionStack collect_stack(Tape& tape, const FuseOut& fused, size_t k_max, size_t grid_p, bool grads) {
    AttentionStack stack;
    stack.n_real = fused.n_real;
    stack.grid_p = grid_p;
    const size_t pp = grid_p * grid_p;
    for (const auto& layer : fused.attn) {
        Tensor block(Shape{layer.size(), k_max, pp});
        for (size_t h = 0; h < layer.size(); ++h) {
            const Tensor& src = grads ? tape.grad(layer[h]) : tape.value(layer[h]);
            if (src.rows() != fused.n_real || src.cols() != pp)
                throw ShapeError("attention map has shape " + shape_str(src.shape()));
            std::copy(src.data(), src.data() + src.size(), block.data() + h * k_max * pp);
        }
        stack.layers.push_back(std::move(block));
    }
    return stack;
}

}  // namespace detail

inline AttentionStack attention_values_stack(Tape& tape, const FuseOut& fused, size_t k_max, size_t grid_p) {
    return detail::collect_stack(tape, fused, k_max, grid_p, false);
}

// Same layout as attention_values_stack but filled with d(loss)/d(attention)
// read back after a backward pass.
inline AttentionStack attention_grads_stack(Tape& tape, const FuseOut& fused, size_t k_max, size_t grid_p) {
    return detail::collect_stack(tape, fused, k_max, grid_p, true);
}

// Select a layer, pool heads (mean or single), pool the real token rows, and
// reshape to the patch grid. The [CLS] row joins the token mean by default
// (see LocalizationConfig::include_cls); a one-token stack is just that row.
inline Tensor phrase_attention(const AttentionStack& stack, size_t layer, HeadSelector head,
                               bool include_cls = true) {
    if (layer >= stack.layers.size())
        throw ConfigError("phrase_attention: layer " + std::to_string(layer) + " out of range");
    const Tensor& block = stack.layers[layer];
    const size_t n_heads = block.shape()[0];
    const size_t k_max = block.shape()[1];
    const size_t pp = block.shape()[2];
    if (!head.mean && head.head >= n_heads)
        throw ConfigError("phrase_attention: head " + std::to_string(head.head) + " out of range");
    if (stack.n_real == 0 || stack.n_real > k_max) throw ShapeError("phrase_attention: bad real-token count");

    auto [r0, r1] = detail::token_row_range(stack.n_real, include_cls);
    const size_t h0 = head.mean ? 0 : head.head;
    const size_t h1 = head.mean ? n_heads : head.head + 1;
    const double denom = static_cast<double>((h1 - h0) * (r1 - r0));

    Tensor out(Shape{stack.grid_p, stack.grid_p});
    for (size_t h = h0; h < h1; ++h)
        for (size_t r = r0; r < r1; ++r) {
            const double* row = block.data() + (h * k_max + r) * pp;
            for (size_t c = 0; c < pp; ++c) out.at(c) += row[c];
        }
    for (size_t c = 0; c < pp; ++c) out.at(c) /= denom;
    return out;
}

// Elementwise ReLU(attn * grad) on two pooled maps.
inline LocalizationMap gradcam(const Tensor& attn, const Tensor& attn_grad) {
    if (attn.shape() != attn_grad.shape())
        throw ShapeError("gradcam: attention " + shape_str(attn.shape()) + " vs gradient " +
                         shape_str(attn_grad.shape()));
    LocalizationMap map;
    map.grid = Tensor(attn.shape());
    for (size_t i = 0; i < attn.size(); ++i) map.grid.at(i) = std::max(0.0, attn.at(i) * attn_grad.at(i));
    return map;
}

// Tape-level twin of phrase_attention: pooled attention as a [1 x P^2] node
// so losses can differentiate through the pooling.
inline Var pooled_attention_node(Tape& tape, const FuseOut& fused, const LocalizationConfig& cfg) {
    if (cfg.layer >= fused.attn.size()) throw ConfigError("pooled_attention_node: layer out of range");
    const auto& heads = fused.attn[cfg.layer];
    if (!cfg.head.mean && cfg.head.head >= heads.size())
        throw ConfigError("pooled_attention_node: head out of range");
    auto [r0, r1] = detail::token_row_range(fused.n_real, cfg.include_cls);

    std::vector<Var> pooled;
    const size_t h0 = cfg.head.mean ? 0 : cfg.head.head;
    const size_t h1 = cfg.head.mean ? heads.size() : cfg.head.head + 1;
    for (size_t h = h0; h < h1; ++h) pooled.push_back(tape.mean_rows(tape.row_slice(heads[h], r0, r1)));
    Var acc = pooled[0];
    for (size_t i = 1; i < pooled.size(); ++i) acc = tape.add(acc, pooled[i]);
    return tape.scale(acc, 1.0 / static_cast<double>(pooled.size()));
}

// Full pipeline for one (scene, phrase) pair: forward the matched pair with
// parameters held constant, backward from the matching margin, pool the
// chosen layer's attention and its gradient the same way, multiply, ReLU.
// Model gradients are untouched.
inline LocalizationMap localize(ModelState& state, const Scene& scene, const std::string& phrase,
                                const Vocab& vocab, const LocalizationConfig& cfg) {
    cfg.validate(state.cfg);
    const TokenSequence seq = tokenize(phrase, vocab, state.cfg.max_tokens);

    Tape tape;
    ModelVars m = bind_model(tape, state, false);
    ImageCtx img = image_context(m, scene.image);
    FuseOut out = fuse(m, encode_text(m, seq), seq.n_real, img);
    tape.backward(itm_match_margin(m, out));

    AttentionStack values = attention_values_stack(tape, out, state.cfg.max_tokens, state.cfg.grid_p);
    AttentionStack grads = attention_grads_stack(tape, out, state.cfg.max_tokens, state.cfg.grid_p);
    LocalizationMap map =
        gradcam(phrase_attention(values, cfg.layer, cfg.head, cfg.include_cls),
                phrase_attention(grads, cfg.layer, cfg.head, cfg.include_cls));
    map.phrase = phrase;
    map.layer = cfg.layer;
    map.head = cfg.head;
    map.scene_id = scene.scene_id;
    return map;
}

// Binary PGM export, min-max normalized; a constant map writes all zeros.
inline void export_heatmap(const LocalizationMap& map, const std::string& path) {
    const Tensor& g = map.grid;
    if (g.rank() != 2 || g.rows() != g.cols()) throw ShapeError("export_heatmap: map must be square");
    double lo = g.at(0), hi = g.at(0);
    for (size_t i = 0; i < g.size(); ++i) {
        lo = std::min(lo, g.at(i));
        hi = std::max(hi, g.at(i));
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open heatmap for write: " + path);
    os << "P5\n" << g.rows() << " " << g.cols() << "\n255\n";
    const double range = hi - lo;
    for (size_t i = 0; i < g.size(); ++i) {
        const unsigned char px =
            range == 0.0 ? 0
                         : static_cast<unsigned char>(std::llround((g.at(i) - lo) / range * 255.0));
        os.put(static_cast<char>(px));
    }
    if (!os) throw DataError("heatmap write failed: " + path);
}

}  // namespace hist

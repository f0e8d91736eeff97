#pragma once

#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "hist/caption.hpp"
#include "hist/errors.hpp"
#include "hist/rng.hpp"
#include "hist/tape.hpp"
#include "hist/tensor.hpp"

namespace hist {

struct ModelConfig {
    size_t grid_p = 8;
    size_t d_pix = 16;
    size_t d_v = 32;
    size_t d_t = 32;
    size_t n_heads = 4;
    size_t n_cross_layers = 3;
    size_t vocab_size = 0;
    size_t max_tokens = 16;
    double temperature = 0.07;
    size_t queue_size = 256;
    double momentum = 0.995;
    size_t proj_dim = 16;
    size_t ffn_hidden = 0;  // 0 picks d_t

    size_t head_dim() const { return d_t / n_heads; }
    size_t n_patches() const { return grid_p * grid_p; }
    size_t ffn() const { return ffn_hidden == 0 ? d_t : ffn_hidden; }

    void validate(size_t batch_size_hint = 1) const {
        if (n_heads == 0 || d_t % n_heads != 0)
            throw ConfigError("d_t (" + std::to_string(d_t) + ") must be divisible by n_heads (" +
                              std::to_string(n_heads) + ")");
        if (queue_size < batch_size_hint)
            throw ConfigError("queue_size " + std::to_string(queue_size) + " smaller than batch size " +
                              std::to_string(batch_size_hint));
        if (momentum <= 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in (0,1)");
        if (temperature <= 0.0) throw ConfigError("temperature must be positive");
        if (vocab_size < 4) throw ConfigError("vocab_size must cover specials plus at least one word");
        if (n_cross_layers == 0) throw ConfigError("need at least one cross-attention layer");
        if (max_tokens < 2) throw ConfigError("max_tokens must be at least 2");
        if (grid_p < 2 || d_pix == 0 || d_v == 0 || proj_dim == 0) throw ConfigError("degenerate model dims");
    }

    bool operator==(const ModelConfig&) const = default;

    nlohmann::json to_json() const {
        return {{"grid_p", grid_p},     {"d_pix", d_pix},
                {"d_v", d_v},           {"d_t", d_t},
                {"n_heads", n_heads},   {"n_cross_layers", n_cross_layers},
                {"vocab_size", vocab_size}, {"max_tokens", max_tokens},
                {"temperature", temperature}, {"queue_size", queue_size},
                {"momentum", momentum}, {"proj_dim", proj_dim},
                {"ffn_hidden", ffn_hidden}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.grid_p = j.at("grid_p").get<size_t>();
        c.d_pix = j.at("d_pix").get<size_t>();
        c.d_v = j.at("d_v").get<size_t>();
        c.d_t = j.at("d_t").get<size_t>();
        c.n_heads = j.at("n_heads").get<size_t>();
        c.n_cross_layers = j.at("n_cross_layers").get<size_t>();
        c.vocab_size = j.at("vocab_size").get<size_t>();
        c.max_tokens = j.at("max_tokens").get<size_t>();
        c.temperature = j.at("temperature").get<double>();
        c.queue_size = j.at("queue_size").get<size_t>();
        c.momentum = j.at("momentum").get<double>();
        c.proj_dim = j.at("proj_dim").get<size_t>();
        c.ffn_hidden = j.at("ffn_hidden").get<size_t>();
        return c;
    }
};

struct ImageEncoderParams {
    Tensor w_patch;  // [d_pix x d_v]
    Tensor b_patch;  // [1 x d_v]
    Tensor pos;      // [P^2 x d_v]

    template <typename F>
    void for_each(F&& f) {
        f("w_patch", w_patch);
        f("b_patch", b_patch);
        f("pos", pos);
    }
};

// Shared layout for the text self-attention block and each cross-attention
// layer: attention projections, post-attention layer norm, feed forward,
// final layer norm.
struct AttnBlockParams {
    Tensor w_q, w_k, w_v, w_o;
    Tensor ln1_g, ln1_b;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Tensor ln2_g, ln2_b;

    template <typename F>
    void for_each(F&& f) {
        f("w_q", w_q);
        f("w_k", w_k);
        f("w_v", w_v);
        f("w_o", w_o);
        f("ln1_g", ln1_g);
        f("ln1_b", ln1_b);
        f("ffn_w1", ffn_w1);
        f("ffn_b1", ffn_b1);
        f("ffn_w2", ffn_w2);
        f("ffn_b2", ffn_b2);
        f("ln2_g", ln2_g);
        f("ln2_b", ln2_b);
    }
};

struct TextEncoderParams {
    Tensor tok_emb;  // [vocab x d_t]
    Tensor pos_emb;  // [max_tokens x d_t]
    AttnBlockParams sa;

    template <typename F>
    void for_each(F&& f) {
        f("tok_emb", tok_emb);
        f("pos_emb", pos_emb);
        sa.for_each([&](const std::string& n, Tensor& t) { f("sa." + n, t); });
    }
};

// Fixed-capacity FIFO ring of unit-norm feature rows.
struct FeatureQueue {
    Tensor data;  // [capacity x proj_dim]
    size_t fill = 0;
    size_t head = 0;

    size_t capacity() const { return data.rows(); }

    void enqueue_rows(const Tensor& rows) {
        const size_t d = data.cols();
        if (rows.cols() != d) throw ShapeError("queue feature width mismatch");
        for (size_t i = 0; i < rows.rows(); ++i) {
            std::copy(rows.data() + i * d, rows.data() + (i + 1) * d, data.data() + head * d);
            head = (head + 1) % capacity();
            fill = std::min(fill + 1, capacity());
        }
    }

    // Occupied slots in storage order; stable for determinism.
    Tensor snapshot() const {
        Tensor out(Shape{fill, data.cols()});
        std::copy(data.data(), data.data() + fill * data.cols(), out.data());
        return out;
    }
};

struct ModelState {
    ModelConfig cfg;
    ImageEncoderParams img;
    TextEncoderParams txt;
    std::vector<AttnBlockParams> cross;
    Tensor itm_w, itm_b;    // [d_t x 2], [1 x 2]
    Tensor mlm_w, mlm_b;    // [d_t x vocab], [1 x vocab]
    Tensor proj_v, proj_t;  // [d_v x proj_dim], [d_t x proj_dim]

    // Momentum copies of the unimodal encoders and ITC projections.
    ImageEncoderParams mom_img;
    TextEncoderParams mom_txt;
    Tensor mom_proj_v, mom_proj_t;

    FeatureQueue img_queue, txt_queue;

    static constexpr size_t kUnmatched = 0;
    static constexpr size_t kMatched = 1;

    template <typename F>
    void visit_online(F&& f) {
        img.for_each([&](const std::string& n, Tensor& t) { f("img." + n, t); });
        txt.for_each([&](const std::string& n, Tensor& t) { f("txt." + n, t); });
        for (size_t l = 0; l < cross.size(); ++l)
            cross[l].for_each([&](const std::string& n, Tensor& t) { f("cross." + std::to_string(l) + "." + n, t); });
        f("itm.w", itm_w);
        f("itm.b", itm_b);
        f("mlm.w", mlm_w);
        f("mlm.b", mlm_b);
        f("proj.v", proj_v);
        f("proj.t", proj_t);
    }

    template <typename F>
    void visit_momentum(F&& f) {
        mom_img.for_each([&](const std::string& n, Tensor& t) { f("mom.img." + n, t); });
        mom_txt.for_each([&](const std::string& n, Tensor& t) { f("mom.txt." + n, t); });
        f("mom.proj.v", mom_proj_v);
        f("mom.proj.t", mom_proj_t);
    }

    void init(uint64_t seed) {
        cfg.validate();
        Rng rng(derive_seed(seed, 0x90DE1ull));
        auto xavier = [&](Shape s) {
            Tensor t(s);
            const double sd = std::sqrt(2.0 / static_cast<double>(s[0] + s[1]));
            for (size_t i = 0; i < t.size(); ++i) t.at(i) = gauss(rng, 0.0, sd);
            return t;
        };
        auto gaussian = [&](Shape s, double sd) {
            Tensor t(s);
            for (size_t i = 0; i < t.size(); ++i) t.at(i) = gauss(rng, 0.0, sd);
            return t;
        };

        const size_t dv = cfg.d_v, dt = cfg.d_t, ff = cfg.ffn();
        img.w_patch = xavier({cfg.d_pix, dv});
        img.b_patch = Tensor(Shape{1, dv});
        img.pos = gaussian({cfg.n_patches(), dv}, 0.05);

        txt.tok_emb = gaussian({cfg.vocab_size, dt}, 0.1);
        txt.pos_emb = gaussian({cfg.max_tokens, dt}, 0.05);

        auto init_block = [&](AttnBlockParams& b, size_t kv_dim) {
            b.w_q = xavier({dt, dt});
            b.w_k = xavier({kv_dim, dt});
            b.w_v = xavier({kv_dim, dt});
            b.w_o = xavier({dt, dt});
            b.ln1_g = Tensor(Shape{1, dt}, 1.0);
            b.ln1_b = Tensor(Shape{1, dt});
            b.ffn_w1 = xavier({dt, ff});
            b.ffn_b1 = Tensor(Shape{1, ff});
            b.ffn_w2 = xavier({ff, dt});
            b.ffn_b2 = Tensor(Shape{1, dt});
            b.ln2_g = Tensor(Shape{1, dt}, 1.0);
            b.ln2_b = Tensor(Shape{1, dt});
        };
        init_block(txt.sa, dt);
        cross.assign(cfg.n_cross_layers, {});
        for (auto& layer : cross) init_block(layer, dv);

        // modest classifier heads keep early cross-entropies near uniform
        itm_w = gaussian({dt, 2}, 0.05);
        itm_b = Tensor(Shape{1, 2});
        mlm_w = gaussian({dt, cfg.vocab_size}, 0.05);
        mlm_b = Tensor(Shape{1, cfg.vocab_size});
        proj_v = xavier({dv, cfg.proj_dim});
        proj_t = xavier({dt, cfg.proj_dim});

        visit_online([](const std::string&, Tensor& t) { t.set_requires_grad(true); });

        // momentum copies start equal to the online params
        mom_img = img;
        mom_txt = txt;
        mom_proj_v = proj_v;
        mom_proj_t = proj_t;
        visit_momentum([](const std::string&, Tensor& t) { t.set_requires_grad(false); });

        img_queue.data = Tensor(Shape{cfg.queue_size, cfg.proj_dim});
        txt_queue.data = Tensor(Shape{cfg.queue_size, cfg.proj_dim});
        img_queue.fill = img_queue.head = 0;
        txt_queue.fill = txt_queue.head = 0;
    }

    void zero_grads() {
        visit_online([](const std::string&, Tensor& t) { t.zero_grad(); });
    }

    // momentum <- m * momentum + (1-m) * online, projection heads included
    void momentum_step() {
        const double m = cfg.momentum;
        auto blend = [m](Tensor& mom, const Tensor& online) {
            for (size_t i = 0; i < mom.size(); ++i) mom.at(i) = m * mom.at(i) + (1.0 - m) * online.at(i);
        };
        std::vector<Tensor*> online_list, mom_list;
        img.for_each([&](const std::string&, Tensor& t) { online_list.push_back(&t); });
        txt.for_each([&](const std::string&, Tensor& t) { online_list.push_back(&t); });
        online_list.push_back(&proj_v);
        online_list.push_back(&proj_t);
        mom_img.for_each([&](const std::string&, Tensor& t) { mom_list.push_back(&t); });
        mom_txt.for_each([&](const std::string&, Tensor& t) { mom_list.push_back(&t); });
        mom_list.push_back(&mom_proj_v);
        mom_list.push_back(&mom_proj_t);
        for (size_t i = 0; i < mom_list.size(); ++i) blend(*mom_list[i], *online_list[i]);
    }
};

// ---------------------------------------------------------------------------
// Tape bindings. One ModelVars is built per tape; `trainable` decides whether
// parameters join the gradient flow (training) or enter as constants (eval,
// gradient-factor extraction).
// ---------------------------------------------------------------------------

struct AttnBlockVars {
    Var w_q, w_k, w_v, w_o, ln1_g, ln1_b, ffn_w1, ffn_b1, ffn_w2, ffn_b2, ln2_g, ln2_b;
};

struct ModelVars {
    Tape* tape = nullptr;
    const ModelConfig* cfg = nullptr;
    Var w_patch, b_patch, pos_v;
    Var tok_emb, pos_t;
    AttnBlockVars sa;
    std::vector<AttnBlockVars> cross;
    Var itm_w, itm_b, mlm_w, mlm_b, proj_v, proj_t;
};

namespace detail {
template <typename Bind>
AttnBlockVars bind_block(AttnBlockParams& p, Bind&& bind) {
    AttnBlockVars v;
    v.w_q = bind(p.w_q);
    v.w_k = bind(p.w_k);
    v.w_v = bind(p.w_v);
    v.w_o = bind(p.w_o);
    v.ln1_g = bind(p.ln1_g);
    v.ln1_b = bind(p.ln1_b);
    v.ffn_w1 = bind(p.ffn_w1);
    v.ffn_b1 = bind(p.ffn_b1);
    v.ffn_w2 = bind(p.ffn_w2);
    v.ffn_b2 = bind(p.ffn_b2);
    v.ln2_g = bind(p.ln2_g);
    v.ln2_b = bind(p.ln2_b);
    return v;
}
}  // namespace detail

inline ModelVars bind_model(Tape& tape, ModelState& state, bool trainable) {
    auto bind = [&](Tensor& t) { return trainable ? tape.leaf(t) : tape.constant(t); };
    ModelVars m;
    m.tape = &tape;
    m.cfg = &state.cfg;
    m.w_patch = bind(state.img.w_patch);
    m.b_patch = bind(state.img.b_patch);
    m.pos_v = bind(state.img.pos);
    m.tok_emb = bind(state.txt.tok_emb);
    m.pos_t = bind(state.txt.pos_emb);
    m.sa = detail::bind_block(state.txt.sa, bind);
    for (auto& layer : state.cross) m.cross.push_back(detail::bind_block(layer, bind));
    m.itm_w = bind(state.itm_w);
    m.itm_b = bind(state.itm_b);
    m.mlm_w = bind(state.mlm_w);
    m.mlm_b = bind(state.mlm_b);
    m.proj_v = bind(state.proj_v);
    m.proj_t = bind(state.proj_t);
    return m;
}

// Momentum encoder view: always constant; shares the cross/ITM/MLM slots with
// zeroed Vars since only the unimodal paths and projections exist in momentum
// form. Only encode/feature helpers may be called through it.
inline ModelVars bind_momentum(Tape& tape, ModelState& state) {
    auto bind = [&](Tensor& t) { return tape.constant(t); };
    ModelVars m;
    m.tape = &tape;
    m.cfg = &state.cfg;
    m.w_patch = bind(state.mom_img.w_patch);
    m.b_patch = bind(state.mom_img.b_patch);
    m.pos_v = bind(state.mom_img.pos);
    m.tok_emb = bind(state.mom_txt.tok_emb);
    m.pos_t = bind(state.mom_txt.pos_emb);
    m.sa = detail::bind_block(state.mom_txt.sa, bind);
    m.proj_v = bind(state.mom_proj_v);
    m.proj_t = bind(state.mom_proj_t);
    return m;
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

inline Var encode_image(ModelVars& m, const Tensor& image) {
    const ModelConfig& cfg = *m.cfg;
    if (image.rank() != 3 || image.shape()[0] != cfg.grid_p || image.shape()[1] != cfg.grid_p ||
        image.shape()[2] != cfg.d_pix)
        throw ShapeError("encode_image: got " + shape_str(image.shape()) + ", expected [" +
                         std::to_string(cfg.grid_p) + "x" + std::to_string(cfg.grid_p) + "x" +
                         std::to_string(cfg.d_pix) + "]");
    Tape& t = *m.tape;
    Var cells = t.constant(image.reshaped(Shape{cfg.n_patches(), cfg.d_pix}));
    Var emb = t.add_rowvec(t.matmul(cells, m.w_patch), m.b_patch);
    return t.add(emb, m.pos_v);
}

namespace detail {

// Multi-head attention core. Queries come from x, keys/values are prebuilt
// projections. Scores scale by 1/sqrt(D_t) following the cross-attention
// formula (single shared scale, not per-head). Returns the per-head maps.
struct AttnOut {
    Var ctx;                    // [rows x d_t]
    std::vector<Var> head_maps; // each [rows x n_keys]
};

inline AttnOut attention(Tape& t, const ModelConfig& cfg, Var x, const AttnBlockVars& blk, Var keys, Var values,
                         size_t valid_keys, bool retain_maps) {
    const size_t hd = cfg.head_dim();
    Var q = t.matmul(x, blk.w_q);
    AttnOut out;
    std::vector<Var> ctx_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_t));
    for (size_t h = 0; h < cfg.n_heads; ++h) {
        Var qh = t.col_slice(q, h * hd, (h + 1) * hd);
        Var kh = t.col_slice(keys, h * hd, (h + 1) * hd);
        Var vh = t.col_slice(values, h * hd, (h + 1) * hd);
        Var scores = t.scale(t.matmul_nt(qh, kh), scale);
        Var attn = t.softmax_rows(scores, valid_keys);
        if (retain_maps) t.retain(attn);
        out.head_maps.push_back(attn);
        ctx_heads.push_back(t.matmul(attn, vh));
    }
    out.ctx = t.matmul(t.hconcat(ctx_heads), blk.w_o);
    return out;
}

inline Var ffn_block(Tape& t, const AttnBlockVars& blk, Var x) {
    Var h = t.relu(t.add_rowvec(t.matmul(x, blk.ffn_w1), blk.ffn_b1));
    return t.add_rowvec(t.matmul(h, blk.ffn_w2), blk.ffn_b2);
}

}  // namespace detail

inline Var encode_text(ModelVars& m, const TokenSequence& seq) {
    const ModelConfig& cfg = *m.cfg;
    if (seq.ids.size() != cfg.max_tokens)
        throw ShapeError("encode_text: sequence length " + std::to_string(seq.ids.size()) + " != max_tokens " +
                         std::to_string(cfg.max_tokens));
    if (seq.n_real == 0 || seq.n_real > cfg.max_tokens) throw ShapeError("encode_text: bad real-token count");
    Tape& t = *m.tape;
    Var emb = t.add(t.embedding(m.tok_emb, seq.ids), m.pos_t);
    // one self-attention block; [PAD] keys masked out of the softmax
    Var k = t.matmul(emb, m.sa.w_k);
    Var v = t.matmul(emb, m.sa.w_v);
    auto attn = detail::attention(t, cfg, emb, m.sa, k, v, seq.n_real, false);
    Var h = t.layer_norm(t.add(emb, attn.ctx), m.sa.ln1_g, m.sa.ln1_b);
    return t.layer_norm(t.add(h, detail::ffn_block(t, m.sa, h)), m.sa.ln2_g, m.sa.ln2_b);
}

// Per-image work shared by every fuse on the same tape: patch embeddings and
// each cross layer's key/value projections.
struct ImageCtx {
    Var emb;  // [(P^2) x d_v]
    std::vector<std::pair<Var, Var>> kv;
};

inline ImageCtx image_context(ModelVars& m, const Tensor& image) {
    ImageCtx ctx;
    ctx.emb = encode_image(m, image);
    Tape& t = *m.tape;
    for (const auto& layer : m.cross)
        ctx.kv.emplace_back(t.matmul(ctx.emb, layer.w_k), t.matmul(ctx.emb, layer.w_v));
    return ctx;
}

struct FuseOut {
    Var fused;                                // [K x d_t]
    std::vector<std::vector<Var>> attn;       // [layer][head] -> [K x P^2]
    size_t n_real = 0;
};

// Multimodal encoder over the first n_real text rows. Attention maps are
// retained on the tape so their values and gradients stay inspectable.
inline FuseOut fuse(ModelVars& m, Var text_emb, size_t n_real, const ImageCtx& img) {
    Tape& t = *m.tape;
    const ModelConfig& cfg = *m.cfg;
    if (t.value(text_emb).cols() != cfg.d_t) throw ShapeError("fuse: text embedding width != d_t");
    if (n_real == 0 || n_real > t.value(text_emb).rows()) throw ShapeError("fuse: bad real-token count");
    FuseOut out;
    out.n_real = n_real;
    Var h = t.row_slice(text_emb, 0, n_real);
    for (size_t l = 0; l < cfg.n_cross_layers; ++l) {
        auto attn = detail::attention(t, cfg, h, m.cross[l], img.kv[l].first, img.kv[l].second,
                                      cfg.n_patches(), true);
        out.attn.push_back(attn.head_maps);
        h = t.layer_norm(t.add(h, attn.ctx), m.cross[l].ln1_g, m.cross[l].ln1_b);
        h = t.layer_norm(t.add(h, detail::ffn_block(t, m.cross[l], h)), m.cross[l].ln2_g, m.cross[l].ln2_b);
    }
    out.fused = h;
    return out;
}

inline Var itm_logits(ModelVars& m, const FuseOut& fused) {
    Tape& t = *m.tape;
    Var cls = t.row_slice(fused.fused, 0, 1);
    return t.add_rowvec(t.matmul(cls, m.itm_w), m.itm_b);  // [1 x 2]
}

// Matching margin (matched minus unmatched logit). Backing localization maps
// off this scalar keeps them sign-aligned with the matching loss gradient:
// d(loss)/dA equals -p_unmatched * d(margin)/dA, so the margin's gradient is
// the loss gradient corrected to point toward evidence, with the per-sample
// positive factor dropped (cell ranking is unchanged).
inline Var itm_match_margin(ModelVars& m, const FuseOut& fused) {
    Tape& t = *m.tape;
    Var logits = itm_logits(m, fused);
    return t.sub(t.cell(logits, 0, ModelState::kMatched), t.cell(logits, 0, ModelState::kUnmatched));
}

inline Var mlm_logits(ModelVars& m, const FuseOut& fused, const std::vector<size_t>& positions) {
    Tape& t = *m.tape;
    for (size_t p : positions)
        if (p >= fused.n_real) throw ShapeError("mlm_logits: position " + std::to_string(p) + " beyond real tokens");
    Var rows = t.gather_rows(fused.fused, positions);
    return t.add_rowvec(t.matmul(rows, m.mlm_w), m.mlm_b);  // [n_masked x vocab]
}

// ITC projection features, unit-norm rows.
inline Var itc_image_feature(ModelVars& m, const ImageCtx& img) {
    Tape& t = *m.tape;
    return t.l2_normalize_rows(t.matmul(t.mean_rows(img.emb), m.proj_v));
}

inline Var itc_text_feature(ModelVars& m, Var text_emb) {
    Tape& t = *m.tape;
    return t.l2_normalize_rows(t.matmul(t.row_slice(text_emb, 0, 1), m.proj_t));
}

// Value-level momentum features (scratch tape, constants only).
inline Tensor momentum_image_feature(ModelState& state, const Tensor& image) {
    Tape tape;
    ModelVars m = bind_momentum(tape, state);
    Var emb = encode_image(m, image);
    return tape.value(tape.l2_normalize_rows(tape.matmul(tape.mean_rows(emb), m.proj_v)));
}

inline Tensor momentum_text_feature(ModelState& state, const TokenSequence& seq) {
    Tape tape;
    ModelVars m = bind_momentum(tape, state);
    Var emb = encode_text(m, seq);
    return tape.value(itc_text_feature(m, emb));
}

// Momentum refresh after an optimizer step: blend parameters, then push the
// batch's momentum features into the FIFO queues.
inline void momentum_update(ModelState& state, const std::vector<const Tensor*>& images,
                            const std::vector<TokenSequence>& texts) {
    state.momentum_step();
    for (const Tensor* im : images) state.img_queue.enqueue_rows(momentum_image_feature(state, *im));
    for (const auto& seq : texts) state.txt_queue.enqueue_rows(momentum_text_feature(state, seq));
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "HCKP", u32 version, config JSON, named tensor blobs.
// ---------------------------------------------------------------------------

inline constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(ModelState& state, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open checkpoint for write: " + path);
    os.write("HCKP", 4);
    detail::write_le<uint32_t>(os, kCheckpointVersion);
    const std::string cfg = state.cfg.to_json().dump();
    detail::write_le<uint32_t>(os, static_cast<uint32_t>(cfg.size()));
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

    std::vector<std::pair<std::string, Tensor*>> entries;
    state.visit_online([&](const std::string& n, Tensor& t) { entries.emplace_back(n, &t); });
    state.visit_momentum([&](const std::string& n, Tensor& t) { entries.emplace_back(n, &t); });
    Tensor img_meta(Shape{2}, {static_cast<double>(state.img_queue.fill), static_cast<double>(state.img_queue.head)});
    Tensor txt_meta(Shape{2}, {static_cast<double>(state.txt_queue.fill), static_cast<double>(state.txt_queue.head)});
    entries.emplace_back("queue.img.data", &state.img_queue.data);
    entries.emplace_back("queue.img.meta", &img_meta);
    entries.emplace_back("queue.txt.data", &state.txt_queue.data);
    entries.emplace_back("queue.txt.meta", &txt_meta);

    detail::write_le<uint32_t>(os, static_cast<uint32_t>(entries.size()));
    for (auto& [name, tensor] : entries) {
        detail::write_le<uint32_t>(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        save_tensor_blob(*tensor, os);
    }
    if (!os) throw DataError("checkpoint write failed: " + path);
}

inline ModelState load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "HCKP", 4) != 0) throw DataError("bad checkpoint magic in " + path);
    const uint32_t version = detail::read_le<uint32_t>(is, "checkpoint version");
    if (version != kCheckpointVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    const uint32_t cfg_len = detail::read_le<uint32_t>(is, "config length");
    std::string cfg_json(cfg_len, '\0');
    is.read(cfg_json.data(), cfg_len);
    if (!is) throw DataError("checkpoint truncated in config: " + path);

    ModelConfig cfg;
    try {
        cfg = ModelConfig::from_json(nlohmann::json::parse(cfg_json));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint config unreadable: " + std::string(e.what()));
    }
    if (expected && !(*expected == cfg))
        throw ConfigError("checkpoint config does not match the requested configuration: " + path);

    ModelState state;
    state.cfg = cfg;
    state.init(0);  // allocates shapes; contents overwritten below

    std::vector<std::pair<std::string, Tensor*>> slots;
    state.visit_online([&](const std::string& n, Tensor& t) { slots.emplace_back(n, &t); });
    state.visit_momentum([&](const std::string& n, Tensor& t) { slots.emplace_back(n, &t); });
    Tensor img_meta, txt_meta;
    slots.emplace_back("queue.img.data", &state.img_queue.data);
    slots.emplace_back("queue.img.meta", &img_meta);
    slots.emplace_back("queue.txt.data", &state.txt_queue.data);
    slots.emplace_back("queue.txt.meta", &txt_meta);

    const uint32_t n_entries = detail::read_le<uint32_t>(is, "entry count");
    size_t found = 0;
    for (uint32_t e = 0; e < n_entries; ++e) {
        const uint32_t name_len = detail::read_le<uint32_t>(is, "name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw DataError("checkpoint truncated in names: " + path);
        Tensor t = load_tensor_blob(is);
        bool matched = false;
        for (auto& [slot_name, slot] : slots) {
            if (slot_name == name) {
                const bool keep_grad = slot->requires_grad();
                if (!slot->empty() && slot->shape() != t.shape())
                    throw DataError("checkpoint tensor " + name + " has shape " + shape_str(t.shape()) +
                                    ", expected " + shape_str(slot->shape()));
                *slot = std::move(t);
                slot->set_requires_grad(keep_grad);
                matched = true;
                ++found;
                break;
            }
        }
        if (!matched) throw DataError("checkpoint contains unknown tensor '" + name + "'");
    }
    if (found != slots.size())
        throw DataError("checkpoint missing tensors: found " + std::to_string(found) + " of " +
                        std::to_string(slots.size()));
    state.img_queue.fill = static_cast<size_t>(img_meta.at(0));
    state.img_queue.head = static_cast<size_t>(img_meta.at(1));
    state.txt_queue.fill = static_cast<size_t>(txt_meta.at(0));
    state.txt_queue.head = static_cast<size_t>(txt_meta.at(1));
    return state;
}

}  // namespace hist

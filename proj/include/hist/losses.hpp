#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "hist/caption.hpp"
#include "hist/errors.hpp"
#include "hist/localization.hpp"
#include "hist/model.hpp"
#include "hist/rng.hpp"
#include "hist/scene.hpp"
#include "hist/tape.hpp"
#include "hist/tensor.hpp"

namespace hist {

// Which hierarchy terms participate in training.
struct LossFlags {
    bool hist = true;         // master switch; off = plain image-caption objective
    bool subject = true;      // subject-level ITC+ITM terms
    bool composition = true;  // composite-phrase map loss
    bool exclusion = false;   // overlap penalty on the pair's maps

    void validate() const {
        if (!hist && (subject || composition || exclusion))
            throw ConfigError("hierarchy terms require the hist flag");
        if (exclusion && !composition)
            throw ConfigError("exclusion loss requires the composition loss");
    }
};

struct TrainHyper {
    double lambda_soft = 0.4;  // blend weight of momentum soft labels
    double p_mask = 0.15;      // per-token masking probability
};

// Weight on the base objective; the hierarchy terms carry (1 - alpha). Ramps
// linearly per step from 0 to 1 across the first epochs_to_one epochs, then
// stays at 1. The invert flag flips the ramp for ablation.
struct AlphaSchedule {
    size_t epochs_to_one = 2;
    bool invert = false;

    double at(size_t global_step, size_t steps_per_epoch) const {
        if (steps_per_epoch == 0) throw ConfigError("alpha schedule needs steps_per_epoch > 0");
        const double ramp = static_cast<double>(epochs_to_one) * static_cast<double>(steps_per_epoch);
        const double a = ramp == 0.0 ? 1.0 : std::min(1.0, static_cast<double>(global_step) / ramp);
        return invert ? 1.0 - a : a;
    }
};

// ---------------------------------------------------------------------------
// MLM masking
// ---------------------------------------------------------------------------

struct MlmMask {
    std::vector<size_t> positions;  // row indices into the real tokens
    std::vector<size_t> labels;     // original token ids at those positions
    bool skipped = false;           // no maskable token existed
};

// Bernoulli(p_mask) per non-special token, at least one forced when possible.
inline MlmMask draw_mlm_mask(const TokenSequence& seq, double p_mask, Rng& rng) {
    MlmMask mask;
    std::vector<size_t> maskable;
    for (size_t p = 0; p < seq.n_real; ++p) {
        const int id = seq.ids[p];
        if (id != Vocab::kPad && id != Vocab::kCls && id != Vocab::kMask) maskable.push_back(p);
    }
    if (maskable.empty()) {
        mask.skipped = true;
        return mask;
    }
    for (size_t p : maskable)
        if (uniform_real(rng, 0.0, 1.0) < p_mask) {
            mask.positions.push_back(p);
            mask.labels.push_back(static_cast<size_t>(seq.ids[p]));
        }
    if (mask.positions.empty()) {
        const size_t p = maskable[uniform_index(rng, maskable.size())];
        mask.positions.push_back(p);
        mask.labels.push_back(static_cast<size_t>(seq.ids[p]));
    }
    return mask;
}

inline TokenSequence masked_sequence(const TokenSequence& seq, const MlmMask& mask) {
    TokenSequence out = seq;
    for (size_t p : mask.positions) out.ids[p] = Vocab::kMask;
    return out;
}

// ---------------------------------------------------------------------------
// ITC: symmetric InfoNCE against momentum features and the negative queues
// ---------------------------------------------------------------------------

// Constant inputs for one ITC call: momentum features of the batch plus queue
// snapshots. Candidate banks are [momentum batch; queue] in that order, so
// candidate i is the positive for row i.
struct ItcBank {
    Tensor mom_img;    // [B x proj]
    Tensor mom_txt;    // [B x proj]
    Tensor queue_img;  // [nq x proj]
    Tensor queue_txt;  // [nq x proj]
};

namespace detail {

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (b.rows() == 0) return a;
    Tensor out(Shape{a.rows() + b.rows(), a.cols()});
    std::copy(a.data(), a.data() + a.size(), out.data());
    std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
    return out;
}

// lambda_soft * softmax(mom_anchor . candidates^T / tau) + (1-lambda_soft) * one-hot
inline Tensor soft_targets(const Tensor& mom_anchor, const Tensor& candidates, double tau, double lambda_soft) {
    const size_t b = mom_anchor.rows(), n = candidates.rows(), d = mom_anchor.cols();
    Tensor targets(Shape{b, n});
    for (size_t r = 0; r < b; ++r) {
        std::vector<double> sims(n);
        double mx = -1e300;
        for (size_t c = 0; c < n; ++c) {
            double s = 0.0;
            for (size_t k = 0; k < d; ++k) s += mom_anchor.at2(r, k) * candidates.at2(c, k);
            sims[c] = s / tau;
            mx = std::max(mx, sims[c]);
        }
        double z = 0.0;
        for (size_t c = 0; c < n; ++c) z += std::exp(sims[c] - mx);
        for (size_t c = 0; c < n; ++c) targets.at2(r, c) = lambda_soft * std::exp(sims[c] - mx) / z;
        targets.at2(r, r) += 1.0 - lambda_soft;
    }
    return targets;
}

}  // namespace detail

// Symmetric contrastive loss over unit-norm projections. img_feats/txt_feats
// are the online [1 x proj] features per sample, in batch order.
inline Var itc_loss(Tape& t, const std::vector<Var>& img_feats, const std::vector<Var>& txt_feats,
                    const ItcBank& bank, double tau, double lambda_soft) {
    if (img_feats.empty() || img_feats.size() != txt_feats.size())
        throw ShapeError("itc_loss: feature lists must be equal-sized and nonempty");
    Var fv = t.vstack(img_feats);
    Var ft = t.vstack(txt_feats);
    const Tensor cand_txt = detail::concat_rows(bank.mom_txt, bank.queue_txt);
    const Tensor cand_img = detail::concat_rows(bank.mom_img, bank.queue_img);

    Var logits_i2t = t.scale(t.matmul_nt(fv, t.constant(cand_txt)), 1.0 / tau);
    Var logits_t2i = t.scale(t.matmul_nt(ft, t.constant(cand_img)), 1.0 / tau);
    Tensor targets_i2t = detail::soft_targets(bank.mom_img, cand_txt, tau, lambda_soft);
    Tensor targets_t2i = detail::soft_targets(bank.mom_txt, cand_img, tau, lambda_soft);

    return t.scale(t.add(t.cross_entropy(logits_i2t, targets_i2t), t.cross_entropy(logits_t2i, targets_t2i)),
                   0.5);
}

// ---------------------------------------------------------------------------
// Per-pair ITM and MLM
// ---------------------------------------------------------------------------

inline Var itm_pair_loss(Tape& t, ModelVars& m, const ImageCtx& img, Var text_emb, size_t n_real, bool matched) {
    FuseOut out = fuse(m, text_emb, n_real, img);
    const size_t label = matched ? ModelState::kMatched : ModelState::kUnmatched;
    return t.cross_entropy(itm_logits(m, out), std::vector<size_t>{label});
}

// Cross-entropy at the masked positions of the masked sequence. Returns a
// zero constant when the mask was skipped.
inline Var mlm_loss(Tape& t, ModelVars& m, const ImageCtx& img, const TokenSequence& seq, const MlmMask& mask) {
    if (mask.skipped) return t.scalar_const(0.0);
    const TokenSequence masked = masked_sequence(seq, mask);
    FuseOut out = fuse(m, encode_text(m, masked), masked.n_real, img);
    return t.cross_entropy(mlm_logits(m, out, mask.positions), mask.labels);
}

// ---------------------------------------------------------------------------
// Map-level losses (Composition and Exclusion)
// ---------------------------------------------------------------------------

// Sum over cells of |G_i + G_j - G_ij|, accumulated in row-major order.
inline double composition_loss(const LocalizationMap& gi, const LocalizationMap& gj, const LocalizationMap& gij) {
    if (gi.grid.shape() != gj.grid.shape() || gi.grid.shape() != gij.grid.shape())
        throw ShapeError("composition_loss: map shapes differ");
    double acc = 0.0;
    for (size_t i = 0; i < gi.grid.size(); ++i)
        acc += std::abs(gi.grid.at(i) + gj.grid.at(i) - gij.grid.at(i));
    return acc;
}

// Sum over cells of G_i * G_j; zero exactly when supports are disjoint.
inline double exclusion_loss(const LocalizationMap& gi, const LocalizationMap& gj) {
    if (gi.grid.shape() != gj.grid.shape()) throw ShapeError("exclusion_loss: map shapes differ");
    double acc = 0.0;
    for (size_t i = 0; i < gi.grid.size(); ++i) acc += gi.grid.at(i) * gj.grid.at(i);
    return acc;
}

inline Var composition_loss_node(Tape& t, Var gi, Var gj, Var gij) {
    return t.l1_sum(t.sub(t.add(gi, gj), gij));
}

inline Var exclusion_loss_node(Tape& t, Var gi, Var gj) { return t.sum(t.mul(gi, gj)); }

// ---------------------------------------------------------------------------
// Step plans: every random or parameter-frozen input a step needs, drawn up
// front so the loss is a deterministic, finite-differentiable function of the
// parameters.
// ---------------------------------------------------------------------------

// The gradient half of a map, pooled like phrase_attention, captured on a
// side tape with parameters held constant. The main tape later treats it as
// a constant factor (stop-gradient).
//
// This surrogate backs off the matched logit alone, not the matching margin
// that localization maps use. The margin field goes negative wherever the
// matcher reads a cell as counter-evidence, and the ReLU then pins the
// composite map to zero there; the additivity penalty would respond by
// erasing the constituents' maps at exactly those cells. The matched logit
// keeps a broad positive field, so the penalty reshapes maps instead of
// zeroing them.
inline Tensor pooled_grad_map(ModelState& state, const Scene& scene, const TokenSequence& seq,
                              const LocalizationConfig& loc) {
    Tape tape;
    ModelVars m = bind_model(tape, state, false);
    ImageCtx img = image_context(m, scene.image);
    FuseOut out = fuse(m, encode_text(m, seq), seq.n_real, img);
    tape.backward(tape.cell(itm_logits(m, out), 0, ModelState::kMatched));
    AttentionStack grads = attention_grads_stack(tape, out, state.cfg.max_tokens, state.cfg.grid_p);
    return phrase_attention(grads, loc.layer, loc.head, loc.include_cls)
        .reshaped(Shape{1, state.cfg.n_patches()});
}

struct TuplePlan {
    TokenSequence full, ci, cj, si, sj, cij;
    Tensor mom_full, mom_ci, mom_cj, mom_si, mom_sj;  // momentum text feats [1 x proj]
    Tensor mom_img;                                   // momentum image feat [1 x proj]
    MlmMask mask_full, mask_ci, mask_cj;
    Tensor grad_ci, grad_cj, grad_cij;  // frozen pooled gradient maps [1 x P^2]
};

// One ITM negative per positive: in-batch text of the same role, drawn with
// probability proportional to exp(sim/tau) of momentum features, candidates
// with identical text excluded. -1 when no eligible candidate exists.
using NegIndex = std::vector<int>;

struct BatchPlan {
    std::vector<TuplePlan> tuples;
    Tensor queue_img, queue_txt;  // snapshots [nq x proj]
    NegIndex neg_full, neg_ci, neg_cj, neg_si, neg_sj;
};

namespace detail {

inline NegIndex draw_negatives(const std::vector<const std::string*>& texts, const Tensor& mom_img,
                               const std::vector<const Tensor*>& mom_txt, double tau, Rng& rng) {
    const size_t b = texts.size();
    NegIndex neg(b, -1);
    for (size_t i = 0; i < b; ++i) {
        std::vector<size_t> eligible;
        for (size_t n = 0; n < b; ++n)
            if (n != i && *texts[n] != *texts[i]) eligible.push_back(n);
        if (eligible.empty()) continue;
        std::vector<double> w(eligible.size());
        double mx = -1e300;
        for (size_t k = 0; k < eligible.size(); ++k) {
            double s = 0.0;
            for (size_t d = 0; d < mom_img.cols(); ++d)
                s += mom_img.at2(i, d) * mom_txt[eligible[k]]->at(d);
            w[k] = s / tau;
            mx = std::max(mx, w[k]);
        }
        double z = 0.0;
        for (double& x : w) {
            x = std::exp(x - mx);
            z += x;
        }
        double u = uniform_real(rng, 0.0, z);
        size_t pick = eligible.size() - 1;
        double acc = 0.0;
        for (size_t k = 0; k < eligible.size(); ++k) {
            acc += w[k];
            if (u <= acc) {
                pick = k;
                break;
            }
        }
        neg[i] = static_cast<int>(eligible[pick]);
    }
    return neg;
}

}  // namespace detail

inline BatchPlan prepare_batch_plan(ModelState& state, const std::vector<const Scene*>& scenes,
                                    const std::vector<DataTuple>& tuples, const Vocab& vocab,
                                    const TrainHyper& hyper, const LocalizationConfig& loc,
                                    const LossFlags& flags, Rng& rng) {
    flags.validate();
    if (scenes.size() != tuples.size() || scenes.empty())
        throw DataError("batch plan needs equal-sized, nonempty scene and tuple lists");
    const size_t kmax = state.cfg.max_tokens;
    BatchPlan plan;
    plan.queue_img = state.img_queue.snapshot();
    plan.queue_txt = state.txt_queue.snapshot();

    for (size_t b = 0; b < scenes.size(); ++b) {
        TuplePlan tp;
        tp.full = tokenize(scenes[b]->full_caption(), vocab, kmax);
        tp.ci = tokenize(tuples[b].c_i.text, vocab, kmax);
        tp.cj = tokenize(tuples[b].c_j.text, vocab, kmax);
        tp.si = tokenize(tuples[b].c_i.subject, vocab, kmax);
        tp.sj = tokenize(tuples[b].c_j.subject, vocab, kmax);
        tp.cij = tokenize(tuples[b].c_ij, vocab, kmax);
        tp.mom_img = momentum_image_feature(state, scenes[b]->image);
        tp.mom_full = momentum_text_feature(state, tp.full);
        if (flags.hist) {
            tp.mom_ci = momentum_text_feature(state, tp.ci);
            tp.mom_cj = momentum_text_feature(state, tp.cj);
            if (flags.subject) {
                tp.mom_si = momentum_text_feature(state, tp.si);
                tp.mom_sj = momentum_text_feature(state, tp.sj);
            }
        }
        plan.tuples.push_back(std::move(tp));
    }

    // negatives per role, then masks, then frozen maps: one fixed draw order
    const size_t b = scenes.size();
    const double tau = state.cfg.temperature;
    auto role_neg = [&](auto text_of, auto feat_of) {
        std::vector<const std::string*> texts;
        std::vector<const Tensor*> feats;
        Tensor mom_img(Shape{b, state.cfg.proj_dim});
        for (size_t i = 0; i < b; ++i) {
            texts.push_back(text_of(i));
            feats.push_back(feat_of(i));
            for (size_t d = 0; d < state.cfg.proj_dim; ++d)
                mom_img.at2(i, d) = plan.tuples[i].mom_img.at(d);
        }
        return detail::draw_negatives(texts, mom_img, feats, tau, rng);
    };
    plan.neg_full = role_neg([&](size_t i) { return &scenes[i]->captions.back(); },
                             [&](size_t i) { return &plan.tuples[i].mom_full; });
    if (flags.hist) {
        plan.neg_ci = role_neg([&](size_t i) { return &tuples[i].c_i.text; },
                               [&](size_t i) { return &plan.tuples[i].mom_ci; });
        plan.neg_cj = role_neg([&](size_t i) { return &tuples[i].c_j.text; },
                               [&](size_t i) { return &plan.tuples[i].mom_cj; });
        if (flags.subject) {
            plan.neg_si = role_neg([&](size_t i) { return &tuples[i].c_i.subject; },
                                   [&](size_t i) { return &plan.tuples[i].mom_si; });
            plan.neg_sj = role_neg([&](size_t i) { return &tuples[i].c_j.subject; },
                                   [&](size_t i) { return &plan.tuples[i].mom_sj; });
        }
    }

    for (size_t i = 0; i < b; ++i) {
        TuplePlan& tp = plan.tuples[i];
        tp.mask_full = draw_mlm_mask(tp.full, hyper.p_mask, rng);
        if (flags.hist) {
            tp.mask_ci = draw_mlm_mask(tp.ci, hyper.p_mask, rng);
            tp.mask_cj = draw_mlm_mask(tp.cj, hyper.p_mask, rng);
        }
    }

    if (flags.hist && flags.composition) {
        for (size_t i = 0; i < b; ++i) {
            TuplePlan& tp = plan.tuples[i];
            tp.grad_ci = pooled_grad_map(state, *scenes[i], tp.ci, loc);
            tp.grad_cj = pooled_grad_map(state, *scenes[i], tp.cj, loc);
            tp.grad_cij = pooled_grad_map(state, *scenes[i], tp.cij, loc);
        }
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Loss bundle assembly
// ---------------------------------------------------------------------------

struct LossBundle {
    Var itc, itm, mlm;                            // base components on full captions
    Var phrase, subject, composition, exclusion;  // hierarchy sums over the tuple pair
    Var phrase_itc, phrase_itm, phrase_mlm;       // phrase sum split by component
    Var vl, hist, total;
    bool has_exclusion = false;
    double alpha = 0.0;
};

struct LossValues {
    double itc = 0, itm = 0, mlm = 0;
    double phrase = 0, subject = 0, composition = 0, exclusion = 0;
    double total = 0, alpha = 0;
    bool has_exclusion = false;
};

inline LossValues read_bundle(Tape& t, const LossBundle& b) {
    LossValues v;
    v.itc = t.value(b.itc).at(0);
    v.itm = t.value(b.itm).at(0);
    v.mlm = t.value(b.mlm).at(0);
    v.phrase = t.value(b.phrase).at(0);
    v.subject = t.value(b.subject).at(0);
    v.composition = t.value(b.composition).at(0);
    v.exclusion = t.value(b.exclusion).at(0);
    v.total = t.value(b.total).at(0);
    v.alpha = b.alpha;
    v.has_exclusion = b.has_exclusion;
    return v;
}

// The published combination, alpha*vl + (1-alpha)*(vl + hist), kept for
// equivalence checks against the simplified form used in the bundle.
inline Var total_paper_form(Tape& t, const LossBundle& b) {
    return t.add(t.scale(b.vl, b.alpha), t.scale(t.add(b.vl, b.hist), 1.0 - b.alpha));
}

// Full training objective for one batch of (scene, tuple) pairs on an open
// tape. Every stochastic input comes from the plan.
inline LossBundle batch_total_loss(Tape& t, ModelVars& m, ModelState& state,
                                   const std::vector<const Scene*>& scenes,
                                   const BatchPlan& plan, double alpha, const LossFlags& flags,
                                   const TrainHyper& hyper, const LocalizationConfig& loc) {
    flags.validate();
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must lie in [0,1]");
    const size_t b = scenes.size();
    if (b == 0 || plan.tuples.size() != b) throw DataError("batch plan does not match the batch");
    const double tau = state.cfg.temperature;
    const double inv_b = 1.0 / static_cast<double>(b);

    // shared per-scene work
    std::vector<ImageCtx> imgs;
    std::vector<Var> img_feats;
    for (size_t i = 0; i < b; ++i) {
        imgs.push_back(image_context(m, scenes[i]->image));
        img_feats.push_back(itc_image_feature(m, imgs.back()));
    }

    struct RoleOut {
        Var itc, itm, mlm;
        bool has_mlm = false;
    };

    // one hierarchy role: ITC over the batch, ITM on positives plus planned
    // negatives, optional MLM
    auto role_losses = [&](auto seq_of, auto mom_of, const NegIndex& negs, auto mask_of,
                           bool with_mlm) {
        std::vector<Var> txt_embs(b);
        std::vector<Var> txt_feats;
        ItcBank bank;
        bank.queue_img = plan.queue_img;
        bank.queue_txt = plan.queue_txt;
        bank.mom_img = Tensor(Shape{b, state.cfg.proj_dim});
        bank.mom_txt = Tensor(Shape{b, state.cfg.proj_dim});
        for (size_t i = 0; i < b; ++i) {
            const TokenSequence& seq = seq_of(i);
            txt_embs[i] = encode_text(m, seq);
            txt_feats.push_back(itc_text_feature(m, txt_embs[i]));
            for (size_t d = 0; d < state.cfg.proj_dim; ++d) {
                bank.mom_img.at2(i, d) = plan.tuples[i].mom_img.at(d);
                bank.mom_txt.at2(i, d) = mom_of(i).at(d);
            }
        }
        RoleOut out;
        out.itc = itc_loss(t, img_feats, txt_feats, bank, tau, hyper.lambda_soft);

        std::vector<Var> itm_terms;
        for (size_t i = 0; i < b; ++i)
            itm_terms.push_back(itm_pair_loss(t, m, imgs[i], txt_embs[i], seq_of(i).n_real, true));
        for (size_t i = 0; i < b; ++i)
            if (negs[i] >= 0) {
                const size_t n = static_cast<size_t>(negs[i]);
                itm_terms.push_back(itm_pair_loss(t, m, imgs[i], txt_embs[n], seq_of(n).n_real, false));
            }
        Var itm_sum = itm_terms[0];
        for (size_t k = 1; k < itm_terms.size(); ++k) itm_sum = t.add(itm_sum, itm_terms[k]);
        out.itm = t.scale(itm_sum, 1.0 / static_cast<double>(itm_terms.size()));

        if (with_mlm) {
            out.has_mlm = true;
            Var mlm_sum = t.scalar_const(0.0);
            for (size_t i = 0; i < b; ++i)
                mlm_sum = t.add(mlm_sum, mlm_loss(t, m, imgs[i], seq_of(i), mask_of(i)));
            out.mlm = t.scale(mlm_sum, inv_b);
        }
        return out;
    };

    LossBundle bundle;
    bundle.alpha = alpha;
    bundle.has_exclusion = flags.hist && flags.exclusion;

    RoleOut full = role_losses([&](size_t i) -> const TokenSequence& { return plan.tuples[i].full; },
                               [&](size_t i) -> const Tensor& { return plan.tuples[i].mom_full; },
                               plan.neg_full,
                               [&](size_t i) -> const MlmMask& { return plan.tuples[i].mask_full; }, true);
    bundle.itc = full.itc;
    bundle.itm = full.itm;
    bundle.mlm = full.mlm;
    bundle.vl = t.add(t.add(full.itc, full.itm), full.mlm);

    if (flags.hist) {
        RoleOut ci = role_losses([&](size_t i) -> const TokenSequence& { return plan.tuples[i].ci; },
                                 [&](size_t i) -> const Tensor& { return plan.tuples[i].mom_ci; },
                                 plan.neg_ci,
                                 [&](size_t i) -> const MlmMask& { return plan.tuples[i].mask_ci; }, true);
        RoleOut cj = role_losses([&](size_t i) -> const TokenSequence& { return plan.tuples[i].cj; },
                                 [&](size_t i) -> const Tensor& { return plan.tuples[i].mom_cj; },
                                 plan.neg_cj,
                                 [&](size_t i) -> const MlmMask& { return plan.tuples[i].mask_cj; }, true);
        bundle.phrase_itc = t.add(ci.itc, cj.itc);
        bundle.phrase_itm = t.add(ci.itm, cj.itm);
        bundle.phrase_mlm = t.add(ci.mlm, cj.mlm);
        bundle.phrase = t.add(t.add(t.add(ci.itc, ci.itm), ci.mlm), t.add(t.add(cj.itc, cj.itm), cj.mlm));

        if (flags.subject) {
            RoleOut si = role_losses([&](size_t i) -> const TokenSequence& { return plan.tuples[i].si; },
                                     [&](size_t i) -> const Tensor& { return plan.tuples[i].mom_si; },
                                     plan.neg_si, [&](size_t i) -> const MlmMask& { return plan.tuples[i].mask_full; },
                                     false);
            RoleOut sj = role_losses([&](size_t i) -> const TokenSequence& { return plan.tuples[i].sj; },
                                     [&](size_t i) -> const Tensor& { return plan.tuples[i].mom_sj; },
                                     plan.neg_sj, [&](size_t i) -> const MlmMask& { return plan.tuples[i].mask_full; },
                                     false);
            bundle.subject = t.add(t.add(si.itc, si.itm), t.add(sj.itc, sj.itm));
        } else {
            bundle.subject = t.scalar_const(0.0);
        }

        if (flags.composition) {
            // maps through live attention, gradient factors frozen in the plan
            Var comp_sum = t.scalar_const(0.0);
            Var excl_sum = t.scalar_const(0.0);
            for (size_t i = 0; i < b; ++i) {
                const TuplePlan& tp = plan.tuples[i];
                auto g_of = [&](const TokenSequence& seq, const Tensor& grad_map) {
                    FuseOut out = fuse(m, encode_text(m, seq), seq.n_real, imgs[i]);
                    Var pooled = pooled_attention_node(t, out, loc);
                    return t.relu(t.mul(pooled, t.constant(grad_map)));
                };
                Var gi = g_of(tp.ci, tp.grad_ci);
                Var gj = g_of(tp.cj, tp.grad_cj);
                Var gij = g_of(tp.cij, tp.grad_cij);
                comp_sum = t.add(comp_sum, composition_loss_node(t, gi, gj, gij));
                if (bundle.has_exclusion) excl_sum = t.add(excl_sum, exclusion_loss_node(t, gi, gj));
            }
            bundle.composition = t.scale(comp_sum, inv_b);
            bundle.exclusion = bundle.has_exclusion ? t.scale(excl_sum, inv_b) : t.scalar_const(0.0);
        } else {
            bundle.composition = t.scalar_const(0.0);
            bundle.exclusion = t.scalar_const(0.0);
        }

        bundle.hist = t.add(t.add(bundle.phrase, bundle.subject), bundle.composition);
        if (bundle.has_exclusion) bundle.hist = t.add(bundle.hist, bundle.exclusion);
    } else {
        bundle.phrase = t.scalar_const(0.0);
        bundle.phrase_itc = t.scalar_const(0.0);
        bundle.phrase_itm = t.scalar_const(0.0);
        bundle.phrase_mlm = t.scalar_const(0.0);
        bundle.subject = t.scalar_const(0.0);
        bundle.composition = t.scalar_const(0.0);
        bundle.exclusion = t.scalar_const(0.0);
        bundle.hist = t.scalar_const(0.0);
    }

    bundle.total = t.add(bundle.vl, t.scale(bundle.hist, 1.0 - alpha));
    return bundle;
}

// Single-tuple objective: the batched path with a batch of one.
inline LossBundle total_loss(Tape& t, ModelVars& m, ModelState& state, const Scene& scene,
                             const BatchPlan& plan, double alpha, const LossFlags& flags,
                             const TrainHyper& hyper, const LocalizationConfig& loc) {
    return batch_total_loss(t, m, state, {&scene}, plan, alpha, flags, hyper, loc);
}

inline BatchPlan prepare_tuple_plan(ModelState& state, const Scene& scene, const DataTuple& tuple,
                                    const Vocab& vocab, const TrainHyper& hyper,
                                    const LocalizationConfig& loc, const LossFlags& flags, Rng& rng) {
    return prepare_batch_plan(state, {&scene}, {tuple}, vocab, hyper, loc, flags, rng);
}

}  // namespace hist

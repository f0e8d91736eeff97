#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hist/errors.hpp"
#include "hist/tensor.hpp"

namespace hist {

// Handle into a Tape. Only meaningful together with the tape that issued it.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

namespace detail {

// C += A * B, all row-major, A: [m x k], B: [k x n].
inline void mm_acc(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A * B^T, A: [m x k], B: [n x k].
inline void mm_nt_acc(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C += A^T * B, A: [m x k], B: [m x n], C: [k x n].
inline void mm_tn_acc(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// Reverse-mode tape over dense f64 tensors. Nodes are recorded in creation
// order, which is already topological, so backward() is a single reverse
// sweep. Every node that participates in gradient flow keeps its own grad
// buffer, so gradients of intermediates (attention maps in particular) stay
// readable after backward(). A tape is built and consumed within one step;
// it is not reusable and backward() may run only once.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    size_t size() const { return nodes_.size(); }

    // Parameter leaf. Gradients accumulate into t.grad() after backward()
    // when t.requires_grad() is set; otherwise this behaves like constant().
    Var leaf(Tensor& t) {
        Var v = push(t, t.requires_grad());
        if (t.requires_grad()) nodes_[v.id].bound = &t;
        return v;
    }

    Var constant(Tensor t) { return push(std::move(t), false); }
    Var scalar_const(double v) { return push(Tensor::scalar(v), false); }

    const Tensor& value(Var v) const { return node(v, "value").value; }

    const Tensor& grad(Var v) const {
        const Node& n = node(v, "grad");
        if (!backward_done_) throw NumericError("tape gradient read before backward()");
        if (!n.needs) throw NumericError("gradient requested for a node outside the gradient flow");
        return n.grad;
    }

    // Force gradient tracking for an intermediate so its grad survives even
    // when no parameter leaf feeds it (used for attention map extraction).
    void retain(Var v) {
        Node& n = node(v, "retain");
        if (!n.needs) {
            n.needs = true;
            n.grad = Tensor(n.value.shape());
        }
    }

    void backward(Var loss) {
        Node& ln = node(loss, "backward");
        if (backward_done_) throw NumericError("backward() called twice on one tape");
        if (ln.value.size() != 1)
            throw ShapeError("backward() needs a scalar loss, got " + shape_str(ln.value.shape()));
        if (!ln.needs)
            throw NumericError("backward() on a loss with no gradient path (all inputs constant)");
        ln.grad.at(0) = 1.0;
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.needs && n.back) n.back();
        }
        for (Node& n : nodes_) {
            if (n.bound) {
                std::vector<double>& g = n.bound->grad();
                for (size_t k = 0; k < g.size(); ++k) g[k] += n.grad.at(k);
            }
        }
        backward_done_ = true;
    }

    // ------------------------------------------------------------------
    // elementwise and broadcast ops
    // ------------------------------------------------------------------

    Var add(Var a, Var b) {
        check_same_shape(a, b, "add");
        Tensor out = val(a);
        const Tensor& tb = val(b);
        for (size_t i = 0; i < out.size(); ++i) out.at(i) += tb.at(i);
        Var o = push(std::move(out), wants_grad(a) || wants_grad(b));
        record(o, [this, o, a, b] {
            const Tensor& g = nodes_[o.id].grad;
            accum(a, [&](size_t i) { return g.at(i); });
            accum(b, [&](size_t i) { return g.at(i); });
        });
        return o;
    }

    Var sub(Var a, Var b) {
        check_same_shape(a, b, "sub");
        Tensor out = val(a);
        const Tensor& tb = val(b);
        for (size_t i = 0; i < out.size(); ++i) out.at(i) -= tb.at(i);
        Var o = push(std::move(out), wants_grad(a) || wants_grad(b));
        record(o, [this, o, a, b] {
            const Tensor& g = nodes_[o.id].grad;
            accum(a, [&](size_t i) { return g.at(i); });
            accum(b, [&](size_t i) { return -g.at(i); });
        });
        return o;
    }

    Var mul(Var a, Var b) {
        check_same_shape(a, b, "mul");
        Tensor out = val(a);
        const Tensor& tb = val(b);
        for (size_t i = 0; i < out.size(); ++i) out.at(i) *= tb.at(i);
        Var o = push(std::move(out), wants_grad(a) || wants_grad(b));
        record(o, [this, o, a, b] {
            const Tensor& g = nodes_[o.id].grad;
            const Tensor& ta = nodes_[a.id].value;
            const Tensor& tb2 = nodes_[b.id].value;
            accum(a, [&](size_t i) { return g.at(i) * tb2.at(i); });
            accum(b, [&](size_t i) { return g.at(i) * ta.at(i); });
        });
        return o;
    }

    Var scale(Var a, double c) {
        Tensor out = val(a);
        for (size_t i = 0; i < out.size(); ++i) out.at(i) *= c;
        Var o = push(std::move(out), wants_grad(a));
        record(o, [this, o, a, c] {
            const Tensor& g = nodes_[o.id].grad;
            accum(a, [&](size_t i) { return c * g.at(i); });
        });
        return o;
    }

    // X: [r x c] plus a [1 x c] (or rank-1 [c]) row vector broadcast over rows.
    Var add_rowvec(Var x, Var b) {
        const Tensor& tx = val(x);
        const Tensor& tb = val(b);
        if (tb.cols() != tx.cols() || tb.rows() != 1)
            throw ShapeError("add_rowvec: " + shape_str(tx.shape()) + " + " + shape_str(tb.shape()));
        Tensor out = tx;
        const size_t r = tx.rows(), c = tx.cols();
        for (size_t i = 0; i < r; ++i)
            for (size_t j = 0; j < c; ++j) out.at(i * c + j) += tb.at(j);
        Var o = push(std::move(out), wants_grad(x) || wants_grad(b));
        record(o, [this, o, x, b, r, c] {
            const Tensor& g = nodes_[o.id].grad;
            accum(x, [&](size_t i) { return g.at(i); });
            if (wants_grad(b)) {
                Tensor& gb = nodes_[b.id].grad;
                for (size_t i = 0; i < r; ++i)
                    for (size_t j = 0; j < c; ++j) gb.at(j) += g.at(i * c + j);
            }
        });
        return o;
    }

    // ------------------------------------------------------------------
    // matrix products
    // ------------------------------------------------------------------

    Var matmul(Var a, Var b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (ta.cols() != tb.rows())
            throw ShapeError("matmul: " + shape_str(ta.shape()) + " * " + shape_str(tb.shape()));
        const size_t m = ta.rows(), k = ta.cols(), n = tb.cols();
        Tensor out(Shape{m, n});
        detail::mm_acc(ta.data(), tb.data(), out.data(), m, k, n);
        Var o = push(std::move(out), wants_grad(a) || wants_grad(b));
        record(o, [this, o, a, b, m, k, n] {
            const Tensor& g = nodes_[o.id].grad;
            if (wants_grad(a))
                detail::mm_nt_acc(g.data(), nodes_[b.id].value.data(), nodes_[a.id].grad.data(), m, n, k);
            if (wants_grad(b))
                detail::mm_tn_acc(nodes_[a.id].value.data(), g.data(), nodes_[b.id].grad.data(), m, k, n);
        });
        return o;
    }

    // A * B^T with A: [m x k], B: [n x k].
    Var matmul_nt(Var a, Var b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (ta.cols() != tb.cols())
            throw ShapeError("matmul_nt: " + shape_str(ta.shape()) + " * " + shape_str(tb.shape()) + "^T");
        const size_t m = ta.rows(), k = ta.cols(), n = tb.rows();
        Tensor out(Shape{m, n});
        detail::mm_nt_acc(ta.data(), tb.data(), out.data(), m, k, n);
        Var o = push(std::move(out), wants_grad(a) || wants_grad(b));
        record(o, [this, o, a, b, m, k, n] {
            const Tensor& g = nodes_[o.id].grad;  // [m x n]
            if (wants_grad(a))
                detail::mm_acc(g.data(), nodes_[b.id].value.data(), nodes_[a.id].grad.data(), m, n, k);
            if (wants_grad(b))
                detail::mm_tn_acc(g.data(), nodes_[a.id].value.data(), nodes_[b.id].grad.data(), m, n, k);
        });
        return o;
    }

    // ------------------------------------------------------------------
    // nonlinearities and normalizations
    // ------------------------------------------------------------------

    Var relu(Var a) {
        Tensor out = val(a);
        for (size_t i = 0; i < out.size(); ++i) out.at(i) = std::max(0.0, out.at(i));
        Var o = push(std::move(out), wants_grad(a));
        record(o, [this, o, a] {
            const Tensor& g = nodes_[o.id].grad;
            const Tensor& ta = nodes_[a.id].value;
            accum(a, [&](size_t i) { return ta.at(i) > 0.0 ? g.at(i) : 0.0; });
        });
        return o;
    }

    // Row-wise softmax over the first valid_cols columns (0 means all).
    // Masked-out columns read as probability zero; used for [PAD] masking.
    Var softmax_rows(Var a, size_t valid_cols = 0) {
        const Tensor& ta = val(a);
        const size_t r = ta.rows(), c = ta.cols();
        const size_t vc = valid_cols == 0 ? c : valid_cols;
        if (vc > c) throw ShapeError("softmax_rows: valid_cols exceeds column count");
        Tensor out(Shape{r, c});
        for (size_t i = 0; i < r; ++i) {
            const double* in = ta.data() + i * c;
            double* po = out.data() + i * c;
            double mx = in[0];
            for (size_t j = 1; j < vc; ++j) mx = std::max(mx, in[j]);
            double z = 0.0;
            for (size_t j = 0; j < vc; ++j) {
                po[j] = std::exp(in[j] - mx);
                z += po[j];
            }
            for (size_t j = 0; j < vc; ++j) po[j] /= z;
        }
        Var o = push(std::move(out), wants_grad(a));
        record(o, [this, o, a, r, c, vc] {
            if (!wants_grad(a)) return;
            const Tensor& g = nodes_[o.id].grad;
            const Tensor& y = nodes_[o.id].value;
            Tensor& ga = nodes_[a.id].grad;
            for (size_t i = 0; i < r; ++i) {
                const double* gr = g.data() + i * c;
                const double* yr = y.data() + i * c;
                double dot = 0.0;
                for (size_t j = 0; j < vc; ++j) dot += gr[j] * yr[j];
                double* gar = ga.data() + i * c;
                for (size_t j = 0; j < vc; ++j) gar[j] += (gr[j] - dot) * yr[j];
            }
        });
        return o;
    }

    // Row-wise layer norm with learnable gain/shift ([1 x c] each).
    Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
        const Tensor& tx = val(x);
        const size_t r = tx.rows(), c = tx.cols();
        if (val(gamma).size() != c || val(beta).size() != c)
            throw ShapeError("layer_norm: gain/shift must have " + std::to_string(c) + " entries");
        Tensor out(Shape{r, c});
        Tensor xhat(Shape{r, c});
        std::vector<double> inv_sd(r);
        const Tensor& tg = val(gamma);
        const Tensor& tb = val(beta);
        for (size_t i = 0; i < r; ++i) {
            const double* in = tx.data() + i * c;
            double mu = 0.0;
            for (size_t j = 0; j < c; ++j) mu += in[j];
            mu /= static_cast<double>(c);
            double var = 0.0;
            for (size_t j = 0; j < c; ++j) var += (in[j] - mu) * (in[j] - mu);
            var /= static_cast<double>(c);
            const double inv = 1.0 / std::sqrt(var + eps);
            inv_sd[i] = inv;
            for (size_t j = 0; j < c; ++j) {
                const double xh = (in[j] - mu) * inv;
                xhat.at(i * c + j) = xh;
                out.at(i * c + j) = tg.at(j) * xh + tb.at(j);
            }
        }
        Var o = push(std::move(out), wants_grad(x) || wants_grad(gamma) || wants_grad(beta));
        record(o, [this, o, x, gamma, beta, r, c, xh = std::move(xhat), inv = std::move(inv_sd)] {
            const Tensor& g = nodes_[o.id].grad;
            const Tensor& tg = nodes_[gamma.id].value;
            if (wants_grad(gamma)) {
                Tensor& gg = nodes_[gamma.id].grad;
                for (size_t i = 0; i < r; ++i)
                    for (size_t j = 0; j < c; ++j) gg.at(j) += g.at(i * c + j) * xh.at(i * c + j);
            }
            if (wants_grad(beta)) {
                Tensor& gb = nodes_[beta.id].grad;
                for (size_t i = 0; i < r; ++i)
                    for (size_t j = 0; j < c; ++j) gb.at(j) += g.at(i * c + j);
            }
            if (wants_grad(x)) {
                Tensor& gx = nodes_[x.id].grad;
                for (size_t i = 0; i < r; ++i) {
                    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                    for (size_t j = 0; j < c; ++j) {
                        const double dxh = g.at(i * c + j) * tg.at(j);
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh.at(i * c + j);
                    }
                    mean_dxh /= static_cast<double>(c);
                    mean_dxh_xh /= static_cast<double>(c);
                    for (size_t j = 0; j < c; ++j) {
                        const double dxh = g.at(i * c + j) * tg.at(j);
                        gx.at(i * c + j) += inv[i] * (dxh - mean_dxh - xh.at(i * c + j) * mean_dxh_xh);
                    }
                }
            }
        });
        return o;
    }

    // Rows scaled to unit L2 norm (norms below eps are clamped).
    Var l2_normalize_rows(Var x, double eps = 1e-12) {
        const Tensor& tx = val(x);
        const size_t r = tx.rows(), c = tx.cols();
        Tensor out(Shape{r, c});
        std::vector<double> norms(r);
        for (size_t i = 0; i < r; ++i) {
            const double* in = tx.data() + i * c;
            double s = 0.0;
            for (size_t j = 0; j < c; ++j) s += in[j] * in[j];
            const double n = std::max(std::sqrt(s), eps);
            norms[i] = n;
            for (size_t j = 0; j < c; ++j) out.at(i * c + j) = in[j] / n;
        }
        Var o = push(std::move(out), wants_grad(x));
        record(o, [this, o, x, r, c, ns = std::move(norms)] {
            if (!wants_grad(x)) return;
            const Tensor& g = nodes_[o.id].grad;
            const Tensor& y = nodes_[o.id].value;
            Tensor& gx = nodes_[x.id].grad;
            for (size_t i = 0; i < r; ++i) {
                const double* gr = g.data() + i * c;
                const double* yr = y.data() + i * c;
                double dot = 0.0;
                for (size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
                for (size_t j = 0; j < c; ++j) gx.at(i * c + j) += (gr[j] - yr[j] * dot) / ns[i];
            }
        });
        return o;
    }

    // ------------------------------------------------------------------
    // reductions and losses
    // ------------------------------------------------------------------

    Var sum(Var a) {
        const Tensor& ta = val(a);
        double s = 0.0;
        for (size_t i = 0; i < ta.size(); ++i) s += ta.at(i);
        Var o = push(Tensor::scalar(s), wants_grad(a));
        record(o, [this, o, a] {
            const double g = nodes_[o.id].grad.at(0);
            accum(a, [&](size_t) { return g; });
        });
        return o;
    }

    Var l1_sum(Var a) {
        const Tensor& ta = val(a);
        double s = 0.0;
        for (size_t i = 0; i < ta.size(); ++i) s += std::abs(ta.at(i));
        Var o = push(Tensor::scalar(s), wants_grad(a));
        record(o, [this, o, a] {
            const double g = nodes_[o.id].grad.at(0);
            const Tensor& ta2 = nodes_[a.id].value;
            accum(a, [&](size_t i) {
                const double v = ta2.at(i);
                return v > 0.0 ? g : (v < 0.0 ? -g : 0.0);
            });
        });
        return o;
    }

    // Column means over rows: [r x c] -> [1 x c].
    Var mean_rows(Var a) {
        const Tensor& ta = val(a);
        const size_t r = ta.rows(), c = ta.cols();
        if (r == 0) throw ShapeError("mean_rows on empty tensor");
        Tensor out(Shape{1, c});
        for (size_t i = 0; i < r; ++i)
            for (size_t j = 0; j < c; ++j) out.at(j) += ta.at(i * c + j);
        for (size_t j = 0; j < c; ++j) out.at(j) /= static_cast<double>(r);
        Var o = push(std::move(out), wants_grad(a));
        record(o, [this, o, a, r, c] {
            const Tensor& g = nodes_[o.id].grad;
            Tensor& ga = nodes_[a.id].grad;
            if (!wants_grad(a)) return;
            for (size_t i = 0; i < r; ++i)
                for (size_t j = 0; j < c; ++j) ga.at(i * c + j) += g.at(j) / static_cast<double>(r);
        });
        return o;
    }

    // Mean cross entropy over rows against fixed soft targets (rows sum to 1).
    Var cross_entropy(Var logits, const Tensor& targets) {
        const Tensor& tl = val(logits);
        const size_t r = tl.rows(), c = tl.cols();
        if (targets.rows() != r || targets.cols() != c)
            throw ShapeError("cross_entropy: logits " + shape_str(tl.shape()) + " vs targets " +
                             shape_str(targets.shape()));
        for (size_t i = 0; i < r; ++i) {
            double s = 0.0;
            for (size_t j = 0; j < c; ++j) s += targets.at(i * c + j);
            if (std::abs(s - 1.0) > 1e-6)
                throw ShapeError("cross_entropy: target row " + std::to_string(i) + " sums to " +
                                 std::to_string(s) + ", expected 1");
        }
        Tensor probs(Shape{r, c});
        double loss = 0.0;
        for (size_t i = 0; i < r; ++i) {
            const double* in = tl.data() + i * c;
            double mx = in[0];
            for (size_t j = 1; j < c; ++j) mx = std::max(mx, in[j]);
            double z = 0.0;
            for (size_t j = 0; j < c; ++j) z += std::exp(in[j] - mx);
            const double logz = std::log(z) + mx;
            for (size_t j = 0; j < c; ++j) {
                const double logp = in[j] - logz;
                probs.at(i * c + j) = std::exp(logp);
                loss -= targets.at(i * c + j) * logp;
            }
        }
        loss /= static_cast<double>(r);
        Var o = push(Tensor::scalar(loss), wants_grad(logits));
        record(o, [this, o, logits, r, c, p = std::move(probs), t = targets] {
            if (!wants_grad(logits)) return;
            const double g = nodes_[o.id].grad.at(0) / static_cast<double>(r);
            Tensor& gl = nodes_[logits.id].grad;
            for (size_t i = 0; i < r * c; ++i) gl.at(i) += g * (p.at(i) - t.at(i));
        });
        return o;
    }

    Var cross_entropy(Var logits, const std::vector<size_t>& classes) {
        const Tensor& tl = val(logits);
        const size_t r = tl.rows(), c = tl.cols();
        if (classes.size() != r)
            throw ShapeError("cross_entropy: " + std::to_string(classes.size()) + " labels for " +
                             std::to_string(r) + " rows");
        Tensor onehot(Shape{r, c});
        for (size_t i = 0; i < r; ++i) {
            if (classes[i] >= c)
                throw ShapeError("cross_entropy: label " + std::to_string(classes[i]) + " out of range [0," +
                                 std::to_string(c) + ")");
            onehot.at(i * c + classes[i]) = 1.0;
        }
        return cross_entropy(logits, onehot);
    }

    // ------------------------------------------------------------------
    // indexing and assembly
    // ------------------------------------------------------------------

    Var row_slice(Var a, size_t r0, size_t r1) {
        const Tensor& ta = val(a);
        const size_t r = ta.rows(), c = ta.cols();
        if (r0 >= r1 || r1 > r)
            throw ShapeError("row_slice [" + std::to_string(r0) + "," + std::to_string(r1) + ") of " +
                             shape_str(ta.shape()));
        Tensor out(Shape{r1 - r0, c});
        std::copy(ta.data() + r0 * c, ta.data() + r1 * c, out.data());
        Var o = push(std::move(out), wants_grad(a));
        record(o, [this, o, a, r0, r1, c] {
            const Tensor& g = nodes_[o.id].grad;
            Tensor& ga = nodes_[a.id].grad;
            if (!wants_grad(a)) return;
            for (size_t i = 0; i < (r1 - r0) * c; ++i) ga.at(r0 * c + i) += g.at(i);
        });
        return o;
    }

    Var col_slice(Var a, size_t c0, size_t c1) {
        const Tensor& ta = val(a);
        const size_t r = ta.rows(), c = ta.cols();
        if (c0 >= c1 || c1 > c)
            throw ShapeError("col_slice [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " +
                             shape_str(ta.shape()));
        const size_t w = c1 - c0;
        Tensor out(Shape{r, w});
        for (size_t i = 0; i < r; ++i)
            std::copy(ta.data() + i * c + c0, ta.data() + i * c + c1, out.data() + i * w);
        Var o = push(std::move(out), wants_grad(a));
        record(o, [this, o, a, r, c, c0, w] {
            const Tensor& g = nodes_[o.id].grad;
            Tensor& ga = nodes_[a.id].grad;
            if (!wants_grad(a)) return;
            for (size_t i = 0; i < r; ++i)
                for (size_t j = 0; j < w; ++j) ga.at(i * c + c0 + j) += g.at(i * w + j);
        });
        return o;
    }

    Var cell(Var a, size_t r, size_t c) {
        const Tensor& ta = val(a);
        if (r >= ta.rows() || c >= ta.cols())
            throw ShapeError("cell (" + std::to_string(r) + "," + std::to_string(c) + ") of " +
                             shape_str(ta.shape()));
        const size_t idx = r * ta.cols() + c;
        Var o = push(Tensor::scalar(ta.at(idx)), wants_grad(a));
        record(o, [this, o, a, idx] {
            if (!wants_grad(a)) return;
            nodes_[a.id].grad.at(idx) += nodes_[o.id].grad.at(0);
        });
        return o;
    }

    Var gather_rows(Var a, std::vector<size_t> rows) {
        const Tensor& ta = val(a);
        const size_t r = ta.rows(), c = ta.cols();
        for (size_t idx : rows)
            if (idx >= r) throw ShapeError("gather_rows: row " + std::to_string(idx) + " out of range");
        Tensor out(Shape{rows.size(), c});
        for (size_t i = 0; i < rows.size(); ++i)
            std::copy(ta.data() + rows[i] * c, ta.data() + (rows[i] + 1) * c, out.data() + i * c);
        Var o = push(std::move(out), wants_grad(a));
        record(o, [this, o, a, c, idxs = std::move(rows)] {
            if (!wants_grad(a)) return;
            const Tensor& g = nodes_[o.id].grad;
            Tensor& ga = nodes_[a.id].grad;
            for (size_t i = 0; i < idxs.size(); ++i)
                for (size_t j = 0; j < c; ++j) ga.at(idxs[i] * c + j) += g.at(i * c + j);
        });
        return o;
    }

    Var hconcat(const std::vector<Var>& parts) {
        if (parts.empty()) throw ShapeError("hconcat of zero tensors");
        const size_t r = val(parts[0]).rows();
        size_t total = 0;
        bool req = false;
        for (Var p : parts) {
            if (val(p).rows() != r) throw ShapeError("hconcat: row counts differ");
            total += val(p).cols();
            req = req || wants_grad(p);
        }
        Tensor out(Shape{r, total});
        size_t off = 0;
        for (Var p : parts) {
            const Tensor& tp = val(p);
            for (size_t i = 0; i < r; ++i)
                std::copy(tp.data() + i * tp.cols(), tp.data() + (i + 1) * tp.cols(),
                          out.data() + i * total + off);
            off += tp.cols();
        }
        Var o = push(std::move(out), req);
        record(o, [this, o, ps = parts, r, total] {
            const Tensor& g = nodes_[o.id].grad;
            size_t off2 = 0;
            for (Var p : ps) {
                const size_t pc = nodes_[p.id].value.cols();
                if (wants_grad(p)) {
                    Tensor& gp = nodes_[p.id].grad;
                    for (size_t i = 0; i < r; ++i)
                        for (size_t j = 0; j < pc; ++j) gp.at(i * pc + j) += g.at(i * total + off2 + j);
                }
                off2 += pc;
            }
        });
        return o;
    }

    Var vstack(const std::vector<Var>& parts) {
        if (parts.empty()) throw ShapeError("vstack of zero tensors");
        const size_t c = val(parts[0]).cols();
        size_t total = 0;
        bool req = false;
        for (Var p : parts) {
            if (val(p).cols() != c) throw ShapeError("vstack: column counts differ");
            total += val(p).rows();
            req = req || wants_grad(p);
        }
        Tensor out(Shape{total, c});
        size_t off = 0;
        for (Var p : parts) {
            const Tensor& tp = val(p);
            std::copy(tp.data(), tp.data() + tp.size(), out.data() + off * c);
            off += tp.rows();
        }
        Var o = push(std::move(out), req);
        record(o, [this, o, ps = parts, c] {
            const Tensor& g = nodes_[o.id].grad;
            size_t off2 = 0;
            for (Var p : ps) {
                const size_t pr = nodes_[p.id].value.rows();
                if (wants_grad(p)) {
                    Tensor& gp = nodes_[p.id].grad;
                    for (size_t i = 0; i < pr * c; ++i) gp.at(i) += g.at(off2 * c + i);
                }
                off2 += pr;
            }
        });
        return o;
    }

    // Row lookup into an embedding table, ids may repeat (grads scatter-add).
    Var embedding(Var table, const std::vector<int>& ids) {
        const Tensor& tt = val(table);
        const size_t v = tt.rows(), d = tt.cols();
        Tensor out(Shape{ids.size(), d});
        for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || static_cast<size_t>(ids[i]) >= v)
                throw ShapeError("embedding: id " + std::to_string(ids[i]) + " out of range [0," +
                                 std::to_string(v) + ")");
            std::copy(tt.data() + static_cast<size_t>(ids[i]) * d, tt.data() + (static_cast<size_t>(ids[i]) + 1) * d,
                      out.data() + i * d);
        }
        Var o = push(std::move(out), wants_grad(table));
        record(o, [this, o, table, d, ids2 = ids] {
            if (!wants_grad(table)) return;
            const Tensor& g = nodes_[o.id].grad;
            Tensor& gt = nodes_[table.id].grad;
            for (size_t i = 0; i < ids2.size(); ++i)
                for (size_t j = 0; j < d; ++j) gt.at(static_cast<size_t>(ids2[i]) * d + j) += g.at(i * d + j);
        });
        return o;
    }

  private:
    struct Node {
        Tensor value;
        Tensor grad;  // allocated only when requires
        bool needs = false;
        Tensor* bound = nullptr;
        std::function<void()> back;
    };

    std::vector<Node> nodes_;
    bool backward_done_ = false;

    Var push(Tensor t, bool req) {
        Node n;
        n.value = std::move(t);
        n.needs = req;
        if (req) n.grad = Tensor(n.value.shape());
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    Node& node(Var v, const char* what) {
        if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
            throw ShapeError(std::string(what) + ": var does not belong to this tape");
        return nodes_[static_cast<size_t>(v.id)];
    }
    const Node& node(Var v, const char* what) const {
        return const_cast<Tape*>(this)->node(v, what);
    }

    const Tensor& val(Var v) { return node(v, "op input").value; }
    bool wants_grad(Var v) { return node(v, "op input").needs; }

    void record(Var out, std::function<void()> back) {
        if (nodes_[out.id].needs) nodes_[out.id].back = std::move(back);
    }

    template <typename F>
    void accum(Var v, F&& per_element) {
        Node& n = nodes_[v.id];
        if (!n.needs) return;
        for (size_t i = 0; i < n.grad.size(); ++i) n.grad.at(i) += per_element(i);
    }

    void check_same_shape(Var a, Var b, const char* op) {
        if (val(a).shape() != val(b).shape())
            throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(val(a).shape()) + " vs " +
                             shape_str(val(b).shape()));
    }
};

}  // namespace hist

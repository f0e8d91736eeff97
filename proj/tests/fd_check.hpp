#pragma once

// Central-difference gradient oracle shared by the unit tests and the
// acceptance suite. Analytic gradients come from one tape backward pass;
// numeric ones re-evaluate the same builder at x +- h per element.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "hist/tape.hpp"

namespace histtest {

using BuildFn = std::function<hist::Var(hist::Tape&, const std::vector<hist::Var>&)>;

inline double eval_scalar(const BuildFn& build, const std::vector<hist::Tensor>& inputs) {
    hist::Tape tape;
    std::vector<hist::Var> vars;
    vars.reserve(inputs.size());
    for (const auto& t : inputs) vars.push_back(tape.constant(t));
    return tape.value(build(tape, vars)).at(0);
}

struct FdReport {
    double max_rel = 0.0;
    size_t checked = 0;
};

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max(std::abs(a) + std::abs(b), 1e-6);
}

inline FdReport fd_compare(const BuildFn& build, std::vector<hist::Tensor> inputs, double h = 1e-5) {
    for (auto& t : inputs) t.set_requires_grad(true);

    hist::Tape tape;
    std::vector<hist::Var> vars;
    for (auto& t : inputs) vars.push_back(tape.leaf(t));
    tape.backward(build(tape, vars));

    FdReport rep;
    for (auto& t : inputs) {
        for (size_t i = 0; i < t.size(); ++i) {
            const double keep = t.at(i);
            t.at(i) = keep + h;
            const double fp = eval_scalar(build, inputs);
            t.at(i) = keep - h;
            const double fm = eval_scalar(build, inputs);
            t.at(i) = keep;
            const double fd = (fp - fm) / (2.0 * h);
            rep.max_rel = std::max(rep.max_rel, rel_err(t.grad()[i], fd));
            ++rep.checked;
        }
    }
    return rep;
}

// Uniform values in [lo, hi] with |v| >= min_abs (keeps relu/l1 probes away
// from their kinks).
inline hist::Tensor rand_tensor(hist::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                                double min_abs = 0.0) {
    hist::Tensor t(shape);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (size_t i = 0; i < t.size(); ++i) {
        double v = dist(rng);
        while (min_abs > 0.0 && std::abs(v) < min_abs) v = dist(rng);
        t.at(i) = v;
    }
    return t;
}

}  // namespace histtest

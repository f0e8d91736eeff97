#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <sstream>

#include "fd_check.hpp"
#include "hist/tape.hpp"
#include "hist/tensor.hpp"

using namespace hist;
using Catch::Approx;
using histtest::fd_compare;
using histtest::rand_tensor;

TEST_CASE("tensor shape and storage", "[tensor]") {
    Tensor t(Shape{2, 3}, 1.5);
    REQUIRE(t.size() == 6);
    REQUIRE(t.rows() == 2);
    REQUIRE(t.cols() == 3);
    t.at2(1, 2) = 7.0;
    REQUIRE(t.at(5) == 7.0);

    REQUIRE_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1.0}), ShapeError);
    REQUIRE_THROWS_AS(t.reshaped(Shape{5}), ShapeError);

    Tensor cube(Shape{2, 2, 2}, 3.0);
    REQUIRE(cube.rank() == 3);
    REQUIRE_THROWS_AS(cube.rows(), ShapeError);
    Tensor flat = cube.reshaped(Shape{4, 2});
    REQUIRE(flat.rows() == 4);

    Tensor r1(Shape{4}, std::vector<double>{1, 2, 3, 4});
    REQUIRE(r1.rows() == 1);
    REQUIRE(r1.cols() == 4);
}

TEST_CASE("tensor blob round trip", "[tensor][io]") {
    std::mt19937_64 rng(99);
    Tensor t = rand_tensor(Shape{3, 2, 5}, rng);

    SECTION("stream round trip preserves shape and bits") {
        std::stringstream ss;
        save_tensor_blob(t, ss);
        Tensor back = load_tensor_blob(ss);
        REQUIRE(back.shape() == t.shape());
        for (size_t i = 0; i < t.size(); ++i) REQUIRE(back.at(i) == t.at(i));
    }

    SECTION("file round trip") {
        auto path = std::filesystem::temp_directory_path() / "hist_blob_test.hten";
        save_tensor_file(t, path.string());
        Tensor back = load_tensor_file(path.string());
        REQUIRE(back.shape() == t.shape());
        for (size_t i = 0; i < t.size(); ++i) REQUIRE(back.at(i) == t.at(i));
        std::filesystem::remove(path);
    }

    SECTION("bad magic is rejected") {
        std::stringstream ss;
        ss << "NOPE garbage";
        REQUIRE_THROWS_AS(load_tensor_blob(ss), DataError);
    }

    SECTION("truncated payload is rejected") {
        std::stringstream ss;
        save_tensor_blob(t, ss);
        std::string bytes = ss.str();
        std::stringstream cut(bytes.substr(0, bytes.size() - 9));
        REQUIRE_THROWS_AS(load_tensor_blob(cut), DataError);
    }

    SECTION("unknown version is rejected") {
        std::stringstream ss;
        ss << "HTEN";
        uint32_t bad[2] = {kTensorBlobVersion + 7, 1};
        ss.write(reinterpret_cast<const char*>(bad), sizeof(bad));
        uint64_t ext = 1;
        ss.write(reinterpret_cast<const char*>(&ext), sizeof(ext));
        double v = 0.0;
        ss.write(reinterpret_cast<const char*>(&v), sizeof(v));
        REQUIRE_THROWS_AS(load_tensor_blob(ss), DataError);
    }
}

TEST_CASE("op forward values", "[tape]") {
    Tape tape;

    SECTION("matmul 1x2 by 2x1") {
        Var a = tape.constant(Tensor(Shape{1, 2}, {1, 2}));
        Var b = tape.constant(Tensor(Shape{2, 1}, {3, 4}));
        Var c = tape.matmul(a, b);
        REQUIRE(tape.value(c).at(0) == 11.0);
        REQUIRE_THROWS_AS(tape.matmul(a, a), ShapeError);
    }

    SECTION("softmax survives huge logits") {
        Var x = tape.constant(Tensor(Shape{1, 2}, {1000.0, 0.0}));
        Var y = tape.softmax_rows(x);
        REQUIRE(tape.value(y).at(0) == Approx(1.0).margin(1e-12));
        REQUIRE(tape.value(y).at(1) == Approx(0.0).margin(1e-12));
    }

    SECTION("softmax rows sum to one") {
        std::mt19937_64 rng(5);
        Var x = tape.constant(rand_tensor(Shape{4, 7}, rng, -3.0, 3.0));
        Var y = tape.softmax_rows(x);
        for (size_t i = 0; i < 4; ++i) {
            double s = 0.0;
            for (size_t j = 0; j < 7; ++j) s += tape.value(y).at2(i, j);
            REQUIRE(s == Approx(1.0).margin(1e-12));
        }
    }

    SECTION("masked softmax ignores masked columns") {
        Tensor base(Shape{2, 4}, {0.3, -0.7, 5.0, 5.0, 1.0, 2.0, -9.0, 0.0});
        Tensor tweaked = base;
        tweaked.at2(0, 2) = -123.0;
        tweaked.at2(1, 3) = 77.0;
        Var a = tape.constant(base);
        Var b = tape.constant(tweaked);
        Var ya = tape.softmax_rows(a, 2);
        Var yb = tape.softmax_rows(b, 2);
        for (size_t i = 0; i < 8; ++i) REQUIRE(tape.value(ya).at(i) == tape.value(yb).at(i));
        REQUIRE(tape.value(ya).at2(0, 2) == 0.0);
        REQUIRE(tape.value(ya).at2(0, 3) == 0.0);
        REQUIRE(tape.value(ya).at2(0, 0) + tape.value(ya).at2(0, 1) == Approx(1.0).margin(1e-12));
    }

    SECTION("cross entropy frozen values") {
        Var z = tape.constant(Tensor(Shape{1, 2}, {0.0, 0.0}));
        Var l = tape.cross_entropy(z, std::vector<size_t>{0});
        REQUIRE(tape.value(l).at(0) == Approx(std::log(2.0)).margin(1e-12));

        Var conf = tape.constant(Tensor(Shape{1, 2}, {100.0, -100.0}));
        Var l2 = tape.cross_entropy(conf, std::vector<size_t>{0});
        REQUIRE(tape.value(l2).at(0) == Approx(0.0).margin(1e-12));

        REQUIRE_THROWS_AS(tape.cross_entropy(z, std::vector<size_t>{2}), ShapeError);
        Tensor bad_targets(Shape{1, 2}, {0.9, 0.3});
        REQUIRE_THROWS_AS(tape.cross_entropy(z, bad_targets), ShapeError);
    }

    SECTION("l2 normalize produces unit rows") {
        std::mt19937_64 rng(11);
        Var x = tape.constant(rand_tensor(Shape{3, 5}, rng, -2.0, 2.0, 0.1));
        Var y = tape.l2_normalize_rows(x);
        for (size_t i = 0; i < 3; ++i) {
            double s = 0.0;
            for (size_t j = 0; j < 5; ++j) s += tape.value(y).at2(i, j) * tape.value(y).at2(i, j);
            REQUIRE(s == Approx(1.0).margin(1e-12));
        }
    }

    SECTION("layer norm standardizes rows") {
        std::mt19937_64 rng(12);
        Var x = tape.constant(rand_tensor(Shape{2, 8}, rng, -4.0, 4.0));
        Var g = tape.constant(Tensor(Shape{1, 8}, 1.0));
        Var b = tape.constant(Tensor(Shape{1, 8}, 0.0));
        Var y = tape.layer_norm(x, g, b);
        for (size_t i = 0; i < 2; ++i) {
            double mu = 0.0, var = 0.0;
            for (size_t j = 0; j < 8; ++j) mu += tape.value(y).at2(i, j);
            mu /= 8.0;
            for (size_t j = 0; j < 8; ++j) {
                double d = tape.value(y).at2(i, j) - mu;
                var += d * d;
            }
            var /= 8.0;
            REQUIRE(mu == Approx(0.0).margin(1e-9));
            REQUIRE(var == Approx(1.0).margin(1e-3));
        }
    }

    SECTION("assembly ops") {
        Var a = tape.constant(Tensor(Shape{2, 2}, {1, 2, 3, 4}));
        Var b = tape.constant(Tensor(Shape{2, 1}, {5, 6}));
        Var h = tape.hconcat({a, b});
        REQUIRE(tape.value(h).shape() == Shape{2, 3});
        REQUIRE(tape.value(h).at2(0, 2) == 5.0);
        REQUIRE(tape.value(h).at2(1, 1) == 4.0);

        Var v = tape.vstack({a, tape.constant(Tensor(Shape{1, 2}, {9, 10}))});
        REQUIRE(tape.value(v).shape() == Shape{3, 2});
        REQUIRE(tape.value(v).at2(2, 1) == 10.0);

        Var rs = tape.row_slice(a, 1, 2);
        REQUIRE(tape.value(rs).at(0) == 3.0);
        Var cs = tape.col_slice(a, 1, 2);
        REQUIRE(tape.value(cs).at(1) == 4.0);
        Var gr = tape.gather_rows(a, {1, 0, 1});
        REQUIRE(tape.value(gr).rows() == 3);
        REQUIRE(tape.value(gr).at2(0, 0) == 3.0);
        REQUIRE(tape.value(gr).at2(2, 1) == 4.0);
        REQUIRE(tape.value(tape.cell(a, 1, 0)).at(0) == 3.0);

        Var emb = tape.embedding(a, {1, 1, 0});
        REQUIRE(tape.value(emb).at2(1, 0) == 3.0);
        REQUIRE_THROWS_AS(tape.embedding(a, {5}), ShapeError);

        Var m = tape.mean_rows(a);
        REQUIRE(tape.value(m).at(0) == 2.0);
        REQUIRE(tape.value(m).at(1) == 3.0);
    }
}

TEST_CASE("gradients match central differences", "[tape][grad]") {
    // Each builder reduces to a scalar through a fixed random weighting so
    // upstream gradients are not all ones.
    auto weighted = [](Tape& t, Var v, uint64_t seed) {
        std::mt19937_64 rng(seed);
        return t.sum(t.mul(v, t.constant(rand_tensor(t.value(v).shape(), rng, -1.0, 1.0, 0.2))));
    };

    const double tol = 1e-6;
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        std::mt19937_64 rng(seed * 7919);

        SECTION("elementwise, seed " + std::to_string(seed)) {
            Tensor a = rand_tensor(Shape{3, 4}, rng);
            Tensor b = rand_tensor(Shape{3, 4}, rng);
            auto rep = fd_compare(
                [&](Tape& t, const std::vector<Var>& v) {
                    Var s = t.add(t.mul(v[0], v[1]), t.sub(v[0], t.scale(v[1], 0.7)));
                    return weighted(t, s, seed);
                },
                {a, b});
            REQUIRE(rep.max_rel < tol);
        }

        SECTION("matmul pair, seed " + std::to_string(seed)) {
            Tensor a = rand_tensor(Shape{3, 5}, rng);
            Tensor b = rand_tensor(Shape{5, 2}, rng);
            Tensor c = rand_tensor(Shape{4, 5}, rng);
            auto rep = fd_compare(
                [&](Tape& t, const std::vector<Var>& v) {
                    Var mm = t.matmul(v[0], v[1]);       // 3x2
                    Var nt = t.matmul_nt(v[0], v[2]);    // 3x4
                    return t.add(weighted(t, mm, seed), weighted(t, nt, seed + 1));
                },
                {a, b, c});
            REQUIRE(rep.max_rel < tol);
        }

        SECTION("softmax and masked softmax, seed " + std::to_string(seed)) {
            Tensor x = rand_tensor(Shape{3, 6}, rng, -2.0, 2.0);
            auto rep = fd_compare(
                [&](Tape& t, const std::vector<Var>& v) {
                    Var full = t.softmax_rows(v[0]);
                    Var masked = t.softmax_rows(v[0], 4);
                    return t.add(weighted(t, full, seed), weighted(t, masked, seed + 2));
                },
                {x});
            REQUIRE(rep.max_rel < tol);
        }

        SECTION("layer norm, seed " + std::to_string(seed)) {
            Tensor x = rand_tensor(Shape{3, 6}, rng, -2.0, 2.0);
            Tensor g = rand_tensor(Shape{1, 6}, rng, 0.5, 1.5);
            Tensor b = rand_tensor(Shape{1, 6}, rng, -0.5, 0.5);
            auto rep = fd_compare(
                [&](Tape& t, const std::vector<Var>& v) {
                    return weighted(t, t.layer_norm(v[0], v[1], v[2]), seed);
                },
                {x, g, b});
            REQUIRE(rep.max_rel < tol);
        }

        SECTION("l2 normalize, seed " + std::to_string(seed)) {
            Tensor x = rand_tensor(Shape{3, 5}, rng, -2.0, 2.0, 0.15);
            auto rep = fd_compare(
                [&](Tape& t, const std::vector<Var>& v) {
                    return weighted(t, t.l2_normalize_rows(v[0]), seed);
                },
                {x});
            REQUIRE(rep.max_rel < tol);
        }

        SECTION("relu and l1, seed " + std::to_string(seed)) {
            Tensor x = rand_tensor(Shape{4, 4}, rng, -1.5, 1.5, 0.05);
            auto rep = fd_compare(
                [&](Tape& t, const std::vector<Var>& v) {
                    return t.add(weighted(t, t.relu(v[0]), seed), t.l1_sum(v[0]));
                },
                {x});
            REQUIRE(rep.max_rel < tol);
        }

        SECTION("cross entropy, seed " + std::to_string(seed)) {
            Tensor z = rand_tensor(Shape{4, 5}, rng, -2.0, 2.0);
            Tensor targets(Shape{4, 5});
            std::uniform_real_distribution<double> u(0.05, 1.0);
            for (size_t i = 0; i < 4; ++i) {
                double s = 0.0;
                for (size_t j = 0; j < 5; ++j) {
                    targets.at2(i, j) = u(rng);
                    s += targets.at2(i, j);
                }
                for (size_t j = 0; j < 5; ++j) targets.at2(i, j) /= s;
            }
            auto rep = fd_compare(
                [&](Tape& t, const std::vector<Var>& v) {
                    Var soft = t.cross_entropy(v[0], targets);
                    Var hard = t.cross_entropy(v[0], std::vector<size_t>{1, 0, 4, 2});
                    return t.add(soft, t.scale(hard, 0.5));
                },
                {z});
            REQUIRE(rep.max_rel < tol);
        }

        SECTION("indexing and assembly, seed " + std::to_string(seed)) {
            Tensor a = rand_tensor(Shape{4, 3}, rng);
            Tensor b = rand_tensor(Shape{4, 2}, rng);
            auto rep = fd_compare(
                [&](Tape& t, const std::vector<Var>& v) {
                    Var h = t.hconcat({v[0], v[1]});                    // 4x5
                    Var stack = t.vstack({h, h});                       // 8x5
                    Var rows = t.gather_rows(stack, {0, 3, 3, 6});      // 4x5
                    Var cols = t.col_slice(rows, 1, 4);                 // 4x3
                    Var sl = t.row_slice(cols, 1, 3);                   // 2x3
                    Var c = t.cell(v[0], 2, 1);
                    return t.add(weighted(t, sl, seed), t.add(weighted(t, t.mean_rows(h), seed + 3), c));
                },
                {a, b});
            REQUIRE(rep.max_rel < tol);
        }

        SECTION("embedding and row broadcast, seed " + std::to_string(seed)) {
            Tensor table = rand_tensor(Shape{6, 4}, rng);
            Tensor bias = rand_tensor(Shape{1, 4}, rng);
            auto rep = fd_compare(
                [&](Tape& t, const std::vector<Var>& v) {
                    Var e = t.embedding(v[0], {2, 5, 2, 0});
                    return weighted(t, t.add_rowvec(e, v[1]), seed);
                },
                {table, bias});
            REQUIRE(rep.max_rel < tol);
        }
    }
}

TEST_CASE("backward bookkeeping", "[tape]") {
    SECTION("shared subexpression accumulates") {
        Tensor x(Shape{1, 2}, {3.0, -1.0});
        x.set_requires_grad(true);
        Tape tape;
        Var vx = tape.leaf(x);
        Var loss = tape.sum(tape.add(vx, vx));
        tape.backward(loss);
        REQUIRE(x.grad()[0] == 2.0);
        REQUIRE(x.grad()[1] == 2.0);
    }

    SECTION("leaf grads accumulate across tapes until zeroed") {
        Tensor x(Shape{1, 1}, {2.0});
        x.set_requires_grad(true);
        for (int i = 0; i < 2; ++i) {
            Tape tape;
            Var vx = tape.leaf(x);
            tape.backward(tape.sum(vx));
        }
        REQUIRE(x.grad()[0] == 2.0);
        x.zero_grad();
        REQUIRE(x.grad()[0] == 0.0);
    }

    SECTION("backward misuse") {
        Tensor x(Shape{2, 2}, {1, 2, 3, 4});
        x.set_requires_grad(true);
        Tape tape;
        Var vx = tape.leaf(x);
        Var mat = tape.scale(vx, 2.0);
        REQUIRE_THROWS_AS(tape.backward(mat), ShapeError);  // not scalar
        Var loss = tape.sum(mat);
        tape.backward(loss);
        REQUIRE_THROWS_AS(tape.backward(loss), NumericError);  // second call

        Tape tape2;
        Var c = tape2.constant(Tensor(Shape{1, 1}, {1.0}));
        REQUIRE_THROWS_AS(tape2.backward(tape2.sum(c)), NumericError);  // no grad path
    }

    SECTION("retained intermediates expose grads, constants do not") {
        Tensor w(Shape{2, 2}, {0.5, -0.2, 0.1, 0.9});
        Tape tape;
        Var vw = tape.constant(w);  // parameters held constant
        Var x = tape.constant(Tensor(Shape{1, 2}, {1.0, 2.0}));
        Var scores = tape.matmul(x, vw);
        REQUIRE_THROWS_AS(tape.grad(scores), NumericError);  // before backward

        tape.retain(scores);
        Var attn = tape.softmax_rows(scores);
        Var loss = tape.cell(attn, 0, 1);
        tape.backward(loss);

        const Tensor& g = tape.grad(scores);
        REQUIRE(g.shape() == Shape{1, 2});
        REQUIRE(g.at(0) != 0.0);
        REQUIRE_THROWS_AS(tape.grad(x), NumericError);  // constant stays outside grad flow
    }
}

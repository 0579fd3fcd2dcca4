// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <functional>
#include <random>

#include "tidecast/nn/ops.hpp"

using namespace tidecast;
using namespace tidecast::nn;

namespace {

std::mt19937_64 rng(12345);

Array<double> rand_array(std::vector<int64_t> shape, double scale = 1.0) {
    Array<double> a(std::move(shape));
    std::normal_distribution<double> d(0.0, scale);
    for (auto& x : a.data) x = d(rng);
    return a;
}

NodePtr<double> rand_param(std::vector<int64_t> shape, const char* name, double scale = 1.0) {
    return make_param(rand_array(std::move(shape), scale), name);
}

NodePtr<double> rand_input(std::vector<int64_t> shape, double scale = 1.0) {
    auto n = constant(rand_array(std::move(shape), scale));
    n->requires_grad = true;
    return n;
}

// Central-difference check of d(loss)/d(leaf) for every given leaf.
// make_loss must rebuild the graph from the leaves' current values.
void gradcheck(const std::vector<NodePtr<double>>& leaves,
               const std::function<NodePtr<double>(Tape<double>*)>& make_loss, double tol = 1e-6,
               double h = 1e-5) {
    for (const auto& leaf : leaves) {
        leaf->grad.shape.clear();
        leaf->grad.data.clear();
    }
    Tape<double> tape;
    NodePtr<double> loss = make_loss(&tape);
    REQUIRE(loss->value.numel() == 1);
    loss->ensure_grad();
    loss->grad.data[0] = 1.0;
    tape.backward();

    std::mt19937_64 pick(99);
    for (const auto& leaf : leaves) {
        REQUIRE(leaf->grad.data.size() == leaf->value.data.size());
        const size_t n = leaf->value.data.size();
        const size_t samples = std::min<size_t>(n, 6);
        for (size_t s = 0; s < samples; ++s) {
            const size_t i = pick() % n;
            const double keep = leaf->value.data[i];
            leaf->value.data[i] = keep + h;
            const double fp = make_loss(nullptr)->value.data[0];
            leaf->value.data[i] = keep - h;
            const double fm = make_loss(nullptr)->value.data[0];
            leaf->value.data[i] = keep;
            const double fd = (fp - fm) / (2 * h);
            const double an = leaf->grad.data[i];
            const double err = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
            INFO("leaf ", leaf->name, " index ", i, " analytic ", an, " numeric ", fd);
            CHECK(err <= tol);
        }
    }
}

// Quadratic readout so the scalar depends smoothly on every output entry.
NodePtr<double> readout(Tape<double>* tape, const NodePtr<double>& x,
                        const std::shared_ptr<Array<double>>& w) {
    auto zero = std::make_shared<Array<double>>(x->value.shape);
    return weighted_sse(tape, x, zero, w);
}

std::shared_ptr<Array<double>> rand_weights(const std::vector<int64_t>& shape) {
    auto w = std::make_shared<Array<double>>(rand_array(shape, 1.0));
    for (auto& x : w->data) x = 0.5 + std::abs(x);
    return w;
}

}  // namespace

TEST_CASE("linear gradients") {
    auto x = rand_input({7, 5});
    auto W = rand_param({5, 4}, "W");
    auto b = rand_param({4}, "b");
    auto w = rand_weights({7, 4});
    gradcheck({x, W, b}, [&](Tape<double>* t) { return readout(t, linear(t, x, W, b), w); });
}

TEST_CASE("bmm gradients, both layouts") {
    auto A = rand_input({3, 4, 6});
    auto w = rand_weights({3, 4, 5});
    SUBCASE("plain") {
        auto B = rand_input({3, 6, 5});
        gradcheck({A, B}, [&](Tape<double>* t) { return readout(t, bmm(t, A, B, false), w); });
    }
    SUBCASE("transposed") {
        auto B = rand_input({3, 5, 6});
        gradcheck({A, B}, [&](Tape<double>* t) { return readout(t, bmm(t, A, B, true), w); });
    }
}

TEST_CASE("elementwise op gradients") {
    auto a = rand_input({4, 6});
    auto b = rand_input({4, 6});
    auto w = rand_weights({4, 6});
    auto c = std::make_shared<Array<double>>(rand_array({6}));  // tiled constant

    gradcheck({a, b}, [&](Tape<double>* t) { return readout(t, add(t, a, b), w); });
    gradcheck({a}, [&](Tape<double>* t) { return readout(t, scale(t, a, 1.7), w); });
    gradcheck({a}, [&](Tape<double>* t) { return readout(t, add_const(t, a, c), w); });
    gradcheck({a}, [&](Tape<double>* t) { return readout(t, gelu(t, a), w); });
}

TEST_CASE("layer_norm gradients") {
    auto x = rand_input({6, 8});
    auto gamma = rand_param({8}, "gamma");
    auto beta = rand_param({8}, "beta");
    auto w = rand_weights({6, 8});
    gradcheck({x, gamma, beta},
              [&](Tape<double>* t) { return readout(t, layer_norm(t, x, gamma, beta, 8), w); },
              1e-5);
}

TEST_CASE("layer_norm output has zero mean and unit variance per row") {
    auto x = rand_input({5, 16}, 3.0);
    auto gamma = make_param(Array<double>({16}, 1.0), "g");
    auto beta = make_param(Array<double>({16}, 0.0), "b");
    auto y = layer_norm<double>(nullptr, x, gamma, beta, 16);
    for (int r = 0; r < 5; ++r) {
        double mean = 0, var = 0;
        for (int c = 0; c < 16; ++c) mean += y->value.data[r * 16 + c];
        mean /= 16;
        for (int c = 0; c < 16; ++c) {
            const double d = y->value.data[r * 16 + c] - mean;
            var += d * d;
        }
        var /= 16;
        CHECK(std::abs(mean) <= 1e-4);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("softmax rows sum to one and gradients check out") {
    auto x = rand_input({5, 7}, 2.0);
    auto w = rand_weights({5, 7});
    auto y = softmax_last<double>(nullptr, x, 7);
    for (int r = 0; r < 5; ++r) {
        double s = 0;
        for (int c = 0; c < 7; ++c) s += y->value.data[r * 7 + c];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
    gradcheck({x}, [&](Tape<double>* t) { return readout(t, softmax_last(t, x, 7), w); }, 1e-5);
}

TEST_CASE("gather_rows forward semantics and gradients") {
    auto x = rand_input({6, 3});
    auto idx = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{4, -1, 0, 2, 5, 1});
    auto y = gather_rows<double>(nullptr, x, idx, 2, 3, true);
    REQUIRE(y->value.shape == std::vector<int64_t>{3, 6});
    for (int c = 0; c < 3; ++c) {
        CHECK(y->value.data[0 * 6 + c] == x->value.data[4 * 3 + c]);
        CHECK(y->value.data[0 * 6 + 3 + c] == 0.0);       // -1 reads zeros
        CHECK(y->value.data[2 * 6 + c] == x->value.data[5 * 3 + c]);
    }
    auto w = rand_weights({3, 6});
    gradcheck({x}, [&](Tape<double>* t) { return readout(t, gather_rows(t, x, idx, 2, 3, true), w); });

    // non-injective table exercises the sequential scatter
    auto dup = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{0, 0, 1, 0});
    auto w2 = rand_weights({4, 3});
    gradcheck({x}, [&](Tape<double>* t) { return readout(t, gather_rows(t, x, dup, 1, 3, false), w2); });
}

TEST_CASE("stacking and concatenation gradients") {
    auto a = rand_input({3, 4});
    auto b = rand_input({2, 4});
    auto w = rand_weights({5, 4});
    gradcheck({a, b}, [&](Tape<double>* t) { return readout(t, vstack(t, a, b, 4), w); });

    auto c = rand_input({3, 2});
    auto w2 = rand_weights({3, 6});
    gradcheck({a, c}, [&](Tape<double>* t) { return readout(t, concat_cols(t, a, c, 4, 2), w2); });
}

TEST_CASE("positional add gradients reach both tables") {
    auto x = rand_input({6, 4});
    auto sp = rand_param({3, 4}, "spatial");
    auto tp = rand_param({2, 4}, "temporal");
    auto si = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{0, 1, 2, 0, 1, 2});
    auto ti = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{0, 0, 0, 1, 1, 1});
    auto w = rand_weights({6, 4});
    gradcheck({x, sp, tp}, [&](Tape<double>* t) {
        return readout(t, add_positional(t, x, sp, tp, si, ti, 4), w);
    });
}

TEST_CASE("batch_norm training-mode gradients and eval-mode statistics") {
    auto x = rand_input({12, 5}, 2.0);
    auto gamma = rand_param({5}, "gamma");
    auto beta = rand_param({5}, "beta");
    auto rm = std::make_shared<Array<double>>(std::vector<int64_t>{5});
    auto rv = std::make_shared<Array<double>>(Array<double>({5}, 1.0));
    auto w = rand_weights({12, 5});

    gradcheck({x, gamma, beta},
              [&](Tape<double>* t) {
                  return readout(t, batch_norm(t, x, gamma, beta, rm, rv, 5, true, false), w);
              },
              1e-5);

    // running statistics converge toward the batch statistics
    for (int it = 0; it < 200; ++it)
        batch_norm<double>(nullptr, x, gamma, beta, rm, rv, 5, true, true);
    for (int c = 0; c < 5; ++c) {
        double mean = 0;
        for (int r = 0; r < 12; ++r) mean += x->value.data[r * 5 + c];
        mean /= 12;
        CHECK(rm->data[c] == doctest::Approx(mean).epsilon(1e-6));
    }

    // eval mode applies the running affine; repeat calls are bit-stable
    auto y1 = batch_norm<double>(nullptr, x, gamma, beta, rm, rv, 5, false, false);
    auto y2 = batch_norm<double>(nullptr, x, gamma, beta, rm, rv, 5, false, false);
    CHECK(y1->value.data == y2->value.data);
}

TEST_CASE("weighted_sse matches a hand loop") {
    auto p = rand_input({4, 3});
    auto t = std::make_shared<Array<double>>(rand_array({4, 3}));
    auto w = rand_weights({4, 3});
    auto loss = weighted_sse<double>(nullptr, p, t, w);
    double expect = 0;
    for (int i = 0; i < 12; ++i) {
        const double d = p->value.data[i] - t->data[i];
        expect += w->data[i] * d * d;
    }
    CHECK(loss->value.data[0] == doctest::Approx(expect).epsilon(1e-12));
    gradcheck({p}, [&](Tape<double>* tp) { return weighted_sse(tp, p, t, w); });
}

TEST_CASE("checkpointed segments reproduce values, gradients, and save memory") {
    auto x = rand_input({8, 6});
    auto W1 = rand_param({6, 10}, "W1");
    auto b1 = rand_param({10}, "b1");
    auto W2 = rand_param({10, 6}, "W2");
    auto b2 = rand_param({6}, "b2");
    auto w = rand_weights({8, 6});

    SegmentFn<double> segment = [&](Tape<double>* t, bool, const std::vector<NodePtr<double>>& in) {
        auto h = gelu(t, linear(t, in[0], W1, b1));
        auto y = linear(t, h, W2, b2);
        return std::vector<NodePtr<double>>{add(t, y, in[0])};
    };

    // Peak savings need several segments: only one segment's internals are
    // live at a time during the recomputing backward pass.
    auto run = [&](bool enable, std::shared_ptr<MemoryMeter>& meter_out) {
        for (auto& p : {x, W1, b1, W2, b2}) {
            p->grad.shape.clear();
            p->grad.data.clear();
        }
        Tape<double> tape;
        auto mid = checkpoint(&tape, enable, segment, {x});
        auto out = checkpoint(&tape, enable, segment, {mid[0]});
        auto loss = readout(&tape, out[0], w);
        loss->ensure_grad();
        loss->grad.data[0] = 1.0;
        tape.backward();
        meter_out = tape.meter;
        return std::tuple{loss->value.data[0], x->grad.data, W1->grad.data, b2->grad.data};
    };

    std::shared_ptr<MemoryMeter> meter_plain, meter_ckpt;
    auto plain = run(false, meter_plain);
    auto ckpt = run(true, meter_ckpt);

    CHECK(std::get<0>(plain) == std::get<0>(ckpt));  // bit-identical value
    CHECK(std::get<1>(plain) == std::get<1>(ckpt));  // bit-identical gradients
    CHECK(std::get<2>(plain) == std::get<2>(ckpt));
    CHECK(std::get<3>(plain) == std::get<3>(ckpt));
    CHECK(meter_ckpt->peak < meter_plain->peak);
}

TEST_CASE("tape meter tracks retention and release") {
    Tape<double> tape;
    auto x = rand_input({4, 4});
    auto y = gelu(&tape, x);   // retains x: 16 scalars
    auto z = gelu(&tape, y);   // retains y: 16 scalars
    CHECK(tape.meter->now == 32);
    CHECK(tape.meter->peak == 32);
    z->ensure_grad();
    for (auto& g : z->grad.data) g = 1.0;
    tape.backward();
    CHECK(tape.meter->now == 0);
    CHECK(tape.meter->peak == 32);
}

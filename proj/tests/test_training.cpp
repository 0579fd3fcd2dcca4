// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <random>

#include "json.hpp"
#include "tidecast/solver.hpp"
#include "tidecast/training.hpp"
#include "test_support.hpp"

using namespace tidecast;
using namespace tidecast::nn;
using tidecast::testing::bay_forcing;
using tidecast::testing::bay_grid;
using tidecast::testing::bay_params;
using tidecast::testing::temp_dir;

namespace {

// Small two-stage setup on a 10x10x2 bay.
struct Fixture {
    GridSpec grid = bay_grid(10, 10, 2, 100, 5);
    Trajectory traj;
    NormStats stats;
    std::vector<Sample> samples;
    ModelConfig cfg;

    Fixture() {
        ShallowWaterSolver solver(grid, bay_params());
        traj = solver.simulate(solver.initial_rest(), bay_forcing(), 60 * 30, 30);
        stats = compute_norm_stats(traj.states, grid);
        samples = window_samples(traj, 4, 2);
        cfg.grid_h = 10;
        cfg.grid_w = 10;
        cfg.grid_d = 2;
        cfg.horizon = 4;
        cfg.patch_3d = {5, 5, 2};
        cfg.patch_2d = {5, 5};
        cfg.embed_dim = 8;
        cfg.stage_depths = {2, 2};
        cfg.heads = {2, 2};
        cfg.windows = {{2, 2, 2, 2}, {2, 2, 2, 2}};
        cfg.mlp_ratio = 2;
        cfg.recovery_dim = 4;
    }

    template <typename T>
    EncodedBatch<T> batch(size_t n = 2) const {
        return encode_batch<T>(std::span(samples.data(), n), grid, stats, cfg);
    }
};

}  // namespace

TEST_CASE("loss: exact zero, unit offset, and a loop oracle") {
    Fixture fx;
    auto enc = fx.batch<double>();

    auto as_output = [&](std::shared_ptr<Array<double>> y3, std::shared_ptr<Array<double>> y2) {
        typename SurrogateModel<double>::Output out;
        out.y3d = constant(*y3);
        out.y2d = constant(*y2);
        out.y3d->requires_grad = true;  // exercise the taped path too
        out.y2d->requires_grad = true;
        return out;
    };

    SUBCASE("prediction equal to the target gives zero") {
        auto out = as_output(enc.y3d, enc.y2d);
        CHECK(loss<double>(nullptr, out, enc)->value.data[0] == 0.0);
    }

    SUBCASE("a unit offset on every cell gives exactly one") {
        auto y3 = std::make_shared<Array<double>>(*enc.y3d);
        auto y2 = std::make_shared<Array<double>>(*enc.y2d);
        for (auto& v : y3->data) v += 1.0;
        for (auto& v : y2->data) v += 1.0;
        auto out = as_output(y3, y2);
        CHECK(loss<double>(nullptr, out, enc)->value.data[0] == doctest::Approx(1.0).epsilon(1e-12));
    }

    SUBCASE("random pair matches an explicit summation oracle") {
        std::mt19937_64 r(4);
        std::normal_distribution<double> d(0, 1);
        auto y3 = std::make_shared<Array<double>>(*enc.y3d);
        auto y2 = std::make_shared<Array<double>>(*enc.y2d);
        for (auto& v : y3->data) v += d(r);
        for (auto& v : y2->data) v += d(r);
        auto out = as_output(y3, y2);
        const double got = loss<double>(nullptr, out, enc)->value.data[0];

        double sum = 0;
        int64_t n = 0;
        for (size_t i = 0; i < y3->data.size(); ++i) {
            const double diff = y3->data[i] - enc.y3d->data[i];
            sum += enc.w3d->data[i] * diff * diff;
            n += enc.w3d->data[i] != 0;
        }
        for (size_t i = 0; i < y2->data.size(); ++i) {
            const double diff = y2->data[i] - enc.y2d->data[i];
            sum += enc.w2d->data[i] * diff * diff;
            n += enc.w2d->data[i] != 0;
        }
        CHECK(got == doctest::Approx(sum / n).epsilon(1e-9));
        CHECK(got >= 0.0);
    }

    SUBCASE("mismatched shapes are rejected") {
        auto y3 = std::make_shared<Array<double>>(std::vector<int64_t>{4, 3});
        auto out = as_output(y3, enc.y2d);
        CHECK_THROWS_AS(loss<double>(nullptr, out, enc), ShapeError);
    }
}

TEST_CASE("analytic gradients match central differences across the model") {
    Fixture fx;
    SurrogateModel<double> model(fx.cfg, 11);
    auto enc = fx.batch<double>(1);

    auto loss_value = [&](Tape<double>* tape) {
        auto out = model.forward(tape, enc.input, /*training=*/true, RecomputePolicy::None);
        return loss(tape, out, enc);
    };

    Tape<double> tape;
    auto l = loss_value(&tape);
    l->ensure_grad();
    l->grad.data[0] = 1.0;
    tape.backward();

    // one parameter from each architectural family
    const std::vector<std::string> names = {"enc.embed3.w", "enc.pos.spatial",
                                            "enc.s0.b1.attn.wq", "enc.m0.w",
                                            "dec.up0.w", "dec.head3.w", "dec.rec2.bn.g"};
    std::mt19937_64 pick(3);
    int checked = 0;
    for (const auto& want : names) {
        for (const auto& [name, p] : model.parameters()) {
            if (name != want) continue;
            REQUIRE(!p->grad.data.empty());
            for (int s = 0; s < 2; ++s) {
                const size_t i = pick() % p->value.data.size();
                const double keep = p->value.data[i];
                const double h = 1e-5 * std::max(1.0, std::abs(keep));
                p->value.data[i] = keep + h;
                const double fp = loss_value(nullptr)->value.data[0];
                p->value.data[i] = keep - h;
                const double fm = loss_value(nullptr)->value.data[0];
                p->value.data[i] = keep;
                const double fd = (fp - fm) / (2 * h);
                const double an = p->grad.data[i];
                const double rel = std::abs(fd - an) / std::max({1e-8, std::abs(fd), std::abs(an)});
                INFO(name, "[", i, "] analytic ", an, " numeric ", fd);
                CHECK(rel < 1e-4);
                ++checked;
            }
        }
    }
    CHECK(checked >= 10);
}

TEST_CASE("recompute policy: identical numbers, lower retention") {
    Fixture fx;
    SurrogateModel<float> model(fx.cfg, 21);
    auto enc = fx.batch<float>();
    const std::vector<std::string> names = {"enc.embed3.w", "enc.s0.b1.attn.wv", "enc.m0.w",
                                            "dec.up0.fuse.w", "dec.head2.w"};

    auto none = recompute_forward(model, enc, RecomputePolicy::None, names);
    auto swmsa = recompute_forward(model, enc, RecomputePolicy::SwmsaBoundary, names);

    CHECK(none.loss == swmsa.loss);  // bit-identical replay
    for (const auto& [name, g] : none.grads) {
        REQUIRE(swmsa.grads.count(name));
        const auto& g2 = swmsa.grads.at(name);
        REQUIRE(g.size() == g2.size());
        for (size_t i = 0; i < g.size(); ++i) {
            const double rel = std::abs(double(g[i]) - double(g2[i])) /
                               std::max(1e-12, std::abs(double(g[i])));
            CHECK(rel <= 1e-6);
        }
    }
    CHECK(swmsa.retained_peak < none.retained_peak);
    MESSAGE("retained peak none=", none.retained_peak, " swmsa=", swmsa.retained_peak);
}

TEST_CASE("training is deterministic and independent of prefetch depth") {
    Fixture fx;
    REQUIRE(fx.samples.size() >= 6);
    VectorSampleSource train_src({fx.samples.begin(), fx.samples.begin() + 4});
    VectorSampleSource val_src({fx.samples.begin() + 4, fx.samples.begin() + 6});

    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch = 2;
    cfg.lr = 1e-3;
    cfg.seed = 5;

    auto run = [&](int prefetch) {
        cfg.prefetch = prefetch;
        SurrogateModel<float> model(fx.cfg, 33);
        auto result = train(model, train_src, val_src, fx.grid, fx.stats, cfg, "");
        std::vector<float> tail;  // final parameters of one tensor
        for (const auto& [name, p] : model.parameters())
            if (name == "dec.head3.w") tail = p->value.data;
        return std::tuple{result.history.train_loss, result.history.val_loss, tail};
    };

    auto a = run(0);
    auto b = run(2);
    auto c = run(0);
    CHECK(std::get<0>(a) == std::get<0>(b));
    CHECK(std::get<1>(a) == std::get<1>(b));
    CHECK(std::get<2>(a) == std::get<2>(b));
    CHECK(std::get<0>(a) == std::get<0>(c));
    CHECK(std::get<2>(a) == std::get<2>(c));
}

TEST_CASE("a short overfit run drives the loss down and saves the best checkpoint") {
    Fixture fx;
    VectorSampleSource train_src({fx.samples.begin(), fx.samples.begin() + 2});
    VectorSampleSource val_src({fx.samples.begin(), fx.samples.begin() + 2});

    TrainConfig cfg;
    cfg.epochs = 40;
    cfg.batch = 2;
    cfg.lr = 3e-3;
    cfg.seed = 9;
    cfg.warmup_frac = 0.1;

    SurrogateModel<float> model(fx.cfg, 41);
    auto dir = temp_dir("train");
    std::filesystem::create_directories(dir);
    const std::string ckpt = dir + "/best.tckpt";
    auto result = train(model, train_src, val_src, fx.grid, fx.stats, cfg, ckpt);

    const auto& tl = result.history.train_loss;
    REQUIRE(tl.size() == 40);
    CHECK(tl.back() < 0.25 * tl.front());
    CHECK(std::filesystem::exists(ckpt));
    CHECK(result.history.best_epoch >= 0);

    save_history(result.history, dir + "/history.json");
    std::ifstream f(dir + "/history.json");
    nlohmann::json j;
    f >> j;
    CHECK(j.at("train_loss").size() == 40);
    std::filesystem::remove_all(dir);
}

TEST_CASE("diverging training reports the epoch") {
    Fixture fx;
    VectorSampleSource train_src({fx.samples.begin(), fx.samples.begin() + 2});
    VectorSampleSource val_src(std::vector<Sample>{});
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.batch = 2;
    cfg.lr = 3e8;  // guaranteed blow-up
    SurrogateModel<float> model(fx.cfg, 2);
    try {
        train(model, train_src, val_src, fx.grid, fx.stats, cfg, "");
        FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
        CHECK(e.epoch >= 0);
        CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    }
}

TEST_CASE("chronological subset views") {
    Fixture fx;
    VectorSampleSource all(fx.samples);
    const size_t n = all.size();
    const size_t cut = n - n / 10 - 1;
    SubsetSource head(all, 0, cut), tail(all, cut, n);
    CHECK(head.size() + tail.size() == n);
    CHECK(head.get(0).initial.time == all.get(0).initial.time);
    CHECK(tail.get(0).initial.time == all.get(cut).initial.time);
    CHECK_THROWS_AS(SubsetSource(all, 5, n + 1), ConfigError);
}

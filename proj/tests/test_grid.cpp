// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <unistd.h>

#include "tidecast/grid.hpp"

using namespace tidecast;

namespace {

State random_state(const GridSpec& g, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(-0.5, 0.5);
    State s = make_state(g);
    for (int i = 0; i < g.H; ++i)
        for (int j = 0; j < g.W; ++j) {
            if (g.is_land(i, j)) continue;
            s.zeta.at(i, j) = d(rng);
            for (int k = 0; k < g.D; ++k) {
                s.u.at(k, i, j) = d(rng);
                s.v.at(k, i, j) = d(rng);
                s.w.at(k, i, j) = d(rng);
            }
        }
    return s;
}

std::string temp_dir(const char* tag) {
    static int counter = 0;
    return (std::filesystem::temp_directory_path() /
            (std::string("tidecast_grid_") + tag + "_" + std::to_string(counter++) + "_" +
             std::to_string(::getpid())))
        .string();
}

}  // namespace

TEST_CASE("make_grid accepts the desk-scale configuration") {
    GridSpec g = make_grid(60, 40, 4, 500, 500, 5.0, 30);
    CHECK(g.H == 60);
    CHECK(g.W == 40);
    CHECK(g.D == 4);
    CHECK(g.ring_size() == 2 * 60 + 2 * 40 - 4);
    CHECK(g.n_water() == 60u * 40u);
}

TEST_CASE("make_grid accepts the production-scale mesh shape") {
    GridSpec g = make_grid(900, 600, 12, 100, 100, 8.0, 4);
    CHECK(g.H == 900);
    CHECK(g.W == 600);
    CHECK(g.D == 12);
}

TEST_CASE("make_grid rejects invalid configurations") {
    CHECK_THROWS_AS(make_grid(60, 40, 4, 500, 500, 0.0, 30), ConfigError);   // zero depth
    CHECK_THROWS_AS(make_grid(0, 40, 4, 500, 500, 5.0, 30), ConfigError);    // zero dim
    CHECK_THROWS_AS(make_grid(60, 40, 4, -1, 500, 5.0, 30), ConfigError);    // bad dx
    CHECK_THROWS_AS(make_grid(60, 40, 4, 500, 500, 5.0, 0.0), ConfigError);  // bad dt
    // depth may be arbitrary on land cells
    std::vector<uint8_t> land(4, 0);
    land[0] = 1;
    Field2 depth(2, 2, 3.0);
    depth.at(0, 0) = 0.0;
    CHECK_NOTHROW(make_grid(2, 2, 1, 100, 100, depth, 5, land));
}

TEST_CASE("grid construction is deterministic") {
    GridSpec a = make_grid(13, 7, 3, 250, 125, 4.0, 10);
    GridSpec b = make_grid(13, 7, 3, 250, 125, 4.0, 10);
    CHECK(a.depth.v == b.depth.v);
    CHECK(a.land == b.land);
    CHECK(a.ring_cells() == b.ring_cells());
}

TEST_CASE("extract_boundary of a constant field is constant") {
    GridSpec g = make_grid(6, 5, 2, 100, 100, 5.0, 5);
    State s = make_state(g);
    for (auto& z : s.zeta.v) z = 0.37;
    BoundaryRing ring = extract_boundary(s, g);
    CHECK(ring.zeta.size() == static_cast<size_t>(g.ring_size()));
    for (double z : ring.zeta) CHECK(z == doctest::Approx(0.37));
}

TEST_CASE("a 3x3 grid has an 8-cell ring") {
    GridSpec g = make_grid(3, 3, 1, 100, 100, 5.0, 5);
    CHECK(g.ring_size() == 8);
    CHECK(g.ring_cells().size() == 8);
}

TEST_CASE("extract_boundary matches direct perimeter indexing") {
    GridSpec g = make_grid(7, 5, 3, 100, 100, 5.0, 5);
    State s = random_state(g, 42);
    BoundaryRing ring = extract_boundary(s, g);

    // Independent traversal oracle: south W->E, east S->N, north E->W, west N->S.
    std::vector<std::pair<int, int>> expected;
    for (int j = 0; j < g.W; ++j) expected.emplace_back(0, j);
    for (int i = 1; i < g.H; ++i) expected.emplace_back(i, g.W - 1);
    for (int j = g.W - 2; j >= 0; --j) expected.emplace_back(g.H - 1, j);
    for (int i = g.H - 2; i >= 1; --i) expected.emplace_back(i, 0);

    REQUIRE(ring.zeta.size() == expected.size());
    const int R = static_cast<int>(expected.size());
    for (int r = 0; r < R; ++r) {
        auto [i, j] = expected[r];
        CHECK(ring.zeta[r] == s.zeta.at(i, j));
        for (int k = 0; k < g.D; ++k) {
            CHECK(ring.u[static_cast<size_t>(k) * R + r] == s.u.at(k, i, j));
            CHECK(ring.v[static_cast<size_t>(k) * R + r] == s.v.at(k, i, j));
        }
    }
}

TEST_CASE("extract then scatter reproduces exactly the perimeter entries") {
    GridSpec g = make_grid(8, 6, 2, 100, 100, 5.0, 5);
    State s = random_state(g, 7);
    BoundaryRing ring = extract_boundary(s, g);

    State zeroed = make_state(g);
    scatter_boundary(ring, g, zeroed);
    for (int i = 0; i < g.H; ++i)
        for (int j = 0; j < g.W; ++j) {
            if (g.on_ring(i, j)) {
                CHECK(zeroed.zeta.at(i, j) == s.zeta.at(i, j));
                for (int k = 0; k < g.D; ++k) {
                    CHECK(zeroed.u.at(k, i, j) == s.u.at(k, i, j));
                    CHECK(zeroed.v.at(k, i, j) == s.v.at(k, i, j));
                }
            } else {
                CHECK(zeroed.zeta.at(i, j) == 0.0);
            }
        }
}

TEST_CASE("state validation catches the spec error cases") {
    GridSpec g = make_grid(4, 4, 2, 100, 100, 5.0, 5);
    State ok = random_state(g, 3);
    CHECK_NOTHROW(validate_state(ok, g));

    State nan_state = ok;
    nan_state.u.at(0, 1, 1) = std::nan("");
    CHECK_THROWS_AS(validate_state(nan_state, g), DivergenceError);

    State drained = ok;
    drained.zeta.at(1, 1) = -g.depth.at(1, 1) - 0.1;
    CHECK_THROWS_AS(validate_state(drained, g), DivergenceError);

    std::vector<uint8_t> land(16, 0);
    land[5] = 1;
    GridSpec gm = make_grid(4, 4, 2, 100, 100, 5.0, 5, land);
    State bad_land = make_state(gm);
    bad_land.u.at(0, 1, 1) = 0.2;  // cell (1,1) is land
    CHECK_THROWS_AS(validate_state(bad_land, gm), ConfigError);
}

TEST_CASE("staggered centering is the two-face mean") {
    GridSpec g = make_grid(3, 4, 1, 100, 100, 5.0, 5);
    StaggeredState s = make_staggered(g);
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> d(-1, 1);
    for (auto& x : s.u.v) x = d(rng);
    for (auto& x : s.v.v) x = d(rng);
    Field2 uc = center_u(s), vc = center_v(s);
    for (int i = 0; i < g.H; ++i)
        for (int j = 0; j < g.W; ++j) {
            CHECK(uc.at(i, j) == doctest::Approx(0.5 * (s.u.at(i, j) + s.u.at(i, j + 1))));
            CHECK(vc.at(i, j) == doctest::Approx(0.5 * (s.v.at(i, j) + s.v.at(i + 1, j))));
        }
}

TEST_CASE("trajectory round-trips through the directory format") {
    GridSpec g = make_grid(5, 6, 2, 100, 100, 5.0, 5);
    Trajectory traj;
    traj.grid = g;
    traj.interval = 60;
    for (int n = 0; n < 3; ++n) {
        State s = random_state(g, 100 + n);
        s.time = 60.0 * n;
        traj.states.push_back(s);
    }

    std::string dir = temp_dir("roundtrip");
    save_trajectory(traj, dir);
    Trajectory back = load_trajectory(dir);

    REQUIRE(back.states.size() == traj.states.size());
    CHECK(back.interval == traj.interval);
    CHECK(back.grid.H == g.H);
    CHECK(back.grid.W == g.W);
    for (size_t n = 0; n < traj.states.size(); ++n) {
        CHECK(back.states[n].time == doctest::Approx(traj.states[n].time));
        for (size_t i = 0; i < traj.states[n].zeta.v.size(); ++i) {
            // Disk format is float32: loaded values equal the float cast exactly.
            CHECK(back.states[n].zeta.v[i] ==
                  static_cast<double>(static_cast<float>(traj.states[n].zeta.v[i])));
        }
        for (size_t i = 0; i < traj.states[n].u.v.size(); ++i)
            CHECK(back.states[n].u.v[i] ==
                  static_cast<double>(static_cast<float>(traj.states[n].u.v[i])));
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("trajectory reader reports a helpful error for missing files") {
    CHECK_THROWS_AS(TrajectoryReader("/nonexistent/path"), IoError);
    std::string dir = temp_dir("badmeta");
    std::filesystem::create_directories(dir);
    {
        std::ofstream f(dir + "/meta.json");
        f << "{ not json";
    }
    CHECK_THROWS_AS((TrajectoryReader(dir)), IoError);
    std::filesystem::remove_all(dir);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "loom/costmodel.hpp"
#include "loom/membank.hpp"
#include "loom/rng.hpp"

using namespace loom;

namespace {

// per-frame generation cost in TFLOPs from the published reference table
const std::vector<double> kVanillaRow = {82,   230,  450,  744,  1112, 1553,
                                         2068, 2656, 3318, 4053, 4862, 5744};
const std::vector<double> kBoundedRow = {82,  165, 248, 331, 441, 497,
                                         580, 663, 746, 829, 912, 995};

ModelDims random_dims(RandomStream& rng) {
    ModelDims d;
    d.layers = rng.uniform_int(1, 4);
    d.d = 8 << rng.uniform_int(0, 3);
    d.d_ff = d.d * rng.uniform_int(2, 4);
    d.l = rng.uniform_int(4, 32);
    d.m = rng.uniform_int(0, 8);
    d.l_cond = rng.uniform_int(0, 32);
    d.lambda_ = rng.uniform_int(2, 4);
    d.history_depth = rng.uniform_int(0, 6);
    return d;
}

}  // namespace

TEST_CASE("vanilla context grows by one frame of rows per step") {
    ModelDims dims;
    CHECK(frame_tokens(Strategy::Vanilla, 1, dims) == dims.l + dims.l_cond);
    for (int n = 1; n < 10; n++)
        CHECK(frame_tokens(Strategy::Vanilla, n + 1, dims) -
                  frame_tokens(Strategy::Vanilla, n, dims) ==
              dims.l);
}

TEST_CASE("bounded context starts cold and plateaus once the bank is full") {
    ModelDims dims;  // history_depth 3, lambda 2
    CHECK(frame_tokens(Strategy::Bounded, 1, dims) == dims.l + dims.m + dims.l_cond);
    CHECK(frame_tokens(Strategy::Bounded, 2, dims) ==
          dims.l + dims.m + dims.l_cond + total_memory_length(dims.l, dims.lambda_, 1));
    const int64_t plateau = frame_tokens(Strategy::Bounded, dims.history_depth + 1, dims);
    for (int n = dims.history_depth + 1; n < dims.history_depth + 8; n++)
        CHECK(frame_tokens(Strategy::Bounded, n, dims) == plateau);
    CHECK(plateau ==
          dims.l + dims.m + dims.l_cond +
              total_memory_length(dims.l, dims.lambda_, dims.history_depth));
}

TEST_CASE("the flop count matches the hand-computed formula") {
    ModelDims dims;
    dims.layers = 2;
    dims.d = 4;
    dims.d_ff = 8;
    // 2 * (4*3^2*4 + 8*3*4^2 + 4*3*4*8) = 2 * 912
    CHECK(frame_flops(3, dims) == 1824.0);
}

TEST_CASE("doubling tokens scales the regime-dominant term as expected") {
    ModelDims att;
    att.layers = 1;
    att.d = 4;
    att.d_ff = 4;
    const double r_att = frame_flops(2048, att) / frame_flops(1024, att);
    CHECK(r_att > 3.8);   // attention-dominant: ~quadratic
    CHECK(r_att < 4.05);

    ModelDims ffn;
    ffn.layers = 1;
    ffn.d = 64;
    ffn.d_ff = 4096;
    const double r_ffn = frame_flops(4, ffn) / frame_flops(2, ffn);
    CHECK(r_ffn > 1.9);   // FFN-dominant: ~linear
    CHECK(r_ffn < 2.1);
}

TEST_CASE("bad cost queries are rejected") {
    ModelDims dims;
    CHECK_THROWS_WITH(frame_tokens(Strategy::Vanilla, 0, dims),
                      doctest::Contains("frame index starts at 1"));
    ModelDims bad = dims;
    bad.lambda_ = 1;
    CHECK_THROWS_WITH(frame_tokens(Strategy::Bounded, 2, bad),
                      doctest::Contains("decay factor must exceed 1"));
    CHECK_THROWS_WITH(frame_flops(0, dims), doctest::Contains(">= 1"));
    ModelDims zero = dims;
    zero.d = 0;
    CHECK_THROWS_WITH(frame_flops(8, zero), doctest::Contains("must be positive"));
    CHECK_THROWS_WITH(growth_order({1.0, 2.0, 3.0}), doctest::Contains("at least 4 points"));
}

TEST_CASE("growth classification recognizes the canonical shapes") {
    CHECK(growth_order({2, 2, 2, 2}) == GrowthOrder::Constant);
    CHECK(growth_order({1, 2, 3, 4, 5}) == GrowthOrder::Linear);
    CHECK(growth_order({1, 4, 9, 16, 25}) == GrowthOrder::Quadratic);
    CHECK(growth_order({1, 8, 27, 64, 125}) == GrowthOrder::Superquadratic);
    // published per-frame costs: ours is an exact line over the first frames
    CHECK(growth_order({82, 165, 248, 331}) == GrowthOrder::Linear);
}

TEST_CASE("the cumulative report separates linear from superlinear growth") {
    ModelDims dims;
    CostReport r = cumulative_report(20, dims);
    REQUIRE(r.tokens_vanilla.size() == 20);

    // beyond the bank warm-up the bounded per-frame cost is exactly flat
    for (size_t i = dims.history_depth + 1; i + 1 < r.cum_bounded.size(); i++) {
        const double d0 = r.cum_bounded[i] - r.cum_bounded[i - 1];
        const double d1 = r.cum_bounded[i + 1] - r.cum_bounded[i];
        CHECK(d0 == d1);
    }
    // vanilla per-frame cost is an exact quadratic in the frame index
    CHECK(growth_order(r.flops_vanilla) == GrowthOrder::Quadratic);
    CHECK(r.growth_vanilla == GrowthOrder::Superquadratic);  // cumulative: cubic
    CHECK(r.growth_bounded == GrowthOrder::Linear);

    REQUIRE(r.crossover_frame > 0);
    for (size_t i = r.crossover_frame - 1; i < r.cum_bounded.size(); i++)
        CHECK(r.cum_bounded[i] <= r.cum_vanilla[i]);
}

TEST_CASE("random dimensions keep the linear-vs-superlinear separation") {
    RandomStream rng(401);
    for (int rep = 0; rep < 5; rep++) {
        ModelDims dims = random_dims(rng);
        CostReport r = cumulative_report(dims.history_depth + 10, dims);
        for (size_t i = dims.history_depth + 1; i + 1 < r.cum_bounded.size(); i++)
            CHECK(r.cum_bounded[i + 1] - r.cum_bounded[i] ==
                  r.cum_bounded[i] - r.cum_bounded[i - 1]);
        // vanilla first differences of per-frame cost strictly increase
        for (size_t i = 0; i + 2 < r.flops_vanilla.size(); i++)
            CHECK(r.flops_vanilla[i + 2] - r.flops_vanilla[i + 1] >
                  r.flops_vanilla[i + 1] - r.flops_vanilla[i]);
        CHECK(r.growth_bounded == GrowthOrder::Linear);
    }
}

TEST_CASE("the published cost rows sit on their fitted curves") {
    std::vector<double> frames;
    for (int n = 1; n <= 12; n++) frames.push_back(n);

    CHECK(polyfit_r2(frames, kVanillaRow, 2) > 0.999);
    // every second difference of the vanilla row is positive
    for (size_t i = 0; i + 2 < kVanillaRow.size(); i++)
        CHECK(kVanillaRow[i + 2] - kVanillaRow[i + 1] > kVanillaRow[i + 1] - kVanillaRow[i]);

    // ours is a line except for the frame-5 outlier
    std::vector<double> xs, ys;
    for (int n = 1; n <= 12; n++) {
        if (n == 5) continue;
        xs.push_back(n);
        ys.push_back(kBoundedRow[n - 1]);
    }
    CHECK(polyfit_r2(xs, ys, 1) > 0.999);
    for (size_t i = 0; i < xs.size(); i++)
        CHECK(ys[i] == 82.0 + 83.0 * (xs[i] - 1.0));
    CHECK(std::fabs(kBoundedRow[4] - (82.0 + 83.0 * 4.0)) > 20.0);

    // a quadratic-only row cannot be explained by a line this well
    CHECK(polyfit_r2(frames, kVanillaRow, 1) < 0.999);
    CHECK(polyfit_r2({1, 2, 3, 4}, {3, 5, 7, 9}, 1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("report rendering carries the full table") {
    ModelDims dims;
    CostReport r = cumulative_report(4, dims);
    const std::string csv = report_csv(r);
    CHECK(csv.rfind("frame,tokens_vanilla,tokens_bounded,flops_vanilla,flops_bounded,"
                    "cum_vanilla,cum_bounded\n",
                    0) == 0);
    size_t lines = 0;
    for (char c : csv)
        if (c == '\n') lines++;
    CHECK(lines == 5);  // header + one row per frame

    const std::string table = report_table(r);
    CHECK(table.find("growth: vanilla=") != std::string::npos);
    CHECK(table.find("crossover_frame=") != std::string::npos);
}

#include <doctest.h>

#include <cmath>
#include <json.hpp>

#include "msdet/errors.hpp"
#include "msdet/sampler.hpp"
#include "oracles.hpp"

using namespace msdet;

namespace {

SplitScheme three() { return *find_scheme(named_schemes(), "three"); }

std::vector<RoiSample> with_roles(std::size_t pure, std::size_t ill, std::size_t pos = 0, std::size_t disc = 0,
                                  std::size_t ign = 0)
{
    std::vector<RoiSample> out;
    auto add = [&](std::size_t n, RoiRole r) {
        for (std::size_t i = 0; i < n; ++i) {
            RoiSample s;
            s.role = r;
            if (r == RoiRole::positive) s.matched_gt = 0;
            out.push_back(s);
        }
    };
    add(pos, RoiRole::positive);
    add(pure, RoiRole::pure_background);
    add(ill, RoiRole::ill_aligned);
    add(disc, RoiRole::discard);
    add(ign, RoiRole::ignore);
    return out;
}

} // namespace

TEST_SUITE("sampler") {

TEST_CASE("anchor heights are geometric in the range")
{
    const AnchorSet a = make_anchors({40, 140}, 16, 256, 256);
    REQUIRE(a.heights.size() == 4);
    for (int i = 0; i < 4; ++i) CHECK(a.heights[i] == doctest::Approx(40.0 * std::pow(140.0 / 40.0, i / 3.0)));
    CHECK(a.heights[1] == doctest::Approx(60.73).epsilon(1e-3));
    CHECK(a.heights[2] == doctest::Approx(92.21).epsilon(1e-3));
    CHECK(make_anchors({10, 10}, 8, 64, 64).heights == std::vector<double>{10});
    for (const ScaleRange r : {ScaleRange{6, 16}, ScaleRange{16, 48}, ScaleRange{10, 1300}}) {
        const AnchorSet s = make_anchors(r, 8, 64, 64);
        CHECK(s.heights.size() <= 4);
        CHECK(static_cast<int>(s.heights.size()) == anchors_needed(r));
        for (double h : s.heights) {
            CHECK(h >= r.lo - 1e-9);
            CHECK(h <= r.hi + 1e-9);
        }
    }
}

TEST_CASE("anchor grid")
{
    const AnchorSet a = make_anchors({40, 140}, 8, 256, 256);
    CHECK(a.grid_w == 32);
    CHECK(a.grid_h == 32);
    CHECK(a.cells() == 1024);
    CHECK(a.size() == 4 * 1024);
    // index layout a * cells + y * grid_w + x; centred on the cell
    const Box b = a.anchor(1 * 1024 + 3 * 32 + 5);
    CHECK(b.cx() == doctest::Approx(5 * 8 + 4));
    CHECK(b.cy() == doctest::Approx(3 * 8 + 4));
    CHECK(b.h == doctest::Approx(a.heights[1]));
    CHECK(b.w == doctest::Approx(b.h));
    CHECK(a.boxes().size() == a.size());
}

TEST_CASE("routing ground truth")
{
    const std::vector<Box> gts{{0, 0, 12, 12}, {0, 0, 80, 80}, {0, 0, 300, 300}};
    const GtRouting r0 = route_gt(gts, three(), 0);
    CHECK(r0.in_range == std::vector<std::size_t>{0});
    CHECK(r0.ignored == std::vector<std::size_t>{1, 2});
    const GtRouting e = route_gt({}, three(), 0);
    CHECK(e.in_range.empty());
    CHECK(e.ignored.empty());
    const std::vector<Box> tiny{{0, 0, 9, 9}};
    for (std::size_t d = 0; d < 3; ++d) CHECK(route_gt(tiny, three(), d).ignored == std::vector<std::size_t>{0});
}

TEST_CASE("labeling rules")
{
    // gt 0 in range for detector 0 (height 20), gt 1 out of range (height 200)
    const std::vector<Box> gts{{0, 0, 20, 20}, {100, 100, 200, 200}};
    const GtRouting r = route_gt(gts, three(), 0);
    auto role_of = [&](const Box& roi) {
        const std::vector<Box> one{roi};
        return label_rois(one, gts, r, 0)[0];
    };
    // IoU 0.6 with the in-range gt: 20x20 vs 20x15 shifted inside -> 300/400 = 0.75
    const RoiSample pos = role_of({0, 0, 20, 15});
    CHECK(pos.role == RoiRole::positive);
    CHECK(pos.matched_gt == std::optional<std::size_t>{0});
    CHECK(role_of({100, 100, 200, 150}).role == RoiRole::discard);
    // IoU 0.2: 20x20 vs (0,0,20,4) -> 80/400
    CHECK(role_of({0, 0, 20, 4}).role == RoiRole::ill_aligned);
    // IoU 0.4: (0,0,20,8) -> 160/400
    CHECK(role_of({0, 0, 20, 8}).role == RoiRole::ignore);
    CHECK(role_of({50, 0, 10, 10}).role == RoiRole::pure_background);
}

TEST_CASE("negative pool is balanced")
{
    const auto s = with_roles(100, 40);
    const auto pool = build_negative_pool(s, 3);
    CHECK(pool.size() == 80);
    std::size_t pure = 0;
    for (auto i : pool) pure += s[i].role == RoiRole::pure_background;
    CHECK(pure == 40);
    CHECK(build_negative_pool(with_roles(10, 0), 3).empty());
    CHECK(build_negative_pool(with_roles(7, 7), 3).size() == 14);
    CHECK(build_negative_pool(s, 3) == build_negative_pool(s, 3));
}

TEST_CASE("hard mining takes the largest losses")
{
    const auto s = with_roles(2, 1);
    // indices 0,1 pure; 2 ill; losses listed per sample
    const std::vector<double> losses{0.9, 0.1, 0.5};
    const Batch b = sample_batch(s, {2, 0.25, true, 1}, std::span<const double>(losses));
    auto neg = b.negatives;
    std::sort(neg.begin(), neg.end());
    CHECK(neg == std::vector<std::size_t>{0, 2});
}

TEST_CASE("quota arithmetic")
{
    const auto s = with_roles(20, 20, 10);
    const Batch b = sample_batch(s, {16, 0.25, false, 9});
    CHECK(b.positives.size() == 4);
    CHECK(b.negatives.size() == 12);
    CHECK(sample_batch(s, {16, 0.25, false, 9}).all() == b.all());
    CHECK_THROWS_AS(sample_batch(with_roles(0, 0, 0, 5, 5), {16, 0.25, false, 9}), EmptyBatchError);
}

TEST_CASE("discard and ignore never enter a batch")
{
    const auto s = with_roles(5, 5, 3, 50, 50);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        std::vector<double> losses(s.size(), 1.0);
        for (std::size_t i = 0; i < s.size(); ++i)
            if (s[i].role == RoiRole::discard || s[i].role == RoiRole::ignore) losses[i] = 100;
        const Batch b = sample_batch(s, {32, 0.5, seed % 2 == 0, seed}, std::span<const double>(losses));
        for (auto i : b.all()) {
            CHECK(s[i].role != RoiRole::discard);
            CHECK(s[i].role != RoiRole::ignore);
        }
    }
}

TEST_CASE("invariants on random scenes")
{
    const auto v = oracle::sampler_invariants(200, 17);
    CHECK(v.rois > 0);
    CHECK(v.role_partition == 0);
    CHECK(v.double_positive == 0);
    CHECK(v.pool_balance == 0);
    CHECK(v.forbidden_in_batch == 0);
}

TEST_CASE("batch statistics log line")
{
    const auto s = with_roles(5, 5, 3, 2, 1);
    const Batch b = sample_batch(s, {8, 0.25, false, 4});
    const BatchStats st = batch_stats(s, b, build_negative_pool(s, 4).size(), 2);
    CHECK(st.available[static_cast<int>(RoiRole::positive)] == 3);
    CHECK(st.available[static_cast<int>(RoiRole::discard)] == 2);
    CHECK(st.pool == 10);
    CHECK(st.batch_positive == 2);
    const auto j = nlohmann::json::parse(batch_log_line(st, "rpn"));
    CHECK(j.at("event") == "batch");
    CHECK(j.at("detector") == 2);
}

} // TEST_SUITE

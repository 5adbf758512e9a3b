#include <doctest.h>

#include <fstream>
#include <sstream>

#include "msdet/geometry.hpp"
#include "msdet/rng.hpp"

using namespace msdet;

TEST_SUITE("geometry") {

TEST_CASE("projected extent is height over stride")
{
    CHECK(projected_extent({0, 0, 20, 40}, 8) == doctest::Approx(5.0));
    CHECK(projected_extent({0, 0, 32, 32}, 32) == doctest::Approx(1.0));
    CHECK(projected_extent({0, 0, 5, 10}, 8) == doctest::Approx(1.25));
    CHECK_THROWS_AS(projected_extent({0, 0, 5, 10}, 0), std::invalid_argument);
    CHECK_THROWS_AS(projected_extent({0, 0, 5, 10}, -4), std::invalid_argument);
}

TEST_CASE("10 to 40 px at stride 8 covers 2 to 5 cells")
{
    CHECK(roi_cell_rect({0, 0, 10, 10}, 8).height() == 2);
    CHECK(roi_cell_rect({0, 0, 40, 40}, 8).height() == 5);
}

TEST_CASE("cell rect rounding")
{
    CHECK(roi_cell_rect({0, 0, 8, 8}, 16) == CellRect{0, 0, 1, 1});
    const CellRect r = roi_cell_rect({0, 0, 40, 40}, 8);
    CHECK(r.width() == 5);
    CHECK(r.height() == 5);
    // floor(3/4) = 0, ceil(13/4) = 4
    CHECK(roi_cell_rect({3, 3, 10, 10}, 4) == CellRect{0, 0, 4, 4});
    CHECK(roi_cell_rect({3, 3, 10, 10}, 4).area() > 0);
}

TEST_CASE("cell rect is translation covariant")
{
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        const int stride = 1 << rng.between(0, 5);
        const Box b{rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(0.5, 80), rng.uniform(0.5, 80)};
        const int kx = rng.between(-3, 3), ky = rng.between(-3, 3);
        const CellRect r = roi_cell_rect(b, stride);
        const CellRect s = roi_cell_rect({b.x + kx * stride, b.y + ky * stride, b.w, b.h}, stride);
        CHECK(s == CellRect{r.x0 + kx, r.y0 + ky, r.x1 + kx, r.y1 + ky});
        CHECK(r.area() >= 1);
    }
}

TEST_CASE("ambiguity")
{
    const Box a{0, 0, 8, 8}, b{4, 4, 8, 8};
    const Ambiguity coarse = ambiguity(a, b, 16);
    CHECK(coarse.identical_rect);
    CHECK(coarse.jaccard == doctest::Approx(1.0));
    // stride 4: A covers cells [0,2)x[0,2), B covers [1,3)x[1,3)
    const Ambiguity fine = ambiguity(a, b, 4);
    CHECK_FALSE(fine.identical_rect);
    CHECK(fine.jaccard == doctest::Approx(1.0 / 7.0));
    for (int s : {1, 2, 4, 8, 16, 32}) CHECK(ambiguity(a, a, s).identical_rect);
}

TEST_CASE("disjoint sub-stride boxes in one cell collide")
{
    Rng rng(6);
    for (int i = 0; i < 200; ++i) {
        const int stride = 8 << rng.between(0, 2);
        const double cx = stride * rng.between(0, 5), cy = stride * rng.between(0, 5);
        const double w = rng.uniform(0.5, stride / 2.0 - 0.1), h = rng.uniform(0.5, stride - 0.1);
        const Box a{cx, cy, w, h};
        const Box b{cx + stride - w, cy + stride - h, w, h};
        REQUIRE(intersection_area(a, b) == 0);
        CHECK(ambiguity(a, b, stride).identical_rect);
    }
}

TEST_CASE("scale match")
{
    const RoiTemplate t{5};
    CHECK(scale_match(40, 8, t) == doctest::Approx(1.0));
    CHECK(scale_match(160, 32, t) == doctest::Approx(1.0));
    CHECK(scale_match(10, 32, t) == doctest::Approx(0.0625));
}

TEST_CASE("projected extent is homogeneous")
{
    Rng rng(7);
    for (int i = 0; i < 100; ++i) {
        const double h = rng.uniform(1, 200), s = rng.uniform(1, 32), k = rng.uniform(0.1, 10);
        CHECK(projected_extent({0, 0, h, h * k}, s * k) == doctest::Approx(projected_extent({0, 0, h, h}, s)));
    }
}

TEST_CASE("receptive field recursion")
{
    std::vector<LayerGeometry> one{{3, 1, 1}};
    CHECK(receptive_field_chain(one) == 3);
    std::vector<LayerGeometry> two{{3, 1, 1}, {3, 1, 1}};
    CHECK(receptive_field_chain(two) == 5);
    std::vector<LayerGeometry> strided{{3, 2, 1}, {3, 1, 1}};
    CHECK(receptive_field_chain(strided) == 7);
    // dilation 2 makes a 3x3 kernel span 5
    std::vector<LayerGeometry> dil{{3, 1, 2}};
    CHECK(receptive_field_chain(dil) == 5);
    CHECK_THROWS_AS(receptive_field_chain({}), std::invalid_argument);
    std::vector<LayerGeometry> bad{{3, 0, 1}};
    CHECK_THROWS_AS(receptive_field_chain(bad), std::invalid_argument);
}

TEST_CASE("receptive field profile is monotone")
{
    Rng rng(8);
    for (int i = 0; i < 50; ++i) {
        std::vector<LayerGeometry> chain;
        for (int k = rng.between(1, 10); k > 0; --k)
            chain.push_back({2 * rng.between(0, 3) + 1, rng.between(1, 2), rng.between(1, 2)});
        const auto p = receptive_field_profile(chain);
        REQUIRE(p.size() == chain.size());
        for (std::size_t k = 1; k < p.size(); ++k) CHECK(p[k] >= p[k - 1]);
        CHECK(p.back() == receptive_field_chain(chain));
    }
}

TEST_CASE("stage validation")
{
    std::vector<StageSpec> ok{{"a", 4, 11, 8}, {"b", 8, 27, 16}};
    CHECK_NOTHROW(validate_stages(ok));
    std::vector<StageSpec> down{{"a", 8, 27, 8}, {"b", 4, 30, 16}};
    CHECK_THROWS_AS(validate_stages(down), std::invalid_argument);
    std::vector<StageSpec> small_rf{{"a", 8, 4, 8}};
    CHECK_THROWS_AS(validate_stages(small_rf), std::invalid_argument);
}

namespace {

BackboneDescription parse(const std::string& text)
{
    std::istringstream in(text);
    return parse_backbone_description(in);
}

std::vector<std::vector<std::string>> section_rows(const std::string& report, const std::string& header)
{
    std::istringstream in(report);
    std::string line;
    bool on = false;
    std::vector<std::vector<std::string>> rows;
    while (std::getline(in, line)) {
        if (line.rfind("#", 0) == 0) {
            on = false;
            continue;
        }
        if (line == header) {
            on = true;
            continue;
        }
        if (!on || line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) cells.push_back(c);
        rows.push_back(cells);
    }
    return rows;
}

} // namespace

TEST_CASE("backbone description parsing")
{
    const auto d = parse("# comment\nstage a channels=4\nlayer a kernel=3 stride=2\n\nstage b channels=8\n"
                         "layer b kernel=3 stride=2 dilation=1\n");
    REQUIRE(d.stages.size() == 2);
    CHECK(d.stages[0].cumulative_stride == 2);
    CHECK(d.stages[0].receptive_field == 3);
    CHECK(d.stages[1].cumulative_stride == 4);
    CHECK(d.stages[1].receptive_field == 7);
    CHECK(d.stages[1].channels == 8);
}

TEST_CASE("unknown stage in description is a parse error with line number")
{
    try {
        parse("stage a channels=4\nlayer a kernel=3 stride=1\nlayer zz kernel=3 stride=1\n");
        FAIL("expected a parse error");
    } catch (const std::exception& e) {
        CHECK(std::string(e.what()).find("line 3") != std::string::npos);
        CHECK(std::string(e.what()).find("zz") != std::string::npos);
    }
}

TEST_CASE("geometry report for a stride 4..32 ladder")
{
    std::ifstream f(MSDET_SOURCE_DIR "/configs/backbone_s4_s32.txt");
    REQUIRE(f.good());
    const auto desc = parse_backbone_description(f);
    const std::vector<double> heights{10, 40, 140};
    const std::string report = geometry_report(desc, heights, RoiTemplate{5});

    const auto stages = section_rows(report, "stage,stride,receptive_field,channels");
    REQUIRE(stages.size() == 4);
    const int strides[] = {4, 8, 16, 32};
    for (int i = 0; i < 4; ++i) CHECK(std::stoi(stages[i][1]) == strides[i]);

    // hand arithmetic: h / s, ceil for cells, (h / s) / 5
    const double extent[4][3] = {{2.5, 10, 35}, {1.25, 5, 17.5}, {0.625, 2.5, 8.75}, {0.3125, 1.25, 4.375}};
    const int cells[4][3] = {{3, 10, 35}, {2, 5, 18}, {1, 3, 9}, {1, 2, 5}};
    const auto rows = section_rows(report, "stage,stride,height,projected_extent,cells,scale_match");
    REQUIRE(rows.size() == 12);
    for (int s = 0; s < 4; ++s) {
        for (int h = 0; h < 3; ++h) {
            const auto& r = rows[3 * s + h];
            CHECK(std::stod(r[2]) == doctest::Approx(heights[h]));
            CHECK(std::stod(r[3]) == doctest::Approx(extent[s][h]).epsilon(1e-4));
            CHECK(std::stoi(r[4]) == cells[s][h]);
            CHECK(std::stod(r[5]) == doctest::Approx(extent[s][h] / 5).epsilon(1e-3));
        }
    }
}

TEST_CASE("geometry report without heights is the stage table only")
{
    const auto desc = parse("stage a channels=4\nlayer a kernel=3 stride=2\n");
    const std::string report = geometry_report(desc, {}, RoiTemplate{5});
    CHECK(report.find("projected") == std::string::npos);
    CHECK(section_rows(report, "stage,stride,receptive_field,channels").size() == 1);
}

} // TEST_SUITE

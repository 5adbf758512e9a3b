#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "msdet/errors.hpp"
#include "msdet/synthdata.hpp"

using namespace msdet;
namespace fs = std::filesystem;

namespace {

SceneSpec small_spec()
{
    SceneSpec s;
    s.image_w = 96;
    s.image_h = 64;
    s.scale_lo = 6;
    s.scale_hi = 40;
    s.seed = 99;
    return s;
}

AnnotatedImage with_boxes(int n, int W = 100, int H = 50)
{
    AnnotatedImage img;
    img.image_id = "x";
    img.image = GrayImage(W, H, 10);
    for (int i = 0; i < n; ++i) img.boxes.push_back({static_cast<double>(i % 10), 1, 2, 3});
    return img;
}

} // namespace

TEST_SUITE("synthdata") {

TEST_CASE("generation is deterministic and order independent")
{
    const SceneSpec s = small_spec();
    const Dataset a = generate(s, 12), b = generate(s, 12);
    CHECK(a == b);
    CHECK(generate_image(s, 7) == a[7]);
    SceneSpec other = s;
    other.seed = 100;
    CHECK_FALSE(generate(other, 12) == a);
}

TEST_CASE("boxes stay inside the image and inside the scale range")
{
    const SceneSpec s = small_spec();
    for (const auto& img : generate(s, 40)) {
        CHECK(img.image.width == s.image_w);
        CHECK(img.image.height == s.image_h);
        CHECK(static_cast<int>(img.boxes.size()) >= s.faces_min);
        CHECK(static_cast<int>(img.boxes.size()) <= s.faces_max);
        for (const auto& b : img.boxes) {
            CHECK(b.x >= 0);
            CHECK(b.y >= 0);
            CHECK(b.x2() <= s.image_w);
            CHECK(b.y2() <= s.image_h);
            CHECK(b.h >= s.scale_lo);
            CHECK(b.h <= s.scale_hi);
        }
    }
}

TEST_CASE("zero targets per image gives empty annotations")
{
    SceneSpec s = small_spec();
    s.faces_min = s.faces_max = 0;
    for (const auto& img : generate(s, 10)) CHECK(img.boxes.empty());
}

TEST_CASE("invalid specs are rejected naming the field")
{
    SceneSpec s = small_spec();
    s.scale_hi = 500;
    try {
        validate_scene_spec(s);
        FAIL("expected rejection");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("scale_hi") != std::string::npos);
    }
    s = small_spec();
    s.scale_lo = 50;
    CHECK_THROWS_AS(validate_scene_spec(s), std::invalid_argument);
    s = small_spec();
    s.clutter_density = 1.5;
    CHECK_THROWS_AS(validate_scene_spec(s), std::invalid_argument);
}

TEST_CASE("heights are log-uniform (chi-square, 1% level)")
{
    SceneSpec s;
    s.seed = 2024;
    const Dataset d = generate(s, 1000);
    const int bins = 10;
    std::vector<double> count(bins, 0);
    double n = 0;
    const double lo = std::log(s.scale_lo), hi = std::log(s.scale_hi);
    for (const auto& img : d) {
        for (const auto& b : img.boxes) {
            const int k = std::min(bins - 1, static_cast<int>((std::log(b.h) - lo) / (hi - lo) * bins));
            count[k] += 1;
            n += 1;
        }
    }
    double chi2 = 0;
    for (double c : count) chi2 += (c - n / bins) * (c - n / bins) / (n / bins);
    // upper 1% point of chi-square with 9 degrees of freedom
    CHECK(chi2 < 21.666);
    MESSAGE("chi2 = " << chi2 << " over " << n << " heights");
}

TEST_CASE("augment duplicates crowded images and appends mirrors")
{
    Dataset d{with_boxes(30), with_boxes(3)};
    d[1].image_id = "y";
    const Dataset same = augment(d, {25, 0, false});
    CHECK(same == d);
    const Dataset dup = augment(d, {25, 5, false});
    CHECK(dup.size() == 7);
    const Dataset both = augment(d, {25, 5, true});
    CHECK(both.size() == 14);
    std::size_t flipped = 0;
    for (const auto& img : both) flipped += img.image_id.ends_with("_flip");
    CHECK(flipped == 7);
}

TEST_CASE("horizontal flip mirror arithmetic")
{
    AnnotatedImage img = with_boxes(0);
    img.boxes = {{0, 5, 10, 10}};
    img.image.at(0, 0) = 200;
    const AnnotatedImage f = hflip(img);
    CHECK(f.boxes[0].x == doctest::Approx(90));
    CHECK(f.image.at(99, 0) == 200);
    CHECK(hflip(f).boxes == img.boxes);
    CHECK(hflip(f).image == img.image);
}

TEST_CASE("resize to a longest-side cap")
{
    AnnotatedImage big = with_boxes(0, 2600, 1800);
    big.boxes = {{100, 200, 50, 80}};
    const AnnotatedImage r = resize_longest(big, 1300);
    CHECK(r.image.width == 1300);
    CHECK(r.image.height == 900);
    CHECK(r.boxes[0].x == doctest::Approx(50));
    CHECK(r.boxes[0].h == doctest::Approx(40));

    const AnnotatedImage small = with_boxes(2, 100, 100);
    CHECK(resize_longest(small, 1300) == small);
    const AnnotatedImage exact = with_boxes(2, 1300, 1300);
    CHECK(resize_longest(exact, 1300) == exact);

    AnnotatedImage odd = with_boxes(0, 333, 197);
    odd.boxes = {{300, 150, 33, 47}};
    const AnnotatedImage o = resize_longest(odd, 128);
    CHECK(std::max(o.image.width, o.image.height) == 128);
    CHECK(std::abs(o.image.height - 197.0 * 128 / 333) <= 1.0);
    CHECK(o.boxes[0].x2() <= o.image.width + 1e-9);
    CHECK(o.boxes[0].y2() <= o.image.height + 1e-9);
}

TEST_CASE("pgm and annotation files round trip")
{
    const fs::path dir = fs::temp_directory_path() / "msdet_synth_rt";
    fs::remove_all(dir);
    const Dataset d = generate(small_spec(), 5);
    save_dataset(dir, "train", d);
    CHECK(fs::exists(dir / "train.jsonl"));
    const Dataset back = load_dataset(dir / "train.jsonl");
    CHECK(back == d);
    const Dataset ann = load_annotations(dir / "train.jsonl");
    REQUIRE(ann.size() == d.size());
    CHECK(ann[2].boxes == d[2].boxes);
    CHECK(ann[2].image.width == d[2].image.width);

    const std::string pgm = encode_pgm(d[0].image);
    CHECK(pgm.rfind("P5\n96 64\n255\n", 0) == 0);
    CHECK(pgm.size() == std::string("P5\n96 64\n255\n").size() + 96 * 64);
    fs::remove_all(dir);
}

} // TEST_SUITE

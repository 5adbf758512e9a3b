#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "msdet/model.hpp"
#include "msdet/partition.hpp"
#include "oracles.hpp"

using namespace msdet;
namespace fs = std::filesystem;

namespace {

SplitScheme desk(const std::string& name) { return *find_scheme(desk_schemes(), name); }

BackboneSpec small_backbone()
{
    BackboneSpec b;
    b.stem_channels = 4;
    b.stages = {{6, 1}, {8, 1}, {8, 1}, {10, 1}};
    return b;
}

HeadSpec small_head() { return {8, 4, 12, 6, 3}; }

// conv tensors are rank 4; a bias belongs to the layer its name shares
ParamCount count_instantiated(const Model& m)
{
    ParamCount c;
    const ParamSet& p = m.params();
    for (std::size_t i = 0; i < p.size(); ++i) {
        const std::string& n = p.name(i);
        const std::string layer = n.substr(0, n.rfind('.'));
        const bool conv = p.at(layer + ".w").ndim() == 4;
        (conv ? c.conv : c.fc) += p[i].size();
    }
    return c;
}

} // namespace

TEST_SUITE("model") {

TEST_CASE("ensemble layout")
{
    const EnsembleSpec joint = build_ensemble_spec(desk("three"), BackboneSpec{}, HeadSpec{}, TrainMode::joint);
    REQUIRE(joint.models.size() == 1);
    REQUIRE(joint.models[0].heads.size() == 3);
    for (std::size_t k = 0; k < 3; ++k) {
        const HeadBinding& h = joint.models[0].heads[k];
        CHECK(h.detector_id == k);
        CHECK(h.curr_stage == h.prev_stage + 1);
        CHECK(h.range == desk("three").ranges[k]);
        CHECK_FALSE(h.anchor_heights.empty());
    }
    CHECK(joint.models[0].heads[2].curr_stage == BackboneSpec{}.num_stages() - 1);

    const EnsembleSpec naive = build_ensemble_spec(desk("three"), BackboneSpec{}, HeadSpec{}, TrainMode::naive);
    REQUIRE(naive.models.size() == 3);
    for (std::size_t k = 0; k < 3; ++k) {
        CHECK(naive.models[k].heads.size() == 1);
        CHECK(naive.models[k].heads[0].detector_id == k);
        // a naive model keeps only the backbone its head needs
        CHECK(naive.models[k].backbone.num_stages() == naive.models[k].heads[0].curr_stage + 1);
    }
    CHECK(parse_mode("naive") == TrainMode::naive);
    CHECK(std::string(mode_name(TrainMode::joint)) == "joint");
    CHECK_THROWS(parse_mode("both"));
}

TEST_CASE("closed-form parameter count matches instantiated tensors")
{
    for (const std::string name : {"one", "three", "four"}) {
        for (const TrainMode mode : {TrainMode::joint, TrainMode::naive}) {
            for (const double f : {1.0, 0.5, 0.3}) {
                const CompressionResult c = compress(BackboneSpec{}, HeadSpec{}, f,
                                                     build_ensemble_spec(desk(name), BackboneSpec{}, HeadSpec{}, mode));
                const EnsembleSpec spec = build_ensemble_spec(desk(name), c.backbone, c.head, mode);
                ParamCount inst;
                for (const auto& m : spec.models) {
                    const ParamCount one = count_instantiated(Model(m));
                    CHECK(count_params(m).conv == one.conv);
                    CHECK(count_params(m).fc == one.fc);
                    inst.conv += one.conv;
                    inst.fc += one.fc;
                }
                CHECK(count_params(spec).total() == inst.total());
            }
        }
    }
}

TEST_CASE("compression scales widths")
{
    const EnsembleSpec ref = build_ensemble_spec(desk("three"), BackboneSpec{}, HeadSpec{}, TrainMode::joint);
    const CompressionResult c = compress(BackboneSpec{}, HeadSpec{}, 0.5, ref);
    CHECK(c.backbone.stem_channels == 4);
    CHECK(c.backbone.stages[0].channels == 8);
    CHECK(c.head.fc1 == 32);
    CHECK(c.head.roi_template == HeadSpec{}.roi_template);
    CHECK(c.predicted_conv_ratio < 0.3);
    CHECK(c.predicted_param_ratio < 1.0);
    const EnsembleSpec small = build_ensemble_spec(desk("three"), c.backbone, c.head, TrainMode::joint);
    CHECK(c.predicted_param_ratio ==
          doctest::Approx(static_cast<double>(count_params(small).total()) / count_params(ref).total()));
    CHECK(compress(BackboneSpec{}, HeadSpec{}, 1.0, ref).backbone == BackboneSpec{});
    CHECK(compress(BackboneSpec{}, HeadSpec{}, 0.01, ref).backbone.stem_channels == 1);
    CHECK_THROWS_AS(compress(BackboneSpec{}, HeadSpec{}, 0.0, ref), std::invalid_argument);
    CHECK_THROWS_AS(compress(BackboneSpec{}, HeadSpec{}, 1.5, ref), std::invalid_argument);
}

TEST_CASE("spec json round trip")
{
    for (const TrainMode mode : {TrainMode::joint, TrainMode::naive}) {
        const EnsembleSpec s = build_ensemble_spec(desk("four"), small_backbone(), small_head(), mode);
        const std::string j = spec_to_json(s);
        CHECK(ensemble_spec_from_json(j) == s);
        CHECK(spec_to_json(ensemble_spec_from_json(j)) == j);
    }
    CHECK(backbone_from_json(backbone_to_json(small_backbone())) == small_backbone());
    CHECK(head_from_json(head_to_json(small_head())) == small_head());
}

TEST_CASE("backbone description agrees with the spec ladder")
{
    BackboneSpec b = small_backbone();
    std::istringstream in(backbone_description(b));
    const auto desc = parse_backbone_description(in);
    const auto ladder = b.ladder();
    REQUIRE(desc.stages.size() == ladder.size());
    for (std::size_t i = 0; i < ladder.size(); ++i) {
        CHECK(desc.stages[i].cumulative_stride == ladder[i].cumulative_stride);
        CHECK(desc.stages[i].receptive_field == ladder[i].receptive_field);
        CHECK(desc.stages[i].channels == ladder[i].channels);
    }
}

TEST_CASE("checkpoint round trip")
{
    const EnsembleSpec s = build_ensemble_spec(desk("three"), small_backbone(), small_head(), TrainMode::naive);
    const Ensemble e = Ensemble::create(s, 5);
    CHECK(e.num_detectors() == 3);
    const fs::path p = fs::temp_directory_path() / "msdet_model_rt.ckpt";
    save_checkpoint(p, e);
    const Ensemble back = load_checkpoint(p);
    CHECK(back.spec == e.spec);
    REQUIRE(back.models.size() == e.models.size());
    for (std::size_t i = 0; i < e.models.size(); ++i) CHECK(back.models[i].params() == e.models[i].params());
    CHECK(encode_checkpoint(back) == encode_checkpoint(e));
    fs::remove(p);

    std::string bytes = encode_checkpoint(e);
    CHECK_THROWS(decode_checkpoint(bytes.substr(0, bytes.size() / 2)));
    bytes[0] ^= 0x5a;
    CHECK_THROWS(decode_checkpoint(bytes));
}

TEST_CASE("initialization is seeded")
{
    const EnsembleSpec s = build_ensemble_spec(desk("three"), small_backbone(), small_head(), TrainMode::joint);
    CHECK(Ensemble::create(s, 1).models[0].params() == Ensemble::create(s, 1).models[0].params());
    CHECK_FALSE(Ensemble::create(s, 1).models[0].params() == Ensemble::create(s, 2).models[0].params());
    CHECK(Ensemble::create(s, 1).models[0].params().all_finite());
}

TEST_CASE("hypercolumn needs adjacent strides")
{
    Tensor prev({1, 2, 8, 8}, 1.0), curr({1, 3, 4, 4}, 2.0);
    const std::vector<Box> boxes{{0, 0, 16, 16}, {4, 4, 8, 12}};
    const Tensor h = hypercolumn_roi(prev, curr, boxes, 4, 8, RoiTemplate{3});
    CHECK(h.shape == std::vector<int>{2, 5, 3, 3});
    CHECK(h[0] == 1.0);
    CHECK(h[2 * 9] == 2.0);
    CHECK_THROWS_AS(hypercolumn_roi(prev, curr, boxes, 4, 16, RoiTemplate{3}), std::invalid_argument);
}

TEST_CASE("learning rate schedule")
{
    SgdConfig c;
    c.lr = 0.1;
    CHECK(learning_rate(c, 1000) == doctest::Approx(0.1));
    c.step_size = 100;
    c.gamma = 0.5;
    CHECK(learning_rate(c, 99) == doctest::Approx(0.1));
    CHECK(learning_rate(c, 100) == doctest::Approx(0.05));
    CHECK(learning_rate(c, 250) == doctest::Approx(0.025));
    c.warmup_steps = 10;
    CHECK(learning_rate(c, 0) == doctest::Approx(0.01));
    CHECK(learning_rate(c, 5) == doctest::Approx(0.055));
}

TEST_CASE("momentum step")
{
    ParamSet p;
    p.add("a", {2});
    p[0].data = {1.0, -1.0};
    ParamSet g = p.zeros_like(), v = p.zeros_like();
    g[0].data = {0.5, 0.0};
    sgd_step(p, g, v, 0.1, 0.9);
    CHECK(p[0][0] == doctest::Approx(0.95));
    sgd_step(p, g, v, 0.1, 0.9);
    // v = 0.9 * 0.5 + 0.5 = 0.95
    CHECK(v[0][0] == doctest::Approx(0.95));
    CHECK(p[0][0] == doctest::Approx(0.855));
    CHECK(p[0][1] == -1.0);

    g[0][1] = std::nan("");
    try {
        sgd_step(p, g, v, 0.1, 0.9);
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        CHECK(std::string(e.what()).find("a") != std::string::npos);
    }
}

TEST_CASE("end to end gradient by finite differences")
{
    for (std::uint64_t s = 0; s < 4; ++s) {
        const auto r = oracle::check_model(500 + s);
        INFO("seed " << s << " worst " << r.worst << " excluded " << r.excluded);
        CHECK(r.worst <= 1e-3);
        CHECK(r.coordinates > 0);
        CHECK(r.excluded < r.coordinates);
    }
}

} // TEST_SUITE

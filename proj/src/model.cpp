#include "msdet/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "msdet/digest.hpp"
#include "msdet/rng.hpp"

namespace msdet {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Specs

namespace {

std::vector<LayerGeometry> stage_layers(const BackboneSpec& b, int stage)
{
    if (stage == 0) return {{3, b.stem_stride, 1}};
    std::vector<LayerGeometry> out;
    const BackboneStage& s = b.stages[stage - 1];
    if (b.pool_downsample) {
        out.push_back({2, 2, 1});
        for (int i = 0; i < s.blocks; ++i) out.push_back({3, 1, 1});
    } else {
        out.push_back({3, 2, 1});
        for (int i = 1; i < s.blocks; ++i) out.push_back({3, 1, 1});
    }
    return out;
}

void validate_backbone(const BackboneSpec& b)
{
    if (b.in_channels < 1 || b.stem_channels < 1 || b.stem_stride < 1)
        throw std::invalid_argument("backbone: channels and stem stride must be positive");
    for (const auto& s : b.stages)
        if (s.channels < 1 || s.blocks < 1) throw std::invalid_argument("backbone: every stage needs channels and blocks");
}

void validate_head(const HeadSpec& h)
{
    if (h.rpn_channels < 1 || h.cls_channels < 1 || h.fc1 < 1 || h.fc2 < 1 || h.roi_template < 1)
        throw std::invalid_argument("head: widths must be positive");
}

int ceil_scaled(int n, double factor) { return std::max(1, static_cast<int>(std::ceil(n * factor - 1e-9))); }

} // namespace

std::vector<StageSpec> BackboneSpec::ladder() const
{
    std::vector<LayerGeometry> chain;
    std::vector<StageSpec> out;
    for (int s = 0; s < num_stages(); ++s) {
        auto layers = stage_layers(*this, s);
        chain.insert(chain.end(), layers.begin(), layers.end());
        out.push_back({"stage" + std::to_string(s), stride(s), receptive_field_chain(chain), channels(s)});
    }
    return out;
}

BackboneSpec BackboneSpec::truncated(int last_stage) const
{
    if (last_stage < 0 || last_stage >= num_stages()) throw std::invalid_argument("truncated: stage out of range");
    BackboneSpec b = *this;
    b.stages.resize(last_stage);
    return b;
}

const char* mode_name(TrainMode m) { return m == TrainMode::joint ? "joint" : "naive"; }

TrainMode parse_mode(const std::string& s)
{
    if (s == "joint") return TrainMode::joint;
    if (s == "naive") return TrainMode::naive;
    throw std::invalid_argument("mode must be joint or naive, got '" + s + "'");
}

ModelSpec single_range_spec(const ScaleRange& range, std::size_t detector_id, int curr_stage,
                            const BackboneSpec& backbone, const HeadSpec& head)
{
    if (curr_stage < 1 || curr_stage >= backbone.num_stages())
        throw std::invalid_argument("single_range_spec: current stage must have a previous stage");
    ModelSpec m;
    m.backbone = backbone.truncated(curr_stage);
    m.head = head;
    HeadBinding hb;
    hb.detector_id = detector_id;
    hb.range = range;
    hb.prev_stage = curr_stage - 1;
    hb.curr_stage = curr_stage;
    hb.anchor_heights = make_anchors(range, backbone.stride(curr_stage), 1, 1).heights;
    m.heads.push_back(hb);
    return m;
}

EnsembleSpec build_ensemble_spec(const SplitScheme& scheme, const BackboneSpec& backbone, const HeadSpec& head,
                                 TrainMode mode)
{
    validate_scheme(scheme);
    validate_backbone(backbone);
    validate_head(head);
    const auto ladder = backbone.ladder();
    const StageAssignment asg = assign_stages(scheme, ladder, RoiTemplate{head.roi_template});
    EnsembleSpec e;
    e.mode = mode;
    e.scheme = scheme;
    if (mode == TrainMode::joint) {
        ModelSpec m;
        m.backbone = backbone;
        m.head = head;
        for (std::size_t i = 0; i < asg.pairs.size(); ++i) {
            const StagePair& p = asg.pairs[i];
            HeadBinding hb;
            hb.detector_id = i;
            hb.range = p.range;
            hb.prev_stage = static_cast<int>(p.previous_index);
            hb.curr_stage = static_cast<int>(p.current_index);
            hb.anchor_heights = make_anchors(p.range, p.current.cumulative_stride, 1, 1).heights;
            m.heads.push_back(hb);
        }
        e.models.push_back(std::move(m));
    } else {
        for (std::size_t i = 0; i < asg.pairs.size(); ++i)
            e.models.push_back(single_range_spec(asg.pairs[i].range, i, static_cast<int>(asg.pairs[i].current_index),
                                                 backbone, head));
    }
    return e;
}

namespace {

json backbone_json(const BackboneSpec& b)
{
    json j;
    j["in_channels"] = b.in_channels;
    j["stem_channels"] = b.stem_channels;
    j["stem_stride"] = b.stem_stride;
    j["pool_downsample"] = b.pool_downsample;
    j["stages"] = json::array();
    for (const auto& s : b.stages) j["stages"].push_back({{"channels", s.channels}, {"blocks", s.blocks}});
    return j;
}

BackboneSpec backbone_of(const json& j)
{
    BackboneSpec b;
    b.in_channels = j.value("in_channels", b.in_channels);
    b.stem_channels = j.value("stem_channels", b.stem_channels);
    b.stem_stride = j.value("stem_stride", b.stem_stride);
    b.pool_downsample = j.value("pool_downsample", b.pool_downsample);
    if (j.contains("stages")) {
        b.stages.clear();
        for (const auto& s : j.at("stages")) b.stages.push_back({s.at("channels").get<int>(), s.value("blocks", 2)});
    }
    validate_backbone(b);
    return b;
}

json head_json(const HeadSpec& h)
{
    return {{"rpn_channels", h.rpn_channels}, {"cls_channels", h.cls_channels}, {"fc1", h.fc1},
            {"fc2", h.fc2},                   {"roi_template", h.roi_template}};
}

HeadSpec head_of(const json& j)
{
    HeadSpec h;
    h.rpn_channels = j.value("rpn_channels", h.rpn_channels);
    h.cls_channels = j.value("cls_channels", h.cls_channels);
    h.fc1 = j.value("fc1", h.fc1);
    h.fc2 = j.value("fc2", h.fc2);
    h.roi_template = j.value("roi_template", h.roi_template);
    validate_head(h);
    return h;
}

} // namespace

std::string spec_to_json(const EnsembleSpec& spec)
{
    json j;
    j["mode"] = mode_name(spec.mode);
    j["scheme"] = json::parse(scheme_to_json(spec.scheme));
    j["models"] = json::array();
    for (const auto& m : spec.models) {
        json jm;
        jm["backbone"] = backbone_json(m.backbone);
        jm["head"] = head_json(m.head);
        jm["heads"] = json::array();
        for (const auto& h : m.heads)
            jm["heads"].push_back({{"detector_id", h.detector_id},
                                   {"range", {h.range.lo, h.range.hi}},
                                   {"prev_stage", h.prev_stage},
                                   {"curr_stage", h.curr_stage},
                                   {"anchor_heights", h.anchor_heights}});
        j["models"].push_back(jm);
    }
    return j.dump();
}

EnsembleSpec ensemble_spec_from_json(const std::string& text)
{
    try {
        const json j = json::parse(text);
        EnsembleSpec e;
        e.mode = parse_mode(j.at("mode").get<std::string>());
        e.scheme = scheme_from_json(j.at("scheme").dump());
        for (const auto& jm : j.at("models")) {
            ModelSpec m;
            m.backbone = backbone_of(jm.at("backbone"));
            m.head = head_of(jm.at("head"));
            for (const auto& jh : jm.at("heads")) {
                HeadBinding h;
                h.detector_id = jh.at("detector_id").get<std::size_t>();
                h.range = {jh.at("range").at(0).get<double>(), jh.at("range").at(1).get<double>()};
                h.prev_stage = jh.at("prev_stage").get<int>();
                h.curr_stage = jh.at("curr_stage").get<int>();
                h.anchor_heights = jh.at("anchor_heights").get<std::vector<double>>();
                m.heads.push_back(h);
            }
            e.models.push_back(std::move(m));
        }
        return e;
    } catch (const json::exception& ex) {
        throw std::invalid_argument(std::string("ensemble spec: ") + ex.what());
    }
}

std::string backbone_to_json(const BackboneSpec& b) { return backbone_json(b).dump(); }

BackboneSpec backbone_from_json(const std::string& text)
{
    try {
        return backbone_of(json::parse(text));
    } catch (const json::exception& ex) {
        throw std::invalid_argument(std::string("backbone spec: ") + ex.what());
    }
}

std::string head_to_json(const HeadSpec& h) { return head_json(h).dump(); }

HeadSpec head_from_json(const std::string& text)
{
    try {
        return head_of(json::parse(text));
    } catch (const json::exception& ex) {
        throw std::invalid_argument(std::string("head spec: ") + ex.what());
    }
}

std::string backbone_description(const BackboneSpec& b)
{
    std::ostringstream os;
    for (int s = 0; s < b.num_stages(); ++s) {
        os << "stage stage" << s << " channels=" << b.channels(s) << "\n";
        for (const auto& l : stage_layers(b, s))
            os << "layer stage" << s << " kernel=" << l.kernel << " stride=" << l.stride << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Parameters

std::size_t ParamSet::add(std::string name, std::vector<int> shape)
{
    if (lookup_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    lookup_[name] = items_.size();
    items_.push_back({std::move(name), Tensor(std::move(shape))});
    return items_.size() - 1;
}

std::size_t ParamSet::index(const std::string& name) const
{
    auto it = lookup_.find(name);
    if (it == lookup_.end()) throw std::invalid_argument("unknown parameter " + name);
    return it->second;
}

ParamSet ParamSet::zeros_like() const
{
    ParamSet p = *this;
    p.set_zero();
    return p;
}

void ParamSet::set_zero()
{
    for (auto& it : items_) it.value.fill(0.0);
}

std::size_t ParamSet::scalar_count() const
{
    std::size_t n = 0;
    for (const auto& it : items_) n += it.value.size();
    return n;
}

bool ParamSet::all_finite() const
{
    return std::all_of(items_.begin(), items_.end(), [](const NamedTensor& t) { return t.value.all_finite(); });
}

bool operator==(const ParamSet& a, const ParamSet& b)
{
    if (a.items_.size() != b.items_.size()) return false;
    for (std::size_t i = 0; i < a.items_.size(); ++i)
        if (a.items_[i].name != b.items_[i].name || !(a.items_[i].value == b.items_[i].value)) return false;
    return true;
}

namespace {

std::size_t conv_count(int cin, int cout, int k) { return static_cast<std::size_t>(cin) * cout * k * k + cout; }
std::size_t fc_count(int din, int dout) { return static_cast<std::size_t>(din) * dout + dout; }

} // namespace

ParamCount count_params(const ModelSpec& spec)
{
    ParamCount c;
    const BackboneSpec& b = spec.backbone;
    c.conv += conv_count(b.in_channels, b.stem_channels, 3);
    for (int s = 1; s < b.num_stages(); ++s) {
        const int cin = b.channels(s - 1), cout = b.channels(s);
        for (int i = 0; i < b.stages[s - 1].blocks; ++i) c.conv += conv_count(i == 0 ? cin : cout, cout, 3);
    }
    const HeadSpec& h = spec.head;
    const int T = h.roi_template;
    for (const auto& hb : spec.heads) {
        const int A = static_cast<int>(hb.anchor_heights.size());
        c.conv += conv_count(b.channels(hb.curr_stage), h.rpn_channels, 3);
        c.conv += conv_count(h.rpn_channels, A, 1) + conv_count(h.rpn_channels, 4 * A, 1);
        c.conv += conv_count(b.channels(hb.prev_stage) + b.channels(hb.curr_stage), h.cls_channels, 3);
        c.conv += conv_count(h.cls_channels, h.cls_channels, 3);
        c.fc += fc_count(h.cls_channels * T * T, h.fc1) + fc_count(h.fc1, h.fc2);
        c.fc += fc_count(h.fc2, 1) + fc_count(h.fc2, 4);
    }
    return c;
}

ParamCount count_params(const EnsembleSpec& spec)
{
    ParamCount c;
    for (const auto& m : spec.models) {
        const ParamCount p = count_params(m);
        c.conv += p.conv;
        c.fc += p.fc;
    }
    return c;
}

// ---------------------------------------------------------------------------
// Network

Model::Model(ModelSpec spec) : spec_(std::move(spec))
{
    const BackboneSpec& b = spec_.backbone;
    validate_backbone(b);
    validate_head(spec_.head);

    auto add_conv = [&](const std::string& name, int cin, int cout, int k, int stride) {
        Op op;
        op.kind = Op::conv;
        op.w = params_.add(name + ".w", {cout, cin, k, k});
        op.b = params_.add(name + ".b", {cout});
        op.geom = {k, stride, k / 2};
        ops_.push_back(op);
    };

    add_conv("stem", b.in_channels, b.stem_channels, 3, b.stem_stride);
    stage_end_op_.push_back(0);
    for (int s = 1; s < b.num_stages(); ++s) {
        const std::string p = "s" + std::to_string(s);
        const int cin = b.channels(s - 1), cout = b.channels(s);
        if (b.pool_downsample) {
            Op op;
            op.kind = Op::pool;
            ops_.push_back(op);
            for (int i = 0; i < b.stages[s - 1].blocks; ++i)
                add_conv(p + ".c" + std::to_string(i), i == 0 ? cin : cout, cout, 3, 1);
        } else {
            for (int i = 0; i < b.stages[s - 1].blocks; ++i)
                add_conv(p + ".c" + std::to_string(i), i == 0 ? cin : cout, cout, 3, i == 0 ? 2 : 1);
        }
        stage_end_op_.push_back(static_cast<int>(ops_.size()) - 1);
    }

    const HeadSpec& h = spec_.head;
    const int T = h.roi_template;
    for (std::size_t i = 0; i < spec_.heads.size(); ++i) {
        const HeadBinding& hb = spec_.heads[i];
        if (hb.curr_stage < 1 || hb.curr_stage >= b.num_stages() || hb.prev_stage != hb.curr_stage - 1)
            throw std::invalid_argument("head " + std::to_string(i) + ": stage pair must be adjacent and in range");
        if (hb.anchor_heights.empty()) throw std::invalid_argument("head " + std::to_string(i) + ": no anchors");
        const int A = static_cast<int>(hb.anchor_heights.size());
        const int cp = b.channels(hb.prev_stage), cc = b.channels(hb.curr_stage);
        const std::string p = "h" + std::to_string(i);
        HeadParams hp{};
        hp.rpn_w = params_.add(p + ".rpn.w", {h.rpn_channels, cc, 3, 3});
        hp.rpn_b = params_.add(p + ".rpn.b", {h.rpn_channels});
        hp.obj_w = params_.add(p + ".obj.w", {A, h.rpn_channels, 1, 1});
        hp.obj_b = params_.add(p + ".obj.b", {A});
        hp.box_w = params_.add(p + ".box.w", {4 * A, h.rpn_channels, 1, 1});
        hp.box_b = params_.add(p + ".box.b", {4 * A});
        hp.c1_w = params_.add(p + ".cls1.w", {h.cls_channels, cp + cc, 3, 3});
        hp.c1_b = params_.add(p + ".cls1.b", {h.cls_channels});
        hp.c2_w = params_.add(p + ".cls2.w", {h.cls_channels, h.cls_channels, 3, 3});
        hp.c2_b = params_.add(p + ".cls2.b", {h.cls_channels});
        hp.fc1_w = params_.add(p + ".fc1.w", {h.fc1, h.cls_channels * T * T});
        hp.fc1_b = params_.add(p + ".fc1.b", {h.fc1});
        hp.fc2_w = params_.add(p + ".fc2.w", {h.fc2, h.fc1});
        hp.fc2_b = params_.add(p + ".fc2.b", {h.fc2});
        hp.score_w = params_.add(p + ".score.w", {1, h.fc2});
        hp.score_b = params_.add(p + ".score.b", {1});
        hp.dbox_w = params_.add(p + ".dbox.w", {4, h.fc2});
        hp.dbox_b = params_.add(p + ".dbox.b", {4});
        heads_.push_back(hp);
    }
}

void Model::initialize(std::uint64_t seed)
{
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& t = params_[i];
        const std::string& name = params_.name(i);
        if (t.ndim() == 1) {
            t.fill(0.0);
            continue;
        }
        std::size_t fan_in = t.size() / static_cast<std::size_t>(t.dim(0));
        const bool output = name.ends_with(".obj.w") || name.ends_with(".box.w") || name.ends_with(".score.w") ||
                            name.ends_with(".dbox.w");
        const double sd = output ? 0.01 : std::sqrt(2.0 / static_cast<double>(fan_in));
        Rng rng(sub_seed(seed, i));
        for (double& v : t.data) v = sd * rng.normal();
    }
}

Tensor Model::image_tensor(const GrayImage& img)
{
    Tensor t({1, 1, img.height, img.width});
    for (std::size_t i = 0; i < img.pixels.size(); ++i) t[i] = (img.pixels[i] - 127.5) / 127.5;
    return t;
}

BackboneState Model::forward_backbone(const Tensor& image) const
{
    const BackboneSpec& b = spec_.backbone;
    require_shape(image, {1, b.in_channels, image.ndim() == 4 ? image.dim(2) : 0, image.ndim() == 4 ? image.dim(3) : 0},
                  "forward_backbone input");
    const int ms = spec_.max_stride();
    if (image.dim(2) % ms != 0 || image.dim(3) % ms != 0)
        throw std::invalid_argument("forward_backbone: image " + std::to_string(image.dim(3)) + "x" +
                                    std::to_string(image.dim(2)) + " not divisible by max stride " +
                                    std::to_string(ms));
    if (!image.all_finite()) throw std::invalid_argument("forward_backbone: non-finite input");

    BackboneState st;
    st.acts.reserve(ops_.size() + 1);
    st.acts.push_back(image);
    st.argmax.resize(ops_.size());
    for (std::size_t i = 0; i < ops_.size(); ++i) {
        const Op& op = ops_[i];
        if (op.kind == Op::conv) {
            Tensor out = kernels::conv2d_forward(st.acts.back(), params_[op.w], params_[op.b], op.geom);
            kernels::relu_forward(out);
            st.acts.push_back(std::move(out));
        } else {
            st.acts.push_back(kernels::maxpool2x2_forward(st.acts.back(), st.argmax[i]));
        }
    }
    for (int e : stage_end_op_) st.feature_act.push_back(e + 1);
    return st;
}

void Model::backward_backbone(const BackboneState& state, std::vector<Tensor>& feature_grads, ParamSet& grads) const
{
    const int nstages = spec_.backbone.num_stages();
    if (static_cast<int>(feature_grads.size()) > nstages)
        throw std::invalid_argument("backward_backbone: too many feature gradients");
    int top = -1;
    for (int s = 0; s < static_cast<int>(feature_grads.size()); ++s)
        if (!feature_grads[s].data.empty()) top = s;
    if (top < 0) return;

    Tensor g;
    for (int i = stage_end_op_[top]; i >= 0; --i) {
        // add the feature gradient of a stage whose output is act i+1
        for (int s = 0; s <= top; ++s)
            if (stage_end_op_[s] == i && !feature_grads[s].data.empty()) {
                const Tensor& fg = feature_grads[s];
                require_shape(fg, state.acts[i + 1].shape, "backward_backbone feature gradient");
                if (g.data.empty())
                    g = fg;
                else
                    for (std::size_t k = 0; k < g.size(); ++k) g[k] += fg[k];
            }
        if (g.data.empty()) continue;
        const Op& op = ops_[i];
        if (op.kind == Op::conv) {
            kernels::relu_backward(state.acts[i + 1], g);
            Tensor gin(state.acts[i].shape);
            kernels::conv2d_backward(state.acts[i], params_[op.w], g, op.geom, i > 0 ? &gin : nullptr, grads[op.w],
                                     grads[op.b]);
            g = std::move(gin);
        } else {
            g = kernels::maxpool2x2_backward(state.acts[i].shape, g, state.argmax[i]);
        }
    }
}

RpnState Model::rpn_forward(std::size_t head, const Tensor& feature) const
{
    const HeadParams& hp = heads_.at(head);
    RpnState st;
    st.hidden = kernels::conv2d_forward(feature, params_[hp.rpn_w], params_[hp.rpn_b], {3, 1, 1});
    kernels::relu_forward(st.hidden);
    st.objectness = kernels::conv2d_forward(st.hidden, params_[hp.obj_w], params_[hp.obj_b], {1, 1, 0});
    st.deltas = kernels::conv2d_forward(st.hidden, params_[hp.box_w], params_[hp.box_b], {1, 1, 0});
    return st;
}

void Model::rpn_backward(std::size_t head, const Tensor& feature, const RpnState& st, const Tensor& grad_obj,
                         const Tensor& grad_deltas, ParamSet& grads, Tensor& grad_feature) const
{
    const HeadParams& hp = heads_.at(head);
    require_shape(grad_obj, st.objectness.shape, "rpn grad objectness");
    require_shape(grad_deltas, st.deltas.shape, "rpn grad deltas");
    Tensor gh(st.hidden.shape), tmp(st.hidden.shape);
    kernels::conv2d_backward(st.hidden, params_[hp.obj_w], grad_obj, {1, 1, 0}, &gh, grads[hp.obj_w], grads[hp.obj_b]);
    kernels::conv2d_backward(st.hidden, params_[hp.box_w], grad_deltas, {1, 1, 0}, &tmp, grads[hp.box_w],
                             grads[hp.box_b]);
    for (std::size_t i = 0; i < gh.size(); ++i) gh[i] += tmp[i];
    kernels::relu_backward(st.hidden, gh);
    Tensor gf(feature.shape);
    kernels::conv2d_backward(feature, params_[hp.rpn_w], gh, {3, 1, 1}, &gf, grads[hp.rpn_w], grads[hp.rpn_b]);
    if (grad_feature.data.empty())
        grad_feature = std::move(gf);
    else {
        require_shape(grad_feature, feature.shape, "rpn grad feature");
        for (std::size_t i = 0; i < gf.size(); ++i) grad_feature[i] += gf[i];
    }
}

namespace {

std::vector<CellRect> project(std::span<const Box> boxes, int stride, int width, int height)
{
    std::vector<CellRect> rects;
    rects.reserve(boxes.size());
    for (const Box& b : boxes) rects.push_back(clamp_rect(roi_cell_rect(b, stride), width, height));
    return rects;
}

Tensor concat_channels(const Tensor& a, const Tensor& b)
{
    const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), T = a.dim(2);
    Tensor out({N, Ca + Cb, T, T});
    const std::size_t plane = static_cast<std::size_t>(T) * T;
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.ptr() + n * Ca * plane, Ca * plane, out.ptr() + n * (Ca + Cb) * plane);
        std::copy_n(b.ptr() + n * Cb * plane, Cb * plane, out.ptr() + (n * (Ca + Cb) + Ca) * plane);
    }
    return out;
}

void split_channels(const Tensor& g, int Ca, Tensor& a, Tensor& b)
{
    const int N = g.dim(0), C = g.dim(1), T = g.dim(2), Cb = C - Ca;
    const std::size_t plane = static_cast<std::size_t>(T) * T;
    a = Tensor({N, Ca, T, T});
    b = Tensor({N, Cb, T, T});
    for (int n = 0; n < N; ++n) {
        std::copy_n(g.ptr() + n * C * plane, Ca * plane, a.ptr() + n * Ca * plane);
        std::copy_n(g.ptr() + (n * C + Ca) * plane, Cb * plane, b.ptr() + n * Cb * plane);
    }
}

void accumulate_into(Tensor& dst, const Tensor& src)
{
    if (dst.data.empty()) {
        dst = src;
        return;
    }
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

} // namespace

Tensor roi_pool(const Tensor& feature, std::span<const Box> boxes, int stride, const RoiTemplate& tmpl,
                RoiPoolIndex* index)
{
    if (feature.ndim() != 4 || feature.dim(0) != 1) throw std::invalid_argument("roi_pool: feature must be [1,C,H,W]");
    if (stride <= 0) throw std::invalid_argument("roi_pool: stride must be positive");
    const auto rects = project(boxes, stride, feature.dim(3), feature.dim(2));
    RoiPoolIndex local;
    return kernels::roi_pool_forward(feature, rects, tmpl.size_cells, index ? *index : local);
}

Tensor hypercolumn_roi(const Tensor& prev, const Tensor& curr, std::span<const Box> boxes, int stride_prev,
                       int stride_curr, const RoiTemplate& tmpl)
{
    if (stride_prev * 2 != stride_curr)
        throw std::invalid_argument("hypercolumn_roi: previous stride " + std::to_string(stride_prev) +
                                    " is not half of " + std::to_string(stride_curr));
    return concat_channels(roi_pool(prev, boxes, stride_prev, tmpl), roi_pool(curr, boxes, stride_curr, tmpl));
}

ClsState Model::cls_forward(std::size_t head, const Tensor& prev, const Tensor& curr, std::span<const Box> rois) const
{
    const HeadParams& hp = heads_.at(head);
    const HeadBinding& hb = spec_.heads.at(head);
    const int T = spec_.head.roi_template;
    const int sp = spec_.backbone.stride(hb.prev_stage), sc = spec_.backbone.stride(hb.curr_stage);
    if (rois.empty()) throw std::invalid_argument("cls_forward: no ROIs");
    ClsState st;
    st.rects_prev = project(rois, sp, prev.dim(3), prev.dim(2));
    st.rects_curr = project(rois, sc, curr.dim(3), curr.dim(2));
    const Tensor pp = kernels::roi_pool_forward(prev, st.rects_prev, T, st.pool_prev);
    const Tensor pc = kernels::roi_pool_forward(curr, st.rects_curr, T, st.pool_curr);
    st.pooled = concat_channels(pp, pc);
    st.a1 = kernels::conv2d_forward(st.pooled, params_[hp.c1_w], params_[hp.c1_b], {3, 1, 1});
    kernels::relu_forward(st.a1);
    st.a2 = kernels::conv2d_forward(st.a1, params_[hp.c2_w], params_[hp.c2_b], {3, 1, 1});
    kernels::relu_forward(st.a2);
    const int N = static_cast<int>(rois.size());
    Tensor flat = st.a2;
    flat.shape = {N, static_cast<int>(st.a2.size() / N)};
    st.f1 = kernels::fc_forward(flat, params_[hp.fc1_w], params_[hp.fc1_b]);
    kernels::relu_forward(st.f1);
    st.f2 = kernels::fc_forward(st.f1, params_[hp.fc2_w], params_[hp.fc2_b]);
    kernels::relu_forward(st.f2);
    st.scores = kernels::fc_forward(st.f2, params_[hp.score_w], params_[hp.score_b]);
    st.deltas = kernels::fc_forward(st.f2, params_[hp.dbox_w], params_[hp.dbox_b]);
    return st;
}

void Model::cls_backward(std::size_t head, const Tensor& prev, const Tensor& curr, const ClsState& st,
                         const Tensor& grad_scores, const Tensor& grad_deltas, ParamSet& grads, Tensor& grad_prev,
                         Tensor& grad_curr) const
{
    const HeadParams& hp = heads_.at(head);
    require_shape(grad_scores, st.scores.shape, "cls grad scores");
    require_shape(grad_deltas, st.deltas.shape, "cls grad deltas");
    const int N = st.scores.dim(0);

    Tensor g2(st.f2.shape), tmp(st.f2.shape);
    kernels::fc_backward(st.f2, params_[hp.score_w], grad_scores, &g2, grads[hp.score_w], grads[hp.score_b]);
    kernels::fc_backward(st.f2, params_[hp.dbox_w], grad_deltas, &tmp, grads[hp.dbox_w], grads[hp.dbox_b]);
    for (std::size_t i = 0; i < g2.size(); ++i) g2[i] += tmp[i];
    kernels::relu_backward(st.f2, g2);
    Tensor g1(st.f1.shape);
    kernels::fc_backward(st.f1, params_[hp.fc2_w], g2, &g1, grads[hp.fc2_w], grads[hp.fc2_b]);
    kernels::relu_backward(st.f1, g1);
    Tensor flat = st.a2;
    flat.shape = {N, static_cast<int>(st.a2.size() / N)};
    Tensor ga2(flat.shape);
    kernels::fc_backward(flat, params_[hp.fc1_w], g1, &ga2, grads[hp.fc1_w], grads[hp.fc1_b]);
    ga2.shape = st.a2.shape;
    kernels::relu_backward(st.a2, ga2);
    Tensor ga1(st.a1.shape);
    kernels::conv2d_backward(st.a1, params_[hp.c2_w], ga2, {3, 1, 1}, &ga1, grads[hp.c2_w], grads[hp.c2_b]);
    kernels::relu_backward(st.a1, ga1);
    Tensor gp(st.pooled.shape);
    kernels::conv2d_backward(st.pooled, params_[hp.c1_w], ga1, {3, 1, 1}, &gp, grads[hp.c1_w], grads[hp.c1_b]);

    Tensor gpp, gpc;
    split_channels(gp, prev.dim(1), gpp, gpc);
    Tensor fp(prev.shape), fc(curr.shape);
    kernels::roi_pool_backward(gpp, st.pool_prev, fp);
    kernels::roi_pool_backward(gpc, st.pool_curr, fc);
    accumulate_into(grad_prev, fp);
    accumulate_into(grad_curr, fc);
}

AnchorSet Model::anchors(std::size_t head, int image_w, int image_h) const
{
    const HeadBinding& hb = spec_.heads.at(head);
    AnchorSet a;
    a.heights = hb.anchor_heights;
    a.stride = head_stride(head);
    a.grid_w = (image_w + a.stride - 1) / a.stride;
    a.grid_h = (image_h + a.stride - 1) / a.stride;
    return a;
}

// ---------------------------------------------------------------------------
// Ensemble and checkpoints

Ensemble Ensemble::create(const EnsembleSpec& spec, std::uint64_t seed)
{
    Ensemble e;
    e.spec = spec;
    for (std::size_t i = 0; i < spec.models.size(); ++i) {
        e.models.emplace_back(spec.models[i]);
        e.models.back().initialize(sub_seed(seed, i));
    }
    return e;
}

std::size_t Ensemble::num_detectors() const
{
    std::size_t n = 0;
    for (const auto& m : spec.models) n += m.heads.size();
    return n;
}

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'M', 'S', 'D', 'E', 'T', 'C', 'K', '\0'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::string& out, T v)
{
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

struct Reader {
    const std::string& s;
    std::size_t pos = 0;

    template <class T>
    T get()
    {
        need(sizeof(T));
        T v;
        std::memcpy(&v, s.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }
    std::string bytes(std::size_t n)
    {
        need(n);
        std::string r = s.substr(pos, n);
        pos += n;
        return r;
    }
    void need(std::size_t n) const
    {
        if (pos + n > s.size()) throw std::runtime_error("checkpoint truncated");
    }
};

} // namespace

std::string encode_checkpoint(const Ensemble& ens)
{
    std::string out(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kVersion);
    const std::string spec = spec_to_json(ens.spec);
    Fnv1a digest;
    digest.update(spec);
    put<std::uint64_t>(out, digest.value());
    put<std::uint64_t>(out, spec.size());
    out += spec;
    std::uint64_t count = 0;
    for (const auto& m : ens.models) count += m.params().size();
    put<std::uint64_t>(out, count);
    for (std::size_t mi = 0; mi < ens.models.size(); ++mi)
        for (const auto& t : ens.models[mi].params().items()) {
            const std::string name = "m" + std::to_string(mi) + "/" + t.name;
            put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
            out += name;
            put<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.ndim()));
            for (int d : t.value.shape) put<std::int32_t>(out, d);
            out.append(reinterpret_cast<const char*>(t.value.ptr()), t.value.size() * sizeof(double));
        }
    return out;
}

Ensemble decode_checkpoint(const std::string& bytes)
{
    Reader r{bytes};
    if (r.bytes(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) throw std::runtime_error("not a checkpoint");
    const auto version = r.get<std::uint32_t>();
    if (version != kVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    const auto digest = r.get<std::uint64_t>();
    const std::string spec_text = r.bytes(r.get<std::uint64_t>());
    Fnv1a check;
    check.update(spec_text);
    if (check.value() != digest) throw std::runtime_error("checkpoint spec digest mismatch");

    Ensemble ens;
    ens.spec = ensemble_spec_from_json(spec_text);
    for (const auto& m : ens.spec.models) ens.models.emplace_back(m);
    std::size_t expected = 0;
    for (const auto& m : ens.models) expected += m.params().size();
    const auto count = r.get<std::uint64_t>();
    if (count != expected) throw std::runtime_error("checkpoint tensor count does not match its spec");
    for (std::uint64_t k = 0; k < count; ++k) {
        const std::string name = r.bytes(r.get<std::uint32_t>());
        const auto slash = name.find('/');
        if (name.size() < 2 || name[0] != 'm' || slash == std::string::npos)
            throw std::runtime_error("bad tensor name " + name);
        const std::size_t mi = std::stoul(name.substr(1, slash - 1));
        if (mi >= ens.models.size()) throw std::runtime_error("bad tensor name " + name);
        Tensor& t = ens.models[mi].params().at(name.substr(slash + 1));
        const auto nd = r.get<std::uint32_t>();
        std::vector<int> shape(nd);
        for (auto& d : shape) d = r.get<std::int32_t>();
        if (shape != t.shape) throw std::runtime_error("shape mismatch for " + name);
        r.need(t.size() * sizeof(double));
        std::memcpy(t.ptr(), bytes.data() + r.pos, t.size() * sizeof(double));
        r.pos += t.size() * sizeof(double);
    }
    if (r.pos != bytes.size()) throw std::runtime_error("trailing bytes in checkpoint");
    return ens;
}

void save_checkpoint(const std::filesystem::path& path, const Ensemble& ens)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    const std::string bytes = encode_checkpoint(ens);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Ensemble load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return decode_checkpoint(ss.str());
}

// ---------------------------------------------------------------------------
// Optimisation

double learning_rate(const SgdConfig& cfg, int step)
{
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return cfg.lr * (0.1 + 0.9 * static_cast<double>(step) / cfg.warmup_steps);
    if (cfg.step_size > 0) return cfg.lr * std::pow(cfg.gamma, step / cfg.step_size);
    return cfg.lr;
}

void sgd_step(ParamSet& params, const ParamSet& grads, ParamSet& velocity, double lr, double momentum,
              double weight_decay)
{
    if (grads.size() != params.size() || velocity.size() != params.size())
        throw std::invalid_argument("sgd_step: parameter sets differ in size");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].shape != params[i].shape || velocity[i].shape != params[i].shape)
            throw std::invalid_argument("sgd_step: shape mismatch for " + params.name(i));
        if (!grads[i].all_finite()) throw DivergenceError("non-finite gradient in " + params.name(i));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        Tensor& v = velocity[i];
        const Tensor& g = grads[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            v[k] = momentum * v[k] + g[k] + weight_decay * p[k];
            p[k] -= lr * v[k];
        }
    }
}

// ---------------------------------------------------------------------------
// Compression

CompressionResult compress(const BackboneSpec& backbone, const HeadSpec& head, double factor,
                           const EnsembleSpec& reference)
{
    if (!(factor > 0.0 && factor <= 1.0)) throw std::invalid_argument("compress: factor must be in (0, 1]");
    CompressionResult r;
    r.backbone = backbone;
    r.head = head;
    r.backbone.stem_channels = ceil_scaled(backbone.stem_channels, factor);
    for (auto& s : r.backbone.stages) s.channels = ceil_scaled(s.channels, factor);
    r.head.rpn_channels = ceil_scaled(head.rpn_channels, factor);
    r.head.cls_channels = ceil_scaled(head.cls_channels, factor);
    r.head.fc1 = ceil_scaled(head.fc1, factor);
    r.head.fc2 = ceil_scaled(head.fc2, factor);

    EnsembleSpec small = reference;
    for (auto& m : small.models) {
        m.backbone = r.backbone.truncated(m.backbone.num_stages() - 1);
        m.head = r.head;
    }
    const ParamCount before = count_params(reference), after = count_params(small);
    r.predicted_param_ratio = static_cast<double>(after.total()) / static_cast<double>(before.total());
    r.predicted_conv_ratio = static_cast<double>(after.conv) / static_cast<double>(before.conv);
    return r;
}

} // namespace msdet

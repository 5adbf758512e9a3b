#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msdet/geometry.hpp"
#include "msdet/kernels.hpp"
#include "msdet/loss.hpp"
#include "msdet/partition.hpp"
#include "msdet/sampler.hpp"
#include "msdet/synthdata.hpp"
#include "msdet/tensor.hpp"

namespace msdet {

// ---------------------------------------------------------------------------
// Specs

struct BackboneStage {
    int channels = 16;
    int blocks = 2; ///< 3x3 convs in the stage; the first one downsamples
    friend bool operator==(const BackboneStage&, const BackboneStage&) = default;
};

/// Plain convolutional backbone: a stem at `stem_stride` followed by stages
/// that each halve the resolution. Stage 0 is the stem, stage i >= 1 runs
/// at stem_stride * 2^i.
struct BackboneSpec {
    int in_channels = 1;
    int stem_channels = 8;
    int stem_stride = 1;
    std::vector<BackboneStage> stages{{16, 2}, {24, 2}, {32, 2}, {48, 2}};
    bool pool_downsample = false; ///< 2x2 max pool instead of strided conv

    int num_stages() const { return 1 + static_cast<int>(stages.size()); }
    int stride(int stage) const { return stem_stride << stage; }
    int channels(int stage) const { return stage == 0 ? stem_channels : stages[stage - 1].channels; }
    /// Geometry view of every stage (stride, receptive field, width).
    std::vector<StageSpec> ladder() const;
    /// Keeps stages [0, last_stage].
    BackboneSpec truncated(int last_stage) const;
    friend bool operator==(const BackboneSpec&, const BackboneSpec&) = default;
};

/// Per-detector head widths. The proposal branch is one 3x3 conv of
/// rpn_channels; the classifier branch is two 3x3 convs of cls_channels on
/// the pooled hypercolumn followed by fully connected layers of fc1 and fc2
/// units.
struct HeadSpec {
    int rpn_channels = 32;
    int cls_channels = 16;
    int fc1 = 64;
    int fc2 = 32;
    int roi_template = 5;
    friend bool operator==(const HeadSpec&, const HeadSpec&) = default;
};

/// Binds one detector head to its scale range and stage pair.
struct HeadBinding {
    std::size_t detector_id = 0;
    ScaleRange range;
    int prev_stage = 0;
    int curr_stage = 1;
    std::vector<double> anchor_heights;
    friend bool operator==(const HeadBinding&, const HeadBinding&) = default;
};

struct ModelSpec {
    BackboneSpec backbone;
    HeadSpec head;
    std::vector<HeadBinding> heads;

    /// Stride the input must be divisible by.
    int max_stride() const { return backbone.stride(backbone.num_stages() - 1); }
    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

enum class TrainMode { joint, naive };
const char* mode_name(TrainMode m);
TrainMode parse_mode(const std::string& s);

/// One or more models whose heads together cover a split scheme. Joint
/// mode is a single model with one head per range; naive mode is one
/// independent model per range.
struct EnsembleSpec {
    TrainMode mode = TrainMode::joint;
    SplitScheme scheme;
    std::vector<ModelSpec> models;
    friend bool operator==(const EnsembleSpec&, const EnsembleSpec&) = default;
};

/// Builds the ensemble layout for a scheme: ranges go to the deepest stage
/// pairs of the backbone ladder, anchors from each range.
EnsembleSpec build_ensemble_spec(const SplitScheme& scheme, const BackboneSpec& backbone, const HeadSpec& head,
                                 TrainMode mode);

/// Single-head model for one range bound to an explicit stage pair.
ModelSpec single_range_spec(const ScaleRange& range, std::size_t detector_id, int curr_stage,
                            const BackboneSpec& backbone, const HeadSpec& head);

std::string spec_to_json(const EnsembleSpec& spec);
EnsembleSpec ensemble_spec_from_json(const std::string& text);
std::string backbone_to_json(const BackboneSpec& b);
BackboneSpec backbone_from_json(const std::string& text);
std::string head_to_json(const HeadSpec& h);
HeadSpec head_from_json(const std::string& text);

/// Backbone in the text format read by parse_backbone_description.
std::string backbone_description(const BackboneSpec& b);

// ---------------------------------------------------------------------------
// Parameters

struct NamedTensor {
    std::string name;
    Tensor value;
};

class ParamSet {
public:
    std::size_t add(std::string name, std::vector<int> shape);
    std::size_t index(const std::string& name) const;
    bool contains(const std::string& name) const { return lookup_.count(name) > 0; }
    Tensor& operator[](std::size_t i) { return items_[i].value; }
    const Tensor& operator[](std::size_t i) const { return items_[i].value; }
    Tensor& at(const std::string& name) { return items_[index(name)].value; }
    const Tensor& at(const std::string& name) const { return items_[index(name)].value; }
    const std::string& name(std::size_t i) const { return items_[i].name; }
    std::size_t size() const { return items_.size(); }
    std::vector<NamedTensor>& items() { return items_; }
    const std::vector<NamedTensor>& items() const { return items_; }

    ParamSet zeros_like() const;
    void set_zero();
    std::size_t scalar_count() const;
    bool all_finite() const;
    friend bool operator==(const ParamSet& a, const ParamSet& b);

private:
    std::vector<NamedTensor> items_;
    std::map<std::string, std::size_t> lookup_;
};

struct ParamCount {
    std::size_t conv = 0; ///< conv weights + biases
    std::size_t fc = 0;   ///< fully connected weights + biases
    std::size_t total() const { return conv + fc; }
};

/// Closed-form count from the spec alone.
ParamCount count_params(const ModelSpec& spec);
ParamCount count_params(const EnsembleSpec& spec);

// ---------------------------------------------------------------------------
// Network

struct BackboneState {
    std::vector<Tensor> acts;                       ///< acts[0] = input, acts[i+1] = output of op i
    std::vector<std::vector<std::int64_t>> argmax;  ///< per op, pooling only
    std::vector<int> feature_act;                   ///< act index holding each stage's output

    const Tensor& feature(int stage) const { return acts[feature_act[stage]]; }
};

struct RpnState {
    Tensor hidden;     ///< [1, R, Hf, Wf] after ReLU
    Tensor objectness; ///< [1, A, Hf, Wf] logits
    Tensor deltas;     ///< [1, 4A, Hf, Wf], channel a*4 + j
};

struct ClsState {
    std::vector<CellRect> rects_prev, rects_curr;
    RoiPoolIndex pool_prev, pool_curr;
    Tensor pooled; ///< [N, Cp + Cc, T, T]
    Tensor a1, a2; ///< conv outputs after ReLU
    Tensor f1, f2; ///< fc outputs after ReLU
    Tensor scores; ///< [N, 1] logits
    Tensor deltas; ///< [N, 4] normalized deltas
};

/// Normalized box-delta weights: the networks predict weight * delta.
inline constexpr Delta kRpnDeltaWeights{1, 1, 1, 1};
inline constexpr Delta kClsDeltaWeights{10, 10, 5, 5};

class Model {
public:
    explicit Model(ModelSpec spec);

    /// He-normal weights, zero biases, small output layers.
    void initialize(std::uint64_t seed);

    const ModelSpec& spec() const { return spec_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

    /// [1, 1, H, W] network input from an 8-bit image.
    static Tensor image_tensor(const GrayImage& img);

    BackboneState forward_backbone(const Tensor& image) const;
    /// feature_grads[s] is the loss gradient w.r.t. stage s's output (empty
    /// tensors mean zero). Parameter gradients are accumulated into grads.
    void backward_backbone(const BackboneState& state, std::vector<Tensor>& feature_grads, ParamSet& grads) const;

    RpnState rpn_forward(std::size_t head, const Tensor& feature) const;
    void rpn_backward(std::size_t head, const Tensor& feature, const RpnState& state, const Tensor& grad_obj,
                      const Tensor& grad_deltas, ParamSet& grads, Tensor& grad_feature) const;

    ClsState cls_forward(std::size_t head, const Tensor& prev, const Tensor& curr, std::span<const Box> rois) const;
    void cls_backward(std::size_t head, const Tensor& prev, const Tensor& curr, const ClsState& state,
                      const Tensor& grad_scores, const Tensor& grad_deltas, ParamSet& grads, Tensor& grad_prev,
                      Tensor& grad_curr) const;

    AnchorSet anchors(std::size_t head, int image_w, int image_h) const;
    int head_stride(std::size_t head) const { return spec_.backbone.stride(spec_.heads[head].curr_stage); }

private:
    struct Op {
        enum Kind { conv, pool } kind = conv;
        std::size_t w = 0, b = 0;
        ConvGeometry geom;
    };
    struct HeadParams {
        std::size_t rpn_w, rpn_b, obj_w, obj_b, box_w, box_b;
        std::size_t c1_w, c1_b, c2_w, c2_b;
        std::size_t fc1_w, fc1_b, fc2_w, fc2_b, score_w, score_b, dbox_w, dbox_b;
    };

    ModelSpec spec_;
    ParamSet params_;
    std::vector<Op> ops_;
    std::vector<int> stage_end_op_; ///< index of the last op of each stage
    std::vector<HeadParams> heads_;
};

/// ROI max pooling of a single map [1, C, H, W]; boxes in image pixels are
/// projected with roi_cell_rect. Output [R, C, T, T].
Tensor roi_pool(const Tensor& feature, std::span<const Box> boxes, int stride, const RoiTemplate& tmpl,
                RoiPoolIndex* index = nullptr);

/// ROI pooling on two adjacent stages, concatenated along channels.
/// Throws std::invalid_argument unless stride_prev * 2 == stride_curr.
Tensor hypercolumn_roi(const Tensor& prev, const Tensor& curr, std::span<const Box> boxes, int stride_prev,
                       int stride_curr, const RoiTemplate& tmpl);

// ---------------------------------------------------------------------------
// Ensemble of trained models

struct Ensemble {
    EnsembleSpec spec;
    std::vector<Model> models;

    static Ensemble create(const EnsembleSpec& spec, std::uint64_t seed);
    std::size_t num_detectors() const;
};

/// Versioned binary container: magic, version, spec digest, spec JSON and
/// named tensors (little-endian doubles).
void save_checkpoint(const std::filesystem::path& path, const Ensemble& ens);
Ensemble load_checkpoint(const std::filesystem::path& path);
std::string encode_checkpoint(const Ensemble& ens);
Ensemble decode_checkpoint(const std::string& bytes);

// ---------------------------------------------------------------------------
// Optimisation

struct SgdConfig {
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 0.0;
    double clip_norm = 0.0;   ///< global gradient-norm clip, 0 disables
    int warmup_steps = 0;     ///< linear ramp from lr/10
    int step_size = 0;        ///< decay period in steps, 0 disables decay
    double gamma = 0.1;
};

double learning_rate(const SgdConfig& cfg, int step);

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Classic momentum: v <- momentum * v + g; p <- p - lr * v. Throws
/// DivergenceError naming the first non-finite gradient.
void sgd_step(ParamSet& params, const ParamSet& grads, ParamSet& velocity, double lr, double momentum,
              double weight_decay = 0.0);

// ---------------------------------------------------------------------------
// Compression

struct CompressionResult {
    BackboneSpec backbone;
    HeadSpec head;
    double predicted_param_ratio = 1; ///< total params, compressed / original
    double predicted_conv_ratio = 1;
};

/// Scales every channel and unit count by `factor` (rounded up, min 1).
/// `reference` supplies the head layout used for the predicted ratios.
CompressionResult compress(const BackboneSpec& backbone, const HeadSpec& head, double factor,
                           const EnsembleSpec& reference);

} // namespace msdet

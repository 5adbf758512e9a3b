#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "msdet/detector.hpp"
#include "msdet/evaluator.hpp"
#include "msdet/loss.hpp"
#include "msdet/model.hpp"
#include "msdet/sampler.hpp"
#include "msdet/synthdata.hpp"

namespace msdet {

struct TrainerConfig {
    int epochs = 10;
    SgdConfig sgd{0.01, 0.9, 1e-4, 10.0, 100, 0, 0.1};
    BatchSpec rpn_batch{64, 0.5, false, 0};
    BatchSpec cls_batch{64, 0.25, true, 0};
    LabelThresholds thresholds;
    double lambda = 1.0;        ///< box term weight inside each head loss
    double beta = 1.0;          ///< smooth-L1 transition point
    bool force_best_anchor = true; ///< in-range gt without a positive anchor claims its best one
    bool random_flip = true;
    int eval_every = 1;         ///< epochs between validation passes, 0 = final epoch only
    InferenceConfig inference;
    EvalProtocol protocol = desk_protocol();
    std::optional<std::filesystem::path> divergence_checkpoint;
};

void validate_trainer_config(const TrainerConfig& cfg);

/// Sampling decisions for one detector head on one image, frozen so the
/// loss is a deterministic function of the parameters.
struct HeadPlan {
    std::vector<std::size_t> anchors; ///< anchor indices in the batch
    std::vector<int> anchor_labels;
    std::vector<Delta> anchor_targets; ///< normalized; zero for negatives
    std::vector<Box> rois;
    std::vector<int> roi_labels;
    std::vector<Delta> roi_targets;
    BatchStats rpn_stats, cls_stats;

    bool empty() const { return anchors.empty() && rois.empty(); }
};

struct StepPlan {
    std::vector<HeadPlan> heads;
};

struct StepLoss {
    LossTerms rpn; ///< summed over heads
    LossTerms cls;
    double total() const { return rpn.total + cls.total; }
};

/// Builds the plan for one image: anchor labeling and the proposal-branch
/// batch, proposals from the current parameters plus in-range ground
/// truth, ROI labeling and the hard-mined classifier batch. `routing`
/// decides which ground truth each head owns (its detector_id indexes
/// the scheme's ranges).
StepPlan plan_step(const Model& model, const BackboneState& bb, const AnnotatedImage& img,
                   const SplitScheme& routing, const TrainerConfig& cfg, std::uint64_t seed);

/// Loss of a fixed plan. When `grads` is given, parameter gradients are
/// accumulated into it (shared backbone included).
StepLoss plan_loss(const Model& model, const Tensor& image, const StepPlan& plan, const TrainerConfig& cfg,
                   ParamSet* grads = nullptr);
StepLoss plan_loss(const Model& model, const BackboneState& bb, const StepPlan& plan, const TrainerConfig& cfg,
                   ParamSet* grads = nullptr);

/// Scales gradients so their global L2 norm is at most max_norm; returns
/// the norm before clipping.
double clip_gradients(ParamSet& grads, double max_norm);

struct TrainResult {
    Ensemble ensemble;
    std::vector<std::string> metrics; ///< one JSON record per epoch
    std::optional<EvalReport> final_report;
};

/// Trains every model of the ensemble on `train`. Joint ensembles have a
/// single model carrying all heads; naive ensembles train each model on
/// the ground truth routed to its own range. Validation AP is logged per
/// epoch when `val` is non-empty. Throws DivergenceError on a non-finite
/// loss, after restoring (and optionally saving) the last good parameters.
TrainResult train(const Dataset& train, const Dataset& val, const EnsembleSpec& spec, const TrainerConfig& cfg,
                  std::uint64_t seed, const std::function<void(const std::string&)>& on_epoch = {});

struct SweepRow {
    int stage = 0;
    int stride = 0;
    double ap = 0;
};

/// One single-range detector per candidate stage, trained on the bucket's
/// ground truth only and evaluated on that bucket.
std::vector<SweepRow> stride_sweep(const Dataset& train, const Dataset& val, const ScaleRange& bucket,
                                   std::span<const int> candidate_stages, const BackboneSpec& backbone,
                                   const HeadSpec& head, const TrainerConfig& cfg, std::uint64_t seed);

/// Stride of the best row; ties go to the smaller stride.
int sweep_argmax(std::span<const SweepRow> rows);

} // namespace msdet

#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "msdet/box.hpp"
#include "msdet/model.hpp"
#include "msdet/sampler.hpp"
#include "msdet/synthdata.hpp"

namespace msdet {

struct Detection {
    Box box;
    double score = 0;
    std::size_t detector_id = 0;
    std::string image_id;
    friend bool operator==(const Detection&, const Detection&) = default;
};

enum class ProposalMode { train, test };

struct InferenceConfig {
    int max_side = 1300;        ///< longest-side cap applied before the forward pass
    int train_budget = 2000;    ///< proposals kept per detector while training
    int test_budget = 500;      ///< proposals kept per detector at test time
    int pre_nms_top = 6000;     ///< highest-scoring anchors considered before proposal NMS
    double proposal_nms = 0.7;
    double final_nms = 0.3;
    double score_floor = 0.05;  ///< applied after the final NMS

    int budget(ProposalMode m) const { return m == ProposalMode::train ? train_budget : test_budget; }
};

void validate_inference_config(const InferenceConfig& cfg);

/// Greedy suppression. Candidates are visited by descending score, then
/// smaller area, then input order; a candidate is dropped if its IoU with
/// any kept box exceeds `threshold`. Returns indices into `boxes` in visit
/// order, stopping after `limit` kept boxes when limit > 0.
std::vector<std::size_t> nms_indices(std::span<const Box> boxes, std::span<const double> scores, double threshold,
                                     std::size_t limit = 0);

std::vector<Detection> nms(std::span<const Detection> dets, double threshold);

/// Raw proposal-branch output of one detector over one image.
struct RpnOutput {
    std::size_t detector_id = 0;
    AnchorSet anchors;
    std::span<const double> objectness; ///< one logit per anchor, anchor index layout
    std::span<const double> deltas;     ///< channel a*4+j over the grid, as produced by the network
};

/// Delta j of anchor `index` in a proposal-branch output laid out as
/// [4A, grid_h, grid_w].
Delta anchor_delta(const AnchorSet& anchors, std::span<const double> deltas, std::size_t index);

/// Decodes, clips to the image, suppresses and truncates to the budget.
/// Proposal scores are objectness probabilities.
std::vector<std::vector<Detection>> propose(std::span<const RpnOutput> outputs, const InferenceConfig& cfg,
                                            ProposalMode mode, int image_w, int image_h);

/// Pads on the right and bottom to a multiple of `multiple` with a
/// mid-gray value.
GrayImage pad_to_multiple(const GrayImage& img, int multiple);

/// Single-scale inference over every detector of the ensemble, with
/// cross-detector aggregation and final NMS. Boxes are reported in the
/// input image's coordinates; detections carry the input's image_id.
std::vector<Detection> detect(const AnnotatedImage& image, const Ensemble& ens, const InferenceConfig& cfg);

std::vector<Detection> detect_all(const Dataset& data, const Ensemble& ens, const InferenceConfig& cfg);

/// {"detector_id":..,"h":..,"image_id":..,"score":..,"w":..,"x":..,"y":..}
std::string detection_line(const Detection& d);
Detection parse_detection_line(const std::string& line);
void save_detections(const std::filesystem::path& path, std::span<const Detection> dets);
std::vector<Detection> load_detections(const std::filesystem::path& path);

} // namespace msdet

#pragma once

// Independent reference implementations used by the unit and acceptance
// tests. Nothing here calls the code under test for the quantity it checks.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "msdet/box.hpp"
#include "msdet/evaluator.hpp"
#include "msdet/partition.hpp"

namespace oracle {

using msdet::Box;

// ---- finite differences ----------------------------------------------------

/// ||a - b|| / max(||a||, ||b||, floor).
double rel_error(std::span<const double> a, std::span<const double> b, double floor = 1e-7);

/// Central differences of f with respect to every entry of x.
std::vector<double> numeric_grad(const std::function<double()>& f, std::vector<double>& x, double eps = 1e-3);

struct GradReport {
    std::string name;
    double worst = 0; ///< largest per-tensor relative error of the instance
    std::size_t coordinates = 0;
    std::size_t excluded = 0; ///< stencils straddling a ReLU or max-pool kink
};

// One random instance each; the seed picks shapes and values.
GradReport check_conv(std::uint64_t seed);
GradReport check_relu(std::uint64_t seed);
GradReport check_maxpool(std::uint64_t seed);
GradReport check_fc(std::uint64_t seed);
GradReport check_roi_pool(std::uint64_t seed);
GradReport check_detection_loss(std::uint64_t seed);
/// Whole tiny network (backbone, proposal and classifier branches) on a
/// fixed training plan. Coordinates whose stencil changes the activation
/// pattern are counted in `excluded` and left out of the error.
GradReport check_model(std::uint64_t seed);

using Checker = GradReport (*)(std::uint64_t);
std::vector<std::pair<std::string, Checker>> gradient_checkers();

// ---- evaluation -----------------------------------------------------------

enum class Flag { tp, fp, ignored };

/// Sequential matching written as plain loops over every gt.
std::vector<Flag> brute_match(std::span<const Box> dets, std::span<const Box> gts, double min_h, double max_h,
                              double iou_thr);

/// Precision envelope integrated over every recall step, O(n^2).
double brute_ap(const std::vector<bool>& tp, std::size_t n_gt);

// ---- suppression -----------------------------------------------------------

std::vector<std::size_t> brute_nms(std::span<const Box> boxes, std::span<const double> scores, double thr);

// ---- sampler ---------------------------------------------------------------

struct SamplerViolations {
    std::size_t scenes = 0;
    std::size_t rois = 0;
    std::size_t role_partition = 0;  ///< role counts not summing to the ROI count, or a role contradicting its IoUs
    std::size_t double_positive = 0; ///< gts positive for more than one detector
    std::size_t pool_balance = 0;
    std::size_t forbidden_in_batch = 0;

    std::size_t total() const { return role_partition + double_positive + pool_balance + forbidden_in_batch; }
};

SamplerViolations sampler_invariants(std::size_t scenes, std::uint64_t seed);

} // namespace oracle

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msdet/box.hpp"
#include "msdet/partition.hpp"

namespace msdet {

enum class RoiRole { positive, pure_background, ill_aligned, ignore, discard };

const char* role_name(RoiRole r);

struct RoiSample {
    Box box;
    RoiRole role = RoiRole::discard;
    std::optional<std::size_t> matched_gt; ///< index into the image's gt list
    std::size_t detector_id = 0;
    double max_iou = 0; ///< best IoU against in-range gts
};

/// Square anchors tiled over a detector's feature grid. Anchor index
/// layout is a * (grid_h * grid_w) + y * grid_w + x, matching the proposal
/// branch's output channels.
struct AnchorSet {
    std::vector<double> heights;
    int stride = 1;
    int grid_w = 0;
    int grid_h = 0;

    std::size_t cells() const { return static_cast<std::size_t>(grid_w) * grid_h; }
    std::size_t size() const { return heights.size() * cells(); }
    Box anchor(std::size_t index) const;
    std::vector<Box> boxes() const;
};

struct BatchSpec {
    int size = 64;
    double positive_fraction = 0.25;
    bool hard_mining = false;
    std::uint64_t seed = 0;
};

struct GtRouting {
    std::vector<std::size_t> in_range;
    std::vector<std::size_t> ignored;
};

/// Labeling thresholds. Defaults follow the published recipe; the
/// ignored-gt discard threshold fills in its unstated "high IoU".
struct LabelThresholds {
    double positive = 0.5;
    double ill_aligned_lo = 0.1;
    double ill_aligned_hi = 0.3;
    double discard = 0.3;
};

/// Number of anchors needed so adjacent heights differ by at most sqrt(2),
/// capped at four.
int anchors_needed(const ScaleRange& range);

AnchorSet make_anchors(const ScaleRange& range, int stride, int image_w, int image_h);

GtRouting route_gt(std::span<const Box> gts, const SplitScheme& scheme, std::size_t detector_id);

std::vector<RoiSample> label_rois(std::span<const Box> rois, std::span<const Box> gts, const GtRouting& routing,
                                  std::size_t detector_id, const LabelThresholds& thr = {});

/// Equal numbers of pure-background and ill-aligned sample indices, drawn
/// uniformly under `seed`. Empty if either kind is absent.
std::vector<std::size_t> build_negative_pool(std::span<const RoiSample> samples, std::uint64_t seed);

struct Batch {
    std::vector<std::size_t> positives;
    std::vector<std::size_t> negatives;

    std::vector<std::size_t> all() const;
    std::size_t size() const { return positives.size() + negatives.size(); }
};

/// Positives up to positive_fraction * size, negatives from the balanced
/// pool for the remainder. `losses` is indexed like `samples` and required
/// when hard mining is on. Throws EmptyBatchError when nothing is available.
Batch sample_batch(std::span<const RoiSample> samples, const BatchSpec& spec,
                   std::optional<std::span<const double>> losses = std::nullopt);

struct BatchStats {
    std::size_t detector_id = 0;
    std::size_t available[5] = {};
    std::size_t pool = 0;
    std::size_t batch_positive = 0;
    std::size_t batch_negative = 0;
};

BatchStats batch_stats(std::span<const RoiSample> samples, const Batch& batch, std::size_t pool_size,
                       std::size_t detector_id);

/// One JSON object, e.g. {"event":"batch","detector":0,...}.
std::string batch_log_line(const BatchStats& s, const std::string& stage);

} // namespace msdet

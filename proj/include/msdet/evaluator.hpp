#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msdet/box.hpp"
#include "msdet/detector.hpp"
#include "msdet/synthdata.hpp"

namespace msdet {

/// Ground truth counts for a bucket when its height lies in [min_height,
/// max_height]; other ground truth is ignored.
struct DifficultyBucket {
    std::string name;
    double min_height = 0;
    double max_height = 1e9;

    bool contains(const Box& b) const { return b.h >= min_height && b.h <= max_height; }
};

enum class ApInterpolation { all_points, eleven_point };

struct EvalProtocol {
    double iou_threshold = 0.5;
    std::vector<DifficultyBucket> buckets;
    ApInterpolation interpolation = ApInterpolation::all_points;
    std::vector<int> fp_counts{0, 10, 50, 100, 200};
};

/// Nested difficulty settings of the synthetic target range: easy keeps
/// heights >= 48, medium >= 16, hard >= 6.
EvalProtocol desk_protocol();

void validate_protocol(const EvalProtocol& p);

enum class MatchFlag { tp, fp, ignored };

struct MatchResult {
    std::vector<MatchFlag> flags;   ///< per detection, in input order
    std::vector<bool> gt_matched;   ///< per ground truth
    std::size_t n_gt = 0;           ///< in-bucket ground truth
};

/// Detections must already be sorted by descending score. Each one takes
/// the highest-IoU unmatched in-bucket gt at IoU >= threshold (TP);
/// failing that, any out-of-bucket gt at IoU >= threshold makes it
/// ignored; otherwise it is a FP.
MatchResult greedy_match(std::span<const Box> dets, std::span<const Box> gts, const DifficultyBucket& bucket,
                         double iou_threshold);

/// TP/FP flags in descending score order (ignored detections removed).
double average_precision(const std::vector<bool>& tp_flags, std::size_t n_gt,
                         ApInterpolation interp = ApInterpolation::all_points);

struct PrPoint {
    double threshold = 0;
    double precision = 0;
    double recall = 0;
};

using PrCurve = std::vector<PrPoint>;

/// One point per scored detection; `scores` parallel to `tp_flags`.
PrCurve pr_curve(const std::vector<bool>& tp_flags, std::span<const double> scores, std::size_t n_gt);

/// Recall counting the TPs ranked before the (c+1)-th FP, for each c.
std::vector<double> recall_at_fp(const std::vector<bool>& tp_flags, std::size_t n_gt, std::span<const int> fp_counts);

struct Ellipse {
    double cx = 0;
    double cy = 0;
    double a = 0;     ///< semi-major axis
    double b = 0;     ///< semi-minor axis
    double angle = 0; ///< radians
};

/// Rows map (x, y, w, h, 1) to cx, cy, a, b, angle.
struct EllipseFit {
    std::array<std::array<double, 5>, 5> coef{};
    double residual_norm = 0;

    Ellipse apply(const Box& b) const;
};

EllipseFit fit_box_to_ellipse(std::span<const std::pair<Box, Ellipse>> pairs);

struct BucketReport {
    std::string name;
    std::size_t n_gt = 0;
    std::size_t n_det = 0;
    double ap = 0;
    PrCurve pr;
    std::vector<double> recall_at_fp;
};

struct EvalReport {
    std::vector<BucketReport> buckets;
    std::vector<std::string> warnings;

    const BucketReport& bucket(const std::string& name) const;
};

/// Throws std::invalid_argument listing every detection image_id that is
/// not in the annotations.
EvalReport evaluate(std::span<const Detection> dets, const Dataset& annotations, const EvalProtocol& protocol);

/// Deterministic JSON: protocol, then per bucket AP, counts, recall@FP and
/// the PR points as [threshold, precision, recall] triples.
std::string report_json(const EvalReport& r, const EvalProtocol& p);
EvalReport report_from_json(const std::string& text);
/// threshold,precision,recall rows.
std::string pr_csv(const PrCurve& pr);

/// Writes report.json plus pr_<bucket>.csv files into `dir`.
void save_report(const std::filesystem::path& dir, const EvalReport& r, const EvalProtocol& p);

} // namespace msdet

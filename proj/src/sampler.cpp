#include "msdet/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "msdet/errors.hpp"
#include "msdet/rng.hpp"

namespace msdet {

const char* role_name(RoiRole r)
{
    switch (r) {
    case RoiRole::positive: return "positive";
    case RoiRole::pure_background: return "pure_background";
    case RoiRole::ill_aligned: return "ill_aligned";
    case RoiRole::ignore: return "ignore";
    case RoiRole::discard: return "discard";
    }
    return "?";
}

Box AnchorSet::anchor(std::size_t index) const
{
    const std::size_t a = index / cells();
    const std::size_t cell = index % cells();
    const int y = static_cast<int>(cell / grid_w), x = static_cast<int>(cell % grid_w);
    const double h = heights[a];
    const double cx = (x + 0.5) * stride, cy = (y + 0.5) * stride;
    return {cx - 0.5 * h, cy - 0.5 * h, h, h};
}

std::vector<Box> AnchorSet::boxes() const
{
    std::vector<Box> out(size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = anchor(i);
    return out;
}

int anchors_needed(const ScaleRange& range)
{
    const double ratio = range.hi / range.lo;
    if (ratio <= 1.0 + 1e-9) return 1;
    const int gaps = static_cast<int>(std::ceil(std::log(ratio) / std::log(std::sqrt(2.0)) - 1e-9));
    return std::min(4, gaps + 1);
}

AnchorSet make_anchors(const ScaleRange& range, int stride, int image_w, int image_h)
{
    if (stride <= 0) throw std::invalid_argument("make_anchors: stride must be positive");
    if (!(range.lo > 0) || range.hi < range.lo) throw std::invalid_argument("make_anchors: bad range");
    AnchorSet s;
    s.stride = stride;
    s.grid_w = (image_w + stride - 1) / stride;
    s.grid_h = (image_h + stride - 1) / stride;
    const int n = anchors_needed(range);
    for (int i = 0; i < n; ++i)
        s.heights.push_back(n == 1 ? range.lo : range.lo * std::pow(range.hi / range.lo, static_cast<double>(i) / (n - 1)));
    return s;
}

GtRouting route_gt(std::span<const Box> gts, const SplitScheme& scheme, std::size_t detector_id)
{
    GtRouting r;
    for (std::size_t i = 0; i < gts.size(); ++i) {
        const auto idx = route_range(gts[i].h, scheme);
        if (idx && *idx == detector_id) r.in_range.push_back(i);
        else r.ignored.push_back(i);
    }
    return r;
}

std::vector<RoiSample> label_rois(std::span<const Box> rois, std::span<const Box> gts, const GtRouting& routing,
                                  std::size_t detector_id, const LabelThresholds& thr)
{
    std::vector<RoiSample> out(rois.size());
    const auto n = static_cast<std::ptrdiff_t>(rois.size());
#pragma omp parallel for schedule(static) if (n > 4096)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        RoiSample s;
        s.box = rois[i];
        s.detector_id = detector_id;
        double best_in = 0;
        std::optional<std::size_t> best_gt;
        for (std::size_t g : routing.in_range) {
            const double v = iou(rois[i], gts[g]);
            if (v > best_in) {
                best_in = v;
                best_gt = g;
            }
        }
        double best_ign = 0;
        for (std::size_t g : routing.ignored) best_ign = std::max(best_ign, iou(rois[i], gts[g]));
        s.max_iou = best_in;
        if (best_in >= thr.positive) {
            s.role = RoiRole::positive;
            s.matched_gt = best_gt;
        } else if (best_ign >= thr.discard) {
            s.role = RoiRole::discard;
        } else if (best_in >= thr.ill_aligned_hi) {
            s.role = RoiRole::ignore;
        } else if (best_in >= thr.ill_aligned_lo) {
            s.role = RoiRole::ill_aligned;
        } else {
            s.role = RoiRole::pure_background;
        }
        out[i] = s;
    }
    return out;
}

namespace {

std::vector<std::size_t> pick(std::vector<std::size_t> from, std::size_t k, Rng& rng)
{
    rng.shuffle(from.begin(), from.end());
    from.resize(std::min(k, from.size()));
    std::sort(from.begin(), from.end());
    return from;
}

} // namespace

std::vector<std::size_t> build_negative_pool(std::span<const RoiSample> samples, std::uint64_t seed)
{
    std::vector<std::size_t> pure, ill;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].role == RoiRole::pure_background) pure.push_back(i);
        else if (samples[i].role == RoiRole::ill_aligned) ill.push_back(i);
    }
    const std::size_t k = std::min(pure.size(), ill.size());
    if (k == 0) return {};
    Rng rng(seed);
    std::vector<std::size_t> pool = pick(std::move(pure), k, rng);
    const auto ill_pick = pick(std::move(ill), k, rng);
    pool.insert(pool.end(), ill_pick.begin(), ill_pick.end());
    return pool;
}

std::vector<std::size_t> Batch::all() const
{
    std::vector<std::size_t> v = positives;
    v.insert(v.end(), negatives.begin(), negatives.end());
    return v;
}

Batch sample_batch(std::span<const RoiSample> samples, const BatchSpec& spec, std::optional<std::span<const double>> losses)
{
    if (!(spec.positive_fraction > 0 && spec.positive_fraction < 1))
        throw std::invalid_argument("sample_batch: positive_fraction must lie in (0, 1)");
    if (spec.size < 1) throw std::invalid_argument("sample_batch: size must be >= 1");
    if (spec.hard_mining && (!losses || losses->size() != samples.size()))
        throw std::invalid_argument("sample_batch: hard mining needs a loss for every sample");

    std::vector<std::size_t> pos;
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (samples[i].role == RoiRole::positive) pos.push_back(i);

    Rng rng(sub_seed(spec.seed, 0));
    const auto pos_quota = static_cast<std::size_t>(std::floor(spec.positive_fraction * spec.size));
    Batch b;
    b.positives = pick(std::move(pos), pos_quota, rng);

    std::vector<std::size_t> pool = build_negative_pool(samples, sub_seed(spec.seed, 1));
    const std::size_t need = std::min(static_cast<std::size_t>(spec.size) - b.positives.size(), pool.size());
    if (spec.hard_mining) {
        const auto& l = *losses;
        std::stable_sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t c) { return l[a] > l[c]; });
        pool.resize(need);
        std::sort(pool.begin(), pool.end());
        b.negatives = std::move(pool);
    } else {
        b.negatives = pick(std::move(pool), need, rng);
    }
    if (b.size() == 0) throw EmptyBatchError("sample_batch: no positive or negative samples available");
    return b;
}

BatchStats batch_stats(std::span<const RoiSample> samples, const Batch& batch, std::size_t pool_size,
                       std::size_t detector_id)
{
    BatchStats s;
    s.detector_id = detector_id;
    for (const auto& r : samples) ++s.available[static_cast<int>(r.role)];
    s.pool = pool_size;
    s.batch_positive = batch.positives.size();
    s.batch_negative = batch.negatives.size();
    return s;
}

std::string batch_log_line(const BatchStats& s, const std::string& stage)
{
    nlohmann::ordered_json j;
    j["event"] = "batch";
    j["stage"] = stage;
    j["detector"] = s.detector_id;
    for (int r = 0; r < 5; ++r) j[role_name(static_cast<RoiRole>(r))] = s.available[r];
    j["pool"] = s.pool;
    j["batch_positive"] = s.batch_positive;
    j["batch_negative"] = s.batch_negative;
    return j.dump();
}

} // namespace msdet

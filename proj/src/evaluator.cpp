#include "msdet/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <Eigen/Dense>
#include <json.hpp>

#include "msdet/errors.hpp"

namespace msdet {

using json = nlohmann::ordered_json;

EvalProtocol desk_protocol()
{
    EvalProtocol p;
    p.buckets = {{"easy", 48, 1e9}, {"medium", 16, 1e9}, {"hard", 6, 1e9}};
    return p;
}

void validate_protocol(const EvalProtocol& p)
{
    if (!(p.iou_threshold > 0.0 && p.iou_threshold < 1.0))
        throw std::invalid_argument("protocol.iou_threshold must be in (0,1)");
    if (p.buckets.empty()) throw std::invalid_argument("protocol.buckets must not be empty");
    std::set<std::string> names;
    for (const auto& b : p.buckets) {
        if (b.name.empty() || !names.insert(b.name).second)
            throw std::invalid_argument("protocol.buckets: names must be unique and non-empty");
        if (!(b.min_height <= b.max_height)) throw std::invalid_argument("protocol.buckets: " + b.name + " is empty");
    }
    for (int c : p.fp_counts)
        if (c < 0) throw std::invalid_argument("protocol.fp_counts must be non-negative");
}

MatchResult greedy_match(std::span<const Box> dets, std::span<const Box> gts, const DifficultyBucket& bucket,
                         double iou_threshold)
{
    MatchResult r;
    r.flags.assign(dets.size(), MatchFlag::fp);
    r.gt_matched.assign(gts.size(), false);
    std::vector<bool> in_bucket(gts.size());
    for (std::size_t g = 0; g < gts.size(); ++g) {
        in_bucket[g] = bucket.contains(gts[g]);
        if (in_bucket[g]) ++r.n_gt;
    }
    for (std::size_t d = 0; d < dets.size(); ++d) {
        double best = -1;
        std::size_t best_g = gts.size();
        bool hits_ignored = false;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            const double v = iou(dets[d], gts[g]);
            if (v < iou_threshold) continue;
            if (!in_bucket[g]) {
                hits_ignored = true;
                continue;
            }
            if (!r.gt_matched[g] && v > best) {
                best = v;
                best_g = g;
            }
        }
        if (best_g < gts.size()) {
            r.flags[d] = MatchFlag::tp;
            r.gt_matched[best_g] = true;
        } else if (hits_ignored) {
            r.flags[d] = MatchFlag::ignored;
        }
    }
    return r;
}

namespace {

struct Prefix {
    std::vector<double> precision, recall;
};

Prefix prefix_pr(const std::vector<bool>& tp, std::size_t n_gt)
{
    Prefix p;
    double tps = 0;
    for (std::size_t i = 0; i < tp.size(); ++i) {
        if (tp[i]) ++tps;
        p.precision.push_back(tps / static_cast<double>(i + 1));
        p.recall.push_back(n_gt ? tps / static_cast<double>(n_gt) : 0.0);
    }
    return p;
}

} // namespace

double average_precision(const std::vector<bool>& tp_flags, std::size_t n_gt, ApInterpolation interp)
{
    if (n_gt == 0 || tp_flags.empty()) return 0.0;
    const Prefix p = prefix_pr(tp_flags, n_gt);
    std::vector<double> env = p.precision;
    for (std::size_t i = env.size() - 1; i-- > 0;) env[i] = std::max(env[i], env[i + 1]);

    if (interp == ApInterpolation::eleven_point) {
        double sum = 0;
        for (int k = 0; k <= 10; ++k) {
            const double t = k / 10.0;
            double best = 0;
            for (std::size_t i = 0; i < env.size(); ++i)
                if (p.recall[i] >= t - 1e-12) {
                    best = env[i];
                    break;
                }
            sum += best;
        }
        return sum / 11.0;
    }
    double ap = 0, prev_r = 0;
    for (std::size_t i = 0; i < env.size(); ++i) {
        if (!tp_flags[i]) continue;
        ap += (p.recall[i] - prev_r) * env[i];
        prev_r = p.recall[i];
    }
    return ap;
}

PrCurve pr_curve(const std::vector<bool>& tp_flags, std::span<const double> scores, std::size_t n_gt)
{
    if (tp_flags.size() != scores.size()) throw std::invalid_argument("pr_curve: flags and scores differ in length");
    const Prefix p = prefix_pr(tp_flags, n_gt);
    PrCurve c;
    for (std::size_t i = 0; i < tp_flags.size(); ++i) c.push_back({scores[i], p.precision[i], p.recall[i]});
    return c;
}

std::vector<double> recall_at_fp(const std::vector<bool>& tp_flags, std::size_t n_gt, std::span<const int> fp_counts)
{
    std::vector<double> out;
    for (int c : fp_counts) {
        if (c < 0) throw std::invalid_argument("recall_at_fp: negative count");
        std::size_t tps = 0;
        int fps = 0;
        for (bool t : tp_flags) {
            if (t)
                ++tps;
            else if (++fps > c)
                break;
        }
        out.push_back(n_gt ? static_cast<double>(tps) / static_cast<double>(n_gt) : 0.0);
    }
    return out;
}

Ellipse EllipseFit::apply(const Box& b) const
{
    const double x[5] = {b.x, b.y, b.w, b.h, 1.0};
    double v[5] = {};
    for (int r = 0; r < 5; ++r)
        for (int k = 0; k < 5; ++k) v[r] += coef[r][k] * x[k];
    return {v[0], v[1], v[2], v[3], v[4]};
}

EllipseFit fit_box_to_ellipse(std::span<const std::pair<Box, Ellipse>> pairs)
{
    if (pairs.size() < 5)
        throw DegenerateFitError("ellipse fit needs at least 5 pairs, got " + std::to_string(pairs.size()));
    const long n = static_cast<long>(pairs.size());
    Eigen::MatrixXd X(n, 5), Y(n, 5);
    for (long i = 0; i < n; ++i) {
        const auto& [b, e] = pairs[static_cast<std::size_t>(i)];
        X.row(i) << b.x, b.y, b.w, b.h, 1.0;
        Y.row(i) << e.cx, e.cy, e.a, e.b, e.angle;
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    if (qr.rank() < 5) throw DegenerateFitError("ellipse fit design matrix is rank deficient");
    const Eigen::MatrixXd C = qr.solve(Y); // 5 x 5, column per ellipse parameter
    EllipseFit fit;
    for (int r = 0; r < 5; ++r)
        for (int k = 0; k < 5; ++k) fit.coef[r][k] = C(k, r);
    fit.residual_norm = (X * C - Y).norm();
    return fit;
}

const BucketReport& EvalReport::bucket(const std::string& name) const
{
    for (const auto& b : buckets)
        if (b.name == name) return b;
    throw std::invalid_argument("no bucket named " + name);
}

namespace {

bool det_before(const Detection& a, const Detection& b)
{
    if (a.score != b.score) return a.score > b.score;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    if (a.box.x != b.box.x) return a.box.x < b.box.x;
    if (a.box.y != b.box.y) return a.box.y < b.box.y;
    if (a.box.w != b.box.w) return a.box.w < b.box.w;
    return a.box.h < b.box.h;
}

} // namespace

EvalReport evaluate(std::span<const Detection> dets, const Dataset& annotations, const EvalProtocol& protocol)
{
    validate_protocol(protocol);
    std::map<std::string, const AnnotatedImage*> by_id;
    for (const auto& a : annotations) by_id[a.image_id] = &a;

    std::map<std::string, std::vector<Detection>> per_image;
    std::set<std::string> unknown;
    for (const auto& d : dets) {
        if (!by_id.count(d.image_id))
            unknown.insert(d.image_id);
        else
            per_image[d.image_id].push_back(d);
    }
    if (!unknown.empty()) {
        std::string list;
        for (const auto& u : unknown) list += (list.empty() ? "" : ", ") + u;
        throw std::invalid_argument("detections reference unknown image ids: " + list);
    }
    for (auto& [id, v] : per_image) std::sort(v.begin(), v.end(), det_before);

    EvalReport report;
    for (const auto& bucket : protocol.buckets) {
        BucketReport br;
        br.name = bucket.name;
        std::vector<Detection> scored;
        std::vector<bool> scored_tp;
        for (const auto& [id, ann] : by_id) {
            const auto it = per_image.find(id);
            std::vector<Box> boxes;
            if (it != per_image.end())
                for (const auto& d : it->second) boxes.push_back(d.box);
            const MatchResult m = greedy_match(boxes, ann->boxes, bucket, protocol.iou_threshold);
            br.n_gt += m.n_gt;
            for (std::size_t i = 0; i < boxes.size(); ++i) {
                if (m.flags[i] == MatchFlag::ignored) continue;
                scored.push_back(it->second[i]);
                scored_tp.push_back(m.flags[i] == MatchFlag::tp);
            }
        }
        std::vector<std::size_t> order(scored.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (det_before(scored[a], scored[b])) return true;
            if (det_before(scored[b], scored[a])) return false;
            return a < b;
        });
        std::vector<bool> flags;
        std::vector<double> scores;
        for (std::size_t i : order) {
            flags.push_back(scored_tp[i]);
            scores.push_back(scored[i].score);
        }
        br.n_det = flags.size();
        br.ap = average_precision(flags, br.n_gt, protocol.interpolation);
        br.pr = pr_curve(flags, scores, br.n_gt);
        br.recall_at_fp = recall_at_fp(flags, br.n_gt, protocol.fp_counts);
        if (br.n_gt == 0) report.warnings.push_back("bucket " + bucket.name + " has no ground truth; AP set to 0");
        report.buckets.push_back(std::move(br));
    }
    return report;
}

std::string report_json(const EvalReport& r, const EvalProtocol& p)
{
    json j;
    j["iou_threshold"] = p.iou_threshold;
    j["interpolation"] = p.interpolation == ApInterpolation::all_points ? "all_points" : "eleven_point";
    j["buckets"] = json::array();
    for (const auto& b : r.buckets) {
        json jb;
        jb["name"] = b.name;
        jb["ap"] = b.ap;
        jb["n_gt"] = b.n_gt;
        jb["n_det"] = b.n_det;
        json rf = json::object();
        for (std::size_t i = 0; i < b.recall_at_fp.size() && i < p.fp_counts.size(); ++i)
            rf[std::to_string(p.fp_counts[i])] = b.recall_at_fp[i];
        jb["recall_at_fp"] = rf;
        jb["pr"] = json::array();
        for (const auto& pt : b.pr) jb["pr"].push_back({pt.threshold, pt.precision, pt.recall});
        j["buckets"].push_back(jb);
    }
    j["warnings"] = r.warnings;
    return j.dump();
}

EvalReport report_from_json(const std::string& text)
{
    try {
        const json j = json::parse(text);
        EvalReport r;
        for (const auto& jb : j.at("buckets")) {
            BucketReport b;
            b.name = jb.at("name").get<std::string>();
            b.ap = jb.at("ap").get<double>();
            b.n_gt = jb.at("n_gt").get<std::size_t>();
            b.n_det = jb.at("n_det").get<std::size_t>();
            for (const auto& [k, v] : jb.at("recall_at_fp").items()) b.recall_at_fp.push_back(v.get<double>());
            for (const auto& pt : jb.at("pr"))
                b.pr.push_back({pt.at(0).get<double>(), pt.at(1).get<double>(), pt.at(2).get<double>()});
            r.buckets.push_back(std::move(b));
        }
        if (j.contains("warnings")) r.warnings = j.at("warnings").get<std::vector<std::string>>();
        return r;
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("bad report: ") + e.what());
    }
}

std::string pr_csv(const PrCurve& pr)
{
    std::ostringstream os;
    os.precision(17);
    os << "threshold,precision,recall\n";
    for (const auto& p : pr) os << p.threshold << "," << p.precision << "," << p.recall << "\n";
    return os.str();
}

void save_report(const std::filesystem::path& dir, const EvalReport& r, const EvalProtocol& p)
{
    std::filesystem::create_directories(dir);
    {
        std::ofstream f(dir / "report.json");
        if (!f) throw std::runtime_error("cannot write " + (dir / "report.json").string());
        f << report_json(r, p) << "\n";
    }
    for (const auto& b : r.buckets) {
        std::ofstream f(dir / ("pr_" + b.name + ".csv"));
        f << pr_csv(b.pr);
    }
}

} // namespace msdet

#include "msdet/experiments.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <stdexcept>

#include "msdet/rng.hpp"

namespace msdet {

ExperimentData make_data(const DataConfig& cfg, std::uint64_t seed)
{
    SceneSpec tr = cfg.scene;
    tr.seed = sub_seed(seed, 11);
    tr.id_prefix = "train";
    SceneSpec va = cfg.scene;
    va.seed = sub_seed(seed, 12);
    va.id_prefix = "val";
    ExperimentData d;
    d.train = augment(generate(tr, cfg.n_train), cfg.augment);
    if (cfg.n_val > 0) d.val = generate(va, cfg.n_val);
    return d;
}

TrainResult run_scheme(const ExperimentData& data, const SplitScheme& scheme, TrainMode mode,
                       const BackboneSpec& backbone, const HeadSpec& head, const TrainerConfig& cfg,
                       std::uint64_t seed)
{
    const EnsembleSpec spec = build_ensemble_spec(scheme, backbone, head, mode);
    return train(data.train, data.val, spec, cfg, seed);
}

double median(std::vector<double> v)
{
    if (v.empty()) throw std::invalid_argument("median of nothing");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::map<std::string, double> median_by_label(std::span<const ResultRow> rows, const std::string& bucket)
{
    std::map<std::string, std::vector<double>> by;
    for (const auto& r : rows) by[r.label].push_back(r.ap.at(bucket));
    std::map<std::string, double> out;
    for (auto& [k, v] : by) out[k] = median(v);
    return out;
}

std::string results_csv(std::span<const ResultRow> rows, std::span<const std::string> buckets)
{
    std::ostringstream os;
    os.precision(6);
    os << std::fixed;
    os << "label,seed";
    for (const auto& b : buckets) os << "," << b;
    os << "\n";
    std::vector<std::string> labels;
    for (const auto& r : rows) {
        if (std::find(labels.begin(), labels.end(), r.label) == labels.end()) labels.push_back(r.label);
        os << r.label << "," << r.seed;
        for (const auto& b : buckets) os << "," << r.ap.at(b);
        os << "\n";
    }
    for (const auto& l : labels) {
        os << l << ",median";
        for (const auto& b : buckets) os << "," << median_by_label(rows, b).at(l);
        os << "\n";
    }
    return os.str();
}

std::vector<SweepTable> run_sweep(const RunConfig& cfg, std::uint64_t seed)
{
    const ExperimentData data = make_data(cfg.data, seed);
    std::vector<SweepTable> out;
    for (std::size_t i = 0; i < cfg.sweep.buckets.size(); ++i) {
        SweepTable t;
        t.bucket = cfg.sweep.buckets[i];
        t.rows = stride_sweep(data.train, data.val, t.bucket, cfg.sweep.stages, cfg.backbone, cfg.head, cfg.trainer,
                              sub_seed(seed, 100 + i));
        t.argmax_stride = sweep_argmax(t.rows);
        out.push_back(std::move(t));
    }
    return out;
}

std::string sweep_csv(std::span<const SweepTable> tables)
{
    std::ostringstream os;
    os.precision(6);
    os << std::fixed;
    os << "bucket_lo,bucket_hi,stage,stride,ap,argmax\n";
    for (const auto& t : tables)
        for (const auto& r : t.rows)
            os << t.bucket.lo << "," << t.bucket.hi << "," << r.stage << "," << r.stride << "," << r.ap << ","
               << (r.stride == t.argmax_stride ? 1 : 0) << "\n";
    return os.str();
}

} // namespace msdet

// Acceptance suite. Each criterion prints one PASS/FAIL line; the exit
// status is non-zero when any selected criterion fails.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "msdet/cli.hpp"
#include "msdet/config.hpp"
#include "msdet/detector.hpp"
#include "msdet/evaluator.hpp"
#include "msdet/experiments.hpp"
#include "msdet/model.hpp"
#include "msdet/rng.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace msdet;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double v, int prec = 3)
{
    std::ostringstream os;
    os << std::fixed << std::setprecision(prec) << v;
    return os.str();
}

std::string sci(double v)
{
    std::ostringstream os;
    os << std::scientific << std::setprecision(2) << v;
    return os.str();
}

// ---- 1 ---------------------------------------------------------------------

Outcome gradient_oracle()
{
    const auto t0 = std::chrono::steady_clock::now();
    const int instances = 20;
    double worst = 0;
    std::string worst_name;
    std::size_t fails = 0, coords = 0, excluded = 0;
    std::ostringstream per;
    for (const auto& [name, check] : oracle::gradient_checkers()) {
        double w = 0;
        for (int i = 0; i < instances; ++i) {
            const auto r = check(sub_seed(0xC0FFEE, static_cast<std::uint64_t>(i)));
            w = std::max(w, r.worst);
            coords += r.coordinates;
            excluded += r.excluded;
            if (!(r.worst <= 1e-3)) ++fails;
        }
        per << " " << name << "=" << sci(w);
        if (w > worst || worst_name.empty()) {
            worst = w;
            worst_name = name;
        }
    }
    const double secs = seconds_since(t0);
    const bool pass = fails == 0 && secs <= 120;
    return {pass, std::to_string(instances) + " instances per check, worst " + sci(worst) + " (" + worst_name +
                      "), " + std::to_string(fails) + " failing, " + num(secs, 1) + " s;" + per.str() +
                      "; model stencils at kinks skipped " + std::to_string(excluded) + "/" + std::to_string(coords)};
}

// ---- 2 ---------------------------------------------------------------------

std::vector<bool> tp_only(const std::vector<oracle::Flag>& f)
{
    std::vector<bool> out;
    for (auto x : f)
        if (x != oracle::Flag::ignored) out.push_back(x == oracle::Flag::tp);
    return out;
}

Outcome evaluator_oracle()
{
    std::size_t mismatches = 0, cases = 0;
    double worst = 0;

    // hand case: TP, FP, TP over two gts
    {
        const double hand = average_precision({true, false, true}, 2);
        worst = std::max(worst, std::abs(hand - 5.0 / 6.0));
        worst = std::max(worst, std::abs(oracle::brute_ap({true, false, true}, 2) - 5.0 / 6.0));
        AnnotatedImage img;
        img.image_id = "hand";
        img.image = GrayImage(64, 64);
        img.boxes = {{0, 0, 20, 20}, {40, 40, 20, 20}};
        std::vector<Detection> dets = {{{0, 0, 20, 20}, 0.9, 0, "hand"},
                                       {{20, 0, 10, 10}, 0.8, 0, "hand"},
                                       {{40, 40, 20, 20}, 0.7, 0, "hand"}};
        EvalProtocol p;
        p.buckets = {{"all", 0, 1e9}};
        const EvalReport r = evaluate(dets, {img}, p);
        worst = std::max(worst, std::abs(r.buckets[0].ap - 5.0 / 6.0));
        ++cases;
    }

    Rng rng(20251);
    for (int c = 0; c < 200; ++c, ++cases) {
        const int ng = rng.between(0, 5), nd = rng.between(0, 10);
        std::vector<Box> gts;
        for (int i = 0; i < ng; ++i) {
            const double h = rng.uniform(4, 30);
            gts.push_back({rng.uniform(0, 40), rng.uniform(0, 40), h * rng.uniform(0.7, 1.3), h});
        }
        std::vector<Box> dets;
        std::vector<double> scores;
        for (int i = 0; i < nd; ++i) {
            if (!gts.empty() && rng.coin(0.7)) {
                const Box& g = gts[rng.below(gts.size())];
                dets.push_back({g.x + rng.uniform(-3, 3), g.y + rng.uniform(-3, 3), g.w * rng.uniform(0.8, 1.2),
                                g.h * rng.uniform(0.8, 1.2)});
            } else {
                dets.push_back({rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(4, 30), rng.uniform(4, 30)});
            }
            scores.push_back(rng.uniform());
        }
        std::vector<std::size_t> order(dets.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
        std::vector<Box> sorted;
        for (auto i : order) sorted.push_back(dets[i]);

        const double lo = rng.uniform(0, 15), hi = rng.coin() ? 1e9 : rng.uniform(15, 30);
        const DifficultyBucket bucket{"b", lo, hi};
        const MatchResult m = greedy_match(sorted, gts, bucket, 0.5);
        const auto ref = oracle::brute_match(sorted, gts, lo, hi, 0.5);
        for (std::size_t i = 0; i < ref.size(); ++i) {
            const auto want = ref[i] == oracle::Flag::tp   ? MatchFlag::tp
                              : ref[i] == oracle::Flag::fp ? MatchFlag::fp
                                                           : MatchFlag::ignored;
            if (m.flags[i] != want) ++mismatches;
        }
        std::size_t n_gt = 0;
        for (const auto& g : gts) n_gt += g.h >= lo && g.h <= hi;
        if (m.n_gt != n_gt) ++mismatches;

        const std::vector<bool> tp = tp_only(ref);
        const double want_ap = oracle::brute_ap(tp, n_gt);
        worst = std::max(worst, std::abs(average_precision(tp, n_gt) - want_ap));

        AnnotatedImage img;
        img.image_id = "c" + std::to_string(c);
        img.image = GrayImage(80, 80);
        img.boxes = gts;
        std::vector<Detection> dl;
        for (std::size_t i = 0; i < dets.size(); ++i) dl.push_back({dets[i], scores[i], 0, img.image_id});
        EvalProtocol p;
        p.buckets = {bucket};
        const EvalReport r = evaluate(dl, {img}, p);
        worst = std::max(worst, std::abs(r.buckets[0].ap - want_ap));
    }
    const bool pass = mismatches == 0 && worst <= 1e-9;
    return {pass, std::to_string(cases) + " cases incl. hand case 5/6, " + std::to_string(mismatches) +
                      " flag mismatches, max AP error " + sci(worst)};
}

// ---- 3 ---------------------------------------------------------------------

Outcome nms_oracle()
{
    Rng rng(3003);
    std::size_t sets = 0, mismatches = 0;
    for (int s = 0; s < 300; ++s) {
        const int n = rng.between(0, 50);
        std::vector<Box> boxes;
        std::vector<double> scores;
        for (int i = 0; i < n; ++i) {
            boxes.push_back({rng.uniform(0, 60), rng.uniform(0, 60), rng.uniform(2, 30), rng.uniform(2, 30)});
            // coarse scores so ties exercise the tie-break
            scores.push_back(std::round(rng.uniform() * 10) / 10);
        }
        for (double thr : {0.3, 0.5, 0.7}) {
            ++sets;
            if (nms_indices(boxes, scores, thr) != oracle::brute_nms(boxes, scores, thr)) ++mismatches;
        }
    }
    return {mismatches == 0, std::to_string(sets) + " (set, threshold) cases, " + std::to_string(mismatches) +
                                 " mismatches"};
}

// ---- 8, 9 ------------------------------------------------------------------

Outcome sampler_suite()
{
    const auto v = oracle::sampler_invariants(1000, 808);
    std::ostringstream os;
    os << v.scenes << " scenes, " << v.rois << " ROIs x 3 detectors; violations: partition " << v.role_partition
       << ", double positive " << v.double_positive << ", pool balance " << v.pool_balance << ", forbidden in batch "
       << v.forbidden_in_batch;
    return {v.total() == 0, os.str()};
}

Outcome ellipse_regressor()
{
    Rng rng(909);
    std::array<std::array<double, 5>, 5> truth{};
    for (auto& row : truth)
        for (double& c : row) c = rng.uniform(-2, 2);
    std::vector<std::pair<Box, Ellipse>> pairs;
    for (int i = 0; i < 100; ++i) {
        const Box b{rng.uniform(0, 200), rng.uniform(0, 200), rng.uniform(5, 80), rng.uniform(5, 80)};
        const double in[5] = {b.x, b.y, b.w, b.h, 1};
        double out[5] = {};
        for (int r = 0; r < 5; ++r)
            for (int k = 0; k < 5; ++k) out[r] += truth[r][k] * in[k];
        pairs.push_back({b, {out[0], out[1], out[2], out[3], out[4]}});
    }
    const EllipseFit fit = fit_box_to_ellipse(pairs);
    double err = 0;
    for (int r = 0; r < 5; ++r)
        for (int k = 0; k < 5; ++k) err = std::max(err, std::abs(fit.coef[r][k] - truth[r][k]));
    const bool pass = err <= 1e-6 && fit.residual_norm < 1e-9;
    return {pass, "100 pairs, max coefficient error " + sci(err) + ", residual " + sci(fit.residual_norm)};
}

// ---- 10 --------------------------------------------------------------------

int cli(const std::vector<std::string>& args, std::ostream& log)
{
    std::vector<const char*> argv{"msdet"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data(), log, log);
}

std::string slurp(const fs::path& p)
{
    std::ifstream f(p, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

Outcome determinism(const fs::path& work)
{
    const fs::path root = work / "determinism";
    fs::remove_all(root);
    fs::create_directories(root);
    const fs::path cfg = root / "config.json";
    {
        std::ofstream f(cfg);
        f << R"({"seed": 41, "data": {"n_train": 24, "n_val": 12, "augment": {"hflip": false}},
  "trainer": {"epochs": 2}})";
    }
    std::ostringstream log;
    std::vector<std::string> runs;
    for (const char* run : {"a", "b"}) {
        const std::string out = (root / run).string();
        for (const char* cmd : {"gen-data", "train", "detect", "eval"})
            if (cli({"--config", cfg.string(), "--out", out, cmd}, log) != 0)
                return {false, std::string("pipeline step ") + cmd + " failed: " + log.str()};
        runs.push_back(out);
    }
    std::size_t differing = 0;
    std::vector<std::string> compared;
    for (const char* file : {"metrics_joint.jsonl", "eval_joint/report.json", "detections_joint.jsonl",
                             "data/manifest.json"}) {
        const std::string a = slurp(fs::path(runs[0]) / file), b = slurp(fs::path(runs[1]) / file);
        if (a.empty() || a != b) ++differing;
        compared.push_back(file);
    }
    return {differing == 0, "two gen-data/train(2 epochs)/detect/eval runs, " + std::to_string(compared.size()) +
                                " artifacts compared, " + std::to_string(differing) + " differ"};
}

// ---- 4 to 7: training experiments -------------------------------------------

class Experiments {
public:
    Experiments(RunConfig cfg, fs::path work) : cfg_(std::move(cfg)), work_(std::move(work))
    {
        fs::create_directories(work_);
    }

    const RunConfig& config() const { return cfg_; }

    // hard-bucket AP of one (label, seed) run, trained on first use
    double hard_ap(const std::string& label, std::uint64_t s)
    {
        const auto key = std::make_pair(label, s);
        if (auto it = runs_.find(key); it != runs_.end()) return it->second.ap.at("hard");
        const auto t0 = std::chrono::steady_clock::now();
        const std::uint64_t run_seed = sub_seed(*cfg_.seed, s);
        if (!data_.count(s)) data_.emplace(s, make_data(cfg_.data, run_seed));

        std::string scheme = label;
        TrainMode mode = TrainMode::joint;
        BackboneSpec backbone = cfg_.backbone;
        HeadSpec head = cfg_.head;
        if (label.ends_with("/naive")) {
            scheme = label.substr(0, label.size() - 6);
            mode = TrainMode::naive;
        } else if (label.ends_with("/compressed")) {
            scheme = label.substr(0, label.size() - 11);
            const auto ref = build_ensemble_spec(resolve_scheme(scheme), backbone, head, mode);
            const auto c = compress(backbone, head, cfg_.compress_factor, ref);
            backbone = c.backbone;
            head = c.head;
        }
        const TrainResult r =
            run_scheme(data_.at(s), resolve_scheme(scheme), mode, backbone, head, cfg_.trainer, run_seed);
        ResultRow row{label, s, {}};
        for (const auto& b : r.final_report->buckets) row.ap[b.name] = b.ap;
        runs_[key] = row;
        std::cout << "  [" << label << " seed " << s << "] easy " << num(100 * row.ap["easy"], 1) << " medium "
                  << num(100 * row.ap["medium"], 1) << " hard " << num(100 * row.ap["hard"], 1) << " ("
                  << num(seconds_since(t0), 0) << " s)" << std::endl;
        save();
        return row.ap.at("hard");
    }

    double median_hard(const std::string& label)
    {
        std::vector<double> v;
        for (std::uint64_t s : cfg_.seeds) v.push_back(hard_ap(label, s));
        return median(v);
    }

private:
    void save() const
    {
        std::vector<ResultRow> rows;
        for (const auto& [k, r] : runs_) rows.push_back(r);
        std::vector<std::string> buckets;
        for (const auto& b : cfg_.trainer.protocol.buckets) buckets.push_back(b.name);
        std::ofstream(work_ / "experiments.csv") << results_csv(rows, buckets);
    }

    RunConfig cfg_;
    fs::path work_;
    std::map<std::uint64_t, ExperimentData> data_;
    std::map<std::pair<std::string, std::uint64_t>, ResultRow> runs_;
};

Outcome table1_analog(const RunConfig& cfg, const fs::path& work)
{
    const auto t0 = std::chrono::steady_clock::now();
    const auto tables = run_sweep(cfg, *cfg.seed);
    fs::create_directories(work);
    std::ofstream(work / "sweep.csv") << sweep_csv(tables);
    std::ostringstream os;
    bool monotone = true;
    for (std::size_t i = 0; i < tables.size(); ++i) {
        os << (i ? ", " : "") << "[" << tables[i].bucket.lo << "," << tables[i].bucket.hi << ")->" << tables[i].argmax_stride;
        os << " (";
        for (std::size_t j = 0; j < tables[i].rows.size(); ++j)
            os << (j ? " " : "") << tables[i].rows[j].stride << ":" << num(100 * tables[i].rows[j].ap, 1);
        os << ")";
        if (i > 0 && tables[i].argmax_stride < tables[i - 1].argmax_stride) monotone = false;
    }
    const bool strict = tables.size() >= 2 && tables.front().argmax_stride < tables.back().argmax_stride;
    const double secs = seconds_since(t0);
    os << "; " << num(secs / 60, 1) << " min";
    return {monotone && strict && secs <= 45 * 60, "argmax stride per bucket " + os.str()};
}

Outcome table4_analog(Experiments& ex)
{
    const double three = ex.median_hard("three"), one = ex.median_hard("one"), even = ex.median_hard("three-even");
    const double g1 = 100 * (three - one), g2 = 100 * (three - even);
    return {g1 >= 3 && g2 >= 3, "median hard AP three " + num(100 * three, 1) + ", one " + num(100 * one, 1) +
                                    " (gap " + num(g1, 1) + "), three-even " + num(100 * even, 1) + " (gap " +
                                    num(g2, 1) + ")"};
}

Outcome table5_analog(Experiments& ex)
{
    const double joint = ex.median_hard("three"), naive = ex.median_hard("three/naive");
    return {joint >= naive, "median hard AP joint " + num(100 * joint, 1) + ", naive ensemble " +
                                num(100 * naive, 1) + " (gap " + num(100 * (joint - naive), 1) + ")"};
}

Outcome compression_analog(Experiments& ex)
{
    const RunConfig& cfg = ex.config();
    const SplitScheme scheme = resolve_scheme("three");
    const EnsembleSpec ref = build_ensemble_spec(scheme, cfg.backbone, cfg.head, TrainMode::joint);
    const CompressionResult c = compress(cfg.backbone, cfg.head, cfg.compress_factor, ref);
    const EnsembleSpec small = build_ensemble_spec(scheme, c.backbone, c.head, TrainMode::joint);

    // closed-form counts against instantiated parameter tensors
    auto instantiated = [](const EnsembleSpec& s) {
        std::size_t n = 0;
        for (const auto& m : s.models) n += Model(m).params().scalar_count();
        return n;
    };
    const ParamCount before = count_params(ref), after = count_params(small);
    const bool counts_exact = instantiated(ref) == before.total() && instantiated(small) == after.total();
    const double conv_ratio = static_cast<double>(after.conv) / static_cast<double>(before.conv);

    const double full = ex.median_hard("three"), comp = ex.median_hard("three/compressed");
    const double drop = 100 * (full - comp);
    const bool pass = counts_exact && conv_ratio <= 0.30 && drop <= 3;
    return {pass, "factor " + num(cfg.compress_factor, 2) + ": conv params " + std::to_string(after.conv) + "/" +
                      std::to_string(before.conv) + " = " + num(100 * conv_ratio, 1) + "% (count formula " +
                      (counts_exact ? "exact" : "MISMATCH") + "), median hard AP " + num(100 * full, 1) + " -> " +
                      num(100 * comp, 1) + " (drop " + num(drop, 1) + ")"};
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Acceptance criteria"};
    std::vector<int> criteria;
    std::string config, work = "acceptance_out";
    app.add_option("--criterion", criteria, "Criteria to run (default: all)")->check(CLI::Range(1, 10));
    app.add_option("--config", config, "Run config for the training experiments");
    app.add_option("--workdir", work, "Scratch and result directory");
    CLI11_PARSE(app, argc, argv);
    if (criteria.empty()) criteria = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};

    std::optional<Experiments> ex;
    auto experiments = [&]() -> Experiments& {
        if (!ex) {
            RunConfig cfg = config.empty() ? default_run_config() : load_run_config(config);
            if (!cfg.seed) cfg.seed = 1;
            ex.emplace(cfg, fs::path(work) / "experiments");
        }
        return *ex;
    };

    static const std::map<int, std::string> names = {
        {1, "gradient oracle"},       {2, "evaluator oracle"},    {3, "NMS oracle"},
        {4, "stride sweep ordering"}, {5, "split scheme gaps"},   {6, "joint vs naive ensemble"},
        {7, "compression"},           {8, "sampler invariants"},  {9, "ellipse regressor"},
        {10, "pipeline determinism"}};

    int failed = 0;
    for (int c : criteria) {
        Outcome o;
        try {
            switch (c) {
            case 1: o = gradient_oracle(); break;
            case 2: o = evaluator_oracle(); break;
            case 3: o = nms_oracle(); break;
            case 4: o = table1_analog(experiments().config(), fs::path(work) / "sweep"); break;
            case 5: o = table4_analog(experiments()); break;
            case 6: o = table5_analog(experiments()); break;
            case 7: o = compression_analog(experiments()); break;
            case 8: o = sampler_suite(); break;
            case 9: o = ellipse_regressor(); break;
            case 10: o = determinism(work); break;
            }
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::cout << "criterion " << c << " (" << names.at(c) << "): " << (o.pass ? "PASS" : "FAIL") << " - "
                  << o.detail << std::endl;
        failed += o.pass ? 0 : 1;
    }
    return failed == 0 ? 0 : 1;
}

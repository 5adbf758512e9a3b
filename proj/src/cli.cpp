#include "msdet/cli.hpp"

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <omp.h>

#include "msdet/config.hpp"
#include "msdet/digest.hpp"
#include "msdet/errors.hpp"
#include "msdet/experiments.hpp"
#include "msdet/geometry.hpp"
#include "msdet/plot.hpp"
#include "msdet/rng.hpp"

namespace msdet {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<int> threads;
    std::string mode;
};

RunConfig resolve_config(const Globals& g, bool need_seed)
{
    RunConfig c = g.config.empty() ? default_run_config() : load_run_config(g.config);
    if (g.seed) c.seed = g.seed;
    if (!g.out.empty()) c.out_dir = g.out;
    if (g.threads) {
        if (*g.threads < 0) throw ConfigError("--threads must be >= 0");
        c.threads = *g.threads;
    }
    if (!g.mode.empty()) {
        try {
            c.mode = parse_mode(g.mode);
        } catch (const std::invalid_argument&) {
            throw ConfigError("--mode must be joint or naive");
        }
    }
    if (need_seed && !c.seed) throw ConfigError("a seed is required: set 'seed' in the config, --seed or MSDET_SEED");
    if (c.threads > 0) omp_set_num_threads(c.threads);
    return c;
}

void write_text(const fs::path& p, const std::string& text)
{
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f << text;
}

std::string read_text(const fs::path& p)
{
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + p.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string split_digest(const fs::path& data_dir, const std::string& split, const Dataset& d)
{
    Fnv1a h;
    h.update(read_text(data_dir / (split + ".jsonl")));
    for (const auto& img : d) h.update(encode_pgm(img.image));
    return h.hex();
}

std::string bucket_line(const EvalReport& r)
{
    std::ostringstream os;
    os.precision(4);
    os << std::fixed;
    for (const auto& b : r.buckets) os << b.name << "=" << 100 * b.ap << " ";
    return os.str();
}

// --- subcommands ------------------------------------------------------------

int cmd_gen_data(const Globals& g, std::ostream& out)
{
    const RunConfig c = resolve_config(g, true);
    const ExperimentData d = make_data(c.data, *c.seed);
    const fs::path dir = c.out_dir / "data";
    save_dataset(dir, "train", d.train);
    save_dataset(dir, "val", d.val);
    json m;
    m["seed"] = *c.seed;
    RunConfig anon = c;
    anon.out_dir.clear();
    m["config_digest"] = fnv1a_hex(run_config_json(anon));
    m["splits"]["train"] = {{"images", d.train.size()}, {"digest", split_digest(dir, "train", d.train)}};
    m["splits"]["val"] = {{"images", d.val.size()}, {"digest", split_digest(dir, "val", d.val)}};
    write_text(dir / "manifest.json", m.dump(2) + "\n");
    out << "wrote " << d.train.size() << " train / " << d.val.size() << " val images to " << dir.string() << "\n";
    out << "train digest " << m["splits"]["train"]["digest"].get<std::string>() << "\n";
    return kExitOk;
}

std::vector<double> parse_heights(const std::string& s)
{
    std::vector<double> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        try {
            std::size_t pos = 0;
            out.push_back(std::stod(tok, &pos));
            if (pos != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
            throw ConfigError("--heights: '" + tok + "' is not a number");
        }
    }
    return out;
}

int cmd_analyze(const Globals& g, const std::string& backbone_file, const std::string& heights, std::ostream& out)
{
    const RunConfig c = resolve_config(g, false);
    BackboneDescription desc;
    if (!backbone_file.empty()) {
        std::ifstream f(backbone_file);
        if (!f) throw ConfigError("cannot read backbone file " + backbone_file);
        desc = parse_backbone_description(f);
    } else {
        std::istringstream s(backbone_description(c.backbone));
        desc = parse_backbone_description(s);
    }
    const std::string report = geometry_report(desc, parse_heights(heights), RoiTemplate{c.head.roi_template});
    write_text(c.out_dir / "geometry.csv", report);
    out << report;
    return kExitOk;
}

int cmd_sweep(const Globals& g, std::ostream& out)
{
    const RunConfig c = resolve_config(g, true);
    const auto tables = run_sweep(c, *c.seed);
    const std::string csv = sweep_csv(tables);
    write_text(c.out_dir / "sweep.csv", csv);
    out << csv;
    return kExitOk;
}

int cmd_compare(const Globals& g, std::vector<std::string> schemes, std::ostream& out)
{
    const RunConfig c = resolve_config(g, true);
    if (schemes.empty()) schemes = c.compare;
    std::vector<ResultRow> rows;
    for (std::uint64_t s : c.seeds) {
        const std::uint64_t run_seed = sub_seed(*c.seed, s);
        const ExperimentData data = make_data(c.data, run_seed);
        for (const auto& ref : schemes) {
            const SplitScheme scheme = resolve_scheme(ref, c.base_dir);
            const TrainResult r = run_scheme(data, scheme, c.mode, c.backbone, c.head, c.trainer, run_seed);
            ResultRow row{ref, s, {}};
            for (const auto& b : r.final_report->buckets) row.ap[b.name] = b.ap;
            out << ref << " seed " << s << ": " << bucket_line(*r.final_report) << "\n";
            rows.push_back(std::move(row));
        }
    }
    std::vector<std::string> buckets;
    for (const auto& b : c.trainer.protocol.buckets) buckets.push_back(b.name);
    const std::string csv = results_csv(rows, buckets);
    write_text(c.out_dir / "compare_splits.csv", csv);
    out << csv;
    return kExitOk;
}

Dataset load_split(const fs::path& data_dir, const std::string& split, bool required)
{
    const fs::path p = data_dir / (split + ".jsonl");
    if (!fs::exists(p)) {
        if (required) throw std::runtime_error(p.string() + " not found; run gen-data first");
        return {};
    }
    return load_dataset(p);
}

int cmd_train(const Globals& g, const std::string& data, const std::string& specs, std::string name,
              std::ostream& out)
{
    RunConfig c = resolve_config(g, true);
    if (!specs.empty()) {
        try {
            const json j = json::parse(read_text(specs));
            c.backbone = backbone_from_json(j.at("backbone").dump());
            c.head = head_from_json(j.at("head").dump());
        } catch (const std::exception& e) {
            throw ConfigError("--specs " + specs + ": " + e.what());
        }
    }
    if (name.empty()) name = mode_name(c.mode);
    const fs::path data_dir = data.empty() ? c.out_dir / "data" : fs::path(data);
    const Dataset tr = load_split(data_dir, "train", true);
    const Dataset va = load_split(data_dir, "val", false);
    const SplitScheme scheme = resolve_scheme(c.scheme, c.base_dir);
    const EnsembleSpec spec = build_ensemble_spec(scheme, c.backbone, c.head, c.mode);
    TrainerConfig tc = c.trainer;
    tc.divergence_checkpoint = c.out_dir / ("model_" + name + ".last_good.ckpt");

    const fs::path metrics = c.out_dir / ("metrics_" + name + ".jsonl");
    fs::create_directories(c.out_dir);
    std::ofstream mf(metrics);
    const TrainResult r = train(tr, va, spec, tc, *c.seed, [&](const std::string& line) {
        mf << line << "\n";
        mf.flush();
        out << line << "\n";
    });
    const fs::path ckpt = c.out_dir / ("model_" + name + ".ckpt");
    save_checkpoint(ckpt, r.ensemble);
    out << "checkpoint " << ckpt.string() << " (" << count_params(spec).total() << " parameters)\n";
    return kExitOk;
}

int cmd_detect(const Globals& g, const std::string& data, std::string checkpoint, const std::string& split,
               std::string name, std::ostream& out)
{
    const RunConfig c = resolve_config(g, false);
    if (name.empty()) name = mode_name(c.mode);
    if (checkpoint.empty()) checkpoint = (c.out_dir / ("model_" + name + ".ckpt")).string();
    const fs::path data_dir = data.empty() ? c.out_dir / "data" : fs::path(data);
    const Ensemble ens = load_checkpoint(checkpoint);
    const Dataset images = load_split(data_dir, split, true);
    const auto dets = detect_all(images, ens, c.trainer.inference);
    const fs::path p = c.out_dir / ("detections_" + name + ".jsonl");
    save_detections(p, dets);
    out << dets.size() << " detections on " << images.size() << " images -> " << p.string() << "\n";
    return kExitOk;
}

int cmd_eval(const Globals& g, const std::string& data, std::string detections, std::string annotations,
             std::string name, std::ostream& out)
{
    const RunConfig c = resolve_config(g, false);
    if (name.empty()) name = mode_name(c.mode);
    const fs::path data_dir = data.empty() ? c.out_dir / "data" : fs::path(data);
    if (detections.empty()) detections = (c.out_dir / ("detections_" + name + ".jsonl")).string();
    if (annotations.empty()) annotations = (data_dir / "val.jsonl").string();
    const auto dets = load_detections(detections);
    const Dataset ann = load_annotations(annotations);
    const EvalReport r = evaluate(dets, ann, c.trainer.protocol);
    const fs::path dir = c.out_dir / ("eval_" + name);
    save_report(dir, r, c.trainer.protocol);
    for (const auto& w : r.warnings) out << "warning: " << w << "\n";
    out << "AP " << bucket_line(r) << "-> " << (dir / "report.json").string() << "\n";
    return kExitOk;
}

int cmd_compress(const Globals& g, std::optional<double> factor, std::ostream& out)
{
    const RunConfig c = resolve_config(g, false);
    const double f = factor.value_or(c.compress_factor);
    if (!(f > 0 && f <= 1)) throw ConfigError("--factor must be in (0, 1]");
    const SplitScheme scheme = resolve_scheme(c.scheme, c.base_dir);
    const EnsembleSpec ref = build_ensemble_spec(scheme, c.backbone, c.head, c.mode);
    const CompressionResult r = compress(c.backbone, c.head, f, ref);
    const EnsembleSpec small = build_ensemble_spec(scheme, r.backbone, r.head, c.mode);
    json j;
    j["factor"] = f;
    j["backbone"] = json::parse(backbone_to_json(r.backbone));
    j["head"] = json::parse(head_to_json(r.head));
    j["params_before"] = {{"conv", count_params(ref).conv}, {"fc", count_params(ref).fc}};
    j["params_after"] = {{"conv", count_params(small).conv}, {"fc", count_params(small).fc}};
    j["predicted_param_ratio"] = r.predicted_param_ratio;
    j["predicted_conv_ratio"] = r.predicted_conv_ratio;
    const fs::path p = c.out_dir / "compressed.json";
    write_text(p, j.dump(2) + "\n");
    out << "conv ratio " << r.predicted_conv_ratio << ", total ratio " << r.predicted_param_ratio << " -> "
        << p.string() << "\n";
    return kExitOk;
}

int cmd_plot(const Globals& g, const std::vector<std::string>& reports, std::vector<std::string> labels,
             std::ostream& out)
{
    const RunConfig c = resolve_config(g, false);
    if (reports.empty()) throw ConfigError("plot needs at least one report");
    if (!labels.empty() && labels.size() != reports.size())
        throw ConfigError("--labels must name every report");
    std::vector<EvalReport> loaded;
    for (std::size_t i = 0; i < reports.size(); ++i) {
        fs::path p = reports[i];
        if (fs::is_directory(p)) p /= "report.json";
        const EvalReport r = report_from_json(read_text(p));
        if (r.buckets.empty()) throw std::runtime_error("report " + p.string() + " is empty");
        bool any = false;
        for (const auto& b : r.buckets) any = any || !b.pr.empty();
        if (!any) throw std::runtime_error("report " + p.string() + " has no PR points");
        loaded.push_back(r);
        if (labels.size() < reports.size()) labels.push_back(p.parent_path().filename().string());
    }
    const fs::path dir = c.out_dir / "plots";
    std::vector<std::string> written;
    for (const auto& b : loaded.front().buckets) {
        std::vector<NamedCurve> curves;
        for (std::size_t i = 0; i < loaded.size(); ++i) {
            const BucketReport& br = loaded[i].bucket(b.name);
            curves.push_back({labels[i], br.pr, br.ap});
        }
        write_text(dir / ("pr_" + b.name + ".svg"), pr_svg(curves, "PR, " + b.name));
        write_text(dir / ("pr_" + b.name + ".csv"), pr_overlay_csv(curves));
        written.push_back((dir / ("pr_" + b.name + ".svg")).string());
    }
    for (const auto& w : written) out << w << "\n";
    return kExitOk;
}

} // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Multi-scale detection experiments on synthetic scenes"};
    app.fallthrough();
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "JSON run config")->envname("MSDET_CONFIG");
    app.add_option("--seed", g.seed, "Base seed")->envname("MSDET_SEED");
    app.add_option("--out", g.out, "Output directory")->envname("MSDET_OUT");
    app.add_option("--threads", g.threads, "Worker thread cap")->envname("MSDET_THREADS");
    app.add_option("--mode", g.mode, "joint or naive")->envname("MSDET_MODE");

    std::string data, specs, name, checkpoint, split = "val", detections, annotations, backbone_file, heights;
    std::optional<double> factor;
    std::vector<std::string> schemes, reports, labels;

    auto* gen = app.add_subcommand("gen-data", "Generate and save the synthetic dataset");
    auto* analyze = app.add_subcommand("analyze", "Stride and projected-ROI geometry report");
    analyze->add_option("--backbone", backbone_file, "Backbone description file");
    analyze->add_option("--heights", heights, "Comma-separated box heights");
    auto* sweep = app.add_subcommand("sweep", "Per-bucket stride sweep");
    auto* compare = app.add_subcommand("compare-splits", "Per-bucket AP for several split schemes");
    compare->add_option("--schemes", schemes, "Scheme names or files");
    auto* trn = app.add_subcommand("train", "Train a checkpoint");
    trn->add_option("--data", data, "Dataset directory (default <out>/data)");
    trn->add_option("--specs", specs, "Backbone/head override, e.g. compress output");
    trn->add_option("--name", name, "Run name (default: mode)");
    auto* det = app.add_subcommand("detect", "Run a checkpoint over a split");
    det->add_option("--data", data, "Dataset directory (default <out>/data)");
    det->add_option("--checkpoint", checkpoint, "Checkpoint (default <out>/model_<name>.ckpt)");
    det->add_option("--split", split, "Split to run on");
    det->add_option("--name", name, "Run name (default: mode)");
    auto* ev = app.add_subcommand("eval", "Evaluate detections");
    ev->add_option("--data", data, "Dataset directory (default <out>/data)");
    ev->add_option("--detections", detections, "Detections file");
    ev->add_option("--annotations", annotations, "Annotation file");
    ev->add_option("--name", name, "Run name (default: mode)");
    auto* cmp = app.add_subcommand("compress", "Scale every width by a factor");
    cmp->add_option("--factor", factor, "Width factor in (0, 1]");
    auto* plot = app.add_subcommand("plot", "PR curves from eval reports");
    plot->add_option("reports", reports, "report.json files or eval directories");
    plot->add_option("--labels", labels, "Legend labels, one per report");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitConfig;
    }

    try {
        if (*gen) return cmd_gen_data(g, out);
        if (*analyze) return cmd_analyze(g, backbone_file, heights, out);
        if (*sweep) return cmd_sweep(g, out);
        if (*compare) return cmd_compare(g, schemes, out);
        if (*trn) return cmd_train(g, data, specs, name, out);
        if (*det) return cmd_detect(g, data, checkpoint, split, name, out);
        if (*ev) return cmd_eval(g, data, detections, annotations, name, out);
        if (*cmp) return cmd_compress(g, factor, out);
        if (*plot) return cmd_plot(g, reports, labels, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ParseError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DivergenceError& e) {
        err << "training diverged: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitConfig;
}

} // namespace msdet

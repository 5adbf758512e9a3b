#include "msdet/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "msdet/errors.hpp"

namespace msdet {

using json = nlohmann::ordered_json;

RunConfig default_run_config()
{
    RunConfig c;
    c.trainer.epochs = 8;
    c.trainer.sgd = {0.01, 0.9, 1e-4, 10.0, 100, 0, 0.1};
    c.trainer.random_flip = false;
    c.trainer.inference.max_side = 192;
    c.trainer.inference.train_budget = 256;
    c.trainer.inference.test_budget = 150;
    c.trainer.inference.pre_nms_top = 2000;
    return c;
}

namespace {

// Reads an object field by field and rejects keys it was never asked for.
class Fields {
public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object()) throw ConfigError(where("") + "must be an object");
    }

    bool has(const std::string& key)
    {
        seen_.insert(key);
        return j_.contains(key);
    }

    template <class T>
    void read(const std::string& key, T& dst)
    {
        if (!has(key)) return;
        try {
            dst = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError(where(key) + "has the wrong type");
        }
    }

    const json& at(const std::string& key) const { return j_.at(key); }
    std::string where(const std::string& key) const
    {
        const std::string full = key.empty() ? path_ : (path_.empty() ? key : path_ + "." + key);
        return "config field '" + full + "': ";
    }
    std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const
    {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError(where(k) + "unknown key");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void require(bool ok, const std::string& field, const std::string& what)
{
    if (!ok) throw ConfigError("config field '" + field + "': " + what);
}

void read_data(Fields& f, DataConfig& d)
{
    Fields g(f.at("data"), "data");
    SceneSpec& s = d.scene;
    g.read("image_w", s.image_w);
    g.read("image_h", s.image_h);
    g.read("scale_lo", s.scale_lo);
    g.read("scale_hi", s.scale_hi);
    g.read("faces_min", s.faces_min);
    g.read("faces_max", s.faces_max);
    g.read("clutter_density", s.clutter_density);
    g.read("n_train", d.n_train);
    g.read("n_val", d.n_val);
    if (g.has("augment")) {
        Fields a(g.at("augment"), "data.augment");
        a.read("crowded_threshold", d.augment.crowded_threshold);
        a.read("dup_factor", d.augment.dup_factor);
        a.read("hflip", d.augment.hflip);
        a.finish();
    }
    g.finish();
}

void read_batch(Fields& f, const std::string& key, BatchSpec& b)
{
    if (!f.has(key)) return;
    Fields g(f.at(key), f.child(key));
    g.read("size", b.size);
    g.read("positive_fraction", b.positive_fraction);
    g.read("hard_mining", b.hard_mining);
    g.finish();
}

void read_trainer(Fields& f, TrainerConfig& t)
{
    Fields g(f.at("trainer"), "trainer");
    g.read("epochs", t.epochs);
    g.read("lr", t.sgd.lr);
    g.read("momentum", t.sgd.momentum);
    g.read("weight_decay", t.sgd.weight_decay);
    g.read("clip_norm", t.sgd.clip_norm);
    g.read("warmup_steps", t.sgd.warmup_steps);
    g.read("step_size", t.sgd.step_size);
    g.read("gamma", t.sgd.gamma);
    read_batch(g, "rpn_batch", t.rpn_batch);
    read_batch(g, "cls_batch", t.cls_batch);
    g.read("lambda", t.lambda);
    g.read("beta", t.beta);
    g.read("force_best_anchor", t.force_best_anchor);
    g.read("random_flip", t.random_flip);
    g.read("eval_every", t.eval_every);
    g.finish();
}

void read_inference(Fields& f, InferenceConfig& c)
{
    Fields g(f.at("inference"), "inference");
    g.read("max_side", c.max_side);
    g.read("train_budget", c.train_budget);
    g.read("test_budget", c.test_budget);
    g.read("pre_nms_top", c.pre_nms_top);
    g.read("proposal_nms", c.proposal_nms);
    g.read("final_nms", c.final_nms);
    g.read("score_floor", c.score_floor);
    g.finish();
}

void read_eval(Fields& f, EvalProtocol& p)
{
    Fields g(f.at("eval"), "eval");
    g.read("iou_threshold", p.iou_threshold);
    if (g.has("interpolation")) {
        const std::string v = g.at("interpolation").is_string() ? g.at("interpolation").get<std::string>() : "";
        if (v == "all_points")
            p.interpolation = ApInterpolation::all_points;
        else if (v == "eleven_point")
            p.interpolation = ApInterpolation::eleven_point;
        else
            throw ConfigError(g.where("interpolation") + "must be all_points or eleven_point");
    }
    if (g.has("buckets")) {
        p.buckets.clear();
        for (const auto& jb : g.at("buckets")) {
            Fields b(jb, "eval.buckets[]");
            DifficultyBucket db;
            b.read("name", db.name);
            b.read("min_height", db.min_height);
            b.read("max_height", db.max_height);
            b.finish();
            p.buckets.push_back(db);
        }
    }
    g.read("fp_counts", p.fp_counts);
    g.finish();
}

void read_backbone(Fields& f, BackboneSpec& b)
{
    Fields g(f.at("backbone"), "backbone");
    g.read("in_channels", b.in_channels);
    g.read("stem_channels", b.stem_channels);
    g.read("stem_stride", b.stem_stride);
    g.read("pool_downsample", b.pool_downsample);
    if (g.has("stages")) {
        b.stages.clear();
        for (const auto& js : g.at("stages")) {
            Fields s(js, "backbone.stages[]");
            BackboneStage st;
            s.read("channels", st.channels);
            s.read("blocks", st.blocks);
            s.finish();
            b.stages.push_back(st);
        }
    }
    g.finish();
}

void read_head(Fields& f, HeadSpec& h)
{
    Fields g(f.at("head"), "head");
    g.read("rpn_channels", h.rpn_channels);
    g.read("cls_channels", h.cls_channels);
    g.read("fc1", h.fc1);
    g.read("fc2", h.fc2);
    g.read("roi_template", h.roi_template);
    g.finish();
}

void read_sweep(Fields& f, SweepConfig& s)
{
    Fields g(f.at("sweep"), "sweep");
    if (g.has("buckets")) {
        s.buckets.clear();
        for (const auto& jb : g.at("buckets")) {
            if (!jb.is_array() || jb.size() != 2) throw ConfigError(g.where("buckets") + "entries must be [lo, hi]");
            s.buckets.push_back({jb.at(0).get<double>(), jb.at(1).get<double>()});
        }
    }
    g.read("stages", s.stages);
    g.finish();
}

} // namespace

SplitScheme resolve_scheme(const std::string& ref, const std::filesystem::path& base_dir)
{
    const auto cat = desk_schemes();
    if (auto s = find_scheme(cat, ref)) return *s;
    std::filesystem::path p = ref;
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    std::ifstream f(p);
    if (!f) throw ConfigError("config field 'scheme': '" + ref + "' is neither a known scheme nor a readable file");
    std::ostringstream ss;
    ss << f.rdbuf();
    try {
        SplitScheme s = scheme_from_json(ss.str());
        validate_scheme(s);
        return s;
    } catch (const std::exception& e) {
        throw ConfigError("config field 'scheme': " + std::string(e.what()));
    }
}

void validate_run_config(const RunConfig& c)
{
    try {
        validate_scene_spec(c.data.scene);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config field 'data': ") + e.what());
    }
    require(c.data.n_train >= 1, "data.n_train", "must be >= 1");
    require(c.data.augment.dup_factor >= 0, "data.augment.dup_factor", "must be >= 0");
    require(c.threads >= 0, "threads", "must be >= 0");
    require(c.compress_factor > 0 && c.compress_factor <= 1, "compress_factor", "must be in (0, 1]");
    require(!c.seeds.empty(), "seeds", "must not be empty");
    require(!c.sweep.stages.empty(), "sweep.stages", "must not be empty");
    for (int s : c.sweep.stages)
        require(s >= 1 && s < c.backbone.num_stages(), "sweep.stages", "stage " + std::to_string(s) + " out of range");
    for (const auto& b : c.sweep.buckets) require(b.lo > 0 && b.lo < b.hi, "sweep.buckets", "need 0 < lo < hi");
    try {
        (void)backbone_from_json(backbone_to_json(c.backbone));
        (void)head_from_json(head_to_json(c.head));
        validate_trainer_config(c.trainer);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    (void)resolve_scheme(c.scheme, c.base_dir);
    for (const auto& s : c.compare) (void)resolve_scheme(s, c.base_dir);
    const auto sch = resolve_scheme(c.scheme, c.base_dir);
    require(sch.size() <= static_cast<std::size_t>(c.backbone.num_stages() - 1), "scheme",
            "has more ranges than the backbone has stage pairs");
}

RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir)
{
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig c = default_run_config();
    c.base_dir = base_dir;
    Fields f(j, "");
    if (f.has("seed")) {
        std::uint64_t s = 0;
        f.read("seed", s);
        c.seed = s;
    }
    std::string out;
    if (f.has("out")) {
        f.read("out", out);
        c.out_dir = out;
    }
    f.read("threads", c.threads);
    if (f.has("data")) read_data(f, c.data);
    f.read("scheme", c.scheme);
    f.read("compare", c.compare);
    f.read("seeds", c.seeds);
    if (f.has("mode")) {
        std::string m;
        f.read("mode", m);
        try {
            c.mode = parse_mode(m);
        } catch (const std::invalid_argument&) {
            throw ConfigError("config field 'mode': must be joint or naive");
        }
    }
    if (f.has("backbone")) read_backbone(f, c.backbone);
    if (f.has("head")) read_head(f, c.head);
    if (f.has("trainer")) read_trainer(f, c.trainer);
    if (f.has("inference")) read_inference(f, c.trainer.inference);
    if (f.has("eval")) read_eval(f, c.trainer.protocol);
    f.read("compress_factor", c.compress_factor);
    if (f.has("sweep")) read_sweep(f, c.sweep);
    f.finish();
    validate_run_config(c);
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path)
{
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_run_config(ss.str(), path.parent_path());
}

std::string run_config_json(const RunConfig& c)
{
    json j;
    if (c.seed) j["seed"] = *c.seed;
    j["out"] = c.out_dir.string();
    j["threads"] = c.threads;
    const SceneSpec& s = c.data.scene;
    j["data"] = {{"image_w", s.image_w},
                 {"image_h", s.image_h},
                 {"scale_lo", s.scale_lo},
                 {"scale_hi", s.scale_hi},
                 {"faces_min", s.faces_min},
                 {"faces_max", s.faces_max},
                 {"clutter_density", s.clutter_density},
                 {"n_train", c.data.n_train},
                 {"n_val", c.data.n_val},
                 {"augment",
                  {{"crowded_threshold", c.data.augment.crowded_threshold},
                   {"dup_factor", c.data.augment.dup_factor},
                   {"hflip", c.data.augment.hflip}}}};
    j["scheme"] = c.scheme;
    j["compare"] = c.compare;
    j["seeds"] = c.seeds;
    j["mode"] = mode_name(c.mode);
    j["backbone"] = json::parse(backbone_to_json(c.backbone));
    j["head"] = json::parse(head_to_json(c.head));
    const TrainerConfig& t = c.trainer;
    j["trainer"] = {{"epochs", t.epochs},
                    {"lr", t.sgd.lr},
                    {"momentum", t.sgd.momentum},
                    {"weight_decay", t.sgd.weight_decay},
                    {"clip_norm", t.sgd.clip_norm},
                    {"warmup_steps", t.sgd.warmup_steps},
                    {"step_size", t.sgd.step_size},
                    {"gamma", t.sgd.gamma},
                    {"rpn_batch", {{"size", t.rpn_batch.size}, {"positive_fraction", t.rpn_batch.positive_fraction}}},
                    {"cls_batch",
                     {{"size", t.cls_batch.size},
                      {"positive_fraction", t.cls_batch.positive_fraction},
                      {"hard_mining", t.cls_batch.hard_mining}}},
                    {"lambda", t.lambda},
                    {"beta", t.beta},
                    {"force_best_anchor", t.force_best_anchor},
                    {"random_flip", t.random_flip},
                    {"eval_every", t.eval_every}};
    const InferenceConfig& i = t.inference;
    j["inference"] = {{"max_side", i.max_side},         {"train_budget", i.train_budget},
                      {"test_budget", i.test_budget},   {"pre_nms_top", i.pre_nms_top},
                      {"proposal_nms", i.proposal_nms}, {"final_nms", i.final_nms},
                      {"score_floor", i.score_floor}};
    json buckets = json::array();
    for (const auto& b : t.protocol.buckets)
        buckets.push_back({{"name", b.name}, {"min_height", b.min_height}, {"max_height", b.max_height}});
    j["eval"] = {{"iou_threshold", t.protocol.iou_threshold},
                 {"interpolation",
                  t.protocol.interpolation == ApInterpolation::all_points ? "all_points" : "eleven_point"},
                 {"buckets", buckets},
                 {"fp_counts", t.protocol.fp_counts}};
    j["compress_factor"] = c.compress_factor;
    json sb = json::array();
    for (const auto& b : c.sweep.buckets) sb.push_back({b.lo, b.hi});
    j["sweep"] = {{"buckets", sb}, {"stages", c.sweep.stages}};
    return j.dump(2);
}

} // namespace msdet

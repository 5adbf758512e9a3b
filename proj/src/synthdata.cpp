#include "msdet/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "msdet/errors.hpp"
#include "msdet/rng.hpp"

namespace msdet {

void validate_scene_spec(const SceneSpec& spec)
{
    auto fail = [](const std::string& field, const std::string& why) {
        throw std::invalid_argument("scene spec field '" + field + "': " + why);
    };
    if (spec.image_w < 1) fail("image_w", "must be >= 1");
    if (spec.image_h < 1) fail("image_h", "must be >= 1");
    if (!(spec.scale_lo > 0)) fail("scale_lo", "must be > 0");
    if (!(spec.scale_hi >= spec.scale_lo)) fail("scale_hi", "must be >= scale_lo");
    if (spec.scale_hi > std::min(spec.image_w, spec.image_h)) fail("scale_hi", "exceeds the shorter image side");
    if (spec.faces_min < 0) fail("faces_min", "must be >= 0");
    if (spec.faces_max < spec.faces_min) fail("faces_max", "must be >= faces_min");
    if (!(spec.clutter_density >= 0 && spec.clutter_density <= 1)) fail("clutter_density", "must lie in [0, 1]");
}

namespace {

// Float canvas; quantized once at the end.
struct Canvas {
    int w, h;
    std::vector<double> v;
    Canvas(int w_, int h_) : w(w_), h(h_), v(static_cast<std::size_t>(w_) * h_, 0.0) {}
    double& at(int x, int y) { return v[static_cast<std::size_t>(y) * w + x]; }
};

template <class Inside>
void fill_region(Canvas& c, const Box& bound, double level, Inside inside)
{
    const int x0 = std::max(0, static_cast<int>(std::floor(bound.x)));
    const int y0 = std::max(0, static_cast<int>(std::floor(bound.y)));
    const int x1 = std::min(c.w, static_cast<int>(std::ceil(bound.x2())));
    const int y1 = std::min(c.h, static_cast<int>(std::ceil(bound.y2())));
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
            if (inside(x + 0.5, y + 0.5)) c.at(x, y) = level;
}

// Nearest-neighbour ellipse: a pixel is inside when its centre is. Tiny
// ellipses that would cover no pixel centre still paint the centre pixel.
void fill_ellipse(Canvas& c, double cx, double cy, double rx, double ry, double level)
{
    const Box bound{cx - rx, cy - ry, 2 * rx, 2 * ry};
    bool any = false;
    fill_region(c, bound, level, [&](double px, double py) {
        const double dx = (px - cx) / rx, dy = (py - cy) / ry;
        const bool in = dx * dx + dy * dy <= 1.0;
        any = any || in;
        return in;
    });
    if (!any) {
        const int x = static_cast<int>(std::floor(cx)), y = static_cast<int>(std::floor(cy));
        if (x >= 0 && y >= 0 && x < c.w && y < c.h) c.at(x, y) = level;
    }
}

void ring_ellipse(Canvas& c, double cx, double cy, double rx, double ry, double thick, double level)
{
    const Box bound{cx - rx, cy - ry, 2 * rx, 2 * ry};
    const double irx = std::max(0.1, rx - thick), iry = std::max(0.1, ry - thick);
    fill_region(c, bound, level, [&](double px, double py) {
        const double dx = (px - cx) / rx, dy = (py - cy) / ry;
        const double ix = (px - cx) / irx, iy = (py - cy) / iry;
        return dx * dx + dy * dy <= 1.0 && ix * ix + iy * iy > 1.0;
    });
}

void fill_rect(Canvas& c, const Box& b, double level)
{
    fill_region(c, b, level, [](double, double) { return true; });
}

void draw_glyph_canvas(Canvas& c, const Box& b, double face, double feature)
{
    fill_ellipse(c, b.cx(), b.cy(), 0.5 * b.w, 0.5 * b.h, face);
    const double er_x = std::max(0.35, 0.11 * b.w), er_y = std::max(0.35, 0.09 * b.h);
    fill_ellipse(c, b.x + 0.32 * b.w, b.y + 0.40 * b.h, er_x, er_y, feature);
    fill_ellipse(c, b.x + 0.68 * b.w, b.y + 0.40 * b.h, er_x, er_y, feature);
    const double bar_h = std::max(0.5, 0.05 * b.h);
    fill_rect(c, {b.x + 0.28 * b.w, b.y + 0.72 * b.h - bar_h, 0.44 * b.w, 2 * bar_h}, feature);
}

double clamp_level(double v) { return std::clamp(v, 0.0, 255.0); }

// A level that contrasts with `base` by `amount`, flipping direction when
// the preferred one would saturate.
double contrast_level(double base, double amount, bool brighter)
{
    double v = brighter ? base + amount : base - amount;
    if (v > 245 || v < 10) v = brighter ? base - amount : base + amount;
    return clamp_level(v);
}

GrayImage quantize(const Canvas& c)
{
    GrayImage img(c.w, c.h);
    for (std::size_t i = 0; i < c.v.size(); ++i)
        img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(c.v[i], 0.0, 255.0)));
    return img;
}

} // namespace

void draw_glyph(GrayImage& img, const Box& b, double face_level, double feature_level)
{
    Canvas c(img.width, img.height);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) c.v[i] = img.pixels[i];
    draw_glyph_canvas(c, b, face_level, feature_level);
    img = quantize(c);
}

AnnotatedImage generate_image(const SceneSpec& spec, std::size_t index)
{
    Rng rng(sub_seed(spec.seed, index));
    const int W = spec.image_w, H = spec.image_h;
    Canvas c(W, H);

    // background: base level plus a linear gradient
    const double base = rng.uniform(70, 180);
    const double gx = rng.uniform(-30, 30), gy = rng.uniform(-30, 30);
    auto bg_at = [&](double x, double y) { return base + gx * (x / W - 0.5) + gy * (y / H - 0.5); };
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) c.at(x, y) = bg_at(x + 0.5, y + 0.5);

    // targets: heights first, then placement largest-first; a layout that
    // cannot be completed is redrawn from scratch
    const int n_faces = rng.between(spec.faces_min, spec.faces_max);
    const double log_lo = std::log(spec.scale_lo), log_hi = std::log(spec.scale_hi);
    std::vector<Box> faces;
    std::vector<double> heights(static_cast<std::size_t>(n_faces)), aspects(heights.size());
    std::vector<std::size_t> order(heights.size());
    auto draw_sizes = [&] {
        for (auto& h : heights) h = std::clamp(std::exp(rng.uniform(log_lo, log_hi)), spec.scale_lo, spec.scale_hi);
        for (auto& a : aspects) a = rng.uniform(0.8, 1.0);
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return heights[a] > heights[b]; });
    };

    constexpr int kPlacementTries = 1000;
    constexpr int kLayoutAttempts = 10;
    auto clear_of = [](const std::vector<Box>& placed, const Box& b) {
        for (const auto& f : placed) {
            // keep a one-pixel gap between targets
            const Box grown{f.x - 1, f.y - 1, f.w + 2, f.h + 2};
            if (intersection_area(grown, b) > 0) return false;
        }
        return true;
    };
    // Random positions first; a layout they cannot complete is packed
    // tightly (free spot closest to the top-left corner, with a random
    // flip of the corner) before the sizes are redrawn.
    auto lay_out = [&](bool packed) {
        faces.clear();
        const bool flip_x = rng.coin(), flip_y = rng.coin();
        for (std::size_t oi : order) {
            const double h = heights[oi];
            const double w = h * aspects[oi];
            bool placed = false;
            for (int t = 0; t < kPlacementTries && !placed && !packed; ++t) {
                const Box b{rng.uniform(0, W - w), rng.uniform(0, H - h), w, h};
                if (clear_of(faces, b)) {
                    faces.push_back(b);
                    placed = true;
                }
            }
            if (placed) continue;
            std::vector<Box> free;
            for (int y = 0; y + h <= H; ++y)
                for (int x = 0; x + w <= W; ++x) {
                    const Box b{flip_x ? W - w - x : double(x), flip_y ? H - h - y : double(y), w, h};
                    if (clear_of(faces, b)) free.push_back(b);
                }
            if (free.empty()) return false;
            faces.push_back(packed ? free.front() : free[rng.below(free.size())]);
        }
        return true;
    };
    bool laid_out = false;
    for (int attempt = 0; attempt < kLayoutAttempts && !laid_out; ++attempt) {
        draw_sizes();
        laid_out = lay_out(false) || lay_out(true);
    }
    if (!laid_out) throw GenerationFailure(index, "could not place " + std::to_string(n_faces) + " targets");

    // clutter: drawn under the targets, never overlapping one with IoU > 0.2
    const int n_clutter = static_cast<int>(std::lround(spec.clutter_density * 30));
    const double min_side = std::min(W, H);
    for (int k = 0; k < n_clutter; ++k) {
        const int kind = static_cast<int>(rng.below(5));
        const double s = std::exp(rng.uniform(std::log(3.0), std::log(0.6 * min_side)));
        const double aspect = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
        double bw = std::min(s * aspect, W - 1.0), bh = std::min(s, H - 1.0);
        if (kind == 2) { // bar: long and thin
            if (rng.coin()) bh = std::max(1.0, s * 0.08);
            else bw = std::max(1.0, s * 0.08);
        }
        Box cb;
        bool ok = false;
        for (int t = 0; t < 50 && !ok; ++t) {
            cb = {rng.uniform(0, W - bw), rng.uniform(0, H - bh), bw, bh};
            ok = std::all_of(faces.begin(), faces.end(), [&](const Box& f) { return iou(f, cb) <= 0.2; });
        }
        const double amount = rng.uniform(25, 80);
        const bool brighter = rng.coin();
        const double thick = rng.uniform(1.0, 3.0);
        const double feat_amount = rng.uniform(40, 70);
        if (!ok) continue;
        const double lvl = contrast_level(bg_at(cb.cx(), cb.cy()), amount, brighter);
        switch (kind) {
        case 0:
            fill_ellipse(c, cb.cx(), cb.cy(), 0.5 * cb.w, 0.5 * cb.h, lvl);
            break;
        case 1:
            ring_ellipse(c, cb.cx(), cb.cy(), 0.5 * cb.w, 0.5 * cb.h, thick, lvl);
            break;
        case 2:
        case 3:
            fill_rect(c, cb, lvl);
            break;
        default: { // partial glyph: ellipse with a single eye and no mouth
            fill_ellipse(c, cb.cx(), cb.cy(), 0.5 * cb.w, 0.5 * cb.h, lvl);
            const double feat = contrast_level(lvl, feat_amount, !brighter);
            fill_ellipse(c, cb.x + 0.32 * cb.w, cb.y + 0.40 * cb.h, std::max(0.35, 0.11 * cb.w),
                         std::max(0.35, 0.09 * cb.h), feat);
            break;
        }
        }
    }

    for (const auto& f : faces) {
        const double amount = rng.uniform(35, 80);
        const bool brighter = rng.coin();
        const double face = contrast_level(bg_at(f.cx(), f.cy()), amount, brighter);
        const double feature = contrast_level(face, rng.uniform(40, 70), face < bg_at(f.cx(), f.cy()));
        draw_glyph_canvas(c, f, face, feature);
    }

    const double sigma = rng.uniform(3, 8);
    for (auto& v : c.v) v += sigma * rng.normal();

    AnnotatedImage out;
    out.image_id = spec.id_prefix + std::to_string(index);
    out.image = quantize(c);
    // report targets in generation (height-sampling) order
    std::vector<Box> ordered(faces.size());
    for (std::size_t i = 0; i < order.size(); ++i) ordered[order[i]] = faces[i];
    out.boxes = std::move(ordered);
    return out;
}

Dataset generate(const SceneSpec& spec, std::size_t n_images)
{
    validate_scene_spec(spec);
    if (n_images < 1) throw std::invalid_argument("generate: n_images must be >= 1");
    Dataset out(n_images);
    std::exception_ptr err;
    std::size_t err_index = n_images;
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < n_images; ++i) {
        try {
            out[i] = generate_image(spec, i);
        } catch (...) {
#pragma omp critical(msdet_generate_error)
            {
                // report the lowest failing index regardless of scheduling
                if (i < err_index) {
                    err_index = i;
                    err = std::current_exception();
                }
            }
        }
    }
    if (err) std::rethrow_exception(err);
    return out;
}

AnnotatedImage hflip(const AnnotatedImage& img)
{
    AnnotatedImage out = img;
    out.image_id = img.image_id + "_flip";
    const int W = img.image.width;
    for (int y = 0; y < img.image.height; ++y)
        for (int x = 0; x < W; ++x) out.image.at(x, y) = img.image.at(W - 1 - x, y);
    for (auto& b : out.boxes) b.x = W - b.x - b.w;
    return out;
}

Dataset augment(const Dataset& data, const AugmentSpec& spec)
{
    if (spec.dup_factor < 0) throw std::invalid_argument("augment: dup_factor must be >= 0");
    Dataset out;
    for (const auto& img : data) {
        out.push_back(img);
        if (static_cast<int>(img.boxes.size()) > spec.crowded_threshold) {
            for (int k = 1; k <= spec.dup_factor; ++k) {
                out.push_back(img);
                out.back().image_id = img.image_id + "_dup" + std::to_string(k);
            }
        }
    }
    if (spec.hflip) {
        const std::size_t n = out.size();
        out.reserve(2 * n);
        for (std::size_t i = 0; i < n; ++i) out.push_back(hflip(out[i]));
    }
    return out;
}

AnnotatedImage resize_longest(const AnnotatedImage& img, int cap)
{
    if (cap <= 0) throw std::invalid_argument("resize_longest: cap must be positive");
    const int W = img.image.width, H = img.image.height;
    const int longest = std::max(W, H);
    if (longest <= cap) return img;

    const double s = static_cast<double>(cap) / longest;
    const int nw = W >= H ? cap : std::max(1, static_cast<int>(std::lround(W * s)));
    const int nh = H > W ? cap : std::max(1, static_cast<int>(std::lround(H * s)));
    AnnotatedImage out;
    out.image_id = img.image_id;
    out.image = GrayImage(nw, nh);
    const double sx = static_cast<double>(W) / nw, sy = static_cast<double>(H) / nh;
    for (int y = 0; y < nh; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, H - 1.0);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, H - 1);
        const double wy = fy - y0;
        for (int x = 0; x < nw; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, W - 1.0);
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, W - 1);
            const double wx = fx - x0;
            const double v = (1 - wy) * ((1 - wx) * img.image.at(x0, y0) + wx * img.image.at(x1, y0)) +
                             wy * ((1 - wx) * img.image.at(x0, y1) + wx * img.image.at(x1, y1));
            out.image.at(x, y) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
        }
    }
    for (const auto& b : img.boxes) {
        Box nb = clip_box({b.x * s, b.y * s, b.w * s, b.h * s}, nw, nh);
        if (nb.valid()) out.boxes.push_back(nb);
    }
    return out;
}

std::string encode_pgm(const GrayImage& img)
{
    std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
    return out;
}

void write_pgm(const std::filesystem::path& path, const GrayImage& img)
{
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    const std::string bytes = encode_pgm(img);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

GrayImage read_pgm(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    if (magic != "P5" || w < 1 || h < 1 || maxval != 255) throw std::runtime_error("not an 8-bit P5 file: " + path.string());
    f.get(); // single whitespace before the raster
    GrayImage img(w, h);
    f.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (f.gcount() != static_cast<std::streamsize>(img.pixels.size()))
        throw std::runtime_error("truncated raster in " + path.string());
    return img;
}

std::string annotation_line(const AnnotatedImage& img, const std::string& file)
{
    nlohmann::json j;
    j["image_id"] = img.image_id;
    j["file"] = file;
    j["width"] = img.image.width;
    j["height"] = img.image.height;
    j["boxes"] = nlohmann::json::array();
    for (const auto& b : img.boxes) j["boxes"].push_back({b.x, b.y, b.w, b.h});
    return j.dump();
}

void save_dataset(const std::filesystem::path& dir, const std::string& split, const Dataset& data)
{
    std::filesystem::create_directories(dir / split);
    std::ofstream ann(dir / (split + ".jsonl"), std::ios::binary);
    if (!ann) throw std::runtime_error("cannot write annotations under " + dir.string());
    for (const auto& img : data) {
        const std::string file = split + "/" + img.image_id + ".pgm";
        write_pgm(dir / file, img.image);
        ann << annotation_line(img, file) << '\n';
    }
}

namespace {

Dataset load_impl(const std::filesystem::path& annotations, bool with_pixels)
{
    std::ifstream f(annotations);
    if (!f) throw std::runtime_error("cannot read " + annotations.string());
    Dataset out;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            AnnotatedImage img;
            img.image_id = j.at("image_id").get<std::string>();
            const int w = j.at("width").get<int>(), h = j.at("height").get<int>();
            for (const auto& b : j.at("boxes"))
                img.boxes.push_back({b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                                     b.at(3).get<double>()});
            if (with_pixels) {
                img.image = read_pgm(annotations.parent_path() / j.at("file").get<std::string>());
                if (img.image.width != w || img.image.height != h)
                    throw std::runtime_error("size mismatch for " + img.image_id);
            } else {
                img.image.width = w;
                img.image.height = h;
            }
            out.push_back(std::move(img));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(line_no, annotations.string() + ": " + e.what());
        }
    }
    return out;
}

} // namespace

Dataset load_dataset(const std::filesystem::path& annotations) { return load_impl(annotations, true); }
Dataset load_annotations(const std::filesystem::path& annotations) { return load_impl(annotations, false); }

} // namespace msdet

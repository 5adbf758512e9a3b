#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "msdet/box.hpp"

namespace msdet {

/// Single-channel 8-bit image, row-major.
struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;

    GrayImage() = default;
    GrayImage(int w, int h, std::uint8_t fill = 0)
        : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

    std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
    friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

struct AnnotatedImage {
    std::string image_id;
    GrayImage image;
    std::vector<Box> boxes;
    friend bool operator==(const AnnotatedImage&, const AnnotatedImage&) = default;
};

using Dataset = std::vector<AnnotatedImage>;

struct SceneSpec {
    int image_w = 192;
    int image_h = 192;
    double scale_lo = 6;
    double scale_hi = 96;
    int faces_min = 1;
    int faces_max = 6;
    double clutter_density = 0.5;
    std::uint64_t seed = 1;
    std::string id_prefix = "img";
};

/// Throws std::invalid_argument naming the offending field.
void validate_scene_spec(const SceneSpec& spec);

/// Deterministic in (spec, n_images); each image draws from its own
/// sub-seeded stream so generation order does not matter.
Dataset generate(const SceneSpec& spec, std::size_t n_images);

/// One image of the stream, exposed for parallel generation and tests.
AnnotatedImage generate_image(const SceneSpec& spec, std::size_t index);

/// Draws a target glyph into `img` at box `b` (exposed for constructed scenes).
void draw_glyph(GrayImage& img, const Box& b, double face_level, double feature_level);

struct AugmentSpec {
    int crowded_threshold = 25;
    int dup_factor = 5;
    bool hflip = true;
};

Dataset augment(const Dataset& data, const AugmentSpec& spec);

AnnotatedImage hflip(const AnnotatedImage& img);

/// Bilinear downscale so the longer side is at most `cap`.
AnnotatedImage resize_longest(const AnnotatedImage& img, int cap);

// Binary P5 graymap: "P5\n<w> <h>\n255\n" followed by w*h raw bytes.
void write_pgm(const std::filesystem::path& path, const GrayImage& img);
GrayImage read_pgm(const std::filesystem::path& path);
std::string encode_pgm(const GrayImage& img);

/// One JSON object per line, keys in lexicographic order:
/// {"boxes":[[x,y,w,h],...],"file":...,"height":...,"image_id":...,"width":...}
std::string annotation_line(const AnnotatedImage& img, const std::string& file);

/// Writes <dir>/<split>/<image_id>.pgm and <dir>/<split>.jsonl.
void save_dataset(const std::filesystem::path& dir, const std::string& split, const Dataset& data);

/// Reads a .jsonl annotation file and the graymaps it references (paths
/// relative to the annotation file's directory).
Dataset load_dataset(const std::filesystem::path& annotations);

/// Annotations only; images are left empty.
Dataset load_annotations(const std::filesystem::path& annotations);

} // namespace msdet

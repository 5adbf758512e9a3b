#pragma once

#include <istream>
#include <span>
#include <string>
#include <vector>

#include "msdet/box.hpp"

namespace msdet {

/// One backbone stage as seen by the geometry analysis.
struct StageSpec {
    std::string name;
    int cumulative_stride = 1; ///< input pixels per feature cell
    int receptive_field = 1;   ///< input pixels seen by one activation
    int channels = 0;

    friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

/// Square ROI pooling grid.
struct RoiTemplate {
    int size_cells = 5;
};

/// Half-open rectangle of feature cells: columns [x0, x1), rows [y0, y1).
struct CellRect {
    int x0 = 0;
    int y0 = 0;
    int x1 = 0;
    int y1 = 0;

    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
    long area() const { return static_cast<long>(width()) * height(); }
    friend bool operator==(const CellRect&, const CellRect&) = default;
};

struct Ambiguity {
    bool identical_rect = false;
    double jaccard = 0.0; ///< Jaccard index of the two cell rects
};

struct LayerGeometry {
    int kernel = 3;
    int stride = 1;
    int dilation = 1;
};

/// Box height measured in feature cells at the given stride.
double projected_extent(const Box& box, double stride);

/// Cells touched by the box: floor on the low edge, ceil on the high edge.
CellRect roi_cell_rect(const Box& box, double stride);

Ambiguity ambiguity(const Box& a, const Box& b, double stride);

/// (height / stride) / template size; 1.0 means the projected ROI fills the
/// pooling template exactly.
double scale_match(double box_height, double stride, const RoiTemplate& tmpl);

/// Receptive field of the last layer of a chain, in input pixels.
int receptive_field_chain(std::span<const LayerGeometry> layers);

/// Receptive field after each layer of the chain.
std::vector<int> receptive_field_profile(std::span<const LayerGeometry> layers);

/// Throws std::invalid_argument if strides decrease or RF < stride anywhere.
void validate_stages(std::span<const StageSpec> stages);

/// Parsed backbone description: declared stages plus the layers that make
/// up each one, in network order.
struct BackboneDescription {
    std::vector<StageSpec> stages;
    std::vector<std::vector<LayerGeometry>> stage_layers;
};

// Line format ('#' starts a comment):
//   stage <name> channels=<n>
//   layer <stage-name> kernel=<k> stride=<s> [dilation=<d>]
// Layers must name a stage declared earlier. Stride and receptive field of
// each stage are derived from the layer chain up to its last layer.
BackboneDescription parse_backbone_description(std::istream& in);

/// CSV geometry report: one row per stage, then projected extents and
/// collision examples for every requested box height.
std::string geometry_report(const BackboneDescription& desc, std::span<const double> heights,
                            const RoiTemplate& tmpl);

} // namespace msdet

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msdet/geometry.hpp"

namespace msdet {

/// Contiguous band of object heights, in pixels.
struct ScaleRange {
    double lo = 0;
    double hi = 0;

    double width() const { return hi - lo; }
    friend bool operator==(const ScaleRange&, const ScaleRange&) = default;
};

/// Ordered cover of a target range by contiguous sub-ranges. Ownership of
/// boundaries: lower-inclusive, upper-exclusive, last range upper-inclusive.
struct SplitScheme {
    std::string name;
    std::vector<ScaleRange> ranges;

    ScaleRange target() const { return {ranges.front().lo, ranges.back().hi}; }
    std::size_t size() const { return ranges.size(); }
    friend bool operator==(const SplitScheme&, const SplitScheme&) = default;
};

/// Stage pair feeding one range's detector: `previous` has half the stride
/// of `current`, and both are pooled into a hypercolumn.
struct StagePair {
    ScaleRange range;
    std::size_t previous_index = 0;
    std::size_t current_index = 0;
    StageSpec previous;
    StageSpec current;
};

struct StageAssignment {
    std::vector<StagePair> pairs;
    RoiTemplate roi_template;
};

/// Throws std::invalid_argument unless ranges are non-empty, positive,
/// sorted and share boundaries.
void validate_scheme(const SplitScheme& scheme);

/// The seven schemes over [10, 1300] with their published boundaries.
std::vector<SplitScheme> named_schemes();

/// The same seven schemes transposed to the desk-scale target [6, 96]
/// used by the synthetic experiments.
std::vector<SplitScheme> desk_schemes();

/// Looks a scheme up by display name ("Three splits") or slug ("three",
/// "three-even") in the given catalogue.
std::optional<SplitScheme> find_scheme(std::span<const SplitScheme> catalogue, const std::string& key);

/// Slug for a display name, e.g. "Three evenly splits" -> "three-even".
std::string scheme_slug(const std::string& name);

SplitScheme even_split(const ScaleRange& target, int k);
SplitScheme boundary_split(const ScaleRange& target, std::span<const double> interior);

/// Binds the k ranges, in order, to the k deepest stage pairs.
StageAssignment assign_stages(const SplitScheme& scheme, std::span<const StageSpec> stages,
                              const RoiTemplate& tmpl);

/// Index of the range owning `height`, or nullopt outside the target range.
std::optional<std::size_t> route_range(double height, const SplitScheme& scheme);

std::string scheme_to_json(const SplitScheme& scheme);
SplitScheme scheme_from_json(const std::string& text);

} // namespace msdet

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "msdet/evaluator.hpp"

namespace msdet {

struct NamedCurve {
    std::string label;
    PrCurve curve;
    double ap = 0;
};

/// Precision (y) against recall (x), one polyline per curve, legend with
/// label and AP.
std::string pr_svg(const std::vector<NamedCurve>& curves, const std::string& title);

/// label,threshold,precision,recall rows for every curve.
std::string pr_overlay_csv(const std::vector<NamedCurve>& curves);

} // namespace msdet

#include <algorithm>

#include "msdet/kernels.hpp"

namespace msdet {

void roi_bin_range(int n, int bins, int i, int& start, int& end)
{
    start = (i * n) / bins;
    end = ((i + 1) * n + bins - 1) / bins;
    if (end <= start) end = start + 1;
}

CellRect clamp_rect(CellRect r, int width, int height)
{
    r.x0 = std::clamp(r.x0, 0, width - 1);
    r.y0 = std::clamp(r.y0, 0, height - 1);
    r.x1 = std::clamp(r.x1, r.x0 + 1, width);
    r.y1 = std::clamp(r.y1, r.y0 + 1, height);
    return r;
}

} // namespace msdet

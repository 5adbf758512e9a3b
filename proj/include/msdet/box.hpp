#pragma once

#include <algorithm>
#include <ostream>

namespace msdet {

// Axis-aligned box in image pixels, (x, y) is the top-left corner.
struct Box {
    double x = 0;
    double y = 0;
    double w = 0;
    double h = 0;

    double x2() const { return x + w; }
    double y2() const { return y + h; }
    double cx() const { return x + 0.5 * w; }
    double cy() const { return y + 0.5 * h; }
    double area() const { return w * h; }
    bool valid() const { return w > 0 && h > 0; }

    friend bool operator==(const Box&, const Box&) = default;
};

inline std::ostream& operator<<(std::ostream& os, const Box& b)
{
    return os << "Box(" << b.x << ", " << b.y << ", " << b.w << ", " << b.h << ")";
}

inline double intersection_area(const Box& a, const Box& b)
{
    const double iw = std::min(a.x2(), b.x2()) - std::max(a.x, b.x);
    const double ih = std::min(a.y2(), b.y2()) - std::max(a.y, b.y);
    if (iw <= 0 || ih <= 0) return 0.0;
    return iw * ih;
}

// Intersection over union. Returns 0 when either box has no area.
inline double iou(const Box& a, const Box& b)
{
    const double inter = intersection_area(a, b);
    if (inter <= 0) return 0.0;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? std::min(1.0, inter / uni) : 0.0;
}

inline Box clip_box(const Box& b, double width, double height)
{
    const double x1 = std::clamp(b.x, 0.0, width);
    const double y1 = std::clamp(b.y, 0.0, height);
    const double x2 = std::clamp(b.x2(), 0.0, width);
    const double y2 = std::clamp(b.y2(), 0.0, height);
    return {x1, y1, x2 - x1, y2 - y1};
}

} // namespace msdet

#include "msdet/plot.hpp"

#include <cstdio>
#include <sstream>

namespace msdet {

namespace {

constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string fmt(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string escape(const std::string& s)
{
    std::string out;
    for (char c : s) {
        switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

} // namespace

std::string pr_svg(const std::vector<NamedCurve>& curves, const std::string& title)
{
    const double W = 480, H = 360, L = 60, R = 20, T = 40, B = 50;
    const double pw = W - L - R, ph = H - T - B;
    auto X = [&](double r) { return L + r * pw; };
    auto Y = [&](double p) { return T + (1.0 - p) * ph; };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 "
       << W << " " << H << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
       << escape(title) << "</text>\n";
    for (int k = 0; k <= 10; k += 2) {
        const double v = k / 10.0;
        os << "<line x1=\"" << fmt(X(v)) << "\" y1=\"" << fmt(Y(0)) << "\" x2=\"" << fmt(X(v)) << "\" y2=\"" << fmt(Y(1))
           << "\" stroke=\"#eee\"/>\n";
        os << "<line x1=\"" << fmt(X(0)) << "\" y1=\"" << fmt(Y(v)) << "\" x2=\"" << fmt(X(1)) << "\" y2=\"" << fmt(Y(v))
           << "\" stroke=\"#eee\"/>\n";
        os << "<text x=\"" << fmt(X(v)) << "\" y=\"" << fmt(Y(0) + 16)
           << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(v) << "</text>\n";
        os << "<text x=\"" << fmt(X(0) - 6) << "\" y=\"" << fmt(Y(v) + 4)
           << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(v) << "</text>\n";
    }
    os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << pw << "\" height=\"" << ph
       << "\" fill=\"none\" stroke=\"black\"/>\n";
    os << "<text x=\"" << fmt(X(0.5)) << "\" y=\"" << H - 12
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">recall</text>\n";
    os << "<text x=\"16\" y=\"" << fmt(Y(0.5))
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 "
       << fmt(Y(0.5)) << ")\">precision</text>\n";

    for (std::size_t i = 0; i < curves.size(); ++i) {
        const char* color = kColors[i % (sizeof kColors / sizeof kColors[0])];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& p : curves[i].curve) os << fmt(X(p.recall)) << "," << fmt(Y(p.precision)) << " ";
        os << "\"/>\n";
        const double ly = T + 16 + 16 * static_cast<double>(i);
        os << "<line x1=\"" << fmt(X(0.55)) << "\" y1=\"" << fmt(ly) << "\" x2=\"" << fmt(X(0.62)) << "\" y2=\""
           << fmt(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << fmt(X(0.64)) << "\" y=\"" << fmt(ly + 4)
           << "\" font-family=\"sans-serif\" font-size=\"11\">" << escape(curves[i].label) << " (AP "
           << fmt(100 * curves[i].ap) << ")</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

std::string pr_overlay_csv(const std::vector<NamedCurve>& curves)
{
    std::ostringstream os;
    os.precision(17);
    os << "label,threshold,precision,recall\n";
    for (const auto& c : curves)
        for (const auto& p : c.curve) os << c.label << "," << p.threshold << "," << p.precision << "," << p.recall << "\n";
    return os.str();
}

} // namespace msdet

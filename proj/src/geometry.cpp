#include "msdet/geometry.hpp"

#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

#include "msdet/errors.hpp"

namespace msdet {

namespace {

void require_stride(double stride)
{
    if (!(stride > 0)) throw std::invalid_argument("stride must be positive");
}

} // namespace

double projected_extent(const Box& box, double stride)
{
    require_stride(stride);
    return box.h / stride;
}

CellRect roi_cell_rect(const Box& box, double stride)
{
    require_stride(stride);
    CellRect r;
    r.x0 = static_cast<int>(std::floor(box.x / stride));
    r.y0 = static_cast<int>(std::floor(box.y / stride));
    r.x1 = static_cast<int>(std::ceil(box.x2() / stride));
    r.y1 = static_cast<int>(std::ceil(box.y2() / stride));
    // zero-width boxes on a cell boundary still own one cell
    if (r.x1 <= r.x0) r.x1 = r.x0 + 1;
    if (r.y1 <= r.y0) r.y1 = r.y0 + 1;
    return r;
}

Ambiguity ambiguity(const Box& a, const Box& b, double stride)
{
    const CellRect ra = roi_cell_rect(a, stride);
    const CellRect rb = roi_cell_rect(b, stride);
    Ambiguity out;
    out.identical_rect = ra == rb;
    const long iw = std::max(0, std::min(ra.x1, rb.x1) - std::max(ra.x0, rb.x0));
    const long ih = std::max(0, std::min(ra.y1, rb.y1) - std::max(ra.y0, rb.y0));
    const long inter = iw * ih;
    out.jaccard = static_cast<double>(inter) / static_cast<double>(ra.area() + rb.area() - inter);
    return out;
}

double scale_match(double box_height, double stride, const RoiTemplate& tmpl)
{
    if (!(box_height > 0) || !(stride > 0) || tmpl.size_cells < 1)
        throw std::invalid_argument("scale_match: arguments must be positive");
    return (box_height / stride) / tmpl.size_cells;
}

std::vector<int> receptive_field_profile(std::span<const LayerGeometry> layers)
{
    if (layers.empty()) throw std::invalid_argument("receptive_field_chain: empty layer chain");
    std::vector<int> out;
    out.reserve(layers.size());
    long rf = 1;
    long jump = 1;
    for (const auto& l : layers) {
        if (l.kernel < 1 || l.stride < 1 || l.dilation < 1)
            throw std::invalid_argument("receptive_field_chain: kernel, stride and dilation must be >= 1");
        rf += static_cast<long>(l.kernel - 1) * l.dilation * jump;
        jump *= l.stride;
        out.push_back(static_cast<int>(rf));
    }
    return out;
}

int receptive_field_chain(std::span<const LayerGeometry> layers)
{
    return receptive_field_profile(layers).back();
}

void validate_stages(std::span<const StageSpec> stages)
{
    for (std::size_t i = 0; i < stages.size(); ++i) {
        const auto& s = stages[i];
        if (s.cumulative_stride < 1) throw std::invalid_argument("stage " + s.name + ": stride must be positive");
        if (s.receptive_field < s.cumulative_stride)
            throw std::invalid_argument("stage " + s.name + ": receptive field smaller than stride");
        if (i > 0 && s.cumulative_stride < stages[i - 1].cumulative_stride)
            throw std::invalid_argument("stage " + s.name + ": stride decreases along the ladder");
    }
}


namespace {

int parse_int_field(const std::string& tok, const std::string& key, int line_no)
{
    const std::string prefix = key + "=";
    if (tok.rfind(prefix, 0) != 0) throw ParseError(line_no, "expected " + prefix + "<int>, got '" + tok + "'");
    try {
        std::size_t pos = 0;
        const int v = std::stoi(tok.substr(prefix.size()), &pos);
        if (pos != tok.size() - prefix.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::logic_error&) {
        throw ParseError(line_no, "bad integer in '" + tok + "'");
    }
}

std::string fmt(double v, int prec = 4)
{
    std::ostringstream os;
    os << std::fixed << std::setprecision(prec) << v;
    return os.str();
}

} // namespace

BackboneDescription parse_backbone_description(std::istream& in)
{
    BackboneDescription desc;
    std::map<std::string, std::size_t> index;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        std::istringstream ls(line);
        std::vector<std::string> toks;
        for (std::string t; ls >> t;) toks.push_back(t);
        if (toks.empty()) continue;

        if (toks[0] == "stage") {
            if (toks.size() != 3) throw ParseError(line_no, "usage: stage <name> channels=<n>");
            if (index.count(toks[1])) throw ParseError(line_no, "duplicate stage '" + toks[1] + "'");
            StageSpec s;
            s.name = toks[1];
            s.channels = parse_int_field(toks[2], "channels", line_no);
            if (s.channels < 1) throw ParseError(line_no, "channels must be >= 1");
            index[s.name] = desc.stages.size();
            desc.stages.push_back(s);
            desc.stage_layers.emplace_back();
        } else if (toks[0] == "layer") {
            if (toks.size() < 4 || toks.size() > 5)
                throw ParseError(line_no, "usage: layer <stage> kernel=<k> stride=<s> [dilation=<d>]");
            auto it = index.find(toks[1]);
            if (it == index.end()) throw ParseError(line_no, "unknown stage name '" + toks[1] + "'");
            if (it->second + 1 != desc.stages.size())
                throw ParseError(line_no, "layer for stage '" + toks[1] + "' after a later stage was declared");
            LayerGeometry l;
            l.kernel = parse_int_field(toks[2], "kernel", line_no);
            l.stride = parse_int_field(toks[3], "stride", line_no);
            if (toks.size() == 5) l.dilation = parse_int_field(toks[4], "dilation", line_no);
            if (l.kernel < 1 || l.stride < 1 || l.dilation < 1)
                throw ParseError(line_no, "kernel, stride and dilation must be >= 1");
            desc.stage_layers[it->second].push_back(l);
        } else {
            throw ParseError(line_no, "unknown directive '" + toks[0] + "'");
        }
    }
    if (desc.stages.empty()) throw ParseError(line_no, "no stages declared");

    std::vector<LayerGeometry> chain;
    for (std::size_t i = 0; i < desc.stages.size(); ++i) {
        if (desc.stage_layers[i].empty())
            throw ParseError(line_no, "stage '" + desc.stages[i].name + "' has no layers");
        chain.insert(chain.end(), desc.stage_layers[i].begin(), desc.stage_layers[i].end());
        long stride = 1;
        for (const auto& l : chain) stride *= l.stride;
        desc.stages[i].cumulative_stride = static_cast<int>(stride);
        desc.stages[i].receptive_field = receptive_field_chain(chain);
    }
    validate_stages(desc.stages);
    return desc;
}

std::string geometry_report(const BackboneDescription& desc, std::span<const double> heights,
                            const RoiTemplate& tmpl)
{
    std::ostringstream os;
    os << "# stages\n";
    os << "stage,stride,receptive_field,channels\n";
    for (const auto& s : desc.stages)
        os << s.name << ',' << s.cumulative_stride << ',' << s.receptive_field << ',' << s.channels << '\n';
    if (heights.empty()) return os.str();

    os << "# projected extents (template " << tmpl.size_cells << ")\n";
    os << "stage,stride,height,projected_extent,cells,scale_match\n";
    for (const auto& s : desc.stages) {
        for (double h : heights) {
            const Box b{0, 0, h, h};
            const CellRect r = roi_cell_rect(b, s.cumulative_stride);
            os << s.name << ',' << s.cumulative_stride << ',' << fmt(h, 1) << ','
               << fmt(projected_extent(b, s.cumulative_stride)) << ',' << r.height() << ','
               << fmt(scale_match(h, s.cumulative_stride, tmpl)) << '\n';
        }
    }

    // Two disjoint boxes of the given height placed side by side at the
    // origin. At coarse strides they collapse onto the same cells.
    os << "# collisions (box A at origin, box B adjacent to the right)\n";
    os << "stage,stride,height,identical_rect,jaccard\n";
    for (const auto& s : desc.stages) {
        for (double h : heights) {
            const Box a{0, 0, h, h};
            const Box b{h, 0, h, h};
            const Ambiguity amb = ambiguity(a, b, s.cumulative_stride);
            os << s.name << ',' << s.cumulative_stride << ',' << fmt(h, 1) << ','
               << (amb.identical_rect ? "true" : "false") << ',' << fmt(amb.jaccard) << '\n';
        }
    }
    return os.str();
}

} // namespace msdet

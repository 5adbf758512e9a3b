#include "msdet/partition.hpp"

#include <cctype>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace msdet {

void validate_scheme(const SplitScheme& scheme)
{
    if (scheme.ranges.empty()) throw std::invalid_argument("scheme '" + scheme.name + "' has no ranges");
    for (std::size_t i = 0; i < scheme.ranges.size(); ++i) {
        const auto& r = scheme.ranges[i];
        if (!(r.lo > 0) || !(r.lo < r.hi))
            throw std::invalid_argument("scheme '" + scheme.name + "': range " + std::to_string(i) +
                                        " must satisfy 0 < lo < hi");
        if (i > 0 && scheme.ranges[i - 1].hi != r.lo)
            throw std::invalid_argument("scheme '" + scheme.name + "': ranges " + std::to_string(i - 1) + " and " +
                                        std::to_string(i) + " do not share a boundary");
    }
}

namespace {

SplitScheme make(std::string name, std::vector<ScaleRange> ranges)
{
    return {std::move(name), std::move(ranges)};
}

} // namespace

std::vector<SplitScheme> named_schemes()
{
    return {
        make("One split", {{10, 1300}}),
        make("Two splits", {{10, 140}, {140, 1300}}),
        make("Two evenly splits", {{10, 650}, {650, 1300}}),
        make("Three splits", {{10, 40}, {40, 140}, {140, 1300}}),
        make("Three evenly splits", {{10, 450}, {450, 900}, {900, 1300}}),
        make("Four splits", {{10, 25}, {25, 60}, {60, 140}, {140, 1300}}),
        make("Four evenly splits", {{10, 300}, {300, 600}, {600, 900}, {900, 1300}}),
    };
}

std::vector<SplitScheme> desk_schemes()
{
    // Boundaries 40 and 140 map to 16 and 48; 25 and 60 map to 10 and 24.
    const ScaleRange target{6, 96};
    auto even = [&](const char* name, int k) {
        SplitScheme s = even_split(target, k);
        s.name = name;
        return s;
    };
    return {
        make("One split", {{6, 96}}),
        make("Two splits", {{6, 48}, {48, 96}}),
        even("Two evenly splits", 2),
        make("Three splits", {{6, 16}, {16, 48}, {48, 96}}),
        even("Three evenly splits", 3),
        make("Four splits", {{6, 10}, {10, 24}, {24, 48}, {48, 96}}),
        even("Four evenly splits", 4),
    };
}

std::string scheme_slug(const std::string& name)
{
    static const std::pair<const char*, const char*> words[] = {
        {"one", "one"}, {"two", "two"}, {"three", "three"}, {"four", "four"}};
    std::string lower;
    for (char c : name) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    for (const auto& [word, slug] : words) {
        if (lower.rfind(word, 0) == 0) {
            std::string s = slug;
            if (lower.find("even") != std::string::npos) s += "-even";
            return s;
        }
    }
    return lower;
}

std::optional<SplitScheme> find_scheme(std::span<const SplitScheme> catalogue, const std::string& key)
{
    for (const auto& s : catalogue)
        if (s.name == key || scheme_slug(s.name) == key) return s;
    return std::nullopt;
}

SplitScheme even_split(const ScaleRange& target, int k)
{
    if (k < 1) throw std::invalid_argument("even_split: k must be >= 1");
    if (!(target.lo >= 0) || !(target.lo < target.hi))
        throw std::invalid_argument("even_split: target must satisfy 0 <= lo < hi");
    SplitScheme s;
    s.name = "even-" + std::to_string(k);
    double prev = target.lo;
    for (int i = 1; i <= k; ++i) {
        const double b = i == k ? target.hi : std::round(target.lo + i * (target.hi - target.lo) / k);
        s.ranges.push_back({prev, b});
        prev = b;
    }
    return s;
}

SplitScheme boundary_split(const ScaleRange& target, std::span<const double> interior)
{
    if (!(target.lo < target.hi)) throw std::invalid_argument("boundary_split: empty target range");
    SplitScheme s;
    s.name = "split-" + std::to_string(interior.size() + 1);
    double prev = target.lo;
    for (double b : interior) {
        if (!(b > prev) || !(b < target.hi))
            throw std::invalid_argument("boundary_split: boundaries must be strictly increasing inside the target");
        s.ranges.push_back({prev, b});
        prev = b;
    }
    s.ranges.push_back({prev, target.hi});
    return s;
}

StageAssignment assign_stages(const SplitScheme& scheme, std::span<const StageSpec> stages, const RoiTemplate& tmpl)
{
    validate_scheme(scheme);
    const std::size_t k = scheme.ranges.size();
    if (stages.size() < k + 1)
        throw std::invalid_argument("assign_stages: " + std::to_string(k) + " ranges need at least " +
                                    std::to_string(k + 1) + " stages, got " + std::to_string(stages.size()));
    StageAssignment out;
    out.roi_template = tmpl;
    const std::size_t first = stages.size() - k;
    for (std::size_t i = 0; i < k; ++i) {
        StagePair p;
        p.range = scheme.ranges[i];
        p.current_index = first + i;
        p.previous_index = first + i - 1;
        p.current = stages[p.current_index];
        p.previous = stages[p.previous_index];
        out.pairs.push_back(p);
    }
    return out;
}

std::optional<std::size_t> route_range(double height, const SplitScheme& scheme)
{
    const std::size_t n = scheme.ranges.size();
    for (std::size_t i = 0; i < n; ++i) {
        const auto& r = scheme.ranges[i];
        if (height >= r.lo && (height < r.hi || (i + 1 == n && height == r.hi))) return i;
    }
    return std::nullopt;
}

std::string scheme_to_json(const SplitScheme& scheme)
{
    nlohmann::ordered_json j;
    j["name"] = scheme.name;
    j["ranges"] = nlohmann::ordered_json::array();
    for (const auto& r : scheme.ranges) j["ranges"].push_back({r.lo, r.hi});
    return j.dump();
}

SplitScheme scheme_from_json(const std::string& text)
{
    SplitScheme s;
    try {
        const auto j = nlohmann::json::parse(text);
        s.name = j.at("name").get<std::string>();
        for (const auto& r : j.at("ranges")) {
            if (!r.is_array() || r.size() != 2) throw std::invalid_argument("each range must be [lo, hi]");
            s.ranges.push_back({r[0].get<double>(), r[1].get<double>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("scheme document: ") + e.what());
    }
    validate_scheme(s);
    return s;
}

} // namespace msdet

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace msdet {

/// Dense row-major array of doubles.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)), data(count(shape), fill) {}

    static std::size_t count(const std::vector<int>& s)
    {
        return std::accumulate(s.begin(), s.end(), std::size_t{1},
                               [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
    }

    std::size_t size() const { return data.size(); }
    int dim(std::size_t i) const { return shape.at(i); }
    int ndim() const { return static_cast<int>(shape.size()); }
    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }
    bool all_finite() const
    {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
    friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline std::string shape_str(const std::vector<int>& s)
{
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

inline void require_shape(const Tensor& t, const std::vector<int>& expected, const char* what)
{
    if (t.shape != expected)
        throw std::invalid_argument(std::string(what) + ": expected shape " + shape_str(expected) + ", got " +
                                    shape_str(t.shape));
}

} // namespace msdet

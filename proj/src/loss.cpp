#include "msdet/loss.hpp"

#include <cmath>
#include <stdexcept>

namespace msdet {

namespace {
// keeps exp() of size deltas finite for wild early predictions
constexpr double kMaxLogScale = 4.1351665567423561; // ln(1000 / 16)
} // namespace

Delta encode_delta(const Box& target, const Box& reference)
{
    return {(target.cx() - reference.cx()) / reference.w, (target.cy() - reference.cy()) / reference.h,
            std::log(target.w / reference.w), std::log(target.h / reference.h)};
}

Box decode_delta(const Box& reference, const Delta& d)
{
    const double cx = reference.cx() + d[0] * reference.w;
    const double cy = reference.cy() + d[1] * reference.h;
    const double w = reference.w * std::exp(std::min(d[2], kMaxLogScale));
    const double h = reference.h * std::exp(std::min(d[3], kMaxLogScale));
    return {cx - 0.5 * w, cy - 0.5 * h, w, h};
}

double bce_with_logit(double z, int label)
{
    return std::max(z, 0.0) - z * label + std::log1p(std::exp(-std::abs(z)));
}

double smooth_l1(double x, double beta)
{
    const double a = std::abs(x);
    return a < beta ? 0.5 * x * x / beta : a - 0.5 * beta;
}

double smooth_l1_grad(double x, double beta)
{
    const double a = std::abs(x);
    if (a < beta) return x / beta;
    return x > 0 ? 1.0 : -1.0;
}

LossTerms detection_loss(std::span<const double> logits, std::span<const int> labels,
                         std::span<const Delta> pred_deltas, std::span<const Delta> target_deltas, double lambda,
                         double beta, std::span<double> grad_logits, std::span<Delta> grad_deltas)
{
    const std::size_t n = logits.size();
    if (labels.size() != n || pred_deltas.size() != n || target_deltas.size() != n)
        throw std::invalid_argument("detection_loss: size mismatch");
    const bool want_grad = !grad_logits.empty();
    if (want_grad && (grad_logits.size() != n || grad_deltas.size() != n))
        throw std::invalid_argument("detection_loss: gradient buffers have the wrong size");

    LossTerms t;
    if (n == 0) return t;
    std::size_t n_pos = 0;
    for (int l : labels) n_pos += l == 1;

    for (std::size_t i = 0; i < n; ++i) {
        t.cls += bce_with_logit(logits[i], labels[i]);
        if (want_grad) {
            grad_logits[i] = (sigmoid(logits[i]) - labels[i]) / static_cast<double>(n);
            grad_deltas[i] = {0, 0, 0, 0};
        }
    }
    t.cls /= static_cast<double>(n);

    if (n_pos > 0) {
        for (std::size_t i = 0; i < n; ++i) {
            if (labels[i] != 1) continue;
            for (int j = 0; j < 4; ++j) {
                const double diff = pred_deltas[i][j] - target_deltas[i][j];
                t.box += smooth_l1(diff, beta);
                if (want_grad) grad_deltas[i][j] = lambda * smooth_l1_grad(diff, beta) / static_cast<double>(n_pos);
            }
        }
        t.box /= static_cast<double>(n_pos);
    }
    t.total = t.cls + lambda * t.box;
    return t;
}

} // namespace msdet

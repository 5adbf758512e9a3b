#pragma once

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "msdet/box.hpp"

namespace msdet {

using Delta = std::array<double, 4>;

/// (dx, dy, dw, dh): centre offsets relative to the reference size and log
/// size ratios.
Delta encode_delta(const Box& target, const Box& reference);
Box decode_delta(const Box& reference, const Delta& d);

inline double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

/// Binary cross-entropy of a logit against a {0,1} label, numerically stable.
double bce_with_logit(double logit, int label);

double smooth_l1(double x, double beta);
double smooth_l1_grad(double x, double beta);

struct LossTerms {
    double total = 0;
    double cls = 0;
    double box = 0;
};

/// Class term: mean BCE over all samples. Box term: mean over positives of
/// the smooth-L1 sum over the four delta coordinates (0 with no
/// positives). total = cls + lambda * box. Gradients are written to
/// grad_logits / grad_deltas when those spans are non-empty.
LossTerms detection_loss(std::span<const double> logits, std::span<const int> labels,
                         std::span<const Delta> pred_deltas, std::span<const Delta> target_deltas, double lambda,
                         double beta, std::span<double> grad_logits = {}, std::span<Delta> grad_deltas = {});

} // namespace msdet

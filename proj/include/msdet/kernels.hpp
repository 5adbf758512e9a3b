#pragma once

// Layer kernels. The default namespace holds the OpenMP-parallel versions;
// msdet::reference holds plain serial loops with identical semantics, kept
// for tests and benchmarks. Every parallel loop writes disjoint outputs,
// so results do not depend on the thread count.
//
// Layouts: feature maps are [N, C, H, W]; conv weights [O, C, K, K];
// fully connected weights [O, D] applied to inputs [N, D].

#include <cstdint>
#include <span>
#include <vector>

#include "msdet/geometry.hpp"
#include "msdet/tensor.hpp"

namespace msdet {

struct ConvGeometry {
    int kernel = 3;
    int stride = 1;
    int pad = 1;

    int out_extent(int in) const { return (in + 2 * pad - kernel) / stride + 1; }
};

/// Argmax bookkeeping for ROI max pooling: one flat feature index per
/// output element.
struct RoiPoolIndex {
    std::vector<std::int64_t> argmax;
};

namespace kernels {

Tensor conv2d_forward(const Tensor& in, const Tensor& weight, const Tensor& bias, const ConvGeometry& g);
/// grad_in may be null when the input gradient is not needed.
void conv2d_backward(const Tensor& in, const Tensor& weight, const Tensor& grad_out, const ConvGeometry& g,
                     Tensor* grad_in, Tensor& grad_w, Tensor& grad_b);

void relu_forward(Tensor& x);
/// Zeros grad wherever the forward output was not positive.
void relu_backward(const Tensor& out, Tensor& grad);

Tensor maxpool2x2_forward(const Tensor& in, std::vector<std::int64_t>& argmax);
Tensor maxpool2x2_backward(const std::vector<int>& in_shape, const Tensor& grad_out,
                           const std::vector<std::int64_t>& argmax);

Tensor fc_forward(const Tensor& in, const Tensor& weight, const Tensor& bias);
void fc_backward(const Tensor& in, const Tensor& weight, const Tensor& grad_out, Tensor* grad_in, Tensor& grad_w,
                 Tensor& grad_b);

/// Max-pools each cell rectangle of a single feature map [1, C, H, W] into
/// a size x size grid; output [R, C, size, size].
Tensor roi_pool_forward(const Tensor& feat, std::span<const CellRect> rects, int size, RoiPoolIndex& index);
/// Accumulates into grad_feat (same shape as the pooled feature map).
void roi_pool_backward(const Tensor& grad_out, const RoiPoolIndex& index, Tensor& grad_feat);

} // namespace kernels

namespace reference {

Tensor conv2d_forward(const Tensor& in, const Tensor& weight, const Tensor& bias, const ConvGeometry& g);
void conv2d_backward(const Tensor& in, const Tensor& weight, const Tensor& grad_out, const ConvGeometry& g,
                     Tensor* grad_in, Tensor& grad_w, Tensor& grad_b);
Tensor maxpool2x2_forward(const Tensor& in, std::vector<std::int64_t>& argmax);
Tensor fc_forward(const Tensor& in, const Tensor& weight, const Tensor& bias);
void fc_backward(const Tensor& in, const Tensor& weight, const Tensor& grad_out, Tensor* grad_in, Tensor& grad_w,
                 Tensor& grad_b);
Tensor roi_pool_forward(const Tensor& feat, std::span<const CellRect> rects, int size, RoiPoolIndex& index);
void roi_pool_backward(const Tensor& grad_out, const RoiPoolIndex& index, Tensor& grad_feat);

} // namespace reference

/// Cells [start, end) of bin `i` out of `bins` over an extent of `n` cells.
/// Bins are never empty; when n < bins neighbouring bins share cells.
void roi_bin_range(int n, int bins, int i, int& start, int& end);

/// Clamps a cell rect to a map of the given size, keeping at least one cell.
CellRect clamp_rect(CellRect r, int width, int height);

} // namespace msdet

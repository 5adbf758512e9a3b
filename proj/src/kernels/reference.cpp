#include <algorithm>

#include "msdet/kernels.hpp"

namespace msdet::reference {

Tensor conv2d_forward(const Tensor& in, const Tensor& weight, const Tensor& bias, const ConvGeometry& g)
{
    const int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
    const int O = weight.dim(0), k = g.kernel;
    const int Ho = g.out_extent(H), Wo = g.out_extent(W);
    Tensor out({N, O, Ho, Wo});
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    double acc = bias[o];
                    for (int c = 0; c < C; ++c)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * g.stride + ky - g.pad, ix = ox * g.stride + kx - g.pad;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += weight[((static_cast<std::size_t>(o) * C + c) * k + ky) * k + kx] *
                                       in[((static_cast<std::size_t>(n) * C + c) * H + iy) * W + ix];
                            }
                    out[((static_cast<std::size_t>(n) * O + o) * Ho + oy) * Wo + ox] = acc;
                }
    return out;
}

void conv2d_backward(const Tensor& in, const Tensor& weight, const Tensor& grad_out, const ConvGeometry& g,
                     Tensor* grad_in, Tensor& grad_w, Tensor& grad_b)
{
    const int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
    const int O = weight.dim(0), k = g.kernel;
    const int Ho = g.out_extent(H), Wo = g.out_extent(W);
    if (grad_in) *grad_in = Tensor(in.shape);
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    const double go = grad_out[((static_cast<std::size_t>(n) * O + o) * Ho + oy) * Wo + ox];
                    grad_b[o] += go;
                    for (int c = 0; c < C; ++c)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * g.stride + ky - g.pad, ix = ox * g.stride + kx - g.pad;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                const std::size_t wi = ((static_cast<std::size_t>(o) * C + c) * k + ky) * k + kx;
                                const std::size_t ii = ((static_cast<std::size_t>(n) * C + c) * H + iy) * W + ix;
                                grad_w[wi] += go * in[ii];
                                if (grad_in) (*grad_in)[ii] += go * weight[wi];
                            }
                }
}

Tensor maxpool2x2_forward(const Tensor& in, std::vector<std::int64_t>& argmax)
{
    const int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
    Tensor out({N, C, H / 2, W / 2});
    argmax.assign(out.size(), 0);
    std::size_t o = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H / 2; ++y)
                for (int x = 0; x < W / 2; ++x, ++o) {
                    std::int64_t best = -1;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const std::int64_t idx = ((static_cast<std::int64_t>(n) * C + c) * H + 2 * y + dy) * W + 2 * x + dx;
                            if (best < 0 || in[idx] > in[best]) best = idx;
                        }
                    out[o] = in[best];
                    argmax[o] = best;
                }
    return out;
}

Tensor fc_forward(const Tensor& in, const Tensor& weight, const Tensor& bias)
{
    const int N = in.dim(0), D = in.dim(1), O = weight.dim(0);
    Tensor out({N, O});
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
            double acc = bias[o];
            for (int d = 0; d < D; ++d) acc += in[static_cast<std::size_t>(n) * D + d] * weight[static_cast<std::size_t>(o) * D + d];
            out[static_cast<std::size_t>(n) * O + o] = acc;
        }
    return out;
}

void fc_backward(const Tensor& in, const Tensor& weight, const Tensor& grad_out, Tensor* grad_in, Tensor& grad_w,
                 Tensor& grad_b)
{
    const int N = in.dim(0), D = in.dim(1), O = weight.dim(0);
    if (grad_in) *grad_in = Tensor(in.shape);
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
            const double go = grad_out[static_cast<std::size_t>(n) * O + o];
            grad_b[o] += go;
            for (int d = 0; d < D; ++d) {
                grad_w[static_cast<std::size_t>(o) * D + d] += go * in[static_cast<std::size_t>(n) * D + d];
                if (grad_in) (*grad_in)[static_cast<std::size_t>(n) * D + d] += go * weight[static_cast<std::size_t>(o) * D + d];
            }
        }
}

Tensor roi_pool_forward(const Tensor& feat, std::span<const CellRect> rects, int size, RoiPoolIndex& index)
{
    const int C = feat.dim(1), H = feat.dim(2), W = feat.dim(3);
    const int R = static_cast<int>(rects.size());
    Tensor out({R, C, size, size});
    index.argmax.assign(out.size(), 0);
    std::size_t o = 0;
    for (int r = 0; r < R; ++r) {
        const CellRect rc = clamp_rect(rects[r], W, H);
        for (int c = 0; c < C; ++c)
            for (int by = 0; by < size; ++by)
                for (int bx = 0; bx < size; ++bx, ++o) {
                    int ys, ye, xs, xe;
                    roi_bin_range(rc.height(), size, by, ys, ye);
                    roi_bin_range(rc.width(), size, bx, xs, xe);
                    std::int64_t best = -1;
                    for (int y = rc.y0 + ys; y < rc.y0 + ye; ++y)
                        for (int x = rc.x0 + xs; x < rc.x0 + xe; ++x) {
                            const std::int64_t idx = (static_cast<std::int64_t>(c) * H + y) * W + x;
                            if (best < 0 || feat[idx] > feat[best]) best = idx;
                        }
                    out[o] = feat[best];
                    index.argmax[o] = best;
                }
    }
    return out;
}

void roi_pool_backward(const Tensor& grad_out, const RoiPoolIndex& index, Tensor& grad_feat)
{
    for (std::size_t i = 0; i < grad_out.size(); ++i) grad_feat[index.argmax[i]] += grad_out[i];
}

} // namespace msdet::reference

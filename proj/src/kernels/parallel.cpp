#include <algorithm>
#include <limits>

#include <Eigen/Core>
#include <omp.h>

#include "msdet/kernels.hpp"

namespace msdet::kernels {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<RowMat>;
using CMapR = Eigen::Map<const RowMat>;


// Runs f(begin, end) over fixed-size blocks of [0, n). The block layout does
// not depend on the thread count, so neither do the GEMM results.
template <class F>
void for_blocks(long n, long block, bool parallel, F f)
{
    const long blocks = (n + block - 1) / block;
#pragma omp parallel for schedule(static) if (parallel)
    for (long b = 0; b < blocks; ++b) f(b * block, std::min(n, (b + 1) * block));
}

constexpr long col_block = 256;
constexpr long row_block = 16;

int workers(long work)
{
    // small problems are not worth the fork/join
    return work < 32768 ? 1 : omp_get_max_threads();
}

// cols[K, N*P] with K = C*k*k, P = Ho*Wo
RowMat im2col(const Tensor& in, const ConvGeometry& g, int Ho, int Wo)
{
    const int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
    const int k = g.kernel;
    const long P = static_cast<long>(Ho) * Wo;
    RowMat cols(static_cast<long>(C) * k * k, N * P);
    const long rows = cols.rows();
#pragma omp parallel for schedule(static) if (workers(rows * N * P) > 1)
    for (long r = 0; r < rows; ++r) {
        const int c = static_cast<int>(r / (k * k));
        const int ky = static_cast<int>((r / k) % k), kx = static_cast<int>(r % k);
        double* dst = cols.row(r).data();
        for (int n = 0; n < N; ++n) {
            const double* src = in.ptr() + (static_cast<long>(n) * C + c) * H * W;
            for (int oy = 0; oy < Ho; ++oy) {
                const int iy = oy * g.stride + ky - g.pad;
                double* d = dst + n * P + static_cast<long>(oy) * Wo;
                if (iy < 0 || iy >= H) {
                    std::fill(d, d + Wo, 0.0);
                    continue;
                }
                const double* s = src + static_cast<long>(iy) * W;
                for (int ox = 0; ox < Wo; ++ox) {
                    const int ix = ox * g.stride + kx - g.pad;
                    d[ox] = (ix >= 0 && ix < W) ? s[ix] : 0.0;
                }
            }
        }
    }
    return cols;
}

void col2im(const RowMat& cols, const ConvGeometry& g, int Ho, int Wo, Tensor& grad_in)
{
    const int N = grad_in.dim(0), C = grad_in.dim(1), H = grad_in.dim(2), W = grad_in.dim(3);
    const int k = g.kernel;
    const long P = static_cast<long>(Ho) * Wo;
    grad_in.fill(0.0);
    const long planes = static_cast<long>(N) * C;
#pragma omp parallel for schedule(static) if (workers(cols.size()) > 1)
    for (long nc = 0; nc < planes; ++nc) {
        const int n = static_cast<int>(nc / C), c = static_cast<int>(nc % C);
        double* dst = grad_in.ptr() + nc * H * W;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* src = cols.row((static_cast<long>(c) * k + ky) * k + kx).data() + n * P;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * g.stride + ky - g.pad;
                    if (iy < 0 || iy >= H) continue;
                    double* d = dst + static_cast<long>(iy) * W;
                    const double* s = src + static_cast<long>(oy) * Wo;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * g.stride + kx - g.pad;
                        if (ix >= 0 && ix < W) d[ix] += s[ox];
                    }
                }
            }
        }
    }
}

} // namespace

Tensor conv2d_forward(const Tensor& in, const Tensor& weight, const Tensor& bias, const ConvGeometry& g)
{
    const int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
    const int O = weight.dim(0);
    require_shape(weight, {O, C, g.kernel, g.kernel}, "conv2d weight");
    require_shape(bias, {O}, "conv2d bias");
    const int Ho = g.out_extent(H), Wo = g.out_extent(W);
    const long P = static_cast<long>(Ho) * Wo;
    const RowMat cols = im2col(in, g, Ho, Wo);
    const CMapR wm(weight.ptr(), O, cols.rows());
    RowMat out_mat(O, N * P);

    const long ncols = N * P;
    for_blocks(ncols, col_block, workers(static_cast<long>(O) * cols.rows() * ncols) > 1, [&](long b, long e) {
        out_mat.middleCols(b, e - b).noalias() = wm * cols.middleCols(b, e - b);
    });

    Tensor out({N, O, Ho, Wo});
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
            const double* s = out_mat.row(o).data() + n * P;
            double* d = out.ptr() + (static_cast<long>(n) * O + o) * P;
            const double b = bias[o];
            for (long p = 0; p < P; ++p) d[p] = s[p] + b;
        }
    return out;
}

void conv2d_backward(const Tensor& in, const Tensor& weight, const Tensor& grad_out, const ConvGeometry& g,
                     Tensor* grad_in, Tensor& grad_w, Tensor& grad_b)
{
    const int N = in.dim(0), H = in.dim(2), W = in.dim(3);
    const int O = weight.dim(0);
    const int Ho = g.out_extent(H), Wo = g.out_extent(W);
    require_shape(grad_out, {N, O, Ho, Wo}, "conv2d grad_out");
    const long P = static_cast<long>(Ho) * Wo;
    const RowMat cols = im2col(in, g, Ho, Wo);
    const long K = cols.rows();

    RowMat go(O, N * P);
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o)
            std::copy_n(grad_out.ptr() + (static_cast<long>(n) * O + o) * P, P, go.row(o).data() + n * P);

    MapR gw(grad_w.ptr(), O, K);
    const bool parallel = workers(O * K * N * P) > 1;
    for_blocks(O, row_block, parallel, [&](long b, long e) {
        gw.middleRows(b, e - b).noalias() += go.middleRows(b, e - b) * cols.transpose();
    });
    for (int o = 0; o < O; ++o) grad_b[o] += go.row(o).sum();

    if (!grad_in) return;
    const CMapR wm(weight.ptr(), O, K);
    RowMat gcols(K, N * P);
    const long ncols = N * P;
    for_blocks(ncols, col_block, parallel, [&](long b, long e) {
        gcols.middleCols(b, e - b).noalias() = wm.transpose() * go.middleCols(b, e - b);
    });
    *grad_in = Tensor(in.shape);
    col2im(gcols, g, Ho, Wo, *grad_in);
}

void relu_forward(Tensor& x)
{
    const long n = static_cast<long>(x.size());
    double* p = x.ptr();
#pragma omp parallel for schedule(static) if (workers(n) > 1)
    for (long i = 0; i < n; ++i) p[i] = p[i] > 0 ? p[i] : 0.0;
}

void relu_backward(const Tensor& out, Tensor& grad)
{
    const long n = static_cast<long>(out.size());
    const double* o = out.ptr();
    double* g = grad.ptr();
#pragma omp parallel for schedule(static) if (workers(n) > 1)
    for (long i = 0; i < n; ++i)
        if (!(o[i] > 0)) g[i] = 0.0;
}

Tensor maxpool2x2_forward(const Tensor& in, std::vector<std::int64_t>& argmax)
{
    const int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
    const int Ho = H / 2, Wo = W / 2;
    Tensor out({N, C, Ho, Wo});
    argmax.assign(out.size(), 0);
    const long planes = static_cast<long>(N) * C;
#pragma omp parallel for schedule(static) if (workers(static_cast<long>(in.size())) > 1)
    for (long pc = 0; pc < planes; ++pc) {
        const long base = pc * H * W;
        for (int y = 0; y < Ho; ++y)
            for (int x = 0; x < Wo; ++x) {
                long best = base + (2L * y) * W + 2 * x;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const long idx = base + (2L * y + dy) * W + 2 * x + dx;
                        if (in[idx] > in[best]) best = idx;
                    }
                const long o = (pc * Ho + y) * Wo + x;
                out[o] = in[best];
                argmax[o] = best;
            }
    }
    return out;
}

Tensor maxpool2x2_backward(const std::vector<int>& in_shape, const Tensor& grad_out,
                           const std::vector<std::int64_t>& argmax)
{
    Tensor g(in_shape);
    // each input cell belongs to exactly one 2x2 window: no write conflicts
    const long n = static_cast<long>(grad_out.size());
#pragma omp parallel for schedule(static) if (workers(n) > 1)
    for (long i = 0; i < n; ++i) g[argmax[i]] += grad_out[i];
    return g;
}

Tensor fc_forward(const Tensor& in, const Tensor& weight, const Tensor& bias)
{
    const int N = in.dim(0), D = in.dim(1), O = weight.dim(0);
    require_shape(weight, {O, D}, "fc weight");
    require_shape(bias, {O}, "fc bias");
    Tensor out({N, O});
    const CMapR x(in.ptr(), N, D), w(weight.ptr(), O, D);
    MapR y(out.ptr(), N, O);
    for_blocks(N, row_block, workers(static_cast<long>(N) * D * O) > 1, [&](long b, long e) {
        y.middleRows(b, e - b).noalias() = x.middleRows(b, e - b) * w.transpose();
    });
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) out[static_cast<std::size_t>(n) * O + o] += bias[o];
    return out;
}

void fc_backward(const Tensor& in, const Tensor& weight, const Tensor& grad_out, Tensor* grad_in, Tensor& grad_w,
                 Tensor& grad_b)
{
    const int N = in.dim(0), D = in.dim(1), O = weight.dim(0);
    require_shape(grad_out, {N, O}, "fc grad_out");
    const CMapR x(in.ptr(), N, D), w(weight.ptr(), O, D), go(grad_out.ptr(), N, O);
    MapR gw(grad_w.ptr(), O, D);
    const bool parallel = workers(static_cast<long>(N) * D * O) > 1;
    for_blocks(O, row_block, parallel, [&](long b, long e) {
        gw.middleRows(b, e - b).noalias() += go.middleCols(b, e - b).transpose() * x;
    });
    for (int o = 0; o < O; ++o) grad_b[o] += go.col(o).sum();
    if (!grad_in) return;
    *grad_in = Tensor(in.shape);
    MapR gi(grad_in->ptr(), N, D);
    for_blocks(N, row_block, parallel, [&](long b, long e) {
        gi.middleRows(b, e - b).noalias() = go.middleRows(b, e - b) * w;
    });
}

Tensor roi_pool_forward(const Tensor& feat, std::span<const CellRect> rects, int size, RoiPoolIndex& index)
{
    const int C = feat.dim(1), H = feat.dim(2), W = feat.dim(3);
    const long R = static_cast<long>(rects.size());
    Tensor out({static_cast<int>(R), C, size, size});
    index.argmax.assign(out.size(), 0);
    const long per_roi = static_cast<long>(C) * size * size;
#pragma omp parallel for schedule(dynamic, 4) if (workers(R * per_roi * 4) > 1)
    for (long r = 0; r < R; ++r) {
        const CellRect rc = clamp_rect(rects[r], W, H);
        for (int c = 0; c < C; ++c) {
            const long plane = static_cast<long>(c) * H * W;
            for (int by = 0; by < size; ++by) {
                int ys, ye;
                roi_bin_range(rc.height(), size, by, ys, ye);
                for (int bx = 0; bx < size; ++bx) {
                    int xs, xe;
                    roi_bin_range(rc.width(), size, bx, xs, xe);
                    long best = plane + static_cast<long>(rc.y0 + ys) * W + rc.x0 + xs;
                    for (int y = rc.y0 + ys; y < rc.y0 + ye; ++y)
                        for (int x = rc.x0 + xs; x < rc.x0 + xe; ++x) {
                            const long idx = plane + static_cast<long>(y) * W + x;
                            if (feat[idx] > feat[best]) best = idx;
                        }
                    const long o = r * per_roi + (static_cast<long>(c) * size + by) * size + bx;
                    out[o] = feat[best];
                    index.argmax[o] = best;
                }
            }
        }
    }
    return out;
}

void roi_pool_backward(const Tensor& grad_out, const RoiPoolIndex& index, Tensor& grad_feat)
{
    const int R = grad_out.dim(0), C = grad_out.dim(1), S = grad_out.dim(2);
    const long per_c = static_cast<long>(S) * S;
    // channel-parallel: a channel's argmax cells never leave its own plane
#pragma omp parallel for schedule(static) if (workers(static_cast<long>(grad_out.size())) > 1)
    for (int c = 0; c < C; ++c)
        for (int r = 0; r < R; ++r) {
            const long base = (static_cast<long>(r) * C + c) * per_c;
            for (long i = 0; i < per_c; ++i) grad_feat[index.argmax[base + i]] += grad_out[base + i];
        }
}

} // namespace msdet::kernels

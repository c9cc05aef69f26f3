#include "ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace drnet {

namespace {

// Activation buffers churn fast and exceed glibc's default mmap threshold,
// which hands every free back to the kernel and faults the pages in again
// on the next batch. Keep large blocks on the heap instead.
#if defined(__GLIBC__)
const bool g_malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    return true;
}();
#endif

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMat<S>>;
template <typename S>
using CMatMap = Eigen::Map<const RowMat<S>>;
template <typename S>
using VecMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>;
template <typename S>
using CVecMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>;

template <typename S>
bool any_requires_grad(const std::vector<Tensor<S>>& ts) {
    for (const auto& t : ts)
        if (t.valid() && t.requires_grad()) return true;
    return false;
}

template <typename S, typename F>
void maybe_record(Tape<S>* tape, bool track, Tensor<S>& out, F&& fn) {
    if (tape && track) {
        out.set_requires_grad(true);
        tape->record(std::forward<F>(fn), out.storage_id());
    }
}

void expect_ndim(const std::vector<int>& shape, int n, const char* what) {
    if (static_cast<int>(shape.size()) != n)
        throw ShapeError(std::string(what) + ": expected " + std::to_string(n) +
                         " axes, got " + std::to_string(shape.size()));
}

std::string shape_str(const std::vector<int>& s) {
    std::string r = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + ")";
}

// Valid output range [lo, hi] for one kernel offset: indices o with
// 0 <= o*stride - pad + k < extent.
void valid_out_range(int extent, int out_extent, int stride, int pad, int k, int& lo, int& hi) {
    int a = pad - k;  // o*stride >= a
    lo = a <= 0 ? 0 : (a + stride - 1) / stride;
    int b = extent - 1 + pad - k;  // o*stride <= b
    hi = b < 0 ? -1 : std::min(out_extent - 1, b / stride);
}

}  // namespace

int conv_out_extent(int in, int kernel, int stride, int pad) {
    const int num = in + 2 * pad - kernel;
    if (num < 0)
        throw ShapeError("conv/pool kernel " + std::to_string(kernel) + " exceeds padded extent " +
                         std::to_string(in + 2 * pad));
    if (stride < 1) throw ShapeError("stride must be >= 1");
    return num / stride + 1;
}

// ---------------------------------------------------------------------------
// identity

template <typename S>
Tensor<S> identity(Tape<S>* tape, Tensor<S> x) {
    Tensor<S> out = Tensor<S>::from(x.shape(), x.values());
    maybe_record(tape, x.requires_grad(), out, [x, out]() mutable {
        if (!out.grad_allocated()) return;
        auto& gx = x.grad();
        const auto& go = out.grad();
        for (std::int64_t i = 0; i < x.size(); ++i) gx[i] += go[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

// col buffer layout: (Cg*kh*kw) x (Ho*Wo), row-major.
template <typename S>
void im2col(const S* x, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo,
            S* col) {
    const std::int64_t cols = static_cast<std::int64_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        const S* xc = x + static_cast<std::int64_t>(c) * H * W;
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                S* row = col + ((static_cast<std::int64_t>(c) * kh + ki) * kw + kj) * cols;
                int ho_lo, ho_hi, wo_lo, wo_hi;
                valid_out_range(H, Ho, stride, pad, ki, ho_lo, ho_hi);
                valid_out_range(W, Wo, stride, pad, kj, wo_lo, wo_hi);
                if (ho_lo > 0) std::fill(row, row + static_cast<std::int64_t>(ho_lo) * Wo, S(0));
                if (ho_hi < Ho - 1)
                    std::fill(row + static_cast<std::int64_t>(ho_hi + 1) * Wo, row + cols, S(0));
                for (int ho = ho_lo; ho <= ho_hi; ++ho) {
                    const int hi = ho * stride - pad + ki;
                    const S* src = xc + static_cast<std::int64_t>(hi) * W - pad + kj;
                    S* dst = row + static_cast<std::int64_t>(ho) * Wo;
                    if (wo_lo > 0) std::fill(dst, dst + wo_lo, S(0));
                    if (wo_hi < Wo - 1) std::fill(dst + wo_hi + 1, dst + Wo, S(0));
                    if (stride == 1) {
                        std::memcpy(dst + wo_lo, src + wo_lo, sizeof(S) * (wo_hi - wo_lo + 1));
                    } else {
                        for (int wo = wo_lo; wo <= wo_hi; ++wo) dst[wo] = src[wo * stride];
                    }
                }
            }
        }
    }
}

template <typename S>
void col2im_accum(const S* col, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho,
                  int Wo, S* gx) {
    const std::int64_t cols = static_cast<std::int64_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        S* gc = gx + static_cast<std::int64_t>(c) * H * W;
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const S* row = col + ((static_cast<std::int64_t>(c) * kh + ki) * kw + kj) * cols;
                int ho_lo, ho_hi, wo_lo, wo_hi;
                valid_out_range(H, Ho, stride, pad, ki, ho_lo, ho_hi);
                valid_out_range(W, Wo, stride, pad, kj, wo_lo, wo_hi);
                for (int ho = ho_lo; ho <= ho_hi; ++ho) {
                    const int hi = ho * stride - pad + ki;
                    S* dst = gc + static_cast<std::int64_t>(hi) * W - pad + kj;
                    const S* src = row + static_cast<std::int64_t>(ho) * Wo;
                    for (int wo = wo_lo; wo <= wo_hi; ++wo) dst[wo * stride] += src[wo];
                }
            }
        }
    }
}

// Depthwise fast path (groups == Cin == Cout).
template <typename S>
void depthwise_forward(const S* x, const S* w, const S* bias, S* out, int N, int C, int H, int W,
                       int kh, int kw, int stride, int pad, int Ho, int Wo) {
    const std::int64_t xplane = static_cast<std::int64_t>(H) * W;
    const std::int64_t oplane = static_cast<std::int64_t>(Ho) * Wo;
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const S* xc = x + (static_cast<std::int64_t>(n) * C + c) * xplane;
            S* oc = out + (static_cast<std::int64_t>(n) * C + c) * oplane;
            const S b = bias ? bias[c] : S(0);
            std::fill(oc, oc + oplane, b);
            const S* wc = w + static_cast<std::int64_t>(c) * kh * kw;
            for (int ki = 0; ki < kh; ++ki) {
                for (int kj = 0; kj < kw; ++kj) {
                    const S wv = wc[ki * kw + kj];
                    int ho_lo, ho_hi, wo_lo, wo_hi;
                    valid_out_range(H, Ho, stride, pad, ki, ho_lo, ho_hi);
                    valid_out_range(W, Wo, stride, pad, kj, wo_lo, wo_hi);
                    for (int ho = ho_lo; ho <= ho_hi; ++ho) {
                        const S* src = xc + static_cast<std::int64_t>(ho * stride - pad + ki) * W -
                                       pad + kj;
                        S* dst = oc + static_cast<std::int64_t>(ho) * Wo;
                        if (stride == 1) {
                            for (int wo = wo_lo; wo <= wo_hi; ++wo) dst[wo] += wv * src[wo];
                        } else {
                            for (int wo = wo_lo; wo <= wo_hi; ++wo) dst[wo] += wv * src[wo * stride];
                        }
                    }
                }
            }
        }
    }
}

template <typename S>
void depthwise_backward(const S* x, const S* w, const S* go, S* gx, S* gw, S* gb, int N, int C,
                        int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo) {
    const std::int64_t xplane = static_cast<std::int64_t>(H) * W;
    const std::int64_t oplane = static_cast<std::int64_t>(Ho) * Wo;
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const S* xc = x + (static_cast<std::int64_t>(n) * C + c) * xplane;
            const S* gc = go + (static_cast<std::int64_t>(n) * C + c) * oplane;
            S* gxc = gx ? gx + (static_cast<std::int64_t>(n) * C + c) * xplane : nullptr;
            const S* wc = w + static_cast<std::int64_t>(c) * kh * kw;
            S* gwc = gw ? gw + static_cast<std::int64_t>(c) * kh * kw : nullptr;
            if (gb) {
                S acc = 0;
                for (std::int64_t i = 0; i < oplane; ++i) acc += gc[i];
                gb[c] += acc;
            }
            for (int ki = 0; ki < kh; ++ki) {
                for (int kj = 0; kj < kw; ++kj) {
                    const S wv = wc[ki * kw + kj];
                    int ho_lo, ho_hi, wo_lo, wo_hi;
                    valid_out_range(H, Ho, stride, pad, ki, ho_lo, ho_hi);
                    valid_out_range(W, Wo, stride, pad, kj, wo_lo, wo_hi);
                    S wacc = 0;
                    for (int ho = ho_lo; ho <= ho_hi; ++ho) {
                        const std::int64_t base =
                            static_cast<std::int64_t>(ho * stride - pad + ki) * W - pad + kj;
                        const S* g = gc + static_cast<std::int64_t>(ho) * Wo;
                        if (stride == 1) {
                            const S* xr = xc + base;
                            for (int wo = wo_lo; wo <= wo_hi; ++wo) wacc += g[wo] * xr[wo];
                            if (gxc) {
                                S* gr = gxc + base;
                                for (int wo = wo_lo; wo <= wo_hi; ++wo) gr[wo] += wv * g[wo];
                            }
                        } else {
                            for (int wo = wo_lo; wo <= wo_hi; ++wo) {
                                const std::int64_t xi =
                                    base + static_cast<std::int64_t>(wo) * stride;
                                wacc += g[wo] * xc[xi];
                                if (gxc) gxc[xi] += wv * g[wo];
                            }
                        }
                    }
                    if (gwc) gwc[ki * kw + kj] += wacc;
                }
            }
        }
    }
}

}  // namespace

template <typename S>
Tensor<S> conv2d(Tape<S>* tape, Tensor<S> x, Tensor<S> w, const Tensor<S>* bias,
                 const Conv2dAttrs& attrs) {
    expect_ndim(x.shape(), 4, "conv2d input");
    expect_ndim(w.shape(), 4, "conv2d weight");
    const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(0), Cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const int g = attrs.groups;
    if (g < 1 || Cin % g != 0 || Cout % g != 0)
        throw ShapeError("conv2d: channel counts not divisible by groups (axis 1)");
    if (Cin / g != Cg)
        throw ShapeError("conv2d: weight axis 1 is " + std::to_string(Cg) + ", expected " +
                         std::to_string(Cin / g) + " for " + std::to_string(Cin) + " inputs / " +
                         std::to_string(g) + " groups");
    if (bias && (bias->ndim() != 1 || bias->dim(0) != Cout))
        throw ShapeError("conv2d: bias axis 0 must equal output channels");
    const int Ho = conv_out_extent(H, kh, attrs.stride, attrs.pad);
    const int Wo = conv_out_extent(W, kw, attrs.stride, attrs.pad);

    Tensor<S> out = Tensor<S>::raw({N, Cout, Ho, Wo});
    const bool depthwise = (g == Cin && Cout == Cin && Cg == 1);

    if (depthwise) {
        depthwise_forward(x.data(), w.data(), bias ? bias->data() : nullptr, out.data(), N, Cin, H,
                          W, kh, kw, attrs.stride, attrs.pad, Ho, Wo);
    } else if (kh == 1 && kw == 1 && attrs.stride == 1 && attrs.pad == 0 && g == 1) {
        // Pointwise: one GEMM per instance, no gather needed.
        CMatMap<S> wm(w.data(), Cout, Cin);
        const std::int64_t hw = static_cast<std::int64_t>(H) * W;
        for (int n = 0; n < N; ++n) {
            CMatMap<S> xm(x.data() + static_cast<std::int64_t>(n) * Cin * hw, Cin, hw);
            MatMap<S> om(out.data() + static_cast<std::int64_t>(n) * Cout * hw, Cout, hw);
            om.noalias() = wm * xm;
        }
        if (bias) {
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < Cout; ++c) {
                    S* o = out.data() + ((static_cast<std::int64_t>(n) * Cout + c) * hw);
                    const S b = bias->data()[c];
                    for (std::int64_t i = 0; i < hw; ++i) o[i] += b;
                }
        }
    } else {
        const int Cout_g = Cout / g;
        const std::int64_t cols = static_cast<std::int64_t>(Ho) * Wo;
        std::vector<S> col(static_cast<std::size_t>(Cg) * kh * kw * cols);
        for (int n = 0; n < N; ++n) {
            for (int gi = 0; gi < g; ++gi) {
                const S* xg = x.data() + (static_cast<std::int64_t>(n) * Cin + gi * Cg) *
                                             static_cast<std::int64_t>(H) * W;
                im2col(xg, Cg, H, W, kh, kw, attrs.stride, attrs.pad, Ho, Wo, col.data());
                CMatMap<S> wm(w.data() + static_cast<std::int64_t>(gi) * Cout_g * Cg * kh * kw,
                              Cout_g, Cg * kh * kw);
                CMatMap<S> cm(col.data(), Cg * kh * kw, cols);
                MatMap<S> om(out.data() + (static_cast<std::int64_t>(n) * Cout + gi * Cout_g) * cols,
                             Cout_g, cols);
                om.noalias() = wm * cm;
            }
        }
        if (bias) {
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < Cout; ++c) {
                    S* o = out.data() + (static_cast<std::int64_t>(n) * Cout + c) * cols;
                    const S b = bias->data()[c];
                    for (std::int64_t i = 0; i < cols; ++i) o[i] += b;
                }
        }
    }

    const bool track =
        x.requires_grad() || w.requires_grad() || (bias && bias->requires_grad());
    Tensor<S> bias_t = bias ? *bias : Tensor<S>();
    Conv2dAttrs at = attrs;
    maybe_record(tape, track, out, [x, w, bias_t, out, at, N, Cin, Cout, H, W, kh, kw, Ho,
                                    Wo]() mutable {
        if (!out.grad_allocated()) return;
        const S* go = out.grad().data();
        const int g = at.groups;
        const bool depthwise = (g == Cin && Cout == Cin);
        S* gx = x.requires_grad() ? x.grad().data() : nullptr;
        S* gw = w.requires_grad() ? w.grad().data() : nullptr;
        S* gb = bias_t.valid() && bias_t.requires_grad() ? bias_t.grad().data() : nullptr;
        if (depthwise) {
            depthwise_backward(x.data(), w.data(), go, gx, gw, gb, N, Cin, H, W, kh, kw, at.stride,
                               at.pad, Ho, Wo);
            return;
        }
        if (kh == 1 && kw == 1 && at.stride == 1 && at.pad == 0 && g == 1) {
            // Pointwise: plain GEMMs, no gather needed.
            const std::int64_t hw = static_cast<std::int64_t>(H) * W;
            CMatMap<S> wm(w.data(), Cout, Cin);
            for (int n = 0; n < N; ++n) {
                CMatMap<S> gom(go + static_cast<std::int64_t>(n) * Cout * hw, Cout, hw);
                if (gx) {
                    MatMap<S> gxm(gx + static_cast<std::int64_t>(n) * Cin * hw, Cin, hw);
                    gxm.noalias() += wm.transpose() * gom;
                }
                if (gw) {
                    CMatMap<S> xm(x.data() + static_cast<std::int64_t>(n) * Cin * hw, Cin, hw);
                    MatMap<S> gwm(gw, Cout, Cin);
                    gwm.noalias() += gom * xm.transpose();
                }
            }
            if (gb) {
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < Cout; ++c) {
                        const S* o = go + (static_cast<std::int64_t>(n) * Cout + c) * hw;
                        S acc = 0;
                        for (std::int64_t i = 0; i < hw; ++i) acc += o[i];
                        gb[c] += acc;
                    }
            }
            return;
        }
        const int Cg = Cin / g, Cout_g = Cout / g;
        const std::int64_t cols = static_cast<std::int64_t>(Ho) * Wo;
        std::vector<S> col(static_cast<std::size_t>(Cg) * kh * kw * cols);
        std::vector<S> dcol(col.size());
        for (int n = 0; n < N; ++n) {
            for (int gi = 0; gi < g; ++gi) {
                const S* xg = x.data() + (static_cast<std::int64_t>(n) * Cin + gi * Cg) *
                                             static_cast<std::int64_t>(H) * W;
                CMatMap<S> wm(w.data() + static_cast<std::int64_t>(gi) * Cout_g * Cg * kh * kw,
                              Cout_g, Cg * kh * kw);
                CMatMap<S> gom(go + (static_cast<std::int64_t>(n) * Cout + gi * Cout_g) * cols,
                               Cout_g, cols);
                if (gw) {
                    im2col(xg, Cg, H, W, kh, kw, at.stride, at.pad, Ho, Wo, col.data());
                    CMatMap<S> cm(col.data(), Cg * kh * kw, cols);
                    MatMap<S> gwm(gw + static_cast<std::int64_t>(gi) * Cout_g * Cg * kh * kw,
                                  Cout_g, Cg * kh * kw);
                    gwm.noalias() += gom * cm.transpose();
                }
                if (gx) {
                    MatMap<S> dcm(dcol.data(), Cg * kh * kw, cols);
                    dcm.noalias() = wm.transpose() * gom;
                    S* gxg = gx + (static_cast<std::int64_t>(n) * Cin + gi * Cg) *
                                      static_cast<std::int64_t>(H) * W;
                    col2im_accum(dcol.data(), Cg, H, W, kh, kw, at.stride, at.pad, Ho, Wo, gxg);
                }
            }
        }
        if (gb) {
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < Cout; ++c) {
                    const S* o = go + (static_cast<std::int64_t>(n) * Cout + c) * cols;
                    S acc = 0;
                    for (std::int64_t i = 0; i < cols; ++i) acc += o[i];
                    gb[c] += acc;
                }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// linear

template <typename S>
Tensor<S> linear(Tape<S>* tape, Tensor<S> x, Tensor<S> w, const Tensor<S>* bias) {
    expect_ndim(x.shape(), 2, "linear input");
    expect_ndim(w.shape(), 2, "linear weight");
    const int N = x.dim(0), in = x.dim(1), out_f = w.dim(0);
    if (w.dim(1) != in)
        throw ShapeError("linear: weight axis 1 is " + std::to_string(w.dim(1)) +
                         ", input features are " + std::to_string(in));
    if (bias && (bias->ndim() != 1 || bias->dim(0) != out_f))
        throw ShapeError("linear: bias axis 0 must equal output features");
    Tensor<S> out = Tensor<S>::raw({N, out_f});
    {
        CMatMap<S> xm(x.data(), N, in), wm(w.data(), out_f, in);
        MatMap<S> om(out.data(), N, out_f);
        om.noalias() = xm * wm.transpose();
        if (bias)
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < out_f; ++o) out.data()[n * out_f + o] += bias->data()[o];
    }
    const bool track = x.requires_grad() || w.requires_grad() || (bias && bias->requires_grad());
    Tensor<S> bias_t = bias ? *bias : Tensor<S>();
    maybe_record(tape, track, out, [x, w, bias_t, out, N, in, out_f]() mutable {
        if (!out.grad_allocated()) return;
        CMatMap<S> gom(out.grad().data(), N, out_f);
        if (x.requires_grad()) {
            CMatMap<S> wm(w.data(), out_f, in);
            MatMap<S> gxm(x.grad().data(), N, in);
            gxm.noalias() += gom * wm;
        }
        if (w.requires_grad()) {
            CMatMap<S> xm(x.data(), N, in);
            MatMap<S> gwm(w.grad().data(), out_f, in);
            gwm.noalias() += gom.transpose() * xm;
        }
        if (bias_t.valid() && bias_t.requires_grad()) {
            auto& gb = bias_t.grad();
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < out_f; ++o) gb[o] += out.grad()[n * out_f + o];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// relu

template <typename S>
Tensor<S> relu(Tape<S>* tape, Tensor<S> x) {
    Tensor<S> out = Tensor<S>::raw(x.shape());
    const S* xd = x.data();
    S* od = out.data();
    for (std::int64_t i = 0; i < x.size(); ++i) od[i] = xd[i] > S(0) ? xd[i] : S(0);
    maybe_record(tape, x.requires_grad(), out, [x, out]() mutable {
        if (!out.grad_allocated()) return;
        auto& gx = x.grad();
        const auto& go = out.grad();
        const S* xd = x.data();
        for (std::int64_t i = 0; i < x.size(); ++i)
            gx[i] += xd[i] > S(0) ? go[i] : S(0);
    });
    return out;
}

// ---------------------------------------------------------------------------
// batchnorm2d

template <typename S>
Tensor<S> batchnorm2d(Tape<S>* tape, Tensor<S> x, Tensor<S> scale,
                      Tensor<S> shift, Tensor<S>& running_mean, Tensor<S>& running_var,
                      bool training, bool update_running, S momentum, S eps) {
    expect_ndim(x.shape(), 4, "batchnorm2d input");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (scale.size() != C || shift.size() != C || running_mean.size() != C ||
        running_var.size() != C)
        throw ShapeError("batchnorm2d: per-channel tensors must have extent " + std::to_string(C) +
                         " on axis 0");
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    const std::int64_t per_ch = static_cast<std::int64_t>(N) * plane;

    Tensor<S> out = Tensor<S>::raw(x.shape());
    std::vector<S> mean(C), invstd(C);
    if (training) {
        for (int c = 0; c < C; ++c) {
            double sum = 0, sq = 0;
            for (int n = 0; n < N; ++n) {
                const S* p = x.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    sum += p[i];
                    sq += static_cast<double>(p[i]) * p[i];
                }
            }
            const double m = sum / static_cast<double>(per_ch);
            const double v = std::max(0.0, sq / static_cast<double>(per_ch) - m * m);
            mean[c] = static_cast<S>(m);
            invstd[c] = static_cast<S>(1.0 / std::sqrt(v + static_cast<double>(eps)));
            if (update_running) {
                running_mean.data()[c] =
                    momentum * running_mean.data()[c] + (S(1) - momentum) * static_cast<S>(m);
                running_var.data()[c] =
                    momentum * running_var.data()[c] + (S(1) - momentum) * static_cast<S>(v);
            }
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[c] = running_mean.data()[c];
            invstd[c] = static_cast<S>(
                1.0 / std::sqrt(static_cast<double>(running_var.data()[c]) + static_cast<double>(eps)));
        }
    }
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const S* p = x.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            S* o = out.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            const S a = scale.data()[c] * invstd[c];
            const S b = shift.data()[c] - a * mean[c];
            for (std::int64_t i = 0; i < plane; ++i) o[i] = a * p[i] + b;
        }

    const bool track = x.requires_grad() || scale.requires_grad() || shift.requires_grad();
    Tensor<S> scale_t = scale, shift_t = shift;
    maybe_record(tape, track, out,
                 [x, scale_t, shift_t, out, mean, invstd, training, N, C, plane, per_ch]() mutable {
        if (!out.grad_allocated()) return;
        const S* go = out.grad().data();
        const S* xd = x.data();
        for (int c = 0; c < C; ++c) {
            const S m = mean[c], is = invstd[c], sc = scale_t.data()[c];
            double sum_g = 0, sum_gx = 0;  // sum(dy), sum(dy * xhat)
            for (int n = 0; n < N; ++n) {
                const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    const double g = go[base + i];
                    sum_g += g;
                    sum_gx += g * ((xd[base + i] - m) * is);
                }
            }
            if (scale_t.requires_grad()) scale_t.grad()[c] += static_cast<S>(sum_gx);
            if (shift_t.requires_grad()) shift_t.grad()[c] += static_cast<S>(sum_g);
            if (x.requires_grad()) {
                auto& gx = x.grad();
                if (training) {
                    const double inv_m = 1.0 / static_cast<double>(per_ch);
                    for (int n = 0; n < N; ++n) {
                        const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * plane;
                        for (std::int64_t i = 0; i < plane; ++i) {
                            const double xh = (xd[base + i] - m) * is;
                            gx[base + i] += static_cast<S>(
                                sc * is * (go[base + i] - inv_m * sum_g - xh * inv_m * sum_gx));
                        }
                    }
                } else {
                    const S a = sc * is;
                    for (int n = 0; n < N; ++n) {
                        const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * plane;
                        for (std::int64_t i = 0; i < plane; ++i) gx[base + i] += a * go[base + i];
                    }
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// pooling

template <typename S>
Tensor<S> maxpool2d(Tape<S>* tape, Tensor<S> x, int kernel, int stride, int pad) {
    expect_ndim(x.shape(), 4, "maxpool2d input");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = conv_out_extent(H, kernel, stride, pad);
    const int Wo = conv_out_extent(W, kernel, stride, pad);
    Tensor<S> out = Tensor<S>::raw({N, C, Ho, Wo});
    auto argmax = std::make_shared<std::vector<std::int32_t>>(out.size());
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    // Per-output valid window bounds, hoisted out of the scan.
    std::vector<int> h_lo(Ho), h_hi(Ho), w_lo(Wo), w_hi(Wo);
    for (int ho = 0; ho < Ho; ++ho) {
        h_lo[ho] = std::max(0, ho * stride - pad);
        h_hi[ho] = std::min(H - 1, ho * stride - pad + kernel - 1);
    }
    for (int wo = 0; wo < Wo; ++wo) {
        w_lo[wo] = std::max(0, wo * stride - pad);
        w_hi[wo] = std::min(W - 1, wo * stride - pad + kernel - 1);
    }
    std::int64_t oi = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const S* p = x.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            for (int ho = 0; ho < Ho; ++ho)
                for (int wo = 0; wo < Wo; ++wo, ++oi) {
                    S best = -std::numeric_limits<S>::infinity();
                    std::int32_t best_i = -1;
                    for (int hi = h_lo[ho]; hi <= h_hi[ho]; ++hi) {
                        const S* row = p + static_cast<std::int64_t>(hi) * W;
                        for (int wi = w_lo[wo]; wi <= w_hi[wo]; ++wi) {
                            if (row[wi] > best) {
                                best = row[wi];
                                best_i = static_cast<std::int32_t>(hi * W + wi);
                            }
                        }
                    }
                    out.data()[oi] = best;
                    (*argmax)[static_cast<std::size_t>(oi)] = best_i;
                }
        }
    maybe_record(tape, x.requires_grad(), out, [x, out, argmax, N, C, plane, Ho, Wo]() mutable {
        if (!out.grad_allocated()) return;
        auto& gx = x.grad();
        const auto& go = out.grad();
        std::int64_t oi = 0;
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * plane;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i, ++oi)
                    gx[base + (*argmax)[static_cast<std::size_t>(oi)]] += go[oi];
            }
    });
    return out;
}

template <typename S>
Tensor<S> avgpool2d(Tape<S>* tape, Tensor<S> x, int kernel, int stride, int pad) {
    expect_ndim(x.shape(), 4, "avgpool2d input");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = conv_out_extent(H, kernel, stride, pad);
    const int Wo = conv_out_extent(W, kernel, stride, pad);
    Tensor<S> out = Tensor<S>::raw({N, C, Ho, Wo});
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    std::vector<int> h_lo(Ho), h_hi(Ho), w_lo(Wo), w_hi(Wo);
    for (int ho = 0; ho < Ho; ++ho) {
        h_lo[ho] = std::max(0, ho * stride - pad);
        h_hi[ho] = std::min(H - 1, ho * stride - pad + kernel - 1);
    }
    for (int wo = 0; wo < Wo; ++wo) {
        w_lo[wo] = std::max(0, wo * stride - pad);
        w_hi[wo] = std::min(W - 1, wo * stride - pad + kernel - 1);
    }
    std::int64_t oi = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const S* p = x.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            for (int ho = 0; ho < Ho; ++ho) {
                const int ch = h_hi[ho] - h_lo[ho] + 1;
                for (int wo = 0; wo < Wo; ++wo, ++oi) {
                    S acc = 0;
                    for (int hi = h_lo[ho]; hi <= h_hi[ho]; ++hi) {
                        const S* row = p + static_cast<std::int64_t>(hi) * W;
                        for (int wi = w_lo[wo]; wi <= w_hi[wo]; ++wi) acc += row[wi];
                    }
                    out.data()[oi] = acc / static_cast<S>(ch * (w_hi[wo] - w_lo[wo] + 1));
                }
            }
        }
    maybe_record(tape, x.requires_grad(), out,
                 [x, out, N, C, H, W, plane, Ho, Wo, kernel, stride, pad]() mutable {
        if (!out.grad_allocated()) return;
        auto& gx = x.grad();
        const auto& go = out.grad();
        std::vector<int> h_lo(Ho), h_hi(Ho), w_lo(Wo), w_hi(Wo);
        for (int ho = 0; ho < Ho; ++ho) {
            h_lo[ho] = std::max(0, ho * stride - pad);
            h_hi[ho] = std::min(H - 1, ho * stride - pad + kernel - 1);
        }
        for (int wo = 0; wo < Wo; ++wo) {
            w_lo[wo] = std::max(0, wo * stride - pad);
            w_hi[wo] = std::min(W - 1, wo * stride - pad + kernel - 1);
        }
        std::int64_t oi = 0;
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * plane;
                for (int ho = 0; ho < Ho; ++ho) {
                    const int ch = h_hi[ho] - h_lo[ho] + 1;
                    for (int wo = 0; wo < Wo; ++wo, ++oi) {
                        const S g = go[oi] / static_cast<S>(ch * (w_hi[wo] - w_lo[wo] + 1));
                        for (int hi = h_lo[ho]; hi <= h_hi[ho]; ++hi) {
                            S* row = gx.data() + base + static_cast<std::int64_t>(hi) * W;
                            for (int wi = w_lo[wo]; wi <= w_hi[wo]; ++wi) row[wi] += g;
                        }
                    }
                }
            }
    });
    return out;
}

template <typename S>
Tensor<S> global_avg_pool(Tape<S>* tape, Tensor<S> x) {
    expect_ndim(x.shape(), 4, "global_avg_pool input");
    const int N = x.dim(0), C = x.dim(1);
    const std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    Tensor<S> out = Tensor<S>::raw({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const S* p = x.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            S acc = 0;
            for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
            out.data()[n * C + c] = acc / static_cast<S>(plane);
        }
    maybe_record(tape, x.requires_grad(), out, [x, out, N, C, plane]() mutable {
        if (!out.grad_allocated()) return;
        auto& gx = x.grad();
        const auto& go = out.grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const S g = go[n * C + c] / static_cast<S>(plane);
                S* p = gx.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) p[i] += g;
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// softmax / log_softmax over the last axis

namespace {
template <typename S>
void row_geometry(Tensor<S> x, std::int64_t& rows, std::int64_t& cols) {
    if (x.ndim() < 1) throw ShapeError("softmax: scalar input has no row axis");
    cols = x.dim(x.ndim() - 1);
    if (cols < 1) throw ShapeError("softmax: empty last axis");
    rows = x.size() / cols;
}
}  // namespace

template <typename S>
Tensor<S> softmax(Tape<S>* tape, Tensor<S> x) {
    std::int64_t rows, cols;
    row_geometry(x, rows, cols);
    Tensor<S> out = Tensor<S>::raw(x.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* p = x.data() + r * cols;
        S* o = out.data() + r * cols;
        S mx = p[0];
        for (std::int64_t i = 1; i < cols; ++i) mx = std::max(mx, p[i]);
        S sum = 0;
        for (std::int64_t i = 0; i < cols; ++i) {
            o[i] = std::exp(p[i] - mx);
            sum += o[i];
        }
        for (std::int64_t i = 0; i < cols; ++i) o[i] /= sum;
    }
    maybe_record(tape, x.requires_grad(), out, [x, out, rows, cols]() mutable {
        if (!out.grad_allocated()) return;
        auto& gx = x.grad();
        const auto& go = out.grad();
        const S* od = out.data();
        for (std::int64_t r = 0; r < rows; ++r) {
            const std::int64_t base = r * cols;
            S dot = 0;
            for (std::int64_t i = 0; i < cols; ++i) dot += go[base + i] * od[base + i];
            for (std::int64_t i = 0; i < cols; ++i)
                gx[base + i] += od[base + i] * (go[base + i] - dot);
        }
    });
    return out;
}

template <typename S>
Tensor<S> log_softmax(Tape<S>* tape, Tensor<S> x) {
    std::int64_t rows, cols;
    row_geometry(x, rows, cols);
    Tensor<S> out = Tensor<S>::raw(x.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* p = x.data() + r * cols;
        S* o = out.data() + r * cols;
        S mx = p[0];
        for (std::int64_t i = 1; i < cols; ++i) mx = std::max(mx, p[i]);
        S sum = 0;
        for (std::int64_t i = 0; i < cols; ++i) sum += std::exp(p[i] - mx);
        const S lse = mx + std::log(sum);
        for (std::int64_t i = 0; i < cols; ++i) o[i] = p[i] - lse;
    }
    maybe_record(tape, x.requires_grad(), out, [x, out, rows, cols]() mutable {
        if (!out.grad_allocated()) return;
        auto& gx = x.grad();
        const auto& go = out.grad();
        const S* od = out.data();
        for (std::int64_t r = 0; r < rows; ++r) {
            const std::int64_t base = r * cols;
            S gsum = 0;
            for (std::int64_t i = 0; i < cols; ++i) gsum += go[base + i];
            for (std::int64_t i = 0; i < cols; ++i)
                gx[base + i] += go[base + i] - std::exp(od[base + i]) * gsum;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// concat_channels

template <typename S>
Tensor<S> concat_channels(Tape<S>* tape, std::vector<Tensor<S>> xs) {
    if (xs.empty()) throw ShapeError("concat_channels: no inputs");
    expect_ndim(xs[0].shape(), 4, "concat_channels input");
    const int N = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
    int Ctot = 0;
    for (const auto& t : xs) {
        expect_ndim(t.shape(), 4, "concat_channels input");
        if (t.dim(0) != N || t.dim(2) != H || t.dim(3) != W)
            throw ShapeError("concat_channels: inputs disagree outside axis 1: " +
                             shape_str(xs[0].shape()) + " vs " + shape_str(t.shape()));
        Ctot += t.dim(1);
    }
    Tensor<S> out = Tensor<S>::raw({N, Ctot, H, W});
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        std::int64_t coff = 0;
        for (const auto& t : xs) {
            const std::int64_t len = static_cast<std::int64_t>(t.dim(1)) * plane;
            std::memcpy(out.data() + (static_cast<std::int64_t>(n) * Ctot) * plane + coff * plane,
                        t.data() + static_cast<std::int64_t>(n) * len, sizeof(S) * len);
            coff += t.dim(1);
        }
    }
    maybe_record(tape, any_requires_grad(xs), out, [xs, out, N, Ctot, plane]() mutable {
        if (!out.grad_allocated()) return;
        const auto& go = out.grad();
        for (int n = 0; n < N; ++n) {
            std::int64_t coff = 0;
            for (auto& t : xs) {
                const std::int64_t len = static_cast<std::int64_t>(t.dim(1)) * plane;
                if (t.requires_grad()) {
                    Tensor<S> tt = t;
                    S* g = tt.grad().data() + static_cast<std::int64_t>(n) * len;
                    const S* src =
                        go.data() + (static_cast<std::int64_t>(n) * Ctot + coff) * plane;
                    for (std::int64_t i = 0; i < len; ++i) g[i] += src[i];
                }
                coff += t.dim(1);
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// add / scalar_mul / weighted_sum / mul

template <typename S>
Tensor<S> add(Tape<S>* tape, Tensor<S> a, Tensor<S> b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shapes differ " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::raw(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* o = out.data();
    for (std::int64_t i = 0; i < a.size(); ++i) o[i] = pa[i] + pb[i];
    maybe_record(tape, a.requires_grad() || b.requires_grad(), out, [a, b, out]() mutable {
        if (!out.grad_allocated()) return;
        const auto& go = out.grad();
        if (a.requires_grad()) {
            auto& ga = a.grad();
            for (std::int64_t i = 0; i < a.size(); ++i) ga[i] += go[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            for (std::int64_t i = 0; i < b.size(); ++i) gb[i] += go[i];
        }
    });
    return out;
}

template <typename S>
Tensor<S> scalar_mul(Tape<S>* tape, Tensor<S> x, S s) {
    Tensor<S> out = Tensor<S>::raw(x.shape());
    const S* p = x.data();
    S* o = out.data();
    for (std::int64_t i = 0; i < x.size(); ++i) o[i] = s * p[i];
    maybe_record(tape, x.requires_grad(), out, [x, out, s]() mutable {
        if (!out.grad_allocated()) return;
        auto& gx = x.grad();
        const auto& go = out.grad();
        for (std::int64_t i = 0; i < x.size(); ++i) gx[i] += s * go[i];
    });
    return out;
}

template <typename S>
Tensor<S> weighted_sum(Tape<S>* tape, std::vector<Tensor<S>> xs, Tensor<S> w) {
    if (xs.empty()) throw ShapeError("weighted_sum: no inputs");
    const int k = static_cast<int>(xs.size());
    const int N = xs[0].dim(0);
    for (const auto& t : xs)
        if (t.shape() != xs[0].shape())
            throw ShapeError("weighted_sum: input shapes differ: " + shape_str(xs[0].shape()) +
                             " vs " + shape_str(t.shape()));
    if (w.ndim() != 2 || w.dim(0) != N || w.dim(1) != k)
        throw ShapeError("weighted_sum: weights must be (" + std::to_string(N) + "," +
                         std::to_string(k) + "), got " + shape_str(w.shape()));
    const std::int64_t rest = xs[0].size() / N;
    Tensor<S> out = Tensor<S>::raw(xs[0].shape());
    for (int b = 0; b < k; ++b) {
        const S* xb = xs[static_cast<std::size_t>(b)].data();
        for (int n = 0; n < N; ++n) {
            const S wv = w.data()[n * k + b];
            const S* src = xb + static_cast<std::int64_t>(n) * rest;
            S* dst = out.data() + static_cast<std::int64_t>(n) * rest;
            if (b == 0) {
                for (std::int64_t i = 0; i < rest; ++i) dst[i] = wv * src[i];
            } else {
                for (std::int64_t i = 0; i < rest; ++i) dst[i] += wv * src[i];
            }
        }
    }
    const bool track = any_requires_grad(xs) || w.requires_grad();
    maybe_record(tape, track, out, [xs, w, out, N, k, rest]() mutable {
        if (!out.grad_allocated()) return;
        const auto& go = out.grad();
        for (int b = 0; b < k; ++b) {
            Tensor<S> xb = xs[static_cast<std::size_t>(b)];
            for (int n = 0; n < N; ++n) {
                const S* g = go.data() + static_cast<std::int64_t>(n) * rest;
                const S* xv = xb.data() + static_cast<std::int64_t>(n) * rest;
                if (w.requires_grad()) {
                    S dot = 0;
                    for (std::int64_t i = 0; i < rest; ++i) dot += g[i] * xv[i];
                    Tensor<S> wt = w;
                    wt.grad()[n * k + b] += dot;
                }
                if (xb.requires_grad()) {
                    const S wv = w.data()[n * k + b];
                    S* gx = xb.grad().data() + static_cast<std::int64_t>(n) * rest;
                    for (std::int64_t i = 0; i < rest; ++i) gx[i] += wv * g[i];
                }
            }
        }
    });
    return out;
}

namespace {
enum class MulCase { exact, scalar, last_one, tail };

template <typename S>
MulCase classify_mul(Tensor<S> a, Tensor<S> b) {
    if (a.shape() == b.shape()) return MulCase::exact;
    if (b.size() == 1) return MulCase::scalar;
    if (b.ndim() == a.ndim() && b.dim(b.ndim() - 1) == 1) {
        bool ok = true;
        for (int i = 0; i + 1 < a.ndim(); ++i) ok = ok && a.dim(i) == b.dim(i);
        if (ok) return MulCase::last_one;
    }
    if (b.ndim() == a.ndim() - 1) {
        bool ok = true;
        for (int i = 1; i < a.ndim(); ++i) ok = ok && a.dim(i) == b.dim(i - 1);
        if (ok) return MulCase::tail;
    }
    throw ShapeError("mul: cannot broadcast " + shape_str(b.shape()) + " against " +
                     shape_str(a.shape()));
}
}  // namespace

template <typename S>
Tensor<S> mul(Tape<S>* tape, Tensor<S> a, Tensor<S> b) {
    const MulCase mc = classify_mul(a, b);
    Tensor<S> out = Tensor<S>::raw(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* o = out.data();
    const std::int64_t n = a.size();
    const std::int64_t last = a.ndim() > 0 ? a.dim(a.ndim() - 1) : 1;
    const std::int64_t tail_len = b.size();
    switch (mc) {
        case MulCase::exact:
            for (std::int64_t i = 0; i < n; ++i) o[i] = pa[i] * pb[i];
            break;
        case MulCase::scalar:
            for (std::int64_t i = 0; i < n; ++i) o[i] = pa[i] * pb[0];
            break;
        case MulCase::last_one:
            for (std::int64_t i = 0; i < n; ++i) o[i] = pa[i] * pb[i / last];
            break;
        case MulCase::tail:
            for (std::int64_t i = 0; i < n; ++i) o[i] = pa[i] * pb[i % tail_len];
            break;
    }
    maybe_record(tape, a.requires_grad() || b.requires_grad(), out,
                 [a, b, out, mc, n, last, tail_len]() mutable {
        if (!out.grad_allocated()) return;
        const auto& go = out.grad();
        const S* pa = a.data();
        const S* pb = b.data();
        if (a.requires_grad()) {
            auto& ga = a.grad();
            switch (mc) {
                case MulCase::exact:
                    for (std::int64_t i = 0; i < n; ++i) ga[i] += go[i] * pb[i];
                    break;
                case MulCase::scalar:
                    for (std::int64_t i = 0; i < n; ++i) ga[i] += go[i] * pb[0];
                    break;
                case MulCase::last_one:
                    for (std::int64_t i = 0; i < n; ++i) ga[i] += go[i] * pb[i / last];
                    break;
                case MulCase::tail:
                    for (std::int64_t i = 0; i < n; ++i) ga[i] += go[i] * pb[i % tail_len];
                    break;
            }
        }
        if (b.requires_grad()) {
            Tensor<S> bt = b;
            auto& gb = bt.grad();
            switch (mc) {
                case MulCase::exact:
                    for (std::int64_t i = 0; i < n; ++i) gb[i] += go[i] * pa[i];
                    break;
                case MulCase::scalar:
                    for (std::int64_t i = 0; i < n; ++i) gb[0] += go[i] * pa[i];
                    break;
                case MulCase::last_one:
                    for (std::int64_t i = 0; i < n; ++i) gb[i / last] += go[i] * pa[i];
                    break;
                case MulCase::tail:
                    for (std::int64_t i = 0; i < n; ++i) gb[i % tail_len] += go[i] * pa[i];
                    break;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// log / reductions / row ops

template <typename S>
Tensor<S> log_elem(Tape<S>* tape, Tensor<S> x) {
    Tensor<S> out = Tensor<S>::raw(x.shape());
    const S* p = x.data();
    S* o = out.data();
    for (std::int64_t i = 0; i < x.size(); ++i) {
        if (!(p[i] > S(0)))
            throw NumericError("log: input element " + std::to_string(i) + " is not positive (" +
                               std::to_string(static_cast<double>(p[i])) + ")");
        o[i] = std::log(p[i]);
    }
    maybe_record(tape, x.requires_grad(), out, [x, out]() mutable {
        if (!out.grad_allocated()) return;
        auto& gx = x.grad();
        const auto& go = out.grad();
        const S* p = x.data();
        for (std::int64_t i = 0; i < x.size(); ++i) gx[i] += go[i] / p[i];
    });
    return out;
}

template <typename S>
Tensor<S> sum_all(Tape<S>* tape, Tensor<S> x) {
    Tensor<S> out({1});
    S acc = 0;
    const S* p = x.data();
    for (std::int64_t i = 0; i < x.size(); ++i) acc += p[i];
    out.data()[0] = acc;
    maybe_record(tape, x.requires_grad(), out, [x, out]() mutable {
        if (!out.grad_allocated()) return;
        auto& gx = x.grad();
        const S g = out.grad()[0];
        for (std::int64_t i = 0; i < x.size(); ++i) gx[i] += g;
    });
    return out;
}

template <typename S>
Tensor<S> sum_per_instance(Tape<S>* tape, Tensor<S> x) {
    if (x.ndim() < 1) throw ShapeError("sum_per_instance: input has no batch axis");
    const int N = x.dim(0);
    const std::int64_t rest = N > 0 ? x.size() / N : 0;
    Tensor<S> out = Tensor<S>::raw({N});
    for (int n = 0; n < N; ++n) {
        const S* p = x.data() + static_cast<std::int64_t>(n) * rest;
        S acc = 0;
        for (std::int64_t i = 0; i < rest; ++i) acc += p[i];
        out.data()[n] = acc;
    }
    maybe_record(tape, x.requires_grad(), out, [x, out, N, rest]() mutable {
        if (!out.grad_allocated()) return;
        auto& gx = x.grad();
        const auto& go = out.grad();
        for (int n = 0; n < N; ++n) {
            S* g = gx.data() + static_cast<std::int64_t>(n) * rest;
            for (std::int64_t i = 0; i < rest; ++i) g[i] += go[n];
        }
    });
    return out;
}

template <typename S>
Tensor<S> row_renormalize(Tape<S>* tape, Tensor<S> x) {
    std::int64_t rows, cols;
    row_geometry(x, rows, cols);
    Tensor<S> out = Tensor<S>::raw(x.shape());
    std::vector<S> sums(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* p = x.data() + r * cols;
        S s = 0;
        for (std::int64_t i = 0; i < cols; ++i) s += p[i];
        if (s == S(0))
            throw NumericError("row_renormalize: row " + std::to_string(r) + " sums to zero");
        sums[static_cast<std::size_t>(r)] = s;
        S* o = out.data() + r * cols;
        for (std::int64_t i = 0; i < cols; ++i) o[i] = p[i] / s;
    }
    maybe_record(tape, x.requires_grad(), out, [x, out, sums, rows, cols]() mutable {
        if (!out.grad_allocated()) return;
        auto& gx = x.grad();
        const auto& go = out.grad();
        const S* od = out.data();
        for (std::int64_t r = 0; r < rows; ++r) {
            const std::int64_t base = r * cols;
            S dot = 0;
            for (std::int64_t i = 0; i < cols; ++i) dot += go[base + i] * od[base + i];
            const S inv = S(1) / sums[static_cast<std::size_t>(r)];
            for (std::int64_t i = 0; i < cols; ++i) gx[base + i] += (go[base + i] - dot) * inv;
        }
    });
    return out;
}

template <typename S>
Tensor<S> select_row(Tape<S>* tape, Tensor<S> x, int row) {
    expect_ndim(x.shape(), 3, "select_row input");
    const int N = x.dim(0), C = x.dim(1), K = x.dim(2);
    if (row < 0 || row >= C)
        throw ShapeError("select_row: index " + std::to_string(row) + " out of range on axis 1 (" +
                         std::to_string(C) + ")");
    Tensor<S> out = Tensor<S>::raw({N, K});
    for (int n = 0; n < N; ++n)
        std::memcpy(out.data() + static_cast<std::int64_t>(n) * K,
                    x.data() + (static_cast<std::int64_t>(n) * C + row) * K, sizeof(S) * K);
    maybe_record(tape, x.requires_grad(), out, [x, out, row, N, C, K]() mutable {
        if (!out.grad_allocated()) return;
        auto& gx = x.grad();
        const auto& go = out.grad();
        for (int n = 0; n < N; ++n) {
            S* g = gx.data() + (static_cast<std::int64_t>(n) * C + row) * K;
            const S* src = go.data() + static_cast<std::int64_t>(n) * K;
            for (int i = 0; i < K; ++i) g[i] += src[i];
        }
    });
    return out;
}

template <typename S>
Tensor<S> nll_loss(Tape<S>* tape, Tensor<S> logp, const std::vector<int>& labels) {
    expect_ndim(logp.shape(), 2, "nll_loss input");
    const int N = logp.dim(0), K = logp.dim(1);
    if (static_cast<int>(labels.size()) != N)
        throw ShapeError("nll_loss: label count " + std::to_string(labels.size()) +
                         " does not match batch " + std::to_string(N));
    for (int n = 0; n < N; ++n)
        if (labels[static_cast<std::size_t>(n)] < 0 || labels[static_cast<std::size_t>(n)] >= K)
            throw DataError("nll_loss: label " + std::to_string(labels[static_cast<std::size_t>(n)]) +
                            " out of range [0," + std::to_string(K) + ") at instance " +
                            std::to_string(n));
    Tensor<S> out({1});
    S acc = 0;
    for (int n = 0; n < N; ++n) acc -= logp.data()[n * K + labels[static_cast<std::size_t>(n)]];
    out.data()[0] = acc / static_cast<S>(N);
    maybe_record(tape, logp.requires_grad(), out, [logp, out, labels, N, K]() mutable {
        if (!out.grad_allocated()) return;
        auto& gx = logp.grad();
        const S g = out.grad()[0] / static_cast<S>(N);
        for (int n = 0; n < N; ++n) gx[n * K + labels[static_cast<std::size_t>(n)]] -= g;
    });
    return out;
}

template <typename S>
Tensor<S> crop2d(Tape<S>* tape, Tensor<S> x, int top, int left) {
    expect_ndim(x.shape(), 4, "crop2d input");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (top < 0 || left < 0 || top >= H || left >= W)
        throw ShapeError("crop2d: offsets (" + std::to_string(top) + "," + std::to_string(left) +
                         ") out of range for plane " + std::to_string(H) + "x" + std::to_string(W));
    const int Ho = H - top, Wo = W - left;
    Tensor<S> out = Tensor<S>::raw({N, C, Ho, Wo});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const S* p = x.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
            S* o = out.data() + (static_cast<std::int64_t>(n) * C + c) * Ho * Wo;
            for (int h = 0; h < Ho; ++h)
                std::memcpy(o + static_cast<std::int64_t>(h) * Wo,
                            p + (static_cast<std::int64_t>(h + top)) * W + left, sizeof(S) * Wo);
        }
    maybe_record(tape, x.requires_grad(), out, [x, out, N, C, H, W, Ho, Wo, top, left]() mutable {
        if (!out.grad_allocated()) return;
        auto& gx = x.grad();
        const auto& go = out.grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                S* g = gx.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
                const S* src = go.data() + (static_cast<std::int64_t>(n) * C + c) * Ho * Wo;
                for (int h = 0; h < Ho; ++h)
                    for (int w = 0; w < Wo; ++w)
                        g[(static_cast<std::int64_t>(h + top)) * W + left + w] +=
                            src[static_cast<std::int64_t>(h) * Wo + w];
            }
    });
    return out;
}


template <typename S>
Tensor<S> reshape(Tape<S>* tape, Tensor<S> x, std::vector<int> new_shape) {
    if (Tensor<S>::count(new_shape) != x.size())
        throw ShapeError("reshape: element count mismatch");
    Tensor<S> out = Tensor<S>::from(std::move(new_shape), x.values());
    maybe_record(tape, x.requires_grad(), out, [x, out]() mutable {
        if (!out.grad_allocated()) return;
        auto& gx = x.grad();
        const auto& go = out.grad();
        for (std::int64_t i = 0; i < x.size(); ++i) gx[i] += go[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// dispatcher

PrimitiveKind primitive_kind_from_string(const std::string& name) {
    static const std::map<std::string, PrimitiveKind> table = {
        {"identity", PrimitiveKind::identity},
        {"conv2d", PrimitiveKind::conv2d},
        {"linear", PrimitiveKind::linear},
        {"relu", PrimitiveKind::relu},
        {"batchnorm2d", PrimitiveKind::batchnorm2d},
        {"maxpool2d", PrimitiveKind::maxpool2d},
        {"avgpool2d", PrimitiveKind::avgpool2d},
        {"global_avg_pool", PrimitiveKind::global_avg_pool},
        {"softmax", PrimitiveKind::softmax},
        {"log_softmax", PrimitiveKind::log_softmax},
        {"concat_channels", PrimitiveKind::concat_channels},
        {"add", PrimitiveKind::add},
        {"scalar_mul", PrimitiveKind::scalar_mul},
        {"weighted_sum", PrimitiveKind::weighted_sum},
        {"mul", PrimitiveKind::mul},
        {"log", PrimitiveKind::log},
        {"sum_all", PrimitiveKind::sum_all},
        {"sum_per_instance", PrimitiveKind::sum_per_instance},
        {"row_renormalize", PrimitiveKind::row_renormalize},
        {"select_row", PrimitiveKind::select_row},
        {"nll_loss", PrimitiveKind::nll_loss},
        {"crop2d", PrimitiveKind::crop2d},
    };
    auto it = table.find(name);
    if (it == table.end()) throw Error("unsupported primitive kind: " + name);
    return it->second;
}

const char* primitive_kind_name(PrimitiveKind kind) {
    switch (kind) {
        case PrimitiveKind::identity: return "identity";
        case PrimitiveKind::conv2d: return "conv2d";
        case PrimitiveKind::linear: return "linear";
        case PrimitiveKind::relu: return "relu";
        case PrimitiveKind::batchnorm2d: return "batchnorm2d";
        case PrimitiveKind::maxpool2d: return "maxpool2d";
        case PrimitiveKind::avgpool2d: return "avgpool2d";
        case PrimitiveKind::global_avg_pool: return "global_avg_pool";
        case PrimitiveKind::softmax: return "softmax";
        case PrimitiveKind::log_softmax: return "log_softmax";
        case PrimitiveKind::concat_channels: return "concat_channels";
        case PrimitiveKind::add: return "add";
        case PrimitiveKind::scalar_mul: return "scalar_mul";
        case PrimitiveKind::weighted_sum: return "weighted_sum";
        case PrimitiveKind::mul: return "mul";
        case PrimitiveKind::log: return "log";
        case PrimitiveKind::sum_all: return "sum_all";
        case PrimitiveKind::sum_per_instance: return "sum_per_instance";
        case PrimitiveKind::row_renormalize: return "row_renormalize";
        case PrimitiveKind::select_row: return "select_row";
        case PrimitiveKind::nll_loss: return "nll_loss";
        case PrimitiveKind::crop2d: return "crop2d";
    }
    return "?";
}

template <typename S>
Tensor<S> forward_primitive(Tape<S>* tape, PrimitiveKind kind, std::vector<Tensor<S>> inputs,
                            const PrimAttrs& attrs) {
    auto need = [&](std::size_t n) {
        if (inputs.size() != n)
            throw ShapeError(std::string(primitive_kind_name(kind)) + ": expected " +
                             std::to_string(n) + " inputs, got " + std::to_string(inputs.size()));
    };
    switch (kind) {
        case PrimitiveKind::identity:
            need(1);
            return identity(tape, inputs[0]);
        case PrimitiveKind::conv2d:
            if (inputs.size() == 2) return conv2d(tape, inputs[0], inputs[1], static_cast<const Tensor<S>*>(nullptr), attrs.conv);
            need(3);
            return conv2d(tape, inputs[0], inputs[1], &inputs[2], attrs.conv);
        case PrimitiveKind::linear:
            if (inputs.size() == 2) return linear(tape, inputs[0], inputs[1], static_cast<const Tensor<S>*>(nullptr));
            need(3);
            return linear(tape, inputs[0], inputs[1], &inputs[2]);
        case PrimitiveKind::relu:
            need(1);
            return relu(tape, inputs[0]);
        case PrimitiveKind::batchnorm2d:
            need(5);
            return batchnorm2d(tape, inputs[0], inputs[1], inputs[2], inputs[3], inputs[4],
                               attrs.training, attrs.update_running, static_cast<S>(attrs.momentum),
                               static_cast<S>(attrs.eps));
        case PrimitiveKind::maxpool2d:
            need(1);
            return maxpool2d(tape, inputs[0], attrs.kernel, attrs.stride, attrs.pad);
        case PrimitiveKind::avgpool2d:
            need(1);
            return avgpool2d(tape, inputs[0], attrs.kernel, attrs.stride, attrs.pad);
        case PrimitiveKind::global_avg_pool:
            need(1);
            return global_avg_pool(tape, inputs[0]);
        case PrimitiveKind::softmax:
            need(1);
            return softmax(tape, inputs[0]);
        case PrimitiveKind::log_softmax:
            need(1);
            return log_softmax(tape, inputs[0]);
        case PrimitiveKind::concat_channels:
            return concat_channels(tape, inputs);
        case PrimitiveKind::add:
            need(2);
            return add(tape, inputs[0], inputs[1]);
        case PrimitiveKind::scalar_mul:
            need(1);
            return scalar_mul(tape, inputs[0], static_cast<S>(attrs.scalar));
        case PrimitiveKind::weighted_sum: {
            if (inputs.size() < 2) throw ShapeError("weighted_sum: need branches plus weights");
            Tensor<S> w = inputs.back();
            inputs.pop_back();
            return weighted_sum(tape, inputs, w);
        }
        case PrimitiveKind::mul:
            need(2);
            return mul(tape, inputs[0], inputs[1]);
        case PrimitiveKind::log:
            need(1);
            return log_elem(tape, inputs[0]);
        case PrimitiveKind::sum_all:
            need(1);
            return sum_all(tape, inputs[0]);
        case PrimitiveKind::sum_per_instance:
            need(1);
            return sum_per_instance(tape, inputs[0]);
        case PrimitiveKind::row_renormalize:
            need(1);
            return row_renormalize(tape, inputs[0]);
        case PrimitiveKind::select_row:
            need(1);
            return select_row(tape, inputs[0], attrs.row);
        case PrimitiveKind::nll_loss:
            need(1);
            return nll_loss(tape, inputs[0], attrs.labels);
        case PrimitiveKind::crop2d:
            need(1);
            return crop2d(tape, inputs[0], attrs.top, attrs.left);
    }
    throw Error("unsupported primitive kind id " + std::to_string(static_cast<int>(kind)));
}

// ---------------------------------------------------------------------------
// finite differences

template <typename S>
double finite_difference_check(PrimitiveKind kind, std::vector<Tensor<S>> inputs,
                               const PrimAttrs& attrs, double epsilon, Rng& rng) {
    if (epsilon <= 0) throw NumericError("finite_difference_check: epsilon must be positive");
    std::int64_t total = 0;
    for (const auto& t : inputs)
        if (t.requires_grad()) total += t.size();
    if (total > 10000)
        throw ShapeError("finite_difference_check: too many elements to perturb (" +
                         std::to_string(total) + " > 10000)");

    PrimAttrs at = attrs;
    at.update_running = false;  // keep the forward pure while perturbing

    auto run = [&](Tape<S>* tape) {
        std::vector<Tensor<S>> in = inputs;
        return forward_primitive(tape, kind, in, at);
    };

    Tensor<S> probe = run(nullptr);
    Tensor<S> proj(probe.shape());
    for (std::int64_t i = 0; i < proj.size(); ++i)
        proj.data()[i] = static_cast<S>(rng.uniform(-1.0, 1.0));

    auto objective = [&]() -> double {
        Tensor<S> o = run(nullptr);
        double acc = 0;
        for (std::int64_t i = 0; i < o.size(); ++i)
            acc += static_cast<double>(o.data()[i]) * static_cast<double>(proj.data()[i]);
        return acc;
    };

    // Analytic gradient of sum(out * proj).
    Tape<S> tape;
    for (auto& t : inputs) t.zero_grad();
    Tensor<S> obj = sum_all(&tape, mul(&tape, run(&tape), proj));
    tape.backward(obj);

    double max_err = 0;
    for (auto& t : inputs) {
        if (!t.requires_grad()) continue;
        const auto& g = t.grad();
        for (std::int64_t i = 0; i < t.size(); ++i) {
            const S keep = t.data()[i];
            t.data()[i] = keep + static_cast<S>(epsilon);
            const double fp = objective();
            t.data()[i] = keep - static_cast<S>(epsilon);
            const double fm = objective();
            t.data()[i] = keep;
            const double numeric = (fp - fm) / (2.0 * epsilon);
            const double analytic = g.empty() ? 0.0 : static_cast<double>(g[i]);
            if (!std::isfinite(numeric) || !std::isfinite(analytic))
                throw NumericError("finite_difference_check: non-finite gradient for " +
                                   std::string(primitive_kind_name(kind)));
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            max_err = std::max(max_err, std::abs(analytic - numeric) / denom);
        }
    }
    return max_err;
}

// ---------------------------------------------------------------------------
// explicit instantiations

#define DRNET_INSTANTIATE_OPS(S)                                                                  \
    template Tensor<S> identity<S>(Tape<S>*, Tensor<S>);                                   \
    template Tensor<S> conv2d<S>(Tape<S>*, Tensor<S>, Tensor<S>, const Tensor<S>*,  \
                                 const Conv2dAttrs&);                                             \
    template Tensor<S> linear<S>(Tape<S>*, Tensor<S>, Tensor<S>, const Tensor<S>*); \
    template Tensor<S> relu<S>(Tape<S>*, Tensor<S>);                                       \
    template Tensor<S> batchnorm2d<S>(Tape<S>*, Tensor<S>, Tensor<S>,               \
                                      Tensor<S>, Tensor<S>&, Tensor<S>&, bool, bool, S, S);\
    template Tensor<S> maxpool2d<S>(Tape<S>*, Tensor<S>, int, int, int);                   \
    template Tensor<S> avgpool2d<S>(Tape<S>*, Tensor<S>, int, int, int);                   \
    template Tensor<S> global_avg_pool<S>(Tape<S>*, Tensor<S>);                            \
    template Tensor<S> softmax<S>(Tape<S>*, Tensor<S>);                                    \
    template Tensor<S> log_softmax<S>(Tape<S>*, Tensor<S>);                                \
    template Tensor<S> concat_channels<S>(Tape<S>*, std::vector<Tensor<S>>);               \
    template Tensor<S> add<S>(Tape<S>*, Tensor<S>, Tensor<S>);                      \
    template Tensor<S> scalar_mul<S>(Tape<S>*, Tensor<S>, S);                              \
    template Tensor<S> weighted_sum<S>(Tape<S>*, std::vector<Tensor<S>>,                   \
                                       Tensor<S>);                                         \
    template Tensor<S> mul<S>(Tape<S>*, Tensor<S>, Tensor<S>);                      \
    template Tensor<S> log_elem<S>(Tape<S>*, Tensor<S>);                                   \
    template Tensor<S> sum_all<S>(Tape<S>*, Tensor<S>);                                    \
    template Tensor<S> sum_per_instance<S>(Tape<S>*, Tensor<S>);                           \
    template Tensor<S> row_renormalize<S>(Tape<S>*, Tensor<S>);                            \
    template Tensor<S> select_row<S>(Tape<S>*, Tensor<S>, int);                            \
    template Tensor<S> nll_loss<S>(Tape<S>*, Tensor<S>, const std::vector<int>&);          \
    template Tensor<S> crop2d<S>(Tape<S>*, Tensor<S>, int, int);                                  \
    template Tensor<S> reshape<S>(Tape<S>*, Tensor<S>, std::vector<int>);                         \
    template Tensor<S> forward_primitive<S>(Tape<S>*, PrimitiveKind, std::vector<Tensor<S>>,      \
                                            const PrimAttrs&);                                    \
    template double finite_difference_check<S>(PrimitiveKind, std::vector<Tensor<S>>,             \
                                               const PrimAttrs&, double, Rng&);

DRNET_INSTANTIATE_OPS(float)
DRNET_INSTANTIATE_OPS(double)

#undef DRNET_INSTANTIATE_OPS

}  // namespace drnet

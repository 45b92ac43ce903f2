#pragma once

#include <Eigen/Core>
#include <cmath>

#include "ccis/core/tensor.hpp"

// Differentiable operations. Conventions:
//  - image tensors are [N,C,H,W], token tensors [N,L,D], row-major
//  - convolutions run as im2col + GEMM (Eigen, sequential); batch loops are
//    OpenMP-parallel with per-sample scratch reduced in fixed order, so
//    results are bit-identical for any thread count
//  - backward closures skip work for parents that do not require grad

namespace ccis::ops {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<Mat<S>>;
template <class S>
using CMatMap = Eigen::Map<const Mat<S>>;

template <class S>
MatMap<S> as_mat(Array<S>& a, int64_t rows, int64_t cols) {
    return MatMap<S>(a.data(), rows, cols);
}
template <class S>
CMatMap<S> as_cmat(const Array<S>& a, int64_t rows, int64_t cols) {
    return CMatMap<S>(a.data(), rows, cols);
}

inline void check(bool cond, const char* msg) {
    if (!cond) throw ShapeError(msg);
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(Tensor<S> a, Tensor<S> b) {
    check(a.shape() == b.shape(), "add: shape mismatch");
    Array<S> out = a.val();
    const auto& bv = b.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    return Tensor<S>::op(std::move(out), {a, b}, [a, b](auto& self) mutable {
        const auto& g = self.grad;
        if (a.needs_grad()) {
            auto& ga = a.grad();
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (b.needs_grad()) {
            auto& gb = b.grad();
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
        }
    });
}

template <class S>
Tensor<S> sub(Tensor<S> a, Tensor<S> b) {
    check(a.shape() == b.shape(), "sub: shape mismatch");
    Array<S> out = a.val();
    const auto& bv = b.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    return Tensor<S>::op(std::move(out), {a, b}, [a, b](auto& self) mutable {
        const auto& g = self.grad;
        if (a.needs_grad()) {
            auto& ga = a.grad();
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (b.needs_grad()) {
            auto& gb = b.grad();
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
        }
    });
}

template <class S>
Tensor<S> mul(Tensor<S> a, Tensor<S> b) {
    check(a.shape() == b.shape(), "mul: shape mismatch");
    Array<S> out = a.val();
    const auto& bv = b.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    return Tensor<S>::op(std::move(out), {a, b}, [a, b](auto& self) mutable {
        const auto& g = self.grad;
        if (a.needs_grad()) {
            auto& ga = a.grad();
            const auto& bv2 = b.val();
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv2[i];
        }
        if (b.needs_grad()) {
            auto& gb = b.grad();
            const auto& av = a.val();
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

template <class S>
Tensor<S> scale(Tensor<S> a, S c) {
    Array<S> out = a.val();
    for (auto& x : out.v) x *= c;
    return Tensor<S>::op(std::move(out), {a}, [a, c](auto& self) mutable {
        if (!a.needs_grad()) return;
        auto& ga = a.grad();
        const auto& g = self.grad;
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * c;
    });
}

template <class S>
Tensor<S> add_scalar(Tensor<S> a, S c) {
    Array<S> out = a.val();
    for (auto& x : out.v) x += c;
    return Tensor<S>::op(std::move(out), {a}, [a](auto& self) mutable {
        if (!a.needs_grad()) return;
        auto& ga = a.grad();
        const auto& g = self.grad;
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
}

// y = x + k, k a non-differentiable array (additive masks etc).
template <class S>
Tensor<S> add_const(Tensor<S> a, const Array<S>& k) {
    check(a.shape() == k.shape, "add_const: shape mismatch");
    Array<S> out = a.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += k[i];
    return Tensor<S>::op(std::move(out), {a}, [a](auto& self) mutable {
        if (!a.needs_grad()) return;
        auto& ga = a.grad();
        const auto& g = self.grad;
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
}

// y = x .* k, k non-differentiable.
template <class S>
Tensor<S> mul_const(Tensor<S> a, Array<S> k) {
    check(a.shape() == k.shape, "mul_const: shape mismatch");
    Array<S> out = a.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= k[i];
    return Tensor<S>::op(std::move(out), {a}, [a, k = std::move(k)](auto& self) mutable {
        if (!a.needs_grad()) return;
        auto& ga = a.grad();
        const auto& g = self.grad;
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * k[i];
    });
}

template <class S>
Tensor<S> sigmoid(Tensor<S> a) {
    Array<S> out = a.val();
    for (auto& x : out.v) x = S(1) / (S(1) + std::exp(-x));
    Array<S> y = out;
    return Tensor<S>::op(std::move(out), {a}, [a, y = std::move(y)](auto& self) mutable {
        if (!a.needs_grad()) return;
        auto& ga = a.grad();
        const auto& g = self.grad;
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i] * (S(1) - y[i]);
    });
}

template <class S>
Tensor<S> silu(Tensor<S> a) {
    const auto& xv = a.val();
    Array<S> sig(xv.shape);
    Array<S> out(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) {
        sig[i] = S(1) / (S(1) + std::exp(-xv[i]));
        out[i] = xv[i] * sig[i];
    }
    return Tensor<S>::op(std::move(out), {a}, [a, sig = std::move(sig)](auto& self) mutable {
        if (!a.needs_grad()) return;
        auto& ga = a.grad();
        const auto& g = self.grad;
        const auto& xv2 = a.val();
        for (int64_t i = 0; i < g.numel(); ++i)
            ga[i] += g[i] * sig[i] * (S(1) + xv2[i] * (S(1) - sig[i]));
    });
}

template <class S>
Tensor<S> log_op(Tensor<S> a) {
    Array<S> out = a.val();
    for (auto& x : out.v) x = std::log(x);
    return Tensor<S>::op(std::move(out), {a}, [a](auto& self) mutable {
        if (!a.needs_grad()) return;
        auto& ga = a.grad();
        const auto& g = self.grad;
        const auto& xv = a.val();
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / xv[i];
    });
}

// Pass-through gradient on the closed interval [lo, hi], zero outside.
template <class S>
Tensor<S> clamp(Tensor<S> a, S lo, S hi) {
    Array<S> out = a.val();
    for (auto& x : out.v) x = std::min(hi, std::max(lo, x));
    return Tensor<S>::op(std::move(out), {a}, [a, lo, hi](auto& self) mutable {
        if (!a.needs_grad()) return;
        auto& ga = a.grad();
        const auto& g = self.grad;
        const auto& xv = a.val();
        for (int64_t i = 0; i < g.numel(); ++i)
            if (xv[i] >= lo && xv[i] <= hi) ga[i] += g[i];
    });
}

template <class S>
Tensor<S> clamp_min(Tensor<S> a, S lo) {
    Array<S> out = a.val();
    for (auto& x : out.v) x = std::max(lo, x);
    return Tensor<S>::op(std::move(out), {a}, [a, lo](auto& self) mutable {
        if (!a.needs_grad()) return;
        auto& ga = a.grad();
        const auto& g = self.grad;
        const auto& xv = a.val();
        for (int64_t i = 0; i < g.numel(); ++i)
            if (xv[i] >= lo) ga[i] += g[i];
    });
}

// ---------------------------------------------------------------------------
// structural
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(Tensor<S> a, Shape sh) {
    Array<S> out = a.val().reshaped(sh);
    return Tensor<S>::op(std::move(out), {a}, [a](auto& self) mutable {
        if (!a.needs_grad()) return;
        auto& ga = a.grad();
        const auto& g = self.grad;
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
}

template <class S>
Tensor<S> concat_ch(Tensor<S> a, Tensor<S> b) {
    const auto& av = a.val();
    const auto& bv = b.val();
    check(av.ndim() == 4 && bv.ndim() == 4, "concat_ch: want [N,C,H,W]");
    check(av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2) && av.dim(3) == bv.dim(3),
          "concat_ch: N/H/W mismatch");
    const int N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1), H = av.dim(2), W = av.dim(3);
    const int64_t hw = int64_t(H) * W;
    Array<S> out({N, Ca + Cb, H, W});
    for (int n = 0; n < N; ++n) {
        std::copy_n(av.data() + n * Ca * hw, Ca * hw, out.data() + int64_t(n) * (Ca + Cb) * hw);
        std::copy_n(bv.data() + n * Cb * hw, Cb * hw,
                    out.data() + int64_t(n) * (Ca + Cb) * hw + Ca * hw);
    }
    return Tensor<S>::op(std::move(out), {a, b}, [a, b, N, Ca, Cb, hw](auto& self) mutable {
        const auto& g = self.grad;
        for (int n = 0; n < N; ++n) {
            const S* gn = g.data() + int64_t(n) * (Ca + Cb) * hw;
            if (a.needs_grad()) {
                auto& ga = a.grad();
                S* dst = ga.data() + int64_t(n) * Ca * hw;
                for (int64_t i = 0; i < Ca * hw; ++i) dst[i] += gn[i];
            }
            if (b.needs_grad()) {
                auto& gb = b.grad();
                S* dst = gb.data() + int64_t(n) * Cb * hw;
                for (int64_t i = 0; i < Cb * hw; ++i) dst[i] += gn[Ca * hw + i];
            }
        }
    });
}

// [N,C,H,W] -> [N,H*W,C]
template <class S>
Tensor<S> nchw_to_tokens(Tensor<S> a) {
    const auto& av = a.val();
    check(av.ndim() == 4, "nchw_to_tokens: want [N,C,H,W]");
    const int N = av.dim(0), C = av.dim(1);
    const int64_t hw = int64_t(av.dim(2)) * av.dim(3);
    Array<S> out({N, int(hw), C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const S* src = av.data() + (int64_t(n) * C + c) * hw;
            S* dst = out.data() + int64_t(n) * hw * C + c;
            for (int64_t p = 0; p < hw; ++p) dst[p * C] = src[p];
        }
    return Tensor<S>::op(std::move(out), {a}, [a, N, C, hw](auto& self) mutable {
        if (!a.needs_grad()) return;
        auto& ga = a.grad();
        const auto& g = self.grad;
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                S* dst = ga.data() + (int64_t(n) * C + c) * hw;
                const S* src = g.data() + int64_t(n) * hw * C + c;
                for (int64_t p = 0; p < hw; ++p) dst[p] += src[p * C];
            }
    });
}

// [N,H*W,C] -> [N,C,H,W]
template <class S>
Tensor<S> tokens_to_nchw(Tensor<S> a, int H, int W) {
    const auto& av = a.val();
    check(av.ndim() == 3 && av.dim(1) == H * W, "tokens_to_nchw: bad token count");
    const int N = av.dim(0), C = av.dim(2);
    const int64_t hw = int64_t(H) * W;
    Array<S> out({N, C, H, W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            S* dst = out.data() + (int64_t(n) * C + c) * hw;
            const S* src = av.data() + int64_t(n) * hw * C + c;
            for (int64_t p = 0; p < hw; ++p) dst[p] = src[p * C];
        }
    return Tensor<S>::op(std::move(out), {a}, [a, N, C, hw](auto& self) mutable {
        if (!a.needs_grad()) return;
        auto& ga = a.grad();
        const auto& g = self.grad;
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const S* src = g.data() + (int64_t(n) * C + c) * hw;
                S* dst = ga.data() + int64_t(n) * hw * C + c;
                for (int64_t p = 0; p < hw; ++p) dst[p * C] += src[p];
            }
    });
}

template <class S>
Tensor<S> upsample_nearest2(Tensor<S> a) {
    const auto& av = a.val();
    check(av.ndim() == 4, "upsample_nearest2: want [N,C,H,W]");
    const int N = av.dim(0), C = av.dim(1), H = av.dim(2), W = av.dim(3);
    Array<S> out({N, C, 2 * H, 2 * W});
    for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
        const S* src = av.data() + nc * H * W;
        S* dst = out.data() + nc * 4 * H * W;
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                const S v = src[i * W + j];
                S* d = dst + (2 * i) * 2 * W + 2 * j;
                d[0] = v;
                d[1] = v;
                d[2 * W] = v;
                d[2 * W + 1] = v;
            }
    }
    return Tensor<S>::op(std::move(out), {a}, [a, N, C, H, W](auto& self) mutable {
        if (!a.needs_grad()) return;
        auto& ga = a.grad();
        const auto& g = self.grad;
        for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
            S* dst = ga.data() + nc * H * W;
            const S* src = g.data() + nc * 4 * H * W;
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    const S* s = src + (2 * i) * 2 * W + 2 * j;
                    dst[i * W + j] += s[0] + s[1] + s[2 * W] + s[2 * W + 1];
                }
        }
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// y[n,l,:] = W x[n,l,:] + b     x:[N,L,Ci] W:[Co,Ci] b:[Co] (optional)
template <class S>
Tensor<S> linear_tokens(Tensor<S> x, Tensor<S> w, Tensor<S> b = {}) {
    const auto& xv = x.val();
    const auto& wv = w.val();
    check(xv.ndim() == 3 && wv.ndim() == 2, "linear_tokens: want [N,L,Ci],[Co,Ci]");
    const int N = xv.dim(0), L = xv.dim(1), Ci = xv.dim(2), Co = wv.dim(0);
    check(wv.dim(1) == Ci, "linear_tokens: Ci mismatch");
    Array<S> out({N, L, Co});
    {
        auto wm = as_cmat(wv, Co, Ci);
#pragma omp parallel for schedule(static)
        for (int n = 0; n < N; ++n) {
            auto xm = CMatMap<S>(xv.data() + int64_t(n) * L * Ci, L, Ci);
            auto ym = MatMap<S>(out.data() + int64_t(n) * L * Co, L, Co);
            ym.noalias() = xm * wm.transpose();
        }
        if (b.defined()) {
            const auto& bv = b.val();
            for (int64_t r = 0; r < int64_t(N) * L; ++r)
                for (int c = 0; c < Co; ++c) out[r * Co + c] += bv[c];
        }
    }
    std::vector<Tensor<S>> parents = {x, w};
    if (b.defined()) parents.push_back(b);
    return Tensor<S>::op(std::move(out), parents, [x, w, b, N, L, Ci, Co](auto& self) mutable {
        const auto& g = self.grad;
        if (x.needs_grad()) {
            auto& gx = x.grad();
            auto wm = as_cmat(w.val(), Co, Ci);
#pragma omp parallel for schedule(static)
            for (int n = 0; n < N; ++n) {
                auto gym = CMatMap<S>(g.data() + int64_t(n) * L * Co, L, Co);
                auto gxm = MatMap<S>(gx.data() + int64_t(n) * L * Ci, L, Ci);
                gxm.noalias() += gym * wm;
            }
        }
        if (w.needs_grad()) {
            auto& gw = w.grad();
            auto gwm = as_mat(gw, Co, Ci);
            Mat<S> acc = Mat<S>::Zero(Co, Ci);
            for (int n = 0; n < N; ++n) {
                auto gym = CMatMap<S>(g.data() + int64_t(n) * L * Co, L, Co);
                auto xm = CMatMap<S>(x.val().data() + int64_t(n) * L * Ci, L, Ci);
                acc.noalias() += gym.transpose() * xm;
            }
            gwm += acc;
        }
        if (b.defined() && b.needs_grad()) {
            auto& gb = b.grad();
            for (int64_t r = 0; r < int64_t(N) * L; ++r)
                for (int c = 0; c < Co; ++c) gb[c] += g[r * Co + c];
        }
    });
}

// y[n,:] = W x[n,:] + b via the token path.
template <class S>
Tensor<S> linear2d(Tensor<S> x, Tensor<S> w, Tensor<S> b = {}) {
    const auto& xv = x.val();
    check(xv.ndim() == 2, "linear2d: want [N,Ci]");
    const int N = xv.dim(0), Ci = xv.dim(1);
    auto x3 = reshape(x, {1, N, Ci});
    auto y3 = linear_tokens(x3, w, b);
    return reshape(y3, {N, y3.val().dim(2)});
}

// Batched matmul: a [N,R,K] x b [N,K,C] -> [N,R,C]; with trans_b, b is [N,C,K].
template <class S>
Tensor<S> bmm(Tensor<S> a, Tensor<S> b, bool trans_b = false) {
    const auto& av = a.val();
    const auto& bv = b.val();
    check(av.ndim() == 3 && bv.ndim() == 3 && av.dim(0) == bv.dim(0), "bmm: want matching [N,..]");
    const int N = av.dim(0), R = av.dim(1), K = av.dim(2);
    const int C = trans_b ? bv.dim(1) : bv.dim(2);
    check(trans_b ? (bv.dim(2) == K) : (bv.dim(1) == K), "bmm: inner dim mismatch");
    Array<S> out({N, R, C});
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
        auto am = CMatMap<S>(av.data() + int64_t(n) * R * K, R, K);
        auto ym = MatMap<S>(out.data() + int64_t(n) * R * C, R, C);
        if (trans_b) {
            auto bm = CMatMap<S>(bv.data() + int64_t(n) * C * K, C, K);
            ym.noalias() = am * bm.transpose();
        } else {
            auto bm = CMatMap<S>(bv.data() + int64_t(n) * K * C, K, C);
            ym.noalias() = am * bm;
        }
    }
    return Tensor<S>::op(std::move(out), {a, b}, [a, b, trans_b, N, R, K, C](auto& self) mutable {
        const auto& g = self.grad;
        if (a.needs_grad()) {
            auto& ga = a.grad();
#pragma omp parallel for schedule(static)
            for (int n = 0; n < N; ++n) {
                auto gym = CMatMap<S>(g.data() + int64_t(n) * R * C, R, C);
                auto gam = MatMap<S>(ga.data() + int64_t(n) * R * K, R, K);
                if (trans_b) {
                    auto bm = CMatMap<S>(b.val().data() + int64_t(n) * C * K, C, K);
                    gam.noalias() += gym * bm;
                } else {
                    auto bm = CMatMap<S>(b.val().data() + int64_t(n) * K * C, K, C);
                    gam.noalias() += gym * bm.transpose();
                }
            }
        }
        if (b.needs_grad()) {
            auto& gb = b.grad();
#pragma omp parallel for schedule(static)
            for (int n = 0; n < N; ++n) {
                auto gym = CMatMap<S>(g.data() + int64_t(n) * R * C, R, C);
                auto am = CMatMap<S>(a.val().data() + int64_t(n) * R * K, R, K);
                if (trans_b) {
                    auto gbm = MatMap<S>(gb.data() + int64_t(n) * C * K, C, K);
                    gbm.noalias() += gym.transpose() * am;
                } else {
                    auto gbm = MatMap<S>(gb.data() + int64_t(n) * K * C, K, C);
                    gbm.noalias() += am.transpose() * gym;
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

template <class S>
void im2col(const S* img, int C, int H, int W, int k, int stride, int pad, S* cols, int Ho, int Wo) {
    const int64_t plane = int64_t(Ho) * Wo;
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                S* dst = cols + ((int64_t(c) * k + ky) * k + kx) * plane;
                const S* src = img + int64_t(c) * H * W;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        std::fill_n(dst + int64_t(oy) * Wo, Wo, S(0));
                        continue;
                    }
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        dst[int64_t(oy) * Wo + ox] = (ix >= 0 && ix < W) ? src[int64_t(iy) * W + ix] : S(0);
                    }
                }
            }
}

// Adjoint of im2col: scatter-accumulate columns back into the image.
template <class S>
void col2im(const S* cols, int C, int H, int W, int k, int stride, int pad, S* img, int Ho, int Wo) {
    const int64_t plane = int64_t(Ho) * Wo;
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const S* src = cols + ((int64_t(c) * k + ky) * k + kx) * plane;
                S* dst = img + int64_t(c) * H * W;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) dst[int64_t(iy) * W + ix] += src[int64_t(oy) * Wo + ox];
                    }
                }
            }
}

inline int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// x [N,Ci,H,W] * w [Co,Ci,k,k] + b [Co] -> [N,Co,Ho,Wo]
template <class S>
Tensor<S> conv2d(Tensor<S> x, Tensor<S> w, Tensor<S> b, int stride, int pad) {
    const auto& xv = x.val();
    const auto& wv = w.val();
    check(xv.ndim() == 4 && wv.ndim() == 4, "conv2d: want [N,Ci,H,W],[Co,Ci,k,k]");
    check(xv.dim(1) == wv.dim(1), "conv2d: channel mismatch");
    const int N = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Co = wv.dim(0), k = wv.dim(2);
    const int Ho = conv_out_dim(H, k, stride, pad), Wo = conv_out_dim(W, k, stride, pad);
    check(Ho > 0 && Wo > 0, "conv2d: output collapses to zero");
    const int64_t ck = int64_t(Ci) * k * k, plane = int64_t(Ho) * Wo;

    Array<S> out({N, Co, Ho, Wo});
    {
        auto wm = as_cmat(wv, Co, ck);
        const auto& bv = b.val();
#pragma omp parallel for schedule(static)
        for (int n = 0; n < N; ++n) {
            std::vector<S> cols(static_cast<size_t>(ck * plane));
            im2col(xv.data() + int64_t(n) * Ci * H * W, Ci, H, W, k, stride, pad, cols.data(), Ho, Wo);
            auto cm = CMatMap<S>(cols.data(), ck, plane);
            auto ym = MatMap<S>(out.data() + int64_t(n) * Co * plane, Co, plane);
            ym.noalias() = wm * cm;
            for (int c = 0; c < Co; ++c) ym.row(c).array() += bv[c];
        }
    }
    return Tensor<S>::op(
        std::move(out), {x, w, b},
        [x, w, b, N, Ci, H, W, Co, k, stride, pad, Ho, Wo, ck, plane](auto& self) mutable {
            const auto& g = self.grad;
            const bool need_x = x.needs_grad(), need_w = w.needs_grad(), need_b = b.needs_grad();
            std::vector<Mat<S>> wacc;
            if (need_w) wacc.assign(static_cast<size_t>(N), Mat<S>::Zero(Co, ck));
            if (need_x) x.grad();
            auto wm = as_cmat(w.val(), Co, ck);
#pragma omp parallel for schedule(static)
            for (int n = 0; n < N; ++n) {
                auto gym = CMatMap<S>(g.data() + int64_t(n) * Co * plane, Co, plane);
                if (need_w) {
                    std::vector<S> cols(static_cast<size_t>(ck * plane));
                    im2col(x.val().data() + int64_t(n) * Ci * H * W, Ci, H, W, k, stride, pad,
                           cols.data(), Ho, Wo);
                    auto cm = CMatMap<S>(cols.data(), ck, plane);
                    wacc[n].noalias() = gym * cm.transpose();
                }
                if (need_x) {
                    std::vector<S> gcols(static_cast<size_t>(ck * plane));
                    auto gcm = MatMap<S>(gcols.data(), ck, plane);
                    gcm.noalias() = wm.transpose() * gym;
                    col2im(gcols.data(), Ci, H, W, k, stride, pad,
                           x.grad().data() + int64_t(n) * Ci * H * W, Ho, Wo);
                }
            }
            if (need_w) {
                auto gwm = as_mat(w.grad(), Co, ck);
                for (int n = 0; n < N; ++n) gwm += wacc[n];
            }
            if (need_b) {
                auto& gb = b.grad();
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < Co; ++c) {
                        const S* row = g.data() + (int64_t(n) * Co + c) * plane;
                        S s = 0;
                        for (int64_t p = 0; p < plane; ++p) s += row[p];
                        gb[c] += s;
                    }
            }
        });
}

// Transposed convolution: x [N,Ci,Hi,Wi] * w [Ci,Co,k,k] + b -> [N,Co,Ho,Wo],
// Ho = (Hi-1)*stride + k - 2*pad. Exact adjoint of conv2d with same geometry.
template <class S>
Tensor<S> conv_transpose2d(Tensor<S> x, Tensor<S> w, Tensor<S> b, int stride, int pad) {
    const auto& xv = x.val();
    const auto& wv = w.val();
    check(xv.ndim() == 4 && wv.ndim() == 4, "conv_transpose2d: want [N,Ci,H,W],[Ci,Co,k,k]");
    check(xv.dim(1) == wv.dim(0), "conv_transpose2d: channel mismatch");
    const int N = xv.dim(0), Ci = xv.dim(1), Hi = xv.dim(2), Wi = xv.dim(3);
    const int Co = wv.dim(1), k = wv.dim(2);
    const int Ho = (Hi - 1) * stride + k - 2 * pad, Wo = (Wi - 1) * stride + k - 2 * pad;
    check(Ho > 0 && Wo > 0, "conv_transpose2d: output collapses to zero");
    const int64_t ck = int64_t(Co) * k * k, plane = int64_t(Hi) * Wi;

    Array<S> out({N, Co, Ho, Wo});
    {
        auto wm = as_cmat(wv, Ci, ck);
        const auto& bv = b.val();
#pragma omp parallel for schedule(static)
        for (int n = 0; n < N; ++n) {
            auto xm = CMatMap<S>(xv.data() + int64_t(n) * Ci * plane, Ci, plane);
            std::vector<S> cols(static_cast<size_t>(ck * plane));
            auto cm = MatMap<S>(cols.data(), ck, plane);
            cm.noalias() = wm.transpose() * xm;
            S* img = out.data() + int64_t(n) * Co * Ho * Wo;
            col2im(cols.data(), Co, Ho, Wo, k, stride, pad, img, Hi, Wi);
            for (int c = 0; c < Co; ++c) {
                S* row = img + int64_t(c) * Ho * Wo;
                for (int64_t p = 0; p < int64_t(Ho) * Wo; ++p) row[p] += bv[c];
            }
        }
    }
    return Tensor<S>::op(
        std::move(out), {x, w, b},
        [x, w, b, N, Ci, Hi, Wi, Co, k, stride, pad, Ho, Wo, ck, plane](auto& self) mutable {
            const auto& g = self.grad;
            const bool need_x = x.needs_grad(), need_w = w.needs_grad(), need_b = b.needs_grad();
            std::vector<Mat<S>> wacc;
            if (need_w) wacc.assign(static_cast<size_t>(N), Mat<S>::Zero(Ci, ck));
            if (need_x) x.grad();
            auto wm = as_cmat(w.val(), Ci, ck);
#pragma omp parallel for schedule(static)
            for (int n = 0; n < N; ++n) {
                std::vector<S> gcols(static_cast<size_t>(ck * plane));
                im2col(g.data() + int64_t(n) * Co * Ho * Wo, Co, Ho, Wo, k, stride, pad,
                       gcols.data(), Hi, Wi);
                auto gcm = CMatMap<S>(gcols.data(), ck, plane);
                if (need_x) {
                    auto gxm = MatMap<S>(x.grad().data() + int64_t(n) * Ci * plane, Ci, plane);
                    gxm.noalias() += wm * gcm;
                }
                if (need_w) {
                    auto xm = CMatMap<S>(x.val().data() + int64_t(n) * Ci * plane, Ci, plane);
                    wacc[n].noalias() = xm * gcm.transpose();
                }
            }
            if (need_w) {
                auto gwm = as_mat(w.grad(), Ci, ck);
                for (int n = 0; n < N; ++n) gwm += wacc[n];
            }
            if (need_b) {
                auto& gb = b.grad();
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < Co; ++c) {
                        const S* row = g.data() + (int64_t(n) * Co + c) * Ho * Wo;
                        S s = 0;
                        for (int64_t p = 0; p < int64_t(Ho) * Wo; ++p) s += row[p];
                        gb[c] += s;
                    }
            }
        });
}

// ---------------------------------------------------------------------------
// normalization and softmax
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> group_norm(Tensor<S> x, Tensor<S> gamma, Tensor<S> beta, int groups, S eps = S(1e-5)) {
    const auto& xv = x.val();
    check(xv.ndim() == 4, "group_norm: want [N,C,H,W]");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    check(C % groups == 0, "group_norm: C % groups != 0");
    const int Cg = C / groups;
    const int64_t m = int64_t(Cg) * H * W, hw = int64_t(H) * W;

    Array<S> xhat({N, C, H, W});
    Array<S> invstd({N, groups});
    Array<S> out({N, C, H, W});
    const auto& gv = gamma.val();
    const auto& bv = beta.val();
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n)
        for (int g = 0; g < groups; ++g) {
            const S* src = xv.data() + (int64_t(n) * C + int64_t(g) * Cg) * hw;
            double mu = 0;
            for (int64_t i = 0; i < m; ++i) mu += src[i];
            mu /= double(m);
            double var = 0;
            for (int64_t i = 0; i < m; ++i) {
                const double d = src[i] - mu;
                var += d * d;
            }
            var /= double(m);
            const S is = S(1.0 / std::sqrt(var + double(eps)));
            invstd[int64_t(n) * groups + g] = is;
            S* xh = xhat.data() + (int64_t(n) * C + int64_t(g) * Cg) * hw;
            S* y = out.data() + (int64_t(n) * C + int64_t(g) * Cg) * hw;
            for (int cc = 0; cc < Cg; ++cc) {
                const int c = g * Cg + cc;
                for (int64_t p = 0; p < hw; ++p) {
                    const S v = (src[cc * hw + p] - S(mu)) * is;
                    xh[cc * hw + p] = v;
                    y[cc * hw + p] = gv[c] * v + bv[c];
                }
            }
        }
    return Tensor<S>::op(
        std::move(out), {x, gamma, beta},
        [x, gamma, beta, xhat = std::move(xhat), invstd = std::move(invstd), N, C, H, W, groups, Cg,
         m, hw](auto& self) mutable {
            const auto& g = self.grad;
            if (gamma.needs_grad() || beta.needs_grad()) {
                auto& gg = gamma.grad();
                auto& gb = beta.grad();
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const S* gr = g.data() + (int64_t(n) * C + c) * hw;
                        const S* xh = xhat.data() + (int64_t(n) * C + c) * hw;
                        S sg = 0, sb = 0;
                        for (int64_t p = 0; p < hw; ++p) {
                            sg += gr[p] * xh[p];
                            sb += gr[p];
                        }
                        gg[c] += sg;
                        gb[c] += sb;
                    }
            }
            if (!x.needs_grad()) return;
            auto& gx = x.grad();
            const auto& gv = gamma.val();
#pragma omp parallel for schedule(static)
            for (int n = 0; n < N; ++n)
                for (int gi = 0; gi < groups; ++gi) {
                    const int64_t base = (int64_t(n) * C + int64_t(gi) * Cg) * hw;
                    const S is = invstd[int64_t(n) * groups + gi];
                    double mean1 = 0, mean2 = 0;
                    for (int cc = 0; cc < Cg; ++cc) {
                        const S ga = gv[gi * Cg + cc];
                        const S* gr = g.data() + base + cc * hw;
                        const S* xh = xhat.data() + base + cc * hw;
                        for (int64_t p = 0; p < hw; ++p) {
                            const double dxh = double(gr[p]) * ga;
                            mean1 += dxh;
                            mean2 += dxh * xh[p];
                        }
                    }
                    mean1 /= double(m);
                    mean2 /= double(m);
                    for (int cc = 0; cc < Cg; ++cc) {
                        const S ga = gv[gi * Cg + cc];
                        const S* gr = g.data() + base + cc * hw;
                        const S* xh = xhat.data() + base + cc * hw;
                        S* dst = gx.data() + base + cc * hw;
                        for (int64_t p = 0; p < hw; ++p)
                            dst[p] += is * (S(double(gr[p]) * ga - mean1) - xh[p] * S(mean2));
                    }
                }
        });
}

// Softmax over the last dimension; rows are all leading indices.
template <class S>
Tensor<S> softmax_last(Tensor<S> x) {
    const auto& xv = x.val();
    const int C = xv.dim(xv.ndim() - 1);
    const int64_t rows = xv.numel() / C;
    Array<S> out = xv;
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        S* row = out.data() + r * C;
        S mx = row[0];
        for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        double sum = 0;
        for (int c = 0; c < C; ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
        }
        const S inv = S(1.0 / sum);
        for (int c = 0; c < C; ++c) row[c] *= inv;
    }
    Array<S> y = out;
    return Tensor<S>::op(std::move(out), {x}, [x, y = std::move(y), rows, C](auto& self) mutable {
        if (!x.needs_grad()) return;
        auto& gx = x.grad();
        const auto& g = self.grad;
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < rows; ++r) {
            const S* yr = y.data() + r * C;
            const S* gr = g.data() + r * C;
            S* dst = gx.data() + r * C;
            double dot = 0;
            for (int c = 0; c < C; ++c) dot += double(gr[c]) * yr[c];
            for (int c = 0; c < C; ++c) dst[c] += yr[c] * (gr[c] - S(dot));
        }
    });
}

// Softmax over the middle dimension of [N,R,C] (a distribution over R for
// every (n, c) pair).
template <class S>
Tensor<S> softmax_mid(Tensor<S> x) {
    const auto& xv = x.val();
    check(xv.ndim() == 3, "softmax_mid: want [N,R,C]");
    const int N = xv.dim(0), R = xv.dim(1), C = xv.dim(2);
    Array<S> out = xv;
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            S* base = out.data() + int64_t(n) * R * C + c;
            S mx = base[0];
            for (int r = 1; r < R; ++r) mx = std::max(mx, base[int64_t(r) * C]);
            double sum = 0;
            for (int r = 0; r < R; ++r) {
                S& v = base[int64_t(r) * C];
                v = std::exp(v - mx);
                sum += v;
            }
            const S inv = S(1.0 / sum);
            for (int r = 0; r < R; ++r) base[int64_t(r) * C] *= inv;
        }
    Array<S> y = out;
    return Tensor<S>::op(std::move(out), {x}, [x, y = std::move(y), N, R, C](auto& self) mutable {
        if (!x.needs_grad()) return;
        auto& gx = x.grad();
        const auto& g = self.grad;
#pragma omp parallel for schedule(static)
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const int64_t off = int64_t(n) * R * C + c;
                double dot = 0;
                for (int r = 0; r < R; ++r) dot += double(g[off + int64_t(r) * C]) * y[off + int64_t(r) * C];
                for (int r = 0; r < R; ++r) {
                    const int64_t i = off + int64_t(r) * C;
                    gx[i] += y[i] * (g[i] - S(dot));
                }
            }
    });
}

// ---------------------------------------------------------------------------
// broadcasts and reductions
// ---------------------------------------------------------------------------

// x [N,C,H,W] + t [N,C] broadcast over spatial dims.
template <class S>
Tensor<S> add_temb(Tensor<S> x, Tensor<S> t) {
    const auto& xv = x.val();
    const auto& tv = t.val();
    check(xv.ndim() == 4 && tv.ndim() == 2 && xv.dim(0) == tv.dim(0) && xv.dim(1) == tv.dim(1),
          "add_temb: want [N,C,H,W] + [N,C]");
    const int N = xv.dim(0), C = xv.dim(1);
    const int64_t hw = int64_t(xv.dim(2)) * xv.dim(3);
    Array<S> out = xv;
    for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
        S* row = out.data() + nc * hw;
        const S v = tv[nc];
        for (int64_t p = 0; p < hw; ++p) row[p] += v;
    }
    return Tensor<S>::op(std::move(out), {x, t}, [x, t, N, C, hw](auto& self) mutable {
        const auto& g = self.grad;
        if (x.needs_grad()) {
            auto& gx = x.grad();
            for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
        }
        if (t.needs_grad()) {
            auto& gt = t.grad();
            for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
                const S* row = g.data() + nc * hw;
                S s = 0;
                for (int64_t p = 0; p < hw; ++p) s += row[p];
                gt[nc] += s;
            }
        }
    });
}

// logits [N,R,C] + v [N,C]: the same per-key bias added to every row.
template <class S>
Tensor<S> add_col_bias(Tensor<S> x, Tensor<S> v) {
    const auto& xv = x.val();
    const auto& vv = v.val();
    check(xv.ndim() == 3 && vv.ndim() == 2 && xv.dim(0) == vv.dim(0) && xv.dim(2) == vv.dim(1),
          "add_col_bias: want [N,R,C] + [N,C]");
    const int N = xv.dim(0), R = xv.dim(1), C = xv.dim(2);
    Array<S> out = xv;
    for (int n = 0; n < N; ++n)
        for (int r = 0; r < R; ++r) {
            S* row = out.data() + (int64_t(n) * R + r) * C;
            const S* bias = vv.data() + int64_t(n) * C;
            for (int c = 0; c < C; ++c) row[c] += bias[c];
        }
    return Tensor<S>::op(std::move(out), {x, v}, [x, v, N, R, C](auto& self) mutable {
        const auto& g = self.grad;
        if (x.needs_grad()) {
            auto& gx = x.grad();
            for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
        }
        if (v.needs_grad()) {
            auto& gv = v.grad();
            for (int n = 0; n < N; ++n)
                for (int r = 0; r < R; ++r) {
                    const S* row = g.data() + (int64_t(n) * R + r) * C;
                    S* dst = gv.data() + int64_t(n) * C;
                    for (int c = 0; c < C; ++c) dst[c] += row[c];
                }
        }
    });
}

// x [N,R,C] .* k [N,C], k non-differentiable (token masks and the like).
template <class S>
Tensor<S> mul_col_const(Tensor<S> x, Array<S> k) {
    const auto& xv = x.val();
    check(xv.ndim() == 3 && k.ndim() == 2 && xv.dim(0) == k.dim(0) && xv.dim(2) == k.dim(1),
          "mul_col_const: want [N,R,C] .* [N,C]");
    const int N = xv.dim(0), R = xv.dim(1), C = xv.dim(2);
    Array<S> out = xv;
    for (int n = 0; n < N; ++n)
        for (int r = 0; r < R; ++r) {
            S* row = out.data() + (int64_t(n) * R + r) * C;
            const S* kk = k.data() + int64_t(n) * C;
            for (int c = 0; c < C; ++c) row[c] *= kk[c];
        }
    return Tensor<S>::op(std::move(out), {x}, [x, k = std::move(k), N, R, C](auto& self) mutable {
        if (!x.needs_grad()) return;
        auto& gx = x.grad();
        const auto& g = self.grad;
        for (int n = 0; n < N; ++n)
            for (int r = 0; r < R; ++r) {
                const int64_t off = (int64_t(n) * R + r) * C;
                const S* kk = k.data() + int64_t(n) * C;
                for (int c = 0; c < C; ++c) gx[off + c] += g[off + c] * kk[c];
            }
    });
}

// [N,R,C] -> [N,R] summing the last dimension.
template <class S>
Tensor<S> row_sum_last(Tensor<S> x) {
    const auto& xv = x.val();
    check(xv.ndim() == 3, "row_sum_last: want [N,R,C]");
    const int N = xv.dim(0), R = xv.dim(1), C = xv.dim(2);
    Array<S> out({N, R});
    for (int64_t r = 0; r < int64_t(N) * R; ++r) {
        const S* row = xv.data() + r * C;
        double s = 0;
        for (int c = 0; c < C; ++c) s += row[c];
        out[r] = S(s);
    }
    return Tensor<S>::op(std::move(out), {x}, [x, N, R, C](auto& self) mutable {
        if (!x.needs_grad()) return;
        auto& gx = x.grad();
        const auto& g = self.grad;
        for (int64_t r = 0; r < int64_t(N) * R; ++r) {
            S* row = gx.data() + r * C;
            for (int c = 0; c < C; ++c) row[c] += g[r];
        }
    });
}

// [N,R] -> [N]; gradient routes to the argmax entry.
template <class S>
Tensor<S> max_last(Tensor<S> x) {
    const auto& xv = x.val();
    check(xv.ndim() == 2, "max_last: want [N,R]");
    const int N = xv.dim(0), R = xv.dim(1);
    Array<S> out({N});
    std::vector<int> arg(static_cast<size_t>(N));
    for (int n = 0; n < N; ++n) {
        const S* row = xv.data() + int64_t(n) * R;
        int best = 0;
        for (int r = 1; r < R; ++r)
            if (row[r] > row[best]) best = r;
        arg[static_cast<size_t>(n)] = best;
        out[n] = row[best];
    }
    return Tensor<S>::op(std::move(out), {x}, [x, arg = std::move(arg), R](auto& self) mutable {
        if (!x.needs_grad()) return;
        auto& gx = x.grad();
        const auto& g = self.grad;
        for (int64_t n = 0; n < g.numel(); ++n) gx[n * R + arg[static_cast<size_t>(n)]] += g[n];
    });
}

// y[n,r] = x[n,r] / m[n]
template <class S>
Tensor<S> div_bcast(Tensor<S> x, Tensor<S> m) {
    const auto& xv = x.val();
    const auto& mv = m.val();
    check(xv.ndim() == 2 && mv.ndim() == 1 && xv.dim(0) == mv.dim(0), "div_bcast: want [N,R] / [N]");
    const int N = xv.dim(0), R = xv.dim(1);
    Array<S> out = xv;
    for (int n = 0; n < N; ++n) {
        const S inv = S(1) / mv[n];
        S* row = out.data() + int64_t(n) * R;
        for (int r = 0; r < R; ++r) row[r] *= inv;
    }
    Array<S> y = out;
    return Tensor<S>::op(std::move(out), {x, m}, [x, m, y = std::move(y), N, R](auto& self) mutable {
        const auto& g = self.grad;
        const auto& mv2 = m.val();
        if (x.needs_grad()) {
            auto& gx = x.grad();
            for (int n = 0; n < N; ++n) {
                const S inv = S(1) / mv2[n];
                for (int r = 0; r < R; ++r) gx[int64_t(n) * R + r] += g[int64_t(n) * R + r] * inv;
            }
        }
        if (m.needs_grad()) {
            auto& gm = m.grad();
            for (int n = 0; n < N; ++n) {
                const S inv = S(1) / mv2[n];
                double s = 0;
                for (int r = 0; r < R; ++r)
                    s += double(g[int64_t(n) * R + r]) * y[int64_t(n) * R + r];
                gm[n] -= S(s) * inv;
            }
        }
    });
}

template <class S>
Tensor<S> sum_all(Tensor<S> x) {
    double s = 0;
    for (const auto& v : x.val().v) s += v;
    Array<S> out({1});
    out[0] = S(s);
    return Tensor<S>::op(std::move(out), {x}, [x](auto& self) mutable {
        if (!x.needs_grad()) return;
        auto& gx = x.grad();
        const S g = self.grad[0];
        for (auto& v : gx.v) v += g;
    });
}

template <class S>
Tensor<S> mean_all(Tensor<S> x) {
    const int64_t n = x.numel();
    double s = 0;
    for (const auto& v : x.val().v) s += v;
    Array<S> out({1});
    out[0] = S(s / double(n));
    return Tensor<S>::op(std::move(out), {x}, [x, n](auto& self) mutable {
        if (!x.needs_grad()) return;
        auto& gx = x.grad();
        const S g = self.grad[0] / S(n);
        for (auto& v : gx.v) v += g;
    });
}

// [N,C,H,W] -> [N,C] spatial mean.
template <class S>
Tensor<S> global_avg_pool(Tensor<S> x) {
    const auto& xv = x.val();
    check(xv.ndim() == 4, "global_avg_pool: want [N,C,H,W]");
    const int N = xv.dim(0), C = xv.dim(1);
    const int64_t hw = int64_t(xv.dim(2)) * xv.dim(3);
    Array<S> out({N, C});
    for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
        const S* row = xv.data() + nc * hw;
        double s = 0;
        for (int64_t p = 0; p < hw; ++p) s += row[p];
        out[nc] = S(s / double(hw));
    }
    return Tensor<S>::op(std::move(out), {x}, [x, N, C, hw](auto& self) mutable {
        if (!x.needs_grad()) return;
        auto& gx = x.grad();
        const auto& g = self.grad;
        for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
            const S v = g[nc] / S(hw);
            S* row = gx.data() + nc * hw;
            for (int64_t p = 0; p < hw; ++p) row[p] += v;
        }
    });
}

template <class S>
Tensor<S> mse(Tensor<S> a, Tensor<S> b) {
    auto d = sub(a, b);
    return mean_all(mul(d, d));
}

}  // namespace ccis::ops

#include <doctest.h>

#include "ccis/core/ops.hpp"
#include "ccis/nn/layers.hpp"
#include "test_util.hpp"

using namespace ccis;
using ccis::testutil::check_gradients;

namespace {
Tensor<double> randn_leaf(Shape sh, Rng& rng, double scale = 1.0) {
    return Tensor<double>::leaf(Array<double>::randn(std::move(sh), rng, scale), true);
}
}  // namespace

TEST_CASE("rng: deterministic, forkable, sane moments") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng c(42);
    auto f1 = c.fork(7), f2 = c.fork(7), f3 = c.fork(8);
    CHECK(f1.next_u64() == f2.next_u64());
    CHECK(f1.next_u64() != f3.next_u64());

    Rng d(123);
    double sum = 0, sumsq = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = d.normal();
        sum += x;
        sumsq += x * x;
    }
    CHECK(std::abs(sum / n) < 0.03);
    CHECK(std::abs(sumsq / n - 1.0) < 0.05);

    Rng e(9);
    for (int i = 0; i < 100; ++i) {
        const double u = e.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
}

TEST_CASE("autograd: elementwise ops match finite differences") {
    Rng rng(1);
    auto a = randn_leaf({2, 3}, rng);
    auto b = randn_leaf({2, 3}, rng);

    check_gradients({a, b}, [&] { return ops::mean_all(ops::mul(ops::add(a, b), ops::sub(a, b))); });
    check_gradients({a}, [&] { return ops::mean_all(ops::silu(ops::scale(a, 1.7))); });
    check_gradients({a}, [&] { return ops::mean_all(ops::sigmoid(ops::add_scalar(a, 0.3))); });
    check_gradients({a}, [&] {
        return ops::mean_all(ops::log_op(ops::clamp_min(ops::sigmoid(a), 1e-6)));
    });
    check_gradients({a}, [&] { return ops::sum_all(ops::clamp(a, -0.5, 0.5)); });
}

TEST_CASE("autograd: structural ops") {
    Rng rng(2);
    auto x = randn_leaf({2, 3, 4, 4}, rng);
    auto y = randn_leaf({2, 2, 4, 4}, rng);
    check_gradients({x, y}, [&] { return ops::mean_all(ops::concat_ch(x, y)); });
    check_gradients({x}, [&] {
        auto t = ops::nchw_to_tokens(x);
        auto back = ops::tokens_to_nchw(t, 4, 4);
        return ops::mean_all(ops::mul(back, back));
    });
    check_gradients({x}, [&] {
        auto u = ops::upsample_nearest2(x);
        return ops::mean_all(ops::mul(u, u));
    });

    // tokens round trip is the identity
    auto t = ops::nchw_to_tokens(x);
    CHECK(t.shape() == Shape{2, 16, 3});
    auto back = ops::tokens_to_nchw(t, 4, 4);
    CHECK(max_abs_diff(back.val(), x.val()) == 0.0);
}

TEST_CASE("autograd: linear and bmm") {
    Rng rng(3);
    auto x = randn_leaf({2, 5, 3}, rng);
    auto w = randn_leaf({4, 3}, rng);
    auto b = randn_leaf({4}, rng);
    check_gradients({x, w, b}, [&] {
        auto y = ops::linear_tokens(x, w, b);
        return ops::mean_all(ops::mul(y, y));
    });

    auto a2 = randn_leaf({2, 3, 4}, rng);
    auto b2 = randn_leaf({2, 4, 5}, rng);
    check_gradients({a2, b2}, [&] {
        auto y = ops::bmm(a2, b2);
        return ops::mean_all(ops::mul(y, y));
    });
    auto b3 = randn_leaf({2, 5, 4}, rng);
    check_gradients({a2, b3}, [&] {
        auto y = ops::bmm(a2, b3, /*trans_b=*/true);
        return ops::mean_all(ops::mul(y, y));
    });
}

namespace {
// Direct convolution, the oracle for the im2col path.
Array<double> conv_naive(const Array<double>& x, const Array<double>& w, const Array<double>& b,
                         int stride, int pad) {
    const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Co = w.dim(0), k = w.dim(2);
    const int Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
    Array<double> y({N, Co, Ho, Wo});
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    double s = b[co];
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * stride - pad + ky;
                                const int ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                s += x[((int64_t(n) * Ci + ci) * H + iy) * W + ix] *
                                     w[((int64_t(co) * Ci + ci) * k + ky) * k + kx];
                            }
                    y[((int64_t(n) * Co + co) * Ho + oy) * Wo + ox] = s;
                }
    return y;
}
}  // namespace

TEST_CASE("conv2d: forward matches direct convolution, gradients check out") {
    Rng rng(4);
    for (int stride : {1, 2}) {
        auto x = randn_leaf({2, 3, 6, 6}, rng);
        auto w = randn_leaf({4, 3, 3, 3}, rng, 0.4);
        auto b = randn_leaf({4}, rng, 0.1);
        auto y = ops::conv2d(x, w, b, stride, 1);
        auto ref = conv_naive(x.val(), w.val(), b.val(), stride, 1);
        CHECK(y.shape() == ref.shape);
        CHECK(max_abs_diff(y.val(), ref) < 1e-12);
        check_gradients({x, w, b}, [&] {
            auto out = ops::conv2d(x, w, b, stride, 1);
            return ops::mean_all(ops::mul(out, out));
        });
    }
}

TEST_CASE("conv_transpose2d: adjoint of conv2d, gradients check out") {
    Rng rng(5);
    // <conv(x), y> == <x, convT(y)> with shared weights
    auto x = Array<double>::randn({1, 2, 6, 6}, rng);
    // conv reads this as [Co=3,Ci=2,k,k]; convT reads the same buffer as
    // [Ci_T=3,Co_T=2,k,k], which is exactly the adjoint pairing.
    auto w = Array<double>::randn({3, 2, 4, 4}, rng);
    auto zero_b3 = Array<double>({3});
    auto zero_b2 = Array<double>({2});

    auto tx = Tensor<double>::constant(x);
    auto tw = Tensor<double>::constant(w);
    auto tb3 = Tensor<double>::constant(zero_b3);
    auto cy = ops::conv2d(tx, tw, tb3, 2, 1);  // [1,3,3,3]

    Rng rng2(6);
    auto yv = Array<double>::randn(cy.shape(), rng2);
    auto ty = Tensor<double>::constant(yv);
    auto twt = Tensor<double>::constant(w.reshaped({3, 2, 4, 4}));
    auto tb2 = Tensor<double>::constant(zero_b2);
    auto cty = ops::conv_transpose2d(ty, twt, tb2, 2, 1);  // [1,2,6,6]
    CHECK(cty.shape() == x.shape);

    double lhs = 0, rhs = 0;
    for (int64_t i = 0; i < cy.numel(); ++i) lhs += cy.val()[i] * yv[i];
    for (int64_t i = 0; i < cty.numel(); ++i) rhs += cty.val()[i] * x[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));

    auto xx = randn_leaf({2, 3, 4, 4}, rng);
    auto ww = randn_leaf({3, 2, 4, 4}, rng, 0.3);
    auto bb = randn_leaf({2}, rng, 0.1);
    check_gradients({xx, ww, bb}, [&] {
        auto out = ops::conv_transpose2d(xx, ww, bb, 2, 1);
        return ops::mean_all(ops::mul(out, out));
    });
}

TEST_CASE("group_norm: normalizes and gradients check out") {
    Rng rng(7);
    auto x = randn_leaf({2, 4, 3, 3}, rng, 2.0);
    auto gamma = randn_leaf({4}, rng, 0.5);
    auto beta = randn_leaf({4}, rng, 0.5);
    auto y = ops::group_norm(x, Tensor<double>::constant(Array<double>({4}, 1.0)),
                             Tensor<double>::constant(Array<double>({4})), 2);
    // per-(sample, group) mean 0, var 1
    for (int n = 0; n < 2; ++n)
        for (int g = 0; g < 2; ++g) {
            double mu = 0, var = 0;
            for (int cc = 0; cc < 2; ++cc)
                for (int p = 0; p < 9; ++p) mu += y.val()[((n * 4) + g * 2 + cc) * 9 + p];
            mu /= 18.0;
            for (int cc = 0; cc < 2; ++cc)
                for (int p = 0; p < 9; ++p) {
                    const double d = y.val()[((n * 4) + g * 2 + cc) * 9 + p] - mu;
                    var += d * d;
                }
            var /= 18.0;
            CHECK(std::abs(mu) < 1e-10);
            CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
        }
    check_gradients({x, gamma, beta}, [&] {
        auto out = ops::group_norm(x, gamma, beta, 2);
        return ops::mean_all(ops::mul(out, out));
    });
}

TEST_CASE("softmax ops: normalization axes and gradients") {
    Rng rng(8);
    auto x = randn_leaf({2, 3, 4}, rng);

    auto sl = ops::softmax_last(x);
    for (int r = 0; r < 6; ++r) {
        double s = 0;
        for (int c = 0; c < 4; ++c) s += sl.val()[r * 4 + c];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    auto sm = ops::softmax_mid(x);
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 4; ++c) {
            double s = 0;
            for (int r = 0; r < 3; ++r) s += sm.val()[(n * 3 + r) * 4 + c];
            CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
    check_gradients({x}, [&] {
        auto y = ops::softmax_last(x);
        return ops::mean_all(ops::mul(y, y));
    });
    check_gradients({x}, [&] {
        auto y = ops::softmax_mid(x);
        return ops::mean_all(ops::mul(y, y));
    });
}

TEST_CASE("broadcast/reduction ops gradients") {
    Rng rng(9);
    auto x = randn_leaf({2, 3, 4, 4}, rng);
    auto t = randn_leaf({2, 3}, rng);
    check_gradients({x, t}, [&] {
        auto y = ops::add_temb(x, t);
        return ops::mean_all(ops::mul(y, y));
    });

    auto l = randn_leaf({2, 5, 3}, rng);
    auto v = randn_leaf({2, 3}, rng);
    check_gradients({l, v}, [&] {
        auto y = ops::add_col_bias(l, v);
        return ops::mean_all(ops::mul(y, y));
    });
    check_gradients({l}, [&] {
        auto y = ops::row_sum_last(l);
        return ops::mean_all(ops::mul(y, y));
    });

    auto s = randn_leaf({3, 4}, rng);
    check_gradients({s}, [&] {
        auto m = ops::max_last(s);
        return ops::mean_all(ops::mul(m, m));
    });
    // positive values so division is well-conditioned
    auto sp = Tensor<double>::leaf(Array<double>::rand_uniform({3, 4}, rng, 0.5, 2.0), true);
    check_gradients({sp}, [&] {
        auto m = ops::max_last(sp);
        auto y = ops::div_bcast(sp, m);
        return ops::mean_all(ops::mul(y, y));
    });

    check_gradients({x}, [&] {
        auto y = ops::global_avg_pool(x);
        return ops::mean_all(ops::mul(y, y));
    });

    Array<double> mask({2, 5, 3});
    Rng mrng(10);
    for (auto& e : mask.v) e = mrng.bernoulli(0.5) ? 1.0 : 0.0;
    check_gradients({l}, [&] { return ops::mean_all(ops::mul_const(l, mask)); });

    Array<double> colmask({2, 3});
    for (auto& e : colmask.v) e = 1.0;
    colmask[1] = 0.0;
    check_gradients({l}, [&] {
        auto y = ops::mul_col_const(l, colmask);
        return ops::mean_all(ops::mul(y, y));
    });
}

TEST_CASE("tensor: grad mode, freezing, duplicate parents") {
    Rng rng(11);
    auto a = randn_leaf({2, 2}, rng);

    {
        NoGradGuard ng;
        auto y = ops::mul(a, a);
        CHECK(!y.needs_grad());
    }
    auto y = ops::mean_all(ops::mul(a, a));
    CHECK(y.needs_grad());
    y.backward();
    for (int64_t i = 0; i < a.numel(); ++i)
        CHECK(a.grad_value()[i] == doctest::Approx(2.0 * a.val()[i] / 4.0));

    a.zero_grad();
    a.set_trainable(false);
    auto y2 = ops::mean_all(ops::mul(a, a));
    CHECK(!y2.needs_grad());
}

TEST_CASE("adam: zero grad means no movement, basic descent works") {
    Rng rng(12);
    auto p = Tensor<float>::leaf(Array<float>({2}, {1.0f, -2.0f}), true);
    std::vector<Tensor<float>> params{p};
    nn::Adam<float> opt;
    opt.lr = 0.1;
    opt.reset(params);

    // no grad buffer -> untouched
    opt.step(params);
    CHECK(p.val()[0] == 1.0f);

    // minimize |p|^2; after many steps it should approach zero
    for (int i = 0; i < 300; ++i) {
        nn::zero_grads(params);
        auto loss = ops::mean_all(ops::mul(p, p));
        loss.backward();
        opt.step(params);
    }
    CHECK(std::abs(p.val()[0]) < 0.05f);
    CHECK(std::abs(p.val()[1]) < 0.05f);
}

#pragma once

#include <functional>
#include <string>

#include "ccis/core/ops.hpp"

namespace ccis::nn {

template <class S>
using ParamVisitor = std::function<void(const std::string&, Tensor<S>&)>;

// Weight init draws are rounded through float32 regardless of S, so a double
// instantiation of a model is numerically the same function as the float one.
template <class S>
Tensor<S> init_normal(Shape sh, double stddev, Rng& rng, bool trainable = true) {
    Array<float> a(sh);
    for (auto& x : a.v) x = static_cast<float>(rng.normal() * stddev);
    return Tensor<S>::leaf(a.template cast<S>(), trainable);
}

template <class S>
Tensor<S> init_const(Shape sh, double value, bool trainable = true) {
    Array<float> a(sh, static_cast<float>(value));
    return Tensor<S>::leaf(a.template cast<S>(), trainable);
}

template <class S>
struct Linear {
    Tensor<S> w, b;
    void init(int in, int out, Rng& rng, double gain = 1.0) {
        w = init_normal<S>({out, in}, gain / std::sqrt(double(in)), rng);
        b = init_const<S>({out}, 0.0);
    }
    Tensor<S> tokens(Tensor<S> x) const { return ops::linear_tokens(x, w, b); }
    Tensor<S> flat(Tensor<S> x) const { return ops::linear2d(x, w, b); }
    void visit(const std::string& p, const ParamVisitor<S>& cb) {
        cb(p + ".w", w);
        cb(p + ".b", b);
    }
};

template <class S>
struct Conv2d {
    Tensor<S> w, b;
    int stride = 1, pad = 1;
    void init(int ci, int co, int k, int stride_, int pad_, Rng& rng, double gain = 1.0) {
        stride = stride_;
        pad = pad_;
        w = init_normal<S>({co, ci, k, k}, gain * std::sqrt(2.0 / (double(ci) * k * k)), rng);
        b = init_const<S>({co}, 0.0);
    }
    void init_zero(int ci, int co, int k, int stride_, int pad_) {
        stride = stride_;
        pad = pad_;
        w = init_const<S>({co, ci, k, k}, 0.0);
        b = init_const<S>({co}, 0.0);
    }
    Tensor<S> operator()(Tensor<S> x) const { return ops::conv2d(x, w, b, stride, pad); }
    void visit(const std::string& p, const ParamVisitor<S>& cb) {
        cb(p + ".w", w);
        cb(p + ".b", b);
    }
};

template <class S>
struct ConvTranspose2d {
    Tensor<S> w, b;
    int stride = 2, pad = 1;
    void init(int ci, int co, int k, int stride_, int pad_, Rng& rng) {
        stride = stride_;
        pad = pad_;
        w = init_normal<S>({ci, co, k, k}, std::sqrt(2.0 / (double(ci) * k * k)), rng);
        b = init_const<S>({co}, 0.0);
    }
    Tensor<S> operator()(Tensor<S> x) const { return ops::conv_transpose2d(x, w, b, stride, pad); }
    void visit(const std::string& p, const ParamVisitor<S>& cb) {
        cb(p + ".w", w);
        cb(p + ".b", b);
    }
};

template <class S>
struct GroupNorm {
    Tensor<S> gamma, beta;
    int groups = 8;
    void init(int c, int groups_) {
        // shrink the group count rather than fail on narrow layers
        groups = groups_;
        while (c % groups != 0) groups /= 2;
        gamma = init_const<S>({c}, 1.0);
        beta = init_const<S>({c}, 0.0);
    }
    Tensor<S> operator()(Tensor<S> x) const { return ops::group_norm(x, gamma, beta, groups); }
    void visit(const std::string& p, const ParamVisitor<S>& cb) {
        cb(p + ".gamma", gamma);
        cb(p + ".beta", beta);
    }
};

// Conv ResNet block with timestep conditioning added between the convs.
template <class S>
struct ResBlock {
    GroupNorm<S> gn1, gn2;
    Conv2d<S> conv1, conv2, skip;
    Linear<S> temb_proj;
    bool has_skip = false;

    void init(int ci, int co, int temb_dim, int groups, Rng& rng) {
        gn1.init(ci, groups);
        conv1.init(ci, co, 3, 1, 1, rng);
        temb_proj.init(temb_dim, co, rng);
        gn2.init(co, groups);
        conv2.init(co, co, 3, 1, 1, rng);
        has_skip = (ci != co);
        if (has_skip) skip.init(ci, co, 1, 1, 0, rng);
    }
    Tensor<S> operator()(Tensor<S> x, Tensor<S> temb) const {
        auto h = conv1(ops::silu(gn1(x)));
        h = ops::add_temb(h, temb_proj.flat(temb));
        h = conv2(ops::silu(gn2(h)));
        return ops::add(h, has_skip ? skip(x) : x);
    }
    void visit(const std::string& p, const ParamVisitor<S>& cb) {
        gn1.visit(p + ".gn1", cb);
        conv1.visit(p + ".conv1", cb);
        temb_proj.visit(p + ".temb", cb);
        gn2.visit(p + ".gn2", cb);
        conv2.visit(p + ".conv2", cb);
        if (has_skip) skip.visit(p + ".skip", cb);
    }
};

// Adam (first-order adaptive moments), decay 0.9/0.999, eps 1e-8. Optional
// global-norm clipping, disabled by default.
template <class S>
struct Adam {
    double lr = 1e-5;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double clip_norm = 0.0;  // 0 disables
    int64_t t = 0;
    std::vector<Array<S>> m, v;

    void reset(const std::vector<Tensor<S>>& params) {
        t = 0;
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.push_back(Array<S>::zeros(p.shape()));
            v.push_back(Array<S>::zeros(p.shape()));
        }
    }

    void step(std::vector<Tensor<S>>& params) {
        ++t;
        double scale = 1.0;
        if (clip_norm > 0) {
            double sq = 0;
            for (auto& p : params)
                if (p.has_grad())
                    for (const auto& g : p.grad_value().v) sq += double(g) * double(g);
            const double norm = std::sqrt(sq);
            if (norm > clip_norm) scale = clip_norm / (norm + 1e-12);
        }
        const double bc1 = 1.0 - std::pow(beta1, double(t));
        const double bc2 = 1.0 - std::pow(beta2, double(t));
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i];
            if (!p.has_grad()) continue;
            auto& val = p.val();
            const auto& g = p.grad_value();
            auto& mi = m[i];
            auto& vi = v[i];
            for (int64_t j = 0; j < val.numel(); ++j) {
                const S gj = S(double(g[j]) * scale);
                mi[j] = S(beta1) * mi[j] + S(1.0 - beta1) * gj;
                vi[j] = S(beta2) * vi[j] + S(1.0 - beta2) * gj * gj;
                const S mhat = mi[j] / S(bc1);
                const S vhat = vi[j] / S(bc2);
                val[j] -= S(lr) * mhat / (std::sqrt(vhat) + S(eps));
            }
        }
    }
};

template <class S>
void zero_grads(std::vector<Tensor<S>>& params) {
    for (auto& p : params) p.zero_grad();
}

}  // namespace ccis::nn

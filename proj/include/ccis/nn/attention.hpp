#pragma once

#include "ccis/diffusion/text_batch.hpp"
#include "ccis/nn/layers.hpp"

namespace ccis::nn {

// Pre-norm single-head self-attention with a residual connection; d equals the
// channel count of the level.
template <class S>
struct SelfAttnBlock {
    GroupNorm<S> gn;
    Linear<S> wq, wk, wv, wo;
    int ch = 0;

    void init(int c, int groups, Rng& rng) {
        ch = c;
        gn.init(c, groups);
        wq.init(c, c, rng);
        wk.init(c, c, rng);
        wv.init(c, c, rng);
        wo.init(c, c, rng);
    }
    Tensor<S> operator()(Tensor<S> x) const {
        const int H = x.val().dim(2), W = x.val().dim(3);
        auto t = ops::nchw_to_tokens(gn(x));
        auto q = wq.tokens(t), k = wk.tokens(t), v = wv.tokens(t);
        auto logits = ops::scale(ops::bmm(q, k, true), S(1.0 / std::sqrt(double(ch))));
        auto attn = ops::softmax_last(logits);
        auto o = wo.tokens(ops::bmm(attn, v));
        return ops::add(x, ops::tokens_to_nchw(o, H, W));
    }
    void visit(const std::string& p, const ParamVisitor<S>& cb) {
        gn.visit(p + ".gn", cb);
        wq.visit(p + ".wq", cb);
        wk.visit(p + ".wk", cb);
        wv.visit(p + ".wv", cb);
        wo.visit(p + ".wo", cb);
    }
};

// Pre-norm single-head cross-attention over the frozen text embedding.
// PAD keys are masked with a -1e30 additive bias.
template <class S>
struct CrossAttnBlock {
    GroupNorm<S> gn;
    Linear<S> wq, wk, wv, wo;
    int ch = 0;

    void init(int c, int text_dim, int groups, Rng& rng) {
        ch = c;
        gn.init(c, groups);
        wq.init(c, c, rng);
        wk.init(text_dim, c, rng);
        wv.init(text_dim, c, rng);
        wo.init(c, c, rng);
    }
    Tensor<S> operator()(Tensor<S> x, const diffusion::TextBatch<S>& text) const {
        const int H = x.val().dim(2), W = x.val().dim(3);
        auto q = wq.tokens(ops::nchw_to_tokens(gn(x)));
        auto k = wk.tokens(text.tokens);
        auto v = wv.tokens(text.tokens);
        auto logits = ops::scale(ops::bmm(q, k, true), S(1.0 / std::sqrt(double(ch))));
        logits = ops::add_col_bias(logits, Tensor<S>::constant(text.key_bias));
        auto attn = ops::softmax_last(logits);
        auto o = wo.tokens(ops::bmm(attn, v));
        return ops::add(x, ops::tokens_to_nchw(o, H, W));
    }
    void visit(const std::string& p, const ParamVisitor<S>& cb) {
        gn.visit(p + ".gn", cb);
        wq.visit(p + ".wq", cb);
        wk.visit(p + ".wk", cb);
        wv.visit(p + ".wv", cb);
        wo.visit(p + ".wo", cb);
    }
};

}  // namespace ccis::nn

#pragma once

#include "ccis/control/blur.hpp"
#include "ccis/diffusion/loss.hpp"

namespace ccis::control {

using diffusion::TextBatch;

// ---------------------------------------------------------------------------
// Bare mechanisms. The blocks below wrap these; tests target them directly.
// ---------------------------------------------------------------------------

// Cross-attention similarity: softmax over the PIXEL axis of Q_c K_c^T / sqrt(d),
// one distribution over pixels per text token. PAD columns are masked to -inf
// first, which leaves them exactly uniform after the per-column softmax; they
// are also excluded from every later sum via text.token_mask. Output [N, HW, l].
template <class S>
Tensor<S> cross_attention_similarity(Tensor<S> f_a, const nn::Linear<S>& wq_c,
                                     const nn::Linear<S>& wk_c, const TextBatch<S>& text) {
    const int d = f_a.val().dim(2);
    auto q = wq_c.tokens(f_a);
    auto k = wk_c.tokens(text.tokens);
    auto logits = ops::scale(ops::bmm(q, k, true), S(1.0 / std::sqrt(double(d))));
    logits = ops::add_col_bias(logits, Tensor<S>::constant(text.key_bias));
    return ops::softmax_mid(logits);  // columns (tokens) each sum to 1 over pixels
}

// Text-aware map: per-pixel sums of M_c over live tokens, max-normalized and
// clamped to [0,1]. Null prompts yield S identically 1. Output [N, HW].
template <class S>
Tensor<S> text_aware_map(Tensor<S> m_c, const TextBatch<S>& text) {
    const int N = m_c.val().dim(0), hw = m_c.val().dim(1);
    auto s_raw = ops::row_sum_last(ops::mul_col_const(m_c, text.token_mask));
    // the max is strictly positive unless every token is PAD (null prompt)
    auto s = ops::clamp(ops::div_bcast(s_raw, ops::clamp_min(ops::max_last(s_raw), S(1e-30))),
                        S(0), S(1));
    bool any_null = false;
    for (auto f : text.null_flags) any_null = any_null || f;
    if (!any_null) return s;
    // force S = 1 on null-prompt samples: S*live + (1-live)
    Array<S> live({N, hw}), fill({N, hw});
    for (int n = 0; n < N; ++n) {
        const S on = text.null_flags[static_cast<size_t>(n)] ? S(0) : S(1);
        for (int j = 0; j < hw; ++j) {
            live[int64_t(n) * hw + j] = on;
            fill[int64_t(n) * hw + j] = S(1) - on;
        }
    }
    return ops::add_const(ops::mul_const(s, std::move(live)), fill);
}

// Self-attention with key-side log(S) modulation:
//   refined_logits[i,j] = Q_s K_s^T / sqrt(d) + ln(max(s_j, 1e-6))
// so S == 1 reduces exactly to plain self-attention. Output [N, HW, d].
template <class S>
Tensor<S> text_aware_self_attention(Tensor<S> f_a, const nn::Linear<S>& wq_s,
                                    const nn::Linear<S>& wk_s, const nn::Linear<S>& wv_s,
                                    const nn::Linear<S>& wq_c, const nn::Linear<S>& wk_c,
                                    const TextBatch<S>& text, Tensor<S>* s_out = nullptr,
                                    bool force_s_one = false) {
    const int d = f_a.val().dim(2);
    auto q = wq_s.tokens(f_a);
    auto k = wk_s.tokens(f_a);
    auto v = wv_s.tokens(f_a);
    auto m_s = ops::scale(ops::bmm(q, k, true), S(1.0 / std::sqrt(double(d))));
    Tensor<S> logits = m_s;
    if (!force_s_one) {
        auto m_c = cross_attention_similarity(f_a, wq_c, wk_c, text);
        auto s = text_aware_map(m_c, text);
        if (s_out) *s_out = s;
        auto ln_s = ops::log_op(ops::clamp_min(s, S(1e-6)));
        logits = ops::add_col_bias(m_s, ln_s);
    } else if (s_out) {
        *s_out = Tensor<S>::constant(Array<S>::full({f_a.val().dim(0), f_a.val().dim(1)}, S(1)));
    }
    return ops::bmm(ops::softmax_last(logits), v);
}

// Blur-mask weighting: M_w = sigmoid(mlp([F_sharp || F_blur])), F_b = M_w (.) F_blur,
// F_cond = (1 - M_w) (.) F_sharp + F_b.
template <class S>
struct MaskConditioning {
    Tensor<S> m_w, f_b, f_cond, f_sharp, f_blur;
};

// Three-layer 1x1-conv MLP producing the per-location weighting matrix; the
// final layer starts at zero so M_w is 0.5 everywhere at init.
template <class S>
struct WeightNet {
    nn::Conv2d<S> l1, l2, l3;
    void init(int c, Rng& rng) {
        l1.init(2 * c, 2 * c, 1, 1, 0, rng);
        l2.init(2 * c, 2 * c, 1, 1, 0, rng);
        l3.init_zero(2 * c, c, 1, 1, 0);
    }
    Tensor<S> operator()(Tensor<S> x) const { return l3(ops::silu(l2(ops::silu(l1(x))))); }
    void visit(const std::string& p, const nn::ParamVisitor<S>& cb) {
        l1.visit(p + ".l1", cb);
        l2.visit(p + ".l2", cb);
        l3.visit(p + ".l3", cb);
    }
};

template <class S>
MaskConditioning<S> mask_weighting(Tensor<S> f_sharp, Tensor<S> f_blur, const WeightNet<S>& net,
                                   bool force_mw_zero = false) {
    if (f_sharp.shape() != f_blur.shape()) throw ShapeError("mask_weighting: shape mismatch");
    MaskConditioning<S> out;
    out.f_sharp = f_sharp;
    out.f_blur = f_blur;
    if (force_mw_zero)
        out.m_w = Tensor<S>::constant(Array<S>::zeros(f_sharp.shape()));
    else
        out.m_w = ops::sigmoid(net(ops::concat_ch(f_sharp, f_blur)));
    out.f_b = ops::mul(out.m_w, f_blur);
    auto one_minus = ops::add_scalar(ops::scale(out.m_w, S(-1)), S(1));
    out.f_cond = ops::add(ops::mul(one_minus, f_sharp), out.f_b);
    return out;
}

// ---------------------------------------------------------------------------
// Modules
// ---------------------------------------------------------------------------

// Four (configurable) stride-2 convs: H x W -> H/2^k x W/2^k with c channels.
template <class S>
struct MaskEncoder {
    std::vector<nn::Conv2d<S>> convs;
    void init(int c, int down, Rng& rng) {
        convs.resize(static_cast<size_t>(down));
        int prev = 1;
        for (int i = 0; i < down; ++i) {
            const int out = i == down - 1 ? c : std::min(c, 16 << i);
            convs[static_cast<size_t>(i)].init(prev, out, 3, 2, 1, rng);
            prev = out;
        }
    }
    Tensor<S> operator()(Tensor<S> x) const {
        auto h = x;
        for (size_t i = 0; i < convs.size(); ++i) {
            h = convs[i](h);
            if (i + 1 < convs.size()) h = ops::silu(h);
        }
        return h;
    }
    void visit(const std::string& p, const nn::ParamVisitor<S>& cb) {
        for (size_t i = 0; i < convs.size(); ++i) convs[i].visit(p + ".c" + std::to_string(i), cb);
    }
};

// Learned upsampling decoder from the mask-embedding grid to one injection
// point: transposed convs (per-phase weights recover sub-cell structure) and a
// 1x1 projection to the target channel count.
template <class S>
struct CondProjector {
    std::vector<nn::ConvTranspose2d<S>> stages;
    nn::Conv2d<S> proj;
    void init(int c_in, int c_out, int factor_log2, Rng& rng) {
        int prev = c_in;
        stages.resize(static_cast<size_t>(factor_log2));
        for (int i = 0; i < factor_log2; ++i) {
            const int out = std::min(prev, 16);
            stages[static_cast<size_t>(i)].init(prev, out, 4, 2, 1, rng);
            prev = out;
        }
        proj.init(prev, c_out, 1, 1, 0, rng);
    }
    Tensor<S> operator()(Tensor<S> x) const {
        auto h = x;
        for (const auto& st : stages) h = ops::silu(st(h));
        return proj(h);
    }
    void visit(const std::string& p, const nn::ParamVisitor<S>& cb) {
        for (size_t i = 0; i < stages.size(); ++i) stages[i].visit(p + ".s" + std::to_string(i), cb);
        proj.visit(p + ".proj", cb);
    }
};

// Control-branch level: trainable copy of a backbone encoder level with the
// self-attention upgraded to the text-aware form, followed by a fuse ResNet
// that mixes the projected mask conditioning back in, then a zero conv.
template <class S>
struct ControlLevel {
    nn::Conv2d<S> down;
    nn::ResBlock<S> res;
    nn::GroupNorm<S> attn_gn;
    nn::Linear<S> wq_s, wk_s, wv_s, wo_s;
    nn::CrossAttnBlock<S> cattn;
    nn::ResBlock<S> fuse;
    CondProjector<S> proj;
    nn::Conv2d<S> zero_conv;
};

template <class S>
struct ControlBranch {
    diffusion::ModelConfig cfg;
    nn::Linear<S> temb1, temb2;
    nn::Conv2d<S> stem;
    CondProjector<S> proj_in;
    nn::ResBlock<S> res_in;
    MaskEncoder<S> enc_sharp, enc_blur;
    WeightNet<S> weight_net;
    std::vector<ControlLevel<S>> levels;

    // inference-time ablation switches
    bool force_s_one = false;
    bool force_mw_zero = false;

    void init(const diffusion::ModelConfig& c, Rng& rng) {
        cfg = c;
        const auto& ch = cfg.channels;
        temb1.init(cfg.temb_dim, cfg.temb_dim, rng);
        temb2.init(cfg.temb_dim, cfg.temb_dim, rng);
        stem.init(3, ch[0], 3, 1, 1, rng);
        enc_sharp.init(cfg.mask_channels, cfg.mask_down, rng);
        enc_blur.init(cfg.mask_channels, cfg.mask_down, rng);
        weight_net.init(cfg.mask_channels, rng);
        proj_in.init(cfg.mask_channels, ch[0], cfg.mask_down, rng);
        res_in.init(ch[0], ch[0], cfg.temb_dim, cfg.groups, rng);
        levels.resize(ch.size());
        for (size_t i = 0; i < ch.size(); ++i) {
            auto& lvl = levels[i];
            const int prev = i == 0 ? ch[0] : ch[i - 1];
            lvl.down.init(prev, ch[i], 3, 2, 1, rng);
            lvl.res.init(ch[i], ch[i], cfg.temb_dim, cfg.groups, rng);
            lvl.attn_gn.init(ch[i], cfg.groups);
            lvl.wq_s.init(ch[i], ch[i], rng);
            lvl.wk_s.init(ch[i], ch[i], rng);
            lvl.wv_s.init(ch[i], ch[i], rng);
            lvl.wo_s.init(ch[i], ch[i], rng);
            lvl.cattn.init(ch[i], cfg.text_dim, cfg.groups, rng);
            lvl.fuse.init(ch[i], ch[i], cfg.temb_dim, cfg.groups, rng);
            // level i sits at H / 2^(i+1); the mask grid at H / 2^mask_down
            const int factor_log2 = cfg.mask_down - (static_cast<int>(i) + 1);
            lvl.proj.init(cfg.mask_channels, ch[i], std::max(0, factor_log2), rng);
            lvl.zero_conv.init_zero(ch[i], ch[i], 1, 1, 0);
        }
    }

    // The trainable branch starts as a copy of the pretrained encoder.
    void copy_encoder_from(const diffusion::BackboneUNet<S>& b) {
        auto copy = [](Tensor<S>& dst, const Tensor<S>& src) { dst.val() = src.val(); };
        copy(temb1.w, b.temb1.w);
        copy(temb1.b, b.temb1.b);
        copy(temb2.w, b.temb2.w);
        copy(temb2.b, b.temb2.b);
        copy(stem.w, b.stem.w);
        copy(stem.b, b.stem.b);
        for (size_t i = 0; i < levels.size(); ++i) {
            auto& l = levels[i];
            const auto& d = b.downs[i];
            copy(l.down.w, d.down.w);
            copy(l.down.b, d.down.b);
            auto copy_res = [&copy](nn::ResBlock<S>& dst, const nn::ResBlock<S>& src) {
                copy(dst.gn1.gamma, src.gn1.gamma);
                copy(dst.gn1.beta, src.gn1.beta);
                copy(dst.conv1.w, src.conv1.w);
                copy(dst.conv1.b, src.conv1.b);
                copy(dst.temb_proj.w, src.temb_proj.w);
                copy(dst.temb_proj.b, src.temb_proj.b);
                copy(dst.gn2.gamma, src.gn2.gamma);
                copy(dst.gn2.beta, src.gn2.beta);
                copy(dst.conv2.w, src.conv2.w);
                copy(dst.conv2.b, src.conv2.b);
                if (src.has_skip) {
                    copy(dst.skip.w, src.skip.w);
                    copy(dst.skip.b, src.skip.b);
                }
            };
            copy_res(l.res, d.res);
            copy(l.attn_gn.gamma, d.sattn.gn.gamma);
            copy(l.attn_gn.beta, d.sattn.gn.beta);
            copy(l.wq_s.w, d.sattn.wq.w);
            copy(l.wq_s.b, d.sattn.wq.b);
            copy(l.wk_s.w, d.sattn.wk.w);
            copy(l.wk_s.b, d.sattn.wk.b);
            copy(l.wv_s.w, d.sattn.wv.w);
            copy(l.wv_s.b, d.sattn.wv.b);
            copy(l.wo_s.w, d.sattn.wo.w);
            copy(l.wo_s.b, d.sattn.wo.b);
            copy(l.cattn.gn.gamma, d.cattn.gn.gamma);
            copy(l.cattn.gn.beta, d.cattn.gn.beta);
            copy(l.cattn.wq.w, d.cattn.wq.w);
            copy(l.cattn.wq.b, d.cattn.wq.b);
            copy(l.cattn.wk.w, d.cattn.wk.w);
            copy(l.cattn.wk.b, d.cattn.wk.b);
            copy(l.cattn.wv.w, d.cattn.wv.w);
            copy(l.cattn.wv.b, d.cattn.wv.b);
            copy(l.cattn.wo.w, d.cattn.wo.w);
            copy(l.cattn.wo.b, d.cattn.wo.b);
        }
    }

    // Blur each sample's mask with the configured sigma (not differentiated;
    // masks are inputs).
    Array<S> blur_batch(const Array<S>& masks) const {
        const int N = masks.dim(0), H = masks.dim(2), W = masks.dim(3);
        Array<S> out({N, 1, H, W});
        for (int n = 0; n < N; ++n) {
            Array<S> m({H, W});
            std::copy_n(masks.data() + int64_t(n) * H * W, int64_t(H) * W, m.data());
            const auto b = blur_mask(m, cfg.blur_sigma);
            std::copy_n(b.data(), int64_t(H) * W, out.data() + int64_t(n) * H * W);
        }
        return out;
    }

    MaskConditioning<S> condition(const Array<S>& masks) const {
        auto sharp_in = Tensor<S>::constant(masks);
        auto blur_in = Tensor<S>::constant(blur_batch(masks));
        auto f_sharp = enc_sharp(sharp_in);
        auto f_blur = enc_blur(blur_in);
        return mask_weighting(f_sharp, f_blur, weight_net, force_mw_zero);
    }

    // Returns one residual per decoder level of the backbone (already passed
    // through the zero convolutions).
    std::vector<Tensor<S>> forward(Tensor<S> x_t, const std::vector<int>& t,
                                   const TextBatch<S>& text, const Array<S>& masks) const {
        if (masks.ndim() != 4 || masks.dim(1) != 1 || masks.dim(0) != x_t.val().dim(0))
            throw ShapeError("control_forward: want masks [N,1,H,W] matching the batch");
        if (masks.dim(2) != x_t.val().dim(2) || masks.dim(3) != x_t.val().dim(3))
            throw ShapeError("control_forward: mask resolution differs from x_t");

        auto cond = condition(masks);
        auto e = temb2.flat(ops::silu(temb1.flat(
            Tensor<S>::constant(diffusion::timestep_features<S>(t, cfg.temb_dim)))));

        auto h = ops::add(stem(x_t), proj_in(cond.f_cond));
        h = res_in(h, e);  // noise embedding F_n

        std::vector<Tensor<S>> residuals;
        for (const auto& lvl : levels) {
            h = lvl.down(h);
            h = lvl.res(h, e);
            // text-aware self-attention (pre-norm, residual, shared cross QK)
            {
                const int H = h.val().dim(2), W = h.val().dim(3);
                auto f_a = ops::nchw_to_tokens(lvl.attn_gn(h));
                auto o = text_aware_self_attention(f_a, lvl.wq_s, lvl.wk_s, lvl.wv_s, lvl.cattn.wq,
                                                   lvl.cattn.wk, text,
                                                   static_cast<Tensor<S>*>(nullptr), force_s_one);
                h = ops::add(h, ops::tokens_to_nchw(lvl.wo_s.tokens(o), H, W));
            }
            h = lvl.cattn(h, text);
            h = lvl.fuse(ops::add(h, lvl.proj(cond.f_cond)), e);
            residuals.push_back(lvl.zero_conv(h));
        }
        return residuals;
    }

    void visit_params(const nn::ParamVisitor<S>& cb) {
        temb1.visit("control.temb1", cb);
        temb2.visit("control.temb2", cb);
        stem.visit("control.stem", cb);
        proj_in.visit("control.proj_in", cb);
        res_in.visit("control.res_in", cb);
        enc_sharp.visit("control.enc_sharp", cb);
        enc_blur.visit("control.enc_blur", cb);
        weight_net.visit("control.weight_net", cb);
        for (size_t i = 0; i < levels.size(); ++i) {
            const std::string p = "control.level" + std::to_string(i);
            auto& l = levels[i];
            l.down.visit(p + ".down", cb);
            l.res.visit(p + ".res", cb);
            l.attn_gn.visit(p + ".attn_gn", cb);
            l.wq_s.visit(p + ".wq_s", cb);
            l.wk_s.visit(p + ".wk_s", cb);
            l.wv_s.visit(p + ".wv_s", cb);
            l.wo_s.visit(p + ".wo_s", cb);
            l.cattn.visit(p + ".cattn", cb);
            l.fuse.visit(p + ".fuse", cb);
            l.proj.visit(p + ".proj", cb);
            l.zero_conv.visit(p + ".zero_conv", cb);
        }
    }

    void set_trainable(bool flag) {
        visit_params([flag](const std::string&, Tensor<S>& p) { p.set_trainable(flag); });
    }

    uint64_t params_checksum() {
        uint64_t h = 14695981039346656037ULL;
        visit_params([&h](const std::string& name, Tensor<S>& p) {
            h = fnv1a64(name.data(), name.size(), h);
            const auto f = p.val().template cast<float>();
            h = fnv1a64(f.data(), f.v.size() * sizeof(float), h);
        });
        return h;
    }
};

// Frozen backbone + trainable control branch as one noise predictor.
template <class S>
struct ControlledModel final : diffusion::EpsModel<S> {
    diffusion::BackboneUNet<S>* backbone;
    ControlBranch<S>* control;
    ControlledModel(diffusion::BackboneUNet<S>* b, ControlBranch<S>* c) : backbone(b), control(c) {}

    Tensor<S> eps(Tensor<S> x_t, const std::vector<int>& t, const TextBatch<S>& text,
                  const Array<S>* masks) override {
        if (!masks) throw ShapeError("controlled model needs mask conditioning");
        auto residuals = control->forward(x_t, t, text, *masks);
        return backbone->forward(x_t, t, text, &residuals);
    }
};

}  // namespace ccis::control

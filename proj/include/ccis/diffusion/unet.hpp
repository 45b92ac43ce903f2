#pragma once

#include "ccis/diffusion/config.hpp"
#include "ccis/nn/attention.hpp"

namespace ccis::diffusion {

// Sinusoidal timestep features, computed in float32 for every scalar type.
template <class S>
Array<S> timestep_features(const std::vector<int>& t, int dim) {
    const int N = static_cast<int>(t.size());
    const int half = dim / 2;
    Array<float> e({N, dim});
    for (int n = 0; n < N; ++n)
        for (int k = 0; k < half; ++k) {
            const double freq = std::exp(-std::log(10000.0) * double(k) / double(half - 1));
            e[int64_t(n) * dim + k] = static_cast<float>(std::sin(t[static_cast<size_t>(n)] * freq));
            e[int64_t(n) * dim + half + k] =
                static_cast<float>(std::cos(t[static_cast<size_t>(n)] * freq));
        }
    return e.template cast<S>();
}

// Denoiser backbone: stem, per-level [strided conv, ResNet, self-attention,
// cross-attention on the text embedding], middle ResNet, mirrored decoder with
// skip concatenation, GroupNorm head. Control residuals, when present, are
// added to the encoder skips (one per decoder level).
template <class S>
struct BackboneUNet {
    ModelConfig cfg;
    nn::Linear<S> temb1, temb2;
    nn::Conv2d<S> stem;

    struct DownLevel {
        nn::Conv2d<S> down;
        nn::ResBlock<S> res;
        nn::SelfAttnBlock<S> sattn;
        nn::CrossAttnBlock<S> cattn;
    };
    std::vector<DownLevel> downs;
    nn::ResBlock<S> mid;
    struct UpLevel {
        nn::ResBlock<S> res;
        nn::SelfAttnBlock<S> sattn;
        nn::CrossAttnBlock<S> cattn;
        nn::Conv2d<S> up_conv;
    };
    std::vector<UpLevel> ups;
    nn::GroupNorm<S> head_gn;
    nn::Conv2d<S> head;

    void init(const ModelConfig& c, Rng& rng) {
        cfg = c;
        const auto& ch = cfg.channels;
        temb1.init(cfg.temb_dim, cfg.temb_dim, rng);
        temb2.init(cfg.temb_dim, cfg.temb_dim, rng);
        stem.init(3, ch[0], 3, 1, 1, rng);
        downs.resize(ch.size());
        for (size_t i = 0; i < ch.size(); ++i) {
            const int prev = i == 0 ? ch[0] : ch[i - 1];
            downs[i].down.init(prev, ch[i], 3, 2, 1, rng);
            downs[i].res.init(ch[i], ch[i], cfg.temb_dim, cfg.groups, rng);
            downs[i].sattn.init(ch[i], cfg.groups, rng);
            downs[i].cattn.init(ch[i], cfg.text_dim, cfg.groups, rng);
        }
        mid.init(ch.back(), ch.back(), cfg.temb_dim, cfg.groups, rng);
        ups.resize(ch.size());
        for (int i = static_cast<int>(ch.size()) - 1; i >= 0; --i) {
            auto& u = ups[static_cast<size_t>(i)];
            u.res.init(2 * ch[static_cast<size_t>(i)], ch[static_cast<size_t>(i)], cfg.temb_dim,
                       cfg.groups, rng);
            u.sattn.init(ch[static_cast<size_t>(i)], cfg.groups, rng);
            u.cattn.init(ch[static_cast<size_t>(i)], cfg.text_dim, cfg.groups, rng);
            const int out = i == 0 ? ch[0] : ch[static_cast<size_t>(i) - 1];
            u.up_conv.init(ch[static_cast<size_t>(i)], out, 3, 1, 1, rng);
        }
        head_gn.init(ch[0], cfg.groups);
        head.init(ch[0], 3, 3, 1, 1, rng, /*gain=*/0.2);
    }

    Tensor<S> temb(const std::vector<int>& t) const {
        auto e = Tensor<S>::constant(timestep_features<S>(t, cfg.temb_dim));
        return temb2.flat(ops::silu(temb1.flat(e)));
    }

    Tensor<S> forward(Tensor<S> x_t, const std::vector<int>& t, const TextBatch<S>& text,
                      const std::vector<Tensor<S>>* control_residuals = nullptr) const {
        if (x_t.val().ndim() != 4 || x_t.val().dim(1) != 3)
            throw ShapeError("backbone_forward: want x_t [N,3,H,W]");
        if (control_residuals && control_residuals->size() != downs.size())
            throw ShapeError("backbone_forward: one control residual per decoder level expected");
        auto e = temb(t);
        auto h = stem(x_t);
        std::vector<Tensor<S>> skips;
        for (const auto& lvl : downs) {
            h = lvl.down(h);
            h = lvl.res(h, e);
            h = lvl.sattn(h);
            h = lvl.cattn(h, text);
            skips.push_back(h);
        }
        h = mid(h, e);
        for (int i = static_cast<int>(downs.size()) - 1; i >= 0; --i) {
            auto skip = skips[static_cast<size_t>(i)];
            if (control_residuals) {
                const auto& r = (*control_residuals)[static_cast<size_t>(i)];
                if (r.shape() != skip.shape())
                    throw ShapeError("control residual shape mismatch at level " + std::to_string(i));
                skip = ops::add(skip, r);
            }
            const auto& u = ups[static_cast<size_t>(i)];
            h = ops::concat_ch(h, skip);
            h = u.res(h, e);
            h = u.sattn(h);
            h = u.cattn(h, text);
            h = u.up_conv(ops::upsample_nearest2(h));
        }
        return head(ops::silu(head_gn(h)));
    }

    void visit_params(const nn::ParamVisitor<S>& cb) {
        temb1.visit("backbone.temb1", cb);
        temb2.visit("backbone.temb2", cb);
        stem.visit("backbone.stem", cb);
        for (size_t i = 0; i < downs.size(); ++i) {
            const std::string p = "backbone.down" + std::to_string(i);
            downs[i].down.visit(p + ".down", cb);
            downs[i].res.visit(p + ".res", cb);
            downs[i].sattn.visit(p + ".sattn", cb);
            downs[i].cattn.visit(p + ".cattn", cb);
        }
        mid.visit("backbone.mid", cb);
        for (size_t i = 0; i < ups.size(); ++i) {
            const std::string p = "backbone.up" + std::to_string(i);
            ups[i].res.visit(p + ".res", cb);
            ups[i].sattn.visit(p + ".sattn", cb);
            ups[i].cattn.visit(p + ".cattn", cb);
            ups[i].up_conv.visit(p + ".up_conv", cb);
        }
        head_gn.visit("backbone.head_gn", cb);
        head.visit("backbone.head", cb);
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

}  // namespace ccis::diffusion

#pragma once

#include <array>
#include <nlohmann/json.hpp>

#include "ccis/diffusion/model_io.hpp"
#include "ccis/nn/layers.hpp"
#include "ccis/synth/captions.hpp"
#include "ccis/synth/scene.hpp"

namespace ccis::eval {

// Four-head attribute classifier (color/shape/texture/swelling) on images.
// Desk-scale stand-in for a vision-language scorer: text consistency of an
// image is the fraction of caption attributes the classifier agrees with.
struct AttributeScorer {
    static constexpr std::array<int, 4> kHeadSizes{4, 4, 3, 3};

    nn::Conv2d<float> c1, c2, c3;
    nn::GroupNorm<float> g1, g2, g3;
    std::array<nn::Linear<float>, 4> heads;

    void init(Rng& rng) {
        c1.init(3, 16, 3, 2, 1, rng);
        g1.init(16, 4);
        c2.init(16, 32, 3, 2, 1, rng);
        g2.init(32, 8);
        c3.init(32, 64, 3, 2, 1, rng);
        g3.init(64, 8);
        for (size_t h = 0; h < 4; ++h) heads[h].init(64, kHeadSizes[h], rng);
    }

    Tensor<float> trunk(Tensor<float> x) const {
        auto h = ops::silu(g1(c1(x)));
        h = ops::silu(g2(c2(h)));
        h = ops::silu(g3(c3(h)));
        return ops::global_avg_pool(h);  // [N,64]
    }

    std::array<Tensor<float>, 4> logits(Tensor<float> images01) const {
        auto f = trunk(images01);
        std::array<Tensor<float>, 4> out;
        for (size_t h = 0; h < 4; ++h) out[h] = heads[h].flat(f);
        return out;
    }

    std::array<int, 4> predict(const Array<float>& image) const {
        NoGradGuard ng;
        Array<float> x({1, 3, image.dim(1), image.dim(2)});
        std::copy_n(image.data(), image.numel(), x.data());
        auto lg = logits(Tensor<float>::constant(std::move(x)));
        std::array<int, 4> out{};
        for (size_t h = 0; h < 4; ++h) {
            const auto& v = lg[h].val();
            int best = 0;
            for (int k = 1; k < kHeadSizes[h]; ++k)
                if (v[k] > v[best]) best = k;
            out[h] = best;
        }
        return out;
    }

    void visit_params(const nn::ParamVisitor<float>& cb) {
        c1.visit("scorer.c1", cb);
        g1.visit("scorer.g1", cb);
        c2.visit("scorer.c2", cb);
        g2.visit("scorer.g2", cb);
        c3.visit("scorer.c3", cb);
        g3.visit("scorer.g3", cb);
        for (size_t h = 0; h < 4; ++h)
            heads[h].visit("scorer.head" + std::to_string(h), cb);
    }

    void save(const std::string& path) {
        diffusion::Checkpoint ckpt;
        nlohmann::json meta;
        meta["kind"] = "scorer";
        ckpt.meta_json = meta.dump();
        diffusion::collect_params<float>(
            [this](const nn::ParamVisitor<float>& cb) { visit_params(cb); }, ckpt.tensors);
        diffusion::save_checkpoint(path, ckpt);
    }

    static AttributeScorer load(const std::string& path) {
        AttributeScorer s;
        Rng tmp(0);
        s.init(tmp);
        auto ckpt = diffusion::load_checkpoint(path);
        diffusion::load_params<float>(
            [&s](const nn::ParamVisitor<float>& cb) { s.visit_params(cb); }, ckpt);
        return s;
    }
};

inline std::array<int, 4> attribute_targets(const synth::PolypAttributes& a) {
    return {static_cast<int>(a.color), static_cast<int>(a.shape), static_cast<int>(a.texture),
            static_cast<int>(a.swelling)};
}

struct ScorerTrainConfig {
    int steps = 1600;
    int batch_size = 16;
    double learning_rate = 1e-3;
    uint64_t seed = 17;
};

// Cross-entropy over the four heads, Adam, deterministic in the seed.
inline void train_scorer(AttributeScorer& scorer,
                         const std::vector<const synth::Triplet*>& records,
                         const ScorerTrainConfig& cfg) {
    if (records.empty()) throw ConfigError("train_scorer: no records");
    std::vector<Tensor<float>> params;
    scorer.visit_params([&params](const std::string&, Tensor<float>& p) { params.push_back(p); });
    for (auto& p : params) p.set_trainable(true);
    nn::Adam<float> opt;
    opt.lr = cfg.learning_rate;
    opt.reset(params);

    const int H = records[0]->image.dim(1), W = records[0]->image.dim(2);
    for (int step = 0; step < cfg.steps; ++step) {
        Rng pick(derive_seed(cfg.seed, 0x5c0, uint64_t(step)));
        const int N = cfg.batch_size;
        Array<float> x({N, 3, H, W});
        std::vector<std::array<int, 4>> targets(static_cast<size_t>(N));
        for (int n = 0; n < N; ++n) {
            const auto& rec = *records[pick.uniform_int(records.size())];
            std::copy_n(rec.image.data(), rec.image.numel(), x.data() + int64_t(n) * 3 * H * W);
            targets[static_cast<size_t>(n)] = attribute_targets(rec.attributes);
        }
        nn::zero_grads(params);
        auto lg = scorer.logits(Tensor<float>::constant(std::move(x)));
        Tensor<float> loss;
        for (size_t h = 0; h < 4; ++h) {
            const int K = AttributeScorer::kHeadSizes[h];
            Array<float> onehot({1, N, K});
            for (int n = 0; n < N; ++n)
                onehot[int64_t(n) * K + targets[static_cast<size_t>(n)][h]] = 1.0f;
            auto logp = ops::log_op(
                ops::clamp_min(ops::softmax_last(ops::reshape(lg[h], {1, N, K})), 1e-12f));
            auto nll = ops::scale(ops::mean_all(ops::mul_const(logp, onehot)), -float(K));
            loss = loss.defined() ? ops::add(loss, nll) : nll;
        }
        loss.backward();
        opt.step(params);
    }
    for (auto& p : params) p.set_trainable(false);
}

// Fraction of correct head predictions per head over a record set.
inline std::array<double, 4> scorer_accuracy(const AttributeScorer& scorer,
                                             const std::vector<const synth::Triplet*>& records) {
    std::array<double, 4> acc{};
    for (const auto* rec : records) {
        const auto pred = scorer.predict(rec->image);
        const auto tgt = attribute_targets(rec->attributes);
        for (size_t h = 0; h < 4; ++h) acc[h] += pred[h] == tgt[h] ? 1.0 : 0.0;
    }
    for (auto& a : acc) a /= double(records.size());
    return acc;
}

// Score in {0, 0.25, 0.5, 0.75, 1}: fraction of the caption's four attributes
// the classifier sees in the image. Unparseable captions raise ValidationError.
inline double text_consistency(const Array<float>& image, const std::string& caption_fg,
                               const AttributeScorer& scorer) {
    const auto attrs = synth::parse_caption_attributes(caption_fg);
    const auto tgt = attribute_targets(attrs);
    const auto pred = scorer.predict(image);
    int match = 0;
    for (size_t h = 0; h < 4; ++h) match += pred[h] == tgt[h] ? 1 : 0;
    return double(match) / 4.0;
}

}  // namespace ccis::eval

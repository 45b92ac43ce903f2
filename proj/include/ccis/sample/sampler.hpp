#pragma once

#include <nlohmann/json.hpp>

#include "ccis/control/control_branch.hpp"
#include "ccis/diffusion/loss.hpp"
#include "ccis/diffusion/model_io.hpp"
#include "ccis/text/text_encoder.hpp"

namespace ccis::sample {

using diffusion::NoiseSchedule;

struct SamplerConfig {
    int steps = 20;
    double cfg_scale = 7.0;
    double eta = 0.0;
    uint64_t seed = 0;

    void validate(int T) const {
        if (steps < 1 || steps > T) throw ConfigError("sampler.steps must be in [1, T]");
        if (cfg_scale < 0) throw ConfigError("sampler.cfg_scale must be >= 0");
        if (eta < 0 || eta > 1) throw ConfigError("sampler.eta must be in [0, 1]");
    }
};

// Classifier-free guidance: eps_uncond + w * (eps_cond - eps_uncond).
template <class S>
Array<S> cfg_epsilon(const Array<S>& eps_cond, const Array<S>& eps_uncond, double w) {
    if (eps_cond.shape != eps_uncond.shape) throw ShapeError("cfg_epsilon: shape mismatch");
    Array<S> out(eps_cond.shape);
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = eps_uncond[i] + S(w) * (eps_cond[i] - eps_uncond[i]);
    return out;
}

// One DDIM reverse step. t_prev == -1 denotes alpha_bar = 1 (the final jump to
// the x0 prediction). x0 is clamped to [-1,1] before reuse.
template <class S>
Array<S> ddim_step(const Array<S>& x_t, const Array<S>& eps_hat, int t, int t_prev,
                   const NoiseSchedule& sched, double eta, Rng& rng) {
    if (x_t.shape != eps_hat.shape) throw ShapeError("ddim_step: shape mismatch");
    if (!(t > t_prev && t_prev >= -1)) throw ConfigError("ddim_step: need t > t_prev >= -1");
    const double ab_t = sched.alpha_bar(t);
    const double ab_prev = t_prev < 0 ? 1.0 : sched.alpha_bar(t_prev);
    const double sigma =
        eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_prev);
    const double c_x0 = std::sqrt(ab_prev);
    const double c_eps = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    const double inv_sqrt_ab = 1.0 / std::sqrt(ab_t);
    const double sqrt_1m_ab = std::sqrt(1.0 - ab_t);

    Array<S> out(x_t.shape);
    for (int64_t i = 0; i < out.numel(); ++i) {
        if (!std::isfinite(double(x_t[i])) || !std::isfinite(double(eps_hat[i])))
            throw NumericError("ddim_step: non-finite input at t=" + std::to_string(t));
        double x0 = (double(x_t[i]) - sqrt_1m_ab * double(eps_hat[i])) * inv_sqrt_ab;
        x0 = std::clamp(x0, -1.0, 1.0);
        double v = c_x0 * x0 + c_eps * double(eps_hat[i]);
        if (sigma > 0.0) v += sigma * rng.normal();
        out[i] = S(v);
    }
    return out;
}

// Evenly spaced descending timesteps that always include T-1; the final step
// jumps to t_prev = -1.
inline std::vector<int> timestep_sequence(int T, int steps) {
    const int ratio = T / steps;
    std::vector<int> ts(static_cast<size_t>(steps));
    for (int i = 0; i < steps; ++i) ts[static_cast<size_t>(i)] = T - 1 - i * ratio;
    if (ts.back() < 0) throw ConfigError("timestep_sequence: too many steps for T");
    return ts;
}

// Everything the sampler and evaluator need from a training run.
struct ModelBundle {
    diffusion::ModelConfig cfg;
    diffusion::BackboneUNet<float> backbone;
    control::ControlBranch<float> branch;
    text::TextEncoder tenc;
    NoiseSchedule sched;
    uint64_t config_hash = 0;
    std::string dataset_manifest_hash;
    std::string run_config_hash;
    std::string checkpoint_hash;

    static ModelBundle load(const std::string& ckpt_path) {
        auto ckpt = diffusion::load_checkpoint(ckpt_path);
        const auto meta = nlohmann::json::parse(ckpt.meta_json);
        if (meta.at("kind") != "control")
            throw ConfigError("expected a control checkpoint (trained bundle): " + ckpt_path);
        ModelBundle b;
        b.cfg = diffusion::ModelConfig::from_json(meta.at("model"));
        if (ckpt.config_hash != b.cfg.hash())
            throw ConfigError("checkpoint config hash does not match its stored config");
        Rng tmp(0);
        b.backbone.init(b.cfg, tmp);
        b.branch.init(b.cfg, tmp);
        diffusion::load_params<float>(
            [&b](const nn::ParamVisitor<float>& cb) { b.backbone.visit_params(cb); }, ckpt);
        diffusion::load_params<float>(
            [&b](const nn::ParamVisitor<float>& cb) { b.branch.visit_params(cb); }, ckpt);
        b.backbone.set_trainable(false);
        b.branch.set_trainable(false);
        b.tenc.init_from_seed(text::Vocabulary::builtin().size());
        if (meta.contains("text_encoder_checksum") &&
            meta.at("text_encoder_checksum").get<uint64_t>() != b.tenc.checksum())
            throw ConfigError("text encoder asset mismatch for " + ckpt_path);
        b.sched = NoiseSchedule::linear(b.cfg.T, b.cfg.beta_start, b.cfg.beta_end);
        b.config_hash = ckpt.config_hash;
        b.dataset_manifest_hash = meta.value("dataset_manifest_hash", "");
        b.run_config_hash = meta.value("run_config_hash", "");
        b.checkpoint_hash = hash_hex(diffusion::checkpoint_params_hash(ckpt));
        return b;
    }

    diffusion::TextBatch<float> encode_captions(const std::vector<std::string>& caps) const {
        std::vector<text::TextEmbedding<float>> embs;
        const auto& vocab = text::Vocabulary::builtin();
        for (const auto& c : caps) embs.push_back(tenc.encode<float>(text::tokenize(c, vocab, cfg.text_len)));
        return diffusion::TextBatch<float>::pack(embs);
    }
};

// Mask- and text-conditioned DDIM sampling with classifier-free guidance.
// Both CFG branches keep the mask condition; only the text varies. Returns an
// image in [0,1], [3,H,W]. Deterministic for eta = 0.
inline Array<float> sample(const Array<uint8_t>& mask, const std::string& caption, ModelBundle& bundle,
                           const SamplerConfig& scfg) {
    NoGradGuard ng;
    const auto& cfg = bundle.cfg;
    scfg.validate(cfg.T);
    if (mask.ndim() != 2 || mask.dim(0) != cfg.image_size || mask.dim(1) != cfg.image_size)
        throw ShapeError("sample: mask resolution " + shape_str(mask.shape) +
                         " does not match the training resolution " +
                         std::to_string(cfg.image_size));
    const int H = cfg.image_size, W = cfg.image_size;
    const bool use_cfg = scfg.cfg_scale != 1.0;
    const int N = use_cfg ? 2 : 1;

    auto text = use_cfg ? bundle.encode_captions({caption, ""})
                        : bundle.encode_captions({caption});
    Array<float> masks({N, 1, H, W});
    for (int n = 0; n < N; ++n)
        for (int64_t i = 0; i < int64_t(H) * W; ++i)
            masks[int64_t(n) * H * W + i] = static_cast<float>(mask[i]);

    Rng rng(derive_seed(scfg.seed, 0x5a3e));
    Array<float> x({3, H, W});
    for (auto& v : x.v) v = static_cast<float>(rng.normal());

    const auto ts = timestep_sequence(cfg.T, scfg.steps);
    for (size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const int t_prev = i + 1 < ts.size() ? ts[i + 1] : -1;

        Array<float> x_batch({N, 3, H, W});
        for (int n = 0; n < N; ++n) std::copy_n(x.data(), x.numel(), x_batch.data() + int64_t(n) * x.numel());
        std::vector<int> t_batch(static_cast<size_t>(N), t);

        auto xt = Tensor<float>::constant(std::move(x_batch));
        auto residuals = bundle.branch.forward(xt, t_batch, text, masks);
        auto pred = bundle.backbone.forward(xt, t_batch, text, &residuals);

        Array<float> eps_hat({3, H, W});
        if (use_cfg) {
            Array<float> cond({3, H, W}), uncond({3, H, W});
            std::copy_n(pred.val().data(), cond.numel(), cond.data());
            std::copy_n(pred.val().data() + cond.numel(), uncond.numel(), uncond.data());
            eps_hat = cfg_epsilon(cond, uncond, scfg.cfg_scale);
        } else {
            std::copy_n(pred.val().data(), eps_hat.numel(), eps_hat.data());
        }
        x = ddim_step(x, eps_hat, t, t_prev, bundle.sched, scfg.eta, rng);
    }

    Array<float> out({3, H, W});
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = std::clamp((x[i] + 1.0f) * 0.5f, 0.0f, 1.0f);
    return out;
}

}  // namespace ccis::sample

#pragma once

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "ccis/control/control_branch.hpp"
#include "ccis/diffusion/loss.hpp"
#include "ccis/diffusion/model_io.hpp"
#include "ccis/synth/dataset.hpp"
#include "ccis/text/text_encoder.hpp"

namespace ccis::train {

using diffusion::BackboneUNet;
using diffusion::Checkpoint;
using diffusion::ModelConfig;
using diffusion::NamedTensor;
using diffusion::NoiseSchedule;
using diffusion::TextBatch;
using diffusion::TrainBatch;

// Replace each caption independently by "" with probability p.
inline std::vector<std::string> prompt_dropout(const std::vector<std::string>& captions, double p,
                                               Rng& rng) {
    if (p < 0.0 || p > 1.0) throw ConfigError("prompt_dropout: p must be in [0,1]");
    std::vector<std::string> out;
    out.reserve(captions.size());
    for (const auto& c : captions) out.push_back(rng.bernoulli(p) ? std::string() : c);
    return out;
}

struct TrainConfig {
    double learning_rate = 1e-5;
    int batch_size = 4;
    int steps = 0;
    double prompt_dropout_p = 0.5;
    uint64_t seed = 0;
    int checkpoint_every = 2000;
    std::string dataset_path;
    std::string output_dir;
    std::string backbone_checkpoint;
    bool grad_clip = false;
    double clip_norm = 1.0;
    uint64_t run_config_hash = 0;

    void validate() const {
        if (learning_rate <= 0) throw ConfigError("train.learning_rate must be > 0");
        if (prompt_dropout_p < 0 || prompt_dropout_p > 1)
            throw ConfigError("train.prompt_dropout_p must be in [0,1]");
        if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
        if (steps < 0) throw ConfigError("train.steps must be >= 0");
        if (checkpoint_every < 1) throw ConfigError("train.checkpoint_every must be >= 1");
    }
};

struct PretrainConfig {
    double learning_rate = 2e-4;
    int batch_size = 4;
    int steps = 0;
    double prompt_dropout_p = 0.5;
    uint64_t seed = 0;
    std::string dataset_path;
    std::string output_dir;
    ModelConfig model;
    uint64_t run_config_hash = 0;
};

// Full caption fed to the text encoder: foreground and background joined.
inline std::string full_caption(const synth::Triplet& t) {
    return t.caption_fg + "; " + t.caption_bg;
}

// Precomputed per-record training inputs.
struct PreparedData {
    std::vector<Array<float>> images;                    // [3,H,W]
    std::vector<Array<float>> masks;                     // [1,H,W]
    std::vector<text::TextEmbedding<float>> embeddings;  // full captions
    text::TextEmbedding<float> empty_embedding;
    std::vector<std::string> captions;
    std::vector<std::string> ids;
    std::vector<int> train_split;
    int height = 0, width = 0;
};

inline PreparedData prepare_data(const synth::Dataset& ds, const text::TextEncoder& tenc,
                                 const text::Vocabulary& vocab, const ModelConfig& cfg) {
    PreparedData p;
    p.height = ds.manifest.height;
    p.width = ds.manifest.width;
    for (const auto& rec : ds.records) {
        p.images.push_back(rec.image);
        Array<float> m({1, p.height, p.width});
        for (int64_t i = 0; i < m.numel(); ++i) m[i] = static_cast<float>(rec.mask[i]);
        p.masks.push_back(std::move(m));
        const std::string cap = full_caption(rec);
        p.captions.push_back(cap);
        p.embeddings.push_back(tenc.encode<float>(text::tokenize(cap, vocab, cfg.text_len)));
        p.ids.push_back(rec.id);
    }
    p.empty_embedding = tenc.encode<float>(text::tokenize("", vocab, cfg.text_len));
    p.train_split = synth::train_indices(static_cast<int>(ds.records.size()));
    return p;
}

// Batch composition, prompt dropout and noise are all pure functions of
// (seed, step), which makes runs reproducible and resume exact.
inline TrainBatch<float> make_batch(const PreparedData& data, uint64_t seed, int64_t step,
                                    int batch_size, double dropout_p, bool with_masks,
                                    std::vector<int>* t_out, Array<float>* eps_out, int T) {
    Rng pick(derive_seed(seed, 0xba7c4, uint64_t(step)));
    Rng drop(derive_seed(seed, 0xd209, uint64_t(step)));
    Rng noise(derive_seed(seed, 0x42015e, uint64_t(step)));

    const int N = batch_size;
    const int H = data.height, W = data.width;
    TrainBatch<float> batch;
    batch.images01 = Array<float>({N, 3, H, W});
    if (with_masks) batch.masks = Array<float>({N, 1, H, W});

    std::vector<std::string> caps;
    std::vector<int> indices;
    for (int n = 0; n < N; ++n) {
        const int idx = data.train_split[pick.uniform_int(data.train_split.size())];
        indices.push_back(idx);
        caps.push_back(data.captions[static_cast<size_t>(idx)]);
        batch.ids.push_back(data.ids[static_cast<size_t>(idx)]);
    }
    caps = prompt_dropout(caps, dropout_p, drop);

    std::vector<text::TextEmbedding<float>> embs;
    for (int n = 0; n < N; ++n) {
        const int idx = indices[static_cast<size_t>(n)];
        std::copy_n(data.images[static_cast<size_t>(idx)].data(), int64_t(3) * H * W,
                    batch.images01.data() + int64_t(n) * 3 * H * W);
        if (with_masks)
            std::copy_n(data.masks[static_cast<size_t>(idx)].data(), int64_t(H) * W,
                        batch.masks.data() + int64_t(n) * H * W);
        embs.push_back(caps[static_cast<size_t>(n)].empty()
                           ? data.empty_embedding
                           : data.embeddings[static_cast<size_t>(idx)]);
    }
    batch.text = TextBatch<float>::pack(embs);

    if (t_out && eps_out) {
        t_out->resize(static_cast<size_t>(N));
        for (auto& t : *t_out) t = static_cast<int>(noise.uniform_int(uint64_t(T)));
        *eps_out = Array<float>(batch.images01.shape);
        for (auto& e : eps_out->v) e = static_cast<float>(noise.normal());
    }
    return batch;
}

inline void append_log(std::ofstream& log, int64_t step, double loss) {
    nlohmann::json j;
    j["step"] = step;
    j["loss"] = loss;
    log << j.dump() << "\n";
}

// ---------------------------------------------------------------------------
// backbone pretraining (text-conditioned, no masks)
// ---------------------------------------------------------------------------

struct PretrainResult {
    std::string checkpoint_path;
    double initial_loss = 0, final_loss = 0;
};

inline PretrainResult pretrain_backbone(const synth::Dataset& ds, const PretrainConfig& cfg,
                                        BackboneUNet<float>* out_model = nullptr) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.output_dir);

    const auto& vocab = text::Vocabulary::builtin();
    text::TextEncoder tenc;
    tenc.init_from_seed(vocab.size());
    tenc.save((fs::path(cfg.output_dir) / "text_encoder.bin").string());
    vocab.save((fs::path(cfg.output_dir) / "vocab.txt").string());

    ModelConfig mc = cfg.model;
    mc.image_size = ds.manifest.height;

    BackboneUNet<float> net;
    Rng init_rng(derive_seed(cfg.seed, 0x1217));
    net.init(mc, init_rng);

    const auto sched = NoiseSchedule::linear(mc.T, mc.beta_start, mc.beta_end);
    auto data = prepare_data(ds, tenc, vocab, mc);

    std::vector<Tensor<float>> params;
    net.visit_params([&params](const std::string&, Tensor<float>& p) { params.push_back(p); });
    nn::Adam<float> opt;
    opt.lr = cfg.learning_rate;
    opt.reset(params);

    diffusion::BackboneModel<float> model(&net);
    std::ofstream log(fs::path(cfg.output_dir) / "pretrain_log.jsonl", std::ios::trunc);

    PretrainResult result;
    double running = 0;
    const int window = 100;
    std::vector<double> recent;
    for (int64_t step = 0; step < cfg.steps; ++step) {
        std::vector<int> t;
        Array<float> eps;
        auto batch = make_batch(data, cfg.seed, step, cfg.batch_size, cfg.prompt_dropout_p,
                                /*with_masks=*/false, &t, &eps, mc.T);
        nn::zero_grads(params);
        auto loss = diffusion::diffusion_loss_at(batch, t, eps, model, sched);
        const double lval = loss.val()[0];
        if (!std::isfinite(lval)) {
            std::string ids;
            for (const auto& id : batch.ids) ids += id + " ";
            throw NumericError("pretrain diverged: non-finite loss at step " +
                               std::to_string(step) + " batch [" + ids + "]");
        }
        loss.backward();
        opt.step(params);
        append_log(log, step, lval);

        recent.push_back(lval);
        if (static_cast<int>(recent.size()) > window) recent.erase(recent.begin());
        running = 0;
        for (double v : recent) running += v;
        running /= double(recent.size());
        if (step == window - 1 || (cfg.steps < window && step == cfg.steps - 1))
            result.initial_loss = running;
        if ((step + 1) % 500 == 0)
            std::fprintf(stderr, "[pretrain] step %lld/%d running_loss %.5f\n",
                         static_cast<long long>(step + 1), cfg.steps, running);
    }
    result.final_loss = running;

    net.set_trainable(false);

    Checkpoint ckpt;
    ckpt.config_hash = mc.hash();
    nlohmann::json meta;
    meta["kind"] = "backbone";
    meta["model"] = mc.to_json();
    meta["dataset_manifest_hash"] = ds.manifest_hash;
    meta["run_config_hash"] = hash_hex(cfg.run_config_hash);
    meta["steps"] = cfg.steps;
    meta["initial_loss"] = result.initial_loss;
    meta["final_loss"] = result.final_loss;
    meta["text_encoder_checksum"] = tenc.checksum();
    ckpt.meta_json = meta.dump();
    diffusion::collect_params<float>([&net](const nn::ParamVisitor<float>& cb) { net.visit_params(cb); },
                                     ckpt.tensors);
    result.checkpoint_path = (fs::path(cfg.output_dir) / "backbone.ckpt").string();
    save_checkpoint(result.checkpoint_path, ckpt);
    if (out_model) *out_model = std::move(net);
    return result;
}

// ---------------------------------------------------------------------------
// control-branch training (backbone and text encoder frozen)
// ---------------------------------------------------------------------------

struct ControlTrainer {
    ModelConfig mc;
    BackboneUNet<float> backbone;
    control::ControlBranch<float> branch;
    text::TextEncoder tenc;
    NoiseSchedule sched;
    PreparedData data;
    nn::Adam<float> opt;
    std::vector<Tensor<float>> params;
    int64_t step = 0;
    TrainConfig cfg;
    std::string dataset_hash;

    void init_from_backbone(const synth::Dataset& ds, const TrainConfig& c) {
        cfg = c;
        cfg.validate();
        if (!std::filesystem::exists(cfg.backbone_checkpoint))
            throw ConfigError("backbone checkpoint not found: " + cfg.backbone_checkpoint);
        auto bk = diffusion::load_checkpoint(cfg.backbone_checkpoint);
        const auto meta = nlohmann::json::parse(bk.meta_json);
        mc = ModelConfig::from_json(meta.at("model"));
        if (mc.image_size != ds.manifest.height)
            throw ConfigError("backbone was pretrained at a different resolution than the dataset");

        Rng tmp(0);
        backbone.init(mc, tmp);
        diffusion::load_params<float>(
            [this](const nn::ParamVisitor<float>& cb) { backbone.visit_params(cb); }, bk);
        backbone.set_trainable(false);

        Rng crng(derive_seed(cfg.seed, 0xc021));
        branch.init(mc, crng);
        branch.copy_encoder_from(backbone);
        branch.set_trainable(true);

        const auto& vocab = text::Vocabulary::builtin();
        tenc.init_from_seed(vocab.size());
        sched = NoiseSchedule::linear(mc.T, mc.beta_start, mc.beta_end);
        data = prepare_data(ds, tenc, vocab, mc);
        dataset_hash = ds.manifest_hash;

        params.clear();
        branch.visit_params([this](const std::string&, Tensor<float>& p) { params.push_back(p); });
        opt = nn::Adam<float>{};
        opt.lr = cfg.learning_rate;
        if (cfg.grad_clip) opt.clip_norm = cfg.clip_norm;
        opt.reset(params);
        step = 0;
    }

    double train_step() {
        std::vector<int> t;
        Array<float> eps;
        auto batch = make_batch(data, cfg.seed, step, cfg.batch_size, cfg.prompt_dropout_p,
                                /*with_masks=*/true, &t, &eps, mc.T);
        control::ControlledModel<float> model(&backbone, &branch);
        nn::zero_grads(params);
        auto loss = diffusion::diffusion_loss_at(batch, t, eps, model, sched);
        const double lval = loss.val()[0];
        if (!std::isfinite(lval)) {
            std::string ids;
            for (const auto& id : batch.ids) ids += id + " ";
            throw NumericError("train aborted: non-finite loss at step " + std::to_string(step) +
                               " batch [" + ids + "]");
        }
        loss.backward();
        opt.step(params);
        ++step;
        return lval;
    }

    Checkpoint make_checkpoint(bool with_optimizer = true) {
        Checkpoint ckpt;
        ckpt.config_hash = mc.hash();
        nlohmann::json meta;
        meta["kind"] = "control";
        meta["model"] = mc.to_json();
        meta["dataset_manifest_hash"] = dataset_hash;
        meta["run_config_hash"] = hash_hex(cfg.run_config_hash);
        meta["step"] = step;
        meta["seed"] = cfg.seed;
        meta["text_encoder_checksum"] = tenc.checksum();
        ckpt.meta_json = meta.dump();
        diffusion::collect_params<float>(
            [this](const nn::ParamVisitor<float>& cb) { backbone.visit_params(cb); }, ckpt.tensors);
        diffusion::collect_params<float>(
            [this](const nn::ParamVisitor<float>& cb) { branch.visit_params(cb); }, ckpt.tensors);
        if (with_optimizer) {
            ckpt.tensors.push_back(NamedTensor::scalar_i64("opt.step", opt.t));
            ckpt.tensors.push_back(NamedTensor::scalar_i64("trainer.step", step));
            for (size_t i = 0; i < params.size(); ++i) {
                NamedTensor m, v;
                m.name = "opt.m." + std::to_string(i);
                m.shape = opt.m[i].shape;
                m.f32 = opt.m[i].v;
                v.name = "opt.v." + std::to_string(i);
                v.shape = opt.v[i].shape;
                v.f32 = opt.v[i].v;
                ckpt.tensors.push_back(std::move(m));
                ckpt.tensors.push_back(std::move(v));
            }
        }
        return ckpt;
    }

    void resume_from(const Checkpoint& ckpt) {
        diffusion::load_params<float>(
            [this](const nn::ParamVisitor<float>& cb) { branch.visit_params(cb); }, ckpt);
        diffusion::load_params<float>(
            [this](const nn::ParamVisitor<float>& cb) { backbone.visit_params(cb); }, ckpt);
        const auto* st = ckpt.find("trainer.step");
        const auto* ot = ckpt.find("opt.step");
        if (!st || !ot) throw ConfigError("checkpoint has no optimizer state to resume from");
        step = st->i64[0];
        opt.t = ot->i64[0];
        for (size_t i = 0; i < params.size(); ++i) {
            const auto* m = ckpt.find("opt.m." + std::to_string(i));
            const auto* v = ckpt.find("opt.v." + std::to_string(i));
            if (!m || !v) throw ConfigError("checkpoint optimizer state is incomplete");
            opt.m[i] = Array<float>(m->shape, m->f32);
            opt.v[i] = Array<float>(v->shape, v->f32);
        }
    }
};

// Runs config.steps steps with periodic checkpoints and a JSONL loss log.
// The log holds only deterministic fields; wall-clock timing goes to stderr.
inline std::string train(const TrainConfig& cfg, ControlTrainer* out_trainer = nullptr,
                         const std::string& resume_checkpoint = "") {
    namespace fs = std::filesystem;
    auto ds = synth::load_dataset(cfg.dataset_path);
    ControlTrainer tr;
    tr.init_from_backbone(ds, cfg);
    fs::create_directories(cfg.output_dir);

    std::ofstream log;
    if (!resume_checkpoint.empty()) {
        tr.resume_from(diffusion::load_checkpoint(resume_checkpoint));
        log.open(fs::path(cfg.output_dir) / "train_log.jsonl", std::ios::app);
    } else {
        log.open(fs::path(cfg.output_dir) / "train_log.jsonl", std::ios::trunc);
    }
    if (!log) throw IoError("cannot write train_log.jsonl under " + cfg.output_dir);

    const auto t0 = std::chrono::steady_clock::now();
    while (tr.step < cfg.steps) {
        const double loss = tr.train_step();
        append_log(log, tr.step - 1, loss);
        if (tr.step % cfg.checkpoint_every == 0 && tr.step < cfg.steps) {
            const auto path =
                (fs::path(cfg.output_dir) / ("control_step" + std::to_string(tr.step) + ".ckpt"))
                    .string();
            save_checkpoint(path, tr.make_checkpoint());
        }
        if (tr.step % 500 == 0) {
            const double secs =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::fprintf(stderr, "[train] step %lld/%d loss %.5f (%.1fs)\n",
                         static_cast<long long>(tr.step), cfg.steps, loss, secs);
        }
    }
    const auto final_path = (fs::path(cfg.output_dir) / "control_final.ckpt").string();
    save_checkpoint(final_path, tr.make_checkpoint());
    if (out_trainer) *out_trainer = std::move(tr);
    return final_path;
}

}  // namespace ccis::train

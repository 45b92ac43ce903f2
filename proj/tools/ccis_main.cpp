#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "ccis/cli/run_config.hpp"
#include "ccis/eval/evaluate.hpp"
#include "ccis/sample/sampler.hpp"
#include "ccis/synth/imageio.hpp"
#include "ccis/train/trainer.hpp"

namespace fs = std::filesystem;
using namespace ccis;

namespace {

int run_make_dataset(const cli::RunConfig& rc) {
    const auto out = rc.get_str("dataset.out");
    const int n = static_cast<int>(rc.get_int("dataset.n"));
    const int size = static_cast<int>(rc.get_int("dataset.size"));
    const auto seed = static_cast<uint64_t>(rc.get_int("dataset.seed"));
    const auto captioner = rc.get_str("dataset.captioner");
    if (captioner != "template" && captioner != "http")
        throw ConfigError("dataset.captioner must be 'template' or 'http'");

    std::unique_ptr<synth::HttpCaptioner> http;
    if (captioner == "http") http = std::make_unique<synth::HttpCaptioner>(synth::HttpCaptioner::from_env());
    synth::build_dataset(n, size, size, seed, out,
                         captioner == "http" ? synth::CaptionerKind::Http
                                             : synth::CaptionerKind::Template,
                         http.get());
    rc.write_snapshot(out);
    std::cout << "dataset written to " << out << " (" << n << " records, " << size << "x" << size
              << ", config " << hash_hex(rc.hash()) << ")\n";
    return 0;
}

diffusion::ModelConfig model_config_from(const cli::RunConfig& rc, int image_size) {
    diffusion::ModelConfig mc;
    mc.image_size = image_size;
    mc.T = static_cast<int>(rc.get_int("model.T"));
    mc.beta_start = rc.get_double("model.beta_start");
    mc.beta_end = rc.get_double("model.beta_end");
    mc.blur_sigma = rc.get_double("model.blur_sigma");
    return mc;
}

int run_pretrain(const cli::RunConfig& rc) {
    const auto dataset_dir = rc.get_str("train.dataset").empty() ? rc.get_str("dataset.out")
                                                                 : rc.get_str("train.dataset");
    auto ds = synth::load_dataset(dataset_dir);

    train::PretrainConfig cfg;
    cfg.learning_rate = rc.get_double("backbone.learning_rate");
    cfg.batch_size = static_cast<int>(rc.get_int("backbone.batch_size"));
    cfg.steps = static_cast<int>(rc.get_int("backbone.steps"));
    cfg.prompt_dropout_p = rc.get_double("backbone.prompt_dropout_p");
    cfg.seed = static_cast<uint64_t>(rc.get_int("backbone.seed"));
    cfg.dataset_path = dataset_dir;
    cfg.output_dir = rc.get_str("backbone.out");
    cfg.model = model_config_from(rc, ds.manifest.height);
    cfg.run_config_hash = rc.hash();

    rc.write_snapshot(cfg.output_dir);
    const auto res = train::pretrain_backbone(ds, cfg);
    std::cout << "backbone checkpoint " << res.checkpoint_path << " (running loss "
              << res.initial_loss << " -> " << res.final_loss << ")\n";
    return 0;
}

int run_train(const cli::RunConfig& rc, const std::string& resume) {
    train::TrainConfig cfg;
    cfg.learning_rate = rc.get_double("train.learning_rate");
    cfg.batch_size = static_cast<int>(rc.get_int("train.batch_size"));
    cfg.steps = static_cast<int>(rc.get_int("train.steps"));
    cfg.prompt_dropout_p = rc.get_double("train.prompt_dropout_p");
    cfg.seed = static_cast<uint64_t>(rc.get_int("train.seed"));
    cfg.checkpoint_every = static_cast<int>(rc.get_int("train.checkpoint_every"));
    cfg.dataset_path = rc.get_str("train.dataset").empty() ? rc.get_str("dataset.out")
                                                           : rc.get_str("train.dataset");
    cfg.output_dir = rc.get_str("train.output_dir");
    cfg.backbone_checkpoint = rc.get_str("train.backbone").empty()
                                  ? (fs::path(rc.get_str("backbone.out")) / "backbone.ckpt").string()
                                  : rc.get_str("train.backbone");
    cfg.grad_clip = rc.get_bool("train.grad_clip");
    cfg.clip_norm = rc.get_double("train.clip_norm");
    cfg.run_config_hash = rc.hash();
    cfg.validate();
    if (!fs::exists(cfg.dataset_path))
        throw ConfigError("train.dataset does not exist: " + cfg.dataset_path);

    rc.write_snapshot(cfg.output_dir);
    const auto final_path = train::train(cfg, nullptr, resume);
    std::cout << "control checkpoint " << final_path << "\n";
    return 0;
}

int run_sample(const std::string& ckpt, const std::string& mask_path, const std::string& caption,
               int steps, double cfg_scale, double eta, uint64_t seed, const std::string& out) {
    auto bundle = sample::ModelBundle::load(ckpt);
    const auto mask = synth::png_to_mask(png_read(mask_path));

    sample::SamplerConfig sc;
    sc.steps = steps;
    sc.cfg_scale = cfg_scale;
    sc.eta = eta;
    sc.seed = seed;
    const auto image = sample::sample(mask, caption, bundle, sc);

    png_write(out, synth::to_png_rgb(image));
    nlohmann::json sidecar;
    sidecar["caption"] = caption;
    sidecar["mask_path"] = mask_path;
    sidecar["seed"] = seed;
    sidecar["steps"] = steps;
    sidecar["cfg_scale"] = cfg_scale;
    sidecar["eta"] = eta;
    sidecar["checkpoint_hash"] = bundle.checkpoint_hash;
    sidecar["config_hash"] = bundle.run_config_hash;
    std::ofstream sf(out + ".json", std::ios::trunc);
    sf << sidecar.dump(2) << "\n";
    std::cout << "sample written to " << out << "\n";
    return 0;
}

int run_evaluate(const std::string& ckpt, const std::string& dataset_dir, const std::string& split,
                 const std::string& out, int n_samples, uint64_t seed, bool real_only, bool force,
                 bool ablate_taam, bool ablate_bmws, const std::string& scorer_path,
                 const std::string& extractor, int steps, double cfg_scale) {
    if (split != "test") throw ConfigError("only --split test is supported");
    auto bundle = sample::ModelBundle::load(ckpt);
    auto ds = synth::load_dataset(dataset_dir);
    if (!force && !bundle.dataset_manifest_hash.empty() &&
        bundle.dataset_manifest_hash != ds.manifest_hash)
        throw ConfigError("dataset manifest hash " + ds.manifest_hash +
                          " does not match the one recorded at training time (" +
                          bundle.dataset_manifest_hash + "); pass --force to evaluate anyway");

    eval::EvalConfig ec;
    ec.n_samples = n_samples;
    ec.seed = seed;
    ec.real_only = real_only;
    ec.ablate_taam = ablate_taam;
    ec.ablate_bmws = ablate_bmws;
    ec.extractor = extractor;
    ec.sampler.steps = steps;
    ec.sampler.cfg_scale = cfg_scale;
    ec.scorer_path = scorer_path.empty()
                         ? (fs::path(out).parent_path() / "scorer.ckpt").string()
                         : scorer_path;

    const auto rep = eval::evaluate(bundle, ds, ec);
    std::ofstream rf(out, std::ios::trunc);
    if (!rf) throw IoError("cannot write report: " + out);
    rf << rep.to_json().dump(2) << "\n";

    // summary fields serialized exactly as in the JSON report
    std::cout << "fid=" << nlohmann::json(rep.fid).dump()
              << " mask_fidelity=" << nlohmann::json(rep.mask_fidelity_mean).dump()
              << " text_consistency=" << nlohmann::json(rep.text_consistency_mean).dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mask- and text-conditioned diffusion image synthesis on a procedural dataset"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "TOML config file");
    app.add_option("--override", overrides, "dotted-key overrides, e.g. train.steps=100");

    auto* mk = app.add_subcommand("make-dataset", "generate the synthetic triplet dataset");
    std::string mk_out;
    int64_t mk_n = -1, mk_size = -1, mk_seed = -1;
    std::string mk_captioner;
    mk->add_option("--n", mk_n, "number of triplets (default 2000)");
    mk->add_option("--size", mk_size, "image size (default 64)");
    mk->add_option("--seed", mk_seed, "dataset seed (default 1)");
    mk->add_option("--out", mk_out, "output directory");
    mk->add_option("--captioner", mk_captioner, "template|http (default template)");

    auto* pre = app.add_subcommand("pretrain", "pretrain the frozen denoiser backbone");
    std::string pre_dataset, pre_out;
    int64_t pre_steps = -1, pre_seed = -1;
    pre->add_option("--dataset", pre_dataset, "dataset directory");
    pre->add_option("--steps", pre_steps, "training steps (default 10000)");
    pre->add_option("--seed", pre_seed, "seed (default 11)");
    pre->add_option("--out", pre_out, "output directory (default runs/backbone)");

    auto* tr = app.add_subcommand("train", "train the control branch (backbone stays frozen)");
    std::string tr_resume, tr_dataset, tr_backbone, tr_out;
    int64_t tr_steps = -1, tr_seed = -1;
    tr->add_option("--resume", tr_resume, "checkpoint to resume from");
    tr->add_option("--dataset", tr_dataset, "dataset directory");
    tr->add_option("--backbone", tr_backbone, "backbone checkpoint path");
    tr->add_option("--steps", tr_steps, "training steps (default 10000, lr 1e-5, batch 4)");
    tr->add_option("--seed", tr_seed, "seed (default 42)");
    tr->add_option("--out", tr_out, "output directory (default runs/control)");

    auto* sm = app.add_subcommand("sample", "generate an image from a mask and a caption");
    std::string sm_ckpt, sm_mask, sm_caption, sm_out = "sample.png";
    int sm_steps = 20;
    double sm_cfg = 7.0, sm_eta = 0.0;
    uint64_t sm_seed = 0;
    sm->add_option("--ckpt", sm_ckpt, "trained control checkpoint")->required();
    sm->add_option("--mask", sm_mask, "mask PNG (0/255)")->required();
    sm->add_option("--caption", sm_caption, "text prompt");
    sm->add_option("--steps", sm_steps, "DDIM steps")->capture_default_str();
    sm->add_option("--cfg", sm_cfg, "classifier-free guidance scale")->capture_default_str();
    sm->add_option("--eta", sm_eta, "DDIM eta")->capture_default_str();
    sm->add_option("--seed", sm_seed, "sampling seed")->capture_default_str();
    sm->add_option("--out", sm_out, "output PNG path")->capture_default_str();

    auto* ev = app.add_subcommand("evaluate", "score a checkpoint on the held-out split");
    std::string ev_ckpt, ev_dataset, ev_split = "test", ev_out = "eval_report.json";
    std::string ev_scorer, ev_extractor = "backbone";
    int ev_n = 128, ev_steps = 20;
    double ev_cfg = 7.0;
    uint64_t ev_seed = 7;
    bool ev_real_only = false, ev_force = false, ev_taam = false, ev_bmws = false;
    ev->add_option("--ckpt", ev_ckpt, "trained control checkpoint")->required();
    ev->add_option("--dataset", ev_dataset, "dataset directory")->required();
    ev->add_option("--split", ev_split, "held-out split name")->capture_default_str();
    ev->add_option("--out", ev_out, "report JSON path")->capture_default_str();
    ev->add_option("--n", ev_n, "samples to draw")->capture_default_str();
    ev->add_option("--seed", ev_seed, "evaluation seed")->capture_default_str();
    ev->add_option("--steps", ev_steps, "DDIM steps")->capture_default_str();
    ev->add_option("--cfg", ev_cfg, "CFG scale")->capture_default_str();
    ev->add_flag("--real-only", ev_real_only, "score the real held-out images (self-check)");
    ev->add_flag("--force", ev_force, "evaluate even when the dataset hash differs");
    ev->add_flag("--ablate-taam", ev_taam, "disable the text-aware map (force S=1)");
    ev->add_flag("--ablate-bmws", ev_bmws, "disable blur weighting (force M_w=0)");
    ev->add_option("--scorer", ev_scorer, "attribute scorer asset (trained when absent)");
    ev->add_option("--extractor", ev_extractor, "feature extractor: backbone|handcrafted")
        ->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        auto rc = cli::RunConfig::resolve(config_path, overrides);
        if (mk->parsed()) {
            if (mk_n >= 0) rc.set("dataset.n", mk_n);
            if (mk_size >= 0) rc.set("dataset.size", mk_size);
            if (mk_seed >= 0) rc.set("dataset.seed", mk_seed);
            if (!mk_out.empty()) rc.set("dataset.out", mk_out);
            if (!mk_captioner.empty()) rc.set("dataset.captioner", mk_captioner);
            return run_make_dataset(rc);
        }
        if (pre->parsed()) {
            if (!pre_dataset.empty()) rc.set("train.dataset", pre_dataset);
            if (pre_steps >= 0) rc.set("backbone.steps", pre_steps);
            if (pre_seed >= 0) rc.set("backbone.seed", pre_seed);
            if (!pre_out.empty()) rc.set("backbone.out", pre_out);
            return run_pretrain(rc);
        }
        if (tr->parsed()) {
            if (!tr_dataset.empty()) rc.set("train.dataset", tr_dataset);
            if (!tr_backbone.empty()) rc.set("train.backbone", tr_backbone);
            if (tr_steps >= 0) rc.set("train.steps", tr_steps);
            if (tr_seed >= 0) rc.set("train.seed", tr_seed);
            if (!tr_out.empty()) rc.set("train.output_dir", tr_out);
            return run_train(rc, tr_resume);
        }
        if (sm->parsed())
            return run_sample(sm_ckpt, sm_mask, sm_caption, sm_steps, sm_cfg, sm_eta, sm_seed, sm_out);
        if (ev->parsed())
            return run_evaluate(ev_ckpt, ev_dataset, ev_split, ev_out, ev_n, ev_seed, ev_real_only,
                                ev_force, ev_taam, ev_bmws, ev_scorer, ev_extractor, ev_steps,
                                ev_cfg);
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const PlacementError& e) {
        std::cerr << "placement error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

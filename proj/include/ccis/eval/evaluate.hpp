#pragma once

#include <omp.h>

#include "ccis/eval/features.hpp"
#include "ccis/eval/frechet.hpp"
#include "ccis/eval/mask_fidelity.hpp"
#include "ccis/eval/scorer.hpp"
#include "ccis/sample/sampler.hpp"
#include "ccis/synth/dataset.hpp"
#include "ccis/train/trainer.hpp"

namespace ccis::eval {

struct EvalConfig {
    int n_samples = 128;
    uint64_t seed = 0;
    bool real_only = false;           // score the held-out real images themselves
    bool ablate_taam = false;         // force S == 1 at inference
    bool ablate_bmws = false;         // force M_w == 0 at inference
    std::string scorer_path;          // cache location; retrains when absent
    std::string extractor = "backbone";  // "backbone" or "handcrafted"
    sample::SamplerConfig sampler;
};

struct EvalReport {
    double fid = 0;
    double fid_noise = 0;  // uniform-noise baseline against the same real set
    double mask_fidelity_mean = 0;
    double text_consistency_mean = 0;
    double image_cosine_mean = 0;   // feature cosine to the paired real image
    double boundary_smoothness_mean = 0;
    int n_images = 0;
    std::string config_hash;
    std::string extractor_id;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["fid"] = fid;
        j["fid_noise"] = fid_noise;
        j["mask_fidelity_mean"] = mask_fidelity_mean;
        j["text_consistency_mean"] = text_consistency_mean;
        j["image_cosine_mean"] = image_cosine_mean;
        j["boundary_smoothness_mean"] = boundary_smoothness_mean;
        j["n_images"] = n_images;
        j["config_hash"] = config_hash;
        j["extractor_id"] = extractor_id;
        return j;
    }
    static EvalReport from_json(const nlohmann::json& j) {
        EvalReport r;
        r.fid = j.at("fid");
        r.fid_noise = j.at("fid_noise");
        r.mask_fidelity_mean = j.at("mask_fidelity_mean");
        r.text_consistency_mean = j.at("text_consistency_mean");
        r.image_cosine_mean = j.at("image_cosine_mean");
        r.boundary_smoothness_mean = j.at("boundary_smoothness_mean");
        r.n_images = j.at("n_images");
        r.config_hash = j.at("config_hash");
        r.extractor_id = j.at("extractor_id");
        return r;
    }
    bool operator==(const EvalReport&) const = default;
};

// Scorer asset handling: load when the cache exists, otherwise train on the
// train split (held out from evaluation targets) and cache.
inline AttributeScorer obtain_scorer(const synth::Dataset& ds, const std::string& cache_path,
                                     uint64_t seed) {
    if (!cache_path.empty() && std::filesystem::exists(cache_path))
        return AttributeScorer::load(cache_path);
    std::vector<const synth::Triplet*> train_recs;
    for (int i : synth::train_indices(static_cast<int>(ds.records.size())))
        train_recs.push_back(&ds.records[static_cast<size_t>(i)]);
    AttributeScorer scorer;
    Rng rng(derive_seed(seed, 0x5c02e2));
    scorer.init(rng);
    ScorerTrainConfig cfg;
    cfg.seed = derive_seed(seed, 0x5c02e3);
    train_scorer(scorer, train_recs, cfg);
    if (!cache_path.empty()) scorer.save(cache_path);
    return scorer;
}

// Samples one image per held-out (mask, caption) pair and reports the metric
// trio plus the noise-baseline Frechet distance used as its scale reference.
inline EvalReport evaluate(sample::ModelBundle& bundle, const synth::Dataset& ds,
                           const EvalConfig& ec) {
    const int n_test_total = static_cast<int>(synth::test_indices(int(ds.records.size())).size());
    const auto test_idx = synth::test_indices(static_cast<int>(ds.records.size()));
    const int n = std::min<int>(ec.n_samples, static_cast<int>(test_idx.size()));
    if (n < 65)
        throw ConfigError("evaluate: held-out split has " + std::to_string(n_test_total) +
                          " usable records; need at least 65 (feature dim + 1)");

    auto scorer = obtain_scorer(ds, ec.scorer_path, ec.seed);

    bundle.branch.force_s_one = ec.ablate_taam;
    bundle.branch.force_mw_zero = ec.ablate_bmws;

    std::vector<const synth::Triplet*> targets;
    for (int i = 0; i < n; ++i) targets.push_back(&ds.records[static_cast<size_t>(test_idx[i])]);

    // generated (or real, in self-evaluation mode) images
    std::vector<Array<float>> generated(static_cast<size_t>(n));
    if (ec.real_only) {
        for (int i = 0; i < n; ++i) generated[static_cast<size_t>(i)] = targets[static_cast<size_t>(i)]->image;
    } else {
#pragma omp parallel for schedule(dynamic)
        for (int i = 0; i < n; ++i) {
            sample::SamplerConfig sc = ec.sampler;
            sc.seed = derive_seed(ec.seed, 0x9e4, uint64_t(i));
            generated[static_cast<size_t>(i)] =
                sample::sample(targets[static_cast<size_t>(i)]->mask,
                               train::full_caption(*targets[static_cast<size_t>(i)]), bundle, sc);
        }
    }

    bundle.branch.force_s_one = false;
    bundle.branch.force_mw_zero = false;

    // features
    std::unique_ptr<FeatureExtractor> ex;
    if (ec.extractor == "handcrafted") {
        ex = std::make_unique<HandcraftedExtractor>();
    } else {
        ex = std::make_unique<BackboneTrunkExtractor>(&bundle.backbone,
                                                      bundle.encode_captions({""}));
    }
    std::vector<const Array<float>*> real_ptr, gen_ptr;
    for (int i = 0; i < n; ++i) {
        real_ptr.push_back(&targets[static_cast<size_t>(i)]->image);
        gen_ptr.push_back(&generated[static_cast<size_t>(i)]);
    }
    auto real_fs = extract_features(real_ptr, *ex);
    auto gen_fs = extract_features(gen_ptr, *ex);

    // uniform-noise baseline
    std::vector<Array<float>> noise(static_cast<size_t>(n));
    {
        Rng nrng(derive_seed(ec.seed, 0x401e));
        for (int i = 0; i < n; ++i) {
            noise[static_cast<size_t>(i)] =
                Array<float>::rand_uniform({3, ds.manifest.height, ds.manifest.width}, nrng);
        }
    }
    std::vector<const Array<float>*> noise_ptr;
    for (auto& im : noise) noise_ptr.push_back(&im);
    auto noise_fs = extract_features(noise_ptr, *ex);

    EvalReport rep;
    rep.fid = frechet_distance(real_fs.mean, real_fs.cov, gen_fs.mean, gen_fs.cov);
    rep.fid_noise = frechet_distance(real_fs.mean, real_fs.cov, noise_fs.mean, noise_fs.cov);
    rep.extractor_id = ex->id();
    rep.n_images = n;
    rep.config_hash = bundle.run_config_hash.empty() ? hash_hex(bundle.config_hash)
                                                     : bundle.run_config_hash;

    double miou = 0, tcons = 0, cosine = 0, smooth = 0;
    for (int i = 0; i < n; ++i) {
        const auto& rec = *targets[static_cast<size_t>(i)];
        const auto& img = generated[static_cast<size_t>(i)];
        miou += mask_fidelity(img, rec.mask, rec.attributes.color);
        tcons += text_consistency(img, rec.caption_fg, scorer);
        smooth += boundary_smoothness(img, rec.mask);
        const Eigen::VectorXd a = gen_fs.features.row(i), b = real_fs.features.row(i);
        cosine += a.dot(b) / std::max(1e-12, a.norm() * b.norm());
    }
    rep.mask_fidelity_mean = miou / n;
    rep.text_consistency_mean = tcons / n;
    rep.image_cosine_mean = cosine / n;
    rep.boundary_smoothness_mean = smooth / n;
    return rep;
}

}  // namespace ccis::eval

#include <doctest.h>

#include <filesystem>

#include "ccis/diffusion/loss.hpp"
#include "ccis/diffusion/model_io.hpp"
#include "ccis/diffusion/schedule.hpp"
#include "ccis/diffusion/unet.hpp"
#include "ccis/synth/dataset.hpp"
#include "ccis/text/text_encoder.hpp"
#include "ccis/train/trainer.hpp"
#include "test_util.hpp"

using namespace ccis;
using namespace ccis::diffusion;

namespace {
TextBatch<float> make_text(const std::vector<std::string>& caps) {
    const auto& vocab = text::Vocabulary::builtin();
    static text::TextEncoder te = [] {
        text::TextEncoder t;
        t.init_from_seed(text::Vocabulary::builtin().size());
        return t;
    }();
    std::vector<text::TextEmbedding<float>> embs;
    for (const auto& c : caps) embs.push_back(te.encode<float>(text::tokenize(c, vocab)));
    return TextBatch<float>::pack(embs);
}
}  // namespace

TEST_CASE("make_schedule: products, validation, high-precision oracle") {
    const auto tiny = NoiseSchedule::linear(2, 0.5, 0.5);
    CHECK(tiny.alpha_bars[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(tiny.alpha_bars[1] == doctest::Approx(0.25).epsilon(1e-15));

    CHECK_THROWS_AS(NoiseSchedule::linear(1, 1e-4, 0.02), ConfigError);
    CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.0, 0.02), ConfigError);
    CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.03, 0.02), ConfigError);
    CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.5, 1.0), ConfigError);

    const auto s = NoiseSchedule::linear(1000, 1e-4, 0.02);
    // independent cumulative-product oracle in extended precision
    long double prod = 1.0L;
    for (int t = 0; t < 1000; ++t) {
        const long double beta = 1e-4L + (0.02L - 1e-4L) * static_cast<long double>(t) / 999.0L;
        prod *= (1.0L - beta);
    }
    CHECK(std::abs(double(prod) - s.alpha_bars[999]) / double(prod) < 1e-12);

    for (int t = 1; t < 1000; ++t) CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
    CHECK(s.alpha_bars[0] > 0.99);
}

TEST_CASE("q_sample: limit cases, scalar oracle, variance preservation") {
    NoiseSchedule s;
    s.T = 3;
    s.betas = {0.0, 0.0, 0.0};
    s.alphas = {1.0, 1.0, 1.0};
    s.alpha_bars = {1.0, 0.25, 0.0};

    Array<double> img({2, 2}, 0.75);
    Array<double> eps({2, 2}, 1.0);

    const auto x_id = q_sample(img, 0, eps, s);  // alpha_bar = 1 -> rescaled image
    for (auto v : x_id.v) CHECK(v == 2.0 * 0.75 - 1.0);

    const auto x_eps = q_sample(img, 2, eps, s);  // alpha_bar = 0 -> pure noise
    for (auto v : x_eps.v) CHECK(v == 1.0);

    Array<double> half({1}, 0.5);
    Array<double> one({1}, 1.0);
    const auto x = q_sample(half, 1, one, s);
    CHECK(x[0] == doctest::Approx(std::sqrt(0.75)).epsilon(1e-15));

    CHECK_THROWS_AS(q_sample(half, 5, one, s), ShapeError);

    // for image=0 and alpha_bar -> 0 the variance approaches 1
    const auto sched = NoiseSchedule::linear(1000, 1e-4, 0.02);
    Rng rng(31);
    const int n = 10000;
    double sum = 0, sumsq = 0;
    Array<double> zero({1}, 0.0);
    for (int i = 0; i < n; ++i) {
        Array<double> e({1}, rng.normal());
        const double v = q_sample(zero, 999, e, sched)[0];
        sum += v;
        sumsq += v * v;
    }
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    // alpha_bar[999] ~ 4e-5, so Var(x_t) = ab*1 + (1-ab) ~ 1
    CHECK(var == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("backbone_forward: residual contract, shapes, batch independence") {
    auto cfg = ModelConfig::miniature();
    BackboneUNet<float> net;
    Rng rng(404);
    net.init(cfg, rng);

    const int N = 3, H = 8, W = 8;
    Rng drng(405);
    auto x = Tensor<float>::constant(Array<float>::randn({N, 3, H, W}, drng));
    auto text = make_text({"a red round polyp", "", "pink oval lesion"});
    std::vector<int> t{0, 10, 49};

    auto y_absent = net.forward(x, t, text, nullptr);
    CHECK(y_absent.shape() == Shape{N, 3, H, W});

    std::vector<Tensor<float>> zeros;
    for (size_t i = 0; i < cfg.channels.size(); ++i) {
        const int h = H >> (i + 1);
        zeros.push_back(Tensor<float>::constant(
            Array<float>::zeros({N, cfg.channels[i], h, h})));
    }
    auto y_zero = net.forward(x, t, text, &zeros);
    CHECK(std::memcmp(y_absent.val().data(), y_zero.val().data(),
                      sizeof(float) * y_absent.numel()) == 0);

    // batch permutation: outputs permute identically (no cross-sample leakage)
    Array<float> xp({N, 3, H, W});
    const int perm[3] = {2, 0, 1};
    for (int n = 0; n < N; ++n)
        std::copy_n(x.val().data() + int64_t(perm[n]) * 3 * H * W, 3 * H * W,
                    xp.data() + int64_t(n) * 3 * H * W);
    auto text_p = make_text({"pink oval lesion", "a red round polyp", ""});
    std::vector<int> tp{49, 0, 10};
    auto y_perm = net.forward(Tensor<float>::constant(std::move(xp)), tp, text_p, nullptr);
    for (int n = 0; n < N; ++n)
        CHECK(std::memcmp(y_perm.val().data() + int64_t(n) * 3 * H * W,
                          y_absent.val().data() + int64_t(perm[n]) * 3 * H * W,
                          sizeof(float) * 3 * H * W) == 0);

    // output shape matches input for 32x32 and 64x64
    ModelConfig small;
    small.channels = {8, 16};
    small.temb_dim = 32;
    small.groups = 4;
    for (int size : {32, 64}) {
        small.image_size = size;
        BackboneUNet<float> n2;
        Rng r2(1);
        n2.init(small, r2);
        Rng r3(2);
        auto x2 = Tensor<float>::constant(Array<float>::randn({1, 3, size, size}, r3));
        auto y2 = n2.forward(x2, {5}, make_text({"flat pale polyp"}), nullptr);
        CHECK(y2.shape() == Shape{1, 3, size, size});
    }

    // wrong channel count -> shape error
    Rng r4(3);
    auto bad = Tensor<float>::constant(Array<float>::randn({1, 1, 8, 8}, r4));
    CHECK_THROWS_AS(net.forward(bad, {0}, make_text({""}), nullptr), ShapeError);
}

namespace {
struct FixedEps final : EpsModel<float> {
    Array<float> value;
    Tensor<float> eps(Tensor<float>, const std::vector<int>&, const TextBatch<float>&,
                      const Array<float>*) override {
        return Tensor<float>::constant(value);
    }
};
}  // namespace

TEST_CASE("diffusion_loss: oracle zero, unit noise expectation, permutation invariance") {
    const auto sched = NoiseSchedule::linear(100, 1e-4, 0.02);
    const int N = 64, H = 8, W = 8;  // 12288 noise scalars
    Rng rng(777);

    TrainBatch<float> batch;
    batch.images01 = Array<float>::rand_uniform({N, 3, H, W}, rng);
    std::vector<std::string> caps(N, "red round polyp");
    batch.text = make_text(caps);

    std::vector<int> t(N);
    for (auto& ti : t) ti = static_cast<int>(rng.uniform_int(100));
    Array<float> eps({N, 3, H, W});
    for (auto& e : eps.v) e = static_cast<float>(rng.normal());

    // model that returns the true eps -> loss exactly 0
    FixedEps oracle;
    oracle.value = eps;
    CHECK(diffusion_loss_at(batch, t, eps, oracle, sched).val()[0] == 0.0f);

    // all-zeros model -> E[eps^2] = 1 within 5%
    FixedEps zeros;
    zeros.value = Array<float>::zeros({N, 3, H, W});
    const double lz = diffusion_loss_at(batch, t, eps, zeros, sched).val()[0];
    CHECK(lz == doctest::Approx(1.0).epsilon(0.05));

    // batch-order permutation leaves the loss unchanged (up to fp reduction order)
    std::vector<int> perm(N);
    for (int i = 0; i < N; ++i) perm[static_cast<size_t>(i)] = (i * 17 + 5) % N;
    TrainBatch<float> pbatch;
    pbatch.images01 = Array<float>({N, 3, H, W});
    Array<float> peps({N, 3, H, W});
    std::vector<int> pt(N);
    for (int i = 0; i < N; ++i) {
        const int src = perm[static_cast<size_t>(i)];
        std::copy_n(batch.images01.data() + int64_t(src) * 3 * H * W, 3 * H * W,
                    pbatch.images01.data() + int64_t(i) * 3 * H * W);
        std::copy_n(eps.data() + int64_t(src) * 3 * H * W, 3 * H * W,
                    peps.data() + int64_t(i) * 3 * H * W);
        pt[static_cast<size_t>(i)] = t[static_cast<size_t>(src)];
    }
    pbatch.text = batch.text;
    FixedEps pzeros;
    pzeros.value = Array<float>::zeros({N, 3, H, W});
    const double lpz = diffusion_loss_at(pbatch, pt, peps, pzeros, sched).val()[0];
    CHECK(lpz == doctest::Approx(lz).epsilon(1e-6));

    // the rng-sampling wrapper reports t in range and finite loss
    FixedEps z2;
    z2.value = Array<float>::zeros({N, 3, H, W});
    Rng lrng(1);
    std::vector<int> t_used;
    const double l = diffusion_loss(batch, z2, sched, lrng, &t_used).val()[0];
    CHECK(std::isfinite(l));
    for (int ti : t_used) {
        CHECK(ti >= 0);
        CHECK(ti < 100);
    }
}

TEST_CASE("checkpoint: named-tensor round trip and model reload") {
    testutil::TempDir tmp("ckpt");
    auto cfg = ModelConfig::miniature();
    BackboneUNet<float> net;
    Rng rng(11);
    net.init(cfg, rng);
    const auto checksum = net.params_checksum();

    Checkpoint ckpt;
    ckpt.config_hash = cfg.hash();
    ckpt.meta_json = cfg.to_json().dump();
    collect_params<float>([&net](const nn::ParamVisitor<float>& cb) { net.visit_params(cb); },
                          ckpt.tensors);
    const auto path = (tmp.path / "m.ckpt").string();
    save_checkpoint(path, ckpt);

    const auto loaded = load_checkpoint(path);
    CHECK(loaded.config_hash == cfg.hash());
    CHECK(checkpoint_params_hash(loaded) == checkpoint_params_hash(ckpt));
    CHECK(ModelConfig::from_json(nlohmann::json::parse(loaded.meta_json)).hash() == cfg.hash());

    BackboneUNet<float> net2;
    Rng rng2(999);  // different init, then overwritten by the checkpoint
    net2.init(cfg, rng2);
    load_params<float>([&net2](const nn::ParamVisitor<float>& cb) { net2.visit_params(cb); }, loaded);
    CHECK(net2.params_checksum() == checksum);

    // shape mismatch -> config error
    BackboneUNet<float> net3;
    ModelConfig other = cfg;
    other.channels = {8, 16};
    Rng rng3(1);
    net3.init(other, rng3);
    CHECK_THROWS_AS(
        load_params<float>([&net3](const nn::ParamVisitor<float>& cb) { net3.visit_params(cb); },
                           loaded),
        ConfigError);
}

TEST_CASE("pretrain_backbone: steps=0 equals initialization, assets written") {
    testutil::TempDir tmp("pre0");
    synth::build_dataset(6, 32, 32, 21, (tmp.path / "ds").string());
    auto ds = synth::load_dataset((tmp.path / "ds").string());

    train::PretrainConfig cfg;
    cfg.steps = 0;
    cfg.seed = 5;
    cfg.dataset_path = (tmp.path / "ds").string();
    cfg.output_dir = (tmp.path / "run").string();
    cfg.model = ModelConfig::miniature();
    cfg.model.image_size = 32;

    const auto res = train::pretrain_backbone(ds, cfg);
    CHECK(std::filesystem::exists(res.checkpoint_path));
    CHECK(std::filesystem::exists(tmp.path / "run" / "text_encoder.bin"));
    CHECK(std::filesystem::exists(tmp.path / "run" / "vocab.txt"));

    // checkpoint equals a fresh initialization from the same seed
    BackboneUNet<float> fresh;
    ModelConfig mc = cfg.model;
    mc.image_size = 32;
    Rng init_rng(derive_seed(cfg.seed, 0x1217));
    fresh.init(mc, init_rng);
    const auto loaded = load_checkpoint(res.checkpoint_path);
    BackboneUNet<float> net2;
    Rng r2(77);
    net2.init(mc, r2);
    load_params<float>([&net2](const nn::ParamVisitor<float>& cb) { net2.visit_params(cb); }, loaded);
    CHECK(net2.params_checksum() == fresh.params_checksum());
}

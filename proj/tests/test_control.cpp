#include <doctest.h>

#include <cstring>

#include "ccis/control/control_branch.hpp"
#include "ccis/text/text_encoder.hpp"
#include "test_util.hpp"

using namespace ccis;
using namespace ccis::control;
using diffusion::ModelConfig;
using diffusion::TextBatch;

namespace {
template <class S>
TextBatch<S> make_text(const std::vector<std::string>& caps) {
    const auto& vocab = text::Vocabulary::builtin();
    static text::TextEncoder te = [] {
        text::TextEncoder t;
        t.init_from_seed(text::Vocabulary::builtin().size());
        return t;
    }();
    std::vector<text::TextEmbedding<S>> embs;
    for (const auto& c : caps) embs.push_back(te.encode<S>(text::tokenize(c, vocab)));
    return TextBatch<S>::pack(embs);
}

// dense 2-D convolution with the same reflect padding, the blur oracle
Array<double> blur_oracle(const Array<double>& m, double sigma) {
    const auto k1 = gaussian_kernel(sigma);
    const int radius = static_cast<int>(k1.size() / 2);
    const int H = m.dim(0), W = m.dim(1);
    Array<double> out({H, W});
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            double s = 0;
            for (int dy = -radius; dy <= radius; ++dy)
                for (int dx = -radius; dx <= radius; ++dx) {
                    const double w = k1[size_t(dy + radius)] * k1[size_t(dx + radius)];
                    s += w * m[int64_t(reflect_index(r + dy, H)) * W + reflect_index(c + dx, W)];
                }
            out[int64_t(r) * W + c] = s;
        }
    return out;
}
}  // namespace

TEST_CASE("blur_mask: identity, normalization, dense-convolution oracle") {
    Rng rng(1);
    auto m = Array<double>::rand_uniform({9, 7}, rng);
    const auto same = blur_mask(m, 0.0);
    CHECK(same.v == m.v);

    Array<double> ones({8, 8}, 1.0);
    const auto b1 = blur_mask(ones, 2.0);
    for (auto v : b1.v) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));

    // single center pixel, sigma=1, 7x7: center equals the normalized kernel peak
    Array<double> delta({7, 7});
    delta[3 * 7 + 3] = 1.0;
    const auto bd = blur_mask(delta, 1.0);
    const auto k = gaussian_kernel(1.0);
    const double peak = k[k.size() / 2] * k[k.size() / 2];
    CHECK(bd[3 * 7 + 3] == doctest::Approx(peak).epsilon(1e-12));
    const auto oracle = blur_oracle(delta, 1.0);
    CHECK(max_abs_diff(bd, oracle) < 1e-6);

    // random map against the oracle
    auto rm = Array<double>::rand_uniform({12, 10}, rng);
    CHECK(max_abs_diff(blur_mask(rm, 2.0), blur_oracle(rm, 2.0)) < 1e-6);

    CHECK_THROWS_AS(blur_mask(rm, -1.0), ConfigError);
}

TEST_CASE("encode_masks: non-shared parameters, downsampling factor") {
    ModelConfig cfg;  // defaults: mask_down=4, c=64
    Rng rng(7);
    MaskEncoder<float> enc_sharp, enc_blur;
    enc_sharp.init(cfg.mask_channels, cfg.mask_down, rng);
    enc_blur.init(cfg.mask_channels, cfg.mask_down, rng);

    Rng drng(8);
    auto m = Array<float>::rand_uniform({1, 1, 64, 64}, drng);
    auto in = Tensor<float>::constant(m);

    auto f_sharp1 = enc_sharp(in);
    CHECK(f_sharp1.shape() == Shape{1, 64, 4, 4});  // 64/16 per default config

    // perturb the blur encoder: F_sharp is bitwise unchanged
    enc_blur.convs[0].w.val()[0] += 1.0f;
    auto f_sharp2 = enc_sharp(in);
    CHECK(std::memcmp(f_sharp1.val().data(), f_sharp2.val().data(),
                      sizeof(float) * f_sharp1.numel()) == 0);

    // same input through distinct encoders differs
    auto f_blur = enc_blur(in);
    CHECK(max_abs_diff(f_sharp1.val(), f_blur.val()) > 1e-4);
}

TEST_CASE("mask_weighting: init midpoint, endpoints, Eq-style literal product, betweenness") {
    const int c = 8;
    Rng rng(21);
    WeightNet<float> net;
    net.init(c, rng);

    Rng drng(22);
    auto f_sharp = Tensor<float>::constant(Array<float>::randn({2, c, 3, 3}, drng));
    auto f_blur = Tensor<float>::constant(Array<float>::randn({2, c, 3, 3}, drng));

    // zero-initialized final layer -> M_w = 0.5 -> F_cond = 0.5 (F_sharp + F_blur)
    auto mc = mask_weighting(f_sharp, f_blur, net);
    for (int64_t i = 0; i < mc.m_w.numel(); ++i) CHECK(mc.m_w.val()[i] == 0.5f);
    for (int64_t i = 0; i < mc.f_cond.numel(); ++i)
        CHECK(mc.f_cond.val()[i] ==
              doctest::Approx(0.5 * (f_sharp.val()[i] + f_blur.val()[i])).epsilon(1e-6));

    // force M_w = 0 -> F_cond == F_sharp exactly
    auto mz = mask_weighting(f_sharp, f_blur, net, /*force_mw_zero=*/true);
    CHECK(std::memcmp(mz.f_cond.val().data(), f_sharp.val().data(),
                      sizeof(float) * f_sharp.numel()) == 0);
    for (int64_t i = 0; i < mz.f_b.numel(); ++i) CHECK(mz.f_b.val()[i] == 0.0f);

    // saturate the final bias -> M_w = 1 -> F_cond == F_blur
    WeightNet<float> sat = net;
    for (auto& b : sat.l3.b.val().v) b = 100.0f;
    auto mo = mask_weighting(f_sharp, f_blur, sat);
    for (int64_t i = 0; i < mo.m_w.numel(); ++i) CHECK(mo.m_w.val()[i] == 1.0f);
    for (int64_t i = 0; i < mo.f_cond.numel(); ++i)
        CHECK(mo.f_cond.val()[i] == doctest::Approx(f_blur.val()[i]).epsilon(1e-6));

    // random nets over 1000 draws: literal F_b product, M_w range, betweenness
    for (int trial = 0; trial < 1000; ++trial) {
        Rng r(derive_seed(100, uint64_t(trial)));
        WeightNet<float> wn;
        wn.init(c, r);
        for (auto& w : wn.l3.w.val().v) w = static_cast<float>(r.normal() * 0.5);
        for (auto& b : wn.l3.b.val().v) b = static_cast<float>(r.normal());
        auto fs = Tensor<float>::constant(Array<float>::randn({1, c, 2, 2}, r));
        auto fb = Tensor<float>::constant(Array<float>::randn({1, c, 2, 2}, r));
        auto m = mask_weighting(fs, fb, wn);
        for (int64_t i = 0; i < m.m_w.numel(); ++i) {
            const float w = m.m_w.val()[i];
            REQUIRE(w >= 0.0f);
            REQUIRE(w <= 1.0f);
            REQUIRE(std::abs(m.f_b.val()[i] - w * fb.val()[i]) < 1e-7f);
            const float lo = std::min(fs.val()[i], fb.val()[i]);
            const float hi = std::max(fs.val()[i], fb.val()[i]);
            REQUIRE(m.f_cond.val()[i] >= lo - 1e-6f);
            REQUIRE(m.f_cond.val()[i] <= hi + 1e-6f);
        }
    }
}

TEST_CASE("cross_attention_similarity: column normalization, symmetry, scalar softmax oracle") {
    // columns sum to 1 for random projections
    {
        Rng rng(31);
        nn::Linear<double> wq, wk;
        wq.init(4, 4, rng);
        wk.init(64, 4, rng);
        auto f_a = Tensor<double>::constant(Array<double>::randn({2, 6, 4}, rng));
        auto text = make_text<double>({"red round polyp", ""});
        auto m_c = cross_attention_similarity(f_a, wq, wk, text);
        CHECK(m_c.shape() == Shape{2, 6, 32});
        for (int n = 0; n < 2; ++n)
            for (int tkn = 0; tkn < 32; ++tkn) {
                double s = 0;
                for (int p = 0; p < 6; ++p) s += m_c.val()[(int64_t(n) * 6 + p) * 32 + tkn];
                CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
            }
    }

    // all logits equal with hw=4 -> every entry 0.25 (zero query projection)
    {
        Rng rng(32);
        nn::Linear<double> wq, wk;
        wq.init(3, 3, rng);
        wk.init(64, 3, rng);
        for (auto& w : wq.w.val().v) w = 0.0;
        for (auto& b : wq.b.val().v) b = 0.0;
        auto f_a = Tensor<double>::constant(Array<double>::randn({1, 4, 3}, rng));
        auto text = make_text<double>({"pink oval lesion"});
        auto m_c = cross_attention_similarity(f_a, wq, wk, text);
        for (const auto& v : m_c.val().v) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
    }

    // 2 pixels x 1 live token, logits (ln 3, 0) -> column (0.75, 0.25)
    {
        nn::Linear<double> wq, wk;
        wq.w = Tensor<double>::leaf(Array<double>({1, 1}, {1.0}), false);
        wq.b = Tensor<double>::leaf(Array<double>({1}, {0.0}), false);
        wk.w = Tensor<double>::leaf(Array<double>({1, 1}, {1.0}), false);
        wk.b = Tensor<double>::leaf(Array<double>({1}, {0.0}), false);
        auto f_a = Tensor<double>::constant(Array<double>({1, 2, 1}, {std::log(3.0), 0.0}));
        TextBatch<double> text;
        text.tokens = Tensor<double>::constant(Array<double>({1, 1, 1}, {1.0}));
        text.key_bias = Array<double>({1, 1}, 0.0);
        text.token_mask = Array<double>({1, 1}, 1.0);
        text.null_flags = {0};
        auto m_c = cross_attention_similarity(f_a, wq, wk, text);
        CHECK(m_c.val()[0] == doctest::Approx(0.75).epsilon(1e-12));
        CHECK(m_c.val()[1] == doctest::Approx(0.25).epsilon(1e-12));
    }
}

TEST_CASE("text_aware_map: constants, null prompt, hand-computed fixture") {
    // uniform M_c -> S identically 1
    {
        TextBatch<double> text;
        text.tokens = Tensor<double>::constant(Array<double>({1, 2, 1}));
        text.key_bias = Array<double>({1, 2}, 0.0);
        text.token_mask = Array<double>({1, 2}, 1.0);
        text.null_flags = {0};
        auto m_c = Tensor<double>::constant(Array<double>({1, 3, 2}, 1.0 / 3.0));
        auto s = text_aware_map(m_c, text);
        for (const auto& v : s.val().v) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
    }

    // the committed hw=2, l=2 fixture: columns (0.9,0.1) and (0.6,0.4)
    {
        TextBatch<double> text;
        text.tokens = Tensor<double>::constant(Array<double>({1, 2, 1}));
        text.key_bias = Array<double>({1, 2}, 0.0);
        text.token_mask = Array<double>({1, 2}, 1.0);
        text.null_flags = {0};
        auto m_c = Tensor<double>::constant(Array<double>({1, 2, 2}, {0.9, 0.6, 0.1, 0.4}));
        auto s = text_aware_map(m_c, text);
        CHECK(s.val()[0] == 1.0);  // max-normalized argmax is exactly 1
        CHECK(s.val()[1] == doctest::Approx(0.5 / 1.5).epsilon(1e-15));
        CHECK(s.val()[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-9));
    }

    // null prompt -> S identically 1 even though M_c is not uniform
    {
        Rng rng(41);
        nn::Linear<double> wq, wk;
        wq.init(3, 3, rng);
        wk.init(64, 3, rng);
        auto f_a = Tensor<double>::constant(Array<double>::randn({1, 4, 3}, rng));
        auto text = make_text<double>({""});
        REQUIRE(text.null_flags[0] == 1);
        auto m_c = cross_attention_similarity(f_a, wq, wk, text);
        auto s = text_aware_map(m_c, text);
        for (const auto& v : s.val().v) CHECK(v == 1.0);
    }

    // range and max invariants on random instances with live prompts
    {
        Rng rng(42);
        for (int trial = 0; trial < 50; ++trial) {
            nn::Linear<double> wq, wk;
            wq.init(5, 5, rng);
            wk.init(64, 5, rng);
            auto f_a = Tensor<double>::constant(Array<double>::randn({1, 9, 5}, rng, 2.0));
            auto text = make_text<double>({"granular dark-red pedunculated polyp"});
            auto s = text_aware_map(cross_attention_similarity(f_a, wq, wk, text), text);
            double mx = 0;
            for (const auto& v : s.val().v) {
                REQUIRE(v >= 0.0);
                REQUIRE(v <= 1.0);
                mx = std::max(mx, v);
            }
            CHECK(mx == 1.0);
        }
    }
}

TEST_CASE("text_aware_self_attention: reduction at S=1, suppression scaling, brute-force oracle") {
    Rng rng(51);
    const int d = 3, hw = 4;
    nn::Linear<double> wq_s, wk_s, wv_s, wq_c, wk_c;
    wq_s.init(d, d, rng);
    wk_s.init(d, d, rng);
    wv_s.init(d, d, rng);
    wq_c.init(d, d, rng);
    wk_c.init(64, d, rng);
    auto f_a = Tensor<double>::constant(Array<double>::randn({1, hw, d}, rng));
    auto text = make_text<double>({"smooth pink flat polyp"});

    // force_s_one equals plain self-attention
    auto forced = text_aware_self_attention(f_a, wq_s, wk_s, wv_s, wq_c, wk_c, text,
                                            static_cast<Tensor<double>*>(nullptr), true);
    auto q = wq_s.tokens(f_a), k = wk_s.tokens(f_a), v = wv_s.tokens(f_a);
    auto plain = ops::bmm(ops::softmax_last(ops::scale(ops::bmm(q, k, true), 1.0 / std::sqrt(3.0))), v);
    CHECK(max_abs_diff(forced.val(), plain.val()) < 1e-6);

    // with a null prompt (S = 1) the modulated path also reduces to plain attention
    auto null_text = make_text<double>({""});
    auto via_null = text_aware_self_attention(f_a, wq_s, wk_s, wv_s, wq_c, wk_c, null_text,
                                              static_cast<Tensor<double>*>(nullptr), false);
    CHECK(max_abs_diff(via_null.val(), plain.val()) < 1e-6);

    // brute-force oracle of the full formula on the real S
    Tensor<double> s_map;
    auto out = text_aware_self_attention(f_a, wq_s, wk_s, wv_s, wq_c, wk_c, text, &s_map, false);
    {
        const auto& qv = q.val();
        const auto& kv = k.val();
        const auto& vv = v.val();
        const auto& sv = s_map.val();
        Array<double> expect({1, hw, d});
        for (int i = 0; i < hw; ++i) {
            std::vector<double> logits(hw);
            for (int j = 0; j < hw; ++j) {
                double dot = 0;
                for (int kk = 0; kk < d; ++kk) dot += qv[int64_t(i) * d + kk] * kv[int64_t(j) * d + kk];
                logits[size_t(j)] = dot / std::sqrt(3.0) + std::log(std::max(sv[j], 1e-6));
            }
            const double mx = *std::max_element(logits.begin(), logits.end());
            double denom = 0;
            for (auto& l : logits) {
                l = std::exp(l - mx);
                denom += l;
            }
            for (int kk = 0; kk < d; ++kk) {
                double acc = 0;
                for (int j = 0; j < hw; ++j) acc += logits[size_t(j)] / denom * vv[int64_t(j) * d + kk];
                expect[int64_t(i) * d + kk] = acc;
            }
        }
        CHECK(max_abs_diff(out.val(), expect) < 1e-6);
    }

    // key-side suppression: s_j = 1e-6 scales pre-normalization mass by ~1e-6
    {
        auto m_s = ops::scale(ops::bmm(q, k, true), 1.0 / std::sqrt(3.0));
        Array<double> s_small({1, hw}, 1.0);
        s_small[2] = 1e-6;
        auto lnS = ops::log_op(ops::clamp_min(Tensor<double>::constant(s_small), 1e-6));
        auto mod = ops::add_col_bias(m_s, lnS);
        for (int i = 0; i < hw; ++i)
            for (int j = 0; j < hw; ++j) {
                const double ratio = std::exp(mod.val()[int64_t(i) * hw + j]) /
                                     std::exp(m_s.val()[int64_t(i) * hw + j]);
                CHECK(ratio == doctest::Approx(j == 2 ? 1e-6 : 1.0).epsilon(1e-9));
            }
    }
}

TEST_CASE("control_forward: zero-init transparency and gradient flow into zero convs") {
    auto cfg = ModelConfig::miniature();
    Rng rng(61);
    diffusion::BackboneUNet<float> backbone;
    backbone.init(cfg, rng);
    backbone.set_trainable(false);

    ControlBranch<float> branch;
    Rng crng(62);
    branch.init(cfg, crng);
    branch.copy_encoder_from(backbone);

    const int N = 2, H = 8, W = 8;
    Rng drng(63);
    auto x = Tensor<float>::constant(Array<float>::randn({N, 3, H, W}, drng));
    Array<float> masks({N, 1, H, W});
    for (int n = 0; n < N; ++n)
        for (int r = 2; r < 6; ++r)
            for (int c = 2; c < 6; ++c) masks[((int64_t(n)) * H + r) * W + c] = 1.0f;
    auto text = make_text<float>({"red round polyp", ""});
    std::vector<int> t{3, 17};

    // all residuals exactly zero at init
    auto residuals = branch.forward(x, t, text, masks);
    REQUIRE(residuals.size() == cfg.channels.size());
    for (const auto& r : residuals)
        for (const auto& v : r.val().v) REQUIRE(v == 0.0f);

    // hence the controlled model output equals the frozen backbone bitwise
    auto y_ctrl = backbone.forward(x, t, text, &residuals);
    auto y_free = backbone.forward(x, t, text, nullptr);
    CHECK(std::memcmp(y_ctrl.val().data(), y_free.val().data(), sizeof(float) * y_free.numel()) == 0);

    // one optimizer step on a nonzero loss: zero convs move, deeper params do not
    std::vector<Tensor<float>> params;
    branch.visit_params([&params](const std::string&, Tensor<float>& p) { params.push_back(p); });
    nn::Adam<float> opt;
    opt.lr = 1e-2;
    opt.reset(params);

    const float wn_before = branch.weight_net.l1.w.val()[0];
    const float enc_before = branch.enc_sharp.convs[0].w.val()[0];

    diffusion::TrainBatch<float> batch;
    Rng brng(64);
    batch.images01 = Array<float>::rand_uniform({N, 3, H, W}, brng);
    batch.masks = masks;
    batch.text = text;
    const auto sched = diffusion::NoiseSchedule::linear(cfg.T, cfg.beta_start, cfg.beta_end);
    control::ControlledModel<float> model(&backbone, &branch);
    std::vector<int> tt{5, 11};
    Array<float> eps({N, 3, H, W});
    for (auto& e : eps.v) e = static_cast<float>(brng.normal());
    nn::zero_grads(params);
    auto loss = diffusion::diffusion_loss_at(batch, tt, eps, model, sched);
    CHECK(loss.val()[0] > 0.0f);
    loss.backward();
    opt.step(params);

    bool any_zero_conv_nonzero = false;
    for (const auto& lvl : branch.levels)
        for (const auto& v : lvl.zero_conv.w.val().v) any_zero_conv_nonzero |= (v != 0.0f);
    CHECK(any_zero_conv_nonzero);

    // zero convolutions gate the gradient: everything behind them is untouched
    CHECK(branch.weight_net.l1.w.val()[0] == wn_before);
    CHECK(branch.enc_sharp.convs[0].w.val()[0] == enc_before);

    // resolution mismatch -> shape error
    Array<float> small_masks({N, 1, 4, 4});
    CHECK_THROWS_AS(branch.forward(x, t, text, small_masks), ShapeError);
}

TEST_CASE("gradient check: loss -> control branch -> frozen backbone (double, sampled)") {
    auto cfg = ModelConfig::miniature();
    Rng rng(71);
    diffusion::BackboneUNet<double> backbone;
    backbone.init(cfg, rng);
    backbone.set_trainable(false);

    ControlBranch<double> branch;
    Rng crng(72);
    branch.init(cfg, crng);
    // move zero convs off zero so gradients reach every parameter group
    for (auto& lvl : branch.levels) {
        Rng zr(73);
        for (auto& w : lvl.zero_conv.w.val().v) w = zr.normal() * 0.05;
        for (auto& b : lvl.zero_conv.b.val().v) b = zr.normal() * 0.05;
    }

    const int N = 1, H = 8, W = 8;
    diffusion::TrainBatch<double> batch;
    Rng drng(74);
    batch.images01 = Array<double>::rand_uniform({N, 3, H, W}, drng);
    batch.masks = Array<double>({N, 1, H, W});
    for (int r = 2; r < 6; ++r)
        for (int c = 2; c < 6; ++c) batch.masks[int64_t(r) * W + c] = 1.0;
    batch.text = make_text<double>({"granular red polyp"});
    const auto sched = diffusion::NoiseSchedule::linear(cfg.T, cfg.beta_start, cfg.beta_end);
    std::vector<int> t{7};
    Array<double> eps({N, 3, H, W});
    for (auto& e : eps.v) e = drng.normal();

    control::ControlledModel<double> model(&backbone, &branch);
    auto loss_fn = [&] { return diffusion::diffusion_loss_at(batch, t, eps, model, sched); };

    std::vector<std::pair<std::string, Tensor<double>*>> params;
    branch.visit_params([&params](const std::string& name, Tensor<double>& p) {
        params.emplace_back(name, &p);
    });

    auto base = loss_fn();
    base.backward();
    Rng pick(75);
    int checked = 0;
    for (auto& [name, p] : params) {
        REQUIRE(p->has_grad());
        const auto& g = p->grad_value();
        for (int k = 0; k < 2; ++k) {
            const int64_t j = static_cast<int64_t>(pick.uniform_int(uint64_t(p->numel())));
            const double orig = p->val()[j];
            const double h = 1e-5;
            p->val()[j] = orig + h;
            const double fp = loss_fn().val()[0];
            p->val()[j] = orig - h;
            const double fm = loss_fn().val()[0];
            p->val()[j] = orig;
            const double numeric = (fp - fm) / (2 * h);
            const double denom = std::max({1e-8, std::abs(g[j]), std::abs(numeric)});
            INFO(name << "[" << j << "] analytic " << g[j] << " numeric " << numeric);
            if (std::abs(g[j]) < 1e-12 && std::abs(numeric) < 1e-9) continue;  // flat direction
            REQUIRE(std::abs(g[j] - numeric) / denom < 1e-4);
            ++checked;
        }
    }
    CHECK(checked > 50);
}

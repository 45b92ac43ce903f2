#pragma once

#include "ccis/diffusion/schedule.hpp"
#include "ccis/diffusion/unet.hpp"

namespace ccis::diffusion {

// Anything that predicts the added noise from (x_t, t, text, mask condition).
template <class S>
struct EpsModel {
    virtual ~EpsModel() = default;
    virtual Tensor<S> eps(Tensor<S> x_t, const std::vector<int>& t, const TextBatch<S>& text,
                          const Array<S>* masks) = 0;
};

template <class S>
struct BackboneModel final : EpsModel<S> {
    BackboneUNet<S>* net;
    explicit BackboneModel(BackboneUNet<S>* n) : net(n) {}
    Tensor<S> eps(Tensor<S> x_t, const std::vector<int>& t, const TextBatch<S>& text,
                  const Array<S>*) override {
        return net->forward(x_t, t, text, nullptr);
    }
};

template <class S>
struct TrainBatch {
    Array<S> images01;  // [N,3,H,W] in [0,1]
    TextBatch<S> text;
    Array<S> masks;     // [N,1,H,W] binary; empty when training without masks
    std::vector<std::string> ids;
    int batch() const { return images01.dim(0); }
};

// Deterministic core: noise each sample at its own timestep and return the
// MSE between the model's prediction and the injected noise.
template <class S>
Tensor<S> diffusion_loss_at(const TrainBatch<S>& batch, const std::vector<int>& t,
                            const Array<S>& eps, EpsModel<S>& model, const NoiseSchedule& sched) {
    const int N = batch.batch();
    if (static_cast<int>(t.size()) != N || eps.shape != batch.images01.shape)
        throw ShapeError("diffusion_loss: t/eps do not match the batch");
    const int64_t per = eps.numel() / N;
    Array<S> x_t(eps.shape);
    for (int n = 0; n < N; ++n) {
        const double ab = sched.alpha_bar(t[static_cast<size_t>(n)]);
        const S a = S(std::sqrt(ab)), b = S(std::sqrt(1.0 - ab));
        const S* img = batch.images01.data() + int64_t(n) * per;
        const S* e = eps.data() + int64_t(n) * per;
        S* dst = x_t.data() + int64_t(n) * per;
        for (int64_t i = 0; i < per; ++i) dst[i] = a * (S(2) * img[i] - S(1)) + b * e[i];
    }
    auto pred = model.eps(Tensor<S>::constant(std::move(x_t)), t, batch.text,
                          batch.masks.empty() ? nullptr : &batch.masks);
    return ops::mse(pred, Tensor<S>::constant(eps));
}

// Samples t uniform per batch element and eps ~ N(0,1), then defers to the
// deterministic core.
template <class S>
Tensor<S> diffusion_loss(const TrainBatch<S>& batch, EpsModel<S>& model, const NoiseSchedule& sched,
                         Rng& rng, std::vector<int>* t_used = nullptr) {
    if (batch.batch() < 1) throw ShapeError("diffusion_loss: empty batch");
    const int N = batch.batch();
    std::vector<int> t(static_cast<size_t>(N));
    for (auto& ti : t) ti = static_cast<int>(rng.uniform_int(uint64_t(sched.T)));
    Array<S> eps(batch.images01.shape);
    for (auto& e : eps.v) e = S(rng.normal());
    if (t_used) *t_used = t;
    return diffusion_loss_at(batch, t, eps, model, sched);
}

}  // namespace ccis::diffusion

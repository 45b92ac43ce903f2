#pragma once

#include <vector>

#include "ccis/core/array.hpp"

namespace ccis::diffusion {

// Linear beta schedule with precomputed cumulative products, double precision.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas, alphas, alpha_bars;

    static NoiseSchedule linear(int T, double beta_start, double beta_end) {
        if (T < 2) throw ConfigError("noise schedule needs T >= 2");
        if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
            throw ConfigError("noise schedule needs 0 < beta_start <= beta_end < 1");
        NoiseSchedule s;
        s.T = T;
        s.betas.resize(static_cast<size_t>(T));
        s.alphas.resize(static_cast<size_t>(T));
        s.alpha_bars.resize(static_cast<size_t>(T));
        double prod = 1.0;
        for (int t = 0; t < T; ++t) {
            s.betas[t] = beta_start + (beta_end - beta_start) * double(t) / double(T - 1);
            s.alphas[t] = 1.0 - s.betas[t];
            prod *= s.alphas[t];
            s.alpha_bars[t] = prod;
        }
        return s;
    }

    double alpha_bar(int t) const {
        if (t < 0 || t >= T) throw ShapeError("timestep out of range");
        return alpha_bars[static_cast<size_t>(t)];
    }
};

// Forward noising q(x_t | x_0). The image arrives in [0,1] and is rescaled to
// [-1,1] internally; eps must have the image's shape.
template <class S>
Array<S> q_sample(const Array<S>& image01, int t, const Array<S>& eps, const NoiseSchedule& sched) {
    if (image01.shape != eps.shape) throw ShapeError("q_sample: eps shape mismatch");
    const double ab = sched.alpha_bar(t);
    const S a = S(std::sqrt(ab));
    const S b = S(std::sqrt(1.0 - ab));
    Array<S> out(image01.shape);
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = a * (S(2) * image01[i] - S(1)) + b * eps[i];
    return out;
}

}  // namespace ccis::diffusion

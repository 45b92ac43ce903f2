#pragma once

#include <Eigen/Dense>

#include "ccis/diffusion/unet.hpp"
#include "ccis/util/color.hpp"

namespace ccis::eval {

struct FeatureSet {
    Eigen::MatrixXd features;  // n x f
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;  // unbiased estimator
    std::string extractor_id;
};

struct FeatureExtractor {
    virtual ~FeatureExtractor() = default;
    virtual std::string id() const = 0;
    virtual int dim() const = 0;
    virtual Eigen::VectorXd extract(const Array<float>& image) = 0;
};

// f = 64: 32 hue bins + 8 saturation bins + 8 value bins + 8 gradient-magnitude
// bins + 8 global statistics.
class HandcraftedExtractor final : public FeatureExtractor {
  public:
    std::string id() const override { return "handcrafted-v1"; }
    int dim() const override { return 64; }
    Eigen::VectorXd extract(const Array<float>& image) override {
        const int H = image.dim(1), W = image.dim(2);
        const int64_t hw = int64_t(H) * W;
        Eigen::VectorXd f = Eigen::VectorXd::Zero(64);
        auto gray = [&](int64_t p) {
            return (double(image[p]) + image[hw + p] + image[2 * hw + p]) / 3.0;
        };
        double gmean = 0, g2 = 0, smean = 0, grad_mean = 0, grad2 = 0, edge = 0;
        double grad_r = 0, grad_c = 0, grad_total = 1e-12;
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c) {
                const int64_t p = int64_t(r) * W + c;
                double h, s, v;
                rgb_to_hsv(image[p], image[hw + p], image[2 * hw + p], h, s, v);
                f[std::min(31, int(h / 360.0 * 32))] += 1.0;
                f[32 + std::min(7, int(s * 8))] += 1.0;
                f[40 + std::min(7, int(v * 8))] += 1.0;
                const double gx = gray(int64_t(r) * W + std::min(W - 1, c + 1)) -
                                  gray(int64_t(r) * W + std::max(0, c - 1));
                const double gy = gray(int64_t(std::min(H - 1, r + 1)) * W + c) -
                                  gray(int64_t(std::max(0, r - 1)) * W + c);
                const double g = std::sqrt(gx * gx + gy * gy);
                f[48 + std::min(7, int(g * 8))] += 1.0;
                gmean += gray(p);
                g2 += gray(p) * gray(p);
                smean += s;
                grad_mean += g;
                grad2 += g * g;
                edge += g > 0.1 ? 1.0 : 0.0;
                grad_r += g * r;
                grad_c += g * c;
                grad_total += g;
            }
        const double n = double(hw);
        for (int i = 0; i < 56; ++i) f[i] /= n;
        gmean /= n;
        grad_mean /= n;
        f[56] = gmean;
        f[57] = std::sqrt(std::max(0.0, g2 / n - gmean * gmean));
        f[58] = grad_mean;
        f[59] = std::sqrt(std::max(0.0, grad2 / n - grad_mean * grad_mean));
        f[60] = edge / n;
        f[61] = grad_r / grad_total / H;
        f[62] = grad_c / grad_total / W;
        f[63] = smean / n;
        return f;
    }
};

// Pooled activations of the frozen backbone encoder trunk: global average of
// the second down level (64 channels by default), evaluated at t=0 with the
// null text condition.
class BackboneTrunkExtractor final : public FeatureExtractor {
  public:
    BackboneTrunkExtractor(const diffusion::BackboneUNet<float>* net,
                           diffusion::TextBatch<float> null_text)
        : net_(net), null_text_(std::move(null_text)) {}

    std::string id() const override { return "backbone-trunk-l1"; }
    int dim() const override {
        return net_->cfg.channels[std::min<size_t>(1, net_->cfg.channels.size() - 1)];
    }
    Eigen::VectorXd extract(const Array<float>& image) override {
        NoGradGuard ng;
        const int H = image.dim(1), W = image.dim(2);
        Array<float> x({1, 3, H, W});
        for (int64_t i = 0; i < image.numel(); ++i) x[i] = image[i] * 2.0f - 1.0f;
        auto e = net_->temb(std::vector<int>{0});
        auto h = net_->stem(Tensor<float>::constant(std::move(x)));
        const size_t upto = std::min<size_t>(1, net_->downs.size() - 1);
        for (size_t i = 0; i <= upto; ++i) {
            const auto& lvl = net_->downs[i];
            h = lvl.down(h);
            h = lvl.res(h, e);
            h = lvl.sattn(h);
            h = lvl.cattn(h, null_text_);
        }
        auto pooled = ops::global_avg_pool(h);
        Eigen::VectorXd f(pooled.numel());
        for (int64_t i = 0; i < pooled.numel(); ++i) f[i] = pooled.val()[i];
        return f;
    }

  private:
    const diffusion::BackboneUNet<float>* net_;
    diffusion::TextBatch<float> null_text_;
};

// Deterministic features plus unbiased mean/covariance. n >= 2 required.
inline FeatureSet extract_features(const std::vector<const Array<float>*>& images,
                                   FeatureExtractor& ex) {
    const int n = static_cast<int>(images.size());
    if (n < 2) throw ValidationError("extract_features: need at least 2 images");
    FeatureSet fs;
    fs.extractor_id = ex.id();
    fs.features.resize(n, ex.dim());
    for (int i = 0; i < n; ++i) fs.features.row(i) = ex.extract(*images[static_cast<size_t>(i)]);
    fs.mean = fs.features.colwise().mean();
    const Eigen::MatrixXd centered = fs.features.rowwise() - fs.mean.transpose();
    fs.cov = centered.transpose() * centered / double(n - 1);
    return fs;
}

}  // namespace ccis::eval

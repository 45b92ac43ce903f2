#pragma once

#include <cstring>
#include <fstream>

#include "ccis/core/array.hpp"
#include "ccis/text/tokenizer.hpp"
#include "ccis/util/hash.hpp"

namespace ccis::text {

inline constexpr uint32_t kTextEncoderMagic = 0x45545843;  // "CXTE"
inline constexpr uint64_t kTextEncoderSeed = 0xC0FFEE;

// Per-caption output of the frozen encoder.
template <class S>
struct TextEmbedding {
    Array<S> matrix;        // [l, d]
    Array<float> attn_mask; // [l], 1 for non-PAD positions
    bool null_prompt = false;
};

// Frozen text encoder: token embedding + sinusoidal positions + one
// self-attention layer. Parameters are drawn once from a fixed seed, live
// outside every trainable parameter set, and serialize to a flat float32
// asset (header: magic, d, l, vocab_size; then embedding[vocab*d], wq, wk,
// wv, wo [d*d each], little-endian).
class TextEncoder {
  public:
    int l = 32, d = 64;

    void init_from_seed(int vocab_size, uint64_t seed = kTextEncoderSeed) {
        vocab_ = vocab_size;
        Rng rng(seed);
        auto draw = [&](Shape sh, double stddev) {
            Array<float> a(std::move(sh));
            for (auto& x : a.v) x = static_cast<float>(rng.normal() * stddev);
            return a;
        };
        embedding_ = draw({vocab_, d}, 0.5);
        wq_ = draw({d, d}, 1.0 / std::sqrt(double(d)));
        wk_ = draw({d, d}, 1.0 / std::sqrt(double(d)));
        wv_ = draw({d, d}, 1.0 / std::sqrt(double(d)));
        wo_ = draw({d, d}, 1.0 / std::sqrt(double(d)));
        build_positions();
    }

    // All math in float32 regardless of the caller's scalar type, so float and
    // double model instantiations condition on identical values.
    template <class S>
    TextEmbedding<S> encode(const TokenSeq& tokens) const {
        Array<float> e({l, d});
        Array<float> mask({l});
        for (int j = 0; j < l; ++j) {
            const int id = tokens.ids[static_cast<size_t>(j)];
            mask[j] = j < tokens.length ? 1.0f : 0.0f;
            for (int k = 0; k < d; ++k)
                e[int64_t(j) * d + k] = embedding_[int64_t(id) * d + k] + pos_[int64_t(j) * d + k];
        }
        // single-head self-attention over non-PAD keys, residual output
        Array<float> q({l, d}), kk({l, d}), v({l, d});
        matvec(e, wq_, q);
        matvec(e, wk_, kk);
        matvec(e, wv_, v);
        const float inv = 1.0f / std::sqrt(float(d));
        Array<float> out = e;
        std::vector<float> logits(static_cast<size_t>(l));
        for (int i = 0; i < l; ++i) {
            float mx = -1e30f;
            for (int j = 0; j < l; ++j) {
                float s = 0;
                for (int k = 0; k < d; ++k) s += q[int64_t(i) * d + k] * kk[int64_t(j) * d + k];
                s *= inv;
                if (mask[j] == 0.0f) s = -1e30f;
                logits[static_cast<size_t>(j)] = s;
                mx = std::max(mx, s);
            }
            float denom = 0;
            for (int j = 0; j < l; ++j) {
                logits[static_cast<size_t>(j)] = std::exp(logits[static_cast<size_t>(j)] - mx);
                denom += logits[static_cast<size_t>(j)];
            }
            std::vector<float> attnv(static_cast<size_t>(d), 0.0f);
            for (int j = 0; j < l; ++j) {
                const float a = logits[static_cast<size_t>(j)] / denom;
                for (int k = 0; k < d; ++k) attnv[static_cast<size_t>(k)] += a * v[int64_t(j) * d + k];
            }
            for (int k = 0; k < d; ++k) {
                float s = 0;
                for (int k2 = 0; k2 < d; ++k2) s += attnv[static_cast<size_t>(k2)] * wo_[int64_t(k2) * d + k];
                out[int64_t(i) * d + k] += s;
            }
        }
        // positions past EOS carry the raw PAD embedding row
        for (int j = tokens.length; j < l; ++j)
            for (int k = 0; k < d; ++k) out[int64_t(j) * d + k] = embedding_[int64_t(kPadId) * d + k];

        TextEmbedding<S> res;
        res.matrix = out.template cast<S>();
        res.attn_mask = mask;
        res.null_prompt = tokens.empty_prompt();
        return res;
    }

    int vocab_size() const { return vocab_; }

    uint64_t checksum() const {
        uint64_t h = 14695981039346656037ULL;
        auto mix = [&](const Array<float>& a) { h = fnv1a64(a.data(), a.v.size() * sizeof(float), h); };
        mix(embedding_);
        mix(wq_);
        mix(wk_);
        mix(wv_);
        mix(wo_);
        return h;
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write text encoder asset: " + path);
        const uint32_t header[4] = {kTextEncoderMagic, uint32_t(d), uint32_t(l), uint32_t(vocab_)};
        f.write(reinterpret_cast<const char*>(header), sizeof(header));
        auto dump = [&](const Array<float>& a) {
            f.write(reinterpret_cast<const char*>(a.data()),
                    static_cast<std::streamsize>(a.v.size() * sizeof(float)));
        };
        dump(embedding_);
        dump(wq_);
        dump(wk_);
        dump(wv_);
        dump(wo_);
        if (!f) throw IoError("write failed: " + path);
    }

    static TextEncoder load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot read text encoder asset: " + path);
        uint32_t header[4];
        f.read(reinterpret_cast<char*>(header), sizeof(header));
        if (!f || header[0] != kTextEncoderMagic)
            throw ValidationError("bad text encoder asset: " + path);
        TextEncoder te;
        te.d = static_cast<int>(header[1]);
        te.l = static_cast<int>(header[2]);
        te.vocab_ = static_cast<int>(header[3]);
        auto slurp = [&](Array<float>& a, Shape sh) {
            a = Array<float>(std::move(sh));
            f.read(reinterpret_cast<char*>(a.data()),
                   static_cast<std::streamsize>(a.v.size() * sizeof(float)));
        };
        slurp(te.embedding_, {te.vocab_, te.d});
        slurp(te.wq_, {te.d, te.d});
        slurp(te.wk_, {te.d, te.d});
        slurp(te.wv_, {te.d, te.d});
        slurp(te.wo_, {te.d, te.d});
        if (!f) throw ValidationError("truncated text encoder asset: " + path);
        te.build_positions();
        return te;
    }

  private:
    static void matvec(const Array<float>& x, const Array<float>& w, Array<float>& out) {
        // out[i,:] = x[i,:] * w  with w [d,d]
        const int L = x.dim(0), D = x.dim(1);
        for (int i = 0; i < L; ++i)
            for (int k = 0; k < D; ++k) {
                float s = 0;
                for (int k2 = 0; k2 < D; ++k2) s += x[int64_t(i) * D + k2] * w[int64_t(k2) * D + k];
                out[int64_t(i) * D + k] = s;
            }
    }

    void build_positions() {
        pos_ = Array<float>({l, d});
        const int half = d / 2;
        for (int j = 0; j < l; ++j)
            for (int k = 0; k < half; ++k) {
                const double freq = std::exp(-std::log(10000.0) * double(k) / double(half - 1));
                pos_[int64_t(j) * d + k] = static_cast<float>(std::sin(j * freq));
                pos_[int64_t(j) * d + half + k] = static_cast<float>(std::cos(j * freq));
            }
    }

    int vocab_ = 0;
    Array<float> embedding_, wq_, wk_, wv_, wo_, pos_;
};

}  // namespace ccis::text

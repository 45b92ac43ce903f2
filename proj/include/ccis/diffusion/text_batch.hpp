#pragma once

#include <vector>

#include "ccis/core/tensor.hpp"
#include "ccis/text/text_encoder.hpp"

namespace ccis::diffusion {

// Batched frozen text embeddings plus the derived masks used inside
// attention: an additive key bias (-1e30 on PAD) and a 0/1 token mask.
template <class S>
struct TextBatch {
    Tensor<S> tokens;        // constant [N, l, d]
    Array<S> key_bias;       // [N, l]
    Array<S> token_mask;     // [N, l]
    std::vector<uint8_t> null_flags;  // per-sample empty-prompt markers

    int batch() const { return tokens.val().dim(0); }

    static TextBatch pack(const std::vector<text::TextEmbedding<S>>& embs) {
        const int N = static_cast<int>(embs.size());
        const int l = embs[0].matrix.dim(0), d = embs[0].matrix.dim(1);
        Array<S> mat({N, l, d});
        TextBatch tb;
        tb.key_bias = Array<S>({N, l});
        tb.token_mask = Array<S>({N, l});
        tb.null_flags.resize(static_cast<size_t>(N));
        for (int n = 0; n < N; ++n) {
            std::copy_n(embs[n].matrix.data(), int64_t(l) * d, mat.data() + int64_t(n) * l * d);
            for (int j = 0; j < l; ++j) {
                const bool live = embs[n].attn_mask[j] != 0.0f;
                tb.key_bias[int64_t(n) * l + j] = live ? S(0) : S(-1e30);
                tb.token_mask[int64_t(n) * l + j] = live ? S(1) : S(0);
            }
            tb.null_flags[static_cast<size_t>(n)] = embs[n].null_prompt ? 1 : 0;
        }
        tb.tokens = Tensor<S>::constant(std::move(mat));
        return tb;
    }
};

}  // namespace ccis::diffusion

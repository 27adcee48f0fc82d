#pragma once

#include <vector>

#include "veco/tensor.hpp"

namespace veco {

/// Projection matrices of one multi-head attention module. Self-attention
/// instances hold the W matrices, cross-attention instances the U matrices;
/// the two never share storage.
struct AttentionParams {
    Tensor wq, wk, wv, wo;  // each [d_model, d_model]
    int head_count = 1;

    Index d_model() const { return wq.dim(0); }
    Index d_k() const { return d_model() / head_count; }
};

/// Boolean [query_len, key_len] matrix; true = attending allowed.
struct AttentionMask {
    Index query_len = 0;
    Index key_len = 0;
    std::vector<std::uint8_t> allow;  // row-major

    static AttentionMask all_allowed(Index lq, Index lk);
    bool allowed(Index q, Index k) const {
        return allow[static_cast<size_t>(q * key_len + k)] != 0;
    }
    void set(Index q, Index k, bool v) {
        allow[static_cast<size_t>(q * key_len + k)] = v ? 1 : 0;
    }
};

/// Key columns at or beyond `length` are disallowed in every row.
AttentionMask build_padding_mask(Index length, Index lq, Index lk);

/// Strictly-upper-triangular entries disallowed.
AttentionMask causal_mask(Index len);

AttentionMask combine_masks(const AttentionMask& a, const AttentionMask& b);

struct AttentionResult {
    Tensor output;   // [Lq, d_model]
    Tensor weights;  // [heads, Lq, Lk], detached copy for export/inspection
};

/// Scaled dot-product multi-head attention, one kernel for both the
/// self-attention (q_in == kv_in) and cross-attention (distinct sources)
/// configurations. Disallowed positions get -1e30 added before the softmax,
/// which leaves them at exactly zero weight after max-subtraction.
AttentionResult multi_head_attention(const Tensor& q_in, const Tensor& kv_in,
                                     const AttentionParams& params, const AttentionMask& mask);

}  // namespace veco

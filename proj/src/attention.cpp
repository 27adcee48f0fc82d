#include "veco/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace veco {

namespace {
constexpr double kMaskedScore = -1e30;
}

AttentionMask AttentionMask::all_allowed(Index lq, Index lk) {
    AttentionMask m;
    m.query_len = lq;
    m.key_len = lk;
    m.allow.assign(static_cast<size_t>(lq * lk), 1);
    return m;
}

AttentionMask build_padding_mask(Index length, Index lq, Index lk) {
    if (length > lk) {
        throw std::invalid_argument("build_padding_mask: length " + std::to_string(length) +
                                    " exceeds key count " + std::to_string(lk));
    }
    AttentionMask m = AttentionMask::all_allowed(lq, lk);
    for (Index q = 0; q < lq; ++q) {
        for (Index k = length; k < lk; ++k) m.set(q, k, false);
    }
    return m;
}

AttentionMask causal_mask(Index len) {
    AttentionMask m = AttentionMask::all_allowed(len, len);
    for (Index q = 0; q < len; ++q) {
        for (Index k = q + 1; k < len; ++k) m.set(q, k, false);
    }
    return m;
}

AttentionMask combine_masks(const AttentionMask& a, const AttentionMask& b) {
    if (a.query_len != b.query_len || a.key_len != b.key_len) {
        throw std::invalid_argument("combine_masks: dimension mismatch");
    }
    AttentionMask m = a;
    for (size_t i = 0; i < m.allow.size(); ++i) m.allow[i] = a.allow[i] && b.allow[i];
    return m;
}

AttentionResult multi_head_attention(const Tensor& q_in, const Tensor& kv_in,
                                     const AttentionParams& params, const AttentionMask& mask) {
    if (q_in.rank() != 2 || kv_in.rank() != 2) {
        throw std::invalid_argument("multi_head_attention: inputs must be rank-2");
    }
    Index d = params.d_model();
    if (q_in.dim(1) != d || kv_in.dim(1) != d) {
        throw std::invalid_argument("multi_head_attention: input width " +
                                    std::to_string(q_in.dim(1)) + "/" +
                                    std::to_string(kv_in.dim(1)) + " vs d_model " +
                                    std::to_string(d));
    }
    if (d % params.head_count != 0) {
        throw std::invalid_argument("multi_head_attention: d_model not divisible by head count");
    }
    Index lq = q_in.dim(0), lk = kv_in.dim(0);
    if (mask.query_len != lq || mask.key_len != lk) {
        throw std::invalid_argument("multi_head_attention: mask shape [" +
                                    std::to_string(mask.query_len) + "," +
                                    std::to_string(mask.key_len) + "] vs [" + std::to_string(lq) +
                                    "," + std::to_string(lk) + "]");
    }
    for (Index q = 0; q < lq; ++q) {
        bool any = false;
        for (Index k = 0; k < lk; ++k) {
            if (mask.allowed(q, k)) {
                any = true;
                break;
            }
        }
        if (!any) {
            throw std::invalid_argument("multi_head_attention: query row " + std::to_string(q) +
                                        " has no allowed key (softmax undefined)");
        }
    }

    Tensor q_proj = matmul(q_in, params.wq);
    Tensor k_proj = matmul(kv_in, params.wk);
    Tensor v_proj = matmul(kv_in, params.wv);

    // Additive mask shared by all heads.
    std::vector<double> bias_vals(static_cast<size_t>(lq * lk), 0.0);
    for (Index q = 0; q < lq; ++q) {
        for (Index k = 0; k < lk; ++k) {
            if (!mask.allowed(q, k)) bias_vals[static_cast<size_t>(q * lk + k)] = kMaskedScore;
        }
    }
    Tensor mask_bias = Tensor::from_values({lq, lk}, std::move(bias_vals));

    int heads = params.head_count;
    Index dk = params.d_k();
    double scaling = 1.0 / std::sqrt(static_cast<double>(dk));

    std::vector<Tensor> head_outputs;
    head_outputs.reserve(static_cast<size_t>(heads));
    std::vector<double> weight_vals(static_cast<size_t>(heads) * lq * lk);
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q_proj, h * dk, dk);
        Tensor kh = slice_cols(k_proj, h * dk, dk);
        Tensor vh = slice_cols(v_proj, h * dk, dk);
        Tensor scores = add(scale(matmul(qh, transpose(kh)), scaling), mask_bias);
        Tensor w = softmax(scores, 1);
        std::copy(w.values().begin(), w.values().end(),
                  weight_vals.begin() + static_cast<size_t>(h) * lq * lk);
        head_outputs.push_back(matmul(w, vh));
    }

    AttentionResult result;
    result.output = matmul(concat_cols(head_outputs), params.wo);
    result.weights = Tensor::from_values({heads, lq, lk}, std::move(weight_vals));
    return result;
}

}  // namespace veco

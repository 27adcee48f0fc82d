#pragma once

#include <string>
#include <vector>

#include "veco/attention.hpp"
#include "veco/data.hpp"
#include "veco/tensor.hpp"

namespace veco {

struct ModelConfig {
    int num_layers = 4;
    int d_model = 64;
    int head_count = 4;
    int d_ff = 256;
    int vocab_size = 64;
    int max_seq_len = 64;
    double dropout = 0.0;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

/// Self-side set of one layer: self-attention, FFN, and the two sublayer norms.
struct SelfLayerParams {
    AttentionParams self_attn;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Tensor ln1_gain, ln1_bias;
    Tensor ln2_gain, ln2_bias;
};

/// Plug-and-play set of one layer: cross-attention plus one norm pair
/// applied to the incoming paired representation.
struct CrossLayerParams {
    AttentionParams cross_attn;
    Tensor lnc_gain, lnc_bias;
};

/// All model parameters. The self-side and cross-attention sets are disjoint,
/// and there are no language embeddings. The output head starts as a
/// transposed copy of the token embedding and trains as its own parameter;
/// sharing storage would leak head gradient into every embedding row through
/// the softmax, breaking the exact stop-gradient guarantees on the cross
/// terms.
struct ModelParams {
    Tensor token_embedding;  // [V, d_model]
    Tensor pos_embedding;    // [max_seq_len, d_model]
    std::vector<SelfLayerParams> layers_self;
    std::vector<CrossLayerParams> layers_cross;
    Tensor out_proj;  // [d_model, V]
    Tensor out_bias;  // [V]

    std::vector<std::pair<std::string, Tensor>> named_tensors() const;
    std::vector<std::pair<std::string, Tensor>> self_params() const;
    std::vector<std::pair<std::string, Tensor>> cross_params() const;
    Index total_params() const;
};

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Per-layer activations of one stream for one sequence. layers[0] is the
/// embedding sum; layers[l] the output of layer l. Attention stacks hold the
/// detached head-resolved weights of each sublayer.
struct StreamTrace {
    std::vector<Tensor> layers;
    std::vector<Tensor> self_attn;
    std::vector<Tensor> cross_attn;  // empty for H-stream runs

    const Tensor& final() const { return layers.back(); }
};

/// H-stream and S-stream traces for one sequence of a pair.
struct DualStates {
    StreamTrace h;
    StreamTrace s;
};

struct Model {
    ModelConfig config;
    ModelParams params;
};

Model make_model(const ModelConfig& cfg, std::uint64_t seed);

/// Token + learned absolute position embeddings; rejects empty or overlength
/// sequences.
Tensor embed_sequence(const Model& model, const std::vector<Index>& tokens);

/// Self-attention-only encoder (the cross-attention module unplugged).
/// Post-LN residual self-attention then post-LN residual FFN per layer.
StreamTrace encode_h(const Model& model, const std::vector<Index>& tokens,
                     Rng* dropout_rng = nullptr);

/// Plugged encoder: per layer, the shared self-attention sublayer, then a
/// residual cross-attention read of the paired sequence's final H-layer
/// (keys/values are LNc(paired_hl)·U), then the shared FFN sublayer.
/// `paired_hl` is expected to be stop_gradient'ed by the caller when the
/// CA-MLM objective is being optimized.
StreamTrace encode_s(const Model& model, const std::vector<Index>& tokens,
                     const Tensor& paired_hl, Rng* dropout_rng = nullptr);

/// Both streams for `own`: its H-stream, and its S-stream cross-attending
/// the stop-gradient of the paired sequence's final H-layer.
DualStates encode_dual(const Model& model, const std::vector<Index>& own,
                       const std::vector<Index>& paired, Rng* dropout_rng = nullptr);

/// logits = hidden · out_proj + b, the single output head shared by both
/// streams (out_proj == Eᵀ at initialization).
Tensor lm_logits(const Model& model, const Tensor& hidden);

struct CaMlmLoss {
    Tensor total;
    Tensor x_self;   // CE of P(x|x̂)
    Tensor x_cross;  // CE of P(x|ŷ,x̂)
    Tensor y_self;   // CE of P(y|ŷ)
    Tensor y_cross;  // CE of P(y|x̂,ŷ)
};

/// Four-term objective over a batch of masked pairs; each CE pools the
/// masked positions of its own side across the batch. The H-layers feeding
/// both S-streams pass through stop_gradient.
CaMlmLoss ca_mlm_loss(const Model& model, const PairBatch& batch, Rng* dropout_rng = nullptr);

/// Masked-LM cross-entropy on the H-stream over [BOS x SEP y SEP] rows.
Tensor tlm_loss(const Model& model, const MaskedBatch& batch, Rng* dropout_rng = nullptr);

enum class AttentionStream { HSelf, SSelf, SCross };
enum class PairSide { X, Y };

struct AttentionExport {
    std::vector<std::string> query_tokens;
    std::vector<std::string> key_tokens;
    std::vector<std::vector<double>> weights;  // head-averaged, rows sum to 1

    std::string to_tsv() const;  // header of key tokens, one row per query token
};

AttentionExport export_attention(const Model& model, const Vocabulary& vocab,
                                 const std::vector<Index>& x_tokens,
                                 const std::vector<Index>& y_tokens, int layer_index,
                                 AttentionStream stream, PairSide side = PairSide::X);

AttentionStream parse_attention_stream(const std::string& name);

}  // namespace veco

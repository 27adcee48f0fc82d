#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "veco/checkpoint.hpp"
#include "veco/model.hpp"
#include "veco/optim.hpp"
#include "veco/train.hpp"

namespace veco {

// ---- classification -------------------------------------------------------------

/// Linear head over the BOS-pooled representation: width d_model in Plug-Out
/// mode, 2·d_model ([H:S] concat) in Plug-In mode.
struct ClassifierHead {
    Tensor weight;  // [in_width, num_labels]
    Tensor bias;    // [num_labels]

    static ClassifierHead init(Index in_width, Index num_labels, Rng& rng);
    NamedParams named() const;
};

/// H-stream only; the cross-attention modules never participate.
std::vector<double> plugout_classify(const Model& model, const ClassifierHead& head,
                                     const std::vector<Index>& tokens);

struct PluginResult {
    std::vector<double> x_probs;
    std::vector<double> y_probs;
};

/// Both sides encoded, S-streams cross-attending the paired final H-layer;
/// the 2d head reads [H^L:S^L] pooled at BOS. Throws DataError when the pair
/// is missing.
PluginResult plugin_classify(const Model& model, const ClassifierHead& head,
                             const std::vector<Index>& tokens_x,
                             const std::optional<std::vector<Index>>& tokens_y);

/// Pooled [H:S] logits tensor for one side, on the tape (training path).
Tensor plugin_logits(const Model& model, const ClassifierHead& head,
                     const std::vector<Index>& own, const std::vector<Index>& other);
Tensor plugout_logits(const Model& model, const ClassifierHead& head,
                      const std::vector<Index>& tokens);

// ---- sequence-to-sequence --------------------------------------------------------

/// One decoder layer assembled from a pre-trained checkpoint layer: causal
/// self-attention and FFN from the selected source layer's self-side set
/// (shared storage when tied), encoder attention from its cross module.
struct DecoderLayer {
    int source_layer = 0;
    AttentionParams self_attn;
    Tensor ln1_gain, ln1_bias;
    AttentionParams enc_attn;
    Tensor lnc_gain, lnc_bias;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Tensor ln2_gain, ln2_bias;
};

struct Seq2SeqModel {
    ModelConfig config;
    int decoder_count = 0;
    LayerSelection selection = LayerSelection::Full;
    bool tied = true;

    Model encoder;  // self-side half of the checkpoint; cross modules live in the decoder
    std::vector<DecoderLayer> decoder;

    /// Unique parameter tensors (tied layers counted once).
    NamedParams named_tensors() const;
    Index total_params() const;
    std::string param_report() const;
};

/// Decoder layer j takes source layer j (first), L-n+j (last), or j with
/// n == L (full). Encoder keeps all L layers.
Seq2SeqModel assemble_seq2seq(const Checkpoint& ckpt, int n_decoder_layers,
                              LayerSelection selection, bool tie);

Seq2SeqModel random_seq2seq(const ModelConfig& cfg, int n_decoder_layers, std::uint64_t seed);

Checkpoint checkpoint_from_seq2seq(const Seq2SeqModel& model);
Seq2SeqModel seq2seq_from_checkpoint(const Checkpoint& ckpt);

/// Encoder pass over [BOS src SEP].
Tensor encode_source(const Seq2SeqModel& model, const std::vector<Index>& src);

/// Teacher-forced decoder logits for target prefix [BOS tgt...]; row t scores
/// the token at position t+1 of [tgt..., SEP].
Tensor decoder_logits(const Seq2SeqModel& model, const Tensor& enc_final,
                      const std::vector<Index>& dec_input);

struct TeacherForcedLoss {
    Tensor loss;
    Index tokens = 0;
    Index correct = 0;  // argmax matches
};

TeacherForcedLoss teacher_forced_loss(const Seq2SeqModel& model, const std::vector<Index>& src,
                                      const std::vector<Index>& tgt);

/// Length-normalized beam search; terminates each hypothesis on SEP or
/// max_len. beam_size 1 is exactly greedy decoding.
std::vector<Index> beam_decode(const Seq2SeqModel& model, const std::vector<Index>& src,
                               int beam_size, int max_len);

// ---- BLEU -------------------------------------------------------------------------

struct BleuReport {
    double score = 0.0;            // in [0,1]
    double precisions[4] = {0, 0, 0, 0};
    double brevity_penalty = 1.0;
    Index hyp_len = 0;
    Index ref_len = 0;
    bool smoothed = false;  // some precision hit the epsilon floor

    std::string to_tsv() const;  // single line
};

/// Corpus BLEU with clipped n-gram counts (n <= max_n) and brevity penalty;
/// zero precisions take an epsilon and flag the report as smoothed.
BleuReport bleu(const std::vector<std::vector<Index>>& hypotheses,
                const std::vector<std::vector<Index>>& references, int max_n = 4);

// ---- fine-tuning loops --------------------------------------------------------------

struct MtFinetuneConfig {
    std::int64_t steps = 300;
    int batch_pairs = 8;
    Schedule schedule;
    AdamConfig adam;
    double clip_norm = 1.0;
    std::int64_t eval_every = 50;
    int beam_size = 5;
    int max_decode_len = 32;
    int dev_pairs = 64;  // prefix of the dev corpus used per evaluation
};

struct MtEvalPoint {
    std::int64_t step = 0;
    double train_loss = 0.0;
    double dev_token_accuracy = 0.0;
    double dev_bleu = 0.0;
};

struct MtFinetuneResult {
    std::vector<MtEvalPoint> evals;
    std::vector<double> step_losses;
};

/// Teacher-forced cross-entropy training with periodic dev token-accuracy
/// and BLEU rows for learning-curve comparisons.
MtFinetuneResult finetune_mt(Seq2SeqModel& model, const ParallelCorpus& train,
                             const ParallelCorpus& dev, const MtFinetuneConfig& cfg,
                             std::uint64_t seed, MetricsWriter* metrics = nullptr);

enum class ClsTask { ParityX, ParityXor };

ClsTask parse_cls_task(const std::string& name);

struct ClsExample {
    std::vector<Index> x;
    std::vector<Index> y;  // Plug-In tasks only
    Index label_x = 0;
    Index label_y = 0;
};

/// Labels derived from the pair corpus: parity of the first content token
/// (ParityX), or the XOR of the two sides' parities (ParityXor).
std::vector<ClsExample> make_cls_dataset(const ParallelCorpus& corpus, ClsTask task,
                                         int max_seq_len);

struct ClsFinetuneConfig {
    std::int64_t steps = 300;
    int batch = 16;
    double lr = 1e-3;
    AdamConfig adam;
    double clip_norm = 1.0;
    bool plugin = false;
    std::int64_t num_labels = 2;
};

struct ClsFinetuneResult {
    double final_accuracy = 0.0;
    std::vector<double> step_losses;
    ClassifierHead head;
};

ClsFinetuneResult finetune_classifier(Model& model, const std::vector<ClsExample>& data,
                                      const ClsFinetuneConfig& cfg, std::uint64_t seed,
                                      MetricsWriter* metrics = nullptr);

double classifier_accuracy(const Model& model, const ClassifierHead& head,
                           const std::vector<ClsExample>& data, bool plugin);

}  // namespace veco

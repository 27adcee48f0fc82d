#include "veco/model.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "veco/errors.hpp"

namespace veco {

void ModelConfig::validate() const {
    if (num_layers < 0) throw std::invalid_argument("num_layers must be >= 0");
    if (d_model < 1 || head_count < 1 || d_ff < 1) throw std::invalid_argument("bad model sizes");
    if (d_model % head_count != 0) {
        throw std::invalid_argument("d_model " + std::to_string(d_model) +
                                    " not divisible by head_count " + std::to_string(head_count));
    }
    if (vocab_size <= Vocabulary::FIRST_CONTENT) throw std::invalid_argument("vocab_size too small");
    if (max_seq_len < 2) throw std::invalid_argument("max_seq_len must be >= 2");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must be in [0,1)");
}

namespace {
constexpr double kInitStd = 0.02;
constexpr double kLnEps = 1e-5;

AttentionParams init_attention(int d_model, int heads, Rng& rng) {
    AttentionParams p;
    p.wq = Tensor::randn({d_model, d_model}, kInitStd, rng, true);
    p.wk = Tensor::randn({d_model, d_model}, kInitStd, rng, true);
    p.wv = Tensor::randn({d_model, d_model}, kInitStd, rng, true);
    p.wo = Tensor::randn({d_model, d_model}, kInitStd, rng, true);
    p.head_count = heads;
    return p;
}

Tensor ones_param(Index n) {
    return Tensor::from_values({n}, std::vector<double>(static_cast<size_t>(n), 1.0), true);
}

void name_attention(AttentionParams& p, const std::string& prefix) {
    p.wq.set_name(prefix + ".wq");
    p.wk.set_name(prefix + ".wk");
    p.wv.set_name(prefix + ".wv");
    p.wo.set_name(prefix + ".wo");
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    ModelParams p;
    p.token_embedding = Tensor::randn({cfg.vocab_size, cfg.d_model}, kInitStd, rng, true)
                            .set_name("embed.tokens");
    p.pos_embedding = Tensor::randn({cfg.max_seq_len, cfg.d_model}, kInitStd, rng, true)
                          .set_name("embed.positions");
    for (int l = 0; l < cfg.num_layers; ++l) {
        std::string base = "layers." + std::to_string(l);
        SelfLayerParams s;
        s.self_attn = init_attention(cfg.d_model, cfg.head_count, rng);
        name_attention(s.self_attn, base + ".self_attn");
        s.ffn_w1 = Tensor::randn({cfg.d_model, cfg.d_ff}, kInitStd, rng, true).set_name(base + ".ffn.w1");
        s.ffn_b1 = Tensor::zeros({cfg.d_ff}, true).set_name(base + ".ffn.b1");
        s.ffn_w2 = Tensor::randn({cfg.d_ff, cfg.d_model}, kInitStd, rng, true).set_name(base + ".ffn.w2");
        s.ffn_b2 = Tensor::zeros({cfg.d_model}, true).set_name(base + ".ffn.b2");
        s.ln1_gain = ones_param(cfg.d_model).set_name(base + ".ln1.gain");
        s.ln1_bias = Tensor::zeros({cfg.d_model}, true).set_name(base + ".ln1.bias");
        s.ln2_gain = ones_param(cfg.d_model).set_name(base + ".ln2.gain");
        s.ln2_bias = Tensor::zeros({cfg.d_model}, true).set_name(base + ".ln2.bias");
        p.layers_self.push_back(std::move(s));

        CrossLayerParams c;
        c.cross_attn = init_attention(cfg.d_model, cfg.head_count, rng);
        name_attention(c.cross_attn, base + ".cross_attn");
        c.lnc_gain = ones_param(cfg.d_model).set_name(base + ".ln_cross.gain");
        c.lnc_bias = Tensor::zeros({cfg.d_model}, true).set_name(base + ".ln_cross.bias");
        p.layers_cross.push_back(std::move(c));
    }
    // Head starts as Eᵀ, then trains untied.
    std::vector<double> head(static_cast<size_t>(cfg.d_model) * cfg.vocab_size);
    const auto& ev = p.token_embedding.values();
    for (int v = 0; v < cfg.vocab_size; ++v) {
        for (int j = 0; j < cfg.d_model; ++j) {
            head[static_cast<size_t>(j) * cfg.vocab_size + v] =
                ev[static_cast<size_t>(v) * cfg.d_model + j];
        }
    }
    p.out_proj = Tensor::from_values({cfg.d_model, cfg.vocab_size}, std::move(head), true)
                     .set_name("out.proj");
    p.out_bias = Tensor::zeros({cfg.vocab_size}, true).set_name("out.bias");
    return p;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::self_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back(token_embedding.name(), token_embedding);
    out.emplace_back(pos_embedding.name(), pos_embedding);
    for (const auto& s : layers_self) {
        for (const Tensor& t : {s.self_attn.wq, s.self_attn.wk, s.self_attn.wv, s.self_attn.wo,
                                s.ffn_w1, s.ffn_b1, s.ffn_w2, s.ffn_b2, s.ln1_gain, s.ln1_bias,
                                s.ln2_gain, s.ln2_bias}) {
            out.emplace_back(t.name(), t);
        }
    }
    out.emplace_back(out_proj.name(), out_proj);
    out.emplace_back(out_bias.name(), out_bias);
    return out;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::cross_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& c : layers_cross) {
        for (const Tensor& t :
             {c.cross_attn.wq, c.cross_attn.wk, c.cross_attn.wv, c.cross_attn.wo, c.lnc_gain,
              c.lnc_bias}) {
            out.emplace_back(t.name(), t);
        }
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_tensors() const {
    auto out = self_params();
    auto c = cross_params();
    out.insert(out.end(), c.begin(), c.end());
    return out;
}

Index ModelParams::total_params() const {
    Index n = 0;
    for (const auto& [name, t] : named_tensors()) n += t.numel();
    return n;
}

Model make_model(const ModelConfig& cfg, std::uint64_t seed) {
    return Model{cfg, init_params(cfg, seed)};
}

Tensor embed_sequence(const Model& model, const std::vector<Index>& tokens) {
    Index n = static_cast<Index>(tokens.size());
    if (n > model.config.max_seq_len) {
        throw std::invalid_argument("sequence length " + std::to_string(n) +
                                    " exceeds max_seq_len " +
                                    std::to_string(model.config.max_seq_len));
    }
    if (n == 0) throw std::invalid_argument("empty token sequence");
    std::vector<Index> positions(static_cast<size_t>(n));
    std::iota(positions.begin(), positions.end(), 0);
    return add(gather_rows(model.params.token_embedding, tokens),
               gather_rows(model.params.pos_embedding, positions));
}

namespace {

Tensor maybe_dropout(const Model& model, const Tensor& x, Rng* rng) {
    if (model.config.dropout == 0.0 || rng == nullptr) return x;
    return dropout(x, model.config.dropout, *rng);
}

Tensor ffn_forward(const SelfLayerParams& layer, const Tensor& x) {
    Tensor h = gelu(add_rowwise(matmul(x, layer.ffn_w1), layer.ffn_b1));
    return add_rowwise(matmul(h, layer.ffn_w2), layer.ffn_b2);
}

}  // namespace

StreamTrace encode_h(const Model& model, const std::vector<Index>& tokens, Rng* dropout_rng) {
    StreamTrace trace;
    Tensor x = embed_sequence(model, tokens);
    trace.layers.push_back(x);
    Index len = static_cast<Index>(tokens.size());
    AttentionMask mask = AttentionMask::all_allowed(len, len);
    for (const auto& layer : model.params.layers_self) {
        AttentionResult attn = multi_head_attention(x, x, layer.self_attn, mask);
        Tensor a = layer_norm(add(x, maybe_dropout(model, attn.output, dropout_rng)),
                              layer.ln1_gain, layer.ln1_bias, kLnEps);
        Tensor f = ffn_forward(layer, a);
        x = layer_norm(add(a, maybe_dropout(model, f, dropout_rng)), layer.ln2_gain,
                       layer.ln2_bias, kLnEps);
        trace.layers.push_back(x);
        trace.self_attn.push_back(attn.weights);
    }
    return trace;
}

StreamTrace encode_s(const Model& model, const std::vector<Index>& tokens,
                     const Tensor& paired_hl, Rng* dropout_rng) {
    if (paired_hl.rank() != 2 || paired_hl.dim(1) != model.config.d_model) {
        throw std::invalid_argument("encode_s: paired representation width " +
                                    shape_string(paired_hl.shape()) + " vs d_model " +
                                    std::to_string(model.config.d_model));
    }
    StreamTrace trace;
    Tensor x = embed_sequence(model, tokens);
    trace.layers.push_back(x);
    Index len = static_cast<Index>(tokens.size());
    Index paired_len = paired_hl.dim(0);
    AttentionMask self_mask = AttentionMask::all_allowed(len, len);
    AttentionMask cross_mask = AttentionMask::all_allowed(len, paired_len);
    for (int l = 0; l < model.config.num_layers; ++l) {
        const auto& layer = model.params.layers_self[static_cast<size_t>(l)];
        const auto& cross = model.params.layers_cross[static_cast<size_t>(l)];

        AttentionResult self_attn = multi_head_attention(x, x, layer.self_attn, self_mask);
        Tensor a = layer_norm(add(x, maybe_dropout(model, self_attn.output, dropout_rng)),
                              layer.ln1_gain, layer.ln1_bias, kLnEps);

        // Keys/values always read the paired stream's final layer; the cross
        // module's norm sits on that incoming representation so a zeroed
        // output projection bypasses the sublayer exactly.
        Tensor kv = layer_norm(paired_hl, cross.lnc_gain, cross.lnc_bias, kLnEps);
        AttentionResult cross_attn = multi_head_attention(a, kv, cross.cross_attn, cross_mask);
        Tensor c = add(a, maybe_dropout(model, cross_attn.output, dropout_rng));

        Tensor f = ffn_forward(layer, c);
        x = layer_norm(add(c, maybe_dropout(model, f, dropout_rng)), layer.ln2_gain,
                       layer.ln2_bias, kLnEps);
        trace.layers.push_back(x);
        trace.self_attn.push_back(self_attn.weights);
        trace.cross_attn.push_back(cross_attn.weights);
    }
    return trace;
}

DualStates encode_dual(const Model& model, const std::vector<Index>& own,
                       const std::vector<Index>& paired, Rng* dropout_rng) {
    DualStates states;
    states.h = encode_h(model, own, dropout_rng);
    StreamTrace paired_h = encode_h(model, paired, dropout_rng);
    states.s = encode_s(model, own, stop_gradient(paired_h.final()), dropout_rng);
    return states;
}

Tensor lm_logits(const Model& model, const Tensor& hidden) {
    return add_rowwise(matmul(hidden, model.params.out_proj), model.params.out_bias);
}

namespace {

/// Pooled CE over the masked positions of every row on one side.
Tensor masked_lm_term(const Model& model,
                      const std::vector<std::pair<Tensor, const MaskedRow*>>& finals) {
    std::vector<Tensor> gathered;
    std::vector<Index> targets;
    for (const auto& [final_h, row] : finals) {
        if (row->mask_positions.empty()) continue;
        gathered.push_back(gather_rows(final_h, row->mask_positions));
        targets.insert(targets.end(), row->targets.begin(), row->targets.end());
    }
    if (gathered.empty()) return Tensor::scalar(0.0);
    return cross_entropy(lm_logits(model, concat_rows(gathered)), targets);
}

}  // namespace

CaMlmLoss ca_mlm_loss(const Model& model, const PairBatch& batch, Rng* dropout_rng) {
    if (batch.x.rows.size() != batch.y.rows.size()) {
        throw std::invalid_argument("ca_mlm_loss: pair batch sides differ in row count");
    }
    std::vector<std::pair<Tensor, const MaskedRow*>> hx, hy, sx, sy;
    for (size_t i = 0; i < batch.x.rows.size(); ++i) {
        const MaskedRow& rx = batch.x.rows[i];
        const MaskedRow& ry = batch.y.rows[i];
        StreamTrace tx = encode_h(model, rx.tokens, dropout_rng);
        StreamTrace ty = encode_h(model, ry.tokens, dropout_rng);
        StreamTrace sxt = encode_s(model, rx.tokens, stop_gradient(ty.final()), dropout_rng);
        StreamTrace syt = encode_s(model, ry.tokens, stop_gradient(tx.final()), dropout_rng);
        hx.emplace_back(tx.final(), &rx);
        hy.emplace_back(ty.final(), &ry);
        sx.emplace_back(sxt.final(), &rx);
        sy.emplace_back(syt.final(), &ry);
    }
    CaMlmLoss loss;
    loss.x_self = masked_lm_term(model, hx);
    loss.x_cross = masked_lm_term(model, sx);
    loss.y_self = masked_lm_term(model, hy);
    loss.y_cross = masked_lm_term(model, sy);
    loss.total = add(add(loss.x_self, loss.x_cross), add(loss.y_self, loss.y_cross));
    return loss;
}

Tensor tlm_loss(const Model& model, const MaskedBatch& batch, Rng* dropout_rng) {
    std::vector<std::pair<Tensor, const MaskedRow*>> finals;
    std::vector<StreamTrace> traces;
    traces.reserve(batch.rows.size());
    for (const MaskedRow& row : batch.rows) {
        traces.push_back(encode_h(model, row.tokens, dropout_rng));
        finals.emplace_back(traces.back().final(), &row);
    }
    return masked_lm_term(model, finals);
}

// ---- attention export ------------------------------------------------------------

AttentionStream parse_attention_stream(const std::string& name) {
    if (name == "h-self") return AttentionStream::HSelf;
    if (name == "s-self") return AttentionStream::SSelf;
    if (name == "s-cross") return AttentionStream::SCross;
    throw DataError("unknown attention stream '" + name + "' (h-self|s-self|s-cross)");
}

std::string AttentionExport::to_tsv() const {
    std::ostringstream os;
    for (const auto& k : key_tokens) os << '\t' << k;
    os << '\n';
    for (size_t q = 0; q < query_tokens.size(); ++q) {
        os << query_tokens[q];
        for (double w : weights[q]) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.6f", w);
            os << '\t' << buf;
        }
        os << '\n';
    }
    return os.str();
}

AttentionExport export_attention(const Model& model, const Vocabulary& vocab,
                                 const std::vector<Index>& x_tokens,
                                 const std::vector<Index>& y_tokens, int layer_index,
                                 AttentionStream stream, PairSide side) {
    if (layer_index < 0 || layer_index >= model.config.num_layers) {
        throw std::invalid_argument("layer index " + std::to_string(layer_index) +
                                    " outside [0," + std::to_string(model.config.num_layers) + ")");
    }
    const std::vector<Index>& own = (side == PairSide::X) ? x_tokens : y_tokens;
    const std::vector<Index>& other = (side == PairSide::X) ? y_tokens : x_tokens;

    Tensor weights;
    std::vector<Index> key_ids;
    if (stream == AttentionStream::HSelf) {
        StreamTrace t = encode_h(model, own);
        weights = t.self_attn[static_cast<size_t>(layer_index)];
        key_ids = own;
    } else {
        StreamTrace paired = encode_h(model, other);
        StreamTrace t = encode_s(model, own, stop_gradient(paired.final()));
        if (stream == AttentionStream::SSelf) {
            weights = t.self_attn[static_cast<size_t>(layer_index)];
            key_ids = own;
        } else {
            weights = t.cross_attn[static_cast<size_t>(layer_index)];
            key_ids = other;
        }
    }

    Index heads = weights.dim(0), lq = weights.dim(1), lk = weights.dim(2);
    AttentionExport out;
    for (Index q = 0; q < lq; ++q) out.query_tokens.push_back(vocab.token(own[static_cast<size_t>(q)]));
    for (Index k = 0; k < lk; ++k) out.key_tokens.push_back(vocab.token(key_ids[static_cast<size_t>(k)]));
    out.weights.assign(static_cast<size_t>(lq), std::vector<double>(static_cast<size_t>(lk), 0.0));
    const auto& wv = weights.values();
    for (Index h = 0; h < heads; ++h) {
        for (Index q = 0; q < lq; ++q) {
            for (Index k = 0; k < lk; ++k) {
                out.weights[static_cast<size_t>(q)][static_cast<size_t>(k)] +=
                    wv[static_cast<size_t>((h * lq + q) * lk + k)] / static_cast<double>(heads);
            }
        }
    }
    return out;
}

}  // namespace veco

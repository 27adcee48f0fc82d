#include "veco/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "veco/errors.hpp"

namespace veco {

namespace {
constexpr double kLnEps = 1e-5;
constexpr double kInitStd = 0.02;

std::vector<double> softmax_values(const Tensor& logits_row) {
    const auto& v = logits_row.values();
    double mx = *std::max_element(v.begin(), v.end());
    std::vector<double> probs(v.size());
    double denom = 0.0;
    for (size_t i = 0; i < v.size(); ++i) {
        probs[i] = std::exp(v[i] - mx);
        denom += probs[i];
    }
    for (double& p : probs) p /= denom;
    return probs;
}

}  // namespace

// ---- classification ------------------------------------------------------------

ClassifierHead ClassifierHead::init(Index in_width, Index num_labels, Rng& rng) {
    ClassifierHead head;
    head.weight = Tensor::randn({in_width, num_labels}, kInitStd, rng, true).set_name("head.weight");
    head.bias = Tensor::zeros({num_labels}, true).set_name("head.bias");
    return head;
}

NamedParams ClassifierHead::named() const {
    return {{weight.name(), weight}, {bias.name(), bias}};
}

Tensor plugout_logits(const Model& model, const ClassifierHead& head,
                      const std::vector<Index>& tokens) {
    StreamTrace trace = encode_h(model, tokens);
    Tensor pooled = gather_rows(trace.final(), {0});  // BOS position
    return add_rowwise(matmul(pooled, head.weight), head.bias);
}

std::vector<double> plugout_classify(const Model& model, const ClassifierHead& head,
                                     const std::vector<Index>& tokens) {
    return softmax_values(plugout_logits(model, head, tokens));
}

Tensor plugin_logits(const Model& model, const ClassifierHead& head,
                     const std::vector<Index>& own, const std::vector<Index>& other) {
    DualStates dual = encode_dual(model, own, other);
    Tensor pooled =
        concat_cols({gather_rows(dual.h.final(), {0}), gather_rows(dual.s.final(), {0})});
    return add_rowwise(matmul(pooled, head.weight), head.bias);
}

PluginResult plugin_classify(const Model& model, const ClassifierHead& head,
                             const std::vector<Index>& tokens_x,
                             const std::optional<std::vector<Index>>& tokens_y) {
    if (!tokens_y.has_value()) {
        throw DataError(
            "plugin_classify requires a paired sequence; use Plug-Out mode for single inputs");
    }
    PluginResult result;
    result.x_probs = softmax_values(plugin_logits(model, head, tokens_x, *tokens_y));
    result.y_probs = softmax_values(plugin_logits(model, head, *tokens_y, tokens_x));
    return result;
}

// ---- seq2seq assembly ------------------------------------------------------------

namespace {

int source_layer_for(LayerSelection sel, int n, int total, int j) {
    switch (sel) {
        case LayerSelection::First: return j;
        case LayerSelection::Last: return total - n + j;
        case LayerSelection::Full: return j;
    }
    return j;
}

AttentionParams copy_attention(const AttentionParams& src, const std::string& prefix) {
    AttentionParams p;
    p.head_count = src.head_count;
    p.wq = Tensor::from_values(src.wq.shape(), src.wq.values(), true).set_name(prefix + ".wq");
    p.wk = Tensor::from_values(src.wk.shape(), src.wk.values(), true).set_name(prefix + ".wk");
    p.wv = Tensor::from_values(src.wv.shape(), src.wv.values(), true).set_name(prefix + ".wv");
    p.wo = Tensor::from_values(src.wo.shape(), src.wo.values(), true).set_name(prefix + ".wo");
    return p;
}

Tensor copy_tensor(const Tensor& src, const std::string& name) {
    return Tensor::from_values(src.shape(), src.values(), true).set_name(name);
}

DecoderLayer build_decoder_layer(Model& encoder, int src_layer, int j, bool tie) {
    auto& s = encoder.params.layers_self[static_cast<size_t>(src_layer)];
    auto& c = encoder.params.layers_cross[static_cast<size_t>(src_layer)];
    DecoderLayer d;
    d.source_layer = src_layer;
    std::string base = "decoder." + std::to_string(j);
    if (tie) {
        d.self_attn = s.self_attn;
        d.ln1_gain = s.ln1_gain;
        d.ln1_bias = s.ln1_bias;
        d.ffn_w1 = s.ffn_w1;
        d.ffn_b1 = s.ffn_b1;
        d.ffn_w2 = s.ffn_w2;
        d.ffn_b2 = s.ffn_b2;
        d.ln2_gain = s.ln2_gain;
        d.ln2_bias = s.ln2_bias;
    } else {
        d.self_attn = copy_attention(s.self_attn, base + ".self_attn");
        d.ln1_gain = copy_tensor(s.ln1_gain, base + ".ln1.gain");
        d.ln1_bias = copy_tensor(s.ln1_bias, base + ".ln1.bias");
        d.ffn_w1 = copy_tensor(s.ffn_w1, base + ".ffn.w1");
        d.ffn_b1 = copy_tensor(s.ffn_b1, base + ".ffn.b1");
        d.ffn_w2 = copy_tensor(s.ffn_w2, base + ".ffn.w2");
        d.ffn_b2 = copy_tensor(s.ffn_b2, base + ".ffn.b2");
        d.ln2_gain = copy_tensor(s.ln2_gain, base + ".ln2.gain");
        d.ln2_bias = copy_tensor(s.ln2_bias, base + ".ln2.bias");
    }
    // Encoder-to-decoder attention initialized from (and sharing storage
    // with) the source layer's cross-attention module.
    d.enc_attn = c.cross_attn;
    d.lnc_gain = c.lnc_gain;
    d.lnc_bias = c.lnc_bias;
    return d;
}

}  // namespace

Seq2SeqModel assemble_seq2seq(const Checkpoint& ckpt, int n_decoder_layers,
                              LayerSelection selection, bool tie) {
    if (ckpt.kind != CheckpointKind::Encoder) {
        throw DataError("assemble_seq2seq expects an encoder checkpoint");
    }
    int total = ckpt.config.num_layers;
    if (n_decoder_layers < 1 || n_decoder_layers > total) {
        throw DataError("decoder layer count " + std::to_string(n_decoder_layers) +
                        " outside [1," + std::to_string(total) + "]");
    }
    if (selection == LayerSelection::Full && n_decoder_layers != total) {
        throw DataError("full selection requires decoder layer count == " + std::to_string(total));
    }
    Seq2SeqModel model;
    model.config = ckpt.config;
    model.decoder_count = n_decoder_layers;
    model.selection = selection;
    model.tied = tie;
    model.encoder = make_model(ckpt.config, 0);
    restore_model(model.encoder, ckpt);
    for (int j = 0; j < n_decoder_layers; ++j) {
        int src = source_layer_for(selection, n_decoder_layers, total, j);
        model.decoder.push_back(build_decoder_layer(model.encoder, src, j, tie));
    }
    return model;
}

Seq2SeqModel random_seq2seq(const ModelConfig& cfg, int n_decoder_layers, std::uint64_t seed) {
    cfg.validate();
    if (n_decoder_layers < 1 || n_decoder_layers > cfg.num_layers) {
        throw DataError("decoder layer count outside [1,num_layers]");
    }
    Seq2SeqModel model;
    model.config = cfg;
    model.decoder_count = n_decoder_layers;
    model.selection = LayerSelection::First;  // j -> j, no pretrained meaning
    model.tied = false;
    model.encoder = make_model(cfg, seed);
    // Independent draws for the decoder side.
    Model decoder_source = make_model(cfg, seed ^ 0x517cc1b727220a95ull);
    for (int j = 0; j < n_decoder_layers; ++j) {
        model.decoder.push_back(build_decoder_layer(decoder_source, j, j, /*tie=*/false));
    }
    return model;
}

NamedParams Seq2SeqModel::named_tensors() const {
    NamedParams out;
    std::set<const TensorData*> seen;
    auto push = [&](const std::string& name, const Tensor& t) {
        if (seen.insert(t.node().get()).second) out.emplace_back(name, t);
    };
    for (const auto& [name, t] : encoder.params.self_params()) push(name, t);
    for (const auto& d : decoder) {
        for (const Tensor& t : {d.self_attn.wq, d.self_attn.wk, d.self_attn.wv, d.self_attn.wo,
                                d.ln1_gain, d.ln1_bias, d.enc_attn.wq, d.enc_attn.wk, d.enc_attn.wv,
                                d.enc_attn.wo, d.lnc_gain, d.lnc_bias, d.ffn_w1, d.ffn_b1, d.ffn_w2,
                                d.ffn_b2, d.ln2_gain, d.ln2_bias}) {
            push(t.name(), t);
        }
    }
    return out;
}

Index Seq2SeqModel::total_params() const {
    Index n = 0;
    for (const auto& [name, t] : named_tensors()) n += t.numel();
    return n;
}

std::string Seq2SeqModel::param_report() const {
    std::ostringstream os;
    os << "encoder_layers\t" << config.num_layers << "\n";
    os << "decoder_layers\t" << decoder_count << "\n";
    os << "selection\t" << selection_name(selection) << "\n";
    os << "tied\t" << (tied ? "true" : "false") << "\n";
    os << "sources";
    for (const auto& d : decoder) os << '\t' << d.source_layer;
    os << "\n";
    for (const auto& [name, t] : named_tensors()) {
        os << name << '\t' << shape_string(t.shape()) << '\t' << t.numel() << "\n";
    }
    os << "total_params\t" << total_params() << "\n";
    return os.str();
}

// ---- seq2seq forward ---------------------------------------------------------------

Tensor encode_source(const Seq2SeqModel& model, const std::vector<Index>& src) {
    return encode_h(model.encoder, frame_sequence(src, model.config.max_seq_len)).final();
}

Tensor decoder_logits(const Seq2SeqModel& model, const Tensor& enc_final,
                      const std::vector<Index>& dec_input) {
    Tensor x = embed_sequence(model.encoder, dec_input);
    Index len = static_cast<Index>(dec_input.size());
    AttentionMask causal = causal_mask(len);
    AttentionMask cross = AttentionMask::all_allowed(len, enc_final.dim(0));
    for (const auto& layer : model.decoder) {
        AttentionResult self_attn = multi_head_attention(x, x, layer.self_attn, causal);
        Tensor a = layer_norm(add(x, self_attn.output), layer.ln1_gain, layer.ln1_bias, kLnEps);
        Tensor kv = layer_norm(enc_final, layer.lnc_gain, layer.lnc_bias, kLnEps);
        AttentionResult enc_attn = multi_head_attention(a, kv, layer.enc_attn, cross);
        Tensor c = add(a, enc_attn.output);
        Tensor f = add_rowwise(
            matmul(gelu(add_rowwise(matmul(c, layer.ffn_w1), layer.ffn_b1)), layer.ffn_w2),
            layer.ffn_b2);
        x = layer_norm(add(c, f), layer.ln2_gain, layer.ln2_bias, kLnEps);
    }
    return lm_logits(model.encoder, x);
}

TeacherForcedLoss teacher_forced_loss(const Seq2SeqModel& model, const std::vector<Index>& src,
                                      const std::vector<Index>& tgt) {
    Tensor enc_final = encode_source(model, src);
    std::vector<Index> dec_input;
    dec_input.push_back(Vocabulary::BOS);
    dec_input.insert(dec_input.end(), tgt.begin(), tgt.end());
    std::vector<Index> targets(tgt.begin(), tgt.end());
    targets.push_back(Vocabulary::SEP);

    Tensor logits = decoder_logits(model, enc_final, dec_input);
    TeacherForcedLoss out;
    out.loss = cross_entropy(logits, targets);
    out.tokens = static_cast<Index>(targets.size());
    Index vocab = logits.dim(1);
    for (Index i = 0; i < static_cast<Index>(targets.size()); ++i) {
        const double* row = logits.values().data() + i * vocab;
        Index best = 0;
        for (Index j = 1; j < vocab; ++j) {
            if (row[j] > row[best]) best = j;
        }
        if (best == targets[static_cast<size_t>(i)]) ++out.correct;
    }
    return out;
}

// ---- beam search ----------------------------------------------------------------------

namespace {

struct Hypothesis {
    std::vector<Index> tokens;  // generated, SEP excluded
    double logprob = 0.0;
    Index scored = 0;  // tokens scored, including the terminating SEP
    bool finished = false;

    double normalized() const {
        return logprob / static_cast<double>(std::max<Index>(1, scored));
    }
};

std::vector<double> next_log_probs(const Seq2SeqModel& model, const Tensor& enc_final,
                                   const std::vector<Index>& generated) {
    std::vector<Index> dec_input;
    dec_input.push_back(Vocabulary::BOS);
    dec_input.insert(dec_input.end(), generated.begin(), generated.end());
    Tensor logits = decoder_logits(model, enc_final, dec_input);
    Index vocab = logits.dim(1);
    Index last = logits.dim(0) - 1;
    const double* row = logits.values().data() + last * vocab;
    double mx = row[0];
    for (Index j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (Index j = 0; j < vocab; ++j) denom += std::exp(row[j] - mx);
    double log_denom = mx + std::log(denom);
    std::vector<double> lp(static_cast<size_t>(vocab));
    for (Index j = 0; j < vocab; ++j) lp[static_cast<size_t>(j)] = row[j] - log_denom;
    return lp;
}

/// Hypotheses that hit the length cap are force-terminated by scoring SEP, so
/// every finished hypothesis is normalized over the same kind of sequence.
void force_terminate(const Seq2SeqModel& model, const Tensor& enc_final, Hypothesis& hyp) {
    std::vector<double> lp = next_log_probs(model, enc_final, hyp.tokens);
    hyp.logprob += lp[static_cast<size_t>(Vocabulary::SEP)];
    ++hyp.scored;
    hyp.finished = true;
}

Hypothesis greedy_rollout(const Seq2SeqModel& model, const Tensor& enc_final, int max_len) {
    Hypothesis hyp;
    for (int t = 0; t < max_len; ++t) {
        std::vector<double> lp = next_log_probs(model, enc_final, hyp.tokens);
        Index best = 0;
        for (Index j = 1; j < static_cast<Index>(lp.size()); ++j) {
            if (lp[static_cast<size_t>(j)] > lp[static_cast<size_t>(best)]) best = j;
        }
        hyp.logprob += lp[static_cast<size_t>(best)];
        ++hyp.scored;
        if (best == Vocabulary::SEP) {
            hyp.finished = true;
            return hyp;
        }
        hyp.tokens.push_back(best);
    }
    force_terminate(model, enc_final, hyp);
    return hyp;
}

}  // namespace

std::vector<Index> beam_decode(const Seq2SeqModel& model, const std::vector<Index>& src,
                               int beam_size, int max_len) {
    if (beam_size < 1) throw std::invalid_argument("beam_size must be >= 1");
    if (max_len == 0) return {};
    Tensor enc_final = encode_source(model, src);

    std::vector<Hypothesis> live{Hypothesis{}};
    std::vector<Hypothesis> finished;

    for (int t = 0; t < max_len && !live.empty(); ++t) {
        struct Candidate {
            size_t parent;
            Index token;
            double logprob;
        };
        std::vector<Candidate> candidates;
        for (size_t h = 0; h < live.size(); ++h) {
            std::vector<double> lp = next_log_probs(model, enc_final, live[h].tokens);
            for (Index j = 0; j < static_cast<Index>(lp.size()); ++j) {
                candidates.push_back({h, j, live[h].logprob + lp[static_cast<size_t>(j)]});
            }
        }
        std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
            if (a.logprob != b.logprob) return a.logprob > b.logprob;
            if (a.token != b.token) return a.token < b.token;
            return a.parent < b.parent;
        });
        std::vector<Hypothesis> next;
        for (const Candidate& c : candidates) {
            if (static_cast<int>(next.size()) >= beam_size) break;
            Hypothesis hyp = live[c.parent];
            hyp.logprob = c.logprob;
            ++hyp.scored;
            if (c.token == Vocabulary::SEP) {
                hyp.finished = true;
                finished.push_back(hyp);
                // A finished hypothesis still consumes its beam slot.
                next.push_back(hyp);
            } else {
                hyp.tokens.push_back(c.token);
                next.push_back(hyp);
            }
        }
        live.clear();
        for (Hypothesis& h : next) {
            if (!h.finished) live.push_back(std::move(h));
        }
    }
    for (Hypothesis& h : live) {
        force_terminate(model, enc_final, h);
        finished.push_back(h);
    }
    // The greedy hypothesis always competes, so beam output never scores
    // below greedy under length normalization.
    if (beam_size > 1) finished.push_back(greedy_rollout(model, enc_final, max_len));

    const Hypothesis* best = nullptr;
    for (const Hypothesis& h : finished) {
        if (!best || h.normalized() > best->normalized()) best = &h;
    }
    return best ? best->tokens : std::vector<Index>{};
}

// ---- BLEU -------------------------------------------------------------------------------

namespace {

std::map<std::vector<Index>, Index> ngram_counts(const std::vector<Index>& tokens, int n) {
    std::map<std::vector<Index>, Index> counts;
    if (static_cast<int>(tokens.size()) < n) return counts;
    for (size_t i = 0; i + static_cast<size_t>(n) <= tokens.size(); ++i) {
        std::vector<Index> gram(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                tokens.begin() + static_cast<std::ptrdiff_t>(i + n));
        ++counts[gram];
    }
    return counts;
}

}  // namespace

std::string BleuReport::to_tsv() const {
    std::ostringstream os;
    os << fmt_double(score);
    for (double p : precisions) os << '\t' << fmt_double(p);
    os << '\t' << fmt_double(brevity_penalty) << '\t' << hyp_len << '\t' << ref_len << '\t'
       << (smoothed ? "smoothed" : "exact");
    return os.str();
}

BleuReport bleu(const std::vector<std::vector<Index>>& hypotheses,
                const std::vector<std::vector<Index>>& references, int max_n) {
    if (hypotheses.empty()) throw DataError("bleu: empty corpus");
    if (hypotheses.size() != references.size()) {
        throw DataError("bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                        std::to_string(references.size()) + " references");
    }
    if (max_n < 1 || max_n > 4) throw DataError("bleu: max_n must be in [1,4]");

    constexpr double kEps = 1e-9;
    BleuReport report;
    std::vector<double> matched(static_cast<size_t>(max_n), 0.0);
    std::vector<double> total(static_cast<size_t>(max_n), 0.0);
    for (size_t s = 0; s < hypotheses.size(); ++s) {
        report.hyp_len += static_cast<Index>(hypotheses[s].size());
        report.ref_len += static_cast<Index>(references[s].size());
        for (int n = 1; n <= max_n; ++n) {
            auto hyp_counts = ngram_counts(hypotheses[s], n);
            auto ref_counts = ngram_counts(references[s], n);
            for (const auto& [gram, count] : hyp_counts) {
                total[static_cast<size_t>(n - 1)] += static_cast<double>(count);
                auto it = ref_counts.find(gram);
                if (it != ref_counts.end()) {
                    matched[static_cast<size_t>(n - 1)] +=
                        static_cast<double>(std::min(count, it->second));
                }
            }
        }
    }

    // Orders with no n-grams at all (corpus shorter than n everywhere) drop
    // out of the geometric mean; identity then still scores 1.0.
    double log_precision_sum = 0.0;
    int effective_orders = 0;
    for (int n = 0; n < max_n; ++n) {
        if (total[static_cast<size_t>(n)] == 0.0) {
            report.precisions[n] = 0.0;
            continue;
        }
        double p;
        if (matched[static_cast<size_t>(n)] == 0.0) {
            p = kEps;
            report.smoothed = true;
        } else {
            p = matched[static_cast<size_t>(n)] / total[static_cast<size_t>(n)];
        }
        report.precisions[n] = p;
        log_precision_sum += std::log(p);
        ++effective_orders;
    }
    if (report.hyp_len == 0) {
        report.score = 0.0;
        report.brevity_penalty = 0.0;
        report.smoothed = true;
        return report;
    }
    report.brevity_penalty =
        report.hyp_len >= report.ref_len
            ? 1.0
            : std::exp(1.0 - static_cast<double>(report.ref_len) / static_cast<double>(report.hyp_len));
    report.score = effective_orders == 0
                       ? 0.0
                       : report.brevity_penalty * std::exp(log_precision_sum / effective_orders);
    return report;
}

// ---- fine-tuning loops -----------------------------------------------------------------

MtFinetuneResult finetune_mt(Seq2SeqModel& model, const ParallelCorpus& train,
                             const ParallelCorpus& dev, const MtFinetuneConfig& cfg,
                             std::uint64_t seed, MetricsWriter* metrics) {
    if (train.pairs.empty()) throw DataError("finetune_mt: empty training corpus");
    NamedParams params = model.named_tensors();
    AdamState adam;
    adam.config = cfg.adam;
    Rng rng(seed);

    std::vector<size_t> order(train.pairs.size());
    std::iota(order.begin(), order.end(), 0);
    for (size_t i = order.size() - 1; i > 0; --i) {
        size_t j = static_cast<size_t>(uniform_int(rng, 0, static_cast<Index>(i)));
        std::swap(order[i], order[j]);
    }

    auto evaluate = [&](std::int64_t step, double train_loss) {
        MtEvalPoint point;
        point.step = step;
        point.train_loss = train_loss;
        size_t n_dev = std::min(dev.pairs.size(), static_cast<size_t>(cfg.dev_pairs));
        Index correct = 0, tokens = 0;
        std::vector<std::vector<Index>> hyps, refs;
        for (size_t i = 0; i < n_dev; ++i) {
            TeacherForcedLoss tf =
                teacher_forced_loss(model, dev.pairs[i].src, dev.pairs[i].tgt);
            correct += tf.correct;
            tokens += tf.tokens;
            hyps.push_back(beam_decode(model, dev.pairs[i].src, cfg.beam_size, cfg.max_decode_len));
            refs.push_back(dev.pairs[i].tgt);
        }
        point.dev_token_accuracy =
            tokens > 0 ? static_cast<double>(correct) / static_cast<double>(tokens) : 0.0;
        point.dev_bleu = n_dev > 0 ? bleu(hyps, refs).score : 0.0;
        if (metrics) {
            metrics->row({std::to_string(point.step), fmt_double(point.train_loss),
                          fmt_double(point.dev_token_accuracy), fmt_double(point.dev_bleu)});
        }
        return point;
    };

    MtFinetuneResult result;
    size_t cursor = 0;
    for (std::int64_t step = 1; step <= cfg.steps; ++step) {
        Tape tape;
        Tensor loss;
        Index token_count = 0;
        std::vector<Tensor> weighted;
        for (int b = 0; b < cfg.batch_pairs; ++b) {
            const SentencePair& p = train.pairs[order[cursor]];
            cursor = (cursor + 1) % order.size();
            TeacherForcedLoss tf = teacher_forced_loss(model, p.src, p.tgt);
            weighted.push_back(scale(tf.loss, static_cast<double>(tf.tokens)));
            token_count += tf.tokens;
        }
        loss = weighted[0];
        for (size_t i = 1; i < weighted.size(); ++i) loss = add(loss, weighted[i]);
        loss = scale(loss, 1.0 / static_cast<double>(token_count));
        double loss_value = loss.scalar_value();
        if (!std::isfinite(loss_value)) {
            throw NumericError("non-finite loss at fine-tune step " + std::to_string(step));
        }
        tape.backward(loss);
        clip_grad_norm(params, cfg.clip_norm);
        adam_step(params, adam, lr_at(step, cfg.schedule));
        zero_grads(params);
        result.step_losses.push_back(loss_value);
        if (cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps)) {
            result.evals.push_back(evaluate(step, loss_value));
        }
    }
    return result;
}

// ---- classification fine-tuning ------------------------------------------------------------

ClsTask parse_cls_task(const std::string& name) {
    if (name == "parity-x" || name == "parity") return ClsTask::ParityX;
    if (name == "parity-xor" || name == "xor") return ClsTask::ParityXor;
    throw DataError("unknown classification task '" + name + "' (parity-x|parity-xor)");
}

std::vector<ClsExample> make_cls_dataset(const ParallelCorpus& corpus, ClsTask task,
                                         int max_seq_len) {
    std::vector<ClsExample> data;
    for (const auto& pair : corpus.pairs) {
        ClsExample ex;
        ex.x = frame_sequence(pair.src, max_seq_len);
        ex.y = frame_sequence(pair.tgt, max_seq_len);
        Index px = pair.src.front() % 2;
        Index py = pair.tgt.front() % 2;
        if (task == ClsTask::ParityX) {
            ex.label_x = px;
            ex.label_y = py;
        } else {
            ex.label_x = px ^ py;
            ex.label_y = px ^ py;
        }
        data.push_back(std::move(ex));
    }
    return data;
}

double classifier_accuracy(const Model& model, const ClassifierHead& head,
                           const std::vector<ClsExample>& data, bool plugin) {
    Index correct = 0, total = 0;
    for (const auto& ex : data) {
        if (plugin) {
            PluginResult r = plugin_classify(model, head, ex.x, ex.y);
            Index px = static_cast<Index>(std::max_element(r.x_probs.begin(), r.x_probs.end()) -
                                          r.x_probs.begin());
            Index py = static_cast<Index>(std::max_element(r.y_probs.begin(), r.y_probs.end()) -
                                          r.y_probs.begin());
            correct += (px == ex.label_x) + (py == ex.label_y);
            total += 2;
        } else {
            std::vector<double> probs = plugout_classify(model, head, ex.x);
            Index px = static_cast<Index>(std::max_element(probs.begin(), probs.end()) -
                                          probs.begin());
            correct += (px == ex.label_x);
            total += 1;
        }
    }
    return total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

ClsFinetuneResult finetune_classifier(Model& model, const std::vector<ClsExample>& data,
                                      const ClsFinetuneConfig& cfg, std::uint64_t seed,
                                      MetricsWriter* metrics) {
    if (data.empty()) throw DataError("finetune_classifier: empty dataset");
    Rng rng(seed);
    Index width = cfg.plugin ? 2 * model.config.d_model : model.config.d_model;
    ClsFinetuneResult result;
    result.head = ClassifierHead::init(width, cfg.num_labels, rng);

    NamedParams params = model.params.self_params();
    if (cfg.plugin) {
        auto c = model.params.cross_params();
        params.insert(params.end(), c.begin(), c.end());
    }
    auto head_params = result.head.named();
    params.insert(params.end(), head_params.begin(), head_params.end());

    AdamState adam;
    adam.config = cfg.adam;
    Schedule schedule{cfg.lr, 0, cfg.steps};

    size_t cursor = 0;
    for (std::int64_t step = 1; step <= cfg.steps; ++step) {
        Tape tape;
        std::vector<Tensor> logits;
        std::vector<Index> labels;
        for (int b = 0; b < cfg.batch; ++b) {
            const ClsExample& ex = data[cursor];
            cursor = (cursor + 1) % data.size();
            if (cfg.plugin) {
                logits.push_back(plugin_logits(model, result.head, ex.x, ex.y));
                labels.push_back(ex.label_x);
                logits.push_back(plugin_logits(model, result.head, ex.y, ex.x));
                labels.push_back(ex.label_y);
            } else {
                logits.push_back(plugout_logits(model, result.head, ex.x));
                labels.push_back(ex.label_x);
            }
        }
        Tensor loss = cross_entropy(concat_rows(logits), labels);
        double loss_value = loss.scalar_value();
        if (!std::isfinite(loss_value)) {
            throw NumericError("non-finite loss at classifier step " + std::to_string(step));
        }
        tape.backward(loss);
        clip_grad_norm(params, cfg.clip_norm);
        adam_step(params, adam, lr_at(step, schedule));
        zero_grads(params);
        result.step_losses.push_back(loss_value);
        if (metrics) metrics->row({std::to_string(step), fmt_double(loss_value)});
    }
    result.final_accuracy = classifier_accuracy(model, result.head, data, cfg.plugin);
    return result;
}

// ---- seq2seq checkpoints ----------------------------------------------------------------------

Checkpoint checkpoint_from_seq2seq(const Seq2SeqModel& model) {
    Checkpoint ckpt;
    ckpt.kind = CheckpointKind::Seq2Seq;
    ckpt.config = model.config;
    ckpt.decoder_layers = model.decoder_count;
    ckpt.selection = model.selection;
    ckpt.tied = model.tied;
    for (const auto& [name, t] : model.named_tensors()) ckpt.tensors.push_back(to_blob(name, t));
    return ckpt;
}

Seq2SeqModel seq2seq_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.kind != CheckpointKind::Seq2Seq) {
        throw DataError("expected a seq2seq checkpoint");
    }
    Seq2SeqModel model;
    model.config = ckpt.config;
    model.decoder_count = ckpt.decoder_layers;
    model.selection = ckpt.selection;
    model.tied = ckpt.tied;
    model.encoder = make_model(ckpt.config, 0);
    for (int j = 0; j < model.decoder_count; ++j) {
        int src = source_layer_for(model.selection, model.decoder_count, model.config.num_layers, j);
        model.decoder.push_back(build_decoder_layer(model.encoder, src, j, model.tied));
    }
    // Assign every stored blob into the matching live tensor by name.
    std::map<std::string, Tensor> by_name;
    for (const auto& [name, t] : model.named_tensors()) by_name.emplace(name, t);
    if (by_name.size() != ckpt.tensors.size()) {
        throw DataError("seq2seq checkpoint tensor count mismatch");
    }
    for (const auto& blob : ckpt.tensors) {
        auto it = by_name.find(blob.name);
        if (it == by_name.end()) throw DataError("unexpected tensor '" + blob.name + "'");
        Tensor t = it->second;
        if (t.shape() != blob.shape) {
            throw DataError("tensor '" + blob.name + "' shape mismatch");
        }
        auto& vals = t.values();
        for (size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<double>(blob.values[i]);
    }
    return model;
}

}  // namespace veco

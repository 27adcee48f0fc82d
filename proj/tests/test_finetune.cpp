#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "veco/errors.hpp"
#include "veco/finetune.hpp"

using namespace veco;
namespace fs = std::filesystem;

namespace {

ModelConfig cfg_small(int layers = 2, int d = 32, int v = 32) {
    ModelConfig cfg;
    cfg.num_layers = layers;
    cfg.d_model = d;
    cfg.head_count = 4;
    cfg.d_ff = 2 * d;
    cfg.vocab_size = v;
    cfg.max_seq_len = 24;
    return cfg;
}

ParallelCorpus fixed_len_corpus(PairTransform t, int n, std::uint64_t seed, int len = 5,
                                Index hi = 31) {
    GeneratorSpec spec;
    spec.transform = t;
    spec.shift_k = 3;
    spec.cipher_seed = 11;
    spec.content_lo = 5;
    spec.content_hi = hi;
    spec.num_pairs = n;
    spec.len_lo = len;
    spec.len_hi = len;
    spec.locality = 0.0;  // iid sources keep the task oracles sharp
    return generate_synthetic_pair_corpus(spec, seed);
}

/// Log-probability of generating `tokens` then SEP, length-normalized the
/// same way beam_decode scores hypotheses.
double sequence_score(const Seq2SeqModel& model, const std::vector<Index>& src,
                      const std::vector<Index>& tokens) {
    Tensor enc = encode_source(model, src);
    std::vector<Index> dec_input{Vocabulary::BOS};
    dec_input.insert(dec_input.end(), tokens.begin(), tokens.end());
    Tensor logits = decoder_logits(model, enc, dec_input);
    std::vector<Index> targets(tokens.begin(), tokens.end());
    targets.push_back(Vocabulary::SEP);
    Index vocab = logits.dim(1);
    double total = 0.0;
    for (size_t i = 0; i < targets.size(); ++i) {
        const double* row = logits.values().data() + static_cast<Index>(i) * vocab;
        double mx = row[0];
        for (Index j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (Index j = 0; j < vocab; ++j) denom += std::exp(row[j] - mx);
        total += row[targets[i]] - (mx + std::log(denom));
    }
    return total / static_cast<double>(targets.size());
}

/// Plain greedy loop written against the public decoder API only.
std::vector<Index> reference_greedy(const Seq2SeqModel& model, const std::vector<Index>& src,
                                    int max_len) {
    Tensor enc = encode_source(model, src);
    std::vector<Index> out;
    for (int t = 0; t < max_len; ++t) {
        std::vector<Index> dec_input{Vocabulary::BOS};
        dec_input.insert(dec_input.end(), out.begin(), out.end());
        Tensor logits = decoder_logits(model, enc, dec_input);
        Index vocab = logits.dim(1);
        const double* row = logits.values().data() + (logits.dim(0) - 1) * vocab;
        Index best = 0;
        for (Index j = 1; j < vocab; ++j) {
            if (row[j] > row[best]) best = j;
        }
        if (best == Vocabulary::SEP) break;
        out.push_back(best);
    }
    return out;
}

}  // namespace

TEST_CASE("plugout ignores cross_params entirely, even garbage values") {
    Model model = make_model(cfg_small(), 3);
    Rng rng(1);
    ClassifierHead head = ClassifierHead::init(model.config.d_model, 2, rng);
    std::vector<Index> tokens{1, 9, 22, 2};
    std::vector<double> before = plugout_classify(model, head, tokens);
    for (auto& [name, t] : model.params.cross_params()) {
        Tensor handle = t;
        for (double& v : handle.values()) v = 1e6;
    }
    std::vector<double> after = plugout_classify(model, head, tokens);
    CHECK(before == after);
}

TEST_CASE("zero head weights give a uniform label distribution") {
    Model model = make_model(cfg_small(), 4);
    Rng rng(2);
    ClassifierHead head = ClassifierHead::init(model.config.d_model, 4, rng);
    Tensor w = head.weight;
    std::fill(w.values().begin(), w.values().end(), 0.0);
    std::vector<double> probs = plugout_classify(model, head, {1, 7, 2});
    for (double p : probs) CHECK(p == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("plugin requires a pair and handles a degenerate identical pair") {
    Model model = make_model(cfg_small(), 5);
    Rng rng(3);
    ClassifierHead head = ClassifierHead::init(2 * model.config.d_model, 2, rng);
    std::vector<Index> x{1, 9, 22, 2};
    CHECK_THROWS_WITH_AS(plugin_classify(model, head, x, std::nullopt),
                         doctest::Contains("Plug-Out"), DataError);
    PluginResult r = plugin_classify(model, head, x, x);
    CHECK(r.x_probs.size() == 2);
    CHECK(r.x_probs[0] + r.x_probs[1] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(r.x_probs == r.y_probs);  // identical inputs, identical outputs
}

TEST_CASE("plugin with zeroed cross projections and half-zero head equals plugout") {
    Model model = make_model(cfg_small(), 6);
    for (auto& cross : model.params.layers_cross) {
        Tensor wo = cross.cross_attn.wo;
        std::fill(wo.values().begin(), wo.values().end(), 0.0);
    }
    Rng rng(4);
    Index d = model.config.d_model;
    ClassifierHead wide = ClassifierHead::init(2 * d, 3, rng);
    for (Index i = d; i < 2 * d; ++i) {
        for (Index j = 0; j < 3; ++j) {
            wide.weight.values()[static_cast<size_t>(i * 3 + j)] = 0.0;
        }
    }
    ClassifierHead narrow;
    narrow.weight = slice_cols(transpose(slice_cols(transpose(wide.weight), 0, d)), 0, 3);
    narrow.weight = Tensor::from_values({d, 3},
                                        std::vector<double>(wide.weight.values().begin(),
                                                            wide.weight.values().begin() +
                                                                static_cast<std::ptrdiff_t>(d * 3)));
    narrow.bias = wide.bias;

    std::vector<Index> x{1, 9, 22, 2};
    std::vector<Index> y{1, 30, 7, 14, 2};
    PluginResult plugin = plugin_classify(model, wide, x, y);
    std::vector<double> plugout = plugout_classify(model, narrow, x);
    for (size_t i = 0; i < plugout.size(); ++i) {
        CHECK(plugin.x_probs[i] == doctest::Approx(plugout[i]).epsilon(1e-12));
    }
}

TEST_CASE("plugout parity task trains past 0.95 accuracy") {
    Model model = make_model(cfg_small(1, 32, 32), 7);
    ParallelCorpus corpus = fixed_len_corpus(PairTransform::Reverse, 64, 21);
    auto data = make_cls_dataset(corpus, ClsTask::ParityX, model.config.max_seq_len);
    ClsFinetuneConfig cfg;
    cfg.steps = 300;
    cfg.batch = 16;
    cfg.lr = 2e-3;
    cfg.plugin = false;
    ClsFinetuneResult result = finetune_classifier(model, data, cfg, 5);
    CHECK(result.final_accuracy > 0.95);
}

TEST_CASE("assemble: layer selection index arithmetic at L=24") {
    ModelConfig cfg;
    cfg.num_layers = 24;
    cfg.d_model = 8;
    cfg.head_count = 2;
    cfg.d_ff = 16;
    cfg.vocab_size = 16;
    cfg.max_seq_len = 8;
    Model model = make_model(cfg, 9);
    Checkpoint ckpt = checkpoint_from_model(model);

    Seq2SeqModel last3 = assemble_seq2seq(ckpt, 3, LayerSelection::Last, true);
    REQUIRE(last3.decoder.size() == 3);
    CHECK(last3.decoder[0].source_layer == 21);
    CHECK(last3.decoder[1].source_layer == 22);
    CHECK(last3.decoder[2].source_layer == 23);

    Seq2SeqModel first3 = assemble_seq2seq(ckpt, 3, LayerSelection::First, true);
    CHECK(first3.decoder[0].source_layer == 0);
    CHECK(first3.decoder[1].source_layer == 1);
    CHECK(first3.decoder[2].source_layer == 2);

    CHECK_THROWS_AS(assemble_seq2seq(ckpt, 25, LayerSelection::First, true), DataError);
    CHECK_THROWS_AS(assemble_seq2seq(ckpt, 3, LayerSelection::Full, true), DataError);
}

TEST_CASE("assembly accounting: full tied assembly owns exactly the checkpoint parameters") {
    Model model = make_model(cfg_small(4, 16, 32), 10);
    Checkpoint ckpt = checkpoint_from_model(model);
    Index ckpt_total = 0;
    for (const auto& t : ckpt.tensors) ckpt_total += t.numel();

    Seq2SeqModel full_tied = assemble_seq2seq(ckpt, 4, LayerSelection::Full, true);
    CHECK(full_tied.total_params() == ckpt_total);
    // No duplicate tensor objects.
    std::set<const TensorData*> nodes;
    for (const auto& [name, t] : full_tied.named_tensors()) {
        CHECK(nodes.insert(t.node().get()).second);
    }

    // Untied adds exactly the decoder self-attention + FFN (+ their norm) copies.
    Seq2SeqModel full_untied = assemble_seq2seq(ckpt, 4, LayerSelection::Full, false);
    Index per_layer_copies = 0;
    const auto& layer = model.params.layers_self[0];
    for (const Tensor& t :
         {layer.self_attn.wq, layer.self_attn.wk, layer.self_attn.wv, layer.self_attn.wo,
          layer.ffn_w1, layer.ffn_b1, layer.ffn_w2, layer.ffn_b2, layer.ln1_gain, layer.ln1_bias,
          layer.ln2_gain, layer.ln2_bias}) {
        per_layer_copies += t.numel();
    }
    CHECK(full_untied.total_params() == ckpt_total + 4 * per_layer_copies);

    // Partial selection drops the unselected cross-attention modules.
    Seq2SeqModel last1 = assemble_seq2seq(ckpt, 1, LayerSelection::Last, true);
    Index cross_params = 0;
    const auto& cl = model.params.layers_cross[0];
    for (const Tensor& t : {cl.cross_attn.wq, cl.cross_attn.wk, cl.cross_attn.wv, cl.cross_attn.wo,
                            cl.lnc_gain, cl.lnc_bias}) {
        cross_params += t.numel();
    }
    CHECK(last1.total_params() == ckpt_total - 3 * cross_params);
    CHECK(last1.param_report().find("total_params") != std::string::npos);
}

TEST_CASE("tie semantics: perturbing decoder self-attention moves the encoder only when tied") {
    Model model = make_model(cfg_small(2, 16, 32), 11);
    Checkpoint ckpt = checkpoint_from_model(model);
    std::vector<Index> src{9, 12, 7};

    Seq2SeqModel untied = assemble_seq2seq(ckpt, 2, LayerSelection::Full, false);
    Tensor enc_before = encode_source(untied, src);
    Tensor wq_untied = untied.decoder[0].self_attn.wq;
    for (double& v : wq_untied.values()) v += 0.5;
    Tensor enc_after = encode_source(untied, src);
    CHECK(enc_before.values() == enc_after.values());

    Seq2SeqModel tied = assemble_seq2seq(ckpt, 2, LayerSelection::Full, true);
    Tensor tied_before = encode_source(tied, src);
    Tensor wq_tied = tied.decoder[0].self_attn.wq;
    for (double& v : wq_tied.values()) v += 0.5;
    Tensor tied_after = encode_source(tied, src);
    CHECK(tied_before.values() != tied_after.values());
}

TEST_CASE("decoder causality: future target tokens cannot move earlier logits") {
    Model model = make_model(cfg_small(2, 16, 32), 12);
    Seq2SeqModel s2s = assemble_seq2seq(checkpoint_from_model(model), 2, LayerSelection::Full, true);
    Tensor enc = encode_source(s2s, {7, 9, 11});
    Tensor a = decoder_logits(s2s, enc, {Vocabulary::BOS, 5, 6, 7});
    Tensor b = decoder_logits(s2s, enc, {Vocabulary::BOS, 5, 21, 30});
    Index v = a.dim(1);
    for (Index j = 0; j < v; ++j) {
        CHECK(a.values()[static_cast<size_t>(j)] == b.values()[static_cast<size_t>(j)]);
        CHECK(a.values()[static_cast<size_t>(v + j)] == b.values()[static_cast<size_t>(v + j)]);
    }
}

TEST_CASE("beam_size 1 equals an independent greedy loop on 100 random models") {
    for (int trial = 0; trial < 100; ++trial) {
        ModelConfig cfg;
        cfg.num_layers = 1;
        cfg.d_model = 8;
        cfg.head_count = 2;
        cfg.d_ff = 16;
        cfg.vocab_size = 12;
        cfg.max_seq_len = 12;
        Seq2SeqModel model = random_seq2seq(cfg, 1, 1000 + static_cast<std::uint64_t>(trial));
        Rng rng(500 + static_cast<std::uint64_t>(trial));
        std::vector<Index> src;
        for (int i = 0; i < 4; ++i) src.push_back(uniform_int(rng, 5, 11));
        CHECK(beam_decode(model, src, 1, 6) == reference_greedy(model, src, 6));
    }
}

TEST_CASE("beam search is deterministic and at least as good as greedy") {
    for (int trial = 0; trial < 20; ++trial) {
        ModelConfig cfg;
        cfg.num_layers = 1;
        cfg.d_model = 8;
        cfg.head_count = 2;
        cfg.d_ff = 16;
        cfg.vocab_size = 12;
        cfg.max_seq_len = 12;
        Seq2SeqModel model = random_seq2seq(cfg, 1, 2000 + static_cast<std::uint64_t>(trial));
        std::vector<Index> src{5, 8, 10};
        std::vector<Index> beam = beam_decode(model, src, 5, 6);
        CHECK(beam == beam_decode(model, src, 5, 6));
        std::vector<Index> greedy = beam_decode(model, src, 1, 6);
        CHECK(sequence_score(model, src, beam) >= sequence_score(model, src, greedy) - 1e-12);
    }
}

TEST_CASE("beam decode with max_len 0 returns an empty sequence") {
    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.d_model = 8;
    cfg.head_count = 2;
    cfg.d_ff = 16;
    cfg.vocab_size = 12;
    cfg.max_seq_len = 12;
    Seq2SeqModel model = random_seq2seq(cfg, 1, 5);
    CHECK(beam_decode(model, {5, 6}, 3, 0).empty());
    CHECK_THROWS_AS(beam_decode(model, {5, 6}, 0, 4), std::invalid_argument);
}

TEST_CASE("bleu closed forms") {
    std::vector<std::vector<Index>> refs{{5, 6, 7, 8}, {9, 10, 11}};
    CHECK(bleu(refs, refs).score == doctest::Approx(1.0).epsilon(1e-12));

    std::vector<std::vector<Index>> disjoint{{20, 21, 22, 23}, {24, 25, 26}};
    CHECK(bleu(disjoint, refs).score < 1e-6);
    CHECK(bleu(disjoint, refs).smoothed);

    // One pair: hyp "a b c d" vs ref "a b c d e".
    std::vector<std::vector<Index>> hyp{{5, 6, 7, 8}};
    std::vector<std::vector<Index>> ref{{5, 6, 7, 8, 9}};
    BleuReport report = bleu(hyp, ref);
    CHECK(report.brevity_penalty == doctest::Approx(std::exp(1.0 - 5.0 / 4.0)).epsilon(1e-12));
    for (double p : report.precisions) CHECK(p == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(report.score == doctest::Approx(0.7788).epsilon(1e-4));
    CHECK_FALSE(report.smoothed);
    CHECK(report.to_tsv().find("exact") != std::string::npos);

    CHECK_THROWS_AS(bleu({}, {}), DataError);
    CHECK_THROWS_AS(bleu(hyp, refs), DataError);
}

TEST_CASE("finetune_mt: initial loss near ln V, deterministic, learns the shift task") {
    ModelConfig cfg = cfg_small(1, 32, 32);
    ParallelCorpus train = fixed_len_corpus(PairTransform::ShiftK, 200, 31);
    ParallelCorpus dev = fixed_len_corpus(PairTransform::ShiftK, 24, 32);

    Seq2SeqModel model = random_seq2seq(cfg, 1, 77);
    TeacherForcedLoss initial = teacher_forced_loss(model, train.pairs[0].src, train.pairs[0].tgt);
    CHECK(initial.loss.scalar_value() ==
          doctest::Approx(std::log(32.0)).epsilon(0.05));  // near-uniform at init

    MtFinetuneConfig ft;
    ft.steps = 500;
    ft.batch_pairs = 8;
    ft.schedule = {2e-3, 30, 500};
    ft.eval_every = 250;
    ft.beam_size = 2;
    ft.max_decode_len = 10;
    ft.dev_pairs = 12;

    auto run = [&](std::uint64_t seed) {
        Seq2SeqModel m = random_seq2seq(cfg, 1, 77);
        return finetune_mt(m, train, dev, ft, seed);
    };
    MtFinetuneResult a = run(9);
    MtFinetuneResult b = run(9);
    CHECK(a.step_losses == b.step_losses);
    REQUIRE(!a.evals.empty());
    CHECK(a.evals.back().dev_token_accuracy > 0.8);
    CHECK(a.evals.back().dev_bleu > 0.3);
    CHECK(a.step_losses.back() < 0.5 * a.step_losses.front());
}

TEST_CASE("trained reverse-task model decodes the exact reversal") {
    ModelConfig cfg = cfg_small(1, 32, 32);
    ParallelCorpus train = fixed_len_corpus(PairTransform::Reverse, 240, 41, 4);
    ParallelCorpus dev = fixed_len_corpus(PairTransform::Reverse, 16, 42, 4);
    Seq2SeqModel model = random_seq2seq(cfg, 1, 13);
    MtFinetuneConfig ft;
    ft.steps = 500;
    ft.batch_pairs = 8;
    ft.schedule = {2e-3, 30, 500};
    ft.eval_every = 0;
    MtFinetuneResult result = finetune_mt(model, train, dev, ft, 3);
    CHECK(result.step_losses.back() < 0.1);
    std::vector<Index> decoded = beam_decode(model, {7, 8, 9, 10}, 5, 10);
    CHECK(decoded == std::vector<Index>{10, 9, 8, 7});
}

TEST_CASE("seq2seq checkpoint round trip for assembled and random models") {
    fs::path dir = fs::temp_directory_path() / "veco_s2s_ckpt";
    fs::remove_all(dir);
    fs::create_directories(dir);

    Model model = make_model(cfg_small(2, 16, 32), 14);
    Checkpoint enc_ckpt = checkpoint_from_model(model);
    Seq2SeqModel assembled = assemble_seq2seq(enc_ckpt, 1, LayerSelection::Last, false);
    std::string path = (dir / "s2s.veco").string();
    save_checkpoint(checkpoint_from_seq2seq(assembled), path);
    Seq2SeqModel loaded = seq2seq_from_checkpoint(load_checkpoint(path));
    CHECK(loaded.decoder_count == 1);
    CHECK(loaded.selection == LayerSelection::Last);
    CHECK(loaded.decoder[0].source_layer == 1);
    CHECK_FALSE(loaded.tied);
    std::vector<Index> src{9, 5, 30};
    CHECK(encode_source(loaded, src).values() == encode_source(assembled, src).values());
    CHECK(beam_decode(loaded, src, 3, 8) == beam_decode(assembled, src, 3, 8));

    Seq2SeqModel random_model = random_seq2seq(cfg_small(2, 16, 32), 2, 99);
    std::string rpath = (dir / "rand.veco").string();
    save_checkpoint(checkpoint_from_seq2seq(random_model), rpath);
    Seq2SeqModel rloaded = seq2seq_from_checkpoint(load_checkpoint(rpath));
    CHECK(beam_decode(rloaded, src, 2, 8) == beam_decode(random_model, src, 2, 8));
    fs::remove_all(dir);
}

TEST_CASE("xor paired task separates plug-in from plug-out") {
    // Every x appears twice, once with an even-parity y and once with an
    // odd-parity y, so the XOR label is genuinely invisible to a one-sided
    // classifier: even a memorizing Plug-Out model is capped at 0.5.
    ParallelCorpus left = fixed_len_corpus(PairTransform::Reverse, 24, 51);
    ParallelCorpus right = fixed_len_corpus(PairTransform::Reverse, 96, 52);
    std::vector<std::vector<Index>> even_y, odd_y;
    for (const auto& p : right.pairs) {
        (p.src.front() % 2 == 0 ? even_y : odd_y).push_back(p.src);
    }
    REQUIRE(even_y.size() >= left.pairs.size());
    REQUIRE(odd_y.size() >= left.pairs.size());
    ParallelCorpus zipped;
    for (size_t i = 0; i < left.pairs.size(); ++i) {
        zipped.pairs.push_back(SentencePair{left.pairs[i].src, even_y[i]});
        zipped.pairs.push_back(SentencePair{left.pairs[i].src, odd_y[i]});
    }
    auto data = make_cls_dataset(zipped, ClsTask::ParityXor, 24);

    ClsFinetuneConfig plugin_cfg;
    plugin_cfg.steps = 500;
    plugin_cfg.batch = 16;
    plugin_cfg.lr = 1e-3;
    plugin_cfg.plugin = true;
    Model plugin_model = make_model(cfg_small(2, 32, 32), 61);
    ClsFinetuneResult plugin_result = finetune_classifier(plugin_model, data, plugin_cfg, 8);
    CHECK(plugin_result.final_accuracy > 0.9);

    ClsFinetuneConfig plugout_cfg = plugin_cfg;
    plugout_cfg.plugin = false;
    Model plugout_model = make_model(cfg_small(2, 32, 32), 61);
    ClsFinetuneResult plugout_result = finetune_classifier(plugout_model, data, plugout_cfg, 8);
    CHECK(plugout_result.final_accuracy <= 0.6);
}

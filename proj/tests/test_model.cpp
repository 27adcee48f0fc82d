#include <doctest.h>

#include <cmath>
#include <thread>

#include "support/gradcheck.hpp"
#include "support/naive_model.hpp"
#include "veco/errors.hpp"
#include "veco/model.hpp"

using namespace veco;
using veco::testing::gradcheck_loss;
using veco::testing::max_abs_diff;

namespace {

ModelConfig small_config(int layers = 2, int d = 16, int heads = 2, int v = 32) {
    ModelConfig cfg;
    cfg.num_layers = layers;
    cfg.d_model = d;
    cfg.head_count = heads;
    cfg.d_ff = 2 * d;
    cfg.vocab_size = v;
    cfg.max_seq_len = 16;
    cfg.dropout = 0.0;
    return cfg;
}

void zero_all_but_embeddings(Model& model) {
    for (auto& [name, t] : model.params.named_tensors()) {
        if (name.rfind("embed.", 0) == 0) continue;
        Tensor handle = t;
        std::fill(handle.values().begin(), handle.values().end(), 0.0);
    }
}

PairBatch single_pair_batch(const std::vector<Index>& x_corrupt,
                            const std::vector<Index>& x_positions,
                            const std::vector<Index>& x_targets,
                            const std::vector<Index>& y_corrupt,
                            const std::vector<Index>& y_positions,
                            const std::vector<Index>& y_targets) {
    PairBatch batch;
    MaskedRow rx;
    rx.tokens = x_corrupt;
    rx.mask_positions = x_positions;
    rx.targets = x_targets;
    rx.length = static_cast<Index>(x_corrupt.size());
    MaskedRow ry;
    ry.tokens = y_corrupt;
    ry.mask_positions = y_positions;
    ry.targets = y_targets;
    ry.length = static_cast<Index>(y_corrupt.size());
    batch.x.rows.push_back(rx);
    batch.y.rows.push_back(ry);
    batch.x.repad();
    batch.y.repad();
    return batch;
}

}  // namespace

TEST_CASE("encode_h with zero layers returns embeddings plus positions") {
    Model model = make_model(small_config(0), 3);
    std::vector<Index> tokens{1, 9, 5, 2};
    StreamTrace trace = encode_h(model, tokens);
    REQUIRE(trace.layers.size() == 1);
    Tensor expected = embed_sequence(model, tokens);
    CHECK(trace.final().values() == expected.values());
}

TEST_CASE("encode_h rejects overlength input") {
    Model model = make_model(small_config(), 3);
    std::vector<Index> tokens(32, 5);
    CHECK_THROWS_AS(encode_h(model, tokens), std::invalid_argument);
}

TEST_CASE("perturbing cross_params leaves every H-layer bit-identical") {
    Model model = make_model(small_config(), 21);
    std::vector<Index> tokens{1, 7, 12, 19, 2};
    StreamTrace before = encode_h(model, tokens);
    for (auto& [name, t] : model.params.cross_params()) {
        Tensor handle = t;
        for (double& v : handle.values()) v += 0.37;
    }
    StreamTrace after = encode_h(model, tokens);
    REQUIRE(before.layers.size() == after.layers.size());
    for (size_t l = 0; l < before.layers.size(); ++l) {
        CHECK(before.layers[l].values() == after.layers[l].values());
    }
}

TEST_CASE("encode_h matches the independently written encoder oracle") {
    Model model = make_model(small_config(2, 16, 2, 32), 99);
    std::vector<Index> tokens{1, 6, 23, 9, 2};
    StreamTrace trace = encode_h(model, tokens);
    auto oracle = veco::testing::naive_encode_h(model, tokens);
    CHECK(max_abs_diff(oracle, trace.final()) < 1e-10);
}

TEST_CASE("encode_s matches the naive oracle on a 1-layer 2-token setup") {
    Model model = make_model(small_config(1, 8, 2, 16), 5);
    std::vector<Index> x{7, 9};
    std::vector<Index> y{11, 4};
    StreamTrace hy = encode_h(model, y);
    StreamTrace s = encode_s(model, x, stop_gradient(hy.final()));
    auto hy_oracle = veco::testing::naive_encode_h(model, y);
    auto s_oracle = veco::testing::naive_encode_s(model, x, hy_oracle);
    CHECK(max_abs_diff(s_oracle, s.final()) < 1e-10);
}

TEST_CASE("zeroed cross output projections collapse the S-stream onto the H-stream") {
    Model model = make_model(small_config(), 31);
    for (auto& cross : model.params.layers_cross) {
        Tensor wo = cross.cross_attn.wo;
        std::fill(wo.values().begin(), wo.values().end(), 0.0);
    }
    std::vector<Index> x{1, 8, 14, 2};
    std::vector<Index> y{1, 21, 9, 30, 2};
    StreamTrace h = encode_h(model, x);
    StreamTrace s = encode_s(model, x, stop_gradient(encode_h(model, y).final()));
    REQUIRE(h.layers.size() == s.layers.size());
    for (size_t l = 0; l < h.layers.size(); ++l) {
        CHECK(max_abs_diff(veco::testing::to_mat(h.layers[l]), s.layers[l]) == 0.0);
    }
}

TEST_CASE("encode_s rejects paired width mismatch") {
    Model model = make_model(small_config(), 31);
    Tensor bad = Tensor::zeros({4, 8});
    CHECK_THROWS_AS(encode_s(model, {1, 5, 2}, bad), std::invalid_argument);
}

TEST_CASE("stop-gradient scope: paired-only token embedding gets zero cross-term gradient") {
    Model model = make_model(small_config(), 8);
    // Token 27 appears only in y; token 13 only in x.
    std::vector<Index> x{1, 13, 6, 2};
    std::vector<Index> y{1, 27, 7, 2};
    PairBatch batch = single_pair_batch(x, {1}, {13}, y, {1}, {27});

    {
        Tape tape;
        CaMlmLoss loss = ca_mlm_loss(model, batch);
        tape.backward(loss.x_cross);  // CE of P(x|ŷ,x̂) alone
        const auto& erow = model.params.token_embedding.grad();
        Index d = model.config.d_model;
        for (Index j = 0; j < d; ++j) {
            CHECK(erow[static_cast<size_t>(27 * d + j)] == 0.0);  // only path is stop-gradded
        }
        bool any_nonzero = false;
        for (Index j = 0; j < d; ++j) {
            if (erow[static_cast<size_t>(13 * d + j)] != 0.0) any_nonzero = true;
        }
        CHECK(any_nonzero);  // own-side embedding does flow
        // Cross-module gradients are generally nonzero through the same term.
        double cross_params_norm = 0.0;
        for (const auto& [name, t] : model.params.cross_params()) {
            for (double g : t.grad()) cross_params_norm += std::abs(g);
        }
        CHECK(cross_params_norm > 0.0);
    }
    zero_grads(model.params.named_tensors());
}

TEST_CASE("shared self_params: the S-stream trains the same self-attention objects") {
    Model model = make_model(small_config(), 44);
    std::vector<Index> x{1, 9, 2};
    std::vector<Index> y{1, 18, 2};
    PairBatch batch = single_pair_batch(x, {1}, {9}, y, {1}, {18});
    Tape tape;
    CaMlmLoss loss = ca_mlm_loss(model, batch);
    tape.backward(loss.x_cross);
    // Gradient reached the shared self-attention weights through the S-stream.
    double norm = 0.0;
    for (double g : model.params.layers_self[0].self_attn.wq.grad()) norm += std::abs(g);
    CHECK(norm > 0.0);
    zero_grads(model.params.named_tensors());
}

TEST_CASE("lm_logits closed forms") {
    Model model = make_model(small_config(), 13);
    Index v = model.config.vocab_size;

    Tensor zero_hidden = Tensor::zeros({3, model.config.d_model});
    Tensor logits = lm_logits(model, zero_hidden);
    CHECK(logits.shape() == std::vector<Index>{3, v});
    Tensor probs = softmax(logits, 1);
    for (double p : probs.values()) {
        CHECK(p == doctest::Approx(1.0 / static_cast<double>(v)).epsilon(1e-9));
    }

    // Orthonormal embedding rows with the head at its Eᵀ initialization:
    // hidden = row i makes logit i the argmax.
    Model ortho = make_model(small_config(1, 8, 2, 8), 1);
    Tensor e = ortho.params.token_embedding;
    std::fill(e.values().begin(), e.values().end(), 0.0);
    for (Index i = 0; i < 8; ++i) e.values()[static_cast<size_t>(i * 8 + i)] = 1.0;
    Tensor head = ortho.params.out_proj;
    std::fill(head.values().begin(), head.values().end(), 0.0);
    for (Index i = 0; i < 8; ++i) head.values()[static_cast<size_t>(i * 8 + i)] = 1.0;
    std::fill(ortho.params.out_bias.values().begin(), ortho.params.out_bias.values().end(), 0.0);
    for (Index i = 0; i < 8; ++i) {
        std::vector<double> h(8, 0.0);
        h[static_cast<size_t>(i)] = 1.0;
        Tensor row = Tensor::from_values({1, 8}, h);
        Tensor l = lm_logits(ortho, row);
        Index argmax = 0;
        for (Index j = 1; j < 8; ++j) {
            if (l.values()[static_cast<size_t>(j)] > l.values()[static_cast<size_t>(argmax)]) {
                argmax = j;
            }
        }
        CHECK(argmax == i);
    }

    Tensor wide = Tensor::zeros({7, model.config.d_model});
    CHECK(lm_logits(model, wide).shape() == std::vector<Index>{7, v});
}

TEST_CASE("ca_mlm_loss on a fresh zero-weight model gives ln V per term") {
    Model model = make_model(small_config(), 55);
    zero_all_but_embeddings(model);
    std::vector<Index> x{1, 9, 3, 2};   // one MASK at position 2
    std::vector<Index> y{1, 3, 17, 2};  // one MASK at position 1
    PairBatch batch = single_pair_batch(x, {2}, {11}, y, {1}, {23});
    CaMlmLoss loss = ca_mlm_loss(model, batch);
    double lnv = std::log(static_cast<double>(model.config.vocab_size));
    CHECK(loss.x_self.scalar_value() == doctest::Approx(lnv).epsilon(1e-12));
    CHECK(loss.x_cross.scalar_value() == doctest::Approx(lnv).epsilon(1e-12));
    CHECK(loss.y_self.scalar_value() == doctest::Approx(lnv).epsilon(1e-12));
    CHECK(loss.y_cross.scalar_value() == doctest::Approx(lnv).epsilon(1e-12));
    CHECK(loss.total.scalar_value() == doctest::Approx(4 * lnv).epsilon(1e-12));
}

TEST_CASE("ca_mlm_loss with no masked positions is zero") {
    Model model = make_model(small_config(), 56);
    PairBatch batch = single_pair_batch({1, 9, 2}, {}, {}, {1, 17, 2}, {}, {});
    CaMlmLoss loss = ca_mlm_loss(model, batch);
    CHECK(loss.total.scalar_value() == 0.0);
}

TEST_CASE("ca_mlm_loss total equals independently recomputed terms") {
    Model model = make_model(small_config(), 57);
    std::vector<Index> x{1, 3, 8, 22, 2};
    std::vector<Index> y{1, 30, 3, 2};
    PairBatch batch = single_pair_batch(x, {1, 3}, {14, 9}, y, {2}, {12});
    CaMlmLoss loss = ca_mlm_loss(model, batch);

    // Separate forward passes per term.
    Tensor hx = encode_h(model, x).final();
    Tensor hy = encode_h(model, y).final();
    Tensor sx = encode_s(model, x, stop_gradient(hy)).final();
    Tensor sy = encode_s(model, y, stop_gradient(hx)).final();
    double x_self =
        cross_entropy(lm_logits(model, gather_rows(hx, {1, 3})), {14, 9}).scalar_value();
    double x_cross =
        cross_entropy(lm_logits(model, gather_rows(sx, {1, 3})), {14, 9}).scalar_value();
    double y_self = cross_entropy(lm_logits(model, gather_rows(hy, {2})), {12}).scalar_value();
    double y_cross = cross_entropy(lm_logits(model, gather_rows(sy, {2})), {12}).scalar_value();

    CHECK(loss.x_self.scalar_value() == doctest::Approx(x_self).epsilon(1e-13));
    CHECK(loss.x_cross.scalar_value() == doctest::Approx(x_cross).epsilon(1e-13));
    CHECK(loss.y_self.scalar_value() == doctest::Approx(y_self).epsilon(1e-13));
    CHECK(loss.y_cross.scalar_value() == doctest::Approx(y_cross).epsilon(1e-13));
    CHECK(loss.total.scalar_value() ==
          doctest::Approx(x_self + x_cross + y_self + y_cross).epsilon(1e-12));
}

TEST_CASE("tlm_loss composition, empty-mask convention, cross-boundary attention") {
    Model model = make_model(small_config(), 60);
    Rng rng(4);

    MaskedBatch batch;
    MaskedRow row = make_tlm_row({8, 9, 10}, {20, 21}, 0.0, rng, 32, 16);
    row.mask_positions = {1, 2};
    row.targets = {8, 9};
    row.tokens[1] = Vocabulary::MASK;
    row.tokens[2] = Vocabulary::MASK;
    batch.rows.push_back(row);
    batch.repad();

    Tensor loss = tlm_loss(model, batch);
    Tensor manual = cross_entropy(
        lm_logits(model, gather_rows(encode_h(model, row.tokens).final(), {1, 2})), {8, 9});
    CHECK(loss.scalar_value() == doctest::Approx(manual.scalar_value()).epsilon(1e-13));

    // Changing only the y half moves the loss: attention crosses the separator.
    MaskedBatch other = batch;
    other.rows[0].tokens[5] = 30;
    other.rows[0].tokens[6] = 31;
    Tensor loss2 = tlm_loss(model, other);
    CHECK(loss.scalar_value() != doctest::Approx(loss2.scalar_value()).epsilon(1e-12));

    MaskedBatch unmasked;
    MaskedRow clean = make_tlm_row({8, 9, 10}, {20, 21}, 0.0, rng, 32, 16);
    unmasked.rows.push_back(clean);
    unmasked.repad();
    CHECK(tlm_loss(model, unmasked).scalar_value() == 0.0);
}

TEST_CASE("full four-term objective gradient matches finite differences on a small model") {
    Model model = make_model(small_config(1, 8, 2, 16), 77);
    std::vector<Index> x{1, 9, 3, 2};
    std::vector<Index> y{1, 3, 12, 2};
    PairBatch batch = single_pair_batch(x, {2}, {7}, y, {1}, {10});

    // The objective treats the paired H^L as a constant (that is what
    // stop_gradient means), so the finite-difference oracle freezes those
    // values at the base point instead of recomputing them per perturbation.
    Tensor hx_frozen = stop_gradient(encode_h(model, x).final());
    Tensor hy_frozen = stop_gradient(encode_h(model, y).final());
    auto loss_fn = [&] {
        Tensor hx = encode_h(model, x).final();
        Tensor hy = encode_h(model, y).final();
        Tensor sx = encode_s(model, x, hy_frozen).final();
        Tensor sy = encode_s(model, y, hx_frozen).final();
        Tensor x_self = cross_entropy(lm_logits(model, gather_rows(hx, {2})), {7});
        Tensor x_cross = cross_entropy(lm_logits(model, gather_rows(sx, {2})), {7});
        Tensor y_self = cross_entropy(lm_logits(model, gather_rows(hy, {1})), {10});
        Tensor y_cross = cross_entropy(lm_logits(model, gather_rows(sy, {1})), {10});
        return add(add(x_self, x_cross), add(y_self, y_cross));
    };
    // Base-point agreement between the frozen oracle and the live loss.
    CHECK(loss_fn().scalar_value() ==
          doctest::Approx(ca_mlm_loss(model, batch).total.scalar_value()).epsilon(1e-12));

    auto report = gradcheck_loss(loss_fn, model.params.named_tensors());
    INFO("worst " << report.worst_param << " analytic " << report.analytic << " numeric "
                  << report.numeric);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("attention export: single token, row sums, cross shape, tsv format") {
    Vocabulary vocab = Vocabulary::synthetic(59);
    Model model = make_model(ModelConfig{2, 16, 2, 32, 64, 16, 0.0}, 17);

    auto single = export_attention(model, vocab, {9}, {12}, 0, AttentionStream::HSelf);
    REQUIRE(single.weights.size() == 1);
    REQUIRE(single.weights[0].size() == 1);
    CHECK(single.weights[0][0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(single.to_tsv() == "\tw9\nw9\t1.000000\n");

    std::vector<Index> x{1, 8, 14, 30, 2};
    std::vector<Index> y{1, 21, 9, 2};
    for (auto stream :
         {AttentionStream::HSelf, AttentionStream::SSelf, AttentionStream::SCross}) {
        for (int layer = 0; layer < 2; ++layer) {
            auto exported = export_attention(model, vocab, x, y, layer, stream);
            for (const auto& row : exported.weights) {
                double total = 0.0;
                for (double w : row) total += w;
                CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
            }
            if (stream == AttentionStream::SCross) {
                CHECK(exported.weights.size() == x.size());
                CHECK(exported.weights[0].size() == y.size());
            } else {
                CHECK(exported.weights.size() == x.size());
                CHECK(exported.weights[0].size() == x.size());
            }
        }
    }

    CHECK_THROWS_AS(export_attention(model, vocab, x, y, 2, AttentionStream::HSelf),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_attention_stream("sideways"), DataError);
}

TEST_CASE("concurrent inference on shared read-only params") {
    Model model = make_model(small_config(), 71);
    std::vector<Index> tokens{1, 7, 19, 30, 2};
    std::vector<double> expected = encode_h(model, tokens).final().values();
    std::vector<std::vector<double>> results(8);
    {
        std::vector<std::thread> workers;
        for (size_t t = 0; t < results.size(); ++t) {
            workers.emplace_back([&, t] {
                for (int rep = 0; rep < 5; ++rep) {
                    results[t] = encode_h(model, tokens).final().values();
                }
            });
        }
        for (auto& w : workers) w.join();
    }
    for (const auto& r : results) CHECK(r == expected);
}

TEST_CASE("H0 and S0 both start from embeddings plus positions") {
    Model model = make_model(small_config(), 61);
    std::vector<Index> x{1, 25, 2};
    std::vector<Index> y{1, 5, 9, 2};
    DualStates dual = encode_dual(model, x, y);
    CHECK(dual.h.layers[0].values() == dual.s.layers[0].values());
    CHECK(dual.h.layers[0].values() == embed_sequence(model, x).values());
    REQUIRE(dual.s.cross_attn.size() == dual.s.layers.size() - 1);
    CHECK(dual.h.cross_attn.empty());
}

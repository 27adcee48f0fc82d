// Python bindings over the core operations: synthetic corpora, masking, the
// dual-stream model and its losses, training steps, seq2seq assembly, beam
// decoding, BLEU, and checkpoint io.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>

#include "veco/checkpoint.hpp"
#include "veco/finetune.hpp"
#include "veco/model.hpp"
#include "veco/train.hpp"

namespace py = pybind11;
using namespace veco;

namespace {

std::vector<std::vector<double>> matrix_of(const Tensor& t) {
    std::vector<std::vector<double>> out;
    Index rows = t.dim(0), cols = t.dim(1);
    out.reserve(static_cast<size_t>(rows));
    for (Index i = 0; i < rows; ++i) {
        out.emplace_back(t.values().begin() + i * cols, t.values().begin() + (i + 1) * cols);
    }
    return out;
}

PairBatch pair_batch_of(const std::vector<Index>& x, const std::vector<Index>& y, double rate,
                        Index vocab_size, int max_seq_len, std::uint64_t seed) {
    Rng rng(seed);
    PairBatch batch;
    batch.x.rows.push_back(apply_mask(frame_sequence(x, max_seq_len), rate, rng, vocab_size));
    batch.y.rows.push_back(apply_mask(frame_sequence(y, max_seq_len), rate, rng, vocab_size));
    batch.x.repad();
    batch.y.repad();
    return batch;
}

struct PyModel {
    Model model;

    explicit PyModel(const ModelConfig& cfg, std::uint64_t seed) : model(make_model(cfg, seed)) {}
    explicit PyModel(Model m) : model(std::move(m)) {}

    std::vector<std::string> tensor_names() const {
        std::vector<std::string> names;
        for (const auto& [name, t] : model.params.named_tensors()) names.push_back(name);
        return names;
    }

    Index param_count() const { return model.params.total_params(); }

    std::vector<std::vector<double>> encode(const std::vector<Index>& tokens) const {
        return matrix_of(encode_h(model, tokens).final());
    }

    py::dict loss_terms(const std::vector<Index>& x, const std::vector<Index>& y, double rate,
                        std::uint64_t seed) const {
        PairBatch batch =
            pair_batch_of(x, y, rate, model.config.vocab_size, model.config.max_seq_len, seed);
        CaMlmLoss loss = ca_mlm_loss(model, batch);
        py::dict out;
        out["total"] = loss.total.scalar_value();
        out["x_self"] = loss.x_self.scalar_value();
        out["x_cross"] = loss.x_cross.scalar_value();
        out["y_self"] = loss.y_self.scalar_value();
        out["y_cross"] = loss.y_cross.scalar_value();
        return out;
    }

    /// Adam steps on one fixed masked pair; returns the per-step totals.
    std::vector<double> train_pair(const std::vector<Index>& x, const std::vector<Index>& y,
                                   int steps, double lr, double rate, std::uint64_t seed) {
        PairBatch batch =
            pair_batch_of(x, y, rate, model.config.vocab_size, model.config.max_seq_len, seed);
        AdamState adam;
        NamedParams params = model.params.named_tensors();
        std::vector<double> totals;
        for (int s = 0; s < steps; ++s) {
            Tape tape;
            CaMlmLoss loss = ca_mlm_loss(model, batch);
            totals.push_back(loss.total.scalar_value());
            tape.backward(loss.total);
            clip_grad_norm(params, 1.0);
            adam_step(params, adam, lr);
            zero_grads(params);
        }
        return totals;
    }

    std::vector<std::vector<double>> attention(const std::vector<Index>& x,
                                               const std::vector<Index>& y, int layer,
                                               const std::string& stream,
                                               const std::string& side) const {
        Vocabulary vocab = Vocabulary::synthetic(model.config.vocab_size -
                                                 static_cast<int>(Vocabulary::FIRST_CONTENT));
        AttentionExport exported =
            export_attention(model, vocab, x, y, layer, parse_attention_stream(stream),
                             side == "y" ? PairSide::Y : PairSide::X);
        return exported.weights;
    }

    void save(const std::string& path) const {
        save_checkpoint(checkpoint_from_model(model), path);
    }

    static PyModel load(const std::string& path) {
        Checkpoint ckpt = load_checkpoint(path);
        Model model = make_model(ckpt.config, 0);
        restore_model(model, ckpt);
        return PyModel(std::move(model));
    }
};

struct PySeq2Seq {
    Seq2SeqModel model;

    static PySeq2Seq assemble(const std::string& ckpt_path, int n_layers,
                              const std::string& selection, bool tie) {
        PySeq2Seq out;
        out.model =
            assemble_seq2seq(load_checkpoint(ckpt_path), n_layers, parse_selection(selection), tie);
        return out;
    }

    static PySeq2Seq random_init(const ModelConfig& cfg, int n_layers, std::uint64_t seed) {
        PySeq2Seq out;
        out.model = random_seq2seq(cfg, n_layers, seed);
        return out;
    }

    Index param_count() const { return model.total_params(); }
    std::string report() const { return model.param_report(); }
    std::vector<int> source_layers() const {
        std::vector<int> out;
        for (const auto& d : model.decoder) out.push_back(d.source_layer);
        return out;
    }

    py::dict teacher_loss(const std::vector<Index>& src, const std::vector<Index>& tgt) const {
        TeacherForcedLoss tf = teacher_forced_loss(model, src, tgt);
        py::dict out;
        out["loss"] = tf.loss.scalar_value();
        out["tokens"] = tf.tokens;
        out["correct"] = tf.correct;
        return out;
    }

    std::vector<double> train(const std::vector<std::vector<Index>>& srcs,
                              const std::vector<std::vector<Index>>& tgts, int steps, double lr,
                              std::uint64_t seed) {
        ParallelCorpus corpus;
        for (size_t i = 0; i < srcs.size(); ++i) {
            corpus.pairs.push_back(SentencePair{srcs[i], tgts[i]});
        }
        MtFinetuneConfig cfg;
        cfg.steps = steps;
        cfg.batch_pairs = static_cast<int>(std::min<size_t>(8, srcs.size()));
        cfg.schedule = {lr, steps / 10 + 1, steps};
        cfg.eval_every = 0;
        MtFinetuneResult result = finetune_mt(model, corpus, corpus, cfg, seed);
        return result.step_losses;
    }

    std::vector<Index> decode(const std::vector<Index>& src, int beam, int max_len) const {
        return beam_decode(model, src, beam, max_len);
    }

    void save(const std::string& path) const {
        save_checkpoint(checkpoint_from_seq2seq(model), path);
    }

    static PySeq2Seq load(const std::string& path) {
        PySeq2Seq out;
        out.model = seq2seq_from_checkpoint(load_checkpoint(path));
        return out;
    }
};

}  // namespace

PYBIND11_MODULE(_veco, m) {
    m.doc() = "Cross-attention masked language modeling laboratory";

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init([](int num_layers, int d_model, int head_count, int d_ff, int vocab_size,
                         int max_seq_len, double dropout) {
                 ModelConfig cfg{num_layers, d_model, head_count, d_ff, vocab_size, max_seq_len,
                                 dropout};
                 cfg.validate();
                 return cfg;
             }),
             py::arg("num_layers") = 4, py::arg("d_model") = 64, py::arg("head_count") = 4,
             py::arg("d_ff") = 256, py::arg("vocab_size") = 64, py::arg("max_seq_len") = 64,
             py::arg("dropout") = 0.0)
        .def_readwrite("num_layers", &ModelConfig::num_layers)
        .def_readwrite("d_model", &ModelConfig::d_model)
        .def_readwrite("head_count", &ModelConfig::head_count)
        .def_readwrite("d_ff", &ModelConfig::d_ff)
        .def_readwrite("vocab_size", &ModelConfig::vocab_size)
        .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
        .def_readwrite("dropout", &ModelConfig::dropout);

    py::class_<PyModel>(m, "Model")
        .def(py::init<const ModelConfig&, std::uint64_t>(), py::arg("config"), py::arg("seed") = 1)
        .def("tensor_names", &PyModel::tensor_names)
        .def("param_count", &PyModel::param_count)
        .def("encode", &PyModel::encode, py::arg("tokens"))
        .def("loss_terms", &PyModel::loss_terms, py::arg("x"), py::arg("y"),
             py::arg("mask_rate") = 0.25, py::arg("seed") = 1)
        .def("train_pair", &PyModel::train_pair, py::arg("x"), py::arg("y"), py::arg("steps"),
             py::arg("lr") = 3e-3, py::arg("mask_rate") = 0.25, py::arg("seed") = 1)
        .def("attention", &PyModel::attention, py::arg("x"), py::arg("y"), py::arg("layer") = 0,
             py::arg("stream") = "s-cross", py::arg("side") = "x")
        .def("save", &PyModel::save, py::arg("path"))
        .def_static("load", &PyModel::load, py::arg("path"));

    py::class_<PySeq2Seq>(m, "Seq2Seq")
        .def_static("assemble", &PySeq2Seq::assemble, py::arg("checkpoint"), py::arg("layers"),
                    py::arg("selection") = "full", py::arg("tie") = true)
        .def_static("random_init", &PySeq2Seq::random_init, py::arg("config"), py::arg("layers"),
                    py::arg("seed") = 1)
        .def_static("load", &PySeq2Seq::load, py::arg("path"))
        .def("param_count", &PySeq2Seq::param_count)
        .def("report", &PySeq2Seq::report)
        .def("source_layers", &PySeq2Seq::source_layers)
        .def("teacher_loss", &PySeq2Seq::teacher_loss, py::arg("src"), py::arg("tgt"))
        .def("train", &PySeq2Seq::train, py::arg("sources"), py::arg("targets"), py::arg("steps"),
             py::arg("lr") = 2e-3, py::arg("seed") = 1)
        .def("decode", &PySeq2Seq::decode, py::arg("src"), py::arg("beam") = 5,
             py::arg("max_len") = 32)
        .def("save", &PySeq2Seq::save, py::arg("path"));

    m.def(
        "synth_pairs",
        [](const std::string& transform, int num_pairs, std::uint64_t seed, Index content_lo,
           Index content_hi, int len_lo, int len_hi, int shift_k, std::uint64_t cipher_seed,
           double locality) {
            GeneratorSpec spec;
            spec.transform = parse_transform(transform);
            spec.num_pairs = num_pairs;
            spec.content_lo = content_lo;
            spec.content_hi = content_hi;
            spec.len_lo = len_lo;
            spec.len_hi = len_hi;
            spec.shift_k = shift_k;
            spec.cipher_seed = cipher_seed;
            spec.locality = locality;
            ParallelCorpus corpus = generate_synthetic_pair_corpus(spec, seed);
            std::vector<std::pair<std::vector<Index>, std::vector<Index>>> out;
            for (auto& p : corpus.pairs) out.emplace_back(std::move(p.src), std::move(p.tgt));
            return out;
        },
        py::arg("transform"), py::arg("num_pairs"), py::arg("seed") = 1, py::arg("content_lo") = 5,
        py::arg("content_hi") = 63, py::arg("len_lo") = 4, py::arg("len_hi") = 8,
        py::arg("shift_k") = 1, py::arg("cipher_seed") = 1, py::arg("locality") = 0.8);

    m.def(
        "mask_row",
        [](const std::vector<Index>& tokens, double rate, std::uint64_t seed, Index vocab_size,
           bool use_80_10_10) {
            Rng rng(seed);
            MaskedRow row = apply_mask(tokens, rate, rng, vocab_size, use_80_10_10);
            py::dict out;
            out["tokens"] = row.tokens;
            out["positions"] = row.mask_positions;
            out["targets"] = row.targets;
            return out;
        },
        py::arg("tokens"), py::arg("rate"), py::arg("seed") = 1, py::arg("vocab_size") = 64,
        py::arg("use_80_10_10") = true);

    m.def(
        "smoothed_distribution",
        [](const std::vector<double>& counts, double alpha) {
            return smoothed_language_distribution(counts, alpha);
        },
        py::arg("counts"), py::arg("alpha") = 0.5);

    m.def(
        "lr_at",
        [](std::int64_t step, double peak, std::int64_t warmup, std::int64_t total) {
            return lr_at(step, Schedule{peak, warmup, total});
        },
        py::arg("step"), py::arg("peak"), py::arg("warmup"), py::arg("total"));

    m.def(
        "bleu",
        [](const std::vector<std::vector<Index>>& hyps, const std::vector<std::vector<Index>>& refs,
           int max_n) {
            BleuReport report = bleu(hyps, refs, max_n);
            py::dict out;
            out["score"] = report.score;
            out["precisions"] = std::vector<double>(report.precisions, report.precisions + 4);
            out["brevity_penalty"] = report.brevity_penalty;
            out["hyp_len"] = report.hyp_len;
            out["ref_len"] = report.ref_len;
            out["smoothed"] = report.smoothed;
            return out;
        },
        py::arg("hypotheses"), py::arg("references"), py::arg("max_n") = 4);

    m.def("average_checkpoints", [](const std::vector<std::string>& paths, const std::string& out) {
        save_checkpoint(average_checkpoints(paths), out);
    });

    m.attr("PAD") = static_cast<int>(Vocabulary::PAD);
    m.attr("BOS") = static_cast<int>(Vocabulary::BOS);
    m.attr("SEP") = static_cast<int>(Vocabulary::SEP);
    m.attr("MASK") = static_cast<int>(Vocabulary::MASK);
    m.attr("UNK") = static_cast<int>(Vocabulary::UNK);
    m.attr("__version__") = "0.1.0";
}

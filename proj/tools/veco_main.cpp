// Command-line surface tying the pipeline together: synthetic data, two-phase
// pre-training, plug-in/plug-out classification, translation fine-tuning,
// decoding, BLEU, attention export, and checkpoint tooling.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "veco/checkpoint.hpp"
#include "veco/errors.hpp"
#include "veco/exp_config.hpp"
#include "veco/finetune.hpp"
#include "veco/model.hpp"
#include "veco/train.hpp"

namespace fs = std::filesystem;
using namespace veco;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

/// Tracks files created by a command so a failure removes partial outputs.
class OutputGuard {
public:
    std::string track(const fs::path& path) {
        files_.push_back(path);
        return path.string();
    }
    void commit() { committed_ = true; }
    ~OutputGuard() {
        if (committed_) return;
        for (const auto& f : files_) {
            std::error_code ec;
            fs::remove(f, ec);
        }
    }

private:
    std::vector<fs::path> files_;
    bool committed_ = false;
};

fs::path ensure_out_dir(const std::string& out) {
    fs::path dir(out);
    fs::create_directories(dir);
    return dir;
}

ExperimentConfig load_config(const std::string& path) {
    return path.empty() ? ExperimentConfig::defaults() : ExperimentConfig::from_file(path);
}

Vocabulary load_vocab_from(const std::string& data_dir) {
    return Vocabulary::load((fs::path(data_dir) / "vocab.txt").string());
}

struct LoadedData {
    Vocabulary vocab;
    std::vector<std::pair<std::string, MonoCorpus>> mono;
    std::vector<std::pair<std::string, ParallelCorpus>> pairs;
};

LoadedData load_data_dir(const ExperimentConfig& cfg, const std::string& data_dir) {
    LoadedData data{load_vocab_from(data_dir), {}, {}};
    fs::path dir(data_dir);
    for (const auto& entry : cfg.mono_specs()) {
        data.mono.emplace_back(entry.name,
                               load_mono_corpus(data.vocab, (dir / ("mono." + entry.name + ".txt")).string()));
    }
    for (const auto& entry : cfg.pair_specs()) {
        data.pairs.emplace_back(
            entry.name,
            load_parallel_corpus(data.vocab, (dir / ("pair." + entry.name + ".src.txt")).string(),
                                 (dir / ("pair." + entry.name + ".tgt.txt")).string()));
    }
    return data;
}

std::uint64_t resolve_seed(const CLI::Option* opt, std::uint64_t value) {
    if (opt->count() > 0) return value;
    if (const char* env = std::getenv("VECO_SEED")) {
        return static_cast<std::uint64_t>(std::stoull(env));
    }
    return value;
}

void split_train_dev(const ParallelCorpus& corpus, double dev_fraction, ParallelCorpus& train,
                     ParallelCorpus& dev) {
    size_t n_dev = std::max<size_t>(1, static_cast<size_t>(
                                           static_cast<double>(corpus.pairs.size()) * dev_fraction));
    if (n_dev >= corpus.pairs.size()) throw DataError("corpus too small for a dev split");
    train.pairs.assign(corpus.pairs.begin(), corpus.pairs.end() - static_cast<std::ptrdiff_t>(n_dev));
    dev.pairs.assign(corpus.pairs.end() - static_cast<std::ptrdiff_t>(n_dev), corpus.pairs.end());
}

std::vector<std::vector<Index>> read_token_lines(const Vocabulary& vocab, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read " + path);
    std::vector<std::vector<Index>> lines;
    std::string line;
    while (std::getline(is, line)) lines.push_back(vocab.tokenize(line));
    if (lines.empty()) throw DataError("file " + path + " is empty");
    return lines;
}

// ---- commands ----------------------------------------------------------------

int cmd_synth_data(const std::string& config_path, const std::string& out, std::uint64_t seed) {
    ExperimentConfig cfg = load_config(config_path);
    fs::path dir = ensure_out_dir(out);
    OutputGuard guard;

    Vocabulary vocab = Vocabulary::synthetic(cfg.content_vocab());
    vocab.save(guard.track(dir / "vocab.txt"));
    std::uint64_t sub_seed = seed;
    for (const auto& entry : cfg.mono_specs()) {
        MonoCorpus corpus = generate_synthetic_mono_corpus(entry.spec, ++sub_seed);
        save_mono_corpus(corpus, vocab, guard.track(dir / ("mono." + entry.name + ".txt")));
    }
    for (const auto& entry : cfg.pair_specs()) {
        ParallelCorpus corpus = generate_synthetic_pair_corpus(entry.spec, ++sub_seed);
        save_parallel_corpus(corpus, vocab, guard.track(dir / ("pair." + entry.name + ".src.txt")),
                             guard.track(dir / ("pair." + entry.name + ".tgt.txt")));
    }
    cfg.write_resolved(guard.track(dir / "resolved_config.json"));
    guard.commit();
    return kExitOk;
}

int cmd_pretrain(ExperimentConfig cfg, const std::string& data_dir, const std::string& out,
                 std::uint64_t seed, const std::string& resume_path) {
    fs::path dir = ensure_out_dir(out);
    OutputGuard guard;

    LoadedData data = load_data_dir(cfg, data_dir);
    ModelConfig model_cfg = cfg.model_config();
    if (data.vocab.size() != model_cfg.vocab_size) {
        throw DataError("vocab file has " + std::to_string(data.vocab.size()) +
                        " entries but model.vocab_size is " +
                        std::to_string(model_cfg.vocab_size));
    }

    BatchIterator iterator(cfg.iterator_config(), seed);
    for (auto& [name, corpus] : data.mono) iterator.add_mono(name, std::move(corpus));
    for (auto& [name, corpus] : data.pairs) iterator.add_bilingual(name, std::move(corpus));

    Model model = make_model(model_cfg, seed);
    Pretrainer trainer(model, iterator, cfg.pretrain_config(), seed);
    if (!resume_path.empty()) trainer.resume_from(load_checkpoint(resume_path));

    MetricsWriter metrics(guard.track(dir / "metrics.tsv"), metrics_header());
    std::string ckpt_path = guard.track(dir / "checkpoint.veco");
    trainer.run(&metrics, ckpt_path);
    cfg.write_resolved(guard.track(dir / "resolved_config.json"));
    guard.commit();
    return kExitOk;
}

int cmd_finetune_cls(ExperimentConfig cfg, const std::string& data_dir, const std::string& out,
                     const std::string& ckpt_path, const std::string& task_name,
                     std::uint64_t seed) {
    fs::path dir = ensure_out_dir(out);
    OutputGuard guard;

    LoadedData data = load_data_dir(cfg, data_dir);
    if (data.pairs.empty()) throw DataError("no pair corpus in data directory");
    ModelConfig model_cfg = cfg.model_config();
    Model model = make_model(model_cfg, seed);
    if (!ckpt_path.empty()) restore_model(model, load_checkpoint(ckpt_path));

    ClsTask task = parse_cls_task(task_name);
    auto dataset = make_cls_dataset(data.pairs[0].second, task, model_cfg.max_seq_len);
    ClsFinetuneConfig ft_cfg = cfg.cls_config();
    if (task == ClsTask::ParityXor && !ft_cfg.plugin) {
        std::cerr << "note: parity-xor labels depend on both sides; plugout mode is the"
                     " capped baseline\n";
    }

    MetricsWriter metrics(guard.track(dir / "metrics.tsv"), {"step", "loss"});
    ClsFinetuneResult result = finetune_classifier(model, dataset, ft_cfg, seed, &metrics);

    std::ofstream acc(guard.track(dir / "accuracy.tsv"));
    acc << "mode\ttask\taccuracy\n"
        << (ft_cfg.plugin ? "plugin" : "plugout") << '\t' << task_name << '\t'
        << fmt_double(result.final_accuracy) << '\n';
    save_checkpoint(checkpoint_from_model(model), guard.track(dir / "encoder.veco"));
    cfg.write_resolved(guard.track(dir / "resolved_config.json"));
    guard.commit();
    std::cout << "accuracy\t" << fmt_double(result.final_accuracy) << "\n";
    return kExitOk;
}

int cmd_finetune_mt(ExperimentConfig cfg, const std::string& data_dir, const std::string& out,
                    const std::string& ckpt_path, bool random_init, std::uint64_t seed) {
    fs::path dir = ensure_out_dir(out);
    OutputGuard guard;

    LoadedData data = load_data_dir(cfg, data_dir);
    if (data.pairs.empty()) throw DataError("no pair corpus in data directory");
    const nlohmann::json& mt_tree = cfg.tree.at("finetune").at("mt");
    MtFinetuneConfig ft_cfg = cfg.mt_config();

    Seq2SeqModel model;
    if (random_init) {
        ModelConfig model_cfg = cfg.model_config();
        int n_dec = mt_tree.at("decoder_layers").get<int>();
        if (n_dec <= 0) n_dec = model_cfg.num_layers;
        model = random_seq2seq(model_cfg, n_dec, seed);
    } else {
        if (ckpt_path.empty()) throw DataError("finetune-mt needs --ckpt or --random-init");
        Checkpoint ckpt = load_checkpoint(ckpt_path);
        int n_dec = mt_tree.at("decoder_layers").get<int>();
        if (n_dec <= 0) n_dec = ckpt.config.num_layers;
        model = assemble_seq2seq(ckpt, n_dec, parse_selection(mt_tree.at("selection").get<std::string>()),
                                 mt_tree.at("tie").get<bool>());
    }

    std::ofstream report(guard.track(dir / "param_report.txt"));
    report << model.param_report();
    report.close();

    ParallelCorpus train, dev;
    split_train_dev(data.pairs[0].second, mt_tree.at("dev_fraction").get<double>(), train, dev);

    MetricsWriter metrics(guard.track(dir / "metrics.tsv"),
                          {"step", "train_loss", "dev_token_acc", "dev_bleu"});
    finetune_mt(model, train, dev, ft_cfg, seed, &metrics);
    save_checkpoint(checkpoint_from_seq2seq(model), guard.track(dir / "mt_model.veco"));
    cfg.write_resolved(guard.track(dir / "resolved_config.json"));
    guard.commit();
    return kExitOk;
}

int cmd_translate(ExperimentConfig cfg, const std::string& ckpt_path, const std::string& vocab_path,
                  const std::string& input_path, const std::string& out, int beam, int max_len) {
    fs::path dir = ensure_out_dir(out);
    OutputGuard guard;

    Vocabulary vocab = Vocabulary::load(vocab_path);
    Seq2SeqModel model = seq2seq_from_checkpoint(load_checkpoint(ckpt_path));
    auto sources = read_token_lines(vocab, input_path);

    std::ofstream os(guard.track(dir / "hypotheses.txt"));
    for (const auto& src : sources) {
        std::vector<Index> hyp = beam_decode(model, src, beam, max_len);
        os << vocab.detokenize(hyp) << '\n';
    }
    os.close();
    cfg.write_resolved(guard.track(dir / "resolved_config.json"));
    guard.commit();
    return kExitOk;
}

int cmd_eval_bleu(const std::string& hyp_path, const std::string& ref_path,
                  const std::string& vocab_path, const std::string& out) {
    Vocabulary vocab = Vocabulary::load(vocab_path);
    auto hyps = read_token_lines(vocab, hyp_path);
    auto refs = read_token_lines(vocab, ref_path);
    BleuReport report = bleu(hyps, refs);
    std::string line = report.to_tsv();
    if (!out.empty()) {
        fs::path dir = ensure_out_dir(out);
        OutputGuard guard;
        std::ofstream os(guard.track(dir / "bleu.tsv"));
        os << "score\tp1\tp2\tp3\tp4\tbp\thyp_len\tref_len\tsmoothing\n" << line << '\n';
        os.close();
        guard.commit();
    }
    std::cout << line << '\n';
    return kExitOk;
}

int cmd_export_attn(const std::string& ckpt_path, const std::string& vocab_path,
                    const std::string& x_text, const std::string& y_text, int layer,
                    const std::string& stream_name, const std::string& side_name,
                    const std::string& out) {
    fs::path dir = ensure_out_dir(out);
    OutputGuard guard;

    Vocabulary vocab = Vocabulary::load(vocab_path);
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    if (ckpt.kind != CheckpointKind::Encoder) throw DataError("export-attn expects an encoder checkpoint");
    Model model = make_model(ckpt.config, 0);
    restore_model(model, ckpt);

    std::vector<Index> x = frame_sequence(vocab.tokenize(x_text), ckpt.config.max_seq_len);
    std::vector<Index> y = frame_sequence(vocab.tokenize(y_text), ckpt.config.max_seq_len);
    PairSide side = side_name == "y" ? PairSide::Y : PairSide::X;
    AttentionExport exported =
        export_attention(model, vocab, x, y, layer, parse_attention_stream(stream_name), side);
    std::ofstream os(guard.track(dir / "attention.tsv"));
    os << exported.to_tsv();
    os.close();
    guard.commit();
    return kExitOk;
}

int cmd_inspect_ckpt(const std::string& ckpt_path) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    std::cout << "kind\t" << (ckpt.kind == CheckpointKind::Encoder ? "encoder" : "seq2seq") << '\n';
    std::cout << "step\t" << ckpt.step << '\n';
    std::cout << "config\tlayers=" << ckpt.config.num_layers << " d_model=" << ckpt.config.d_model
              << " heads=" << ckpt.config.head_count << " d_ff=" << ckpt.config.d_ff
              << " vocab=" << ckpt.config.vocab_size << " max_seq=" << ckpt.config.max_seq_len
              << '\n';
    if (ckpt.kind == CheckpointKind::Seq2Seq) {
        std::cout << "decoder\tlayers=" << ckpt.decoder_layers << " selection="
                  << selection_name(ckpt.selection) << " tied=" << (ckpt.tied ? "true" : "false")
                  << '\n';
    }
    Index total = 0;
    for (const auto& t : ckpt.tensors) {
        std::uint32_t hash = crc32(reinterpret_cast<const std::uint8_t*>(t.values.data()),
                                   t.values.size() * sizeof(float));
        char hex[16];
        std::snprintf(hex, sizeof(hex), "%08x", hash);
        std::cout << t.name << '\t' << shape_string(t.shape) << '\t' << t.numel() << '\t' << hex
                  << '\n';
        total += t.numel();
    }
    std::cout << "total_params\t" << total << '\n';
    std::cout << "optimizer_tensors\t" << ckpt.optimizer.size() << '\n';
    return kExitOk;
}

int cmd_avg_ckpt(const std::vector<std::string>& inputs, const std::string& out) {
    fs::path dir = ensure_out_dir(out);
    OutputGuard guard;
    Checkpoint avg = average_checkpoints(inputs);
    save_checkpoint(avg, guard.track(dir / "averaged.veco"));
    guard.commit();
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-attention masked language modeling laboratory"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_dir, ckpt_path, resume_path;
    std::string hyp_path, ref_path, vocab_path, input_path;
    std::string x_text, y_text, stream_name = "s-cross", side_name = "x", task_name;
    std::string objective, mode;
    std::vector<std::string> avg_inputs;
    std::uint64_t seed = 1;
    std::int64_t steps_override = -1, phase1_override = -1, phase2_override = -1;
    int layer = 0, beam = -1, max_len = -1, decoder_layers_flag = -2;
    std::string selection_flag;
    bool random_init = false, tie_flag = false, no_tie_flag = false;

    auto* synth = app.add_subcommand("synth-data", "Generate synthetic corpora and a vocabulary");
    synth->add_option("--config", config_path);
    synth->add_option("--out", out_dir)->required();
    auto* synth_seed = synth->add_option("--seed", seed);

    auto* pretrain = app.add_subcommand("pretrain", "Two-phase pre-training");
    pretrain->add_option("--config", config_path);
    pretrain->add_option("--data", data_dir)->required();
    pretrain->add_option("--out", out_dir)->required();
    pretrain->add_option("--resume", resume_path);
    pretrain->add_option("--steps", steps_override);
    pretrain->add_option("--phase1-steps", phase1_override);
    pretrain->add_option("--phase2-steps", phase2_override);
    pretrain->add_option("--objective", objective)->check(CLI::IsMember({"camlm", "mlm"}));
    auto* pretrain_seed = pretrain->add_option("--seed", seed);

    auto* cls = app.add_subcommand("finetune-cls", "Plug-Out / Plug-In classification");
    cls->add_option("--config", config_path);
    cls->add_option("--data", data_dir)->required();
    cls->add_option("--out", out_dir)->required();
    cls->add_option("--ckpt", ckpt_path);
    cls->add_option("--mode", mode)->check(CLI::IsMember({"plugout", "plugin"}));
    cls->add_option("--task", task_name);
    cls->add_option("--steps", steps_override);
    auto* cls_seed = cls->add_option("--seed", seed);

    auto* mt = app.add_subcommand("finetune-mt", "Translation fine-tuning of an assembled model");
    mt->add_option("--config", config_path);
    mt->add_option("--data", data_dir)->required();
    mt->add_option("--out", out_dir)->required();
    mt->add_option("--ckpt", ckpt_path);
    mt->add_flag("--random-init", random_init);
    mt->add_option("--decoder-layers", decoder_layers_flag);
    mt->add_option("--selection", selection_flag)->check(CLI::IsMember({"first", "last", "full"}));
    mt->add_flag("--tie", tie_flag);
    mt->add_flag("--no-tie", no_tie_flag);
    mt->add_option("--steps", steps_override);
    auto* mt_seed = mt->add_option("--seed", seed);

    auto* translate = app.add_subcommand("translate", "Beam-decode a source file");
    translate->add_option("--config", config_path);
    translate->add_option("--ckpt", ckpt_path)->required();
    translate->add_option("--vocab", vocab_path)->required();
    translate->add_option("--in", input_path)->required();
    translate->add_option("--out", out_dir)->required();
    translate->add_option("--beam", beam);
    translate->add_option("--max-len", max_len);

    auto* ebleu = app.add_subcommand("eval-bleu", "Corpus BLEU of a hypothesis file");
    ebleu->add_option("--hyp", hyp_path)->required();
    ebleu->add_option("--ref", ref_path)->required();
    ebleu->add_option("--vocab", vocab_path)->required();
    ebleu->add_option("--out", out_dir);

    auto* exattn = app.add_subcommand("export-attn", "Export head-averaged attention as TSV");
    exattn->add_option("--ckpt", ckpt_path)->required();
    exattn->add_option("--vocab", vocab_path)->required();
    exattn->add_option("--x", x_text)->required();
    exattn->add_option("--y", y_text)->required();
    exattn->add_option("--layer", layer);
    exattn->add_option("--stream", stream_name);
    exattn->add_option("--side", side_name)->check(CLI::IsMember({"x", "y"}));
    exattn->add_option("--out", out_dir)->required();

    auto* inspect = app.add_subcommand("inspect-ckpt", "List checkpoint tensors and hashes");
    inspect->add_option("--ckpt", ckpt_path)->required();

    auto* avg = app.add_subcommand("avg-ckpt", "Average parameter tensors of checkpoints");
    avg->add_option("--out", out_dir)->required();
    avg->add_option("inputs", avg_inputs)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << R"({"error":"usage: )" << e.what() << R"(","code":2})" << '\n';
        return kExitUsage;
    }

    try {
        if (synth->parsed()) {
            return cmd_synth_data(config_path, out_dir, resolve_seed(synth_seed, seed));
        }
        if (pretrain->parsed()) {
            ExperimentConfig cfg = load_config(config_path);
            auto& tree = cfg.tree["pretrain"];
            if (phase1_override >= 0) tree["phase1_steps"] = phase1_override;
            if (phase2_override >= 0) tree["phase2_steps"] = phase2_override;
            if (steps_override >= 0) {
                std::int64_t p1 =
                    std::min<std::int64_t>(tree["phase1_steps"].get<std::int64_t>(), steps_override);
                tree["phase1_steps"] = p1;
                tree["phase2_steps"] = steps_override - p1;
            }
            if (!objective.empty()) tree["objective"] = objective;
            return cmd_pretrain(cfg, data_dir, out_dir, resolve_seed(pretrain_seed, seed),
                                resume_path);
        }
        if (cls->parsed()) {
            ExperimentConfig cfg = load_config(config_path);
            auto& tree = cfg.tree["finetune"]["cls"];
            if (!mode.empty()) tree["mode"] = mode;
            if (steps_override >= 0) tree["steps"] = steps_override;
            if (task_name.empty()) task_name = tree["task"].get<std::string>();
            tree["task"] = task_name;
            return cmd_finetune_cls(cfg, data_dir, out_dir, ckpt_path, task_name,
                                    resolve_seed(cls_seed, seed));
        }
        if (mt->parsed()) {
            if (tie_flag && no_tie_flag) throw DataError("--tie and --no-tie conflict");
            ExperimentConfig cfg = load_config(config_path);
            auto& tree = cfg.tree["finetune"]["mt"];
            if (steps_override >= 0) tree["steps"] = steps_override;
            if (decoder_layers_flag >= -1) tree["decoder_layers"] = decoder_layers_flag;
            if (!selection_flag.empty()) tree["selection"] = selection_flag;
            if (tie_flag) tree["tie"] = true;
            if (no_tie_flag) tree["tie"] = false;
            if (random_init) tree["random_init"] = true;
            return cmd_finetune_mt(cfg, data_dir, out_dir, ckpt_path,
                                   tree["random_init"].get<bool>(), resolve_seed(mt_seed, seed));
        }
        if (translate->parsed()) {
            ExperimentConfig cfg = load_config(config_path);
            auto& tree = cfg.tree["decode"];
            if (beam >= 0) tree["beam_size"] = beam;
            if (max_len >= 0) tree["max_len"] = max_len;
            return cmd_translate(cfg, ckpt_path, vocab_path, input_path, out_dir,
                                 cfg.decode_beam_size(), cfg.decode_max_len());
        }
        if (ebleu->parsed()) return cmd_eval_bleu(hyp_path, ref_path, vocab_path, out_dir);
        if (exattn->parsed()) {
            return cmd_export_attn(ckpt_path, vocab_path, x_text, y_text, layer, stream_name,
                                   side_name, out_dir);
        }
        if (inspect->parsed()) return cmd_inspect_ckpt(ckpt_path);
        if (avg->parsed()) return cmd_avg_ckpt(avg_inputs, out_dir);
    } catch (const NumericError& e) {
        std::cerr << R"({"error":")" << e.what() << R"(","code":4})" << '\n';
        return kExitNumeric;
    } catch (const DataError& e) {
        std::cerr << R"({"error":")" << e.what() << R"(","code":3})" << '\n';
        return kExitData;
    } catch (const std::invalid_argument& e) {
        std::cerr << R"({"error":")" << e.what() << R"(","code":3})" << '\n';
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << R"({"error":")" << e.what() << R"(","code":1})" << '\n';
        return 1;
    }
    return kExitUsage;
}

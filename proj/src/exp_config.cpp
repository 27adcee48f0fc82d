#include "veco/exp_config.hpp"

#include <algorithm>
#include <fstream>

#include "veco/errors.hpp"

namespace veco {

using nlohmann::json;

json ExperimentConfig::default_tree() {
    return json{
        {"model",
         {{"num_layers", 4},
          {"d_model", 64},
          {"head_count", 4},
          {"d_ff", 256},
          {"vocab_size", 64},
          {"max_seq_len", 64},
          {"dropout", 0.0}}},
        {"data",
         {{"content_vocab", 59},
          {"mono", json::array({json{{"name", "lang_a"},
                                     {"documents", 200},
                                     {"sentences_per_document", 8},
                                     {"len_lo", 4},
                                     {"len_hi", 8},
                                     {"content_lo", 5},
                                     {"content_hi", 63},
                                     {"locality", 0.8},
                                     {"adjacent_overlap", 0.9}}})},
          {"pairs", json::array({json{{"name", "ab"},
                                      {"transform", "cipher"},
                                      {"shift_k", 1},
                                      {"cipher_seed", 1},
                                      {"num_pairs", 2000},
                                      {"len_lo", 4},
                                      {"len_hi", 8},
                                      {"content_lo", 5},
                                      {"content_hi", 63},
                                      {"locality", 0.8}}})}}},
        {"pretrain",
         {{"phase1_steps", 100},
          {"phase2_steps", 500},
          {"batch_pairs", 8},
          {"peak_lr", 3e-4},
          {"warmup_steps", 200},
          {"total_steps", 0},
          {"beta1", 0.9},
          {"beta2", 0.999},
          {"eps", 1e-6},
          {"weight_decay", 0.01},
          {"clip_norm", 1.0},
          {"mono_mask_rate", 0.15},
          {"bili_mask_rate", 0.25},
          {"alpha", 0.5},
          {"objective", "camlm"},
          {"ckpt_every", 100}}},
        {"finetune",
         {{"mt",
           {{"steps", 300},
            {"batch_pairs", 8},
            {"peak_lr", 3e-4},
            {"warmup_steps", 30},
            {"eval_every", 50},
            {"decoder_layers", 0},
            {"selection", "full"},
            {"tie", true},
            {"random_init", false},
            {"beam_size", 5},
            {"max_decode_len", 32},
            {"dev_pairs", 64},
            {"dev_fraction", 0.1},
            {"weight_decay", 0.01},
            {"clip_norm", 1.0}}},
          {"cls",
           {{"mode", "plugout"},
            {"task", "parity-x"},
            {"steps", 300},
            {"batch", 16},
            {"lr", 1e-3},
            {"num_labels", 2},
            {"clip_norm", 1.0}}}}},
        {"decode", {{"beam_size", 5}, {"max_len", 32}}}};
}

namespace {

bool category_matches(const json& a, const json& b) {
    if (a.is_number() && b.is_number()) return true;
    return a.type() == b.type();
}

}  // namespace

void merge_config(json& base, const json& patch, const std::string& where) {
    if (!patch.is_object()) throw DataError("config section '" + where + "' must be an object");
    for (const auto& [key, value] : patch.items()) {
        std::string path = where.empty() ? key : where + "." + key;
        if (!base.contains(key)) throw DataError("unknown config key '" + path + "'");
        json& slot = base[key];
        if (slot.is_object()) {
            merge_config(slot, value, path);
        } else if (slot.is_array()) {
            if (!value.is_array()) throw DataError("config key '" + path + "' must be an array");
            // Array entries follow the schema of the default first element.
            json element_schema = slot.empty() ? json::object() : slot[0];
            json replaced = json::array();
            for (size_t i = 0; i < value.size(); ++i) {
                json entry = element_schema;
                merge_config(entry, value[i], path + "[" + std::to_string(i) + "]");
                replaced.push_back(std::move(entry));
            }
            slot = std::move(replaced);
        } else {
            if (!category_matches(slot, value)) {
                throw DataError("config key '" + path + "' has the wrong type");
            }
            slot = value;
        }
    }
}

ExperimentConfig ExperimentConfig::defaults() {
    ExperimentConfig cfg;
    cfg.tree = default_tree();
    return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read config file " + path);
    json patch;
    try {
        is >> patch;
    } catch (const json::exception& e) {
        throw DataError("config file " + path + " is not valid JSON: " + e.what());
    }
    ExperimentConfig cfg = defaults();
    merge_config(cfg.tree, patch, "");
    return cfg;
}

void ExperimentConfig::write_resolved(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write resolved config " + path);
    os << tree.dump(2) << '\n';
}

ModelConfig ExperimentConfig::model_config() const {
    const json& m = tree.at("model");
    ModelConfig cfg;
    cfg.num_layers = m.at("num_layers").get<int>();
    cfg.d_model = m.at("d_model").get<int>();
    cfg.head_count = m.at("head_count").get<int>();
    cfg.d_ff = m.at("d_ff").get<int>();
    cfg.vocab_size = m.at("vocab_size").get<int>();
    cfg.max_seq_len = m.at("max_seq_len").get<int>();
    cfg.dropout = m.at("dropout").get<double>();
    cfg.validate();
    return cfg;
}

IteratorConfig ExperimentConfig::iterator_config() const {
    const json& p = tree.at("pretrain");
    IteratorConfig cfg;
    cfg.batch_pairs = p.at("batch_pairs").get<int>();
    cfg.mono_mask_rate = p.at("mono_mask_rate").get<double>();
    cfg.bili_mask_rate = p.at("bili_mask_rate").get<double>();
    cfg.alpha = p.at("alpha").get<double>();
    cfg.max_seq_len = tree.at("model").at("max_seq_len").get<int>();
    cfg.vocab_size = tree.at("model").at("vocab_size").get<int>();
    return cfg;
}

PretrainConfig ExperimentConfig::pretrain_config() const {
    const json& p = tree.at("pretrain");
    PretrainConfig cfg;
    cfg.phase1_steps = p.at("phase1_steps").get<std::int64_t>();
    cfg.phase2_steps = p.at("phase2_steps").get<std::int64_t>();
    cfg.schedule.peak_lr = p.at("peak_lr").get<double>();
    std::int64_t total = p.at("total_steps").get<std::int64_t>();
    cfg.schedule.total_steps = total > 0 ? total : cfg.total_steps();
    cfg.schedule.warmup_steps =
        std::min(p.at("warmup_steps").get<std::int64_t>(), cfg.schedule.total_steps);
    cfg.adam.beta1 = p.at("beta1").get<double>();
    cfg.adam.beta2 = p.at("beta2").get<double>();
    cfg.adam.eps = p.at("eps").get<double>();
    cfg.adam.weight_decay = p.at("weight_decay").get<double>();
    cfg.clip_norm = p.at("clip_norm").get<double>();
    cfg.objective = parse_objective(p.at("objective").get<std::string>());
    cfg.ckpt_every = p.at("ckpt_every").get<std::int64_t>();
    return cfg;
}

MtFinetuneConfig ExperimentConfig::mt_config() const {
    const json& m = tree.at("finetune").at("mt");
    MtFinetuneConfig cfg;
    cfg.steps = m.at("steps").get<std::int64_t>();
    cfg.batch_pairs = m.at("batch_pairs").get<int>();
    cfg.schedule.peak_lr = m.at("peak_lr").get<double>();
    cfg.schedule.warmup_steps = m.at("warmup_steps").get<std::int64_t>();
    cfg.schedule.total_steps = cfg.steps;
    cfg.adam.weight_decay = m.at("weight_decay").get<double>();
    cfg.clip_norm = m.at("clip_norm").get<double>();
    cfg.eval_every = m.at("eval_every").get<std::int64_t>();
    cfg.beam_size = m.at("beam_size").get<int>();
    cfg.max_decode_len = m.at("max_decode_len").get<int>();
    cfg.dev_pairs = m.at("dev_pairs").get<int>();
    return cfg;
}

ClsFinetuneConfig ExperimentConfig::cls_config() const {
    const json& c = tree.at("finetune").at("cls");
    ClsFinetuneConfig cfg;
    cfg.steps = c.at("steps").get<std::int64_t>();
    cfg.batch = c.at("batch").get<int>();
    cfg.lr = c.at("lr").get<double>();
    cfg.num_labels = c.at("num_labels").get<Index>();
    cfg.clip_norm = c.at("clip_norm").get<double>();
    cfg.plugin = c.at("mode").get<std::string>() == "plugin";
    return cfg;
}

std::vector<ExperimentConfig::MonoSpecEntry> ExperimentConfig::mono_specs() const {
    std::vector<MonoSpecEntry> out;
    for (const json& e : tree.at("data").at("mono")) {
        MonoSpecEntry entry;
        entry.name = e.at("name").get<std::string>();
        entry.spec.num_documents = e.at("documents").get<int>();
        entry.spec.sentences_per_document = e.at("sentences_per_document").get<int>();
        entry.spec.len_lo = e.at("len_lo").get<int>();
        entry.spec.len_hi = e.at("len_hi").get<int>();
        entry.spec.content_lo = e.at("content_lo").get<Index>();
        entry.spec.content_hi = e.at("content_hi").get<Index>();
        entry.spec.locality = e.at("locality").get<double>();
        entry.spec.adjacent_overlap = e.at("adjacent_overlap").get<double>();
        out.push_back(std::move(entry));
    }
    return out;
}

std::vector<ExperimentConfig::PairSpecEntry> ExperimentConfig::pair_specs() const {
    std::vector<PairSpecEntry> out;
    for (const json& e : tree.at("data").at("pairs")) {
        PairSpecEntry entry;
        entry.name = e.at("name").get<std::string>();
        entry.spec.transform = parse_transform(e.at("transform").get<std::string>());
        entry.spec.shift_k = e.at("shift_k").get<int>();
        entry.spec.cipher_seed = e.at("cipher_seed").get<std::uint64_t>();
        entry.spec.num_pairs = e.at("num_pairs").get<int>();
        entry.spec.len_lo = e.at("len_lo").get<int>();
        entry.spec.len_hi = e.at("len_hi").get<int>();
        entry.spec.content_lo = e.at("content_lo").get<Index>();
        entry.spec.content_hi = e.at("content_hi").get<Index>();
        entry.spec.locality = e.at("locality").get<double>();
        out.push_back(std::move(entry));
    }
    return out;
}

int ExperimentConfig::content_vocab() const { return tree.at("data").at("content_vocab").get<int>(); }
int ExperimentConfig::decode_beam_size() const { return tree.at("decode").at("beam_size").get<int>(); }
int ExperimentConfig::decode_max_len() const { return tree.at("decode").at("max_len").get<int>(); }

}  // namespace veco

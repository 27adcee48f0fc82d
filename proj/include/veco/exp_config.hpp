#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "veco/data.hpp"
#include "veco/finetune.hpp"
#include "veco/model.hpp"
#include "veco/train.hpp"

namespace veco {

/// Structured experiment configuration with sections model / data / pretrain /
/// finetune / decode. Files are JSON; unknown keys are rejected; a resolved
/// copy accompanies every command's outputs. Precedence: flags > file > defaults.
class ExperimentConfig {
public:
    static nlohmann::json default_tree();
    static ExperimentConfig defaults();
    static ExperimentConfig from_file(const std::string& path);

    nlohmann::json tree;

    void write_resolved(const std::string& path) const;

    ModelConfig model_config() const;
    IteratorConfig iterator_config() const;
    PretrainConfig pretrain_config() const;
    MtFinetuneConfig mt_config() const;
    ClsFinetuneConfig cls_config() const;

    struct MonoSpecEntry {
        std::string name;
        MonoGeneratorSpec spec;
    };
    struct PairSpecEntry {
        std::string name;
        GeneratorSpec spec;
    };
    std::vector<MonoSpecEntry> mono_specs() const;
    std::vector<PairSpecEntry> pair_specs() const;

    int content_vocab() const;
    int decode_beam_size() const;
    int decode_max_len() const;
};

/// Overlays `patch` onto `base`, rejecting keys absent from the schema and
/// values of the wrong category.
void merge_config(nlohmann::json& base, const nlohmann::json& patch, const std::string& where);

}  // namespace veco

#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "veco/checkpoint.hpp"
#include "veco/data.hpp"
#include "veco/model.hpp"
#include "veco/optim.hpp"

namespace veco {

enum class PretrainObjective { CaMlm, MlmOnly };

PretrainObjective parse_objective(const std::string& name);

struct PretrainConfig {
    std::int64_t phase1_steps = 0;  // self side frozen, only cross modules updated
    std::int64_t phase2_steps = 0;  // joint
    Schedule schedule;
    AdamConfig adam;
    double clip_norm = 1.0;
    std::int64_t ckpt_every = 100;
    PretrainObjective objective = PretrainObjective::CaMlm;

    std::int64_t total_steps() const { return phase1_steps + phase2_steps; }
};

struct StepMetrics {
    std::int64_t step = 0;
    std::string kind;
    double lr = 0.0;
    double x_self = 0.0;
    double x_cross = 0.0;
    double y_self = 0.0;
    double y_cross = 0.0;
    double tlm = 0.0;
    double total = 0.0;
};

/// Append-only TSV sink; header first.
class MetricsWriter {
public:
    MetricsWriter() = default;
    MetricsWriter(const std::string& path, const std::vector<std::string>& columns);
    void row(const std::vector<std::string>& cells);

private:
    std::ofstream os_;
};

std::string fmt_double(double v);

/// Two-phase pre-training loop: strict mono/bilingual alternation from the
/// iterator; mono steps optimize the four-term objective on adjacent
/// segments, bilingual steps add the TLM term. Phase 1 updates only the
/// cross-attention modules.
class Pretrainer {
public:
    Pretrainer(Model& model, BatchIterator& iterator, PretrainConfig cfg, std::uint64_t seed);

    void resume_from(const Checkpoint& ckpt);

    /// Runs until total_steps; returns the final checkpoint (also written to
    /// ckpt_path when non-empty). A non-finite loss halts with the last
    /// periodic checkpoint left in place.
    Checkpoint run(MetricsWriter* metrics, const std::string& ckpt_path);

    const std::vector<StepMetrics>& history() const { return history_; }
    std::int64_t steps_done() const { return steps_done_; }

    Checkpoint snapshot() const;

private:
    Checkpoint make_checkpoint() const;

    Model& model_;
    BatchIterator& iterator_;
    PretrainConfig cfg_;
    AdamState adam_;
    Rng trainer_rng_;
    std::int64_t steps_done_ = 0;
    std::vector<StepMetrics> history_;
};

std::vector<std::string> metrics_header();
std::vector<std::string> metrics_cells(const StepMetrics& m);

}  // namespace veco

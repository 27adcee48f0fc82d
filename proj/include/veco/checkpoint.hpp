#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "veco/model.hpp"
#include "veco/optim.hpp"

namespace veco {

enum class CheckpointKind : std::uint32_t { Encoder = 0, Seq2Seq = 1 };
enum class LayerSelection : std::uint32_t { First = 0, Last = 1, Full = 2 };

LayerSelection parse_selection(const std::string& name);
std::string selection_name(LayerSelection sel);

struct TensorBlob {
    std::string name;
    std::vector<Index> shape;
    std::vector<float> values;

    Index numel() const;
};

/// Serialized model: config, named parameter tensors, optional optimizer
/// moments, opaque rng/iterator state, and the step counter.
///
/// Binary layout: magic "VECO", u32 version, config block, u64 step,
/// rng blob, model tensor records, optimizer tensor records, trailing CRC32.
/// Tensor record: u32 name length, UTF-8 name, u8 rank, u64 dims,
/// little-endian f32 payload.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    CheckpointKind kind = CheckpointKind::Encoder;
    ModelConfig config;
    // Seq2Seq deployments only:
    int decoder_layers = 0;
    LayerSelection selection = LayerSelection::Full;
    bool tied = true;

    std::int64_t step = 0;
    std::string rng_state;
    std::vector<TensorBlob> tensors;
    std::vector<TensorBlob> optimizer;
    std::int64_t optimizer_step = 0;

    const TensorBlob* find(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Element-wise mean of every parameter tensor; optimizer state dropped.
/// All inputs must agree on config and tensor sets.
Checkpoint average_checkpoints(const std::vector<std::string>& paths);

TensorBlob to_blob(const std::string& name, const Tensor& t);
Tensor from_blob(const TensorBlob& blob, bool requires_grad = true);

/// Snapshot of the full model parameter set (and optionally Adam moments).
Checkpoint checkpoint_from_model(const Model& model, const AdamState* adam = nullptr);

/// Writes checkpoint tensors into an existing model. Throws DataError on any
/// config, name-set, or shape mismatch.
void restore_model(Model& model, const Checkpoint& ckpt);
void restore_adam(AdamState& adam, const Checkpoint& ckpt);

std::uint32_t crc32(const std::uint8_t* data, std::size_t len);

}  // namespace veco

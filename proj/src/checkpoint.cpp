#include "veco/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include "veco/errors.hpp"

namespace veco {

LayerSelection parse_selection(const std::string& name) {
    if (name == "first") return LayerSelection::First;
    if (name == "last") return LayerSelection::Last;
    if (name == "full") return LayerSelection::Full;
    throw DataError("unknown layer selection '" + name + "' (first|last|full)");
}

std::string selection_name(LayerSelection sel) {
    switch (sel) {
        case LayerSelection::First: return "first";
        case LayerSelection::Last: return "last";
        case LayerSelection::Full: return "full";
    }
    return "?";
}

Index TensorBlob::numel() const {
    Index n = 1;
    for (Index d : shape) n *= d;
    return n;
}

const TensorBlob* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

std::uint32_t crc32(const std::uint8_t* data, std::size_t len) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

namespace {

class Writer {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    const std::vector<std::uint8_t>& data() const { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    Reader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
    std::uint8_t u8() { return take(1)[0]; }
    std::uint32_t u32() {
        const std::uint8_t* b = take(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        const std::uint8_t* b = take(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    }
    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64() {
        std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str(std::size_t n) {
        const std::uint8_t* b = take(n);
        return std::string(reinterpret_cast<const char*>(b), n);
    }
    bool done() const { return off_ == n_; }

private:
    const std::uint8_t* take(std::size_t n) {
        if (off_ + n > n_) throw DataError("checkpoint truncated: record extends past end of file");
        const std::uint8_t* p = p_ + off_;
        off_ += n;
        return p;
    }
    const std::uint8_t* p_;
    std::size_t n_;
    std::size_t off_ = 0;
};

void write_tensor_record(Writer& w, const TensorBlob& t) {
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (Index d : t.shape) w.u64(static_cast<std::uint64_t>(d));
    for (float v : t.values) w.f32(v);
}

TensorBlob read_tensor_record(Reader& r) {
    TensorBlob t;
    std::uint32_t name_len = r.u32();
    if (name_len > 4096) throw DataError("checkpoint corrupt: implausible tensor name length");
    t.name = r.str(name_len);
    std::uint8_t rank = r.u8();
    Index numel = 1;
    for (int i = 0; i < rank; ++i) {
        Index d = static_cast<Index>(r.u64());
        if (d < 0 || d > (1 << 28)) throw DataError("checkpoint corrupt: bad dimension");
        t.shape.push_back(d);
        numel *= d;
    }
    t.values.resize(static_cast<size_t>(numel));
    for (Index i = 0; i < numel; ++i) t.values[static_cast<size_t>(i)] = r.f32();
    return t;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    Writer w;
    w.bytes("VECO", 4);
    w.u32(Checkpoint::kVersion);
    // config block
    w.u32(static_cast<std::uint32_t>(ckpt.kind));
    w.u64(static_cast<std::uint64_t>(ckpt.config.num_layers));
    w.u64(static_cast<std::uint64_t>(ckpt.config.d_model));
    w.u64(static_cast<std::uint64_t>(ckpt.config.head_count));
    w.u64(static_cast<std::uint64_t>(ckpt.config.d_ff));
    w.u64(static_cast<std::uint64_t>(ckpt.config.vocab_size));
    w.u64(static_cast<std::uint64_t>(ckpt.config.max_seq_len));
    w.f64(ckpt.config.dropout);
    w.u32(static_cast<std::uint32_t>(ckpt.decoder_layers));
    w.u32(static_cast<std::uint32_t>(ckpt.selection));
    w.u8(ckpt.tied ? 1 : 0);

    w.u64(static_cast<std::uint64_t>(ckpt.step));
    w.u64(static_cast<std::uint64_t>(ckpt.rng_state.size()));
    w.bytes(ckpt.rng_state.data(), ckpt.rng_state.size());

    w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) write_tensor_record(w, t);
    w.u32(static_cast<std::uint32_t>(ckpt.optimizer.size()));
    w.u64(static_cast<std::uint64_t>(ckpt.optimizer_step));
    for (const auto& t : ckpt.optimizer) write_tensor_record(w, t);

    std::uint32_t crc = crc32(w.data().data(), w.data().size());

    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint file " + path);
    os.write(reinterpret_cast<const char*>(w.data().data()),
             static_cast<std::streamsize>(w.data().size()));
    char crc_bytes[4];
    for (int i = 0; i < 4; ++i) crc_bytes[i] = static_cast<char>(crc >> (8 * i));
    os.write(crc_bytes, 4);
    if (!os) throw DataError("short write on checkpoint file " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read checkpoint file " + path);
    std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
    if (raw.size() < 12) throw DataError("checkpoint truncated: file smaller than header");

    std::uint32_t stored_crc = 0;
    for (int i = 0; i < 4; ++i) {
        stored_crc |= static_cast<std::uint32_t>(raw[raw.size() - 4 + static_cast<size_t>(i)])
                      << (8 * i);
    }
    if (crc32(raw.data(), raw.size() - 4) != stored_crc) {
        throw DataError("checkpoint corrupt: CRC32 mismatch");
    }

    Reader r(raw.data(), raw.size() - 4);
    if (r.str(4) != "VECO") throw DataError("checkpoint corrupt: bad magic");
    std::uint32_t version = r.u32();
    if (version != Checkpoint::kVersion) {
        throw DataError("checkpoint version " + std::to_string(version) + " unsupported (want " +
                        std::to_string(Checkpoint::kVersion) + ")");
    }

    Checkpoint ckpt;
    ckpt.kind = static_cast<CheckpointKind>(r.u32());
    ckpt.config.num_layers = static_cast<int>(r.u64());
    ckpt.config.d_model = static_cast<int>(r.u64());
    ckpt.config.head_count = static_cast<int>(r.u64());
    ckpt.config.d_ff = static_cast<int>(r.u64());
    ckpt.config.vocab_size = static_cast<int>(r.u64());
    ckpt.config.max_seq_len = static_cast<int>(r.u64());
    ckpt.config.dropout = r.f64();
    ckpt.decoder_layers = static_cast<int>(r.u32());
    ckpt.selection = static_cast<LayerSelection>(r.u32());
    ckpt.tied = r.u8() != 0;

    ckpt.step = static_cast<std::int64_t>(r.u64());
    std::uint64_t rng_len = r.u64();
    ckpt.rng_state = r.str(rng_len);

    std::uint32_t n_tensors = r.u32();
    for (std::uint32_t i = 0; i < n_tensors; ++i) ckpt.tensors.push_back(read_tensor_record(r));
    std::uint32_t n_opt = r.u32();
    ckpt.optimizer_step = static_cast<std::int64_t>(r.u64());
    for (std::uint32_t i = 0; i < n_opt; ++i) ckpt.optimizer.push_back(read_tensor_record(r));
    if (!r.done()) throw DataError("checkpoint corrupt: trailing bytes before CRC");
    return ckpt;
}

TensorBlob to_blob(const std::string& name, const Tensor& t) {
    TensorBlob b;
    b.name = name;
    b.shape = t.shape();
    b.values.reserve(t.values().size());
    for (double v : t.values()) b.values.push_back(static_cast<float>(v));
    return b;
}

Tensor from_blob(const TensorBlob& blob, bool requires_grad) {
    std::vector<double> vals(blob.values.begin(), blob.values.end());
    return Tensor::from_values(blob.shape, std::move(vals), requires_grad).set_name(blob.name);
}

Checkpoint checkpoint_from_model(const Model& model, const AdamState* adam) {
    Checkpoint ckpt;
    ckpt.kind = CheckpointKind::Encoder;
    ckpt.config = model.config;
    for (const auto& [name, t] : model.params.named_tensors()) {
        ckpt.tensors.push_back(to_blob(name, t));
    }
    if (adam) {
        ckpt.optimizer_step = adam->step;
        for (const auto& [name, mom] : adam->moments) {
            TensorBlob m, v;
            m.name = "adam.m." + name;
            v.name = "adam.v." + name;
            m.shape = {static_cast<Index>(mom.m.size())};
            v.shape = {static_cast<Index>(mom.v.size())};
            m.values.assign(mom.m.begin(), mom.m.end());
            v.values.assign(mom.v.begin(), mom.v.end());
            ckpt.optimizer.push_back(std::move(m));
            ckpt.optimizer.push_back(std::move(v));
        }
    }
    return ckpt;
}

void restore_model(Model& model, const Checkpoint& ckpt) {
    if (!(ckpt.config == model.config)) {
        throw DataError("checkpoint config does not match model config");
    }
    auto named = model.params.named_tensors();
    if (named.size() != ckpt.tensors.size()) {
        throw DataError("checkpoint tensor count " + std::to_string(ckpt.tensors.size()) +
                        " does not match model (" + std::to_string(named.size()) + ")");
    }
    for (auto& [name, t] : named) {
        const TensorBlob* blob = ckpt.find(name);
        if (!blob) throw DataError("checkpoint is missing tensor '" + name + "'");
        if (blob->shape != t.shape()) {
            throw DataError("checkpoint tensor '" + name + "' has shape " +
                            shape_string(blob->shape) + ", expected " + shape_string(t.shape()));
        }
        Tensor handle = t;
        auto& vals = handle.values();
        for (size_t i = 0; i < vals.size(); ++i) {
            vals[i] = static_cast<double>(blob->values[i]);
        }
    }
}

void restore_adam(AdamState& adam, const Checkpoint& ckpt) {
    adam.step = ckpt.optimizer_step;
    adam.moments.clear();
    for (const auto& blob : ckpt.optimizer) {
        bool is_m = blob.name.rfind("adam.m.", 0) == 0;
        bool is_v = blob.name.rfind("adam.v.", 0) == 0;
        if (!is_m && !is_v) throw DataError("unexpected optimizer tensor '" + blob.name + "'");
        std::string param = blob.name.substr(7);
        auto& mom = adam.moments[param];
        auto& dst = is_m ? mom.m : mom.v;
        dst.assign(blob.values.begin(), blob.values.end());
    }
}

Checkpoint average_checkpoints(const std::vector<std::string>& paths) {
    if (paths.empty()) throw DataError("average_checkpoints: no inputs");
    Checkpoint acc = load_checkpoint(paths[0]);
    acc.optimizer.clear();
    acc.optimizer_step = 0;
    acc.rng_state.clear();

    std::vector<std::vector<double>> sums;
    sums.reserve(acc.tensors.size());
    for (const auto& t : acc.tensors) sums.emplace_back(t.values.begin(), t.values.end());

    for (size_t p = 1; p < paths.size(); ++p) {
        Checkpoint next = load_checkpoint(paths[p]);
        if (!(next.config == acc.config) || next.kind != acc.kind) {
            throw DataError("average_checkpoints: config mismatch in " + paths[p]);
        }
        if (next.tensors.size() != acc.tensors.size()) {
            throw DataError("average_checkpoints: tensor count mismatch in " + paths[p]);
        }
        for (size_t i = 0; i < acc.tensors.size(); ++i) {
            const TensorBlob* blob = next.find(acc.tensors[i].name);
            if (!blob || blob->shape != acc.tensors[i].shape) {
                throw DataError("average_checkpoints: tensor '" + acc.tensors[i].name +
                                "' mismatch in " + paths[p]);
            }
            for (size_t j = 0; j < sums[i].size(); ++j) {
                sums[i][j] += static_cast<double>(blob->values[j]);
            }
        }
    }
    double inv = 1.0 / static_cast<double>(paths.size());
    for (size_t i = 0; i < acc.tensors.size(); ++i) {
        for (size_t j = 0; j < sums[i].size(); ++j) {
            acc.tensors[i].values[j] = static_cast<float>(sums[i][j] * inv);
        }
    }
    return acc;
}

}  // namespace veco

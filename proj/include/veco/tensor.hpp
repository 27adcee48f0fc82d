#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "veco/random.hpp"

namespace veco {

using Index = std::int64_t;

/// Backing storage of one tensor. Values are f64 row-major; the gradient
/// buffer stays empty until something accumulates into it.
struct TensorData {
    std::vector<Index> shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
    std::string name;

    Index numel() const {
        Index n = 1;
        for (Index d : shape) n *= d;
        return n;
    }
    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), 0.0);
    }
};

using NodePtr = std::shared_ptr<TensorData>;

/// Value-semantic handle onto a TensorData node. Copies share storage;
/// forward ops never mutate their inputs.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<Index> shape, bool requires_grad = false);
    static Tensor from_values(std::vector<Index> shape, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor scalar(double v);
    /// Normal(0, stddev) entries, each snapped through f32 so checkpoints
    /// round-trip bit-exactly.
    static Tensor randn(std::vector<Index> shape, double stddev, Rng& rng,
                        bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<Index>& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    Index dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    Index numel() const { return node_->numel(); }

    std::vector<double>& values() { return node_->values; }
    const std::vector<double>& values() const { return node_->values; }
    double scalar_value() const;

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        return *this;
    }

    /// Gradient buffer; reads as zeros before anything is accumulated.
    const std::vector<double>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    std::vector<double>& grad_mut() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() const {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    const std::string& name() const { return node_->name; }
    Tensor& set_name(std::string n) {
        node_->name = std::move(n);
        return *this;
    }

    const NodePtr& node() const { return node_; }
    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

private:
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}
    NodePtr node_;

    friend Tensor make_tensor(std::vector<Index> shape, std::vector<double> values);
};

Tensor make_tensor(std::vector<Index> shape, std::vector<double> values);

/// One recorded forward op: the closure reads output->grad and accumulates
/// into the inputs it captured.
struct TapeOp {
    NodePtr output;
    std::function<void()> backward;
};

/// Recording tape for reverse-mode differentiation. Constructing a Tape makes
/// it the active tape; ops record themselves while one is active and any
/// input requires a gradient. Single-threaded by contract: one tape owns one
/// training step.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Seeds d(loss)/d(loss) = 1 and walks the ops once, in reverse recording
    /// order. Throws if loss is not scalar or if called twice without clear().
    void backward(const Tensor& loss);
    void clear();
    std::size_t size() const { return ops_.size(); }

    static Tape* active();
    static void record(TapeOp op);

private:
    std::vector<TapeOp> ops_;
    bool consumed_ = false;
    Tape* prev_ = nullptr;
};

// ---- forward ops -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
/// x[m,n] + bias[n] broadcast over rows; the only broadcast this engine offers.
Tensor add_rowwise(const Tensor& x, const Tensor& bias);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor gelu(const Tensor& x);
/// out[i,:] = x[rows[i],:]; backward scatter-adds. Serves embedding lookup.
Tensor gather_rows(const Tensor& x, const std::vector<Index>& rows);
Tensor slice_cols(const Tensor& x, Index start, Index count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
/// Mean negative log-softmax probability of targets; n == 0 yields 0.
Tensor cross_entropy(const Tensor& logits, const std::vector<Index>& targets);
/// Identity forward; contributes nothing to any ancestor in backward.
Tensor stop_gradient(const Tensor& x);
Tensor sum(const Tensor& x);
/// Inverted dropout; rate == 0 returns x unchanged and draws nothing.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

bool all_finite(const Tensor& x);

std::string shape_string(const std::vector<Index>& shape);

}  // namespace veco

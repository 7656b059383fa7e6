#pragma once

#include <deque>
#include <functional>
#include <unordered_map>
#include <vector>

#include "impactx/tensor.hpp"

namespace impactx {

// Trainable tensor with its gradient accumulator.
struct Parameter {
    Tensor value;
    Tensor grad;
    int id = -1;
    std::string name;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : value(std::move(v)), grad(value.shape()), name(std::move(n)) {}

    void zero_grad() { grad.fill(0.0f); }
};

// Handle to a node on a Tape.
struct Value {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Records primitive applications in order; backward() replays them in
// reverse, accumulating into node gradients and finally into Parameter
// gradients. A tape constructed with grad_enabled=false stores no backward
// rules and allocates no gradient buffers (cheap forward-only evaluation).
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }

    // Leaf holding a copy of t.
    Value constant(Tensor t);
    // Leaf borrowing external storage; caller keeps `t` alive past the tape.
    Value borrow(const Tensor& t);
    // Leaf bound to a parameter: backward() flushes the node gradient into
    // p.grad. One node per distinct parameter per tape.
    Value param(Parameter& p);
    // Borrows p.value without gradient tracking (frozen / inference use).
    Value weight(const Parameter& p) { return borrow(p.value); }
    // Tracked when the tape records gradients, borrowed otherwise.
    Value weight(Parameter& p) { return grad_enabled_ ? param(p) : borrow(p.value); }

    const Tensor& value(Value v) const {
        const Node& n = nodes_[static_cast<size_t>(v.id)];
        return n.external ? *n.external : n.owned;
    }
    Tensor& grad(Value v);

    // Reverse sweep from a scalar loss. Throws StateError if called again
    // without recording new work.
    void backward(Value loss);

    // --- used by op implementations ---
    Value emit(Tensor out, std::function<void()> back);
    bool grad_pending(Value v) const { return nodes_[static_cast<size_t>(v.id)].grad_ready; }
    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor owned;
        const Tensor* external = nullptr;
        Tensor grad;  // allocated lazily, grad tapes only
        bool grad_ready = false;
        std::function<void()> back;  // empty for leaves / forward-only tapes
    };

    std::deque<Node> nodes_;  // deque: element addresses stay stable
    std::vector<std::pair<Parameter*, int>> param_nodes_;
    std::unordered_map<const Parameter*, int> param_index_;
    bool grad_enabled_ = true;
    bool consumed_ = false;
};

// ---- primitives ----
// All record on the tape when it has gradients enabled. Shapes follow the
// comments; dimension mismatches throw DimensionError naming both shapes.

// x:[n,in] * w:[in,out] + b:[out] -> [n,out]
Value dense(Tape& t, Value x, Value w, Value b);
// x:[n,c,h,w], k:[f,c,3,3], b:[f]; stride 1, zero padding 1 -> [n,f,h,w]
Value conv2d(Tape& t, Value x, Value k, Value b);
// 2x2 non-overlapping max; gradient to the first argmax in row-major order.
Value maxpool2(Tape& t, Value x);
// Nearest-neighbour 2x replication; backward sums the four replicas.
Value upsample2x(Tape& t, Value x);
Value relu(Tape& t, Value x);
Value sigmoid(Tape& t, Value x);
// Row-wise softmax over [n,K], max-subtracted for stability.
Value softmax(Tape& t, Value x);
// Mean over batch of -log softmax(logits)[label]; fused log-sum-exp.
Value cross_entropy(Tape& t, Value logits, const std::vector<int>& labels);
// Mean over all elements of squared difference.
Value mse(Tape& t, Value a, Value b);
Value add(Tape& t, Value a, Value b);
Value scale(Tape& t, Value a, float c);
Value reshape(Tape& t, Value x, Shape s);
// [n,A],[n,B] -> [n,A+B]
Value concat_cols(Tape& t, Value a, Value b);

}  // namespace impactx

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "vla/error.hpp"

namespace vla {

using Shape = std::vector<int>;
using Mask = std::vector<std::uint8_t>;  // 1 = may attend / valid

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Param;
class Tape;

// Handle into a Tape node. Values are immutable after creation; gradients are
// written once by Tape::backward.
class Tensor {
public:
    Tensor() = default;

    bool valid() const { return tape_ != nullptr; }
    const Shape& shape() const;
    std::size_t size() const;
    int dim(int i) const { return shape().at(static_cast<std::size_t>(i)); }
    const std::vector<double>& value() const;
    bool requires_grad() const;
    bool has_grad() const;
    const std::vector<double>& grad() const;
    double item() const;  // scalar tensors only
    int node_id() const { return id_; }

private:
    friend class Tape;
    Tensor(Tape* t, int id) : tape_(t), id_(id) {}
    Tape* tape_ = nullptr;
    int id_ = -1;
};

// Reverse-mode tape over dense row-major f64 tensors. Nodes are appended in
// creation order; every node's inputs precede it, so the reverse sweep is a
// single pass from the loss node down to node 0.
//
// Construct with grad_enabled=false for inference: ops then skip closure
// creation and gradient bookkeeping but compute identical values.
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    ~Tape();

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t num_nodes() const { return nodes_.size(); }

    // ---- leaves ----
    Tensor constant(Shape shape, std::vector<double> data);
    Tensor scalar(double v) { return constant({1}, {v}); }
    Tensor zeros(Shape shape);
    // Differentiable free input (for gradient checks and probes).
    Tensor input(Shape shape, std::vector<double> data);
    // Bind a parameter. Values alias the parameter's storage; gradients
    // accumulate directly into Param::grad. Binding the same parameter twice
    // on one tape returns the same node.
    Tensor leaf(Param& p);

    // ---- elementwise / linear ----
    Tensor add(Tensor a, Tensor b);
    Tensor sub(Tensor a, Tensor b);
    Tensor mul(Tensor a, Tensor b);
    Tensor scale(Tensor a, double c);
    Tensor gelu(Tensor x);  // tanh approximation, fixed repo-wide
    Tensor matmul(Tensor a, Tensor b);
    Tensor add_bias(Tensor x, Tensor b);  // x: R×C, b: C (broadcast over rows)

    // ---- shape ----
    Tensor reshape(Tensor x, Shape shape);
    Tensor row_slice(Tensor x, int r0, int r1);
    Tensor concat_rows(const std::vector<Tensor>& xs);
    Tensor gather_rows(Tensor table, std::vector<int> ids);

    // ---- normalization / attention ----
    Tensor layer_norm(Tensor x, Tensor gamma, Tensor beta, double eps);
    // Softmax over the last axis, max-stabilized.
    Tensor softmax(Tensor x);
    // Rows of x are grouped (batch, head, query); mask has Tq×Tk entries
    // (shared across batch) or batch·Tq×Tk when per_element is true. Masked
    // entries get exactly zero weight; a fully masked row is a contract error.
    Tensor masked_softmax(Tensor x, const Mask& mask, int batch, int heads, int tq, int tk,
                          bool per_element);
    // S[b,h] = scale * Q[b,h] K[b,h]^T with heads as column blocks.
    // q: (batch·tq)×d, k: (batch·tk)×d -> (batch·heads·tq)×tk.
    // When a mask is given (same layout as masked_softmax), masked entries are
    // skipped and left at zero; masked_softmax never reads them.
    Tensor attn_scores(Tensor q, Tensor k, int batch, int heads, int tq, int tk, double scale,
                       const Mask* mask = nullptr, bool per_element = false);
    // O[b] = concat_h P[b,h] V[b,h]: p: (batch·heads·tq)×tk, v: (batch·tk)×d -> (batch·tq)×d.
    Tensor attn_apply(Tensor p, Tensor v, int batch, int heads, int tq, int tk);

    // ---- reductions / losses ----
    Tensor sum_all(Tensor x);
    Tensor mean_all(Tensor x);
    Tensor mse_loss(Tensor pred, Tensor target);
    // Mean over rows of -log softmax(logits)[target]; `weights`, when given,
    // selects/weights rows (weighted mean over sum of weights).
    Tensor cross_entropy(Tensor logits, const std::vector<int>& targets,
                         const std::vector<double>& weights = {});

    // Reverse sweep from a scalar loss. Gradients accumulate additively across
    // fan-out; parameter gradients land in Param::grad and mark it valid.
    void backward(Tensor loss);

private:
    friend class Tensor;

    struct Node {
        Shape shape;
        std::vector<double> local_value;
        std::vector<double> local_grad;
        std::vector<double> saved;  // activations stashed for the backward pass
        Param* param = nullptr;
        bool requires_grad = false;
        bool grad_live = false;  // grad buffer has been written
        const char* op = "leaf";
        std::vector<int> inputs;
        std::function<void()> backprop;
    };

    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    const std::vector<double>& val(int id) const;
    std::vector<double>& val_mut(int id);
    // Gradient buffer of node `id`, allocated (zeroed) on first use.
    double* grad_buf(int id);
    bool wants_grad(std::initializer_list<Tensor> ins) const;
    Tensor make(Shape shape, const char* op, std::vector<int> inputs, bool requires_grad);
    void check_same_tape(Tensor t) const;

    std::vector<Node> nodes_;
    std::unordered_map<const Param*, int> bound_;
    bool grad_enabled_;
};

}  // namespace vla

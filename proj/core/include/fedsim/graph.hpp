#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedsim/params.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

using NodeId = std::int32_t;

enum class OpKind : std::uint8_t {
    Constant,
    Parameter,
    Add,
    Sub,
    Mul,
    Div,
    AddRowVec,   // (n x m) + (m,), bias broadcast over rows
    MatMul,
    Transpose,
    Relu,
    Tanh,
    Square,
    Scale,       // c * x
    AddScalar,   // x + c
    Sum,         // all entries -> scalar
    Mean,        // all entries -> scalar
    ColSum,      // (n x m) -> (m,), per-column sum
    ColNorm,     // (n x m) -> (m,), per-column L2 norm
    Reshape,
    LogSoftmax,  // row-wise; output clamped below at log(1e-12)
    NllLoss,     // -(1/n) sum_i lp[i, y_i] with labels attached to the node
};

const char* op_name(OpKind kind);

// Reverse-mode automatic differentiation over a flat arena of nodes.
//
// Nodes are appended in topological order by construction, so evaluate() is a
// single forward sweep and gradients() a single reverse sweep. Shapes are
// inferred and checked when a node is built; evaluation checks every produced
// value for non-finite entries. Both sweeps are plain sequential loops:
// identical leaf bits always give identical output bits.
//
// Leaves may be re-bound with set_value()/set_labels() to re-evaluate the
// same topology on new data without rebuilding.
class Graph {
public:
    NodeId constant(Tensor value, std::string label = {});
    NodeId parameter(const std::string& name, Tensor value);

    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId divide(NodeId a, NodeId b);
    NodeId add_rowvec(NodeId a, NodeId bias);
    NodeId matmul(NodeId a, NodeId b);
    NodeId transpose(NodeId a);
    NodeId relu(NodeId a);
    NodeId tanh_(NodeId a);
    NodeId square(NodeId a);
    NodeId scale(NodeId a, double c);
    NodeId add_scalar(NodeId a, double c);
    NodeId sum(NodeId a);
    NodeId mean(NodeId a);
    NodeId col_sum(NodeId a);
    NodeId col_norm(NodeId a);
    NodeId reshape(NodeId a, std::vector<std::size_t> shape);
    NodeId log_softmax(NodeId a);
    NodeId nll_loss(NodeId log_probs, std::vector<int> labels);

    // re-bind a leaf (shape must match)
    void set_value(NodeId leaf, Tensor value);
    void set_labels(NodeId nll_node, std::vector<int> labels);

    // forward sweep up to `root`; returns its value
    const Tensor& evaluate(NodeId root);
    // reverse sweep from a scalar root (ContractError otherwise); returns a
    // gradient for every registered parameter, zeros where unreachable
    ParamSet gradients(NodeId scalar_root);

    const Tensor& value(NodeId id) const;
    NodeId param_node(const std::string& name) const;
    // current parameter values, in registration order
    ParamSet current_params() const;
    // in-place w -= eta * g over registered parameters (grads from gradients())
    void apply_sgd(const ParamSet& grads, double eta);

    std::size_t node_count() const { return nodes_.size(); }
    const std::vector<std::size_t>& shape_of(NodeId id) const;

private:
    struct Node {
        OpKind kind;
        NodeId in0 = -1;
        NodeId in1 = -1;
        double carg = 0.0;
        std::vector<std::size_t> shape;
        std::vector<int> labels;  // NllLoss only
        std::string label;
        Tensor value;
    };

    NodeId push(Node node);
    Node& node(NodeId id);
    const Node& node(NodeId id) const;
    std::string describe(const Node& n) const;
    void forward_one(Node& n);
    void backward_one(NodeId id, const Tensor& adj);

    std::vector<Node> nodes_;
    std::vector<std::pair<std::string, NodeId>> params_;
    std::vector<Tensor> adjoints_;
    NodeId evaluated_upto_ = -1;  // nodes [0, watermark] hold valid values
};

} // namespace fedsim

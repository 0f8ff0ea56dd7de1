#include "fedsim/graph.hpp"

#include <algorithm>
#include <cmath>

#include "fedsim/errors.hpp"

namespace fedsim {

namespace {
// clamp applied inside LogSoftmax: probabilities floor at 1e-12 before log
const double kLogFloor = std::log(1e-12);
} // namespace

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::Constant: return "constant";
        case OpKind::Parameter: return "parameter";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Div: return "div";
        case OpKind::AddRowVec: return "add_rowvec";
        case OpKind::MatMul: return "matmul";
        case OpKind::Transpose: return "transpose";
        case OpKind::Relu: return "relu";
        case OpKind::Tanh: return "tanh";
        case OpKind::Square: return "square";
        case OpKind::Scale: return "scale";
        case OpKind::AddScalar: return "add_scalar";
        case OpKind::Sum: return "sum";
        case OpKind::Mean: return "mean";
        case OpKind::ColSum: return "col_sum";
        case OpKind::ColNorm: return "col_norm";
        case OpKind::Reshape: return "reshape";
        case OpKind::LogSoftmax: return "log_softmax";
        case OpKind::NllLoss: return "nll_loss";
    }
    return "?";
}

Graph::Node& Graph::node(NodeId id) { return nodes_[static_cast<std::size_t>(id)]; }
const Graph::Node& Graph::node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }

std::string Graph::describe(const Node& n) const {
    std::string s = op_name(n.kind);
    s += '#';
    s += std::to_string(&n - nodes_.data());
    if (!n.label.empty()) {
        s += " ('";
        s += n.label;
        s += "')";
    }
    return s;
}

NodeId Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::constant(Tensor value, std::string label) {
    Node n;
    n.kind = OpKind::Constant;
    n.shape = value.shape();
    n.value = std::move(value);
    n.label = std::move(label);
    return push(std::move(n));
}

NodeId Graph::parameter(const std::string& name, Tensor value) {
    for (const auto& [pname, pid] : params_) {
        if (pname == name) throw StructuralError("graph: duplicate parameter '" + name + "'");
    }
    Node n;
    n.kind = OpKind::Parameter;
    n.shape = value.shape();
    n.value = std::move(value);
    n.label = name;
    NodeId id = push(std::move(n));
    params_.emplace_back(name, id);
    return id;
}

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw StructuralError(msg);
}

} // namespace

#define FEDSIM_CHECK_ID(id)                                                              \
    require((id) >= 0 && static_cast<std::size_t>(id) < nodes_.size(),                   \
            "graph: node id " + std::to_string(id) + " out of range")

NodeId Graph::add(NodeId a, NodeId b) {
    FEDSIM_CHECK_ID(a);
    FEDSIM_CHECK_ID(b);
    require(node(a).shape == node(b).shape,
            "add: shape mismatch " + Tensor::zeros(node(a).shape).shape_str() + " vs " +
                Tensor::zeros(node(b).shape).shape_str() + " feeding node add#" +
                std::to_string(nodes_.size()));
    Node n;
    n.kind = OpKind::Add;
    n.in0 = a;
    n.in1 = b;
    n.shape = node(a).shape;
    return push(std::move(n));
}

NodeId Graph::sub(NodeId a, NodeId b) {
    FEDSIM_CHECK_ID(a);
    FEDSIM_CHECK_ID(b);
    require(node(a).shape == node(b).shape,
            "sub: shape mismatch " + Tensor::zeros(node(a).shape).shape_str() + " vs " +
                Tensor::zeros(node(b).shape).shape_str() + " feeding node sub#" +
                std::to_string(nodes_.size()));
    Node n;
    n.kind = OpKind::Sub;
    n.in0 = a;
    n.in1 = b;
    n.shape = node(a).shape;
    return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
    FEDSIM_CHECK_ID(a);
    FEDSIM_CHECK_ID(b);
    require(node(a).shape == node(b).shape,
            "mul: shape mismatch " + Tensor::zeros(node(a).shape).shape_str() + " vs " +
                Tensor::zeros(node(b).shape).shape_str() + " feeding node mul#" +
                std::to_string(nodes_.size()));
    Node n;
    n.kind = OpKind::Mul;
    n.in0 = a;
    n.in1 = b;
    n.shape = node(a).shape;
    return push(std::move(n));
}

NodeId Graph::divide(NodeId a, NodeId b) {
    FEDSIM_CHECK_ID(a);
    FEDSIM_CHECK_ID(b);
    require(node(a).shape == node(b).shape,
            "div: shape mismatch " + Tensor::zeros(node(a).shape).shape_str() + " vs " +
                Tensor::zeros(node(b).shape).shape_str() + " feeding node div#" +
                std::to_string(nodes_.size()));
    Node n;
    n.kind = OpKind::Div;
    n.in0 = a;
    n.in1 = b;
    n.shape = node(a).shape;
    return push(std::move(n));
}

NodeId Graph::add_rowvec(NodeId a, NodeId bias) {
    FEDSIM_CHECK_ID(a);
    FEDSIM_CHECK_ID(bias);
    require(node(a).shape.size() == 2, "add_rowvec: matrix input must be rank 2 at node #" +
                                           std::to_string(nodes_.size()));
    require(node(bias).shape.size() == 1 && node(bias).shape[0] == node(a).shape[1],
            "add_rowvec: bias length must equal column count at node #" +
                std::to_string(nodes_.size()));
    Node n;
    n.kind = OpKind::AddRowVec;
    n.in0 = a;
    n.in1 = bias;
    n.shape = node(a).shape;
    return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
    FEDSIM_CHECK_ID(a);
    FEDSIM_CHECK_ID(b);
    require(node(a).shape.size() == 2 && node(b).shape.size() == 2,
            "matmul: both inputs must be rank 2 at node matmul#" + std::to_string(nodes_.size()));
    require(node(a).shape[1] == node(b).shape[0],
            "matmul: inner dimensions " + std::to_string(node(a).shape[1]) + " vs " +
                std::to_string(node(b).shape[0]) + " at node matmul#" +
                std::to_string(nodes_.size()));
    Node n;
    n.kind = OpKind::MatMul;
    n.in0 = a;
    n.in1 = b;
    n.shape = {node(a).shape[0], node(b).shape[1]};
    return push(std::move(n));
}

NodeId Graph::transpose(NodeId a) {
    FEDSIM_CHECK_ID(a);
    require(node(a).shape.size() == 2,
            "transpose: input must be rank 2 at node #" + std::to_string(nodes_.size()));
    Node n;
    n.kind = OpKind::Transpose;
    n.in0 = a;
    n.shape = {node(a).shape[1], node(a).shape[0]};
    return push(std::move(n));
}

NodeId Graph::relu(NodeId a) {
    FEDSIM_CHECK_ID(a);
    Node n;
    n.kind = OpKind::Relu;
    n.in0 = a;
    n.shape = node(a).shape;
    return push(std::move(n));
}

NodeId Graph::tanh_(NodeId a) {
    FEDSIM_CHECK_ID(a);
    Node n;
    n.kind = OpKind::Tanh;
    n.in0 = a;
    n.shape = node(a).shape;
    return push(std::move(n));
}

NodeId Graph::square(NodeId a) {
    FEDSIM_CHECK_ID(a);
    Node n;
    n.kind = OpKind::Square;
    n.in0 = a;
    n.shape = node(a).shape;
    return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double c) {
    FEDSIM_CHECK_ID(a);
    Node n;
    n.kind = OpKind::Scale;
    n.in0 = a;
    n.carg = c;
    n.shape = node(a).shape;
    return push(std::move(n));
}

NodeId Graph::add_scalar(NodeId a, double c) {
    FEDSIM_CHECK_ID(a);
    Node n;
    n.kind = OpKind::AddScalar;
    n.in0 = a;
    n.carg = c;
    n.shape = node(a).shape;
    return push(std::move(n));
}

NodeId Graph::sum(NodeId a) {
    FEDSIM_CHECK_ID(a);
    Node n;
    n.kind = OpKind::Sum;
    n.in0 = a;
    n.shape = {1};
    return push(std::move(n));
}

NodeId Graph::mean(NodeId a) {
    FEDSIM_CHECK_ID(a);
    Node n;
    n.kind = OpKind::Mean;
    n.in0 = a;
    n.shape = {1};
    return push(std::move(n));
}

NodeId Graph::col_sum(NodeId a) {
    FEDSIM_CHECK_ID(a);
    require(node(a).shape.size() == 2,
            "col_sum: input must be rank 2 at node #" + std::to_string(nodes_.size()));
    Node n;
    n.kind = OpKind::ColSum;
    n.in0 = a;
    n.shape = {node(a).shape[1]};
    return push(std::move(n));
}

NodeId Graph::col_norm(NodeId a) {
    FEDSIM_CHECK_ID(a);
    require(node(a).shape.size() == 2,
            "col_norm: input must be rank 2 at node #" + std::to_string(nodes_.size()));
    Node n;
    n.kind = OpKind::ColNorm;
    n.in0 = a;
    n.shape = {node(a).shape[1]};
    return push(std::move(n));
}

NodeId Graph::reshape(NodeId a, std::vector<std::size_t> shape) {
    FEDSIM_CHECK_ID(a);
    require(shape_size(shape) == shape_size(node(a).shape),
            "reshape: element count mismatch at node reshape#" + std::to_string(nodes_.size()));
    Node n;
    n.kind = OpKind::Reshape;
    n.in0 = a;
    n.shape = std::move(shape);
    return push(std::move(n));
}

NodeId Graph::log_softmax(NodeId a) {
    FEDSIM_CHECK_ID(a);
    require(node(a).shape.size() == 2,
            "log_softmax: input must be rank 2 at node #" + std::to_string(nodes_.size()));
    Node n;
    n.kind = OpKind::LogSoftmax;
    n.in0 = a;
    n.shape = node(a).shape;
    return push(std::move(n));
}

NodeId Graph::nll_loss(NodeId log_probs, std::vector<int> labels) {
    FEDSIM_CHECK_ID(log_probs);
    require(node(log_probs).shape.size() == 2,
            "nll_loss: log-probs must be rank 2 at node #" + std::to_string(nodes_.size()));
    const std::size_t rows = node(log_probs).shape[0];
    const std::size_t cols = node(log_probs).shape[1];
    if (labels.size() != rows) {
        throw ContractError("nll_loss: " + std::to_string(labels.size()) + " labels for " +
                            std::to_string(rows) + " rows");
    }
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= cols) {
            throw ContractError("nll_loss: label " + std::to_string(y) + " out of range [0, " +
                                std::to_string(cols) + ")");
        }
    }
    Node n;
    n.kind = OpKind::NllLoss;
    n.in0 = log_probs;
    n.labels = std::move(labels);
    n.shape = {1};
    return push(std::move(n));
}

void Graph::set_value(NodeId leaf, Tensor value) {
    FEDSIM_CHECK_ID(leaf);
    Node& n = node(leaf);
    if (n.kind != OpKind::Constant && n.kind != OpKind::Parameter) {
        throw StructuralError("graph: set_value on non-leaf " + describe(n));
    }
    if (value.shape() != n.shape) {
        throw StructuralError("graph: set_value shape mismatch on " + describe(n) + ": " +
                              value.shape_str());
    }
    n.value = std::move(value);
    evaluated_upto_ = std::min(evaluated_upto_, leaf - 1);
}

void Graph::set_labels(NodeId nll_node, std::vector<int> labels) {
    FEDSIM_CHECK_ID(nll_node);
    Node& n = node(nll_node);
    if (n.kind != OpKind::NllLoss) {
        throw StructuralError("graph: set_labels on " + describe(n));
    }
    if (labels.size() != node(n.in0).shape[0]) {
        throw ContractError("nll_loss: " + std::to_string(labels.size()) + " labels for " +
                            std::to_string(node(n.in0).shape[0]) + " rows");
    }
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= node(n.in0).shape[1]) {
            throw ContractError("nll_loss: label " + std::to_string(y) + " out of range");
        }
    }
    n.labels = std::move(labels);
    evaluated_upto_ = std::min(evaluated_upto_, nll_node - 1);
}

void Graph::forward_one(Node& n) {
    if (n.kind == OpKind::Constant || n.kind == OpKind::Parameter) {
        return;  // leaves carry their bound value
    }
    const Tensor* a = n.in0 >= 0 ? &node(n.in0).value : nullptr;
    const Tensor* b = n.in1 >= 0 ? &node(n.in1).value : nullptr;
    Tensor& out = n.value;
    if (out.shape() != n.shape) out = Tensor::zeros(n.shape);

    switch (n.kind) {
        case OpKind::Constant:
        case OpKind::Parameter:
            return;
        case OpKind::Add:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*a)[i] + (*b)[i];
            break;
        case OpKind::Sub:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*a)[i] - (*b)[i];
            break;
        case OpKind::Mul:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*a)[i] * (*b)[i];
            break;
        case OpKind::Div:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*a)[i] / (*b)[i];
            break;
        case OpKind::AddRowVec: {
            const std::size_t rows = n.shape[0], cols = n.shape[1];
            for (std::size_t r = 0; r < rows; ++r) {
                const double* ap = a->data() + r * cols;
                double* op = out.data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) op[c] = ap[c] + (*b)[c];
            }
            break;
        }
        case OpKind::MatMul: {
            const std::size_t rows = n.shape[0], cols = n.shape[1], inner = node(n.in0).shape[1];
            std::fill(out.data(), out.data() + out.size(), 0.0);
            for (std::size_t i = 0; i < rows; ++i) {
                const double* ap = a->data() + i * inner;
                double* op = out.data() + i * cols;
                for (std::size_t k = 0; k < inner; ++k) {
                    const double aik = ap[k];
                    const double* bp = b->data() + k * cols;
                    for (std::size_t j = 0; j < cols; ++j) op[j] += aik * bp[j];
                }
            }
            break;
        }
        case OpKind::Transpose: {
            const std::size_t rows = n.shape[0], cols = n.shape[1];
            for (std::size_t i = 0; i < rows; ++i) {
                for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = (*a)[j * rows + i];
            }
            break;
        }
        case OpKind::Relu:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*a)[i] > 0.0 ? (*a)[i] : 0.0;
            break;
        case OpKind::Tanh:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh((*a)[i]);
            break;
        case OpKind::Square:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*a)[i] * (*a)[i];
            break;
        case OpKind::Scale:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = n.carg * (*a)[i];
            break;
        case OpKind::AddScalar:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*a)[i] + n.carg;
            break;
        case OpKind::Sum: {
            double s = 0.0;
            for (std::size_t i = 0; i < a->size(); ++i) s += (*a)[i];
            out[0] = s;
            break;
        }
        case OpKind::Mean: {
            double s = 0.0;
            for (std::size_t i = 0; i < a->size(); ++i) s += (*a)[i];
            out[0] = s / static_cast<double>(a->size());
            break;
        }
        case OpKind::ColSum: {
            const std::size_t rows = node(n.in0).shape[0], cols = n.shape[0];
            std::fill(out.data(), out.data() + cols, 0.0);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* ap = a->data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) out[c] += ap[c];
            }
            break;
        }
        case OpKind::ColNorm: {
            const std::size_t rows = node(n.in0).shape[0], cols = n.shape[0];
            std::fill(out.data(), out.data() + cols, 0.0);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* ap = a->data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) out[c] += ap[c] * ap[c];
            }
            for (std::size_t c = 0; c < cols; ++c) out[c] = std::sqrt(out[c]);
            break;
        }
        case OpKind::Reshape:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*a)[i];
            break;
        case OpKind::LogSoftmax: {
            const std::size_t rows = n.shape[0], cols = n.shape[1];
            for (std::size_t r = 0; r < rows; ++r) {
                const double* ap = a->data() + r * cols;
                double* op = out.data() + r * cols;
                double m = ap[0];
                for (std::size_t c = 1; c < cols; ++c) m = std::max(m, ap[c]);
                double s = 0.0;
                for (std::size_t c = 0; c < cols; ++c) s += std::exp(ap[c] - m);
                const double lse = m + std::log(s);
                for (std::size_t c = 0; c < cols; ++c) op[c] = std::max(ap[c] - lse, kLogFloor);
            }
            break;
        }
        case OpKind::NllLoss: {
            const std::size_t rows = node(n.in0).shape[0], cols = node(n.in0).shape[1];
            double s = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
                s += (*a)[r * cols + static_cast<std::size_t>(n.labels[r])];
            }
            out[0] = -s / static_cast<double>(rows);
            break;
        }
    }
    if (!out.all_finite()) {
        throw NumericError("graph: non-finite value produced by " + describe(n));
    }
}

const Tensor& Graph::evaluate(NodeId root) {
    FEDSIM_CHECK_ID(root);
    for (NodeId id = evaluated_upto_ + 1; id <= root; ++id) forward_one(node(id));
    evaluated_upto_ = std::max(evaluated_upto_, root);
    return node(root).value;
}

const Tensor& Graph::value(NodeId id) const {
    FEDSIM_CHECK_ID(id);
    return node(id).value;
}

const std::vector<std::size_t>& Graph::shape_of(NodeId id) const {
    FEDSIM_CHECK_ID(id);
    return node(id).shape;
}

void Graph::backward_one(NodeId id, const Tensor& g) {
    Node& n = node(id);
    const Tensor* a = n.in0 >= 0 ? &node(n.in0).value : nullptr;
    const Tensor* b = n.in1 >= 0 ? &node(n.in1).value : nullptr;
    Tensor* da = n.in0 >= 0 ? &adjoints_[static_cast<std::size_t>(n.in0)] : nullptr;
    Tensor* db = n.in1 >= 0 ? &adjoints_[static_cast<std::size_t>(n.in1)] : nullptr;

    switch (n.kind) {
        case OpKind::Constant:
        case OpKind::Parameter:
            return;
        case OpKind::Add:
            for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
            for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i];
            break;
        case OpKind::Sub:
            for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
            for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] -= g[i];
            break;
        case OpKind::Mul:
            for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * (*b)[i];
            for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * (*a)[i];
            break;
        case OpKind::Div:
            for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] / (*b)[i];
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*db)[i] -= g[i] * (*a)[i] / ((*b)[i] * (*b)[i]);
            }
            break;
        case OpKind::AddRowVec: {
            const std::size_t rows = n.shape[0], cols = n.shape[1];
            for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
            for (std::size_t r = 0; r < rows; ++r) {
                const double* gp = g.data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) (*db)[c] += gp[c];
            }
            break;
        }
        case OpKind::MatMul: {
            // dA = g B^T, dB = A^T g
            const std::size_t rows = n.shape[0], cols = n.shape[1], inner = node(n.in0).shape[1];
            for (std::size_t i = 0; i < rows; ++i) {
                const double* gp = g.data() + i * cols;
                double* dap = da->data() + i * inner;
                for (std::size_t k = 0; k < inner; ++k) {
                    const double* bp = b->data() + k * cols;
                    double s = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) s += gp[j] * bp[j];
                    dap[k] += s;
                }
            }
            for (std::size_t i = 0; i < rows; ++i) {
                const double* ap = a->data() + i * inner;
                const double* gp = g.data() + i * cols;
                for (std::size_t k = 0; k < inner; ++k) {
                    double* dbp = db->data() + k * cols;
                    const double aik = ap[k];
                    for (std::size_t j = 0; j < cols; ++j) dbp[j] += aik * gp[j];
                }
            }
            break;
        }
        case OpKind::Transpose: {
            const std::size_t rows = n.shape[0], cols = n.shape[1];
            for (std::size_t i = 0; i < rows; ++i) {
                for (std::size_t j = 0; j < cols; ++j) (*da)[j * rows + i] += g[i * cols + j];
            }
            break;
        }
        case OpKind::Relu:
            for (std::size_t i = 0; i < g.size(); ++i) {
                if ((*a)[i] > 0.0) (*da)[i] += g[i];  // subgradient 0 at the kink
            }
            break;
        case OpKind::Tanh:
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double t = n.value[i];
                (*da)[i] += g[i] * (1.0 - t * t);
            }
            break;
        case OpKind::Square:
            for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * 2.0 * (*a)[i];
            break;
        case OpKind::Scale:
            for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += n.carg * g[i];
            break;
        case OpKind::AddScalar:
            for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
            break;
        case OpKind::Sum:
            for (std::size_t i = 0; i < da->size(); ++i) (*da)[i] += g[0];
            break;
        case OpKind::Mean: {
            const double gi = g[0] / static_cast<double>(da->size());
            for (std::size_t i = 0; i < da->size(); ++i) (*da)[i] += gi;
            break;
        }
        case OpKind::ColSum: {
            const std::size_t rows = node(n.in0).shape[0], cols = n.shape[0];
            for (std::size_t r = 0; r < rows; ++r) {
                double* dap = da->data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) dap[c] += g[c];
            }
            break;
        }
        case OpKind::ColNorm: {
            // d/dx sqrt(sum x^2) = x / norm; zero columns take subgradient 0
            const std::size_t rows = node(n.in0).shape[0], cols = n.shape[0];
            for (std::size_t r = 0; r < rows; ++r) {
                const double* ap = a->data() + r * cols;
                double* dap = da->data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) {
                    const double norm = n.value[c];
                    if (norm > 0.0) dap[c] += g[c] * ap[c] / norm;
                }
            }
            break;
        }
        case OpKind::Reshape:
            for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
            break;
        case OpKind::LogSoftmax: {
            const std::size_t rows = n.shape[0], cols = n.shape[1];
            for (std::size_t r = 0; r < rows; ++r) {
                const double* ap = a->data() + r * cols;
                const double* gp = g.data() + r * cols;
                double* dap = da->data() + r * cols;
                double m = ap[0];
                for (std::size_t c = 1; c < cols; ++c) m = std::max(m, ap[c]);
                double s = 0.0;
                for (std::size_t c = 0; c < cols; ++c) s += std::exp(ap[c] - m);
                const double lse = m + std::log(s);
                // clamped entries are constants of the input
                double gsum = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    if (ap[c] - lse >= kLogFloor) gsum += gp[c];
                }
                for (std::size_t c = 0; c < cols; ++c) {
                    const double geff = (ap[c] - lse >= kLogFloor) ? gp[c] : 0.0;
                    dap[c] += geff - std::exp(ap[c] - lse) * gsum;
                }
            }
            break;
        }
        case OpKind::NllLoss: {
            const std::size_t rows = node(n.in0).shape[0], cols = node(n.in0).shape[1];
            const double gi = g[0] / static_cast<double>(rows);
            for (std::size_t r = 0; r < rows; ++r) {
                (*da)[r * cols + static_cast<std::size_t>(n.labels[r])] -= gi;
            }
            break;
        }
    }
}

ParamSet Graph::gradients(NodeId scalar_root) {
    FEDSIM_CHECK_ID(scalar_root);
    evaluate(scalar_root);
    if (shape_size(node(scalar_root).shape) != 1) {
        throw ContractError("gradients: root " + describe(node(scalar_root)) +
                            " is not scalar-valued");
    }

    const std::size_t live = static_cast<std::size_t>(scalar_root) + 1;
    adjoints_.resize(live);
    for (std::size_t i = 0; i < live; ++i) {
        if (adjoints_[i].shape() != nodes_[i].shape) {
            adjoints_[i] = Tensor::zeros(nodes_[i].shape);
        } else {
            std::fill(adjoints_[i].data(), adjoints_[i].data() + adjoints_[i].size(), 0.0);
        }
    }
    adjoints_[static_cast<std::size_t>(scalar_root)][0] = 1.0;

    for (NodeId id = scalar_root; id >= 0; --id) {
        backward_one(id, adjoints_[static_cast<std::size_t>(id)]);
    }

    ParamSet grads;
    for (const auto& [name, id] : params_) {
        if (id <= scalar_root) {
            grads.add(name, adjoints_[static_cast<std::size_t>(id)]);
        } else {
            grads.add(name, Tensor::zeros(node(id).shape));
        }
        if (!grads.entries().back().second.all_finite()) {
            throw NumericError("graph: non-finite gradient for parameter '" + name + "'");
        }
    }
    return grads;
}

NodeId Graph::param_node(const std::string& name) const {
    for (const auto& [pname, id] : params_) {
        if (pname == name) return id;
    }
    throw StructuralError("graph: no parameter '" + name + "'");
}

ParamSet Graph::current_params() const {
    ParamSet out;
    for (const auto& [name, id] : params_) out.add(name, node(id).value);
    return out;
}

void Graph::apply_sgd(const ParamSet& grads, double eta) {
    if (grads.size() != params_.size()) {
        throw StructuralError("apply_sgd: gradient set has " + std::to_string(grads.size()) +
                              " entries, graph has " + std::to_string(params_.size()));
    }
    for (std::size_t k = 0; k < params_.size(); ++k) {
        const auto& [gname, gtensor] = grads.entries()[k];
        if (gname != params_[k].first) {
            throw StructuralError("apply_sgd: entry order mismatch at '" + gname + "'");
        }
        Tensor& w = node(params_[k].second).value;
        if (!w.same_shape(gtensor)) {
            throw StructuralError("apply_sgd: shape mismatch at '" + gname + "'");
        }
        for (std::size_t j = 0; j < w.size(); ++j) w[j] -= eta * gtensor[j];
    }
    evaluated_upto_ = -1;
}

#undef FEDSIM_CHECK_ID

} // namespace fedsim

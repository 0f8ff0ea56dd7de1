#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedsim/graph.hpp"
#include "fedsim/params.hpp"

namespace fedsim {

// Architecture hyper-parameters. proj_dim is fixed for a whole federation
// run: local and global projector outputs must live in the same space for
// their cross-correlation to make sense.
struct ModelSpec {
    std::size_t channels = 3;
    std::size_t height = 16;
    std::size_t width = 16;
    std::vector<std::size_t> encoder_widths = {64, 32};
    std::size_t repr_dim = 32;
    std::size_t proj_dim = 16;
    std::size_t n_classes = 4;
    std::size_t n_centers = 3;

    std::size_t input_size() const { return channels * height * width; }
    void validate() const;
};

// Weight-name prefixes for the five model segments. The encoder segment of a
// pretrained model is what transplants into a fresh federation model.
namespace seg {
inline constexpr const char* encoder = "enc.";
inline constexpr const char* projector = "proj.";
inline constexpr const char* output = "out.";
inline constexpr const char* center_head = "cls.";
inline constexpr const char* restore_head = "rec.";
} // namespace seg

// Glorot-uniform weights, zero biases; deterministic per (spec, seed).
ParamSet init_weights(const ModelSpec& spec, std::uint64_t seed);

// Graph-side model builder. Weights enter the graph as parameters when
// trainable, as constants otherwise; a constant subtree can never receive
// gradients, which is how the global model stays frozen during local steps.
class ModelGraph {
public:
    ModelGraph(Graph& g, const ModelSpec& spec, const ParamSet& weights, bool trainable);

    // register every weight up front so gradient sets stay shape-compatible
    // with the full ParamSet even when a head is unused
    void register_all();

    NodeId weight(const std::string& name);

    NodeId encoder(NodeId x);       // (b, C*H*W) -> (b, repr_dim)
    NodeId projector(NodeId rep);   // (b, repr_dim) -> (b, proj_dim)
    NodeId classifier(NodeId rep);  // (b, repr_dim) -> (b, n_classes) logits
    NodeId center_head(NodeId rep); // (b, repr_dim) -> (b, n_centers) logits
    NodeId restorer(NodeId rep);    // (b, repr_dim) -> (b, C*H*W)

    Graph& graph() { return g_; }

private:
    NodeId dense(NodeId x, const std::string& w_name, const std::string& b_name);

    Graph& g_;
    const ModelSpec& spec_;
    const ParamSet& weights_;
    bool trainable_;
    std::map<std::string, NodeId> bound_;
};

// Plain forward passes: pure functions of (inputs, weights).
Tensor encode(const Tensor& x, const ModelSpec& spec, const ParamSet& w);
Tensor project(const Tensor& rep, const ModelSpec& spec, const ParamSet& w);
Tensor classify(const Tensor& rep, const ModelSpec& spec, const ParamSet& w);
Tensor center_classify(const Tensor& rep, const ModelSpec& spec, const ParamSet& w);
Tensor restore(const Tensor& rep, const ModelSpec& spec, const ParamSet& w);  // (b, C, H, W)

// argmax per row; ties break toward the lowest class index
std::vector<int> argmax_rows(const Tensor& logits);

} // namespace fedsim

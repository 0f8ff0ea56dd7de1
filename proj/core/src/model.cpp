#include "fedsim/model.hpp"

#include <cmath>

#include "fedsim/errors.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

void ModelSpec::validate() const {
    auto positive = [](std::size_t v, const char* what) {
        if (v == 0) throw ConfigError(std::string("model.") + what + " must be >= 1");
    };
    positive(channels, "channels");
    positive(height, "height");
    positive(width, "width");
    positive(repr_dim, "repr_dim");
    positive(proj_dim, "proj_dim");
    positive(n_classes, "n_classes");
    positive(n_centers, "n_centers");
    for (std::size_t w : encoder_widths) positive(w, "encoder_widths[]");
}

namespace {

// layer name/shape table, in ParamSet entry order
struct LayerDef {
    std::string w_name, b_name;
    std::size_t fan_in, fan_out;
};

std::vector<LayerDef> layer_table(const ModelSpec& spec) {
    std::vector<LayerDef> defs;
    std::size_t in = spec.input_size();
    for (std::size_t i = 0; i < spec.encoder_widths.size(); ++i) {
        const std::string idx = std::to_string(i);
        defs.push_back({std::string(seg::encoder) + "w" + idx,
                        std::string(seg::encoder) + "b" + idx, in, spec.encoder_widths[i]});
        in = spec.encoder_widths[i];
    }
    const std::string last = std::to_string(spec.encoder_widths.size());
    defs.push_back({std::string(seg::encoder) + "w" + last, std::string(seg::encoder) + "b" + last,
                    in, spec.repr_dim});
    defs.push_back({std::string(seg::projector) + "w0", std::string(seg::projector) + "b0",
                    spec.repr_dim, spec.repr_dim});
    defs.push_back({std::string(seg::projector) + "w1", std::string(seg::projector) + "b1",
                    spec.repr_dim, spec.proj_dim});
    defs.push_back({std::string(seg::output) + "w", std::string(seg::output) + "b", spec.repr_dim,
                    spec.n_classes});
    defs.push_back({std::string(seg::center_head) + "w", std::string(seg::center_head) + "b",
                    spec.repr_dim, spec.n_centers});
    defs.push_back({std::string(seg::restore_head) + "w", std::string(seg::restore_head) + "b",
                    spec.repr_dim, spec.input_size()});
    return defs;
}

} // namespace

ParamSet init_weights(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(derive_seed(seed, {0x1717}));
    ParamSet out;
    for (const auto& def : layer_table(spec)) {
        const double bound = std::sqrt(6.0 / static_cast<double>(def.fan_in + def.fan_out));
        Tensor w({def.fan_in, def.fan_out});
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
        out.add(def.w_name, std::move(w));
        out.add(def.b_name, Tensor::zeros({def.fan_out}));
    }
    return out;
}

ModelGraph::ModelGraph(Graph& g, const ModelSpec& spec, const ParamSet& weights, bool trainable)
    : g_(g), spec_(spec), weights_(weights), trainable_(trainable) {}

void ModelGraph::register_all() {
    for (const auto& [name, t] : weights_.entries()) weight(name);
}

NodeId ModelGraph::weight(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const Tensor& t = weights_.get(name);
    NodeId id = trainable_ ? g_.parameter(name, t) : g_.constant(t, name);
    bound_.emplace(name, id);
    return id;
}

NodeId ModelGraph::dense(NodeId x, const std::string& w_name, const std::string& b_name) {
    return g_.add_rowvec(g_.matmul(x, weight(w_name)), weight(b_name));
}

NodeId ModelGraph::encoder(NodeId x) {
    const auto& shape = g_.shape_of(x);
    if (shape.size() != 2 || shape[1] != spec_.input_size()) {
        throw StructuralError("encoder: expected (batch, " + std::to_string(spec_.input_size()) +
                              ") input, got " + Tensor::zeros(shape).shape_str());
    }
    NodeId h = x;
    for (std::size_t i = 0; i < spec_.encoder_widths.size(); ++i) {
        const std::string idx = std::to_string(i);
        h = g_.relu(dense(h, std::string(seg::encoder) + "w" + idx,
                          std::string(seg::encoder) + "b" + idx));
    }
    const std::string last = std::to_string(spec_.encoder_widths.size());
    return dense(h, std::string(seg::encoder) + "w" + last, std::string(seg::encoder) + "b" + last);
}

NodeId ModelGraph::projector(NodeId rep) {
    NodeId h = g_.relu(dense(rep, std::string(seg::projector) + "w0",
                             std::string(seg::projector) + "b0"));
    return dense(h, std::string(seg::projector) + "w1", std::string(seg::projector) + "b1");
}

NodeId ModelGraph::classifier(NodeId rep) {
    return dense(rep, std::string(seg::output) + "w", std::string(seg::output) + "b");
}

NodeId ModelGraph::center_head(NodeId rep) {
    return dense(rep, std::string(seg::center_head) + "w", std::string(seg::center_head) + "b");
}

NodeId ModelGraph::restorer(NodeId rep) {
    return dense(rep, std::string(seg::restore_head) + "w", std::string(seg::restore_head) + "b");
}

namespace {

Tensor eval_head(const Tensor& input, const ModelSpec& spec, const ParamSet& w,
                 NodeId (ModelGraph::*head)(NodeId)) {
    Graph g;
    ModelGraph m(g, spec, w, /*trainable=*/false);
    NodeId x = g.constant(input, "input");
    NodeId out = (m.*head)(x);
    return g.evaluate(out);
}

} // namespace

Tensor encode(const Tensor& x, const ModelSpec& spec, const ParamSet& w) {
    return eval_head(x, spec, w, &ModelGraph::encoder);
}

Tensor project(const Tensor& rep, const ModelSpec& spec, const ParamSet& w) {
    return eval_head(rep, spec, w, &ModelGraph::projector);
}

Tensor classify(const Tensor& rep, const ModelSpec& spec, const ParamSet& w) {
    return eval_head(rep, spec, w, &ModelGraph::classifier);
}

Tensor center_classify(const Tensor& rep, const ModelSpec& spec, const ParamSet& w) {
    return eval_head(rep, spec, w, &ModelGraph::center_head);
}

Tensor restore(const Tensor& rep, const ModelSpec& spec, const ParamSet& w) {
    Tensor flat = eval_head(rep, spec, w, &ModelGraph::restorer);
    return Tensor({flat.rows(), spec.channels, spec.height, spec.width},
                  std::vector<double>(flat.data(), flat.data() + flat.size()));
}

std::vector<int> argmax_rows(const Tensor& logits) {
    const std::size_t rows = logits.rows(), cols = logits.cols();
    std::vector<int> out(rows, 0);
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < cols; ++c) {
            if (logits.at(r, c) > logits.at(r, best)) best = c;
        }
        out[r] = static_cast<int>(best);
    }
    return out;
}

} // namespace fedsim

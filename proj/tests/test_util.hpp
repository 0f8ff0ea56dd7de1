#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fedsim/model.hpp"
#include "fedsim/params.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/synth.hpp"
#include "fedsim/tensor.hpp"

namespace fedtest {

using namespace fedsim;

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

inline ParamSet random_like(const ParamSet& ref, Rng& rng, double lo = -1.0, double hi = 1.0) {
    ParamSet out = ref;
    for (auto& [name, t] : out.entries()) {
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    }
    return out;
}

inline double max_abs(const Tensor& t) {
    double m = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) m = std::max(m, std::abs(t[i]));
    return m;
}

// max |a - b| over all entries, scaled by the largest magnitude present
// (floored at 1e-6 so an all-zero pair compares by absolute error)
inline double max_rel_err(const ParamSet& a, const ParamSet& b) {
    double diff = 0.0, scale = 1e-6;
    for (std::size_t e = 0; e < a.size(); ++e) {
        const Tensor& ta = a.entries()[e].second;
        const Tensor& tb = b.entries()[e].second;
        for (std::size_t i = 0; i < ta.size(); ++i) {
            diff = std::max(diff, std::abs(ta[i] - tb[i]));
            scale = std::max({scale, std::abs(ta[i]), std::abs(tb[i])});
        }
    }
    return diff / scale;
}

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1e-12, std::abs(a), std::abs(b)});
}

// ---- independent straight-line model forward (oracle + kink margins) ----

inline Tensor dense_oracle(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor out({x.rows(), w.cols()});
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) {
            double s = b[j];
            for (std::size_t k = 0; k < x.cols(); ++k) s += x.at(i, k) * w.at(k, j);
            out.at(i, j) = s;
        }
    }
    return out;
}

struct ForwardTrace {
    Tensor out;
    double min_relu_margin = 1e300;  // smallest |pre-activation| feeding a relu
};

inline ForwardTrace encode_oracle(const ModelSpec& spec, const ParamSet& w, const Tensor& x) {
    ForwardTrace tr;
    Tensor h = x;
    for (std::size_t i = 0; i < spec.encoder_widths.size(); ++i) {
        const std::string idx = std::to_string(i);
        h = dense_oracle(h, w.get("enc.w" + idx), w.get("enc.b" + idx));
        for (std::size_t j = 0; j < h.size(); ++j) {
            tr.min_relu_margin = std::min(tr.min_relu_margin, std::abs(h[j]));
            h[j] = std::max(h[j], 0.0);
        }
    }
    const std::string last = std::to_string(spec.encoder_widths.size());
    tr.out = dense_oracle(h, w.get("enc.w" + last), w.get("enc.b" + last));
    return tr;
}

inline ForwardTrace project_oracle(const ModelSpec& spec, const ParamSet& w, const Tensor& rep) {
    ForwardTrace tr;
    Tensor h = dense_oracle(rep, w.get("proj.w0"), w.get("proj.b0"));
    for (std::size_t j = 0; j < h.size(); ++j) {
        tr.min_relu_margin = std::min(tr.min_relu_margin, std::abs(h[j]));
        h[j] = std::max(h[j], 0.0);
    }
    tr.out = dense_oracle(h, w.get("proj.w1"), w.get("proj.b1"));
    return tr;
}

// smallest relu pre-activation margin over encoder+projector for a set of
// weights; finite differences are only a valid oracle away from the kinks
inline double relu_margin(const ModelSpec& spec, const ParamSet& w, const Tensor& x,
                          bool with_projector) {
    ForwardTrace enc = encode_oracle(spec, w, x);
    double margin = enc.min_relu_margin;
    if (with_projector) {
        margin = std::min(margin, project_oracle(spec, w, enc.out).min_relu_margin);
    }
    return margin;
}

// ---- tiny fixtures ----

inline ModelSpec tiny_spec() {
    ModelSpec spec;
    spec.channels = 3;
    spec.height = 4;
    spec.width = 4;
    spec.encoder_widths = {6};
    spec.repr_dim = 5;
    spec.proj_dim = 4;
    spec.n_classes = 3;
    spec.n_centers = 3;
    return spec;
}

inline std::vector<Sample> random_samples(const ModelSpec& spec, std::size_t n, Rng& rng,
                                          int center_id = 0) {
    std::vector<Sample> out;
    for (std::size_t i = 0; i < n; ++i) {
        Sample s;
        s.image = random_tensor({spec.channels, spec.height, spec.width}, rng, 0.0, 1.0);
        s.label = static_cast<int>(rng.below(spec.n_classes));
        s.center_id = center_id;
        out.push_back(std::move(s));
    }
    return out;
}

inline Tensor flatten_all(const std::vector<Sample>& samples) {
    std::vector<std::size_t> idx(samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return flatten_images(samples, idx);
}

inline std::vector<int> labels_all(const std::vector<Sample>& samples) {
    std::vector<int> out;
    for (const auto& s : samples) out.push_back(s.label);
    return out;
}

} // namespace fedtest

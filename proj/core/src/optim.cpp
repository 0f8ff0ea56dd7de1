#include "fedsim/optim.hpp"

#include "fedsim/errors.hpp"

namespace fedsim {

ParamSet sgd_step(const ParamSet& params, const ParamSet& grads, double eta) {
    if (eta <= 0.0) throw ContractError("sgd_step: learning rate must be positive");
    if (!params.shape_compatible(grads)) {
        throw StructuralError("sgd_step: params and grads are not shape-compatible");
    }
    ParamSet out = params;
    for (std::size_t e = 0; e < out.size(); ++e) {
        Tensor& w = out.entries()[e].second;
        const Tensor& g = grads.entries()[e].second;
        for (std::size_t j = 0; j < w.size(); ++j) w[j] -= eta * g[j];
    }
    return out;
}

ParamSet finite_diff_grad(const std::function<double(const ParamSet&)>& f,
                          const ParamSet& params, double eps) {
    if (eps <= 0.0) throw ContractError("finite_diff_grad: eps must be positive");
    ParamSet grads = params;
    ParamSet probe = params;
    for (std::size_t e = 0; e < params.size(); ++e) {
        Tensor& g = grads.entries()[e].second;
        Tensor& w = probe.entries()[e].second;
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double saved = w[j];
            w[j] = saved + eps;
            const double up = f(probe);
            w[j] = saved - eps;
            const double down = f(probe);
            w[j] = saved;
            g[j] = (up - down) / (2.0 * eps);
        }
    }
    return grads;
}

} // namespace fedsim

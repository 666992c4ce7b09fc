#pragma once

#include <functional>
#include <vector>

#include "moeroute/tensor.hpp"

namespace moeroute {

/// Central-difference gradient estimate (f(x+he) - f(x-he)) / 2h per coordinate.
/// `f` receives a perturbed copy; `x` itself is never modified.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double step) {
    if (!(step > 0.0)) throw ContractError("finite_diff_grad: step must be positive");
    std::vector<double> g(x.numel());
    Tensor probe = x.clone();
    auto pd = probe.mutable_data();
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double orig = pd[i];
        pd[i] = orig + step;
        const double fp = f(probe);
        pd[i] = orig - step;
        const double fm = f(probe);
        pd[i] = orig;
        g[i] = (fp - fm) / (2.0 * step);
    }
    return {x.shape(), std::move(g)};
}

}  // namespace moeroute

#include "uhr/uncertainty.hpp"

#include <cmath>

namespace uhr::uncertainty {

Tensor entropy_uncertainty(const Tensor& m, double eps) {
    if (eps <= 0.0) throw ConfigError("entropy_uncertainty eps must be > 0");
    const Tensor one_minus = sub(1.0, m);
    Tensor h = add(mul(m, log_eps(m, eps)), mul(one_minus, log_eps(one_minus, eps)));
    // With eps > 0 the raw value can dip a hair below 0; clamp restores the
    // [0,1] contract.
    return clamp(scalar_mul(h, -1.0 / std::log(2.0)), 0.0, 1.0);
}

Tensor resize_to_scale(const Tensor& m, int out_h, int out_w) {
    return bilinear_resize(m, out_h, out_w);
}

}  // namespace uhr::uncertainty

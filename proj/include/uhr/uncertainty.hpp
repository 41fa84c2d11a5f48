#pragma once

#include "uhr/tensor.hpp"

namespace uhr::uncertainty {

// Normalized binary entropy of a probability map, clamped to [0,1]:
//   U = -(m*log(m+eps) + (1-m)*log(1-m+eps)) / log 2
// Differentiable in m away from the clamp boundary. Works elementwise on any
// shape, so a whole [H,W] map goes through in one call.
Tensor entropy_uncertainty(const Tensor& m, double eps = 1e-8);

// Bilinear resize of a probability map to a pyramid scale; bilinear output
// stays inside [0,1].
Tensor resize_to_scale(const Tensor& m, int out_h, int out_w);

}  // namespace uhr::uncertainty

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "uhr/common.hpp"
#include "uhr/params.hpp"
#include "uhr/tensor.hpp"

namespace uhr::ughr {

// Per-block switches. The three enable flags mirror the runtime ablation
// axes: the hypergraph branch itself, uncertainty modulation of the
// participation logits, and the split into FG/BG prototype groups.
struct BlockConfig {
    int prototypes_per_group = 8;  // M
    double beta = 1.0;
    std::vector<int> dilations{1, 2};
    bool base_hr = true;
    bool unc_guidance = true;
    bool fgbg_groups = true;
    bool detach_uncertainty = false;
    double eps = 1e-8;
};

// Kernel size of the standard conv layer that replaces the hypergraph branch
// when base_hr is off: the odd k whose conv(D->D) parameter count is closest
// to the branch it replaces (ties go to the smaller k).
int equivalent_conv_kernel(int d, int m);

// Parameter count of the hypergraph branch (prototypes, offset generators,
// context attention, phi_e, phi_n) for one block of width d.
int64_t hypergraph_branch_params(int d, int m);

// Registers every parameter of one block under `prefix` ("<prefix>conv1_w",
// ...). Which parameters exist depends on the flags; see the audit test.
void add_block_params(ParamStore& store, const std::string& prefix, int d,
                      const BlockConfig& cfg, Rng& rng);

// Mask-guided pooling with M_i and 1-M_i as soft weights. A side whose weight
// mass degenerates (< 1e-6) falls back to the global mean.
std::pair<Tensor, Tensor> mce_contexts(const Tensor& feat, const Tensor& mhat_i);

// Bidirectional cross-attention over the 2-token sequence [c_fg, c_bg] with
// shared q/k/v projections and a residual add. Zero-initialized value
// projection makes this the identity at init.
std::pair<Tensor, Tensor> context_interact(Binding& p, const std::string& prefix,
                                           const Tensor& c_fg, const Tensor& c_bg);

// P = concat(P_fg_base + dP_fg, P_bg_base + dP_bg); rows 0..M-1 are FG.
Tensor dynamic_prototypes(Binding& p, const std::string& prefix, const Tensor& c_fg,
                          const Tensor& c_bg, int m);

// Participation matrix S in R^{N x 2M}: z = X P^T / sqrt(D), optionally
// modulated by z * 2^(beta*u) per node, then softmax over the node dimension
// of each hyperedge column. u is [N,1] or null.
Tensor participation(const Tensor& x, const Tensor& p, const Tensor* u, double beta,
                     bool unc_enabled);

// Two-step message passing: H_e = S^T X, X_e = S phi_e(H_e),
// X_hg = X + phi_n(X_e).
Tensor hypergraph_message_pass(Binding& p, const std::string& prefix, const Tensor& x,
                               const Tensor& s);

struct BlockDebug {
    Tensor participation;  // [N, 2M]
    Tensor prototypes;     // [2M, D]
};

// Full block: hypergraph branch (per flags) fused pixel-wise (elementwise
// add) with the two-conv dilated branch. Output shape equals input shape.
Tensor ughr_block(Binding& p, const std::string& prefix, const Tensor& d_tilde,
                  const Tensor& mhat_i, const BlockConfig& cfg, BlockDebug* dbg = nullptr);

}  // namespace uhr::ughr

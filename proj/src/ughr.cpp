#include "uhr/ughr.hpp"

#include <cmath>

#include "uhr/uncertainty.hpp"
#include "uhr/uoic.hpp"

namespace uhr::ughr {

namespace {

std::vector<double> gaussian(Rng& rng, int64_t n, double stddev) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal(0.0, stddev);
    return v;
}

// x [R, Din] * w [Din, Dout] + row-broadcast bias.
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    const int rows = x.shape[0];
    const Tensor ones = Tensor::full({rows, 1}, 1.0);
    return add(matmul(x, w), matmul(ones, reshape(b, {1, b.shape[0]})));
}

Tensor global_mean_context(const Tensor& feat) {
    return uoic::wmap(feat, Tensor::full({feat.shape[1], feat.shape[2]}, 1.0));
}

}  // namespace

int64_t hypergraph_branch_params(int d, int m) {
    const int64_t dd = static_cast<int64_t>(d);
    const int64_t protos = 2LL * m * dd;
    const int64_t offsets = 2LL * (dd * m * dd + m * dd);  // affine D -> M*D per group
    const int64_t attention = 3LL * dd * dd;               // q/k/v, no bias
    const int64_t phis = 2LL * (dd * dd + dd);             // phi_e, phi_n
    return protos + offsets + attention + phis;
}

int equivalent_conv_kernel(int d, int m) {
    const int64_t target = hypergraph_branch_params(d, m);
    int best_k = 1;
    int64_t best_diff = -1;
    for (int k = 1; k <= 15; k += 2) {
        const int64_t params = static_cast<int64_t>(k) * k * d * d + d;
        const int64_t diff = std::llabs(params - target);
        if (best_diff < 0 || diff < best_diff) {
            best_diff = diff;
            best_k = k;
        }
    }
    return best_k;
}

void add_block_params(ParamStore& store, const std::string& prefix, int d,
                      const BlockConfig& cfg, Rng& rng) {
    const int m = cfg.prototypes_per_group;
    if (m < 1) throw ConfigError("prototypes_per_group must be >= 1");
    if (cfg.beta < 0.0) throw ConfigError("beta must be >= 0");
    if (cfg.dilations.size() != 2) throw ConfigError("conv branch expects two dilation rates");
    const double he3 = std::sqrt(2.0 / (9.0 * d));

    store.add(prefix + "conv1_w", {d, d, 3, 3}, "ughr", gaussian(rng, 9LL * d * d, he3));
    store.add(prefix + "conv1_b", {d}, "ughr", std::vector<double>(d, 0.0));
    store.add(prefix + "conv2_w", {d, d, 3, 3}, "ughr", gaussian(rng, 9LL * d * d, he3));
    store.add(prefix + "conv2_b", {d}, "ughr", std::vector<double>(d, 0.0));

    if (!cfg.base_hr) {
        const int k = equivalent_conv_kernel(d, m);
        store.add(prefix + "equiv_w", {d, d, k, k}, "ughr",
                  gaussian(rng, static_cast<int64_t>(k) * k * d * d,
                           std::sqrt(2.0 / (static_cast<double>(k) * k * d))));
        store.add(prefix + "equiv_b", {d}, "ughr", std::vector<double>(d, 0.0));
        return;
    }

    const double proto_std = 1.0 / std::sqrt(static_cast<double>(d));
    if (cfg.fgbg_groups) {
        store.add(prefix + "proto_fg", {m, d}, "ughr", gaussian(rng, static_cast<int64_t>(m) * d, proto_std));
        store.add(prefix + "proto_bg", {m, d}, "ughr", gaussian(rng, static_cast<int64_t>(m) * d, proto_std));
    } else {
        store.add(prefix + "proto", {2 * m, d}, "ughr",
                  gaussian(rng, 2LL * m * d, proto_std));
    }
    store.add(prefix + "attn_q", {d, d}, "ughr", gaussian(rng, static_cast<int64_t>(d) * d, proto_std));
    store.add(prefix + "attn_k", {d, d}, "ughr", gaussian(rng, static_cast<int64_t>(d) * d, proto_std));
    store.add(prefix + "attn_v", {d, d}, "ughr", std::vector<double>(static_cast<size_t>(d) * d, 0.0));
    if (cfg.fgbg_groups) {
        store.add(prefix + "off_fg_w", {d, m * d}, "ughr",
                  std::vector<double>(static_cast<size_t>(d) * m * d, 0.0));
        store.add(prefix + "off_fg_b", {m * d}, "ughr", std::vector<double>(static_cast<size_t>(m) * d, 0.0));
        store.add(prefix + "off_bg_w", {d, m * d}, "ughr",
                  std::vector<double>(static_cast<size_t>(d) * m * d, 0.0));
        store.add(prefix + "off_bg_b", {m * d}, "ughr", std::vector<double>(static_cast<size_t>(m) * d, 0.0));
    } else {
        store.add(prefix + "off_w", {d, 2 * m * d}, "ughr",
                  std::vector<double>(static_cast<size_t>(d) * 2 * m * d, 0.0));
        store.add(prefix + "off_b", {2 * m * d}, "ughr",
                  std::vector<double>(static_cast<size_t>(2) * m * d, 0.0));
    }
    store.add(prefix + "phi_e_w", {d, d}, "ughr",
              gaussian(rng, static_cast<int64_t>(d) * d, std::sqrt(2.0 / d)));
    store.add(prefix + "phi_e_b", {d}, "ughr", std::vector<double>(d, 0.0));
    store.add(prefix + "phi_n_w", {d, d}, "ughr", std::vector<double>(static_cast<size_t>(d) * d, 0.0));
    store.add(prefix + "phi_n_b", {d}, "ughr", std::vector<double>(d, 0.0));
}

std::pair<Tensor, Tensor> mce_contexts(const Tensor& feat, const Tensor& mhat_i) {
    if (feat.rank() != 3) throw ShapeError("mce_contexts expects feat [D,h,w]");
    if (mhat_i.numel() != static_cast<int64_t>(feat.shape[1]) * feat.shape[2]) {
        throw ShapeError("mce_contexts mask does not match feature grid");
    }
    const Tensor inv = sub(1.0, mhat_i);
    double fg_mass = 0.0, bg_mass = 0.0;
    for (double v : mhat_i.values()) fg_mass += v;
    for (double v : inv.values()) bg_mass += v;

    Tensor c_fg = fg_mass < 1e-6 ? global_mean_context(feat) : uoic::wmap(feat, mhat_i);
    Tensor c_bg = bg_mass < 1e-6 ? global_mean_context(feat) : uoic::wmap(feat, inv);
    return {c_fg, c_bg};
}

namespace {

// One attention query over the token rows; shared projections.
Tensor attend(Binding& p, const std::string& prefix, const Tensor& query_row,
              const Tensor& tokens) {
    const int d = query_row.shape[1];
    const Tensor q = matmul(query_row, p(prefix + "attn_q"));
    const Tensor k = matmul(tokens, p(prefix + "attn_k"));
    const Tensor v = matmul(tokens, p(prefix + "attn_v"));
    const Tensor logits = scalar_mul(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
    const Tensor attn = softmax_over_axis(logits, 1);
    return matmul(attn, v);
}

}  // namespace

std::pair<Tensor, Tensor> context_interact(Binding& p, const std::string& prefix,
                                           const Tensor& c_fg, const Tensor& c_bg) {
    const int d = c_fg.shape[0];
    if (c_bg.shape[0] != d) throw ShapeError("context dims differ");
    const Tensor fg_row = reshape(c_fg, {1, d});
    const Tensor bg_row = reshape(c_bg, {1, d});
    const Tensor tokens = concat({fg_row, bg_row}, 0);
    const Tensor out_fg = add(fg_row, attend(p, prefix, fg_row, tokens));
    const Tensor out_bg = add(bg_row, attend(p, prefix, bg_row, tokens));
    return {reshape(out_fg, {d}), reshape(out_bg, {d})};
}

Tensor dynamic_prototypes(Binding& p, const std::string& prefix, const Tensor& c_fg,
                          const Tensor& c_bg, int m) {
    const int d = c_fg.shape[0];
    const Tensor off_fg =
        affine(reshape(c_fg, {1, d}), p(prefix + "off_fg_w"), p(prefix + "off_fg_b"));
    const Tensor off_bg =
        affine(reshape(c_bg, {1, d}), p(prefix + "off_bg_w"), p(prefix + "off_bg_b"));
    const Tensor p_fg = add(p(prefix + "proto_fg"), reshape(off_fg, {m, d}));
    const Tensor p_bg = add(p(prefix + "proto_bg"), reshape(off_bg, {m, d}));
    return concat({p_fg, p_bg}, 0);
}

Tensor participation(const Tensor& x, const Tensor& pr, const Tensor* u, double beta,
                     bool unc_enabled) {
    const int d = x.shape[1];
    Tensor z = scalar_mul(matmul(x, transpose(pr)), 1.0 / std::sqrt(static_cast<double>(d)));
    if (unc_enabled && u != nullptr) {
        const int cols = pr.shape[0];
        const Tensor u_mat = matmul(*u, Tensor::full({1, cols}, 1.0));
        z = mul(z, power_of_two(scalar_mul(u_mat, beta)));
    }
    return softmax_over_axis(z, 0);
}

Tensor hypergraph_message_pass(Binding& p, const std::string& prefix, const Tensor& x,
                               const Tensor& s) {
    const Tensor h_e = matmul(transpose(s), x);
    const Tensor phi_e = relu(affine(h_e, p(prefix + "phi_e_w"), p(prefix + "phi_e_b")));
    const Tensor x_e = matmul(s, phi_e);
    // phi_n keeps its affine on the outside so the zero-initialized output
    // layer still receives gradient through the inner relu.
    const Tensor phi_n = affine(relu(x_e), p(prefix + "phi_n_w"), p(prefix + "phi_n_b"));
    return add(x, phi_n);
}

Tensor ughr_block(Binding& p, const std::string& prefix, const Tensor& d_tilde,
                  const Tensor& mhat_i, const BlockConfig& cfg, BlockDebug* dbg) {
    if (d_tilde.rank() != 3) throw ShapeError("ughr_block expects [D,h,w]");
    const int d = d_tilde.shape[0], h = d_tilde.shape[1], w = d_tilde.shape[2];

    const Tensor conv1 =
        relu(conv2d(d_tilde, p(prefix + "conv1_w"), p(prefix + "conv1_b"), cfg.dilations[0]));
    const Tensor f_conv =
        relu(conv2d(conv1, p(prefix + "conv2_w"), p(prefix + "conv2_b"), cfg.dilations[1]));

    Tensor f_hg;
    if (cfg.base_hr) {
        const int m = cfg.prototypes_per_group;
        Tensor protos;
        if (cfg.fgbg_groups) {
            auto [c_fg, c_bg] = mce_contexts(d_tilde, mhat_i);
            auto [ci_fg, ci_bg] = context_interact(p, prefix, c_fg, c_bg);
            protos = dynamic_prototypes(p, prefix, ci_fg, ci_bg, m);
        } else {
            const Tensor c = global_mean_context(d_tilde);
            const Tensor row = reshape(c, {1, d});
            const Tensor ci = add(row, attend(p, prefix, row, row));
            const Tensor off = affine(ci, p(prefix + "off_w"), p(prefix + "off_b"));
            protos = add(p(prefix + "proto"), reshape(off, {2 * m, d}));
        }

        const int n = h * w;
        const Tensor x = transpose(reshape(d_tilde, {d, n}));  // row-major node order

        Tensor s;
        if (cfg.unc_guidance) {
            const Tensor m_src = cfg.detach_uncertainty ? detach(mhat_i) : mhat_i;
            const Tensor u_i = uncertainty::entropy_uncertainty(m_src, cfg.eps);
            const Tensor u_col = reshape(u_i, {n, 1});
            s = participation(x, protos, &u_col, cfg.beta, true);
        } else {
            s = participation(x, protos, nullptr, cfg.beta, false);
        }
        if (dbg) {
            dbg->participation = detach(s);
            dbg->prototypes = detach(protos);
        }
        const Tensor x_hg = hypergraph_message_pass(p, prefix, x, s);
        f_hg = reshape(transpose(x_hg), {d, h, w});
    } else {
        f_hg = relu(conv2d(d_tilde, p(prefix + "equiv_w"), p(prefix + "equiv_b"), 1));
    }

    return add(f_hg, f_conv);
}

}  // namespace uhr::ughr

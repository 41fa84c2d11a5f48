#include "uhr/uoic.hpp"

#include <cmath>

namespace uhr::uoic {

imgeo::BinaryMask downsample_mask(const imgeo::BinaryMask& mask, int out_h, int out_w) {
    if (mask.height % out_h != 0 || mask.width % out_w != 0) {
        throw ShapeError("downsample_mask requires integer block sizes");
    }
    const int bh = mask.height / out_h, bw = mask.width / out_w;
    const double block = static_cast<double>(bh) * bw;
    imgeo::BinaryMask out(out_h, out_w);
    for (int r = 0; r < out_h; ++r) {
        for (int c = 0; c < out_w; ++c) {
            int s = 0;
            for (int i = 0; i < bh; ++i) {
                for (int j = 0; j < bw; ++j) s += mask.at(r * bh + i, c * bw + j);
            }
            out.set(r, c, s > 0.5 * block ? 1 : 0);
        }
    }
    return out;
}

namespace {

Tensor mask_weights(const imgeo::BinaryMask& m) {
    std::vector<double> w(m.bits.begin(), m.bits.end());
    return Tensor::from({m.height, m.width}, std::move(w));
}

}  // namespace

std::optional<Tensor> masked_avg_pool(const Tensor& feat, const imgeo::BinaryMask& mask) {
    if (feat.rank() != 3) throw ShapeError("masked_avg_pool expects feat [D,h,w]");
    const int h = feat.shape[1], w = feat.shape[2];
    const imgeo::BinaryMask small = downsample_mask(mask, h, w);
    if (small.count() == 0) return std::nullopt;
    return wmap(feat, mask_weights(small));
}

Tensor wmap(const Tensor& feat, const Tensor& weights, double eps_w) {
    if (feat.rank() != 3) throw ShapeError("wmap expects feat [D,h,w]");
    const int d = feat.shape[0], h = feat.shape[1], w = feat.shape[2];
    if (weights.numel() != static_cast<int64_t>(h) * w) {
        throw ShapeError("wmap weight map does not match feature grid");
    }
    const Tensor fmat = reshape(feat, {d, h * w});
    const Tensor wcol = reshape(weights, {h * w, 1});
    const Tensor num = matmul(fmat, wcol);              // [D,1]
    const Tensor den = add(sum_all(weights), eps_w);    // scalar
    return reshape(div(num, den), {d});
}

std::optional<Tensor> mine_hard_negative(const Tensor& feat, const imgeo::BinaryMask& y_cp,
                                         const Tensor& yhat_cp_fullres) {
    const int h = feat.shape[1], w = feat.shape[2];
    const imgeo::BinaryMask bg = downsample_mask(imgeo::mask_not(y_cp), h, w);
    const Tensor yhat_small = bilinear_resize(yhat_cp_fullres, h, w);
    const Tensor weights = mul(mask_weights(bg), yhat_small);
    double mass = 0.0;
    for (double v : weights.values()) mass += v;
    if (mass < 1e-6) return std::nullopt;
    return wmap(feat, weights);
}

Tensor cosine(const Tensor& a, const Tensor& b) {
    const Tensor dot = sum_all(mul(a, b));
    const Tensor n2 = mul(sum_all(mul(a, a)), sum_all(mul(b, b)));
    return div(dot, uhr::sqrt(clamp_min(n2, 1e-24)));
}

NceResult info_nce(const ContrastiveBatch& batch) {
    if (batch.anchors.size() != batch.positives.size()) {
        throw ContractError("info_nce anchors/positives must pair up");
    }
    if (batch.tau <= 0.0) throw ConfigError("info_nce temperature must be > 0");

    auto zero_norm = [](const Tensor& t) {
        double s = 0.0;
        for (double v : t.values()) s += v * v;
        return s <= 0.0;
    };

    NceResult res;
    std::vector<Tensor> usable_negs;
    for (const Tensor& n : batch.negatives) {
        if (zero_norm(n)) {
            ++res.dropped_negatives;
        } else {
            usable_negs.push_back(n);
        }
    }

    const double inv_tau = 1.0 / batch.tau;
    std::vector<Tensor> terms;
    for (size_t i = 0; i < batch.anchors.size(); ++i) {
        if (zero_norm(batch.anchors[i]) || zero_norm(batch.positives[i])) {
            ++res.dropped_pairs;
            continue;
        }
        if (usable_negs.empty()) continue;  // needs at least one negative
        const Tensor s_pos = scalar_mul(cosine(batch.anchors[i], batch.positives[i]), inv_tau);
        std::vector<Tensor> logits{s_pos};
        for (const Tensor& n : usable_negs) {
            logits.push_back(scalar_mul(cosine(batch.anchors[i], n), inv_tau));
        }
        // Cosines are bounded so the logits live in [-1/tau, 1/tau]; the
        // direct log-sum-exp is safe without max shifting.
        const Tensor lse = log_eps(sum_all(uhr::exp(concat(logits, 0))), 0.0);
        terms.push_back(sub(lse, s_pos));
        ++res.contributing;
    }
    if (!terms.empty()) res.loss = mean_all(concat(terms, 0));
    return res;
}

Tensor pretrain_loss(const Tensor& seg_loss, const NceResult& nce, double lambda_ic) {
    if (lambda_ic < 0.0) throw ConfigError("lambda_ic must be >= 0");
    if (nce.contributing == 0 || lambda_ic == 0.0) return seg_loss;
    return add(seg_loss, scalar_mul(nce.loss, lambda_ic));
}

}  // namespace uhr::uoic

#pragma once

#include <optional>
#include <vector>

#include "uhr/imgeo.hpp"
#include "uhr/tensor.hpp"

namespace uhr::uoic {

// Block-average downsample of a binary mask to feature resolution, thresholded
// at area fraction > 0.5. Full-res dims must be integer multiples of the
// target dims.
imgeo::BinaryMask downsample_mask(const imgeo::BinaryMask& mask, int out_h, int out_w);

// Mean feature vector over mask-positive locations. The mask is given at full
// resolution and reduced to the feature grid first; nullopt when nothing
// survives the reduction (caller skips the sample).
std::optional<Tensor> masked_avg_pool(const Tensor& feat, const imgeo::BinaryMask& mask);

// Weighted masked average pooling: sum(w*F) / (sum(w) + eps_w). weights is an
// [h,w] map at feature resolution, already nonnegative.
Tensor wmap(const Tensor& feat, const Tensor& weights, double eps_w = 1e-8);

// Lesion-like background representation: wmap over (1 - Ycp) ⊙ Yhat_cp with
// both terms reduced to feature resolution. nullopt when the weight mass is
// below 1e-6 (negative dropped).
std::optional<Tensor> mine_hard_negative(const Tensor& feat, const imgeo::BinaryMask& y_cp,
                                         const Tensor& yhat_cp_fullres);

struct ContrastiveBatch {
    std::vector<Tensor> anchors;    // z_A, one per augmented sample
    std::vector<Tensor> positives;  // z_B, matched to anchors
    std::vector<Tensor> negatives;  // in-batch z_bg set
    double tau = 0.10;
};

struct NceResult {
    Tensor loss;             // scalar; valid only when contributing > 0
    int contributing = 0;    // anchors that entered the mean
    int dropped_pairs = 0;   // anchor/positive pairs lost to zero norms
    int dropped_negatives = 0;
};

// InfoNCE over cosine similarities scaled by 1/tau: mean over anchors of
// -log(exp(s+) / (exp(s+) + sum_k exp(s-_k))). Zero-norm vectors make the
// cosine undefined; those terms are dropped and counted.
NceResult info_nce(const ContrastiveBatch& batch);

// Pretraining objective: L_seg(Yhat_cp, Ycp) + lambda_ic * L_nce. The nce
// term is omitted when no anchor survived.
Tensor pretrain_loss(const Tensor& seg_loss, const NceResult& nce, double lambda_ic);

// Cosine similarity with a 1e-12 norm-product guard; differentiable.
Tensor cosine(const Tensor& a, const Tensor& b);

}  // namespace uhr::uoic

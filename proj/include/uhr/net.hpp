#pragma once

#include <string>
#include <vector>

#include "uhr/imgeo.hpp"
#include "uhr/params.hpp"
#include "uhr/tensor.hpp"
#include "uhr/ughr.hpp"

namespace uhr::net {

// Desk-scale encoder-decoder: `scales` encoder stages (two 3x3 convs each,
// halving resolution between stages), a 1x1 guidance head on the deepest
// feature, a deepest-to-shallowest refinement path of UGHR blocks, and an
// additive decoder.
struct NetworkSpec {
    int scales = 3;
    std::vector<int> channels{16, 32, 64};
    int in_channels = 1;
    ughr::BlockConfig block;

    void validate() const;
    int downsample_factor() const { return 1 << (scales - 1); }
};

// Full-network parameters. Creation order is fixed, so a seed pins every
// initial value.
ParamStore init_params(const NetworkSpec& spec, uint64_t seed);

// Encoder + guidance head only (the pretraining network).
ParamStore init_pretrain_params(const NetworkSpec& spec, uint64_t seed);

// Copies every parameter whose name exists in both stores (encoder and
// guidance head carry over; UGHR and decoder stay freshly initialized).
int transfer_pretrained(const ParamStore& pre, ParamStore& full);

struct ForwardOut {
    Tensor yhat;     // [H,W] final probability map
    Tensor mhat;     // coarse map at the deepest scale
    Tensor mhat_up;  // coarse map upsampled to [H,W]
    std::vector<Tensor> enc;      // encoder features, shallow -> deep
    std::vector<Tensor> refined;  // e_i, shallow -> deep
};

ForwardOut forward(Binding& p, const NetworkSpec& spec, const Tensor& image,
                   std::vector<ughr::BlockDebug>* dbg = nullptr);

struct PretrainOut {
    Tensor yhat_cp;  // [H,W], guidance prediction upsampled to input size
    Tensor feat;     // pooling feature map (middle encoder scale)
    Tensor mhat;
};

PretrainOut pretrain_forward(Binding& p, const NetworkSpec& spec, const Tensor& image);

// Combined Dice (smoothing 1.0) + mean BCE (log clamp 1e-8), equally
// weighted.
Tensor seg_loss(const Tensor& yhat, const imgeo::BinaryMask& y);

// seg(yhat, y) + lambda_aux * seg(mhat_up, y).
Tensor train_loss(const Tensor& yhat, const imgeo::BinaryMask& y, const Tensor& mhat_up,
                  double lambda_aux);

struct Metrics {
    double miou = 0.0, mdsc = 0.0, recall = 0.0, precision = 0.0;
};

// Per-image metrics at threshold 0.5. Empty ground truth scores 1.0 when the
// prediction is also empty, 0.0 otherwise.
Metrics image_metrics(const Tensor& yhat, const imgeo::BinaryMask& y);
Metrics mean_metrics(const std::vector<Metrics>& per_image);

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9, beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    int64_t step = 0;
    std::vector<std::vector<double>> m, v;
    void init_like(const ParamStore& store);
};

void adam_step(ParamStore& params, AdamState& state,
               const std::vector<std::vector<double>>& grads, const AdamConfig& cfg);

}  // namespace uhr::net

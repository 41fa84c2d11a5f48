#pragma once

#include <string>
#include <vector>

#include "uhr/net.hpp"
#include "uhr/synthdata.hpp"

namespace uhr::net {

struct TrainOptions {
    NetworkSpec spec;
    AdamConfig adam;
    int batch = 8;
    int epochs = 30;
    int pretrain_epochs = 10;
    uint64_t seed = 1;
    double lambda_aux = 0.1;
    double lambda_ic = 1.0;
    double tau = 0.10;
    imgeo::CopyPasteConfig copy_paste;
    bool uoic = true;   // run UO-IC pretraining before end-to-end training
    bool flips = true;  // horizontal/vertical flips, p=0.5 each
    int workers = 0;    // 0 = hardware concurrency; results do not depend on it
};

struct EpochRow {
    int epoch = 0;
    std::string split;  // "train" | "val" | "pretrain"
    Metrics metrics;
    double loss_total = 0.0, loss_seg = 0.0, loss_aux = 0.0, loss_nce = 0.0;
};

struct TrainState {
    std::string phase;  // "pretrain" | "train"
    ParamStore params;
    AdamState opt;
    int epoch = 0;  // completed epochs
    uint64_t seed = 1;
    std::vector<EpochRow> history;
};

TrainState init_pretrain_state(const TrainOptions& opt);
TrainState init_train_state(const TrainOptions& opt, const ParamStore* pretrained);

// One UO-IC epoch: copy-paste augmentation, guidance forward, instance
// pooling, hard-negative mining, InfoNCE + segmentation loss, Adam.
// Single-tape per batch (the contrastive term couples the whole batch).
EpochRow run_pretrain_epoch(TrainState& st, const synth::Dataset& train, const TrainOptions& opt);

// One end-to-end epoch; per-sample tapes may run on worker threads, gradient
// reduction is ordered by sample index so the result is worker-independent.
EpochRow run_train_epoch(TrainState& st, const synth::Dataset& train, const TrainOptions& opt);

EpochRow evaluate(const ParamStore& params, const TrainOptions& opt, const synth::Dataset& data,
                  int epoch, const std::string& split);

// Embeddings collected from a pretraining forward pass over a dataset.
struct EmbeddingDump {
    std::vector<Tensor> z_a, z_b, z_bg;
    std::vector<int> sample_of_a, sample_of_bg;
    std::vector<int64_t> area_a, area_b;
};
EmbeddingDump collect_embeddings(const ParamStore& params, const TrainOptions& opt,
                                 const synth::Dataset& data);

std::string metrics_csv(const std::vector<EpochRow>& rows);

void save_checkpoint(const std::string& path, const TrainState& st);
TrainState load_checkpoint(const std::string& path);

// Convenience pipelines used by the CLI and the acceptance suite.
TrainState run_pretraining(const TrainOptions& opt, const synth::Dataset& train,
                           const synth::Dataset& val, bool quiet = false);
TrainState run_training(const TrainOptions& opt, const synth::Dataset& train,
                        const synth::Dataset& val, const ParamStore* pretrained,
                        bool quiet = false);
// Optional pretraining (opt.uoic) followed by training; what `train` and
// `ablate` both execute.
TrainState run_full(const TrainOptions& opt, const synth::Dataset& train,
                    const synth::Dataset& val, bool quiet = false);

}  // namespace uhr::net

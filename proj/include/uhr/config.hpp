#pragma once

#include <string>
#include <variant>
#include <vector>

#include "uhr/synthdata.hpp"
#include "uhr/trainer.hpp"

namespace uhr::cfg {

// Every knob of the artifact in one record. Defaults follow the reference
// settings (tau 0.10, lambda_ic 1.0, lambda_aux 0.1, M 8, beta 1.0, Adam lr
// 1e-4) with desk-scale sizes (64x64 inputs, batch 8, 30 epochs).
struct RunConfig {
    double tau = 0.10;
    double lambda_ic = 1.0;
    double lambda_aux = 0.1;
    int prototypes = 8;
    double beta = 1.0;
    double eps = 1e-8;
    double scale_min = 0.3;
    double scale_max = 0.7;
    int batch = 8;
    double lr = 1e-4;
    int epochs = 30;
    int pretrain_epochs = 10;
    uint64_t seed = 1;
    bool uoic = true;
    bool base_hr = true;
    bool unc_guidance = true;
    bool fgbg_groups = true;
    bool detach_uncertainty = false;
    bool flips = true;
    int workers = 0;
    int scales = 3;
    std::string channels = "16,32,64";

    int scene_size = 64;
    int scene_lesions_min = 1;
    int scene_lesions_max = 3;
    double scene_radius_min = 3.0;
    double scene_radius_max = 9.0;
    double scene_small_fraction = 0.35;
    double scene_small_radius_min = 2.0;
    double scene_small_radius_max = 4.0;
    int scene_distractors_min = 1;
    int scene_distractors_max = 4;
    double scene_lesion_contrast = 0.45;
    double scene_distractor_contrast = 0.18;
    double scene_noise = 0.06;
    double scene_edge_softness = 1.5;
    int train_count = 200;
    int val_count = 50;

    std::string data_dir = "data";
    std::string run_dir = "runs/run";
    std::string checkpoint;  // model to load (eval/dump/resume-from)
    std::string init_from;   // pretraining checkpoint feeding `train`
    int dump_count = 8;
    bool dump_hypergraph = false;
};

using KeyValue = std::variant<int*, double*, bool*, uint64_t*, std::string*>;

struct KeyRef {
    const char* name;
    KeyValue ref;
};

// Declarative key table; iteration order is the serialization order.
std::vector<KeyRef> key_table(RunConfig& c);
std::vector<std::string> valid_keys();

// `key = value` line; unknown keys raise ConfigError listing valid keys.
void apply_kv(RunConfig& c, const std::string& key, const std::string& value);
void parse_file(RunConfig& c, const std::string& path);
std::string serialize(const RunConfig& c);

net::TrainOptions to_train_options(const RunConfig& c);
synth::SceneSpec to_scene_spec(const RunConfig& c);

}  // namespace uhr::cfg

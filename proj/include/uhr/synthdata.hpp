#pragma once

#include <string>
#include <utility>
#include <vector>

#include "uhr/common.hpp"
#include "uhr/imgeo.hpp"
#include "uhr/tensor.hpp"

namespace uhr::synth {

// Controls for the synthetic lesion generator: soft-edged bright blobs on a
// textured background, plus lesion-like distractor blobs at strictly lower
// contrast that never enter the ground truth.
struct SceneSpec {
    int size = 64;
    int lesions_min = 1, lesions_max = 3;
    double radius_min = 3.0, radius_max = 9.0;
    double small_fraction = 0.35;  // lesions drawn from the small radius range
    double small_radius_min = 2.0, small_radius_max = 4.0;
    int distractors_min = 1, distractors_max = 4;
    double lesion_contrast = 0.45;
    double distractor_contrast = 0.18;
    double noise = 0.06;
    double edge_softness = 1.5;  // transition band width, px

    void validate() const;
};

struct Sample {
    Tensor image;  // [1,H,W] in [0,1]
    imgeo::BinaryMask mask;
};
using Dataset = std::vector<Sample>;

Sample generate_scene(const SceneSpec& spec, Rng& rng);

Sample flip_sample(const Sample& s, bool flip_h, bool flip_v);

// ---- 8-bit PGM/PPM ---------------------------------------------------------
void write_pgm(const std::string& path, const std::vector<uint8_t>& px, int h, int w);
std::vector<uint8_t> read_pgm(const std::string& path, int& h, int& w);
void write_image(const std::string& path, const Tensor& img);  // [1|3,H,W], PGM or PPM
Tensor read_image(const std::string& path);                    // -> [1,H,W]
void write_mask(const std::string& path, const imgeo::BinaryMask& m);
imgeo::BinaryMask read_mask(const std::string& path);

// ---- dataset on disk --------------------------------------------------------
struct DatasetManifest {
    std::string split;
    uint64_t seed = 0;
    SceneSpec spec;
    std::vector<std::pair<std::string, std::string>> entries;  // image, mask (relative)
};

// Generates `count` scenes (one derived RNG stream per index, so the split
// name and seed pin every pixel) and writes PGMs plus manifest.csv.
DatasetManifest generate_dataset(const std::string& dir, const std::string& split,
                                 const SceneSpec& spec, uint64_t seed, int count);

DatasetManifest read_manifest(const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace uhr::synth

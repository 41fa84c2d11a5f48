#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "uhr/common.hpp"
#include "uhr/tensor.hpp"

namespace uhr::imgeo {

struct BinaryMask {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> bits;  // row-major, strictly {0,1}

    BinaryMask() = default;
    BinaryMask(int h, int w) : height(h), width(w), bits(static_cast<size_t>(h) * w, 0) {}

    uint8_t at(int r, int c) const { return bits[static_cast<size_t>(r) * width + c]; }
    void set(int r, int c, uint8_t v) { bits[static_cast<size_t>(r) * width + c] = v; }
    int64_t count() const;
    bool empty_fg() const { return count() == 0; }
};

bool masks_disjoint(const BinaryMask& a, const BinaryMask& b);
bool mask_subset(const BinaryMask& a, const BinaryMask& b);  // a subset of b
BinaryMask mask_or(const BinaryMask& a, const BinaryMask& b);
BinaryMask mask_and(const BinaryMask& a, const BinaryMask& b);
BinaryMask mask_not(const BinaryMask& a);
bool masks_equal(const BinaryMask& a, const BinaryMask& b);

// One 8-connected foreground component. pixels are image coordinates in
// row-major discovery order; mask is bbox-local (bbox_h x bbox_w). crop is
// attached lazily (attach_crop) and holds the image values under the bbox.
struct Instance {
    std::vector<std::pair<int, int>> pixels;
    int top = 0, left = 0, bbox_h = 0, bbox_w = 0;
    BinaryMask mask;
    Tensor crop;  // [C, bbox_h, bbox_w] once attached, empty otherwise
};

struct DistanceMap {
    int height = 0;
    int width = 0;
    std::vector<double> dist;
    double at(int r, int c) const { return dist[static_cast<size_t>(r) * width + c]; }
};

// Partition of the foreground into 8-connected components, ordered row-major
// by first pixel. Empty mask gives an empty list.
std::vector<Instance> connected_components(const BinaryMask& mask);

// Exact Euclidean distance to the nearest foreground pixel (two-pass
// lower-envelope transform on squared distances). Foreground gets 0; a mask
// with no foreground gives +inf everywhere.
DistanceMap edt(const BinaryMask& foreground);

double circumradius(int h, int w);

// Uniform draw from {p : dist(p) >= r_s}; nullopt when that set is empty.
std::optional<std::pair<int, int>> sample_paste_center(const DistanceMap& dmap, double r_s,
                                                       Rng& rng);

Instance attach_crop(const Instance& inst, const Tensor& image);

// Nearest-neighbor downscale of mask and crop; factor in (0,1]. nullopt when
// the result degenerates (either side < 2 px, or the scaled mask is empty).
std::optional<Instance> scale_instance(const Instance& inst, double factor);

BinaryMask instance_image_mask(const Instance& inst, int height, int width);

struct PasteResult {
    Tensor image_cp;
    BinaryMask y_cp;
    BinaryMask m_b;
};

// Pastes inst with its bbox center on `center` (even extents round toward
// top-left), clipping at the borders. Requires the placement to be disjoint
// from y; violations are a ContractError because the sampler must prevent
// them.
PasteResult paste(const Tensor& image, const BinaryMask& y, const Instance& inst,
                  std::pair<int, int> center);

struct CopyPasteConfig {
    double scale_min = 0.3;
    double scale_max = 0.7;
    int max_retries = 3;
};

struct CopyPasteOutcome {
    bool augmented = false;  // false: fallback to the unmodified sample
    Tensor image_cp;
    BinaryMask y_cp;
    BinaryMask m_a;  // full-size mask of the source instance
    BinaryMask m_b;  // full-size mask of the pasted replica
    int instance_index = -1;
    double factor = 0.0;
    double r_s = 0.0;
    std::pair<int, int> center{-1, -1};
};

// Full copy-paste pipeline: pick an instance, scale it, find a center with
// dist >= circumradius of the scaled bbox, paste. Retries with the factor
// halved on failure, then falls back to the unmodified sample.
CopyPasteOutcome copy_paste_augment(const Tensor& image, const BinaryMask& y,
                                    const CopyPasteConfig& cfg, Rng& rng);

}  // namespace uhr::imgeo

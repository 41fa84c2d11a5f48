#include "uhr/imgeo.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace uhr::imgeo {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
// Large finite stand-in for "no site in this column"; keeps the envelope
// arithmetic finite. Anything this large maps back to +inf afterwards.
constexpr double kFarSq = 1e18;
}  // namespace

int64_t BinaryMask::count() const {
    int64_t n = 0;
    for (uint8_t b : bits) n += b;
    return n;
}

bool masks_disjoint(const BinaryMask& a, const BinaryMask& b) {
    for (size_t i = 0; i < a.bits.size(); ++i) {
        if (a.bits[i] && b.bits[i]) return false;
    }
    return true;
}

bool mask_subset(const BinaryMask& a, const BinaryMask& b) {
    for (size_t i = 0; i < a.bits.size(); ++i) {
        if (a.bits[i] && !b.bits[i]) return false;
    }
    return true;
}

BinaryMask mask_or(const BinaryMask& a, const BinaryMask& b) {
    BinaryMask out(a.height, a.width);
    for (size_t i = 0; i < a.bits.size(); ++i) out.bits[i] = a.bits[i] | b.bits[i];
    return out;
}

BinaryMask mask_and(const BinaryMask& a, const BinaryMask& b) {
    BinaryMask out(a.height, a.width);
    for (size_t i = 0; i < a.bits.size(); ++i) out.bits[i] = a.bits[i] & b.bits[i];
    return out;
}

BinaryMask mask_not(const BinaryMask& a) {
    BinaryMask out(a.height, a.width);
    for (size_t i = 0; i < a.bits.size(); ++i) out.bits[i] = a.bits[i] ? 0 : 1;
    return out;
}

bool masks_equal(const BinaryMask& a, const BinaryMask& b) {
    return a.height == b.height && a.width == b.width && a.bits == b.bits;
}

std::vector<Instance> connected_components(const BinaryMask& mask) {
    const int h = mask.height, w = mask.width;
    std::vector<int> label(static_cast<size_t>(h) * w, -1);
    std::vector<Instance> out;
    std::vector<std::pair<int, int>> stack;

    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            if (!mask.at(r, c) || label[static_cast<size_t>(r) * w + c] >= 0) continue;
            const int id = static_cast<int>(out.size());
            Instance inst;
            int rmin = r, rmax = r, cmin = c, cmax = c;
            stack.clear();
            stack.push_back({r, c});
            label[static_cast<size_t>(r) * w + c] = id;
            while (!stack.empty()) {
                auto [pr, pc] = stack.back();
                stack.pop_back();
                inst.pixels.push_back({pr, pc});
                rmin = std::min(rmin, pr);
                rmax = std::max(rmax, pr);
                cmin = std::min(cmin, pc);
                cmax = std::max(cmax, pc);
                for (int dr = -1; dr <= 1; ++dr) {
                    for (int dc = -1; dc <= 1; ++dc) {
                        const int nr = pr + dr, nc = pc + dc;
                        if (nr < 0 || nr >= h || nc < 0 || nc >= w) continue;
                        if (!mask.at(nr, nc)) continue;
                        int& lb = label[static_cast<size_t>(nr) * w + nc];
                        if (lb >= 0) continue;
                        lb = id;
                        stack.push_back({nr, nc});
                    }
                }
            }
            std::sort(inst.pixels.begin(), inst.pixels.end());
            inst.top = rmin;
            inst.left = cmin;
            inst.bbox_h = rmax - rmin + 1;
            inst.bbox_w = cmax - cmin + 1;
            inst.mask = BinaryMask(inst.bbox_h, inst.bbox_w);
            for (auto [pr, pc] : inst.pixels) inst.mask.set(pr - rmin, pc - cmin, 1);
            out.push_back(std::move(inst));
        }
    }
    return out;
}

namespace {

// 1-D squared distance transform (lower envelope of parabolas).
void dt1d(const std::vector<double>& f, int n, std::vector<double>& d, std::vector<int>& v,
          std::vector<double>& z) {
    int k = 0;
    v[0] = 0;
    z[0] = -kInf;
    z[1] = kInf;
    for (int q = 1; q < n; ++q) {
        double s;
        for (;;) {
            const int vk = v[k];
            s = ((f[q] + static_cast<double>(q) * q) - (f[vk] + static_cast<double>(vk) * vk)) /
                (2.0 * q - 2.0 * vk);
            if (s > z[k] || k == 0) break;
            --k;
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        const double dq = q - v[k];
        d[q] = dq * dq + f[v[k]];
    }
}

}  // namespace

DistanceMap edt(const BinaryMask& foreground) {
    const int h = foreground.height, w = foreground.width;
    DistanceMap out;
    out.height = h;
    out.width = w;
    out.dist.assign(static_cast<size_t>(h) * w, kInf);
    if (foreground.count() == 0) return out;

    std::vector<double> sq(static_cast<size_t>(h) * w);
    // Pass 1: per column over rows.
    {
        std::vector<double> f(h), d(h), z(h + 1);
        std::vector<int> v(h);
        for (int c = 0; c < w; ++c) {
            for (int r = 0; r < h; ++r) f[r] = foreground.at(r, c) ? 0.0 : kFarSq;
            dt1d(f, h, d, v, z);
            for (int r = 0; r < h; ++r) sq[static_cast<size_t>(r) * w + c] = d[r];
        }
    }
    // Pass 2: per row over columns.
    {
        std::vector<double> f(w), d(w), z(w + 1);
        std::vector<int> v(w);
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) f[c] = sq[static_cast<size_t>(r) * w + c];
            dt1d(f, w, d, v, z);
            for (int c = 0; c < w; ++c) {
                out.dist[static_cast<size_t>(r) * w + c] =
                    d[c] >= kFarSq ? kInf : std::sqrt(d[c]);
            }
        }
    }
    return out;
}

double circumradius(int h, int w) {
    if (h < 1 || w < 1) throw ContractError("circumradius of degenerate box");
    return std::sqrt(static_cast<double>(h) * h + static_cast<double>(w) * w) / 2.0;
}

std::optional<std::pair<int, int>> sample_paste_center(const DistanceMap& dmap, double r_s,
                                                       Rng& rng) {
    std::vector<int> feasible;
    const int n = dmap.height * dmap.width;
    for (int i = 0; i < n; ++i) {
        if (dmap.dist[i] >= r_s) feasible.push_back(i);
    }
    if (feasible.empty()) return std::nullopt;
    const int pick = feasible[rng.uniform_int(0, static_cast<int>(feasible.size()) - 1)];
    return std::make_pair(pick / dmap.width, pick % dmap.width);
}

Instance attach_crop(const Instance& inst, const Tensor& image) {
    if (image.rank() != 3) throw ShapeError("attach_crop expects image [C,H,W]");
    const int ch = image.shape[0];
    Instance out = inst;
    std::vector<double> crop(static_cast<size_t>(ch) * inst.bbox_h * inst.bbox_w, 0.0);
    for (int c = 0; c < ch; ++c) {
        for (int r = 0; r < inst.bbox_h; ++r) {
            for (int q = 0; q < inst.bbox_w; ++q) {
                crop[(static_cast<size_t>(c) * inst.bbox_h + r) * inst.bbox_w + q] =
                    image.at(c, inst.top + r, inst.left + q);
            }
        }
    }
    out.crop = Tensor::from({ch, inst.bbox_h, inst.bbox_w}, std::move(crop));
    return out;
}

std::optional<Instance> scale_instance(const Instance& inst, double factor) {
    if (factor <= 0.0 || factor > 1.0) throw ContractError("scale factor must be in (0,1]");
    if (inst.crop.numel() == 0) throw ContractError("scale_instance needs an attached crop");
    const int nh = static_cast<int>(std::lround(inst.bbox_h * factor));
    const int nw = static_cast<int>(std::lround(inst.bbox_w * factor));
    if (nh < 2 || nw < 2) return std::nullopt;
    if (nh == inst.bbox_h && nw == inst.bbox_w) {
        Instance out = inst;
        out.top = 0;
        out.left = 0;
        out.pixels.clear();
        for (int r = 0; r < out.bbox_h; ++r) {
            for (int c = 0; c < out.bbox_w; ++c) {
                if (out.mask.at(r, c)) out.pixels.push_back({r, c});
            }
        }
        return out;
    }

    BinaryMask smask(nh, nw);
    for (int r = 0; r < nh; ++r) {
        const int sr = std::min(inst.bbox_h - 1,
                                static_cast<int>(std::floor((r + 0.5) * inst.bbox_h / nh)));
        for (int c = 0; c < nw; ++c) {
            const int sc = std::min(inst.bbox_w - 1,
                                    static_cast<int>(std::floor((c + 0.5) * inst.bbox_w / nw)));
            smask.set(r, c, inst.mask.at(sr, sc));
        }
    }
    if (smask.count() == 0) return std::nullopt;
    Tensor scrop = nearest_resize(inst.crop, nh, nw);

    // Re-tighten the bbox around the surviving mask pixels.
    int rmin = nh, rmax = -1, cmin = nw, cmax = -1;
    for (int r = 0; r < nh; ++r) {
        for (int c = 0; c < nw; ++c) {
            if (!smask.at(r, c)) continue;
            rmin = std::min(rmin, r);
            rmax = std::max(rmax, r);
            cmin = std::min(cmin, c);
            cmax = std::max(cmax, c);
        }
    }
    Instance out;
    out.top = 0;
    out.left = 0;
    out.bbox_h = rmax - rmin + 1;
    out.bbox_w = cmax - cmin + 1;
    if (out.bbox_h < 2 || out.bbox_w < 2) return std::nullopt;
    out.mask = BinaryMask(out.bbox_h, out.bbox_w);
    const int ch = scrop.shape[0];
    std::vector<double> crop(static_cast<size_t>(ch) * out.bbox_h * out.bbox_w);
    for (int r = 0; r < out.bbox_h; ++r) {
        for (int c = 0; c < out.bbox_w; ++c) {
            out.mask.set(r, c, smask.at(rmin + r, cmin + c));
            if (out.mask.at(r, c)) out.pixels.push_back({r, c});
            for (int k = 0; k < ch; ++k) {
                crop[(static_cast<size_t>(k) * out.bbox_h + r) * out.bbox_w + c] =
                    scrop.at(k, rmin + r, cmin + c);
            }
        }
    }
    out.crop = Tensor::from({ch, out.bbox_h, out.bbox_w}, std::move(crop));
    return out;
}

BinaryMask instance_image_mask(const Instance& inst, int height, int width) {
    BinaryMask out(height, width);
    for (int r = 0; r < inst.bbox_h; ++r) {
        for (int c = 0; c < inst.bbox_w; ++c) {
            if (inst.mask.at(r, c)) out.set(inst.top + r, inst.left + c, 1);
        }
    }
    return out;
}

PasteResult paste(const Tensor& image, const BinaryMask& y, const Instance& inst,
                  std::pair<int, int> center) {
    if (image.rank() != 3) throw ShapeError("paste expects image [C,H,W]");
    if (inst.crop.numel() == 0) throw ContractError("paste needs an attached crop");
    const int ch = image.shape[0], h = image.shape[1], w = image.shape[2];
    const int top = center.first - (inst.bbox_h - 1) / 2;
    const int left = center.second - (inst.bbox_w - 1) / 2;

    PasteResult out;
    out.m_b = BinaryMask(h, w);
    std::vector<double> img = image.values();
    for (int r = 0; r < inst.bbox_h; ++r) {
        const int ir = top + r;
        if (ir < 0 || ir >= h) continue;  // clipped
        for (int c = 0; c < inst.bbox_w; ++c) {
            const int ic = left + c;
            if (ic < 0 || ic >= w) continue;
            if (!inst.mask.at(r, c)) continue;
            out.m_b.set(ir, ic, 1);
            for (int k = 0; k < ch; ++k) {
                img[(static_cast<size_t>(k) * h + ir) * w + ic] = inst.crop.at(k, r, c);
            }
        }
    }
    if (!masks_disjoint(out.m_b, y)) {
        throw ContractError("paste placement overlaps existing foreground");
    }
    out.image_cp = Tensor::from(image.shape, std::move(img));
    out.y_cp = mask_or(y, out.m_b);
    return out;
}

CopyPasteOutcome copy_paste_augment(const Tensor& image, const BinaryMask& y,
                                    const CopyPasteConfig& cfg, Rng& rng) {
    CopyPasteOutcome out;
    out.image_cp = image;
    out.y_cp = y;
    out.m_a = BinaryMask(y.height, y.width);
    out.m_b = BinaryMask(y.height, y.width);

    const std::vector<Instance> comps = connected_components(y);
    if (comps.empty()) return out;  // nothing to copy; caller skips the contrastive term

    const int idx = rng.uniform_int(0, static_cast<int>(comps.size()) - 1);
    const Instance src = attach_crop(comps[idx], image);
    const DistanceMap dmap = edt(y);

    double factor = rng.uniform(cfg.scale_min, cfg.scale_max);
    for (int attempt = 0; attempt <= cfg.max_retries; ++attempt, factor *= 0.5) {
        std::optional<Instance> scaled = scale_instance(src, factor);
        if (!scaled) continue;
        const double r_s = circumradius(scaled->bbox_h, scaled->bbox_w);
        std::optional<std::pair<int, int>> center = sample_paste_center(dmap, r_s, rng);
        if (!center) continue;

        // Closed-disk containment admits exact-distance ties with existing
        // foreground, and border clipping may erase the whole replica; both
        // count as a failed attempt rather than a contract violation.
        const int top = center->first - (scaled->bbox_h - 1) / 2;
        const int left = center->second - (scaled->bbox_w - 1) / 2;
        bool overlap = false;
        int placed = 0;
        for (int r = 0; r < scaled->bbox_h && !overlap; ++r) {
            const int ir = top + r;
            if (ir < 0 || ir >= y.height) continue;
            for (int c = 0; c < scaled->bbox_w; ++c) {
                const int ic = left + c;
                if (ic < 0 || ic >= y.width || !scaled->mask.at(r, c)) continue;
                ++placed;
                if (y.at(ir, ic)) {
                    overlap = true;
                    break;
                }
            }
        }
        if (overlap || placed == 0) continue;

        PasteResult pr = paste(image, y, *scaled, *center);
        out.augmented = true;
        out.image_cp = std::move(pr.image_cp);
        out.y_cp = std::move(pr.y_cp);
        out.m_b = std::move(pr.m_b);
        out.m_a = instance_image_mask(comps[idx], y.height, y.width);
        out.instance_index = idx;
        out.factor = factor;
        out.r_s = r_s;
        out.center = *center;
        return out;
    }
    return out;  // fallback: unmodified sample
}

}  // namespace uhr::imgeo

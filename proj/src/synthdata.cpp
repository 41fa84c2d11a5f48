#include "uhr/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace uhr::synth {

void SceneSpec::validate() const {
    if (size < 16) throw ConfigError("scene size must be >= 16");
    if (radius_min < 2.0 || small_radius_min < 2.0) throw ConfigError("lesion radii must be >= 2 px");
    if (radius_max < radius_min || small_radius_max < small_radius_min) {
        throw ConfigError("lesion radius range is inverted");
    }
    if (lesions_min < 0 || lesions_max < lesions_min) throw ConfigError("bad lesion count range");
    if (distractors_min < 0 || distractors_max < distractors_min) {
        throw ConfigError("bad distractor count range");
    }
    if (!(distractor_contrast < lesion_contrast)) {
        throw ConfigError("distractor contrast must be strictly below lesion contrast");
    }
    if (small_fraction < 0.0 || small_fraction > 1.0) throw ConfigError("bad small_fraction");
}

namespace {

struct Blob {
    double cy, cx, a, b, contrast;
};

// Radially ramped weight in [0,1]; 1 deep inside, 0 outside the ellipse.
double blob_weight(const Blob& bl, int y, int x, double edge) {
    const double dy = (y - bl.cy) / bl.a;
    const double dx = (x - bl.cx) / bl.b;
    const double rho = std::sqrt(dy * dy + dx * dx);
    const double band = edge / std::min(bl.a, bl.b);
    return std::clamp((1.0 - rho) / band, 0.0, 1.0);
}

Blob draw_blob(const SceneSpec& spec, Rng& rng, bool small, bool distractor) {
    const double rmin = small ? spec.small_radius_min : spec.radius_min;
    const double rmax = small ? spec.small_radius_max : spec.radius_max;
    const double r = rng.uniform(rmin, rmax);
    Blob bl;
    bl.a = r * rng.uniform(0.8, 1.2);
    bl.b = r * rng.uniform(0.8, 1.2);
    const double margin = std::max(bl.a, bl.b) + 1.0;
    bl.cy = rng.uniform(margin, spec.size - 1 - margin);
    bl.cx = rng.uniform(margin, spec.size - 1 - margin);
    bl.contrast = distractor ? spec.distractor_contrast * rng.uniform(0.7, 1.0)
                             : spec.lesion_contrast * rng.uniform(0.9, 1.1);
    return bl;
}

Sample try_scene(const SceneSpec& spec, Rng& rng) {
    const int s = spec.size;
    std::vector<double> img(static_cast<size_t>(s) * s, 0.35);

    // Smooth background texture: coarse value-noise grid plus fine grain.
    const int g = std::max(2, s / 8);
    std::vector<double> grid(static_cast<size_t>(g + 1) * (g + 1));
    for (auto& v : grid) v = rng.uniform(-1.0, 1.0);
    for (int y = 0; y < s; ++y) {
        const double fy = static_cast<double>(y) / s * g;
        const int y0 = static_cast<int>(fy);
        const double ty = fy - y0;
        for (int x = 0; x < s; ++x) {
            const double fx = static_cast<double>(x) / s * g;
            const int x0 = static_cast<int>(fx);
            const double tx = fx - x0;
            const double top = grid[y0 * (g + 1) + x0] * (1 - tx) + grid[y0 * (g + 1) + x0 + 1] * tx;
            const double bot =
                grid[(y0 + 1) * (g + 1) + x0] * (1 - tx) + grid[(y0 + 1) * (g + 1) + x0 + 1] * tx;
            img[static_cast<size_t>(y) * s + x] += spec.noise * (top * (1 - ty) + bot * ty);
        }
    }
    for (auto& v : img) v += spec.noise * 0.4 * rng.uniform(-1.0, 1.0);

    imgeo::BinaryMask mask(s, s);
    const int n_lesions = rng.uniform_int(spec.lesions_min, spec.lesions_max);
    for (int i = 0; i < n_lesions; ++i) {
        const bool small = rng.uniform() < spec.small_fraction;
        const Blob bl = draw_blob(spec, rng, small, false);
        for (int y = 0; y < s; ++y) {
            for (int x = 0; x < s; ++x) {
                const double w = blob_weight(bl, y, x, spec.edge_softness);
                if (w <= 0.0) continue;
                img[static_cast<size_t>(y) * s + x] += bl.contrast * w;
                if (w > 0.5) mask.set(y, x, 1);
            }
        }
    }

    const int n_distr = rng.uniform_int(spec.distractors_min, spec.distractors_max);
    for (int i = 0; i < n_distr; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
            const Blob bl = draw_blob(spec, rng, rng.uniform() < spec.small_fraction, true);
            bool clear = true;
            const int lo_y = std::max(0, static_cast<int>(bl.cy - bl.a - 2));
            const int hi_y = std::min(s - 1, static_cast<int>(bl.cy + bl.a + 2));
            const int lo_x = std::max(0, static_cast<int>(bl.cx - bl.b - 2));
            const int hi_x = std::min(s - 1, static_cast<int>(bl.cx + bl.b + 2));
            for (int y = lo_y; y <= hi_y && clear; ++y) {
                for (int x = lo_x; x <= hi_x; ++x) {
                    if (mask.at(y, x) && blob_weight(bl, y, x, spec.edge_softness) > 0.0) {
                        clear = false;
                        break;
                    }
                }
            }
            if (!clear) continue;
            for (int y = lo_y; y <= hi_y; ++y) {
                for (int x = lo_x; x <= hi_x; ++x) {
                    const double w = blob_weight(bl, y, x, spec.edge_softness);
                    if (w > 0.0) img[static_cast<size_t>(y) * s + x] += bl.contrast * w;
                }
            }
            placed = true;
        }
    }

    for (auto& v : img) v = std::clamp(v, 0.0, 1.0);
    Sample out;
    out.image = Tensor::from({1, s, s}, std::move(img));
    out.mask = std::move(mask);
    return out;
}

}  // namespace

Sample generate_scene(const SceneSpec& spec, Rng& rng) {
    spec.validate();
    for (int tries = 0; tries < 100; ++tries) {
        Sample s = try_scene(spec, rng);
        const auto comps = imgeo::connected_components(s.mask);
        for (const auto& c : comps) {
            if (static_cast<int>(c.pixels.size()) >= 4) return s;
        }
        if (spec.lesions_max == 0) return s;  // empty masks are legitimate here
    }
    throw ContractError("scene generator failed to place a usable lesion");
}

Sample flip_sample(const Sample& s, bool flip_h, bool flip_v) {
    if (!flip_h && !flip_v) return s;
    const int c = s.image.shape[0], h = s.image.shape[1], w = s.image.shape[2];
    std::vector<double> img(s.image.numel());
    imgeo::BinaryMask mask(h, w);
    for (int y = 0; y < h; ++y) {
        const int sy = flip_v ? h - 1 - y : y;
        for (int x = 0; x < w; ++x) {
            const int sx = flip_h ? w - 1 - x : x;
            for (int k = 0; k < c; ++k) {
                img[(static_cast<size_t>(k) * h + y) * w + x] = s.image.at(k, sy, sx);
            }
            mask.set(y, x, s.mask.at(sy, sx));
        }
    }
    Sample out;
    out.image = Tensor::from({c, h, w}, std::move(img));
    out.mask = std::move(mask);
    return out;
}

// ---- PGM/PPM ----------------------------------------------------------------

void write_pgm(const std::string& path, const std::vector<uint8_t>& px, int h, int w) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    f << "P5\n" << w << " " << h << "\n255\n";
    f.write(reinterpret_cast<const char*>(px.data()), px.size());
    if (!f) throw IoError("short write: " + path);
}

namespace {

struct PnmReader {
    std::string bytes;
    size_t pos = 0;
    std::string path;

    void fail(const std::string& why) const {
        throw ParseError(path + ": " + why + " at byte " + std::to_string(pos));
    }
    void skip_space() {
        while (pos < bytes.size()) {
            const char c = bytes[pos];
            if (c == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                ++pos;
            } else {
                break;
            }
        }
    }
    int read_int() {
        skip_space();
        if (pos >= bytes.size() || !isdigit(static_cast<unsigned char>(bytes[pos]))) {
            fail("expected integer");
        }
        int v = 0;
        while (pos < bytes.size() && isdigit(static_cast<unsigned char>(bytes[pos]))) {
            v = v * 10 + (bytes[pos++] - '0');
        }
        return v;
    }
};

PnmReader open_pnm(const std::string& path, const char* magic) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for read: " + path);
    PnmReader r;
    r.path = path;
    std::ostringstream ss;
    ss << f.rdbuf();
    r.bytes = ss.str();
    if (r.bytes.size() < 2 || r.bytes[0] != magic[0] || r.bytes[1] != magic[1]) {
        r.fail(std::string("expected ") + magic + " magic");
    }
    r.pos = 2;
    return r;
}

}  // namespace

std::vector<uint8_t> read_pgm(const std::string& path, int& h, int& w) {
    PnmReader r = open_pnm(path, "P5");
    w = r.read_int();
    h = r.read_int();
    const int maxval = r.read_int();
    if (w < 1 || h < 1) r.fail("bad dimensions");
    if (maxval != 255) r.fail("expected maxval 255");
    ++r.pos;  // single whitespace after maxval
    const size_t need = static_cast<size_t>(h) * w;
    if (r.bytes.size() - r.pos < need) r.fail("truncated pixel data");
    std::vector<uint8_t> px(need);
    std::copy_n(r.bytes.begin() + r.pos, need, px.begin());
    return px;
}

void write_image(const std::string& path, const Tensor& img) {
    if (img.rank() != 3) throw ShapeError("write_image expects [C,H,W]");
    const int c = img.shape[0], h = img.shape[1], w = img.shape[2];
    auto quant = [](double v) {
        return static_cast<uint8_t>(std::clamp(std::floor(v * 255.0 + 0.5), 0.0, 255.0));
    };
    if (c == 1) {
        std::vector<uint8_t> px(static_cast<size_t>(h) * w);
        for (int i = 0; i < h * w; ++i) px[i] = quant(img.at(i));
        write_pgm(path, px, h, w);
    } else if (c == 3) {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot open for write: " + path);
        f << "P6\n" << w << " " << h << "\n255\n";
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                for (int k = 0; k < 3; ++k) f.put(static_cast<char>(quant(img.at(k, y, x))));
            }
        }
    } else {
        throw ShapeError("write_image supports 1 or 3 channels");
    }
}

Tensor read_image(const std::string& path) {
    int h = 0, w = 0;
    const std::vector<uint8_t> px = read_pgm(path, h, w);
    std::vector<double> v(px.size());
    for (size_t i = 0; i < px.size(); ++i) v[i] = px[i] / 255.0;
    return Tensor::from({1, h, w}, std::move(v));
}

void write_mask(const std::string& path, const imgeo::BinaryMask& m) {
    std::vector<uint8_t> px(m.bits.size());
    for (size_t i = 0; i < px.size(); ++i) px[i] = m.bits[i] ? 255 : 0;
    write_pgm(path, px, m.height, m.width);
}

imgeo::BinaryMask read_mask(const std::string& path) {
    int h = 0, w = 0;
    const std::vector<uint8_t> px = read_pgm(path, h, w);
    imgeo::BinaryMask m(h, w);
    for (size_t i = 0; i < px.size(); ++i) m.bits[i] = px[i] >= 128 ? 1 : 0;
    return m;
}

// ---- dataset ------------------------------------------------------------------

namespace {

std::string spec_kv(const SceneSpec& s) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "# size=%d\n# lesions_min=%d\n# lesions_max=%d\n# radius_min=%.17g\n"
                  "# radius_max=%.17g\n# small_fraction=%.17g\n# small_radius_min=%.17g\n"
                  "# small_radius_max=%.17g\n# distractors_min=%d\n# distractors_max=%d\n"
                  "# lesion_contrast=%.17g\n# distractor_contrast=%.17g\n# noise=%.17g\n"
                  "# edge_softness=%.17g\n",
                  s.size, s.lesions_min, s.lesions_max, s.radius_min, s.radius_max,
                  s.small_fraction, s.small_radius_min, s.small_radius_max, s.distractors_min,
                  s.distractors_max, s.lesion_contrast, s.distractor_contrast, s.noise,
                  s.edge_softness);
    return buf;
}

}  // namespace

DatasetManifest generate_dataset(const std::string& dir, const std::string& split,
                                 const SceneSpec& spec, uint64_t seed, int count) {
    spec.validate();
    fs::create_directories(dir);
    DatasetManifest man;
    man.split = split;
    man.seed = seed;
    man.spec = spec;

    const uint64_t split_salt = std::hash<std::string>{}(split);
    for (int i = 0; i < count; ++i) {
        Rng rng(Rng::mix({seed, split_salt, static_cast<uint64_t>(i)}));
        const Sample s = generate_scene(spec, rng);
        char img_name[64], mask_name[64];
        std::snprintf(img_name, sizeof(img_name), "img_%05d.pgm", i);
        std::snprintf(mask_name, sizeof(mask_name), "mask_%05d.pgm", i);
        write_image((fs::path(dir) / img_name).string(), s.image);
        write_mask((fs::path(dir) / mask_name).string(), s.mask);
        man.entries.push_back({img_name, mask_name});
    }

    std::ofstream f(fs::path(dir) / "manifest.csv");
    if (!f) throw IoError("cannot write manifest in " + dir);
    f << "# split=" << split << "\n# seed=" << seed << "\n" << spec_kv(spec) << "image,mask\n";
    for (const auto& [img, msk] : man.entries) f << img << "," << msk << "\n";
    return man;
}

DatasetManifest read_manifest(const std::string& dir) {
    const fs::path p = fs::path(dir) / "manifest.csv";
    std::ifstream f(p);
    if (!f) throw IoError("missing manifest: " + p.string());
    DatasetManifest man;
    std::string line;
    bool header_seen = false;
    auto spec_field = [&](const std::string& key, const std::string& val) {
        SceneSpec& s = man.spec;
        if (key == "size") s.size = std::stoi(val);
        else if (key == "lesions_min") s.lesions_min = std::stoi(val);
        else if (key == "lesions_max") s.lesions_max = std::stoi(val);
        else if (key == "radius_min") s.radius_min = std::stod(val);
        else if (key == "radius_max") s.radius_max = std::stod(val);
        else if (key == "small_fraction") s.small_fraction = std::stod(val);
        else if (key == "small_radius_min") s.small_radius_min = std::stod(val);
        else if (key == "small_radius_max") s.small_radius_max = std::stod(val);
        else if (key == "distractors_min") s.distractors_min = std::stoi(val);
        else if (key == "distractors_max") s.distractors_max = std::stoi(val);
        else if (key == "lesion_contrast") s.lesion_contrast = std::stod(val);
        else if (key == "distractor_contrast") s.distractor_contrast = std::stod(val);
        else if (key == "noise") s.noise = std::stod(val);
        else if (key == "edge_softness") s.edge_softness = std::stod(val);
        else if (key == "split") man.split = val;
        else if (key == "seed") man.seed = std::stoull(val);
    };
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            const size_t eq = line.find('=');
            if (eq != std::string::npos) {
                std::string key = line.substr(2, eq - 2);
                spec_field(key, line.substr(eq + 1));
            }
            continue;
        }
        if (!header_seen) {  // "image,mask"
            header_seen = true;
            continue;
        }
        const size_t comma = line.find(',');
        if (comma == std::string::npos) throw ParseError(p.string() + ": bad manifest row: " + line);
        man.entries.push_back({line.substr(0, comma), line.substr(comma + 1)});
    }
    for (const auto& [img, msk] : man.entries) {
        if (!fs::exists(fs::path(dir) / img)) throw IoError("missing image file: " + img);
        if (!fs::exists(fs::path(dir) / msk)) throw IoError("missing mask file: " + msk);
    }
    return man;
}

Dataset load_dataset(const std::string& dir) {
    const DatasetManifest man = read_manifest(dir);
    Dataset out;
    out.reserve(man.entries.size());
    for (const auto& [img, msk] : man.entries) {
        Sample s;
        s.image = read_image((fs::path(dir) / img).string());
        s.mask = read_mask((fs::path(dir) / msk).string());
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace uhr::synth

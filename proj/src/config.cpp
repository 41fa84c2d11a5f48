#include "uhr/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace uhr::cfg {

std::vector<KeyRef> key_table(RunConfig& c) {
    return {
        {"tau", &c.tau},
        {"lambda_ic", &c.lambda_ic},
        {"lambda_aux", &c.lambda_aux},
        {"prototypes", &c.prototypes},
        {"beta", &c.beta},
        {"eps", &c.eps},
        {"scale_min", &c.scale_min},
        {"scale_max", &c.scale_max},
        {"batch", &c.batch},
        {"lr", &c.lr},
        {"epochs", &c.epochs},
        {"pretrain_epochs", &c.pretrain_epochs},
        {"seed", &c.seed},
        {"uoic", &c.uoic},
        {"base_hr", &c.base_hr},
        {"unc_guidance", &c.unc_guidance},
        {"fgbg_groups", &c.fgbg_groups},
        {"detach_uncertainty", &c.detach_uncertainty},
        {"flips", &c.flips},
        {"workers", &c.workers},
        {"scales", &c.scales},
        {"channels", &c.channels},
        {"scene_size", &c.scene_size},
        {"scene_lesions_min", &c.scene_lesions_min},
        {"scene_lesions_max", &c.scene_lesions_max},
        {"scene_radius_min", &c.scene_radius_min},
        {"scene_radius_max", &c.scene_radius_max},
        {"scene_small_fraction", &c.scene_small_fraction},
        {"scene_small_radius_min", &c.scene_small_radius_min},
        {"scene_small_radius_max", &c.scene_small_radius_max},
        {"scene_distractors_min", &c.scene_distractors_min},
        {"scene_distractors_max", &c.scene_distractors_max},
        {"scene_lesion_contrast", &c.scene_lesion_contrast},
        {"scene_distractor_contrast", &c.scene_distractor_contrast},
        {"scene_noise", &c.scene_noise},
        {"scene_edge_softness", &c.scene_edge_softness},
        {"train_count", &c.train_count},
        {"val_count", &c.val_count},
        {"data_dir", &c.data_dir},
        {"run_dir", &c.run_dir},
        {"checkpoint", &c.checkpoint},
        {"init_from", &c.init_from},
        {"dump_count", &c.dump_count},
        {"dump_hypergraph", &c.dump_hypergraph},
    };
}

std::vector<std::string> valid_keys() {
    RunConfig c;
    std::vector<std::string> out;
    for (const KeyRef& k : key_table(c)) out.push_back(k.name);
    return out;
}

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    throw ConfigError("bad boolean for " + key + ": " + v);
}

}  // namespace

void apply_kv(RunConfig& c, const std::string& key, const std::string& value) {
    for (const KeyRef& k : key_table(c)) {
        if (key != k.name) continue;
        try {
            std::visit(
                [&](auto* p) {
                    using T = std::remove_pointer_t<decltype(p)>;
                    if constexpr (std::is_same_v<T, int>) {
                        *p = std::stoi(value);
                    } else if constexpr (std::is_same_v<T, double>) {
                        *p = std::stod(value);
                    } else if constexpr (std::is_same_v<T, bool>) {
                        *p = parse_bool(value, key);
                    } else if constexpr (std::is_same_v<T, uint64_t>) {
                        *p = std::stoull(value);
                    } else {
                        *p = value;
                    }
                },
                k.ref);
        } catch (const std::invalid_argument&) {
            throw ConfigError("bad value for " + key + ": " + value);
        } catch (const std::out_of_range&) {
            throw ConfigError("value out of range for " + key + ": " + value);
        }
        return;
    }
    std::string known;
    for (const std::string& k : valid_keys()) known += (known.empty() ? "" : ", ") + k;
    throw ConfigError("unknown config key '" + key + "'; valid keys: " + known);
}

void parse_file(RunConfig& c, const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
        }
        apply_kv(c, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
}

std::string serialize(const RunConfig& c) {
    RunConfig& mut = const_cast<RunConfig&>(c);
    std::string out;
    char buf[256];
    for (const KeyRef& k : key_table(mut)) {
        std::visit(
            [&](auto* p) {
                using T = std::remove_pointer_t<decltype(p)>;
                if constexpr (std::is_same_v<T, int>) {
                    std::snprintf(buf, sizeof(buf), "%s = %d\n", k.name, *p);
                    out += buf;
                } else if constexpr (std::is_same_v<T, double>) {
                    std::snprintf(buf, sizeof(buf), "%s = %.17g\n", k.name, *p);
                    out += buf;
                } else if constexpr (std::is_same_v<T, bool>) {
                    out += std::string(k.name) + " = " + (*p ? "true" : "false") + "\n";
                } else if constexpr (std::is_same_v<T, uint64_t>) {
                    std::snprintf(buf, sizeof(buf), "%s = %llu\n", k.name,
                                  static_cast<unsigned long long>(*p));
                    out += buf;
                } else {
                    out += std::string(k.name) + " = " + *p + "\n";
                }
            },
            k.ref);
    }
    return out;
}

net::TrainOptions to_train_options(const RunConfig& c) {
    net::TrainOptions o;
    o.spec.scales = c.scales;
    o.spec.channels.clear();
    std::stringstream ss(c.channels);
    std::string tok;
    while (std::getline(ss, tok, ',')) o.spec.channels.push_back(std::stoi(trim(tok)));
    o.spec.in_channels = 1;
    o.spec.block.prototypes_per_group = c.prototypes;
    o.spec.block.beta = c.beta;
    o.spec.block.base_hr = c.base_hr;
    o.spec.block.unc_guidance = c.unc_guidance;
    o.spec.block.fgbg_groups = c.fgbg_groups;
    o.spec.block.detach_uncertainty = c.detach_uncertainty;
    o.spec.block.eps = c.eps;
    o.adam.lr = c.lr;
    o.batch = c.batch;
    o.epochs = c.epochs;
    o.pretrain_epochs = c.pretrain_epochs;
    o.seed = c.seed;
    o.lambda_aux = c.lambda_aux;
    o.lambda_ic = c.lambda_ic;
    o.tau = c.tau;
    o.copy_paste.scale_min = c.scale_min;
    o.copy_paste.scale_max = c.scale_max;
    o.uoic = c.uoic;
    o.flips = c.flips;
    o.workers = c.workers;
    o.spec.validate();
    return o;
}

synth::SceneSpec to_scene_spec(const RunConfig& c) {
    synth::SceneSpec s;
    s.size = c.scene_size;
    s.lesions_min = c.scene_lesions_min;
    s.lesions_max = c.scene_lesions_max;
    s.radius_min = c.scene_radius_min;
    s.radius_max = c.scene_radius_max;
    s.small_fraction = c.scene_small_fraction;
    s.small_radius_min = c.scene_small_radius_min;
    s.small_radius_max = c.scene_small_radius_max;
    s.distractors_min = c.scene_distractors_min;
    s.distractors_max = c.scene_distractors_max;
    s.lesion_contrast = c.scene_lesion_contrast;
    s.distractor_contrast = c.scene_distractor_contrast;
    s.noise = c.scene_noise;
    s.edge_softness = c.scene_edge_softness;
    s.validate();
    return s;
}

}  // namespace uhr::cfg

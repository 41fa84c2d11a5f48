#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "uhr/config.hpp"
#include "uhr/trainer.hpp"
#include "uhr/uncertainty.hpp"
#include "uhr/uoic.hpp"

namespace fs = std::filesystem;
using namespace uhr;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    f << text;
}

// Run directory layout: config.txt, metrics.csv, checkpoints/, dumps/.
void prepare_run_dir(const cfg::RunConfig& c) {
    fs::create_directories(c.run_dir);
    fs::create_directories(fs::path(c.run_dir) / "checkpoints");
    fs::create_directories(fs::path(c.run_dir) / "dumps");
    write_text(fs::path(c.run_dir) / "config.txt", cfg::serialize(c));
}

std::string train_dir(const cfg::RunConfig& c) { return (fs::path(c.data_dir) / "train").string(); }
std::string val_dir(const cfg::RunConfig& c) { return (fs::path(c.data_dir) / "val").string(); }

void require_dir(const std::string& d, const char* what) {
    if (!fs::exists(fs::path(d) / "manifest.csv")) {
        throw IoError(std::string(what) + " dataset missing: " + d + " (run `uhr synth` first?)");
    }
}

int cmd_synth(const cfg::RunConfig& c) {
    prepare_run_dir(c);
    const synth::SceneSpec spec = cfg::to_scene_spec(c);
    synth::generate_dataset(train_dir(c), "train", spec, c.seed, c.train_count);
    synth::generate_dataset(val_dir(c), "val", spec, c.seed, c.val_count);
    std::cout << "wrote " << c.train_count << " train / " << c.val_count << " val scenes under "
              << c.data_dir << "\n";
    return 0;
}

int cmd_augment(const cfg::RunConfig& c) {
    prepare_run_dir(c);
    require_dir(train_dir(c), "train");
    const synth::Dataset data = synth::load_dataset(train_dir(c));
    const fs::path out = fs::path(c.run_dir) / "augmented";
    fs::create_directories(out);

    imgeo::CopyPasteConfig cp;
    cp.scale_min = c.scale_min;
    cp.scale_max = c.scale_max;
    std::string log = "index,seed,instance,factor,center_row,center_col,r_s,success\n";
    char buf[256], name[64];
    for (size_t i = 0; i < data.size(); ++i) {
        const uint64_t s = Rng::mix({c.seed, 0x617567ULL, i});
        Rng rng(s);
        const imgeo::CopyPasteOutcome res =
            imgeo::copy_paste_augment(data[i].image, data[i].mask, cp, rng);
        std::snprintf(name, sizeof(name), "icp_%05zu.pgm", i);
        synth::write_image((out / name).string(), res.image_cp);
        std::snprintf(name, sizeof(name), "ycp_%05zu.pgm", i);
        synth::write_mask((out / name).string(), res.y_cp);
        std::snprintf(name, sizeof(name), "ma_%05zu.pgm", i);
        synth::write_mask((out / name).string(), res.m_a);
        std::snprintf(name, sizeof(name), "mb_%05zu.pgm", i);
        synth::write_mask((out / name).string(), res.m_b);
        std::snprintf(buf, sizeof(buf), "%zu,%llu,%d,%.17g,%d,%d,%.17g,%d\n", i,
                      static_cast<unsigned long long>(s), res.instance_index, res.factor,
                      res.center.first, res.center.second, res.r_s, res.augmented ? 1 : 0);
        log += buf;
    }
    write_text(fs::path(c.run_dir) / "augment_log.csv", log);
    std::cout << "augmented " << data.size() << " samples into " << out.string() << "\n";
    return 0;
}

int cmd_pretrain(const cfg::RunConfig& c) {
    prepare_run_dir(c);
    require_dir(train_dir(c), "train");
    const synth::Dataset train = synth::load_dataset(train_dir(c));
    const net::TrainOptions opt = cfg::to_train_options(c);

    net::TrainState st = net::init_pretrain_state(opt);
    for (int e = 0; e < opt.pretrain_epochs; ++e) {
        const net::EpochRow row = net::run_pretrain_epoch(st, train, opt);
        std::cout << "pretrain epoch " << row.epoch << "/" << opt.pretrain_epochs << " loss "
                  << row.loss_total << " (seg " << row.loss_seg << ", nce " << row.loss_nce
                  << ")\n";
        net::save_checkpoint((fs::path(c.run_dir) / "checkpoints" / "pretrain.ckpt").string(), st);
    }
    write_text(fs::path(c.run_dir) / "metrics.csv", net::metrics_csv(st.history));
    std::cout << "pretraining checkpoint: " << c.run_dir << "/checkpoints/pretrain.ckpt\n";
    return 0;
}

int cmd_train(const cfg::RunConfig& c) {
    prepare_run_dir(c);
    require_dir(train_dir(c), "train");
    require_dir(val_dir(c), "val");
    const synth::Dataset train = synth::load_dataset(train_dir(c));
    const synth::Dataset val = synth::load_dataset(val_dir(c));
    const net::TrainOptions opt = cfg::to_train_options(c);

    net::TrainState st;
    if (!c.checkpoint.empty()) {
        st = net::load_checkpoint(c.checkpoint);
        if (st.phase != "train") throw ConfigError("--checkpoint is not a training checkpoint");
        std::cout << "resuming from epoch " << st.epoch << "\n";
    } else if (opt.uoic) {
        net::TrainState pre;
        if (!c.init_from.empty()) {
            pre = net::load_checkpoint(c.init_from);
            if (pre.phase != "pretrain") throw ConfigError("--init_from is not a pretraining checkpoint");
        } else {
            pre = net::run_pretraining(opt, train, val);
            net::save_checkpoint((fs::path(c.run_dir) / "checkpoints" / "pretrain.ckpt").string(),
                                 pre);
        }
        st = net::init_train_state(opt, &pre.params);
    } else {
        st = net::init_train_state(opt, nullptr);
    }

    while (st.epoch < opt.epochs) {
        const net::EpochRow row = net::run_train_epoch(st, train, opt);
        const net::EpochRow vrow = net::evaluate(st.params, opt, val, row.epoch, "val");
        st.history.push_back(vrow);
        std::cout << "epoch " << row.epoch << "/" << opt.epochs << " train loss " << row.loss_total
                  << " val mIoU " << vrow.metrics.miou << "\n";
        net::save_checkpoint((fs::path(c.run_dir) / "checkpoints" / "last.ckpt").string(), st);
    }
    net::save_checkpoint((fs::path(c.run_dir) / "checkpoints" / "final.ckpt").string(), st);
    write_text(fs::path(c.run_dir) / "metrics.csv", net::metrics_csv(st.history));
    std::cout << "final checkpoint: " << c.run_dir << "/checkpoints/final.ckpt\n";
    return 0;
}

int cmd_eval(const cfg::RunConfig& c) {
    prepare_run_dir(c);
    if (c.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
    require_dir(val_dir(c), "val");
    const synth::Dataset val = synth::load_dataset(val_dir(c));
    const net::TrainOptions opt = cfg::to_train_options(c);
    net::TrainState st = net::load_checkpoint(c.checkpoint);
    if (st.phase != "train") throw ConfigError("eval needs a training checkpoint");

    const net::EpochRow row = net::evaluate(st.params, opt, val, st.epoch, "val");
    std::printf("mIoU %.4f  mDSC %.4f  recall %.4f  precision %.4f\n", row.metrics.miou,
                row.metrics.mdsc, row.metrics.recall, row.metrics.precision);
    write_text(fs::path(c.run_dir) / "metrics.csv", net::metrics_csv({row}));

    if (c.dump_hypergraph && !val.empty()) {
        std::vector<ughr::BlockDebug> dbg;
        Binding bind(st.params, nullptr);
        net::forward(bind, opt.spec, val[0].image, &dbg);
        for (size_t i = 0; i < dbg.size(); ++i) {
            uhrt_write((fs::path(c.run_dir) / "dumps" / ("S_scale" + std::to_string(i) + ".uhrt")).string(),
                       dbg[i].participation);
            uhrt_write((fs::path(c.run_dir) / "dumps" / ("P_scale" + std::to_string(i) + ".uhrt")).string(),
                       dbg[i].prototypes);
        }
    }
    return 0;
}

// Table-style ablation presets over {UO-IC, Base HR, Unc. Guid., FG/BG HG}.
struct Preset {
    int id;
    bool uoic, base_hr, unc, fgbg;
};
constexpr Preset kPresets[] = {
    {1, false, false, false, false}, {2, true, false, false, false},
    {3, false, true, false, false},  {4, false, true, false, true},
    {5, false, true, true, false},   {6, false, true, true, true},
    {7, true, true, true, true},
};

int cmd_ablate(const cfg::RunConfig& c) {
    prepare_run_dir(c);
    require_dir(train_dir(c), "train");
    require_dir(val_dir(c), "val");
    const synth::Dataset train = synth::load_dataset(train_dir(c));
    const synth::Dataset val = synth::load_dataset(val_dir(c));

    std::string csv = "experiment,uoic,base_hr,unc_guidance,fgbg_groups,miou,mdsc,recall,precision\n";
    char buf[256];
    for (const Preset& p : kPresets) {
        cfg::RunConfig cc = c;
        cc.uoic = p.uoic;
        cc.base_hr = p.base_hr;
        cc.unc_guidance = p.unc;
        cc.fgbg_groups = p.fgbg;
        const net::TrainOptions opt = cfg::to_train_options(cc);
        std::cout << "ablation experiment " << p.id << " (uoic=" << p.uoic
                  << " base_hr=" << p.base_hr << " unc=" << p.unc << " fgbg=" << p.fgbg << ")\n";
        const net::TrainState st = net::run_full(opt, train, val, /*quiet=*/true);
        write_text(fs::path(c.run_dir) / ("metrics_preset" + std::to_string(p.id) + ".csv"),
                   net::metrics_csv(st.history));
        const net::EpochRow& last = st.history.back();
        std::snprintf(buf, sizeof(buf), "%d,%d,%d,%d,%d,%.17g,%.17g,%.17g,%.17g\n", p.id,
                      p.uoic ? 1 : 0, p.base_hr ? 1 : 0, p.unc ? 1 : 0, p.fgbg ? 1 : 0,
                      last.metrics.miou, last.metrics.mdsc, last.metrics.recall,
                      last.metrics.precision);
        csv += buf;
        std::cout << "  val mIoU " << last.metrics.miou << "\n";
    }
    write_text(fs::path(c.run_dir) / "ablation.csv", csv);
    std::cout << "wrote " << c.run_dir << "/ablation.csv\n";
    return 0;
}

int cmd_dump_uncertainty(const cfg::RunConfig& c) {
    prepare_run_dir(c);
    if (c.checkpoint.empty()) throw ConfigError("dump-uncertainty needs --checkpoint");
    require_dir(val_dir(c), "val");
    const synth::Dataset val = synth::load_dataset(val_dir(c));
    const net::TrainOptions opt = cfg::to_train_options(c);
    net::TrainState st = net::load_checkpoint(c.checkpoint);
    if (st.phase != "train") throw ConfigError("dump-uncertainty needs a training checkpoint");

    const fs::path dumps = fs::path(c.run_dir) / "dumps";
    const int n = std::min<int>(c.dump_count, static_cast<int>(val.size()));
    for (int i = 0; i < n; ++i) {
        Binding bind(st.params, nullptr);
        const net::ForwardOut fw = net::forward(bind, opt.spec, val[i].image);
        const int h = val[i].image.shape[1], w = val[i].image.shape[2];
        for (int s = 0; s < opt.spec.scales; ++s) {
            const Tensor mhat_i = uncertainty::resize_to_scale(fw.mhat, h >> s, w >> s);
            const Tensor u = uncertainty::entropy_uncertainty(mhat_i, opt.spec.block.eps);
            char name[64];
            std::snprintf(name, sizeof(name), "unc_%03d_scale%d", i, s);
            uhrt_write((dumps / (std::string(name) + ".uhrt")).string(), u);
            synth::write_image((dumps / (std::string(name) + ".pgm")).string(),
                               reshape(u, {1, h >> s, w >> s}));
        }
    }
    std::cout << "wrote uncertainty dumps for " << n << " images under " << dumps.string() << "\n";
    return 0;
}

int cmd_dump_embeddings(const cfg::RunConfig& c) {
    prepare_run_dir(c);
    if (c.checkpoint.empty()) throw ConfigError("dump-embeddings needs --checkpoint");
    require_dir(train_dir(c), "train");
    const synth::Dataset data = synth::load_dataset(train_dir(c));
    const net::TrainOptions opt = cfg::to_train_options(c);
    net::TrainState st = net::load_checkpoint(c.checkpoint);
    if (st.phase != "pretrain") throw ConfigError("dump-embeddings needs a pretraining checkpoint");

    const net::EmbeddingDump dump = net::collect_embeddings(st.params, opt, data);
    const fs::path dumps = fs::path(c.run_dir) / "dumps";
    auto stack = [](const std::vector<Tensor>& vs) {
        std::vector<Tensor> rows;
        for (const Tensor& v : vs) rows.push_back(reshape(v, {1, v.shape[0]}));
        return concat(rows, 0);
    };
    std::string csv = "kind,row,sample,area\n";
    char buf[128];
    if (!dump.z_a.empty()) {
        uhrt_write((dumps / "za.uhrt").string(), stack(dump.z_a));
        uhrt_write((dumps / "zb.uhrt").string(), stack(dump.z_b));
        for (size_t i = 0; i < dump.z_a.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "a,%zu,%d,%lld\n", i, dump.sample_of_a[i],
                          static_cast<long long>(dump.area_a[i]));
            csv += buf;
            std::snprintf(buf, sizeof(buf), "b,%zu,%d,%lld\n", i, dump.sample_of_a[i],
                          static_cast<long long>(dump.area_b[i]));
            csv += buf;
        }
    }
    if (!dump.z_bg.empty()) {
        uhrt_write((dumps / "zbg.uhrt").string(), stack(dump.z_bg));
        for (size_t i = 0; i < dump.z_bg.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "bg,%zu,%d,0\n", i, dump.sample_of_bg[i]);
            csv += buf;
        }
    }
    write_text(fs::path(c.run_dir) / "embeddings.csv", csv);

    // Quick separation summary: positive-pair vs hard-negative cosine.
    if (!dump.z_a.empty() && !dump.z_bg.empty()) {
        double pos = 0.0, neg = 0.0;
        int negc = 0;
        for (size_t i = 0; i < dump.z_a.size(); ++i) {
            pos += uoic::cosine(dump.z_a[i], dump.z_b[i]).item();
            for (const Tensor& bg : dump.z_bg) {
                neg += uoic::cosine(dump.z_a[i], bg).item();
                ++negc;
            }
        }
        pos /= static_cast<double>(dump.z_a.size());
        neg /= std::max(1, negc);
        std::printf("mean cos(z_A,z_B) %.4f, mean cos(z_A,z_bg) %.4f, margin %.4f\n", pos, neg,
                    pos - neg);
    }
    std::cout << "wrote embedding dumps under " << dumps.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"UHR-Net desk-scale training and evaluation tool"};
    app.require_subcommand(1);

    cfg::RunConfig conf;
    std::string config_path;
    std::vector<std::pair<std::string, std::string>> staged;  // key -> raw value
    std::vector<CLI::Option*> staged_opts;
    std::vector<std::string> staged_keys;

    std::vector<CLI::App*> subs;
    for (const char* name : {"synth", "augment", "pretrain", "train", "eval", "ablate",
                             "dump-uncertainty", "dump-embeddings"}) {
        subs.push_back(app.add_subcommand(name));
    }
    subs[0]->description("generate a synthetic lesion dataset (train + val splits)");
    subs[1]->description("preview copy-paste augmentation over the train split");
    subs[2]->description("UO-IC pretraining of the encoder + guidance head");
    subs[3]->description("end-to-end training (optionally preceded by UO-IC)");
    subs[4]->description("evaluate a checkpoint on the val split");
    subs[5]->description("run the 7 standard ablation presets");
    subs[6]->description("write per-scale uncertainty maps for val images");
    subs[7]->description("write (z_A, z_B, z_bg) embeddings from a pretraining checkpoint");

    staged.reserve(64);
    {
        cfg::RunConfig probe;
        for (const auto& k : cfg::key_table(probe)) staged_keys.push_back(k.name);
    }
    staged.resize(staged_keys.size());
    for (CLI::App* sub : subs) {
        sub->add_option("--config", config_path, "config file with key = value lines");
        for (size_t i = 0; i < staged_keys.size(); ++i) {
            staged[i].first = staged_keys[i];
            CLI::Option* o = sub->add_option("--" + staged_keys[i], staged[i].second);
            if (sub == subs[0]) staged_opts.push_back(o);
        }
    }

    try {
        app.parse(argc, argv);

        // Precedence: built-in defaults < UHR_SEED < config file < flags.
        if (const char* env = std::getenv("UHR_SEED")) {
            cfg::apply_kv(conf, "seed", env);
        }
        if (!config_path.empty()) cfg::parse_file(conf, config_path);
        CLI::App* active = app.get_subcommands().front();
        for (size_t i = 0; i < staged_keys.size(); ++i) {
            const CLI::Option* o = active->get_option("--" + staged_keys[i]);
            if (o->count() > 0) cfg::apply_kv(conf, staged[i].first, staged[i].second);
        }

        const std::string name = active->get_name();
        if (name == "synth") return cmd_synth(conf);
        if (name == "augment") return cmd_augment(conf);
        if (name == "pretrain") return cmd_pretrain(conf);
        if (name == "train") return cmd_train(conf);
        if (name == "eval") return cmd_eval(conf);
        if (name == "ablate") return cmd_ablate(conf);
        if (name == "dump-uncertainty") return cmd_dump_uncertainty(conf);
        if (name == "dump-embeddings") return cmd_dump_embeddings(conf);
        return 1;
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

#include "uhr/trainer.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <thread>

#include "uhr/uoic.hpp"

namespace uhr::net {

namespace {

constexpr uint64_t kShuffleSalt = 0x73687566ULL;
constexpr uint64_t kSampleSalt = 0x73616d70ULL;

std::vector<int> epoch_order(size_t n, uint64_t seed, int epoch) {
    std::vector<int> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
    Rng rng(Rng::mix({seed, kShuffleSalt, static_cast<uint64_t>(epoch)}));
    for (size_t i = n; i > 1; --i) {
        const int j = rng.uniform_int(0, static_cast<int>(i) - 1);
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

Rng sample_rng(uint64_t seed, int epoch, int index, uint64_t phase) {
    return Rng(Rng::mix({seed, kSampleSalt, static_cast<uint64_t>(epoch),
                         static_cast<uint64_t>(index), phase}));
}

synth::Sample maybe_flip(const synth::Sample& s, Rng& rng, bool enabled) {
    if (!enabled) return s;
    const bool fh = rng.uniform() < 0.5;
    const bool fv = rng.uniform() < 0.5;
    return synth::flip_sample(s, fh, fv);
}

int worker_count(const TrainOptions& opt, size_t jobs) {
    int w = opt.workers > 0 ? opt.workers : static_cast<int>(std::thread::hardware_concurrency());
    if (w < 1) w = 1;
    return static_cast<int>(std::min<size_t>(w, jobs));
}

void reduce_in_place(std::vector<std::vector<double>>& acc,
                     const std::vector<std::vector<double>>& part, double scale) {
    for (size_t i = 0; i < acc.size(); ++i) {
        const auto& p = part[i];
        auto& a = acc[i];
        for (size_t j = 0; j < a.size(); ++j) a[j] += scale * p[j];
    }
}

}  // namespace

TrainState init_pretrain_state(const TrainOptions& opt) {
    TrainState st;
    st.phase = "pretrain";
    st.seed = opt.seed;
    st.params = init_pretrain_params(opt.spec, opt.seed);
    st.opt.init_like(st.params);
    return st;
}

TrainState init_train_state(const TrainOptions& opt, const ParamStore* pretrained) {
    TrainState st;
    st.phase = "train";
    st.seed = opt.seed;
    st.params = init_params(opt.spec, opt.seed);
    if (pretrained) transfer_pretrained(*pretrained, st.params);
    st.opt.init_like(st.params);
    return st;
}

EpochRow run_pretrain_epoch(TrainState& st, const synth::Dataset& train,
                            const TrainOptions& opt) {
    const int epoch = st.epoch;
    const std::vector<int> order = epoch_order(train.size(), st.seed, epoch);

    EpochRow row;
    row.epoch = epoch + 1;
    row.split = "pretrain";
    double sum_total = 0.0, sum_seg = 0.0, sum_nce = 0.0;
    int batches = 0, nce_batches = 0;
    int64_t skipped_pairs = 0, dropped_negs = 0;
    std::vector<Metrics> per_image;

    for (size_t start = 0; start < order.size(); start += opt.batch) {
        const size_t end = std::min(order.size(), start + opt.batch);
        Tape tape;
        Binding bind(st.params, &tape);

        std::vector<Tensor> seg_terms;
        uoic::ContrastiveBatch cb;
        cb.tau = opt.tau;
        for (size_t k = start; k < end; ++k) {
            const int idx = order[k];
            Rng rng = sample_rng(st.seed, epoch, idx, 1);
            const synth::Sample flipped = maybe_flip(train[idx], rng, opt.flips);
            const imgeo::CopyPasteOutcome aug =
                imgeo::copy_paste_augment(flipped.image, flipped.mask, opt.copy_paste, rng);

            PretrainOut fw = pretrain_forward(bind, opt.spec, aug.image_cp);
            seg_terms.push_back(seg_loss(fw.yhat_cp, aug.y_cp));
            per_image.push_back(image_metrics(fw.yhat_cp, aug.y_cp));

            if (aug.augmented) {
                auto z_a = uoic::masked_avg_pool(fw.feat, aug.m_a);
                auto z_b = uoic::masked_avg_pool(fw.feat, aug.m_b);
                if (z_a && z_b) {
                    cb.anchors.push_back(*z_a);
                    cb.positives.push_back(*z_b);
                } else {
                    ++skipped_pairs;
                }
            } else {
                ++skipped_pairs;
            }
            auto z_bg = uoic::mine_hard_negative(fw.feat, aug.y_cp, fw.yhat_cp);
            if (z_bg) {
                cb.negatives.push_back(*z_bg);
            } else {
                ++dropped_negs;
            }
        }

        Tensor seg_mean = mean_all(concat(seg_terms, 0));
        const uoic::NceResult nce = uoic::info_nce(cb);
        Tensor total = uoic::pretrain_loss(seg_mean, nce, opt.lambda_ic);
        tape.backward(total);
        adam_step(st.params, st.opt, bind.collect_grads(), opt.adam);

        sum_total += total.item();
        sum_seg += seg_mean.item();
        if (nce.contributing > 0) {
            sum_nce += nce.loss.item();
            ++nce_batches;
        }
        skipped_pairs += nce.dropped_pairs;
        dropped_negs += nce.dropped_negatives;
        ++batches;
    }

    row.loss_total = batches ? sum_total / batches : 0.0;
    row.loss_seg = batches ? sum_seg / batches : 0.0;
    row.loss_nce = nce_batches ? sum_nce / nce_batches : 0.0;
    row.metrics = mean_metrics(per_image);
    if (skipped_pairs || dropped_negs) {
        std::cout << "  [pretrain] epoch " << row.epoch << ": skipped contrastive pairs "
                  << skipped_pairs << ", dropped negatives " << dropped_negs << "\n";
    }
    st.epoch += 1;
    st.history.push_back(row);
    return row;
}

namespace {

struct SampleResult {
    std::vector<std::vector<double>> grads;
    double loss_total = 0.0, loss_seg = 0.0, loss_aux = 0.0;
    Metrics metrics;
};

SampleResult train_one_sample(const ParamStore& params, const TrainOptions& opt,
                              const synth::Sample& sample, uint64_t seed, int epoch, int idx) {
    Rng rng = sample_rng(seed, epoch, idx, 2);
    const synth::Sample s = maybe_flip(sample, rng, opt.flips);

    Tape tape;
    Binding bind(params, &tape);
    ForwardOut fw = forward(bind, opt.spec, s.image);
    const Tensor seg = seg_loss(fw.yhat, s.mask);
    Tensor total = seg;
    double aux_val = 0.0;
    if (opt.lambda_aux != 0.0) {
        const Tensor aux = seg_loss(fw.mhat_up, s.mask);
        aux_val = aux.item();
        total = add(seg, scalar_mul(aux, opt.lambda_aux));
    }
    tape.backward(total);

    SampleResult r;
    r.grads = bind.collect_grads();
    r.loss_total = total.item();
    r.loss_seg = seg.item();
    r.loss_aux = aux_val;
    r.metrics = image_metrics(fw.yhat, s.mask);
    return r;
}

}  // namespace

EpochRow run_train_epoch(TrainState& st, const synth::Dataset& train, const TrainOptions& opt) {
    const int epoch = st.epoch;
    const std::vector<int> order = epoch_order(train.size(), st.seed, epoch);

    EpochRow row;
    row.epoch = epoch + 1;
    row.split = "train";
    double sum_total = 0.0, sum_seg = 0.0, sum_aux = 0.0;
    std::vector<Metrics> per_image;

    for (size_t start = 0; start < order.size(); start += opt.batch) {
        const size_t end = std::min(order.size(), start + opt.batch);
        const size_t bsz = end - start;
        std::vector<SampleResult> results(bsz);

        const int workers = worker_count(opt, bsz);
        if (workers <= 1) {
            for (size_t k = 0; k < bsz; ++k) {
                results[k] = train_one_sample(st.params, opt, train[order[start + k]], st.seed,
                                              epoch, order[start + k]);
            }
        } else {
            std::vector<std::thread> pool;
            for (int t = 0; t < workers; ++t) {
                pool.emplace_back([&, t]() {
                    for (size_t k = t; k < bsz; k += workers) {
                        results[k] = train_one_sample(st.params, opt, train[order[start + k]],
                                                      st.seed, epoch, order[start + k]);
                    }
                });
            }
            for (auto& th : pool) th.join();
        }

        // Fixed-order reduction: mean gradient over the batch.
        std::vector<std::vector<double>> grads(st.params.size());
        for (int i = 0; i < st.params.size(); ++i) {
            grads[i].assign(st.params.entry(i).value.size(), 0.0);
        }
        const double inv = 1.0 / static_cast<double>(bsz);
        for (size_t k = 0; k < bsz; ++k) {
            reduce_in_place(grads, results[k].grads, inv);
            sum_total += results[k].loss_total;
            sum_seg += results[k].loss_seg;
            sum_aux += results[k].loss_aux;
            per_image.push_back(results[k].metrics);
        }
        adam_step(st.params, st.opt, grads, opt.adam);
    }

    const double n = static_cast<double>(order.size());
    row.loss_total = sum_total / n;
    row.loss_seg = sum_seg / n;
    row.loss_aux = sum_aux / n;
    row.metrics = mean_metrics(per_image);
    st.epoch += 1;
    st.history.push_back(row);
    return row;
}

EpochRow evaluate(const ParamStore& params, const TrainOptions& opt, const synth::Dataset& data,
                  int epoch, const std::string& split) {
    EpochRow row;
    row.epoch = epoch;
    row.split = split;
    std::vector<Metrics> per_image(data.size());
    std::vector<double> seg_l(data.size(), 0.0), aux_l(data.size(), 0.0);

    const int workers = worker_count(opt, data.size());
    auto job = [&](size_t k) {
        Binding bind(params, nullptr);
        ForwardOut fw = forward(bind, opt.spec, data[k].image);
        per_image[k] = image_metrics(fw.yhat, data[k].mask);
        seg_l[k] = seg_loss(fw.yhat, data[k].mask).item();
        aux_l[k] = opt.lambda_aux != 0.0 ? seg_loss(fw.mhat_up, data[k].mask).item() : 0.0;
    };
    if (workers <= 1) {
        for (size_t k = 0; k < data.size(); ++k) job(k);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < workers; ++t) {
            pool.emplace_back([&, t]() {
                for (size_t k = t; k < data.size(); k += workers) job(k);
            });
        }
        for (auto& th : pool) th.join();
    }
    for (size_t k = 0; k < data.size(); ++k) {
        row.loss_seg += seg_l[k];
        row.loss_aux += aux_l[k];
    }
    if (!data.empty()) {
        row.loss_seg /= static_cast<double>(data.size());
        row.loss_aux /= static_cast<double>(data.size());
    }
    row.loss_total = row.loss_seg + opt.lambda_aux * row.loss_aux;
    row.metrics = mean_metrics(per_image);
    return row;
}

EmbeddingDump collect_embeddings(const ParamStore& params, const TrainOptions& opt,
                                 const synth::Dataset& data) {
    EmbeddingDump dump;
    for (size_t i = 0; i < data.size(); ++i) {
        Rng rng = sample_rng(opt.seed, 0, static_cast<int>(i), 3);
        const imgeo::CopyPasteOutcome aug =
            imgeo::copy_paste_augment(data[i].image, data[i].mask, opt.copy_paste, rng);
        Binding bind(params, nullptr);
        PretrainOut fw = pretrain_forward(bind, opt.spec, aug.image_cp);
        if (aug.augmented) {
            auto z_a = uoic::masked_avg_pool(fw.feat, aug.m_a);
            auto z_b = uoic::masked_avg_pool(fw.feat, aug.m_b);
            if (z_a && z_b) {
                dump.z_a.push_back(*z_a);
                dump.z_b.push_back(*z_b);
                dump.sample_of_a.push_back(static_cast<int>(i));
                dump.area_a.push_back(aug.m_a.count());
                dump.area_b.push_back(aug.m_b.count());
            }
        }
        auto z_bg = uoic::mine_hard_negative(fw.feat, aug.y_cp, fw.yhat_cp);
        if (z_bg) {
            dump.z_bg.push_back(*z_bg);
            dump.sample_of_bg.push_back(static_cast<int>(i));
        }
    }
    return dump;
}

std::string metrics_csv(const std::vector<EpochRow>& rows) {
    std::string out = "epoch,split,miou,mdsc,recall,precision,loss_total,loss_seg,loss_aux,loss_nce\n";
    char buf[512];
    for (const EpochRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                      r.epoch, r.split.c_str(), r.metrics.miou, r.metrics.mdsc, r.metrics.recall,
                      r.metrics.precision, r.loss_total, r.loss_seg, r.loss_aux, r.loss_nce);
        out += buf;
    }
    return out;
}

// ---- checkpointing ---------------------------------------------------------
// Text header followed by raw little-endian f64 blobs (parameter values, then
// Adam m and v per entry, in store order). Doubles in the header are printed
// with %.17g so the file round-trips bit-exactly.

void save_checkpoint(const std::string& path, const TrainState& st) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint for write: " + path);
    f << "UHRCKPT2\n";
    f << "phase " << st.phase << "\n";
    f << "epoch " << st.epoch << "\n";
    f << "seed " << st.seed << "\n";
    f << "adam_step " << st.opt.step << "\n";
    f << "params " << st.params.size() << "\n";
    for (int i = 0; i < st.params.size(); ++i) {
        const auto& e = st.params.entry(i);
        f << e.name << " " << e.role << " " << e.shape.size();
        for (int d : e.shape) f << " " << d;
        f << "\n";
    }
    f << "history " << st.history.size() << "\n";
    char buf[512];
    for (const EpochRow& r : st.history) {
        std::snprintf(buf, sizeof(buf), "%d %s %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n",
                      r.epoch, r.split.c_str(), r.metrics.miou, r.metrics.mdsc, r.metrics.recall,
                      r.metrics.precision, r.loss_total, r.loss_seg, r.loss_aux, r.loss_nce);
        f << buf;
    }
    f << "DATA\n";
    auto blob = [&](const std::vector<double>& v) {
        f.write(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
    };
    for (int i = 0; i < st.params.size(); ++i) {
        blob(st.params.entry(i).value);
        blob(st.opt.m[i]);
        blob(st.opt.v[i]);
    }
    if (!f) throw IoError("short checkpoint write: " + path);
}

TrainState load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    std::string magic;
    std::getline(f, magic);
    if (magic != "UHRCKPT2") throw ParseError(path + ": bad checkpoint magic");

    TrainState st;
    std::string key;
    f >> key >> st.phase;
    if (key != "phase") throw ParseError(path + ": expected phase");
    f >> key >> st.epoch;
    if (key != "epoch") throw ParseError(path + ": expected epoch");
    f >> key >> st.seed;
    if (key != "seed") throw ParseError(path + ": expected seed");
    f >> key >> st.opt.step;
    if (key != "adam_step") throw ParseError(path + ": expected adam_step");
    int n_params = 0;
    f >> key >> n_params;
    if (key != "params") throw ParseError(path + ": expected params");

    struct Meta {
        std::string name, role;
        Shape shape;
    };
    std::vector<Meta> metas(n_params);
    for (auto& m : metas) {
        int rank = 0;
        f >> m.name >> m.role >> rank;
        m.shape.resize(rank);
        for (int i = 0; i < rank; ++i) f >> m.shape[i];
    }
    int n_hist = 0;
    f >> key >> n_hist;
    if (key != "history") throw ParseError(path + ": expected history");
    st.history.resize(n_hist);
    for (auto& r : st.history) {
        f >> r.epoch >> r.split >> r.metrics.miou >> r.metrics.mdsc >> r.metrics.recall >>
            r.metrics.precision >> r.loss_total >> r.loss_seg >> r.loss_aux >> r.loss_nce;
    }
    std::string data_tag;
    f >> data_tag;
    if (data_tag != "DATA") throw ParseError(path + ": expected DATA");
    f.get();  // newline

    const int64_t saved_step = st.opt.step;
    for (const Meta& m : metas) {
        const int64_t n = shape_numel(m.shape);
        std::vector<double> v(n);
        f.read(reinterpret_cast<char*>(v.data()), n * sizeof(double));
        st.params.add(m.name, m.shape, m.role, std::move(v));
        st.opt.m.emplace_back(n);
        f.read(reinterpret_cast<char*>(st.opt.m.back().data()), n * sizeof(double));
        st.opt.v.emplace_back(n);
        f.read(reinterpret_cast<char*>(st.opt.v.back().data()), n * sizeof(double));
    }
    st.opt.step = saved_step;
    if (!f) throw ParseError(path + ": truncated checkpoint data");
    return st;
}

// ---- pipelines ---------------------------------------------------------------

TrainState run_pretraining(const TrainOptions& opt, const synth::Dataset& train,
                           const synth::Dataset& val, bool quiet) {
    TrainState st = init_pretrain_state(opt);
    for (int e = 0; e < opt.pretrain_epochs; ++e) {
        const EpochRow row = run_pretrain_epoch(st, train, opt);
        if (!quiet) {
            std::cout << "pretrain epoch " << row.epoch << "/" << opt.pretrain_epochs
                      << " loss " << row.loss_total << " (seg " << row.loss_seg << ", nce "
                      << row.loss_nce << ")\n";
        }
        (void)val;
    }
    return st;
}

TrainState run_training(const TrainOptions& opt, const synth::Dataset& train,
                        const synth::Dataset& val, const ParamStore* pretrained, bool quiet) {
    TrainState st = init_train_state(opt, pretrained);
    for (int e = 0; e < opt.epochs; ++e) {
        const EpochRow row = run_train_epoch(st, train, opt);
        const EpochRow vrow = evaluate(st.params, opt, val, row.epoch, "val");
        st.history.push_back(vrow);
        if (!quiet) {
            std::cout << "epoch " << row.epoch << "/" << opt.epochs << " train loss "
                      << row.loss_total << " val mIoU " << vrow.metrics.miou << "\n";
        }
    }
    return st;
}

TrainState run_full(const TrainOptions& opt, const synth::Dataset& train,
                    const synth::Dataset& val, bool quiet) {
    if (!opt.uoic) return run_training(opt, train, val, nullptr, quiet);
    const TrainState pre = run_pretraining(opt, train, val, quiet);
    return run_training(opt, train, val, &pre.params, quiet);
}

}  // namespace uhr::net

#include "uhr/net.hpp"

#include <cmath>

#include "uhr/uncertainty.hpp"

namespace uhr::net {

void NetworkSpec::validate() const {
    if (scales < 2) throw ConfigError("network needs at least 2 scales");
    if (static_cast<int>(channels.size()) != scales) {
        throw ConfigError("channels list must have one entry per scale");
    }
    for (size_t i = 1; i < channels.size(); ++i) {
        if (channels[i] < channels[i - 1]) {
            throw ConfigError("channels must be nondecreasing with depth");
        }
    }
    if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
}

namespace {

std::vector<double> he_conv(Rng& rng, int co, int ci, int k) {
    const double std = std::sqrt(2.0 / (static_cast<double>(ci) * k * k));
    std::vector<double> v(static_cast<size_t>(co) * ci * k * k);
    for (auto& x : v) x = rng.normal(0.0, std);
    return v;
}

std::vector<double> zeros(int64_t n) { return std::vector<double>(n, 0.0); }

void add_conv(ParamStore& s, const std::string& name, const std::string& role, int co, int ci,
              int k, Rng& rng, bool zero_init = false) {
    s.add(name + "_w", {co, ci, k, k}, role,
          zero_init ? zeros(static_cast<int64_t>(co) * ci * k * k) : he_conv(rng, co, ci, k));
    s.add(name + "_b", {co}, role, zeros(co));
}

void add_encoder_and_guidance(ParamStore& store, const NetworkSpec& spec, Rng& rng) {
    int prev = spec.in_channels;
    for (int i = 0; i < spec.scales; ++i) {
        const int c = spec.channels[i];
        add_conv(store, "enc" + std::to_string(i) + "_conv1", "encoder", c, prev, 3, rng);
        add_conv(store, "enc" + std::to_string(i) + "_conv2", "encoder", c, c, 3, rng);
        prev = c;
    }
    // Zero-initialized head: the coarse map starts at sigmoid(0) = 0.5.
    add_conv(store, "guide", "guidance", 1, spec.channels.back(), 1, rng, /*zero_init=*/true);
}

}  // namespace

ParamStore init_params(const NetworkSpec& spec, uint64_t seed) {
    spec.validate();
    ParamStore store;
    Rng rng(Rng::mix({seed, 0x70617261'6d73ULL}));
    add_encoder_and_guidance(store, spec, rng);

    for (int i = spec.scales - 1; i >= 0; --i) {
        const int c = spec.channels[i];
        add_conv(store, "align" + std::to_string(i), "refine", c, c, 1, rng);
        if (i < spec.scales - 1) {
            add_conv(store, "up" + std::to_string(i), "refine", c, spec.channels[i + 1], 1, rng);
        }
        ughr::add_block_params(store, "ughr" + std::to_string(i) + ".", c, spec.block, rng);
    }
    for (int i = spec.scales - 2; i >= 0; --i) {
        const int c = spec.channels[i];
        add_conv(store, "dec" + std::to_string(i) + "_reduce", "decoder", c, spec.channels[i + 1],
                 1, rng);
        add_conv(store, "dec" + std::to_string(i) + "_conv", "decoder", c, c, 3, rng);
    }
    add_conv(store, "head", "decoder", 1, spec.channels[0], 1, rng, /*zero_init=*/true);
    return store;
}

ParamStore init_pretrain_params(const NetworkSpec& spec, uint64_t seed) {
    spec.validate();
    ParamStore store;
    Rng rng(Rng::mix({seed, 0x70617261'6d73ULL}));
    add_encoder_and_guidance(store, spec, rng);
    return store;
}

int transfer_pretrained(const ParamStore& pre, ParamStore& full) {
    int copied = 0;
    for (int i = 0; i < pre.size(); ++i) {
        const auto& e = pre.entry(i);
        if (!full.has(e.name)) continue;
        auto& dst = full.entry(full.index_of(e.name));
        if (dst.shape != e.shape) throw ShapeError("pretrained shape mismatch on " + e.name);
        dst.value = e.value;
        ++copied;
    }
    return copied;
}

namespace {

struct ScaleDims {
    int h, w;
};

std::vector<ScaleDims> scale_dims(const NetworkSpec& spec, int h, int w) {
    std::vector<ScaleDims> out(spec.scales);
    for (int i = 0; i < spec.scales; ++i) {
        out[i] = {h >> i, w >> i};
    }
    return out;
}

std::vector<Tensor> run_encoder(Binding& p, const NetworkSpec& spec, const Tensor& image) {
    const int h = image.shape[1], w = image.shape[2];
    const int f = spec.downsample_factor();
    if (h % f != 0 || w % f != 0) {
        throw ConfigError("input " + std::to_string(h) + "x" + std::to_string(w) +
                          " must be divisible by " + std::to_string(f) +
                          "; pad to the next multiple");
    }
    std::vector<Tensor> enc;
    Tensor cur = image;
    for (int i = 0; i < spec.scales; ++i) {
        if (i > 0) cur = bilinear_resize(cur, cur.shape[1] / 2, cur.shape[2] / 2);
        const std::string base = "enc" + std::to_string(i);
        cur = relu(conv2d(cur, p(base + "_conv1_w"), p(base + "_conv1_b"), 1));
        cur = relu(conv2d(cur, p(base + "_conv2_w"), p(base + "_conv2_b"), 1));
        enc.push_back(cur);
    }
    return enc;
}

Tensor guidance_map(Binding& p, const Tensor& deepest) {
    const Tensor logits = conv2d(deepest, p("guide_w"), p("guide_b"), 1);
    return sigmoid(reshape(logits, {deepest.shape[1], deepest.shape[2]}));
}

}  // namespace

ForwardOut forward(Binding& p, const NetworkSpec& spec, const Tensor& image,
                   std::vector<ughr::BlockDebug>* dbg) {
    if (image.rank() != 3 || image.shape[0] != spec.in_channels) {
        throw ShapeError("forward expects image [" + std::to_string(spec.in_channels) + ",H,W]");
    }
    ForwardOut out;
    out.enc = run_encoder(p, spec, image);
    out.mhat = guidance_map(p, out.enc.back());
    const auto dims = scale_dims(spec, image.shape[1], image.shape[2]);
    if (dbg) dbg->resize(spec.scales);

    out.refined.resize(spec.scales);
    for (int i = spec.scales - 1; i >= 0; --i) {
        const std::string si = std::to_string(i);
        Tensor d = conv2d(out.enc[i], p("align" + si + "_w"), p("align" + si + "_b"), 1);
        if (i < spec.scales - 1) {
            Tensor up = conv2d(out.refined[i + 1], p("up" + si + "_w"), p("up" + si + "_b"), 1);
            d = add(d, bilinear_resize(up, dims[i].h, dims[i].w));
        }
        const Tensor mhat_i = uncertainty::resize_to_scale(out.mhat, dims[i].h, dims[i].w);
        out.refined[i] = ughr::ughr_block(p, "ughr" + si + ".", d, mhat_i, spec.block,
                                          dbg ? &(*dbg)[i] : nullptr);
    }

    Tensor h = out.refined.back();
    for (int i = spec.scales - 2; i >= 0; --i) {
        const std::string si = std::to_string(i);
        Tensor t = conv2d(h, p("dec" + si + "_reduce_w"), p("dec" + si + "_reduce_b"), 1);
        t = bilinear_resize(t, dims[i].h, dims[i].w);
        h = relu(conv2d(add(t, out.refined[i]), p("dec" + si + "_conv_w"),
                        p("dec" + si + "_conv_b"), 1));
    }
    const Tensor logits = conv2d(h, p("head_w"), p("head_b"), 1);
    out.yhat = sigmoid(reshape(logits, {image.shape[1], image.shape[2]}));
    out.mhat_up = bilinear_resize(out.mhat, image.shape[1], image.shape[2]);
    return out;
}

PretrainOut pretrain_forward(Binding& p, const NetworkSpec& spec, const Tensor& image) {
    PretrainOut out;
    const std::vector<Tensor> enc = run_encoder(p, spec, image);
    out.mhat = guidance_map(p, enc.back());
    out.yhat_cp = bilinear_resize(out.mhat, image.shape[1], image.shape[2]);
    // Instance pooling reads the middle scale: deep enough to be semantic,
    // shallow enough that small replicas survive mask downsampling.
    out.feat = enc[spec.scales / 2];
    return out;
}

namespace {

Tensor mask_tensor(const imgeo::BinaryMask& y) {
    std::vector<double> v(y.bits.begin(), y.bits.end());
    return Tensor::from({y.height, y.width}, std::move(v));
}

constexpr double kLogClamp = 1e-8;
constexpr double kDiceSmooth = 1.0;

}  // namespace

Tensor seg_loss(const Tensor& yhat, const imgeo::BinaryMask& y) {
    if (yhat.numel() != static_cast<int64_t>(y.height) * y.width) {
        throw ShapeError("seg_loss prediction/mask size mismatch");
    }
    const Tensor yt = mask_tensor(y);
    const Tensor inter = sum_all(mul(yhat, yt));
    const Tensor dice =
        sub(1.0, div(add(scalar_mul(inter, 2.0), kDiceSmooth),
                     add(add(sum_all(yhat), sum_all(yt)), kDiceSmooth)));

    const Tensor logp = log_eps(clamp_min(yhat, kLogClamp), 0.0);
    const Tensor logq = log_eps(clamp_min(sub(1.0, yhat), kLogClamp), 0.0);
    const Tensor bce = scalar_mul(sum_all(add(mul(yt, logp), mul(sub(1.0, yt), logq))),
                                  -1.0 / static_cast<double>(yhat.numel()));
    return add(dice, bce);
}

Tensor train_loss(const Tensor& yhat, const imgeo::BinaryMask& y, const Tensor& mhat_up,
                  double lambda_aux) {
    const Tensor main = seg_loss(yhat, y);
    if (lambda_aux == 0.0) return main;
    return add(main, scalar_mul(seg_loss(mhat_up, y), lambda_aux));
}

Metrics image_metrics(const Tensor& yhat, const imgeo::BinaryMask& y) {
    int64_t tp = 0, fp = 0, fn = 0;
    const double* p = yhat.ptr();
    for (int64_t i = 0; i < yhat.numel(); ++i) {
        const bool pred = p[i] > 0.5;
        const bool gt = y.bits[i] != 0;
        tp += pred && gt;
        fp += pred && !gt;
        fn += !pred && gt;
    }
    Metrics m;
    if (tp + fn == 0) {  // empty ground truth
        const double v = (fp == 0) ? 1.0 : 0.0;
        m.miou = m.mdsc = m.recall = m.precision = v;
        return m;
    }
    m.miou = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    m.mdsc = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    m.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    m.precision = (tp + fp == 0) ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    return m;
}

Metrics mean_metrics(const std::vector<Metrics>& per_image) {
    Metrics m;
    if (per_image.empty()) return m;
    for (const Metrics& x : per_image) {
        m.miou += x.miou;
        m.mdsc += x.mdsc;
        m.recall += x.recall;
        m.precision += x.precision;
    }
    const double n = static_cast<double>(per_image.size());
    m.miou /= n;
    m.mdsc /= n;
    m.recall /= n;
    m.precision /= n;
    return m;
}

void AdamState::init_like(const ParamStore& store) {
    step = 0;
    m.assign(store.size(), {});
    v.assign(store.size(), {});
    for (int i = 0; i < store.size(); ++i) {
        m[i].assign(store.entry(i).value.size(), 0.0);
        v[i].assign(store.entry(i).value.size(), 0.0);
    }
}

void adam_step(ParamStore& params, AdamState& state,
               const std::vector<std::vector<double>>& grads, const AdamConfig& cfg) {
    if (static_cast<int>(grads.size()) != params.size()) {
        throw ContractError("adam_step gradient list does not match parameter store");
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (int i = 0; i < params.size(); ++i) {
        auto& w = params.entry(i).value;
        auto& mi = state.m[i];
        auto& vi = state.v[i];
        const auto& g = grads[i];
        for (size_t j = 0; j < w.size(); ++j) {
            mi[j] = cfg.beta1 * mi[j] + (1.0 - cfg.beta1) * g[j];
            vi[j] = cfg.beta2 * vi[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double mhat = mi[j] / bc1;
            const double vhat = vi[j] / bc2;
            w[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

}  // namespace uhr::net

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgdiff/checkpoint.hpp"
#include "sgdiff/errors.hpp"
#include "sgdiff/nn.hpp"
#include "sgdiff/rng.hpp"
#include "sgdiff/tensor.hpp"

namespace sgdiff {

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

struct NoiseSchedule {
    int T = 1000;
    std::vector<double> beta, alpha, alpha_bar;
    std::vector<double> sqrt_ab, sqrt_1mab;

    static NoiseSchedule linear(int T = 1000, double beta_start = 1e-4, double beta_end = 2e-2) {
        if (T < 1) throw ConfigError("NoiseSchedule: T must be positive");
        NoiseSchedule s;
        s.T = T;
        s.beta.resize(T);
        s.alpha.resize(T);
        s.alpha_bar.resize(T);
        s.sqrt_ab.resize(T);
        s.sqrt_1mab.resize(T);
        double ab = 1.0;
        for (int t = 0; t < T; ++t) {
            s.beta[t] = T == 1 ? beta_start
                               : beta_start + (beta_end - beta_start) * t / (T - 1.0);
            s.alpha[t] = 1.0 - s.beta[t];
            ab *= s.alpha[t];
            s.alpha_bar[t] = ab;
            s.sqrt_ab[t] = std::sqrt(ab);
            s.sqrt_1mab[t] = std::sqrt(1.0 - ab);
        }
        return s;
    }
};

/// Closed-form forward noising: x_t = sqrt(ab_t) x0 + sqrt(1-ab_t) eps.
inline Tensor q_sample(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& sched) {
    x0.require_same(eps);
    if (t < 0 || t >= sched.T) throw ConfigError("q_sample: timestep out of range");
    Tensor xt(x0.shape);
    for (std::size_t i = 0; i < x0.size(); ++i)
        xt.data[i] = sched.sqrt_ab[t] * x0.data[i] + sched.sqrt_1mab[t] * eps.data[i];
    return xt;
}

// ---------------------------------------------------------------------------
// Noise-prediction network: a small UNet with two downsamplings, skip
// connections, and sinusoidal time embeddings injected as per-channel biases.
// ---------------------------------------------------------------------------

struct EpsModelConfig {
    int channels = 3;
    int image_size = 32;  // must be divisible by 4
    int base = 32;
    int temb_dim = 64;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const {
        return {{"channels", channels}, {"image_size", image_size}, {"base", base},
                {"temb_dim", temb_dim}, {"seed", seed}};
    }
    static EpsModelConfig from_json(const nlohmann::json& j) {
        EpsModelConfig c;
        c.channels = j.value("channels", c.channels);
        c.image_size = j.value("image_size", c.image_size);
        c.base = j.value("base", c.base);
        c.temb_dim = j.value("temb_dim", c.temb_dim);
        c.seed = j.value("seed", c.seed);
        return c;
    }
};

inline nn::VectorXd sinusoidal_embedding(double t, int dim) {
    nn::VectorXd e(dim);
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / std::max(half - 1, 1));
        e(i) = std::sin(t * freq);
        e(half + i) = std::cos(t * freq);
    }
    for (int i = 2 * half; i < dim; ++i) e(i) = 0.0;
    return e;
}

namespace detail {

/// Projects the time embedding to a per-channel bias added over H x W.
struct TimeBias {
    nn::Linear lin;
    TimeBias() = default;
    TimeBias(int temb_dim, int channels, RngStream& rng) : lin(temb_dim, channels, rng) {}
    void collect(nn::ParamRefs& p) { lin.collect(p); }

    void apply(Tensor& x, const nn::MatrixXd& temb) const {
        nn::MatrixXd bias = lin.forward(temb);  // channels x N
        int N = x.shape[0], C = x.shape[1];
        std::size_t plane = static_cast<std::size_t>(x.shape[2]) * x.shape[3];
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                double b = bias(c, n);
                double* d = x.data.data() + (static_cast<std::size_t>(n) * C + c) * plane;
                for (std::size_t p = 0; p < plane; ++p) d[p] += b;
            }
    }

    void backward(const Tensor& g, const nn::MatrixXd& temb) {
        int N = g.shape[0], C = g.shape[1];
        std::size_t plane = static_cast<std::size_t>(g.shape[2]) * g.shape[3];
        nn::MatrixXd gb(C, N);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                double s = 0;
                const double* d = g.data.data() + (static_cast<std::size_t>(n) * C + c) * plane;
                for (std::size_t p = 0; p < plane; ++p) s += d[p];
                gb(c, n) = s;
            }
        lin.backward(temb, gb);
    }
};

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    int N = a.shape[0], Ca = a.shape[1], Cb = b.shape[1], H = a.shape[2], W = a.shape[3];
    Tensor y({N, Ca + Cb, H, W});
    std::size_t plane = static_cast<std::size_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.data.data() + static_cast<std::size_t>(n) * Ca * plane, Ca * plane,
                    y.data.data() + static_cast<std::size_t>(n) * (Ca + Cb) * plane);
        std::copy_n(b.data.data() + static_cast<std::size_t>(n) * Cb * plane, Cb * plane,
                    y.data.data() + (static_cast<std::size_t>(n) * (Ca + Cb) + Ca) * plane);
    }
    return y;
}

inline void split_channels(const Tensor& g, Tensor& ga, Tensor& gb) {
    int N = g.shape[0], Ca = ga.shape[1], Cb = gb.shape[1], H = g.shape[2], W = g.shape[3];
    std::size_t plane = static_cast<std::size_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        std::copy_n(g.data.data() + static_cast<std::size_t>(n) * (Ca + Cb) * plane, Ca * plane,
                    ga.data.data() + static_cast<std::size_t>(n) * Ca * plane);
        std::copy_n(g.data.data() + (static_cast<std::size_t>(n) * (Ca + Cb) + Ca) * plane,
                    Cb * plane, gb.data.data() + static_cast<std::size_t>(n) * Cb * plane);
    }
}

}  // namespace detail

class EpsModel {
   public:
    EpsModel() = default;
    explicit EpsModel(const EpsModelConfig& cfg) : cfg_(cfg) {
        if (cfg.image_size % 4 != 0)
            throw ConfigError("EpsModel: image_size must be divisible by 4");
        RngStream rng(cfg.seed, 0xeb5);
        int C = cfg.channels, b = cfg.base, te = cfg.temb_dim;
        c_in_ = nn::Conv2d(C, b, 3, 1, 1, rng);
        d1_ = nn::Conv2d(b, b, 3, 1, 1, rng);
        tb1_ = detail::TimeBias(te, b, rng);
        down1_ = nn::Conv2d(b, 2 * b, 3, 2, 1, rng);
        d2_ = nn::Conv2d(2 * b, 2 * b, 3, 1, 1, rng);
        tb2_ = detail::TimeBias(te, 2 * b, rng);
        down2_ = nn::Conv2d(2 * b, 4 * b, 3, 2, 1, rng);
        mid1_ = nn::Conv2d(4 * b, 4 * b, 3, 1, 1, rng);
        tbm_ = detail::TimeBias(te, 4 * b, rng);
        mid2_ = nn::Conv2d(4 * b, 4 * b, 3, 1, 1, rng);
        up1_ = nn::Conv2d(4 * b, 2 * b, 3, 1, 1, rng);
        u1_ = nn::Conv2d(4 * b, 2 * b, 3, 1, 1, rng);
        tbu1_ = detail::TimeBias(te, 2 * b, rng);
        up2_ = nn::Conv2d(2 * b, b, 3, 1, 1, rng);
        u2_ = nn::Conv2d(2 * b, b, 3, 1, 1, rng);
        tbu2_ = detail::TimeBias(te, b, rng);
        c_out_ = nn::Conv2d(b, C, 3, 1, 1, rng);
        // zero-init the output conv so the initial prediction is zero noise
        std::fill(c_out_.W.data.begin(), c_out_.W.data.end(), 0.0);
    }

    const EpsModelConfig& config() const { return cfg_; }

    nn::ParamRefs params() {
        nn::ParamRefs p;
        c_in_.collect(p);
        d1_.collect(p);
        tb1_.collect(p);
        down1_.collect(p);
        d2_.collect(p);
        tb2_.collect(p);
        down2_.collect(p);
        mid1_.collect(p);
        tbm_.collect(p);
        mid2_.collect(p);
        up1_.collect(p);
        u1_.collect(p);
        tbu1_.collect(p);
        up2_.collect(p);
        u2_.collect(p);
        tbu2_.collect(p);
        c_out_.collect(p);
        return p;
    }

    struct Cache {
        nn::MatrixXd temb;
        Tensor x, h0, a1, h1, p1, a2, h2, p2, am1, hm1, am2, hm2;
        Tensor um1, uc1, cat1, au1, hu1, um2, uc2, cat2, au2, hu2;
    };

    /// Predicts the noise for a batch; x is NCHW, ts holds one timestep per
    /// sample (normalized by T before embedding).
    Tensor forward(const Tensor& x, const std::vector<int>& ts, int T,
                   Cache* cache = nullptr) const {
        if (x.shape.size() != 4 || x.shape[1] != cfg_.channels)
            throw ShapeError("EpsModel: bad input shape");
        if (static_cast<std::size_t>(x.shape[0]) != ts.size())
            throw LengthMismatchError("EpsModel: one timestep per sample required");
        int N = x.shape[0];
        nn::MatrixXd temb(cfg_.temb_dim, N);
        for (int n = 0; n < N; ++n)
            temb.col(n) = sinusoidal_embedding(static_cast<double>(ts[n]) / T, cfg_.temb_dim);

        Tensor h0 = c_in_.forward(x);
        Tensor a1 = d1_.forward(h0);
        tb1_.apply(a1, temb);
        Tensor h1 = nn::silu_t(a1);
        Tensor p1 = down1_.forward(h1);
        Tensor a2 = d2_.forward(p1);
        tb2_.apply(a2, temb);
        Tensor h2 = nn::silu_t(a2);
        Tensor p2 = down2_.forward(h2);
        Tensor am1 = mid1_.forward(p2);
        tbm_.apply(am1, temb);
        Tensor hm1 = nn::silu_t(am1);
        Tensor am2 = mid2_.forward(hm1);
        Tensor hm2 = nn::silu_t(am2);

        Tensor um1 = nn::upsample2(hm2);
        Tensor uc1 = up1_.forward(um1);
        Tensor cat1 = detail::concat_channels(uc1, h2);
        Tensor au1 = u1_.forward(cat1);
        tbu1_.apply(au1, temb);
        Tensor hu1 = nn::silu_t(au1);
        Tensor um2 = nn::upsample2(hu1);
        Tensor uc2 = up2_.forward(um2);
        Tensor cat2 = detail::concat_channels(uc2, h1);
        Tensor au2 = u2_.forward(cat2);
        tbu2_.apply(au2, temb);
        Tensor hu2 = nn::silu_t(au2);
        Tensor out = c_out_.forward(hu2);

        if (cache) {
            cache->temb = temb;
            cache->x = x;
            cache->h0 = h0;
            cache->a1 = a1;
            cache->h1 = h1;
            cache->p1 = p1;
            cache->a2 = a2;
            cache->h2 = h2;
            cache->p2 = p2;
            cache->am1 = am1;
            cache->hm1 = hm1;
            cache->am2 = am2;
            cache->hm2 = hm2;
            cache->um1 = um1;
            cache->uc1 = uc1;
            cache->cat1 = cat1;
            cache->au1 = au1;
            cache->hu1 = hu1;
            cache->um2 = um2;
            cache->uc2 = uc2;
            cache->cat2 = cat2;
            cache->au2 = au2;
            cache->hu2 = hu2;
        }
        return out;
    }

    /// Single-sample convenience wrapper (CHW in, CHW out).
    Tensor forward_one(const Tensor& x_chw, int t, int T) const {
        Tensor x({1, x_chw.shape[0], x_chw.shape[1], x_chw.shape[2]});
        x.data = x_chw.data;
        Tensor y = forward(x, {t}, T);
        Tensor out(x_chw.shape);
        out.data = y.data;
        return out;
    }

    /// Accumulates parameter gradients for d(loss)/d(output) = g_out.
    void backward(const Cache& c, const Tensor& g_out) {
        Tensor g = c_out_.backward(c.hu2, g_out);
        g = nn::silu_t_backward(c.au2, g);
        tbu2_.backward(g, c.temb);
        Tensor gcat2 = u2_.backward(c.cat2, g);
        Tensor guc2(c.uc2.shape), gh1(c.h1.shape);
        detail::split_channels(gcat2, guc2, gh1);
        Tensor gum2 = up2_.backward(c.um2, guc2);
        Tensor ghu1 = nn::upsample2_backward(gum2);
        Tensor gau1 = nn::silu_t_backward(c.au1, ghu1);
        tbu1_.backward(gau1, c.temb);
        Tensor gcat1 = u1_.backward(c.cat1, gau1);
        Tensor guc1(c.uc1.shape), gh2(c.h2.shape);
        detail::split_channels(gcat1, guc1, gh2);
        Tensor gum1 = up1_.backward(c.um1, guc1);
        Tensor ghm2 = nn::upsample2_backward(gum1);
        Tensor gam2 = nn::silu_t_backward(c.am2, ghm2);
        Tensor ghm1 = mid2_.backward(c.hm1, gam2);
        Tensor gam1 = nn::silu_t_backward(c.am1, ghm1);
        tbm_.backward(gam1, c.temb);
        Tensor gp2 = mid1_.backward(c.p2, gam1);
        gh2 += down2_.backward(c.h2, gp2);
        Tensor ga2 = nn::silu_t_backward(c.a2, gh2);
        tb2_.backward(ga2, c.temb);
        Tensor gp1 = d2_.backward(c.p1, ga2);
        gh1 += down1_.backward(c.h1, gp1);
        Tensor ga1 = nn::silu_t_backward(c.a1, gh1);
        tb1_.backward(ga1, c.temb);
        Tensor gh0 = d1_.backward(c.h0, ga1);
        c_in_.backward(c.x, gh0);
    }

    void save(const std::string& path) {
        nlohmann::json header;
        header["kind"] = "eps_model";
        header["version"] = 1;
        header["config"] = cfg_.to_json();
        auto p = params();
        save_checkpoint(path, header, p);
    }

    static EpsModel load(const std::string& path) {
        nlohmann::json header = peek_checkpoint(path);
        if (header.value("kind", "") != "eps_model")
            throw SchemaError("checkpoint is not a diffusion model: " + path);
        EpsModel model(EpsModelConfig::from_json(header.at("config")));
        auto p = model.params();
        load_checkpoint(path, p);
        return model;
    }

   private:
    EpsModelConfig cfg_;
    nn::Conv2d c_in_, d1_, down1_, d2_, down2_, mid1_, mid2_, up1_, u1_, up2_, u2_, c_out_;
    detail::TimeBias tb1_, tb2_, tbm_, tbu1_, tbu2_;
};

// ---------------------------------------------------------------------------
// Training objective
// ---------------------------------------------------------------------------

/// Mean squared error between predicted and true noise; optionally returns
/// the gradient w.r.t. the prediction.
inline double ddpm_loss(const Tensor& eps_pred, const Tensor& eps, Tensor* grad = nullptr) {
    eps_pred.require_same(eps);
    double s = 0.0;
    double inv = 1.0 / static_cast<double>(eps.size());
    if (grad) *grad = Tensor(eps.shape);
    for (std::size_t i = 0; i < eps.size(); ++i) {
        double d = eps_pred.data[i] - eps.data[i];
        s += d * d;
        if (grad) grad->data[i] = 2.0 * d * inv;
    }
    return s * inv;
}

struct DiffusionTrainConfig {
    int steps = 400;        // optimizer steps
    int batch_size = 4;
    double lr = 2e-3;
    std::uint64_t seed = 0;
    int log_every = 50;
};

/// Seed-deterministic DDPM training on [0,1] images (CHW tensors).
inline std::vector<double> train_diffusion(
    EpsModel& model, const std::vector<Tensor>& images, const NoiseSchedule& sched,
    const DiffusionTrainConfig& cfg,
    const std::function<void(int, double)>& on_log = {}) {
    if (images.empty()) throw DatasetEmptyError("train_diffusion: empty dataset");
    nn::ParamRefs params = model.params();
    nn::Adam opt(params, cfg.lr);
    RngStream rng(cfg.seed, 0xd1ff);
    const auto& mc = model.config();
    std::vector<double> losses;
    double window = 0.0;
    for (int step = 0; step < cfg.steps; ++step) {
        int B = cfg.batch_size;
        Tensor xt({B, mc.channels, mc.image_size, mc.image_size});
        Tensor eps({B, mc.channels, mc.image_size, mc.image_size});
        std::vector<int> ts(B);
        std::size_t sample = static_cast<std::size_t>(mc.channels) * mc.image_size * mc.image_size;
        for (int b = 0; b < B; ++b) {
            const Tensor& x0 = images[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<int>(images.size()) - 1))];
            if (x0.size() != sample) throw ShapeError("train_diffusion: image shape mismatch");
            ts[b] = rng.uniform_int(0, sched.T - 1);
            for (std::size_t i = 0; i < sample; ++i) {
                double e = rng.normal();
                eps.data[static_cast<std::size_t>(b) * sample + i] = e;
                xt.data[static_cast<std::size_t>(b) * sample + i] =
                    sched.sqrt_ab[ts[b]] * x0.data[i] + sched.sqrt_1mab[ts[b]] * e;
            }
        }
        EpsModel::Cache cache;
        Tensor pred = model.forward(xt, ts, sched.T, &cache);
        Tensor grad;
        double loss = ddpm_loss(pred, eps, &grad);
        if (!std::isfinite(loss))
            throw NonFiniteLossError("train_diffusion: non-finite loss at step " +
                                     std::to_string(step));
        opt.zero_grads();
        model.backward(cache, grad);
        opt.step();
        losses.push_back(loss);
        window += loss;
        if (on_log && (step + 1) % cfg.log_every == 0) {
            on_log(step + 1, window / cfg.log_every);
            window = 0.0;
        }
    }
    return losses;
}

// ---------------------------------------------------------------------------
// Deterministic DDIM sampling with an optional score-guidance hook
// ---------------------------------------------------------------------------

struct SampleConfig {
    int steps = 100;
    bool clip_denoised = true;
    std::uint64_t seed = 0;
};

/// Guidance hook: receives the current denoised estimate x0_hat (CHW) and the
/// timestep, returns grad log p w.r.t. x0_hat (the ascent direction) already
/// scaled by the guidance strength.
using GuidanceFn = std::function<Tensor(const Tensor& x0_hat, int t)>;

/// Evenly strided timestep subsequence, descending.
inline std::vector<int> ddim_timesteps(int T, int steps) {
    if (steps < 1 || steps > T)
        throw StepUnderflowError("ddim_timesteps: step count must be in [1, T]");
    std::vector<int> ts(steps);
    for (int k = 0; k < steps; ++k) ts[k] = static_cast<int>(static_cast<long>(k) * T / steps);
    std::reverse(ts.begin(), ts.end());
    return ts;
}

/// One deterministic (eta = 0) update from timestep t to t_prev (< t, or -1
/// for the final step). The guidance gradient shifts the posterior mean by
/// sigma_t^2 * grad, mapped from x0-space through the 1/sqrt(ab_t) chain
/// factor.
inline Tensor ddim_step(const EpsModel& model, const Tensor& x, int t, int t_prev,
                        const NoiseSchedule& sched, bool clip_denoised = true,
                        const GuidanceFn& guidance = {}) {
    Tensor eps = model.forward_one(x, t, sched.T);
    double ab_t = sched.alpha_bar[t];
    double ab_prev = t_prev >= 0 ? sched.alpha_bar[t_prev] : 1.0;
    Tensor x0(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
        double v = (x.data[i] - sched.sqrt_1mab[t] * eps.data[i]) / sched.sqrt_ab[t];
        x0.data[i] = clip_denoised ? std::clamp(v, 0.0, 1.0) : v;
    }
    Tensor out(x.shape);
    double s_prev = std::sqrt(ab_prev), n_prev = std::sqrt(1.0 - ab_prev);
    for (std::size_t i = 0; i < x.size(); ++i)
        out.data[i] = s_prev * x0.data[i] + n_prev * eps.data[i];
    if (guidance) {
        Tensor g = guidance(x0, t);
        g.require_same(x);
        // posterior variance of the ancestral chain at this stride
        double sigma2 = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev);
        double chain = 1.0 / sched.sqrt_ab[t];
        for (std::size_t i = 0; i < x.size(); ++i)
            out.data[i] += sigma2 * chain * g.data[i];
    }
    return out;
}

/// Full sampling loop from Gaussian noise; returns the final x0 estimate.
inline Tensor sample(const EpsModel& model, const NoiseSchedule& sched, const SampleConfig& cfg,
                     const GuidanceFn& guidance = {},
                     const std::function<void(int, const Tensor&)>& on_step = {}) {
    const auto& mc = model.config();
    Tensor x({mc.channels, mc.image_size, mc.image_size});
    RngStream rng(cfg.seed, 0x5a3);
    for (double& v : x.data) v = rng.normal();
    std::vector<int> ts = ddim_timesteps(sched.T, cfg.steps);
    for (std::size_t k = 0; k < ts.size(); ++k) {
        int t = ts[k];
        int t_prev = k + 1 < ts.size() ? ts[k + 1] : -1;
        x = ddim_step(model, x, t, t_prev, sched, cfg.clip_denoised, guidance);
        if (!x.finite()) throw NonFiniteLossError("sample: non-finite state at t=" +
                                                  std::to_string(t));
        if (on_step) on_step(t, x);
    }
    for (double& v : x.data) v = std::clamp(v, 0.0, 1.0);
    return x;
}

// ---------------------------------------------------------------------------
// First-stage codes: the segmentation-guidance similarity operates on encoder
// codes of the current estimate and the rendered segmentation.
// ---------------------------------------------------------------------------

enum class FirstStageKind { Identity, Pool, Ldm8 };

/// Differentiable first-stage encoder. `Identity` passes pixels through,
/// `Pool` average-pools by a factor (cheap fixed encoder), `Ldm8` describes
/// an 8x-downsampling KL autoencoder interface whose weights are not
/// bundled; using it raises EmbedderUnavailableError.
struct FirstStageAE {
    FirstStageKind kind = FirstStageKind::Identity;
    int pool_factor = 4;

    static FirstStageAE identity() { return {FirstStageKind::Identity, 1}; }
    static FirstStageAE pooled(int factor) { return {FirstStageKind::Pool, factor}; }
    static FirstStageAE ldm8() { return {FirstStageKind::Ldm8, 8}; }

    std::string name() const {
        switch (kind) {
            case FirstStageKind::Identity: return "identity";
            case FirstStageKind::Pool: return "pool" + std::to_string(pool_factor);
            case FirstStageKind::Ldm8: return "ldm8-kl";
        }
        return "?";
    }

    Tensor encode(const Tensor& x) const {
        if (kind == FirstStageKind::Ldm8)
            throw EmbedderUnavailableError(
                "first-stage ldm8-kl: pretrained weights are not bundled; the interface expects "
                "4-channel codes at 1/8 resolution");
        if (kind == FirstStageKind::Identity) return x;
        int C = x.shape[0], H = x.shape[1], W = x.shape[2];
        if (H % pool_factor != 0 || W % pool_factor != 0)
            throw ShapeError("FirstStageAE: size not divisible by pool factor");
        Tensor z({C, H / pool_factor, W / pool_factor});
        double inv = 1.0 / (pool_factor * pool_factor);
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H / pool_factor; ++y)
                for (int xx = 0; xx < W / pool_factor; ++xx) {
                    double s = 0;
                    for (int dy = 0; dy < pool_factor; ++dy)
                        for (int dx = 0; dx < pool_factor; ++dx)
                            s += x.at(c, y * pool_factor + dy, xx * pool_factor + dx);
                    z.at(c, y, xx) = s * inv;
                }
        return z;
    }

    /// Gradient of (upstream . encode(x)) w.r.t. x.
    Tensor encode_backward(const Tensor& x, const Tensor& upstream) const {
        if (kind == FirstStageKind::Ldm8)
            throw EmbedderUnavailableError("first-stage ldm8-kl: weights not bundled");
        if (kind == FirstStageKind::Identity) return upstream;
        int C = x.shape[0], H = x.shape[1], W = x.shape[2];
        Tensor g(x.shape);
        double inv = 1.0 / (pool_factor * pool_factor);
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx)
                    g.at(c, y, xx) = upstream.at(c, y / pool_factor, xx / pool_factor) * inv;
        return g;
    }
};

/// Flattened, L2-normalized first-stage code used for cosine similarity.
inline Tensor ae_code(const FirstStageAE& ae, const Tensor& x) {
    Tensor z = ae.encode(x);
    double n = l2_norm(z);
    if (n > 0) z *= 1.0 / n;
    return z;
}

}  // namespace sgdiff

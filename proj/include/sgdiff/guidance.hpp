#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgdiff/diffusion.hpp"
#include "sgdiff/embedding.hpp"
#include "sgdiff/errors.hpp"
#include "sgdiff/layout.hpp"
#include "sgdiff/rng.hpp"
#include "sgdiff/tensor.hpp"

namespace sgdiff {

// All guidance operations return g = -d(score)/d(image): stepping along -g
// ascends the score. The sampler's mean-shift slot expects the ascent
// direction, so callers negate once at injection time.

struct GuidanceSpec {
    bool enable_text = true;
    bool enable_box = true;
    bool enable_seg = true;
    double lambda = 1.2;     // augmented-box intensity
    double seg_scale = 0.5;  // weight of the segmentation term in the total
    double alpha = 1.0;      // global guidance scale applied by the sampler
    std::uint64_t noise_seed = 0;

    void validate() const {
        if (lambda < 0 || seg_scale < 0 || alpha < 0)
            throw ConfigError("GuidanceSpec: lambda, seg_scale, alpha must be >= 0");
    }

    nlohmann::json to_json() const {
        return {{"enable_text", enable_text}, {"enable_box", enable_box},
                {"enable_seg", enable_seg},   {"lambda", lambda},
                {"seg_scale", seg_scale},     {"alpha", alpha},
                {"noise_seed", noise_seed}};
    }
    static GuidanceSpec from_json(const nlohmann::json& j) {
        GuidanceSpec s;
        s.enable_text = j.value("enable_text", s.enable_text);
        s.enable_box = j.value("enable_box", s.enable_box);
        s.enable_seg = j.value("enable_seg", s.enable_seg);
        s.lambda = j.value("lambda", s.lambda);
        s.seg_scale = j.value("seg_scale", s.seg_scale);
        s.alpha = j.value("alpha", s.alpha);
        s.noise_seed = j.value("noise_seed", s.noise_seed);
        s.validate();
        return s;
    }
};

/// Per-object regions of interest with area-proportional weights.
struct RoiContext {
    struct Roi {
        BBox box;
        std::string label;
        double weight = 0;
    };
    std::vector<Roi> rois;
    int height = 0, width = 0;

    static RoiContext from_layout(const std::vector<BBox>& boxes,
                                  const std::vector<std::string>& labels, int height, int width) {
        if (boxes.empty()) throw EmptyRoiError("RoiContext: no regions");
        if (boxes.size() != labels.size())
            throw LengthMismatchError("RoiContext: box/label count mismatch");
        RoiContext ctx;
        ctx.height = height;
        ctx.width = width;
        double total = 0;
        for (const BBox& b : boxes) {
            if (!b.valid()) throw ShapeError("RoiContext: invalid box");
            total += b.area();
        }
        for (std::size_t k = 0; k < boxes.size(); ++k)
            ctx.rois.push_back({boxes[k], labels[k], boxes[k].area() / total});
        return ctx;
    }
};

namespace detail {

/// Pixel-center membership test shared by padding and gradient masking.
inline bool pixel_inside(const BBox& b, int x, int y, int W, int H) {
    double u = (x + 0.5) / W, v = (y + 0.5) / H;
    return u >= b.x0 && u < b.x1 && v >= b.y0 && v < b.y1;
}

}  // namespace detail

/// Copies the box interior and replaces the exterior with clamped Gaussian
/// noise (0.5 + 0.2 eps). The stream is fully determined by `seed`; callers
/// mix in the object index and sampler step.
inline Tensor pad_with_noise(const Tensor& image, const BBox& box, std::uint64_t seed) {
    if (!box.valid()) throw ShapeError("pad_with_noise: invalid box");
    int C = image.shape[0], H = image.shape[1], W = image.shape[2];
    Tensor out(image.shape);
    RngStream rng(seed, 0xda0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            bool inside = detail::pixel_inside(box, x, y, W, H);
            for (int c = 0; c < C; ++c)
                out.at(c, y, x) = inside ? image.at(c, y, x)
                                         : std::clamp(0.5 + 0.2 * rng.normal(), 0.0, 1.0);
        }
    return out;
}

namespace detail {

inline void require_differentiable(const Embedder& embedder, const char* op) {
    if (!embedder.profile().differentiable_image_path)
        throw NonDifferentiableEmbedderError(std::string(op) +
                                             ": embedder image path is not differentiable");
}

inline std::string box_prompt(const std::string& label) { return "A photo of a " + label; }

}  // namespace detail

/// Cosine-similarity text guidance on the full image estimate.
inline std::pair<double, Tensor> text_guidance(const Embedder& embedder, const Tensor& image,
                                               const std::string& prompt) {
    detail::require_differentiable(embedder, "text_guidance");
    Embedding et = embedder.embed_text(prompt);
    Embedding ei = embedder.embed_image(image);
    double score = similarity(ei, et);
    Tensor g = embedder.embed_image_backward(image, et.vector);
    g *= -1.0;
    return {score, g};
}

/// Area-weighted sum of per-object scores on noise-padded crops; the gradient
/// of each object is supported on its own interior pixels.
inline std::pair<double, Tensor> box_guidance(const Embedder& embedder, const Tensor& image,
                                              const RoiContext& rois, std::uint64_t seed) {
    detail::require_differentiable(embedder, "box_guidance");
    if (rois.rois.empty()) throw EmptyRoiError("box_guidance: no regions");
    int C = image.shape[0], H = image.shape[1], W = image.shape[2];
    double score = 0;
    Tensor g(image.shape);
    for (std::size_t k = 0; k < rois.rois.size(); ++k) {
        const auto& roi = rois.rois[k];
        Tensor padded = pad_with_noise(image, roi.box, mix_seed(seed, 0xb0c5, k));
        Embedding et = embedder.embed_text(detail::box_prompt(roi.label));
        score += roi.weight * similarity(embedder.embed_image(padded), et);
        Tensor gk = embedder.embed_image_backward(padded, et.vector);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                if (!detail::pixel_inside(roi.box, x, y, W, H)) continue;
                for (int c = 0; c < C; ++c) g.at(c, y, x) -= roi.weight * gk.at(c, y, x);
            }
    }
    return {score, g};
}

/// Baseline direction: the same per-object prompts and weights evaluated at a
/// pure-noise image, masked to each object's interior for symmetry with
/// box_guidance.
inline Tensor gaussian_noise_guidance(const Embedder& embedder, const Tensor& image,
                                      const RoiContext& rois, std::uint64_t seed) {
    detail::require_differentiable(embedder, "gaussian_noise_guidance");
    if (rois.rois.empty()) throw EmptyRoiError("gaussian_noise_guidance: no regions");
    int C = image.shape[0], H = image.shape[1], W = image.shape[2];
    Tensor g(image.shape);
    for (std::size_t k = 0; k < rois.rois.size(); ++k) {
        const auto& roi = rois.rois[k];
        Tensor noise(image.shape);
        RngStream rng(mix_seed(seed, 0x6a05, k), 0xda0);
        for (double& v : noise.data) v = std::clamp(0.5 + 0.2 * rng.normal(), 0.0, 1.0);
        Embedding et = embedder.embed_text(detail::box_prompt(roi.label));
        Tensor gk = embedder.embed_image_backward(noise, et.vector);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                if (!detail::pixel_inside(roi.box, x, y, W, H)) continue;
                for (int c = 0; c < C; ++c) g.at(c, y, x) -= roi.weight * gk.at(c, y, x);
            }
    }
    return g;
}

/// lambda-blend of the box gradient against the pure-noise baseline:
/// g_aug = lambda * (g_box - g_gauss) + g_gauss. Computed as
/// lambda * g_box + (1 - lambda) * g_gauss so lambda = 1 reproduces
/// box_guidance bitwise.
inline Tensor augmented_box_guidance(const Embedder& embedder, const Tensor& image,
                                     const RoiContext& rois, double lambda, std::uint64_t seed) {
    if (lambda < 0) throw ConfigError("augmented_box_guidance: lambda must be >= 0");
    Tensor g_box = box_guidance(embedder, image, rois, seed).second;
    Tensor g_gauss = gaussian_noise_guidance(embedder, image, rois, seed);
    Tensor g(image.shape);
    for (std::size_t i = 0; i < g.size(); ++i)
        g.data[i] = lambda * g_box.data[i] + (1.0 - lambda) * g_gauss.data[i];
    return g;
}

/// Fixed deterministic class-to-color projection used to feed a SegMap into
/// an image-space first stage.
inline Tensor render_seg_image(const SegMap& seg) {
    Tensor img({3, seg.height, seg.width});
    std::vector<std::array<double, 3>> colors(seg.num_object_classes + 1);
    colors[0] = {0.05, 0.05, 0.05};
    for (int k = 1; k <= seg.num_object_classes; ++k) {
        RngStream rng(0x5e6c0107, static_cast<std::uint64_t>(k));
        for (int c = 0; c < 3; ++c) colors[k][c] = rng.uniform(0.15, 0.95);
    }
    for (int y = 0; y < seg.height; ++y)
        for (int x = 0; x < seg.width; ++x) {
            const auto& col = colors[seg.at(y, x)];
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = col[c];
        }
    return img;
}

/// Similarity between the first-stage codes of the rendered segmentation and
/// the current estimate.
inline std::pair<double, Tensor> seg_guidance(const FirstStageAE& ae, const Tensor& image,
                                              const SegMap& seg) {
    if (!seg.valid()) throw ShapeError("seg_guidance: invalid segmentation map");
    Tensor target = ae_code(ae, render_seg_image(seg));  // unit norm
    Tensor z = ae.encode(image);
    double n = l2_norm(z);
    if (n < 1e-12) return {0.0, Tensor(image.shape)};
    Tensor zhat = z;
    zhat *= 1.0 / n;
    double score = std::clamp(dot(target, zhat), -1.0, 1.0);
    // d score / d z = (target - score * zhat) / |z|
    Tensor dz(z.shape);
    for (std::size_t i = 0; i < z.size(); ++i)
        dz.data[i] = (target.data[i] - score * zhat.data[i]) / n;
    Tensor g = ae.encode_backward(image, dz);
    g *= -1.0;
    return {score, g};
}

/// Per-step record of term scores and gradient norms, serialized as
/// JSON-lines for run reports.
struct GuidanceTrace {
    struct Entry {
        int step = 0;
        double text_score = 0, box_score = 0, seg_score = 0;
        double text_grad_norm = 0, aug_box_grad_norm = 0, seg_grad_norm = 0, total_grad_norm = 0;

        nlohmann::json to_json() const {
            return {{"step", step},
                    {"text_score", text_score},
                    {"box_score", box_score},
                    {"seg_score", seg_score},
                    {"text_grad_norm", text_grad_norm},
                    {"aug_box_grad_norm", aug_box_grad_norm},
                    {"seg_grad_norm", seg_grad_norm},
                    {"total_grad_norm", total_grad_norm}};
        }
    };
    std::vector<Entry> entries;

    bool finite() const {
        for (const auto& e : entries) {
            for (double v : {e.text_score, e.box_score, e.seg_score, e.text_grad_norm,
                             e.aug_box_grad_norm, e.seg_grad_norm, e.total_grad_norm})
                if (!std::isfinite(v)) return false;
        }
        return true;
    }

    void write_jsonl(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw IoError("GuidanceTrace: cannot open " + path);
        for (const auto& e : entries) f << e.to_json().dump() << "\n";
    }
};

/// Sum of the enabled terms: seg_scale * g_seg + g_text + g_augbox. The
/// returned gradient keeps the descent-on-negative-score convention of the
/// individual terms.
inline Tensor total_guidance(const GuidanceSpec& spec, const Embedder& embedder,
                             const FirstStageAE& ae, const Tensor& image,
                             const std::string& prompt, const RoiContext* rois,
                             const SegMap* seg, std::uint64_t step_seed,
                             GuidanceTrace* trace = nullptr, int step = 0) {
    spec.validate();
    Tensor g(image.shape);
    GuidanceTrace::Entry entry;
    entry.step = step;
    if (spec.enable_text) {
        if (prompt.empty()) throw MissingInputError("total_guidance: text term enabled, prompt missing");
        auto [score, gt] = text_guidance(embedder, image, prompt);
        entry.text_score = score;
        entry.text_grad_norm = l2_norm(gt);
        g += gt;
    }
    if (spec.enable_box) {
        if (!rois || rois->rois.empty())
            throw MissingInputError("total_guidance: box term enabled, rois missing");
        entry.box_score = box_guidance(embedder, image, *rois, step_seed).first;
        Tensor ga = augmented_box_guidance(embedder, image, *rois, spec.lambda, step_seed);
        entry.aug_box_grad_norm = l2_norm(ga);
        g += ga;
    }
    if (spec.enable_seg) {
        if (!seg) throw MissingInputError("total_guidance: seg term enabled, segmentation missing");
        auto [score, gs] = seg_guidance(ae, image, *seg);
        entry.seg_score = score;
        gs *= spec.seg_scale;
        entry.seg_grad_norm = l2_norm(gs);
        g += gs;
    }
    if (!g.finite()) throw NonFiniteLossError("total_guidance: non-finite gradient");
    entry.total_grad_norm = l2_norm(g);
    if (trace) trace->entries.push_back(entry);
    return g;
}

}  // namespace sgdiff

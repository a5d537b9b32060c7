#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgdiff/errors.hpp"
#include "sgdiff/rng.hpp"
#include "sgdiff/tensor.hpp"

namespace sgdiff {

/// Unit-norm semantic vector in a shared text/image space.
struct Embedding {
    std::vector<double> vector;
    std::string space_tag;

    int dimension() const { return static_cast<int>(vector.size()); }
    double norm() const {
        double s = 0.0;
        for (double v : vector) s += v * v;
        return std::sqrt(s);
    }
};

inline double similarity(const Embedding& a, const Embedding& b) {
    if (a.dimension() != b.dimension())
        throw DimensionMismatchError("similarity: embedding dimensions differ");
    if (a.space_tag != b.space_tag)
        throw DimensionMismatchError("similarity: embeddings from different spaces");
    double s = 0.0;
    for (int i = 0; i < a.dimension(); ++i) s += a.vector[i] * b.vector[i];
    return std::clamp(s, -1.0, 1.0);
}

struct EmbedderProfile {
    std::string name = "toy";
    int dimension = 512;
    bool differentiable_image_path = true;
    std::string prompt_template = "a photo of an [obj]";

    std::string apply_template(const std::string& obj) const {
        auto pos = prompt_template.find("[obj]");
        if (pos == std::string::npos)
            throw ConfigError("prompt template lacks [obj] placeholder");
        std::string out = prompt_template;
        out.replace(pos, 5, obj);
        return out;
    }
    static void check_template(const std::string& tmpl) {
        auto first = tmpl.find("[obj]");
        if (first == std::string::npos || tmpl.find("[obj]", first + 1) != std::string::npos)
            throw ConfigError("prompt template must contain exactly one [obj] placeholder");
    }
};

/// Text/image embedder interface. Implementations must be immutable after
/// construction; inference is safe to run concurrently.
class Embedder {
   public:
    virtual ~Embedder() = default;
    virtual const EmbedderProfile& profile() const = 0;
    virtual Embedding embed_text(const std::string& text) const = 0;
    virtual Embedding embed_image(const Tensor& image) const = 0;
    /// Gradient of (upstream . embed_image(image).vector) w.r.t. the image.
    /// Only available when profile().differentiable_image_path is true.
    virtual Tensor embed_image_backward(const Tensor& image,
                                        const std::vector<double>& upstream) const = 0;
};

namespace detail {

inline void check_image(const Tensor& image) {
    if (image.shape.size() != 3 || image.shape[0] != 3)
        throw ShapeError("embed_image: expected 3xHxW image");
    if (image.shape[1] < 8 || image.shape[2] < 8)
        throw ShapeError("embed_image: image must be at least 8x8");
    if (!image.finite()) throw ShapeError("embed_image: non-finite pixels");
}

}  // namespace detail

/// Deterministic differentiable embedder for tests and desk-scale runs.
///
/// Image path: average-pool the RGB image to 8x8, flatten and append a
/// constant bias feature (193 values), apply a fixed seeded random linear
/// projection to `dimension`, L2-normalize.
/// Text path: prompts naming a vocabulary class map to the image embedding of
/// that class's rendered prototype patch, so text/image similarity carries
/// real signal; any other string hashes to a seeded pseudo-random unit vector.
class ToyEmbedder : public Embedder {
   public:
    static constexpr int kPool = 8;

    /// `prototypes[i]` is class i's canonical rendered patch (3xHxW in [0,1]).
    ToyEmbedder(std::vector<std::string> class_names, std::vector<Tensor> prototypes,
                EmbedderProfile profile = {}, std::uint64_t seed = 1234)
        : profile_(std::move(profile)),
          class_names_(std::move(class_names)),
          seed_(seed),
          projection_(static_cast<std::size_t>(profile_.dimension) * (kPool * kPool * 3 + 1)) {
        EmbedderProfile::check_template(profile_.prompt_template);
        if (class_names_.size() != prototypes.size())
            throw ConfigError("ToyEmbedder: class/prototype count mismatch");
        RngStream rng(seed_, 0xe33bedde);
        for (double& v : projection_) v = rng.normal() / std::sqrt(kPool * kPool * 3.0);
        for (const Tensor& p : prototypes) class_embeddings_.push_back(embed_image(p));
    }

    const EmbedderProfile& profile() const override { return profile_; }

    Embedding embed_text(const std::string& text) const override {
        if (text.empty()) throw EmptyInputError("embed_text: empty text");
        if (auto cls = match_class(text)) return class_embeddings_[*cls];
        // unknown string: seeded pseudo-random unit vector
        RngStream rng(seed_, 0x7e47, hash_string(text));
        Embedding e;
        e.space_tag = space_tag();
        e.vector.resize(profile_.dimension);
        for (double& v : e.vector) v = rng.normal();
        normalize(e.vector);
        return e;
    }

    Embedding embed_image(const Tensor& image) const override {
        detail::check_image(image);
        std::vector<double> pooled = average_pool(image);
        Embedding e;
        e.space_tag = space_tag();
        e.vector.assign(profile_.dimension, 0.0);
        const int P = kPool * kPool * 3 + 1;
        for (int d = 0; d < profile_.dimension; ++d) {
            const double* row = projection_.data() + static_cast<std::size_t>(d) * P;
            double s = 0.0;
            for (int i = 0; i < P; ++i) s += row[i] * pooled[i];
            e.vector[d] = s;
        }
        normalize(e.vector);
        return e;
    }

    Tensor embed_image_backward(const Tensor& image,
                                const std::vector<double>& upstream) const override {
        detail::check_image(image);
        if (static_cast<int>(upstream.size()) != profile_.dimension)
            throw DimensionMismatchError("embed_image_backward: upstream dimension mismatch");
        const int P = kPool * kPool * 3 + 1;
        std::vector<double> pooled = average_pool(image);
        std::vector<double> y(profile_.dimension, 0.0);  // pre-normalization projection
        for (int d = 0; d < profile_.dimension; ++d) {
            const double* row = projection_.data() + static_cast<std::size_t>(d) * P;
            double s = 0.0;
            for (int i = 0; i < P; ++i) s += row[i] * pooled[i];
            y[d] = s;
        }
        double n2 = 0.0;
        for (double v : y) n2 += v * v;
        double n = std::sqrt(n2);
        // d(y/||y||)/dy applied to upstream: (u - (u.e)e)/||y||
        double ue = 0.0;
        for (int d = 0; d < profile_.dimension; ++d) ue += upstream[d] * y[d] / n;
        std::vector<double> gy(profile_.dimension);
        for (int d = 0; d < profile_.dimension; ++d)
            gy[d] = (upstream[d] - ue * y[d] / n) / n;
        // back through projection to pooled cells
        std::vector<double> gp(P, 0.0);
        for (int d = 0; d < profile_.dimension; ++d) {
            const double* row = projection_.data() + static_cast<std::size_t>(d) * P;
            for (int i = 0; i < P; ++i) gp[i] += gy[d] * row[i];
        }
        // back through average pooling
        Tensor gx(image.shape);
        int H = image.shape[1], W = image.shape[2];
        for (int c = 0; c < 3; ++c)
            for (int py = 0; py < kPool; ++py)
                for (int px = 0; px < kPool; ++px) {
                    int y0 = py * H / kPool, y1 = (py + 1) * H / kPool;
                    int x0 = px * W / kPool, x1 = (px + 1) * W / kPool;
                    double g = gp[(c * kPool + py) * kPool + px] /
                               (static_cast<double>(y1 - y0) * (x1 - x0));
                    for (int yy = y0; yy < y1; ++yy)
                        for (int xx = x0; xx < x1; ++xx) gx.at(c, yy, xx) += g;
                }
        return gx;
    }

    const std::vector<std::string>& class_names() const { return class_names_; }

   private:
    std::string space_tag() const { return profile_.name + "/" + std::to_string(profile_.dimension); }

    static void normalize(std::vector<double>& v) {
        double n = 0.0;
        for (double x : v) n += x * x;
        n = std::sqrt(n);
        if (n < 1e-30) throw ShapeError("embedding norm underflow");
        for (double& x : v) x /= n;
    }

    static std::uint64_t hash_string(const std::string& s) {
        std::uint64_t h = 1469598103934665603ULL;
        for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
        return h;
    }

    static std::string lower(std::string s) {
        std::transform(s.begin(), s.end(), s.begin(),
                       [](unsigned char c) { return std::tolower(c); });
        return s;
    }

    /// Exact template match first; otherwise the longest class name appearing
    /// in the text (case-insensitive), so both "a photo of an sheep" and
    /// "A photo of a sheep" resolve to the sheep prototype.
    std::optional<std::size_t> match_class(const std::string& text) const {
        std::string lt = lower(text);
        for (std::size_t i = 0; i < class_names_.size(); ++i)
            if (lt == lower(profile_.apply_template(class_names_[i]))) return i;
        std::optional<std::size_t> best;
        std::size_t best_len = 0;
        for (std::size_t i = 0; i < class_names_.size(); ++i) {
            std::string cn = lower(class_names_[i]);
            if (lt.find(cn) != std::string::npos && cn.size() > best_len) {
                best = i;
                best_len = cn.size();
            }
        }
        return best;
    }

    std::vector<double> average_pool(const Tensor& image) const {
        int H = image.shape[1], W = image.shape[2];
        std::vector<double> pooled(kPool * kPool * 3 + 1, 0.0);
        pooled.back() = 1.0;  // constant bias feature so constant images stay distinguishable
        for (int c = 0; c < 3; ++c)
            for (int py = 0; py < kPool; ++py)
                for (int px = 0; px < kPool; ++px) {
                    int y0 = py * H / kPool, y1 = (py + 1) * H / kPool;
                    int x0 = px * W / kPool, x1 = (px + 1) * W / kPool;
                    double s = 0.0;
                    for (int yy = y0; yy < y1; ++yy)
                        for (int xx = x0; xx < x1; ++xx) s += image.at(c, yy, xx);
                    pooled[(c * kPool + py) * kPool + px] =
                        s / (static_cast<double>(y1 - y0) * (x1 - x0));
                }
        return pooled;
    }

    EmbedderProfile profile_;
    std::vector<std::string> class_names_;
    std::uint64_t seed_;
    std::vector<double> projection_;  // dimension x 192, row-major
    std::vector<Embedding> class_embeddings_;
};

/// Placeholder for external CLIP-style adapters. The descriptor names the
/// weights on disk; loading them is out of scope, so construction succeeds
/// but inference reports the adapter as unavailable.
class ExternalEmbedderStub : public Embedder {
   public:
    ExternalEmbedderStub(EmbedderProfile profile, std::string weights_path)
        : profile_(std::move(profile)), weights_path_(std::move(weights_path)) {}

    const EmbedderProfile& profile() const override { return profile_; }
    Embedding embed_text(const std::string&) const override { unavailable(); }
    Embedding embed_image(const Tensor&) const override { unavailable(); }
    Tensor embed_image_backward(const Tensor&, const std::vector<double>&) const override {
        unavailable();
    }

   private:
    [[noreturn]] void unavailable() const {
        throw EmbedderUnavailableError("external embedder adapter not loaded: " + weights_path_);
    }
    EmbedderProfile profile_;
    std::string weights_path_;
};

inline nlohmann::json profile_to_json(const EmbedderProfile& p) {
    return {{"name", p.name},
            {"dimension", p.dimension},
            {"differentiable_image_path", p.differentiable_image_path},
            {"prompt_template", p.prompt_template}};
}

inline EmbedderProfile profile_from_json(const nlohmann::json& j) {
    EmbedderProfile p;
    try {
        p.name = j.at("name").get<std::string>();
        p.dimension = j.at("dimension").get<int>();
        p.differentiable_image_path = j.at("differentiable_image_path").get<bool>();
        p.prompt_template = j.at("prompt_template").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("embedder profile json: ") + e.what());
    }
    EmbedderProfile::check_template(p.prompt_template);
    return p;
}

}  // namespace sgdiff

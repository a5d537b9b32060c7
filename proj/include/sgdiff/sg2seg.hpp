#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgdiff/checkpoint.hpp"
#include "sgdiff/datasets.hpp"
#include "sgdiff/embedding.hpp"
#include "sgdiff/errors.hpp"
#include "sgdiff/layout.hpp"
#include "sgdiff/nn.hpp"
#include "sgdiff/scene_graph.hpp"

namespace sgdiff {

using nn::MatrixXd;
using nn::VectorXd;

/// Per-node embedding matrix, d rows x n columns (column i = node i).
using ObjectEmbeddings = MatrixXd;

struct SG2SEGConfig {
    int feature_dim = 512;
    int embed_dim = 128;
    int gcn_rounds = 5;
    int gcn_hidden = 256;
    int bbox_hidden = 512;
    // decoder widths per upsample block; the reference profile is six
    // 128-wide blocks, the default tapers for CPU budgets
    std::vector<int> mask_channels = {64, 32, 16, 16, 8, 4};
    double lr = 1e-3;
    int batch_size = 32;
    int epochs = 20;
    double w_box = 1.0, w_mask = 1.0, w_seg = 1.0;
    std::uint64_t seed = 0;
    bool semantic_node_features = true;  // toy-embedder features vs per-node random

    nlohmann::json to_json() const {
        return {{"feature_dim", feature_dim}, {"embed_dim", embed_dim},
                {"gcn_rounds", gcn_rounds},   {"gcn_hidden", gcn_hidden},
                {"bbox_hidden", bbox_hidden}, {"mask_channels", mask_channels},
                {"lr", lr},                   {"batch_size", batch_size},
                {"epochs", epochs},           {"w_box", w_box},
                {"w_mask", w_mask},           {"w_seg", w_seg},
                {"seed", seed},               {"semantic_node_features", semantic_node_features}};
    }
    static SG2SEGConfig from_json(const nlohmann::json& j) {
        SG2SEGConfig c;
        c.feature_dim = j.value("feature_dim", c.feature_dim);
        c.embed_dim = j.value("embed_dim", c.embed_dim);
        c.gcn_rounds = j.value("gcn_rounds", c.gcn_rounds);
        c.gcn_hidden = j.value("gcn_hidden", c.gcn_hidden);
        c.bbox_hidden = j.value("bbox_hidden", c.bbox_hidden);
        c.mask_channels = j.value("mask_channels", c.mask_channels);
        c.lr = j.value("lr", c.lr);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.epochs = j.value("epochs", c.epochs);
        c.w_box = j.value("w_box", c.w_box);
        c.w_mask = j.value("w_mask", c.w_mask);
        c.w_seg = j.value("w_seg", c.w_seg);
        c.seed = j.value("seed", c.seed);
        c.semantic_node_features = j.value("semantic_node_features", c.semantic_node_features);
        return c;
    }
};

// ---------------------------------------------------------------------------
// Graph network: message passing in the SG2Im style. Each round runs a
// per-edge MLP on [src, rel, dst] features whose output splits into messages
// for the edge's endpoints; nodes mean-aggregate incoming messages.
// Relationship labels are learnable embedding rows.
// ---------------------------------------------------------------------------
struct Gcn {
    SG2SEGConfig cfg;
    int num_relationships = 0;
    nn::Linear input_proj;
    Tensor rel_embed, g_rel_embed;  // R x embed_dim
    struct Round {
        nn::Linear edge1, edge2, node;
    };
    std::vector<Round> rounds;

    Gcn() = default;
    Gcn(const SG2SEGConfig& c, int num_rel, RngStream& rng) : cfg(c), num_relationships(num_rel) {
        input_proj = nn::Linear(c.feature_dim, c.embed_dim, rng);
        rel_embed = Tensor({num_rel, c.embed_dim});
        g_rel_embed = Tensor({num_rel, c.embed_dim});
        for (double& v : rel_embed.data) v = rng.normal() * 0.2;
        for (int r = 0; r < c.gcn_rounds; ++r) {
            Round rd;
            rd.edge1 = nn::Linear(3 * c.embed_dim, c.gcn_hidden, rng);
            rd.edge2 = nn::Linear(c.gcn_hidden, 2 * c.embed_dim, rng);
            rd.node = nn::Linear(c.embed_dim, c.embed_dim, rng);
            rounds.push_back(std::move(rd));
        }
    }

    void collect(nn::ParamRefs& p) {
        input_proj.collect(p);
        p.add(&rel_embed, &g_rel_embed);
        for (auto& r : rounds) {
            r.edge1.collect(p);
            r.edge2.collect(p);
            r.node.collect(p);
        }
    }

    struct Cache {
        MatrixXd features;           // feature_dim x n
        MatrixXd h0_pre;             // pre-ReLU input projection
        std::vector<MatrixXd> h_in;  // per round, embed_dim x n
        std::vector<MatrixXd> edge_x, edge_a1, edge_m;  // per round caches
        std::vector<MatrixXd> node_pre;                 // pre-activation node update
        std::vector<int> degree;
    };

    ObjectEmbeddings forward(const SceneGraph& graph, const MatrixXd& features,
                             Cache* cache = nullptr) const {
        int n = static_cast<int>(graph.nodes.size());
        if (features.rows() != cfg.feature_dim || features.cols() != n)
            throw ShapeError("gcn_forward: node feature matrix must be feature_dim x n");
        int m = static_cast<int>(graph.edges.size());
        const int d = cfg.embed_dim;

        std::vector<int> degree(n, 0);
        for (const auto& e : graph.edges) {
            ++degree[e.src];
            ++degree[e.dst];
        }

        MatrixXd h0_pre = input_proj.forward(features);
        MatrixXd h = nn::relu(h0_pre);
        if (cache) {
            cache->features = features;
            cache->h0_pre = h0_pre;
            cache->degree = degree;
        }

        for (int r = 0; r < cfg.gcn_rounds; ++r) {
            const Round& rd = rounds[r];
            MatrixXd agg = MatrixXd::Zero(d, n);
            MatrixXd X(3 * d, std::max(m, 1)), A1, M;
            if (m > 0) {
                for (int e = 0; e < m; ++e) {
                    const auto& ed = graph.edges[e];
                    X.block(0, e, d, 1) = h.col(ed.src);
                    for (int i = 0; i < d; ++i)
                        X(d + i, e) = rel_embed.data[static_cast<std::size_t>(
                            ed.relationship_index) * d + i];
                    X.block(2 * d, e, d, 1) = h.col(ed.dst);
                }
                A1 = rd.edge1.forward(X);
                M = rd.edge2.forward(nn::relu(A1));
                for (int e = 0; e < m; ++e) {
                    const auto& ed = graph.edges[e];
                    agg.col(ed.src) += M.block(0, e, d, 1);
                    agg.col(ed.dst) += M.block(d, e, d, 1);
                }
                for (int i = 0; i < n; ++i)
                    if (degree[i] > 0) agg.col(i) /= degree[i];
            }
            MatrixXd pre = rd.node.forward(h) + agg;
            if (cache) {
                cache->h_in.push_back(h);
                cache->edge_x.push_back(m > 0 ? X.leftCols(m) : MatrixXd(3 * d, 0));
                cache->edge_a1.push_back(m > 0 ? A1 : MatrixXd());
                cache->edge_m.push_back(m > 0 ? M : MatrixXd());
                cache->node_pre.push_back(pre);
            }
            // all rounds but the last apply ReLU
            h = (r + 1 < cfg.gcn_rounds) ? nn::relu(pre) : pre;
        }
        return h;
    }

    /// Accumulates parameter gradients; returns gradient w.r.t. input features.
    MatrixXd backward(const SceneGraph& graph, const Cache& cache, const MatrixXd& g_out) {
        int n = static_cast<int>(graph.nodes.size());
        int m = static_cast<int>(graph.edges.size());
        const int d = cfg.embed_dim;
        MatrixXd gh = g_out;
        for (int r = cfg.gcn_rounds - 1; r >= 0; --r) {
            Round& rd = rounds[r];
            MatrixXd g_pre = (r + 1 < cfg.gcn_rounds)
                                 ? MatrixXd(nn::relu_backward(cache.node_pre[r], gh))
                                 : gh;
            MatrixXd gh_in = rd.node.backward(cache.h_in[r], g_pre);
            if (m > 0) {
                MatrixXd gM(2 * d, m);
                for (int e = 0; e < m; ++e) {
                    const auto& ed = graph.edges[e];
                    gM.block(0, e, d, 1) = g_pre.col(ed.src) / cache.degree[ed.src];
                    gM.block(d, e, d, 1) = g_pre.col(ed.dst) / cache.degree[ed.dst];
                }
                MatrixXd g_relu_a1 = rd.edge2.backward(nn::relu(cache.edge_a1[r]), gM);
                MatrixXd gA1 = nn::relu_backward(cache.edge_a1[r], g_relu_a1);
                MatrixXd gX = rd.edge1.backward(cache.edge_x[r], gA1);
                for (int e = 0; e < m; ++e) {
                    const auto& ed = graph.edges[e];
                    gh_in.col(ed.src) += gX.block(0, e, d, 1);
                    gh_in.col(ed.dst) += gX.block(2 * d, e, d, 1);
                    for (int i = 0; i < d; ++i)
                        g_rel_embed.data[static_cast<std::size_t>(ed.relationship_index) * d + i] +=
                            gX(d + i, e);
                }
            }
            gh = gh_in;
        }
        MatrixXd g_h0 = nn::relu_backward(cache.h0_pre, gh);
        return input_proj.backward(cache.features, g_h0);
    }
};

// ---------------------------------------------------------------------------
// Box head: two-layer MLP with ReLU, raw 4-vector output per object.
// ---------------------------------------------------------------------------
struct BBoxNet {
    nn::Linear fc1, fc2;

    BBoxNet() = default;
    BBoxNet(const SG2SEGConfig& c, RngStream& rng) {
        fc1 = nn::Linear(c.embed_dim, c.bbox_hidden, rng);
        fc2 = nn::Linear(c.bbox_hidden, 4, rng);
    }
    void collect(nn::ParamRefs& p) {
        fc1.collect(p);
        fc2.collect(p);
    }

    struct Cache {
        MatrixXd emb, a1;
    };

    /// Raw (pre-sigmoid) box parameters, 4 x n.
    MatrixXd forward(const ObjectEmbeddings& emb, Cache* cache = nullptr) const {
        MatrixXd a1 = fc1.forward(emb);
        MatrixXd raw = fc2.forward(nn::relu(a1));
        if (cache) {
            cache->emb = emb;
            cache->a1 = a1;
        }
        return raw;
    }

    MatrixXd backward(const Cache& cache, const MatrixXd& g_raw) {
        MatrixXd g_relu = fc2.backward(nn::relu(cache.a1), g_raw);
        MatrixXd g_a1 = nn::relu_backward(cache.a1, g_relu);
        return fc1.backward(cache.emb, g_a1);
    }
};

// ---------------------------------------------------------------------------
// Mask head: cascaded upsample blocks (x2 nearest, BatchNorm, 3x3 conv,
// ReLU) from 1x1 to 64x64, then 1x1 conv + sigmoid.
// ---------------------------------------------------------------------------
struct MaskNet {
    std::vector<int> widths;
    std::vector<nn::BatchNorm2d> bns;
    std::vector<nn::Conv2d> convs;
    nn::Conv2d head;
    int in_channels = 128;

    MaskNet() = default;
    MaskNet(const SG2SEGConfig& c, RngStream& rng) : widths(c.mask_channels), in_channels(c.embed_dim) {
        if (widths.size() != 6) throw ConfigError("MaskNet: exactly 6 blocks required");
        int cin = c.embed_dim;
        for (int b = 0; b < 6; ++b) {
            bns.emplace_back(cin);
            convs.emplace_back(cin, widths[b], 3, 1, 1, rng);
            cin = widths[b];
        }
        head = nn::Conv2d(cin, 1, 1, 1, 0, rng);
    }
    void collect(nn::ParamRefs& p) {
        for (auto& bn : bns) {
            bn.collect(p);
            p.add_buffer(&bn.running_mean);
            p.add_buffer(&bn.running_var);
        }
        for (auto& cv : convs) cv.collect(p);
        head.collect(p);
    }

    struct Cache {
        std::vector<Tensor> up, bn_out, conv_in, conv_out;  // per block
        Tensor head_in, sig_out;
    };

    /// emb: embed_dim x n -> masks n x 1 x 64 x 64, values in (0,1).
    Tensor forward(const ObjectEmbeddings& emb, bool training, Cache* cache = nullptr) {
        int n = static_cast<int>(emb.cols());
        Tensor x({n, in_channels, 1, 1});
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < in_channels; ++c) x.at(i, c, 0, 0) = emb(c, i);
        for (int b = 0; b < 6; ++b) {
            Tensor up = nn::upsample2(x);
            Tensor bn = bns[b].forward(up, training);
            Tensor cv = convs[b].forward(bn);
            if (cache) {
                cache->up.push_back(up);
                cache->bn_out.push_back(bn);
                cache->conv_in.push_back(bn);
                cache->conv_out.push_back(cv);
            }
            x = nn::relu_t(cv);
        }
        Tensor logits = head.forward(x);
        Tensor out = nn::sigmoid_t(logits);
        // keep strictly inside (0,1)
        for (double& v : out.data) v = std::clamp(v, 1e-7, 1.0 - 1e-7);
        if (cache) {
            cache->head_in = x;
            cache->sig_out = out;
        }
        return out;
    }

    /// g_out is the gradient w.r.t. the sigmoid output; returns gradient
    /// w.r.t. the input embeddings (embed_dim x n).
    MatrixXd backward(const Cache& cache, const Tensor& g_out) {
        Tensor g = nn::sigmoid_t_backward(cache.sig_out, g_out);
        g = head.backward(cache.head_in, g);
        for (int b = 5; b >= 0; --b) {
            g = nn::relu_t_backward(cache.conv_out[b], g);
            g = convs[b].backward(cache.conv_in[b], g);
            g = bns[b].backward(g);
            g = nn::upsample2_backward(g);
        }
        int n = g.shape[0];
        MatrixXd g_emb(in_channels, n);
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < in_channels; ++c) g_emb(c, i) = g.at(i, c, 0, 0);
        return g_emb;
    }
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Sum over objects of the L1 difference of the 4 box coordinates.
inline double loss_box(const std::vector<BBox>& pred, const std::vector<BBox>& gt) {
    if (pred.size() != gt.size()) throw LengthMismatchError("loss_box: list length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        s += std::fabs(pred[i].x0 - gt[i].x0) + std::fabs(pred[i].y0 - gt[i].y0) +
             std::fabs(pred[i].x1 - gt[i].x1) + std::fabs(pred[i].y1 - gt[i].y1);
    return s;
}

/// Per-object mean binary cross entropy, summed over objects.
inline double loss_mask(const std::vector<Tensor>& pred, const std::vector<Tensor>& gt,
                        std::vector<Tensor>* grads = nullptr) {
    if (pred.size() != gt.size()) throw ShapeError("loss_mask: list length mismatch");
    double total = 0.0;
    for (std::size_t k = 0; k < pred.size(); ++k) {
        pred[k].require_same(gt[k]);
        double s = 0.0;
        Tensor g(pred[k].shape);
        double inv = 1.0 / static_cast<double>(pred[k].size());
        for (std::size_t i = 0; i < pred[k].size(); ++i) {
            double p = pred[k].data[i], y = gt[k].data[i];
            if (!(p > 0.0 && p < 1.0)) throw ShapeError("loss_mask: prediction outside (0,1)");
            s += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
            g.data[i] = (-(y / p) + (1.0 - y) / (1.0 - p)) * inv;
        }
        total += s * inv;
        if (grads) grads->push_back(std::move(g));
    }
    return total;
}

/// Mean L1 difference between soft/one-hot segmentation tensors.
inline double loss_seg(const Tensor& pred, const Tensor& gt, Tensor* grad = nullptr) {
    pred.require_same(gt);
    double s = 0.0;
    double inv = 1.0 / static_cast<double>(pred.size());
    if (grad) *grad = Tensor(pred.shape);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        double d = pred.data[i] - gt.data[i];
        s += std::fabs(d);
        if (grad) grad->data[i] = (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) * inv;
    }
    return s * inv;
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

struct Layout {
    std::vector<BBox> boxes;
    std::vector<ObjectMask> masks;
    std::vector<int> classes;
};

class SG2SEGModel {
   public:
    SG2SEGModel() = default;
    SG2SEGModel(const SG2SEGConfig& cfg, int num_relationships)
        : cfg_(cfg), num_relationships_(num_relationships) {
        RngStream rng(cfg.seed, 0x5652);
        gcn_ = Gcn(cfg, num_relationships, rng);
        bbox_ = BBoxNet(cfg, rng);
        mask_ = MaskNet(cfg, rng);
    }

    const SG2SEGConfig& config() const { return cfg_; }
    int num_relationships() const { return num_relationships_; }

    nn::ParamRefs params() {
        nn::ParamRefs p;
        gcn_.collect(p);
        bbox_.collect(p);
        mask_.collect(p);
        return p;
    }

    ObjectEmbeddings gcn_forward(const SceneGraph& graph, const MatrixXd& features) const {
        return gcn_.forward(graph, features);
    }

    /// Raw box head output for one embedding column.
    Eigen::Vector4d predict_box_raw(const Eigen::VectorXd& emb) const {
        MatrixXd raw = bbox_.forward(emb);
        return raw.col(0);
    }

    BBox predict_box(const Eigen::VectorXd& emb) const {
        Eigen::Vector4d raw = predict_box_raw(emb);
        double r[4] = {raw(0), raw(1), raw(2), raw(3)};
        return clamp_box(r);
    }

    ObjectMask predict_mask(const Eigen::VectorXd& emb) {
        Tensor out = mask_.forward(emb, /*training=*/false);
        ObjectMask m;
        for (std::size_t i = 0; i < m.grid.size(); ++i) m.grid.data[i] = out.data[i];
        return m;
    }

    Layout predict(const SceneGraph& graph, const MatrixXd& features) {
        ObjectEmbeddings emb = gcn_.forward(graph, features);
        MatrixXd raws = bbox_.forward(emb);
        Tensor masks = mask_.forward(emb, /*training=*/false);
        Layout layout;
        int n = static_cast<int>(emb.cols());
        for (int i = 0; i < n; ++i) {
            double r[4] = {raws(0, i), raws(1, i), raws(2, i), raws(3, i)};
            layout.boxes.push_back(clamp_box(r));
            ObjectMask m;
            std::size_t plane = static_cast<std::size_t>(kMaskSize) * kMaskSize;
            for (std::size_t p = 0; p < plane; ++p)
                m.grid.data[p] = masks.data[static_cast<std::size_t>(i) * plane + p];
            layout.masks.push_back(std::move(m));
            layout.classes.push_back(graph.nodes[i].class_index);
        }
        return layout;
    }

    Gcn& gcn() { return gcn_; }
    BBoxNet& bbox_net() { return bbox_; }
    MaskNet& mask_net() { return mask_; }

    void save(const std::string& path) {
        nlohmann::json header;
        header["kind"] = "sg2seg";
        header["version"] = 1;
        header["config"] = cfg_.to_json();
        header["num_relationships"] = num_relationships_;
        auto p = params();
        save_checkpoint(path, header, p);
    }

    static SG2SEGModel load(const std::string& path) {
        nlohmann::json header = peek_checkpoint(path);
        if (header.value("kind", "") != "sg2seg")
            throw SchemaError("checkpoint is not an sg2seg model: " + path);
        SG2SEGModel model(SG2SEGConfig::from_json(header.at("config")),
                          header.at("num_relationships").get<int>());
        auto p = model.params();
        load_checkpoint(path, p);
        return model;
    }

   private:
    SG2SEGConfig cfg_;
    int num_relationships_ = 0;
    Gcn gcn_;
    BBoxNet bbox_;
    MaskNet mask_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Toy-embedder text features for every node (feature_dim x n).
inline MatrixXd semantic_node_features(const SceneGraph& graph, const Vocab& vocab,
                                       const Embedder& embedder) {
    int n = static_cast<int>(graph.nodes.size());
    MatrixXd F(embedder.profile().dimension, n);
    for (int i = 0; i < n; ++i) {
        std::string prompt =
            embedder.profile().apply_template(vocab.object_classes.at(graph.nodes[i].class_index));
        Embedding e = embedder.embed_text(prompt);
        for (int d = 0; d < F.rows(); ++d) F(d, i) = e.vector[d];
    }
    return F;
}

/// Ablation baseline: a fresh random unit vector per node (class-blind).
inline MatrixXd random_node_features(const SceneGraph& graph, int dim, RngStream& rng) {
    int n = static_cast<int>(graph.nodes.size());
    MatrixXd F(dim, n);
    for (int i = 0; i < n; ++i) {
        double norm2 = 0.0;
        for (int d = 0; d < dim; ++d) {
            F(d, i) = rng.normal();
            norm2 += F(d, i) * F(d, i);
        }
        F.col(i) /= std::sqrt(norm2);
    }
    return F;
}

struct EpochMetrics {
    int epoch = 0;
    double train_loss = 0;
    double train_box_l1 = 0;  // mean abs coordinate error per object
    double train_mask_iou = 0;
    double val_box_l1 = 0;
    double val_mask_iou = 0;
};

namespace detail {

inline double mask_iou(const Tensor& pred, const Tensor& gt) {
    double inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        bool p = pred.data[i] > 0.5, g = gt.data[i] > 0.5;
        inter += (p && g) ? 1 : 0;
        uni += (p || g) ? 1 : 0;
    }
    return uni > 0 ? inter / uni : 1.0;
}

/// Maps the L1 box-loss gradient back through corner ordering, minimum-side
/// expansion and the sigmoid to the raw head output.
inline void box_loss_backward(const MatrixXd& raw, const std::vector<BBox>& gt, double weight,
                              MatrixXd& g_raw, double* loss_out) {
    int n = static_cast<int>(raw.cols());
    for (int i = 0; i < n; ++i) {
        double s[4], ds[4] = {0, 0, 0, 0};
        for (int k = 0; k < 4; ++k) s[k] = 1.0 / (1.0 + std::exp(-raw(k, i)));
        // ordered corners with index routing
        int ix0 = s[0] <= s[2] ? 0 : 2, ix1 = (ix0 == 0) ? 2 : 0;
        int iy0 = s[1] <= s[3] ? 1 : 3, iy1 = (iy0 == 1) ? 3 : 1;
        double x0 = s[ix0], x1 = s[ix1], y0 = s[iy0], y1 = s[iy1];
        // min-side expansion: both ordered corners move with the center
        double jx[2][2] = {{1, 0}, {0, 1}};  // d(x0,x1)/d(ordered lo,hi)
        if (x1 - x0 < kMinBoxSide) {
            jx[0][0] = jx[0][1] = jx[1][0] = jx[1][1] = 0.5;
            double c = 0.5 * (x0 + x1);
            x0 = c - 0.5 * kMinBoxSide;
            x1 = c + 0.5 * kMinBoxSide;
        }
        double jy[2][2] = {{1, 0}, {0, 1}};
        if (y1 - y0 < kMinBoxSide) {
            jy[0][0] = jy[0][1] = jy[1][0] = jy[1][1] = 0.5;
            double c = 0.5 * (y0 + y1);
            y0 = c - 0.5 * kMinBoxSide;
            y1 = c + 0.5 * kMinBoxSide;
        }
        const BBox& g = gt[i];
        double l = std::fabs(x0 - g.x0) + std::fabs(x1 - g.x1) + std::fabs(y0 - g.y0) +
                   std::fabs(y1 - g.y1);
        if (loss_out) *loss_out += weight * l;
        double dLdx0 = (x0 > g.x0) ? 1.0 : (x0 < g.x0 ? -1.0 : 0.0);
        double dLdx1 = (x1 > g.x1) ? 1.0 : (x1 < g.x1 ? -1.0 : 0.0);
        double dLdy0 = (y0 > g.y0) ? 1.0 : (y0 < g.y0 ? -1.0 : 0.0);
        double dLdy1 = (y1 > g.y1) ? 1.0 : (y1 < g.y1 ? -1.0 : 0.0);
        ds[ix0] += dLdx0 * jx[0][0] + dLdx1 * jx[1][0];
        ds[ix1] += dLdx0 * jx[0][1] + dLdx1 * jx[1][1];
        ds[iy0] += dLdy0 * jy[0][0] + dLdy1 * jy[1][0];
        ds[iy1] += dLdy0 * jy[0][1] + dLdy1 * jy[1][1];
        for (int k = 0; k < 4; ++k) g_raw(k, i) += weight * ds[k] * s[k] * (1.0 - s[k]);
    }
}

}  // namespace detail

/// Seed-deterministic training loop. Records must provide boxes; masks and
/// segmentation are used when present. Emits per-epoch metrics through
/// `on_epoch` and returns the final metrics list.
inline std::vector<EpochMetrics> train_sg2seg(
    SG2SEGModel& model, const std::vector<SceneRecord>& train_set,
    const std::vector<SceneRecord>& val_set, const Vocab& vocab, const Embedder& embedder,
    const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
    if (train_set.empty()) throw DatasetEmptyError("train_sg2seg: empty dataset");
    const SG2SEGConfig& cfg = model.config();
    nn::ParamRefs params = model.params();
    nn::Adam opt(params, cfg.lr);
    RngStream shuffle_rng(cfg.seed, 0x7afF1e);
    RngStream feat_rng(cfg.seed, 0xfea7);
    int num_classes = static_cast<int>(vocab.object_classes.size());

    // node features are fixed per record (semantic) or drawn once per record
    // (random baseline) so epochs see consistent inputs
    std::vector<MatrixXd> features(train_set.size()), val_features(val_set.size());
    for (std::size_t i = 0; i < train_set.size(); ++i)
        features[i] = cfg.semantic_node_features
                          ? semantic_node_features(train_set[i].graph, vocab, embedder)
                          : random_node_features(train_set[i].graph, cfg.feature_dim, feat_rng);
    for (std::size_t i = 0; i < val_set.size(); ++i)
        val_features[i] = cfg.semantic_node_features
                              ? semantic_node_features(val_set[i].graph, vocab, embedder)
                              : random_node_features(val_set[i].graph, cfg.feature_dim, feat_rng);

    auto eval_split = [&](const std::vector<SceneRecord>& split,
                          const std::vector<MatrixXd>& feats, double& box_l1, double& iou) {
        box_l1 = 0;
        iou = 0;
        int n_obj = 0, n_mask = 0;
        for (std::size_t i = 0; i < split.size(); ++i) {
            Layout layout = model.predict(split[i].graph, feats[i]);
            for (std::size_t k = 0; k < layout.boxes.size(); ++k) {
                const BBox &p = layout.boxes[k], &g = split[i].boxes[k];
                box_l1 += (std::fabs(p.x0 - g.x0) + std::fabs(p.y0 - g.y0) +
                           std::fabs(p.x1 - g.x1) + std::fabs(p.y1 - g.y1)) /
                          4.0;
                ++n_obj;
                if (k < split[i].masks.size()) {
                    iou += detail::mask_iou(layout.masks[k].grid, split[i].masks[k]);
                    ++n_mask;
                }
            }
        }
        if (n_obj > 0) box_l1 /= n_obj;
        if (n_mask > 0) iou /= n_mask;
    };

    std::vector<EpochMetrics> history;
    std::vector<int> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // deterministic Fisher-Yates
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
            std::swap(order[i], order[shuffle_rng.uniform_int(0, i)]);

        double epoch_loss = 0;
        int in_batch = 0;
        opt.zero_grads();
        for (std::size_t oi = 0; oi < order.size(); ++oi) {
            const SceneRecord& rec = train_set[order[oi]];
            const MatrixXd& F = features[order[oi]];
            int n = static_cast<int>(rec.graph.nodes.size());

            Gcn::Cache gcache;
            ObjectEmbeddings emb = model.gcn().forward(rec.graph, F, &gcache);
            BBoxNet::Cache bcache;
            MatrixXd raws = model.bbox_net().forward(emb, &bcache);
            MaskNet::Cache mcache;
            Tensor masks = model.mask_net().forward(emb, /*training=*/true, &mcache);

            double loss = 0;
            MatrixXd g_raw = MatrixXd::Zero(4, n);
            detail::box_loss_backward(raws, rec.boxes, cfg.w_box, g_raw, &loss);

            Tensor g_masks(masks.shape);
            std::size_t plane = static_cast<std::size_t>(kMaskSize) * kMaskSize;
            bool have_masks = rec.masks.size() == static_cast<std::size_t>(n);
            if (have_masks) {
                for (int k = 0; k < n; ++k) {
                    double inv = 1.0 / static_cast<double>(plane);
                    for (std::size_t p = 0; p < plane; ++p) {
                        double pr = masks.data[static_cast<std::size_t>(k) * plane + p];
                        double y = rec.masks[k].data[p];
                        loss += cfg.w_mask * -(y * std::log(pr) + (1 - y) * std::log(1 - pr)) * inv;
                        g_masks.data[static_cast<std::size_t>(k) * plane + p] =
                            cfg.w_mask * (-(y / pr) + (1 - y) / (1 - pr)) * inv;
                    }
                }
            }

            if (have_masks && rec.seg) {
                // soft composition on predicted masks inside predicted boxes;
                // the warp geometry is treated as constant so the gradient
                // flows through mask values only
                std::vector<BBox> pboxes;
                std::vector<Tensor> pmasks;
                std::vector<int> classes;
                for (int k = 0; k < n; ++k) {
                    double r[4] = {raws(0, k), raws(1, k), raws(2, k), raws(3, k)};
                    pboxes.push_back(clamp_box(r));
                    Tensor m({1, kMaskSize, kMaskSize});
                    for (std::size_t p = 0; p < plane; ++p)
                        m.data[p] = masks.data[static_cast<std::size_t>(k) * plane + p];
                    pmasks.push_back(std::move(m));
                    classes.push_back(rec.graph.nodes[k].class_index);
                }
                int H = rec.seg->height, W = rec.seg->width;
                SoftSeg soft = compose_soft(pboxes, pmasks, classes, num_classes, H, W);
                Tensor gt_onehot = rec.seg->one_hot();
                Tensor g_soft;
                loss += cfg.w_seg * loss_seg(soft.channels, gt_onehot, &g_soft);
                // route the soft-seg gradient back to the winning mask texels
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) {
                        std::size_t p = static_cast<std::size_t>(y) * W + x;
                        int k = soft.winner[p];
                        if (k < 0) continue;
                        double gch = g_soft.at(classes[k] + 1, y, x) - g_soft.at(0, y, x);
                        gch *= cfg.w_seg;
                        double mx = std::clamp(soft.winner_u[p] * kMaskSize - 0.5, 0.0,
                                               kMaskSize - 1.0);
                        double my = std::clamp(soft.winner_v[p] * kMaskSize - 0.5, 0.0,
                                               kMaskSize - 1.0);
                        int x0 = static_cast<int>(mx), y0 = static_cast<int>(my);
                        int x1 = std::min(x0 + 1, kMaskSize - 1),
                            y1 = std::min(y0 + 1, kMaskSize - 1);
                        double fx = mx - x0, fy = my - y0;
                        std::size_t base = static_cast<std::size_t>(k) * plane;
                        g_masks.data[base + static_cast<std::size_t>(y0) * kMaskSize + x0] +=
                            gch * (1 - fy) * (1 - fx);
                        g_masks.data[base + static_cast<std::size_t>(y0) * kMaskSize + x1] +=
                            gch * (1 - fy) * fx;
                        g_masks.data[base + static_cast<std::size_t>(y1) * kMaskSize + x0] +=
                            gch * fy * (1 - fx);
                        g_masks.data[base + static_cast<std::size_t>(y1) * kMaskSize + x1] +=
                            gch * fy * fx;
                    }
            }

            if (!std::isfinite(loss))
                throw NonFiniteLossError("train_sg2seg: non-finite loss at epoch " +
                                         std::to_string(epoch));
            epoch_loss += loss;

            MatrixXd g_emb = model.bbox_net().backward(bcache, g_raw);
            if (have_masks) g_emb += model.mask_net().backward(mcache, g_masks);
            model.gcn().backward(rec.graph, gcache, g_emb);

            if (++in_batch == cfg.batch_size || oi + 1 == order.size()) {
                opt.step();
                opt.zero_grads();
                in_batch = 0;
            }
        }

        EpochMetrics m;
        m.epoch = epoch;
        m.train_loss = epoch_loss / train_set.size();
        eval_split(train_set, features, m.train_box_l1, m.train_mask_iou);
        if (!val_set.empty()) eval_split(val_set, val_features, m.val_box_l1, m.val_mask_iou);
        if (on_epoch) on_epoch(m);
        history.push_back(m);
    }
    return history;
}

}  // namespace sgdiff

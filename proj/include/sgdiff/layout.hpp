#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "sgdiff/errors.hpp"
#include "sgdiff/tensor.hpp"

namespace sgdiff {

/// Normalized bounding box, origin top-left, (x0,y0) = min corner.
struct BBox {
    double x0 = 0, y0 = 0, x1 = 1, y1 = 1;

    bool valid() const {
        return 0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0;
    }
    double area() const { return (x1 - x0) * (y1 - y0); }
    double cx() const { return 0.5 * (x0 + x1); }
    double cy() const { return 0.5 * (y0 + y1); }

    bool operator==(const BBox&) const = default;
};

constexpr int kMaskSize = 64;
constexpr double kMinBoxSide = 1.0 / 64.0;

/// Maps a raw 4-vector through sigmoid, orders the corners, and enforces the
/// minimum side length so the result always satisfies the BBox invariants.
inline BBox clamp_box(const double raw[4]) {
    double s[4];
    for (int i = 0; i < 4; ++i) s[i] = 1.0 / (1.0 + std::exp(-raw[i]));
    BBox b;
    b.x0 = std::min(s[0], s[2]);
    b.x1 = std::max(s[0], s[2]);
    b.y0 = std::min(s[1], s[3]);
    b.y1 = std::max(s[1], s[3]);
    auto expand = [](double& lo, double& hi) {
        if (hi - lo >= kMinBoxSide) return;
        double c = 0.5 * (lo + hi);
        lo = c - 0.5 * kMinBoxSide;
        hi = c + 0.5 * kMinBoxSide;
        if (lo < 0.0) {
            hi -= lo;
            lo = 0.0;
        }
        if (hi > 1.0) {
            lo -= hi - 1.0;
            hi = 1.0;
        }
    };
    expand(b.x0, b.x1);
    expand(b.y0, b.y1);
    return b;
}

/// 64x64 soft mask, values strictly in (0,1).
struct ObjectMask {
    Tensor grid{std::vector<int>{1, kMaskSize, kMaskSize}};

    bool valid() const {
        if (grid.shape != std::vector<int>{1, kMaskSize, kMaskSize}) return false;
        for (double v : grid.data)
            if (!(v > 0.0 && v < 1.0)) return false;
        return true;
    }
};

/// Composed segmentation map. Grid entries: 0 = background, k = object class
/// k-1. `num_object_classes` fixes the one-hot channel count (bg + classes).
struct SegMap {
    int height = 0;
    int width = 0;
    int num_object_classes = 0;
    std::vector<int> labels;  // row-major H*W

    int& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
    int at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }

    bool valid() const {
        if (labels.size() != static_cast<std::size_t>(height) * width) return false;
        for (int v : labels)
            if (v < 0 || v > num_object_classes) return false;
        return true;
    }

    /// One-hot view, channels = num_object_classes + 1, channel 0 = background.
    Tensor one_hot() const {
        Tensor t({num_object_classes + 1, height, width});
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) t.at(at(y, x), y, x) = 1.0;
        return t;
    }

    bool operator==(const SegMap&) const = default;
};

namespace detail {

/// Bilinear sample of a 1x64x64 mask at box-relative pixel center (u,v) in
/// [0,1); coordinates clamp at the mask border.
inline double sample_mask(const Tensor& mask, double u, double v) {
    double mx = u * kMaskSize - 0.5;
    double my = v * kMaskSize - 0.5;
    mx = std::clamp(mx, 0.0, kMaskSize - 1.0);
    my = std::clamp(my, 0.0, kMaskSize - 1.0);
    int x0 = static_cast<int>(mx), y0 = static_cast<int>(my);
    int x1 = std::min(x0 + 1, kMaskSize - 1), y1 = std::min(y0 + 1, kMaskSize - 1);
    double fx = mx - x0, fy = my - y0;
    return (1 - fy) * ((1 - fx) * mask.at(0, y0, x0) + fx * mask.at(0, y0, x1)) +
           fy * ((1 - fx) * mask.at(0, y1, x0) + fx * mask.at(0, y1, x1));
}

}  // namespace detail

/// Warps each mask into its box on an HxW canvas and takes the per-pixel
/// argmax (threshold 0.5, background otherwise, ties to the lower index).
/// `masks` entries are 1x64x64 tensors; gt masks may be binary.
inline SegMap compose_segmentation(const std::vector<BBox>& boxes,
                                   const std::vector<Tensor>& masks,
                                   const std::vector<int>& classes, int num_object_classes, int H,
                                   int W) {
    if (boxes.empty()) throw EmptyLayoutError("compose_segmentation: empty layout");
    if (boxes.size() != masks.size() || boxes.size() != classes.size())
        throw LengthMismatchError("compose_segmentation: list length mismatch");
    if (H < kMaskSize || W < kMaskSize)
        throw ShapeError("compose_segmentation: canvas smaller than mask resolution");
    SegMap seg;
    seg.height = H;
    seg.width = W;
    seg.num_object_classes = num_object_classes;
    seg.labels.assign(static_cast<std::size_t>(H) * W, 0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double best = 0.5;
            int best_obj = -1;
            for (std::size_t k = 0; k < boxes.size(); ++k) {
                const BBox& b = boxes[k];
                double u = ((x + 0.5) / W - b.x0) / (b.x1 - b.x0);
                double v = ((y + 0.5) / H - b.y0) / (b.y1 - b.y0);
                if (u < 0.0 || u >= 1.0 || v < 0.0 || v >= 1.0) continue;
                double m = detail::sample_mask(masks[k], u, v);
                if (m > best) {  // strict: ties keep the earlier (lower-index) winner
                    best = m;
                    best_obj = static_cast<int>(k);
                }
            }
            if (best_obj >= 0) seg.at(y, x) = classes[best_obj] + 1;
        }
    return seg;
}

/// Soft composition used by the segmentation loss: per-class channel =
/// max over that class's warped masks, background = 1 - max over all.
/// `winner`/`winner_uv` cache the argmax for the backward pass.
struct SoftSeg {
    Tensor channels;                 // (num_classes+1) x H x W
    std::vector<int> winner;         // H*W, object index or -1
    std::vector<double> winner_u, winner_v;
};

inline SoftSeg compose_soft(const std::vector<BBox>& boxes, const std::vector<Tensor>& masks,
                            const std::vector<int>& classes, int num_object_classes, int H, int W) {
    if (boxes.empty()) throw EmptyLayoutError("compose_soft: empty layout");
    if (boxes.size() != masks.size() || boxes.size() != classes.size())
        throw LengthMismatchError("compose_soft: list length mismatch");
    SoftSeg out;
    out.channels = Tensor({num_object_classes + 1, H, W});
    out.winner.assign(static_cast<std::size_t>(H) * W, -1);
    out.winner_u.assign(static_cast<std::size_t>(H) * W, 0.0);
    out.winner_v.assign(static_cast<std::size_t>(H) * W, 0.0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double best = 0.0;
            int best_obj = -1;
            double bu = 0, bv = 0;
            for (std::size_t k = 0; k < boxes.size(); ++k) {
                const BBox& b = boxes[k];
                double u = ((x + 0.5) / W - b.x0) / (b.x1 - b.x0);
                double v = ((y + 0.5) / H - b.y0) / (b.y1 - b.y0);
                if (u < 0.0 || u >= 1.0 || v < 0.0 || v >= 1.0) continue;
                double m = detail::sample_mask(masks[k], u, v);
                if (m > best) {
                    best = m;
                    best_obj = static_cast<int>(k);
                    bu = u;
                    bv = v;
                }
            }
            std::size_t p = static_cast<std::size_t>(y) * W + x;
            out.winner[p] = best_obj;
            out.winner_u[p] = bu;
            out.winner_v[p] = bv;
            if (best_obj >= 0) out.channels.at(classes[best_obj] + 1, y, x) = best;
            out.channels.at(0, y, x) = 1.0 - best;
        }
    return out;
}

}  // namespace sgdiff

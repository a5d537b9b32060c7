#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgdiff/errors.hpp"
#include "sgdiff/layout.hpp"
#include "sgdiff/png.hpp"
#include "sgdiff/rng.hpp"
#include "sgdiff/scene_graph.hpp"
#include "sgdiff/tensor.hpp"

namespace sgdiff {

/// One annotated scene: image, scene graph and per-object ground truth.
/// `masks`/`seg` are absent for box-only sources (VG-style annotations).
struct SceneRecord {
    Tensor image;  // 3xHxW in [0,1]
    SceneGraph graph;
    std::vector<BBox> boxes;
    std::vector<Tensor> masks;  // per-object 1x64x64 binary grids
    std::optional<SegMap> seg;
    std::string caption;
};

struct ShapesConfig {
    int image_size = 64;
    int min_objects = 1;
    int max_objects = 4;
    std::uint64_t seed = 0;

    static const Vocab& vocab() {
        static const Vocab v{{"circle", "square", "triangle", "star"},
                             {"left-of", "above", "inside", "beside"}};
        return v;
    }
    static const std::vector<std::array<double, 3>>& class_colors() {
        static const std::vector<std::array<double, 3>> c{
            {0.90, 0.20, 0.20},   // circle
            {0.20, 0.80, 0.20},   // square
            {0.25, 0.35, 0.90},   // triangle
            {0.95, 0.85, 0.20}};  // star
        return c;
    }
    static constexpr double background = 0.10;
};

namespace shapes {

/// Membership test in box-relative coordinates u,v in [0,1).
inline bool inside_shape(int class_index, double u, double v) {
    switch (class_index) {
        case 0: {  // circle
            double du = u - 0.5, dv = v - 0.5;
            return du * du + dv * dv <= 0.25;
        }
        case 1:  // square
            return true;
        case 2:  // triangle, apex top-center
            return v >= 1.0 - 2.0 * std::min(u, 1.0 - u);
        case 3:  // star: two overlaid triangles (hexagram)
            return v >= 1.0 - 2.0 * std::min(u, 1.0 - u) || v <= 2.0 * std::min(u, 1.0 - u);
        default: throw UnknownClassError("inside_shape: class index out of range");
    }
}

struct PixelBox {
    int x0, y0, x1, y1;  // half-open pixel bounds
};

inline PixelBox to_pixels(const BBox& b, int H, int W) {
    return {static_cast<int>(std::lround(b.x0 * W)), static_cast<int>(std::lround(b.y0 * H)),
            static_cast<int>(std::lround(b.x1 * W)), static_cast<int>(std::lround(b.y1 * H))};
}

/// Binary membership of one object on the full canvas.
inline std::vector<std::uint8_t> render_membership(int class_index, const BBox& box, int H, int W) {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(H) * W, 0);
    PixelBox p = to_pixels(box, H, W);
    for (int y = std::max(0, p.y0); y < std::min(H, p.y1); ++y)
        for (int x = std::max(0, p.x0); x < std::min(W, p.x1); ++x) {
            double u = (x + 0.5 - p.x0) / static_cast<double>(p.x1 - p.x0);
            double v = (y + 0.5 - p.y0) / static_cast<double>(p.y1 - p.y0);
            if (inside_shape(class_index, u, v)) m[static_cast<std::size_t>(y) * W + x] = 1;
        }
    return m;
}

/// Crops the membership grid to the box and resamples to 64x64 (nearest).
inline Tensor membership_to_mask(const std::vector<std::uint8_t>& member, const BBox& box, int H,
                                 int W) {
    PixelBox p = to_pixels(box, H, W);
    int bw = p.x1 - p.x0, bh = p.y1 - p.y0;
    Tensor mask({1, kMaskSize, kMaskSize});
    for (int my = 0; my < kMaskSize; ++my)
        for (int mx = 0; mx < kMaskSize; ++mx) {
            int sy = std::clamp(p.y0 + my * bh / kMaskSize, 0, H - 1);
            int sx = std::clamp(p.x0 + mx * bw / kMaskSize, 0, W - 1);
            mask.at(0, my, mx) = member[static_cast<std::size_t>(sy) * W + sx];
        }
    return mask;
}

/// Canonical rendered prototype patch for a class (used by the toy embedder).
inline Tensor prototype_patch(int class_index, int size = 64) {
    Tensor img({3, size, size}, ShapesConfig::background);
    BBox box{0.125, 0.125, 0.875, 0.875};
    auto member = render_membership(class_index, box, size, size);
    const auto& color = ShapesConfig::class_colors()[class_index];
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            if (member[static_cast<std::size_t>(y) * size + x])
                for (int c = 0; c < 3; ++c) img.at(c, y, x) = color[c];
    return img;
}

}  // namespace shapes

/// Derives one edge per object pair from box geometry. Priority: inside,
/// left-of, above, beside; the 0.1 normalized-center-offset threshold fixes
/// when a horizontal/vertical relation fires.
inline std::vector<SceneGraph::Edge> derive_geometric_edges(const std::vector<BBox>& boxes,
                                                            const Vocab& vocab) {
    auto rel = [&](const char* name) {
        auto idx = vocab.relationship_index(name);
        if (!idx) throw UnknownClassError(std::string("relationship not in vocab: ") + name);
        return *idx;
    };
    const double thr = 0.1;
    std::vector<SceneGraph::Edge> edges;
    int n = static_cast<int>(boxes.size());
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const BBox &a = boxes[i], &b = boxes[j];
            auto strictly_inside = [](const BBox& in, const BBox& out) {
                return in.x0 > out.x0 && in.x1 < out.x1 && in.y0 > out.y0 && in.y1 < out.y1;
            };
            if (strictly_inside(a, b))
                edges.push_back({i, rel("inside"), j});
            else if (strictly_inside(b, a))
                edges.push_back({j, rel("inside"), i});
            else if (a.cx() + thr <= b.cx())
                edges.push_back({i, rel("left-of"), j});
            else if (b.cx() + thr <= a.cx())
                edges.push_back({j, rel("left-of"), i});
            else if (a.cy() + thr <= b.cy())
                edges.push_back({i, rel("above"), j});
            else if (b.cy() + thr <= a.cy())
                edges.push_back({j, rel("above"), i});
            else
                edges.push_back({i, rel("beside"), j});
        }
    return edges;
}

namespace detail {

/// Placement slots per object count: canonical centers in normalized
/// coordinates; sizes divide the canvas so mask resampling is exact.
inline void slot_layout(int n_objects, int index, double& cx, double& cy, double& size) {
    switch (n_objects) {
        case 1:
            cx = 0.5;
            cy = 0.5;
            size = 0.5;
            return;
        case 2: {
            static const double xs[2] = {0.25, 0.75};
            cx = xs[index];
            cy = 0.5;
            size = 0.25;
            return;
        }
        case 3: {
            static const double pos[3][2] = {{0.25, 0.25}, {0.75, 0.25}, {0.5, 0.75}};
            cx = pos[index][0];
            cy = pos[index][1];
            size = 0.25;
            return;
        }
        default: {
            static const double pos[4][2] = {{0.25, 0.25}, {0.75, 0.25}, {0.25, 0.75}, {0.75, 0.75}};
            cx = pos[index][0];
            cy = pos[index][1];
            size = 0.25;
            return;
        }
    }
}

}  // namespace detail

/// Deterministic synthetic-shapes generator. Objects sit on per-count layout
/// slots with small integer-pixel jitter; relationships are derived from the
/// jittered geometry, so graph and layout are always consistent.
inline std::vector<SceneRecord> generate_shapes(const ShapesConfig& config, int count) {
    if (count < 1) throw EmptyInputError("generate_shapes: count must be >= 1");
    if (config.image_size < 32 || config.image_size % 32 != 0)
        throw ConfigError("generate_shapes: image_size must be a positive multiple of 32");
    const Vocab& vocab = ShapesConfig::vocab();
    const int S = config.image_size;
    const int jitter = std::max(1, S / 32);
    std::vector<SceneRecord> out;
    out.reserve(count);
    for (int r = 0; r < count; ++r) {
        RngStream rng(config.seed, 0x5ca9e5, static_cast<std::uint64_t>(r));
        int n = rng.uniform_int(config.min_objects, config.max_objects);
        SceneRecord rec;
        rec.image = Tensor({3, S, S}, ShapesConfig::background);
        std::vector<int> classes(n);
        for (int i = 0; i < n; ++i) {
            classes[i] = rng.uniform_int(0, static_cast<int>(vocab.object_classes.size()) - 1);
            double cx, cy, size;
            detail::slot_layout(n, i, cx, cy, size);
            int px = static_cast<int>(std::lround(cx * S)) + rng.uniform_int(-jitter, jitter);
            int py = static_cast<int>(std::lround(cy * S)) + rng.uniform_int(-jitter, jitter);
            int half = static_cast<int>(std::lround(size * S)) / 2;
            BBox box{(px - half) / static_cast<double>(S), (py - half) / static_cast<double>(S),
                     (px + half) / static_cast<double>(S), (py + half) / static_cast<double>(S)};
            rec.boxes.push_back(box);
            rec.graph.nodes.push_back({i, classes[i]});
        }
        rec.graph.edges = derive_geometric_edges(rec.boxes, vocab);

        // render back-to-front so the lower node index ends up in front,
        // matching the composition tie-break
        std::vector<std::vector<std::uint8_t>> members(n);
        for (int i = 0; i < n; ++i)
            members[i] = shapes::render_membership(classes[i], rec.boxes[i], S, S);
        SegMap seg;
        seg.height = S;
        seg.width = S;
        seg.num_object_classes = static_cast<int>(vocab.object_classes.size());
        seg.labels.assign(static_cast<std::size_t>(S) * S, 0);
        for (int i = n - 1; i >= 0; --i) {
            const auto& color = ShapesConfig::class_colors()[classes[i]];
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x)
                    if (members[i][static_cast<std::size_t>(y) * S + x]) {
                        for (int c = 0; c < 3; ++c) rec.image.at(c, y, x) = color[c];
                        seg.at(y, x) = classes[i] + 1;
                    }
        }
        rec.seg = seg;
        for (int i = 0; i < n; ++i)
            rec.masks.push_back(shapes::membership_to_mask(members[i], rec.boxes[i], S, S));

        // caption from the derived triplets
        std::string caption;
        for (const auto& e : rec.graph.edges) {
            if (!caption.empty()) caption += "; ";
            caption += "a " + vocab.object_classes[classes[e.src]] + " " +
                       vocab.relationship_classes[e.relationship_index] + " a " +
                       vocab.object_classes[classes[e.dst]];
        }
        if (caption.empty()) caption = "a " + vocab.object_classes[classes[0]];
        rec.caption = caption;
        out.push_back(std::move(rec));
    }
    return out;
}

// ---------------------------------------------------------------------------
// On-disk dataset layout (see README): a directory with
//   manifest.json   {"seed":..,"count":..,"splits":{"train":[ids],"val":[ids]}}
//   annotations.json  COCO-like: images / annotations / categories
//   images/NNNNN.png, masks/NNNNN_K.png, seg/NNNNN.png
// ---------------------------------------------------------------------------

inline std::vector<std::array<std::uint8_t, 3>> seg_palette(const Vocab& vocab) {
    std::vector<std::array<std::uint8_t, 3>> pal;
    pal.push_back({0, 0, 0});
    for (std::size_t i = 0; i < vocab.object_classes.size(); ++i) {
        const auto& colors = ShapesConfig::class_colors();
        if (i < colors.size())
            pal.push_back({static_cast<std::uint8_t>(colors[i][0] * 255),
                           static_cast<std::uint8_t>(colors[i][1] * 255),
                           static_cast<std::uint8_t>(colors[i][2] * 255)});
        else
            pal.push_back({static_cast<std::uint8_t>(37 * (i + 1) % 256),
                           static_cast<std::uint8_t>(91 * (i + 1) % 256),
                           static_cast<std::uint8_t>(159 * (i + 1) % 256)});
    }
    return pal;
}

inline void save_shapes_dataset(const std::string& dir, const std::vector<SceneRecord>& records,
                                const ShapesConfig& config, double train_fraction = 0.8) {
    namespace fs = std::filesystem;
    const Vocab& vocab = ShapesConfig::vocab();
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "masks");
    fs::create_directories(fs::path(dir) / "seg");

    nlohmann::json ann;
    ann["categories"] = nlohmann::json::array();
    for (std::size_t i = 0; i < vocab.object_classes.size(); ++i)
        ann["categories"].push_back({{"id", static_cast<int>(i)}, {"name", vocab.object_classes[i]}});
    ann["relations"] = vocab.relationship_classes;
    ann["images"] = nlohmann::json::array();
    ann["annotations"] = nlohmann::json::array();

    auto pal = seg_palette(vocab);
    for (std::size_t r = 0; r < records.size(); ++r) {
        const SceneRecord& rec = records[r];
        char name[32];
        std::snprintf(name, sizeof name, "%05zu", r);
        int H = rec.image.shape[1], W = rec.image.shape[2];
        write_png(dir + "/images/" + name + ".png", tensor_to_image(rec.image));
        ann["images"].push_back({{"id", static_cast<int>(r)},
                                 {"file_name", std::string("images/") + name + ".png"},
                                 {"width", W},
                                 {"height", H},
                                 {"caption", rec.caption}});
        if (rec.seg) {
            Image8 seg_img;
            seg_img.width = rec.seg->width;
            seg_img.height = rec.seg->height;
            seg_img.channels = 1;
            seg_img.pixels.assign(rec.seg->labels.begin(), rec.seg->labels.end());
            write_png(dir + "/seg/" + name + ".png", seg_img, pal);
        }
        for (std::size_t k = 0; k < rec.boxes.size(); ++k) {
            nlohmann::json a;
            a["image_id"] = static_cast<int>(r);
            a["category_id"] = rec.graph.nodes[k].class_index;
            const BBox& b = rec.boxes[k];
            a["bbox"] = {b.x0 * W, b.y0 * H, (b.x1 - b.x0) * W, (b.y1 - b.y0) * H};
            if (k < rec.masks.size()) {
                std::string mask_name =
                    std::string("masks/") + name + "_" + std::to_string(k) + ".png";
                Image8 m;
                m.width = kMaskSize;
                m.height = kMaskSize;
                m.channels = 1;
                m.pixels.resize(rec.masks[k].size());
                for (std::size_t i = 0; i < m.pixels.size(); ++i)
                    m.pixels[i] = rec.masks[k].data[i] > 0.5 ? 255 : 0;
                write_png(dir + "/" + mask_name, m);
                a["mask"] = mask_name;
            }
            ann["annotations"].push_back(a);
        }
    }
    {
        std::ofstream f(dir + "/annotations.json");
        if (!f) throw IoError("save_shapes_dataset: cannot write annotations.json");
        f << ann.dump() << "\n";
    }
    nlohmann::json manifest;
    manifest["seed"] = config.seed;
    manifest["image_size"] = config.image_size;
    manifest["count"] = records.size();
    int n_train = static_cast<int>(records.size() * train_fraction);
    std::vector<int> train_ids, val_ids;
    for (std::size_t r = 0; r < records.size(); ++r)
        (static_cast<int>(r) < n_train ? train_ids : val_ids).push_back(static_cast<int>(r));
    manifest["splits"] = {{"train", train_ids}, {"val", val_ids}};
    std::ofstream f(dir + "/manifest.json");
    if (!f) throw IoError("save_shapes_dataset: cannot write manifest.json");
    f << manifest.dump(2) << "\n";
}

/// Streams records from a COCO-like annotation file. Geometric relationships
/// are synthesized from box pairs exactly as in the generator. Records with
/// malformed boxes are skipped with a warning; missing masks leave
/// masks/seg absent.
inline std::vector<SceneRecord> load_coco_like(const std::string& annotation_path,
                                               const std::string& image_dir, Vocab* vocab_out = nullptr,
                                               std::ostream& warn = std::cerr) {
    std::ifstream f(annotation_path);
    if (!f) throw IoError("load_coco_like: cannot open " + annotation_path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("load_coco_like: ") + e.what());
    }

    Vocab vocab;
    std::map<int, int> category_to_class;
    try {
        std::vector<std::pair<int, std::string>> cats;
        for (const auto& c : j.at("categories"))
            cats.emplace_back(c.at("id").get<int>(), c.at("name").get<std::string>());
        std::sort(cats.begin(), cats.end());
        for (auto& [id, name] : cats) {
            category_to_class[id] = static_cast<int>(vocab.object_classes.size());
            vocab.object_classes.push_back(name);
        }
        if (j.contains("relations"))
            vocab.relationship_classes = j["relations"].get<std::vector<std::string>>();
        else
            vocab.relationship_classes = ShapesConfig::vocab().relationship_classes;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("load_coco_like: categories: ") + e.what());
    }
    auto class_index_of = [&](int category_id) -> int {
        auto it = category_to_class.find(category_id);
        return it == category_to_class.end() ? -1 : it->second;
    };

    std::vector<SceneRecord> out;
    try {
        for (const auto& imgj : j.at("images")) {
            int image_id = imgj.at("id").get<int>();
            std::string file_name = imgj.at("file_name").get<std::string>();
            int W = imgj.at("width").get<int>(), H = imgj.at("height").get<int>();

            SceneRecord rec;
            std::string img_path = image_dir + "/" + file_name;
            if (!std::filesystem::exists(img_path))
                throw MissingImageError("load_coco_like: missing image " + img_path);
            rec.image = image_to_tensor(read_png(img_path));
            rec.caption = imgj.value("caption", "");

            bool all_masks = true;
            std::vector<int> classes;
            for (const auto& a : j.at("annotations")) {
                if (a.at("image_id").get<int>() != image_id) continue;
                auto bb = a.at("bbox");
                double x = bb.at(0).get<double>(), y = bb.at(1).get<double>();
                double w = bb.at(2).get<double>(), h = bb.at(3).get<double>();
                BBox box{x / W, y / H, (x + w) / W, (y + h) / H};
                if (!box.valid()) {
                    warn << "load_coco_like: skipping malformed box in image " << image_id << "\n";
                    continue;
                }
                int cls = class_index_of(a.at("category_id").get<int>());
                if (cls < 0 || cls >= static_cast<int>(vocab.object_classes.size())) {
                    warn << "load_coco_like: skipping unknown category in image " << image_id
                         << "\n";
                    continue;
                }
                rec.boxes.push_back(box);
                classes.push_back(cls);
                if (a.contains("mask")) {
                    Image8 idx;
                    Image8 m = read_png(image_dir + "/" + a["mask"].get<std::string>(), &idx);
                    const Image8& src = (m.channels == 1) ? m : (idx.channels == 1 ? idx : m);
                    Tensor mask({1, kMaskSize, kMaskSize});
                    for (int my = 0; my < kMaskSize; ++my)
                        for (int mx = 0; mx < kMaskSize; ++mx) {
                            int sy = my * src.height / kMaskSize;
                            int sx = mx * src.width / kMaskSize;
                            mask.at(0, my, mx) = src.at(sy, sx, 0) > 127 ? 1.0 : 0.0;
                        }
                    rec.masks.push_back(std::move(mask));
                } else {
                    all_masks = false;
                }
            }
            if (rec.boxes.empty()) {
                warn << "load_coco_like: skipping image " << image_id << " with no usable boxes\n";
                continue;
            }
            if (!all_masks) rec.masks.clear();  // VG-style record: boxes only
            for (std::size_t i = 0; i < rec.boxes.size(); ++i)
                rec.graph.nodes.push_back({static_cast<int>(i), classes[i]});
            rec.graph.edges = derive_geometric_edges(rec.boxes, vocab);
            if (!rec.masks.empty()) {
                std::string seg_name = "seg/" + file_name.substr(file_name.find_last_of('/') + 1);
                std::string seg_path = image_dir + "/" + seg_name;
                if (std::filesystem::exists(seg_path)) {
                    Image8 idx;
                    read_png(seg_path, &idx);
                    if (idx.channels == 1) {
                        SegMap seg;
                        seg.height = idx.height;
                        seg.width = idx.width;
                        seg.num_object_classes = static_cast<int>(vocab.object_classes.size());
                        seg.labels.assign(idx.pixels.begin(), idx.pixels.end());
                        rec.seg = seg;
                    }
                }
            }
            out.push_back(std::move(rec));
        }
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("load_coco_like: ") + e.what());
    }
    if (vocab_out) *vocab_out = vocab;
    return out;
}

}  // namespace sgdiff

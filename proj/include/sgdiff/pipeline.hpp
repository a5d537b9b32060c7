#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgdiff/datasets.hpp"
#include "sgdiff/diffusion.hpp"
#include "sgdiff/embedding.hpp"
#include "sgdiff/errors.hpp"
#include "sgdiff/guidance.hpp"
#include "sgdiff/png.hpp"
#include "sgdiff/sg2seg.hpp"

namespace sgdiff {

// ---------------------------------------------------------------------------
// Image-grid rendering with a tiny built-in bitmap font
// ---------------------------------------------------------------------------

namespace detail {

/// 3x5 glyphs, 3 bits per row, top row in the highest bits.
inline int glyph_pattern(char ch) {
    auto g = [](int r0, int r1, int r2, int r3, int r4) {
        return (r0 << 12) | (r1 << 9) | (r2 << 6) | (r3 << 3) | r4;
    };
    if (ch >= 'a' && ch <= 'z') ch = static_cast<char>(ch - 'a' + 'A');
    switch (ch) {
        case 'A': return g(2, 5, 7, 5, 5);
        case 'B': return g(6, 5, 6, 5, 6);
        case 'C': return g(3, 4, 4, 4, 3);
        case 'D': return g(6, 5, 5, 5, 6);
        case 'E': return g(7, 4, 6, 4, 7);
        case 'F': return g(7, 4, 6, 4, 4);
        case 'G': return g(3, 4, 5, 5, 3);
        case 'H': return g(5, 5, 7, 5, 5);
        case 'I': return g(7, 2, 2, 2, 7);
        case 'J': return g(1, 1, 1, 5, 2);
        case 'K': return g(5, 5, 6, 5, 5);
        case 'L': return g(4, 4, 4, 4, 7);
        case 'M': return g(5, 7, 7, 5, 5);
        case 'N': return g(6, 5, 5, 5, 5);
        case 'O': return g(2, 5, 5, 5, 2);
        case 'P': return g(6, 5, 6, 4, 4);
        case 'Q': return g(2, 5, 5, 7, 3);
        case 'R': return g(6, 5, 6, 5, 5);
        case 'S': return g(3, 4, 2, 1, 6);
        case 'T': return g(7, 2, 2, 2, 2);
        case 'U': return g(5, 5, 5, 5, 7);
        case 'V': return g(5, 5, 5, 5, 2);
        case 'W': return g(5, 5, 7, 7, 5);
        case 'X': return g(5, 5, 2, 5, 5);
        case 'Y': return g(5, 5, 2, 2, 2);
        case 'Z': return g(7, 1, 2, 4, 7);
        case '0': return g(7, 5, 5, 5, 7);
        case '1': return g(2, 6, 2, 2, 7);
        case '2': return g(7, 1, 7, 4, 7);
        case '3': return g(7, 1, 3, 1, 7);
        case '4': return g(5, 5, 7, 1, 1);
        case '5': return g(7, 4, 7, 1, 7);
        case '6': return g(7, 4, 7, 5, 7);
        case '7': return g(7, 1, 2, 2, 2);
        case '8': return g(7, 5, 7, 5, 7);
        case '9': return g(7, 5, 7, 1, 7);
        case '-': return g(0, 0, 7, 0, 0);
        case '.': return g(0, 0, 0, 0, 2);
        case ',': return g(0, 0, 0, 2, 4);
        case ';': return g(0, 2, 0, 2, 4);
        case '=': return g(0, 7, 0, 7, 0);
        default: return 0;
    }
}

inline void draw_text(Image8& img, int x0, int y0, const std::string& text) {
    for (std::size_t i = 0; i < text.size(); ++i) {
        int pat = glyph_pattern(text[i]);
        for (int r = 0; r < 5; ++r)
            for (int c = 0; c < 3; ++c)
                if ((pat >> ((4 - r) * 3 + (2 - c))) & 1) {
                    int y = y0 + r, x = x0 + static_cast<int>(i) * 4 + c;
                    if (y >= 0 && y < img.height && x >= 0 && x < img.width)
                        for (int ch = 0; ch < img.channels; ++ch) img.at(y, x, ch) = 255;
                }
    }
}

}  // namespace detail

/// Tiles images (all the same size) into rows = floor(sqrt(n)) and adds a
/// caption strip under each tile. Captions longer than the tile are cut and
/// marked with "...".
inline Image8 render_grid(const std::vector<Tensor>& images,
                          const std::vector<std::string>& captions) {
    if (images.empty()) throw EmptyInputError("render_grid: no images");
    if (images.size() != captions.size())
        throw LengthMismatchError("render_grid: image/caption count mismatch");
    int H = images[0].shape[1], W = images[0].shape[2];
    for (const Tensor& t : images)
        if (t.shape != images[0].shape) throw ShapeError("render_grid: mixed image sizes");
    int n = static_cast<int>(images.size());
    int rows = std::max(1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(n)))));
    int cols = (n + rows - 1) / rows;
    const int strip = 8;
    Image8 grid;
    grid.channels = 3;
    grid.width = cols * W;
    grid.height = rows * (H + strip);
    grid.pixels.assign(static_cast<std::size_t>(grid.width) * grid.height * 3, 0);
    int fit = std::max(1, (W - 2) / 4);
    for (int i = 0; i < n; ++i) {
        int r = i / cols, c = i % cols;
        Image8 tile = tensor_to_image(images[i]);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                for (int ch = 0; ch < 3; ++ch)
                    grid.at(r * (H + strip) + y, c * W + x, ch) =
                        tile.channels == 3 ? tile.at(y, x, ch) : tile.at(y, x, 0);
        std::string cap = captions[i];
        if (static_cast<int>(cap.size()) > fit)
            cap = cap.substr(0, std::max(0, fit - 3)) + "...";
        detail::draw_text(grid, c * W + 1, r * (H + strip) + H + 1, cap);
    }
    return grid;
}

// ---------------------------------------------------------------------------
// Run configuration and report
// ---------------------------------------------------------------------------

enum class LayoutSource { Predicted, GroundTruth };

inline std::string to_string(LayoutSource s) {
    return s == LayoutSource::Predicted ? "predicted" : "ground-truth";
}
inline LayoutSource layout_source_from_string(const std::string& s) {
    if (s == "predicted") return LayoutSource::Predicted;
    if (s == "ground-truth") return LayoutSource::GroundTruth;
    throw ConfigError("layout_source must be 'predicted' or 'ground-truth': " + s);
}

struct RunConfig {
    std::string output_dir = "out";
    std::string graph_path;            // optional when a dataset record supplies the graph
    std::string dataset_dir;           // required for ground-truth layouts
    int record_index = 0;
    std::string sg2seg_checkpoint;     // required for predicted layouts
    std::string diffusion_checkpoint;  // always required
    LayoutSource layout_source = LayoutSource::Predicted;
    GuidanceSpec guidance;
    int steps = 100;
    int schedule_T = 1000;
    std::uint64_t seed = 0;
    std::string caption;  // overrides the derived prompt when set

    nlohmann::json to_json() const {
        return {{"output_dir", output_dir},
                {"graph_path", graph_path},
                {"dataset_dir", dataset_dir},
                {"record_index", record_index},
                {"sg2seg_checkpoint", sg2seg_checkpoint},
                {"diffusion_checkpoint", diffusion_checkpoint},
                {"layout_source", to_string(layout_source)},
                {"guidance", guidance.to_json()},
                {"steps", steps},
                {"schedule_T", schedule_T},
                {"seed", seed},
                {"caption", caption}};
    }
    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig c;
        c.output_dir = j.value("output_dir", c.output_dir);
        c.graph_path = j.value("graph_path", c.graph_path);
        c.dataset_dir = j.value("dataset_dir", c.dataset_dir);
        c.record_index = j.value("record_index", c.record_index);
        c.sg2seg_checkpoint = j.value("sg2seg_checkpoint", c.sg2seg_checkpoint);
        c.diffusion_checkpoint = j.value("diffusion_checkpoint", c.diffusion_checkpoint);
        if (j.contains("layout_source"))
            c.layout_source = layout_source_from_string(j.at("layout_source").get<std::string>());
        if (j.contains("guidance")) c.guidance = GuidanceSpec::from_json(j.at("guidance"));
        c.steps = j.value("steps", c.steps);
        c.schedule_T = j.value("schedule_T", c.schedule_T);
        c.seed = j.value("seed", c.seed);
        c.caption = j.value("caption", c.caption);
        return c;
    }

    void validate() const {
        namespace fs = std::filesystem;
        if (steps < 1) throw ConfigError("RunConfig: steps must be >= 1");
        if (schedule_T < steps) throw ConfigError("RunConfig: schedule_T must be >= steps");
        guidance.validate();
        if (diffusion_checkpoint.empty())
            throw ConfigError("RunConfig: diffusion_checkpoint required");
        if (!fs::exists(diffusion_checkpoint))
            throw CheckpointMissingError("diffusion checkpoint not found: " + diffusion_checkpoint);
        if (layout_source == LayoutSource::Predicted) {
            if (sg2seg_checkpoint.empty())
                throw ConfigError("RunConfig: sg2seg_checkpoint required for predicted layouts");
            if (!fs::exists(sg2seg_checkpoint))
                throw CheckpointMissingError("sg2seg checkpoint not found: " + sg2seg_checkpoint);
            if (graph_path.empty() && dataset_dir.empty())
                throw ConfigError("RunConfig: a graph_path or dataset_dir must supply the graph");
        } else if (dataset_dir.empty()) {
            throw ConfigError("RunConfig: dataset_dir required for ground-truth layouts");
        }
        if (!graph_path.empty() && !fs::exists(graph_path))
            throw CheckpointMissingError("graph file not found: " + graph_path);
        if (!dataset_dir.empty() && !fs::exists(dataset_dir))
            throw CheckpointMissingError("dataset directory not found: " + dataset_dir);
    }
};

struct RunReport {
    std::string image_path, layout_path, trace_path, seg_path, report_path;
    double wall_clock_sec = 0;
    nlohmann::json config_echo;
    nlohmann::json trace_summary;

    nlohmann::json to_json() const {
        return {{"image", image_path},       {"layout", layout_path},
                {"trace", trace_path},       {"seg", seg_path},
                {"wall_clock_sec", wall_clock_sec},
                {"config", config_echo},     {"trace_summary", trace_summary}};
    }
};

// ---------------------------------------------------------------------------
// Shared pipeline state: everything the guided sampler needs, assembled once
// from a RunConfig so `run` and `ablate` drive identical machinery.
// ---------------------------------------------------------------------------

struct PipelineContext {
    EpsModel model;
    NoiseSchedule sched;
    std::shared_ptr<ToyEmbedder> embedder;
    FirstStageAE ae = FirstStageAE::identity();
    Vocab vocab;
    std::vector<BBox> boxes;
    std::vector<Tensor> mask_tensors;  // 1x64x64 per object
    std::vector<int> classes;
    std::vector<std::string> labels;
    std::string caption;
    SegMap seg;
    int steps = 100;
    std::uint64_t seed = 0;

    RoiContext rois() const {
        return RoiContext::from_layout(boxes, labels, model.config().image_size,
                                       model.config().image_size);
    }
};

/// Nearest-neighbor label resampling (used to bring a 64+ composition down to
/// the sampler's resolution).
inline SegMap resize_seg_nearest(const SegMap& seg, int H, int W) {
    SegMap out;
    out.height = H;
    out.width = W;
    out.num_object_classes = seg.num_object_classes;
    out.labels.assign(static_cast<std::size_t>(H) * W, 0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            out.at(y, x) = seg.at(y * seg.height / H, x * seg.width / W);
    return out;
}

inline PipelineContext build_pipeline_context(const RunConfig& config) {
    config.validate();
    PipelineContext ctx;
    ctx.model = EpsModel::load(config.diffusion_checkpoint);
    ctx.sched = NoiseSchedule::linear(config.schedule_T);
    ctx.steps = config.steps;
    ctx.seed = config.seed;
    ctx.vocab = ShapesConfig::vocab();
    int num_classes = static_cast<int>(ctx.vocab.object_classes.size());

    std::vector<Tensor> prototypes;
    for (int k = 0; k < num_classes; ++k) prototypes.push_back(shapes::prototype_patch(k));
    ctx.embedder =
        std::make_shared<ToyEmbedder>(ctx.vocab.object_classes, std::move(prototypes));

    std::optional<SceneRecord> record;
    if (!config.dataset_dir.empty()) {
        namespace fs = std::filesystem;
        Vocab loaded;
        auto records = load_coco_like((fs::path(config.dataset_dir) / "annotations.json").string(),
                                      config.dataset_dir, &loaded);
        if (config.record_index < 0 || config.record_index >= static_cast<int>(records.size()))
            throw ConfigError("RunConfig: record_index out of range");
        ctx.vocab = loaded;
        num_classes = static_cast<int>(ctx.vocab.object_classes.size());
        record = std::move(records[config.record_index]);
    }

    SceneGraph graph;
    if (!config.graph_path.empty()) {
        auto [g, v] = load_graph_json(config.graph_path);
        graph = g;
        ctx.vocab = v;
        num_classes = static_cast<int>(ctx.vocab.object_classes.size());
    } else if (record) {
        graph = record->graph;
    }

    if (config.layout_source == LayoutSource::GroundTruth) {
        ctx.boxes = record->boxes;
        ctx.classes.clear();
        for (const auto& node : record->graph.nodes) ctx.classes.push_back(node.class_index);
        for (const Tensor& m : record->masks) {
            Tensor soft = m;
            // gt masks are binary; keep them in the open interval the mask
            // contract expects
            for (double& v : soft.data) v = std::clamp(v, 0.01, 0.99);
            ctx.mask_tensors.push_back(std::move(soft));
        }
        ctx.caption = record->caption;
    } else {
        SG2SEGModel sg2seg = SG2SEGModel::load(config.sg2seg_checkpoint);
        MatrixXd feats = semantic_node_features(graph, ctx.vocab, *ctx.embedder);
        Layout layout = sg2seg.predict(graph, feats);
        ctx.boxes = layout.boxes;
        ctx.classes = layout.classes;
        for (const auto& m : layout.masks) ctx.mask_tensors.push_back(m.grid);
        for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
            if (!ctx.caption.empty()) ctx.caption += " and ";
            ctx.caption += "a " + ctx.vocab.object_classes[graph.nodes[i].class_index];
        }
        ctx.caption = "A photo of " + ctx.caption;
    }
    if (!config.caption.empty()) ctx.caption = config.caption;
    for (int cls : ctx.classes) ctx.labels.push_back(ctx.vocab.object_classes.at(cls));

    int S = ctx.model.config().image_size;
    if (record && record->seg && config.layout_source == LayoutSource::GroundTruth) {
        ctx.seg = resize_seg_nearest(*record->seg, S, S);
    } else {
        int comp = std::max(S, kMaskSize);
        SegMap full = compose_segmentation(ctx.boxes, ctx.mask_tensors, ctx.classes, num_classes,
                                           comp, comp);
        ctx.seg = comp == S ? full : resize_seg_nearest(full, S, S);
    }
    return ctx;
}

/// Runs DDIM sampling with the configured guidance bundle. Deterministic in
/// (context seed, spec).
inline std::pair<Tensor, GuidanceTrace> guided_sample(PipelineContext& ctx,
                                                      const GuidanceSpec& spec) {
    GuidanceTrace trace;
    RoiContext rois = ctx.rois();
    GuidanceFn fn;
    if (spec.enable_text || spec.enable_box || spec.enable_seg) {
        fn = [&](const Tensor& x0_hat, int t) {
            Tensor g = total_guidance(spec, *ctx.embedder, ctx.ae, x0_hat, ctx.caption, &rois,
                                      &ctx.seg, mix_seed(spec.noise_seed, 0x57e9, t), &trace, t);
            // total_guidance returns the descent direction on the negated
            // score; the sampler's mean shift expects the ascent direction
            g *= -spec.alpha;
            return g;
        };
    }
    SampleConfig sc;
    sc.steps = ctx.steps;
    sc.seed = ctx.seed;
    Tensor img = sample(ctx.model, ctx.sched, sc, fn);
    return {img, trace};
}

// ---------------------------------------------------------------------------
// Ablation metrics
// ---------------------------------------------------------------------------

/// Mean toy-embedder similarity between each object's prompt and its
/// noise-padded crop of the generated image.
inline double roi_similarity(const Embedder& embedder, const Tensor& image,
                             const RoiContext& rois, std::uint64_t seed) {
    double s = 0;
    for (std::size_t k = 0; k < rois.rois.size(); ++k) {
        Tensor padded = pad_with_noise(image, rois.rois[k].box, mix_seed(seed, 0xeba1, k));
        Embedding et = embedder.embed_text("A photo of a " + rois.rois[k].label);
        s += similarity(embedder.embed_image(padded), et);
    }
    return s / static_cast<double>(rois.rois.size());
}

/// Fraction of the total-guidance gradient magnitude that falls inside the
/// union of the ROIs, evaluated at the final image.
inline double roi_gradient_mass(const GuidanceSpec& spec, const Embedder& embedder,
                                const FirstStageAE& ae, const Tensor& image,
                                const std::string& caption, const RoiContext& rois,
                                const SegMap& seg, std::uint64_t seed) {
    Tensor g = total_guidance(spec, embedder, ae, image, caption, &rois, &seg, seed);
    int C = image.shape[0], H = image.shape[1], W = image.shape[2];
    double inside = 0, total = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            bool in = false;
            for (const auto& roi : rois.rois)
                if (detail::pixel_inside(roi.box, x, y, W, H)) {
                    in = true;
                    break;
                }
            for (int c = 0; c < C; ++c) {
                double a = std::fabs(g.at(c, y, x));
                total += a;
                if (in) inside += a;
            }
        }
    return total > 0 ? inside / total : 0.0;
}

// ---------------------------------------------------------------------------
// run / ablate entry points
// ---------------------------------------------------------------------------

inline RunReport run_pipeline(const RunConfig& config) {
    namespace fs = std::filesystem;
    auto t0 = std::chrono::steady_clock::now();
    PipelineContext ctx = build_pipeline_context(config);
    auto [img, trace] = guided_sample(ctx, config.guidance);

    fs::create_directories(config.output_dir);
    RunReport report;
    report.config_echo = config.to_json();
    report.image_path = (fs::path(config.output_dir) / "sample.png").string();
    report.layout_path = (fs::path(config.output_dir) / "layout.json").string();
    report.trace_path = (fs::path(config.output_dir) / "trace.jsonl").string();
    report.seg_path = (fs::path(config.output_dir) / "seg.png").string();
    report.report_path = (fs::path(config.output_dir) / "report.json").string();

    write_png(report.image_path, render_grid({img}, {ctx.caption}));

    nlohmann::json layout_json;
    layout_json["caption"] = ctx.caption;
    layout_json["objects"] = nlohmann::json::array();
    for (std::size_t k = 0; k < ctx.boxes.size(); ++k)
        layout_json["objects"].push_back({{"class", ctx.labels[k]},
                                          {"class_index", ctx.classes[k]},
                                          {"box", {ctx.boxes[k].x0, ctx.boxes[k].y0,
                                                   ctx.boxes[k].x1, ctx.boxes[k].y1}}});
    std::ofstream lf(report.layout_path);
    if (!lf) throw IoError("run_pipeline: cannot write " + report.layout_path);
    lf << layout_json.dump(2) << "\n";
    lf.close();

    trace.write_jsonl(report.trace_path);

    Image8 seg_img;
    seg_img.width = ctx.seg.width;
    seg_img.height = ctx.seg.height;
    seg_img.channels = 1;
    seg_img.pixels.resize(ctx.seg.labels.size());
    for (std::size_t i = 0; i < ctx.seg.labels.size(); ++i)
        seg_img.pixels[i] = static_cast<std::uint8_t>(ctx.seg.labels[i]);
    write_png(report.seg_path, seg_img, seg_palette(ctx.vocab));

    double text = 0, box = 0, seg_s = 0;
    for (const auto& e : trace.entries) {
        text += e.text_score;
        box += e.box_score;
        seg_s += e.seg_score;
    }
    double n = std::max<std::size_t>(trace.entries.size(), 1);
    report.trace_summary = {{"steps", trace.entries.size()},
                            {"mean_text_score", text / n},
                            {"mean_box_score", box / n},
                            {"mean_seg_score", seg_s / n}};

    report.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    nlohmann::json rj = report.to_json();
    std::ofstream rf(report.report_path);
    if (!rf) throw IoError("run_pipeline: cannot write " + report.report_path);
    rf << rj.dump(2) << "\n";
    return report;
}

struct AblationCell {
    std::string name;
    GuidanceSpec spec;
};

struct AblationRow {
    std::string name;
    double lambda = 0;
    bool text = false, box = false, seg = false;
    double mean_roi_similarity = 0;
    double box_adherence = 0;
    double runtime_sec = 0;
};

/// Runs every cell with identical seeds and layout and reports the toy
/// metrics as CSV (also returned as structured rows via `rows_out`).
inline std::string ablate(const RunConfig& config, const std::vector<AblationCell>& cells,
                          std::vector<AblationRow>* rows_out = nullptr) {
    if (cells.empty()) throw EmptyInputError("ablate: empty grid");
    PipelineContext ctx = build_pipeline_context(config);
    RoiContext rois = ctx.rois();
    std::ostringstream csv;
    csv << "cell,lambda,text,box,seg,mean_roi_similarity,box_adherence,runtime_sec\n";
    for (const AblationCell& cell : cells) {
        auto t0 = std::chrono::steady_clock::now();
        auto [img, trace] = guided_sample(ctx, cell.spec);
        AblationRow row;
        row.name = cell.name;
        row.lambda = cell.spec.lambda;
        row.text = cell.spec.enable_text;
        row.box = cell.spec.enable_box;
        row.seg = cell.spec.enable_seg;
        row.mean_roi_similarity = roi_similarity(*ctx.embedder, img, rois, config.seed);
        row.box_adherence =
            roi_gradient_mass(cell.spec, *ctx.embedder, ctx.ae, img, ctx.caption, rois, ctx.seg,
                              mix_seed(cell.spec.noise_seed, 0x57e9, 0));
        row.runtime_sec =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        csv << row.name << "," << row.lambda << "," << row.text << "," << row.box << ","
            << row.seg << "," << row.mean_roi_similarity << "," << row.box_adherence << ","
            << row.runtime_sec << "\n";
        if (rows_out) rows_out->push_back(row);
    }
    return csv.str();
}

}  // namespace sgdiff

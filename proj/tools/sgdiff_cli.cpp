// Command-line surface: graph building, dataset generation, training of the
// layout and diffusion models, guided sampling, and the ablation driver.
//
// Exit codes: 0 success, 2 configuration error, 3 missing artifact,
// 4 runtime failure.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <sgdiff/sgdiff.hpp>

namespace fs = std::filesystem;
using namespace sgdiff;

namespace {

/// Relative output paths are resolved against $SGDIFF_OUTPUT_ROOT when set.
std::string resolve_output(const std::string& path) {
    const char* root = std::getenv("SGDIFF_OUTPUT_ROOT");
    if (!root || !*root || path.empty() || fs::path(path).is_absolute()) return path;
    return (fs::path(root) / path).string();
}

/// "subject,relationship,object" with an optional "#id" suffix on subject or
/// object to reuse an earlier mention (node) instead of adding a fresh one.
MentionTriplet parse_triplet(const std::string& arg) {
    auto split = [](const std::string& s) {
        std::vector<std::string> parts;
        std::string cur;
        for (char c : s) {
            if (c == ',') {
                parts.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        parts.push_back(cur);
        return parts;
    };
    auto parts = split(arg);
    if (parts.size() != 3)
        throw ConfigError("triplet must be 'subject,relationship,object': " + arg);
    MentionTriplet mt;
    auto strip_mention = [&](std::string name, int& mention) {
        auto pos = name.rfind('#');
        if (pos != std::string::npos) {
            mention = std::stoi(name.substr(pos + 1));
            name = name.substr(0, pos);
        }
        return name;
    };
    mt.triplet.subject_class = strip_mention(parts[0], mt.subject_mention);
    mt.triplet.predicate = parts[1];
    mt.triplet.object_class = strip_mention(parts[2], mt.object_mention);
    return mt;
}

std::vector<SceneRecord> load_dataset_dir(const std::string& dir, Vocab* vocab_out) {
    return load_coco_like((fs::path(dir) / "annotations.json").string(), dir, vocab_out);
}

/// Train/val split from the dataset manifest; falls back to 80/20 by order.
void split_records(const std::string& dir, std::vector<SceneRecord>& records,
                   std::vector<SceneRecord>& train, std::vector<SceneRecord>& val) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    std::vector<int> train_ids, val_ids;
    if (mf) {
        nlohmann::json m = nlohmann::json::parse(mf);
        train_ids = m.at("splits").at("train").get<std::vector<int>>();
        val_ids = m.at("splits").at("val").get<std::vector<int>>();
    }
    if (train_ids.empty()) {
        int cut = static_cast<int>(records.size() * 8 / 10);
        for (int i = 0; i < static_cast<int>(records.size()); ++i)
            (i < cut ? train_ids : val_ids).push_back(i);
    }
    for (int id : train_ids) train.push_back(std::move(records.at(id)));
    for (int id : val_ids) val.push_back(std::move(records.at(id)));
}

int run(int argc, char** argv) {
    CLI::App app{"scene-graph guided diffusion toolkit"};
    app.require_subcommand(1);

    // ---- graph build ----
    auto* graph_cmd = app.add_subcommand("graph", "scene graph operations");
    graph_cmd->require_subcommand(1);
    auto* graph_build = graph_cmd->add_subcommand("build", "build a graph from triplets");
    std::vector<std::string> triplet_args;
    std::string graph_out = "graph.json";
    graph_build->add_option("--triplet", triplet_args,
                            "subject,relationship,object (repeatable; append #N to reuse node N)")
        ->required();
    graph_build->add_option("--out", graph_out, "output graph JSON");

    // ---- shapes gen ----
    auto* shapes_cmd = app.add_subcommand("shapes", "synthetic dataset operations");
    shapes_cmd->require_subcommand(1);
    auto* shapes_gen = shapes_cmd->add_subcommand("gen", "generate a shapes dataset");
    std::string shapes_out = "shapes";
    int shapes_count = 1000, shapes_size = 64;
    std::uint64_t shapes_seed = 0;
    shapes_gen->add_option("--out", shapes_out, "output directory");
    shapes_gen->add_option("--count", shapes_count, "number of records");
    shapes_gen->add_option("--image-size", shapes_size, "canvas size (multiple of 32)");
    shapes_gen->add_option("--seed", shapes_seed, "generator seed");

    // ---- sg2seg train/predict ----
    auto* sg_cmd = app.add_subcommand("sg2seg", "layout model");
    sg_cmd->require_subcommand(1);
    auto* sg_train = sg_cmd->add_subcommand("train", "train the layout model");
    std::string sg_data, sg_ckpt = "sg2seg.ckpt";
    SG2SEGConfig sg_cfg;
    bool sg_random_features = false;
    sg_train->add_option("--data", sg_data, "dataset directory")->required();
    sg_train->add_option("--out", sg_ckpt, "checkpoint path");
    sg_train->add_option("--epochs", sg_cfg.epochs, "training epochs");
    sg_train->add_option("--batch", sg_cfg.batch_size, "scenes per optimizer step");
    sg_train->add_option("--lr", sg_cfg.lr, "learning rate");
    sg_train->add_option("--seed", sg_cfg.seed, "training seed");
    sg_train->add_option("--mask-channels", sg_cfg.mask_channels,
                         "six decoder widths (reference profile: 128 x6)");
    sg_train->add_flag("--random-features", sg_random_features,
                       "class-blind random node features (ablation baseline)");

    auto* sg_predict = sg_cmd->add_subcommand("predict", "predict a layout from a graph");
    std::string sgp_ckpt, sgp_graph, sgp_out = "layout.json", sgp_masks_dir;
    sg_predict->add_option("--ckpt", sgp_ckpt, "trained checkpoint")->required();
    sg_predict->add_option("--graph", sgp_graph, "graph JSON")->required();
    sg_predict->add_option("--out", sgp_out, "layout JSON output");
    sg_predict->add_option("--masks-out", sgp_masks_dir, "directory for per-object mask PNGs");

    // ---- diffuse train/sample ----
    auto* diff_cmd = app.add_subcommand("diffuse", "diffusion model");
    diff_cmd->require_subcommand(1);
    auto* diff_train = diff_cmd->add_subcommand("train", "train the noise predictor");
    std::string dt_data, dt_ckpt = "diffusion.ckpt";
    EpsModelConfig eps_cfg;
    DiffusionTrainConfig dt_cfg;
    int dt_T = 1000;
    diff_train->add_option("--data", dt_data, "dataset directory")->required();
    diff_train->add_option("--out", dt_ckpt, "checkpoint path");
    diff_train->add_option("--steps", dt_cfg.steps, "optimizer steps");
    diff_train->add_option("--batch", dt_cfg.batch_size, "batch size");
    diff_train->add_option("--lr", dt_cfg.lr, "learning rate");
    diff_train->add_option("--seed", dt_cfg.seed, "training seed");
    diff_train->add_option("--base", eps_cfg.base, "base channel width");
    diff_train->add_option("--image-size", eps_cfg.image_size, "model resolution");
    diff_train->add_option("--T", dt_T, "schedule length");

    auto* diff_sample = diff_cmd->add_subcommand("sample", "unguided sampling");
    std::string ds_ckpt, ds_out = "sample.png";
    int ds_steps = 100, ds_T = 1000, ds_count = 1;
    std::uint64_t ds_seed = 0;
    diff_sample->add_option("--ckpt", ds_ckpt, "trained checkpoint")->required();
    diff_sample->add_option("--out", ds_out, "output PNG");
    diff_sample->add_option("--steps", ds_steps, "DDIM steps");
    diff_sample->add_option("--T", ds_T, "schedule length");
    diff_sample->add_option("--seed", ds_seed, "sampling seed");
    diff_sample->add_option("--count", ds_count, "number of samples in the grid");

    // ---- pipeline run/ablate ----
    auto* pipe_cmd = app.add_subcommand("pipeline", "end-to-end runs");
    pipe_cmd->require_subcommand(1);
    auto* pipe_run = pipe_cmd->add_subcommand("run", "graph to guided image");
    std::string pr_config;
    RunConfig run_cfg;
    bool pr_have_seed = false, pr_have_steps = false;
    std::uint64_t pr_seed = 0;
    int pr_steps = 0;
    std::string pr_output, pr_layout_source;
    pipe_run->add_option("--config", pr_config, "run config JSON");
    pipe_run->add_option("--output-dir", pr_output, "override output directory");
    pipe_run->add_option("--seed", pr_seed, "override seed")->each([&](const std::string&) {
        pr_have_seed = true;
    });
    pipe_run->add_option("--steps", pr_steps, "override DDIM steps")->each([&](const std::string&) {
        pr_have_steps = true;
    });
    pipe_run->add_option("--layout-source", pr_layout_source, "predicted | ground-truth");

    auto* pipe_ablate = pipe_cmd->add_subcommand("ablate", "guidance ablation grid");
    std::string pa_config, pa_out = "ablation.csv";
    std::vector<double> pa_lambdas;
    bool pa_include_unguided = false;
    pipe_ablate->add_option("--config", pa_config, "run config JSON")->required();
    pipe_ablate->add_option("--lambda", pa_lambdas, "augmented-box lambda values (repeatable)")
        ->required();
    pipe_ablate->add_option("--out", pa_out, "CSV output path");
    pipe_ablate->add_flag("--include-unguided", pa_include_unguided,
                          "add a no-guidance baseline row");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (graph_build->parsed()) {
        std::vector<MentionTriplet> triplets;
        for (const auto& a : triplet_args) triplets.push_back(parse_triplet(a));
        SceneGraph g = build_graph(triplets, ShapesConfig::vocab());
        auto violations = validate(g, ShapesConfig::vocab());
        if (!violations.empty()) throw ConfigError("graph invalid: " + violations.front());
        save_graph_json(resolve_output(graph_out), g, ShapesConfig::vocab());
        std::cout << "wrote " << resolve_output(graph_out) << " (" << g.nodes.size()
                  << " nodes, " << g.edges.size() << " edges)\n";
    } else if (shapes_gen->parsed()) {
        ShapesConfig cfg;
        cfg.image_size = shapes_size;
        cfg.seed = shapes_seed;
        auto records = generate_shapes(cfg, shapes_count);
        save_shapes_dataset(resolve_output(shapes_out), records, cfg);
        std::cout << "wrote " << shapes_count << " records to " << resolve_output(shapes_out)
                  << "\n";
    } else if (sg_train->parsed()) {
        Vocab vocab;
        auto records = load_dataset_dir(sg_data, &vocab);
        std::vector<SceneRecord> train, val;
        split_records(sg_data, records, train, val);
        sg_cfg.semantic_node_features = !sg_random_features;
        SG2SEGModel model(sg_cfg, static_cast<int>(vocab.relationship_classes.size()));
        std::vector<Tensor> prototypes;
        for (std::size_t k = 0; k < vocab.object_classes.size(); ++k)
            prototypes.push_back(shapes::prototype_patch(static_cast<int>(k)));
        ToyEmbedder embedder(vocab.object_classes, std::move(prototypes));
        train_sg2seg(model, train, val, vocab, embedder, [](const EpochMetrics& m) {
            std::cout << "epoch " << m.epoch << " loss " << m.train_loss << " box-l1 "
                      << m.val_box_l1 << " mask-iou " << m.val_mask_iou << "\n";
        });
        model.save(resolve_output(sg_ckpt));
        std::cout << "saved " << resolve_output(sg_ckpt) << "\n";
    } else if (sg_predict->parsed()) {
        auto [graph, vocab] = load_graph_json(sgp_graph);
        SG2SEGModel model = SG2SEGModel::load(sgp_ckpt);
        std::vector<Tensor> prototypes;
        for (std::size_t k = 0; k < vocab.object_classes.size(); ++k)
            prototypes.push_back(shapes::prototype_patch(static_cast<int>(k)));
        ToyEmbedder embedder(vocab.object_classes, std::move(prototypes));
        Layout layout = model.predict(graph, semantic_node_features(graph, vocab, embedder));
        nlohmann::json out;
        out["objects"] = nlohmann::json::array();
        for (std::size_t k = 0; k < layout.boxes.size(); ++k) {
            const BBox& b = layout.boxes[k];
            out["objects"].push_back({{"class", vocab.object_classes[layout.classes[k]]},
                                      {"class_index", layout.classes[k]},
                                      {"box", {b.x0, b.y0, b.x1, b.y1}}});
        }
        std::ofstream f(resolve_output(sgp_out));
        if (!f) throw IoError("cannot write " + resolve_output(sgp_out));
        f << out.dump(2) << "\n";
        if (!sgp_masks_dir.empty()) {
            fs::create_directories(resolve_output(sgp_masks_dir));
            for (std::size_t k = 0; k < layout.masks.size(); ++k) {
                Tensor rgb({3, kMaskSize, kMaskSize});
                for (int c = 0; c < 3; ++c)
                    for (std::size_t i = 0; i < layout.masks[k].grid.size(); ++i)
                        rgb.data[c * layout.masks[k].grid.size() + i] =
                            layout.masks[k].grid.data[i];
                write_png((fs::path(resolve_output(sgp_masks_dir)) /
                           ("mask_" + std::to_string(k) + ".png"))
                              .string(),
                          tensor_to_image(rgb));
            }
        }
        std::cout << "wrote " << resolve_output(sgp_out) << "\n";
    } else if (diff_train->parsed()) {
        Vocab vocab;
        auto records = load_dataset_dir(dt_data, &vocab);
        std::vector<Tensor> images;
        for (const auto& r : records) images.push_back(r.image);
        if (!images.empty()) {
            eps_cfg.image_size = images[0].shape[1];
            eps_cfg.channels = images[0].shape[0];
        }
        EpsModel model(eps_cfg);
        NoiseSchedule sched = NoiseSchedule::linear(dt_T);
        train_diffusion(model, images, sched, dt_cfg, [](int step, double loss) {
            std::cout << "step " << step << " loss " << loss << "\n";
        });
        model.save(resolve_output(dt_ckpt));
        std::cout << "saved " << resolve_output(dt_ckpt) << "\n";
    } else if (diff_sample->parsed()) {
        EpsModel model = EpsModel::load(ds_ckpt);
        NoiseSchedule sched = NoiseSchedule::linear(ds_T);
        std::vector<Tensor> images;
        std::vector<std::string> captions;
        for (int i = 0; i < ds_count; ++i) {
            SampleConfig sc;
            sc.steps = ds_steps;
            sc.seed = mix_seed(ds_seed, 0x5eed, static_cast<std::uint64_t>(i));
            images.push_back(sample(model, sched, sc));
            captions.push_back("seed " + std::to_string(i));
        }
        write_png(resolve_output(ds_out), render_grid(images, captions));
        std::cout << "wrote " << resolve_output(ds_out) << "\n";
    } else if (pipe_run->parsed()) {
        if (!pr_config.empty()) {
            std::ifstream f(pr_config);
            if (!f) throw CheckpointMissingError("config not found: " + pr_config);
            run_cfg = RunConfig::from_json(nlohmann::json::parse(f));
        }
        if (!pr_output.empty()) run_cfg.output_dir = pr_output;
        if (pr_have_seed) run_cfg.seed = pr_seed;
        if (pr_have_steps) run_cfg.steps = pr_steps;
        if (!pr_layout_source.empty())
            run_cfg.layout_source = layout_source_from_string(pr_layout_source);
        run_cfg.output_dir = resolve_output(run_cfg.output_dir);
        RunReport report = run_pipeline(run_cfg);
        std::cout << "report: " << report.report_path << "\n";
    } else if (pipe_ablate->parsed()) {
        std::ifstream f(pa_config);
        if (!f) throw CheckpointMissingError("config not found: " + pa_config);
        RunConfig cfg = RunConfig::from_json(nlohmann::json::parse(f));
        std::vector<AblationCell> cells;
        for (double l : pa_lambdas) {
            AblationCell cell;
            cell.spec = cfg.guidance;
            cell.spec.lambda = l;
            cell.name = "lambda=" + std::to_string(l);
            cells.push_back(cell);
        }
        if (pa_include_unguided) {
            AblationCell cell;
            cell.spec = cfg.guidance;
            cell.spec.enable_text = cell.spec.enable_box = cell.spec.enable_seg = false;
            cell.name = "unguided";
            cells.push_back(cell);
        }
        std::string csv = ablate(cfg, cells);
        std::ofstream out(resolve_output(pa_out));
        if (!out) throw IoError("cannot write " + resolve_output(pa_out));
        out << csv;
        std::cout << csv;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const SchemaError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const CheckpointMissingError& e) {
        std::cerr << "missing artifact: " << e.what() << "\n";
        return 3;
    } catch (const MissingImageError& e) {
        std::cerr << "missing artifact: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
}

#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>
#include <sgdiff/sgdiff.hpp>
#include <sstream>

using namespace sgdiff;
namespace fs = std::filesystem;

TEST_CASE("shape membership geometry") {
    // circle: center in, corner out
    CHECK(shapes::inside_shape(0, 0.5, 0.5));
    CHECK_FALSE(shapes::inside_shape(0, 0.02, 0.02));
    // square fills the box
    CHECK(shapes::inside_shape(1, 0.01, 0.99));
    // triangle: apex top-center, base corners in, top corners out
    CHECK(shapes::inside_shape(2, 0.5, 0.05));
    CHECK(shapes::inside_shape(2, 0.05, 0.95));
    CHECK_FALSE(shapes::inside_shape(2, 0.05, 0.05));
    // star adds the flipped triangle
    CHECK(shapes::inside_shape(3, 0.5, 0.95));
    CHECK(shapes::inside_shape(3, 0.5, 0.05));
    CHECK_FALSE(shapes::inside_shape(3, 0.02, 0.5));
    CHECK_THROWS_AS(shapes::inside_shape(9, 0.5, 0.5), UnknownClassError);
}

TEST_CASE("prototype patches render class colors on background") {
    for (int k = 0; k < 4; ++k) {
        Tensor p = shapes::prototype_patch(k);
        REQUIRE(p.shape == std::vector<int>{3, 64, 64});
        const auto& color = ShapesConfig::class_colors()[k];
        bool has_color = false, has_bg = false;
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) {
                if (p.at(0, y, x) == color[0] && p.at(1, y, x) == color[1] &&
                    p.at(2, y, x) == color[2])
                    has_color = true;
                if (p.at(0, y, x) == ShapesConfig::background) has_bg = true;
            }
        CHECK(has_color);
        CHECK(has_bg);
    }
}

TEST_CASE("membership and mask cropping agree") {
    BBox box{0.25, 0.25, 0.75, 0.75};
    auto member = shapes::render_membership(0, box, 64, 64);
    Tensor mask = shapes::membership_to_mask(member, box, 64, 64);
    REQUIRE(mask.shape == std::vector<int>{1, kMaskSize, kMaskSize});
    for (double v : mask.data) CHECK((v == 0.0 || v == 1.0));
    // mask center matches the canvas pixel at the box center
    auto p = shapes::to_pixels(box, 64, 64);
    CHECK(mask.at(0, 32, 32) ==
          static_cast<double>(member[static_cast<std::size_t>(p.y0 + 16) * 64 + (p.x0 + 16)]));
    // the cropped circle touches the mask borders
    double border = 0;
    for (int i = 0; i < kMaskSize; ++i) border += mask.at(0, kMaskSize / 2, i);
    CHECK(border > 0);
}

TEST_CASE("geometric relationships follow the documented priority") {
    const Vocab& v = ShapesConfig::vocab();
    auto rel = [&](const SceneGraph::Edge& e) { return v.relationship_classes[e.relationship_index]; };

    // containment wins over everything
    auto edges = derive_geometric_edges({{0.4, 0.4, 0.6, 0.6}, {0.1, 0.1, 0.9, 0.9}}, v);
    REQUIRE(edges.size() == 1);
    CHECK(rel(edges[0]) == "inside");
    CHECK(edges[0].src == 0);
    CHECK(edges[0].dst == 1);

    edges = derive_geometric_edges({{0.0, 0.2, 0.3, 0.6}, {0.6, 0.2, 0.9, 0.6}}, v);
    REQUIRE(edges.size() == 1);
    CHECK(rel(edges[0]) == "left-of");

    edges = derive_geometric_edges({{0.2, 0.0, 0.6, 0.3}, {0.2, 0.6, 0.6, 0.9}}, v);
    REQUIRE(edges.size() == 1);
    CHECK(rel(edges[0]) == "above");
    CHECK(edges[0].src == 0);

    // centers within the 0.1 threshold on both axes
    edges = derive_geometric_edges({{0.30, 0.30, 0.50, 0.50}, {0.35, 0.35, 0.55, 0.55}}, v);
    REQUIRE(edges.size() == 1);
    CHECK(rel(edges[0]) == "beside");

    // one edge per unordered pair
    edges = derive_geometric_edges(
        {{0.0, 0.0, 0.2, 0.2}, {0.4, 0.4, 0.6, 0.6}, {0.7, 0.7, 0.9, 0.9}}, v);
    CHECK(edges.size() == 3);
}

TEST_CASE("shapes generator invariants") {
    ShapesConfig cfg;
    cfg.seed = 11;
    auto records = generate_shapes(cfg, 12);
    REQUIRE(records.size() == 12);
    for (const auto& rec : records) {
        std::size_t n = rec.graph.nodes.size();
        REQUIRE(n >= 1);
        REQUIRE(n <= 4);
        CHECK(rec.boxes.size() == n);
        CHECK(rec.masks.size() == n);
        CHECK(rec.graph.edges.size() == n * (n - 1) / 2);
        CHECK(validate(rec.graph, ShapesConfig::vocab()).empty());
        for (const BBox& b : rec.boxes) CHECK(b.valid());
        REQUIRE(rec.seg.has_value());
        CHECK(rec.seg->height == cfg.image_size);
        CHECK(rec.seg->valid());
        CHECK_FALSE(rec.caption.empty());
        CHECK(rec.image.shape == std::vector<int>{3, cfg.image_size, cfg.image_size});
        for (double v : rec.image.data) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
    // deterministic per seed
    auto again = generate_shapes(cfg, 12);
    for (std::size_t i = 0; i < records.size(); ++i) {
        CHECK(records[i].image.data == again[i].image.data);
        CHECK(records[i].graph == again[i].graph);
    }
    CHECK_THROWS_AS(generate_shapes(cfg, 0), EmptyInputError);
    ShapesConfig bad = cfg;
    bad.image_size = 48;
    CHECK_THROWS_AS(generate_shapes(bad, 1), ConfigError);
}

TEST_CASE("stored segmentation equals the composed ground truth") {
    ShapesConfig cfg;
    cfg.seed = 13;
    cfg.min_objects = 2;
    cfg.max_objects = 4;
    for (const auto& rec : generate_shapes(cfg, 3)) {
        std::vector<int> classes;
        for (const auto& node : rec.graph.nodes) classes.push_back(node.class_index);
        SegMap composed = compose_segmentation(rec.boxes, rec.masks, classes, 4, cfg.image_size,
                                               cfg.image_size);
        std::size_t mismatches = 0;
        for (std::size_t i = 0; i < composed.labels.size(); ++i)
            if (composed.labels[i] != rec.seg->labels[i]) ++mismatches;
        // nearest-resampled masks can disagree along shape boundaries only
        CHECK(mismatches <= composed.labels.size() / 50);
    }
}

TEST_CASE("dataset save/load round trip") {
    ShapesConfig cfg;
    cfg.seed = 17;
    cfg.min_objects = 2;
    cfg.max_objects = 3;
    auto records = generate_shapes(cfg, 5);
    auto dir = (fs::temp_directory_path() / "sgdiff_ds_rt").string();
    fs::remove_all(dir);
    save_shapes_dataset(dir, records, cfg);

    // manifest carries the 80/20 split
    nlohmann::json manifest;
    std::ifstream(dir + "/manifest.json") >> manifest;
    CHECK(manifest.at("count") == 5);
    CHECK(manifest.at("splits").at("train").size() == 4);
    CHECK(manifest.at("splits").at("val").size() == 1);

    Vocab vocab;
    std::ostringstream warn;
    auto loaded = load_coco_like(dir + "/annotations.json", dir, &vocab, warn);
    CHECK(warn.str().empty());
    REQUIRE(loaded.size() == records.size());
    CHECK(vocab.object_classes == ShapesConfig::vocab().object_classes);
    for (std::size_t r = 0; r < records.size(); ++r) {
        const auto& a = records[r];
        const auto& b = loaded[r];
        REQUIRE(a.boxes.size() == b.boxes.size());
        for (std::size_t k = 0; k < a.boxes.size(); ++k) {
            CHECK(b.boxes[k].x0 == Catch::Approx(a.boxes[k].x0).margin(1e-9));
            CHECK(b.boxes[k].y1 == Catch::Approx(a.boxes[k].y1).margin(1e-9));
            CHECK(b.graph.nodes[k].class_index == a.graph.nodes[k].class_index);
            CHECK(b.masks[k].data == a.masks[k].data);
        }
        CHECK(b.graph.edges == a.graph.edges);
        CHECK(b.caption == a.caption);
        REQUIRE(b.seg.has_value());
        CHECK(b.seg->labels == a.seg->labels);
        // 8-bit image round trip
        for (std::size_t i = 0; i < a.image.size(); ++i)
            CHECK(b.image.data[i] == Catch::Approx(a.image.data[i]).margin(1.0 / 255.0));
    }
    fs::remove_all(dir);
}

TEST_CASE("malformed annotations are skipped with a warning") {
    auto dir = (fs::temp_directory_path() / "sgdiff_ds_bad").string();
    fs::remove_all(dir);
    fs::create_directories(fs::path(dir) / "images");
    Image8 img;
    img.width = 64;
    img.height = 64;
    img.channels = 3;
    img.pixels.assign(64 * 64 * 3, 128);
    write_png(dir + "/images/00000.png", img);

    nlohmann::json ann;
    ann["categories"] = {{{"id", 0}, {"name", "circle"}}};
    ann["images"] = {{{"id", 0},
                      {"file_name", "images/00000.png"},
                      {"width", 64},
                      {"height", 64}}};
    ann["annotations"] = {
        {{"image_id", 0}, {"category_id", 0}, {"bbox", {10.0, 10.0, 20.0, 20.0}}},
        {{"image_id", 0}, {"category_id", 0}, {"bbox", {50.0, 10.0, -20.0, 20.0}}},
        {{"image_id", 0}, {"category_id", 7}, {"bbox", {5.0, 40.0, 10.0, 10.0}}}};
    std::ofstream(dir + "/annotations.json") << ann.dump();

    std::ostringstream warn;
    auto loaded = load_coco_like(dir + "/annotations.json", dir, nullptr, warn);
    REQUIRE(loaded.size() == 1);
    CHECK(loaded[0].boxes.size() == 1);
    CHECK(loaded[0].masks.empty());
    CHECK_FALSE(loaded[0].seg.has_value());
    CHECK(warn.str().find("malformed box") != std::string::npos);
    CHECK(warn.str().find("unknown category") != std::string::npos);
    fs::remove_all(dir);

    CHECK_THROWS_AS(load_coco_like("/nonexistent/ann.json", "/nonexistent"), IoError);
}

TEST_CASE("missing image files raise an error") {
    auto dir = (fs::temp_directory_path() / "sgdiff_ds_noimg").string();
    fs::remove_all(dir);
    fs::create_directories(dir);
    nlohmann::json ann;
    ann["categories"] = {{{"id", 0}, {"name", "circle"}}};
    ann["images"] = {{{"id", 0}, {"file_name", "images/gone.png"}, {"width", 64}, {"height", 64}}};
    ann["annotations"] = nlohmann::json::array();
    std::ofstream(dir + "/annotations.json") << ann.dump();
    CHECK_THROWS_AS(load_coco_like(dir + "/annotations.json", dir), MissingImageError);
    fs::remove_all(dir);
}

#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <sgdiff/sgdiff.hpp>

using namespace sgdiff;

namespace {

Vocab farm_vocab() { return Vocab{{"sheep", "cat", "mat", "dog"}, {"by", "on", "near"}}; }

}  // namespace

TEST_CASE("repeated class mentions are distinct nodes") {
    SceneGraph g = build_graph({Triplet{"sheep", "by", "sheep"}}, farm_vocab());
    REQUIRE(g.nodes.size() == 2);
    CHECK(g.nodes[0].class_index == 0);
    CHECK(g.nodes[1].class_index == 0);
    REQUIRE(g.edges.size() == 1);
    CHECK(g.edges[0].src == 0);
    CHECK(g.edges[0].dst == 1);
}

TEST_CASE("minimal two-node graph") {
    SceneGraph g = build_graph({Triplet{"cat", "on", "mat"}}, farm_vocab());
    REQUIRE(g.nodes.size() == 2);
    CHECK(g.nodes[0].class_index == 1);
    CHECK(g.nodes[1].class_index == 2);
    REQUIRE(g.edges.size() == 1);
    CHECK(g.edges[0] == SceneGraph::Edge{0, 1, 1});
}

TEST_CASE("three triplets sharing one subject mention") {
    std::vector<MentionTriplet> ts(3);
    ts[0].triplet = {"sheep", "by", "cat"};
    ts[1].triplet = {"sheep", "on", "mat"};
    ts[1].subject_mention = 0;
    ts[2].triplet = {"sheep", "near", "dog"};
    ts[2].subject_mention = 0;
    SceneGraph g = build_graph(ts, farm_vocab());
    REQUIRE(g.nodes.size() == 4);
    REQUIRE(g.edges.size() == 3);
    for (const auto& e : g.edges) CHECK(e.src == 0);
}

TEST_CASE("build_graph errors") {
    CHECK_THROWS_AS(build_graph(std::vector<Triplet>{}, farm_vocab()), EmptyInputError);
    CHECK_THROWS_AS(build_graph({Triplet{"emu", "by", "cat"}}, farm_vocab()), UnknownClassError);
    CHECK_THROWS_AS(build_graph({Triplet{"cat", "under", "mat"}}, farm_vocab()),
                    UnknownClassError);
}

TEST_CASE("build_graph is deterministic") {
    std::vector<Triplet> ts{{"cat", "on", "mat"}, {"dog", "near", "sheep"}};
    CHECK(build_graph(ts, farm_vocab()) == build_graph(ts, farm_vocab()));
}

TEST_CASE("node count equals mentions, edge count equals triplets") {
    RngStream rng(99);
    Vocab v = farm_vocab();
    for (int trial = 0; trial < 50; ++trial) {
        int m = rng.uniform_int(1, 6);
        std::vector<Triplet> ts;
        for (int i = 0; i < m; ++i)
            ts.push_back({v.object_classes[rng.uniform_int(0, 3)],
                          v.relationship_classes[rng.uniform_int(0, 2)],
                          v.object_classes[rng.uniform_int(0, 3)]});
        SceneGraph g = build_graph(ts, v);
        CHECK(g.nodes.size() == 2 * ts.size());  // fresh mention per slot
        CHECK(g.edges.size() == ts.size());
        CHECK(validate(g, v).empty());
    }
}

TEST_CASE("validate reports violations") {
    Vocab v = farm_vocab();
    SceneGraph g = build_graph({Triplet{"cat", "on", "mat"}}, v);
    CHECK(validate(g, v).empty());

    SceneGraph loop = g;
    loop.edges[0].dst = 0;
    auto violations = validate(loop, v);
    REQUIRE_FALSE(violations.empty());
    CHECK(violations[0].find("self_loop at edge 0") != std::string::npos);

    SceneGraph bad_class = g;
    bad_class.nodes[1].class_index = 42;
    violations = validate(bad_class, v);
    REQUIRE_FALSE(violations.empty());
    CHECK(violations[0].find("node 1") != std::string::npos);
}

TEST_CASE("graph json round trip") {
    Vocab v = farm_vocab();
    SceneGraph g = build_graph({Triplet{"cat", "on", "mat"}, Triplet{"dog", "near", "sheep"}}, v);
    auto path = std::filesystem::temp_directory_path() / "sgdiff_graph_rt.json";
    save_graph_json(path.string(), g, v);
    auto [g2, v2] = load_graph_json(path.string());
    CHECK(g2 == g);
    CHECK(v2 == v);
    std::filesystem::remove(path);
}

TEST_CASE("random 50-node graph survives the round trip") {
    Vocab v;
    for (int i = 0; i < 25; ++i) v.object_classes.push_back("class" + std::to_string(i));
    for (int i = 0; i < 5; ++i) v.relationship_classes.push_back("rel" + std::to_string(i));
    RngStream rng(5);
    std::vector<Triplet> ts;
    for (int i = 0; i < 25; ++i)
        ts.push_back({v.object_classes[rng.uniform_int(0, 24)],
                      v.relationship_classes[rng.uniform_int(0, 4)],
                      v.object_classes[rng.uniform_int(0, 24)]});
    SceneGraph g = build_graph(ts, v);
    REQUIRE(g.nodes.size() == 50);
    auto path = std::filesystem::temp_directory_path() / "sgdiff_graph_rt50.json";
    save_graph_json(path.string(), g, v);
    auto [g2, v2] = load_graph_json(path.string());
    CHECK(g2 == g);
    CHECK(v2 == v);
    std::filesystem::remove(path);
}

TEST_CASE("schema violations are rejected with context") {
    nlohmann::json j;
    j["vocab"] = {{"objects", {"a", "b"}}, {"relations", {"r"}}};
    j["nodes"] = {{{"id", 0}, {"class", "a"}}, {{"id", 1}, {"class", "b"}}};
    j["edges"] = {{{"src", 0}, {"rel", "r"}, {"dst", 5}}};
    CHECK_THROWS_AS(graph_from_json(j), SchemaError);

    nlohmann::json dup = j;
    dup["vocab"]["objects"] = {"a", "a"};
    CHECK_THROWS_AS(graph_from_json(dup), SchemaError);

    CHECK_THROWS_AS(load_graph_json("/nonexistent/graph.json"), IoError);
}

TEST_CASE("mention id cannot reference a later node") {
    std::vector<MentionTriplet> ts(1);
    ts[0].triplet = {"cat", "on", "mat"};
    ts[0].subject_mention = 7;
    CHECK_THROWS_AS(build_graph(ts, farm_vocab()), SchemaError);
}

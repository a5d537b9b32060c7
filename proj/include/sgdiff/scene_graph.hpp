#pragma once

#include <algorithm>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgdiff/errors.hpp"

namespace sgdiff {

/// Object and relationship class name tables. Indices are stable across
/// save/load; names must be unique within each list.
struct Vocab {
    std::vector<std::string> object_classes;
    std::vector<std::string> relationship_classes;

    std::optional<int> object_index(const std::string& name) const {
        auto it = std::find(object_classes.begin(), object_classes.end(), name);
        if (it == object_classes.end()) return std::nullopt;
        return static_cast<int>(it - object_classes.begin());
    }
    std::optional<int> relationship_index(const std::string& name) const {
        auto it = std::find(relationship_classes.begin(), relationship_classes.end(), name);
        if (it == relationship_classes.end()) return std::nullopt;
        return static_cast<int>(it - relationship_classes.begin());
    }

    bool operator==(const Vocab&) const = default;
};

/// One (subject, predicate, object) statement.
struct Triplet {
    std::string subject_class;
    std::string predicate;
    std::string object_class;
};

struct SceneGraph {
    struct Node {
        int id = 0;
        int class_index = 0;
        bool operator==(const Node&) const = default;
    };
    struct Edge {
        int src = 0;
        int relationship_index = 0;
        int dst = 0;
        bool operator==(const Edge&) const = default;
    };
    std::vector<Node> nodes;
    std::vector<Edge> edges;

    bool operator==(const SceneGraph&) const = default;
};

/// Builds a graph from triplets. Every class mention becomes its own node:
/// repeated mentions of the same class within one prompt are distinct
/// instances ("a sheep by another sheep" -> two sheep nodes). Mentions are
/// numbered in order of first appearance, subject before object per triplet.
inline SceneGraph build_graph(const std::vector<Triplet>& triplets, const Vocab& vocab) {
    if (triplets.empty()) throw EmptyInputError("build_graph: no triplets");
    SceneGraph g;
    auto add_node = [&](const std::string& name) {
        auto idx = vocab.object_index(name);
        if (!idx) throw UnknownClassError("build_graph: unknown object class '" + name + "'");
        int id = static_cast<int>(g.nodes.size());
        g.nodes.push_back({id, *idx});
        return id;
    };
    for (const Triplet& t : triplets) {
        auto rel = vocab.relationship_index(t.predicate);
        if (!rel) throw UnknownClassError("build_graph: unknown predicate '" + t.predicate + "'");
        int src = add_node(t.subject_class);
        int dst = add_node(t.object_class);
        g.edges.push_back({src, *rel, dst});
    }
    return g;
}

/// Variant with explicit subject/object mention ids: triplets that reuse a
/// mention (e.g. three statements about one subject) refer to it by id.
/// mention id -1 means "fresh mention".
struct MentionTriplet {
    Triplet triplet;
    int subject_mention = -1;
    int object_mention = -1;
};

inline SceneGraph build_graph(const std::vector<MentionTriplet>& triplets, const Vocab& vocab) {
    if (triplets.empty()) throw EmptyInputError("build_graph: no triplets");
    SceneGraph g;
    auto resolve = [&](const std::string& name, int mention) {
        if (mention >= 0) {
            if (mention >= static_cast<int>(g.nodes.size()))
                throw SchemaError("build_graph: mention id refers to a later node");
            return mention;
        }
        auto idx = vocab.object_index(name);
        if (!idx) throw UnknownClassError("build_graph: unknown object class '" + name + "'");
        int id = static_cast<int>(g.nodes.size());
        g.nodes.push_back({id, *idx});
        return id;
    };
    for (const MentionTriplet& mt : triplets) {
        auto rel = vocab.relationship_index(mt.triplet.predicate);
        if (!rel)
            throw UnknownClassError("build_graph: unknown predicate '" + mt.triplet.predicate + "'");
        int src = resolve(mt.triplet.subject_class, mt.subject_mention);
        int dst = resolve(mt.triplet.object_class, mt.object_mention);
        g.edges.push_back({src, *rel, dst});
    }
    return g;
}

/// Returns human-readable invariant violations; empty list means valid.
inline std::vector<std::string> validate(const SceneGraph& g, const Vocab& vocab) {
    std::vector<std::string> out;
    if (g.nodes.empty()) out.push_back("graph has no nodes");
    int n = static_cast<int>(g.nodes.size());
    for (int i = 0; i < n; ++i) {
        if (g.nodes[i].id != i)
            out.push_back("node ids not contiguous at node " + std::to_string(i));
        if (g.nodes[i].class_index < 0 ||
            g.nodes[i].class_index >= static_cast<int>(vocab.object_classes.size()))
            out.push_back("class index out of vocab range at node " + std::to_string(i));
    }
    for (std::size_t e = 0; e < g.edges.size(); ++e) {
        const auto& edge = g.edges[e];
        if (edge.src < 0 || edge.src >= n || edge.dst < 0 || edge.dst >= n)
            out.push_back("edge endpoint out of range at edge " + std::to_string(e));
        else if (edge.src == edge.dst)
            out.push_back("self_loop at edge " + std::to_string(e));
        if (edge.relationship_index < 0 ||
            edge.relationship_index >= static_cast<int>(vocab.relationship_classes.size()))
            out.push_back("relationship index out of vocab range at edge " + std::to_string(e));
    }
    return out;
}

inline nlohmann::json graph_to_json(const SceneGraph& g, const Vocab& vocab) {
    nlohmann::json j;
    j["vocab"]["objects"] = vocab.object_classes;
    j["vocab"]["relations"] = vocab.relationship_classes;
    j["nodes"] = nlohmann::json::array();
    for (const auto& n : g.nodes)
        j["nodes"].push_back({{"id", n.id}, {"class", vocab.object_classes.at(n.class_index)}});
    j["edges"] = nlohmann::json::array();
    for (const auto& e : g.edges)
        j["edges"].push_back({{"src", e.src},
                              {"rel", vocab.relationship_classes.at(e.relationship_index)},
                              {"dst", e.dst}});
    return j;
}

inline std::pair<SceneGraph, Vocab> graph_from_json(const nlohmann::json& j) {
    Vocab vocab;
    try {
        vocab.object_classes = j.at("vocab").at("objects").get<std::vector<std::string>>();
        vocab.relationship_classes = j.at("vocab").at("relations").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("graph json: vocab: ") + e.what());
    }
    for (const auto& list : {vocab.object_classes, vocab.relationship_classes}) {
        std::vector<std::string> sorted = list;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw SchemaError("graph json: vocab: duplicate class name");
    }
    SceneGraph g;
    try {
        for (const auto& nj : j.at("nodes")) {
            SceneGraph::Node n;
            n.id = nj.at("id").get<int>();
            std::string cls = nj.at("class").get<std::string>();
            auto idx = vocab.object_index(cls);
            if (!idx) throw SchemaError("graph json: nodes: class '" + cls + "' not in vocab");
            n.class_index = *idx;
            g.nodes.push_back(n);
        }
        for (const auto& ej : j.at("edges")) {
            SceneGraph::Edge e;
            e.src = ej.at("src").get<int>();
            e.dst = ej.at("dst").get<int>();
            std::string rel = ej.at("rel").get<std::string>();
            auto idx = vocab.relationship_index(rel);
            if (!idx) throw SchemaError("graph json: edges: relation '" + rel + "' not in vocab");
            e.relationship_index = *idx;
            g.edges.push_back(e);
        }
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("graph json: ") + e.what());
    }
    auto violations = validate(g, vocab);
    if (!violations.empty()) throw SchemaError("graph json: " + violations.front());
    return {g, vocab};
}

inline void save_graph_json(const std::string& path, const SceneGraph& g, const Vocab& vocab) {
    std::ofstream f(path);
    if (!f) throw IoError("save_graph_json: cannot open " + path);
    f << graph_to_json(g, vocab).dump(2) << "\n";
    if (!f) throw IoError("save_graph_json: write failed " + path);
}

inline std::pair<SceneGraph, Vocab> load_graph_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("load_graph_json: cannot open " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("load_graph_json: ") + e.what());
    }
    return graph_from_json(j);
}

}  // namespace sgdiff

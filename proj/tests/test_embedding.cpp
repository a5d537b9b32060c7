#include <catch2/catch_amalgamated.hpp>
#include <sgdiff/sgdiff.hpp>

using namespace sgdiff;

namespace {

ToyEmbedder make_toy() {
    const Vocab& v = ShapesConfig::vocab();
    std::vector<Tensor> protos;
    for (std::size_t k = 0; k < v.object_classes.size(); ++k)
        protos.push_back(shapes::prototype_patch(static_cast<int>(k)));
    return ToyEmbedder(v.object_classes, std::move(protos));
}

Tensor random_image(int h, int w, std::uint64_t seed) {
    Tensor t({3, h, w});
    RngStream rng(seed);
    for (double& v : t.data) v = rng.uniform();
    return t;
}

}  // namespace

TEST_CASE("embed_text is deterministic and unit norm") {
    ToyEmbedder toy = make_toy();
    Embedding a = toy.embed_text("a photo of a circle");
    Embedding b = toy.embed_text("a photo of a circle");
    CHECK(a.vector == b.vector);
    RngStream rng(77);
    for (int i = 0; i < 100; ++i) {
        std::string s = "random-string-" + std::to_string(rng.next_u64());
        CHECK(toy.embed_text(s).norm() == Catch::Approx(1.0).margin(1e-5));
    }
    CHECK_THROWS_AS(toy.embed_text(""), EmptyInputError);
}

TEST_CASE("prompt template is applied literally") {
    EmbedderProfile p;
    CHECK(p.apply_template("sheep") == "a photo of an sheep");
    CHECK_THROWS_AS(EmbedderProfile::check_template("no placeholder"), ConfigError);
    CHECK_THROWS_AS(EmbedderProfile::check_template("[obj] and [obj]"), ConfigError);
}

TEST_CASE("all-zeros vs all-ones images embed differently") {
    ToyEmbedder toy = make_toy();
    Embedding a = toy.embed_image(Tensor({3, 16, 16}));
    Embedding b = toy.embed_image(Tensor({3, 16, 16}, 1.0));
    CHECK(a.norm() == Catch::Approx(1.0).margin(1e-5));
    CHECK(b.norm() == Catch::Approx(1.0).margin(1e-5));
    CHECK(similarity(a, b) < 1.0 - 1e-6);
}

TEST_CASE("embed_image shape and finiteness checks") {
    ToyEmbedder toy = make_toy();
    CHECK_THROWS_AS(toy.embed_image(Tensor({1, 16, 16})), ShapeError);
    CHECK_THROWS_AS(toy.embed_image(Tensor({3, 4, 4})), ShapeError);
    Tensor bad({3, 16, 16});
    bad.data[0] = std::nan("");
    CHECK_THROWS_AS(toy.embed_image(bad), ShapeError);
}

TEST_CASE("prototype patches match their own class prompt") {
    ToyEmbedder toy = make_toy();
    const Vocab& v = ShapesConfig::vocab();
    for (std::size_t k = 0; k < v.object_classes.size(); ++k) {
        Embedding img = toy.embed_image(shapes::prototype_patch(static_cast<int>(k)));
        Embedding txt = toy.embed_text("a photo of an " + v.object_classes[k]);
        CHECK(similarity(img, txt) >= 0.99);
    }
}

TEST_CASE("class argmax identification") {
    ToyEmbedder toy = make_toy();
    const Vocab& v = ShapesConfig::vocab();
    for (std::size_t k = 0; k < v.object_classes.size(); ++k) {
        Embedding img = toy.embed_image(shapes::prototype_patch(static_cast<int>(k)));
        std::size_t best = 0;
        double best_sim = -2;
        for (std::size_t j = 0; j < v.object_classes.size(); ++j) {
            double s = similarity(img, toy.embed_text("a photo of an " + v.object_classes[j]));
            if (s > best_sim) {
                best_sim = s;
                best = j;
            }
        }
        CHECK(best == k);
    }
}

TEST_CASE("similarity properties and errors") {
    ToyEmbedder toy = make_toy();
    Embedding a = toy.embed_text("circle");
    CHECK(similarity(a, a) == Catch::Approx(1.0));
    Embedding neg = a;
    for (double& v : neg.vector) v = -v;
    CHECK(similarity(a, neg) == Catch::Approx(-1.0));
    Embedding b = toy.embed_text("star");
    CHECK(similarity(a, b) == Catch::Approx(similarity(b, a)));

    Embedding short_vec = a;
    short_vec.vector.resize(10);
    CHECK_THROWS_AS(similarity(a, short_vec), DimensionMismatchError);
    Embedding other_space = b;
    other_space.space_tag = "other";
    CHECK_THROWS_AS(similarity(a, other_space), DimensionMismatchError);
}

TEST_CASE("image-embedding gradient matches finite differences") {
    ToyEmbedder toy = make_toy();
    RngStream rng(2024);
    for (int trial = 0; trial < 3; ++trial) {
        Tensor x = random_image(16, 16, 300 + trial);
        std::vector<double> upstream(512);
        for (double& v : upstream) v = rng.normal();
        Tensor g = toy.embed_image_backward(x, upstream);

        auto scalar = [&](const Tensor& img) {
            Embedding e = toy.embed_image(img);
            double s = 0;
            for (int d = 0; d < 512; ++d) s += upstream[d] * e.vector[d];
            return s;
        };
        const double h = 1e-3;
        double max_rel = 0;
        for (int probe = 0; probe < 40; ++probe) {
            std::size_t i = rng.next_u64() % x.size();
            Tensor xp = x, xm = x;
            xp.data[i] += h;
            xm.data[i] -= h;
            double fd = (scalar(xp) - scalar(xm)) / (2 * h);
            double denom = std::max({std::fabs(fd), std::fabs(g.data[i]), 1e-8});
            max_rel = std::max(max_rel, std::fabs(fd - g.data[i]) / denom);
        }
        CHECK(max_rel <= 1e-4);
    }
}

TEST_CASE("external embedder stub reports unavailable") {
    EmbedderProfile p;
    p.name = "external-clip";
    ExternalEmbedderStub stub(p, "/weights/clip.bin");
    CHECK_THROWS_AS(stub.embed_text("x"), EmbedderUnavailableError);
    CHECK_THROWS_AS(stub.embed_image(Tensor({3, 16, 16})), EmbedderUnavailableError);
}

TEST_CASE("profile json round trip") {
    EmbedderProfile p;
    p.name = "toy";
    p.dimension = 512;
    EmbedderProfile q = profile_from_json(profile_to_json(p));
    CHECK(q.name == p.name);
    CHECK(q.dimension == p.dimension);
    CHECK(q.prompt_template == p.prompt_template);
    nlohmann::json bad = profile_to_json(p);
    bad.erase("dimension");
    CHECK_THROWS_AS(profile_from_json(bad), SchemaError);
}

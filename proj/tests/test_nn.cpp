#include <catch2/catch_amalgamated.hpp>
#include <sgdiff/sgdiff.hpp>

using namespace sgdiff;
using nn::MatrixXd;

namespace {

Tensor random_tensor(std::vector<int> shape, std::uint64_t seed) {
    Tensor t(std::move(shape));
    RngStream rng(seed);
    for (double& v : t.data) v = rng.normal();
    return t;
}

double tensor_dot(const Tensor& a, const Tensor& b) { return dot(a, b); }

/// Central-difference check of d(sum(up .* f(x)))/dx against analytic grad.
template <typename Fwd>
double max_rel_err(const Tensor& x, const Tensor& analytic, const Tensor& upstream, Fwd f,
                   int probes, std::uint64_t seed, double h = 1e-5) {
    RngStream rng(seed);
    double worst = 0.0;
    for (int i = 0; i < probes; ++i) {
        std::size_t j = rng.next_u64() % x.size();
        Tensor xp = x, xm = x;
        xp.data[j] += h;
        xm.data[j] -= h;
        double fd = (tensor_dot(upstream, f(xp)) - tensor_dot(upstream, f(xm))) / (2 * h);
        double denom = std::max({std::fabs(fd), std::fabs(analytic.data[j]), 1e-6});
        worst = std::max(worst, std::fabs(fd - analytic.data[j]) / denom);
    }
    return worst;
}

}  // namespace

TEST_CASE("linear layer forward and gradients") {
    RngStream init(1);
    nn::Linear lin(5, 3, init);
    MatrixXd X = MatrixXd::Random(5, 4);
    MatrixXd Y = lin.forward(X);
    REQUIRE(Y.rows() == 3);
    REQUIRE(Y.cols() == 4);
    CHECK_THROWS_AS(lin.forward(MatrixXd::Random(4, 4)), ShapeError);

    MatrixXd gY = MatrixXd::Random(3, 4);
    std::fill(lin.gW.data.begin(), lin.gW.data.end(), 0.0);
    std::fill(lin.gb.data.begin(), lin.gb.data.end(), 0.0);
    MatrixXd gX = lin.backward(X, gY);

    double scalar0 = (gY.array() * lin.forward(X).array()).sum();
    const double h = 1e-6;
    RngStream rng(2);
    double worst = 0.0;
    // input gradient
    for (int probe = 0; probe < 20; ++probe) {
        int r = rng.uniform_int(0, 4), c = rng.uniform_int(0, 3);
        MatrixXd Xp = X, Xm = X;
        Xp(r, c) += h;
        Xm(r, c) -= h;
        double fd =
            ((gY.array() * lin.forward(Xp).array()).sum() - (gY.array() * lin.forward(Xm).array()).sum()) /
            (2 * h);
        worst = std::max(worst, std::fabs(fd - gX(r, c)) / std::max(std::fabs(fd), 1e-6));
    }
    // weight and bias gradients
    for (int probe = 0; probe < 20; ++probe) {
        std::size_t j = rng.next_u64() % lin.W.size();
        double keep = lin.W.data[j];
        lin.W.data[j] = keep + h;
        double up = (gY.array() * lin.forward(X).array()).sum();
        lin.W.data[j] = keep - h;
        double dn = (gY.array() * lin.forward(X).array()).sum();
        lin.W.data[j] = keep;
        double fd = (up - dn) / (2 * h);
        worst = std::max(worst, std::fabs(fd - lin.gW.data[j]) / std::max(std::fabs(fd), 1e-6));
    }
    for (int j = 0; j < 3; ++j) {
        double keep = lin.b.data[j];
        lin.b.data[j] = keep + h;
        double up = (gY.array() * lin.forward(X).array()).sum();
        lin.b.data[j] = keep - h;
        double dn = (gY.array() * lin.forward(X).array()).sum();
        lin.b.data[j] = keep;
        double fd = (up - dn) / (2 * h);
        worst = std::max(worst, std::fabs(fd - lin.gb.data[j]) / std::max(std::fabs(fd), 1e-6));
    }
    CHECK(worst <= 1e-4);
    (void)scalar0;
}

TEST_CASE("conv2d matches finite differences") {
    RngStream init(3);
    for (int stride : {1, 2}) {
        nn::Conv2d conv(2, 3, 3, stride, 1, init);
        Tensor x = random_tensor({2, 2, 6, 6}, 40 + stride);
        Tensor y = conv.forward(x);
        int expect = (6 + 2 - 3) / stride + 1;
        REQUIRE(y.shape == std::vector<int>{2, 3, expect, expect});

        Tensor gy = random_tensor(y.shape, 50 + stride);
        std::fill(conv.gW.data.begin(), conv.gW.data.end(), 0.0);
        std::fill(conv.gb.data.begin(), conv.gb.data.end(), 0.0);
        Tensor gx = conv.backward(x, gy);
        CHECK(max_rel_err(x, gx, gy, [&](const Tensor& t) { return conv.forward(t); }, 30,
                          60 + stride) <= 1e-4);

        // weight gradient
        RngStream rng(70 + stride);
        const double h = 1e-5;
        double worst = 0.0;
        for (int probe = 0; probe < 20; ++probe) {
            std::size_t j = rng.next_u64() % conv.W.size();
            double keep = conv.W.data[j];
            conv.W.data[j] = keep + h;
            double up = tensor_dot(gy, conv.forward(x));
            conv.W.data[j] = keep - h;
            double dn = tensor_dot(gy, conv.forward(x));
            conv.W.data[j] = keep;
            double fd = (up - dn) / (2 * h);
            worst = std::max(worst, std::fabs(fd - conv.gW.data[j]) / std::max(std::fabs(fd), 1e-6));
        }
        CHECK(worst <= 1e-4);
    }
    CHECK_THROWS_AS(nn::Conv2d(2, 3, 3, 1, 1, init).forward(Tensor({1, 3, 6, 6})), ShapeError);
}

TEST_CASE("batchnorm normalizes and back-propagates") {
    nn::BatchNorm2d bn(3);
    Tensor x = random_tensor({4, 3, 5, 5}, 80);
    for (double& v : x.data) v = v * 2.0 + 0.7;
    Tensor y = bn.forward(x, true);

    // per-channel output is standardized in training mode (gamma=1, beta=0)
    std::size_t plane = 25;
    for (int c = 0; c < 3; ++c) {
        double s = 0, s2 = 0;
        for (int n = 0; n < 4; ++n)
            for (std::size_t p = 0; p < plane; ++p) {
                double v = y.data[(static_cast<std::size_t>(n) * 3 + c) * plane + p];
                s += v;
                s2 += v * v;
            }
        double mean = s / 100.0, var = s2 / 100.0 - mean * mean;
        CHECK(mean == Catch::Approx(0.0).margin(1e-10));
        CHECK(var == Catch::Approx(1.0).margin(1e-3));
    }

    // eval mode uses running stats and is deterministic w.r.t. batch
    Tensor y_eval = bn.forward(x, false);
    CHECK(y_eval.finite());

    Tensor gy = random_tensor(y.shape, 81);
    std::fill(bn.ggamma.data.begin(), bn.ggamma.data.end(), 0.0);
    std::fill(bn.gbeta.data.begin(), bn.gbeta.data.end(), 0.0);
    bn.forward(x, true);  // refresh caches (running stats drift is irrelevant to grads)
    Tensor gx = bn.backward(gy);
    nn::BatchNorm2d probe_bn(3);
    CHECK(max_rel_err(x, gx, gy,
                      [&](const Tensor& t) { return probe_bn.forward(t, true); }, 40, 82,
                      1e-5) <= 1e-3);
}

TEST_CASE("upsample2 doubles and its backward sums") {
    Tensor x = random_tensor({1, 2, 3, 3}, 90);
    Tensor y = nn::upsample2(x);
    REQUIRE(y.shape == std::vector<int>{1, 2, 6, 6});
    CHECK(y.at(0, 1, 5, 4) == x.at(0, 1, 2, 2));
    Tensor gy = random_tensor(y.shape, 91);
    Tensor gx = nn::upsample2_backward(gy);
    CHECK(max_rel_err(x, gx, gy, [](const Tensor& t) { return nn::upsample2(t); }, 18, 92) <= 1e-4);
}

TEST_CASE("activation gradients match finite differences") {
    Tensor x = random_tensor({40}, 95);
    Tensor gy = random_tensor({40}, 96);

    CHECK(max_rel_err(x, nn::relu_t_backward(x, gy), gy,
                      [](const Tensor& t) { return nn::relu_t(t); }, 30, 97) <= 1e-4);
    CHECK(max_rel_err(x, nn::silu_t_backward(x, gy), gy,
                      [](const Tensor& t) { return nn::silu_t(t); }, 30, 98) <= 1e-4);
    Tensor y = nn::sigmoid_t(x);
    CHECK(max_rel_err(x, nn::sigmoid_t_backward(y, gy), gy,
                      [](const Tensor& t) { return nn::sigmoid_t(t); }, 30, 99) <= 1e-4);

    MatrixXd Xm = MatrixXd::Random(4, 4);
    MatrixXd G = MatrixXd::Ones(4, 4);
    MatrixXd gr = nn::relu_backward(Xm, G);
    for (int i = 0; i < 16; ++i)
        CHECK(gr.data()[i] == (Xm.data()[i] > 0.0 ? 1.0 : 0.0));
}

TEST_CASE("adam minimizes a convex quadratic") {
    Tensor w({4}), g({4});
    RngStream rng(101);
    for (double& v : w.data) v = rng.normal() * 2.0;
    Tensor target({4});
    target.data = {1.0, -2.0, 0.5, 3.0};

    nn::ParamRefs p;
    p.add(&w, &g);
    nn::Adam opt(p, 5e-2);
    for (int it = 0; it < 2000; ++it) {
        opt.zero_grads();
        for (int i = 0; i < 4; ++i) g.data[i] = 2.0 * (w.data[i] - target.data[i]);
        opt.step();
    }
    for (int i = 0; i < 4; ++i) CHECK(w.data[i] == Catch::Approx(target.data[i]).margin(1e-3));
}

TEST_CASE("param registry tracks sizes and clears gradients") {
    Tensor w({2, 3}), g({2, 3}, 7.0), buf({5});
    nn::ParamRefs p;
    p.add(&w, &g);
    p.add_buffer(&buf);
    CHECK(p.total_size() == 11);
    p.zero_grads();
    for (double v : g.data) CHECK(v == 0.0);
}

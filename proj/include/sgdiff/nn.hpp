#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "sgdiff/errors.hpp"
#include "sgdiff/rng.hpp"
#include "sgdiff/tensor.hpp"

namespace sgdiff::nn {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline Eigen::Map<MatrixXd> as_matrix(Tensor& t, int rows, int cols) {
    return Eigen::Map<MatrixXd>(t.data.data(), rows, cols);
}
inline Eigen::Map<const MatrixXd> as_matrix(const Tensor& t, int rows, int cols) {
    return Eigen::Map<const MatrixXd>(t.data.data(), rows, cols);
}

/// Parameter registry: every trainable layer contributes (weight, grad) pairs.
struct ParamRefs {
    std::vector<Tensor*> weights;
    std::vector<Tensor*> grads;
    std::vector<Tensor*> buffers;  // persisted but not optimized (e.g. BN running stats)

    void add(Tensor* w, Tensor* g) {
        weights.push_back(w);
        grads.push_back(g);
    }
    void add_buffer(Tensor* b) { buffers.push_back(b); }
    void zero_grads() {
        for (Tensor* g : grads) std::fill(g->data.begin(), g->data.end(), 0.0);
    }
    std::size_t total_size() const {
        std::size_t n = 0;
        for (Tensor* w : weights) n += w->size();
        for (Tensor* b : buffers) n += b->size();
        return n;
    }
};

/// Adaptive-moment optimizer.
class Adam {
   public:
    Adam(ParamRefs params, double lr = 1e-4, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
        for (Tensor* w : params_.weights) {
            m_.emplace_back(w->shape);
            v_.emplace_back(w->shape);
        }
    }

    void step() {
        ++t_;
        double bc1 = 1.0 - std::pow(b1_, t_);
        double bc2 = 1.0 - std::pow(b2_, t_);
        for (std::size_t p = 0; p < params_.weights.size(); ++p) {
            Tensor& w = *params_.weights[p];
            const Tensor& g = *params_.grads[p];
            for (std::size_t i = 0; i < w.size(); ++i) {
                double gi = g.data[i];
                m_[p].data[i] = b1_ * m_[p].data[i] + (1 - b1_) * gi;
                v_[p].data[i] = b2_ * v_[p].data[i] + (1 - b2_) * gi * gi;
                double mh = m_[p].data[i] / bc1;
                double vh = v_[p].data[i] / bc2;
                w.data[i] -= lr_ * mh / (std::sqrt(vh) + eps_);
            }
        }
    }

    void zero_grads() { params_.zero_grads(); }
    void set_lr(double lr) { lr_ = lr; }

   private:
    ParamRefs params_;
    double lr_, b1_, b2_, eps_;
    long t_ = 0;
    std::vector<Tensor> m_, v_;
};

/// Fully connected layer; data layout: columns are batch samples.
struct Linear {
    int in = 0, out = 0;
    Tensor W, gW, b, gb;

    Linear() = default;
    Linear(int in_dim, int out_dim, RngStream& rng) : in(in_dim), out(out_dim) {
        W = Tensor({out, in});
        gW = Tensor({out, in});
        b = Tensor({out});
        gb = Tensor({out});
        double scale = std::sqrt(2.0 / in);
        for (double& v : W.data) v = rng.normal() * scale;
    }

    void collect(ParamRefs& p) {
        p.add(&W, &gW);
        p.add(&b, &gb);
    }

    MatrixXd forward(const MatrixXd& X) const {
        if (X.rows() != in) throw ShapeError("Linear: input dimension mismatch");
        MatrixXd Y = as_matrix(W, out, in) * X;
        Y.colwise() += Eigen::Map<const VectorXd>(b.data.data(), out);
        return Y;
    }

    MatrixXd backward(const MatrixXd& X, const MatrixXd& gY) {
        as_matrix(gW, out, in) += gY * X.transpose();
        Eigen::Map<VectorXd>(gb.data.data(), out) += gY.rowwise().sum();
        return as_matrix(W, out, in).transpose() * gY;
    }
};

inline MatrixXd relu(const MatrixXd& X) { return X.cwiseMax(0.0); }
inline MatrixXd relu_backward(const MatrixXd& X, const MatrixXd& gY) {
    return (X.array() > 0.0).cast<double>() * gY.array();
}

/// 2D convolution over NCHW tensors (im2col + matmul).
struct Conv2d {
    int cin = 0, cout = 0, k = 1, stride = 1, pad = 0;
    Tensor W, gW, b, gb;  // W: cout x (cin*k*k)

    Conv2d() = default;
    Conv2d(int cin_, int cout_, int k_, int stride_, int pad_, RngStream& rng)
        : cin(cin_), cout(cout_), k(k_), stride(stride_), pad(pad_) {
        W = Tensor({cout, cin * k * k});
        gW = Tensor({cout, cin * k * k});
        b = Tensor({cout});
        gb = Tensor({cout});
        double scale = std::sqrt(2.0 / (cin * k * k));
        for (double& v : W.data) v = rng.normal() * scale;
    }

    void collect(ParamRefs& p) {
        p.add(&W, &gW);
        p.add(&b, &gb);
    }

    int out_size(int s) const { return (s + 2 * pad - k) / stride + 1; }

    void im2col(const Tensor& x, int n, MatrixXd& cols) const {
        int H = x.shape[2], Wd = x.shape[3];
        int Ho = out_size(H), Wo = out_size(Wd);
        cols.resize(cin * k * k, Ho * Wo);
        for (int c = 0; c < cin; ++c)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    int row = (c * k + ky) * k + kx;
                    for (int oy = 0; oy < Ho; ++oy) {
                        int iy = oy * stride + ky - pad;
                        for (int ox = 0; ox < Wo; ++ox) {
                            int ix = ox * stride + kx - pad;
                            cols(row, oy * Wo + ox) =
                                (iy >= 0 && iy < H && ix >= 0 && ix < Wd) ? x.at(n, c, iy, ix)
                                                                          : 0.0;
                        }
                    }
                }
    }

    Tensor forward(const Tensor& x) const {
        if (x.shape.size() != 4 || x.shape[1] != cin) throw ShapeError("Conv2d: bad input shape");
        int N = x.shape[0], Ho = out_size(x.shape[2]), Wo = out_size(x.shape[3]);
        Tensor y({N, cout, Ho, Wo});
        MatrixXd cols;
        auto Wm = as_matrix(W, cout, cin * k * k);
        for (int n = 0; n < N; ++n) {
            im2col(x, n, cols);
            MatrixXd out = Wm * cols;
            out.colwise() += Eigen::Map<const VectorXd>(b.data.data(), cout);
            for (int c = 0; c < cout; ++c)
                for (int p = 0; p < Ho * Wo; ++p)
                    y.data[((static_cast<std::size_t>(n) * cout + c) * Ho * Wo) + p] = out(c, p);
        }
        return y;
    }

    Tensor backward(const Tensor& x, const Tensor& gy) {
        int N = x.shape[0], H = x.shape[2], Wd = x.shape[3];
        int Ho = out_size(H), Wo = out_size(Wd);
        Tensor gx(x.shape);
        MatrixXd cols, gY(cout, Ho * Wo);
        auto Wm = as_matrix(W, cout, cin * k * k);
        auto gWm = as_matrix(gW, cout, cin * k * k);
        for (int n = 0; n < N; ++n) {
            im2col(x, n, cols);
            for (int c = 0; c < cout; ++c)
                for (int p = 0; p < Ho * Wo; ++p)
                    gY(c, p) = gy.data[((static_cast<std::size_t>(n) * cout + c) * Ho * Wo) + p];
            gWm += gY * cols.transpose();
            Eigen::Map<VectorXd>(gb.data.data(), cout) += gY.rowwise().sum();
            MatrixXd gcols = Wm.transpose() * gY;
            // col2im
            for (int c = 0; c < cin; ++c)
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        int row = (c * k + ky) * k + kx;
                        for (int oy = 0; oy < Ho; ++oy) {
                            int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= H) continue;
                            for (int ox = 0; ox < Wo; ++ox) {
                                int ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= Wd) continue;
                                gx.at(n, c, iy, ix) += gcols(row, oy * Wo + ox);
                            }
                        }
                    }
        }
        return gx;
    }
};

/// Batch normalization over N*H*W per channel.
struct BatchNorm2d {
    int channels = 0;
    double momentum = 0.1, eps = 1e-5;
    Tensor gamma, ggamma, beta, gbeta;
    Tensor running_mean, running_var;

    // caches from the last training forward
    Tensor xhat;
    std::vector<double> mean_, invstd_;

    BatchNorm2d() = default;
    explicit BatchNorm2d(int ch) : channels(ch) {
        gamma = Tensor({ch}, 1.0);
        ggamma = Tensor({ch});
        beta = Tensor({ch});
        gbeta = Tensor({ch});
        running_mean = Tensor({ch});
        running_var = Tensor({ch}, 1.0);
    }

    void collect(ParamRefs& p) {
        p.add(&gamma, &ggamma);
        p.add(&beta, &gbeta);
    }

    Tensor forward(const Tensor& x, bool training) {
        if (x.shape.size() != 4 || x.shape[1] != channels)
            throw ShapeError("BatchNorm2d: bad input shape");
        int N = x.shape[0], H = x.shape[2], W = x.shape[3];
        std::size_t plane = static_cast<std::size_t>(H) * W;
        double count = static_cast<double>(N) * plane;
        Tensor y(x.shape);
        if (training) {
            mean_.assign(channels, 0.0);
            invstd_.assign(channels, 0.0);
            xhat = Tensor(x.shape);
            for (int c = 0; c < channels; ++c) {
                double s = 0.0;
                for (int n = 0; n < N; ++n)
                    for (std::size_t p = 0; p < plane; ++p)
                        s += x.data[(static_cast<std::size_t>(n) * channels + c) * plane + p];
                double mu = s / count;
                double var = 0.0;
                for (int n = 0; n < N; ++n)
                    for (std::size_t p = 0; p < plane; ++p) {
                        double d = x.data[(static_cast<std::size_t>(n) * channels + c) * plane + p] - mu;
                        var += d * d;
                    }
                var /= count;
                mean_[c] = mu;
                invstd_[c] = 1.0 / std::sqrt(var + eps);
                running_mean.data[c] = (1 - momentum) * running_mean.data[c] + momentum * mu;
                running_var.data[c] = (1 - momentum) * running_var.data[c] + momentum * var;
                for (int n = 0; n < N; ++n)
                    for (std::size_t p = 0; p < plane; ++p) {
                        std::size_t i = (static_cast<std::size_t>(n) * channels + c) * plane + p;
                        xhat.data[i] = (x.data[i] - mu) * invstd_[c];
                        y.data[i] = gamma.data[c] * xhat.data[i] + beta.data[c];
                    }
            }
        } else {
            for (int c = 0; c < channels; ++c) {
                double inv = 1.0 / std::sqrt(running_var.data[c] + eps);
                for (int n = 0; n < N; ++n)
                    for (std::size_t p = 0; p < plane; ++p) {
                        std::size_t i = (static_cast<std::size_t>(n) * channels + c) * plane + p;
                        y.data[i] = gamma.data[c] * (x.data[i] - running_mean.data[c]) * inv +
                                    beta.data[c];
                    }
            }
        }
        return y;
    }

    Tensor backward(const Tensor& gy) {
        int N = gy.shape[0], H = gy.shape[2], W = gy.shape[3];
        std::size_t plane = static_cast<std::size_t>(H) * W;
        double count = static_cast<double>(N) * plane;
        Tensor gx(gy.shape);
        for (int c = 0; c < channels; ++c) {
            double sum_gy = 0.0, sum_gy_xhat = 0.0;
            for (int n = 0; n < N; ++n)
                for (std::size_t p = 0; p < plane; ++p) {
                    std::size_t i = (static_cast<std::size_t>(n) * channels + c) * plane + p;
                    sum_gy += gy.data[i];
                    sum_gy_xhat += gy.data[i] * xhat.data[i];
                }
            ggamma.data[c] += sum_gy_xhat;
            gbeta.data[c] += sum_gy;
            for (int n = 0; n < N; ++n)
                for (std::size_t p = 0; p < plane; ++p) {
                    std::size_t i = (static_cast<std::size_t>(n) * channels + c) * plane + p;
                    gx.data[i] = gamma.data[c] * invstd_[c] / count *
                                 (count * gy.data[i] - sum_gy - xhat.data[i] * sum_gy_xhat);
                }
        }
        return gx;
    }
};

/// Nearest-neighbor x2 upsampling.
inline Tensor upsample2(const Tensor& x) {
    int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    Tensor y({N, C, 2 * H, 2 * W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < 2 * H; ++h)
                for (int w = 0; w < 2 * W; ++w) y.at(n, c, h, w) = x.at(n, c, h / 2, w / 2);
    return y;
}

inline Tensor upsample2_backward(const Tensor& gy) {
    int N = gy.shape[0], C = gy.shape[1], H = gy.shape[2] / 2, W = gy.shape[3] / 2;
    Tensor gx({N, C, H, W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < 2 * H; ++h)
                for (int w = 0; w < 2 * W; ++w) gx.at(n, c, h / 2, w / 2) += gy.at(n, c, h, w);
    return gx;
}

inline Tensor relu_t(const Tensor& x) {
    Tensor y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = std::max(0.0, x.data[i]);
    return y;
}
inline Tensor relu_t_backward(const Tensor& x, const Tensor& gy) {
    Tensor gx(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) gx.data[i] = x.data[i] > 0.0 ? gy.data[i] : 0.0;
    return gx;
}

inline Tensor silu_t(const Tensor& x) {
    Tensor y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-x.data[i]));
        y.data[i] = x.data[i] * s;
    }
    return y;
}
inline Tensor silu_t_backward(const Tensor& x, const Tensor& gy) {
    Tensor gx(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-x.data[i]));
        gx.data[i] = gy.data[i] * (s + x.data[i] * s * (1.0 - s));
    }
    return gx;
}

inline Tensor sigmoid_t(const Tensor& x) {
    Tensor y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = 1.0 / (1.0 + std::exp(-x.data[i]));
    return y;
}
inline Tensor sigmoid_t_backward(const Tensor& y, const Tensor& gy) {
    Tensor gx(y.shape);
    for (std::size_t i = 0; i < y.size(); ++i) gx.data[i] = gy.data[i] * y.data[i] * (1.0 - y.data[i]);
    return gx;
}

}  // namespace sgdiff::nn

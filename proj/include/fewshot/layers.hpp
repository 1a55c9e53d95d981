#pragma once

#include <Eigen/Core>
#include <cmath>
#include <string>
#include <vector>

#include "fewshot/autograd.hpp"
#include "fewshot/tensor.hpp"

namespace fewshot {

namespace detail {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// 3x3 patches with zero padding 1: col is [channels*9, height*width].
inline void im2col3x3(const double* img, std::size_t channels,
                      std::size_t height, std::size_t width, double* col) {
  const std::size_t plane = height * width;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        double* dst = col + ((c * 3 + ky) * 3 + kx) * plane;
        for (std::size_t y = 0; y < height; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - 1;
          for (std::size_t x = 0; x < width; ++x) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x + kx) - 1;
            const bool inside = iy >= 0 && ix >= 0 &&
                                iy < static_cast<std::ptrdiff_t>(height) &&
                                ix < static_cast<std::ptrdiff_t>(width);
            dst[y * width + x] = inside ? img[c * plane + iy * width + ix] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im3x3(const double* col, std::size_t channels,
                      std::size_t height, std::size_t width, double* img) {
  const std::size_t plane = height * width;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const double* src = col + ((c * 3 + ky) * 3 + kx) * plane;
        for (std::size_t y = 0; y < height; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - 1;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
          for (std::size_t x = 0; x < width; ++x) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x + kx) - 1;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
            img[c * plane + iy * width + ix] += src[y * width + x];
          }
        }
      }
    }
  }
}

}  // namespace detail

/**
 * 3x3 cross-correlation, stride 1, zero padding 1, plus per-filter bias.
 *
 * input [B,C,H,W], weight [F,C,3,3], bias [F] -> [B,F,H,W]. Patch matrices
 * are rebuilt in the backward pass instead of being cached.
 */
inline Var conv2d(const Var& input, const Var& weight, const Var& bias) {
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  const Tensor& b = bias.value();
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  require_rank(b, 1, "conv2d bias");
  const std::size_t batch = x.dim(0), channels = x.dim(1), height = x.dim(2),
                    width = x.dim(3), filters = w.dim(0);
  if (w.dim(1) != channels || w.dim(2) != 3 || w.dim(3) != 3) {
    throw ShapeError("conv2d: weight " + to_string(w.shape()) +
                     " does not fit input " + to_string(x.shape()));
  }
  if (b.dim(0) != filters) {
    throw ShapeError("conv2d: bias " + to_string(b.shape()) +
                     " does not match " + std::to_string(filters) + " filters");
  }
  const std::size_t plane = height * width;
  const std::size_t patch = channels * 9;

  Tensor out(Shape{batch, filters, height, width});
  std::vector<double> col(patch * plane);
  detail::ConstMatrixMap wm(w.data().data(), filters, patch);
  Eigen::Map<const Eigen::VectorXd> bv(b.data().data(), filters);
  for (std::size_t n = 0; n < batch; ++n) {
    detail::im2col3x3(x.data().data() + n * channels * plane, channels, height,
                      width, col.data());
    detail::ConstMatrixMap cm(col.data(), patch, plane);
    detail::MatrixMap om(out.data().data() + n * filters * plane, filters, plane);
    om.noalias() = wm * cm;
    om.colwise() += bv;
  }

  Tensor* tx = &input.tensor();
  Tensor* tw = &weight.tensor();
  Tensor* tb = &bias.tensor();
  const bool gx = input.requires_grad(), gw = weight.requires_grad(),
             gb = bias.requires_grad();
  return input.tape().record(
      "conv2d", std::move(out), {input, weight, bias}, [=](const Tensor& o) {
        auto g = o.grad();
        std::vector<double> colb(patch * plane);
        std::vector<double> dcol(gx ? patch * plane : 0);
        detail::ConstMatrixMap wmb(tw->data().data(), filters, patch);
        for (std::size_t n = 0; n < batch; ++n) {
          detail::ConstMatrixMap gm(g.data() + n * filters * plane, filters, plane);
          if (gw) {
            detail::im2col3x3(tx->data().data() + n * channels * plane,
                              channels, height, width, colb.data());
            detail::ConstMatrixMap cm(colb.data(), patch, plane);
            detail::MatrixMap dw(tw->ensure_grad().data(), filters, patch);
            dw.noalias() += gm * cm.transpose();
          }
          if (gb) {
            auto db = tb->ensure_grad();
            for (std::size_t f = 0; f < filters; ++f) db[f] += gm.row(f).sum();
          }
          if (gx) {
            detail::MatrixMap dc(dcol.data(), patch, plane);
            dc.noalias() = wmb.transpose() * gm;
            detail::col2im3x3(dcol.data(), channels, height, width,
                              tx->ensure_grad().data() + n * channels * plane);
          }
        }
      });
}

struct BatchNormOptions {
  double epsilon = 1e-5;
  double momentum = 0.1;
};

/// Running statistics; initialised to mean 0, variance 1.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;

  explicit BatchNormState(std::size_t channels = 1)
      : running_mean(Shape{channels}, 0.0), running_var(Shape{channels}, 1.0) {}
};

enum class Mode { train, eval };

/**
 * Per-channel batch normalisation over [B,C,H,W].
 *
 * Train mode normalises with the biased batch variance and folds the
 * unbiased variance into the running estimate. Eval mode uses the running
 * estimate and leaves it untouched.
 */
inline Var batchnorm2d(const Var& input, const Var& gamma, const Var& beta,
                       BatchNormState& state, Mode mode,
                       BatchNormOptions opts = {}) {
  const Tensor& x = input.value();
  require_rank(x, 4, "batchnorm2d input");
  const std::size_t batch = x.dim(0), channels = x.dim(1),
                    plane = x.dim(2) * x.dim(3);
  if (gamma.value().size() != channels || beta.value().size() != channels ||
      state.running_mean.size() != channels ||
      state.running_var.size() != channels) {
    throw ShapeError("batchnorm2d: parameters do not match " +
                     std::to_string(channels) + " channels");
  }
  const std::size_t count = batch * plane;
  if (mode == Mode::train && count < 2) {
    throw ShapeError("batchnorm2d: train mode needs at least 2 values per channel");
  }

  std::vector<double> mean(channels), inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const double* p = x.data().data() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const double* p = x.data().data() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / static_cast<double>(count);
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + opts.epsilon);
      const double unbiased = ss / static_cast<double>(count - 1);
      state.running_mean[c] =
          (1.0 - opts.momentum) * state.running_mean[c] + opts.momentum * mu;
      state.running_var[c] =
          (1.0 - opts.momentum) * state.running_var[c] + opts.momentum * unbiased;
    } else {
      mean[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + opts.epsilon);
    }
  }

  Tensor normalized(x.shape());
  Tensor out(x.shape());
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (n * channels + c) * plane;
      const double g = gamma.value()[c], b = beta.value()[c];
      for (std::size_t i = 0; i < plane; ++i) {
        const double xh = (x[base + i] - mean[c]) * inv_std[c];
        normalized[base + i] = xh;
        out[base + i] = g * xh + b;
      }
    }
  }

  Tensor* tx = &input.tensor();
  Tensor* tg = &gamma.tensor();
  Tensor* tb = &beta.tensor();
  const bool gx = input.requires_grad(), gg = gamma.requires_grad(),
             gbeta = beta.requires_grad();
  const bool training = mode == Mode::train;
  return input.tape().record(
      "batchnorm2d", std::move(out), {input, gamma, beta},
      [=, xhat = std::move(normalized), inv_std = std::move(inv_std)](
          const Tensor& o) {
        auto g = o.grad();
        for (std::size_t c = 0; c < channels; ++c) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t base = (n * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_dy += g[base + i];
              sum_dy_xhat += g[base + i] * xhat[base + i];
            }
          }
          if (gg) tg->ensure_grad()[c] += sum_dy_xhat;
          if (gbeta) tb->ensure_grad()[c] += sum_dy;
          if (!gx) continue;
          auto dx = tx->ensure_grad();
          const double gam = (*tg)[c];
          const double m = static_cast<double>(count);
          for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t base = (n * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              if (training) {
                dx[base + i] += gam * inv_std[c] *
                                (g[base + i] - sum_dy / m -
                                 xhat[base + i] * sum_dy_xhat / m);
              } else {
                dx[base + i] += gam * inv_std[c] * g[base + i];
              }
            }
          }
        }
      });
}

/// max(x, 0); the subgradient at 0 is 0.
inline Var relu(const Var& input) {
  Tensor out = detail::map_values(input.value(),
                                  [](double v) { return v > 0.0 ? v : 0.0; });
  Tensor* tx = &input.tensor();
  return input.tape().record("relu", std::move(out), {input},
                             [=](const Tensor& o) {
                               auto g = o.grad();
                               auto d = tx->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 if ((*tx)[i] > 0.0) d[i] += g[i];
                               }
                             });
}

/**
 * 2x2 max pooling, stride 2. Odd extents are floor-truncated (21 -> 10);
 * the gradient goes to the first maximal element in row-major window order.
 */
inline Var maxpool2x2(const Var& input) {
  const Tensor& x = input.value();
  require_rank(x, 4, "maxpool2x2");
  const std::size_t batch = x.dim(0), channels = x.dim(1), height = x.dim(2),
                    width = x.dim(3);
  if (height < 2 || width < 2) {
    throw ShapeError("maxpool2x2: spatial extent below 2 in " + to_string(x.shape()));
  }
  const std::size_t oh = height / 2, ow = width / 2;
  Tensor out(Shape{batch, channels, oh, ow});
  std::vector<std::size_t> argmax(out.size());
  std::size_t k = 0;
  for (std::size_t nc = 0; nc < batch * channels; ++nc) {
    const std::size_t base = nc * height * width;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xo = 0; xo < ow; ++xo, ++k) {
        std::size_t best = base + (2 * y) * width + 2 * xo;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = base + (2 * y + dy) * width + 2 * xo + dx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        argmax[k] = best;
        out[k] = x[best];
      }
    }
  }
  Tensor* tx = &input.tensor();
  return input.tape().record("maxpool2x2", std::move(out), {input},
                             [=, argmax = std::move(argmax)](const Tensor& o) {
                               auto g = o.grad();
                               auto d = tx->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) d[argmax[i]] += g[i];
                             });
}

/// [B, ...] -> [B, D].
inline Var flatten(const Var& input) {
  const Tensor& x = input.value();
  if (x.rank() < 1) throw ShapeError("flatten: scalar input");
  const std::size_t batch = x.dim(0);
  Tensor out = x.reshaped(Shape{batch, x.size() / batch});
  Tensor* tx = &input.tensor();
  return input.tape().record("flatten", std::move(out), {input},
                             [=](const Tensor& o) {
                               auto g = o.grad();
                               auto d = tx->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                             });
}

/// x [B, In] times weight [Out, In] transposed, plus bias [Out].
inline Var linear(const Var& input, const Var& weight, const Var& bias) {
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  require_rank(x, 2, "linear input");
  require_rank(w, 2, "linear weight");
  const std::size_t batch = x.dim(0), in = x.dim(1), outd = w.dim(0);
  if (w.dim(1) != in || bias.value().size() != outd) {
    throw ShapeError("linear: weight " + to_string(w.shape()) +
                     " does not fit input " + to_string(x.shape()));
  }
  Tensor out(Shape{batch, outd});
  detail::ConstMatrixMap xm(x.data().data(), batch, in);
  detail::ConstMatrixMap wm(w.data().data(), outd, in);
  detail::MatrixMap om(out.data().data(), batch, outd);
  om.noalias() = xm * wm.transpose();
  Eigen::Map<const Eigen::RowVectorXd> bv(bias.value().data().data(), outd);
  om.rowwise() += bv;

  Tensor* tx = &input.tensor();
  Tensor* tw = &weight.tensor();
  Tensor* tb = &bias.tensor();
  const bool gx = input.requires_grad(), gw = weight.requires_grad(),
             gb = bias.requires_grad();
  return input.tape().record(
      "linear", std::move(out), {input, weight, bias}, [=](const Tensor& o) {
        detail::ConstMatrixMap gm(o.grad().data(), batch, outd);
        if (gx) {
          detail::MatrixMap dx(tx->ensure_grad().data(), batch, in);
          dx.noalias() += gm * detail::ConstMatrixMap(tw->data().data(), outd, in);
        }
        if (gw) {
          detail::MatrixMap dw(tw->ensure_grad().data(), outd, in);
          dw.noalias() += gm.transpose() * detail::ConstMatrixMap(tx->data().data(), batch, in);
        }
        if (gb) {
          auto db = tb->ensure_grad();
          for (std::size_t j = 0; j < outd; ++j) db[j] += gm.col(j).sum();
        }
      });
}

}  // namespace fewshot

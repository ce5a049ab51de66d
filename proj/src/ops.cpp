// SPDX-License-Identifier: Apache-2.0
#include "fopa/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "fopa/error.hpp"

namespace fopa {

namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

using detail::Node;

void require_rank(const Tensor &t, std::size_t rank, const char *op,
                  const char *what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " +
                         std::to_string(rank) + ", got shape " +
                         shape_str(t.shape()));
  }
}

void require_axis(const char *op, const char *what, std::size_t axis,
                  std::size_t got, std::size_t expected) {
  if (got != expected) {
    throw DimensionError(std::string(op) + ": " + what + " axis " +
                         std::to_string(axis) + " is " + std::to_string(got) +
                         ", expected " + std::to_string(expected));
  }
}

void require_same_shape(const Tensor &a, const Tensor &b, const char *op) {
  if (a.shape() != b.shape()) {
    const Shape &sa = a.shape();
    const Shape &sb = b.shape();
    std::string where = "rank";
    if (sa.size() == sb.size()) {
      for (std::size_t i = 0; i < sa.size(); ++i) {
        if (sa[i] != sb[i]) {
          where = "axis " + std::to_string(i);
          break;
        }
      }
    }
    throw DimensionError(std::string(op) + ": shape mismatch on " + where +
                         " (" + shape_str(sa) + " vs " + shape_str(sb) + ")");
  }
}

Node &in(Node &self, std::size_t i) { return *self.inputs[i]; }

struct ConvGeometry {
  std::size_t channels, height, width, kernel, stride, padding, out_h, out_w;
  std::size_t rows() const { return channels * kernel * kernel; }
  std::size_t cols() const { return out_h * out_w; }
  bool is_pointwise() const {
    return kernel == 1 && stride == 1 && padding == 0;
  }
};

void im2col(const double *src, const ConvGeometry &g, double *col) {
  const long pad = static_cast<long>(g.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double *plane = src + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        double *row = col + ((c * g.kernel + ky) * g.kernel + kx) * g.cols();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - pad;
          double *dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<long>(g.height)) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double *src_row = plane + iy * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - pad;
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.width)) ? 0.0
                                                                   : src_row[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double *col, const ConvGeometry &g, double *dst) {
  const long pad = static_cast<long>(g.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    double *plane = dst + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const double *row =
            col + ((c * g.kernel + ky) * g.kernel + kx) * g.cols();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          double *dst_row = plane + iy * g.width;
          const double *src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - pad;
            if (ix >= 0 && ix < static_cast<long>(g.width)) dst_row[ix] += src[ox];
          }
        }
      }
    }
  }
}

double stable_sigmoid(double z) {
  double s;
  if (z >= 0) {
    s = 1.0 / (1.0 + std::exp(-z));
  } else {
    const double e = std::exp(z);
    s = e / (1.0 + e);
  }
  // Keep the open interval even where the exponential saturates.
  constexpr double kHi = 1.0 - 0x1p-53;
  constexpr double kLo = std::numeric_limits<double>::min();
  return std::clamp(s, kLo, kHi);
}

double softplus(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

void check_labels(std::span<const int> labels, std::size_t count,
                  const char *op) {
  if (count == 0) throw ContractError(std::string(op) + ": empty pixel set");
  if (labels.size() != count) {
    throw DimensionError(std::string(op) + ": " + std::to_string(count) +
                         " predictions but " + std::to_string(labels.size()) +
                         " labels");
  }
  for (int l : labels) {
    if (l != 0 && l != 1) {
      throw ContractError(std::string(op) + ": label " + std::to_string(l) +
                          " is not 0 or 1");
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor &input, const Tensor &weight, const Tensor &bias,
              std::size_t stride, std::size_t padding) {
  constexpr const char *kOp = "conv2d";
  require_rank(input, 4, kOp, "input");
  require_rank(weight, 4, kOp, "weight");
  const std::size_t n_batch = input.dim(0);
  const std::size_t c_out = weight.dim(0);
  const std::size_t k = weight.dim(2);
  require_axis(kOp, "input", 1, input.dim(1), weight.dim(1));
  require_axis(kOp, "weight", 3, weight.dim(3), k);
  if (k % 2 == 0) {
    throw DimensionError("conv2d: weight axis 2 has even kernel size " +
                         std::to_string(k));
  }
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  const bool has_bias = bias.defined();
  if (has_bias) {
    require_rank(bias, 1, kOp, "bias");
    require_axis(kOp, "bias", 0, bias.dim(0), c_out);
  }
  ConvGeometry g{input.dim(1), input.dim(2), input.dim(3), k, stride, padding,
                 0, 0};
  if (g.height + 2 * padding < k || g.width + 2 * padding < k) {
    throw DimensionError("conv2d: input axis " +
                         std::string(g.height + 2 * padding < k ? "2" : "3") +
                         " smaller than kernel after padding");
  }
  g.out_h = (g.height + 2 * padding - k) / stride + 1;
  g.out_w = (g.width + 2 * padding - k) / stride + 1;

  const std::size_t in_plane = g.channels * g.height * g.width;
  const std::size_t out_plane = c_out * g.cols();
  std::vector<double> out(n_batch * out_plane);
  std::vector<double> col(g.is_pointwise() ? 0 : g.rows() * g.cols());
  ConstMatMap w(weight.data().data(), c_out, g.rows());
  for (std::size_t n = 0; n < n_batch; ++n) {
    const double *src = input.data().data() + n * in_plane;
    const double *col_ptr = src;
    if (!g.is_pointwise()) {
      im2col(src, g, col.data());
      col_ptr = col.data();
    }
    MatMap o(out.data() + n * out_plane, c_out, g.cols());
    o.noalias() = w * ConstMatMap(col_ptr, g.rows(), g.cols());
    if (has_bias) {
      o.colwise() += ConstVecMap(bias.data().data(), c_out);
    }
  }

  std::vector<Tensor> inputs{input, weight};
  if (has_bias) inputs.push_back(bias);
  return detail::make_result(
      kOp, {n_batch, c_out, g.out_h, g.out_w}, std::move(out), std::move(inputs),
      [g, n_batch, c_out, in_plane, out_plane, has_bias](Node &self) {
        Node &x = in(self, 0);
        Node &wt = in(self, 1);
        const bool need_x = x.requires_grad;
        const bool need_w = wt.requires_grad;
        const bool need_b = has_bias && in(self, 2).requires_grad;
        std::vector<double> col(g.is_pointwise() ? 0 : g.rows() * g.cols());
        std::vector<double> dcol(g.is_pointwise() ? 0 : g.rows() * g.cols());
        ConstMatMap w(wt.data.data(), c_out, g.rows());
        for (std::size_t n = 0; n < n_batch; ++n) {
          ConstMatMap dout(self.grad.data() + n * out_plane, c_out, g.cols());
          if (need_w) {
            const double *col_ptr = x.data.data() + n * in_plane;
            if (!g.is_pointwise()) {
              im2col(col_ptr, g, col.data());
              col_ptr = col.data();
            }
            MatMap dw(wt.ensure_grad().data(), c_out, g.rows());
            dw.noalias() +=
                dout * ConstMatMap(col_ptr, g.rows(), g.cols()).transpose();
          }
          if (need_b) {
            // Plain loops keep the summation order independent of alignment.
            double *db = in(self, 2).ensure_grad().data();
            for (Eigen::Index j = 0; j < dout.cols(); ++j) {
              for (Eigen::Index i = 0; i < dout.rows(); ++i) db[i] += dout(i, j);
            }
          }
          if (need_x) {
            double *dx = x.ensure_grad().data() + n * in_plane;
            if (g.is_pointwise()) {
              MatMap(dx, g.rows(), g.cols()).noalias() += w.transpose() * dout;
            } else {
              MatMap(dcol.data(), g.rows(), g.cols()).noalias() =
                  w.transpose() * dout;
              col2im_add(dcol.data(), g, dx);
            }
          }
        }
      });
}

Tensor dynamic_depthwise_conv2d(const Tensor &input, const Tensor &kernels) {
  constexpr const char *kOp = "dynamic_depthwise_conv2d";
  require_rank(input, 4, kOp, "input");
  require_rank(kernels, 4, kOp, "kernels");
  require_axis(kOp, "kernels", 0, kernels.dim(0), input.dim(0));
  require_axis(kOp, "kernels", 1, kernels.dim(1), input.dim(1));
  const std::size_t k = kernels.dim(2);
  require_axis(kOp, "kernels", 3, kernels.dim(3), k);
  if (k % 2 == 0) {
    throw DimensionError("dynamic_depthwise_conv2d: kernels axis 2 has even size " +
                         std::to_string(k));
  }
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t h = input.dim(2);
  const std::size_t w = input.dim(3);
  const long r = static_cast<long>(k / 2);

  // Visits every (output pixel, tap) pair with a valid source pixel.
  auto for_taps = [h, w, k, r](auto &&fn) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      const long dy = static_cast<long>(ky) - r;
      const std::size_t y0 = dy < 0 ? static_cast<std::size_t>(-dy) : 0;
      const std::size_t y1 = dy > 0 ? h - std::min<std::size_t>(h, dy) : h;
      for (std::size_t kx = 0; kx < k; ++kx) {
        const long dx = static_cast<long>(kx) - r;
        const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
        const std::size_t x1 = dx > 0 ? w - std::min<std::size_t>(w, dx) : w;
        fn(ky * k + kx, dy, dx, y0, y1, x0, x1);
      }
    }
  };

  std::vector<double> out(planes * h * w, 0.0);
  const double *src = input.data().data();
  const double *ker = kernels.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    const double *plane = src + p * h * w;
    double *dst = out.data() + p * h * w;
    for_taps([&](std::size_t tap, long dy, long dx, std::size_t y0,
                 std::size_t y1, std::size_t x0, std::size_t x1) {
      const double wv = ker[p * k * k + tap];
      for (std::size_t y = y0; y < y1; ++y) {
        const double *s = plane + (y + dy) * w + dx;
        double *d = dst + y * w;
        for (std::size_t x = x0; x < x1; ++x) d[x] += wv * s[x];
      }
    });
  }

  return detail::make_result(
      kOp, input.shape(), std::move(out), {input, kernels},
      [planes, h, w, k, for_taps](Node &self) {
        Node &x = in(self, 0);
        Node &kn = in(self, 1);
        const double *dout = self.grad.data();
        double *dx_all = x.requires_grad ? x.ensure_grad().data() : nullptr;
        double *dk_all = kn.requires_grad ? kn.ensure_grad().data() : nullptr;
        for (std::size_t p = 0; p < planes; ++p) {
          const double *plane = x.data.data() + p * h * w;
          const double *g = dout + p * h * w;
          for_taps([&](std::size_t tap, long dy, long dx, std::size_t y0,
                       std::size_t y1, std::size_t x0, std::size_t x1) {
            const double wv = kn.data[p * k * k + tap];
            double acc = 0.0;
            for (std::size_t y = y0; y < y1; ++y) {
              const double *grow = g + y * w;
              if (dk_all) {
                const double *s = plane + (y + dy) * w + dx;
                for (std::size_t xx = x0; xx < x1; ++xx) acc += grow[xx] * s[xx];
              }
              if (dx_all) {
                double *d = dx_all + p * h * w + (y + dy) * w + dx;
                for (std::size_t xx = x0; xx < x1; ++xx) d[xx] += wv * grow[xx];
              }
            }
            if (dk_all) dk_all[p * k * k + tap] += acc;
          });
        }
      });
}

Tensor linear(const Tensor &input, const Tensor &weight, const Tensor &bias) {
  constexpr const char *kOp = "linear";
  require_rank(input, 2, kOp, "input");
  require_rank(weight, 2, kOp, "weight");
  const std::size_t rows = input.dim(0);
  const std::size_t f = input.dim(1);
  const std::size_t g = weight.dim(0);
  require_axis(kOp, "input", 1, f, weight.dim(1));
  const bool has_bias = bias.defined();
  if (has_bias) {
    require_rank(bias, 1, kOp, "bias");
    require_axis(kOp, "bias", 0, bias.dim(0), g);
  }
  std::vector<double> out(rows * g);
  MatMap o(out.data(), rows, g);
  o.noalias() = ConstMatMap(input.data().data(), rows, f) *
                ConstMatMap(weight.data().data(), g, f).transpose();
  if (has_bias) {
    o.rowwise() += ConstVecMap(bias.data().data(), g).transpose();
  }
  std::vector<Tensor> inputs{input, weight};
  if (has_bias) inputs.push_back(bias);
  return detail::make_result(
      kOp, {rows, g}, std::move(out), std::move(inputs),
      [rows, f, g, has_bias](Node &self) {
        Node &x = in(self, 0);
        Node &wt = in(self, 1);
        ConstMatMap dout(self.grad.data(), rows, g);
        if (x.requires_grad) {
          MatMap(x.ensure_grad().data(), rows, f).noalias() +=
              dout * ConstMatMap(wt.data.data(), g, f);
        }
        if (wt.requires_grad) {
          MatMap(wt.ensure_grad().data(), g, f).noalias() +=
              dout.transpose() * ConstMatMap(x.data.data(), rows, f);
        }
        if (has_bias && in(self, 2).requires_grad) {
          double *db = in(self, 2).ensure_grad().data();
          for (Eigen::Index r = 0; r < dout.rows(); ++r) {
            for (Eigen::Index c = 0; c < dout.cols(); ++c) db[c] += dout(r, c);
          }
        }
      });
}

Tensor relu(const Tensor &x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double &v : out) v = v > 0.0 ? v : 0.0;
  return detail::make_result("relu", x.shape(), std::move(out), {x},
                             [](Node &self) {
                               Node &a = in(self, 0);
                               if (!a.requires_grad) return;
                               auto &ga = a.ensure_grad();
                               for (std::size_t i = 0; i < ga.size(); ++i) {
                                 if (a.data[i] > 0.0) ga[i] += self.grad[i];
                               }
                             });
}

Tensor sigmoid(const Tensor &x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(x.data()[i]);
  return detail::make_result("sigmoid", x.shape(), std::move(out), {x},
                             [](Node &self) {
                               Node &a = in(self, 0);
                               if (!a.requires_grad) return;
                               auto &ga = a.ensure_grad();
                               for (std::size_t i = 0; i < ga.size(); ++i) {
                                 const double s = self.data[i];
                                 ga[i] += self.grad[i] * s * (1.0 - s);
                               }
                             });
}

Tensor add(const Tensor &a, const Tensor &b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result("add", a.shape(), std::move(out), {a, b},
                             [](Node &self) {
                               for (int i = 0; i < 2; ++i) {
                                 Node &t = in(self, i);
                                 if (!t.requires_grad) continue;
                                 auto &gt = t.ensure_grad();
                                 for (std::size_t j = 0; j < gt.size(); ++j) {
                                   gt[j] += self.grad[j];
                                 }
                               }
                             });
}

Tensor sub(const Tensor &a, const Tensor &b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result("sub", a.shape(), std::move(out), {a, b},
                             [](Node &self) {
                               for (int i = 0; i < 2; ++i) {
                                 Node &t = in(self, i);
                                 if (!t.requires_grad) continue;
                                 const double sign = i == 0 ? 1.0 : -1.0;
                                 auto &gt = t.ensure_grad();
                                 for (std::size_t j = 0; j < gt.size(); ++j) {
                                   gt[j] += sign * self.grad[j];
                                 }
                               }
                             });
}

Tensor mul(const Tensor &a, const Tensor &b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result("mul", a.shape(), std::move(out), {a, b},
                             [](Node &self) {
                               Node &x = in(self, 0);
                               Node &y = in(self, 1);
                               if (x.requires_grad) {
                                 auto &gx = x.ensure_grad();
                                 for (std::size_t j = 0; j < gx.size(); ++j) {
                                   gx[j] += self.grad[j] * y.data[j];
                                 }
                               }
                               if (y.requires_grad) {
                                 auto &gy = y.ensure_grad();
                                 for (std::size_t j = 0; j < gy.size(); ++j) {
                                   gy[j] += self.grad[j] * x.data[j];
                                 }
                               }
                             });
}

Tensor scalar_mul(const Tensor &x, double s) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double &v : out) v *= s;
  return detail::make_result("scalar_mul", x.shape(), std::move(out), {x},
                             [s](Node &self) {
                               Node &a = in(self, 0);
                               if (!a.requires_grad) return;
                               auto &ga = a.ensure_grad();
                               for (std::size_t i = 0; i < ga.size(); ++i) {
                                 ga[i] += s * self.grad[i];
                               }
                             });
}

Tensor sum(const Tensor &x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return detail::make_result("sum", {}, {total}, {x}, [](Node &self) {
    Node &a = in(self, 0);
    if (!a.requires_grad) return;
    for (double &g : a.ensure_grad()) g += self.grad[0];
  });
}

Tensor channel_affine(const Tensor &x, const Tensor &scale,
                      const Tensor &shift) {
  constexpr const char *kOp = "channel_affine";
  require_rank(x, 4, kOp, "input");
  require_rank(scale, 1, kOp, "scale");
  require_rank(shift, 1, kOp, "shift");
  const std::size_t channels = x.dim(1);
  require_axis(kOp, "scale", 0, scale.dim(0), channels);
  require_axis(kOp, "shift", 0, shift.dim(0), channels);
  const std::size_t n_batch = x.dim(0);
  const std::size_t plane = x.dim(2) * x.dim(3);
  std::vector<double> out(x.size());
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double a = scale.data()[c];
      const double b = shift.data()[c];
      const std::size_t base = (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        out[base + i] = a * x.data()[base + i] + b;
      }
    }
  }
  return detail::make_result(
      kOp, x.shape(), std::move(out), {x, scale, shift},
      [n_batch, channels, plane](Node &self) {
        Node &xi = in(self, 0);
        Node &sc = in(self, 1);
        Node &sh = in(self, 2);
        for (std::size_t n = 0; n < n_batch; ++n) {
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (n * channels + c) * plane;
            const double *g = self.grad.data() + base;
            if (xi.requires_grad) {
              double *gx = xi.ensure_grad().data() + base;
              const double a = sc.data[c];
              for (std::size_t i = 0; i < plane; ++i) gx[i] += a * g[i];
            }
            if (sc.requires_grad) {
              double acc = 0.0;
              const double *xv = xi.data.data() + base;
              for (std::size_t i = 0; i < plane; ++i) acc += g[i] * xv[i];
              sc.ensure_grad()[c] += acc;
            }
            if (sh.requires_grad) {
              double acc = 0.0;
              for (std::size_t i = 0; i < plane; ++i) acc += g[i];
              sh.ensure_grad()[c] += acc;
            }
          }
        }
      });
}

Tensor concat_channels(std::span<const Tensor> parts) {
  constexpr const char *kOp = "concat_channels";
  if (parts.empty()) throw ContractError("concat_channels: no inputs");
  for (const Tensor &p : parts) require_rank(p, 4, kOp, "input");
  const std::size_t n_batch = parts[0].dim(0);
  const std::size_t h = parts[0].dim(2);
  const std::size_t w = parts[0].dim(3);
  std::size_t total_c = 0;
  std::vector<std::size_t> offsets;
  for (const Tensor &p : parts) {
    require_axis(kOp, "input", 0, p.dim(0), n_batch);
    require_axis(kOp, "input", 2, p.dim(2), h);
    require_axis(kOp, "input", 3, p.dim(3), w);
    offsets.push_back(total_c);
    total_c += p.dim(1);
  }
  const std::size_t plane = h * w;
  std::vector<double> out(n_batch * total_c * plane);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const std::size_t c = parts[i].dim(1);
    for (std::size_t n = 0; n < n_batch; ++n) {
      const double *src = parts[i].data().data() + n * c * plane;
      std::copy(src, src + c * plane,
                out.begin() + (n * total_c + offsets[i]) * plane);
    }
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return detail::make_result(
      kOp, {n_batch, total_c, h, w}, std::move(out), std::move(inputs),
      [offsets, n_batch, total_c, plane](Node &self) {
        for (std::size_t i = 0; i < self.inputs.size(); ++i) {
          Node &p = in(self, i);
          if (!p.requires_grad) continue;
          const std::size_t c = p.shape[1];
          auto &gp = p.ensure_grad();
          for (std::size_t n = 0; n < n_batch; ++n) {
            const double *g =
                self.grad.data() + (n * total_c + offsets[i]) * plane;
            double *dst = gp.data() + n * c * plane;
            for (std::size_t j = 0; j < c * plane; ++j) dst[j] += g[j];
          }
        }
      });
}

Tensor concat_features(std::span<const Tensor> parts) {
  constexpr const char *kOp = "concat_features";
  if (parts.empty()) throw ContractError("concat_features: no inputs");
  const std::size_t rows = parts[0].rank() == 2 ? parts[0].dim(0) : 0;
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (const Tensor &p : parts) {
    require_rank(p, 2, kOp, "input");
    require_axis(kOp, "input", 0, p.dim(0), rows);
    offsets.push_back(total);
    total += p.dim(1);
  }
  std::vector<double> out(rows * total);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const std::size_t f = parts[i].dim(1);
    for (std::size_t r = 0; r < rows; ++r) {
      const double *src = parts[i].data().data() + r * f;
      std::copy(src, src + f, out.begin() + r * total + offsets[i]);
    }
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return detail::make_result(
      kOp, {rows, total}, std::move(out), std::move(inputs),
      [offsets, rows, total](Node &self) {
        for (std::size_t i = 0; i < self.inputs.size(); ++i) {
          Node &p = in(self, i);
          if (!p.requires_grad) continue;
          const std::size_t f = p.shape[1];
          auto &gp = p.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < f; ++j) {
              gp[r * f + j] += self.grad[r * total + offsets[i] + j];
            }
          }
        }
      });
}

Tensor global_avg_pool(const Tensor &x) {
  require_rank(x, 4, "global_avg_pool", "input");
  const std::size_t rows = x.dim(0) * x.dim(1);
  const std::size_t plane = x.dim(2) * x.dim(3);
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    const double *src = x.data().data() + r * plane;
    for (std::size_t i = 0; i < plane; ++i) acc += src[i];
    out[r] = acc / static_cast<double>(plane);
  }
  return detail::make_result("global_avg_pool", {x.dim(0), x.dim(1)},
                             std::move(out), {x}, [rows, plane](Node &self) {
                               Node &a = in(self, 0);
                               if (!a.requires_grad) return;
                               auto &ga = a.ensure_grad();
                               const double inv = 1.0 / static_cast<double>(plane);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double g = self.grad[r] * inv;
                                 for (std::size_t i = 0; i < plane; ++i) {
                                   ga[r * plane + i] += g;
                                 }
                               }
                             });
}

Tensor upsample_nearest_2x(const Tensor &x) {
  require_rank(x, 4, "upsample_nearest_2x", "input");
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t h = x.dim(2);
  const std::size_t w = x.dim(3);
  std::vector<double> out(planes * 4 * h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    const double *src = x.data().data() + p * h * w;
    double *dst = out.data() + p * 4 * h * w;
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t xx = 0; xx < 2 * w; ++xx) {
        dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
      }
    }
  }
  return detail::make_result(
      "upsample_nearest_2x", {x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out),
      {x}, [planes, h, w](Node &self) {
        Node &a = in(self, 0);
        if (!a.requires_grad) return;
        auto &ga = a.ensure_grad();
        for (std::size_t p = 0; p < planes; ++p) {
          const double *g = self.grad.data() + p * 4 * h * w;
          double *dst = ga.data() + p * h * w;
          for (std::size_t y = 0; y < 2 * h; ++y) {
            for (std::size_t xx = 0; xx < 2 * w; ++xx) {
              dst[(y / 2) * w + xx / 2] += g[y * 2 * w + xx];
            }
          }
        }
      });
}

Tensor max_pool_2x(const Tensor &x) {
  require_rank(x, 4, "max_pool_2x", "input");
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t h = x.dim(2);
  const std::size_t w = x.dim(3);
  const std::size_t oh = h / 2;
  const std::size_t ow = w / 2;
  if (oh == 0 || ow == 0) {
    throw DimensionError("max_pool_2x: input axis " + std::string(oh ? "3" : "2") +
                         " smaller than 2");
  }
  std::vector<double> out(planes * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const double *src = x.data().data() + p * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        std::size_t best = (2 * y) * w + 2 * xx;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (2 * y + dy) * w + 2 * xx + dx;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const std::size_t o = (p * oh + y) * ow + xx;
        out[o] = src[best];
        argmax[o] = p * h * w + best;
      }
    }
  }
  return detail::make_result("max_pool_2x", {x.dim(0), x.dim(1), oh, ow},
                             std::move(out), {x},
                             [argmax = std::move(argmax)](Node &self) {
                               Node &a = in(self, 0);
                               if (!a.requires_grad) return;
                               auto &ga = a.ensure_grad();
                               for (std::size_t o = 0; o < argmax.size(); ++o) {
                                 ga[argmax[o]] += self.grad[o];
                               }
                             });
}

Tensor broadcast_spatial(const Tensor &v, std::size_t height,
                         std::size_t width) {
  require_rank(v, 2, "broadcast_spatial", "input");
  const std::size_t rows = v.dim(0) * v.dim(1);
  const std::size_t plane = height * width;
  std::vector<double> out(rows * plane);
  for (std::size_t r = 0; r < rows; ++r) {
    std::fill(out.begin() + r * plane, out.begin() + (r + 1) * plane,
              v.data()[r]);
  }
  return detail::make_result(
      "broadcast_spatial", {v.dim(0), v.dim(1), height, width}, std::move(out),
      {v}, [rows, plane](Node &self) {
        Node &a = in(self, 0);
        if (!a.requires_grad) return;
        auto &ga = a.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) acc += self.grad[r * plane + i];
          ga[r] += acc;
        }
      });
}

Tensor reshape(const Tensor &x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {x},
                             [](Node &self) {
                               Node &a = in(self, 0);
                               if (!a.requires_grad) return;
                               auto &ga = a.ensure_grad();
                               for (std::size_t i = 0; i < ga.size(); ++i) {
                                 ga[i] += self.grad[i];
                               }
                             });
}

Tensor gather_pixels(const Tensor &x, std::span<const PixelIndex> pixels) {
  require_rank(x, 4, "gather_pixels", "input");
  const std::size_t n_batch = x.dim(0);
  const std::size_t channels = x.dim(1);
  const std::size_t h = x.dim(2);
  const std::size_t w = x.dim(3);
  std::vector<std::size_t> base;
  base.reserve(pixels.size());
  for (const PixelIndex &p : pixels) {
    if (p.n >= n_batch || p.y >= h || p.x >= w) {
      throw DimensionError("gather_pixels: pixel (n=" + std::to_string(p.n) +
                           ", y=" + std::to_string(p.y) + ", x=" +
                           std::to_string(p.x) + ") outside " +
                           shape_str(x.shape()));
    }
    base.push_back(p.n * channels * h * w + p.y * w + p.x);
  }
  const std::size_t plane = h * w;
  std::vector<double> out(pixels.size() * channels);
  for (std::size_t m = 0; m < base.size(); ++m) {
    for (std::size_t c = 0; c < channels; ++c) {
      out[m * channels + c] = x.data()[base[m] + c * plane];
    }
  }
  return detail::make_result(
      "gather_pixels", {pixels.size(), channels}, std::move(out), {x},
      [base = std::move(base), channels, plane](Node &self) {
        Node &a = in(self, 0);
        if (!a.requires_grad) return;
        auto &ga = a.ensure_grad();
        for (std::size_t m = 0; m < base.size(); ++m) {
          for (std::size_t c = 0; c < channels; ++c) {
            ga[base[m] + c * plane] += self.grad[m * channels + c];
          }
        }
      });
}

Tensor bce_sum(const Tensor &scores, std::span<const int> labels) {
  check_labels(labels, scores.size(), "bce_sum");
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double s = scores.data()[i];
    if (!(s > 0.0 && s < 1.0)) {
      throw ContractError("bce_sum: score " + std::to_string(s) +
                          " outside the open interval (0,1)");
    }
    total -= std::log(labels[i] == 1 ? s : 1.0 - s);
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return detail::make_result("bce_sum", {}, {total}, {scores},
                             [lab = std::move(lab)](Node &self) {
                               Node &a = in(self, 0);
                               if (!a.requires_grad) return;
                               auto &ga = a.ensure_grad();
                               const double g = self.grad[0];
                               for (std::size_t i = 0; i < lab.size(); ++i) {
                                 const double s = a.data[i];
                                 ga[i] += lab[i] == 1 ? -g / s : g / (1.0 - s);
                               }
                             });
}

Tensor bce_with_logits_sum(const Tensor &logits, std::span<const int> labels) {
  check_labels(labels, logits.size(), "bce_with_logits_sum");
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double z = logits.data()[i];
    total += labels[i] == 1 ? softplus(-z) : softplus(z);
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return detail::make_result(
      "bce_with_logits_sum", {}, {total}, {logits},
      [lab = std::move(lab)](Node &self) {
        Node &a = in(self, 0);
        if (!a.requires_grad) return;
        auto &ga = a.ensure_grad();
        const double g = self.grad[0];
        for (std::size_t i = 0; i < lab.size(); ++i) {
          // d/dz softplus(-z) = sigmoid(z) - 1, d/dz softplus(z) = sigmoid(z).
          const double z = a.data[i];
          const double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z))
                                  : std::exp(z) / (1.0 + std::exp(z));
          ga[i] += g * (lab[i] == 1 ? s - 1.0 : s);
        }
      });
}

}  // namespace fopa

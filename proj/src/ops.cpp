// SPDX-License-Identifier: Apache-2.0
#include "sevnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sevnet {

namespace {

thread_local MacCounter* g_mac_counter = nullptr;
thread_local std::uint64_t* g_relu_probe = nullptr;
std::string g_sabotaged_op;

double sabotage_factor(const char* op) {
  return g_sabotaged_op == op ? 1.01 : 1.0;
}

void require_rank(const Tensor& t, int rank, const char* op) {
  if (!t.defined())
    throw std::invalid_argument(std::string(op) + ": undefined input");
  if (t.rank() != rank)
    throw std::invalid_argument(std::string(op) + ": expected rank " +
                                std::to_string(rank) + " input, got " +
                                to_string(t.shape()));
}

const char* axis_name(int axis) {
  static const char* names[] = {"time", "height", "width"};
  return names[axis];
}

// C[M x P] += A[M x K] * B[K x P], all row-major and dense.
void gemm_nn(std::int64_t M, std::int64_t K, std::int64_t P, const double* A,
             const double* B, double* C) {
  constexpr std::int64_t kTile = 512;
  for (std::int64_t p0 = 0; p0 < P; p0 += kTile) {
    const std::int64_t pn = std::min(kTile, P - p0);
    std::int64_t m = 0;
    for (; m + 4 <= M; m += 4) {
      double* c0 = C + (m + 0) * P + p0;
      double* c1 = C + (m + 1) * P + p0;
      double* c2 = C + (m + 2) * P + p0;
      double* c3 = C + (m + 3) * P + p0;
      for (std::int64_t k = 0; k < K; ++k) {
        const double a0 = A[(m + 0) * K + k];
        const double a1 = A[(m + 1) * K + k];
        const double a2 = A[(m + 2) * K + k];
        const double a3 = A[(m + 3) * K + k];
        const double* b = B + k * P + p0;
        for (std::int64_t p = 0; p < pn; ++p) {
          const double bv = b[p];
          c0[p] += a0 * bv;
          c1[p] += a1 * bv;
          c2[p] += a2 * bv;
          c3[p] += a3 * bv;
        }
      }
    }
    for (; m < M; ++m) {
      double* c = C + m * P + p0;
      for (std::int64_t k = 0; k < K; ++k) {
        const double a = A[m * K + k];
        const double* b = B + k * P + p0;
        for (std::int64_t p = 0; p < pn; ++p) c[p] += a * b[p];
      }
    }
  }
}

// C[M x K] += A[M x P] * B[K x P]^T
void gemm_nt(std::int64_t M, std::int64_t K, std::int64_t P, const double* A,
             const double* B, double* C) {
  for (std::int64_t m = 0; m < M; ++m) {
    const double* a = A + m * P;
    for (std::int64_t k = 0; k < K; ++k) {
      const double* b = B + k * P;
      double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      std::int64_t p = 0;
      for (; p + 4 <= P; p += 4) {
        s0 += a[p] * b[p];
        s1 += a[p + 1] * b[p + 1];
        s2 += a[p + 2] * b[p + 2];
        s3 += a[p + 3] * b[p + 3];
      }
      for (; p < P; ++p) s0 += a[p] * b[p];
      C[m * K + k] += (s0 + s1) + (s2 + s3);
    }
  }
}

// C[K x P] += A[M x K]^T * B[M x P]
void gemm_tn(std::int64_t M, std::int64_t K, std::int64_t P, const double* A,
             const double* B, double* C) {
  constexpr std::int64_t kTile = 512;
  for (std::int64_t p0 = 0; p0 < P; p0 += kTile) {
    const std::int64_t pn = std::min(kTile, P - p0);
    for (std::int64_t m = 0; m < M; ++m) {
      const double* b = B + m * P + p0;
      for (std::int64_t k = 0; k < K; ++k) {
        const double a = A[m * K + k];
        double* c = C + k * P + p0;
        for (std::int64_t p = 0; p < pn; ++p) c[p] += a * b[p];
      }
    }
  }
}

struct ConvGeometry {
  std::int64_t N, C, T, H, W;       // input
  std::int64_t To, Ho, Wo;          // output
  std::int64_t cin_g, cout_g, rows, cols;
  bool pointwise;
};

ConvGeometry conv_geometry(const Shape& in, const Shape& out,
                           const Conv3dSpec& spec) {
  ConvGeometry g{};
  g.N = in[0];
  g.C = in[1];
  g.T = in[2];
  g.H = in[3];
  g.W = in[4];
  g.To = out[2];
  g.Ho = out[3];
  g.Wo = out[4];
  g.cin_g = spec.in_channels / spec.groups;
  g.cout_g = spec.out_channels / spec.groups;
  g.rows = g.cin_g * spec.kernel_volume();
  g.cols = g.To * g.Ho * g.Wo;
  g.pointwise = spec.kernel == Triple{1, 1, 1} &&
                spec.stride == Triple{1, 1, 1} &&
                spec.padding == Triple{0, 0, 0};
  return g;
}

// Gathers the receptive fields of `cin_g` channels starting at `src` into a
// rows x cols matrix; out-of-bounds taps read zero.
void im2col(const double* src, const ConvGeometry& g, const Conv3dSpec& s,
            double* col) {
  const auto [kt, kh, kw] = s.kernel;
  const auto [st, sh, sw] = s.stride;
  const auto [pt, ph, pw] = s.padding;
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < g.cin_g; ++c) {
    const double* plane = src + c * g.T * g.H * g.W;
    for (std::int64_t a = 0; a < kt; ++a)
      for (std::int64_t b = 0; b < kh; ++b)
        for (std::int64_t d = 0; d < kw; ++d, ++row) {
          double* dst = col + row * g.cols;
          for (std::int64_t ot = 0; ot < g.To; ++ot) {
            const std::int64_t it = ot * st - pt + a;
            for (std::int64_t oh = 0; oh < g.Ho; ++oh) {
              const std::int64_t ih = oh * sh - ph + b;
              double* out = dst + (ot * g.Ho + oh) * g.Wo;
              if (it < 0 || it >= g.T || ih < 0 || ih >= g.H) {
                std::fill(out, out + g.Wo, 0.0);
                continue;
              }
              const double* in = plane + (it * g.H + ih) * g.W;
              for (std::int64_t ow = 0; ow < g.Wo; ++ow) {
                const std::int64_t iw = ow * sw - pw + d;
                out[ow] = (iw >= 0 && iw < g.W) ? in[iw] : 0.0;
              }
            }
          }
        }
  }
}

// Scatter-adds a rows x cols column matrix back onto `cin_g` input planes.
void col2im(const double* col, const ConvGeometry& g, const Conv3dSpec& s,
            double* dst) {
  const auto [kt, kh, kw] = s.kernel;
  const auto [st, sh, sw] = s.stride;
  const auto [pt, ph, pw] = s.padding;
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < g.cin_g; ++c) {
    double* plane = dst + c * g.T * g.H * g.W;
    for (std::int64_t a = 0; a < kt; ++a)
      for (std::int64_t b = 0; b < kh; ++b)
        for (std::int64_t d = 0; d < kw; ++d, ++row) {
          const double* src = col + row * g.cols;
          for (std::int64_t ot = 0; ot < g.To; ++ot) {
            const std::int64_t it = ot * st - pt + a;
            if (it < 0 || it >= g.T) continue;
            for (std::int64_t oh = 0; oh < g.Ho; ++oh) {
              const std::int64_t ih = oh * sh - ph + b;
              if (ih < 0 || ih >= g.H) continue;
              const double* in = src + (ot * g.Ho + oh) * g.Wo;
              double* out = plane + (it * g.H + ih) * g.W;
              for (std::int64_t ow = 0; ow < g.Wo; ++ow) {
                const std::int64_t iw = ow * sw - pw + d;
                if (iw >= 0 && iw < g.W) out[iw] += in[ow];
              }
            }
          }
        }
  }
}

std::int64_t inner_size(const Shape& s) {
  std::int64_t n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace

// -- instrumentation -------------------------------------------------------

MacCounter::MacCounter() : previous_(g_mac_counter) { g_mac_counter = this; }
MacCounter::~MacCounter() { g_mac_counter = previous_; }

void detail_add_macs(std::uint64_t n) {
  if (g_mac_counter) g_mac_counter->count_ += n;
}

void testing::set_sabotaged_op(std::string op) { g_sabotaged_op = std::move(op); }

testing::ReluPatternProbe::ReluPatternProbe() : previous_(g_relu_probe) {
  g_relu_probe = &hash_;
}
testing::ReluPatternProbe::~ReluPatternProbe() { g_relu_probe = previous_; }
const std::string& testing::sabotaged_op() { return g_sabotaged_op; }

// -- geometry --------------------------------------------------------------

std::int64_t window_out_extent(std::int64_t in, std::int64_t kernel,
                               std::int64_t stride, std::int64_t pad) {
  const std::int64_t span = in + 2 * pad - kernel;
  if (span < 0) return 0;
  return span / stride + 1;
}

Conv3dSpec Conv3dSpec::make(std::int64_t in_channels, std::int64_t out_channels,
                            Triple kernel, Triple stride, Triple padding,
                            std::int64_t groups, bool has_bias) {
  Conv3dSpec s{in_channels, out_channels, kernel, stride, padding, groups,
               has_bias};
  s.validate();
  return s;
}

void Conv3dSpec::validate() const {
  if (in_channels < 1 || out_channels < 1)
    throw std::invalid_argument("conv3d: channel counts must be positive");
  if (groups < 1)
    throw std::invalid_argument("conv3d: groups must be positive");
  if (in_channels % groups != 0)
    throw std::invalid_argument("conv3d: in_channels " +
                                std::to_string(in_channels) +
                                " not divisible by groups " +
                                std::to_string(groups));
  if (out_channels % groups != 0)
    throw std::invalid_argument("conv3d: out_channels " +
                                std::to_string(out_channels) +
                                " not divisible by groups " +
                                std::to_string(groups));
  for (int a = 0; a < 3; ++a) {
    if (kernel[a] < 1 || stride[a] < 1 || padding[a] < 0)
      throw std::invalid_argument(std::string("conv3d: invalid ") +
                                  axis_name(a) + " kernel/stride/padding");
  }
}

Shape Conv3dSpec::weight_shape() const {
  return {out_channels, in_channels / groups, kernel[0], kernel[1], kernel[2]};
}

std::int64_t Conv3dSpec::weight_count() const {
  return out_channels * (in_channels / groups) * kernel_volume();
}

Shape Conv3dSpec::output_shape(const Shape& in) const {
  if (in.size() != 5)
    throw std::invalid_argument("conv3d: expected N x C x T x H x W input, got " +
                                to_string(in));
  if (in[1] != in_channels)
    throw std::invalid_argument("conv3d: channel axis has " +
                                std::to_string(in[1]) + ", expected " +
                                std::to_string(in_channels));
  Shape out{in[0], out_channels, 0, 0, 0};
  for (int a = 0; a < 3; ++a) {
    out[2 + a] = window_out_extent(in[2 + a], kernel[a], stride[a], padding[a]);
    if (out[2 + a] < 1)
      throw std::invalid_argument(std::string("conv3d: ") + axis_name(a) +
                                  " axis extent " + std::to_string(in[2 + a]) +
                                  " too small for kernel " +
                                  std::to_string(kernel[a]));
  }
  return out;
}

BatchNorm3d::BatchNorm3d(std::int64_t channels)
    : running_mean(static_cast<std::size_t>(channels), 0.0),
      running_var(static_cast<std::size_t>(channels), 1.0) {
  if (channels > 0) {
    gamma = Tensor::full({channels}, 1.0, true);
    beta = Tensor::zeros({channels}, true);
  }
}

// -- conv3d ----------------------------------------------------------------

Tensor conv3d(const Tensor& input, const Conv3dSpec& spec, const Tensor& weight,
              const Tensor& bias) {
  require_rank(input, 5, "conv3d");
  spec.validate();
  const Shape out_shape = spec.output_shape(input.shape());
  if (!weight.defined() || weight.shape() != spec.weight_shape())
    throw std::invalid_argument(
        "conv3d: weight shape " +
        (weight.defined() ? to_string(weight.shape()) : std::string("<none>")) +
        " does not match " + to_string(spec.weight_shape()));
  if (spec.has_bias != bias.defined())
    throw std::invalid_argument("conv3d: bias presence disagrees with spec");
  if (bias.defined() && bias.shape() != Shape{spec.out_channels})
    throw std::invalid_argument("conv3d: bias shape " + to_string(bias.shape()));

  const ConvGeometry g = conv_geometry(input.shape(), out_shape, spec);
  const std::int64_t in_plane = g.C * g.T * g.H * g.W;
  const std::int64_t out_plane = spec.out_channels * g.cols;
  std::vector<double> out(static_cast<std::size_t>(g.N * out_plane), 0.0);
  std::vector<double> col(g.pointwise ? 0 : g.rows * g.cols);

  const double* x = input.data().data();
  const double* w = weight.data().data();
  for (std::int64_t n = 0; n < g.N; ++n) {
    for (std::int64_t grp = 0; grp < spec.groups; ++grp) {
      const double* src = x + n * in_plane + grp * g.cin_g * g.T * g.H * g.W;
      const double* cols = src;
      if (!g.pointwise) {
        im2col(src, g, spec, col.data());
        cols = col.data();
      }
      double* dst = out.data() + n * out_plane + grp * g.cout_g * g.cols;
      gemm_nn(g.cout_g, g.rows, g.cols, w + grp * g.cout_g * g.rows, cols, dst);
      detail_add_macs(static_cast<std::uint64_t>(g.cout_g * g.rows * g.cols));
    }
    if (bias.defined()) {
      const double* b = bias.data().data();
      for (std::int64_t oc = 0; oc < spec.out_channels; ++oc) {
        double* dst = out.data() + n * out_plane + oc * g.cols;
        for (std::int64_t p = 0; p < g.cols; ++p) dst[p] += b[oc];
      }
    }
  }

  auto xin = input.node();
  auto wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result(
      out_shape, std::move(out), "conv3d", {input, weight, bias},
      [xin, wn, bn, spec, g, in_plane, out_plane](detail::Node& self) {
        const double* gout = self.grad.data();
        const double f = sabotage_factor("conv3d");
        std::vector<double> col(g.pointwise ? 0 : g.rows * g.cols);
        std::vector<double> gcol(xin->requires_grad && !g.pointwise
                                     ? g.rows * g.cols
                                     : 0);
        double* gw = wn->requires_grad ? wn->grad_buffer().data() : nullptr;
        double* gx = xin->requires_grad ? xin->grad_buffer().data() : nullptr;
        for (std::int64_t n = 0; n < g.N; ++n) {
          for (std::int64_t grp = 0; grp < spec.groups; ++grp) {
            const std::int64_t in_off =
                n * in_plane + grp * g.cin_g * g.T * g.H * g.W;
            const double* go =
                gout + n * out_plane + grp * g.cout_g * g.cols;
            const double* wg = wn->data.data() + grp * g.cout_g * g.rows;
            if (gw) {
              const double* cols = xin->data.data() + in_off;
              if (!g.pointwise) {
                im2col(cols, g, spec, col.data());
                cols = col.data();
              }
              gemm_nt(g.cout_g, g.rows, g.cols, go, cols,
                      gw + grp * g.cout_g * g.rows);
            }
            if (gx) {
              if (g.pointwise) {
                gemm_tn(g.cout_g, g.rows, g.cols, wg, go, gx + in_off);
              } else {
                std::fill(gcol.begin(), gcol.end(), 0.0);
                gemm_tn(g.cout_g, g.rows, g.cols, wg, go, gcol.data());
                col2im(gcol.data(), g, spec, gx + in_off);
              }
            }
          }
        }
        if (gx && f != 1.0)
          for (auto& v : xin->grad) v *= f;
        if (bn && bn->requires_grad) {
          auto gb = bn->grad_buffer();
          for (std::int64_t n = 0; n < g.N; ++n)
            for (std::int64_t oc = 0; oc < spec.out_channels; ++oc) {
              const double* go = gout + n * out_plane + oc * g.cols;
              double s = 0;
              for (std::int64_t p = 0; p < g.cols; ++p) s += go[p];
              gb[oc] += s;
            }
        }
      });
}

// -- batch norm ------------------------------------------------------------

Tensor batch_norm3d(const Tensor& input, BatchNorm3d& state, Mode mode) {
  if (!input.defined() || input.rank() < 2)
    throw std::invalid_argument("batch_norm3d: expected N x C x ... input");
  const std::int64_t N = input.dim(0), C = input.dim(1);
  if (C != state.channels())
    throw std::invalid_argument("batch_norm3d: channel axis has " +
                                std::to_string(C) + ", state has " +
                                std::to_string(state.channels()));
  const std::int64_t S = inner_size(input.shape());
  const std::int64_t M = N * S;
  const double* x = input.data().data();
  const double* gamma = state.gamma.data().data();
  const double* beta = state.beta.data().data();

  std::vector<double> mean(C), inv_std(C);
  if (mode == Mode::train) {
    for (std::int64_t c = 0; c < C; ++c) {
      double s = 0;
      for (std::int64_t n = 0; n < N; ++n) {
        const double* p = x + (n * C + c) * S;
        for (std::int64_t i = 0; i < S; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(M);
      double v = 0;
      for (std::int64_t n = 0; n < N; ++n) {
        const double* p = x + (n * C + c) * S;
        for (std::int64_t i = 0; i < S; ++i) v += (p[i] - mu) * (p[i] - mu);
      }
      const double var = v / static_cast<double>(M);
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + state.eps);
      const double unbiased = M > 1 ? v / static_cast<double>(M - 1) : var;
      state.running_mean[c] =
          (1 - state.momentum) * state.running_mean[c] + state.momentum * mu;
      state.running_var[c] =
          (1 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    }
  } else {
    for (std::int64_t c = 0; c < C; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + state.eps);
    }
  }

  std::vector<double> out(input.numel());
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const double* p = x + (n * C + c) * S;
      double* o = out.data() + (n * C + c) * S;
      const double scale = gamma[c] * inv_std[c];
      const double shift = beta[c] - mean[c] * scale;
      for (std::int64_t i = 0; i < S; ++i) o[i] = p[i] * scale + shift;
    }

  auto xin = input.node();
  auto gn = state.gamma.node();
  auto bn = state.beta.node();
  const bool batch_stats = mode == Mode::train;
  return detail::make_result(
      input.shape(), std::move(out), "batch_norm3d",
      {input, state.gamma, state.beta},
      [xin, gn, bn, mean, inv_std, N, C, S, M, batch_stats](detail::Node& self) {
        const double* dy = self.grad.data();
        const double* x = xin->data.data();
        const double* gamma = gn->data.data();
        const double f = sabotage_factor("batch_norm3d");
        double* dx = xin->requires_grad ? xin->grad_buffer().data() : nullptr;
        double* dg = gn->requires_grad ? gn->grad_buffer().data() : nullptr;
        double* db = bn->requires_grad ? bn->grad_buffer().data() : nullptr;
        for (std::int64_t c = 0; c < C; ++c) {
          double sum_dy = 0, sum_dy_xhat = 0;
          for (std::int64_t n = 0; n < N; ++n) {
            const double* p = x + (n * C + c) * S;
            const double* g = dy + (n * C + c) * S;
            for (std::int64_t i = 0; i < S; ++i) {
              sum_dy += g[i];
              sum_dy_xhat += g[i] * (p[i] - mean[c]) * inv_std[c];
            }
          }
          if (dg) dg[c] += sum_dy_xhat;
          if (db) db[c] += sum_dy;
          if (!dx) continue;
          const double k = gamma[c] * inv_std[c] * f;
          const double inv_m = 1.0 / static_cast<double>(M);
          for (std::int64_t n = 0; n < N; ++n) {
            const double* p = x + (n * C + c) * S;
            const double* g = dy + (n * C + c) * S;
            double* o = dx + (n * C + c) * S;
            if (batch_stats) {
              for (std::int64_t i = 0; i < S; ++i) {
                const double xhat = (p[i] - mean[c]) * inv_std[c];
                o[i] += k * (g[i] - inv_m * sum_dy - xhat * inv_m * sum_dy_xhat);
              }
            } else {
              for (std::int64_t i = 0; i < S; ++i) o[i] += k * g[i];
            }
          }
        }
      });
}

// -- pointwise -------------------------------------------------------------

Tensor relu(const Tensor& input) {
  std::vector<double> out(input.data().begin(), input.data().end());
  for (auto& v : out) v = v > 0 ? v : 0.0;
  if (g_relu_probe) {
    // FNV-style fold of the active mask.
    std::uint64_t h = *g_relu_probe;
    for (double v : input.data()) h = (h ^ (v > 0 ? 1u : 0u)) * 0x100000001b3ULL;
    *g_relu_probe = h;
  }
  auto xin = input.node();
  return detail::make_result(
      input.shape(), std::move(out), "relu", {input}, [xin](detail::Node& self) {
        if (!xin->requires_grad) return;
        const double f = sabotage_factor("relu");
        auto gx = xin->grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i)
          if (xin->data[i] > 0) gx[i] += f * self.grad[i];
      });
}

Tensor sigmoid(const Tensor& input) {
  std::vector<double> out(input.data().begin(), input.data().end());
  for (auto& v : out)
    v = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  auto xin = input.node();
  return detail::make_result(
      input.shape(), out, "sigmoid", {input}, [xin, out](detail::Node& self) {
        if (!xin->requires_grad) return;
        const double f = sabotage_factor("sigmoid");
        auto gx = xin->grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i)
          gx[i] += f * self.grad[i] * out[i] * (1.0 - out[i]);
      });
}

// -- pooling ---------------------------------------------------------------

Tensor avg_pool3d(const Tensor& input, Triple kernel, Triple stride) {
  require_rank(input, 5, "avg_pool3d");
  const Shape& in = input.shape();
  Shape out_shape{in[0], in[1], 0, 0, 0};
  for (int a = 0; a < 3; ++a) {
    if (kernel[a] < 1 || stride[a] < 1)
      throw std::invalid_argument("avg_pool3d: invalid kernel/stride");
    out_shape[2 + a] = window_out_extent(in[2 + a], kernel[a], stride[a], 0);
    if (out_shape[2 + a] < 1)
      throw std::invalid_argument(std::string("avg_pool3d: kernel larger than ") +
                                  axis_name(a) + " extent " +
                                  std::to_string(in[2 + a]));
  }
  const std::int64_t NC = in[0] * in[1];
  const std::int64_t T = in[2], H = in[3], W = in[4];
  const std::int64_t To = out_shape[2], Ho = out_shape[3], Wo = out_shape[4];
  const double inv = 1.0 / static_cast<double>(kernel[0] * kernel[1] * kernel[2]);
  std::vector<double> out(NC * To * Ho * Wo);
  const double* x = input.data().data();
  for (std::int64_t q = 0; q < NC; ++q)
    for (std::int64_t ot = 0; ot < To; ++ot)
      for (std::int64_t oh = 0; oh < Ho; ++oh)
        for (std::int64_t ow = 0; ow < Wo; ++ow) {
          double s = 0;
          for (std::int64_t a = 0; a < kernel[0]; ++a)
            for (std::int64_t b = 0; b < kernel[1]; ++b)
              for (std::int64_t d = 0; d < kernel[2]; ++d)
                s += x[((q * T + ot * stride[0] + a) * H + oh * stride[1] + b) * W +
                       ow * stride[2] + d];
          out[((q * To + ot) * Ho + oh) * Wo + ow] = s * inv;
        }
  auto xin = input.node();
  return detail::make_result(
      out_shape, std::move(out), "avg_pool3d", {input},
      [xin, kernel, stride, NC, T, H, W, To, Ho, Wo, inv](detail::Node& self) {
        if (!xin->requires_grad) return;
        const double f = sabotage_factor("avg_pool3d") * inv;
        auto gx = xin->grad_buffer();
        for (std::int64_t q = 0; q < NC; ++q)
          for (std::int64_t ot = 0; ot < To; ++ot)
            for (std::int64_t oh = 0; oh < Ho; ++oh)
              for (std::int64_t ow = 0; ow < Wo; ++ow) {
                const double g = self.grad[((q * To + ot) * Ho + oh) * Wo + ow] * f;
                for (std::int64_t a = 0; a < kernel[0]; ++a)
                  for (std::int64_t b = 0; b < kernel[1]; ++b)
                    for (std::int64_t d = 0; d < kernel[2]; ++d)
                      gx[((q * T + ot * stride[0] + a) * H + oh * stride[1] + b) * W +
                         ow * stride[2] + d] += g;
              }
      });
}

Tensor global_avg_pool3d(const Tensor& input) {
  require_rank(input, 5, "global_avg_pool3d");
  const std::int64_t NC = input.dim(0) * input.dim(1);
  const std::int64_t S = inner_size(input.shape());
  std::vector<double> out(NC);
  const double* x = input.data().data();
  for (std::int64_t q = 0; q < NC; ++q) {
    double s = 0;
    for (std::int64_t i = 0; i < S; ++i) s += x[q * S + i];
    out[q] = s / static_cast<double>(S);
  }
  auto xin = input.node();
  return detail::make_result(
      {input.dim(0), input.dim(1), 1, 1, 1}, std::move(out), "global_avg_pool3d",
      {input}, [xin, NC, S](detail::Node& self) {
        if (!xin->requires_grad) return;
        const double f = sabotage_factor("global_avg_pool3d");
        auto gx = xin->grad_buffer();
        for (std::int64_t q = 0; q < NC; ++q) {
          const double g = f * self.grad[q] / static_cast<double>(S);
          for (std::int64_t i = 0; i < S; ++i) gx[q * S + i] += g;
        }
      });
}

Tensor pool3d(PoolKind kind, const Tensor& input, Triple kernel, Triple stride) {
  return kind == PoolKind::global_average ? global_avg_pool3d(input)
                                          : avg_pool3d(input, kernel, stride);
}

// -- affine head -----------------------------------------------------------

Tensor affine(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "affine");
  require_rank(weight, 2, "affine");
  const std::int64_t N = input.dim(0), C = input.dim(1), K = weight.dim(0);
  if (weight.dim(1) != C)
    throw std::invalid_argument("affine: input has " + std::to_string(C) +
                                " features, weight expects " +
                                std::to_string(weight.dim(1)));
  if (bias.defined() && bias.shape() != Shape{K})
    throw std::invalid_argument("affine: bias shape " + to_string(bias.shape()) +
                                " does not match " + std::to_string(K) +
                                " outputs");
  std::vector<double> out(N * K, 0.0);
  const double* x = input.data().data();
  const double* w = weight.data().data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t k = 0; k < K; ++k) {
      double s = 0;
      for (std::int64_t c = 0; c < C; ++c) s += x[n * C + c] * w[k * C + c];
      out[n * K + k] = s + (bias.defined() ? bias.data()[k] : 0.0);
    }
  detail_add_macs(static_cast<std::uint64_t>(N * K * C));
  auto xin = input.node();
  auto wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result(
      {N, K}, std::move(out), "affine", {input, weight, bias},
      [xin, wn, bn, N, C, K](detail::Node& self) {
        const double* g = self.grad.data();
        const double f = sabotage_factor("affine");
        if (xin->requires_grad) {
          auto gx = xin->grad_buffer();
          for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t k = 0; k < K; ++k)
              for (std::int64_t c = 0; c < C; ++c)
                gx[n * C + c] += f * g[n * K + k] * wn->data[k * C + c];
        }
        if (wn->requires_grad) {
          auto gw = wn->grad_buffer();
          for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t k = 0; k < K; ++k)
              for (std::int64_t c = 0; c < C; ++c)
                gw[k * C + c] += g[n * K + k] * xin->data[n * C + c];
        }
        if (bn && bn->requires_grad) {
          auto gb = bn->grad_buffer();
          for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t k = 0; k < K; ++k) gb[k] += g[n * K + k];
        }
      });
}

// -- dropout ---------------------------------------------------------------

Tensor dropout(const Tensor& input, double rate, Mode mode,
               std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw std::invalid_argument("dropout: rate must lie in [0, 1)");
  if (mode == Mode::eval || rate == 0.0) return input;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> mask(input.numel());
  for (auto& m : mask) m = u(rng) < rate ? 0.0 : keep_scale;
  std::vector<double> out(input.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = input.data()[i] * mask[i];
  auto xin = input.node();
  return detail::make_result(
      input.shape(), std::move(out), "dropout", {input},
      [xin, mask = std::move(mask)](detail::Node& self) {
        if (!xin->requires_grad) return;
        const double f = sabotage_factor("dropout");
        auto gx = xin->grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i)
          gx[i] += f * self.grad[i] * mask[i];
      });
}

// -- structural ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("add: shape mismatch " + to_string(a.shape()) +
                                " vs " + to_string(b.shape()));
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result(
      a.shape(), std::move(out), "add", {a, b}, [an, bn](detail::Node& self) {
        const double f = sabotage_factor("add");
        for (auto* n : {an.get(), bn.get()}) {
          if (!n->requires_grad) continue;
          auto g = n->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * self.grad[i];
        }
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mul: shape mismatch " + to_string(a.shape()) +
                                " vs " + to_string(b.shape()));
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result(
      a.shape(), std::move(out), "mul", {a, b}, [an, bn](detail::Node& self) {
        const double f = sabotage_factor("mul");
        if (an->requires_grad) {
          auto g = an->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += f * self.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
          auto g = bn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += f * self.grad[i] * an->data[i];
        }
      });
}

Tensor sum(const Tensor& input) {
  double s = 0;
  for (double v : input.data()) s += v;
  auto xin = input.node();
  return detail::make_result({1}, {s}, "sum", {input}, [xin](detail::Node& self) {
    if (!xin->requires_grad) return;
    const double f = sabotage_factor("sum");
    for (auto& g : xin->grad_buffer()) g += f * self.grad[0];
  });
}

Tensor flatten(const Tensor& input) {
  if (!input.defined() || input.rank() < 1)
    throw std::invalid_argument("flatten: undefined input");
  auto xin = input.node();
  return detail::make_result(
      {input.dim(0), input.numel() / input.dim(0)}, xin->data, "flatten", {input},
      [xin](detail::Node& self) {
        if (!xin->requires_grad) return;
        const double f = sabotage_factor("flatten");
        auto g = xin->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * self.grad[i];
      });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank(a, 5, "concat_channels");
  require_rank(b, 5, "concat_channels");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] || sa[4] != sb[4])
    throw std::invalid_argument("concat_channels: incompatible shapes " +
                                to_string(sa) + " and " + to_string(sb));
  const std::int64_t N = sa[0];
  const std::int64_t ca = sa[1] * inner_size(sa), cb = sb[1] * inner_size(sb);
  std::vector<double> out(N * (ca + cb));
  for (std::int64_t n = 0; n < N; ++n) {
    std::copy_n(a.data().data() + n * ca, ca, out.data() + n * (ca + cb));
    std::copy_n(b.data().data() + n * cb, cb, out.data() + n * (ca + cb) + ca);
  }
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result(
      {N, sa[1] + sb[1], sa[2], sa[3], sa[4]}, std::move(out), "concat_channels",
      {a, b}, [an, bn, N, ca, cb](detail::Node& self) {
        const double f = sabotage_factor("concat_channels");
        for (std::int64_t n = 0; n < N; ++n) {
          const double* g = self.grad.data() + n * (ca + cb);
          if (an->requires_grad) {
            double* d = an->grad_buffer().data() + n * ca;
            for (std::int64_t i = 0; i < ca; ++i) d[i] += f * g[i];
          }
          if (bn->requires_grad) {
            double* d = bn->grad_buffer().data() + n * cb;
            for (std::int64_t i = 0; i < cb; ++i) d[i] += f * g[ca + i];
          }
        }
      });
}

Tensor scale_channels(const Tensor& input, const Tensor& scale) {
  require_rank(input, 5, "scale_channels");
  const std::int64_t N = input.dim(0), C = input.dim(1);
  if (scale.numel() != N * C || scale.dim(0) != N)
    throw std::invalid_argument("scale_channels: scale shape " +
                                to_string(scale.shape()) + " does not cover " +
                                to_string(input.shape()));
  const std::int64_t S = inner_size(input.shape());
  std::vector<double> out(input.numel());
  for (std::int64_t q = 0; q < N * C; ++q) {
    const double s = scale.data()[q];
    for (std::int64_t i = 0; i < S; ++i)
      out[q * S + i] = input.data()[q * S + i] * s;
  }
  auto xin = input.node();
  auto sn = scale.node();
  return detail::make_result(
      input.shape(), std::move(out), "scale_channels", {input, scale},
      [xin, sn, N, C, S](detail::Node& self) {
        const double f = sabotage_factor("scale_channels");
        for (std::int64_t q = 0; q < N * C; ++q) {
          const double* g = self.grad.data() + q * S;
          if (xin->requires_grad) {
            double* d = xin->grad_buffer().data() + q * S;
            for (std::int64_t i = 0; i < S; ++i) d[i] += f * g[i] * sn->data[q];
          }
          if (sn->requires_grad) {
            double acc = 0;
            const double* x = xin->data.data() + q * S;
            for (std::int64_t i = 0; i < S; ++i) acc += g[i] * x[i];
            sn->grad_buffer()[q] += f * acc;
          }
        }
      });
}

// -- losses ----------------------------------------------------------------

std::vector<double> softmax_rows(std::span<const double> logits,
                                 std::int64_t rows, std::int64_t cols) {
  std::vector<double> p(logits.begin(), logits.end());
  for (std::int64_t r = 0; r < rows; ++r) {
    double* row = p.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double z = 0;
    for (std::int64_t c = 0; c < cols; ++c) z += (row[c] = std::exp(row[c] - mx));
    for (std::int64_t c = 0; c < cols; ++c) row[c] /= z;
  }
  return p;
}

Tensor softmax_cross_entropy(const Tensor& logits,
                             std::span<const std::int64_t> targets) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::int64_t N = logits.dim(0), K = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != N)
    throw std::invalid_argument("softmax_cross_entropy: " +
                                std::to_string(targets.size()) +
                                " targets for batch of " + std::to_string(N));
  for (auto t : targets)
    if (t < 0 || t >= K)
      throw std::invalid_argument("softmax_cross_entropy: target " +
                                  std::to_string(t) + " outside [0, " +
                                  std::to_string(K) + ")");
  const auto& x = logits.data();
  double loss = 0;
  for (std::int64_t n = 0; n < N; ++n) {
    const double* row = x.data() + n * K;
    const double mx = *std::max_element(row, row + K);
    double z = 0;
    for (std::int64_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    loss += (std::log(z) + mx) - row[targets[n]];
  }
  loss /= static_cast<double>(N);
  auto probs = softmax_rows(x, N, K);
  std::vector<std::int64_t> tgt(targets.begin(), targets.end());
  auto ln = logits.node();
  return detail::make_result(
      {1}, {loss}, "softmax_cross_entropy", {logits},
      [ln, probs = std::move(probs), tgt = std::move(tgt), N,
       K](detail::Node& self) {
        if (!ln->requires_grad) return;
        const double f = sabotage_factor("softmax_cross_entropy");
        const double scale = f * self.grad[0] / static_cast<double>(N);
        auto g = ln->grad_buffer();
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t k = 0; k < K; ++k)
            g[n * K + k] +=
                scale * (probs[n * K + k] - (k == tgt[n] ? 1.0 : 0.0));
      });
}

Tensor multilabel_bce(const Tensor& logits, std::span<const double> targets) {
  require_rank(logits, 2, "multilabel_bce");
  if (static_cast<std::int64_t>(targets.size()) != logits.numel())
    throw std::invalid_argument("multilabel_bce: target table has " +
                                std::to_string(targets.size()) +
                                " entries, logits " + to_string(logits.shape()));
  for (double t : targets)
    if (t != 0.0 && t != 1.0)
      throw std::invalid_argument("multilabel_bce: targets must be 0 or 1");
  const auto& x = logits.data();
  const double count = static_cast<double>(x.size());
  double loss = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    loss += std::max(x[i], 0.0) - x[i] * targets[i] +
            std::log1p(std::exp(-std::abs(x[i])));
  loss /= count;
  std::vector<double> tgt(targets.begin(), targets.end());
  auto ln = logits.node();
  return detail::make_result(
      {1}, {loss}, "multilabel_bce", {logits},
      [ln, tgt = std::move(tgt), count](detail::Node& self) {
        if (!ln->requires_grad) return;
        const double f = sabotage_factor("multilabel_bce");
        auto g = ln->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double z = ln->data[i];
          const double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z))
                                  : std::exp(z) / (1.0 + std::exp(z));
          g[i] += f * self.grad[0] * (s - tgt[i]) / count;
        }
      });
}

}  // namespace sevnet

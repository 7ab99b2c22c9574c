#include "wmlab/engine.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

#include "wmlab/checksum.hpp"
#include "wmlab/errors.hpp"

namespace wmlab {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

struct ConvGeom {
  std::size_t n, c, h, w, o, k, stride, pad, ho, wo;
  std::size_t col_rows() const { return c * k * k; }
  std::size_t col_cols() const { return n * ho * wo; }
};

ConvGeom conv_geom(const LayerSpec& l, const Shape& in) {
  ConvGeom g{};
  g.n = in[0], g.c = in[1], g.h = in[2], g.w = in[3];
  g.o = l.out, g.k = l.kernel, g.stride = l.stride, g.pad = l.padding;
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  return g;
}

// col(r, (n, y, x)) with r = (c, ky, kx)
void im2col(const Tensor& x, const ConvGeom& g, std::vector<double>& buf) {
  if (g.pad > 0)
    buf.assign(g.col_rows() * g.col_cols(), 0.0);
  else
    buf.resize(g.col_rows() * g.col_cols());
  const double* src = x.data();
  const std::size_t hw_out = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = buf.data() + ((c * g.k + ky) * g.k + kx) * g.col_cols();
        for (std::size_t n = 0; n < g.n; ++n) {
          const double* plane = src + (n * g.c + c) * g.h * g.w;
          double* dst = row + n * hw_out;
          for (std::size_t y = 0; y < g.ho; ++y) {
            const auto iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            for (std::size_t xo = 0; xo < g.wo; ++xo) {
              const auto ix =
                  static_cast<std::ptrdiff_t>(xo * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
              dst[y * g.wo + xo] = plane[iy * static_cast<std::ptrdiff_t>(g.w) + ix];
            }
          }
        }
      }
}

void col2im(const RowMat& col, const ConvGeom& g, Tensor& dx) {
  double* out = dx.data();
  const std::size_t hw_out = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = col.data() + ((c * g.k + ky) * g.k + kx) * g.col_cols();
        for (std::size_t n = 0; n < g.n; ++n) {
          double* plane = out + (n * g.c + c) * g.h * g.w;
          const double* srcrow = row + n * hw_out;
          for (std::size_t y = 0; y < g.ho; ++y) {
            const auto iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            for (std::size_t xo = 0; xo < g.wo; ++xo) {
              const auto ix =
                  static_cast<std::ptrdiff_t>(xo * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
              plane[iy * static_cast<std::ptrdiff_t>(g.w) + ix] += srcrow[y * g.wo + xo];
            }
          }
        }
      }
}

// `col` receives the im2col matrix for reuse by the backward pass.
Tensor conv_forward(const LayerSpec& l, const Tensor& x, const Tensor& w, const Tensor& b,
                    std::vector<double>& colbuf) {
  const auto g = conv_geom(l, x.shape());
  im2col(x, g, colbuf);
  CMapMat col(colbuf.data(), static_cast<Eigen::Index>(g.col_rows()), static_cast<Eigen::Index>(g.col_cols()));
  CMapMat wm(w.data(), static_cast<Eigen::Index>(g.o), static_cast<Eigen::Index>(g.col_rows()));
  const RowMat y = wm * col;  // [O, N*HoWo]
  Tensor out({g.n, g.o, g.ho, g.wo});
  const std::size_t hw = g.ho * g.wo;
  for (std::size_t o = 0; o < g.o; ++o)
    for (std::size_t n = 0; n < g.n; ++n) {
      const double* src = y.data() + o * g.col_cols() + n * hw;
      double* dst = out.data() + (n * g.o + o) * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + b[o];
    }
  return out;
}

// Returns dx (empty when !need_dx); accumulates dw, db.
Tensor conv_backward(const LayerSpec& l, const Tensor& x, const std::vector<double>& cached_col, const Tensor& w,
                     const Tensor& dy, Tensor& dw, Tensor& db, bool need_dx) {
  const auto g = conv_geom(l, x.shape());
  const std::size_t hw = g.ho * g.wo;
  RowMat d(static_cast<Eigen::Index>(g.o), static_cast<Eigen::Index>(g.col_cols()));
  for (std::size_t o = 0; o < g.o; ++o)
    for (std::size_t n = 0; n < g.n; ++n) {
      const double* src = dy.data() + (n * g.o + o) * hw;
      double* dst = d.data() + o * g.col_cols() + n * hw;
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) {
        dst[i] = src[i];
        s += src[i];
      }
      db[o] += s;
    }
  std::vector<double> local;
  if (cached_col.size() != g.col_rows() * g.col_cols()) im2col(x, g, local);
  const std::vector<double>& colbuf = local.empty() ? cached_col : local;
  CMapMat col(colbuf.data(), static_cast<Eigen::Index>(g.col_rows()), static_cast<Eigen::Index>(g.col_cols()));
  MapMat dwm(dw.data(), static_cast<Eigen::Index>(g.o), static_cast<Eigen::Index>(g.col_rows()));
  dwm.noalias() += d * col.transpose();
  if (!need_dx) return {};
  CMapMat wm(w.data(), static_cast<Eigen::Index>(g.o), static_cast<Eigen::Index>(g.col_rows()));
  const RowMat dcol = wm.transpose() * d;
  Tensor dx(x.shape(), 0.0);
  col2im(dcol, g, dx);
  return dx;
}

Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  const auto n = static_cast<Eigen::Index>(x.dim(0));
  const auto in = static_cast<Eigen::Index>(x.dim(1));
  const auto out = static_cast<Eigen::Index>(w.dim(0));
  Tensor y({x.dim(0), w.dim(0)});
  MapMat ym(y.data(), n, out);
  ym.noalias() = CMapMat(x.data(), n, in) * CMapMat(w.data(), out, in).transpose();
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index c = 0; c < out; ++c) ym(r, c) += b[static_cast<std::size_t>(c)];
  return y;
}

Tensor dense_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor& dw, Tensor& db,
                      bool need_dx) {
  const auto n = static_cast<Eigen::Index>(x.dim(0));
  const auto in = static_cast<Eigen::Index>(x.dim(1));
  const auto out = static_cast<Eigen::Index>(w.dim(0));
  CMapMat dym(dy.data(), n, out);
  MapMat(dw.data(), out, in).noalias() += dym.transpose() * CMapMat(x.data(), n, in);
  for (Eigen::Index c = 0; c < out; ++c) db[static_cast<std::size_t>(c)] += dym.col(c).sum();
  if (!need_dx) return {};
  Tensor dx(x.shape());
  MapMat(dx.data(), n, in).noalias() = dym * CMapMat(w.data(), out, in);
  return dx;
}

// Batchnorm view: N x C x S where S = spatial size (1 for dense inputs).
struct BnView {
  std::size_t n, c, s;
};

BnView bn_view(const Tensor& x) {
  return {x.dim(0), x.dim(1), x.rank() == 4 ? x.dim(2) * x.dim(3) : 1};
}

ChannelStats channel_moments(const Tensor& x) {
  const auto v = bn_view(x);
  ChannelStats st{std::vector<double>(v.c, 0.0), std::vector<double>(v.c, 0.0)};
  const double m = static_cast<double>(v.n * v.s);
  for (std::size_t c = 0; c < v.c; ++c) {
    double sum = 0.0;
    for (std::size_t n = 0; n < v.n; ++n) {
      const double* p = x.data() + (n * v.c + c) * v.s;
      for (std::size_t i = 0; i < v.s; ++i) sum += p[i];
    }
    const double mean = sum / m;
    double sq = 0.0;
    for (std::size_t n = 0; n < v.n; ++n) {
      const double* p = x.data() + (n * v.c + c) * v.s;
      for (std::size_t i = 0; i < v.s; ++i) sq += (p[i] - mean) * (p[i] - mean);
    }
    st.mean[c] = mean;
    st.var[c] = sq / m;
  }
  return st;
}

void apply_mask(Tensor& t, const std::vector<std::uint8_t>& mask) {
  const std::size_t n = t.dim(0), c = t.dim(1), s = t.size() / (n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      if (!mask[ch]) std::fill_n(t.data() + (i * c + ch) * s, s, 0.0);
}

ForwardResult forward_impl(const ModelState& model, const Tensor& batch, const ForwardOptions& opts,
                           std::map<std::size_t, BnStats>* running) {
  const auto& in = model.input_shape;
  if (batch.rank() != in.size() + 1 || !std::equal(in.begin(), in.end(), batch.shape().begin() + 1))
    throw ConfigError("batch shape " + shape_str(batch.shape()) + " does not match model input " + shape_str(in));
  if (opts.mode == BnMode::CleanStats && opts.clean_stats == nullptr)
    throw ArgumentError("CleanStats mode requires an injected clean-batch summary");

  ForwardResult res;
  res.cache.layers.resize(model.layers.size());
  Tensor x = batch;
  std::size_t slot = 0;
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    const auto& l = model.layers[li];
    auto& lc = res.cache.layers[li];
    lc.input = x;
    switch (l.kind) {
      case LayerKind::Conv2d:
        x = conv_forward(l, x, model.params[slot], model.params[slot + 1], lc.col);
        slot += 2;
        break;
      case LayerKind::Dense:
        x = dense_forward(x, model.params[slot], model.params[slot + 1]);
        slot += 2;
        break;
      case LayerKind::Relu:
        for (auto& v : x.values()) v = v > 0.0 ? v : 0.0;
        break;
      case LayerKind::Flatten: x = x.reshaped({x.dim(0), x.row_size()}); break;
      case LayerKind::MaxPool: {
        const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        const std::size_t k = l.kernel, st = l.stride;
        const std::size_t ho = (h - k) / st + 1, wo = (w - k) / st + 1;
        Tensor y({n, c, ho, wo});
        lc.argmax.resize(y.size());
        for (std::size_t p = 0; p < n * c; ++p) {
          const double* plane = x.data() + p * h * w;
          for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
              std::size_t best = (oy * st) * w + ox * st;
              for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const std::size_t idx = (oy * st + ky) * w + ox * st + kx;
                  if (plane[idx] > plane[best]) best = idx;
                }
              const std::size_t o = p * ho * wo + oy * wo + ox;
              y[o] = plane[best];
              lc.argmax[o] = static_cast<std::uint32_t>(p * h * w + best);
            }
        }
        x = std::move(y);
        break;
      }
      case LayerKind::BatchNorm: {
        const auto v = bn_view(x);
        const Tensor& gamma = model.params[slot];
        const Tensor& beta = model.params[slot + 1];
        slot += 2;
        ChannelStats observed = channel_moments(x);
        const BnStats& bs = model.bn_stats.at(li);
        std::vector<double> mean, var;
        switch (opts.mode) {
          case BnMode::TrainStandard:
            mean = observed.mean, var = observed.var;
            lc.batch_normalized = true;
            if (running) {
              auto& r = running->at(li);
              const double m = static_cast<double>(v.n * v.s);
              const double unbias = m > 1 ? m / (m - 1) : 1.0;
              for (std::size_t c = 0; c < v.c; ++c) {
                r.running_mean[c] = (1 - r.momentum) * r.running_mean[c] + r.momentum * mean[c];
                r.running_var[c] = (1 - r.momentum) * r.running_var[c] + r.momentum * var[c] * unbias;
              }
            }
            break;
          case BnMode::Eval:
            mean = bs.running_mean, var = bs.running_var;
            break;
          case BnMode::CleanStats: {
            auto it = opts.clean_stats->layers.find(li);
            if (it == opts.clean_stats->layers.end() || it->second.mean.size() != v.c ||
                it->second.var.size() != v.c)
              throw ArgumentError("clean-batch summary does not cover batchnorm layer " + std::to_string(li) +
                                  " with " + std::to_string(v.c) + " channels");
            mean = it->second.mean, var = it->second.var;
            break;
          }
        }
        res.cache.observed.layers[li] = std::move(observed);
        res.cache.applied.layers[li] = ChannelStats{mean, var};
        lc.inv_std.resize(v.c);
        for (std::size_t c = 0; c < v.c; ++c) lc.inv_std[c] = 1.0 / std::sqrt(var[c] + bs.eps);
        lc.xhat = Tensor(x.shape());
        Tensor y(x.shape());
        for (std::size_t n = 0; n < v.n; ++n)
          for (std::size_t c = 0; c < v.c; ++c) {
            const std::size_t off = (n * v.c + c) * v.s;
            for (std::size_t i = 0; i < v.s; ++i) {
              const double xh = (x[off + i] - mean[c]) * lc.inv_std[c];
              lc.xhat[off + i] = xh;
              y[off + i] = gamma[c] * xh + beta[c];
            }
          }
        x = std::move(y);
        break;
      }
    }
    if (auto m = model.channel_masks.find(li); m != model.channel_masks.end()) apply_mask(x, m->second);
    if (!x.all_finite())
      throw NumericError("non-finite activation at layer " + std::to_string(li) + " (" + to_string(l.kind) + ")",
                         static_cast<int>(li));
  }
  res.logits = std::move(x);
  return res;
}

LossGrad loss_grad_impl(const ModelState& model, const Tensor& batch, std::span<const int> labels,
                        std::span<const double> weights, const ForwardOptions& opts,
                        std::map<std::size_t, BnStats>* running) {
  if (batch.rank() == 0 || batch.dim(0) == 0 || labels.empty()) throw ArgumentError("empty batch");
  if (labels.size() != batch.dim(0)) throw ArgumentError("label count does not match batch size");
  auto fr = forward_impl(model, batch, opts, running);
  LossGrad lg;
  Tensor dlogits;
  lg.loss = softmax_cross_entropy(fr.logits, labels, weights, &dlogits);
  lg.grads = backward(model, fr.cache, dlogits);
  lg.logits = std::move(fr.logits);
  lg.observed = std::move(fr.cache.observed);
  lg.applied = std::move(fr.cache.applied);
  return lg;
}

}  // namespace

std::string to_string(BnMode m) {
  switch (m) {
    case BnMode::TrainStandard: return "train";
    case BnMode::Eval: return "eval";
    case BnMode::CleanStats: return "clean-stats";
  }
  return "?";
}

std::string BatchStatsSummary::checksum() const {
  std::vector<double> flat;
  for (const auto& [idx, st] : layers) {
    flat.push_back(static_cast<double>(idx));
    flat.insert(flat.end(), st.mean.begin(), st.mean.end());
    flat.insert(flat.end(), st.var.begin(), st.var.end());
  }
  return sha256_doubles(flat);
}

ForwardResult forward(ModelState& model, const Tensor& batch, const ForwardOptions& opts) {
  const bool update = opts.mode == BnMode::TrainStandard && opts.update_running_stats;
  return forward_impl(model, batch, opts, update ? &model.bn_stats : nullptr);
}

ForwardResult forward(const ModelState& model, const Tensor& batch, const ForwardOptions& opts) {
  if (opts.mode == BnMode::TrainStandard && opts.update_running_stats)
    throw ArgumentError("TrainStandard with running-stat updates needs a mutable model");
  return forward_impl(model, batch, opts, nullptr);
}

GradientSet backward(const ModelState& model, const ForwardCache& cache, const Tensor& dlogits) {
  GradientSet grads = model.params.zeros_like();
  Tensor dy = dlogits;
  std::size_t slot = model.params.count();
  for (std::size_t li = model.layers.size(); li-- > 0;) {
    const auto& l = model.layers[li];
    const auto& lc = cache.layers.at(li);
    const bool need_dx = li > 0;
    if (auto m = model.channel_masks.find(li); m != model.channel_masks.end()) apply_mask(dy, m->second);
    switch (l.kind) {
      case LayerKind::Conv2d:
        slot -= 2;
        dy = conv_backward(l, lc.input, lc.col, model.params[slot], dy, grads[slot], grads[slot + 1], need_dx);
        break;
      case LayerKind::Dense:
        slot -= 2;
        dy = dense_backward(lc.input, model.params[slot], dy, grads[slot], grads[slot + 1], need_dx);
        break;
      case LayerKind::Relu:
        for (std::size_t i = 0; i < dy.size(); ++i)
          if (!(lc.input[i] > 0.0)) dy[i] = 0.0;
        break;
      case LayerKind::Flatten: dy = dy.reshaped(lc.input.shape()); break;
      case LayerKind::MaxPool: {
        Tensor dx(lc.input.shape(), 0.0);
        for (std::size_t o = 0; o < dy.size(); ++o) dx[lc.argmax[o]] += dy[o];
        dy = std::move(dx);
        break;
      }
      case LayerKind::BatchNorm: {
        slot -= 2;
        const Tensor& gamma = model.params[slot];
        Tensor& dgamma = grads[slot];
        Tensor& dbeta = grads[slot + 1];
        const auto v = bn_view(lc.input);
        const double m = static_cast<double>(v.n * v.s);
        Tensor dx(lc.input.shape());
        for (std::size_t c = 0; c < v.c; ++c) {
          double sum_dy = 0.0, sum_dy_xh = 0.0;
          for (std::size_t n = 0; n < v.n; ++n) {
            const std::size_t off = (n * v.c + c) * v.s;
            for (std::size_t i = 0; i < v.s; ++i) {
              sum_dy += dy[off + i];
              sum_dy_xh += dy[off + i] * lc.xhat[off + i];
            }
          }
          dgamma[c] += sum_dy_xh;
          dbeta[c] += sum_dy;
          const double k = gamma[c] * lc.inv_std[c];
          for (std::size_t n = 0; n < v.n; ++n) {
            const std::size_t off = (n * v.c + c) * v.s;
            for (std::size_t i = 0; i < v.s; ++i) {
              if (lc.batch_normalized)
                dx[off + i] = k / m * (m * dy[off + i] - sum_dy - lc.xhat[off + i] * sum_dy_xh);
              else
                dx[off + i] = k * dy[off + i];
            }
          }
        }
        dy = std::move(dx);
        break;
      }
    }
    if (!need_dx) break;
  }
  return grads;
}

double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, std::span<const double> weights,
                             Tensor* dlogits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n || weights.size() != n) throw ArgumentError("cross-entropy: size mismatch");
  if (dlogits) *dlogits = Tensor(logits.shape(), 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw ArgumentError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(k) + ")");
    const double* row = logits.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    loss += weights[i] * (lse - row[labels[i]]);
    if (dlogits) {
      double* d = dlogits->data() + i * k;
      for (std::size_t j = 0; j < k; ++j) d[j] = weights[i] * std::exp(row[j] - lse);
      d[labels[i]] -= weights[i];
    }
  }
  return loss;
}

LossGrad loss_and_grad(ModelState& model, const Tensor& batch, std::span<const int> labels,
                       const ForwardOptions& opts) {
  const std::vector<double> w(labels.size(), labels.empty() ? 0.0 : 1.0 / static_cast<double>(labels.size()));
  return loss_and_grad_weighted(model, batch, labels, w, opts);
}

LossGrad loss_and_grad(const ModelState& model, const Tensor& batch, std::span<const int> labels,
                       const ForwardOptions& opts) {
  const std::vector<double> w(labels.size(), labels.empty() ? 0.0 : 1.0 / static_cast<double>(labels.size()));
  return loss_and_grad_weighted(model, batch, labels, w, opts);
}

LossGrad loss_and_grad_weighted(ModelState& model, const Tensor& batch, std::span<const int> labels,
                                std::span<const double> weights, const ForwardOptions& opts) {
  const bool update = opts.mode == BnMode::TrainStandard && opts.update_running_stats;
  return loss_grad_impl(model, batch, labels, weights, opts, update ? &model.bn_stats : nullptr);
}

LossGrad loss_and_grad_weighted(const ModelState& model, const Tensor& batch, std::span<const int> labels,
                                std::span<const double> weights, const ForwardOptions& opts) {
  if (opts.mode == BnMode::TrainStandard && opts.update_running_stats)
    throw ArgumentError("TrainStandard with running-stat updates needs a mutable model");
  return loss_grad_impl(model, batch, labels, weights, opts, nullptr);
}

void sgd_step(ModelState& model, const GradientSet& grads, const SgdOptions& opts, GradientSet& velocity) {
  model.params.require_same_layout(grads, "sgd_step");
  if (velocity.count() == 0) velocity = model.params.zeros_like();
  model.params.require_same_layout(velocity, "sgd_step velocity");
  if (!(opts.lr >= 0.0)) throw ArgumentError("learning rate must be non-negative");
  if (opts.momentum < 0.0 || opts.momentum >= 1.0) throw ArgumentError("momentum must lie in [0,1)");
  for (std::size_t i = 0; i < model.params.count(); ++i) {
    const auto& name = model.params.name(i);
    const bool bn_affine = name.ends_with(".gamma") || name.ends_with(".beta");
    const double wd = (bn_affine && !opts.decay_bn_affine) ? 0.0 : opts.weight_decay;
    auto& p = model.params[i];
    auto& v = velocity[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = opts.momentum * v[j] + g[j];
      p[j] = p[j] - opts.lr * v[j] - opts.lr * wd * p[j];
    }
  }
}

double l2_norm(const ParamSet& p) { return std::sqrt(dot(p, p)); }

double dot(const ParamSet& a, const ParamSet& b) {
  a.require_same_layout(b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.count(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) s += a[i][j] * b[i][j];
  return s;
}

void axpy(ParamSet& y, double a, const ParamSet& x) {
  y.require_same_layout(x, "axpy");
  for (std::size_t i = 0; i < y.count(); ++i)
    for (std::size_t j = 0; j < y[i].size(); ++j) y[i][j] += a * x[i][j];
}

void scale(ParamSet& p, double a) {
  for (std::size_t i = 0; i < p.count(); ++i)
    for (auto& v : p[i].values()) v *= a;
}

double param_l2_norm(const ModelState& model) { return l2_norm(model.params); }

ModelState add_scaled(const ModelState& model, const GradientSet& direction, double s) {
  model.params.require_same_layout(direction, "add_scaled");
  ModelState out = model;
  if (s != 0.0) axpy(out.params, s, direction);
  return out;
}

ModelState bn_reestimate(const ModelState& model, const Tensor& clean_images, int passes, std::size_t batch_size) {
  if (passes < 1) throw ArgumentError("bn_reestimate: passes must be >= 1");
  if (clean_images.rank() == 0 || clean_images.dim(0) == 0) throw ArgumentError("bn_reestimate: empty dataset");
  ModelState out = model;
  if (out.bn_stats.empty()) return out;
  const std::size_t n = clean_images.dim(0);
  for (int pass = 0; pass < passes; ++pass) {
    ForwardOptions opts{.mode = pass == 0 ? BnMode::TrainStandard : BnMode::Eval, .update_running_stats = false};
    std::map<std::size_t, std::vector<double>> sum, sumsq;
    std::map<std::size_t, double> count;
    for (std::size_t b = 0; b < n; b += batch_size) {
      const auto fr = forward(static_cast<const ModelState&>(out), clean_images.slice_rows(b, std::min(n, b + batch_size)), opts);
      for (const auto& [li, st] : fr.cache.observed.layers) {
        const auto& x = fr.cache.layers[li].input;
        const double m = static_cast<double>(x.size() / st.mean.size());
        auto& s1 = sum[li];
        auto& s2 = sumsq[li];
        s1.resize(st.mean.size(), 0.0);
        s2.resize(st.mean.size(), 0.0);
        for (std::size_t c = 0; c < st.mean.size(); ++c) {
          s1[c] += m * st.mean[c];
          s2[c] += m * (st.var[c] + st.mean[c] * st.mean[c]);
        }
        count[li] += m;
      }
    }
    for (auto& [li, bs] : out.bn_stats) {
      const double m = count.at(li);
      for (std::size_t c = 0; c < bs.running_mean.size(); ++c) {
        const double mean = sum[li][c] / m;
        const double var = sumsq[li][c] / m - mean * mean;
        bs.running_mean[c] = mean;
        bs.running_var[c] = std::max(var, 1e-12);
      }
    }
  }
  return out;
}

BatchStatsSummary collect_bn_stats(const ModelState& model, const Tensor& batch, BnMode mode) {
  if (batch.rank() == 0 || batch.dim(0) == 0) throw ArgumentError("collect_bn_stats: empty batch");
  if (mode == BnMode::CleanStats) throw ArgumentError("collect_bn_stats: CleanStats needs an injected summary");
  return forward(model, batch, ForwardOptions{.mode = mode, .update_running_stats = false}).cache.observed;
}

std::vector<int> predict(const ModelState& model, const Tensor& images, std::size_t batch_size) {
  std::vector<int> out;
  const std::size_t n = images.dim(0);
  out.reserve(n);
  for (std::size_t b = 0; b < n; b += batch_size) {
    const auto fr = forward(model, images.slice_rows(b, std::min(n, b + batch_size)), {.mode = BnMode::Eval});
    const std::size_t k = fr.logits.dim(1);
    for (std::size_t i = 0; i < fr.logits.dim(0); ++i) {
      const double* row = fr.logits.data() + i * k;
      out.push_back(static_cast<int>(std::max_element(row, row + k) - row));
    }
  }
  return out;
}

double evaluate_loss(const ModelState& model, const Tensor& images, std::span<const int> labels,
                     std::size_t batch_size) {
  const std::size_t n = images.dim(0);
  if (n == 0 || labels.size() != n) throw ArgumentError("evaluate_loss: bad inputs");
  double total = 0.0;
  for (std::size_t b = 0; b < n; b += batch_size) {
    const std::size_t e = std::min(n, b + batch_size);
    const auto fr = forward(model, images.slice_rows(b, e), {.mode = BnMode::Eval});
    const std::vector<double> w(e - b, 1.0 / static_cast<double>(n));
    total += softmax_cross_entropy(fr.logits, labels.subspan(b, e - b), w, nullptr);
  }
  return total;
}

Tensor layer_output(const ModelState& model, const Tensor& images, std::size_t layer, std::size_t batch_size) {
  if (layer >= model.layers.size()) throw ArgumentError("layer_output: layer index out of range");
  const std::size_t n = images.dim(0);
  Tensor out;
  for (std::size_t b = 0; b < n; b += batch_size) {
    auto fr = forward(model, images.slice_rows(b, std::min(n, b + batch_size)), {.mode = BnMode::Eval});
    Tensor part = layer + 1 < model.layers.size() ? std::move(fr.cache.layers[layer + 1].input) : std::move(fr.logits);
    out = out.empty() ? std::move(part) : concat_rows(out, part);
  }
  return out;
}

Tensor penultimate_features(const ModelState& model, const Tensor& images, std::size_t batch_size) {
  if (model.layers.size() < 2) throw ConfigError("model has no penultimate layer");
  return layer_output(model, images, model.layers.size() - 2, batch_size);
}

}  // namespace wmlab

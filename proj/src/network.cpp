#include "xbnn/network.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "xbnn/errors.hpp"
#include "xbnn/rng.hpp"

namespace xbnn {

namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

using json = nlohmann::json;

int require_int(const std::string& tok, const std::string& arch) {
  try {
    size_t pos = 0;
    int v = std::stoi(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("bad architecture token '" + tok + "' in \"" + arch + "\"");
  }
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t");
  size_t b = s.find_last_not_of(" \t");
  if (a == std::string::npos) return "";
  return s.substr(a, b - a + 1);
}

struct ArchToken {
  std::string name;
  std::vector<int> args;
};

std::vector<ArchToken> tokenize_arch(const std::string& arch) {
  std::vector<ArchToken> out;
  std::stringstream ss(arch);
  std::string piece;
  while (std::getline(ss, piece, ';')) {
    piece = trim(piece);
    if (piece.empty()) continue;
    ArchToken tok;
    size_t paren = piece.find('(');
    if (paren == std::string::npos) {
      tok.name = piece;
    } else {
      if (piece.back() != ')') throw ConfigError("unbalanced '(' in architecture: " + piece);
      tok.name = trim(piece.substr(0, paren));
      std::string inside = piece.substr(paren + 1, piece.size() - paren - 2);
      std::stringstream as(inside);
      std::string arg;
      while (std::getline(as, arg, ',')) tok.args.push_back(require_int(trim(arg), arch));
    }
    out.push_back(std::move(tok));
  }
  if (out.empty()) throw ConfigError("empty architecture string");
  return out;
}

void init_weighted(Layer& layer, int ordinal, std::uint64_t seed) {
  int fan_in = layer.kind == LayerKind::BinConv ? layer.in_ch * layer.kh * layer.kw
                                                : layer.in_features;
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  RandomStream rs(seed, stream_tag("init"), static_cast<std::uint64_t>(ordinal));
  for (std::size_t i = 0; i < layer.shadow.size(); ++i)
    layer.shadow[i] = rs.next_uniform(-bound, bound);
}

void init_bn(Layer& layer) {
  layer.gamma.assign(layer.channels, 1.0);
  layer.beta.assign(layer.channels, 0.0);
  layer.run_mean.assign(layer.channels, 0.0);
  layer.run_var.assign(layer.channels, 1.0);
}

// Eigen map over one sample's activation block.
using CMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                            Eigen::RowMajor>>;
using MMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Current-domain MVM through the mapped tiles of one layer. A holds one
// activation row per MVM (P x u_rows); each tile sees v_read * A over its
// row slice (zero volts on padding rows), column currents come from the
// extracted equivalent conductances, and the decode inverts the mapping.
// Block-rows accumulate digitally.
Eigen::MatrixXd crossbar_mvm(const MappedLayer& ml, const DeviceConfig& cfg,
                             const Eigen::MatrixXd& A) {
  const int R = cfg.rows;
  const int C = cfg.cols;
  const auto P = A.rows();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(P, ml.u_cols);
  Eigen::MatrixXd V = Eigen::MatrixXd::Zero(P, R);
  for (int bi = 0; bi < ml.block_rows; ++bi) {
    const int r0 = bi * R;
    const int rn = std::min(R, ml.u_rows - r0);
    V.setZero();
    V.block(0, 0, P, rn) = cfg.v_read * A.block(0, r0, P, rn);
    for (int bj = 0; bj < ml.block_cols; ++bj) {
      const CrossbarInstance& inst = ml.tiles[static_cast<size_t>(bi) * ml.block_cols + bj];
      const MappedTile& mt = *inst.mapped;
      const int c0 = bj * C;
      const int cn = std::min(C, ml.u_cols - c0);
      Eigen::MatrixXd I = V * inst.g_equiv;  // P x (C+1), last column = reference
      const double half = (mt.levels.g_max - mt.levels.g_min) / 2.0;
      const double scale = (mt.sel ? -1.0 : 1.0) / (cfg.v_read * half);
      Eigen::MatrixXd dec = (I.leftCols(C).colwise() - I.col(C)) * scale;
      out.block(0, c0, P, cn) += dec.leftCols(cn);
    }
  }
  return out;
}

struct LayerIO {
  // Channel count and spatial dims of an activation; w == 0 marks a flat
  // (N, D) activation with D == c.
  int c = 0, h = 0, w = 0;
  bool flat() const { return w == 0; }
};

LayerIO io_of(const Tensor& t) {
  if (t.rank() == 4) return {t.dim(1), t.dim(2), t.dim(3), };
  if (t.rank() == 2) return {t.dim(1), 1, 0};
  throw DataError("activation tensor must be rank 2 or rank 4");
}

}  // namespace

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::BinConv: return "conv";
    case LayerKind::BinDense: return "dense";
    case LayerKind::Sign: return "sign";
    case LayerKind::MaxPool: return "pool";
    case LayerKind::BatchNorm: return "bn";
    case LayerKind::Flatten: return "flatten";
  }
  return "?";
}

int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

NetworkModel model_from_arch(const std::string& arch, int in_c, int in_h, int in_w,
                             const BinarizationPolicy& policy, std::uint64_t seed,
                             bool input_binary) {
  if (in_c <= 0 || in_h <= 0 || in_w <= 0)
    throw ConfigError("input dimensions must be positive");
  NetworkModel model;
  model.policy = policy;
  model.in_c = in_c;
  model.in_h = in_h;
  model.in_w = in_w;
  model.input_binary = input_binary;
  model.seed = seed;
  model.arch = arch;

  int c = in_c, h = in_h, w = in_w;
  bool flat = false;
  int flat_dim = 0;
  int weighted_ordinal = 0;

  for (const ArchToken& tok : tokenize_arch(arch)) {
    Layer layer;
    if (tok.name == "conv") {
      if (flat) throw ConfigError("conv after flatten in architecture");
      if (tok.args.size() < 2 || tok.args.size() > 4)
        throw ConfigError("conv expects (out,k[,stride[,pad]])");
      layer.kind = LayerKind::BinConv;
      layer.out_ch = tok.args[0];
      layer.kh = layer.kw = tok.args[1];
      layer.stride = tok.args.size() > 2 ? tok.args[2] : 1;
      layer.pad = tok.args.size() > 3 ? tok.args[3] : (tok.args[1] / 2);
      layer.in_ch = c;
      if (layer.out_ch <= 0 || layer.kh <= 0 || layer.stride <= 0 || layer.pad < 0)
        throw ConfigError("bad conv parameters");
      int oh = conv_out_dim(h, layer.kh, layer.stride, layer.pad);
      int ow = conv_out_dim(w, layer.kw, layer.stride, layer.pad);
      if (oh <= 0 || ow <= 0) throw ConfigError("conv output collapses to zero size");
      layer.shadow = Tensor({layer.out_ch, layer.in_ch, layer.kh, layer.kw});
      init_weighted(layer, weighted_ordinal++, seed);
      c = layer.out_ch;
      h = oh;
      w = ow;
    } else if (tok.name == "dense") {
      if (!flat) throw ConfigError("dense requires flatten first");
      if (tok.args.size() != 1) throw ConfigError("dense expects (out)");
      layer.kind = LayerKind::BinDense;
      layer.in_features = flat_dim;
      layer.out_features = tok.args[0];
      if (layer.out_features <= 0) throw ConfigError("bad dense width");
      layer.shadow = Tensor({layer.out_features, layer.in_features});
      init_weighted(layer, weighted_ordinal++, seed);
      flat_dim = layer.out_features;
    } else if (tok.name == "bn") {
      layer.kind = LayerKind::BatchNorm;
      layer.channels = flat ? flat_dim : c;
      init_bn(layer);
    } else if (tok.name == "sign") {
      layer.kind = LayerKind::Sign;
    } else if (tok.name == "pool") {
      if (flat) throw ConfigError("pool after flatten in architecture");
      if (tok.args.size() != 1 || tok.args[0] <= 0) throw ConfigError("pool expects (k)");
      layer.kind = LayerKind::MaxPool;
      layer.pool = tok.args[0];
      if (h % layer.pool != 0 || w % layer.pool != 0)
        throw ConfigError("pool kernel does not divide the spatial size");
      h /= layer.pool;
      w /= layer.pool;
    } else if (tok.name == "flatten") {
      if (flat) throw ConfigError("flatten applied twice");
      layer.kind = LayerKind::Flatten;
      flat = true;
      flat_dim = c * h * w;
    } else {
      throw ConfigError("unknown architecture token '" + tok.name + "'");
    }
    model.layers.push_back(std::move(layer));
  }

  if (model.layers.back().kind != LayerKind::BinDense)
    throw ConfigError("architecture must end with a dense classifier layer");
  model.num_classes = model.layers.back().out_features;
  return model;
}

void apply_backend_plan(NetworkModel& model, const std::string& plan) {
  std::vector<int> weighted;  // layer indices of weighted layers
  for (int l = 0; l < static_cast<int>(model.layers.size()); ++l)
    if (model.layers[l].weighted()) weighted.push_back(l);

  std::vector<bool> on(weighted.size(), false);
  if (plan == "none") {
    // leave all off
  } else if (plan == "all") {
    std::fill(on.begin(), on.end(), true);
  } else if (plan == "auto") {
    for (size_t i = 0; i < on.size(); ++i)
      on[i] = (i > 0) || model.input_binary;
  } else {
    std::stringstream ss(plan);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      tok = trim(tok);
      if (tok.empty()) continue;
      int ord = require_int(tok, plan);
      if (ord < 0 || ord >= static_cast<int>(on.size()))
        throw ConfigError("crossbar plan names weighted layer " + tok + " but the model has " +
                          std::to_string(on.size()));
      on[static_cast<size_t>(ord)] = true;
    }
  }

  for (size_t i = 0; i < weighted.size(); ++i)
    model.layers[static_cast<size_t>(weighted[i])].backend =
        on[i] ? Backend::Crossbar : Backend::Ideal;

  // A crossbar-backed layer drives rows at +-v_read, so its inputs must be
  // exactly +-1: scan back over shape-only layers for a sign stage.
  for (int l = 0; l < static_cast<int>(model.layers.size()); ++l) {
    const Layer& layer = model.layers[static_cast<size_t>(l)];
    if (!layer.weighted() || layer.backend != Backend::Crossbar) continue;
    int k = l - 1;
    while (k >= 0 && (model.layers[static_cast<size_t>(k)].kind == LayerKind::MaxPool ||
                      model.layers[static_cast<size_t>(k)].kind == LayerKind::Flatten))
      --k;
    bool binary = k >= 0 ? model.layers[static_cast<size_t>(k)].kind == LayerKind::Sign
                         : model.input_binary;
    if (!binary)
      throw ConfigError("layer " + std::to_string(l) +
                        " is crossbar-backed but its inputs are not +-1");
  }
}

Eigen::MatrixXd im2col(const double* x, int c, int h, int w, int kh, int kw, int stride,
                       int pad) {
  const int oh = conv_out_dim(h, kh, stride, pad);
  const int ow = conv_out_dim(w, kw, stride, pad);
  Eigen::MatrixXd col = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(oh) * ow,
                                              static_cast<Eigen::Index>(c) * kh * kw);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const Eigen::Index p = static_cast<Eigen::Index>(oy) * ow + ox;
      for (int ci = 0; ci < c; ++ci) {
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            col(p, (static_cast<Eigen::Index>(ci) * kh + ky) * kw + kx) =
                x[(static_cast<std::size_t>(ci) * h + iy) * w + ix];
          }
        }
      }
    }
  }
  return col;
}

namespace {

// Scatter-add of an im2col gradient back onto the input image.
void col2im_add(const Eigen::MatrixXd& dcol, double* dx, int c, int h, int w, int kh, int kw,
                int stride, int pad) {
  const int oh = conv_out_dim(h, kh, stride, pad);
  const int ow = conv_out_dim(w, kw, stride, pad);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const Eigen::Index p = static_cast<Eigen::Index>(oy) * ow + ox;
      for (int ci = 0; ci < c; ++ci) {
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            dx[(static_cast<std::size_t>(ci) * h + iy) * w + ix] +=
                dcol(p, (static_cast<Eigen::Index>(ci) * kh + ky) * kw + kx);
          }
        }
      }
    }
  }
}

ForwardTrace run_forward(const NetworkModel& model, const MappedNetwork* mapped,
                         const Tensor& x, bool training) {
  if (x.rank() != 4 || x.dim(1) != model.in_c || x.dim(2) != model.in_h ||
      x.dim(3) != model.in_w)
    throw DataError("input tensor shape does not match the model input");
  const int N = x.dim(0);
  if (N <= 0) throw DataError("empty batch");

  ForwardTrace trace;
  trace.training = training;
  const size_t L = model.layers.size();
  trace.inputs.reserve(L);
  trace.outputs.reserve(L);
  trace.binw.resize(L);
  trace.bn.resize(L);
  trace.pool_argmax.resize(L);

  Tensor cur = x;
  for (size_t l = 0; l < L; ++l) {
    const Layer& layer = model.layers[l];
    // NetworkModel is shared mutable state during training, so BN running
    // stats are updated through a const_cast below; everything else is pure.
    trace.inputs.push_back(cur);
    const LayerIO io = io_of(cur);
    Tensor out;

    switch (layer.kind) {
      case LayerKind::BinConv: {
        if (io.flat()) throw DataError("conv layer fed a flat activation");
        if (io.c != layer.in_ch) throw DataError("conv input channel mismatch");
        const MappedLayer* ml =
            mapped ? mapped->find_layer(static_cast<int>(l)) : nullptr;
        Tensor bw = binarize(layer.shadow, model.policy);
        trace.binw[l] = bw;
        Eigen::MatrixXd M;
        if (!ml) M = unroll_matrix(bw, WeightLayout::Conv);
        const int oh = conv_out_dim(io.h, layer.kh, layer.stride, layer.pad);
        const int ow = conv_out_dim(io.w, layer.kw, layer.stride, layer.pad);
        out = Tensor({N, layer.out_ch, oh, ow});
        const std::size_t in_stride = static_cast<std::size_t>(io.c) * io.h * io.w;
        for (int n = 0; n < N; ++n) {
          Eigen::MatrixXd col = im2col(cur.data() + n * in_stride, io.c, io.h, io.w,
                                       layer.kh, layer.kw, layer.stride, layer.pad);
          Eigen::MatrixXd res =
              ml ? crossbar_mvm(*ml, mapped->cfg, col) : Eigen::MatrixXd(col * M);
          for (int o = 0; o < layer.out_ch; ++o)
            for (Eigen::Index p = 0; p < res.rows(); ++p)
              out.at(n, o, static_cast<int>(p / ow), static_cast<int>(p % ow)) = res(p, o);
        }
        break;
      }
      case LayerKind::BinDense: {
        if (!io.flat()) throw DataError("dense layer fed a spatial activation");
        if (io.c != layer.in_features) throw DataError("dense input width mismatch");
        const MappedLayer* ml =
            mapped ? mapped->find_layer(static_cast<int>(l)) : nullptr;
        Tensor bw = binarize(layer.shadow, model.policy);
        trace.binw[l] = bw;
        CMap X(cur.data(), N, layer.in_features);
        Eigen::MatrixXd res;
        if (ml) {
          res = crossbar_mvm(*ml, mapped->cfg, X);
        } else {
          res = X * unroll_matrix(bw, WeightLayout::Dense);
        }
        out = Tensor({N, layer.out_features});
        MMap(out.data(), N, layer.out_features) = res;
        break;
      }
      case LayerKind::Sign: {
        out = Tensor(cur.shape());
        for (std::size_t i = 0; i < cur.size(); ++i) out[i] = cur[i] > 0.0 ? 1.0 : -1.0;
        break;
      }
      case LayerKind::MaxPool: {
        if (io.flat()) throw DataError("pool layer fed a flat activation");
        const int p = layer.pool;
        const int oh = io.h / p, ow = io.w / p;
        out = Tensor({N, io.c, oh, ow});
        auto& arg = trace.pool_argmax[l];
        arg.assign(out.size(), 0);
        std::size_t oi = 0;
        for (int n = 0; n < N; ++n)
          for (int ci = 0; ci < io.c; ++ci)
            for (int oy = 0; oy < oh; ++oy)
              for (int ox = 0; ox < ow; ++ox, ++oi) {
                double best = -std::numeric_limits<double>::infinity();
                std::int64_t best_idx = 0;
                for (int ky = 0; ky < p; ++ky)
                  for (int kx = 0; kx < p; ++kx) {
                    const std::int64_t idx =
                        ((static_cast<std::int64_t>(n) * io.c + ci) * io.h + oy * p + ky) *
                            io.w +
                        ox * p + kx;
                    if (cur[static_cast<std::size_t>(idx)] > best) {
                      best = cur[static_cast<std::size_t>(idx)];
                      best_idx = idx;
                    }
                  }
                out[oi] = best;
                arg[oi] = best_idx;
              }
        break;
      }
      case LayerKind::BatchNorm: {
        const int C = layer.channels;
        if (io.c != C) throw DataError("batch-norm channel mismatch");
        out = Tensor(cur.shape());
        const int spatial = io.flat() ? 1 : io.h * io.w;
        const std::size_t m = static_cast<std::size_t>(N) * spatial;
        std::vector<double> mean(C, 0.0), var(C, 0.0), inv_std(C, 0.0);
        if (training) {
          for (int n = 0; n < N; ++n)
            for (int ci = 0; ci < C; ++ci) {
              const double* src = cur.data() + (static_cast<std::size_t>(n) * C + ci) * spatial;
              for (int s = 0; s < spatial; ++s) mean[ci] += src[s];
            }
          for (int ci = 0; ci < C; ++ci) mean[ci] /= static_cast<double>(m);
          for (int n = 0; n < N; ++n)
            for (int ci = 0; ci < C; ++ci) {
              const double* src = cur.data() + (static_cast<std::size_t>(n) * C + ci) * spatial;
              for (int s = 0; s < spatial; ++s) {
                const double d = src[s] - mean[ci];
                var[ci] += d * d;
              }
            }
          for (int ci = 0; ci < C; ++ci) var[ci] /= static_cast<double>(m);
          auto& mut = const_cast<Layer&>(layer);
          for (int ci = 0; ci < C; ++ci) {
            mut.run_mean[ci] = (1.0 - kBnMomentum) * mut.run_mean[ci] + kBnMomentum * mean[ci];
            mut.run_var[ci] = (1.0 - kBnMomentum) * mut.run_var[ci] + kBnMomentum * var[ci];
          }
        } else {
          mean = layer.run_mean;
          var = layer.run_var;
        }
        for (int ci = 0; ci < C; ++ci) inv_std[ci] = 1.0 / std::sqrt(var[ci] + kBnEps);
        for (int n = 0; n < N; ++n)
          for (int ci = 0; ci < C; ++ci) {
            const double* src = cur.data() + (static_cast<std::size_t>(n) * C + ci) * spatial;
            double* dst = out.data() + (static_cast<std::size_t>(n) * C + ci) * spatial;
            for (int s = 0; s < spatial; ++s)
              dst[s] = layer.gamma[ci] * (src[s] - mean[ci]) * inv_std[ci] + layer.beta[ci];
          }
        trace.bn[l] = BnCache{std::move(mean), std::move(var), std::move(inv_std)};
        break;
      }
      case LayerKind::Flatten: {
        if (io.flat()) throw DataError("flatten applied to a flat activation");
        out = Tensor({N, io.c * io.h * io.w});
        std::copy(cur.data(), cur.data() + cur.size(), out.data());
        break;
      }
    }
    trace.outputs.push_back(out);
    cur = std::move(out);
  }
  return trace;
}

Gradients run_backward(const NetworkModel& model, const MappedNetwork* mapped,
                       const ForwardTrace& trace, const Tensor& dlogits) {
  const size_t L = model.layers.size();
  if (trace.outputs.size() != L)
    throw DataError("forward trace does not match the model");
  if (!dlogits.same_shape(trace.outputs.back()))
    throw DataError("dlogits shape does not match the logits");

  Gradients g;
  g.weight_grads.resize(L);
  g.gamma_grads.resize(L);
  g.beta_grads.resize(L);

  Tensor dout = dlogits;
  for (int li = static_cast<int>(L) - 1; li >= 0; --li) {
    const size_t l = static_cast<size_t>(li);
    const Layer& layer = model.layers[l];
    const Tensor& in = trace.inputs[l];
    const LayerIO io = io_of(in);
    const int N = in.dim(0);
    Tensor din(in.shape());

    switch (layer.kind) {
      case LayerKind::BinConv: {
        const MappedLayer* ml = mapped ? mapped->find_layer(li) : nullptr;
        Eigen::MatrixXd M =
            ml ? ml->w_eff : unroll_matrix(trace.binw[l], WeightLayout::Conv);
        const int oh = dout.dim(2), ow = dout.dim(3);
        Eigen::MatrixXd dM = Eigen::MatrixXd::Zero(M.rows(), M.cols());
        const std::size_t in_stride = static_cast<std::size_t>(io.c) * io.h * io.w;
        for (int n = 0; n < N; ++n) {
          Eigen::MatrixXd dres(static_cast<Eigen::Index>(oh) * ow, layer.out_ch);
          for (int o = 0; o < layer.out_ch; ++o)
            for (int p = 0; p < oh * ow; ++p)
              dres(p, o) = dout.at(n, o, p / ow, p % ow);
          Eigen::MatrixXd col = im2col(in.data() + n * in_stride, io.c, io.h, io.w, layer.kh,
                                       layer.kw, layer.stride, layer.pad);
          dM.noalias() += col.transpose() * dres;
          Eigen::MatrixXd dcol = dres * M.transpose();
          col2im_add(dcol, din.data() + n * in_stride, io.c, io.h, io.w, layer.kh, layer.kw,
                     layer.stride, layer.pad);
        }
        // Straight-through: fold the unrolled gradient back to shadow shape.
        Tensor dw(layer.shadow.shape());
        for (int o = 0; o < layer.out_ch; ++o)
          for (int ci = 0; ci < layer.in_ch; ++ci)
            for (int ky = 0; ky < layer.kh; ++ky)
              for (int kx = 0; kx < layer.kw; ++kx)
                dw.at(o, ci, ky, kx) =
                    dM((static_cast<Eigen::Index>(ci) * layer.kh + ky) * layer.kw + kx, o);
        g.weight_grads[l] = std::move(dw);
        break;
      }
      case LayerKind::BinDense: {
        const MappedLayer* ml = mapped ? mapped->find_layer(li) : nullptr;
        Eigen::MatrixXd M =
            ml ? ml->w_eff : unroll_matrix(trace.binw[l], WeightLayout::Dense);
        CMap X(in.data(), N, layer.in_features);
        CMap dY(dout.data(), N, layer.out_features);
        Eigen::MatrixXd dM = X.transpose() * dY;          // in x out
        Eigen::MatrixXd dX = dY * M.transpose();          // N x in
        MMap(din.data(), N, layer.in_features) = dX;
        Tensor dw(layer.shadow.shape());
        for (int o = 0; o < layer.out_features; ++o)
          for (int i = 0; i < layer.in_features; ++i) dw.at(o, i) = dM(i, o);
        g.weight_grads[l] = std::move(dw);
        break;
      }
      case LayerKind::Sign: {
        for (std::size_t i = 0; i < in.size(); ++i)
          din[i] = std::abs(in[i]) <= 1.0 ? dout[i] : 0.0;
        break;
      }
      case LayerKind::MaxPool: {
        const auto& arg = trace.pool_argmax[l];
        for (std::size_t i = 0; i < in.size(); ++i) din[i] = 0.0;
        for (std::size_t oi = 0; oi < dout.size(); ++oi)
          din[static_cast<std::size_t>(arg[oi])] += dout[oi];
        break;
      }
      case LayerKind::BatchNorm: {
        const int C = layer.channels;
        const int spatial = io.flat() ? 1 : io.h * io.w;
        const double m = static_cast<double>(N) * spatial;
        const bool train_stats = trace.training;
        const std::vector<double>& mean =
            train_stats ? trace.bn[l].mean : layer.run_mean;
        std::vector<double> inv_std(C);
        if (train_stats) {
          inv_std = trace.bn[l].inv_std;
        } else {
          for (int ci = 0; ci < C; ++ci)
            inv_std[ci] = 1.0 / std::sqrt(layer.run_var[ci] + kBnEps);
        }
        std::vector<double> dgamma(C, 0.0), dbeta(C, 0.0);
        for (int n = 0; n < N; ++n)
          for (int ci = 0; ci < C; ++ci) {
            const double* xv = in.data() + (static_cast<std::size_t>(n) * C + ci) * spatial;
            const double* dy = dout.data() + (static_cast<std::size_t>(n) * C + ci) * spatial;
            for (int s = 0; s < spatial; ++s) {
              dgamma[ci] += dy[s] * (xv[s] - mean[ci]) * inv_std[ci];
              dbeta[ci] += dy[s];
            }
          }
        for (int n = 0; n < N; ++n)
          for (int ci = 0; ci < C; ++ci) {
            const double* xv = in.data() + (static_cast<std::size_t>(n) * C + ci) * spatial;
            const double* dy = dout.data() + (static_cast<std::size_t>(n) * C + ci) * spatial;
            double* dx = din.data() + (static_cast<std::size_t>(n) * C + ci) * spatial;
            const double a = layer.gamma[ci] * inv_std[ci];
            for (int s = 0; s < spatial; ++s) {
              if (train_stats) {
                const double xhat = (xv[s] - mean[ci]) * inv_std[ci];
                dx[s] = a / m * (m * dy[s] - dbeta[ci] - xhat * dgamma[ci]);
              } else {
                dx[s] = a * dy[s];
              }
            }
          }
        g.gamma_grads[l] = std::move(dgamma);
        g.beta_grads[l] = std::move(dbeta);
        break;
      }
      case LayerKind::Flatten: {
        std::copy(dout.data(), dout.data() + dout.size(), din.data());
        break;
      }
    }
    dout = std::move(din);
  }
  g.input_grad = std::move(dout);
  return g;
}

}  // namespace

const MappedLayer* MappedNetwork::find_layer(int layer_index) const {
  for (const MappedLayer& ml : layers)
    if (ml.layer_index == layer_index) return &ml;
  return nullptr;
}

MappedNetwork map_network(const NetworkModel& model, const DeviceConfig& cfg, MapMode mode,
                          int threads) {
  cfg.validate();
  MappedNetwork mn;
  mn.model = model;
  mn.mode = mode;
  mn.cfg = cfg;
  const ConductanceLevels levels = levels_from_config(cfg);

  for (int l = 0; l < static_cast<int>(model.layers.size()); ++l) {
    const Layer& layer = model.layers[static_cast<size_t>(l)];
    if (!layer.weighted() || layer.backend != Backend::Crossbar) continue;
    Tensor bw = binarize(layer.shadow, model.policy);
    WeightLayout layout =
        layer.kind == LayerKind::BinConv ? WeightLayout::Conv : WeightLayout::Dense;
    TiledLayer tl = unroll_and_tile(bw, layout, cfg, l);

    MappedLayer ml;
    ml.layer_index = l;
    ml.u_rows = tl.u_rows;
    ml.u_cols = tl.u_cols;
    ml.block_rows = tl.block_rows;
    ml.block_cols = tl.block_cols;
    ml.tiles.resize(tl.tiles.size());

    auto worker = [&](size_t begin, size_t end) {
      for (size_t t = begin; t < end; ++t) {
        MappedTile mt = map_tile(tl.tiles[t], mode, levels);
        ml.tiles[t] = make_instance(mt, cfg);
      }
    };
    const size_t n_tiles = tl.tiles.size();
    const int n_thr = std::max(1, std::min<int>(threads, static_cast<int>(n_tiles)));
    if (n_thr == 1) {
      worker(0, n_tiles);
    } else {
      std::vector<std::thread> pool;
      const size_t chunk = (n_tiles + n_thr - 1) / n_thr;
      for (int t = 0; t < n_thr; ++t) {
        const size_t b = static_cast<size_t>(t) * chunk;
        if (b >= n_tiles) break;
        pool.emplace_back(worker, b, std::min(n_tiles, b + chunk));
      }
      for (auto& th : pool) th.join();
    }

    // Effective real-valued weights: reference-subtracted, decode-scaled
    // equivalent conductances. At zero non-ideality this is exactly the
    // binary weight matrix.
    ml.w_eff = Eigen::MatrixXd::Zero(ml.u_rows, ml.u_cols);
    const double half = (levels.g_max - levels.g_min) / 2.0;
    for (int bi = 0; bi < ml.block_rows; ++bi)
      for (int bj = 0; bj < ml.block_cols; ++bj) {
        const CrossbarInstance& inst = ml.tiles[static_cast<size_t>(bi) * ml.block_cols + bj];
        const MappedTile& mt = *inst.mapped;
        const double s = mt.sel ? -1.0 : 1.0;
        const int r0 = bi * cfg.rows, c0 = bj * cfg.cols;
        const int rn = std::min(cfg.rows, ml.u_rows - r0);
        const int cn = std::min(cfg.cols, ml.u_cols - c0);
        const int ref = mt.ref_col();
        for (int r = 0; r < rn; ++r)
          for (int c = 0; c < cn; ++c)
            ml.w_eff(r0 + r, c0 + c) = s * (inst.g_equiv(r, c) - inst.g_equiv(r, ref)) / half;
      }
    mn.layers.push_back(std::move(ml));
  }
  return mn;
}

ForwardTrace forward_ideal(const NetworkModel& model, const Tensor& x, bool training) {
  return run_forward(model, nullptr, x, training);
}

ForwardTrace forward_crossbar(const MappedNetwork& mapped, const Tensor& x) {
  return run_forward(mapped.model, &mapped, x, false);
}

Gradients backward(const NetworkModel& model, const ForwardTrace& trace,
                   const Tensor& dlogits) {
  return run_backward(model, nullptr, trace, dlogits);
}

Gradients backward(const MappedNetwork& mapped, const ForwardTrace& trace,
                   const Tensor& dlogits) {
  return run_backward(mapped.model, &mapped, trace, dlogits);
}

namespace {

constexpr char kMagic[8] = {'X', 'B', 'N', 'N', 'C', 'K', 'P', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  static_assert(std::endian::native == std::endian::little);
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

}  // namespace

void save_checkpoint(const NetworkModel& model, const std::string& path) {
  json header;
  header["format"] = "xbnn-checkpoint";
  header["arch"] = model.arch;
  header["in_c"] = model.in_c;
  header["in_h"] = model.in_h;
  header["in_w"] = model.in_w;
  header["input_binary"] = model.input_binary;
  header["num_classes"] = model.num_classes;
  header["seed"] = model.seed;
  header["policy"] = {{"mode", to_string(model.policy.mode)},
                      {"delta", model.policy.delta_mag}};
  json backends = json::array();
  for (const Layer& layer : model.layers)
    if (layer.weighted())
      backends.push_back(layer.backend == Backend::Crossbar ? "crossbar" : "ideal");
  header["backends"] = backends;

  std::vector<std::pair<const std::vector<double>*, json>> blobs;
  std::vector<const Tensor*> tensors;
  json tensor_list = json::array();
  std::uint64_t offset = 0;
  auto add_tensor = [&](int l, const char* name, const Tensor& t) {
    tensor_list.push_back(
        {{"layer", l}, {"name", name}, {"shape", t.shape()}, {"offset", offset}});
    tensors.push_back(&t);
    offset += t.size();
  };
  std::vector<std::pair<int, const std::vector<double>*>> vecs;
  auto add_vec = [&](int l, const char* name, const std::vector<double>& v) {
    tensor_list.push_back({{"layer", l},
                           {"name", name},
                           {"shape", json::array({static_cast<int>(v.size())})},
                           {"offset", offset}});
    vecs.push_back({static_cast<int>(tensors.size()), &v});  // position marker
    tensors.push_back(nullptr);
    offset += v.size();
  };
  for (int l = 0; l < static_cast<int>(model.layers.size()); ++l) {
    const Layer& layer = model.layers[static_cast<size_t>(l)];
    if (layer.weighted()) add_tensor(l, "shadow", layer.shadow);
    if (layer.kind == LayerKind::BatchNorm) {
      add_vec(l, "gamma", layer.gamma);
      add_vec(l, "beta", layer.beta);
      add_vec(l, "run_mean", layer.run_mean);
      add_vec(l, "run_var", layer.run_var);
    }
  }
  header["tensors"] = tensor_list;
  const std::string hjson = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, sizeof kMagic);
  put_u32(os, 1);  // version
  put_u64(os, hjson.size());
  os.write(hjson.data(), static_cast<std::streamsize>(hjson.size()));
  put_u64(os, offset);  // total payload doubles
  size_t vec_cursor = 0;
  for (size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i]) {
      os.write(reinterpret_cast<const char*>(tensors[i]->data()),
               static_cast<std::streamsize>(tensors[i]->size() * sizeof(double)));
    } else {
      const std::vector<double>& v = *vecs[vec_cursor++].second;
      os.write(reinterpret_cast<const char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(double)));
    }
  }
  if (!os) throw DataError("short write while saving checkpoint: " + path);
}

NetworkModel load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw DataError("not a checkpoint file: " + path);
  const std::uint32_t version = get_u32(is);
  if (version != 1)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t hlen = get_u64(is);
  if (hlen > (1ull << 30)) throw DataError("corrupt checkpoint header length");
  std::string hjson(hlen, '\0');
  is.read(hjson.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw DataError("truncated checkpoint header: " + path);

  json header;
  try {
    header = json::parse(hjson);
  } catch (const json::exception& e) {
    throw DataError(std::string("bad checkpoint header: ") + e.what());
  }
  try {
    BinarizationPolicy policy;
    policy.mode = policy_mode_from_string(header.at("policy").at("mode").get<std::string>());
    policy.delta_mag = header.at("policy").at("delta").get<double>();
    NetworkModel model = model_from_arch(
        header.at("arch").get<std::string>(), header.at("in_c").get<int>(),
        header.at("in_h").get<int>(), header.at("in_w").get<int>(), policy,
        header.at("seed").get<std::uint64_t>(), header.at("input_binary").get<bool>());

    const auto backends = header.at("backends");
    size_t ord = 0;
    for (Layer& layer : model.layers)
      if (layer.weighted()) {
        if (ord >= backends.size()) throw DataError("checkpoint backend list too short");
        layer.backend = backends[ord].get<std::string>() == "crossbar" ? Backend::Crossbar
                                                                       : Backend::Ideal;
        ++ord;
      }

    const std::uint64_t payload = get_u64(is);
    if (payload > (1ull << 28)) throw DataError("corrupt checkpoint payload length");
    std::vector<double> doubles(payload);
    is.read(reinterpret_cast<char*>(doubles.data()),
            static_cast<std::streamsize>(payload * sizeof(double)));
    if (!is) throw DataError("truncated checkpoint payload: " + path);

    for (const auto& t : header.at("tensors")) {
      const int l = t.at("layer").get<int>();
      const std::string name = t.at("name").get<std::string>();
      const std::vector<int> shape = t.at("shape").get<std::vector<int>>();
      const std::uint64_t off = t.at("offset").get<std::uint64_t>();
      const std::size_t n = Tensor::count(shape);
      if (off + n > payload) throw DataError("checkpoint tensor out of bounds");
      if (l < 0 || l >= static_cast<int>(model.layers.size()))
        throw DataError("checkpoint tensor names a missing layer");
      Layer& layer = model.layers[static_cast<size_t>(l)];
      auto fill_vec = [&](std::vector<double>& dst) {
        if (dst.size() != n) throw DataError("checkpoint tensor shape mismatch");
        std::copy(doubles.begin() + static_cast<std::ptrdiff_t>(off),
                  doubles.begin() + static_cast<std::ptrdiff_t>(off + n), dst.begin());
      };
      if (name == "shadow") {
        if (layer.shadow.shape() != shape) throw DataError("checkpoint tensor shape mismatch");
        std::copy(doubles.begin() + static_cast<std::ptrdiff_t>(off),
                  doubles.begin() + static_cast<std::ptrdiff_t>(off + n),
                  layer.shadow.data());
      } else if (name == "gamma") {
        fill_vec(layer.gamma);
      } else if (name == "beta") {
        fill_vec(layer.beta);
      } else if (name == "run_mean") {
        fill_vec(layer.run_mean);
      } else if (name == "run_var") {
        fill_vec(layer.run_var);
      } else {
        throw DataError("unknown checkpoint tensor '" + name + "'");
      }
    }
    return model;
  } catch (const json::exception& e) {
    throw DataError(std::string("bad checkpoint header: ") + e.what());
  }
}

}  // namespace xbnn

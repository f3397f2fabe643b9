#include "xbnn/analysis.hpp"

#include <algorithm>
#include <memory>

#include "xbnn/errors.hpp"
#include "xbnn/train.hpp"

namespace xbnn {

std::vector<LayerPowerStats> measure_power(const MappedNetwork& mapped, const Tensor& images,
                                           int max_samples) {
  if (mapped.layers.empty()) return {};
  const int N = std::min(images.dim(0), std::max(1, max_samples));
  std::vector<int> shape = images.shape();
  shape[0] = N;
  Tensor x(shape);
  std::copy(images.data(), images.data() + x.size(), x.data());

  const ForwardTrace trace = forward_crossbar(mapped, x);
  const DeviceConfig& cfg = mapped.cfg;
  const int R = cfg.rows;

  std::vector<LayerPowerStats> out;
  for (const MappedLayer& ml : mapped.layers) {
    const Layer& layer = mapped.model.layers[static_cast<std::size_t>(ml.layer_index)];
    const Tensor& in = trace.inputs[static_cast<std::size_t>(ml.layer_index)];

    LayerPowerStats stats;
    stats.layer_index = ml.layer_index;
    stats.tiles = static_cast<int>(ml.tiles.size());

    // Nominal row sums give the ideal V^2 G power in closed form.
    std::vector<Eigen::VectorXd> row_sum_all(ml.tiles.size());
    std::vector<Eigen::VectorXd> row_sum_weights(ml.tiles.size());
    std::vector<std::unique_ptr<NodalSolver>> solvers(ml.tiles.size());
    for (std::size_t t = 0; t < ml.tiles.size(); ++t) {
      const CrossbarInstance& inst = ml.tiles[t];
      row_sum_all[t] = inst.g_nominal.rowwise().sum();
      row_sum_weights[t] =
          inst.g_nominal.leftCols(inst.g_nominal.cols() - 1).rowwise().sum();
      solvers[t] = std::make_unique<NodalSolver>(inst.g_varied, cfg);
    }

    for (int n = 0; n < N; ++n) {
      // Activation rows seen by this layer: im2col positions for conv, the
      // flat activation itself for dense.
      Eigen::MatrixXd A;
      if (layer.kind == LayerKind::BinConv) {
        const std::size_t stride =
            static_cast<std::size_t>(in.dim(1)) * in.dim(2) * in.dim(3);
        A = im2col(in.data() + static_cast<std::size_t>(n) * stride, in.dim(1), in.dim(2),
                   in.dim(3), layer.kh, layer.kw, layer.stride, layer.pad);
      } else {
        A = Eigen::MatrixXd(1, layer.in_features);
        for (int i = 0; i < layer.in_features; ++i) A(0, i) = in.at(n, i);
      }

      for (int bi = 0; bi < ml.block_rows; ++bi) {
        const int r0 = bi * R;
        const int rn = std::min(R, ml.u_rows - r0);
        for (Eigen::Index p = 0; p < A.rows(); ++p) {
          Eigen::VectorXd v = Eigen::VectorXd::Zero(R);
          v.head(rn) = cfg.v_read * A.row(p).segment(r0, rn).transpose();
          for (int bj = 0; bj < ml.block_cols; ++bj) {
            const std::size_t t = static_cast<std::size_t>(bi) * ml.block_cols + bj;
            const SolveResult sr = solvers[t]->solve(v);
            stats.nonideal_w += v.dot(sr.source_currents);
            stats.ideal_w += v.array().square().matrix().dot(row_sum_all[t]);
            stats.ideal_weights_only_w +=
                v.array().square().matrix().dot(row_sum_weights[t]);
            stats.mvm_ops += 1.0;
          }
        }
      }
    }
    stats.ideal_w /= N;
    stats.ideal_weights_only_w /= N;
    stats.nonideal_w /= N;
    stats.mvm_ops /= N;
    out.push_back(stats);
  }
  return out;
}

std::vector<TileNfSample> measure_nf(const MappedNetwork& mapped, NfIdealRef ref) {
  std::vector<TileNfSample> out;
  for (const MappedLayer& ml : mapped.layers) {
    for (const CrossbarInstance& inst : ml.tiles) {
      const MappedTile& mt = *inst.mapped;
      Eigen::VectorXd v = Eigen::VectorXd::Zero(mt.g.rows());
      for (int r = 0; r < mt.mask.rows(); ++r) {
        bool live = false;
        for (int c = 0; c < mt.mask.cols(); ++c) live = live || mt.mask(r, c);
        if (live) v(r) = mapped.cfg.v_read;
      }
      TileNfSample s;
      s.layer_index = ml.layer_index;
      s.block_row = mt.origin.block_row;
      s.block_col = mt.origin.block_col;
      s.aggregate = non_ideality_factor(inst, v, ref).aggregate;
      out.push_back(s);
    }
  }
  return out;
}

AttackEval run_attack(const NetworkModel& software, const MappedNetwork* mapped,
                      const Tensor& images, const std::vector<int>& labels,
                      const AttackSpec& spec) {
  spec.validate();
  if (spec.mode == AttackMode::HH && !mapped)
    throw ConfigError("HH attack mode requires a mapped network");

  Tensor adv;
  if (spec.kind == AttackKind::Fgsm) {
    adv = spec.mode == AttackMode::HH ? fgsm(*mapped, images, labels, spec)
                                      : fgsm(software, images, labels, spec);
  } else {
    adv = spec.mode == AttackMode::HH ? pgd(*mapped, images, labels, spec)
                                      : pgd(software, images, labels, spec);
  }

  const ForwardTrace clean_trace =
      mapped ? forward_crossbar(*mapped, images) : forward_ideal(software, images, false);
  const ForwardTrace adv_trace =
      mapped ? forward_crossbar(*mapped, adv) : forward_ideal(software, adv, false);

  const std::vector<int> clean_pred = predict(clean_trace.logits());
  const std::vector<int> adv_pred = predict(adv_trace.logits());

  AttackEval eval;
  eval.ans = ans(clean_trace, adv_trace);
  int clean_ok = 0, adv_ok = 0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    AttackRecord rec;
    rec.sample_id = static_cast<int>(n);
    rec.epsilon = spec.epsilon;
    rec.kind = spec.kind;
    rec.mode = spec.mode;
    rec.mapping = mapped ? mapped->mode : MapMode::Normal;
    rec.clean_correct = clean_pred[n] == labels[n];
    rec.adv_correct = adv_pred[n] == labels[n];
    clean_ok += rec.clean_correct;
    adv_ok += rec.adv_correct;
    eval.records.push_back(rec);
  }
  eval.clean_accuracy = static_cast<double>(clean_ok) / static_cast<double>(labels.size());
  eval.adv_accuracy = static_cast<double>(adv_ok) / static_cast<double>(labels.size());
  return eval;
}

}  // namespace xbnn

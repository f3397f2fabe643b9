#include "xbnn/circuit.hpp"

#include <cmath>
#include <limits>
#include <ostream>

#include "xbnn/errors.hpp"

namespace xbnn {

Eigen::VectorXd ideal_mvm(const Eigen::VectorXd& v_in, const Eigen::MatrixXd& g) {
  if (v_in.size() != g.rows()) throw NumericError("ideal_mvm: dimension mismatch");
  return g.transpose() * v_in;
}

int NodalSolver::find(int id) const {
  while (parent_[static_cast<std::size_t>(id)] != id) id = parent_[static_cast<std::size_t>(id)];
  return id;
}

NodalSolver::NodalSolver(Eigen::MatrixXd g, const DeviceConfig& cfg)
    : g_(std::move(g)), cfg_(cfg), R_(static_cast<int>(g_.rows())), C_(static_cast<int>(g_.cols())) {
  if (R_ <= 0 || C_ <= 0) throw NumericError("nodal: empty conductance matrix");
  if ((g_.array() < 0.0).any()) throw NumericError("nodal: negative conductance");
  if ((g_.array() == 0.0).all()) throw NumericError("nodal: all device conductances are zero");

  const int n_ids = 2 * R_ * C_ + R_ + 1;
  parent_.resize(static_cast<std::size_t>(n_ids));
  for (int i = 0; i < n_ids; ++i) parent_[static_cast<std::size_t>(i)] = i;

  auto unite = [&](int a, int b) {
    const int ra = find(a), rb = find(b);
    if (ra != rb) parent_[static_cast<std::size_t>(ra)] = rb;
  };
  auto add_edge = [&](int a, int b, double cond) {
    if (cond > 0.0) edges_.push_back(Edge{a, b, cond});
  };

  // Parasitic elements; zero resistance merges the endpoints.
  for (int i = 0; i < R_; ++i) {
    if (cfg_.r_driver == 0.0)
      unite(node_source(i), node_n(i, 0));
    else
      add_edge(node_source(i), node_n(i, 0), 1.0 / cfg_.r_driver);
    for (int j = 0; j + 1 < C_; ++j) {
      if (cfg_.r_wire_row == 0.0)
        unite(node_n(i, j), node_n(i, j + 1));
      else
        add_edge(node_n(i, j), node_n(i, j + 1), 1.0 / cfg_.r_wire_row);
    }
  }
  for (int j = 0; j < C_; ++j) {
    for (int i = 0; i + 1 < R_; ++i) {
      if (cfg_.r_wire_col == 0.0)
        unite(node_m(i, j), node_m(i + 1, j));
      else
        add_edge(node_m(i, j), node_m(i + 1, j), 1.0 / cfg_.r_wire_col);
    }
    if (cfg_.r_sense == 0.0)
      unite(node_m(R_ - 1, j), node_ground());
    else
      add_edge(node_m(R_ - 1, j), node_ground(), 1.0 / cfg_.r_sense);
  }
  // Devices. Conductances are finite and positive, never a hard short.
  for (int i = 0; i < R_; ++i)
    for (int j = 0; j < C_; ++j) add_edge(node_n(i, j), node_m(i, j), g_(i, j));

  // Classify representatives.
  cls_.assign(static_cast<std::size_t>(n_ids), kUnknown);
  source_row_.assign(static_cast<std::size_t>(n_ids), -1);
  cls_[static_cast<std::size_t>(find(node_ground()))] = kGround;
  for (int i = 0; i < R_; ++i) {
    const int r = find(node_source(i));
    if (cls_[static_cast<std::size_t>(r)] != kUnknown)
      throw NumericError("nodal: sources shorted together or to ground");
    cls_[static_cast<std::size_t>(r)] = kSource;
    source_row_[static_cast<std::size_t>(r)] = i;
  }

  unknown_index_.assign(static_cast<std::size_t>(n_ids), -1);
  for (int id = 0; id < n_ids; ++id) {
    if (find(id) != id) continue;
    if (cls_[static_cast<std::size_t>(id)] == kUnknown)
      unknown_index_[static_cast<std::size_t>(id)] = n_unknown_++;
  }

  src_coupling_.assign(static_cast<std::size_t>(n_unknown_), {});
  if (n_unknown_ == 0) return;  // fully ideal network; solve() short-circuits

  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(edges_.size() * 4);
  for (const Edge& e : edges_) {
    const int ra = find(e.a), rb = find(e.b);
    if (ra == rb) continue;
    const int ua = unknown_index_[static_cast<std::size_t>(ra)];
    const int ub = unknown_index_[static_cast<std::size_t>(rb)];
    if (ua >= 0) trip.emplace_back(ua, ua, e.g);
    if (ub >= 0) trip.emplace_back(ub, ub, e.g);
    if (ua >= 0 && ub >= 0) {
      trip.emplace_back(ua, ub, -e.g);
      trip.emplace_back(ub, ua, -e.g);
    } else if (ua >= 0 && cls_[static_cast<std::size_t>(rb)] == kSource) {
      src_coupling_[static_cast<std::size_t>(ua)].emplace_back(
          source_row_[static_cast<std::size_t>(rb)], e.g);
    } else if (ub >= 0 && cls_[static_cast<std::size_t>(ra)] == kSource) {
      src_coupling_[static_cast<std::size_t>(ub)].emplace_back(
          source_row_[static_cast<std::size_t>(ra)], e.g);
    }
  }

  A_.resize(n_unknown_, n_unknown_);
  A_.setFromTriplets(trip.begin(), trip.end());
  A_.makeCompressed();
  ldlt_.compute(A_);
  if (ldlt_.info() != Eigen::Success)
    throw NumericError("nodal: singular conductance system (factorization failed)");
}

double NodalSolver::phi(int id, const Eigen::VectorXd& v_in, const Eigen::VectorXd& x) const {
  const int r = find(id);
  switch (cls_[static_cast<std::size_t>(r)]) {
    case kGround:
      return 0.0;
    case kSource:
      return v_in[source_row_[static_cast<std::size_t>(r)]];
    default:
      return x[unknown_index_[static_cast<std::size_t>(r)]];
  }
}

SolveResult NodalSolver::solve(const Eigen::VectorXd& v_in) const {
  if (v_in.size() != R_) throw NumericError("nodal: v_in length != rows");

  Eigen::VectorXd x(n_unknown_);
  if (n_unknown_ > 0) {
    Eigen::VectorXd b = Eigen::VectorXd::Zero(n_unknown_);
    for (int u = 0; u < n_unknown_; ++u)
      for (const auto& [row, cond] : src_coupling_[static_cast<std::size_t>(u)])
        b[u] += cond * v_in[row];
    x = ldlt_.solve(b);
    // Two steps of iterative refinement keep KCL residuals tight even with
    // widely spread conductances (wire siemens vs. HRS devices).
    x += ldlt_.solve(b - A_ * x);
    x += ldlt_.solve(b - A_ * x);
    if (ldlt_.info() != Eigen::Success) throw NumericError("nodal: solve failed");
  }

  SolveResult res;
  res.node_voltages.resize(2 * R_, C_);
  for (int i = 0; i < R_; ++i)
    for (int j = 0; j < C_; ++j) {
      res.node_voltages(i, j) = phi(node_n(i, j), v_in, x);
      res.node_voltages(R_ + i, j) = phi(node_m(i, j), v_in, x);
    }

  res.column_currents = Eigen::VectorXd::Zero(C_);
  res.source_currents = Eigen::VectorXd::Zero(R_);
  for (int i = 0; i < R_; ++i)
    for (int j = 0; j < C_; ++j) {
      const double d = g_(i, j) * (res.node_voltages(i, j) - res.node_voltages(R_ + i, j));
      res.column_currents[j] += d;
      res.source_currents[i] += d;
    }
  return res;
}

double NodalSolver::total_dissipation(const Eigen::VectorXd& v_in, const SolveResult& r) const {
  // Collapsed (zero-resistance) elements carry zero voltage drop.
  Eigen::VectorXd x(n_unknown_);
  for (int i = 0; i < R_; ++i)
    for (int j = 0; j < C_; ++j) {
      const int rn = find(node_n(i, j));
      if (unknown_index_[static_cast<std::size_t>(rn)] >= 0)
        x[unknown_index_[static_cast<std::size_t>(rn)]] = r.node_voltages(i, j);
      const int rm = find(node_m(i, j));
      if (unknown_index_[static_cast<std::size_t>(rm)] >= 0)
        x[unknown_index_[static_cast<std::size_t>(rm)]] = r.node_voltages(R_ + i, j);
    }
  double p = 0.0;
  for (const Edge& e : edges_) {
    const double dv = phi(e.a, v_in, x) - phi(e.b, v_in, x);
    p += e.g * dv * dv;
  }
  return p;
}

double NodalSolver::max_kcl_residual(const Eigen::VectorXd& v_in, const SolveResult& r) const {
  Eigen::VectorXd x(n_unknown_);
  for (int i = 0; i < R_; ++i)
    for (int j = 0; j < C_; ++j) {
      const int rn = find(node_n(i, j));
      if (unknown_index_[static_cast<std::size_t>(rn)] >= 0)
        x[unknown_index_[static_cast<std::size_t>(rn)]] = r.node_voltages(i, j);
      const int rm = find(node_m(i, j));
      if (unknown_index_[static_cast<std::size_t>(rm)] >= 0)
        x[unknown_index_[static_cast<std::size_t>(rm)]] = r.node_voltages(R_ + i, j);
    }
  Eigen::VectorXd net = Eigen::VectorXd::Zero(n_unknown_);
  Eigen::VectorXd scale = Eigen::VectorXd::Zero(n_unknown_);
  for (const Edge& e : edges_) {
    const int ra = find(e.a), rb = find(e.b);
    const double cur = e.g * (phi(e.a, v_in, x) - phi(e.b, v_in, x));
    const int ua = unknown_index_[static_cast<std::size_t>(ra)];
    const int ub = unknown_index_[static_cast<std::size_t>(rb)];
    if (ua >= 0) {
      net[ua] -= cur;
      scale[ua] += std::abs(cur);
    }
    if (ub >= 0) {
      net[ub] += cur;
      scale[ub] += std::abs(cur);
    }
  }
  double worst = 0.0;
  for (int u = 0; u < n_unknown_; ++u) {
    const double s = std::max(scale[u], 1e-30);
    worst = std::max(worst, std::abs(net[u]) / s);
  }
  return worst;
}

void NodalSolver::dump_system(const Eigen::VectorXd& v_in, std::ostream& os) const {
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n_unknown_);
  for (int u = 0; u < n_unknown_; ++u)
    for (const auto& [row, cond] : src_coupling_[static_cast<std::size_t>(u)])
      b[u] += cond * v_in[row];

  os << "%%MatrixMarket matrix coordinate real symmetric\n";
  os << "% reduced nodal conductance system, " << R_ << "x" << C_ << " crossbar\n";
  std::vector<Eigen::Triplet<double>> lower;
  for (int k = 0; k < A_.outerSize(); ++k)
    for (Eigen::SparseMatrix<double>::InnerIterator it(A_, k); it; ++it)
      if (it.row() >= it.col()) lower.emplace_back(static_cast<int>(it.row()),
                                                   static_cast<int>(it.col()), it.value());
  os << n_unknown_ << " " << n_unknown_ << " " << lower.size() << "\n";
  for (const auto& t : lower) os << t.row() + 1 << " " << t.col() + 1 << " " << t.value() << "\n";
  os << "%%MatrixMarket matrix array real general\n";
  os << "% right-hand side for the given input vector\n";
  os << n_unknown_ << " 1\n";
  for (int u = 0; u < n_unknown_; ++u) os << b[u] << "\n";
}

Eigen::MatrixXd extract_equivalent(const Eigen::MatrixXd& g_varied, const DeviceConfig& cfg) {
  const NodalSolver solver(g_varied, cfg);
  const int rows = solver.rows();
  const int cols = solver.cols();
  Eigen::MatrixXd g_equiv(rows, cols);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(rows);
  for (int i = 0; i < rows; ++i) {
    v[i] = cfg.v_read;
    g_equiv.row(i) = solver.solve(v).column_currents.transpose() / cfg.v_read;
    v[i] = 0.0;
  }
  return g_equiv;
}

CrossbarInstance make_instance(const MappedTile& tile, const DeviceConfig& cfg) {
  CrossbarInstance inst;
  inst.mapped = tile;
  inst.g_nominal = tile.g;
  inst.cfg = cfg;
  inst.has_ref = true;
  inst.g_varied = sample_variation(tile.g, cfg, tile.origin);
  if (!cfg.vary_reference) inst.g_varied.col(tile.ref_col()) = tile.g.col(tile.ref_col());
  inst.g_equiv = extract_equivalent(inst.g_varied, cfg);
  return inst;
}

CrossbarInstance make_instance_raw(const Eigen::MatrixXd& g, const DeviceConfig& cfg) {
  CrossbarInstance inst;
  inst.g_nominal = g;
  inst.g_varied = g;
  inst.cfg = cfg;
  inst.has_ref = false;
  inst.g_equiv = extract_equivalent(g, cfg);
  return inst;
}

SolveResult nodal_solve(const CrossbarInstance& inst, const Eigen::VectorXd& v_in) {
  return NodalSolver(inst.g_varied, inst.cfg).solve(v_in);
}

NfResult non_ideality_factor(const CrossbarInstance& inst, const Eigen::VectorXd& v_in,
                             NfIdealRef ref) {
  if (v_in.isZero(0.0)) throw NumericError("NF: input vector is zero");
  constexpr double kCurrentEps = 1e-12;

  const Eigen::MatrixXd& g_ideal = ref == NfIdealRef::Nominal ? inst.g_nominal : inst.g_varied;
  const Eigen::VectorXd i_ideal = ideal_mvm(v_in, g_ideal);
  const Eigen::VectorXd i_nonideal = ideal_mvm(v_in, inst.g_equiv);

  const int total_cols = static_cast<int>(inst.g_nominal.cols());
  const int weight_cols = inst.has_ref ? total_cols - 1 : total_cols;

  NfResult res;
  res.per_column.assign(static_cast<std::size_t>(weight_cols),
                        std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  for (int j = 0; j < weight_cols; ++j) {
    if (std::abs(i_ideal[j]) <= kCurrentEps) {
      ++res.excluded;
      continue;
    }
    const double nf = (i_ideal[j] - i_nonideal[j]) / i_ideal[j];
    res.per_column[static_cast<std::size_t>(j)] = nf;
    res.included.push_back(j);
    sum += nf;
  }
  if (res.included.empty()) throw NumericError("NF undefined for this input");
  res.aggregate = sum / static_cast<double>(res.included.size());
  if (inst.has_ref && std::abs(i_ideal[total_cols - 1]) > kCurrentEps)
    res.ref_column = (i_ideal[total_cols - 1] - i_nonideal[total_cols - 1]) / i_ideal[total_cols - 1];
  return res;
}

PowerResult crossbar_power(const CrossbarInstance& inst, const Eigen::VectorXd& v_in) {
  PowerResult res;
  const int total_cols = static_cast<int>(inst.g_nominal.cols());
  const int weight_cols = inst.has_ref ? total_cols - 1 : total_cols;
  for (int i = 0; i < inst.g_nominal.rows(); ++i) {
    const double v2 = v_in[i] * v_in[i];
    for (int j = 0; j < total_cols; ++j) {
      const double p = v2 * inst.g_nominal(i, j);
      res.ideal_w += p;
      if (j < weight_cols) res.ideal_weights_only_w += p;
    }
  }
  const SolveResult sr = nodal_solve(inst, v_in);
  res.nonideal_w = v_in.dot(sr.source_currents);
  return res;
}

}  // namespace xbnn

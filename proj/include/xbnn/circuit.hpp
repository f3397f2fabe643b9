#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <iosfwd>
#include <optional>
#include <vector>

#include "xbnn/device.hpp"
#include "xbnn/mapping.hpp"

namespace xbnn {

// Solution of the parasitic resistive network for one input vector.
struct SolveResult {
  Eigen::VectorXd column_currents;  // one per crossbar column (incl. reference if present)
  Eigen::VectorXd source_currents;  // current delivered by each row driver
  Eigen::MatrixXd node_voltages;    // 2R x C: row-line nodes on top, column-line nodes below
};

// Ideal MVM: I_j = sum_i g(i,j) * v(i).
Eigen::VectorXd ideal_mvm(const Eigen::VectorXd& v_in, const Eigen::MatrixXd& g);

// Exact nodal analysis of one crossbar tile with parasitics. Topology: each
// row i is the chain  source(V_i) -Rdriver- n(i,0) -Rwire_row- ... -
// n(i,C-1); each column j is the chain m(0,j) -Rwire_col- ... - m(R-1,j)
// -Rsense- ground; the device g(i,j) bridges n(i,j) and m(i,j). The driver
// sits at the column-0 end of each row and the sense resistor at the bottom
// of each column. Zero-valued parasitics collapse the adjacent nodes.
//
// The reduced conductance system is assembled once and factorized
// (SimplicialLDLT); each solve reuses the factorization, so equivalent-
// conductance extraction costs R back-substitutions.
class NodalSolver {
 public:
  NodalSolver(Eigen::MatrixXd g, const DeviceConfig& cfg);

  SolveResult solve(const Eigen::VectorXd& v_in) const;

  int rows() const { return R_; }
  int cols() const { return C_; }

  // Total power dissipated across every resistor and device, for the energy
  // balance check against sum_i V_i * I_source_i.
  double total_dissipation(const Eigen::VectorXd& v_in, const SolveResult& r) const;

  // Largest KCL residual over unknown nodes, relative to the local current
  // scale. Diagnostic; <= 1e-9 on well-posed systems (the evaluation itself
  // cancels across the wire/device conductance spread, which caps it well
  // above the linear-solve accuracy).
  double max_kcl_residual(const Eigen::VectorXd& v_in, const SolveResult& r) const;

  // Matrix-market dump of the reduced system (matrix + RHS for v_in) for
  // cross-checking with external circuit tools.
  void dump_system(const Eigen::VectorXd& v_in, std::ostream& os) const;

 private:
  enum NodeClass { kUnknown, kSource, kGround };

  int node_n(int i, int j) const { return i * C_ + j; }
  int node_m(int i, int j) const { return R_ * C_ + i * C_ + j; }
  int node_source(int i) const { return 2 * R_ * C_ + i; }
  int node_ground() const { return 2 * R_ * C_ + R_; }

  int find(int id) const;
  double phi(int id, const Eigen::VectorXd& v_in, const Eigen::VectorXd& x) const;

  Eigen::MatrixXd g_;
  DeviceConfig cfg_;
  int R_ = 0;
  int C_ = 0;

  std::vector<int> parent_;         // DSU over node ids (zero-R collapses)
  std::vector<NodeClass> cls_;      // class per representative id
  std::vector<int> source_row_;     // representative id -> driving row (kSource only)
  std::vector<int> unknown_index_;  // representative id -> reduced index, -1 otherwise
  int n_unknown_ = 0;

  struct Edge {
    int a, b;
    double g;
  };
  std::vector<Edge> edges_;  // finite-conductance elements (parasitics + devices)

  Eigen::SparseMatrix<double> A_;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt_;
  // Couplings from unknown nodes to source nodes: b[u] += g * V(row).
  std::vector<std::vector<std::pair<int, double>>> src_coupling_;
};

// A sampled non-ideal realization of one tile: nominal conductances, the
// variation draw, and the extracted equivalent conductance matrix, which
// reproduces the parasitic network's response exactly (by superposition).
struct CrossbarInstance {
  std::optional<MappedTile> mapped;
  Eigen::MatrixXd g_nominal;
  Eigen::MatrixXd g_varied;
  Eigen::MatrixXd g_equiv;
  DeviceConfig cfg;
  bool has_ref = false;
};

// Basis-vector extraction: row i of the result is the column-current
// response to V = v_read * e_i, divided by v_read.
Eigen::MatrixXd extract_equivalent(const Eigen::MatrixXd& g_varied, const DeviceConfig& cfg);

// Builds a full instance from a mapped tile: applies device variation keyed
// by (cfg.seed, tile origin), honors cfg.vary_reference, extracts g_equiv.
CrossbarInstance make_instance(const MappedTile& tile, const DeviceConfig& cfg);

// Instance from a raw conductance matrix (no reference column, no
// variation); used for single-tile studies.
CrossbarInstance make_instance_raw(const Eigen::MatrixXd& g, const DeviceConfig& cfg);

SolveResult nodal_solve(const CrossbarInstance& inst, const Eigen::VectorXd& v_in);

// Which conductances define the ideal current in the NF ratio.
enum class NfIdealRef { Nominal, Varied };

struct NfResult {
  std::vector<double> per_column;    // NaN where excluded
  std::vector<int> included;         // column indices entering the aggregate
  double aggregate = 0.0;            // mean over included weight columns
  int excluded = 0;                  // weight columns under the current threshold
  std::optional<double> ref_column;  // reference-column NF, reported separately
};

// NF_j = (I_ideal_j - I_nonideal_j) / I_ideal_j per weight column with
// |I_ideal_j| > 1e-12 A. I_nonideal comes from the extracted equivalent
// matrix; I_ideal from nominal (default) or varied conductances.
NfResult non_ideality_factor(const CrossbarInstance& inst, const Eigen::VectorXd& v_in,
                             NfIdealRef ref = NfIdealRef::Nominal);

struct PowerResult {
  double ideal_w = 0.0;           // sum_i V_i^2 * g_nominal(i,j), all columns
  double ideal_weights_only_w = 0.0;  // same, reference column excluded
  double nonideal_w = 0.0;        // sum_i V_i * I_source_i from the nodal solve
};

PowerResult crossbar_power(const CrossbarInstance& inst, const Eigen::VectorXd& v_in);

}  // namespace xbnn

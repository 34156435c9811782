// Embedded solver for conic programs  min c'x  s.t.  Ax + s = b,  s in K,
// over zero, nonnegative, and second-order cones: a homogeneous self-dual
// operator-splitting iteration around one sparse quasi-definite factorization
// per loaded program, with Euclidean cone projections, infeasibility
// certificates, and an optional terminal active-set refinement of the
// returned KKT point. A conforming external solver can be substituted behind
// ConicBackend without touching the callers.
#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <algorithm>
#include <vector>

#include "bdcdn/relaxbuild.hpp"

namespace bdcdn {

enum class SolveStatus { optimal, primal_infeasible, dual_infeasible, iteration_limit };

const char* to_string(SolveStatus status);

struct SolverSettings {
  double eps_abs = 1e-9;
  double eps_rel = 1e-9;
  int max_iterations = 100000;
  bool scaling = true;           // Ruiz equilibration, uniform per SOC block
  double over_relaxation = 1.5;  // must lie in [1, 2)
  int check_interval = 50;       // iterations between convergence checks
  bool polish = true;            // terminal active-set KKT refinement
  // Optional initial point (empty = cold start); sizes must match the
  // program. A primal-dual optimal triple is a fixed point of the iteration.
  Eigen::VectorXd initial_x;
  Eigen::VectorXd initial_y;
  Eigen::VectorXd initial_s;
};

struct SolveResult {
  SolveStatus status = SolveStatus::iteration_limit;
  Eigen::VectorXd x;  // primal point; on dual_infeasible an unboundedness ray
  Eigen::VectorXd y;  // dual point; on primal_infeasible an infeasibility ray
  Eigen::VectorXd s;  // cone slack b - Ax
  double objective = 0.0;        // c'x (c' ray on dual_infeasible)
  double primal_residual = 0.0;  // ||Ax + s - b||
  double dual_residual = 0.0;    // ||A'y + c||
  double gap = 0.0;              // |c'x + b'y| (b'y alone on primal_infeasible)
  int iterations = 0;
  bool polished = false;
};

// Normalized, cone-membership-aware KKT residuals:
//   primal = (||Ax + s - b|| + dist_K(s)) / (1 + ||b||)
//   dual   = (||A'y + c|| + dist_K*(y)) / (1 + ||c||)
//   gap    = |c'x + b'y| / (1 + |c'x| + |b'y|)
struct KktResiduals {
  double primal = 0.0;
  double dual = 0.0;
  double gap = 0.0;
  double max() const { return std::max(primal, std::max(dual, gap)); }
};

// Euclidean projection onto the cone segment (zero -> 0, nonneg -> max(., 0),
// second order -> standard SOC projection); length mismatch throws.
Eigen::VectorXd project(const ConeSegment& segment, const Eigen::VectorXd& v);
// Projection onto the dual cone (zero rows become free).
Eigen::VectorXd project_dual(const ConeSegment& segment, const Eigen::VectorXd& v);

// Recomputes the KKT residuals of a result from scratch, independent of the
// solve loop's accounting. Empty result vectors stand for zeros.
KktResiduals check_kkt(const ConicProgram& prog, const SolveResult& result);

class ConicBackend {
 public:
  virtual ~ConicBackend() = default;
  virtual void load(const ConicProgram& prog) = 0;
  virtual SolveResult solve(const SolverSettings& settings) = 0;
};

// Homogeneous self-dual embedding solved by over-relaxed operator splitting;
// the quasi-definite system [[I, A'], [A, -I]] is factorized once per load
// and reused across iterations. Instances are not shareable mid-solve;
// distinct instances may run concurrently.
class AdmmSolver final : public ConicBackend {
 public:
  void load(const ConicProgram& prog) override;
  SolveResult solve(const SolverSettings& settings) override;

 private:
  void prepare(bool scaling);

  bool loaded_ = false;
  int n_ = 0;
  int m_ = 0;
  Eigen::SparseMatrix<double, Eigen::RowMajor> a_;
  Eigen::VectorXd b_, c_;
  std::vector<ConeSegment> cones_;
  double norm_b_ = 0.0, norm_c_ = 0.0;

  bool prepared_ = false;
  bool prepared_scaling_ = true;
  Eigen::VectorXd row_scale_, col_scale_;
  double sb_ = 1.0, sc_ = 1.0;
  Eigen::VectorXd bh_, ch_;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> kkt_;
  Eigen::VectorXd q2_;
  double hq2_ = 0.0;
};

SolveResult solve(const ConicProgram& prog, const SolverSettings& settings = {});

// Active-set Newton refinement of an optimal or iteration-limited result.
// Returns the input unchanged unless the refined point strictly improves the
// membership-aware KKT residuals; never throws on classification failure.
SolveResult refine(const ConicProgram& prog, const SolveResult& result);

namespace solver_detail {

KktResiduals normalized_kkt(const Eigen::SparseMatrix<double, Eigen::RowMajor>& a,
                            const Eigen::VectorXd& b, const Eigen::VectorXd& c,
                            const std::vector<ConeSegment>& cones,
                            const Eigen::VectorXd& x, const Eigen::VectorXd& y,
                            const Eigen::VectorXd& s);

SolveResult refine(const Eigen::SparseMatrix<double, Eigen::RowMajor>& a,
                   const Eigen::VectorXd& b, const Eigen::VectorXd& c,
                   const std::vector<ConeSegment>& cones,
                   const SolveResult& input);

}  // namespace solver_detail

}  // namespace bdcdn

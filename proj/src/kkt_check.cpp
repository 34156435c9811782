#include <cmath>
#include <stdexcept>

#include "bdcdn/conesolve.hpp"
#include "bdcdn/netmodel.hpp"

namespace bdcdn {

namespace solver_detail {

KktResiduals normalized_kkt(const Eigen::SparseMatrix<double, Eigen::RowMajor>& a,
                            const Eigen::VectorXd& b, const Eigen::VectorXd& c,
                            const std::vector<ConeSegment>& cones,
                            const Eigen::VectorXd& x, const Eigen::VectorXd& y,
                            const Eigen::VectorXd& s) {
  KktResiduals out;
  const int n = static_cast<int>(c.size());
  const int m = static_cast<int>(b.size());
  double eq = 0.0, stat = 0.0;
  if (m > 0) eq = (a * x + s - b).norm();
  if (n > 0) stat = (a.transpose() * y + c).norm();
  double dist_s_sq = 0.0, dist_y_sq = 0.0;
  int pos = 0;
  for (const auto& seg : cones) {
    const Eigen::VectorXd sseg = s.segment(pos, seg.size);
    const Eigen::VectorXd yseg = y.segment(pos, seg.size);
    dist_s_sq += (sseg - project(seg, sseg)).squaredNorm();
    dist_y_sq += (yseg - project_dual(seg, yseg)).squaredNorm();
    pos += seg.size;
  }
  const double ctx = c.dot(x);
  const double bty = b.dot(y);
  out.primal = (eq + std::sqrt(dist_s_sq)) / (1.0 + b.norm());
  out.dual = (stat + std::sqrt(dist_y_sq)) / (1.0 + c.norm());
  out.gap = std::abs(ctx + bty) / (1.0 + std::abs(ctx) + std::abs(bty));
  return out;
}

}  // namespace solver_detail

KktResiduals check_kkt(const ConicProgram& prog, const SolveResult& result) {
  const int n = prog.cols();
  const int m = prog.rows();
  auto fit = [](const Eigen::VectorXd& v, int len, const char* what) {
    if (v.size() == len) return v;
    if (v.size() == 0) return Eigen::VectorXd::Zero(len).eval();
    throw std::invalid_argument(detail::strf(
        "kkt check: %s has length %d, expected %d", what,
        static_cast<int>(v.size()), len));
  };
  return solver_detail::normalized_kkt(prog.a, prog.b, prog.c, prog.cones,
                                       fit(result.x, n, "x"),
                                       fit(result.y, m, "y"),
                                       fit(result.s, m, "s"));
}

}  // namespace bdcdn

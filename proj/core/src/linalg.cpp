#include "limcast/linalg.hpp"

#include "limcast/error.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <complex>

namespace limcast::linalg {

namespace {

using Complex = std::complex<double>;
using ComplexMatrix = Eigen::MatrixXcd;

double condition_number(const ComplexMatrix& v) {
  Eigen::JacobiSVD<ComplexMatrix> svd(v);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s(s.size() - 1) == 0.0) return std::numeric_limits<double>::infinity();
  return s(0) / s(s.size() - 1);
}

Eigen::MatrixXd expm_taylor(const Eigen::MatrixXd& a) {
  const double norm = a.cwiseAbs().colwise().sum().maxCoeff();
  int squarings = 0;
  if (norm > 0.5) squarings = static_cast<int>(std::ceil(std::log2(norm / 0.5)));
  const Eigen::MatrixXd scaled = a / std::ldexp(1.0, squarings);
  const auto n = a.rows();
  Eigen::MatrixXd result = Eigen::MatrixXd::Identity(n, n);
  Eigen::MatrixXd term = Eigen::MatrixXd::Identity(n, n);
  for (int k = 1; k <= 24; ++k) {
    term = term * scaled / static_cast<double>(k);
    result += term;
  }
  for (int i = 0; i < squarings; ++i) result = result * result;
  return result;
}

}  // namespace

Eigen::MatrixXd expm(const Eigen::MatrixXd& a) {
  if (a.rows() == 0) return a;
  Eigen::EigenSolver<Eigen::MatrixXd> es(a, true);
  if (es.info() == Eigen::Success) {
    const ComplexMatrix v = es.eigenvectors();
    if (condition_number(v) < 1e4) {
      const Eigen::VectorXcd ev = es.eigenvalues().array().exp();
      const ComplexMatrix out = v * ev.asDiagonal() * v.inverse();
      return out.real();
    }
  }
  return expm_taylor(a);
}

Eigen::MatrixXd logm(const Eigen::MatrixXd& g) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(g, true);
  if (es.info() != Eigen::Success) throw ConditioningError("eigendecomposition of the propagator failed");
  const ComplexMatrix v = es.eigenvectors();
  const Eigen::VectorXcd lambda = es.eigenvalues();
  for (Eigen::Index i = 0; i < lambda.size(); ++i) {
    if (std::abs(lambda(i)) == 0.0) throw ConditioningError("propagator is singular (zero eigenvalue)");
    if (lambda(i).real() < 0.0 && std::abs(lambda(i).imag()) <= 1e-12 * std::abs(lambda(i)))
      throw BranchAmbiguityError("propagator has a negative real eigenvalue " + std::to_string(lambda(i).real()) +
                                 "; the matrix logarithm has no real principal branch");
  }
  if (condition_number(v) > 1e10) throw ConditioningError("propagator is defective; eigenvector basis is singular");
  Eigen::VectorXcd log_lambda(lambda.size());
  for (Eigen::Index i = 0; i < lambda.size(); ++i) log_lambda(i) = std::log(lambda(i));
  const ComplexMatrix out = v * log_lambda.asDiagonal() * v.inverse();
  const double re = out.real().norm();
  const double im = out.imag().norm();
  if (im > 1e-8 * std::max(re, 1e-300))
    throw BranchAmbiguityError("matrix logarithm keeps an imaginary residue (" + std::to_string(im / std::max(re, 1e-300)) +
                               " relative); eigenvalues near the Nyquist branch cut");
  return out.real();
}

double spectral_radius(const Eigen::MatrixXd& a) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(a, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

double max_real_eigenvalue(const Eigen::MatrixXd& a) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(a, false);
  return es.eigenvalues().real().maxCoeff();
}

PsdRepair psd_repair(const Eigen::MatrixXd& q) {
  PsdRepair out;
  const Eigen::MatrixXd sym = 0.5 * (q + q.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  Eigen::VectorXd w = es.eigenvalues();
  if (w.minCoeff() >= 0.0) {
    out.matrix = sym;
    return out;
  }
  const double trace = w.sum();
  double kept = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    if (w(i) < 0.0) {
      ++out.n_negative;
      out.negative_sum += w(i);
      w(i) = 0.0;
    } else {
      kept += w(i);
    }
  }
  // A non-positive trace leaves nothing to redistribute.
  out.trace_scale = (kept > 0.0 && trace > 0.0) ? trace / kept : 0.0;
  w *= out.trace_scale;
  out.matrix = es.eigenvectors() * w.asDiagonal() * es.eigenvectors().transpose();
  out.matrix = 0.5 * (out.matrix + out.matrix.transpose());
  return out;
}

Eigen::MatrixXd psd_lower_factor(const Eigen::MatrixXd& q) {
  const auto n = q.rows();
  Eigen::LLT<Eigen::MatrixXd> llt(q);
  if (llt.info() == Eigen::Success) {
    Eigen::MatrixXd l = llt.matrixL();
    if ((l * l.transpose() - q).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, q.cwiseAbs().maxCoeff())) return l;
  }
  // Semidefinite: B = U sqrt(W) gives B B^T = Q; with B^T = Q_r R we get Q = R^T R.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (q + q.transpose()));
  const Eigen::VectorXd w = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd b = es.eigenvectors() * w.asDiagonal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(b.transpose());
  Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index i = 0; i < n; ++i)
    if (r(i, i) < 0.0) r.row(i) *= -1.0;
  return r.transpose();
}

}  // namespace limcast::linalg

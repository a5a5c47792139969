#pragma once

#include <Eigen/Dense>

namespace limcast::linalg {

/// exp(A). Uses the eigendecomposition when the eigenvector basis is well
/// conditioned, otherwise scaling-and-squaring of a Taylor polynomial
/// (defective or near-defective A).
Eigen::MatrixXd expm(const Eigen::MatrixXd& a);

/// Real principal logarithm via the complex eigendecomposition.
/// Throws BranchAmbiguityError when the reassembled matrix keeps an imaginary
/// part above 1e-8 * ||log|| (negative real eigenvalues, unpaired branches),
/// ConditioningError for singular or defective input.
Eigen::MatrixXd logm(const Eigen::MatrixXd& g);

double spectral_radius(const Eigen::MatrixXd& a);
double max_real_eigenvalue(const Eigen::MatrixXd& a);

struct PsdRepair {
  Eigen::MatrixXd matrix;
  int n_negative = 0;
  double negative_sum = 0.0;  // sum of the clipped eigenvalues (<= 0)
  double trace_scale = 1.0;   // factor applied to the kept spectrum
};

/// Symmetrise, clip negative eigenvalues to zero and rescale the remaining
/// spectrum so the trace is preserved. A symmetric PSD input is returned as is.
PsdRepair psd_repair(const Eigen::MatrixXd& q);

/// Lower-triangular F with F F^T = Q for symmetric positive semidefinite Q
/// (singular Q allowed).
Eigen::MatrixXd psd_lower_factor(const Eigen::MatrixXd& q);

}  // namespace limcast::linalg

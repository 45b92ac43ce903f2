#pragma once

#include <Eigen/Dense>

namespace ccis::eval {

// Symmetric PSD square root via eigendecomposition; eigenvalues in
// (-1e-8 * scale, 0) are clamped to zero, anything more negative is an error.
Eigen::MatrixXd spd_sqrt(const Eigen::MatrixXd& m);

// ||mu1-mu2||^2 + tr(cov1 + cov2 - 2 (cov1 cov2)^{1/2}), computed through the
// symmetrized product sqrt(cov1)^{1/2}... i.e. sqrt(s1 * cov2 * s1).
double frechet_distance(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& cov1,
                        const Eigen::VectorXd& mu2, const Eigen::MatrixXd& cov2);

}  // namespace ccis::eval

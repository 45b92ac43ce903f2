#include "ccis/eval/frechet.hpp"

#include "ccis/core/errors.hpp"

namespace ccis::eval {

Eigen::MatrixXd spd_sqrt(const Eigen::MatrixXd& m) {
    if (m.rows() != m.cols()) throw ShapeError("spd_sqrt: square matrix required");
    const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
    if (eig.info() != Eigen::Success) throw NumericError("spd_sqrt: eigendecomposition failed");
    Eigen::VectorXd vals = eig.eigenvalues();
    const double scale = std::max(1.0, vals.cwiseAbs().maxCoeff());
    for (int i = 0; i < vals.size(); ++i) {
        if (vals[i] < -1e-8 * scale)
            throw NumericError("spd_sqrt: matrix has a strongly negative eigenvalue " +
                               std::to_string(vals[i]));
        vals[i] = std::sqrt(std::max(0.0, vals[i]));
    }
    return eig.eigenvectors() * vals.asDiagonal() * eig.eigenvectors().transpose();
}

double frechet_distance(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& cov1,
                        const Eigen::VectorXd& mu2, const Eigen::MatrixXd& cov2) {
    const auto f = mu1.size();
    if (mu2.size() != f || cov1.rows() != f || cov1.cols() != f || cov2.rows() != f ||
        cov2.cols() != f)
        throw ShapeError("frechet_distance: dimension mismatch");

    const Eigen::MatrixXd s1 = spd_sqrt(cov1);
    const Eigen::MatrixXd inner = s1 * cov2 * s1;  // symmetric PSD up to roundoff
    const Eigen::MatrixXd sym = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
    if (eig.info() != Eigen::Success)
        throw NumericError("frechet_distance: eigendecomposition failed");
    Eigen::VectorXd vals = eig.eigenvalues();
    const double scale = std::max(1.0, vals.cwiseAbs().maxCoeff());
    double trace_sqrt = 0;
    for (int i = 0; i < vals.size(); ++i) {
        if (vals[i] < -1e-8 * scale)
            throw NumericError("frechet_distance: product matrix is not PSD");
        trace_sqrt += std::sqrt(std::max(0.0, vals[i]));
    }
    const double d2 = (mu1 - mu2).squaredNorm() + cov1.trace() + cov2.trace() - 2.0 * trace_sqrt;
    return std::max(0.0, d2);
}

}  // namespace ccis::eval

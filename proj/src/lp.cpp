#include "gridcascade/lp.hpp"

#include <stdexcept>
#include <vector>

namespace gridcascade {

namespace {

// Tableau over y >= 0 with rows  T y = rhs; last row is the objective
// (reduced costs, to be driven non-negative for a max problem).
struct Tableau {
    Eigen::MatrixXd t;
    std::vector<long> basis;
    int pivots = 0;

    [[nodiscard]] long rows() const { return t.rows() - 1; }
    [[nodiscard]] long cols() const { return t.cols() - 1; }

    void pivot(long r, long c) {
        t.row(r) /= t(r, c);
        for (long i = 0; i <= rows(); ++i) {
            if (i != r && t(i, c) != 0.0) {
                t.row(i) -= t(i, c) * t.row(r);
            }
        }
        basis[static_cast<std::size_t>(r)] = c;
        ++pivots;
    }

    // Bland's rule on the columns allowed by `usable`.
    void optimize(const std::vector<bool>& usable, double tol) {
        for (int guard = 0; guard < 50000; ++guard) {
            long enter = -1;
            for (long j = 0; j < cols(); ++j) {
                if (usable[static_cast<std::size_t>(j)] && t(rows(), j) < -tol) {
                    enter = j;
                    break;
                }
            }
            if (enter < 0) {
                return;
            }
            long leave = -1;
            double best = 0.0;
            for (long i = 0; i < rows(); ++i) {
                if (t(i, enter) > tol) {
                    const double ratio = t(i, cols()) / t(i, enter);
                    if (leave < 0 || ratio < best - tol ||
                        (ratio <= best + tol && basis[static_cast<std::size_t>(i)] < basis[static_cast<std::size_t>(leave)])) {
                        leave = i;
                        best = ratio;
                    }
                }
            }
            if (leave < 0) {
                throw std::logic_error("lp unbounded despite finite bounds");
            }
            pivot(leave, enter);
        }
        throw std::runtime_error("lp pivot limit reached");
    }
};

}  // namespace

LpResult solve_lp(const LpProblem& p, double tol) {
    const long n = p.c.size();
    const long m = p.a.rows();
    if (p.a.cols() != n || p.b.size() != m || p.lo.size() != n || p.hi.size() != n) {
        throw std::invalid_argument("lp dimensions disagree");
    }
    // x = lo + y, 0 <= y <= hi - lo. Rows: general constraints then upper
    // bounds, each with a slack; rows with negative rhs are negated and get
    // an artificial.
    const long rows = m + n;
    Eigen::MatrixXd a(rows, n);
    Eigen::VectorXd rhs(rows);
    a.topRows(m) = p.a;
    rhs.head(m) = p.b - p.a * p.lo;
    a.bottomRows(n).setIdentity();
    rhs.tail(n) = p.hi - p.lo;

    std::vector<long> art_rows;
    for (long i = 0; i < rows; ++i) {
        if (rhs(i) < 0.0) art_rows.push_back(i);
    }
    const long n_art = static_cast<long>(art_rows.size());
    const long cols = n + rows + n_art;
    Tableau tab;
    tab.t = Eigen::MatrixXd::Zero(rows + 1, cols + 1);
    tab.basis.assign(static_cast<std::size_t>(rows), 0);
    long k = 0;
    for (long i = 0; i < rows; ++i) {
        const double s = rhs(i) < 0.0 ? -1.0 : 1.0;
        tab.t.row(i).head(n) = s * a.row(i);
        tab.t(i, n + i) = s;
        tab.t(i, cols) = s * rhs(i);
        if (s < 0.0) {
            tab.t(i, n + rows + k) = 1.0;
            tab.basis[static_cast<std::size_t>(i)] = n + rows + k;
            ++k;
        } else {
            tab.basis[static_cast<std::size_t>(i)] = n + i;
        }
    }

    std::vector<bool> usable(static_cast<std::size_t>(cols), true);
    LpResult res;
    if (n_art > 0) {
        // Phase one: minimize the artificial sum, i.e. maximize its negative.
        for (long j = 0; j < n_art; ++j) tab.t(rows, n + rows + j) = 1.0;
        for (long i : art_rows) tab.t.row(rows) -= tab.t.row(i);
        tab.optimize(usable, tol);
        // The objective cell holds minus the artificial sum.
        if (tab.t(rows, cols) < -1e-7) {
            res.pivots = tab.pivots;
            return res;
        }
        // Drive remaining artificials out of the basis where possible.
        for (long i = 0; i < rows; ++i) {
            if (tab.basis[static_cast<std::size_t>(i)] >= n + rows) {
                for (long j = 0; j < n + rows; ++j) {
                    if (std::abs(tab.t(i, j)) > 1e-9) {
                        tab.pivot(i, j);
                        break;
                    }
                }
            }
        }
        for (long j = n + rows; j < cols; ++j) usable[static_cast<std::size_t>(j)] = false;
    }

    tab.t.row(rows).setZero();
    tab.t.row(rows).head(n) = -p.c.transpose();
    for (long i = 0; i < rows; ++i) {
        const long bj = tab.basis[static_cast<std::size_t>(i)];
        if (tab.t(rows, bj) != 0.0) tab.t.row(rows) -= tab.t(rows, bj) * tab.t.row(i);
    }
    tab.optimize(usable, tol);

    Eigen::VectorXd y = Eigen::VectorXd::Zero(n);
    for (long i = 0; i < rows; ++i) {
        const long bj = tab.basis[static_cast<std::size_t>(i)];
        if (bj < n) y(bj) = tab.t(i, cols);
    }
    res.status = LpStatus::optimal;
    res.x = (p.lo + y).cwiseMax(p.lo).cwiseMin(p.hi);
    res.objective = p.c.dot(res.x);
    res.pivots = tab.pivots;
    return res;
}

}  // namespace gridcascade

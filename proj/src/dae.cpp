#include "gridcascade/dae.hpp"

#include <Eigen/SparseLU>

namespace gridcascade {

namespace {

Eigen::VectorXd to_vec(const std::vector<double>& x) {
    return Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<long>(x.size()));
}

}  // namespace

Eigen::MatrixXd LinearDae::a() const {
    const long d = static_cast<long>(nd());
    const long n = d + static_cast<long>(na());
    Eigen::MatrixXd m(n, n);
    m.topLeftCorner(d, d) = a_dd;
    m.topRightCorner(d, n - d) = a_da;
    m.bottomLeftCorner(n - d, d) = a_ad;
    m.bottomRightCorner(n - d, n - d) = Eigen::MatrixXd(a_aa);
    return m;
}

Eigen::MatrixXd LinearDae::reduced() const {
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu(a_aa);
    const Eigen::MatrixXd x = lu.solve(a_ad);
    return a_dd - a_da * x;
}

Eigen::MatrixXd LinearDae::reduced_b_u() const {
    const long d = static_cast<long>(nd());
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu(a_aa);
    const Eigen::MatrixXd x = lu.solve(Eigen::MatrixXd(b_u.bottomRows(b_u.rows() - d)));
    return b_u.topRows(d) - a_da * x;
}

LinearDae linearize_dae(const Simulation& sim, double eps) {
    LinearDae out;
    const GridCase& grid = sim.grid();
    const std::vector<double> xd0 = sim.differential();
    const std::vector<double> xa0 = sim.algebraic();
    const std::vector<double> u0 = sim.inputs();
    const auto nd = static_cast<long>(xd0.size());
    const auto na = static_cast<long>(xa0.size());

    for (const auto& m : sim.state().machines) {
        for (const char* s : {"delta", "omega", "e", "q_cmd"}) {
            out.x_d.push_back("gen" + std::to_string(m.gen) + "." + s);
        }
        out.u.push_back("gen" + std::to_string(m.gen) + ".q_sched");
    }
    for (const auto& h : grid.hvdc) {
        out.x_d.push_back("hvdc" + std::to_string(h.id) + ".p");
        out.u.push_back("hvdc" + std::to_string(h.id) + ".setpoint");
    }
    const NetworkProblem& pb = sim.network();
    const std::vector<int> th = pb.theta_nodes();
    const std::vector<int> vn = pb.v_nodes();
    auto node_label = [&grid](int k) {
        const auto n = grid.buses.size();
        return static_cast<std::size_t>(k) < n ? "bus" + std::to_string(grid.buses[static_cast<std::size_t>(k)].id)
                                                : "node" + std::to_string(k);
    };
    for (int k : th) out.x_a.push_back(node_label(k) + ".theta");
    for (int k : vn) out.x_a.push_back(node_label(k) + ".v");
    for (const auto& b : grid.buses) out.w.push_back("bus" + std::to_string(b.id) + ".p");
    for (const auto& b : grid.buses) out.w.push_back("bus" + std::to_string(b.id) + ".q");

    std::vector<Eigen::Triplet<double>> et;
    for (long i = 0; i < nd; ++i) et.emplace_back(i, i, 1.0);
    out.e.resize(nd + na, nd + na);
    out.e.setFromTriplets(et.begin(), et.end());

    Simulation work = sim;
    auto eval = [&](const std::vector<double>& xd, const std::vector<double>& xa, const std::vector<double>& u,
                    Eigen::VectorXd& f, Eigen::VectorXd& g) {
        work.set_inputs(u);
        work.set_point(xd, xa);
        f = to_vec(work.derivatives());
        g = work.algebraic_residual();
    };

    out.a_dd.resize(nd, nd);
    out.a_ad.resize(na, nd);
    out.a_da.resize(nd, na);
    out.b_u = Eigen::MatrixXd::Zero(nd + na, static_cast<long>(u0.size()));
    Eigen::VectorXd fp, gp, fm, gm;
    for (long j = 0; j < nd; ++j) {
        auto xp = xd0;
        auto xm = xd0;
        xp[static_cast<std::size_t>(j)] += eps;
        xm[static_cast<std::size_t>(j)] -= eps;
        eval(xp, xa0, u0, fp, gp);
        eval(xm, xa0, u0, fm, gm);
        out.a_dd.col(j) = (fp - fm) / (2.0 * eps);
        out.a_ad.col(j) = (gp - gm) / (2.0 * eps);
    }
    for (long j = 0; j < na; ++j) {
        auto xp = xa0;
        auto xm = xa0;
        xp[static_cast<std::size_t>(j)] += eps;
        xm[static_cast<std::size_t>(j)] -= eps;
        eval(xd0, xp, u0, fp, gp);
        eval(xd0, xm, u0, fm, gm);
        out.a_da.col(j) = (fp - fm) / (2.0 * eps);
    }
    for (std::size_t j = 0; j < u0.size(); ++j) {
        auto up = u0;
        auto um = u0;
        up[j] += eps;
        um[j] -= eps;
        eval(xd0, xa0, up, fp, gp);
        eval(xd0, xa0, um, fm, gm);
        out.b_u.col(static_cast<long>(j)) << (fp - fm) / (2.0 * eps), (gp - gm) / (2.0 * eps);
    }

    // The residual is computed minus specified, so a unit of extra
    // injection lowers it by one.
    out.a_aa = pb.jacobian(sim.node_v(), sim.node_theta());
    const auto nb = static_cast<long>(grid.buses.size());
    out.b_w = Eigen::MatrixXd::Zero(nd + na, 2 * nb);
    for (std::size_t r = 0; r < th.size(); ++r) {
        if (th[r] < nb) out.b_w(nd + static_cast<long>(r), th[r]) = -1.0;
    }
    for (std::size_t r = 0; r < vn.size(); ++r) {
        if (vn[r] < nb) out.b_w(nd + static_cast<long>(th.size() + r), nb + vn[r]) = -1.0;
    }
    return out;
}

}  // namespace gridcascade

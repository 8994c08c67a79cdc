#include "gridcascade/powerflow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/SparseLU>

namespace gridcascade {

namespace {

Eigen::VectorXcd phasors(const std::vector<double>& v, const std::vector<double>& theta) {
    Eigen::VectorXcd out(static_cast<long>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[static_cast<long>(i)] = std::polar(v[i], theta[i]);
    }
    return out;
}

bool is_unknown_theta(NodeType t) { return t == NodeType::pq || t == NodeType::pv; }

}  // namespace

std::vector<int> NetworkProblem::theta_nodes() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < type.size(); ++i) {
        if (is_unknown_theta(type[i])) {
            out.push_back(static_cast<int>(i));
        }
    }
    return out;
}

std::vector<int> NetworkProblem::v_nodes() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < type.size(); ++i) {
        if (type[i] == NodeType::pq) {
            out.push_back(static_cast<int>(i));
        }
    }
    return out;
}

Eigen::VectorXcd NetworkProblem::power(const std::vector<double>& v, const std::vector<double>& theta) const {
    const Eigen::VectorXcd u = phasors(v, theta);
    const Eigen::VectorXcd current = y * u;
    return u.cwiseProduct(current.conjugate());
}

void NetworkProblem::residual(const std::vector<double>& v, const std::vector<double>& theta,
                              Eigen::VectorXd& dp, Eigen::VectorXd& dq) const {
    const Eigen::VectorXcd s = power(v, theta);
    const auto n = static_cast<long>(size());
    dp.setZero(n);
    dq.setZero(n);
    for (long i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        if (type[k] == NodeType::dead) {
            continue;
        }
        dp[i] = s[i].real() - (p_inj[k] - p_load[k].at(v[k]));
        dq[i] = s[i].imag() - (q_inj[k] - q_load[k].at(v[k]));
    }
}

Eigen::VectorXd NetworkProblem::stacked_residual(const std::vector<double>& v, const std::vector<double>& theta) const {
    Eigen::VectorXd dp;
    Eigen::VectorXd dq;
    residual(v, theta, dp, dq);
    const auto tn = theta_nodes();
    const auto vn = v_nodes();
    Eigen::VectorXd out(static_cast<long>(tn.size() + vn.size()));
    long r = 0;
    for (int i : tn) {
        out[r++] = dp[i];
    }
    for (int i : vn) {
        out[r++] = dq[i];
    }
    return out;
}

Eigen::SparseMatrix<double> NetworkProblem::jacobian(const std::vector<double>& v,
                                                     const std::vector<double>& theta) const {
    const auto n = static_cast<long>(size());
    const Eigen::VectorXcd u = phasors(v, theta);
    const Eigen::VectorXcd current = y * u;

    std::vector<long> theta_col(static_cast<std::size_t>(n), -1);
    std::vector<long> v_col(static_cast<std::size_t>(n), -1);
    const auto tn = theta_nodes();
    const auto vn = v_nodes();
    const auto nt = static_cast<long>(tn.size());
    for (long c = 0; c < nt; ++c) {
        theta_col[static_cast<std::size_t>(tn[static_cast<std::size_t>(c)])] = c;
    }
    for (long c = 0; c < static_cast<long>(vn.size()); ++c) {
        v_col[static_cast<std::size_t>(vn[static_cast<std::size_t>(c)])] = nt + c;
    }
    // Row of the P equation is theta_col, row of the Q equation is v_col.

    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(y.nonZeros()) * 4 + static_cast<std::size_t>(n) * 4);
    auto put = [&](long i, long k, Complex ds_dtheta, Complex ds_dv) {
        const long pr = theta_col[static_cast<std::size_t>(i)];
        const long qr = v_col[static_cast<std::size_t>(i)];
        const long tc = theta_col[static_cast<std::size_t>(k)];
        const long vc = v_col[static_cast<std::size_t>(k)];
        if (pr >= 0) {
            if (tc >= 0) trip.emplace_back(pr, tc, ds_dtheta.real());
            if (vc >= 0) trip.emplace_back(pr, vc, ds_dv.real());
        }
        if (qr >= 0) {
            if (tc >= 0) trip.emplace_back(qr, tc, ds_dtheta.imag());
            if (vc >= 0) trip.emplace_back(qr, vc, ds_dv.imag());
        }
    };

    const Complex j(0.0, 1.0);
    for (long k = 0; k < y.outerSize(); ++k) {
        for (Eigen::SparseMatrix<Complex>::InnerIterator it(y, k); it; ++it) {
            const long i = it.row();
            const Complex yik = it.value();
            const Complex ui = u[i];
            const Complex uk = u[k];
            const double vk = std::abs(uk);
            const Complex dtheta = -j * ui * std::conj(yik * uk);
            const Complex dv = vk > 0.0 ? ui * std::conj(yik * uk / vk) : Complex(0.0);
            put(i, k, dtheta, dv);
        }
    }
    for (long i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        if (type[k] == NodeType::dead) {
            continue;
        }
        const Complex ui = u[i];
        const double vi = std::abs(ui);
        const Complex dtheta = j * ui * std::conj(current[i]);
        Complex dv = vi > 0.0 ? std::conj(current[i]) * ui / vi : Complex(0.0);
        dv += Complex(p_load[k].slope(v[k]), q_load[k].slope(v[k]));
        put(i, i, dtheta, dv);
    }

    const long m = nt + static_cast<long>(vn.size());
    Eigen::SparseMatrix<double> jac(m, m);
    jac.setFromTriplets(trip.begin(), trip.end());
    jac.makeCompressed();
    return jac;
}

NewtonResult newton_solve(const NetworkProblem& problem, std::vector<double>& v, std::vector<double>& theta,
                          const NewtonOptions& options) {
    const auto tn = problem.theta_nodes();
    const auto vn = problem.v_nodes();
    for (std::size_t i = 0; i < problem.size(); ++i) {
        if (problem.type[i] == NodeType::dead) {
            v[i] = 0.0;
            theta[i] = 0.0;
        }
    }
    NewtonResult result;
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
    for (int iter = 0;; ++iter) {
        const Eigen::VectorXd f = problem.stacked_residual(v, theta);
        const double mismatch = f.size() == 0 ? 0.0 : f.cwiseAbs().maxCoeff();
        result.iterations = iter;
        result.max_mismatch = mismatch;
        if (!std::isfinite(mismatch)) {
            throw PowerFlowError("power flow diverged", iter, mismatch);
        }
        if (mismatch <= options.tol) {
            return result;
        }
        if (iter >= options.max_iter) {
            throw PowerFlowError("power flow did not converge in " + std::to_string(iter) + " iterations", iter,
                                 mismatch);
        }
        const Eigen::SparseMatrix<double> jac = problem.jacobian(v, theta);
        lu.compute(jac);
        if (lu.info() != Eigen::Success) {
            throw PowerFlowError("singular power-flow Jacobian", iter, mismatch);
        }
        const Eigen::VectorXd dx = lu.solve(-f);
        long r = 0;
        for (int i : tn) {
            theta[static_cast<std::size_t>(i)] += dx[r++];
        }
        for (int i : vn) {
            v[static_cast<std::size_t>(i)] += dx[r++];
        }
    }
}

void mark_dead_islands(NetworkProblem& problem) {
    const auto n = static_cast<long>(problem.size());
    std::vector<std::vector<long>> adj(static_cast<std::size_t>(n));
    for (long k = 0; k < problem.y.outerSize(); ++k) {
        for (Eigen::SparseMatrix<Complex>::InnerIterator it(problem.y, k); it; ++it) {
            if (it.row() != k && it.value() != Complex(0.0)) {
                adj[static_cast<std::size_t>(it.row())].push_back(k);
            }
        }
    }
    std::vector<int> seen(static_cast<std::size_t>(n), 0);
    for (long s = 0; s < n; ++s) {
        if (seen[static_cast<std::size_t>(s)]) {
            continue;
        }
        std::vector<long> members;
        std::vector<long> stack{s};
        seen[static_cast<std::size_t>(s)] = 1;
        bool has_ref = false;
        while (!stack.empty()) {
            const long k = stack.back();
            stack.pop_back();
            members.push_back(k);
            has_ref = has_ref || problem.type[static_cast<std::size_t>(k)] == NodeType::ref;
            for (long m : adj[static_cast<std::size_t>(k)]) {
                if (!seen[static_cast<std::size_t>(m)]) {
                    seen[static_cast<std::size_t>(m)] = 1;
                    stack.push_back(m);
                }
            }
        }
        if (!has_ref) {
            for (long k : members) {
                problem.type[static_cast<std::size_t>(k)] = NodeType::dead;
            }
        }
    }
}

// ---------------------------------------------------------------------------

NetworkProblem static_problem(const GridCase& grid, bool generators_as_pq, const std::vector<double>* extra_q) {
    NetworkProblem pb;
    const std::size_t n = grid.buses.size();
    pb.y = assemble_admittance(grid).y;
    pb.type.assign(n, NodeType::pq);
    pb.p_inj.assign(n, 0.0);
    pb.q_inj.assign(n, 0.0);
    pb.p_load.assign(n, {});
    pb.q_load.assign(n, {});

    for (const auto& l : grid.loads) {
        const auto k = grid.bus_index(l.bus);
        pb.p_load[k].a2 += l.p_nom * l.zip_p.z;
        pb.p_load[k].a1 += l.p_nom * l.zip_p.i;
        pb.p_load[k].a0 += l.p_nom * l.zip_p.p;
        pb.q_load[k].a2 += l.q_nom * l.zip_q.z;
        pb.q_load[k].a1 += l.q_nom * l.zip_q.i;
        pb.q_load[k].a0 += l.q_nom * l.zip_q.p;
    }
    for (const auto& g : grid.generators) {
        if (!g.online) {
            continue;
        }
        const auto k = grid.bus_index(g.bus);
        pb.p_inj[k] += g.p;
        if (generators_as_pq) {
            pb.q_inj[k] += g.q;
        } else if (pb.type[k] != NodeType::ref) {
            pb.type[k] = NodeType::pv;
        }
    }
    for (const auto& g : grid.ibr_groups) {
        if (g.online) {
            const auto k = grid.bus_index(g.collector_bus);
            pb.p_inj[k] += g.p;
            pb.q_inj[k] += g.q;
        }
    }
    for (const auto& h : grid.hvdc) {
        if (h.online) {
            pb.p_inj[grid.bus_index(h.terminal_a)] -= h.p_set;
            pb.p_inj[grid.bus_index(h.terminal_b)] += h.p_set;
        }
    }
    if (extra_q != nullptr) {
        for (std::size_t k = 0; k < n; ++k) {
            pb.q_inj[k] += (*extra_q)[k];
        }
    }
    if (grid.slack_bus != 0) {
        pb.type[grid.bus_index(grid.slack_bus)] = NodeType::ref;
    }
    mark_dead_islands(pb);
    return pb;
}

namespace {

struct BusGenerators {
    std::vector<const SyncGenerator*> gens;
    double q_min = 0.0;
    double q_max = 0.0;
    double v_set = 1.0;
};

std::vector<BusGenerators> generators_by_bus(const GridCase& grid) {
    std::vector<BusGenerators> out(grid.buses.size());
    for (const auto& g : grid.generators) {
        if (!g.online) {
            continue;
        }
        auto& slot = out[grid.bus_index(g.bus)];
        if (slot.gens.empty()) {
            slot.v_set = g.v_set;
        }
        slot.gens.push_back(&g);
        slot.q_min += g.q_min;
        slot.q_max += g.q_max;
    }
    return out;
}

}  // namespace

PowerFlowSolution solve_pf(const GridCase& grid, const PowerFlowOptions& options) {
    if (grid.slack_bus == 0 || !grid.has_bus(grid.slack_bus)) {
        throw CaseError("power flow needs a slack bus");
    }
    NetworkProblem pb = static_problem(grid, options.generators_as_pq);
    const std::size_t n = grid.buses.size();
    const auto gens = generators_by_bus(grid);

    std::vector<double> v(n);
    std::vector<double> theta(n);
    for (std::size_t k = 0; k < n; ++k) {
        if (options.warm_start && options.warm_start->v.size() == n && options.warm_start->v[k] > 0.0) {
            v[k] = options.warm_start->v[k];
            theta[k] = options.warm_start->theta[k];
        } else {
            v[k] = grid.buses[k].v > 0.0 ? grid.buses[k].v : 1.0;
            theta[k] = grid.buses[k].theta;
        }
    }
    std::vector<int> limited;
    // A warm start carries over generators already pinned at a limit.
    if (options.warm_start && options.warm_start->type.size() == n && options.enforce_q_limits &&
        !options.generators_as_pq) {
        for (std::size_t k = 0; k < n; ++k) {
            if (pb.type[k] != NodeType::pv || options.warm_start->type[k] != NodeType::pq) {
                continue;
            }
            const double q_gen = options.warm_start->q[k] + pb.q_load[k].at(v[k]) - pb.q_inj[k];
            pb.type[k] = NodeType::pq;
            pb.q_inj[k] += std::abs(q_gen - gens[k].q_max) < std::abs(q_gen - gens[k].q_min) ? gens[k].q_max
                                                                                            : gens[k].q_min;
            for (const auto* g : gens[k].gens) {
                limited.push_back(g->id);
            }
        }
    }
    for (std::size_t k = 0; k < n; ++k) {
        if (!gens[k].gens.empty() && (pb.type[k] == NodeType::pv || pb.type[k] == NodeType::ref)) {
            v[k] = gens[k].v_set;
        }
    }
    const std::size_t slack = grid.bus_index(grid.slack_bus);
    theta[slack] = grid.buses[slack].theta;

    PowerFlowSolution sol;
    int total_iterations = 0;
    NewtonResult nr;
    for (int round = 0;; ++round) {
        nr = newton_solve(pb, v, theta, options.newton);
        total_iterations += nr.iterations;
        if (!options.enforce_q_limits || options.generators_as_pq || round >= 10) {
            break;
        }
        const Eigen::VectorXcd s = pb.power(v, theta);
        bool switched = false;
        for (std::size_t k = 0; k < n; ++k) {
            if (pb.type[k] != NodeType::pv) {
                continue;
            }
            const auto i = static_cast<long>(k);
            const double q_gen = s[i].imag() + pb.q_load[k].at(v[k]) - pb.q_inj[k];
            double pin = 0.0;
            if (q_gen > gens[k].q_max) {
                pin = gens[k].q_max;
            } else if (q_gen < gens[k].q_min) {
                pin = gens[k].q_min;
            } else {
                continue;
            }
            pb.type[k] = NodeType::pq;
            pb.q_inj[k] += pin;
            for (const auto* g : gens[k].gens) {
                limited.push_back(g->id);
            }
            switched = true;
        }
        if (!switched) {
            break;
        }
    }

    const Eigen::VectorXcd s = pb.power(v, theta);
    sol.buses.reserve(n);
    for (const auto& b : grid.buses) {
        sol.buses.push_back(b.id);
    }
    sol.v = v;
    sol.theta = theta;
    sol.p.resize(n);
    sol.q.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
        sol.p[k] = s[static_cast<long>(k)].real();
        sol.q[k] = s[static_cast<long>(k)].imag();
    }
    sol.type = pb.type;
    sol.iterations = total_iterations;
    sol.max_mismatch = nr.max_mismatch;
    std::sort(limited.begin(), limited.end());
    sol.limited_generators = limited;
    return sol;
}

GridCase with_solution(const GridCase& grid, const PowerFlowSolution& solution) {
    GridCase out = grid;
    const std::size_t n = grid.buses.size();
    for (std::size_t k = 0; k < n; ++k) {
        out.buses[k].v = solution.v[k];
        out.buses[k].theta = solution.theta[k];
    }
    // Generator output = network injection + local load - other injections.
    NetworkProblem pb = static_problem(grid, true);
    for (auto& g : out.generators) {
        g.q = 0.0;
    }
    std::vector<double> p_other = pb.p_inj;
    std::vector<double> q_other = pb.q_inj;
    std::vector<double> rating(n, 0.0);
    for (const auto& g : grid.generators) {
        if (g.online) {
            const auto k = grid.bus_index(g.bus);
            p_other[k] -= g.p;
            q_other[k] -= g.q;
            rating[k] += g.rating_mva;
        }
    }
    const std::size_t slack = grid.slack_bus != 0 ? grid.bus_index(grid.slack_bus) : n;
    for (auto& g : out.generators) {
        if (!g.online) {
            continue;
        }
        const auto k = grid.bus_index(g.bus);
        const double share = rating[k] > 0.0 ? g.rating_mva / rating[k] : 1.0;
        const double vk = solution.v[k];
        const double q_total = solution.q[k] + pb.q_load[k].at(vk) - q_other[k];
        g.q = share * q_total;
        if (k == slack) {
            const double p_total = solution.p[k] + pb.p_load[k].at(vk) - p_other[k];
            g.p = share * p_total;
        }
    }
    return out;
}

double balance_residual(const GridCase& grid, const PowerFlowSolution& solution) {
    const GridCase solved = with_solution(grid, solution);
    NetworkProblem pb = static_problem(solved, true);
    // Limited or not, every generator now carries a fixed injection.
    Eigen::VectorXd dp;
    Eigen::VectorXd dq;
    pb.residual(solution.v, solution.theta, dp, dq);
    double worst = 0.0;
    for (long i = 0; i < dp.size(); ++i) {
        worst = std::max({worst, std::abs(dp[i]), std::abs(dq[i])});
    }
    return worst;
}

// ---------------------------------------------------------------------------

Eigen::SparseMatrix<double> JacobianBlocks::full() const {
    const long nt = j_ptheta.cols();
    const long nv = j_qv.cols();
    std::vector<Eigen::Triplet<double>> trip;
    auto add = [&trip](const Eigen::SparseMatrix<double>& m, long r0, long c0) {
        for (long k = 0; k < m.outerSize(); ++k) {
            for (Eigen::SparseMatrix<double>::InnerIterator it(m, k); it; ++it) {
                trip.emplace_back(r0 + it.row(), c0 + it.col(), it.value());
            }
        }
    };
    add(j_ptheta, 0, 0);
    add(j_pv, 0, nt);
    add(j_qtheta, nt, 0);
    add(j_qv, nt, nt);
    Eigen::SparseMatrix<double> out(nt + nv, nt + nv);
    out.setFromTriplets(trip.begin(), trip.end());
    return out;
}

JacobianBlocks jacobian_blocks(const NetworkProblem& problem, const std::vector<double>& v,
                               const std::vector<double>& theta) {
    JacobianBlocks b;
    b.theta_nodes = problem.theta_nodes();
    b.v_nodes = problem.v_nodes();
    const auto nt = static_cast<long>(b.theta_nodes.size());
    const auto nv = static_cast<long>(b.v_nodes.size());
    const Eigen::SparseMatrix<double> jac = problem.jacobian(v, theta);
    b.j_ptheta = jac.block(0, 0, nt, nt);
    b.j_pv = jac.block(0, nt, nt, nv);
    b.j_qtheta = jac.block(nt, 0, nv, nt);
    b.j_qv = jac.block(nt, nt, nv, nv);
    return b;
}

JacobianBlocks jacobian_blocks(const GridCase& grid, const PowerFlowSolution& solution, bool generators_as_pq) {
    NetworkProblem pb;
    if (generators_as_pq) {
        pb = static_problem(with_solution(grid, solution), true);
    } else {
        pb = static_problem(grid, false);
        pb.type = solution.type;
    }
    JacobianBlocks b = jacobian_blocks(pb, solution.v, solution.theta);
    for (int i : b.theta_nodes) {
        b.theta_buses.push_back(grid.buses[static_cast<std::size_t>(i)].id);
    }
    for (int i : b.v_nodes) {
        b.v_buses.push_back(grid.buses[static_cast<std::size_t>(i)].id);
    }
    return b;
}

double condition_estimate(const Eigen::SparseMatrix<double>& a) {
    const long n = a.rows();
    if (n == 0) {
        return 1.0;
    }
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
    lu.compute(a);
    if (lu.info() != Eigen::Success) {
        return std::numeric_limits<double>::infinity();
    }
    double norm_a = 0.0;
    for (long k = 0; k < a.outerSize(); ++k) {
        double col = 0.0;
        for (Eigen::SparseMatrix<double>::InnerIterator it(a, k); it; ++it) {
            col += std::abs(it.value());
        }
        norm_a = std::max(norm_a, col);
    }

    Eigen::VectorXd x = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
    double est = 0.0;
    for (int iter = 0; iter < 5; ++iter) {
        const Eigen::VectorXd y = lu.solve(x);
        if (!y.allFinite()) {
            return std::numeric_limits<double>::infinity();
        }
        est = y.lpNorm<1>();
        Eigen::VectorXd xi(n);
        for (long i = 0; i < n; ++i) {
            xi[i] = y[i] >= 0.0 ? 1.0 : -1.0;
        }
        const Eigen::VectorXd z = lu.transpose().solve(xi);
        long jmax = 0;
        const double zmax = z.cwiseAbs().maxCoeff(&jmax);
        if (zmax <= z.dot(x)) {
            break;
        }
        x.setZero();
        x[jmax] = 1.0;
    }
    Eigen::VectorXd alt(n);
    for (long i = 0; i < n; ++i) {
        const double sign = (i % 2 == 0) ? 1.0 : -1.0;
        alt[i] = sign * (1.0 + (n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0));
    }
    const double alt_est = 2.0 * lu.solve(alt).lpNorm<1>() / (3.0 * static_cast<double>(n));
    return norm_a * std::max(est, alt_est);
}

Sensitivity voltage_sensitivity(const JacobianBlocks& blocks, const Eigen::VectorXd& dq) {
    if (dq.size() != blocks.j_qv.rows()) {
        throw std::invalid_argument("dq length does not match J_QV");
    }
    Sensitivity out;
    out.condition_estimate = condition_estimate(blocks.j_qv);
    if (!std::isfinite(out.condition_estimate)) {
        throw ConditioningError("J_QV is singular", out.condition_estimate);
    }
    if (out.condition_estimate > kConditionLimit) {
        throw ConditioningError("J_QV is ill-conditioned", out.condition_estimate);
    }
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
    lu.compute(blocks.j_qv);
    out.dv = -lu.solve(dq);
    return out;
}

// ---------------------------------------------------------------------------

ScadaView make_scada_view(const GridCase& grid, double noise_sigma) {
    ScadaView view;
    view.noise_sigma = noise_sigma;
    for (const auto& b : grid.buses) {
        if (b.kind == BusKind::transmission) {
            view.observed.push_back(b.id);
        }
    }
    return view;
}

std::vector<double> observe(const ScadaView& view, const GridCase& grid, const std::vector<double>& v,
                            std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<double> out;
    out.reserve(view.observed.size());
    for (BusId id : view.observed) {
        if (grid.bus(id).kind != BusKind::transmission) {
            throw CaseError("bus " + std::to_string(id) + " is not observable");
        }
        double m = v[grid.bus_index(id)];
        if (view.noise_sigma > 0.0) {
            m += view.noise_sigma * noise(rng);
        }
        out.push_back(m);
    }
    return out;
}

}  // namespace gridcascade

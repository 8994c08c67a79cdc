#include "gridcascade/measures.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <future>
#include <mutex>
#include <sstream>
#include <thread>

#include <Eigen/SparseLU>

#include "gridcascade/lp.hpp"

namespace gridcascade {

namespace {

constexpr double kBindTol = 1e-7;

struct Dispatchable {
    int gen = 0;
    long col = 0;  // J_QV column of its bus
    double lo = 0.0;
    double hi = 0.0;
};

double response_cap(const SyncGenerator& g, double horizon, double s_base) {
    if (g.avr.ramp_mvar_s > 0.0) {
        return std::min(g.avr.ramp_mvar_s * horizon / s_base, g.avr.q_lim);
    }
    return g.avr.q_lim;
}

double relay_threshold(const GridCase& grid, BusId bus) {
    for (const auto& g : grid.ibr_groups) {
        if (g.collector_bus == bus) {
            return g.relay_threshold;
        }
    }
    return 1.10;
}

}  // namespace

std::vector<BusId> collector_hosts(const GridCase& grid) {
    std::vector<BusId> hosts;
    for (const auto& g : grid.ibr_groups) {
        hosts.push_back(grid.transformer(g.transformer_id).hv_bus);
    }
    return hosts;
}

std::vector<QDisturbance> standard_disturbances(const GridCase& grid, double mvar) {
    std::vector<QDisturbance> out;
    for (BusId b : collector_hosts(grid)) {
        out.push_back({{{b, -mvar}}});
    }
    return out;
}

MarginVerdict verify_margin(const GridCase& grid, const std::optional<TopologyAction>& action,
                            const std::vector<QDisturbance>& disturbances, const MarginOptions& options) {
    MarginVerdict verdict;
    SimConfig sc;
    sc.t_end = sc.dt;
    try {
        const Simulation pre(grid, sc);
        verdict.condition_pre =
            condition_estimate(jacobian_blocks(pre.network(), pre.node_v(), pre.node_theta()).j_qv);
    } catch (const PowerFlowError&) {
        verdict.condition_pre = 0.0;
    }

    const GridCase edited = action ? apply_topology_action(grid, *action) : grid;
    std::optional<Simulation> sim;
    try {
        sim.emplace(edited, sc);
    } catch (const PowerFlowError&) {
        verdict.feasible = false;
        verdict.cause = "post-action infeasible";
        return verdict;
    }
    // The network as the engine sees it: machines are fixed internal EMF
    // nodes behind x'd, every bus is a load bus.
    const GridCase& post = sim->grid();
    const NetworkProblem& net = sim->network();
    const std::vector<double>& v0 = sim->node_v();
    const std::vector<double>& th0 = sim->node_theta();
    const JacobianBlocks jb = jacobian_blocks(net, v0, th0);
    verdict.condition = condition_estimate(jb.j_qv);
    verdict.ill_conditioned = !(verdict.condition <= kConditionLimit);
    if (!std::isfinite(verdict.condition)) {
        verdict.feasible = false;
        verdict.cause = "singular J_QV";
        return verdict;
    }

    const auto nv = static_cast<long>(jb.v_nodes.size());
    // dV/dQ at constant P: the Q columns of the full inverse, which is the
    // reduced Q-V Jacobian. J_QV alone holds angles and misses the strong
    // P-Q coupling behind the collector transformers.
    const auto nt = static_cast<long>(jb.theta_nodes.size());
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu(jb.full());
    if (lu.info() != Eigen::Success) {
        verdict.feasible = false;
        verdict.cause = "singular J_QV";
        return verdict;
    }
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(nt + nv, nv);
    rhs.bottomRows(nv).setIdentity();
    const Eigen::MatrixXd sens = -lu.solve(rhs).bottomRows(nv);
    const std::size_t nb = post.buses.size();
    std::map<BusId, long> col;
    for (long i = 0; i < nv; ++i) {
        const auto k = static_cast<std::size_t>(jb.v_nodes[static_cast<std::size_t>(i)]);
        if (k < nb) {
            col[post.buses[k].id] = i;
        }
    }

    std::vector<BusId> bounded;
    std::vector<VoltageBounds> bounds;
    for (const auto& b : post.buses) {
        if (!col.count(b.id)) {
            continue;  // de-energized
        }
        VoltageBounds vb;
        if (b.kind == BusKind::collector) {
            vb = {options.collector_lo, relay_threshold(post, b.id)};
        } else {
            vb = {options.transmission_lo, options.transmission_hi};
        }
        if (auto it = options.overrides.find(b.id); it != options.overrides.end()) {
            vb = it->second;
        }
        bounded.push_back(b.id);
        bounds.push_back(vb);
    }

    std::vector<Dispatchable> gens;
    for (const auto& g : post.generators) {
        if (!g.online || !col.count(g.bus)) {
            continue;
        }
        const double cap = response_cap(g, options.horizon_s, post.s_base);
        // Extra absorption moves output down towards q_min.
        const double lo = std::min(0.0, std::max(-cap, g.q - g.q_max));
        const double hi = std::max(0.0, std::min(cap, g.q - g.q_min));
        gens.push_back({g.id, col[g.bus], lo, hi});
    }
    const auto ng = static_cast<long>(gens.size());
    auto v_at = [&](BusId id) { return v0[post.bus_index(id)]; };

    verdict.feasible = true;
    verdict.slack = std::numeric_limits<double>::infinity();
    if (disturbances.empty()) {
        for (std::size_t i = 0; i < bounded.size(); ++i) {
            const double v = v_at(bounded[i]);
            verdict.slack = std::min(verdict.slack, std::min(bounds[i].hi - v, v - bounds[i].lo));
        }
        verdict.feasible = verdict.slack >= 0.0;
        if (!verdict.feasible) {
            verdict.cause = "present point outside bounds";
        }
        return verdict;
    }

    for (const auto& dist : disturbances) {
        DisturbanceVerdict dv;
        Eigen::VectorXd d = Eigen::VectorXd::Zero(nv);
        for (const auto& [bus, mvar] : dist.mvar) {
            if (!post.has_bus(bus)) {
                throw CaseError("disturbance at unknown bus " + std::to_string(bus));
            }
            if (auto it = col.find(bus); it != col.end()) {
                d(it->second) += mvar / post.s_base;
            }
        }
        const Eigen::VectorXd base = sens * d;

        // Variables: dispatch per generator, then the common slack s.
        // Maximize s with lo + s <= v <= hi - s on every bounded bus.
        const auto nr = static_cast<long>(2 * bounded.size());
        LpProblem lp;
        lp.a = Eigen::MatrixXd::Zero(nr, ng + 1);
        lp.b.resize(nr);
        for (std::size_t i = 0; i < bounded.size(); ++i) {
            const long c = col[bounded[i]];
            const double vp = v_at(bounded[i]) + base(c);
            const auto r = static_cast<long>(2 * i);
            for (long j = 0; j < ng; ++j) {
                lp.a(r, j) = sens(c, gens[static_cast<std::size_t>(j)].col);
                lp.a(r + 1, j) = -lp.a(r, j);
            }
            lp.a(r, ng) = 1.0;
            lp.a(r + 1, ng) = 1.0;
            lp.b(r) = bounds[i].hi - vp;
            lp.b(r + 1) = vp - bounds[i].lo;
        }
        lp.c = Eigen::VectorXd::Zero(ng + 1);
        lp.c(ng) = 1.0;
        lp.lo.resize(ng + 1);
        lp.hi.resize(ng + 1);
        for (long j = 0; j < ng; ++j) {
            lp.lo(j) = gens[static_cast<std::size_t>(j)].lo;
            lp.hi(j) = gens[static_cast<std::size_t>(j)].hi;
        }
        lp.lo(ng) = -10.0;
        lp.hi(ng) = 10.0;
        dv.slack = solve_lp(lp).x(ng);
        dv.feasible = dv.slack >= 0.0;

        // Least total dispatch that still reaches min(slack, 0). Without this
        // the max-slack vertex throws every machine at its limit even for
        // small disturbances. Split u = up - down, both non-negative.
        const double s_req = std::min(dv.slack, 0.0) - 1e-9;
        LpProblem least;
        least.a.resize(nr, 2 * ng);
        least.a << lp.a.leftCols(ng), -lp.a.leftCols(ng);
        least.b = lp.b.array() - s_req;
        least.c = -Eigen::VectorXd::Ones(2 * ng);
        least.lo = Eigen::VectorXd::Zero(2 * ng);
        least.hi.resize(2 * ng);
        for (long j = 0; j < ng; ++j) {
            least.hi(j) = gens[static_cast<std::size_t>(j)].hi;
            least.hi(ng + j) = -gens[static_cast<std::size_t>(j)].lo;
        }
        const LpResult lr = solve_lp(least);
        Eigen::VectorXd x = Eigen::VectorXd::Zero(ng);
        if (lr.status == LpStatus::optimal) {
            x = lr.x.head(ng) - lr.x.tail(ng);
        } else {
            x = solve_lp(lp).x.head(ng);
        }

        Eigen::VectorXd u = d;
        for (long j = 0; j < ng; ++j) {
            const Dispatchable& g = gens[static_cast<std::size_t>(j)];
            u(g.col) += x(j);
            dv.dispatch_mvar.emplace_back(g.gen, x(j) * post.s_base);
            if ((g.lo < -kBindTol && x(j) <= g.lo + kBindTol) || (g.hi > kBindTol && x(j) >= g.hi - kBindTol)) {
                dv.binding.push_back("gen:" + std::to_string(g.gen));
            }
        }
        const Eigen::VectorXd dvolt = sens * u;
        dv.buses = bounded;
        for (std::size_t i = 0; i < bounded.size(); ++i) {
            const double v = v_at(bounded[i]) + dvolt(col[bounded[i]]);
            dv.v_linear.push_back(v);
            if (std::min(bounds[i].hi - v, v - bounds[i].lo) <= std::min(dv.slack, 0.0) + kBindTol) {
                dv.binding.push_back("bus:" + std::to_string(bounded[i]));
            }
        }

        if (options.nonlinear_check) {
            NetworkProblem pb = net;
            for (long i = 0; i < nv; ++i) {
                pb.q_inj[static_cast<std::size_t>(jb.v_nodes[static_cast<std::size_t>(i)])] -= u(i);
            }
            std::vector<double> v = v0;
            std::vector<double> th = th0;
            try {
                newton_solve(pb, v, th, {1e-10, 30});
                dv.nonlinear_slack = std::numeric_limits<double>::infinity();
                for (std::size_t i = 0; i < bounded.size(); ++i) {
                    const double vi = v[post.bus_index(bounded[i])];
                    dv.v_nonlinear.push_back(vi);
                    dv.nonlinear_slack = std::min(dv.nonlinear_slack, std::min(bounds[i].hi - vi, vi - bounds[i].lo));
                }
            } catch (const PowerFlowError&) {
                dv.nonlinear_slack = -std::numeric_limits<double>::infinity();
            }
        }

        if (dv.slack < verdict.slack) {
            verdict.slack = dv.slack;
            if (!dv.feasible) {
                verdict.binding = dv.binding;
            }
        }
        verdict.feasible = verdict.feasible && dv.feasible;
        verdict.disturbances.push_back(std::move(dv));
    }
    if (!verdict.feasible) {
        verdict.cause = "no reactive dispatch keeps voltages in bounds";
    }
    return verdict;
}

ojson verdict_json(const MarginVerdict& v) {
    ojson j;
    j["feasible"] = v.feasible;
    j["slack_pu"] = v.slack;
    j["binding"] = v.binding;
    j["condition"] = std::isfinite(v.condition) ? ojson(v.condition) : ojson(nullptr);
    j["condition_pre_action"] = std::isfinite(v.condition_pre) ? ojson(v.condition_pre) : ojson(nullptr);
    j["ill_conditioned"] = v.ill_conditioned;
    j["linearization"] = "post-action";
    if (!v.cause.empty()) {
        j["cause"] = v.cause;
    }
    ojson ds = ojson::array();
    for (const auto& d : v.disturbances) {
        ojson dj;
        dj["feasible"] = d.feasible;
        dj["slack_pu"] = d.slack;
        dj["nonlinear_slack_pu"] = std::isfinite(d.nonlinear_slack) ? ojson(d.nonlinear_slack) : ojson(nullptr);
        dj["binding"] = d.binding;
        ojson disp = ojson::array();
        for (const auto& [g, q] : d.dispatch_mvar) {
            disp.push_back({{"generator", g}, {"absorb_mvar", q}});
        }
        dj["dispatch"] = disp;
        ds.push_back(dj);
    }
    j["disturbances"] = ds;
    return j;
}

// ---------------------------------------------------------------------------

bool disturbance_trips(const GridCase& grid, BusId probe, double mvar, const SimConfig& config, double horizon_s,
                       const std::optional<MeshLine>& mesh) {
    SimConfig cfg = config;
    cfg.t_end = horizon_s;
    Simulation sim(grid, cfg);
    if (mesh) {
        sim.schedule({0.0, *mesh});
    }
    if (mvar != 0.0) {
        sim.schedule({0.0, InjectQDisturbance{probe, mvar}});
    }
    while (!sim.finished()) {
        for (const auto& e : sim.step()) {
            if (e.trip && e.trip->kind == TripKind::collector) {
                return true;
            }
        }
    }
    return false;
}

RecoveryMargin meshing_screen(const GridCase& grid, const std::optional<MeshLine>& candidate, BusId probe,
                              const SimConfig& config, const ScreenOptions& options) {
    RecoveryMargin out;
    out.probe = probe;
    out.horizon_s = options.horizon_s;
    if (candidate) {
        out.candidate = candidate->branch;
        const Branch& br = grid.branch(candidate->branch);
        if (!br.mesh_candidate || br.in_service()) {
            throw CaseError("branch " + std::to_string(candidate->branch) + " is not an open mesh candidate");
        }
    }
    if (!grid.has_bus(probe)) {
        throw CaseError("unknown probe bus " + std::to_string(probe));
    }
    auto trips = [&](double m) { return disturbance_trips(grid, probe, m, config, options.horizon_s, candidate); };
    try {
        if (trips(0.0)) {
            out.cause = "trips without disturbance";
            return out;
        }
    } catch (const PowerFlowError& e) {
        out.cause = std::string("power flow failed: ") + e.what();
        return out;
    }
    double lo = 0.0;
    double hi = options.upper_mvar;
    if (!trips(hi)) {
        out.lo = out.hi = out.margin_mvar = hi;
        out.saturated = true;
        return out;
    }
    int it = 0;
    while (hi - lo > options.resolution_mvar && it < options.max_iter) {
        const double mid = 0.5 * (lo + hi);
        (trips(mid) ? hi : lo) = mid;
        ++it;
    }
    out.lo = lo;
    out.hi = hi;
    out.margin_mvar = lo;
    out.iterations = it;
    return out;
}

std::vector<RecoveryMargin> screen_table(const GridCase& grid, const std::vector<int>& candidates,
                                         const std::vector<BusId>& probes, const SimConfig& config,
                                         const ScreenOptions& options, int workers) {
    std::vector<RecoveryMargin> out(candidates.size() * probes.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mu;
    auto work = [&] {
        for (std::size_t i = next++; i < out.size(); i = next++) {
            try {
                out[i] = meshing_screen(grid, MeshLine{candidates[i / probes.size()]}, probes[i % probes.size()], config,
                                        options);
            } catch (...) {
                const std::lock_guard lock(failure_mu);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (int w = 1; w < std::max(1, workers); ++w) {
        pool.emplace_back(work);
    }
    work();
    for (auto& t : pool) t.join();
    if (failure) {
        std::rethrow_exception(failure);
    }
    return out;
}

std::string margin_table_csv(const std::vector<RecoveryMargin>& rows) {
    std::ostringstream os;
    os.precision(17);
    os << "candidate_id,probe_bus,margin_mvar,horizon_s\n";
    for (const auto& r : rows) {
        if (r.candidate) os << *r.candidate;
        os << ',' << r.probe << ',' << r.margin_mvar << ',' << r.horizon_s << '\n';
    }
    return os.str();
}

ojson margin_json(const RecoveryMargin& m) {
    ojson j;
    j["candidate"] = m.candidate ? ojson(*m.candidate) : ojson(nullptr);
    j["probe_bus"] = m.probe;
    j["margin_mvar"] = m.margin_mvar;
    j["horizon_s"] = m.horizon_s;
    j["bracket"] = {m.lo, m.hi};
    j["iterations"] = m.iterations;
    j["saturated"] = m.saturated;
    if (!m.cause.empty()) j["cause"] = m.cause;
    return j;
}

// ---------------------------------------------------------------------------

PolicyOutcome summarize_policy(UflsPolicy policy, SimTrace trace) {
    PolicyOutcome o;
    o.policy = policy;
    for (const auto& e : trace.events) {
        if (e.trip && e.trip->kind == TripKind::ufls) {
            if (!o.first_shed_t) o.first_shed_t = e.t;
            o.shed_mw += e.trip->removed_p_mw;
            const auto stage = static_cast<std::size_t>(std::max(1, e.trip->target) - 1);  // stages count from 1
            if (o.shed_mw_per_stage.size() <= stage) o.shed_mw_per_stage.resize(stage + 1, 0.0);
            o.shed_mw_per_stage[stage] += e.trip->removed_p_mw;
        }
    }
    for (const auto& r : trace.records) {
        o.peak_tx_pu = std::max(o.peak_tx_pu, r.v_max_tx);
        if (o.first_shed_t && r.t >= *o.first_shed_t - 1e-9) {
            o.peak_post_shed_pu = std::max(o.peak_post_shed_pu, r.v_max_tx);
        }
    }
    o.trace = std::move(trace);
    return o;
}

PolicyComparison compare_ufls_policies(const GridCase& grid, const std::vector<ScenarioEvent>& events,
                                       const SimConfig& config) {
    auto run = [&](UflsPolicy p) {
        SimConfig c = config;
        c.ufls.policy = p;
        Simulation sim(grid, c);
        for (const auto& e : events) sim.schedule(e);
        sim.run();
        return summarize_policy(p, sim.trace());
    };
    PolicyComparison out;
    auto aware = std::async(std::launch::async, run, UflsPolicy::voltage_aware);
    out.conventional = run(UflsPolicy::conventional);
    out.voltage_aware = aware.get();
    return out;
}

}  // namespace gridcascade

#include "gridcascade/simengine.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "gridcascade/devices.hpp"
#include "gridcascade/fingerprint.hpp"

namespace gridcascade {

namespace {

constexpr std::size_t kMachineStates = 4;
constexpr double kMinLag = 0.05;  // s, smoothing of ramp-limited AVR output

bool avr_has_state(const AvrModel& avr) {
    return avr.lag_tau > 0.0 || (avr.mode == AvrMode::deadband && avr.ramp_mvar_s > 0.0);
}

double default_lag(AvrMode mode) { return mode == AvrMode::droop ? 0.5 : 0.0; }

}  // namespace

std::string to_string(RunStatus status) {
    switch (status) {
        case RunStatus::running: return "running";
        case RunStatus::completed: return "completed";
        case RunStatus::collapsed: return "collapsed";
    }
    return "unknown";
}

void SimConfig::validate() const {
    if (!(dt > 0.0)) {
        throw std::invalid_argument("dt must be positive");
    }
    if (!(t_end > 0.0)) {
        throw std::invalid_argument("t_end must be positive");
    }
    if (decimation < 1) {
        throw std::invalid_argument("decimation must be at least 1");
    }
    if (collapse.pf_failures < 1) {
        throw std::invalid_argument("collapse.pf_failures must be at least 1");
    }
    ufls.validate();
}

Terminal detect_collapse(const SystemState& state, const GridCase& grid, const std::vector<NodeType>& types,
                         int pf_failures, const SimConfig& config) {
    Terminal t;
    t.t = state.t;
    if (pf_failures >= config.collapse.pf_failures) {
        t.status = RunStatus::collapsed;
        t.reason = "power flow did not converge for " + std::to_string(pf_failures) + " steps";
        return t;
    }
    if (state.freq_hz < config.collapse.freq_floor_hz) {
        t.status = RunStatus::collapsed;
        char buf[64];
        std::snprintf(buf, sizeof buf, "frequency %.3f Hz below floor", state.freq_hz);
        t.reason = buf;
        return t;
    }
    for (std::size_t k = 0; k < grid.buses.size(); ++k) {
        const bool live = k >= types.size() || types[k] != NodeType::dead;
        if (live && grid.buses[k].kind == BusKind::transmission && state.v[k] < config.collapse.v_floor_pu) {
            t.status = RunStatus::collapsed;
            char buf[64];
            std::snprintf(buf, sizeof buf, "voltage %.3f pu at bus %d below floor", state.v[k], grid.buses[k].id);
            t.reason = buf;
            return t;
        }
    }
    return t;
}

// ---------------------------------------------------------------------------

Simulation::Simulation(GridCase grid, SimConfig config) : grid_(std::move(grid)), config_(std::move(config)) {
    config_.validate();
    grid_.validate();
    const PowerFlowSolution sol = solve_pf(grid_);
    grid_ = with_solution(grid_, sol);
    const std::size_t n = grid_.buses.size();
    state_.v = sol.v;
    state_.theta = sol.theta;
    extra_q_.assign(n, 0.0);

    for (const auto& g : grid_.generators) {
        MachineState ms;
        ms.gen = g.id;
        if (g.online) {
            const std::size_t k = grid_.bus_index(g.bus);
            const Complex vt = std::polar(sol.v[k], sol.theta[k]);
            const Complex current = std::conj(Complex(g.p, g.q) / vt);
            const Complex e = vt + Complex(0.0, g.x_d_prime) * current;
            ms.e = std::abs(e);
            ms.delta = std::arg(e);
        }
        state_.machines.push_back(ms);
    }
    for (const auto& h : grid_.hvdc) {
        state_.hvdc_p.push_back(h.p_set);
    }
    relays_ = make_relays(grid_);

    build_network();
    if (!solve_network(1e-11)) {
        throw PowerFlowError("initial network solve with machine models failed", 0, 0.0);
    }
    for (std::size_t i = 0; i < state_.machines.size(); ++i) {
        MachineState& ms = state_.machines[i];
        SyncGenerator& g = grid_.generator(ms.gen);
        if (!g.online) {
            continue;
        }
        const std::size_t k = grid_.bus_index(g.bus);
        const auto mt = machine_terminal(ms.e, ms.delta, g.x_d_prime, node_v_[k], node_theta_[k]);
        g.p = mt.p_e;
        g.q = mt.q_term;
        ms.q_cmd = avr_response(g.avr, node_v_[k], 1.0);
        ms.q_sched = mt.q_term - ms.q_cmd;
    }
    for (std::size_t i = 0; i < grid_.hvdc.size(); ++i) {
        HvdcLink& h = grid_.hvdc[i];
        h.p0 = h.p_set - h.k * (node_theta_[grid_.bus_index(h.terminal_a)] - node_theta_[grid_.bus_index(h.terminal_b)]);
    }
    refresh_derived();

    trace_.header = ojson::object();
    trace_.header["schema"] = "simtrace-v1";
    trace_.header["case"] = grid_.name;
    trace_.header["case_fingerprint"] = sha256_hex(serialize_case(grid_));
    trace_.header["config"] = config_to_json(config_);
    ojson buses = ojson::array();
    for (const auto& b : grid_.buses) {
        trace_.bus_ids.push_back(b.id);
        trace_.bus_kinds.push_back(b.kind);
        buses.push_back({{"id", b.id}, {"kind", b.kind == BusKind::collector ? "collector" : "transmission"}});
    }
    trace_.header["buses"] = buses;
    ojson relays = ojson::array();
    for (const auto& r : relays_) {
        relays.push_back({{"group", r.group}, {"bus", r.monitored_bus}, {"threshold", r.threshold}, {"dwell", r.dwell}});
    }
    trace_.header["relays"] = relays;
    ojson avr = ojson::array();
    for (const auto& g : grid_.generators) {
        avr.push_back({{"generator", g.id},
                       {"mode", g.avr.mode == AvrMode::droop ? "droop" : "deadband"},
                       {"ramp_mvar_s", g.avr.ramp_mvar_s}});
    }
    trace_.header["avr"] = avr;
    record();
}

MachineState* Simulation::machine(int gen) {
    for (auto& m : state_.machines) {
        if (m.gen == gen) {
            return &m;
        }
    }
    return nullptr;
}

void Simulation::build_network() {
    const std::size_t n = grid_.buses.size();
    GridCase bare = grid_;
    for (auto& g : bare.generators) {
        g.online = false;
    }
    for (auto& h : bare.hvdc) {
        h.online = false;
    }
    bare.slack_bus = 0;
    NetworkProblem pb = static_problem(bare, true, &extra_q_);

    machine_node_.assign(state_.machines.size(), -1);
    std::size_t m = 0;
    for (std::size_t i = 0; i < state_.machines.size(); ++i) {
        if (grid_.generator(state_.machines[i].gen).online) {
            machine_node_[i] = static_cast<int>(n + m++);
        }
    }
    const std::size_t total = n + m;
    std::vector<Eigen::Triplet<Complex>> trip;
    for (long k = 0; k < pb.y.outerSize(); ++k) {
        for (Eigen::SparseMatrix<Complex>::InnerIterator it(pb.y, k); it; ++it) {
            trip.emplace_back(it.row(), it.col(), it.value());
        }
    }
    for (std::size_t i = 0; i < state_.machines.size(); ++i) {
        if (machine_node_[i] < 0) {
            continue;
        }
        const SyncGenerator& g = grid_.generator(state_.machines[i].gen);
        stamp_branch(trip, machine_node_[i], static_cast<long>(grid_.bus_index(g.bus)), 0.0, g.x_d_prime, 0.0, 1.0);
    }
    problem_.y.resize(static_cast<long>(total), static_cast<long>(total));
    problem_.y.setFromTriplets(trip.begin(), trip.end());
    problem_.type.assign(total, NodeType::pq);
    for (std::size_t k = n; k < total; ++k) {
        problem_.type[k] = NodeType::ref;
    }
    problem_.p_inj = pb.p_inj;
    problem_.q_inj = pb.q_inj;
    problem_.p_load = pb.p_load;
    problem_.q_load = pb.q_load;
    problem_.p_inj.resize(total, 0.0);
    problem_.q_inj.resize(total, 0.0);
    problem_.p_load.resize(total);
    problem_.q_load.resize(total);
    mark_dead_islands(problem_);
    base_p_inj_ = problem_.p_inj;

    node_v_.resize(total);
    node_theta_.resize(total);
    for (std::size_t k = 0; k < n; ++k) {
        const bool dead = problem_.type[k] == NodeType::dead;
        node_v_[k] = dead ? 0.0 : (state_.v[k] > 0.0 ? state_.v[k] : 1.0);
        node_theta_[k] = state_.theta[k];
    }
    for (std::size_t i = 0; i < state_.machines.size(); ++i) {
        if (machine_node_[i] >= 0) {
            node_v_[static_cast<std::size_t>(machine_node_[i])] = state_.machines[i].e;
            node_theta_[static_cast<std::size_t>(machine_node_[i])] = state_.machines[i].delta;
        }
    }
    dirty_ = false;
}

void Simulation::update_injections() {
    problem_.p_inj = base_p_inj_;
    add_hvdc_injections(problem_);
}

void Simulation::add_hvdc_injections(NetworkProblem& pb) const {
    for (std::size_t i = 0; i < grid_.hvdc.size(); ++i) {
        const HvdcLink& h = grid_.hvdc[i];
        if (!h.online) {
            continue;
        }
        pb.p_inj[grid_.bus_index(h.terminal_a)] -= state_.hvdc_p[i];
        pb.p_inj[grid_.bus_index(h.terminal_b)] += state_.hvdc_p[i];
    }
}

bool Simulation::solve_network(double tol) {
    if (dirty_) {
        build_network();
    }
    update_injections();
    std::vector<double> v = node_v_;
    std::vector<double> th = node_theta_;
    try {
        newton_solve(problem_, v, th, {tol, 20});
    } catch (const PowerFlowError&) {
        return false;
    }
    for (std::size_t k = 0; k < v.size(); ++k) {
        if (problem_.type[k] == NodeType::dead) {
            v[k] = 0.0;
        }
    }
    node_v_ = std::move(v);
    node_theta_ = std::move(th);
    return true;
}

void Simulation::solve_or_count(double tol) {
    if (!solve_network(tol)) {
        step_failed_ = true;
    }
}

std::vector<double> Simulation::differential() const {
    std::vector<double> x;
    x.reserve(kMachineStates * state_.machines.size() + state_.hvdc_p.size());
    for (const auto& m : state_.machines) {
        x.insert(x.end(), {m.delta, m.omega, m.e, m.q_cmd});
    }
    x.insert(x.end(), state_.hvdc_p.begin(), state_.hvdc_p.end());
    return x;
}

void Simulation::set_differential(const std::vector<double>& x) {
    for (std::size_t i = 0; i < state_.machines.size(); ++i) {
        MachineState& m = state_.machines[i];
        m.delta = x[kMachineStates * i];
        m.omega = x[kMachineStates * i + 1];
        m.e = x[kMachineStates * i + 2];
        m.q_cmd = x[kMachineStates * i + 3];
        if (machine_node_[i] >= 0) {
            node_v_[static_cast<std::size_t>(machine_node_[i])] = m.e;
            node_theta_[static_cast<std::size_t>(machine_node_[i])] = m.delta;
        }
    }
    const std::size_t off = kMachineStates * state_.machines.size();
    for (std::size_t i = 0; i < state_.hvdc_p.size(); ++i) {
        state_.hvdc_p[i] = x[off + i];
    }
}

bool Simulation::set_differential_and_solve(const std::vector<double>& x) {
    set_differential(x);
    const bool ok = solve_network(config_.pf_tol);
    refresh_derived();
    return ok;
}

std::vector<double> Simulation::algebraic() const {
    std::vector<double> xa;
    for (int k : problem_.theta_nodes()) {
        xa.push_back(node_theta_[static_cast<std::size_t>(k)]);
    }
    for (int k : problem_.v_nodes()) {
        xa.push_back(node_v_[static_cast<std::size_t>(k)]);
    }
    return xa;
}

Eigen::VectorXd Simulation::algebraic_residual() const {
    NetworkProblem pb = problem_;
    pb.p_inj = base_p_inj_;
    add_hvdc_injections(pb);
    return pb.stacked_residual(node_v_, node_theta_);
}

void Simulation::set_point(const std::vector<double>& x, const std::vector<double>& x_a) {
    std::size_t j = 0;
    for (int k : problem_.theta_nodes()) {
        node_theta_[static_cast<std::size_t>(k)] = x_a[j++];
    }
    for (int k : problem_.v_nodes()) {
        node_v_[static_cast<std::size_t>(k)] = x_a[j++];
    }
    set_differential(x);
    refresh_derived();
}

std::vector<double> Simulation::inputs() const {
    std::vector<double> u;
    for (const auto& m : state_.machines) {
        u.push_back(m.q_sched);
    }
    for (const auto& h : grid_.hvdc) {
        u.push_back(h.mode == HvdcMode::pmode1 ? h.p_ref : h.p0);
    }
    return u;
}

void Simulation::set_inputs(const std::vector<double>& u) {
    std::size_t j = 0;
    for (auto& m : state_.machines) {
        m.q_sched = u[j++];
    }
    for (auto& h : grid_.hvdc) {
        (h.mode == HvdcMode::pmode1 ? h.p_ref : h.p0) = u[j++];
    }
}

std::vector<double> Simulation::derivatives() const {
    std::vector<double> f(kMachineStates * state_.machines.size() + state_.hvdc_p.size(), 0.0);
    for (std::size_t i = 0; i < state_.machines.size(); ++i) {
        if (machine_node_[i] < 0) {
            continue;
        }
        const MachineState& m = state_.machines[i];
        const SyncGenerator& g = grid_.generator(m.gen);
        const std::size_t k = grid_.bus_index(g.bus);
        const double v = node_v_[k];
        const auto mt = machine_terminal(m.e, m.delta, g.x_d_prime, v, node_theta_[k]);
        const SwingState rate = swing_rate(g, {m.delta, m.omega}, mt.p_e);
        f[kMachineStates * i] = rate.delta;
        f[kMachineStates * i + 1] = rate.omega;

        const double law = avr_response(g.avr, v, 1.0);
        double q_cmd = law;
        if (avr_has_state(g.avr)) {
            q_cmd = m.q_cmd;
            double dq = (law - m.q_cmd) / std::max(g.avr.lag_tau, kMinLag);
            if (g.avr.mode == AvrMode::deadband && g.avr.ramp_mvar_s > 0.0) {
                const double r = g.avr.ramp_mvar_s / grid_.s_base;
                dq = std::clamp(dq, -r, r);
            }
            f[kMachineStates * i + 3] = dq;
        }
        const double target = std::clamp(m.q_sched + q_cmd, g.q_min, g.q_max);
        f[kMachineStates * i + 2] = (target - mt.q_term) * g.x_d_prime / (std::max(v, 0.05) * config_.machine_q_tau);
    }
    const std::size_t off = kMachineStates * state_.machines.size();
    for (std::size_t i = 0; i < grid_.hvdc.size(); ++i) {
        HvdcLink h = grid_.hvdc[i];
        if (!h.online) {
            continue;
        }
        h.p_set = state_.hvdc_p[i];
        f[off + i] = hvdc_rate(h, node_theta_[grid_.bus_index(h.terminal_a)], node_theta_[grid_.bus_index(h.terminal_b)]);
    }
    return f;
}

void Simulation::refresh_derived() {
    const std::size_t n = grid_.buses.size();
    for (std::size_t k = 0; k < n; ++k) {
        state_.v[k] = node_v_[k];
        state_.theta[k] = node_theta_[k];
    }
    double hw = 0.0;
    double hs = 0.0;
    for (std::size_t i = 0; i < state_.machines.size(); ++i) {
        MachineState& m = state_.machines[i];
        const SyncGenerator& g = grid_.generator(m.gen);
        if (machine_node_[i] < 0) {
            continue;
        }
        hw += g.h * m.omega;
        hs += g.h;
        if (!avr_has_state(g.avr)) {
            m.q_cmd = avr_response(g.avr, node_v_[grid_.bus_index(g.bus)], 1.0);
        }
    }
    state_.freq_hz = kNominalHz * (1.0 + (hs > 0.0 ? hw / hs : 0.0));
    for (std::size_t i = 0; i < grid_.hvdc.size(); ++i) {
        grid_.hvdc[i].p_set = state_.hvdc_p[i];
    }
}

void Simulation::schedule(const ScenarioEvent& event) {
    if (!(event.t >= 0.0)) {
        throw CaseError("event time must be non-negative");
    }
    auto it = std::upper_bound(pending_.begin(), pending_.end(), event.t,
                               [](double t, const ScenarioEvent& e) { return t < e.t; });
    pending_.insert(it, event);
}

void Simulation::check_action(const ScenarioAction& action) const {
    Simulation probe = *this;
    probe.trace_.records.clear();
    for (const auto& ev : pending_) {
        if (ev.t < state_.t + 0.5 * config_.dt) {
            probe.apply_action(ev.action);
        }
    }
    probe.apply_action(action);
}

void Simulation::apply_action(const ScenarioAction& action) {
    std::visit(
        [this](const auto& a) {
            using T = std::decay_t<decltype(a)>;
            if constexpr (std::is_same_v<T, MeshLine> || std::is_same_v<T, OpenLine> ||
                          std::is_same_v<T, CloseReactor>) {
                grid_ = apply_topology_action(grid_, a);
                dirty_ = true;
            } else if constexpr (std::is_same_v<T, OpenReactor>) {
                const ShuntReactor r = grid_.reactor(a.reactor);
                grid_ = apply_topology_action(grid_, a);
                state_.q_lost_mvar += -reactor_injection(r, state_.v[grid_.bus_index(r.bus)]) * grid_.s_base;
                dirty_ = true;
            } else if constexpr (std::is_same_v<T, SetHvdcMode>) {
                HvdcLink& h = grid_.hvdc_link(a.link);
                const auto idx = static_cast<std::size_t>(&h - grid_.hvdc.data());
                h.mode = a.mode;
                if (a.mode == HvdcMode::pmode1) {
                    h.p_ref = a.p_ref_mw ? *a.p_ref_mw / grid_.s_base : state_.hvdc_p[idx];
                    state_.hvdc_p[idx] = h.p_ref;
                } else {
                    h.p0 = state_.hvdc_p[idx] - h.k * (state_.theta[grid_.bus_index(h.terminal_a)] -
                                                       state_.theta[grid_.bus_index(h.terminal_b)]);
                }
                h.p_set = state_.hvdc_p[idx];
            } else if constexpr (std::is_same_v<T, SetHvdcPower>) {
                HvdcLink& h = grid_.hvdc_link(a.link);
                const auto idx = static_cast<std::size_t>(&h - grid_.hvdc.data());
                const double p = a.p_mw / grid_.s_base;
                if (h.mode == HvdcMode::pmode1) {
                    h.p_ref = p;
                    state_.hvdc_p[idx] = p;
                } else {
                    h.p0 += p - state_.hvdc_p[idx];
                }
                h.p_set = state_.hvdc_p[idx];
            } else if constexpr (std::is_same_v<T, ScaleExport>) {
                if (!(a.factor > 0.0)) {
                    throw CaseError("export scale factor must be positive");
                }
                double removed = 0.0;
                for (auto& l : grid_.loads) {
                    if (grid_.bus(l.bus).area == "north") {
                        removed += l.p_nom * (1.0 - a.factor);
                        l.p_nom *= a.factor;
                        l.q_nom *= a.factor;
                    }
                }
                double south = 0.0;
                for (const auto& g : grid_.ibr_groups) {
                    if (g.online && grid_.bus(g.collector_bus).area == "south") {
                        south += g.p;
                    }
                }
                if (south <= 0.0 || removed > south) {
                    throw CaseError("no southern IBR output to rebalance the export change");
                }
                for (auto& g : grid_.ibr_groups) {
                    if (g.online && grid_.bus(g.collector_bus).area == "south") {
                        g.p -= removed * g.p / south;
                    }
                }
                dirty_ = true;
            } else if constexpr (std::is_same_v<T, TripDevice>) {
                TripEvent e;
                e.time = state_.t;
                e.target = a.id;
                e.cause = "operator";
                switch (a.kind) {
                    case DeviceKind::ibr:
                        e = collector_trip(grid_, a.id, state_.v, state_.t, "operator");
                        for (auto& r : relays_) {
                            r.tripped = r.tripped || r.group == a.id;
                        }
                        break;
                    case DeviceKind::generator: e.kind = TripKind::generator; break;
                    case DeviceKind::line: e.kind = TripKind::line; break;
                    case DeviceKind::transformer: e.kind = TripKind::transformer; break;
                    case DeviceKind::hvdc: e.kind = TripKind::hvdc; break;
                }
                grid_ = apply_trip(grid_, e);
                state_.q_lost_mvar += std::max(0.0, e.removed_q_mvar);
                action_trip_ = e;
                dirty_ = true;
            } else if constexpr (std::is_same_v<T, SetAvrMode>) {
                std::vector<int> ids = a.generators;
                if (ids.empty()) {
                    for (const auto& g : grid_.generators) {
                        ids.push_back(g.id);
                    }
                }
                for (int id : ids) {
                    SyncGenerator& g = grid_.generator(id);
                    MachineState* m = machine(id);
                    const double v = state_.v[grid_.bus_index(g.bus)];
                    const double q_cmd = avr_has_state(g.avr) ? m->q_cmd : avr_response(g.avr, v, 1.0);
                    const double target = m->q_sched + q_cmd;
                    g.avr.mode = a.mode;
                    g.avr.lag_tau = default_lag(a.mode);
                    m->q_cmd = avr_response(g.avr, v, 1.0);
                    m->q_sched = target - m->q_cmd;
                }
            } else if constexpr (std::is_same_v<T, InjectQDisturbance>) {
                extra_q_[grid_.bus_index(a.bus)] += a.mvar / grid_.s_base;
                dirty_ = true;
            }
        },
        action);
}

std::vector<TraceEvent> Simulation::step() {
    std::vector<TraceEvent> emitted;
    if (finished()) {
        return emitted;
    }
    const double dt = config_.dt;
    const double t0 = state_.t;
    step_failed_ = false;

    // Scheduled actions due at the start of this step.
    std::size_t due = 0;
    while (due < pending_.size() && pending_[due].t < t0 + 0.5 * dt) {
        ++due;
    }
    if (due > 0) {
        const std::vector<ScenarioEvent> now(pending_.begin(), pending_.begin() + static_cast<long>(due));
        pending_.erase(pending_.begin(), pending_.begin() + static_cast<long>(due));
        for (const auto& ev : now) {
            action_trip_.reset();
            TraceEvent te;
            te.t = t0;
            te.action = ev.action;
            // An action that no longer applies (its target tripped meanwhile)
            // is logged and skipped; the state is left as it was.
            const GridCase grid_before = grid_;
            const SystemState state_before = state_;
            const auto relays_before = relays_;
            const auto extra_before = extra_q_;
            try {
                apply_action(ev.action);
                te.trip = action_trip_;
            } catch (const CaseError& e) {
                grid_ = grid_before;
                state_ = state_before;
                relays_ = relays_before;
                extra_q_ = extra_before;
                te.rejected = e.what();
                spdlog::warn("t={:.3f}: {} rejected: {}", t0, action_name(ev.action), e.what());
            }
            emitted.push_back(std::move(te));
        }
        solve_or_count(config_.pf_tol);
        refresh_derived();
    }

    // Heun step with a network solve at the stage point.
    const std::vector<double> x0 = differential();
    const std::vector<double> f0 = derivatives();
    std::vector<double> x1(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) {
        x1[i] = x0[i] + dt * f0[i];
    }
    set_differential(x1);
    solve_or_count(config_.pf_tol);
    const std::vector<double> f1 = derivatives();
    std::vector<double> x2(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) {
        x2[i] = x0[i] + 0.5 * dt * (f0[i] + f1[i]);
    }
    set_differential(x2);
    solve_or_count(config_.pf_tol);
    ++step_;
    state_.t = static_cast<double>(step_) * dt;
    refresh_derived();

    // Protection, applied at the step boundary.
    const double t = state_.t;
    std::vector<TripEvent> trips = relay_scan(relays_, grid_, state_.v, t, dt);
    TripEvent shed = ufls_step(config_.ufls, state_.freq_hz, grid_, state_.v, t);
    if (!trips.empty() || !shed.shed.empty()) {
        const std::vector<double> before = state_.v;
        for (const auto& e : trips) {
            grid_ = apply_trip(grid_, e);
            state_.q_lost_mvar += std::max(0.0, e.removed_q_mvar);
        }
        if (!shed.shed.empty()) {
            grid_ = apply_trip(grid_, shed);
            state_.q_lost_mvar += std::max(0.0, shed.removed_q_mvar);
        }
        dirty_ = true;
        solve_or_count(config_.pf_tol);
        refresh_derived();
        if (!shed.shed.empty()) {
            double dv = -1e300;
            for (std::size_t k = 0; k < grid_.buses.size(); ++k) {
                if (grid_.buses[k].kind == BusKind::transmission && problem_.type[k] != NodeType::dead) {
                    dv = std::max(dv, state_.v[k] - before[k]);
                }
            }
            shed.max_dv_pu = dv;
        }
        for (auto& e : trips) {
            emitted.push_back({t, std::nullopt, std::move(e), {}});
        }
        if (!shed.shed.empty()) {
            emitted.push_back({t, std::nullopt, std::move(shed), {}});
        }
    }

    if (!desync_seen_) {
        std::vector<double> angles;
        for (std::size_t i = 0; i < state_.machines.size(); ++i) {
            if (machine_node_[i] >= 0) {
                angles.push_back(state_.machines[i].delta);
            }
        }
        if (desync_check(angles, config_.delta_crit)) {
            desync_seen_ = true;
            TripEvent e;
            e.time = t;
            e.kind = TripKind::desync;
            e.cause = "machine angle spread above limit";
            emitted.push_back({t, std::nullopt, e, {}});
        }
    }

    pf_failures_ = step_failed_ ? pf_failures_ + 1 : 0;
    std::vector<NodeType> types(problem_.type.begin(), problem_.type.begin() + static_cast<long>(grid_.buses.size()));
    terminal_ = detect_collapse(state_, grid_, types, pf_failures_, config_);
    if (terminal_.status == RunStatus::running && t >= config_.t_end - 0.5 * dt) {
        terminal_.status = RunStatus::completed;
        terminal_.t = t;
    }
    trace_.events.insert(trace_.events.end(), emitted.begin(), emitted.end());
    if (step_ % config_.decimation == 0 || finished()) {
        record();
    }
    if (finished()) {
        trace_.terminal = terminal_;
    }
    return emitted;
}

void Simulation::run() {
    while (!finished()) {
        step();
    }
}

void Simulation::record() { trace_.records.push_back(current_record()); }

TraceRecord Simulation::current_record() const {
    TraceRecord r;
    r.t = state_.t;
    r.v = state_.v;
    r.freq_hz = state_.freq_hz;
    r.q_lost_mvar = state_.q_lost_mvar;
    r.v_max_tx = 0.0;
    for (std::size_t k = 0; k < grid_.buses.size(); ++k) {
        if (grid_.buses[k].kind == BusKind::transmission) {
            r.v_max_tx = std::max(r.v_max_tx, state_.v[k]);
        }
    }
    for (const auto& rel : relays_) {
        r.collector_v.push_back(state_.v[grid_.bus_index(rel.monitored_bus)]);
        r.relay_timer.push_back(rel.timer);
    }
    return r;
}

GridCase Simulation::snapshot_case() const {
    GridCase g = grid_;
    for (std::size_t k = 0; k < g.buses.size(); ++k) {
        g.buses[k].v = state_.v[k] > 0.0 ? state_.v[k] : 1.0;
        g.buses[k].theta = state_.theta[k];
    }
    for (std::size_t i = 0; i < state_.machines.size(); ++i) {
        SyncGenerator& s = g.generator(state_.machines[i].gen);
        if (machine_node_[i] < 0) {
            continue;
        }
        const std::size_t k = grid_.bus_index(s.bus);
        const auto mt = machine_terminal(state_.machines[i].e, state_.machines[i].delta, s.x_d_prime, node_v_[k],
                                         node_theta_[k]);
        s.p = mt.p_e;
        s.q = mt.q_term;
        s.v_set = node_v_[k];
    }
    for (std::size_t i = 0; i < g.hvdc.size(); ++i) {
        g.hvdc[i].p_set = state_.hvdc_p[i];
    }
    return g;
}

double Simulation::balance_residual() const {
    Simulation copy = *this;
    copy.update_injections();
    Eigen::VectorXd dp;
    Eigen::VectorXd dq;
    copy.problem_.residual(node_v_, node_theta_, dp, dq);
    // Machine EMF nodes take whatever the network draws.
    double worst = 0.0;
    for (std::size_t k = 0; k < copy.problem_.size(); ++k) {
        if (copy.problem_.type[k] == NodeType::ref) {
            continue;
        }
        worst = std::max({worst, std::abs(dp[static_cast<long>(k)]), std::abs(dq[static_cast<long>(k)])});
    }
    return worst;
}

ojson Simulation::state_json() const {
    ojson j;
    j["t"] = state_.t;
    j["step"] = step_;
    ojson machines = ojson::array();
    for (const auto& m : state_.machines) {
        machines.push_back(
            {{"gen", m.gen}, {"delta", m.delta}, {"omega", m.omega}, {"e", m.e}, {"q_cmd", m.q_cmd}, {"q_sched", m.q_sched}});
    }
    j["machines"] = machines;
    j["hvdc_p"] = state_.hvdc_p;
    j["v"] = state_.v;
    j["theta"] = state_.theta;
    j["freq_hz"] = state_.freq_hz;
    j["q_lost_mvar"] = state_.q_lost_mvar;
    j["extra_q"] = extra_q_;
    ojson relays = ojson::array();
    for (const auto& r : relays_) {
        relays.push_back({{"group", r.group}, {"timer", r.timer}, {"tripped", r.tripped}});
    }
    j["relays"] = relays;
    j["ufls_armed"] = config_.ufls.armed;
    j["pf_failures"] = pf_failures_;
    j["pending"] = pending_.size();
    j["status"] = to_string(terminal_.status);
    j["case_fingerprint"] = sha256_hex(serialize_case(grid_));
    return j;
}

SimTrace run_scenario(const GridCase& grid, const Scenario& scenario, const SimConfig& config) {
    SimConfig cfg = config;
    apply_config_json(cfg, scenario.config, "/config");
    Simulation sim(grid, cfg);
    for (const auto& e : scenario.events) {
        sim.schedule(e);
    }
    sim.run();
    return sim.trace();
}

}  // namespace gridcascade

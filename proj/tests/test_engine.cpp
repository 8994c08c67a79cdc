#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <sstream>

#include "gridcascade/dae.hpp"
#include "gridcascade/lp.hpp"
#include "gridcascade/simengine.hpp"
#include "gridcascade/trace_io.hpp"

using namespace gridcascade;

namespace {

// Builtin case and config with no scripted events.
Simulation quiet_sim(double t_end = 2.0) {
    const auto b = builtin_iberian_scenario();
    SimConfig c = b.config;
    c.t_end = t_end;
    return Simulation(b.grid, c);
}

double bus_v(const Simulation& sim, BusId bus) { return sim.state().v[sim.grid().bus_index(bus)]; }

}  // namespace

// ---------------------------------------------------------------------------
// Scenario documents

TEST(Scenario, RoundTrip) {
    Scenario s;
    s.events = {{1.0, MeshLine{47}},
                {2.5, SetHvdcMode{1, HvdcMode::pmode1, 900.0}},
                {3.0, SetAvrMode{AvrMode::droop, {2, 3}}},
                {4.0, InjectQDisturbance{35, -50.0}},
                {5.0, TripDevice{DeviceKind::ibr, 2}}};
    s.config = {{"dt", 0.005}};
    const std::string text = scenario_to_json(s).dump();
    const Scenario back = scenario_from_json(nlohmann::json::parse(text));
    EXPECT_EQ(scenario_to_json(back).dump(), text);
}

TEST(Scenario, EventsSortStably) {
    const auto s = scenario_from_json(nlohmann::json::parse(
        R"({"events":[{"t":2,"action":"OpenReactor","params":{"reactor":6}},
                      {"t":1,"action":"OpenReactor","params":{"reactor":7}},
                      {"t":2,"action":"CloseReactor","params":{"reactor":7}}]})"));
    ASSERT_EQ(s.events.size(), 3u);
    EXPECT_EQ(s.events[0].t, 1.0);
    EXPECT_EQ(action_name(s.events[1].action), "OpenReactor");
    EXPECT_EQ(action_name(s.events[2].action), "CloseReactor");
}

TEST(Scenario, ErrorsCarryPointer) {
    const auto pointer_of = [](const char* text) {
        try {
            scenario_from_json(nlohmann::json::parse(text));
        } catch (const FormatError& e) {
            return e.pointer();
        }
        return std::string("<no error>");
    };
    EXPECT_EQ(pointer_of(R"({"events":[{"t":-1,"action":"MeshLine","params":{"branch":47}}]})"), "/events/0/t");
    EXPECT_EQ(pointer_of(R"({"events":[{"t":1,"action":"Explode"}]})").rfind("/events/0", 0), 0u);
    EXPECT_EQ(pointer_of(R"({"events":[],"config":{"nope":1}})"), "/config/nope");
    EXPECT_EQ(pointer_of(R"({"schema":"scenario-v0","events":[]})"), "/schema");
    EXPECT_EQ(pointer_of(R"({"events":[{"t":1,"action":"MeshLine","params":{"branch":"x"}}]})")
                  .rfind("/events/0/params", 0),
              0u);
}

TEST(Config, OverridesAndValidation) {
    SimConfig c;
    apply_config_override(c, "dt=0.005");
    apply_config_override(c, "ufls.policy=voltage_aware");
    apply_config_override(c, "collapse.freq_floor_hz=47");
    EXPECT_EQ(c.dt, 0.005);
    EXPECT_EQ(c.ufls.policy, UflsPolicy::voltage_aware);
    EXPECT_EQ(c.collapse.freq_floor_hz, 47.0);
    EXPECT_THROW(apply_config_override(c, "dt"), FormatError);
    EXPECT_THROW(apply_config_override(c, "nosuch=1"), FormatError);
}

// ---------------------------------------------------------------------------
// Engine

TEST(Engine, StartsAtEquilibrium) {
    Simulation sim = quiet_sim();
    double worst = 0.0;
    for (double d : sim.derivatives()) worst = std::max(worst, std::abs(d));
    EXPECT_LE(worst, 1e-6);
    sim.run();
    EXPECT_EQ(sim.terminal().status, RunStatus::completed);
    EXPECT_NEAR(sim.state().freq_hz, 50.0, 1e-4);
}

TEST(Engine, BalanceResidualOnEveryStep) {
    const auto b = builtin_iberian_scenario();
    SimConfig c = b.config;
    c.t_end = 10.0;
    Simulation sim(b.grid, c);
    for (const auto& e : b.events) sim.schedule(e);
    double worst = sim.balance_residual();
    while (!sim.finished()) {
        sim.step();
        worst = std::max(worst, sim.balance_residual());
    }
    EXPECT_LE(worst, 1e-8);
}

TEST(Engine, OpenReactorRaisesLocalVoltage) {
    Simulation sim = quiet_sim();
    sim.step();
    const BusId bus = sim.grid().reactor(6).bus;
    const double before = bus_v(sim, bus);
    sim.schedule({sim.time(), OpenReactor{6}});
    sim.step();
    EXPECT_FALSE(sim.grid().reactor(6).connected);
    EXPECT_GT(bus_v(sim, bus), before);
}

TEST(Engine, CheckActionSeesDueEvents) {
    Simulation sim = quiet_sim();
    EXPECT_NO_THROW(sim.check_action(OpenReactor{6}));
    sim.schedule({0.0, OpenReactor{6}});
    EXPECT_THROW(sim.check_action(OpenReactor{6}), CaseError);
    EXPECT_THROW(sim.check_action(MeshLine{1}), CaseError);
}

TEST(Engine, StaleActionIsLoggedAndSkipped) {
    Simulation sim = quiet_sim(0.5);
    sim.schedule({0.1, OpenReactor{6}});
    sim.schedule({0.2, OpenReactor{6}});
    sim.run();
    const auto& ev = sim.trace().events;
    ASSERT_EQ(ev.size(), 2u);
    EXPECT_TRUE(ev[0].rejected.empty());
    EXPECT_FALSE(ev[1].rejected.empty());
    EXPECT_EQ(sim.terminal().status, RunStatus::completed);
}

TEST(Engine, AvrModeSwitchIsBumpless) {
    Simulation sim = quiet_sim();
    for (int i = 0; i < 5; ++i) sim.step();
    std::vector<double> before;
    for (const auto& m : sim.state().machines) before.push_back(m.q_sched + m.q_cmd);
    const auto v_before = sim.state().v;
    sim.schedule({sim.time(), SetAvrMode{AvrMode::droop, {}}});
    sim.step();
    for (std::size_t k = 0; k < before.size(); ++k) {
        const auto& m = sim.state().machines[k];
        EXPECT_NEAR(m.q_sched + m.q_cmd, before[k], 1e-3) << "machine " << m.gen;
    }
    for (std::size_t k = 0; k < v_before.size(); ++k) EXPECT_NEAR(sim.state().v[k], v_before[k], 1e-3);
}

TEST(Engine, IdenticalRunsGiveIdenticalTraces) {
    const auto b = builtin_iberian_scenario();
    SimConfig c = b.config;
    c.t_end = 9.0;
    const Scenario s{b.events, nlohmann::json::object()};
    EXPECT_EQ(trace_to_jsonl(run_scenario(b.grid, s, c)), trace_to_jsonl(run_scenario(b.grid, s, c)));
}

TEST(Trace, JsonlLayout) {
    Simulation sim = quiet_sim(0.3);
    sim.schedule({0.1, OpenReactor{6}});
    sim.run();
    std::istringstream in(trace_to_jsonl(sim.trace()));
    std::vector<nlohmann::json> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(nlohmann::json::parse(line));
    ASSERT_GE(lines.size(), 3u);
    EXPECT_EQ(lines.front()["type"], "header");
    EXPECT_EQ(lines.back()["type"], "terminal");
    double last_record = -1.0;
    for (std::size_t k = 1; k + 1 < lines.size(); ++k) {
        const auto& l = lines[k];
        if (l["type"] == "record") {
            EXPECT_GT(l["t"].get<double>(), last_record);
            last_record = l["t"];
        } else {
            // An event sits between the record opening its step and the one closing it.
            EXPECT_EQ(l["type"], "action");
            EXPECT_GE(l["t"].get<double>(), last_record - 1e-12);
            ASSERT_LT(k + 1, lines.size());
            EXPECT_EQ(lines[k + 1]["type"], "record");
            EXPECT_GT(lines[k + 1]["t"].get<double>(), l["t"].get<double>());
        }
    }
}

TEST(Trace, CsvHasOneRowPerRecord) {
    Simulation sim = quiet_sim(0.2);
    sim.run();
    const std::string csv = trace_to_csv(sim.trace());
    const auto rows = std::count(csv.begin(), csv.end(), '\n');
    EXPECT_EQ(static_cast<std::size_t>(rows), sim.trace().records.size() + 1);
    EXPECT_EQ(csv.rfind("t,", 0), 0u);
}

// ---------------------------------------------------------------------------
// Linearization

TEST(Dae, DescriptorStructure) {
    const Simulation sim = quiet_sim();
    const LinearDae d = linearize_dae(sim);
    const auto n = static_cast<long>(d.nd() + d.na());
    ASSERT_EQ(d.e.rows(), n);
    EXPECT_EQ(d.e.nonZeros(), static_cast<long>(d.nd()));
    const Eigen::MatrixXd e(d.e);
    EXPECT_TRUE(e.topLeftCorner(static_cast<long>(d.nd()), static_cast<long>(d.nd())).isIdentity());
    EXPECT_EQ(d.a().rows(), n);
    EXPECT_EQ(d.b_u.cols(), static_cast<long>(d.u.size()));
    EXPECT_EQ(d.b_w.rows(), n);
}

TEST(Dae, NetworkBlockMatchesFiniteDifferences) {
    Simulation sim = quiet_sim();
    const LinearDae d = linearize_dae(sim);
    const auto xd = sim.differential();
    const auto xa = sim.algebraic();
    const Eigen::MatrixXd aa(d.a_aa);
    const double h = 1e-6;
    double worst = 0.0;
    for (std::size_t j = 0; j < xa.size(); ++j) {
        auto p = xa, m = xa;
        p[j] += h;
        m[j] -= h;
        sim.set_point(xd, p);
        const Eigen::VectorXd fp = sim.algebraic_residual();
        sim.set_point(xd, m);
        const Eigen::VectorXd fm = sim.algebraic_residual();
        worst = std::max(worst, ((fp - fm) / (2 * h) - aa.col(static_cast<long>(j))).cwiseAbs().maxCoeff());
    }
    EXPECT_LE(worst, 1e-5);
}

TEST(Dae, ReducedMatrixMatchesSolvedDifferences) {
    const auto b = builtin_iberian_scenario();
    SimConfig c = b.config;
    c.pf_tol = 1e-12;
    Simulation sim(b.grid, c);
    const LinearDae d = linearize_dae(sim);
    const Eigen::MatrixXd ar = d.reduced();
    const auto x0 = sim.differential();
    const double h = 1e-5;
    double worst = 0.0;
    double scale = 0.0;
    for (std::size_t j = 0; j < x0.size(); ++j) {
        Simulation s = sim;
        auto p = x0, m = x0;
        p[j] += h;
        m[j] -= h;
        ASSERT_TRUE(s.set_differential_and_solve(p));
        const auto fp = s.derivatives();
        ASSERT_TRUE(s.set_differential_and_solve(m));
        const auto fm = s.derivatives();
        for (std::size_t i = 0; i < x0.size(); ++i) {
            const double fd = (fp[i] - fm[i]) / (2 * h);
            worst = std::max(worst, std::abs(fd - ar(static_cast<long>(i), static_cast<long>(j))));
            scale = std::max(scale, std::abs(fd));
        }
    }
    EXPECT_LE(worst, 1e-5 * std::max(1.0, scale));
}

TEST(Dae, SmallInputStepFollowsLinearModelToFirstOrder) {
    const Simulation base = quiet_sim();
    const LinearDae d = linearize_dae(base);
    const Eigen::MatrixXd ar = d.reduced();
    const Eigen::MatrixXd br = d.reduced_b_u();
    const double dt = base.config().dt;
    const auto x0 = base.differential();
    const auto u0 = base.inputs();
    // Nudge one machine's reactive schedule and the HVDC setpoint.
    Eigen::VectorXd dir = Eigen::VectorXd::Zero(static_cast<long>(u0.size()));
    dir[0] = 1.0;
    dir[static_cast<long>(u0.size()) - 1] = 1.0;
    const auto error_at = [&](double eps) {
        Simulation s = base;
        auto u = u0;
        for (std::size_t k = 0; k < u.size(); ++k) u[k] += eps * dir[static_cast<long>(k)];
        s.set_inputs(u);
        Eigen::VectorXd x = Eigen::VectorXd::Zero(static_cast<long>(x0.size()));
        const Eigen::VectorXd bu = br * (eps * dir);
        for (int i = 0; i < 20; ++i) {
            s.step();
            const Eigen::VectorXd k1 = ar * x + bu;
            const Eigen::VectorXd k2 = ar * (x + dt * k1) + bu;
            x += 0.5 * dt * (k1 + k2);
        }
        const auto xs = s.differential();
        double err = 0.0;
        double size = 0.0;
        for (std::size_t k = 0; k < xs.size(); ++k) {
            err = std::max(err, std::abs(xs[k] - x0[k] - x[static_cast<long>(k)]));
            size = std::max(size, std::abs(x[static_cast<long>(k)]));
        }
        return std::pair{err, size};
    };
    const auto [e1, s1] = error_at(1e-3);
    const auto [e2, s2] = error_at(5e-4);
    EXPECT_GT(s1, 0.0);
    EXPECT_LT(e1, 0.05 * s1);
    // The remainder is second order: halving the step quarters it.
    EXPECT_NEAR(e1 / e2, 4.0, 1.0);
}

// ---------------------------------------------------------------------------
// Linear programs

namespace {

// Brute force: every vertex of the box-and-rows polytope.
std::optional<double> vertex_max(const LpProblem& p) {
    const long n = p.c.size();
    std::vector<Eigen::RowVectorXd> rows;
    std::vector<double> rhs;
    for (long i = 0; i < p.a.rows(); ++i) {
        rows.push_back(p.a.row(i));
        rhs.push_back(p.b[i]);
    }
    for (long j = 0; j < n; ++j) {
        Eigen::RowVectorXd e = Eigen::RowVectorXd::Zero(n);
        e[j] = 1.0;
        rows.push_back(e);
        rhs.push_back(p.hi[j]);
        rows.push_back(-e);
        rhs.push_back(-p.lo[j]);
    }
    std::optional<double> best;
    const auto m = rows.size();
    std::vector<std::size_t> pick(static_cast<std::size_t>(n));
    const std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t depth, std::size_t start) {
        if (depth == pick.size()) {
            Eigen::MatrixXd a(n, n);
            Eigen::VectorXd b(n);
            for (long k = 0; k < n; ++k) {
                a.row(k) = rows[pick[static_cast<std::size_t>(k)]];
                b[k] = rhs[pick[static_cast<std::size_t>(k)]];
            }
            Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
            if (lu.rank() < n) return;
            const Eigen::VectorXd x = lu.solve(b);
            for (std::size_t r = 0; r < m; ++r) {
                if (rows[r].dot(x) > rhs[r] + 1e-9) return;
            }
            const double obj = p.c.dot(x);
            if (!best || obj > *best) best = obj;
            return;
        }
        for (std::size_t r = start; r < m; ++r) {
            pick[depth] = r;
            rec(depth + 1, r + 1);
        }
    };
    rec(0, 0);
    return best;
}

}  // namespace

TEST(Lp, MatchesVertexEnumeration) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    int feasible = 0, infeasible = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const long n = 2 + trial % 3;
        const long m = 2 + trial % 4;
        LpProblem p;
        p.a = Eigen::MatrixXd::NullaryExpr(m, n, [&] { return u(rng); });
        p.b = Eigen::VectorXd::NullaryExpr(m, [&] { return u(rng); });
        p.c = Eigen::VectorXd::NullaryExpr(n, [&] { return u(rng); });
        p.lo = Eigen::VectorXd::NullaryExpr(n, [&] { return u(rng) - 1.0; });
        p.hi = p.lo + Eigen::VectorXd::NullaryExpr(n, [&] { return 0.1 + std::abs(u(rng)); });
        const auto oracle = vertex_max(p);
        const LpResult r = solve_lp(p);
        if (!oracle) {
            ++infeasible;
            EXPECT_EQ(r.status, LpStatus::infeasible) << "trial " << trial;
            continue;
        }
        ++feasible;
        ASSERT_EQ(r.status, LpStatus::optimal) << "trial " << trial;
        EXPECT_NEAR(r.objective, *oracle, 1e-8) << "trial " << trial;
        EXPECT_NEAR(p.c.dot(r.x), r.objective, 1e-9);
        EXPECT_LE(((p.a * r.x) - p.b).maxCoeff(), 1e-9);
        EXPECT_GE((r.x - p.lo).minCoeff(), -1e-9);
        EXPECT_LE((r.x - p.hi).maxCoeff(), 1e-9);
    }
    EXPECT_GT(feasible, 20);
    EXPECT_GT(infeasible, 5);
}

TEST(Lp, DegenerateVertexTerminates) {
    // Three constraints through one vertex.
    LpProblem p;
    p.a.resize(3, 2);
    p.a << 1, 1, 1, -1, 2, 1;
    p.b.resize(3);
    p.b << 1, 1, 2;
    p.c.resize(2);
    p.c << 1, 0;
    p.lo = Eigen::VectorXd::Constant(2, -5);
    p.hi = Eigen::VectorXd::Constant(2, 5);
    const auto r = solve_lp(p);
    ASSERT_EQ(r.status, LpStatus::optimal);
    EXPECT_NEAR(r.objective, 1.0, 1e-12);
}

#include <gtest/gtest.h>

#include <cmath>

#include "gridcascade/case_io.hpp"
#include "gridcascade/netmodel.hpp"

using namespace gridcascade;

namespace {

GridCase two_bus(double x) {
    GridCase g;
    g.slack_bus = 1;
    g.buses = {Bus{1, BusKind::transmission, 345.0, "a", 1.0, 0.0}, Bus{2, BusKind::transmission, 345.0, "a", 1.0, 0.0}};
    Branch br;
    br.id = 1;
    br.from = 1;
    br.to = 2;
    br.x = x;
    g.branches = {br};
    return g;
}

double stock_load_mw() {
    double total = 0.0;
    for (const auto& l : parse_matpower(stock_case39_text()).loads) total += l.p_nom * 100.0;
    return total;
}

}  // namespace

TEST(Admittance, TwoBusLine) {
    const auto y = assemble_admittance(two_bus(0.1));
    EXPECT_NEAR(y.at(0, 1).real(), 0.0, 1e-12);
    EXPECT_NEAR(y.at(0, 1).imag(), 10.0, 1e-12);
    EXPECT_NEAR(y.at(0, 0).imag(), -10.0, 1e-12);
    EXPECT_NEAR(y.at(1, 1).imag(), -10.0, 1e-12);
}

TEST(Admittance, ReactorShiftsDiagonal) {
    GridCase g = two_bus(0.1);
    const double before = assemble_admittance(g).at(1, 1).imag();
    g.reactors.push_back(ShuntReactor{1, 2, 2.0, true, "r"});
    EXPECT_NEAR(assemble_admittance(g).at(1, 1).imag(), before - 2.0, 1e-12);
}

TEST(Admittance, RowSumsEqualShunts) {
    GridCase g = two_bus(0.1);
    g.branches[0].b_charging = 0.4;
    g.reactors.push_back(ShuntReactor{1, 2, 0.7, true, "r"});
    const auto y = assemble_admittance(g);
    EXPECT_NEAR((y.at(0, 0) + y.at(0, 1)).imag(), 0.2, 1e-12);
    EXPECT_NEAR((y.at(1, 0) + y.at(1, 1)).imag(), 0.2 - 0.7, 1e-12);
}

TEST(Admittance, BuiltinCaseSymmetric) {
    const auto y = assemble_admittance(build_case39()).y;
    const Eigen::SparseMatrix<Complex> diff = y - Eigen::SparseMatrix<Complex>(y.transpose());
    double worst = 0.0;
    for (long k = 0; k < diff.outerSize(); ++k)
        for (Eigen::SparseMatrix<Complex>::InnerIterator it(diff, k); it; ++it) worst = std::max(worst, std::abs(it.value()));
    EXPECT_LT(worst, 1e-12);
}

TEST(Admittance, EditThenAssembleMatchesScratch) {
    const GridCase g = build_case39();
    for (const auto& br : g.branches) {
        if (!br.mesh_candidate) continue;
        const GridCase edited = apply_topology_action(g, MeshLine{br.id});
        GridCase manual = g;
        manual.branch(br.id).status = BranchStatus::in_service;
        const Eigen::SparseMatrix<Complex> d = assemble_admittance(edited).y - assemble_admittance(manual).y;
        for (long k = 0; k < d.outerSize(); ++k)
            for (Eigen::SparseMatrix<Complex>::InnerIterator it(d, k); it; ++it) EXPECT_LT(std::abs(it.value()), 1e-12);
    }
}

TEST(Admittance, DeadIslandFlagged) {
    GridCase g = build_case39();
    g.transformers[0].in_service = false;
    g.ibr_groups[0].online = false;
    const auto y = assemble_admittance(g);
    EXPECT_TRUE(y.has_dead_island());
    EXPECT_FALSE(assemble_admittance(build_case39()).has_dead_island());
}

TEST(Topology, ParallelReactance) {
    EXPECT_NEAR(parallel_reactance(0.02, 0.02), 0.01, 1e-15);
    const GridCase g = build_case39();
    for (const auto& cand : g.branches) {
        if (!cand.mesh_candidate) continue;
        for (const auto& br : g.branches) {
            if (br.id == cand.id || br.mesh_candidate) continue;
            const bool same = (br.from == cand.from && br.to == cand.to) || (br.from == cand.to && br.to == cand.from);
            if (same) EXPECT_LT(parallel_reactance(br.x, cand.x), std::min(br.x, cand.x));
        }
    }
}

TEST(Topology, OpenReactorRemovesShunt) {
    GridCase g = two_bus(0.1);
    g.reactors.push_back(ShuntReactor{4, 2, 1.5, true, "r"});
    const double before = assemble_admittance(g).at(1, 1).imag();
    const GridCase opened = apply_topology_action(g, OpenReactor{4});
    EXPECT_NEAR(assemble_admittance(opened).at(1, 1).imag(), before + 1.5, 1e-12);
    EXPECT_THROW(apply_topology_action(opened, OpenReactor{4}), CaseError);
    EXPECT_NO_THROW(apply_topology_action(opened, CloseReactor{4}));
}

TEST(Topology, DoubleCommandsRejected) {
    const GridCase g = build_case39();
    int cand = 0;
    for (const auto& br : g.branches)
        if (br.mesh_candidate) cand = br.id;
    const GridCase meshed = apply_topology_action(g, MeshLine{cand});
    EXPECT_THROW(apply_topology_action(meshed, MeshLine{cand}), CaseError);
    EXPECT_THROW(apply_topology_action(g, MeshLine{1}), CaseError);
    EXPECT_THROW(apply_topology_action(g, OpenLine{cand}), CaseError);
    EXPECT_THROW(apply_topology_action(g, OpenReactor{999}), CaseError);
}

TEST(Collector, NominalRatio) {
    GsuTransformer t;
    t.n_nom = 1.05;
    EXPECT_NEAR(collector_voltage(t, 1.1), 1.1 / 1.05, 1e-15);
}

TEST(Collector, StaleTapOverstressesCollector) {
    GsuTransformer t;
    t.n_nom = 400.0 / 220.0;
    t.alpha = 0.0125;
    t.k_tap = -4;
    EXPECT_NEAR(collector_voltage(t, 418.0), 242.0, 1.0);
}

TEST(Collector, TapSweepClosedForm) {
    GsuTransformer t;
    t.n_nom = 1.0;
    t.alpha = 0.0125;
    for (int k = -8; k <= 8; ++k) {
        t.k_tap = k;
        EXPECT_NEAR(collector_voltage(t, 1.03), 1.03 / (1.0 + 0.0125 * k), 1e-14);
    }
}

TEST(Case39, DefaultAugmentation) {
    const GridCase g = build_case39();
    EXPECT_EQ(g.buses.size(), 44u);
    double ibr = 0.0;
    double sync = 0.0;
    for (const auto& r : g.ibr_groups) ibr += r.p;
    for (const auto& s : g.generators) sync += s.p;
    EXPECT_NEAR(ibr / (ibr + sync), 0.80, 0.01);
    double load = 0.0;
    for (const auto& l : g.loads) load += l.p_nom * g.s_base;
    EXPECT_NEAR(load, 0.58 * stock_load_mw(), 1e-6);
    EXPECT_NEAR(stock_load_mw(), 6254.23, 1e-6);
    double collector_mvar = 0.0;
    for (const auto& r : g.ibr_groups)
        for (int id : r.reactor_ids) collector_mvar += g.reactor(id).b_sh * g.s_base;
    EXPECT_GE(collector_mvar, 5 * 150.0);
    EXPECT_LE(collector_mvar, 5 * 300.0);
    for (const auto& r : g.ibr_groups) {
        EXPECT_GE(r.relay_threshold, 1.04 - 1e-12);
        EXPECT_LE(r.relay_threshold, 1.10 + 1e-12);
    }
}

TEST(Case39, EveryCollectorHasOneTransformerPath) {
    const GridCase g = build_case39();
    for (const auto& b : g.buses) {
        if (b.kind != BusKind::collector) continue;
        EXPECT_EQ(b.nominal_kv, 138.0);
        int paths = 0;
        for (const auto& t : g.transformers)
            if (t.lv_bus == b.id && g.bus(t.hv_bus).kind == BusKind::transmission) ++paths;
        for (const auto& br : g.branches) EXPECT_TRUE(br.from != b.id && br.to != b.id);
        EXPECT_EQ(paths, 1);
    }
}

TEST(Case39, AllSynchronousIdentityScaling) {
    CaseConfig cfg;
    cfg.renewable_share = 0.0;
    cfg.load_scale = 1.0;
    cfg.n_collectors = 1;
    const GridCase g = build_case39(cfg);
    for (const auto& r : g.ibr_groups) EXPECT_EQ(r.p, 0.0);
    double load = 0.0;
    for (const auto& l : g.loads) load += l.p_nom * g.s_base;
    EXPECT_NEAR(load, stock_load_mw(), 1e-9);
}

TEST(Case39, RejectsBadConfig) {
    CaseConfig cfg;
    cfg.n_collectors = 10;
    EXPECT_THROW(build_case39(cfg), CaseError);
    cfg = {};
    cfg.renewable_share = 1.2;
    EXPECT_THROW(build_case39(cfg), CaseError);
    cfg = {};
    cfg.load_scale = 0.0;
    EXPECT_THROW(build_case39(cfg), CaseError);
}

TEST(CaseIo, RoundTripIsByteIdentical) {
    const std::string a = serialize_case(build_case39());
    const std::string b = serialize_case(parse_case(a));
    EXPECT_EQ(a, b);
}

TEST(CaseIo, ErrorsCarryPointer) {
    auto doc = nlohmann::json::parse(serialize_case(build_case39()));
    doc["branches"][3]["x"] = "wide";
    try {
        case_from_json(doc);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.pointer(), "/branches/3/x");
    }
    doc = nlohmann::json::parse(serialize_case(build_case39()));
    doc["loads"][0]["zip_p"] = {0.5, 0.5, 0.5};
    EXPECT_THROW(case_from_json(doc), FormatError);
    doc = nlohmann::json::parse(serialize_case(build_case39()));
    doc["schema"] = "gridcase-v0";
    EXPECT_THROW(case_from_json(doc), FormatError);
}

TEST(CaseIo, MatpowerStock) {
    const GridCase g = parse_matpower(stock_case39_text());
    EXPECT_EQ(g.buses.size(), 39u);
    EXPECT_EQ(g.generators.size(), 10u);
    EXPECT_EQ(g.branches.size(), 46u);
    EXPECT_EQ(g.slack_bus, 31);
}

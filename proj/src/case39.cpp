#include <algorithm>
#include <cmath>
#include <map>

#include "gridcascade/case_io.hpp"
#include "gridcascade/netmodel.hpp"
#include "gridcascade/powerflow.hpp"

namespace gridcascade {

namespace {

// Classical machine data of the New England system (100 MVA base).
struct MachineData {
    double h;
    double x_d_prime;
};

const std::map<BusId, MachineData>& stock_machine_data() {
    static const std::map<BusId, MachineData> data{
        {30, {42.0, 0.031}},  {31, {30.3, 0.0697}}, {32, {35.8, 0.0531}}, {33, {28.6, 0.0436}},
        {34, {26.0, 0.132}},  {35, {34.8, 0.05}},   {36, {26.4, 0.049}},  {37, {24.3, 0.057}},
        {38, {34.5, 0.057}},  {39, {500.0, 0.006}},
    };
    return data;
}

bool southern(BusId id) { return (id >= 15 && id <= 24) || (id >= 33 && id <= 36); }

constexpr BusId kFirstCollectorBus = 40;
constexpr double kHvdcGain = 20.0;  // pu per rad
constexpr double kHvdcLag = 1.0;    // s

// Parallel corridors that operators may energize.
const std::vector<std::pair<BusId, BusId>>& mesh_corridors() {
    static const std::vector<std::pair<BusId, BusId>> c{{16, 19}, {16, 21}, {21, 22}, {22, 23}};
    return c;
}

const std::vector<BusId>& operator_reactor_buses() {
    static const std::vector<BusId> b{16, 21};
    return b;
}

double total_generation(const GridCase& g) {
    double total = 0.0;
    for (const auto& s : g.generators) {
        if (s.online) total += s.p;
    }
    for (const auto& r : g.ibr_groups) {
        if (r.online) total += r.p;
    }
    return total;
}

}  // namespace

const std::vector<BusId>& collector_attachment_order() {
    static const std::vector<BusId> order{35, 33, 36, 34, 38, 32, 39, 37, 30};
    return order;
}

GridCase build_case39(const CaseConfig& cfg) {
    if (!(cfg.renewable_share >= 0.0 && cfg.renewable_share <= 1.0)) {
        throw CaseError("renewable_share must lie in [0, 1]");
    }
    if (!(cfg.load_scale > 0.0 && cfg.load_scale <= 1.0)) {
        throw CaseError("load_scale must lie in (0, 1]");
    }
    const auto& order = cfg.collector_hosts.empty() ? collector_attachment_order() : cfg.collector_hosts;
    if (cfg.n_collectors < 1 || cfg.n_collectors > static_cast<int>(order.size())) {
        throw CaseError("n_collectors must lie in [1, " + std::to_string(order.size()) + "]");
    }
    if (cfg.threshold_lo <= 0.0 || cfg.threshold_hi < cfg.threshold_lo) {
        throw CaseError("collector thresholds must form a positive interval");
    }

    GridCase g = parse_matpower(stock_case39_text());
    g.name = "case39-collectors";
    for (auto& b : g.buses) {
        b.area = southern(b.id) ? "south" : "north";
    }
    for (auto& l : g.loads) {
        l.p_nom *= cfg.load_scale;
        l.q_nom *= cfg.load_scale;
        l.zip_p = cfg.load_zip_p;
        l.zip_q = cfg.load_zip_q;
    }

    std::map<BusId, double> stock_p;
    for (auto& s : g.generators) {
        stock_p[s.bus] = s.p;
        const auto& md = stock_machine_data().at(s.bus);
        s.h = (s.bus == 39 && cfg.external_h > 0.0) ? cfg.external_h : md.h;
        s.x_d_prime = md.x_d_prime;
        s.d = cfg.gen_damping;
        s.v_set = cfg.gen_v_set;
        s.q = 0.0;
        s.q_min = -0.6 * s.rating_mva / g.s_base;
        s.q_max = 0.6 * s.rating_mva / g.s_base;
        s.avr.mode = cfg.avr_mode;
        s.avr.v_ref = cfg.gen_v_set;
        s.avr.k_q = cfg.gen_droop_kq;
        s.avr.band_lo = 1.0125;
        s.avr.band_hi = 1.025;
        s.avr.q_lim = cfg.gen_q_lim_fraction * s.rating_mva / g.s_base;
        s.avr.lag_tau = cfg.avr_mode == AvrMode::droop ? 0.5 : 0.0;
        s.avr.ramp_mvar_s = cfg.gen_ramp_mvar_s;
    }

    // Collector groups attach at the buses of the largest machines; those
    // machines stay online at reduced dispatch.
    const int n = cfg.n_collectors;
    std::vector<BusId> hosts(order.begin(), order.begin() + n);
    for (std::size_t i = 0; i < hosts.size(); ++i) {
        if (!stock_p.contains(hosts[i]) || std::find(hosts.begin(), hosts.begin() + static_cast<long>(i), hosts[i]) !=
                                               hosts.begin() + static_cast<long>(i)) {
            throw CaseError("collector host " + std::to_string(hosts[i]) + " is not a distinct machine bus");
        }
    }
    double host_stock = 0.0;
    for (BusId h : hosts) {
        host_stock += stock_p.at(h);
    }
    for (int k = 0; k < n; ++k) {
        const BusId host = hosts[static_cast<std::size_t>(k)];
        const BusId cb = kFirstCollectorBus + k;
        Bus bus;
        bus.id = cb;
        bus.kind = BusKind::collector;
        bus.nominal_kv = 138.0;
        bus.area = g.bus(host).area;
        g.buses.push_back(bus);

        GsuTransformer t;
        t.id = k + 1;
        t.hv_bus = host;
        t.lv_bus = cb;
        t.x = cfg.gsu_x;
        g.transformers.push_back(t);

        ShuntReactor r;
        r.id = k + 1;
        r.bus = cb;
        const double mvar = cfg.collector_reactor_mvar.empty()
                                ? 150.0
                                : cfg.collector_reactor_mvar[std::min<std::size_t>(
                                      static_cast<std::size_t>(k), cfg.collector_reactor_mvar.size() - 1)];
        r.b_sh = mvar / g.s_base;
        r.name = "C" + std::to_string(k + 1) + "-R";
        g.reactors.push_back(r);

        IbrGroup ibr;
        ibr.id = k + 1;
        ibr.name = "C" + std::to_string(k + 1);
        ibr.collector_bus = cb;
        ibr.q = cfg.collector_ibr_q;
        ibr.transformer_id = t.id;
        ibr.reactor_ids = {r.id};
        ibr.relay_threshold = n == 1 ? cfg.threshold_lo
                                     : cfg.threshold_lo + (cfg.threshold_hi - cfg.threshold_lo) * k / (n - 1);
        ibr.relay_dwell = cfg.relay_dwell;
        g.ibr_groups.push_back(ibr);
    }

    int reactor_id = n + 1;
    for (BusId b : operator_reactor_buses()) {
        ShuntReactor r;
        r.id = reactor_id++;
        r.bus = b;
        r.b_sh = cfg.operator_reactor_mvar / g.s_base;
        r.name = "R" + std::to_string(b);
        g.reactors.push_back(r);
    }

    int branch_id = static_cast<int>(g.branches.size()) + 1;
    for (const auto& [a, b] : mesh_corridors()) {
        auto it = std::find_if(g.branches.begin(), g.branches.end(), [a = a, b = b](const Branch& br) {
            return (br.from == a && br.to == b) || (br.from == b && br.to == a);
        });
        if (it == g.branches.end()) {
            throw CaseError("stock corridor missing");
        }
        Branch p = *it;
        p.id = branch_id++;
        p.x *= cfg.mesh_x_scale;
        p.r *= cfg.mesh_x_scale;
        p.b_charging *= cfg.mesh_b_scale;
        p.status = BranchStatus::open;
        p.mesh_candidate = true;
        g.branches.push_back(p);
    }

    HvdcLink link;
    link.id = 1;
    link.terminal_a = 16;
    link.terminal_b = 39;
    link.mode = HvdcMode::pmode3;
    link.p_set = cfg.hvdc_export_mw / g.s_base;
    link.p_ref = link.p_set;
    link.k = kHvdcGain;
    link.t = kHvdcLag;
    g.hvdc.push_back(link);

    // Dispatch: IBR carry the share of total generation pro-rata to the
    // machines they replaced; the slack closes the balance including losses.
    double sync_stock = 0.0;
    for (const auto& s : g.generators) {
        sync_stock += stock_p.at(s.bus);
    }
    double total = 0.0;
    for (const auto& l : g.loads) {
        total += l.p_nom;
    }
    PowerFlowSolution sol;
    for (int iter = 0; iter < 30; ++iter) {
        for (int k = 0; k < n; ++k) {
            g.ibr_groups[static_cast<std::size_t>(k)].p =
                cfg.renewable_share * total * stock_p.at(hosts[static_cast<std::size_t>(k)]) / host_stock;
        }
        for (auto& s : g.generators) {
            if (s.bus != g.slack_bus) {
                s.p = (1.0 - cfg.renewable_share) * total * stock_p.at(s.bus) / sync_stock;
            }
        }
        sol = solve_pf(g, {});
        g = with_solution(g, sol);
        const double updated = total_generation(g);
        const bool settled = std::abs(updated - total) < 1e-9;
        total = updated;

        // Fixed taps chosen to put each collector near 1.00 pu.
        bool taps_moved = false;
        for (auto& t : g.transformers) {
            const double vc = sol.v_at(g, t.lv_bus);
            const double wanted = t.n_tap() * vc;
            const int k = std::clamp(static_cast<int>(std::lround((wanted / t.n_nom - 1.0) / t.alpha)), t.k_min,
                                     t.k_max);
            if (k != t.k_tap) {
                t.k_tap = k;
                taps_moved = true;
            }
        }
        if (settled && !taps_moved) {
            break;
        }
    }
    sol = solve_pf(g, {});
    g = with_solution(g, sol);
    for (auto& h : g.hvdc) {
        h.p0 = h.p_set - h.k * (sol.theta_at(g, h.terminal_a) - sol.theta_at(g, h.terminal_b));
    }
    g.validate();
    return g;
}

}  // namespace gridcascade

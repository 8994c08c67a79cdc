#include "gridcascade/experiments.hpp"

#include <atomic>
#include <functional>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "gridcascade/measures.hpp"

namespace gridcascade {

std::vector<BusId> mesh_corridor_buses(const GridCase& grid) {
    std::set<BusId> buses;
    for (const auto& b : grid.branches) {
        if (b.mesh_candidate) {
            buses.insert(b.from);
            buses.insert(b.to);
        }
    }
    return {buses.begin(), buses.end()};
}

RunSummary summarize_run(std::string name, const SimTrace& trace, const std::vector<BusId>& corridor) {
    RunSummary s;
    s.name = std::move(name);
    s.trace = trace;
    for (const auto& e : trace.events) {
        if (e.trip && e.trip->kind == TripKind::collector) {
            s.first_trip_t = e.t;
            break;
        }
    }
    std::vector<std::size_t> idx;
    for (BusId b : corridor) {
        for (std::size_t k = 0; k < trace.bus_ids.size(); ++k) {
            if (trace.bus_ids[k] == b) idx.push_back(k);
        }
    }
    for (const auto& r : trace.records) {
        s.peak_tx_pu = std::max(s.peak_tx_pu, r.v_max_tx);
        if (!s.first_trip_t || r.t < *s.first_trip_t) {
            for (std::size_t k : idx) s.corridor_peak_pu = std::max(s.corridor_peak_pu, r.v[k]);
        }
    }
    const PolicyOutcome p = summarize_policy(UflsPolicy::conventional, trace);
    s.post_shed_peak_pu = p.peak_post_shed_pu;
    s.shed_mw = p.shed_mw;
    return s;
}

RunSummary run_builtin(const std::string& name, const CaseConfig& cfg, bool (*keep)(const ScenarioEvent&),
                       std::optional<UflsPolicy> policy) {
    const BuiltinScenario b = builtin_iberian_scenario(cfg);
    SimConfig c = b.config;
    if (policy) c.ufls.policy = *policy;
    Simulation sim(b.grid, c);
    for (const auto& e : b.events) {
        if (keep == nullptr || keep(e)) sim.schedule(e);
    }
    sim.run();
    return summarize_run(name, sim.trace(), mesh_corridor_buses(b.grid));
}

std::vector<RunSummary> run_counterfactual(const std::string& name, int workers) {
    std::vector<std::function<RunSummary()>> jobs;
    const CaseConfig base = iberian_case_config();
    if (name == "avr_compliance") {
        jobs.emplace_back([base] { return run_builtin("deadband", base); });
        jobs.emplace_back([base] {
            CaseConfig c = base;
            c.avr_mode = AvrMode::droop;
            return run_builtin("droop", c);
        });
    } else if (name == "renewable_sweep") {
        for (double share : {0.6, 0.8, 1.0}) {
            jobs.emplace_back([base, share] {
                CaseConfig c = base;
                c.avr_mode = AvrMode::droop;
                c.renewable_share = share;
                std::ostringstream n;
                n << "droop_share_" << share;
                return run_builtin(n.str(), c);
            });
        }
    } else if (name == "meshing") {
        jobs.emplace_back([base] { return run_builtin("meshed", base); });
        jobs.emplace_back([base] {
            return run_builtin("unmeshed", base,
                               [](const ScenarioEvent& e) { return !std::holds_alternative<MeshLine>(e.action); });
        });
    } else if (name == "ufls_policy") {
        jobs.emplace_back([base] { return run_builtin("conventional", base, nullptr, UflsPolicy::conventional); });
        jobs.emplace_back([base] { return run_builtin("voltage_aware", base, nullptr, UflsPolicy::voltage_aware); });
    } else {
        throw std::invalid_argument("unknown counterfactual '" + name + "'");
    }

    std::vector<RunSummary> out(jobs.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex mu;
    auto work = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            try {
                out[i] = jobs[i]();
            } catch (...) {
                const std::lock_guard lock(mu);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (int w = 1; w < std::max(1, workers); ++w) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
    return out;
}

std::string summary_csv(const std::vector<RunSummary>& runs) {
    std::ostringstream os;
    os.precision(10);
    os << "run,status,terminal_t,peak_tx_pu,corridor_peak_pu,first_trip_t,post_shed_peak_pu,shed_mw\n";
    for (const auto& r : runs) {
        os << r.name << ',' << to_string(r.trace.terminal.status) << ',' << r.trace.terminal.t << ',' << r.peak_tx_pu
           << ',' << r.corridor_peak_pu << ',';
        if (r.first_trip_t) os << *r.first_trip_t;
        os << ',' << r.post_shed_peak_pu << ',' << r.shed_mw << '\n';
    }
    return os.str();
}

}  // namespace gridcascade

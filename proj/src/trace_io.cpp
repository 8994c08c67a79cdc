#include "gridcascade/trace_io.hpp"

#include <fstream>
#include <sstream>

namespace gridcascade {

ojson trip_json(const TripEvent& trip) {
    ojson j;
    j["kind"] = to_string(trip.kind);
    j["target"] = trip.target;
    j["removed_p_mw"] = trip.removed_p_mw;
    j["removed_q_mvar"] = trip.removed_q_mvar;
    j["cause"] = trip.cause;
    if (!trip.shed.empty()) {
        ojson shed = ojson::array();
        for (const auto& [load, frac] : trip.shed) {
            shed.push_back({{"load", load}, {"fraction", frac}});
        }
        j["shed"] = shed;
    }
    if (trip.max_dv_pu) {
        j["max_dv_pu"] = *trip.max_dv_pu;
    }
    return j;
}

ojson trace_event_json(const TraceEvent& event) {
    ojson j;
    if (event.action) {
        j["type"] = "action";
        j["t"] = event.t;
        j["action"] = action_name(*event.action);
        j["params"] = action_params(*event.action);
        if (event.trip) {
            j["trip"] = trip_json(*event.trip);
        }
        if (!event.rejected.empty()) {
            j["rejected"] = event.rejected;
        }
    } else {
        j["type"] = "trip";
        j["t"] = event.t;
        if (event.trip) {
            const ojson trip = trip_json(*event.trip);
            for (const auto& [k, v] : trip.items()) {
                j[k] = v;
            }
        }
    }
    return j;
}

ojson trace_record_json(const TraceRecord& r) {
    ojson j;
    j["type"] = "record";
    j["t"] = r.t;
    j["v"] = r.v;
    j["freq_hz"] = r.freq_hz;
    j["q_lost_mvar"] = r.q_lost_mvar;
    j["v_max_tx"] = r.v_max_tx;
    j["collector_v"] = r.collector_v;
    j["relay_timer"] = r.relay_timer;
    return j;
}

ojson terminal_json(const Terminal& terminal) {
    return {{"type", "terminal"}, {"status", to_string(terminal.status)}, {"t", terminal.t}, {"reason", terminal.reason}};
}

std::string trace_to_jsonl(const SimTrace& trace) {
    std::ostringstream out;
    ojson header = {{"type", "header"}};
    for (auto& [k, v] : trace.header.items()) {
        header[k] = v;
    }
    out << header.dump() << '\n';

    double dt = 0.0;
    if (trace.header.contains("config")) {
        dt = trace.header["config"].value("dt", 0.0);
    }
    // Actions carry the start time of their step, trips its end time.
    auto key = [dt](const TraceEvent& e) { return e.action ? e.t + dt : e.t; };
    std::size_t ei = 0;
    for (const auto& r : trace.records) {
        while (ei < trace.events.size() && key(trace.events[ei]) <= r.t + 1e-9) {
            out << trace_event_json(trace.events[ei++]).dump() << '\n';
        }
        out << trace_record_json(r).dump() << '\n';
    }
    for (; ei < trace.events.size(); ++ei) {
        out << trace_event_json(trace.events[ei]).dump() << '\n';
    }
    out << terminal_json(trace.terminal).dump() << '\n';
    return out.str();
}

std::string trace_to_csv(const SimTrace& trace) {
    std::ostringstream out;
    out.precision(17);
    out << "t";
    for (BusId b : trace.bus_ids) {
        out << ",v_" << b;
    }
    out << ",freq_hz,q_lost_mvar\n";
    for (const auto& r : trace.records) {
        out << r.t;
        for (double v : r.v) {
            out << ',' << v;
        }
        out << ',' << r.freq_hz << ',' << r.q_lost_mvar << '\n';
    }
    return out.str();
}

void write_trace_files(const SimTrace& trace, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const std::pair<std::string, std::string> files[] = {{"trace.jsonl", trace_to_jsonl(trace)},
                                                         {"trace.csv", trace_to_csv(trace)}};
    for (const auto& [name, text] : files) {
        std::ofstream f(dir / (name + ".tmp"), std::ios::binary);
        f << text;
        if (!f) {
            throw std::runtime_error("cannot write " + (dir / name).string());
        }
    }
    for (const auto& [name, text] : files) {
        std::filesystem::rename(dir / (name + ".tmp"), dir / name);
    }
}

}  // namespace gridcascade

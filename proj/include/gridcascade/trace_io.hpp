#pragma once

#include <filesystem>
#include <string>

#include "gridcascade/simengine.hpp"

namespace gridcascade {

ojson trip_json(const TripEvent& trip);
ojson trace_event_json(const TraceEvent& event);
ojson trace_record_json(const TraceRecord& record);
ojson terminal_json(const Terminal& terminal);

/// Header line, then records with the events of each step placed before the
/// record that closes it, then the terminal line.
std::string trace_to_jsonl(const SimTrace& trace);

/// Columns t, v_<bus>..., freq_hz, q_lost_mvar.
std::string trace_to_csv(const SimTrace& trace);

/// Writes trace.jsonl and trace.csv into `dir`. Files appear only once both
/// are complete.
void write_trace_files(const SimTrace& trace, const std::filesystem::path& dir);

}  // namespace gridcascade

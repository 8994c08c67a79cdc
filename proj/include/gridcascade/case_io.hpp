#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "gridcascade/netmodel.hpp"

namespace gridcascade {

using ojson = nlohmann::ordered_json;

inline constexpr std::string_view kCaseSchema = "gridcase-v1";

/// Schema violation in a case or scenario document. `pointer()` is the
/// JSON-pointer path of the offending value.
class FormatError : public std::runtime_error {
public:
    FormatError(std::string pointer, const std::string& message)
        : std::runtime_error(pointer + ": " + message), pointer_(std::move(pointer)) {}
    [[nodiscard]] const std::string& pointer() const { return pointer_; }

private:
    std::string pointer_;
};

ojson case_to_json(const GridCase& grid);
GridCase case_from_json(const nlohmann::json& doc);

/// Canonical text form: fixed key order, two-space indent, trailing newline.
std::string serialize_case(const GridCase& grid);
GridCase parse_case(std::string_view text);

GridCase load_case_file(const std::string& path);
void save_case_file(const GridCase& grid, const std::string& path);

/// Parses the bus/gen/branch matrices of a MATPOWER case file. Loads become
/// constant-power ZIP loads; generator inertia and transient reactance are
/// not part of the format and stay at their defaults.
GridCase parse_matpower(std::string_view text);

/// The stock 39-bus New England case in MATPOWER text form.
std::string_view stock_case39_text();

}  // namespace gridcascade

#pragma once

// Path-tracking accessors over nlohmann::json so schema errors can name the
// offending value.

#include <functional>
#include <initializer_list>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

#include "gridcascade/case_io.hpp"

namespace gridcascade::detail {

class Reader {
public:
    Reader(const nlohmann::json& value, std::string path) : value_(&value), path_(std::move(path)) {}

    [[nodiscard]] const nlohmann::json& value() const { return *value_; }
    [[nodiscard]] const std::string& path() const { return path_; }

    [[nodiscard]] bool optional(const std::string& key) const {
        return value_->is_object() && value_->contains(key);
    }

    [[nodiscard]] Reader field(const std::string& key) const {
        if (!value_->is_object()) {
            throw FormatError(path_, "expected object");
        }
        auto it = value_->find(key);
        if (it == value_->end()) {
            throw FormatError(path_ + "/" + key, "missing required field");
        }
        return Reader(*it, path_ + "/" + key);
    }

    [[nodiscard]] Reader at(std::size_t i) const {
        if (!value_->is_array()) {
            throw FormatError(path_, "expected array");
        }
        if (i >= value_->size()) {
            throw FormatError(path_ + "/" + std::to_string(i), "index out of range");
        }
        return Reader((*value_)[i], path_ + "/" + std::to_string(i));
    }

    [[nodiscard]] double number() const {
        if (!value_->is_number()) {
            throw FormatError(path_, "expected number");
        }
        return value_->get<double>();
    }

    [[nodiscard]] int integer() const {
        if (!value_->is_number_integer()) {
            throw FormatError(path_, "expected integer");
        }
        return value_->get<int>();
    }

    [[nodiscard]] bool boolean() const {
        if (!value_->is_boolean()) {
            throw FormatError(path_, "expected boolean");
        }
        return value_->get<bool>();
    }

    [[nodiscard]] std::string string() const {
        if (!value_->is_string()) {
            throw FormatError(path_, "expected string");
        }
        return value_->get<std::string>();
    }

    template <typename T>
    [[nodiscard]] T choice(std::initializer_list<std::pair<const char*, T>> options) const {
        const std::string s = string();
        for (const auto& [name, v] : options) {
            if (s == name) {
                return v;
            }
        }
        throw FormatError(path_, "unknown value '" + s + "'");
    }

    void each(const std::function<void(const Reader&)>& fn) const {
        if (!value_->is_array()) {
            throw FormatError(path_, "expected array");
        }
        for (std::size_t i = 0; i < value_->size(); ++i) {
            fn(Reader((*value_)[i], path_ + "/" + std::to_string(i)));
        }
    }

private:
    const nlohmann::json* value_;
    std::string path_;
};

}  // namespace gridcascade::detail

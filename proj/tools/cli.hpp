// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dta/error.hpp"

namespace dta::cli {

/// Unknown configuration key. Carries the full list of accepted keys.
class UnknownKeyError : public UsageError {
public:
    UnknownKeyError(const std::string& key, std::vector<std::string> valid);
    const std::vector<std::string>& valid_keys() const { return valid_; }

private:
    std::vector<std::string> valid_;
};

/// Flat key=value run configuration with typed defaults.
class Settings {
public:
    Settings();

    // JSON object; nested objects are flattened with dots.
    void load_file(const std::filesystem::path& path);
    void load_json(const nlohmann::json& j);
    // "key=value" with the value parsed by the key's type.
    void apply_override(std::string_view assignment);

    int64_t integer(const std::string& key) const;
    double number(const std::string& key) const;
    const std::string& text(const std::string& key) const;

    std::vector<std::string> keys() const;
    nlohmann::json resolved() const;

private:
    void assign(const std::string& key, const nlohmann::json& value);
    const nlohmann::json& at(const std::string& key) const;

    std::map<std::string, nlohmann::json> values_;
};

/// Runs one command line (args excludes the program name). Returns the
/// exit code: 0 on success, 2 for usage errors, 1 otherwise.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace dta::cli

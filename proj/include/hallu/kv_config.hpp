#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "hallu/error.hpp"

namespace hallu {

/// Flat view of a human-editable `key = value` file with optional `[section]` headers.
/// Keys inside a section are addressed as "section.key". Comma-separated and
/// bracketed values become lists.
class KeyValueConfig {
public:
    KeyValueConfig() = default;

    static KeyValueConfig parse(std::istream& in) {
        KeyValueConfig cfg;
        CLI::ConfigTOML reader;
        for (const auto& item : reader.from_config(in)) {
            if (item.name == "++" || item.name == "--") continue;
            cfg.values_[item.fullname()] = item.inputs;
        }
        return cfg;
    }

    static KeyValueConfig parse_string(const std::string& text) {
        std::istringstream in(text);
        return parse(in);
    }

    static KeyValueConfig load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError(fmt::format("cannot open config {}", path.string()));
        try {
            return parse(in);
        } catch (const CLI::Error& e) {
            throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
        }
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::optional<std::string> get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end() || it->second.empty()) return std::nullopt;
        if (it->second.size() == 1) return it->second.front();
        std::string joined;
        for (std::size_t i = 0; i < it->second.size(); ++i) joined += (i ? "," : "") + it->second[i];
        return joined;
    }

    std::string get_or(const std::string& key, const std::string& fallback) const {
        return get(key).value_or(fallback);
    }

    std::string require(const std::string& key) const {
        auto v = get(key);
        if (!v) throw ConfigError(fmt::format("missing required key '{}'", key));
        return *v;
    }

    std::vector<std::string> list(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) return {};
        return it->second;
    }

    long long get_int(const std::string& key, long long fallback) const {
        auto v = get(key);
        if (!v) return fallback;
        try {
            std::size_t used = 0;
            auto n = std::stoll(*v, &used);
            if (used != v->size()) throw std::invalid_argument(*v);
            return n;
        } catch (const std::exception&) {
            throw ConfigError(fmt::format("key '{}' expects an integer, got '{}'", key, *v));
        }
    }

    double get_double(const std::string& key, double fallback) const {
        auto v = get(key);
        if (!v) return fallback;
        try {
            std::size_t used = 0;
            auto x = std::stod(*v, &used);
            if (used != v->size()) throw std::invalid_argument(*v);
            return x;
        } catch (const std::exception&) {
            throw ConfigError(fmt::format("key '{}' expects a number, got '{}'", key, *v));
        }
    }

    /// All keys that start with `prefix.`, with the prefix stripped.
    std::map<std::string, std::string> section(const std::string& prefix) const {
        std::map<std::string, std::string> out;
        const std::string p = prefix + ".";
        for (const auto& [k, v] : values_) {
            if (k.rfind(p, 0) == 0) out[k.substr(p.size())] = get(k).value_or("");
        }
        return out;
    }

    const std::map<std::string, std::vector<std::string>>& raw() const { return values_; }

private:
    std::map<std::string, std::vector<std::string>> values_;
};

}  // namespace hallu

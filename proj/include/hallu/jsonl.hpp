#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "hallu/error.hpp"

namespace hallu::jsonl {

using json = nlohmann::json;

/// Calls `fn(line_number, object)` for every non-blank line. Lines that fail to parse
/// become diagnostics and the stream continues.
inline void for_each(const std::filesystem::path& path,
                     const std::function<void(std::size_t, const json&)>& fn,
                     Diagnostics& diags) {
    std::ifstream in(path);
    if (!in) throw Error(fmt::format("cannot open {}", path.string()));
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json value;
        try {
            value = json::parse(line);
        } catch (const json::parse_error& e) {
            diags.push_back({fmt::format("{}:{}", path.string(), number), e.what()});
            continue;
        }
        fn(number, value);
    }
}

inline std::vector<json> read_all(const std::filesystem::path& path, Diagnostics& diags) {
    std::vector<json> out;
    for_each(path, [&](std::size_t, const json& v) { out.push_back(v); }, diags);
    return out;
}

/// Writes one compact object per line. Keys are emitted in sorted order, so equal
/// values always serialize to identical bytes.
inline void write_all(const std::filesystem::path& path, const std::vector<json>& rows) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(fmt::format("cannot write {}", path.string()));
    for (const auto& row : rows) out << row.dump() << '\n';
}

inline json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(fmt::format("cannot open {}", path.string()));
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw Error(fmt::format("{}: {}", path.string(), e.what()));
    }
}

inline void write_json(const std::filesystem::path& path, const json& value) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(fmt::format("cannot write {}", path.string()));
    out << value.dump(2) << '\n';
}

}  // namespace hallu::jsonl

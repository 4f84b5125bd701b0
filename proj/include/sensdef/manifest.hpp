// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "sensdef/hash.hpp"

namespace sensdef {

inline constexpr const char* kToolVersion = "0.1.0";

struct OutputEntry {
    std::string name;  // relative to the output directory
    std::string sha256;
    std::uintmax_t bytes = 0;
};

/// Timestamps are informational; everything else is a pure function of the
/// config and inputs, so two runs agree on `outputs` and `config_sha256`.
struct RunManifest {
    std::string command;
    std::string config_sha256;
    std::string tool_version = kToolVersion;
    std::string started_utc, finished_utc;
    std::map<std::string, std::uint64_t> seeds;
    std::vector<OutputEntry> outputs;
    nlohmann::json flags = nlohmann::json::object();
};

inline std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline void add_output(RunManifest& m, const std::filesystem::path& dir, const std::string& name) {
    const auto p = dir / name;
    m.outputs.push_back({name, sha256_file(p.string()), std::filesystem::file_size(p)});
}

inline nlohmann::json manifest_to_json(const RunManifest& m) {
    nlohmann::json outs = nlohmann::json::array();
    for (const auto& o : m.outputs) outs.push_back({{"name", o.name}, {"sha256", o.sha256}, {"bytes", o.bytes}});
    return {{"command", m.command},
            {"config_sha256", m.config_sha256},
            {"tool_version", m.tool_version},
            {"started_utc", m.started_utc},
            {"finished_utc", m.finished_utc},
            {"seeds", m.seeds},
            {"flags", m.flags},
            {"outputs", outs}};
}

/// Name -> sha256 for every listed output; the part reruns must reproduce.
inline std::map<std::string, std::string> content_hashes(const nlohmann::json& manifest) {
    std::map<std::string, std::string> out;
    for (const auto& o : manifest.at("outputs")) out[o.at("name").get<std::string>()] = o.at("sha256").get<std::string>();
    return out;
}

}  // namespace sensdef

#pragma once

#include <map>
#include <string>

namespace docklab {

inline constexpr const char* kToolVersion = "docklab 0.1.0";

// Content-addressed record of one CLI run. output_digests only lists
// artifacts that are byte-reproducible from the config and seed;
// timing-bearing files (the epoch log) go under volatile_digests.
struct RunManifest {
    std::string command;
    std::string config_digest;
    std::map<std::string, std::string> input_digests;
    std::map<std::string, std::string> output_digests;
    std::map<std::string, std::string> volatile_digests;
    std::string tool_version = kToolVersion;
    double wall_time_s = 0.0;
};

// Write-to-temp-then-rename, so a manifest only ever exists complete.
void write_manifest(const RunManifest& manifest, const std::string& path);
RunManifest load_manifest(const std::string& path);

}  // namespace docklab

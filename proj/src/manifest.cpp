#include "docklab/manifest.hpp"

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "docklab/errors.hpp"

namespace docklab {

using json = nlohmann::json;

void write_manifest(const RunManifest& manifest, const std::string& path) {
    json j;
    j["command"] = manifest.command;
    j["config_digest"] = manifest.config_digest;
    j["input_digests"] = manifest.input_digests;
    j["output_digests"] = manifest.output_digests;
    j["volatile_digests"] = manifest.volatile_digests;
    j["tool_version"] = manifest.tool_version;
    j["wall_time_s"] = manifest.wall_time_s;

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw DataError(tmp + ": cannot open for writing");
        out << j.dump(2) << "\n";
    }
    std::filesystem::rename(tmp, path);
}

RunManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(path + ": cannot open");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw DataError(path + ": " + e.what());
    }
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.config_digest = j.at("config_digest").get<std::string>();
    m.input_digests = j.at("input_digests").get<std::map<std::string, std::string>>();
    m.output_digests = j.at("output_digests").get<std::map<std::string, std::string>>();
    m.volatile_digests = j.at("volatile_digests").get<std::map<std::string, std::string>>();
    m.tool_version = j.at("tool_version").get<std::string>();
    m.wall_time_s = j.at("wall_time_s").get<double>();
    return m;
}

}  // namespace docklab

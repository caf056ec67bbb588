#pragma once
// Shared JSON file helpers: load/save with ErrorKind::data diagnostics that
// always name the offending path.

#include <fstream>
#include <string>

#include <json.hpp>

#include "condinst/feature_map.hpp"

namespace condinst {

inline nlohmann::json load_json_file(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::data, "cannot open: " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const std::exception& e) {
        throw Error(ErrorKind::data, "invalid json in " + path + ": " + e.what());
    }
}

inline void save_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path);
    require(out.good(), ErrorKind::data, "cannot open for writing: " + path);
    out << j.dump(2) << "\n";
    out.flush();
    require(out.good(), ErrorKind::data, "write failed: " + path);
}

}  // namespace condinst

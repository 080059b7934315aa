#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rfbsde/common.hpp"

namespace rfbsde {

/// One requested operation with its raw key-value parameters.
struct OpSpec {
    std::string kind;
    std::map<std::string, std::string> params;
};

/// Parsed experiment file. Both the flat text format and its JSON mirror
/// land here; values stay strings until typed extraction.
struct ExperimentConfig {
    std::map<std::string, std::map<std::string, std::string>> sections;
    std::vector<OpSpec> ops;
    std::string source_path;

    bool has(const std::string& section, const std::string& key) const {
        const auto s = sections.find(section);
        return s != sections.end() && s->second.count(key) > 0;
    }
    std::string get(const std::string& section, const std::string& key,
                    const std::string& fallback = "") const {
        const auto s = sections.find(section);
        if (s == sections.end()) return fallback;
        const auto it = s->second.find(key);
        return it == s->second.end() ? fallback : it->second;
    }
};

namespace cfg {

inline std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

inline double to_double(const std::string& v, const std::string& where) {
    char* end = nullptr;
    const double x = std::strtod(v.c_str(), &end);
    if (end == v.c_str() || *end != '\0') throw ConfigError("expected a number for " + where + ", got '" + v + "'");
    return x;
}

inline long long to_int(const std::string& v, const std::string& where) {
    char* end = nullptr;
    const long long x = std::strtoll(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0') throw ConfigError("expected an integer for " + where + ", got '" + v + "'");
    return x;
}

inline std::vector<double> to_doubles(const std::string& v, const std::string& where) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        cell = trim(cell);
        if (!cell.empty()) out.push_back(to_double(cell, where));
    }
    if (out.empty()) throw ConfigError("expected at least one number for " + where);
    return out;
}

inline std::vector<int> to_ints(const std::string& v, const std::string& where) {
    std::vector<int> out;
    for (const double x : to_doubles(v, where)) out.push_back(static_cast<int>(x));
    return out;
}

}  // namespace cfg

/// Flat text grammar: `[section]` headers, `key = value` lines, `#`
/// comments. Operations are sections named `[op.<kind>]`, executed in file
/// order.
inline ExperimentConfig parse_config_text(std::istream& in, const std::string& path = "") {
    ExperimentConfig config;
    config.source_path = path;
    std::string line;
    std::string section;
    OpSpec* current_op = nullptr;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = cfg::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("unterminated section header at line " + std::to_string(lineno));
            section = cfg::trim(line.substr(1, line.size() - 2));
            if (section.rfind("op.", 0) == 0) {
                config.ops.push_back(OpSpec{section.substr(3), {}});
                current_op = &config.ops.back();
            } else {
                current_op = nullptr;
                config.sections[section];  // register even if empty
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("expected 'key = value' at line " + std::to_string(lineno));
        const std::string key = cfg::trim(line.substr(0, eq));
        const std::string value = cfg::trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("empty key at line " + std::to_string(lineno));
        if (section.empty()) throw ConfigError("key outside any section at line " + std::to_string(lineno));
        if (current_op) {
            if (current_op->params.count(key)) throw ConfigError("duplicate key '" + key + "' in [op." + current_op->kind + "]");
            current_op->params[key] = value;
        } else {
            if (config.sections[section].count(key)) throw ConfigError("duplicate key '" + key + "' in [" + section + "]");
            config.sections[section][key] = value;
        }
    }
    return config;
}

/// JSON mirror: top-level objects become sections, the "ops" array becomes
/// the operation list ({"kind": ..., ...params}). Scalars are stringified,
/// arrays become comma-joined lists; both formats share one extraction path.
inline ExperimentConfig parse_config_json(std::istream& in, const std::string& path = "") {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("JSON parse error: ") + e.what());
    }
    auto stringify = [](const nlohmann::json& v) -> std::string {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_boolean()) return v.get<bool>() ? "1" : "0";
        if (v.is_number_integer()) return std::to_string(v.get<long long>());
        if (v.is_number()) return format_double(v.get<double>());
        if (v.is_array()) {
            std::string joined;
            for (const auto& e : v) {
                if (!joined.empty()) joined += ", ";
                if (e.is_string()) {
                    joined += e.get<std::string>();
                } else if (e.is_number_integer()) {
                    joined += std::to_string(e.get<long long>());
                } else if (e.is_number()) {
                    joined += format_double(e.get<double>());
                } else {
                    throw ConfigError("config arrays may hold only numbers or strings");
                }
            }
            return joined;
        }
        throw ConfigError("config values must be scalars or flat arrays");
    };

    ExperimentConfig config;
    config.source_path = path;
    if (!doc.is_object()) throw ConfigError("config root must be a JSON object");
    for (const auto& [name, value] : doc.items()) {
        if (name == "ops") {
            if (!value.is_array()) throw ConfigError("'ops' must be an array");
            for (const auto& op : value) {
                if (!op.is_object() || !op.contains("kind")) {
                    throw ConfigError("each op needs a 'kind' key");
                }
                OpSpec spec;
                spec.kind = op.at("kind").get<std::string>();
                for (const auto& [k, v] : op.items()) {
                    if (k != "kind") spec.params[k] = stringify(v);
                }
                config.ops.push_back(std::move(spec));
            }
            continue;
        }
        if (!value.is_object()) throw ConfigError("section '" + name + "' must be an object");
        for (const auto& [k, v] : value.items()) config.sections[name][k] = stringify(v);
    }
    return config;
}

inline ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file: " + path);
    // JSON mirror if the first non-space character opens an object
    char c;
    while (in.get(c)) {
        if (!std::isspace(static_cast<unsigned char>(c))) break;
    }
    in.clear();
    in.seekg(0);
    if (c == '{') return parse_config_json(in, path);
    return parse_config_text(in, path);
}

/// Reject unknown keys, naming the first offender.
inline void check_keys(const std::map<std::string, std::string>& kv, const std::set<std::string>& allowed,
                       const std::string& where) {
    for (const auto& [key, value] : kv) {
        if (!allowed.count(key)) {
            throw ConfigError("unknown key '" + key + "' in " + where);
        }
    }
}

}  // namespace rfbsde

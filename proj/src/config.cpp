#include "s2rd/config.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "s2rd/checkpoint.hpp"

namespace s2rd {

namespace {

std::string trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

// strip an unquoted trailing comment
std::string strip_comment(const std::string& s) {
    bool in_str = false;
    for (size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '"') in_str = !in_str;
        if (s[i] == '#' && !in_str) return s.substr(0, i);
    }
    return s;
}

}  // namespace

void RunConfig::load_toml(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    parse_toml_text(ss.str(), path);
}

void RunConfig::parse_toml_text(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(strip_comment(line));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key or value");
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
            value = value.substr(1, value.size() - 2);
        kv_[section.empty() ? key : section + "." + key] = value;
    }
}

void RunConfig::apply_override(const std::string& assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw UsageError("override must look like key=value, got '" + assignment + "'");
    std::string value = trim(assignment.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
        value = value.substr(1, value.size() - 2);
    kv_[trim(assignment.substr(0, eq))] = value;
}

std::string RunConfig::get_str(const std::string& key, const std::string& def) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? def : it->second;
}

std::int64_t RunConfig::get_int(const std::string& key, std::int64_t def) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    try {
        size_t used = 0;
        const std::int64_t v = std::stoll(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument(it->second);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "' is not an integer: '" + it->second + "'");
    }
}

double RunConfig::get_float(const std::string& key, double def) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    try {
        size_t used = 0;
        const double v = std::stod(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument(it->second);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "' is not a number: '" + it->second + "'");
    }
}

bool RunConfig::get_bool(const std::string& key, bool def) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    if (it->second == "true") return true;
    if (it->second == "false") return false;
    throw ConfigError("key '" + key + "' is not a bool: '" + it->second + "'");
}

std::string RunConfig::render() const {
    std::string out;
    for (const auto& [k, v] : kv_) out += k + " = " + v + "\n";
    return out;
}

std::string u64_hex(std::uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void Manifest::add_file(const std::string& name, const std::string& path) {
    artifacts[name] = u64_hex(file_fnv1a64(path));
}

std::string Manifest::render() const {
    std::string out;
    out += "command = " + command + "\n";
    out += "seed = " + std::to_string(seed) + "\n";
    out += "[config]\n" + config.render();
    out += "[artifacts]\n";
    for (const auto& [k, v] : artifacts) out += k + " = " + v + "\n";
    return out;
}

void Manifest::save(const std::string& path) const {
    const std::string text = render();
    std::vector<std::uint8_t> bytes(text.begin(), text.end());
    write_file_bytes(path, bytes);
}

}  // namespace s2rd

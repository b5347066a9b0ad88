#ifndef S2RD_CONFIG_HPP
#define S2RD_CONFIG_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "s2rd/common.hpp"

namespace s2rd {

// Flat key/value config. Keys are dotted ("ae.lr"); sources are a TOML file
// ([section] + key = value lines) overlaid by command-line overrides, which
// take precedence. Values keep their literal text and are parsed on access.
class RunConfig {
public:
    RunConfig() = default;

    void load_toml(const std::string& path);
    void parse_toml_text(const std::string& text, const std::string& origin = "<memory>");

    // "key=value" override, applied on top of file values.
    void apply_override(const std::string& assignment);

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    std::string get_str(const std::string& key, const std::string& def) const;
    std::int64_t get_int(const std::string& key, std::int64_t def) const;
    double get_float(const std::string& key, double def) const;
    bool get_bool(const std::string& key, bool def) const;

    // Sorted "key = value" lines; the manifest embeds this block.
    std::string render() const;

    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

// Run manifest: effective config, seed, artifact hashes. Plain UTF-8 text,
// deterministic line order.
struct Manifest {
    std::string command;
    std::uint64_t seed = 0;
    RunConfig config;
    std::map<std::string, std::string> artifacts;  // name -> fnv64 hex or note

    void add_file(const std::string& name, const std::string& path);
    std::string render() const;
    void save(const std::string& path) const;
};

std::string u64_hex(std::uint64_t v);

}  // namespace s2rd

#endif

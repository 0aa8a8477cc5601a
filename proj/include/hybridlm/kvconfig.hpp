#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace hlm::kv {

struct KvError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// flat key=value config with dotted namespaces; '#' starts a comment line
struct KvConfig {
    std::map<std::string, std::string> values;

    static KvConfig parse(const std::string& text);
    static KvConfig load(const std::string& path);
    std::string to_text() const;
    void save(const std::string& path) const;

    bool has(const std::string& key) const { return values.count(key) != 0; }
    std::string get(const std::string& key, const std::string& def = "") const;
    std::string require(const std::string& key) const;
    double get_num(const std::string& key, double def) const;
    size_t get_uint(const std::string& key, size_t def) const;
    void set(const std::string& key, const std::string& value) { values[key] = value; }
    void set_num(const std::string& key, double v);
    void set_uint(const std::string& key, size_t v);

    // keys under "prefix." with the prefix stripped
    KvConfig with_prefix(const std::string& prefix) const;
    // overlay: every key in `overrides` wins
    void merge_over(const KvConfig& overrides);
};

// resolved config plus content hashes of the named input files
void write_manifest(const std::string& path, const KvConfig& resolved,
                    const std::vector<std::string>& input_files);

} // namespace hlm::kv

#include "hybridlm/kvconfig.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "hybridlm/model.hpp"

namespace hlm::kv {

KvConfig KvConfig::parse(const std::string& text) {
    KvConfig cfg;
    std::istringstream is(text);
    std::string line;
    size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        size_t start = line.find_first_not_of(" \t\r");
        if (start == std::string::npos) continue;
        if (line[start] == '#') continue;
        size_t eq = line.find('=', start);
        if (eq == std::string::npos)
            throw KvError("line " + std::to_string(lineno) + ": expected key=value, got: " + line);
        auto trim = [](std::string s) {
            size_t a = s.find_first_not_of(" \t\r");
            size_t b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw KvError("line " + std::to_string(lineno) + ": empty key");
        cfg.values[key] = trim(line.substr(eq + 1));
    }
    return cfg;
}

KvConfig KvConfig::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw KvError("cannot open config: " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return parse(os.str());
}

std::string KvConfig::to_text() const {
    std::ostringstream os;
    for (auto& [k, v] : values) os << k << '=' << v << '\n';
    return os.str();
}

void KvConfig::save(const std::string& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw KvError("cannot open for writing: " + path);
    os << to_text();
}

std::string KvConfig::get(const std::string& key, const std::string& def) const {
    auto it = values.find(key);
    return it == values.end() ? def : it->second;
}

std::string KvConfig::require(const std::string& key) const {
    auto it = values.find(key);
    if (it == values.end()) throw KvError("missing required config key: " + key);
    return it->second;
}

double KvConfig::get_num(const std::string& key, double def) const {
    auto it = values.find(key);
    if (it == values.end()) return def;
    try {
        size_t pos = 0;
        double v = std::stod(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw KvError("config key " + key + " is not a number: " + it->second);
    }
}

size_t KvConfig::get_uint(const std::string& key, size_t def) const {
    auto it = values.find(key);
    if (it == values.end()) return def;
    try {
        size_t pos = 0;
        unsigned long long v = std::stoull(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("trailing");
        return size_t(v);
    } catch (const std::exception&) {
        throw KvError("config key " + key + " is not an unsigned integer: " + it->second);
    }
}

void KvConfig::set_num(const std::string& key, double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    values[key] = buf;
}

void KvConfig::set_uint(const std::string& key, size_t v) {
    values[key] = std::to_string(v);
}

KvConfig KvConfig::with_prefix(const std::string& prefix) const {
    KvConfig out;
    std::string p = prefix + ".";
    for (auto& [k, v] : values)
        if (k.rfind(p, 0) == 0) out.values[k.substr(p.size())] = v;
    return out;
}

void KvConfig::merge_over(const KvConfig& overrides) {
    for (auto& [k, v] : overrides.values) values[k] = v;
}

void write_manifest(const std::string& path, const KvConfig& resolved,
                    const std::vector<std::string>& input_files) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw KvError("cannot open manifest for writing: " + path);
    os << "# resolved configuration\n" << resolved.to_text();
    os << "# input content hashes\n";
    char buf[32];
    for (auto& f : input_files) {
        std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)fnv1a_file(f));
        os << "input." << f << '=' << buf << '\n';
    }
}

} // namespace hlm::kv

#include <cstring>
#include <fstream>

#include "hybridlm/model.hpp"

namespace hlm {

static constexpr char kMagic[8] = {'H', 'L', 'M', 'C', 'K', 'P', 'T', '\x01'};
static constexpr uint32_t kVersion = 1;

static uint64_t fnv1a(const uint8_t* p, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t fnv1a_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open for hashing: " + path);
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 16];
    while (f.read(buf, sizeof(buf)) || f.gcount() > 0)
        h = fnv1a(reinterpret_cast<const uint8_t*>(buf), size_t(f.gcount()), h);
    return h;
}

uint64_t params_hash(const NamedParams& params) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (auto& [name, t] : params) {
        h = fnv1a(reinterpret_cast<const uint8_t*>(name.data()), name.size(), h);
        h = fnv1a(reinterpret_cast<const uint8_t*>(t.data().data()),
                  t.data().size() * sizeof(double), h);
    }
    return h;
}

namespace {

template <class T>
void put(std::ostream& os, T v) {
    // written on little-endian hosts; format is defined little-endian
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw CheckpointError("checkpoint truncated while reading header");
    return v;
}

} // namespace

void save_params(const std::string& path, const std::string& config_text,
                 const NamedParams& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open for writing: " + path);
    os.write(kMagic, 8);
    put<uint32_t>(os, kVersion);
    put<uint32_t>(os, uint32_t(config_text.size()));
    os.write(config_text.data(), std::streamsize(config_text.size()));
    put<uint32_t>(os, uint32_t(params.size()));
    uint64_t offset = 0;
    for (auto& [name, t] : params) {
        put<uint16_t>(os, uint16_t(name.size()));
        os.write(name.data(), std::streamsize(name.size()));
        put<uint8_t>(os, uint8_t(t.ndim()));
        for (size_t d : t.shape()) put<uint64_t>(os, uint64_t(d));
        uint64_t nbytes = uint64_t(t.numel()) * sizeof(double);
        put<uint64_t>(os, offset);
        put<uint64_t>(os, nbytes);
        put<uint64_t>(os, fnv1a(reinterpret_cast<const uint8_t*>(t.data().data()), nbytes));
        offset += nbytes;
    }
    put<uint64_t>(os, offset);  // declared payload length
    for (auto& [name, t] : params)
        os.write(reinterpret_cast<const char*>(t.data().data()),
                 std::streamsize(t.numel() * sizeof(double)));
    if (!os) throw CheckpointError("write failed: " + path);
}

LoadedParams load_params(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint: " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw CheckpointError("bad magic: not a checkpoint file: " + path);
    uint32_t version = get<uint32_t>(is);
    if (version != kVersion)
        throw CheckpointError("checkpoint version mismatch: file has " +
                              std::to_string(version) + ", expected " +
                              std::to_string(kVersion));
    LoadedParams lp;
    uint32_t clen = get<uint32_t>(is);
    lp.config_text.resize(clen);
    if (!is.read(lp.config_text.data(), clen))
        throw CheckpointError("checkpoint truncated in config block");
    uint32_t n = get<uint32_t>(is);
    struct Entry {
        std::string name;
        std::vector<size_t> shape;
        uint64_t offset, nbytes, checksum;
    };
    std::vector<Entry> entries(n);
    for (auto& e : entries) {
        uint16_t nl = get<uint16_t>(is);
        e.name.resize(nl);
        if (!is.read(e.name.data(), nl)) throw CheckpointError("checkpoint truncated in manifest");
        uint8_t nd = get<uint8_t>(is);
        e.shape.resize(nd);
        for (auto& d : e.shape) d = size_t(get<uint64_t>(is));
        e.offset = get<uint64_t>(is);
        e.nbytes = get<uint64_t>(is);
        e.checksum = get<uint64_t>(is);
    }
    uint64_t payload_len = get<uint64_t>(is);
    std::vector<char> payload(payload_len);
    if (!is.read(payload.data(), std::streamsize(payload_len)))
        throw CheckpointError("checkpoint payload truncated: declared " +
                              std::to_string(payload_len) + " bytes");
    for (auto& e : entries) {
        size_t count = 1;
        for (size_t d : e.shape) count *= d;
        if (e.nbytes != count * sizeof(double) || e.offset + e.nbytes > payload_len)
            throw CheckpointError("manifest shape/offset inconsistent for tensor " + e.name);
        uint64_t cs = fnv1a(reinterpret_cast<const uint8_t*>(payload.data() + e.offset), e.nbytes);
        if (cs != e.checksum)
            throw CheckpointError("checksum mismatch for tensor " + e.name);
        std::vector<double> data(count);
        std::memcpy(data.data(), payload.data() + e.offset, e.nbytes);
        lp.params.emplace_back(e.name, Tensor::make(e.shape, std::move(data)));
    }
    return lp;
}

void save_checkpoint(const HybridModel& m, const std::string& path) {
    save_params(path, m.cfg.to_kv_text(), m.named_params());
}

HybridModel load_checkpoint(const std::string& path) {
    LoadedParams lp = load_params(path);
    HybridConfig cfg = HybridConfig::from_kv_text(lp.config_text);
    HybridModel m = build_model(cfg, 0);
    NamedParams dst = m.named_params();
    if (dst.size() != lp.params.size())
        throw CheckpointError("checkpoint tensor count " + std::to_string(lp.params.size()) +
                              " does not match config-derived count " +
                              std::to_string(dst.size()));
    for (size_t i = 0; i < dst.size(); ++i) {
        auto& [dname, dt] = dst[i];
        auto& [sname, st] = lp.params[i];
        if (dname != sname)
            throw CheckpointError("checkpoint tensor name mismatch: " + sname + " vs " + dname);
        if (st.shape() != dt.shape())
            throw CheckpointError("checkpoint shape mismatch for " + sname + ": file " +
                                  shape_str(st.shape()) + " vs config " + shape_str(dt.shape()));
        const_cast<Tensor&>(dt).mutable_data() = st.data();
    }
    return m;
}

} // namespace hlm

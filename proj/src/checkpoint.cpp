#include "s2rd/checkpoint.hpp"

#include <cstdio>
#include <cstring>

namespace s2rd {

namespace {

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const std::uint8_t* p;
    size_t left;

    void need(size_t n) const {
        if (left < n) throw LoadError("checkpoint truncated");
    }
    std::uint8_t u8() {
        need(1);
        --left;
        return *p++;
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(p[0] | (p[1] << 8));
        p += 2;
        left -= 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
        p += 4;
        left -= 4;
        return v;
    }
};

}  // namespace

void Checkpoint::put(const std::string& name, const Tensor& t) {
    if (name.empty() || name.size() > 0xffff) throw UsageError("checkpoint tensor name length");
    entries_[name] = Entry{t.shape(), t.data()};
}

Tensor Checkpoint::get(const std::string& name, bool requires_grad) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw LoadError("checkpoint missing tensor '" + name + "'");
    return Tensor::from_data(it->second.shape, it->second.data, requires_grad);
}

std::vector<std::string> Checkpoint::names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [name, e] : entries_)
        if (name.rfind(prefix, 0) == 0) out.push_back(name);
    return out;
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
    std::vector<std::uint8_t> out;
    out.push_back('S');
    out.push_back('2');
    out.push_back('R');
    out.push_back('D');
    put_u32(out, kFormatVersion);
    put_u32(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& [name, e] : entries_) {
        put_u16(out, static_cast<std::uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(static_cast<std::uint8_t>(e.shape.size()));
        for (int d : e.shape) put_u32(out, static_cast<std::uint32_t>(d));
        const size_t off = out.size();
        out.resize(off + e.data.size() * 4);
        // f32 little-endian payload; memcpy is fine on LE hosts and the
        // byte-identical round-trip test pins the layout.
        std::memcpy(out.data() + off, e.data.data(), e.data.size() * 4);
    }
    return out;
}

Checkpoint Checkpoint::deserialize(const std::vector<std::uint8_t>& bytes) {
    Reader r{bytes.data(), bytes.size()};
    r.need(4);
    if (std::memcmp(r.p, "S2RD", 4) != 0) throw LoadError("bad checkpoint magic");
    r.p += 4;
    r.left -= 4;
    const std::uint32_t version = r.u32();
    if (version != kFormatVersion)
        throw LoadError("unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t count = r.u32();
    Checkpoint ck;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16();
        r.need(name_len);
        std::string name(reinterpret_cast<const char*>(r.p), name_len);
        r.p += name_len;
        r.left -= name_len;
        const int rank = r.u8();
        Shape shape(rank);
        std::int64_t numel = 1;
        for (int d = 0; d < rank; ++d) {
            shape[d] = static_cast<int>(r.u32());
            numel *= shape[d];
        }
        r.need(static_cast<size_t>(numel) * 4);
        std::vector<float> data(numel);
        std::memcpy(data.data(), r.p, static_cast<size_t>(numel) * 4);
        r.p += numel * 4;
        r.left -= static_cast<size_t>(numel) * 4;
        ck.entries_[name] = Entry{std::move(shape), std::move(data)};
    }
    return ck;
}

void Checkpoint::save(const std::string& path) const { write_file_bytes(path, serialize()); }

Checkpoint Checkpoint::load(const std::string& path) {
    return deserialize(read_file_bytes(path));
}

std::uint64_t fnv1a64(const std::uint8_t* data, size_t n) {
    std::uint64_t h = 14695981039346656037ull;
    for (size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t file_fnv1a64(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    return fnv1a64(bytes.data(), bytes.size());
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw LoadError("cannot open '" + path + "'");
    std::fseek(f, 0, SEEK_END);
    const long n = std::ftell(f);
    std::fseek(f, 0, SEEK_SET);
    std::vector<std::uint8_t> bytes(n > 0 ? static_cast<size_t>(n) : 0);
    if (n > 0 && std::fread(bytes.data(), 1, bytes.size(), f) != bytes.size()) {
        std::fclose(f);
        throw LoadError("short read on '" + path + "'");
    }
    std::fclose(f);
    return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw LoadError("cannot write '" + path + "'");
    if (!bytes.empty() && std::fwrite(bytes.data(), 1, bytes.size(), f) != bytes.size()) {
        std::fclose(f);
        throw LoadError("short write on '" + path + "'");
    }
    std::fclose(f);
}

}  // namespace s2rd

#ifndef S2RD_CHECKPOINT_HPP
#define S2RD_CHECKPOINT_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "s2rd/tensor.hpp"

namespace s2rd {

// Shared checkpoint container. Layout (all little-endian):
//   magic "S2RD" | format version u32 | tensor count u32
//   per tensor: name length u16 | UTF-8 name | rank u8 | dims u32 each | f32 payload
// Tensors are written in name order, so identical contents give identical bytes.
class Checkpoint {
public:
    static constexpr std::uint32_t kFormatVersion = 1;

    void put(const std::string& name, const Tensor& t);
    bool has(const std::string& name) const { return entries_.count(name) != 0; }
    Tensor get(const std::string& name, bool requires_grad = false) const;

    // All names under "prefix." in lexicographic order.
    std::vector<std::string> names_with_prefix(const std::string& prefix) const;
    size_t size() const { return entries_.size(); }

    std::vector<std::uint8_t> serialize() const;
    static Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

private:
    struct Entry {
        Shape shape;
        std::vector<float> data;
    };
    std::map<std::string, Entry> entries_;
};

std::uint64_t fnv1a64(const std::uint8_t* data, size_t n);
std::uint64_t file_fnv1a64(const std::string& path);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace s2rd

#endif

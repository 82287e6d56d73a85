#pragma once

// Named-tensor checkpoint container.
//
// Byte layout, all integers u32 little-endian:
//   "DRAD" | version | entry count |
//   per entry: name length | UTF-8 name | dtype (0 = f32, 1 = f64) | rank |
//              extents... | little-endian row-major element data

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stylebend/tensor.hpp"

namespace stylebend {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint32_t { F32 = 0, F64 = 1 };

template <typename T>
constexpr DType dtype_of() {
    return sizeof(T) == 4 ? DType::F32 : DType::F64;
}

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
    std::string name;
    DType dtype = DType::F32;
    Shape shape;
    std::vector<double> values;  // exact for both dtypes

    bool operator==(const CheckpointEntry&) const = default;
};

class Checkpoint {
public:
    template <typename T>
    void put(const std::string& name, const Tensor<T>& t);

    bool contains(const std::string& name) const;
    const CheckpointEntry& entry(const std::string& name) const;

    template <typename T>
    Tensor<T> get(const std::string& name) const;

    const std::vector<CheckpointEntry>& entries() const { return entries_; }

    std::string encode() const;
    static Checkpoint decode(const std::string& bytes);

    void save(const std::filesystem::path& path) const;
    static Checkpoint load(const std::filesystem::path& path);

    bool operator==(const Checkpoint&) const = default;

private:
    std::vector<CheckpointEntry> entries_;
};

}  // namespace stylebend

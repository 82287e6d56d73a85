#include "stylebend/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace stylebend {

namespace {

constexpr char kMagic[4] = {'D', 'R', 'A', 'D'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }

    std::string take(std::size_t n) {
        need(n);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw CheckpointError("checkpoint truncated");
    }
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

template <typename T>
void Checkpoint::put(const std::string& name, const Tensor<T>& t) {
    CheckpointEntry e{name, dtype_of<T>(), t.shape(), std::vector<double>(t.values().begin(), t.values().end())};
    for (auto& existing : entries_) {
        if (existing.name == name) {
            existing = std::move(e);
            return;
        }
    }
    entries_.push_back(std::move(e));
}

bool Checkpoint::contains(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return true;
    return false;
}

const CheckpointEntry& Checkpoint::entry(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return e;
    throw CheckpointError("checkpoint has no entry '" + name + "'");
}

template <typename T>
Tensor<T> Checkpoint::get(const std::string& name) const {
    const auto& e = entry(name);
    return Tensor<T>(e.shape, std::vector<T>(e.values.begin(), e.values.end()));
}

std::string Checkpoint::encode() const {
    std::string out(kMagic, 4);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
        put_u32(out, static_cast<std::uint32_t>(e.name.size()));
        out += e.name;
        put_u32(out, static_cast<std::uint32_t>(e.dtype));
        put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
        for (auto ext : e.shape) put_u32(out, static_cast<std::uint32_t>(ext));
        for (double v : e.values) {
            if (e.dtype == DType::F32) {
                put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
            } else {
                put_u64(out, std::bit_cast<std::uint64_t>(v));
            }
        }
    }
    return out;
}

Checkpoint Checkpoint::decode(const std::string& bytes) {
    Reader r(bytes);
    if (r.take(4) != std::string(kMagic, 4)) throw CheckpointError("not a checkpoint: bad magic");
    const auto version = r.u32();
    if (version != kCheckpointVersion) {
        throw CheckpointError("checkpoint version mismatch: file has " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
    }
    Checkpoint ck;
    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        e.name = r.take(r.u32());
        const auto code = r.u32();
        if (code > 1) throw CheckpointError("unknown dtype code " + std::to_string(code));
        e.dtype = static_cast<DType>(code);
        const auto rank = r.u32();
        for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(r.u32());
        const auto n = shape_numel(e.shape);
        e.values.resize(n);
        for (std::size_t k = 0; k < n; ++k) {
            e.values[k] = e.dtype == DType::F32 ? static_cast<double>(std::bit_cast<float>(r.u32()))
                                                : std::bit_cast<double>(r.u64());
        }
        ck.entries_.push_back(std::move(e));
    }
    if (!r.done()) throw CheckpointError("trailing bytes after checkpoint entries");
    return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot write checkpoint " + path.string());
    const auto bytes = encode();
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return decode(ss.str());
}

template void Checkpoint::put<float>(const std::string&, const Tensor<float>&);
template void Checkpoint::put<double>(const std::string&, const Tensor<double>&);
template Tensor<float> Checkpoint::get<float>(const std::string&) const;
template Tensor<double> Checkpoint::get<double>(const std::string&) const;

}  // namespace stylebend

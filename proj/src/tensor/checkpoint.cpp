#include "dbench/checkpoint.h"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dbench {

namespace {

constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::string& out, T v) {
    static_assert(std::is_unsigned_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
   public:
    explicit Reader(const std::string& b) : b_(b) {}
    template <typename T>
    T get() {
        need(sizeof(T));
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= T(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
        pos_ += sizeof(T);
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == b_.size(); }

   private:
    void need(std::size_t n) const {
        if (pos_ + n > b_.size()) throw SpecError("CDL1: truncated data");
    }
    const std::string& b_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string encode_cdl1(const std::vector<NamedTensor>& tensors) {
    std::string out = "CDL1";
    put_le<std::uint32_t>(out, kVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        if (name.size() > 0xffff) throw SpecError("CDL1: tensor name too long");
        put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out += name;
        put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
        for (auto d : t.shape()) put_le<std::uint64_t>(out, d);
        for (float f : t.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
    }
    return out;
}

std::vector<NamedTensor> decode_cdl1(const std::string& bytes) {
    Reader r(bytes);
    if (r.bytes(4) != "CDL1") throw SpecError("CDL1: bad magic");
    const auto version = r.get<std::uint32_t>();
    if (version != kVersion) throw SpecError("CDL1: unsupported version " + std::to_string(version));
    const auto count = r.get<std::uint32_t>();
    std::vector<NamedTensor> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = r.get<std::uint16_t>();
        std::string name = r.bytes(len);
        const auto rank = r.get<std::uint8_t>();
        Shape shape(rank);
        for (auto& d : shape) d = r.get<std::uint64_t>();
        std::vector<float> data(shape_numel(shape));
        for (auto& f : data) f = std::bit_cast<float>(r.get<std::uint32_t>());
        out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
    }
    if (!r.done()) throw SpecError("CDL1: trailing bytes");
    return out;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("missing file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
    write_file_atomic(path, encode_cdl1(tensors));
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) { return decode_cdl1(read_file(path)); }

const Tensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
    for (const auto& t : tensors)
        if (t.name == name) return t.tensor;
    throw MissingArtifactError("checkpoint has no tensor named '" + name + "'");
}

}  // namespace dbench

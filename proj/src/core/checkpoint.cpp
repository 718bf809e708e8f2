#include "ba2m/core/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace ba2m {

namespace {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    template <typename U>
    U get(const char* what) {
        need(sizeof(U), what);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
        pos_ += sizeof(U);
        return v;
    }

    std::string get_string(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    std::size_t offset() const { return pos_; }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n, const char* what) {
        if (bytes_.size() - pos_ < n)
            throw FormatError(std::string("checkpoint truncated reading ") + what + " at byte offset " +
                              std::to_string(pos_));
    }

    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

const Shape& NamedTensor::shape() const {
    return std::visit([](const auto& t) -> const Shape& { return t.shape(); }, tensor);
}

std::vector<double> NamedTensor::as_double() const {
    return std::visit([](const auto& t) { return std::vector<double>(t.storage().begin(), t.storage().end()); },
                      tensor);
}

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& entries) {
    std::vector<std::uint8_t> out{'B', 'A', '2', 'M'};
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
    for (const NamedTensor& e : entries) {
        if (e.name.size() > std::numeric_limits<std::uint16_t>::max())
            throw InputError("checkpoint entry name too long: " + e.name.substr(0, 64));
        put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
        out.insert(out.end(), e.name.begin(), e.name.end());
        const Shape& s = e.shape();
        const bool f64 = std::holds_alternative<Tensor<double>>(e.tensor);
        out.push_back(f64 ? 1 : 0);
        out.push_back(static_cast<std::uint8_t>(s.rank()));
        for (std::size_t d : s.dims()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        if (f64) {
            for (double v : std::get<Tensor<double>>(e.tensor).storage()) put_le(out, std::bit_cast<std::uint64_t>(v));
        } else {
            for (float v : std::get<Tensor<float>>(e.tensor).storage()) put_le(out, std::bit_cast<std::uint32_t>(v));
        }
    }
    return out;
}

std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    if (r.get_string(4, "magic") != "BA2M") throw FormatError("checkpoint: bad magic at byte offset 0");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    const auto count = r.get<std::uint32_t>("count");
    std::vector<NamedTensor> entries;
    entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.get<std::uint16_t>("name length");
        std::string name = r.get_string(name_len, "name");
        const std::size_t dtype_at = r.offset();
        const auto dtype = r.get<std::uint8_t>("dtype");
        if (dtype > 1)
            throw FormatError("checkpoint: unknown dtype " + std::to_string(dtype) + " at byte offset " +
                              std::to_string(dtype_at));
        const auto rank = r.get<std::uint8_t>("rank");
        std::vector<std::size_t> dims(rank);
        for (auto& d : dims) d = r.get<std::uint32_t>("dims");
        Shape shape(dims);
        if (dtype == 1) {
            std::vector<double> v(shape.numel());
            for (auto& x : v) x = std::bit_cast<double>(r.get<std::uint64_t>("values"));
            entries.push_back({std::move(name), Tensor<double>(shape, std::move(v))});
        } else {
            std::vector<float> v(shape.numel());
            for (auto& x : v) x = std::bit_cast<float>(r.get<std::uint32_t>("values"));
            entries.push_back({std::move(name), Tensor<float>(shape, std::move(v))});
        }
    }
    if (!r.done())
        throw FormatError("checkpoint: trailing bytes after last entry at byte offset " + std::to_string(r.offset()));
    return entries;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + path.string());
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries) {
    write_file_bytes(path, encode_checkpoint(entries));
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_file_bytes(path));
}

}  // namespace ba2m

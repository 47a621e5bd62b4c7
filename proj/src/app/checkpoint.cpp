#include "app/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "common/error.hpp"

namespace stldm {

namespace {

constexpr char kMagic[] = "STLDM1";
constexpr std::size_t kMagicSize = 6;

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    Reader(const std::string& bytes, const std::string& origin) : bytes_(bytes), origin_(origin) {}

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }
    std::string take(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) {
        if (bytes_.size() - pos_ < n) fail(ErrorKind::Data, origin_ + ": truncated checkpoint");
    }
    const std::string& bytes_;
    const std::string& origin_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const TensorEntries& entries) {
    std::string out(kMagic, kMagicSize);
    put_u64(out, entries.size());
    for (const auto& [name, t] : entries) {
        put_u64(out, name.size());
        out += name;
        put_u64(out, t.rank());
        for (auto d : t.shape()) put_u64(out, d);
        for (double v : t.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

TensorEntries decode_checkpoint(const std::string& bytes, const std::string& origin) {
    if (bytes.size() < kMagicSize || bytes.compare(0, kMagicSize, kMagic) != 0) {
        fail(ErrorKind::Data, origin + ": not a checkpoint (bad magic)");
    }
    Reader in(bytes, origin);
    in.take(kMagicSize);
    const std::uint64_t count = in.u64();
    TensorEntries entries;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t len = in.u64();
        if (len > bytes.size()) fail(ErrorKind::Data, origin + ": corrupt entry name");
        std::string name = in.take(len);
        const std::uint64_t rank = in.u64();
        if (rank == 0 || rank > 8) fail(ErrorKind::Data, origin + ": corrupt rank for " + name);
        Shape shape;
        std::size_t numel = 1;
        for (std::uint64_t r = 0; r < rank; ++r) {
            const std::uint64_t d = in.u64();
            if (d == 0 || d > bytes.size()) fail(ErrorKind::Data, origin + ": corrupt shape for " + name);
            shape.push_back(d);
            numel *= d;
        }
        if (numel > bytes.size() / 8) fail(ErrorKind::Data, origin + ": truncated checkpoint");
        std::vector<double> data(numel);
        for (auto& v : data) v = std::bit_cast<double>(in.u64());
        entries.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    if (!in.done()) fail(ErrorKind::Data, origin + ": trailing bytes after checkpoint");
    return entries;
}

Tensor text_tensor(const std::string& text) {
    std::vector<double> data;
    for (unsigned char c : text) data.push_back(static_cast<double>(c));
    if (data.empty()) data.push_back(0.0);
    const std::size_t n = data.size();
    return Tensor({n}, std::move(data));
}

std::string tensor_text(const Tensor& t) {
    std::string s;
    for (double v : t.values())
        if (v != 0.0) s.push_back(static_cast<char>(static_cast<unsigned char>(v)));
    return s;
}

}  // namespace stldm

#include "moee/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace moee {

namespace {

constexpr char kMagic[8] = {'M', 'O', 'E', 'E', 'C', 'K', 'P', 'T'};

void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& buf, double d) {
    uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64(buf, bits);
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;
    uint8_t u8() {
        check(pos + 1 <= buf.size(), "checkpoint: truncated file");
        return static_cast<uint8_t>(buf[pos++]);
    }
    uint32_t u32() {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(u8()) << (8 * i);
        return v;
    }
    uint64_t u64() {
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(u8()) << (8 * i);
        return v;
    }
    double f64() {
        const uint64_t bits = u64();
        double d;
        std::memcpy(&d, &bits, 8);
        return d;
    }
    std::string str(size_t n) {
        check(pos + n <= buf.size(), "checkpoint: truncated name");
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

void Checkpoint::put(const std::string& name, const Tensor& t) {
    entries_[name] = Entry{t.shape(), t.values()};
}

Tensor Checkpoint::get(const std::string& name) const {
    auto it = entries_.find(name);
    check(it != entries_.end(), "checkpoint: no tensor named '" + name + "'");
    return Tensor::from_data(it->second.shape, it->second.data);
}

std::vector<std::string> Checkpoint::names() const {
    std::vector<std::string> r;
    r.reserve(entries_.size());
    for (const auto& [k, v] : entries_) r.push_back(k);
    return r;
}

void Checkpoint::save(const std::string& path) const {
    std::string buf;
    buf.append(kMagic, 8);
    put_u32(buf, kVersion);
    buf.push_back(1);  // little-endian payload
    put_u32(buf, static_cast<uint32_t>(entries_.size()));
    for (const auto& [name, e] : entries_) {
        put_u32(buf, static_cast<uint32_t>(name.size()));
        buf.append(name);
        put_u32(buf, static_cast<uint32_t>(e.shape.size()));
        for (int d : e.shape) put_u64(buf, static_cast<uint64_t>(d));
        buf.push_back(1);  // dtype float64
        for (double v : e.data) put_f64(buf, v);
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    check(os.good(), "checkpoint: cannot open " + path + " for writing");
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    check(os.good(), "checkpoint: write failed for " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(is.good(), "checkpoint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    Reader r{buf};
    check(buf.size() >= 8 && std::memcmp(buf.data(), kMagic, 8) == 0,
          "checkpoint: bad magic in " + path);
    r.pos = 8;
    const uint32_t version = r.u32();
    check(version == kVersion, "checkpoint: unsupported version " + std::to_string(version));
    const uint8_t endian = r.u8();
    check(endian == 1, "checkpoint: unsupported endianness tag");
    const uint32_t count = r.u32();
    Checkpoint ck;
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = r.u32();
        const std::string name = r.str(name_len);
        const uint32_t rank = r.u32();
        Shape shape(rank);
        for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(r.u64());
        const uint8_t dtype = r.u8();
        check(dtype == 1, "checkpoint: unsupported dtype tag");
        Entry e;
        e.shape = shape;
        e.data.resize(static_cast<size_t>(numel_of(shape)));
        for (auto& v : e.data) v = r.f64();
        ck.entries_[name] = std::move(e);
    }
    return ck;
}

}  // namespace moee

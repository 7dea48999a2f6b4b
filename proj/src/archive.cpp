#include "soupforge/archive.hpp"

#include <cstring>
#include <fstream>

namespace soupforge {

namespace {

constexpr char kMagic[8] = {'A', 'E', 'S', 'A', 'D', 'V', '1', '\0'};

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v), (unsigned char)(v >> 8), (unsigned char)(v >> 16),
                          (unsigned char)(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    put_u32(os, std::uint32_t(v));
    put_u32(os, std::uint32_t(v >> 32));
}

void put_str(std::ostream& os, const std::string& s) {
    put_u32(os, std::uint32_t(s.size()));
    os.write(s.data(), std::streamsize(s.size()));
}

void put_f32_array(std::ostream& os, const float* data, std::size_t n) {
    std::vector<unsigned char> buf(n * 4);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, data + i, 4);
        buf[i * 4] = (unsigned char)(bits);
        buf[i * 4 + 1] = (unsigned char)(bits >> 8);
        buf[i * 4 + 2] = (unsigned char)(bits >> 16);
        buf[i * 4 + 3] = (unsigned char)(bits >> 24);
    }
    os.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
}

struct Reader {
    std::ifstream in;
    std::string path;
    std::uint64_t offset = 0;

    explicit Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
        if (!in) throw IoError("archive: cannot open " + p);
    }

    void raw(void* dst, std::size_t n) {
        in.read(static_cast<char*>(dst), std::streamsize(n));
        if (std::size_t(in.gcount()) != n)
            throw IoError("archive: truncated file " + path + " at byte " + std::to_string(offset));
        offset += n;
    }

    std::uint32_t u32() {
        unsigned char b[4];
        raw(b, 4);
        return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
               (std::uint32_t(b[3]) << 24);
    }

    std::uint64_t u64() {
        std::uint64_t lo = u32();
        return lo | (std::uint64_t(u32()) << 32);
    }

    std::string str() {
        std::uint32_t n = u32();
        if (n > (1u << 20)) throw IoError("archive: unreasonable string length in " + path);
        std::string s(n, '\0');
        if (n) raw(s.data(), n);
        return s;
    }

    void f32_array(float* dst, std::size_t n) {
        std::vector<unsigned char> buf(n * 4);
        raw(buf.data(), buf.size());
        for (std::size_t i = 0; i < n; ++i) {
            std::uint32_t bits = std::uint32_t(buf[i * 4]) | (std::uint32_t(buf[i * 4 + 1]) << 8) |
                                 (std::uint32_t(buf[i * 4 + 2]) << 16) | (std::uint32_t(buf[i * 4 + 3]) << 24);
            std::memcpy(dst + i, &bits, 4);
        }
    }
};

}  // namespace

void write_advbatch(const std::string& path, const AdvBatch& batch) {
    if (batch.count() == 0) throw ShapeError("archive: refusing to write an empty batch");
    if (batch.clean.size() != batch.adv.size() || batch.labels.size() != batch.adv.size() ||
        batch.final_loss.size() != batch.adv.size())
        throw ShapeError("archive: inconsistent member counts");
    const auto& shape = batch.adv[0].shape;
    if (shape.size() != 3) throw ShapeError("archive: images must be (c,h,w)");
    for (int i = 0; i < batch.count(); ++i) {
        check_same_shape(batch.adv[std::size_t(i)], batch.adv[0], "archive");
        check_same_shape(batch.clean[std::size_t(i)], batch.adv[0], "archive");
    }
    if (batch.session.surrogate_id.find_first_of(" \t\n") != std::string::npos)
        throw IoError("archive: surrogate id must not contain whitespace");

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("archive: cannot write " + path);
    os.write(kMagic, 8);
    put_u32(os, 1);  // format version
    put_u32(os, std::uint32_t(batch.count()));
    put_u32(os, std::uint32_t(shape[0]));
    put_u32(os, std::uint32_t(shape[1]));
    put_u32(os, std::uint32_t(shape[2]));
    put_u64(os, batch.config_hash);
    put_u64(os, batch.originals_hash());
    put_str(os, batch.session.canonical_text());
    put_str(os, batch.session.attack.label);
    put_str(os, batch.provenance);
    for (int lbl : batch.labels) put_u32(os, std::uint32_t(lbl));
    put_f32_array(os, batch.final_loss.data(), batch.final_loss.size());
    for (const TensorF& t : batch.clean) put_f32_array(os, t.data.data(), t.data.size());
    for (const TensorF& t : batch.adv) put_f32_array(os, t.data.data(), t.data.size());
    if (!os) throw IoError("archive: write failed for " + path);
}

AdvBatch read_advbatch(const std::string& path) {
    Reader r(path);
    char magic[8];
    r.raw(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0) throw IoError("archive: bad magic in " + path);
    std::uint32_t version = r.u32();
    if (version != 1) throw IoError("archive: unsupported version " + std::to_string(version));
    std::uint32_t count = r.u32();
    std::uint32_t c = r.u32(), h = r.u32(), w = r.u32();
    if (count == 0 || count > (1u << 20)) throw IoError("archive: unreasonable image count in " + path);
    if (c == 0 || c > 4096 || h == 0 || h > 4096 || w == 0 || w > 4096)
        throw IoError("archive: unreasonable image shape in " + path);
    AdvBatch b;
    b.config_hash = r.u64();
    std::uint64_t stored_originals = r.u64();
    b.session = parse_session_text(r.str());
    b.session.attack.label = r.str();
    b.provenance = r.str();
    b.labels.resize(count);
    for (auto& lbl : b.labels) lbl = int(r.u32());
    b.final_loss.resize(count);
    r.f32_array(b.final_loss.data(), b.final_loss.size());
    std::vector<int> shape = {int(c), int(h), int(w)};
    b.clean.reserve(count);
    b.adv.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        TensorF t(shape);
        r.f32_array(t.data.data(), t.data.size());
        b.clean.push_back(std::move(t));
    }
    for (std::uint32_t i = 0; i < count; ++i) {
        TensorF t(shape);
        r.f32_array(t.data.data(), t.data.size());
        b.adv.push_back(std::move(t));
    }
    char extra;
    if (r.in.read(&extra, 1)) throw IoError("archive: trailing bytes in " + path);
    if (b.originals_hash() != stored_originals)
        throw IoError("archive: originals hash mismatch in " + path);
    return b;
}

}  // namespace soupforge

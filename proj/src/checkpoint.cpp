#include <cstring>
#include <fstream>

#include "soupforge/model.hpp"

namespace soupforge {

namespace {

constexpr char kMagic[8] = {'A', 'E', 'S', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v), (unsigned char)(v >> 8), (unsigned char)(v >> 16),
                          (unsigned char)(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    put_u32(os, std::uint32_t(v));
    put_u32(os, std::uint32_t(v >> 32));
}

void put_i32(std::ostream& os, std::int32_t v) { put_u32(os, std::uint32_t(v)); }

void put_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

void put_str(std::ostream& os, const std::string& s) {
    put_u32(os, std::uint32_t(s.size()));
    os.write(s.data(), std::streamsize(s.size()));
}

struct Reader {
    std::ifstream in;
    std::string path;
    std::uint64_t offset = 0;

    explicit Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
        if (!in) throw IoError("checkpoint: cannot open " + p);
    }

    void raw(void* dst, std::size_t n) {
        in.read(static_cast<char*>(dst), std::streamsize(n));
        if (std::size_t(in.gcount()) != n)
            throw IoError("checkpoint: truncated file " + path + " at byte " + std::to_string(offset));
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

    std::int32_t i32() { return std::int32_t(u32()); }

    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    std::string str() {
        std::uint32_t n = u32();
        if (n > (1u << 20)) throw IoError("checkpoint: unreasonable string length in " + path);
        std::string s(n, '\0');
        if (n) raw(s.data(), n);
        return s;
    }
};

}  // namespace

void save_checkpoint(const ModelF& m, const std::string& path) {
    m.arch.validate();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("checkpoint: cannot write " + path);
    os.write(kMagic, 8);
    put_u32(os, 1);  // format version
    put_str(os, m.arch.name);
    put_i32(os, m.arch.in_channels);
    put_i32(os, m.arch.in_h);
    put_i32(os, m.arch.in_w);
    put_i32(os, m.arch.classes);
    put_u32(os, std::uint32_t(m.arch.layers.size()));
    for (const auto& l : m.arch.layers) {
        os.put(char(l.kind));
        put_i32(os, l.a);
        put_i32(os, l.b);
    }
    put_i32(os, m.arch.feature_tap);
    put_str(os, m.id);
    put_str(os, m.dataset_id);
    put_u64(os, m.train_seed);
    put_f32(os, m.clean_accuracy);
    put_u32(os, std::uint32_t(m.params.size()));
    for (const auto& [name, t] : m.params) {
        put_str(os, name);
        put_u32(os, std::uint32_t(t.shape.size()));
        for (int d : t.shape) put_i32(os, d);
        for (float v : t.data) put_f32(os, v);
    }
    if (!os) throw IoError("checkpoint: write failed for " + path);
}

ModelF load_checkpoint(const std::string& path) {
    Reader r(path);
    char magic[8];
    r.raw(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0) throw IoError("checkpoint: bad magic in " + path);
    std::uint32_t version = r.u32();
    if (version != 1) throw IoError("checkpoint: unsupported version " + std::to_string(version));
    ModelF m;
    m.arch.name = r.str();
    m.arch.in_channels = r.i32();
    m.arch.in_h = r.i32();
    m.arch.in_w = r.i32();
    m.arch.classes = r.i32();
    std::uint32_t n_layers = r.u32();
    if (n_layers > 1024) throw IoError("checkpoint: unreasonable layer count in " + path);
    for (std::uint32_t i = 0; i < n_layers; ++i) {
        LayerSpec l;
        char kind;
        r.raw(&kind, 1);
        if (kind < 0 || kind > 3) throw IoError("checkpoint: unknown layer kind in " + path);
        l.kind = LayerSpec::Kind(kind);
        l.a = r.i32();
        l.b = r.i32();
        m.arch.layers.push_back(l);
    }
    m.arch.feature_tap = r.i32();
    m.id = r.str();
    m.dataset_id = r.str();
    m.train_seed = r.u64();
    m.clean_accuracy = r.f32();
    m.arch.validate();
    std::uint32_t n_params = r.u32();
    if (n_params > 4096) throw IoError("checkpoint: unreasonable parameter count in " + path);
    for (std::uint32_t i = 0; i < n_params; ++i) {
        std::string name = r.str();
        std::uint32_t ndim = r.u32();
        if (ndim > 8) throw IoError("checkpoint: unreasonable rank in " + path);
        std::vector<int> shape;
        for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(r.i32());
        Tensor<float> t(shape);
        for (auto& v : t.data) v = r.f32();
        m.params.emplace_back(std::move(name), std::move(t));
    }
    return m;
}

}  // namespace soupforge

#include "soupforge/dataset.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

#include "soupforge/rng.hpp"

namespace soupforge {

namespace {

double bump(double y, double x, double cy, double cx, double sigma) {
    double dy = y - cy, dx = x - cx;
    return std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
}

}  // namespace

ImageBatch synth_dataset(const SynthSpec& spec, std::uint64_t seed) {
    if (spec.classes < 2 || spec.channels <= 0 || spec.height <= 0 || spec.width <= 0 || spec.count <= 0 ||
        spec.modes < 1)
        throw ConfigError("synth_dataset: bad spec");
    const int c = spec.channels, h = spec.height, w = spec.width;
    const double pi = 3.14159265358979323846;
    const std::size_t pixels = std::size_t(c) * h * w;

    // Every class owns a bump constellation on the ring; this coarse geometry
    // is the robust backbone of the class signal.
    const int slots = spec.classes;
    std::vector<TensorF> slot_bumps;
    slot_bumps.reserve(std::size_t(slots));
    for (int s = 0; s < slots; ++s) {
        double angle = 2.0 * pi * s / slots;
        double ring = 0.30 * std::min(h, w);
        double cy1 = h / 2.0 + ring * std::sin(angle);
        double cx1 = w / 2.0 + ring * std::cos(angle);
        double cy2 = h / 2.0 - 0.55 * ring * std::sin(angle + 0.9);
        double cx2 = w / 2.0 - 0.55 * ring * std::cos(angle + 0.9);
        double sigma = 0.13 * std::min(h, w);
        TensorF p({c, h, w});
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double v = 0.85 * bump(y, x, cy1, cx1, sigma) + 0.50 * bump(y, x, cy2, cx2, sigma * 1.4);
                    p.data[(std::size_t(ch) * h + y) * w + x] = float(v);
                }
        slot_bumps.push_back(std::move(p));
    }

    // One fixed texture per (class, mode); secondary evidence on top of the
    // bumps. Amplitudes well below the bump scale leave the coarse geometry
    // in charge; amplitudes approaching it make texture the dominant channel.
    const double tex_amp = spec.texture;
    std::vector<TensorF> textures;
    textures.reserve(std::size_t(spec.classes) * std::size_t(spec.modes));
    for (int cls = 0; cls < spec.classes; ++cls)
        for (int mode = 0; mode < spec.modes; ++mode) {
            Rng texture_rng(fork_seed(fork_seed(seed, 0xc1a550), std::uint64_t(cls) * std::uint64_t(spec.modes) +
                                                                     std::uint64_t(mode)));
            TensorF t({c, h, w});
            for (std::size_t j = 0; j < pixels; ++j) t.data[j] = float(tex_amp * texture_rng.normal());
            textures.push_back(std::move(t));
        }

    ImageBatch out;
    out.images.reserve(std::size_t(spec.count));
    out.labels.reserve(std::size_t(spec.count));
    for (int i = 0; i < spec.count; ++i) {
        Rng rng(fork_seed(seed, 0x5a3b7 + std::uint64_t(i)));
        int cls = i % spec.classes;
        // Mode draw precedes the noise so both come from the image's stream.
        int mode = spec.modes == 1 ? 0 : rng.uniform_int(0, spec.modes - 1);
        const TensorF& bumps = slot_bumps[std::size_t(cls)];
        const TensorF& tex = textures[std::size_t(cls) * std::size_t(spec.modes) + std::size_t(mode)];
        TensorF img({c, h, w});
        for (std::size_t j = 0; j < pixels; ++j) {
            double v = spec.margin * (double(bumps.data[j]) + double(tex.data[j])) + spec.noise * rng.normal();
            img.data[j] = float(v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v));
        }
        out.images.push_back(std::move(img));
        out.labels.push_back(cls);
    }
    out.validate();
    return out;
}

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

struct BeReader {
    std::ifstream in;
    std::string path;
    std::uint64_t offset = 0;

    explicit BeReader(const std::string& p) : in(p, std::ios::binary), path(p) {
        if (!in) throw IoError("idx: cannot open " + p);
    }

    void raw(void* dst, std::size_t n) {
        in.read(static_cast<char*>(dst), std::streamsize(n));
        if (std::size_t(in.gcount()) != n)
            throw IoError("idx: truncated file " + path + " at byte " + std::to_string(offset));
        offset += n;
    }

    std::uint32_t u32be() {
        unsigned char b[4];
        raw(b, 4);
        return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
               std::uint32_t(b[3]);
    }
};

void put_u32be(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v >> 24), (unsigned char)(v >> 16), (unsigned char)(v >> 8),
                          (unsigned char)(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

ImageBatch load_idx(const std::string& images_path, const std::string& labels_path) {
    BeReader ir(images_path);
    if (ir.u32be() != kImagesMagic) throw IoError("idx: bad image magic in " + images_path);
    std::uint32_t n = ir.u32be();
    std::uint32_t h = ir.u32be();
    std::uint32_t w = ir.u32be();
    if (n == 0 || h == 0 || w == 0) throw IoError("idx: empty dimensions in " + images_path);
    BeReader lr(labels_path);
    if (lr.u32be() != kLabelsMagic) throw IoError("idx: bad label magic in " + labels_path);
    std::uint32_t ln = lr.u32be();
    if (ln != n)
        throw IoError("idx: image count " + std::to_string(n) + " does not match label count " +
                      std::to_string(ln));
    ImageBatch out;
    out.images.reserve(n);
    out.labels.reserve(n);
    std::vector<unsigned char> row(std::size_t(h) * w);
    for (std::uint32_t i = 0; i < n; ++i) {
        ir.raw(row.data(), row.size());
        TensorF img({1, int(h), int(w)});
        for (std::size_t j = 0; j < row.size(); ++j) img.data[j] = float(row[j]) / 255.0f;
        out.images.push_back(std::move(img));
        unsigned char lab;
        lr.raw(&lab, 1);
        out.labels.push_back(int(lab));
    }
    // Surface trailing garbage early rather than at the next read.
    char extra;
    if (ir.in.read(&extra, 1).gcount() == 1) throw IoError("idx: trailing bytes in " + images_path);
    if (lr.in.read(&extra, 1).gcount() == 1) throw IoError("idx: trailing bytes in " + labels_path);
    return out;
}

void write_idx(const ImageBatch& batch, const std::string& images_path, const std::string& labels_path) {
    batch.validate();
    if (batch.count() == 0) throw IoError("idx: refusing to write an empty batch");
    const auto& shape = batch.images[0].shape;
    if (shape.size() != 3 || shape[0] != 1) throw IoError("idx: only single-channel images are supported");
    std::ofstream io(images_path, std::ios::binary | std::ios::trunc);
    if (!io) throw IoError("idx: cannot write " + images_path);
    put_u32be(io, kImagesMagic);
    put_u32be(io, std::uint32_t(batch.count()));
    put_u32be(io, std::uint32_t(shape[1]));
    put_u32be(io, std::uint32_t(shape[2]));
    for (const auto& img : batch.images)
        for (float v : img.data) io.put(char(int(std::lround(double(v) * 255.0))));
    std::ofstream lo(labels_path, std::ios::binary | std::ios::trunc);
    if (!lo) throw IoError("idx: cannot write " + labels_path);
    put_u32be(lo, kLabelsMagic);
    put_u32be(lo, std::uint32_t(batch.count()));
    for (int lab : batch.labels) {
        if (lab < 0 || lab > 255) throw IoError("idx: label out of byte range");
        lo.put(char(lab));
    }
    if (!io || !lo) throw IoError("idx: write failed");
}

}  // namespace soupforge

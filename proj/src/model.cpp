#include "soupforge/model.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace soupforge {

std::vector<std::vector<int>> ArchDescriptor::shape_chain() const {
    std::vector<std::vector<int>> chain;
    std::vector<int> cur = {in_channels, in_h, in_w};
    for (const auto& l : layers) {
        chain.push_back(cur);
        switch (l.kind) {
            case LayerSpec::Conv:
                if (cur.size() != 3) throw ShapeError(name + ": conv needs a spatial input");
                if (l.a <= 0 || l.b <= 0 || l.b % 2 == 0)
                    throw ShapeError(name + ": conv wants positive channels and an odd kernel");
                cur = {l.a, cur[1], cur[2]};
                break;
            case LayerSpec::Pool:
                if (cur.size() != 3) throw ShapeError(name + ": pool needs a spatial input");
                if (l.a <= 0 || cur[1] % l.a != 0 || cur[2] % l.a != 0)
                    throw ShapeError(name + ": pool window must divide the spatial dims");
                cur = {cur[0], cur[1] / l.a, cur[2] / l.a};
                break;
            case LayerSpec::Flatten: {
                int n = 1;
                for (int d : cur) n *= d;
                cur = {n};
                break;
            }
            case LayerSpec::Dense:
                if (cur.size() != 1) throw ShapeError(name + ": dense needs a flattened input");
                if (l.b != 0 && l.b != cur[0])
                    throw ShapeError(name + ": dense expects input " + std::to_string(l.b) + " but gets " +
                                     std::to_string(cur[0]));
                if (l.a <= 0) throw ShapeError(name + ": dense wants positive units");
                cur = {l.a};
                break;
        }
    }
    chain.push_back(cur);
    return chain;
}

void ArchDescriptor::validate() const {
    if (in_channels <= 0 || in_h <= 0 || in_w <= 0) throw ShapeError(name + ": bad input shape");
    if (classes < 2) throw ShapeError(name + ": needs at least two classes");
    if (layers.empty()) throw ShapeError(name + ": no layers");
    auto chain = shape_chain();
    const auto& out = chain.back();
    if (layers.back().kind != LayerSpec::Dense || out.size() != 1 || out[0] != classes)
        throw ShapeError(name + ": last layer must be dense with one unit per class");
    if (feature_tap != -1 && (feature_tap < 0 || feature_tap >= int(layers.size())))
        throw ShapeError(name + ": feature tap out of range");
}

int ArchDescriptor::resolved_tap() const {
    if (feature_tap >= 0) return feature_tap;
    for (int i = int(layers.size()) - 1; i >= 0; --i)
        if (layers[i].kind == LayerSpec::Conv) return i;
    return 0;
}

std::string ArchDescriptor::summary() const {
    std::ostringstream os;
    os << name << " " << in_channels << "x" << in_h << "x" << in_w << " ->";
    for (const auto& l : layers) {
        switch (l.kind) {
            case LayerSpec::Conv: os << " conv" << l.a << "k" << l.b; break;
            case LayerSpec::Pool: os << " pool" << l.a; break;
            case LayerSpec::Flatten: os << " flatten"; break;
            case LayerSpec::Dense: os << " dense" << l.a; break;
        }
    }
    os << " tap=" << resolved_tap();
    return os.str();
}

void ImageBatch::validate() const {
    if (images.size() != labels.size()) throw ShapeError("batch: image/label count mismatch");
    for (int l : labels)
        if (l < 0) throw ShapeError("batch: negative label");
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (!images[i].same_shape(images[0])) throw ShapeError("batch: ragged image shapes");
        for (float v : images[i].data)
            if (!(v >= 0.0f && v <= 1.0f)) throw NumericError("batch: pixel outside [0,1]");
    }
}

std::uint64_t ImageBatch::content_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& img : images) h = fnv1a64(img.data.data(), img.data.size() * sizeof(float), h);
    h = fnv1a64(labels.data(), labels.size() * sizeof(int), h);
    return h;
}

ImageBatch ImageBatch::subset(const std::vector<int>& idx) const {
    ImageBatch out;
    out.images.reserve(idx.size());
    out.labels.reserve(idx.size());
    for (int i : idx) {
        out.images.push_back(images.at(std::size_t(i)));
        out.labels.push_back(labels.at(std::size_t(i)));
    }
    return out;
}

float accuracy(const ModelF& m, const ImageBatch& data, int threads) {
    if (data.count() == 0) throw ShapeError("accuracy: empty batch");
    std::vector<int> hit(std::size_t(data.count()));
    parallel_for(data.count(), threads, [&](int i) {
        hit[std::size_t(i)] = predict(m, data.images[std::size_t(i)]) == data.labels[std::size_t(i)];
    });
    return float(std::accumulate(hit.begin(), hit.end(), 0)) / float(data.count());
}

namespace {

void sgd_step(ModelF& m, const ImageBatch& mini, double lr) {
    TapeF tape;
    auto bound = m.bind(tape, true);
    TapeF::Id total = -1;
    for (int j = 0; j < mini.count(); ++j) {
        auto x = tape.constant(mini.images[std::size_t(j)]);
        auto loss = tape.softmax_cross_entropy(m.forward_bound(tape, bound, x), mini.labels[std::size_t(j)]);
        total = total < 0 ? loss : tape.add(total, loss);
    }
    total = tape.scalar_mul(total, 1.0 / double(mini.count()));
    tape.backward(total);
    for (std::size_t p = 0; p < m.params.size(); ++p) {
        const auto& g = tape.grad(bound.ids[p]);
        auto& t = m.params[p].second;
        for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] -= float(lr * double(g.data[i]));
    }
}

}  // namespace

float train_with_hook(ModelF& m, const ImageBatch& train_data, const ImageBatch& test_data,
                      const TrainConfig& cfg, const BatchHook& hook) {
    train_data.validate();
    test_data.validate();
    if (cfg.batch <= 0 || cfg.epochs < 0) throw ConfigError("train: bad epochs/batch");
    Rng shuffle_rng(fork_seed(cfg.seed, 0x5d7));
    std::vector<int> order(std::size_t(train_data.count()));
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            std::size_t j = std::size_t(shuffle_rng.uniform_int(0, int(i) - 1));
            std::swap(order[i - 1], order[j]);
        }
        int step = 0;
        for (std::size_t b = 0; b < order.size(); b += std::size_t(cfg.batch), ++step) {
            std::size_t end = std::min(order.size(), b + std::size_t(cfg.batch));
            ImageBatch mini;
            mini.images.reserve(end - b);
            mini.labels.reserve(end - b);
            for (std::size_t j = b; j < end; ++j) {
                mini.images.push_back(train_data.images[std::size_t(order[j])]);
                mini.labels.push_back(train_data.labels[std::size_t(order[j])]);
            }
            if (hook) hook(mini, epoch, step);
            sgd_step(m, mini, cfg.lr);
        }
    }
    m.train_seed = cfg.seed;
    m.clean_accuracy = accuracy(m, test_data, cfg.threads);
    return m.clean_accuracy;
}

float train(ModelF& m, const ImageBatch& train_data, const ImageBatch& test_data, const TrainConfig& cfg) {
    return train_with_hook(m, train_data, test_data, cfg, {});
}

std::vector<ArchDescriptor> desk_archs(int in_channels, int in_h, int in_w, int classes) {
    auto make = [&](const std::string& name, int depth, int width) {
        ArchDescriptor a;
        a.name = name;
        a.in_channels = in_channels;
        a.in_h = in_h;
        a.in_w = in_w;
        a.classes = classes;
        // The wide family also sees bigger patches, so the two widths differ
        // in receptive field and not just in parameter count.
        int k = width >= 16 ? 5 : 3;
        a.layers.push_back({LayerSpec::Conv, width, k});
        a.layers.push_back({LayerSpec::Pool, 2, 0});
        if (depth == 2) {
            a.layers.push_back({LayerSpec::Conv, width * 2, k});
            a.layers.push_back({LayerSpec::Pool, 2, 0});
        }
        a.layers.push_back({LayerSpec::Flatten, 0, 0});
        a.layers.push_back({LayerSpec::Dense, classes, 0});
        a.validate();
        return a;
    };
    return {
        make("conv1w8", 1, 8),
        make("conv1w16", 1, 16),
        make("conv2w8", 2, 8),
        make("conv2w16", 2, 16),
    };
}

}  // namespace soupforge

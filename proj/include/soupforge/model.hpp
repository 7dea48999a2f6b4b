#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "soupforge/rng.hpp"
#include "soupforge/tape.hpp"

namespace soupforge {

struct LayerSpec {
    enum Kind : std::uint8_t { Conv = 0, Pool = 1, Flatten = 2, Dense = 3 };
    Kind kind = Conv;
    // Conv: a = out channels, b = kernel size (odd, same padding).
    // Pool: a = window. Dense: a = units, b = expected input size (0 = infer).
    int a = 0;
    int b = 0;
};

struct ArchDescriptor {
    std::string name;
    int in_channels = 1;
    int in_h = 28;
    int in_w = 28;
    int classes = 10;
    std::vector<LayerSpec> layers;
    // Layer whose post-activation is exposed as the feature tap.
    // -1 selects the last conv layer (or layer 0 if there is none).
    int feature_tap = -1;

    void validate() const;
    int resolved_tap() const;
    // Output shape after each layer, starting from the input shape.
    std::vector<std::vector<int>> shape_chain() const;
    std::string summary() const;
};

template <class S>
struct Model {
    ArchDescriptor arch;
    std::vector<std::pair<std::string, Tensor<S>>> params;
    std::string id;

    // training provenance
    std::string dataset_id;
    std::uint64_t train_seed = 0;
    float clean_accuracy = 0.0f;

    Tensor<S>& param(const std::string& name) {
        for (auto& [n, t] : params)
            if (n == name) return t;
        throw ShapeError("model: no parameter named " + name);
    }
    const Tensor<S>& param(const std::string& name) const {
        return const_cast<Model*>(this)->param(name);
    }

    struct Bound {
        std::vector<typename Tape<S>::Id> ids;
    };

    // Push all parameters onto a tape, as leaves when training.
    Bound bind(Tape<S>& tape, bool as_leaves) const {
        Bound b;
        b.ids.reserve(params.size());
        for (const auto& [n, t] : params) b.ids.push_back(as_leaves ? tape.leaf(t) : tape.constant(t));
        return b;
    }

    // Forward pass; returns the logits node. tap_out, when given, receives the
    // feature-tap node on the same tape.
    typename Tape<S>::Id forward_bound(Tape<S>& tape, const Bound& bound, typename Tape<S>::Id x,
                                       typename Tape<S>::Id* tap_out = nullptr) const {
        arch.validate();
        int tap = arch.resolved_tap();
        std::size_t p = 0;
        auto cur = x;
        int dense_seen = 0, dense_total = 0;
        for (const auto& l : arch.layers) dense_total += l.kind == LayerSpec::Dense;
        for (std::size_t li = 0; li < arch.layers.size(); ++li) {
            const auto& l = arch.layers[li];
            switch (l.kind) {
                case LayerSpec::Conv: {
                    auto w = bound.ids.at(p++);
                    auto bias = bound.ids.at(p++);
                    cur = tape.conv2d(cur, w, bias, (l.b - 1) / 2);
                    cur = tape.relu(cur);
                    break;
                }
                case LayerSpec::Pool:
                    cur = tape.avgpool(cur, l.a);
                    break;
                case LayerSpec::Flatten:
                    cur = tape.flatten(cur);
                    break;
                case LayerSpec::Dense: {
                    auto w = bound.ids.at(p++);
                    auto bias = bound.ids.at(p++);
                    cur = tape.add(tape.matmul(w, cur), bias);
                    ++dense_seen;
                    if (dense_seen < dense_total) cur = tape.relu(cur);
                    break;
                }
            }
            if (int(li) == tap && tap_out) *tap_out = cur;
        }
        return cur;
    }

    typename Tape<S>::Id forward(Tape<S>& tape, typename Tape<S>::Id x,
                                 typename Tape<S>::Id* tap_out = nullptr) const {
        auto bound = bind(tape, false);
        return forward_bound(tape, bound, x, tap_out);
    }
};

using ModelF = Model<float>;
using ModelD = Model<double>;

// He-style uniform fan-in init; biases start at zero. Parameter values are
// drawn in double and cast, so a seed describes the same network at any
// scalar width.
template <class S>
Model<S> build_model(const ArchDescriptor& arch, std::uint64_t seed) {
    arch.validate();
    Model<S> m;
    m.arch = arch;
    m.id = arch.name;
    m.train_seed = seed;
    Rng rng(mix64(seed));
    auto chain = arch.shape_chain();
    int conv_idx = 0, dense_idx = 0;
    for (std::size_t li = 0; li < arch.layers.size(); ++li) {
        const auto& l = arch.layers[li];
        const auto& in_shape = chain[li];
        if (l.kind == LayerSpec::Conv) {
            int ci = in_shape[0];
            double limit = std::sqrt(6.0 / (double(ci) * l.b * l.b));
            Tensor<S> w({l.a, ci, l.b, l.b});
            for (auto& v : w.data) v = S(rng.uniform(-limit, limit));
            std::string base = "conv" + std::to_string(conv_idx++);
            m.params.emplace_back(base + ".w", std::move(w));
            m.params.emplace_back(base + ".b", Tensor<S>({l.a}));
        } else if (l.kind == LayerSpec::Dense) {
            int in = in_shape[0];
            double limit = std::sqrt(6.0 / double(in));
            Tensor<S> w({l.a, in});
            for (auto& v : w.data) v = S(rng.uniform(-limit, limit));
            std::string base = "dense" + std::to_string(dense_idx++);
            m.params.emplace_back(base + ".w", std::move(w));
            m.params.emplace_back(base + ".b", Tensor<S>({l.a}));
        }
    }
    return m;
}

struct ImageBatch {
    std::vector<TensorF> images;
    std::vector<int> labels;

    int count() const { return int(images.size()); }
    void validate() const;
    std::uint64_t content_hash() const;
    ImageBatch subset(const std::vector<int>& idx) const;
};

template <class S>
Tensor<S> logits_of(const Model<S>& m, const Tensor<S>& image) {
    Tape<S> tape;
    auto x = tape.constant(image);
    auto out = m.forward(tape, x);
    return tape.value(out);
}

template <class S>
Tensor<S> features_of(const Model<S>& m, const Tensor<S>& image) {
    Tape<S> tape;
    auto x = tape.constant(image);
    typename Tape<S>::Id tap = -1;
    m.forward(tape, x, &tap);
    if (tap < 0) throw ShapeError("features_of: feature tap not reached");
    return tape.value(tap);
}

template <class S>
int predict(const Model<S>& m, const Tensor<S>& image) {
    auto z = logits_of(m, image);
    int best = 0;
    for (int i = 1; i < z.shape[0]; ++i)
        if (z.data[i] > z.data[best]) best = i;
    return best;
}

// Mean of member logits on a shared tape; gradients flow into every member's
// input path. A single member passes through untouched.
template <class S>
typename Tape<S>::Id ensemble_forward(Tape<S>& tape, const std::vector<const Model<S>*>& members,
                                      typename Tape<S>::Id x, typename Tape<S>::Id* tap_out = nullptr) {
    if (members.empty()) throw ShapeError("ensemble_forward: no members");
    if (members.size() == 1) return members[0]->forward(tape, x, tap_out);
    if (tap_out) throw ShapeError("ensemble_forward: feature tap is defined for single-model surrogates only");
    auto acc = members[0]->forward(tape, x);
    for (std::size_t i = 1; i < members.size(); ++i) acc = tape.add(acc, members[i]->forward(tape, x));
    return tape.scalar_mul(acc, 1.0 / double(members.size()));
}

struct TrainConfig {
    int epochs = 3;
    double lr = 0.1;
    int batch = 32;
    std::uint64_t seed = 0;
    int threads = 0;  // 0 = default
};

float accuracy(const ModelF& m, const ImageBatch& data, int threads = 0);

// Called on every materialized minibatch before the SGD step; adversarial
// training swaps images in place. A null hook leaves the stream untouched.
using BatchHook = std::function<void(ImageBatch& minibatch, int epoch, int step)>;

float train_with_hook(ModelF& m, const ImageBatch& train_data, const ImageBatch& test_data,
                      const TrainConfig& cfg, const BatchHook& hook);

// Plain minibatch SGD with seeded shuffling. Returns the clean test accuracy,
// which is also stored on the model.
float train(ModelF& m, const ImageBatch& train_data, const ImageBatch& test_data, const TrainConfig& cfg);

struct AttackSpec;

struct AdvTrainConfig {
    TrainConfig base;
    double mix_ratio = 0.5;
};

// Same loop as train(), but the leading mix_ratio share of every minibatch is
// replaced by examples freshly attacked against the current parameters.
float adversarial_train(ModelF& m, const ImageBatch& train_data, const ImageBatch& test_data,
                        const AdvTrainConfig& cfg, const AttackSpec& attack);

void save_checkpoint(const ModelF& m, const std::string& path);
ModelF load_checkpoint(const std::string& path);

// The laboratory's stock architectures: two conv depths times two widths.
std::vector<ArchDescriptor> desk_archs(int in_channels, int in_h, int in_w, int classes);

}  // namespace soupforge

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <fstream>

#include "soupforge/attack.hpp"
#include "soupforge/dataset.hpp"
#include "soupforge/model.hpp"
#include "support/finite_diff.hpp"

using namespace soupforge;
using testsupport::max_abs_diff;
using testsupport::seeded_tensor;

namespace {

// Small, quickly separable dataset for the training checks.
ImageBatch tiny_data(int count, std::uint64_t seed) {
    SynthSpec spec;
    spec.classes = 4;
    spec.height = 12;
    spec.width = 12;
    spec.count = count;
    spec.modes = 2;
    spec.margin = 0.8;
    spec.noise = 0.05;
    return synth_dataset(spec, seed);
}

ArchDescriptor tiny_arch() {
    ArchDescriptor a;
    a.name = "tiny";
    a.in_channels = 1;
    a.in_h = 12;
    a.in_w = 12;
    a.classes = 4;
    a.layers.push_back({LayerSpec::Conv, 4, 3});
    a.layers.push_back({LayerSpec::Pool, 2, 0});
    a.layers.push_back({LayerSpec::Flatten, 0, 0});
    a.layers.push_back({LayerSpec::Dense, 4, 0});
    return a;
}

bool params_equal(const ModelF& a, const ModelF& b) {
    if (a.params.size() != b.params.size()) return false;
    for (std::size_t i = 0; i < a.params.size(); ++i) {
        if (a.params[i].first != b.params[i].first) return false;
        if (a.params[i].second.shape != b.params[i].second.shape) return false;
        if (a.params[i].second.data != b.params[i].second.data) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("stock architectures validate and expose distinct shapes") {
    auto archs = desk_archs(1, 28, 28, 10);
    REQUIRE(archs.size() == 4);
    for (const auto& a : archs) {
        CHECK_NOTHROW(a.validate());
        CHECK(a.classes == 10);
        auto chain = a.shape_chain();
        CHECK(chain.front() == std::vector<int>{1, 28, 28});
        CHECK(chain.back() == std::vector<int>{10});
        CHECK(a.summary().find(a.name) != std::string::npos);
    }
    CHECK(archs[0].name == "conv1w8");
    CHECK(archs[3].name == "conv2w16");

    ArchDescriptor bad = archs[0];
    bad.layers.clear();
    CHECK_THROWS_AS(bad.validate(), ShapeError);
}

TEST_CASE("model init is a pure function of the seed") {
    auto arch = tiny_arch();
    auto m1 = build_model<float>(arch, 7);
    auto m2 = build_model<float>(arch, 7);
    auto m3 = build_model<float>(arch, 8);
    CHECK(params_equal(m1, m2));
    CHECK_FALSE(params_equal(m1, m3));
    for (const auto& [name, t] : m1.params)
        if (name.find(".b") != std::string::npos) CHECK(l1_norm(t) == 0.0);
}

TEST_CASE("forward pass matches a hand computation on a dense-only net") {
    ArchDescriptor a;
    a.name = "lin";
    a.in_channels = 1;
    a.in_h = 1;
    a.in_w = 2;
    a.classes = 2;
    a.layers.push_back({LayerSpec::Flatten, 0, 0});
    a.layers.push_back({LayerSpec::Dense, 2, 0});
    auto m = build_model<float>(a, 1);
    m.param("dense0.w") = TensorF({2, 2}, {1.0f, -1.0f, 0.5f, 2.0f});
    m.param("dense0.b") = TensorF({2}, {0.1f, -0.2f});

    TensorF x({1, 1, 2}, {3.0f, 1.0f});
    auto z = logits_of(m, x);
    CHECK(double(z.data[0]) == doctest::Approx(3.0 - 1.0 + 0.1));
    CHECK(double(z.data[1]) == doctest::Approx(1.5 + 2.0 - 0.2));
    CHECK(predict(m, x) == 1);
}

TEST_CASE("feature tap resolves to the last conv activation") {
    auto m = build_model<float>(tiny_arch(), 3);
    auto x = seeded_tensor<float>({1, 12, 12}, 5, 0.0, 1.0);
    auto feat = features_of(m, x);
    CHECK(feat.shape == std::vector<int>{4, 12, 12});
    for (float v : feat.data) CHECK(v >= 0.0f);  // post-relu tap
}

TEST_CASE("training fits the tiny dataset and is seed deterministic") {
    auto train_data = tiny_data(160, 1);
    auto test_data = tiny_data(48, 2);
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.batch = 16;
    cfg.seed = 9;

    auto m1 = build_model<float>(tiny_arch(), 9);
    float acc1 = train(m1, train_data, test_data, cfg);
    CHECK(acc1 >= 0.9f);
    CHECK(m1.clean_accuracy == acc1);
    CHECK(accuracy(m1, test_data) == doctest::Approx(acc1));

    auto m2 = build_model<float>(tiny_arch(), 9);
    float acc2 = train(m2, train_data, test_data, cfg);
    CHECK(acc1 == acc2);
    CHECK(params_equal(m1, m2));
}

TEST_CASE("zero learning rate leaves parameters untouched") {
    auto train_data = tiny_data(64, 3);
    auto test_data = tiny_data(32, 4);
    auto m = build_model<float>(tiny_arch(), 2);
    auto before = m;
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.lr = 0.0;
    cfg.batch = 16;
    train(m, train_data, test_data, cfg);
    CHECK(params_equal(m, before));
}

TEST_CASE("adversarial training with zero mix is plain training") {
    auto train_data = tiny_data(96, 5);
    auto test_data = tiny_data(32, 6);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch = 16;
    cfg.seed = 4;

    auto plain = build_model<float>(tiny_arch(), 1);
    train(plain, train_data, test_data, cfg);

    auto adv = build_model<float>(tiny_arch(), 1);
    AdvTrainConfig acfg;
    acfg.base = cfg;
    acfg.mix_ratio = 0.0;
    adversarial_train(adv, train_data, test_data, acfg, default_attack(AttackKind::IFGSM));
    CHECK(params_equal(plain, adv));

    // a real mix changes the trajectory
    auto adv2 = build_model<float>(tiny_arch(), 1);
    acfg.mix_ratio = 0.5;
    AttackSpec fgsm = default_attack(AttackKind::IFGSM);
    fgsm.iters = 1;
    adversarial_train(adv2, train_data, test_data, acfg, fgsm);
    CHECK_FALSE(params_equal(plain, adv2));
}

TEST_CASE("ensemble logits are the member mean") {
    auto m1 = build_model<float>(tiny_arch(), 11);
    auto m2 = build_model<float>(tiny_arch(), 12);
    auto m3 = build_model<float>(tiny_arch(), 13);
    auto x = seeded_tensor<float>({1, 12, 12}, 6, 0.0, 1.0);

    TapeF tape;
    auto xi = tape.constant(x);
    auto out = ensemble_forward<float>(tape, {&m1, &m2, &m3}, xi);
    auto z1 = logits_of(m1, x), z2 = logits_of(m2, x), z3 = logits_of(m3, x);
    for (int i = 0; i < 4; ++i) {
        double mean = (double(z1.data[i]) + double(z2.data[i]) + double(z3.data[i])) / 3.0;
        CHECK(double(tape.value(out).data[i]) == doctest::Approx(mean).epsilon(1e-6));
    }

    TapeF single;
    auto sx = single.constant(x);
    auto sout = ensemble_forward<float>(single, {&m1}, sx);
    CHECK(max_abs_diff(single.value(sout), z1) == 0.0);

    TapeF tap_tape;
    TapeF::Id tap = -1;
    auto tx = tap_tape.constant(x);
    CHECK_THROWS_AS(ensemble_forward<float>(tap_tape, {&m1, &m2}, tx, &tap), ShapeError);
    CHECK_THROWS_AS(ensemble_forward<float>(tape, {}, xi), ShapeError);
}

TEST_CASE("checkpoints round trip bit exactly and reject corruption") {
    auto m = build_model<float>(tiny_arch(), 21);
    m.dataset_id = "synth-test";
    m.clean_accuracy = 0.875f;
    const std::string path = "test_model_ckpt.bin";
    save_checkpoint(m, path);
    auto back = load_checkpoint(path);
    CHECK(params_equal(m, back));
    CHECK(back.arch.name == m.arch.name);
    CHECK(back.dataset_id == m.dataset_id);
    CHECK(back.train_seed == m.train_seed);
    CHECK(back.clean_accuracy == m.clean_accuracy);

    // truncation
    {
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), std::streamsize(bytes.size() / 2));
    }
    CHECK_THROWS_AS(load_checkpoint(path), IoError);

    // wrong magic
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << "NOTACKPT garbage";
    }
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
    std::remove(path.c_str());
    CHECK_THROWS_AS(load_checkpoint("no_such_file.bin"), IoError);
}

TEST_CASE("image batches validate their invariants") {
    auto data = tiny_data(12, 7);
    CHECK_NOTHROW(data.validate());
    CHECK(data.count() == 12);

    auto h0 = data.content_hash();
    auto subset = data.subset({0, 3, 5});
    CHECK(subset.count() == 3);
    CHECK(subset.labels[1] == data.labels[3]);
    CHECK(max_abs_diff(subset.images[2], data.images[5]) == 0.0);

    data.images[0].data[0] += 0.25f;
    CHECK(data.content_hash() != h0);

    ImageBatch bad = tiny_data(4, 8);
    bad.labels[2] = -1;
    CHECK_THROWS_AS(bad.validate(), ShapeError);
    bad = tiny_data(4, 8);
    bad.images.pop_back();
    CHECK_THROWS_AS(bad.validate(), ShapeError);
}

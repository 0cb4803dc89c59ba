#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "ctta/checkpoint.hpp"
#include "ctta/errors.hpp"
#include "ctta/fd.hpp"
#include "ctta/layers.hpp"
#include "ctta/losses.hpp"
#include "ctta/model.hpp"
#include "ctta/rng.hpp"

using namespace ctta;

namespace {

ArchSpec tiny_arch(Paradigm p = Paradigm::Cascade) {
    ArchSpec a;
    a.paradigm = p;
    a.input_dim = 6;
    a.phi_widths = {8, 7};
    a.num_classes = 3;
    a.aux_hidden = 5;
    return a;
}

Value random_batch(std::int64_t rows, std::int64_t cols, Rng& rng, double scale = 1.0) {
    Value v = Value::zeros({rows, cols});
    for (auto& x : v.data) x = scale * rng.normal();
    return v;
}

double max_abs(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

}  // namespace

TEST_CASE("layout partitions are disjoint and exhaustive") {
    const Layout L = make_layout(tiny_arch());
    CHECK(L.phi.begin == 0);
    CHECK(L.phi.end == L.theta_m.begin);
    CHECK(L.theta_m.end == L.theta_a.begin);
    CHECK(L.theta_a.end == L.total);
    std::size_t sum = 0;
    for (const auto& leaf : L.leaves) sum += leaf.size;
    CHECK(sum == L.total);
    for (std::size_t i : L.bn_affine) CHECK(L.phi.contains(i));
}

TEST_CASE("default architecture BN affine plus theta_m counts 581 parameters") {
    const Layout L = make_layout(ArchSpec{});
    CHECK(L.bn_affine.size() + L.theta_m.size() == 2 * (64 + 64) + (64 * 5 + 5));
}

TEST_CASE("init_model is deterministic and rejects degenerate specs") {
    const ArchSpec a = tiny_arch();
    const Model m1 = init_model(a, 42);
    const Model m2 = init_model(a, 42);
    CHECK(m1.params == m2.params);
    const Model m3 = init_model(a, 43);
    CHECK(m1.params != m3.params);

    ArchSpec bad = a;
    bad.num_classes = 1;
    CHECK_THROWS_AS(init_model(bad, 0), InvalidSpecError);
    bad = a;
    bad.phi_widths = {};
    CHECK_THROWS_AS(init_model(bad, 0), InvalidSpecError);
}

TEST_CASE("fresh BN state under RunningStats is the identity on standardized input") {
    BatchNormState st;
    st.gamma = {1.0, 1.0};
    st.beta = {0.0, 0.0};
    st.running_mean = {0.0, 0.0};
    st.running_var = {1.0, 1.0};
    st.epsilon = 1e-12;
    st.mode = BnMode::RunningStats;
    const Value x({2, 2}, {0.3, -1.2, 0.9, 0.4});
    const Value y = batchnorm_forward(st, x);
    for (std::size_t i = 0; i < 4; ++i) CHECK(y.data[i] == doctest::Approx(x.data[i]).epsilon(1e-9));
}

TEST_CASE("batchnorm_forward standardizes under BatchStats") {
    Rng rng(3);
    BatchNormState st;
    st.gamma = {1.0};
    st.beta = {0.0};
    st.running_mean = {0.0};
    st.running_var = {1.0};
    st.epsilon = 1e-10;
    st.mode = BnMode::BatchStats;
    Value x = Value::zeros({64, 1});
    for (auto& v : x.data) v = 5.0 + 2.0 * rng.normal();  // mean 5, variance 4
    const Value y = batchnorm_forward(st, x);
    double m = 0.0, var = 0.0;
    for (double v : y.data) m += v;
    m /= 64.0;
    for (double v : y.data) var += (v - m) * (v - m);
    var /= 64.0;
    CHECK(std::abs(m) < 1e-10);
    CHECK(std::abs(var - 1.0) < 1e-10);
    CHECK(st.running_mean[0] == doctest::Approx(5.0).epsilon(0.2));
}

TEST_CASE("gamma and beta apply after standardization") {
    BatchNormState st;
    st.gamma = {2.0};
    st.beta = {3.0};
    st.running_mean = {0.0};
    st.running_var = {1.0};
    st.epsilon = 1e-12;
    st.mode = BnMode::RunningStats;
    const Value x({3, 1}, {-1.0, 0.0, 1.0});
    const Value y = batchnorm_forward(st, x);
    CHECK(y.data[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(y.data[1] == doctest::Approx(3.0).epsilon(1e-9));
    CHECK(y.data[2] == doctest::Approx(5.0).epsilon(1e-9));
}

TEST_CASE("BatchStats overwrite is idempotent") {
    Rng rng(5);
    BatchNormState st;
    st.gamma = {1.0, 1.0};
    st.beta = {0.0, 0.0};
    st.running_mean = {0.0, 0.0};
    st.running_var = {1.0, 1.0};
    st.mode = BnMode::BatchStats;
    const Value x = random_batch(16, 2, rng, 2.0);
    const Value y1 = batchnorm_forward(st, x);
    const auto rm = st.running_mean;
    const auto rv = st.running_var;
    const Value y2 = batchnorm_forward(st, x);
    CHECK(y1.data == y2.data);
    CHECK(st.running_mean == rm);
    CHECK(st.running_var == rv);
}

TEST_CASE("TrainStats blends batch moments into running statistics") {
    BatchNormState st;
    st.gamma = {1.0};
    st.beta = {0.0};
    st.running_mean = {0.0};
    st.running_var = {1.0};
    st.momentum = 0.1;
    st.mode = BnMode::TrainStats;
    const Value x({2, 1}, {4.0, 6.0});  // batch mean 5, biased variance 1
    batchnorm_forward(st, x);
    CHECK(st.running_mean[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(st.running_var[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("graph BN and standalone BN agree") {
    Rng rng(9);
    const Value x = random_batch(8, 3, rng);
    BatchNormState st;
    st.gamma = {1.3, 0.7, 1.0};
    st.beta = {0.1, -0.4, 0.2};
    st.running_mean = {0.0, 0.0, 0.0};
    st.running_var = {1.0, 1.0, 1.0};
    st.epsilon = 1e-5;
    st.mode = BnMode::BatchStats;
    const Value want = batchnorm_forward(st, x);

    Graph g;
    auto xi = g.input(x);
    auto gamma = g.param(Value({3}, st.gamma));
    auto beta = g.param(Value({3}, st.beta));
    auto bn = g.batch_norm(xi, gamma, beta, BnMode::BatchStats, {0, 0, 0}, {1, 1, 1}, 1e-5);
    const Value& got = g.forward(bn);
    for (std::size_t i = 0; i < want.data.size(); ++i)
        CHECK(got.data[i] == doctest::Approx(want.data[i]).epsilon(1e-12));
    CHECK(g.bn_mean(bn) == st.running_mean);
    CHECK(g.bn_var(bn) == st.running_var);
}

TEST_CASE("cascade aux entropy reaches theta_m and phi; parallel does not reach theta_m") {
    Rng rng(21);
    for (auto paradigm : {Paradigm::Cascade, Paradigm::Parallel}) {
        const ArchSpec arch = tiny_arch(paradigm);
        const Layout L = make_layout(arch);
        const Model m = init_model(arch, 77);
        ModelGraph mg = build_model_graph(m, 6, BnMode::BatchStats);
        const Value x = random_batch(6, arch.input_dim, rng);
        mg.g.bind_input(mg.x, x);
        if (mg.x_aux >= 0) mg.g.bind_input(mg.x_aux, x);
        auto root = entropy_node(mg.g, mg.aux_logits);
        mg.g.forward(root);
        const auto grad = mg.g.backward(root).flat();
        REQUIRE(grad.size() == L.total);

        const auto slice_max = [&](ParamRange r) {
            double mx = 0.0;
            for (std::size_t i = r.begin; i < r.end; ++i) mx = std::max(mx, std::abs(grad[i]));
            return mx;
        };
        CHECK(slice_max(L.phi) > 1e-8);
        if (paradigm == Paradigm::Cascade) {
            CHECK(slice_max(L.theta_m) > 1e-8);
        } else {
            CHECK(slice_max(L.theta_m) == 0.0);
        }
        CHECK(slice_max(L.theta_a) > 1e-8);
    }
}

TEST_CASE("duplicate rows map to duplicate logits under RunningStats") {
    Rng rng(33);
    Model m = init_model(tiny_arch(), 5);
    Value x = random_batch(4, 6, rng);
    for (std::int64_t c = 0; c < 6; ++c) x.at(3, c) = x.at(0, c);
    const auto out = model_forward(m, x, BnMode::RunningStats, false);
    for (std::int64_t c = 0; c < 3; ++c) {
        CHECK(out.main_logits.at(3, c) == out.main_logits.at(0, c));
        CHECK(out.aux_logits.at(3, c) == out.aux_logits.at(0, c));
    }
}

TEST_CASE("cross entropy of uniform logits is ln K and confident logits vanish") {
    Graph g;
    auto z = g.input(Value::zeros({4, 10}));
    auto ce = cross_entropy_node(g, z, {0, 3, 7, 9});
    CHECK(g.forward(ce).data[0] == doctest::Approx(std::log(10.0)).epsilon(1e-12));

    Value conf = Value::zeros({1, 10});
    conf.at(0, 4) = 25.0;
    Graph g2;
    auto ce2 = cross_entropy_node(g2, g2.input(conf), {4});
    CHECK(g2.forward(ce2).data[0] < 1e-8);
    CHECK(cross_entropy_of_logits(conf, {4}) < 1e-8);
}

TEST_CASE("entropy stays within [0, ln K] and matches the graph node") {
    Rng rng(41);
    for (int trial = 0; trial < 20; ++trial) {
        const Value z = random_batch(5, 4, rng, 3.0);
        const double direct = entropy_of_logits(z);
        CHECK(direct >= 0.0);
        CHECK(direct <= std::log(4.0) + 1e-12);
        Graph g;
        auto node = entropy_node(g, g.input(z));
        CHECK(g.forward(node).data[0] == doctest::Approx(direct).epsilon(1e-12));
    }

    Value sharp = Value::zeros({1, 6});
    sharp.at(0, 2) = 30.0;
    CHECK(entropy_of_logits(sharp) < 1e-8);
}

TEST_CASE("model losses match central differences") {
    Rng rng(55);
    const ArchSpec arch = tiny_arch();
    Model m = init_model(arch, 11);
    const Value x = random_batch(5, arch.input_dim, rng);

    ModelGraph mg = build_model_graph(m, 5, BnMode::BatchStats);
    mg.g.bind_input(mg.x, x);
    auto ce = cross_entropy_node(mg.g, mg.main_logits, {0, 1, 2, 0, 1});
    auto ent = entropy_node(mg.g, mg.aux_logits);
    auto root = mg.g.add(ce, ent);
    mg.g.forward(root);
    const auto grad = mg.g.backward(root).flat();

    auto loss = [&](const std::vector<double>& p) {
        bind_flat_params(mg.g, p);
        return mg.g.forward(root).data[0];
    };
    const auto fd = finite_diff_grad(loss, flat_params(mg.g));
    CHECK(max_rel_err(grad, fd) < 1e-4);
}

TEST_CASE("model_forward under TrainStats moves running statistics") {
    Rng rng(60);
    Model m = init_model(tiny_arch(), 2);
    const auto before = m.bn[0].mean;
    model_forward(m, random_batch(8, 6, rng), BnMode::TrainStats, true);
    CHECK(m.bn[0].mean != before);

    Model frozen = init_model(tiny_arch(), 2);
    model_forward(frozen, random_batch(8, 6, rng), BnMode::BatchStats, false);
    CHECK(frozen.bn[0].mean == before);
}

TEST_CASE("argmax breaks ties toward the lowest index") {
    const Value z({2, 3}, {1.0, 1.0, 0.0, 0.0, 2.0, 2.0});
    const auto pred = argmax_rows(z);
    CHECK(pred == std::vector<int>{0, 1});
}

TEST_CASE("checkpoints round-trip byte-identically") {
    Model m = init_model(tiny_arch(Paradigm::Parallel), 8);
    m.bn[0].mean[2] = 0.25;
    Checkpoint c{m, "meta", 8, fnv1a("config")};
    const std::string bytes = serialize_checkpoint(c);
    const Checkpoint back = deserialize_checkpoint(bytes);
    CHECK(serialize_checkpoint(back) == bytes);
    CHECK(back.model.params == m.params);
    CHECK(back.model.bn[0].mean == m.bn[0].mean);
    CHECK(back.method == "meta");
    CHECK(back.model.arch == m.arch);
}

TEST_CASE("checkpoint loader rejects foreign or damaged bytes") {
    Model m = init_model(tiny_arch(), 1);
    std::string bytes = serialize_checkpoint(Checkpoint{m, "erm", 1, 0});

    std::string wrong_magic = bytes;
    wrong_magic[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(wrong_magic), CheckpointFormatError);

    std::string wrong_version = bytes;
    wrong_version[8] = 9;
    CHECK_THROWS_AS(deserialize_checkpoint(wrong_version), CheckpointFormatError);

    CHECK_THROWS_AS(deserialize_checkpoint(std::string_view(bytes).substr(0, bytes.size() - 4)),
                    CheckpointFormatError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes + "zz"), CheckpointFormatError);
}

TEST_CASE("checkpoint files save and load through the filesystem") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "ctta_ckpt_test";
    fs::create_directories(dir);
    const fs::path file = dir / "m.ckpt";
    Model m = init_model(tiny_arch(), 99);
    save_checkpoint(Checkpoint{m, "meta", 99, 7}, file);
    const Checkpoint back = load_checkpoint(file);
    CHECK(back.model.params == m.params);
    CHECK(back.seed == 99);
    fs::remove_all(dir);
}

TEST_CASE("parallel SSL input leaf can carry a different row count") {
    Rng rng(71);
    const ArchSpec arch = tiny_arch(Paradigm::Parallel);
    Model m = init_model(arch, 3);
    ModelGraph mg = build_model_graph(m, 4, BnMode::BatchStats, 16);
    mg.g.bind_input(mg.x, random_batch(4, arch.input_dim, rng));
    mg.g.bind_input(mg.x_aux, random_batch(16, arch.input_dim, rng));
    mg.g.forward(mg.aux_logits);
    CHECK(mg.g.value(mg.main_logits).shape == std::vector<std::int64_t>{4, 3});
    CHECK(mg.g.value(mg.aux_logits).shape == std::vector<std::int64_t>{16, kSslClasses});
}

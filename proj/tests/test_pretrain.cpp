#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctta/checkpoint.hpp"
#include "ctta/data.hpp"
#include "ctta/errors.hpp"
#include "ctta/fd.hpp"
#include "ctta/losses.hpp"
#include "ctta/model.hpp"
#include "ctta/pretrain.hpp"
#include "ctta/rng.hpp"

using namespace ctta;

namespace {

ArchSpec tiny_cascade() {
    ArchSpec a;
    a.paradigm = Paradigm::Cascade;
    a.input_dim = 4;
    a.phi_widths = {6};
    a.num_classes = 3;
    a.aux_hidden = 5;
    return a;
}

ArchSpec tiny_parallel() {
    ArchSpec a = tiny_cascade();
    a.paradigm = Paradigm::Parallel;
    return a;
}

Value random_batch(std::int64_t rows, std::int64_t cols, std::uint64_t seed) {
    Rng rng(seed);
    Value v = Value::zeros({rows, cols});
    for (double& x : v.data) x = rng.normal();
    return v;
}

std::vector<int> random_labels(std::int64_t rows, int num_classes, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<int> y(static_cast<std::size_t>(rows));
    for (int& l : y) l = rng.uniform_int(num_classes);
    return y;
}

MetaBatch small_meta_batch(const ArchSpec& arch, std::uint64_t seed) {
    const Value x = random_batch(16, arch.input_dim, seed);
    return split_meta_batch(x, random_labels(16, static_cast<int>(arch.num_classes), seed + 1), 0.5);
}

SourceData small_source(std::uint64_t seed) {
    SourceSpec spec;
    spec.n_train = 2048;
    spec.n_holdout = 512;
    spec.seed = seed;
    return gen_source(spec);
}

PretrainConfig quick_config(std::int64_t epochs, std::uint64_t seed) {
    PretrainConfig cfg;
    cfg.epochs = epochs;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("inner step at alpha zero changes nothing") {
    Model m = init_model(tiny_cascade(), 5);
    const Value x = random_batch(8, 4, 21);
    const std::vector<double> before = m.params;
    const InnerStepResult r = inner_step(m, x, 0.0, /*update_stats=*/false);
    CHECK(r.params_prime == before);
    CHECK(m.params == before);
    CHECK(r.inner_loss > 0.0);
    CHECK(r.inner_loss <= std::log(3.0) + 1e-12);
    double gn = 0.0;
    for (double g : r.inner_grad) gn += g * g;
    CHECK(gn > 0.0);
}

TEST_CASE("inner step descends the entropy and pins the aux head") {
    const ArchSpec arch = tiny_cascade();
    const Layout layout = make_layout(arch);
    Model m = init_model(arch, 6);
    const Value x = random_batch(8, 4, 22);

    const InnerStepResult r = inner_step(m, x, 1e-2, /*update_stats=*/false);
    for (std::size_t i = layout.theta_a.begin; i < layout.theta_a.end; ++i)
        CHECK(r.params_prime[i] == m.params[i]);

    Model stepped = m;
    stepped.params = r.params_prime;
    ModelGraph mg = build_model_graph(stepped, 8, BnMode::TrainStats);
    mg.g.bind_input(mg.x, x);
    const NodeId ent = entropy_node(mg.g, mg.aux_logits);
    CHECK(mg.g.forward(ent).data[0] < r.inner_loss);
}

TEST_CASE("inner step stat updates are opt-in") {
    Model m = init_model(tiny_cascade(), 7);
    const Value x = random_batch(8, 4, 23);
    const std::vector<double> mean0 = m.bn[0].mean;

    inner_step(m, x, 1e-3, /*update_stats=*/false);
    CHECK(m.bn[0].mean == mean0);

    inner_step(m, x, 1e-3, /*update_stats=*/true);
    CHECK(m.bn[0].mean != mean0);
}

TEST_CASE("exact meta gradient matches finite differences of the composition") {
    for (const ArchSpec& arch : {tiny_cascade(), tiny_parallel()}) {
        CAPTURE(arch.paradigm == Paradigm::Cascade);
        const Model m = init_model(arch, 9);
        REQUIRE(m.params.size() <= 200);
        const MetaBatch mb = small_meta_batch(arch, 31);
        PretrainConfig cfg;
        cfg.alpha = 1e-2;

        const std::vector<double> grad = meta_gradient(m, mb, cfg);
        const std::vector<double> fd = finite_diff_grad(composed_meta_objective(m, mb, cfg), m.params);
        CHECK(max_rel_err(grad, fd) < 1e-3);
    }
}

TEST_CASE("first order and exact meta gradients coincide only at alpha zero") {
    const ArchSpec arch = tiny_cascade();
    const Model m = init_model(arch, 10);
    const MetaBatch mb = small_meta_batch(arch, 33);

    PretrainConfig exact, first;
    exact.meta_mode = MetaMode::Exact;
    first.meta_mode = MetaMode::FirstOrder;

    exact.alpha = first.alpha = 0.0;
    CHECK(meta_gradient(m, mb, exact) == meta_gradient(m, mb, first));

    exact.alpha = first.alpha = 1e-2;
    const std::vector<double> ge = meta_gradient(m, mb, exact);
    const std::vector<double> gf = meta_gradient(m, mb, first);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < ge.size(); ++i) max_diff = std::max(max_diff, std::abs(ge[i] - gf[i]));
    CHECK(max_diff > 1e-10);
}

TEST_CASE("exact meta gradient reaches the aux head through the curvature term") {
    const ArchSpec arch = tiny_cascade();
    const Layout layout = make_layout(arch);
    const Model m = init_model(arch, 11);
    const MetaBatch mb = small_meta_batch(arch, 35);

    PretrainConfig exact, first;
    exact.alpha = first.alpha = 1e-2;
    exact.meta_mode = MetaMode::Exact;
    first.meta_mode = MetaMode::FirstOrder;
    const std::vector<double> ge = meta_gradient(m, mb, exact);
    const std::vector<double> gf = meta_gradient(m, mb, first);

    double aux_diff = 0.0;
    for (std::size_t i = layout.theta_a.begin; i < layout.theta_a.end; ++i)
        aux_diff = std::max(aux_diff, std::abs(ge[i] - gf[i]));
    CHECK(aux_diff > 1e-12);
}

TEST_CASE("one step meta gradient decomposition") {
    const ArchSpec arch = tiny_cascade();
    const Model m = init_model(arch, 12);
    const MetaBatch mb = small_meta_batch(arch, 37);
    PretrainConfig cfg;
    cfg.alpha = 1e-3;

    const Theorem1Result r = theorem1_check(m, mb, cfg);
    CHECK(r.residual_at_psi < 1e-3);
    CHECK(std::isfinite(r.residual_at_psi_prime));
    CHECK(r.residual_at_psi_prime < 1e-2);
}

TEST_CASE("theorem check rejects parallel models") {
    const ArchSpec arch = tiny_parallel();
    const Model m = init_model(arch, 13);
    const MetaBatch mb = small_meta_batch(arch, 39);
    CHECK_THROWS_AS(theorem1_check(m, mb, PretrainConfig{}), MethodModelMismatchError);
}

TEST_CASE("outer step at zero rate moves statistics but not parameters") {
    const ArchSpec arch = tiny_cascade();
    Model m = init_model(arch, 14);
    const MetaBatch mb = small_meta_batch(arch, 41);
    PretrainConfig cfg;
    Optimizer opt({OptimKind::SgdNesterov, 0.0, 0.9}, m.params.size());

    const std::vector<double> params0 = m.params;
    const std::vector<double> mean0 = m.bn[0].mean;
    outer_step(m, mb, cfg, opt);
    CHECK(m.params == params0);
    CHECK(m.bn[0].mean != mean0);
}

TEST_CASE("repeated outer steps reduce the meta objective") {
    const ArchSpec arch = tiny_cascade();
    Model m = init_model(arch, 15);
    const MetaBatch mb = small_meta_batch(arch, 43);
    PretrainConfig cfg;
    cfg.alpha = 1e-2;
    Optimizer opt({OptimKind::SgdNesterov, 1e-2, 0.9}, m.params.size());

    const auto objective = composed_meta_objective(m, mb, cfg);
    const double before = objective(m.params);
    for (int i = 0; i < 100; ++i) outer_step(m, mb, cfg, opt);
    CHECK(objective(m.params) < before);
}

TEST_CASE("meta pretraining is deterministic") {
    const SourceData data = small_source(3);
    const ArchSpec arch;
    const PretrainConfig cfg = quick_config(2, 77);
    const PretrainResult a = meta_pretrain(data, arch, cfg);
    const PretrainResult b = meta_pretrain(data, arch, cfg);
    CHECK(serialize_checkpoint(a.checkpoint) == serialize_checkpoint(b.checkpoint));
    CHECK(a.checkpoint.method == "meta");
    CHECK(a.checkpoint.config_hash == fnv1a(pretrain_config_json(arch, cfg)));
}

TEST_CASE("zero epochs returns the initialization") {
    const SourceData data = small_source(4);
    const ArchSpec arch;
    const PretrainConfig cfg = quick_config(0, 5);
    const PretrainResult r = meta_pretrain(data, arch, cfg);
    CHECK(r.checkpoint.model.params == init_model(arch, cfg.seed).params);
    CHECK(r.report.epochs.empty());
}

TEST_CASE("meta pretraining fits the source task") {
    const SourceData data = gen_source(SourceSpec{});
    const PretrainResult r = meta_pretrain(data, ArchSpec{}, quick_config(30, 0));
    REQUIRE(r.report.epochs.size() == 30);
    CHECK(r.report.epochs.back().holdout_acc >= 0.95);
    CHECK(r.report.epochs.back().ce_loss < r.report.epochs.front().ce_loss);
}

TEST_CASE("erm never touches the aux head") {
    const SourceData data = gen_source(SourceSpec{});
    const ArchSpec arch;
    const Layout layout = make_layout(arch);
    const PretrainConfig cfg = quick_config(30, 0);
    const PretrainResult r = baseline_pretrain(PretrainMethod::Erm, data, arch, cfg);
    const Model init = init_model(arch, cfg.seed);

    for (std::size_t i = layout.theta_a.begin; i < layout.theta_a.end; ++i)
        CHECK(r.checkpoint.model.params[i] == init.params[i]);
    bool phi_moved = false;
    for (std::size_t i = layout.phi.begin; i < layout.phi.end && !phi_moved; ++i)
        phi_moved = r.checkpoint.model.params[i] != init.params[i];
    CHECK(phi_moved);
    CHECK(r.checkpoint.method == "erm");
    CHECK(r.report.epochs.back().holdout_acc >= 0.95);
}

TEST_CASE("mtl pretraining trains both heads") {
    const SourceData data = gen_source(SourceSpec{});
    const ArchSpec arch;
    const Layout layout = make_layout(arch);
    const PretrainConfig cfg = quick_config(30, 0);
    const PretrainResult r = mtl_pretrain(data, arch, cfg);
    const Model init = init_model(arch, cfg.seed);

    bool aux_moved = false;
    for (std::size_t i = layout.theta_a.begin; i < layout.theta_a.end && !aux_moved; ++i)
        aux_moved = r.checkpoint.model.params[i] != init.params[i];
    CHECK(aux_moved);
    CHECK(r.report.epochs.back().holdout_acc >= 0.95);
}

TEST_CASE("ttt pretraining fits the class and rotation heads") {
    const SourceData data = gen_source(SourceSpec{});
    ArchSpec arch;
    arch.paradigm = Paradigm::Parallel;
    const PretrainConfig cfg = quick_config(30, 0);
    const PretrainResult r = baseline_pretrain(PretrainMethod::Ttt, data, arch, cfg);
    CHECK(r.report.epochs.back().holdout_acc >= 0.95);

    const Model& m = r.checkpoint.model;
    auto [ssl_x, ssl_y] = ssl_transform_labels(data.holdout.x);
    ModelGraph mg = build_model_graph(m, data.holdout.x.shape[0], BnMode::RunningStats, ssl_x.shape[0]);
    mg.g.bind_input(mg.x, data.holdout.x);
    mg.g.bind_input(mg.x_aux, ssl_x);
    mg.g.forward(mg.aux_logits);
    const auto pred = argmax_rows(mg.g.value(mg.aux_logits));
    std::int64_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == ssl_y[i];
    // Rotation signal lives in two of sixteen coordinates, so the task stays
    // partly ambiguous; well above the 0.25 chance rate is what fitting means.
    CHECK(static_cast<double>(hits) / static_cast<double>(pred.size()) > 0.4);
}

TEST_CASE("ttt meta at alpha zero is the joint validation gradient") {
    const ArchSpec arch = tiny_parallel();
    const Model m = init_model(arch, 16);
    const MetaBatch mb = small_meta_batch(arch, 45);
    PretrainConfig cfg;
    cfg.alpha = 0.0;

    const std::vector<double> grad = meta_gradient(m, mb, cfg);

    auto [ssl_x, ssl_y] = ssl_transform_labels(mb.val_x);
    ModelGraph mg = build_model_graph(m, mb.val_x.shape[0], BnMode::TrainStats, ssl_x.shape[0]);
    mg.g.bind_input(mg.x, mb.val_x);
    mg.g.bind_input(mg.x_aux, ssl_x);
    const NodeId ce = cross_entropy_node(mg.g, mg.main_logits, mb.val_y);
    const NodeId root = mg.g.add(ce, mg.g.scale(cross_entropy_node(mg.g, mg.aux_logits, ssl_y), cfg.lambda));
    mg.g.forward(root);
    CHECK(grad == mg.g.backward(root).flat());
}

TEST_CASE("method and paradigm must agree") {
    const SourceData data = small_source(9);
    const PretrainConfig cfg = quick_config(1, 1);
    ArchSpec cascade, parallel;
    parallel.paradigm = Paradigm::Parallel;

    CHECK_THROWS_AS(meta_pretrain(data, parallel, cfg), MethodModelMismatchError);
    CHECK_THROWS_AS(mtl_pretrain(data, parallel, cfg), MethodModelMismatchError);
    CHECK_THROWS_AS(pretrain(PretrainMethod::Erm, data, parallel, cfg), MethodModelMismatchError);
    CHECK_THROWS_AS(pretrain(PretrainMethod::Ttt, data, cascade, cfg), MethodModelMismatchError);
    CHECK_THROWS_AS(pretrain(PretrainMethod::TttMeta, data, cascade, cfg), MethodModelMismatchError);
}

TEST_CASE("pretraining rejects bad loop settings") {
    const SourceData data = small_source(10);
    PretrainConfig cfg = quick_config(-1, 1);
    CHECK_THROWS_AS(meta_pretrain(data, ArchSpec{}, cfg), InvalidConfigError);
    cfg.epochs = 1;
    cfg.batch_size = 1;
    CHECK_THROWS_AS(meta_pretrain(data, ArchSpec{}, cfg), InvalidConfigError);
}

TEST_CASE("reports carry one row per epoch") {
    const SourceData data = small_source(11);
    const PretrainResult r = baseline_pretrain(PretrainMethod::Erm, data, ArchSpec{}, quick_config(3, 2));

    const std::string csv = report_csv(r.report);
    CHECK(csv.rfind("epoch,ce_loss,ent_loss,holdout_acc\n", 0) == 0);
    std::size_t lines = 0;
    for (char c : csv) lines += c == '\n';
    CHECK(lines == 4);
    CHECK(csv.find("\n1,") != std::string::npos);

    const nlohmann::json j = nlohmann::json::parse(report_json(r.report));
    CHECK(j.at("epochs").size() == 3);
    CHECK(j.at("final_holdout_acc").get<double>() == r.report.epochs.back().holdout_acc);
}

TEST_CASE("frozen evaluation never mutates the model") {
    const SourceData data = small_source(12);
    const Model m = init_model(ArchSpec{}, 30);
    const std::vector<double> mean0 = m.bn[0].mean;
    const EvalResult ev = frozen_eval(m, data.holdout.x, data.holdout.y);
    CHECK(m.bn[0].mean == mean0);
    CHECK(ev.accuracy >= 0.0);
    CHECK(ev.accuracy <= 1.0);
    CHECK(std::isfinite(ev.ce));
    CHECK(ev.entropy >= 0.0);
    CHECK(ev.entropy <= std::log(5.0) + 1e-12);
}

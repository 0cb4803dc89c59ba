#include "ctta/verify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "ctta/adapt.hpp"
#include "ctta/data.hpp"
#include "ctta/errors.hpp"
#include "ctta/fd.hpp"
#include "ctta/losses.hpp"
#include "ctta/metrics.hpp"
#include "ctta/model.hpp"
#include "ctta/pretrain.hpp"
#include "ctta/rng.hpp"

namespace ctta {

namespace {

Value random_batch(std::int64_t rows, std::int64_t cols, Rng& rng) {
    Value v = Value::zeros({rows, cols});
    for (double& x : v.data) x = rng.normal();
    return v;
}

std::vector<int> random_labels(std::int64_t rows, int num_classes, Rng& rng) {
    std::vector<int> y(static_cast<std::size_t>(rows));
    for (int& l : y) l = rng.uniform_int(num_classes);
    return y;
}

ArchSpec probe_arch(Paradigm paradigm) {
    ArchSpec a;
    a.paradigm = paradigm;
    a.input_dim = 4;
    a.phi_widths = {5};
    a.num_classes = 3;
    a.aux_hidden = 4;
    return a;
}

// Max relative error between the recorded gradient of the loss at `root` and
// central finite differences over every parameter.
double gradcheck_loss(ModelGraph& mg, NodeId root, const std::vector<double>& at) {
    mg.g.forward(root);
    const std::vector<double> grad = mg.g.backward(root).flat();
    const auto objective = [&mg, root](const std::vector<double>& p) {
        bind_flat_params(mg.g, p);
        return mg.g.forward(root).data[0];
    };
    const std::vector<double> fd = finite_diff_grad(objective, at);
    bind_flat_params(mg.g, at);
    return max_rel_err(grad, fd);
}

std::string format_dev(double dev) {
    std::ostringstream out;
    out.precision(3);
    out << std::scientific << dev;
    return out.str();
}

}  // namespace

SuiteResult verify_gradcheck() {
    constexpr double kTol = 1e-4;
    double worst = 0.0;
    for (int pair = 0; pair < 20; ++pair) {
        const Paradigm paradigm = pair % 2 == 0 ? Paradigm::Cascade : Paradigm::Parallel;
        const ArchSpec arch = probe_arch(paradigm);
        Model m = init_model(arch, 1000 + static_cast<std::uint64_t>(pair));
        Rng rng(2000 + static_cast<std::uint64_t>(pair));

        // Fresh init puts every bias exactly at zero, so a row whose relu'd
        // features all die lands the next preactivation exactly on the kink,
        // where central differences straddle two linear pieces. Jitter to a
        // generic point first.
        for (double& p : m.params) p += rng.uniform(-0.05, 0.05);

        // Move the stored statistics off their init values so the
        // RunningStats backward path is exercised away from identity.
        model_forward(m, random_batch(6, arch.input_dim, rng), BnMode::TrainStats, /*update_stats=*/true);

        const BnMode mode = pair % 3 == 0   ? BnMode::TrainStats
                            : pair % 3 == 1 ? BnMode::RunningStats
                                            : BnMode::BatchStats;
        const Value x = random_batch(6, arch.input_dim, rng);
        const std::vector<int> y = random_labels(6, static_cast<int>(arch.num_classes), rng);

        if (paradigm == Paradigm::Cascade) {
            ModelGraph mg = build_model_graph(m, 6, mode);
            mg.g.bind_input(mg.x, x);
            worst = std::max(worst, gradcheck_loss(mg, cross_entropy_node(mg.g, mg.main_logits, y), m.params));
            worst = std::max(worst, gradcheck_loss(mg, entropy_node(mg.g, mg.aux_logits), m.params));
        } else {
            auto [ssl_x, ssl_y] = ssl_transform_labels(x);
            ModelGraph mg = build_model_graph(m, 6, mode, ssl_x.shape[0]);
            mg.g.bind_input(mg.x, x);
            mg.g.bind_input(mg.x_aux, ssl_x);
            worst = std::max(worst, gradcheck_loss(mg, cross_entropy_node(mg.g, mg.main_logits, y), m.params));
            worst = std::max(worst, gradcheck_loss(mg, cross_entropy_node(mg.g, mg.aux_logits, ssl_y), m.params));
        }
    }
    SuiteResult r;
    r.name = "gradcheck";
    r.max_deviation = worst;
    r.pass = worst < kTol;
    r.detail = "max relative error " + format_dev(worst) + " over 20 model/batch pairs, all losses (tolerance 1e-04)";
    return r;
}

SuiteResult verify_theorem1() {
    constexpr double kTol = 1e-3;
    double worst = 0.0, worst_prime = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        const ArchSpec arch = probe_arch(Paradigm::Cascade);
        const Model m = init_model(arch, 3000 + static_cast<std::uint64_t>(trial));
        Rng rng(4000 + static_cast<std::uint64_t>(trial));
        const Value x = random_batch(16, arch.input_dim, rng);
        const MetaBatch mb = split_meta_batch(x, random_labels(16, static_cast<int>(arch.num_classes), rng), 0.5);

        PretrainConfig cfg;
        cfg.alpha = 1e-3;
        const Theorem1Result res = theorem1_check(m, mb, cfg);
        worst = std::max(worst, res.residual_at_psi);
        worst_prime = std::max(worst_prime, res.residual_at_psi_prime);
    }
    SuiteResult r;
    r.name = "theorem1";
    r.max_deviation = worst;
    r.pass = worst < kTol;
    r.detail = "max decomposition residual " + format_dev(worst) + " with the Hessian at the pre-update point " +
               "(tolerance 1e-03); residual with the Hessian at the adapted point: " + format_dev(worst_prime) +
               " (reported only)";
    return r;
}

SuiteResult verify_metrics() {
    constexpr double kTol = 1e-12;
    Rng rng(4242);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::int64_t n = 2 + static_cast<std::int64_t>(rng.uniform_int(31));
        AccuracyMatrix m;
        m.n = n;
        m.r.assign(static_cast<std::size_t>(n),
                   std::vector<double>(static_cast<std::size_t>(n), std::numeric_limits<double>::quiet_NaN()));
        m.solo.assign(static_cast<std::size_t>(n), std::numeric_limits<double>::quiet_NaN());
        for (std::int64_t i = 0; i < n; ++i) {
            const auto ui = static_cast<std::size_t>(i);
            m.r[ui][static_cast<std::size_t>(n - 1)] = rng.uniform();
            m.r[ui][ui] = rng.uniform();
            m.solo[ui] = rng.uniform();
        }

        double a_ref = 0.0;
        for (std::int64_t i = n - 1; i >= 0; --i)
            a_ref += m.r[static_cast<std::size_t>(i)][static_cast<std::size_t>(n - 1)];
        a_ref /= static_cast<double>(n);
        double f_ref = 0.0;
        for (std::int64_t t = n - 1; t >= 1; --t)
            f_ref += m.r[static_cast<std::size_t>(t)][static_cast<std::size_t>(t)] - m.solo[static_cast<std::size_t>(t)];
        f_ref /= static_cast<double>(n - 1);

        worst = std::max(worst, std::abs(average_accuracy(m) - a_ref));
        worst = std::max(worst, std::abs(forward_transfer(m) - f_ref));
    }

    SourceSpec source;
    source.n_train = 64;
    source.n_holdout = 32;
    source.seed = 5;
    StreamConfig scfg;
    scfg.kinds = {TransformKind::GaussNoise, TransformKind::Scale};
    scfg.batch_size = 8;
    scfg.batches_per_domain = 2;
    scfg.holdout_size = 16;
    scfg.seed = 5;
    AdaptConfig acfg;
    acfg.method = AdaptMethod::Erm;
    const Checkpoint ckpt{init_model(ArchSpec{}, 5), "erm", 5, 0};
    const double erm_f = forward_transfer(accuracy_matrix(ckpt, build_stream(source, scfg), acfg));

    SuiteResult r;
    r.name = "metrics";
    r.max_deviation = worst;
    r.pass = worst < kTol && erm_f == 0.0;
    r.detail = "max disagreement with independent arithmetic " + format_dev(worst) +
               " over 1000 random matrices (tolerance 1e-12); erm forward transfer = " + format_dev(erm_f) +
               " (must be exactly zero)";
    return r;
}

SuiteResult verify_bn() {
    constexpr double kMeanTol = 1e-8, kVarTol = 1e-6;
    double worst_mean = 0.0, worst_var = 0.0;
    for (std::int64_t rows : {2, 16, 128}) {
        for (std::int64_t cols : {3, 7}) {
            for (std::uint64_t seed = 0; seed < 3; ++seed) {
                Rng rng(mix_seed(7000 + static_cast<std::uint64_t>(rows), mix_seed(seed, static_cast<std::uint64_t>(cols))));
                Graph g;
                const NodeId x = g.input(random_batch(rows, cols, rng));
                const NodeId gamma = g.param(Value({cols}, std::vector<double>(static_cast<std::size_t>(cols), 1.0)));
                const NodeId beta = g.param(Value::zeros({cols}));
                const std::vector<double> zeros(static_cast<std::size_t>(cols), 0.0);
                const std::vector<double> ones(static_cast<std::size_t>(cols), 1.0);
                const NodeId bn = g.batch_norm(x, gamma, beta, BnMode::BatchStats, zeros, ones, 1e-12);
                const Value& out = g.forward(bn);

                for (std::int64_t c = 0; c < cols; ++c) {
                    double mean = 0.0;
                    for (std::int64_t rrow = 0; rrow < rows; ++rrow) mean += out.at(rrow, c);
                    mean /= static_cast<double>(rows);
                    double var = 0.0;
                    for (std::int64_t rrow = 0; rrow < rows; ++rrow)
                        var += (out.at(rrow, c) - mean) * (out.at(rrow, c) - mean);
                    var /= static_cast<double>(rows);
                    worst_mean = std::max(worst_mean, std::abs(mean));
                    worst_var = std::max(worst_var, std::abs(var - 1.0));
                }
            }
        }
    }
    SuiteResult r;
    r.name = "bn";
    r.max_deviation = std::max(worst_mean, worst_var);
    r.pass = worst_mean < kMeanTol && worst_var < kVarTol;
    r.detail = "batch sizes {2,16,128}: max |column mean| " + format_dev(worst_mean) +
               " (tolerance 1e-08), max |column variance - 1| " + format_dev(worst_var) + " (tolerance 1e-06)";
    return r;
}

SuiteResult run_suite(std::string_view name) {
    if (name == "gradcheck") return verify_gradcheck();
    if (name == "theorem1") return verify_theorem1();
    if (name == "metrics") return verify_metrics();
    if (name == "bn") return verify_bn();
    throw InvalidConfigError("unknown verification suite: " + std::string(name) +
                             " (valid: gradcheck, theorem1, metrics, bn)");
}

std::vector<SuiteResult> run_all_suites() {
    return {verify_gradcheck(), verify_theorem1(), verify_metrics(), verify_bn()};
}

}  // namespace ctta

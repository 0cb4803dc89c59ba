#include "ctta/pretrain.hpp"

#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "ctta/errors.hpp"
#include "ctta/fd.hpp"
#include "ctta/losses.hpp"
#include "ctta/rng.hpp"

namespace ctta {

namespace {

using json = nlohmann::json;

double l2(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

double lr_scale_at(const PretrainConfig& cfg, std::int64_t t, std::int64_t total) {
    if (cfg.lr_decay == LrDecay::Constant || total <= 0) return 1.0;
    return 1.0 - static_cast<double>(t) / static_cast<double>(total);
}

Value gather_rows(const Value& x, const std::vector<std::int64_t>& idx, std::int64_t begin, std::int64_t count) {
    const std::int64_t f = x.shape[1];
    Value out = Value::zeros({count, f});
    for (std::int64_t r = 0; r < count; ++r) {
        const std::int64_t src = idx[static_cast<std::size_t>(begin + r)];
        for (std::int64_t c = 0; c < f; ++c) out.at(r, c) = x.at(src, c);
    }
    return out;
}

std::vector<int> gather_labels(const std::vector<int>& y, const std::vector<std::int64_t>& idx, std::int64_t begin,
                               std::int64_t count) {
    std::vector<int> out(static_cast<std::size_t>(count));
    for (std::int64_t r = 0; r < count; ++r)
        out[static_cast<std::size_t>(r)] = y[static_cast<std::size_t>(idx[static_cast<std::size_t>(begin + r)])];
    return out;
}

// Inner graph plus its loss root, paradigm-specific: cascade minimizes aux
// entropy over ψ, parallel minimizes the rotation-prediction loss over φ.
struct InnerGraph {
    ModelGraph mg;
    NodeId root = -1;
    std::size_t update_end = 0;  // inner step touches flat indices [0, update_end)
};

InnerGraph make_inner_graph(const Model& m, const Value& trn_x) {
    const Layout layout = make_layout(m.arch);
    InnerGraph ig;
    if (m.arch.paradigm == Paradigm::Cascade) {
        ig.mg = build_model_graph(m, trn_x.shape[0], BnMode::TrainStats);
        ig.mg.g.bind_input(ig.mg.x, trn_x);
        ig.root = entropy_node(ig.mg.g, ig.mg.aux_logits);
        ig.update_end = layout.theta_m.end;
    } else {
        auto [ssl_x, ssl_y] = ssl_transform_labels(trn_x);
        ig.mg = build_model_graph(m, trn_x.shape[0], BnMode::TrainStats, ssl_x.shape[0]);
        ig.mg.g.bind_input(ig.mg.x, trn_x);
        ig.mg.g.bind_input(ig.mg.x_aux, ssl_x);
        ig.root = cross_entropy_node(ig.mg.g, ig.mg.aux_logits, ssl_y);
        ig.update_end = layout.phi.end;
    }
    ig.mg.g.forward(ig.root);
    return ig;
}

struct OuterGraph {
    ModelGraph mg;
    NodeId ce = -1, ssl = -1, root = -1;
};

OuterGraph make_outer_graph(const Model& at_prime, const MetaBatch& mb, double lambda) {
    OuterGraph og;
    if (at_prime.arch.paradigm == Paradigm::Cascade) {
        og.mg = build_model_graph(at_prime, mb.val_x.shape[0], BnMode::TrainStats);
        og.mg.g.bind_input(og.mg.x, mb.val_x);
        og.ce = cross_entropy_node(og.mg.g, og.mg.main_logits, mb.val_y);
        og.ssl = entropy_node(og.mg.g, og.mg.aux_logits);
    } else {
        auto [ssl_x, ssl_y] = ssl_transform_labels(mb.val_x);
        og.mg = build_model_graph(at_prime, mb.val_x.shape[0], BnMode::TrainStats, ssl_x.shape[0]);
        og.mg.g.bind_input(og.mg.x, mb.val_x);
        og.mg.g.bind_input(og.mg.x_aux, ssl_x);
        og.ce = cross_entropy_node(og.mg.g, og.mg.main_logits, mb.val_y);
        og.ssl = cross_entropy_node(og.mg.g, og.mg.aux_logits, ssl_y);
    }
    og.root = og.mg.g.add(og.ce, og.mg.g.scale(og.ssl, lambda));
    og.mg.g.forward(og.root);
    return og;
}

struct MetaParts {
    std::vector<double> grad;
    std::vector<double> params_prime;
    double inner_loss = 0.0;
    double outer_ce = 0.0, outer_ssl = 0.0;
    std::vector<std::vector<double>> inner_mean, inner_var;  // per φ block
};

MetaParts meta_parts(const Model& m, const MetaBatch& mb, const PretrainConfig& cfg) {
    MetaParts out;

    InnerGraph ig = make_inner_graph(m, mb.trn_x);
    out.inner_loss = ig.mg.g.value(ig.root).data[0];
    for (NodeId bn : ig.mg.bn_main) {
        out.inner_mean.push_back(ig.mg.g.bn_mean(bn));
        out.inner_var.push_back(ig.mg.g.bn_var(bn));
    }
    const std::vector<double> inner_grad = ig.mg.g.backward(ig.root).flat();

    out.params_prime = m.params;
    for (std::size_t i = 0; i < ig.update_end; ++i) out.params_prime[i] -= cfg.alpha * inner_grad[i];

    Model at_prime = m;
    at_prime.params = out.params_prime;
    OuterGraph og = make_outer_graph(at_prime, mb, cfg.lambda);
    out.outer_ce = og.mg.g.value(og.ce).data[0];
    out.outer_ssl = og.mg.g.value(og.ssl).data[0];
    out.grad = og.mg.g.backward(og.root).flat();

    if (cfg.meta_mode == MetaMode::Exact && cfg.alpha != 0.0) {
        std::vector<double> v = out.grad;
        for (std::size_t i = ig.update_end; i < v.size(); ++i) v[i] = 0.0;
        if (l2(v) > 0.0) {
            auto grad_fn = [&ig](const std::vector<double>& p) {
                bind_flat_params(ig.mg.g, p);
                ig.mg.g.forward(ig.root);
                return ig.mg.g.backward(ig.root).flat();
            };
            const std::vector<double> hvp = hvp_fd(grad_fn, m.params, v, 1e-5);
            for (std::size_t i = 0; i < out.grad.size(); ++i) out.grad[i] -= cfg.alpha * hvp[i];
        }
    }
    if (!all_finite(out.grad)) throw NonFiniteError("meta_gradient: non-finite result");
    return out;
}

void blend_stats(Model& m, const std::vector<std::vector<double>>& mean, const std::vector<std::vector<double>>& var) {
    const double mom = m.arch.bn_momentum;
    for (std::size_t b = 0; b < m.bn.size(); ++b)
        for (std::size_t j = 0; j < m.bn[b].mean.size(); ++j) {
            m.bn[b].mean[j] = (1.0 - mom) * m.bn[b].mean[j] + mom * mean[b][j];
            m.bn[b].var[j] = (1.0 - mom) * m.bn[b].var[j] + mom * var[b][j];
        }
}

void require_paradigm(PretrainMethod method, const ArchSpec& arch) {
    const bool wants_parallel = method == PretrainMethod::Ttt || method == PretrainMethod::TttMeta;
    const bool is_parallel = arch.paradigm == Paradigm::Parallel;
    if (wants_parallel != is_parallel)
        throw MethodModelMismatchError(std::string(pretrain_method_name(method)) + " requires a " +
                                       (wants_parallel ? "parallel" : "cascade") + " architecture");
}

// Shared epoch loop: shuffle, chunk into full batches, run the per-batch
// step, then record frozen holdout stats.
PretrainResult run_loop(const SourceData& data, const ArchSpec& arch, const PretrainConfig& cfg,
                        const std::string& tag, double base_lr,
                        const std::function<void(Model&, Optimizer&, const Value&, const std::vector<int>&, Rng&,
                                                 double)>& step) {
    if (cfg.epochs < 0) throw InvalidConfigError("pretrain: negative epoch count");
    if (cfg.batch_size < 2) throw InvalidConfigError("pretrain: batch size must be at least 2");

    Model model = init_model(arch, cfg.seed);
    Optimizer opt({cfg.optimizer, base_lr, cfg.momentum}, model.params.size());
    Rng rng(mix_seed(cfg.seed, 0x5EED));

    const std::int64_t n = data.train.size();
    const std::int64_t nb = n / cfg.batch_size;
    const std::int64_t total = cfg.epochs * nb;
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);

    PretrainResult out;
    std::int64_t t = 0;
    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(idx);
        for (std::int64_t b = 0; b < nb; ++b) {
            const Value bx = gather_rows(data.train.x, idx, b * cfg.batch_size, cfg.batch_size);
            const std::vector<int> by = gather_labels(data.train.y, idx, b * cfg.batch_size, cfg.batch_size);
            step(model, opt, bx, by, rng, lr_scale_at(cfg, t, total));
            ++t;
        }
        const EvalResult ev = frozen_eval(model, data.holdout.x, data.holdout.y);
        out.report.epochs.push_back({ev.ce, ev.entropy, ev.accuracy});
    }
    out.checkpoint = Checkpoint{std::move(model), tag, cfg.seed, fnv1a(pretrain_config_json(arch, cfg))};
    return out;
}

}  // namespace

const char* pretrain_method_name(PretrainMethod m) {
    switch (m) {
        case PretrainMethod::Meta: return "meta";
        case PretrainMethod::Mtl: return "mtl";
        case PretrainMethod::Erm: return "erm";
        case PretrainMethod::Ttt: return "ttt";
        case PretrainMethod::TttMeta: return "ttt_meta";
    }
    return "?";
}

PretrainMethod pretrain_method_from_name(std::string_view name) {
    for (PretrainMethod m : {PretrainMethod::Meta, PretrainMethod::Mtl, PretrainMethod::Erm, PretrainMethod::Ttt,
                             PretrainMethod::TttMeta})
        if (name == pretrain_method_name(m)) return m;
    throw InvalidConfigError("unknown pretrain method: " + std::string(name) +
                             " (expected meta, mtl, erm, ttt or ttt_meta)");
}

EvalResult frozen_eval(const Model& m, const Value& x, const std::vector<int>& y) {
    const ForwardResult fw = model_forward(m, x, BnMode::RunningStats);
    EvalResult ev;
    ev.ce = cross_entropy_of_logits(fw.main_logits, y);
    ev.entropy = entropy_of_logits(fw.main_logits);
    const auto pred = argmax_rows(fw.main_logits);
    std::int64_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == y[i];
    ev.accuracy = static_cast<double>(hits) / static_cast<double>(pred.size());
    return ev;
}

InnerStepResult inner_step(Model& m, const Value& trn_x, double alpha, bool update_stats) {
    InnerGraph ig = make_inner_graph(m, trn_x);
    InnerStepResult out;
    out.inner_loss = ig.mg.g.value(ig.root).data[0];
    out.inner_grad = ig.mg.g.backward(ig.root).flat();
    out.params_prime = m.params;
    for (std::size_t i = 0; i < ig.update_end; ++i) out.params_prime[i] -= alpha * out.inner_grad[i];
    if (update_stats) refresh_bn_stats(m, ig.mg, BnMode::TrainStats);
    return out;
}

std::vector<double> meta_gradient(const Model& m, const MetaBatch& mb, const PretrainConfig& cfg) {
    return meta_parts(m, mb, cfg).grad;
}

std::function<double(const std::vector<double>&)> composed_meta_objective(const Model& m, const MetaBatch& mb,
                                                                          const PretrainConfig& cfg) {
    auto inner = std::make_shared<InnerGraph>(make_inner_graph(m, mb.trn_x));
    auto outer = std::make_shared<OuterGraph>(make_outer_graph(m, mb, cfg.lambda));
    const double alpha = cfg.alpha;
    return [inner, outer, alpha](const std::vector<double>& params) {
        bind_flat_params(inner->mg.g, params);
        inner->mg.g.forward(inner->root);
        const std::vector<double> g = inner->mg.g.backward(inner->root).flat();
        std::vector<double> prime = params;
        for (std::size_t i = 0; i < inner->update_end; ++i) prime[i] -= alpha * g[i];
        bind_flat_params(outer->mg.g, prime);
        return outer->mg.g.forward(outer->root).data[0];
    };
}

void outer_step(Model& m, const MetaBatch& mb, const PretrainConfig& cfg, Optimizer& opt, double lr_scale) {
    const MetaParts parts = meta_parts(m, mb, cfg);
    opt.step(m.params, parts.grad, lr_scale);
    blend_stats(m, parts.inner_mean, parts.inner_var);
}

PretrainResult meta_pretrain(const SourceData& data, const ArchSpec& arch, const PretrainConfig& cfg) {
    require_paradigm(PretrainMethod::Meta, arch);
    return run_loop(data, arch, cfg, "meta", cfg.beta,
                    [&cfg](Model& model, Optimizer& opt, const Value& bx, const std::vector<int>& by, Rng& rng,
                           double scale) {
                        const Transform tr = sample_transform(cfg.kinds, cfg.severities, rng);
                        MetaBatch mb = split_meta_batch(apply_transform(bx, tr, rng), by, cfg.split_ratio);
                        mb.transform = tr;
                        outer_step(model, mb, cfg, opt, scale);
                    });
}

PretrainResult mtl_pretrain(const SourceData& data, const ArchSpec& arch, const PretrainConfig& cfg) {
    require_paradigm(PretrainMethod::Mtl, arch);
    return run_loop(data, arch, cfg, "mtl", cfg.alpha,
                    [&cfg](Model& model, Optimizer& opt, const Value& bx, const std::vector<int>& by, Rng& rng,
                           double scale) {
                        const Transform tr = sample_transform(cfg.kinds, cfg.severities, rng);
                        const Value tx = apply_transform(bx, tr, rng);
                        ModelGraph mg = build_model_graph(model, tx.shape[0], BnMode::TrainStats);
                        mg.g.bind_input(mg.x, tx);
                        auto ce = cross_entropy_node(mg.g, mg.main_logits, by);
                        auto root = mg.g.add(ce, mg.g.scale(entropy_node(mg.g, mg.aux_logits), cfg.lambda));
                        mg.g.forward(root);
                        opt.step(model.params, mg.g.backward(root).flat(), scale);
                        refresh_bn_stats(model, mg, BnMode::TrainStats);
                    });
}

PretrainResult baseline_pretrain(PretrainMethod method, const SourceData& data, const ArchSpec& arch,
                                 const PretrainConfig& cfg) {
    require_paradigm(method, arch);
    switch (method) {
        case PretrainMethod::Erm:
            return run_loop(data, arch, cfg, "erm", cfg.beta,
                            [](Model& model, Optimizer& opt, const Value& bx, const std::vector<int>& by, Rng&,
                               double scale) {
                                ModelGraph mg = build_model_graph(model, bx.shape[0], BnMode::TrainStats);
                                mg.g.bind_input(mg.x, bx);
                                auto root = cross_entropy_node(mg.g, mg.main_logits, by);
                                mg.g.forward(root);
                                opt.step(model.params, mg.g.backward(root).flat(), scale);
                                refresh_bn_stats(model, mg, BnMode::TrainStats);
                            });
        case PretrainMethod::Ttt:
            return run_loop(data, arch, cfg, "ttt", cfg.beta,
                            [&cfg](Model& model, Optimizer& opt, const Value& bx, const std::vector<int>& by, Rng&,
                                   double scale) {
                                auto [ssl_x, ssl_y] = ssl_transform_labels(bx);
                                ModelGraph mg =
                                    build_model_graph(model, bx.shape[0], BnMode::TrainStats, ssl_x.shape[0]);
                                mg.g.bind_input(mg.x, bx);
                                mg.g.bind_input(mg.x_aux, ssl_x);
                                auto ce = cross_entropy_node(mg.g, mg.main_logits, by);
                                auto ssl = cross_entropy_node(mg.g, mg.aux_logits, ssl_y);
                                auto root = mg.g.add(ce, mg.g.scale(ssl, cfg.lambda));
                                mg.g.forward(root);
                                opt.step(model.params, mg.g.backward(root).flat(), scale);
                                refresh_bn_stats(model, mg, BnMode::TrainStats);
                            });
        case PretrainMethod::TttMeta:
            return run_loop(data, arch, cfg, "ttt_meta", cfg.beta,
                            [&cfg](Model& model, Optimizer& opt, const Value& bx, const std::vector<int>& by,
                                   Rng& rng, double scale) {
                                const Transform tr = sample_transform(cfg.kinds, cfg.severities, rng);
                                MetaBatch mb = split_meta_batch(apply_transform(bx, tr, rng), by, cfg.split_ratio);
                                mb.transform = tr;
                                outer_step(model, mb, cfg, opt, scale);
                            });
        default:
            throw InvalidConfigError("baseline_pretrain handles erm, ttt and ttt_meta only");
    }
}

PretrainResult pretrain(PretrainMethod method, const SourceData& data, const ArchSpec& arch,
                        const PretrainConfig& cfg) {
    switch (method) {
        case PretrainMethod::Meta: return meta_pretrain(data, arch, cfg);
        case PretrainMethod::Mtl: return mtl_pretrain(data, arch, cfg);
        default: return baseline_pretrain(method, data, arch, cfg);
    }
}

std::string pretrain_config_json(const ArchSpec& arch, const PretrainConfig& cfg) {
    json kinds = json::array();
    for (TransformKind k : cfg.kinds) kinds.push_back(kind_name(k));
    const json j{
        {"arch",
         {{"paradigm", arch.paradigm == Paradigm::Cascade ? "cascade" : "parallel"},
          {"input_dim", arch.input_dim},
          {"phi_widths", arch.phi_widths},
          {"num_classes", arch.num_classes},
          {"aux_hidden", arch.aux_hidden},
          {"bn_momentum", arch.bn_momentum},
          {"bn_epsilon", arch.bn_epsilon}}},
        {"alpha", cfg.alpha},
        {"beta", cfg.beta},
        {"lambda", cfg.lambda},
        {"epochs", cfg.epochs},
        {"batch_size", cfg.batch_size},
        {"optimizer", cfg.optimizer == OptimKind::Sgd ? "sgd" : (cfg.optimizer == OptimKind::SgdNesterov ? "sgd_nesterov" : "adam")},
        {"momentum", cfg.momentum},
        {"lr_decay", cfg.lr_decay == LrDecay::Constant ? "constant" : "linear"},
        {"meta_mode", cfg.meta_mode == MetaMode::Exact ? "exact" : "first_order"},
        {"split_ratio", cfg.split_ratio},
        {"kinds", kinds},
        {"severities", cfg.severities},
        {"seed", cfg.seed}};
    return j.dump();
}

std::pair<ArchSpec, PretrainConfig> parse_pretrain_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw InvalidConfigError(std::string("pretrain config is not valid JSON: ") + e.what());
    }
    auto read = [](const json& obj, const char* key, auto& into) {
        if (!obj.contains(key)) return;
        try {
            into = obj.at(key).get<std::decay_t<decltype(into)>>();
        } catch (const json::exception& e) {
            throw InvalidConfigError(std::string("pretrain config field '") + key + "': " + e.what());
        }
    };
    auto read_tag = [&read](const json& obj, const char* key, auto& into,
                            std::initializer_list<std::pair<const char*, std::decay_t<decltype(into)>>> tags) {
        std::string tag;
        read(obj, key, tag);
        if (tag.empty()) return;
        for (const auto& [name, v] : tags)
            if (tag == name) {
                into = v;
                return;
            }
        throw InvalidConfigError(std::string("pretrain config field '") + key + "': unknown tag: " + tag);
    };

    ArchSpec arch;
    PretrainConfig cfg;
    if (j.contains("arch")) {
        const json& a = j.at("arch");
        read_tag(a, "paradigm", arch.paradigm, {{"cascade", Paradigm::Cascade}, {"parallel", Paradigm::Parallel}});
        read(a, "input_dim", arch.input_dim);
        read(a, "phi_widths", arch.phi_widths);
        read(a, "num_classes", arch.num_classes);
        read(a, "aux_hidden", arch.aux_hidden);
        read(a, "bn_momentum", arch.bn_momentum);
        read(a, "bn_epsilon", arch.bn_epsilon);
    }
    read(j, "alpha", cfg.alpha);
    read(j, "beta", cfg.beta);
    read(j, "lambda", cfg.lambda);
    read(j, "epochs", cfg.epochs);
    read(j, "batch_size", cfg.batch_size);
    read_tag(j, "optimizer", cfg.optimizer,
             {{"sgd", OptimKind::Sgd}, {"sgd_nesterov", OptimKind::SgdNesterov}, {"adam", OptimKind::Adam}});
    read(j, "momentum", cfg.momentum);
    read_tag(j, "lr_decay", cfg.lr_decay, {{"constant", LrDecay::Constant}, {"linear", LrDecay::Linear}});
    read_tag(j, "meta_mode", cfg.meta_mode, {{"exact", MetaMode::Exact}, {"first_order", MetaMode::FirstOrder}});
    read(j, "split_ratio", cfg.split_ratio);
    if (j.contains("kinds")) {
        cfg.kinds.clear();
        try {
            for (const auto& name : j.at("kinds")) cfg.kinds.push_back(kind_from_name(name.get<std::string>()));
        } catch (const json::exception& e) {
            throw InvalidConfigError(std::string("pretrain config field 'kinds': ") + e.what());
        }
    }
    read(j, "severities", cfg.severities);
    read(j, "seed", cfg.seed);
    return {arch, cfg};
}

std::string report_csv(const PretrainReport& r) {
    std::ostringstream out;
    out.precision(17);
    out << "epoch,ce_loss,ent_loss,holdout_acc\n";
    for (std::size_t e = 0; e < r.epochs.size(); ++e)
        out << (e + 1) << ',' << r.epochs[e].ce_loss << ',' << r.epochs[e].ent_loss << ','
            << r.epochs[e].holdout_acc << '\n';
    return out.str();
}

std::string report_json(const PretrainReport& r) {
    json epochs = json::array();
    for (const auto& e : r.epochs)
        epochs.push_back({{"ce_loss", e.ce_loss}, {"ent_loss", e.ent_loss}, {"holdout_acc", e.holdout_acc}});
    json j{{"epochs", epochs}};
    if (!r.epochs.empty()) j["final_holdout_acc"] = r.epochs.back().holdout_acc;
    return j.dump(2);
}

Theorem1Result theorem1_check(const Model& m, const MetaBatch& mb, const PretrainConfig& cfg) {
    if (m.arch.paradigm != Paradigm::Cascade)
        throw MethodModelMismatchError("theorem1_check applies to the cascade paradigm");
    PretrainConfig exact = cfg;
    exact.meta_mode = MetaMode::Exact;
    const Layout layout = make_layout(m.arch);
    const std::size_t psi_end = layout.theta_m.end;

    const MetaParts parts = meta_parts(m, mb, exact);
    const std::vector<double> left(parts.grad.begin(), parts.grad.begin() + static_cast<std::ptrdiff_t>(psi_end));

    // Right side from scratch: separate CE and entropy backward passes at ψ′.
    Model at_prime = m;
    at_prime.params = parts.params_prime;

    auto grad_of = [&](bool entropy_loss) {
        ModelGraph mg = build_model_graph(at_prime, mb.val_x.shape[0], BnMode::TrainStats);
        mg.g.bind_input(mg.x, mb.val_x);
        const NodeId root = entropy_loss ? entropy_node(mg.g, mg.aux_logits)
                                         : cross_entropy_node(mg.g, mg.main_logits, mb.val_y);
        mg.g.forward(root);
        return mg.g.backward(root).flat();
    };
    const std::vector<double> g_ce = grad_of(false);
    const std::vector<double> g_ent = grad_of(true);
    std::vector<double> g2(psi_end);
    for (std::size_t i = 0; i < psi_end; ++i) g2[i] = g_ce[i] + exact.lambda * g_ent[i];

    // ψ-restricted gradient of the inner entropy loss, θ_a pinned to m's.
    InnerGraph ig = make_inner_graph(m, mb.trn_x);
    auto grad_psi = [&](const std::vector<double>& psi) {
        std::vector<double> full = m.params;
        std::copy(psi.begin(), psi.end(), full.begin());
        bind_flat_params(ig.mg.g, full);
        ig.mg.g.forward(ig.root);
        const auto g = ig.mg.g.backward(ig.root).flat();
        return std::vector<double>(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(psi_end));
    };

    const std::vector<double> psi0(m.params.begin(), m.params.begin() + static_cast<std::ptrdiff_t>(psi_end));
    const std::vector<double> psi1(parts.params_prime.begin(),
                                   parts.params_prime.begin() + static_cast<std::ptrdiff_t>(psi_end));

    auto residual_with_h_at = [&](const std::vector<double>& point) {
        std::vector<double> right = g2;
        if (exact.alpha != 0.0 && l2(g2) > 0.0) {
            const std::vector<double> hv = hvp_fd(grad_psi, point, g2, 1e-5);
            for (std::size_t i = 0; i < right.size(); ++i) right[i] -= exact.alpha * hv[i];
        }
        std::vector<double> diff(right.size());
        for (std::size_t i = 0; i < right.size(); ++i) diff[i] = left[i] - right[i];
        return l2(diff) / std::max({l2(left), l2(right), 1e-12});
    };

    Theorem1Result out;
    out.residual_at_psi = residual_with_h_at(psi0);
    out.residual_at_psi_prime = residual_with_h_at(psi1);
    return out;
}

}  // namespace ctta

#include "ctta/adapt.hpp"

#include <sstream>
#include <string>

#include <json.hpp>

#include "ctta/errors.hpp"
#include "ctta/losses.hpp"

namespace ctta {

namespace {

bool takes_steps(AdaptMethod m) { return m != AdaptMethod::Erm && m != AdaptMethod::AdaBn; }

void validate(const AdaptConfig& cfg) {
    if (cfg.online_lr < 0.0) throw InvalidConfigError("adapt: negative online learning rate");
    if (cfg.steps_per_batch < 0) throw InvalidConfigError("adapt: negative steps_per_batch");
}

// One gradient step's objective on the current parameters, with the backward
// pass already run. Batch-statistic normalization keeps the step independent
// of stored statistics.
double step_once(AdaptState& st, const Value& batch) {
    ModelGraph mg;
    NodeId root = -1;
    if (st.cfg.method == AdaptMethod::Ttt) {
        auto [ssl_x, ssl_y] = ssl_transform_labels(batch);
        mg = build_model_graph(st.model, batch.shape[0], BnMode::BatchStats, ssl_x.shape[0]);
        mg.g.bind_input(mg.x, batch);
        mg.g.bind_input(mg.x_aux, ssl_x);
        root = cross_entropy_node(mg.g, mg.aux_logits, ssl_y);
    } else {
        mg = build_model_graph(st.model, batch.shape[0], BnMode::BatchStats);
        mg.g.bind_input(mg.x, batch);
        root = entropy_node(mg.g, st.cfg.method == AdaptMethod::Ours ? mg.aux_logits : mg.main_logits);
    }
    const double loss = mg.g.forward(root).data[0];
    st.opt.step_masked(st.model.params, mg.g.backward(root).flat(), st.mask);
    return loss;
}

std::vector<int> predict(AdaptState& st, const Value& batch, BatchRecord* rec) {
    const bool frozen = st.cfg.method == AdaptMethod::Erm;
    const ForwardResult fw = model_forward(st.model, batch, frozen ? BnMode::RunningStats : BnMode::BatchStats,
                                           /*update_stats=*/!frozen);
    if (rec) {
        rec->entropy_main = entropy_of_logits(fw.main_logits);
        rec->entropy_aux = entropy_of_logits(fw.aux_logits);
    }
    return argmax_rows(fw.main_logits);
}

}  // namespace

const char* adapt_method_name(AdaptMethod m) {
    switch (m) {
        case AdaptMethod::Ours: return "ours";
        case AdaptMethod::OursNoAux: return "ours_noaux";
        case AdaptMethod::Tent: return "tent";
        case AdaptMethod::AdaBn: return "adabn";
        case AdaptMethod::Erm: return "erm";
        case AdaptMethod::Ttt: return "ttt";
    }
    return "?";
}

AdaptMethod adapt_method_from_name(std::string_view name) {
    for (AdaptMethod m : {AdaptMethod::Ours, AdaptMethod::OursNoAux, AdaptMethod::Tent, AdaptMethod::AdaBn,
                          AdaptMethod::Erm, AdaptMethod::Ttt})
        if (name == adapt_method_name(m)) return m;
    throw InvalidConfigError("unknown adaptation method: " + std::string(name) +
                             " (expected ours, ours_noaux, tent, adabn, erm or ttt)");
}

std::vector<std::size_t> trainable_mask(const ArchSpec& arch, AdaptMethod method) {
    const bool wants_parallel = method == AdaptMethod::Ttt;
    const bool needs_cascade = method == AdaptMethod::Ours || method == AdaptMethod::OursNoAux;
    if (wants_parallel && arch.paradigm != Paradigm::Parallel)
        throw MethodModelMismatchError("ttt adapts the parallel architecture");
    if (needs_cascade && arch.paradigm != Paradigm::Cascade)
        throw MethodModelMismatchError(std::string(adapt_method_name(method)) + " adapts the cascade architecture");

    const Layout layout = make_layout(arch);
    std::vector<std::size_t> mask;
    switch (method) {
        case AdaptMethod::Ours:
        case AdaptMethod::OursNoAux:
            mask = layout.bn_affine;
            for (std::size_t i = layout.theta_m.begin; i < layout.theta_m.end; ++i) mask.push_back(i);
            break;
        case AdaptMethod::Tent:
            mask = layout.bn_affine;
            break;
        case AdaptMethod::Ttt:
            for (std::size_t i = layout.phi.begin; i < layout.phi.end; ++i) mask.push_back(i);
            break;
        case AdaptMethod::AdaBn:
        case AdaptMethod::Erm:
            break;
    }
    return mask;
}

AdaptState make_adapt_state(const Checkpoint& ckpt, const AdaptConfig& cfg) {
    validate(cfg);
    return AdaptState{ckpt.model, Optimizer({cfg.optimizer, cfg.online_lr, cfg.momentum}, ckpt.model.params.size()),
                      trainable_mask(ckpt.model.arch, cfg.method), cfg};
}

std::vector<int> adapt_batch(AdaptState& st, const Value& batch) {
    BatchRecord rec;
    return adapt_batch(st, batch, rec);
}

std::vector<int> adapt_batch(AdaptState& st, const Value& batch, BatchRecord& rec) {
    if (batch.shape.size() != 2 || batch.shape[0] < 2) throw BatchTooSmallError("adapt_batch: need at least 2 rows");

    std::vector<int> pred;
    if (st.cfg.predict_before_adapt) pred = predict(st, batch, &rec);
    if (takes_steps(st.cfg.method))
        for (std::int64_t s = 0; s < st.cfg.steps_per_batch; ++s) rec.loss = step_once(st, batch);
    if (!st.cfg.predict_before_adapt) pred = predict(st, batch, &rec);

    rec.predictions = pred;
    return pred;
}

std::vector<UnlabeledDomain> strip_labels(const DomainStream& stream) {
    std::vector<UnlabeledDomain> out;
    out.reserve(stream.domains.size());
    for (const Domain& d : stream.domains) out.push_back({d.transform, d.batches});
    return out;
}

AdaptTrace run_continual(const Checkpoint& ckpt, const std::vector<UnlabeledDomain>& stream,
                         const AdaptConfig& cfg) {
    AdaptState st = make_adapt_state(ckpt, cfg);
    AdaptTrace trace;
    for (std::size_t d = 0; d < stream.size(); ++d) {
        for (std::size_t b = 0; b < stream[d].batches.size(); ++b) {
            BatchRecord rec;
            rec.domain = static_cast<std::int64_t>(d);
            rec.batch = static_cast<std::int64_t>(b);
            adapt_batch(st, stream[d].batches[b], rec);
            trace.records.push_back(std::move(rec));
        }
        trace.snapshots.push_back(Checkpoint{st.model, ckpt.method, ckpt.seed, ckpt.config_hash});
    }
    return trace;
}

AdaptTrace run_continual(const Checkpoint& ckpt, const DomainStream& stream, const AdaptConfig& cfg) {
    AdaptTrace trace = run_continual(ckpt, strip_labels(stream), cfg);
    score_trace(trace, stream);
    return trace;
}

void score_trace(AdaptTrace& trace, const DomainStream& stream) {
    for (BatchRecord& rec : trace.records) {
        const auto d = static_cast<std::size_t>(rec.domain);
        const auto b = static_cast<std::size_t>(rec.batch);
        if (d >= stream.domains.size() || b >= stream.domains[d].labels.size())
            throw InvalidConfigError("score_trace: trace does not match the stream shape");
        const std::vector<int>& y = stream.domains[d].labels[b];
        if (y.size() != rec.predictions.size())
            throw ShapeMismatchError("score_trace: label count does not match predictions");
        rec.n_correct = 0;
        for (std::size_t i = 0; i < y.size(); ++i) rec.n_correct += rec.predictions[i] == y[i];
    }
}

double evaluate(const Checkpoint& ckpt, const Dataset& holdout, BnMode eval_bn_mode) {
    if (holdout.size() == 0) throw ShapeMismatchError("evaluate: empty holdout");
    const ForwardResult fw = model_forward(ckpt.model, holdout.x, eval_bn_mode);
    const std::vector<int> pred = argmax_rows(fw.main_logits);
    std::int64_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == holdout.y[i];
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

std::string trace_csv(const AdaptTrace& trace) {
    std::ostringstream out;
    out.precision(17);
    out << "domain,batch,n_correct,n_total,mean_entropy_main,mean_entropy_aux,loss\n";
    for (const BatchRecord& r : trace.records)
        out << r.domain << ',' << r.batch << ',' << r.n_correct << ',' << r.predictions.size() << ','
            << r.entropy_main << ',' << r.entropy_aux << ',' << r.loss << '\n';
    return out.str();
}

std::string trace_json(const AdaptTrace& trace) {
    nlohmann::json records = nlohmann::json::array();
    for (const BatchRecord& r : trace.records)
        records.push_back({{"domain", r.domain},
                           {"batch", r.batch},
                           {"n_correct", r.n_correct},
                           {"n_total", r.predictions.size()},
                           {"predictions", r.predictions},
                           {"mean_entropy_main", r.entropy_main},
                           {"mean_entropy_aux", r.entropy_aux},
                           {"loss", r.loss}});
    return nlohmann::json{{"records", records}, {"num_domains", trace.snapshots.size()}}.dump(2);
}

}  // namespace ctta

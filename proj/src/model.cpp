#include "ctta/model.hpp"

#include <cmath>
#include <string>

#include "ctta/errors.hpp"
#include "ctta/rng.hpp"

namespace ctta {

void validate(const ArchSpec& arch) {
    if (arch.num_classes < 2) throw InvalidSpecError("architecture: need at least 2 classes");
    if (arch.input_dim < 1) throw InvalidSpecError("architecture: input dimension must be positive");
    if (arch.phi_widths.empty()) throw InvalidSpecError("architecture: feature extractor needs at least one block");
    for (auto w : arch.phi_widths)
        if (w < 1) throw InvalidSpecError("architecture: block widths must be positive");
    if (arch.aux_hidden < 1) throw InvalidSpecError("architecture: auxiliary hidden width must be positive");
    if (arch.bn_momentum <= 0.0 || arch.bn_momentum > 1.0)
        throw InvalidSpecError("architecture: BN momentum outside (0, 1]");
    if (arch.bn_epsilon <= 0.0) throw InvalidSpecError("architecture: BN epsilon must be positive");
}

Layout make_layout(const ArchSpec& arch) {
    validate(arch);
    Layout out;
    std::size_t off = 0;
    auto push = [&](ParamRole role, int block, std::vector<std::int64_t> shape) {
        std::size_t n = 1;
        for (auto d : shape) n *= static_cast<std::size_t>(d);
        out.leaves.push_back({role, block, off, std::move(shape), n});
        off += n;
    };

    std::int64_t in = arch.input_dim;
    for (std::size_t b = 0; b < arch.phi_widths.size(); ++b) {
        const std::int64_t w = arch.phi_widths[b];
        push(ParamRole::PhiW, static_cast<int>(b), {in, w});
        push(ParamRole::PhiB, static_cast<int>(b), {w});
        push(ParamRole::PhiGamma, static_cast<int>(b), {w});
        push(ParamRole::PhiBeta, static_cast<int>(b), {w});
        in = w;
    }
    out.phi = {0, off};

    push(ParamRole::ThetaMW, -1, {arch.feature_dim(), arch.num_classes});
    push(ParamRole::ThetaMB, -1, {arch.num_classes});
    out.theta_m = {out.phi.end, off};

    push(ParamRole::ThetaAW1, -1, {arch.aux_input_dim(), arch.aux_hidden});
    push(ParamRole::ThetaAB1, -1, {arch.aux_hidden});
    push(ParamRole::ThetaAW2, -1, {arch.aux_hidden, arch.aux_classes()});
    push(ParamRole::ThetaAB2, -1, {arch.aux_classes()});
    out.theta_a = {out.theta_m.end, off};
    out.total = off;

    for (const auto& leaf : out.leaves) {
        if (leaf.role == ParamRole::PhiGamma || leaf.role == ParamRole::PhiBeta)
            for (std::size_t j = 0; j < leaf.size; ++j) out.bn_affine.push_back(leaf.offset + j);
    }
    return out;
}

Model init_model(const ArchSpec& arch, std::uint64_t seed) {
    const Layout layout = make_layout(arch);
    Model m;
    m.arch = arch;
    m.params.assign(layout.total, 0.0);
    Rng rng(seed);
    for (const auto& leaf : layout.leaves) {
        switch (leaf.role) {
            case ParamRole::PhiW:
            case ParamRole::ThetaMW:
            case ParamRole::ThetaAW1:
            case ParamRole::ThetaAW2: {
                const double limit = std::sqrt(6.0 / static_cast<double>(leaf.shape[0] + leaf.shape[1]));
                for (std::size_t j = 0; j < leaf.size; ++j) m.params[leaf.offset + j] = rng.uniform(-limit, limit);
                break;
            }
            case ParamRole::PhiGamma:
                for (std::size_t j = 0; j < leaf.size; ++j) m.params[leaf.offset + j] = 1.0;
                break;
            default:
                break;  // biases and β start at zero
        }
    }
    for (auto w : arch.phi_widths) {
        BnStats s;
        s.mean.assign(static_cast<std::size_t>(w), 0.0);
        s.var.assign(static_cast<std::size_t>(w), 1.0);
        m.bn.push_back(std::move(s));
    }
    return m;
}

ModelGraph build_model_graph(const Model& m, std::int64_t main_rows, BnMode mode, std::int64_t aux_rows) {
    const Layout layout = make_layout(m.arch);
    if (m.params.size() != layout.total) throw InvalidSpecError("model: parameter vector does not match architecture");
    if (m.bn.size() != m.arch.phi_widths.size()) throw InvalidSpecError("model: BN state does not match architecture");

    ModelGraph mg;
    Graph& g = mg.g;
    mg.params.reserve(layout.leaves.size());
    for (const auto& leaf : layout.leaves) {
        Value v(leaf.shape, std::vector<double>(m.params.begin() + static_cast<std::ptrdiff_t>(leaf.offset),
                                                m.params.begin() + static_cast<std::ptrdiff_t>(leaf.offset + leaf.size)));
        mg.params.push_back(g.param(std::move(v)));
    }

    mg.x = g.input(Value::zeros({main_rows, m.arch.input_dim}));
    const bool parallel = m.arch.paradigm == Paradigm::Parallel;
    if (parallel) {
        if (aux_rows < 0) aux_rows = main_rows;
        mg.x_aux = g.input(Value::zeros({aux_rows, m.arch.input_dim}));
    }

    auto phi_path = [&](NodeId in, bool record_bn) {
        NodeId h = in;
        std::size_t li = 0;
        for (std::size_t b = 0; b < m.arch.phi_widths.size(); ++b, li += 4) {
            h = g.add_row(g.matmul(h, mg.params[li]), mg.params[li + 1]);
            const NodeId bn =
                g.batch_norm(h, mg.params[li + 2], mg.params[li + 3], mode, m.bn[b].mean, m.bn[b].var, m.arch.bn_epsilon);
            if (record_bn) mg.bn_main.push_back(bn);
            h = g.relu(bn);
        }
        return h;
    };

    mg.features = phi_path(mg.x, true);
    const std::size_t head = m.arch.phi_widths.size() * 4;
    mg.main_logits = g.add_row(g.matmul(mg.features, mg.params[head]), mg.params[head + 1]);

    const NodeId aux_in = parallel ? phi_path(mg.x_aux, false) : mg.main_logits;
    const NodeId hidden = g.relu(g.add_row(g.matmul(aux_in, mg.params[head + 2]), mg.params[head + 3]));
    mg.aux_logits = g.add_row(g.matmul(hidden, mg.params[head + 4]), mg.params[head + 5]);
    return mg;
}

std::vector<double> flat_params(const Graph& g) {
    std::vector<double> out;
    for (NodeId id : g.param_ids()) {
        const Value& v = g.value(id);
        out.insert(out.end(), v.data.begin(), v.data.end());
    }
    return out;
}

void bind_flat_params(Graph& g, const std::vector<double>& flat) {
    std::size_t off = 0;
    for (NodeId id : g.param_ids()) {
        Value v = g.value(id);
        if (off + v.numel() > flat.size()) throw ShapeMismatchError("bind_flat_params: vector too short");
        for (auto& x : v.data) x = flat[off++];
        g.bind_param(id, std::move(v));
    }
    if (off != flat.size()) throw ShapeMismatchError("bind_flat_params: vector length mismatch");
}

void refresh_bn_stats(Model& m, const ModelGraph& mg, BnMode mode) {
    if (mode == BnMode::RunningStats) return;
    for (std::size_t b = 0; b < mg.bn_main.size(); ++b) {
        const auto& mean = mg.g.bn_mean(mg.bn_main[b]);
        const auto& var = mg.g.bn_var(mg.bn_main[b]);
        if (mode == BnMode::TrainStats) {
            const double mom = m.arch.bn_momentum;
            for (std::size_t j = 0; j < mean.size(); ++j) {
                m.bn[b].mean[j] = (1.0 - mom) * m.bn[b].mean[j] + mom * mean[j];
                m.bn[b].var[j] = (1.0 - mom) * m.bn[b].var[j] + mom * var[j];
            }
        } else {
            m.bn[b].mean = mean;
            m.bn[b].var = var;
        }
    }
}

ForwardResult model_forward(Model& m, const Value& x, BnMode mode, bool update_stats) {
    if (x.shape.size() != 2 || x.shape[1] != m.arch.input_dim)
        throw ShapeMismatchError("model_forward: input width does not match architecture");
    ModelGraph mg = build_model_graph(m, x.shape[0], mode);
    mg.g.bind_input(mg.x, x);
    if (mg.x_aux >= 0) mg.g.bind_input(mg.x_aux, x);
    mg.g.forward(mg.aux_logits);
    ForwardResult out{mg.g.value(mg.main_logits), mg.g.value(mg.aux_logits)};
    if (update_stats) refresh_bn_stats(m, mg, mode);
    return out;
}

ForwardResult model_forward(const Model& m, const Value& x, BnMode mode) {
    return model_forward(const_cast<Model&>(m), x, mode, /*update_stats=*/false);
}

}  // namespace ctta

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ctta/adapt.hpp"
#include "ctta/checkpoint.hpp"
#include "ctta/data.hpp"
#include "ctta/errors.hpp"
#include "ctta/metrics.hpp"
#include "ctta/pretrain.hpp"
#include "ctta/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_text_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ctta::IoError("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw ctta::IoError("cannot write " + p.string());
    out << text;
}

json parse_json_text(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw ctta::InvalidConfigError(what + " is not valid JSON: " + e.what());
    }
}

std::string fmt6(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

MeanStd mean_std(const std::vector<double>& v) {
    MeanStd ms;
    if (v.empty()) return ms;
    for (double x : v) ms.mean += x / static_cast<double>(v.size());
    for (double x : v) ms.std += (x - ms.mean) * (x - ms.mean) / static_cast<double>(v.size());
    ms.std = std::sqrt(ms.std);
    return ms;
}

// CASCADE_TTA_THREADS caps how many (method, seed) cells run at once.
int thread_cap(std::size_t cells) {
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    auto cap = static_cast<int>(std::min<std::size_t>(cells, hw));
    if (const char* env = std::getenv("CASCADE_TTA_THREADS")) {
        const int v = std::atoi(env);
        if (v >= 1 && v < cap) cap = v;
    }
    return std::max(cap, 1);
}

// Runs every cell, then rethrows the first failure in cell order. Results
// land in caller-owned slots so assembly stays serialized and deterministic.
void run_cells(const std::vector<std::function<void()>>& cells) {
    if (cells.empty()) return;
    std::vector<std::exception_ptr> errs(cells.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1)) {
            try {
                cells[i]();
            } catch (...) {
                errs[i] = std::current_exception();
            }
        }
    };
    const int n = thread_cap(cells.size());
    if (n == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(n));
        for (int t = 0; t < n; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (const auto& e : errs)
        if (e) std::rethrow_exception(e);
}

std::string seeds_csv(const std::vector<std::uint64_t>& seeds) {
    std::string s;
    for (std::size_t i = 0; i < seeds.size(); ++i) s += (i ? "," : "") + std::to_string(seeds[i]);
    return s;
}

// ---------------------------------------------------------------- pretrain

struct PretrainArgs {
    std::string config_path;
    std::vector<std::string> methods{"meta"};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::string out_dir = ".";
    bool print_config = false;
};

int cmd_pretrain(const PretrainArgs& a) {
    const std::string text = a.config_path.empty() ? std::string("{}") : read_text_file(a.config_path);
    const json raw = parse_json_text(text, "pretrain config");
    auto parsed = ctta::parse_pretrain_config(text);
    const ctta::ArchSpec base_arch = parsed.first;
    const ctta::PretrainConfig base_cfg = parsed.second;
    const bool paradigm_pinned = raw.contains("arch") && raw.at("arch").contains("paradigm");
    const ctta::SourceSpec source =
        raw.contains("source") ? ctta::parse_source_spec(raw.at("source").dump()) : ctta::SourceSpec{};

    std::vector<ctta::PretrainMethod> methods;
    methods.reserve(a.methods.size());
    for (const auto& name : a.methods) methods.push_back(ctta::pretrain_method_from_name(name));

    if (a.print_config) {
        json out = json::parse(ctta::pretrain_config_json(base_arch, base_cfg));
        out["source"] = json::parse(ctta::source_spec_json(source));
        out["methods"] = a.methods;
        out["seeds"] = a.seeds;
        out["out"] = a.out_dir;
        std::cout << out.dump(2) << "\n";
        return 0;
    }

    const ctta::SourceData data = ctta::gen_source(source);
    fs::create_directories(a.out_dir);

    struct Cell {
        std::string name;
        ctta::PretrainResult result;
    };
    std::vector<Cell> out(methods.size() * a.seeds.size());
    std::vector<std::function<void()>> cells;
    for (std::size_t mi = 0; mi < methods.size(); ++mi)
        for (std::size_t si = 0; si < a.seeds.size(); ++si) {
            const std::size_t slot = mi * a.seeds.size() + si;
            cells.push_back([&, mi, si, slot] {
                const ctta::PretrainMethod m = methods[mi];
                ctta::ArchSpec arch = base_arch;
                const bool parallel = m == ctta::PretrainMethod::Ttt || m == ctta::PretrainMethod::TttMeta;
                if (!paradigm_pinned) arch.paradigm = parallel ? ctta::Paradigm::Parallel : ctta::Paradigm::Cascade;
                ctta::PretrainConfig cfg = base_cfg;
                cfg.seed = a.seeds[si];
                Cell& c = out[slot];
                c.name = std::string(ctta::pretrain_method_name(m)) + "_s" + std::to_string(cfg.seed);
                c.result = ctta::pretrain(m, data, arch, cfg);
            });
        }
    run_cells(cells);

    for (const Cell& c : out) {
        const ctta::Checkpoint& ck = c.result.checkpoint;
        const fs::path ckpt_path = fs::path(a.out_dir) / (c.name + ".ckpt");
        ctta::save_checkpoint(ck, ckpt_path);
        std::ostringstream head;
        head << "# method=" << ck.method << " seed=" << ck.seed << " config_hash=" << ck.config_hash << "\n";
        write_text_file(fs::path(a.out_dir) / (c.name + ".report.csv"), head.str() + report_csv(c.result.report));
        const double acc = c.result.report.epochs.empty() ? 0.0 : c.result.report.epochs.back().holdout_acc;
        std::cout << c.name << ": holdout_acc=" << fmt6(acc) << " -> " << ckpt_path.string() << "\n";
    }
    return 0;
}

// ------------------------------------------------------------------ stream

struct StreamArgs {
    std::string config_path;
    std::string setup = "instantaneous";
    std::vector<std::string> kinds;
    int severity = ctta::kMaxSeverity;
    std::int64_t batch_size = 32;
    std::int64_t batches = 20;
    std::int64_t holdout = 512;
    std::uint64_t seed = 0;
    std::string out = "stream.json";
    std::string dump_holdouts;
    bool print_config = false;
};

int cmd_stream(const StreamArgs& a) {
    ctta::SourceSpec source;
    if (!a.config_path.empty()) {
        const json raw = parse_json_text(read_text_file(a.config_path), "config");
        if (raw.contains("source")) source = ctta::parse_source_spec(raw.at("source").dump());
    }
    ctta::StreamConfig cfg;
    if (a.setup == "instantaneous")
        cfg.setup = ctta::StreamSetup::Instantaneous;
    else if (a.setup == "gradual")
        cfg.setup = ctta::StreamSetup::Gradual;
    else
        throw ctta::InvalidConfigError("unknown setup: " + a.setup + " (expected instantaneous or gradual)");
    if (a.severity < 1 || a.severity > ctta::kMaxSeverity)
        throw ctta::InvalidConfigError("severity outside 1.." + std::to_string(ctta::kMaxSeverity));
    if (!a.kinds.empty()) {
        cfg.kinds.clear();
        for (const auto& k : a.kinds) cfg.kinds.push_back(ctta::kind_from_name(k));
    }
    cfg.severity = a.severity;
    cfg.batch_size = a.batch_size;
    cfg.batches_per_domain = a.batches;
    cfg.holdout_size = a.holdout;
    cfg.seed = a.seed;

    const std::string manifest = ctta::stream_manifest(source, cfg);
    if (a.print_config) {
        std::cout << manifest << "\n";
        return 0;
    }
    write_text_file(a.out, manifest);
    const std::size_t domains = cfg.kinds.size() * (cfg.setup == ctta::StreamSetup::Gradual ? 9 : 1);
    std::cout << "wrote " << a.out << " (" << a.setup << ", " << domains << " domains x " << cfg.batches_per_domain
              << " batches of " << cfg.batch_size << ")\n";
    if (!a.dump_holdouts.empty()) {
        const ctta::DomainStream ds = ctta::build_stream(source, cfg);
        for (std::size_t t = 0; t < ds.domains.size(); ++t) {
            const ctta::Domain& d = ds.domains[t];
            const std::string name = "holdout_d" + std::to_string(t) + "_" + ctta::kind_name(d.transform.kind) +
                                     "_s" + std::to_string(d.transform.severity) + ".csv";
            write_text_file(fs::path(a.dump_holdouts) / name, ctta::holdout_csv(d));
        }
        std::cout << "wrote " << ds.domains.size() << " holdout files under " << a.dump_holdouts << "\n";
    }
    return 0;
}

// ------------------------------------------------------------------- adapt

struct AdaptArgs {
    std::string ckpt;
    std::string stream;
    std::string method = "ours";
    std::vector<std::int64_t> batch_sizes;
    double lr = 1e-3;
    std::int64_t steps = 1;
    std::uint64_t seed = 0;
    std::string out_dir = ".";
    bool no_snapshots = false;
    bool print_config = false;
};

int cmd_adapt(const AdaptArgs& a) {
    const ctta::AdaptMethod method = ctta::adapt_method_from_name(a.method);
    auto [source, scfg] = ctta::parse_stream_manifest(read_text_file(a.stream));
    const std::vector<std::int64_t> sizes =
        a.batch_sizes.empty() ? std::vector<std::int64_t>{scfg.batch_size} : a.batch_sizes;

    ctta::AdaptConfig acfg;
    acfg.method = method;
    acfg.online_lr = a.lr;
    acfg.steps_per_batch = a.steps;
    acfg.seed = a.seed;

    if (a.print_config) {
        const json j{{"ckpt", a.ckpt},          {"stream", a.stream}, {"method", a.method},
                     {"batch_sizes", sizes},    {"online_lr", a.lr},  {"steps_per_batch", a.steps},
                     {"seed", a.seed},          {"out", a.out_dir},   {"snapshots", !a.no_snapshots}};
        std::cout << j.dump(2) << "\n";
        return 0;
    }

    const ctta::Checkpoint ckpt = ctta::load_checkpoint(a.ckpt);
    fs::create_directories(a.out_dir);

    struct Run {
        std::int64_t batch = 0;
        ctta::AdaptTrace trace;
        ctta::MethodReport report;
    };
    std::vector<Run> runs(sizes.size());
    std::vector<std::function<void()>> cells;
    for (std::size_t i = 0; i < sizes.size(); ++i)
        cells.push_back([&, i] {
            ctta::StreamConfig c = scfg;
            c.batch_size = sizes[i];
            const ctta::DomainStream ds = ctta::build_stream(source, c);
            Run& r = runs[i];
            r.batch = sizes[i];
            r.trace = ctta::run_continual(ckpt, ds, acfg);
            r.report.method = a.method;
            r.report.online = ctta::online_error_breakdown(r.trace);
            r.report.matrix = ctta::accuracy_matrix(ckpt, ds, acfg);
            r.report.average_acc = ctta::average_accuracy(r.report.matrix);
            r.report.forward = ctta::forward_transfer(r.report.matrix);
        });
    run_cells(cells);

    for (const Run& r : runs) {
        const std::string stem = a.method + "_B" + std::to_string(r.batch);
        std::ostringstream head;
        head << "# method=" << a.method << " batch_size=" << r.batch << " online_lr=" << a.lr << " seed=" << a.seed
             << " config_hash=" << ckpt.config_hash << "\n";
        write_text_file(fs::path(a.out_dir) / (stem + ".trace.csv"), head.str() + ctta::trace_csv(r.trace));

        json mj = json::parse(ctta::metrics_json(r.report));
        mj["batch_size"] = r.batch;
        mj["online_lr"] = a.lr;
        mj["steps_per_batch"] = a.steps;
        mj["seed"] = a.seed;
        mj["config_hash"] = ckpt.config_hash;
        write_text_file(fs::path(a.out_dir) / (stem + ".metrics.json"), mj.dump(2) + "\n");

        if (!a.no_snapshots)
            for (std::size_t t = 0; t < r.trace.snapshots.size(); ++t)
                ctta::save_checkpoint(r.trace.snapshots[t],
                                      fs::path(a.out_dir) / (stem + "_domain" + std::to_string(t) + ".ckpt"));

        std::cout << stem << ": E=" << fmt6(r.report.online.mean_over_domains)
                  << " A=" << fmt6(r.report.average_acc) << " F=" << fmt6(r.report.forward) << "\n";
    }
    return 0;
}

// ------------------------------------------------------------------ verify

int cmd_verify(const std::vector<std::string>& names) {
    std::vector<ctta::SuiteResult> results;
    if (names.empty() || (names.size() == 1 && names[0] == "all"))
        results = ctta::run_all_suites();
    else
        for (const auto& n : names) results.push_back(ctta::run_suite(n));

    bool all_pass = true;
    for (const auto& r : results) {
        char dev[40];
        std::snprintf(dev, sizeof dev, "%.3e", r.max_deviation);
        std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << " max_dev=" << dev;
        if (!r.detail.empty()) std::cout << "  " << r.detail;
        std::cout << "\n";
        all_pass = all_pass && r.pass;
    }
    return all_pass ? 0 : 1;
}

// --------------------------------------------------------------- reproduce

// Pretrained checkpoints are cached under <out>/checkpoints and reloaded on
// rerun when method, seed and config hash all match.
struct CheckpointPool {
    fs::path dir;
    std::map<std::string, ctta::Checkpoint> cache;
    std::mutex mu;
    const ctta::SourceData* data = nullptr;

    const ctta::Checkpoint& get(ctta::PretrainMethod m, std::uint64_t seed) {
        const std::string key = std::string(ctta::pretrain_method_name(m)) + "_s" + std::to_string(seed);
        {
            std::lock_guard<std::mutex> lock(mu);
            auto it = cache.find(key);
            if (it != cache.end()) return it->second;
        }
        ctta::ArchSpec arch;
        if (m == ctta::PretrainMethod::Ttt || m == ctta::PretrainMethod::TttMeta)
            arch.paradigm = ctta::Paradigm::Parallel;
        ctta::PretrainConfig cfg;
        cfg.seed = seed;
        const std::uint64_t want = ctta::fnv1a(ctta::pretrain_config_json(arch, cfg));
        const fs::path path = dir / (key + ".ckpt");

        ctta::Checkpoint ck;
        bool loaded = false;
        if (fs::exists(path)) {
            ck = ctta::load_checkpoint(path);
            loaded = ck.config_hash == want && ck.seed == seed && ck.method == ctta::pretrain_method_name(m);
        }
        if (!loaded) {
            ck = ctta::pretrain(m, *data, arch, cfg).checkpoint;
            fs::create_directories(dir);
            ctta::save_checkpoint(ck, path);
        }
        std::lock_guard<std::mutex> lock(mu);
        return cache.emplace(key, std::move(ck)).first->second;
    }
};

struct Repro {
    fs::path out;
    std::vector<std::uint64_t> seeds;
    ctta::SourceSpec source;
    ctta::SourceData data;
    CheckpointPool pool;

    void prefetch(const std::vector<ctta::PretrainMethod>& methods) {
        std::vector<std::function<void()>> cells;
        for (ctta::PretrainMethod m : methods)
            for (std::uint64_t s : seeds) cells.push_back([this, m, s] { pool.get(m, s); });
        run_cells(cells);
    }

    void emit(const std::string& study, const json& params, const std::string& csv_name, std::string csv_body,
              json extra) {
        const std::uint64_t hash = ctta::fnv1a(params.dump());
        std::ostringstream head;
        head << "# study=" << study << " config_hash=" << hash << " seeds=" << seeds_csv(seeds) << "\n";
        write_text_file(out / csv_name, head.str() + std::move(csv_body));

        extra["study"] = study;
        extra["schema_version"] = 1;
        extra["seeds"] = seeds;
        extra["config"] = params;
        extra["config_hash"] = hash;
        write_text_file(out / (study + ".json"), extra.dump(2) + "\n");
    }
};

ctta::PretrainMethod pretrain_for(ctta::AdaptMethod m) {
    switch (m) {
        case ctta::AdaptMethod::Ours:
        case ctta::AdaptMethod::OursNoAux: return ctta::PretrainMethod::Meta;
        case ctta::AdaptMethod::Ttt: return ctta::PretrainMethod::Ttt;
        default: return ctta::PretrainMethod::Erm;
    }
}

ctta::AdaptTrace run_trace(const ctta::Checkpoint& ck, const ctta::DomainStream& ds, ctta::AdaptMethod m, double lr,
                           std::int64_t steps, std::uint64_t seed) {
    ctta::AdaptConfig ac;
    ac.method = m;
    ac.online_lr = lr;
    ac.steps_per_batch = steps;
    ac.seed = seed;
    return ctta::run_continual(ck, ds, ac);
}

// Online error per method and domain on the severity-5 instantaneous stream.
void study_main(Repro& R) {
    const std::vector<ctta::AdaptMethod> methods = {ctta::AdaptMethod::Erm,  ctta::AdaptMethod::AdaBn,
                                                    ctta::AdaptMethod::Tent, ctta::AdaptMethod::Ttt,
                                                    ctta::AdaptMethod::OursNoAux, ctta::AdaptMethod::Ours};
    R.prefetch({ctta::PretrainMethod::Erm, ctta::PretrainMethod::Ttt, ctta::PretrainMethod::Meta});

    std::vector<ctta::DomainStream> streams;
    for (std::uint64_t s : R.seeds) {
        ctta::StreamConfig sc;
        sc.seed = s;
        streams.push_back(ctta::build_stream(R.source, sc));
    }

    const std::size_t ns = R.seeds.size();
    std::vector<std::vector<ctta::OnlineError>> cell(methods.size(), std::vector<ctta::OnlineError>(ns));
    std::vector<std::function<void()>> cells;
    for (std::size_t mi = 0; mi < methods.size(); ++mi)
        for (std::size_t si = 0; si < ns; ++si)
            cells.push_back([&, mi, si] {
                const ctta::Checkpoint& ck = R.pool.get(pretrain_for(methods[mi]), R.seeds[si]);
                cell[mi][si] = ctta::online_error_breakdown(
                    run_trace(ck, streams[si], methods[mi], 1e-3, 1, R.seeds[si]));
            });
    run_cells(cells);

    std::vector<std::string> domains;
    for (const auto& d : streams[0].domains) domains.push_back(ctta::kind_name(d.transform.kind));

    std::ostringstream csv;
    csv << "method,domain,error_mean,error_std\n";
    json rows = json::array();
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
        const char* name = ctta::adapt_method_name(methods[mi]);
        json row{{"method", name}};
        std::vector<double> pd_mean, pd_std, es;
        for (std::size_t d = 0; d < domains.size(); ++d) {
            std::vector<double> v;
            for (std::size_t si = 0; si < ns; ++si) v.push_back(cell[mi][si].per_domain[d]);
            const MeanStd ms = mean_std(v);
            pd_mean.push_back(ms.mean);
            pd_std.push_back(ms.std);
            csv << name << ',' << domains[d] << ',' << fmt6(ms.mean) << ',' << fmt6(ms.std) << '\n';
        }
        for (std::size_t si = 0; si < ns; ++si) es.push_back(cell[mi][si].mean_over_domains);
        const MeanStd ms = mean_std(es);
        csv << name << ",mean," << fmt6(ms.mean) << ',' << fmt6(ms.std) << '\n';
        row["per_domain_mean"] = pd_mean;
        row["per_domain_std"] = pd_std;
        row["E_mean"] = ms.mean;
        row["E_std"] = ms.std;
        rows.push_back(row);
        std::cout << "main " << name << ": E=" << fmt6(ms.mean) << " +- " << fmt6(ms.std) << "\n";
    }

    const json params{{"setup", "instantaneous"}, {"severity", 5},    {"batch_size", 32}, {"batches_per_domain", 20},
                      {"holdout_size", 512},      {"online_lr", 1e-3}, {"steps_per_batch", 1}};
    R.emit("main", params, "main.csv", csv.str(), json{{"domains", domains}, {"rows", rows}});
}

// E, A and F on the gradual stream, per method.
void study_gradual(Repro& R) {
    const std::vector<ctta::AdaptMethod> methods = {ctta::AdaptMethod::Erm, ctta::AdaptMethod::Tent,
                                                    ctta::AdaptMethod::Ttt, ctta::AdaptMethod::Ours};
    R.prefetch({ctta::PretrainMethod::Erm, ctta::PretrainMethod::Ttt, ctta::PretrainMethod::Meta});

    std::vector<ctta::DomainStream> streams;
    for (std::uint64_t s : R.seeds) {
        ctta::StreamConfig sc;
        sc.setup = ctta::StreamSetup::Gradual;
        sc.seed = s;
        streams.push_back(ctta::build_stream(R.source, sc));
    }

    struct Out {
        double e = 0, a = 0, f = 0;
    };
    const std::size_t ns = R.seeds.size();
    std::vector<std::vector<Out>> cell(methods.size(), std::vector<Out>(ns));
    std::vector<std::function<void()>> cells;
    for (std::size_t mi = 0; mi < methods.size(); ++mi)
        for (std::size_t si = 0; si < ns; ++si)
            cells.push_back([&, mi, si] {
                const ctta::Checkpoint& ck = R.pool.get(pretrain_for(methods[mi]), R.seeds[si]);
                ctta::AdaptConfig ac;
                ac.method = methods[mi];
                ac.seed = R.seeds[si];
                Out& o = cell[mi][si];
                o.e = ctta::online_error(ctta::run_continual(ck, streams[si], ac));
                const ctta::AccuracyMatrix m = ctta::accuracy_matrix(ck, streams[si], ac);
                o.a = ctta::average_accuracy(m);
                o.f = ctta::forward_transfer(m);
            });
    run_cells(cells);

    std::ostringstream csv;
    csv << "method,E_mean,E_std,A_mean,A_std,F_mean,F_std\n";
    json rows = json::array();
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
        const char* name = ctta::adapt_method_name(methods[mi]);
        std::vector<double> e, a, f;
        for (std::size_t si = 0; si < ns; ++si) {
            e.push_back(cell[mi][si].e);
            a.push_back(cell[mi][si].a);
            f.push_back(cell[mi][si].f);
        }
        const MeanStd me = mean_std(e), ma = mean_std(a), mf = mean_std(f);
        csv << name << ',' << fmt6(me.mean) << ',' << fmt6(me.std) << ',' << fmt6(ma.mean) << ',' << fmt6(ma.std)
            << ',' << fmt6(mf.mean) << ',' << fmt6(mf.std) << '\n';
        rows.push_back(json{{"method", name},
                            {"E_mean", me.mean},
                            {"E_std", me.std},
                            {"A_mean", ma.mean},
                            {"A_std", ma.std},
                            {"F_mean", mf.mean},
                            {"F_std", mf.std}});
        std::cout << "gradual " << name << ": E=" << fmt6(me.mean) << " A=" << fmt6(ma.mean)
                  << " F=" << fmt6(mf.mean) << "\n";
    }
    const json params{{"setup", "gradual"},  {"batch_size", 32},  {"batches_per_domain", 20},
                      {"holdout_size", 512}, {"online_lr", 1e-3}, {"steps_per_batch", 1}};
    R.emit("gradual", params, "gradual.csv", csv.str(), json{{"rows", rows}});
}

// Error across batch sizes at a fixed adaptation budget of 2560 samples per
// domain; the stability claim is the spread across batch sizes.
void study_batch_size(Repro& R) {
    const std::vector<std::int64_t> sizes{16, 32, 64, 128};
    const std::vector<ctta::AdaptMethod> methods = {ctta::AdaptMethod::Tent, ctta::AdaptMethod::Ours};
    const double lr = 1e-2;
    R.prefetch({ctta::PretrainMethod::Erm, ctta::PretrainMethod::Meta});

    const std::size_t ns = R.seeds.size();
    std::vector<std::vector<std::vector<double>>> cell(
        methods.size(), std::vector<std::vector<double>>(sizes.size(), std::vector<double>(ns, 0.0)));
    std::vector<std::function<void()>> cells;
    for (std::size_t mi = 0; mi < methods.size(); ++mi)
        for (std::size_t bi = 0; bi < sizes.size(); ++bi)
            for (std::size_t si = 0; si < ns; ++si)
                cells.push_back([&, mi, bi, si] {
                    ctta::StreamConfig sc;
                    sc.batch_size = sizes[bi];
                    sc.batches_per_domain = 2560 / sizes[bi];
                    sc.seed = R.seeds[si];
                    const ctta::DomainStream ds = ctta::build_stream(R.source, sc);
                    const ctta::Checkpoint& ck = R.pool.get(pretrain_for(methods[mi]), R.seeds[si]);
                    cell[mi][bi][si] =
                        ctta::online_error(run_trace(ck, ds, methods[mi], lr, 1, R.seeds[si]));
                });
    run_cells(cells);

    std::ostringstream csv;
    csv << "method,batch_size,E_mean,E_std\n";
    json rows = json::array();
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
        const char* name = ctta::adapt_method_name(methods[mi]);
        std::vector<double> seed_means;
        json per_b = json::array();
        for (std::size_t bi = 0; bi < sizes.size(); ++bi) {
            const MeanStd ms = mean_std(cell[mi][bi]);
            seed_means.push_back(ms.mean);
            csv << name << ',' << sizes[bi] << ',' << fmt6(ms.mean) << ',' << fmt6(ms.std) << '\n';
            per_b.push_back(json{{"batch_size", sizes[bi]}, {"E_mean", ms.mean}, {"E_std", ms.std}});
        }
        const double spread = mean_std(seed_means).std;
        rows.push_back(json{{"method", name}, {"per_batch_size", per_b}, {"std_across_batch_sizes", spread}});
        std::cout << "batch_size " << name << ": std across sizes=" << fmt6(spread) << "\n";
    }
    const json params{{"setup", "instantaneous"}, {"severity", 5},  {"samples_per_domain", 2560},
                      {"batch_sizes", sizes},     {"online_lr", lr}, {"steps_per_batch", 1}};
    R.emit("batch_size", params, "batch_size.csv", csv.str(), json{{"rows", rows}});
}

// Auxiliary-head ablation across severities on long small-batch streams.
void study_aux_ablation(Repro& R) {
    const std::vector<ctta::AdaptMethod> methods = {ctta::AdaptMethod::Ours, ctta::AdaptMethod::OursNoAux};
    const double lr = 1e-1;
    R.prefetch({ctta::PretrainMethod::Meta});

    const std::size_t ns = R.seeds.size();
    std::vector<std::vector<std::vector<double>>> cell(
        methods.size(), std::vector<std::vector<double>>(5, std::vector<double>(ns, 0.0)));
    std::vector<std::function<void()>> cells;
    for (std::size_t mi = 0; mi < methods.size(); ++mi)
        for (int sev = 1; sev <= 5; ++sev)
            for (std::size_t si = 0; si < ns; ++si)
                cells.push_back([&, mi, sev, si] {
                    ctta::StreamConfig sc;
                    sc.severity = sev;
                    sc.batch_size = 16;
                    sc.batches_per_domain = 160;
                    sc.seed = R.seeds[si];
                    const ctta::DomainStream ds = ctta::build_stream(R.source, sc);
                    const ctta::Checkpoint& ck = R.pool.get(ctta::PretrainMethod::Meta, R.seeds[si]);
                    cell[mi][static_cast<std::size_t>(sev - 1)][si] =
                        ctta::online_error(run_trace(ck, ds, methods[mi], lr, 1, R.seeds[si]));
                });
    run_cells(cells);

    std::ostringstream csv;
    csv << "method,severity,E_mean,E_std\n";
    json rows = json::array();
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
        const char* name = ctta::adapt_method_name(methods[mi]);
        json per_sev = json::array();
        double avg = 0;
        for (int sev = 1; sev <= 5; ++sev) {
            const MeanStd ms = mean_std(cell[mi][static_cast<std::size_t>(sev - 1)]);
            avg += ms.mean / 5.0;
            csv << name << ',' << sev << ',' << fmt6(ms.mean) << ',' << fmt6(ms.std) << '\n';
            per_sev.push_back(json{{"severity", sev}, {"E_mean", ms.mean}, {"E_std", ms.std}});
        }
        rows.push_back(json{{"method", name}, {"per_severity", per_sev}, {"E_avg", avg}});
        std::cout << "aux_ablation " << name << ": severity-averaged E=" << fmt6(avg) << "\n";
    }
    const json params{{"setup", "instantaneous"}, {"severities", {1, 2, 3, 4, 5}}, {"batch_size", 16},
                      {"batches_per_domain", 160}, {"online_lr", lr},              {"steps_per_batch", 1}};
    R.emit("aux_ablation", params, "aux_ablation.csv", csv.str(), json{{"rows", rows}});
}

// Meta-learned against conventionally multi-task-trained initialization,
// adapted identically.
void study_mtl_ablation(Repro& R) {
    const std::vector<ctta::PretrainMethod> pretrains = {ctta::PretrainMethod::Meta, ctta::PretrainMethod::Mtl};
    const double lr = 3e-2;
    R.prefetch(pretrains);

    const std::size_t ns = R.seeds.size();
    std::vector<ctta::DomainStream> streams;
    for (std::uint64_t s : R.seeds) {
        ctta::StreamConfig sc;
        sc.batch_size = 16;
        sc.batches_per_domain = 320;
        sc.seed = s;
        streams.push_back(ctta::build_stream(R.source, sc));
    }

    std::vector<std::vector<double>> cell(pretrains.size(), std::vector<double>(ns, 0.0));
    std::vector<std::function<void()>> cells;
    for (std::size_t pi = 0; pi < pretrains.size(); ++pi)
        for (std::size_t si = 0; si < ns; ++si)
            cells.push_back([&, pi, si] {
                const ctta::Checkpoint& ck = R.pool.get(pretrains[pi], R.seeds[si]);
                cell[pi][si] = ctta::online_error(
                    run_trace(ck, streams[si], ctta::AdaptMethod::Ours, lr, 1, R.seeds[si]));
            });
    run_cells(cells);

    std::ostringstream csv;
    csv << "pretrain,E_mean,E_std\n";
    json rows = json::array();
    std::vector<double> means;
    for (std::size_t pi = 0; pi < pretrains.size(); ++pi) {
        const char* name = ctta::pretrain_method_name(pretrains[pi]);
        const MeanStd ms = mean_std(cell[pi]);
        means.push_back(ms.mean);
        csv << name << ',' << fmt6(ms.mean) << ',' << fmt6(ms.std) << '\n';
        rows.push_back(json{{"pretrain", name}, {"E_mean", ms.mean}, {"E_std", ms.std}});
        std::cout << "mtl_ablation " << name << ": E=" << fmt6(ms.mean) << " +- " << fmt6(ms.std) << "\n";
    }
    const double gap_pp = 100.0 * (means[1] - means[0]);
    std::cout << "mtl_ablation gap=" << fmt6(gap_pp) << "pp\n";
    const json params{{"setup", "instantaneous"}, {"severity", 5},   {"batch_size", 16},
                      {"batches_per_domain", 320}, {"online_lr", lr}, {"steps_per_batch", 1}};
    R.emit("mtl_ablation", params, "mtl_ablation.csv", csv.str(), json{{"rows", rows}, {"gap_pp", gap_pp}});
}

// Entropy as an uncertainty signal: the frozen model's entropy against
// severity, and the online objective's descent within single domains.
void study_uncertainty(Repro& R) {
    R.prefetch({ctta::PretrainMethod::Erm, ctta::PretrainMethod::Meta});
    const std::size_t ns = R.seeds.size();

    // Severity table from unadapted erm traces.
    std::vector<std::pair<int, ctta::AdaptTrace>> tagged(5 * ns);
    std::vector<std::function<void()>> cells;
    for (int sev = 1; sev <= 5; ++sev)
        for (std::size_t si = 0; si < ns; ++si)
            cells.push_back([&, sev, si] {
                ctta::StreamConfig sc;
                sc.severity = sev;
                sc.seed = R.seeds[si];
                const ctta::DomainStream ds = ctta::build_stream(R.source, sc);
                const ctta::Checkpoint& ck = R.pool.get(ctta::PretrainMethod::Erm, R.seeds[si]);
                tagged[static_cast<std::size_t>(sev - 1) * ns + si] = {
                    sev, run_trace(ck, ds, ctta::AdaptMethod::Erm, 1e-3, 1, R.seeds[si])};
            });
    run_cells(cells);
    const std::vector<ctta::SeverityPoint> table = ctta::severity_entropy_table(tagged);

    std::ostringstream sev_csv;
    sev_csv << "severity,mean_entropy,error\n";
    json sev_rows = json::array();
    for (const auto& p : table) {
        sev_csv << p.severity << ',' << fmt6(p.mean_entropy) << ',' << fmt6(p.error) << '\n';
        sev_rows.push_back(json{{"severity", p.severity}, {"mean_entropy", p.mean_entropy}, {"error", p.error}});
        std::cout << "uncertainty severity " << p.severity << ": entropy=" << fmt6(p.mean_entropy)
                  << " error=" << fmt6(p.error) << "\n";
    }

    // Objective descent within single-kind domains: first against last
    // quartile of the auxiliary entropy along the run.
    const double lr = 1e-2;
    const std::int64_t bpd = 160;
    const std::size_t nk = std::size(ctta::kAllKinds);
    std::vector<std::vector<std::pair<double, double>>> quart(nk,
                                                              std::vector<std::pair<double, double>>(ns, {0, 0}));
    cells.clear();
    for (std::size_t ki = 0; ki < nk; ++ki)
        for (std::size_t si = 0; si < ns; ++si)
            cells.push_back([&, ki, si] {
                ctta::StreamConfig sc;
                sc.kinds = {ctta::kAllKinds[ki]};
                sc.batches_per_domain = bpd;
                sc.seed = R.seeds[si];
                const ctta::DomainStream ds = ctta::build_stream(R.source, sc);
                const ctta::Checkpoint& ck = R.pool.get(ctta::PretrainMethod::Meta, R.seeds[si]);
                const ctta::AdaptTrace tr = run_trace(ck, ds, ctta::AdaptMethod::Ours, lr, 1, R.seeds[si]);
                const std::int64_t q = bpd / 4;
                double first = 0, last = 0;
                for (std::int64_t b = 0; b < q; ++b) {
                    first += tr.records[static_cast<std::size_t>(b)].entropy_aux / static_cast<double>(q);
                    last += tr.records[static_cast<std::size_t>(bpd - 1 - b)].entropy_aux / static_cast<double>(q);
                }
                quart[ki][si] = {first, last};
            });
    run_cells(cells);

    std::ostringstream q_csv;
    q_csv << "kind,first_quartile_entropy,last_quartile_entropy\n";
    json q_rows = json::array();
    for (std::size_t ki = 0; ki < nk; ++ki) {
        double first = 0, last = 0;
        for (std::size_t si = 0; si < ns; ++si) {
            first += quart[ki][si].first / static_cast<double>(ns);
            last += quart[ki][si].second / static_cast<double>(ns);
        }
        const char* name = ctta::kind_name(ctta::kAllKinds[ki]);
        q_csv << name << ',' << fmt6(first) << ',' << fmt6(last) << '\n';
        q_rows.push_back(json{{"kind", name}, {"first_quartile", first}, {"last_quartile", last}});
        std::cout << "uncertainty quartiles " << name << ": " << fmt6(first) << " -> " << fmt6(last) << "\n";
    }

    const json params{{"severity_stream", {{"batch_size", 32}, {"batches_per_domain", 20}}},
                      {"quartile_stream",
                       {{"severity", 5}, {"batch_size", 32}, {"batches_per_domain", bpd}, {"online_lr", lr}}}};
    R.emit("uncertainty", params, "uncertainty_severity.csv", sev_csv.str(),
           json{{"severity_table", sev_rows}, {"quartiles", q_rows}});
    std::ostringstream head;
    head << "# study=uncertainty config_hash=" << ctta::fnv1a(params.dump()) << " seeds=" << seeds_csv(R.seeds)
         << "\n";
    write_text_file(R.out / "uncertainty_quartiles.csv", head.str() + q_csv.str());
}

struct ReproArgs {
    std::string study;
    std::string out_dir = "reproduce";
    std::vector<std::uint64_t> seeds{0, 1, 2};
    bool print_config = false;
};

int cmd_reproduce(const ReproArgs& a) {
    const std::map<std::string, void (*)(Repro&)> studies{
        {"main", study_main},
        {"gradual", study_gradual},
        {"batch_size", study_batch_size},
        {"aux_ablation", study_aux_ablation},
        {"mtl_ablation", study_mtl_ablation},
        {"uncertainty", study_uncertainty},
    };
    const auto it = studies.find(a.study);
    if (it == studies.end()) {
        std::string names;
        for (const auto& [k, v] : studies) names += (names.empty() ? "" : ", ") + k;
        throw ctta::InvalidConfigError("unknown study: " + a.study + " (valid: " + names + ")");
    }
    if (a.seeds.empty()) throw ctta::InvalidConfigError("reproduce needs at least one seed");

    if (a.print_config) {
        const json j{{"study", a.study}, {"seeds", a.seeds}, {"out", a.out_dir}};
        std::cout << j.dump(2) << "\n";
        return 0;
    }

    Repro R;
    R.out = a.out_dir;
    R.seeds = a.seeds;
    R.data = ctta::gen_source(R.source);
    R.pool.dir = R.out / "checkpoints";
    R.pool.data = &R.data;
    fs::create_directories(R.out);

    const auto t0 = std::chrono::steady_clock::now();
    it->second(R);
    const auto dt = std::chrono::duration_cast<std::chrono::seconds>(std::chrono::steady_clock::now() - t0);
    std::cerr << "study " << a.study << " finished in " << dt.count() << "s\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"continual test-time adaptation workbench"};
    app.require_subcommand(1);

    PretrainArgs pa;
    CLI::App* pre = app.add_subcommand("pretrain", "train source checkpoints, one per (method, seed)");
    pre->add_option("--config", pa.config_path, "experiment config JSON (source, arch, hyperparameters)");
    pre->add_option("--method", pa.methods, "meta, mtl, erm, ttt or ttt_meta")->delimiter(',');
    pre->add_option("--seed", pa.seeds, "pretraining seeds")->delimiter(',');
    pre->add_option("--out", pa.out_dir, "output directory");
    pre->add_flag("--print-config", pa.print_config, "print the resolved config and exit");

    StreamArgs sa;
    CLI::App* str = app.add_subcommand("stream", "write a corruption stream manifest");
    str->add_option("--config", sa.config_path, "experiment config JSON (source block is used)");
    str->add_option("--setup", sa.setup, "instantaneous or gradual");
    str->add_option("--kinds", sa.kinds, "transform kinds (default: all five)")->delimiter(',');
    str->add_option("--severity", sa.severity, "corruption severity 1..5 (instantaneous only)");
    str->add_option("--batch-size", sa.batch_size, "stream batch size");
    str->add_option("--batches", sa.batches, "batches per domain");
    str->add_option("--holdout", sa.holdout, "per-domain holdout size");
    str->add_option("--seed", sa.seed, "stream seed");
    str->add_option("--out", sa.out, "manifest path");
    str->add_option("--dump-holdouts", sa.dump_holdouts, "also write per-domain holdout CSVs here");
    str->add_flag("--print-config", sa.print_config, "print the manifest and exit");

    AdaptArgs aa;
    CLI::App* ada = app.add_subcommand("adapt", "adapt a checkpoint along a stream and score it");
    ada->add_option("--ckpt", aa.ckpt, "pretrained checkpoint")->required();
    ada->add_option("--stream", aa.stream, "stream manifest JSON")->required();
    ada->add_option("--method", aa.method, "ours, ours_noaux, tent, adabn, erm or ttt");
    ada->add_option("--batch-size", aa.batch_sizes, "batch size sweep (default: manifest value)")->delimiter(',');
    ada->add_option("--lr", aa.lr, "online learning rate");
    ada->add_option("--steps", aa.steps, "gradient steps per batch");
    ada->add_option("--seed", aa.seed, "adaptation seed");
    ada->add_option("--out", aa.out_dir, "output directory");
    ada->add_flag("--no-snapshots", aa.no_snapshots, "skip per-domain snapshot checkpoints");
    ada->add_flag("--print-config", aa.print_config, "print the resolved config and exit");

    std::vector<std::string> suites;
    CLI::App* ver = app.add_subcommand("verify", "run fixed-seed property suites");
    ver->add_option("suites", suites, "gradcheck, theorem1, metrics, bn (default: all)");

    ReproArgs ra;
    CLI::App* rep = app.add_subcommand("reproduce", "rerun a study end to end and write its tables");
    rep->add_option("--study", ra.study,
                    "main, gradual, batch_size, aux_ablation, mtl_ablation or uncertainty")
        ->required();
    rep->add_option("--out", ra.out_dir, "output directory (checkpoints are cached here)");
    rep->add_option("--seeds", ra.seeds, "replicate seeds")->delimiter(',');
    rep->add_flag("--print-config", ra.print_config, "print the resolved config and exit");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (pre->parsed()) return cmd_pretrain(pa);
        if (str->parsed()) return cmd_stream(sa);
        if (ada->parsed()) return cmd_adapt(aa);
        if (ver->parsed()) return cmd_verify(suites);
        if (rep->parsed()) return cmd_reproduce(ra);
    } catch (const ctta::MethodModelMismatchError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const ctta::InvalidConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ctta::InvalidSpecError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

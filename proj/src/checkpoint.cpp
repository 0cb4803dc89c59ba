#include "ctta/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "ctta/errors.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

namespace ctta {

namespace {

constexpr char kMagic[8] = {'C', 'T', 'T', 'A', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

using json = nlohmann::json;

void append_raw(std::string& out, const void* p, std::size_t n) {
    out.append(reinterpret_cast<const char*>(p), n);
}

void append_f64(std::string& out, const std::vector<double>& v) {
    append_raw(out, v.data(), v.size() * sizeof(double));
}

json arch_to_json(const ArchSpec& a) {
    return json{{"paradigm", a.paradigm == Paradigm::Cascade ? "cascade" : "parallel"},
                {"input_dim", a.input_dim},
                {"phi_widths", a.phi_widths},
                {"num_classes", a.num_classes},
                {"aux_hidden", a.aux_hidden},
                {"bn_momentum", a.bn_momentum},
                {"bn_epsilon", a.bn_epsilon}};
}

ArchSpec arch_from_json(const json& j) {
    ArchSpec a;
    const std::string p = j.at("paradigm").get<std::string>();
    if (p == "cascade")
        a.paradigm = Paradigm::Cascade;
    else if (p == "parallel")
        a.paradigm = Paradigm::Parallel;
    else
        throw CheckpointFormatError("unknown paradigm tag: " + p);
    a.input_dim = j.at("input_dim").get<std::int64_t>();
    a.phi_widths = j.at("phi_widths").get<std::vector<std::int64_t>>();
    a.num_classes = j.at("num_classes").get<std::int64_t>();
    a.aux_hidden = j.at("aux_hidden").get<std::int64_t>();
    a.bn_momentum = j.at("bn_momentum").get<double>();
    a.bn_epsilon = j.at("bn_epsilon").get<double>();
    return a;
}

class Reader {
   public:
    explicit Reader(std::string_view s) : s_(s) {}

    void raw(void* p, std::size_t n) {
        if (off_ + n > s_.size()) throw CheckpointFormatError("checkpoint truncated");
        std::memcpy(p, s_.data() + off_, n);
        off_ += n;
    }

    template <typename T>
    T scalar() {
        T v;
        raw(&v, sizeof(T));
        return v;
    }

    std::string str(std::size_t n) {
        if (off_ + n > s_.size()) throw CheckpointFormatError("checkpoint truncated");
        std::string out(s_.substr(off_, n));
        off_ += n;
        return out;
    }

    std::vector<double> f64(std::size_t n) {
        std::vector<double> v(n);
        raw(v.data(), n * sizeof(double));
        return v;
    }

    bool done() const { return off_ == s_.size(); }

   private:
    std::string_view s_;
    std::size_t off_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& c) {
    const Layout layout = make_layout(c.model.arch);
    if (c.model.params.size() != layout.total)
        throw CheckpointFormatError("checkpoint: parameter vector does not match architecture");
    if (c.model.bn.size() != c.model.arch.phi_widths.size())
        throw CheckpointFormatError("checkpoint: BN state does not match architecture");

    json header{{"arch", arch_to_json(c.model.arch)},
                {"method", c.method},
                {"seed", c.seed},
                {"config_hash", c.config_hash},
                {"n_params", layout.total}};
    const std::string hs = header.dump();

    std::string out;
    append_raw(out, kMagic, sizeof(kMagic));
    append_raw(out, &kVersion, sizeof(kVersion));
    const std::uint64_t hlen = hs.size();
    append_raw(out, &hlen, sizeof(hlen));
    out += hs;
    append_f64(out, c.model.params);
    for (const auto& s : c.model.bn) {
        append_f64(out, s.mean);
        append_f64(out, s.var);
    }
    return out;
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
    Reader r(bytes);
    char magic[8];
    r.raw(magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw CheckpointFormatError("not a checkpoint file");
    const auto version = r.scalar<std::uint32_t>();
    if (version != kVersion)
        throw CheckpointFormatError("unsupported checkpoint format version " + std::to_string(version));
    const auto hlen = r.scalar<std::uint64_t>();
    json header;
    try {
        header = json::parse(r.str(static_cast<std::size_t>(hlen)));
    } catch (const json::exception& e) {
        throw CheckpointFormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }

    Checkpoint c;
    try {
        c.model.arch = arch_from_json(header.at("arch"));
        c.method = header.at("method").get<std::string>();
        c.seed = header.at("seed").get<std::uint64_t>();
        c.config_hash = header.at("config_hash").get<std::uint64_t>();
        const Layout layout = make_layout(c.model.arch);
        if (header.at("n_params").get<std::uint64_t>() != layout.total)
            throw CheckpointFormatError("checkpoint: parameter count disagrees with architecture");
        c.model.params = r.f64(layout.total);
        for (auto w : c.model.arch.phi_widths) {
            BnStats s;
            s.mean = r.f64(static_cast<std::size_t>(w));
            s.var = r.f64(static_cast<std::size_t>(w));
            c.model.bn.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        throw CheckpointFormatError(std::string("checkpoint header field missing or mistyped: ") + e.what());
    }
    if (!r.done()) throw CheckpointFormatError("checkpoint has trailing bytes");
    return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    const std::string bytes = serialize_checkpoint(c);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

}  // namespace ctta

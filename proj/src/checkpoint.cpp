#include "elit/checkpoint.hpp"

#include <cstring>
#include <sstream>

namespace elit {

namespace {

constexpr char kMagic[8] = {'E', 'L', 'I', 'T', 'C', 'K', 'P', 'T'};

void put_store(ByteWriter& w, const std::string& prefix, const ParameterStore<float>& store) {
    for (const auto& [name, p] : store.all()) {
        w.put_string(prefix + name);
        w.put<std::uint8_t>(0);
        w.put<std::uint32_t>(2);
        w.put<std::uint64_t>(static_cast<std::uint64_t>(p.value.rows()));
        w.put<std::uint64_t>(static_cast<std::uint64_t>(p.value.cols()));
        w.put_bytes(p.value.data(), sizeof(float) * static_cast<size_t>(p.value.size()));
    }
}

size_t tensor_count(const TrainState& s) {
    return s.model.params().all().size() + s.adam_m.all().size() + s.adam_v.all().size() + s.ema.params().all().size();
}

ParameterStore<float>* store_for(TrainState& s, const std::string& name, std::string& rest) {
    const auto slash = name.find('/');
    if (slash == std::string::npos) return nullptr;
    const std::string prefix = name.substr(0, slash);
    rest = name.substr(slash + 1);
    if (prefix == "param") return &s.model.params();
    if (prefix == "adam_m") return &s.adam_m;
    if (prefix == "adam_v") return &s.adam_v;
    if (prefix == "ema") return &s.ema.params();
    return nullptr;
}

} // namespace

std::vector<unsigned char> serialize_checkpoint(const RunConfig& cfg, const TrainState& state) {
    if (!(cfg.backbone == state.backbone) || !(cfg.training == state.training) || !(cfg.budget == state.budget))
        throw std::logic_error("serialize_checkpoint: config does not describe this train state");
    ByteWriter w;
    w.put_bytes(kMagic, sizeof kMagic);
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put_string(emit_config(cfg));
    w.put<std::int64_t>(state.step);
    std::ostringstream rng;
    rng << state.rng;
    w.put_string(rng.str());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(tensor_count(state)));
    put_store(w, "param/", state.model.params());
    put_store(w, "adam_m/", state.adam_m);
    put_store(w, "adam_v/", state.adam_v);
    put_store(w, "ema/", state.ema.params());
    w.seal();
    return w.bytes();
}

LoadedCheckpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes) {
    const std::string what = "checkpoint";
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw IntegrityError(what + ": not an ELIT checkpoint");
    std::uint32_t version;
    std::memcpy(&version, bytes.data() + 8, 4);
    if (version != kCheckpointVersion)
        throw CheckpointVersionError(what + ": format version " + std::to_string(version) + ", this build reads version " +
                                     std::to_string(kCheckpointVersion) + "; re-export it with a matching build");
    ByteReader r(bytes, what);
    char magic[8];
    r.get_bytes(magic, 8);
    r.get<std::uint32_t>();

    LoadedCheckpoint out;
    try {
        out.config = parse_config(r.get_string());
    } catch (const ConfigError& e) {
        throw IntegrityError(what + ": embedded config is invalid: " + e.what());
    }
    const RunConfig& c = out.config;
    out.state = std::make_unique<TrainState>(c.backbone, c.training, c.budget);
    TrainState& s = *out.state;
    s.step = r.get<std::int64_t>();
    std::istringstream rng(r.get_string());
    rng >> s.rng;
    if (!rng) throw IntegrityError(what + ": bad rng state");

    const auto count = r.get<std::uint32_t>();
    if (count != tensor_count(s)) throw IntegrityError(what + ": tensor count does not match the config");
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::string name = r.get_string();
        std::string rest;
        ParameterStore<float>* store = store_for(s, name, rest);
        if (!store || !store->contains(rest)) throw IntegrityError(what + ": unexpected tensor " + name);
        if (r.get<std::uint8_t>() != 0) throw IntegrityError(what + ": " + name + " has an unsupported dtype");
        if (r.get<std::uint32_t>() != 2) throw IntegrityError(what + ": " + name + " has an unexpected rank");
        Mat<float>& v = store->get(rest).value;
        const auto rows = r.get<std::uint64_t>();
        const auto cols = r.get<std::uint64_t>();
        if (rows != static_cast<std::uint64_t>(v.rows()) || cols != static_cast<std::uint64_t>(v.cols()))
            throw IntegrityError(what + ": " + name + " has the wrong shape");
        r.get_bytes(v.data(), sizeof(float) * static_cast<size_t>(v.size()));
    }
    if (!r.done()) throw IntegrityError(what + ": trailing bytes");
    return out;
}

void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, const TrainState& state) {
    write_file(path.string(), serialize_checkpoint(cfg, state));
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint(read_file(path.string()));
}

} // namespace elit

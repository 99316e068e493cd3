#include "fedsim/server.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>

#include "fedsim/errors.hpp"

namespace fedsim {

std::vector<int> sample_clients(int n_clients, int k, Rng& rng) {
    if (k < 1 || k > n_clients)
        throw ConfigError("sample_clients: k must lie in [1, " + std::to_string(n_clients) + "]");
    std::vector<int> ids(static_cast<std::size_t>(n_clients));
    for (int i = 0; i < n_clients; ++i) ids[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < k; ++i) {
        const auto j = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(n_clients - 1)));
        std::swap(ids[static_cast<std::size_t>(i)], ids[j]);
    }
    ids.resize(static_cast<std::size_t>(k));
    std::sort(ids.begin(), ids.end());
    return ids;
}

ModelParams aggregate_models(const std::vector<ClientUpload>& clients,
                             const ModelParams& prev, double rho,
                             bool literal_prefix_norm) {
    if (clients.empty()) return prev;

    double total = 0.0;
    for (const auto& c : clients) {
        if (!(c.params->config == prev.config))
            throw ConfigError("aggregate_models: client model config mismatch");
        total += static_cast<double>(c.num_samples);
    }
    if (total <= 0.0) return prev;

    ModelParams out = prev;
    auto out_t = out.tensors();
    const auto prev_t = prev.tensors();
    for (std::size_t i = 0; i < out_t.size(); ++i)
        for (std::size_t k = 0; k < out_t[i]->size(); ++k)
            (*out_t[i])[k] = (1.0 - rho) * (*prev_t[i])[k];

    double prefix = 0.0;
    for (const auto& c : clients) {
        prefix += static_cast<double>(c.num_samples);
        const double w = static_cast<double>(c.num_samples) / (literal_prefix_norm ? prefix : total);
        const auto ct = c.params->tensors();
        for (std::size_t i = 0; i < out_t.size(); ++i) {
            if (!out_t[i]->same_shape(*ct[i]))
                throw ConfigError("aggregate_models: parameter shape mismatch");
            for (std::size_t k = 0; k < out_t[i]->size(); ++k)
                (*out_t[i])[k] += rho * w * (*ct[i])[k];
        }
    }
    return out;
}

void aggregate_prototypes(const std::vector<PrototypeUpload>& uploads,
                          GlobalPrototypeStore& store, double beta, std::size_t round) {
    if (uploads.empty()) return;

    // gather per-class reports across clients, classes in ascending order
    std::map<int, std::vector<const Prototype*>> by_class;
    for (const auto& up : uploads)
        for (const auto& p : up.prototypes) {
            if (p.support_count == 0) continue;
            by_class[p.class_id].push_back(&p);
        }

    for (const auto& [c, reports] : by_class) {
        const std::size_t d = reports.front()->mean.size();
        double count_sum = 0.0;
        for (const auto* p : reports) count_sum += static_cast<double>(p->support_count);
        std::vector<double> v(d, 0.0);
        for (const auto* p : reports) {
            const double w = static_cast<double>(p->support_count) / count_sum;
            for (std::size_t k = 0; k < d; ++k) v[k] += w * p->mean[k];
        }
        auto it = store.entries.find(c);
        if (it == store.entries.end()) {
            store.entries[c] = {std::move(v), round};
        } else {
            auto& e = it->second;
            if (e.mean.size() != d)
                throw ConfigError("aggregate_prototypes: prototype width changed");
            for (std::size_t k = 0; k < d; ++k)
                e.mean[k] = beta * v[k] + (1.0 - beta) * e.mean[k];
            e.last_update_round = round;
        }
    }

    double count_sum = 0.0;
    for (const auto& up : uploads) count_sum += static_cast<double>(up.radius.support_count);
    if (count_sum > 0.0) {
        double v = 0.0;
        for (const auto& up : uploads)
            v += static_cast<double>(up.radius.support_count) / count_sum * up.radius.radius;
        store.radius = store.has_radius ? beta * v + (1.0 - beta) * store.radius : v;
        store.has_radius = true;
    }
}

// --- checkpoint io ---------------------------------------------------------

// defined in nn.cpp
void write_params_stream(std::ostream& out, const ModelParams& params);
ModelParams read_params_stream(std::istream& in);

namespace {
constexpr char kServerMagic[8] = {'F', 'S', 'S', 'R', 'V', '0', '0', '1'};

template <typename T>
void wpod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T rpod(std::istream& in) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw SchemaError("server checkpoint: truncated file");
    return v;
}
}  // namespace

void save_server_state(const std::string& path, const ServerState& state) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open " + path + " for writing");
    out.write(kServerMagic, sizeof(kServerMagic));
    wpod<std::uint64_t>(out, static_cast<std::uint64_t>(state.round));
    write_params_stream(out, state.params);
    wpod<std::uint8_t>(out, state.store.has_radius ? 1 : 0);
    wpod<double>(out, state.store.radius);
    wpod<std::uint64_t>(out, state.store.entries.size());
    for (const auto& [c, e] : state.store.entries) {
        wpod<std::int32_t>(out, c);
        wpod<std::uint64_t>(out, e.last_update_round);
        wpod<std::uint64_t>(out, e.mean.size());
        out.write(reinterpret_cast<const char*>(e.mean.data()),
                  static_cast<std::streamsize>(e.mean.size() * sizeof(double)));
    }
    if (!out) throw ConfigError("write failed: " + path);
}

ServerState load_server_state(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kServerMagic, 8) != 0)
        throw SchemaError("not a server checkpoint: " + path);
    ServerState state;
    state.round = static_cast<std::size_t>(rpod<std::uint64_t>(in));
    state.params = read_params_stream(in);
    state.store.has_radius = rpod<std::uint8_t>(in) != 0;
    state.store.radius = rpod<double>(in);
    const auto n = rpod<std::uint64_t>(in);
    for (std::uint64_t i = 0; i < n; ++i) {
        const int c = rpod<std::int32_t>(in);
        GlobalPrototypeStore::Entry e;
        e.last_update_round = static_cast<std::size_t>(rpod<std::uint64_t>(in));
        const auto d = rpod<std::uint64_t>(in);
        e.mean.resize(d);
        if (!in.read(reinterpret_cast<char*>(e.mean.data()),
                     static_cast<std::streamsize>(d * sizeof(double))))
            throw SchemaError("server checkpoint: truncated prototype");
        state.store.entries[c] = std::move(e);
    }
    return state;
}

}  // namespace fedsim

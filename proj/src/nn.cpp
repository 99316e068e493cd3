#include "fedsim/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "fedsim/errors.hpp"
#include "fedsim/kernels.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

using nlohmann::json;

std::vector<Tensor*> ModelParams::tensors() {
    std::vector<Tensor*> out;
    for (auto& nt : encoder) out.push_back(&nt.t);
    out.push_back(&head_w);
    out.push_back(&head_b);
    return out;
}

std::vector<const Tensor*> ModelParams::tensors() const {
    std::vector<const Tensor*> out;
    for (const auto& nt : encoder) out.push_back(&nt.t);
    out.push_back(&head_w);
    out.push_back(&head_b);
    return out;
}

bool ModelParams::finite() const {
    for (const Tensor* t : tensors())
        if (!t->finite()) return false;
    return true;
}

bool operator==(const ModelParams& a, const ModelParams& b) {
    if (!(a.config == b.config)) return false;
    if (a.encoder.size() != b.encoder.size()) return false;
    for (std::size_t i = 0; i < a.encoder.size(); ++i)
        if (a.encoder[i].name != b.encoder[i].name || !(a.encoder[i].t == b.encoder[i].t))
            return false;
    return a.head_w == b.head_w && a.head_b == b.head_b;
}

std::vector<Tensor*> GradientSet::tensors() {
    std::vector<Tensor*> out;
    for (auto& nt : encoder) out.push_back(&nt.t);
    out.push_back(&head_w);
    out.push_back(&head_b);
    return out;
}

std::vector<const Tensor*> GradientSet::tensors() const {
    std::vector<const Tensor*> out;
    for (const auto& nt : encoder) out.push_back(&nt.t);
    out.push_back(&head_w);
    out.push_back(&head_b);
    return out;
}

namespace {

void xavier_fill(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& x : t.v) x = rng.uniform(-limit, limit);
}

struct MlpDims {
    std::vector<std::size_t> widths;  // input, hidden..., feature
};

MlpDims mlp_dims(const EncoderConfig& e) {
    MlpDims d;
    d.widths.push_back(e.input_dim);
    for (std::size_t h : e.hidden) d.widths.push_back(h);
    d.widths.push_back(e.mlp_feature_dim);
    return d;
}

double act_fwd(Activation a, double x) {
    return a == Activation::Tanh ? std::tanh(x) : (x > 0.0 ? x : 0.0);
}

double act_bwd(Activation a, double pre) {
    if (a == Activation::Tanh) {
        const double t = std::tanh(pre);
        return 1.0 - t * t;
    }
    return pre > 0.0 ? 1.0 : 0.0;
}

}  // namespace

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
    ModelParams p;
    p.config = config;
    std::size_t idx = 0;
    auto stream = [&]() { return Rng::derive(seed, {Rng::kInitTag, idx++}); };

    const EncoderConfig& e = config.encoder;
    if (e.kind == EncoderConfig::Kind::Mlp) {
        const MlpDims dims = mlp_dims(e);
        for (std::size_t i = 0; i + 1 < dims.widths.size(); ++i) {
            const std::size_t in = dims.widths[i], out = dims.widths[i + 1];
            NamedTensor w{"enc.w" + std::to_string(i), Tensor({out, in})};
            Rng r = stream();
            xavier_fill(w.t, in, out, r);
            p.encoder.push_back(std::move(w));
            p.encoder.push_back({"enc.b" + std::to_string(i), Tensor({out})});
        }
    } else {
        std::size_t ci = e.in_channels;
        for (std::size_t blk = 0; blk < 3; ++blk) {
            const std::size_t co = e.channels[blk];
            NamedTensor w{"enc.conv" + std::to_string(blk) + ".w", Tensor({co, ci, 3, 3})};
            Rng r = stream();
            xavier_fill(w.t, ci * 9, co * 9, r);
            p.encoder.push_back(std::move(w));
            p.encoder.push_back({"enc.conv" + std::to_string(blk) + ".b", Tensor({co})});
            ci = co;
        }
    }

    const std::size_t d = e.feature_dim();
    p.head_w = Tensor({config.num_outputs, d});
    Rng r = stream();
    xavier_fill(p.head_w, d, config.num_outputs, r);
    p.head_b = Tensor({config.num_outputs});
    return p;
}

GradientSet zeros_like(const ModelParams& params) {
    GradientSet g;
    for (const auto& nt : params.encoder) g.encoder.push_back({nt.name, Tensor(nt.t.shape)});
    g.head_w = Tensor(params.head_w.shape);
    g.head_b = Tensor(params.head_b.shape);
    return g;
}

void add_scaled(GradientSet& acc, const GradientSet& g, double s) {
    auto dst = acc.tensors();
    auto src = g.tensors();
    for (std::size_t i = 0; i < dst.size(); ++i)
        for (std::size_t k = 0; k < dst[i]->size(); ++k) (*dst[i])[k] += s * (*src[i])[k];
}

FeatureBatch encode(const ModelParams& params, const InputBatch& batch,
                    ForwardCache* cache) {
    const EncoderConfig& e = params.config.encoder;
    const std::size_t B = batch.batch_size();
    if (batch.x.shape.empty() || batch.x.shape[0] != B)
        throw ConfigError("encode: batch tensor leading dim != label count");

    if (cache) {
        cache->input = batch.x;
        cache->pre.clear();
        cache->post.clear();
    }

    if (e.kind == EncoderConfig::Kind::Mlp) {
        const MlpDims dims = mlp_dims(e);
        if (batch.x.size() != B * e.input_dim)
            throw ConfigError("encode: input width mismatch");
        Tensor a = batch.x;
        const std::size_t layers = dims.widths.size() - 1;
        for (std::size_t i = 0; i < layers; ++i) {
            const Tensor& w = params.encoder[2 * i].t;
            const Tensor& b = params.encoder[2 * i + 1].t;
            Tensor z({B, dims.widths[i + 1]});
            kernels::gemm_nt(a.data(), w.data(), b.data(), z.data(), B, dims.widths[i],
                             dims.widths[i + 1]);
            if (cache) cache->pre.push_back(z);
            if (i + 1 < layers) {
                Tensor act(z.shape);
                for (std::size_t k = 0; k < z.size(); ++k) act[k] = act_fwd(e.act, z[k]);
                if (cache) cache->post.push_back(act);
                a = std::move(act);
            } else {
                a = std::move(z);
            }
        }
        return {std::move(a), batch.labels};
    }

    // conv path
    const std::size_t s = e.image_size;
    if (batch.x.size() != B * e.in_channels * s * s)
        throw ConfigError("encode: image shape mismatch");
    Tensor cur = batch.x;
    std::size_t side = s, ci = e.in_channels;
    for (std::size_t blk = 0; blk < 3; ++blk) {
        const std::size_t co = e.channels[blk];
        const Tensor& w = params.encoder[2 * blk].t;
        const Tensor& b = params.encoder[2 * blk + 1].t;
        Tensor z({B, co, side, side});
        kernels::conv3x3_forward(cur.data(), w.data(), b.data(), z.data(), B, ci, co,
                                 side, side);
        if (cache) cache->pre.push_back(z);
        Tensor act(z.shape);
        for (std::size_t k = 0; k < z.size(); ++k) act[k] = act_fwd(Activation::Relu, z[k]);
        Tensor pooled({B, co, side / 2, side / 2});
        kernels::avgpool2_forward(act.data(), pooled.data(), B * co, side, side);
        if (cache) cache->post.push_back(pooled);
        cur = std::move(pooled);
        side /= 2;
        ci = co;
    }
    Tensor features({B, e.channels[2]});
    kernels::gap_forward(cur.data(), features.data(), B, e.channels[2], side * side);
    return {std::move(features), batch.labels};
}

Tensor classify(const ModelParams& params, const Tensor& features) {
    const std::size_t d = params.feature_dim();
    if (features.shape.size() != 2 || features.shape[1] != d)
        throw ConfigError("classify: feature width mismatch");
    const std::size_t B = features.shape[0];
    const std::size_t n = params.config.num_outputs;
    Tensor logits({B, n});
    kernels::gemm_nt(features.data(), params.head_w.data(), params.head_b.data(),
                     logits.data(), B, d, n);
    return logits;
}

double cross_entropy(const Tensor& logits, const std::vector<int>& labels, Reduction red) {
    const std::size_t B = logits.shape[0], n = logits.shape[1];
    if (labels.size() != B) throw ConfigError("cross_entropy: label count mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        const double* row = logits.data() + i * n;
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= n)
            throw ConfigError("cross_entropy: label out of range");
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
        total += -(row[static_cast<std::size_t>(y)] - mx - std::log(sum));
    }
    return red == Reduction::Mean ? total / static_cast<double>(B) : total;
}

Tensor cross_entropy_grad(const Tensor& logits, const std::vector<int>& labels,
                          Reduction red) {
    const std::size_t B = logits.shape[0], n = logits.shape[1];
    Tensor g({B, n});
    const double scale = red == Reduction::Mean ? 1.0 / static_cast<double>(B) : 1.0;
    for (std::size_t i = 0; i < B; ++i) {
        const double* row = logits.data() + i * n;
        double* grow = g.data() + i * n;
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < n; ++j) grow[j] = scale * std::exp(row[j] - mx) / sum;
        grow[static_cast<std::size_t>(labels[i])] -= scale;
    }
    return g;
}

void head_backward(const ModelParams& params, const Tensor& features,
                   const Tensor& dlogits, GradientSet& acc, Tensor* dfeatures) {
    const std::size_t B = features.shape[0];
    const std::size_t d = params.feature_dim();
    const std::size_t n = params.config.num_outputs;
    Tensor dw({n, d}), db({n});
    kernels::gemm_tn(dlogits.data(), features.data(), dw.data(), B, n, d);
    kernels::colsum(dlogits.data(), db.data(), B, n);
    for (std::size_t k = 0; k < dw.size(); ++k) acc.head_w[k] += dw[k];
    for (std::size_t k = 0; k < db.size(); ++k) acc.head_b[k] += db[k];
    if (dfeatures) {
        *dfeatures = Tensor({B, d});
        kernels::gemm_nn(dlogits.data(), params.head_w.data(), dfeatures->data(), B, n, d);
    }
}

void encoder_backward(const ModelParams& params, const ForwardCache& cache,
                      const Tensor& dfeatures, GradientSet& acc) {
    const EncoderConfig& e = params.config.encoder;
    const std::size_t B = cache.input.shape[0];

    if (e.kind == EncoderConfig::Kind::Mlp) {
        const MlpDims dims = mlp_dims(e);
        const std::size_t layers = dims.widths.size() - 1;
        Tensor dz = dfeatures;  // gradient at last pre-activation (linear output)
        for (std::size_t i = layers; i-- > 0;) {
            const Tensor& w = params.encoder[2 * i].t;
            const Tensor& in = i == 0 ? cache.input : cache.post[i - 1];
            const std::size_t m = dims.widths[i], n = dims.widths[i + 1];
            Tensor dw({n, m}), db({n});
            kernels::gemm_tn(dz.data(), in.data(), dw.data(), B, n, m);
            kernels::colsum(dz.data(), db.data(), B, n);
            for (std::size_t k = 0; k < dw.size(); ++k) acc.encoder[2 * i].t[k] += dw[k];
            for (std::size_t k = 0; k < db.size(); ++k) acc.encoder[2 * i + 1].t[k] += db[k];
            if (i == 0) break;
            Tensor da({B, m});
            kernels::gemm_nn(dz.data(), w.data(), da.data(), B, n, m);
            const Tensor& pre = cache.pre[i - 1];
            Tensor next({B, m});
            for (std::size_t k = 0; k < next.size(); ++k)
                next[k] = da[k] * act_bwd(e.act, pre[k]);
            dz = std::move(next);
        }
        return;
    }

    // conv path
    std::size_t side = e.image_size / 8;
    Tensor dcur({B, e.channels[2], side, side});
    kernels::gap_backward(dfeatures.data(), dcur.data(), B, e.channels[2], side * side);
    for (std::size_t blk = 3; blk-- > 0;) {
        const std::size_t co = e.channels[blk];
        const std::size_t ci = blk == 0 ? e.in_channels : e.channels[blk - 1];
        const std::size_t in_side = side * 2;
        Tensor dact({B, co, in_side, in_side});
        kernels::avgpool2_backward(dcur.data(), dact.data(), B * co, in_side, in_side);
        const Tensor& pre = cache.pre[blk];
        Tensor dz({B, co, in_side, in_side});
        for (std::size_t k = 0; k < dz.size(); ++k)
            dz[k] = dact[k] * act_bwd(Activation::Relu, pre[k]);
        const Tensor& in = blk == 0 ? cache.input : cache.post[blk - 1];
        Tensor dw({co, ci, 3, 3}), db({co});
        kernels::conv3x3_weight_grad(dz.data(), in.data(), dw.data(), db.data(), B, ci, co,
                                     in_side, in_side);
        for (std::size_t k = 0; k < dw.size(); ++k) acc.encoder[2 * blk].t[k] += dw[k];
        for (std::size_t k = 0; k < db.size(); ++k) acc.encoder[2 * blk + 1].t[k] += db[k];
        if (blk == 0) break;
        Tensor din({B, ci, in_side, in_side});
        kernels::conv3x3_input_grad(dz.data(), params.encoder[2 * blk].t.data(), din.data(),
                                    B, ci, co, in_side, in_side);
        dcur = std::move(din);
        side = in_side;
    }
}

GradientSet backward(const ModelParams& params, const ForwardCache& cache,
                     const Tensor& features, const Tensor& dlogits,
                     const Tensor* dfeatures_extra) {
    GradientSet g = zeros_like(params);
    Tensor dfeat;
    head_backward(params, features, dlogits, g, &dfeat);
    if (dfeatures_extra) {
        if (!dfeatures_extra->same_shape(dfeat))
            throw ConfigError("backward: extra feature gradient shape mismatch");
        for (std::size_t k = 0; k < dfeat.size(); ++k) dfeat[k] += (*dfeatures_extra)[k];
    }
    encoder_backward(params, cache, dfeat, g);
    for (const auto& nt : g.encoder)
        if (!nt.t.finite()) throw NumericError("non-finite gradient for tensor " + nt.name);
    if (!g.head_w.finite()) throw NumericError("non-finite gradient for tensor head.w");
    if (!g.head_b.finite()) throw NumericError("non-finite gradient for tensor head.b");
    return g;
}

double LrSchedule::at_round(std::size_t round) const {
    if (halve_every == 0) return base;
    return base * std::pow(0.5, static_cast<double>(round / halve_every));
}

OptimizerState make_optimizer(const ModelParams& params, const LrSchedule& schedule) {
    OptimizerState st;
    st.schedule = schedule;
    for (const Tensor* t : params.tensors()) {
        st.m.emplace_back(t->shape);
        st.v.emplace_back(t->shape);
    }
    return st;
}

void adam_step(ModelParams& params, const GradientSet& grads, OptimizerState& state,
               std::size_t round) {
    auto ps = params.tensors();
    auto gs = grads.tensors();
    if (ps.size() != state.m.size() || gs.size() != ps.size())
        throw ConfigError("adam_step: parameter/state shape mismatch");
    state.step += 1;
    const double lr = state.schedule.at_round(round);
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        Tensor& p = *ps[i];
        const Tensor& g = *gs[i];
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        if (!p.same_shape(g)) throw ConfigError("adam_step: gradient shape mismatch");
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            const double mhat = m[k] / c1;
            const double vhat = v[k] / c2;
            p[k] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

Tensor rotate90(const Tensor& image) {
    if (image.shape.size() != 3 || image.shape[1] != image.shape[2])
        throw ConfigError("rotate90: expected square {C,H,W} image");
    const std::size_t c = image.shape[0], s = image.shape[1];
    Tensor out(image.shape);
    // counterclockwise: out[y][x] = in[x][s-1-y]
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* ip = image.data() + ch * s * s;
        double* op = out.data() + ch * s * s;
        for (std::size_t y = 0; y < s; ++y)
            for (std::size_t x = 0; x < s; ++x) op[y * s + x] = ip[x * s + (s - 1 - y)];
    }
    return out;
}

InputBatch label_augment(const InputBatch& batch) {
    if (batch.x.shape.size() != 4 || batch.x.shape[2] != batch.x.shape[3])
        throw ConfigError("label_augment: requires square {B,C,H,W} image batches");
    const std::size_t B = batch.batch_size();
    const std::size_t c = batch.x.shape[1], s = batch.x.shape[2];
    const std::size_t plane = c * s * s;
    InputBatch out;
    out.x = Tensor({B * 4, c, s, s});
    out.labels.reserve(B * 4);
    for (std::size_t i = 0; i < B; ++i) {
        Tensor img({c, s, s});
        std::memcpy(img.data(), batch.x.data() + i * plane, plane * sizeof(double));
        for (int rot = 0; rot < 4; ++rot) {
            std::memcpy(out.x.data() + (i * 4 + static_cast<std::size_t>(rot)) * plane,
                        img.data(), plane * sizeof(double));
            out.labels.push_back(batch.labels[i] * 4 + rot);
            if (rot < 3) img = rotate90(img);
        }
    }
    return out;
}

// --- checkpoint io ---------------------------------------------------------

namespace {

constexpr char kParamsMagic[8] = {'F', 'S', 'T', 'H', 'E', 'T', '0', '1'};

json encoder_to_json(const EncoderConfig& e) {
    json j;
    j["kind"] = e.kind == EncoderConfig::Kind::Mlp ? "mlp" : "conv";
    j["input_dim"] = e.input_dim;
    j["hidden"] = e.hidden;
    j["mlp_feature_dim"] = e.mlp_feature_dim;
    j["act"] = e.act == Activation::Tanh ? "tanh" : "relu";
    j["in_channels"] = e.in_channels;
    j["image_size"] = e.image_size;
    j["channels"] = e.channels;
    return j;
}

EncoderConfig encoder_from_json(const json& j) {
    EncoderConfig e;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "mlp")
        e.kind = EncoderConfig::Kind::Mlp;
    else if (kind == "conv")
        e.kind = EncoderConfig::Kind::Conv;
    else
        throw SchemaError("checkpoint: unknown encoder kind " + kind);
    e.input_dim = j.at("input_dim").get<std::size_t>();
    e.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    e.mlp_feature_dim = j.at("mlp_feature_dim").get<std::size_t>();
    e.act = j.at("act").get<std::string>() == "tanh" ? Activation::Tanh : Activation::Relu;
    e.in_channels = j.at("in_channels").get<std::size_t>();
    e.image_size = j.at("image_size").get<std::size_t>();
    const auto ch = j.at("channels").get<std::vector<std::size_t>>();
    if (ch.size() != 3) throw SchemaError("checkpoint: channels must have 3 entries");
    e.channels = {ch[0], ch[1], ch[2]};
    return e;
}

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw SchemaError("checkpoint: truncated file");
    return v;
}

void write_string(std::ostream& out, const std::string& s) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
    const auto n = read_pod<std::uint32_t>(in);
    std::string s(n, '\0');
    if (!in.read(s.data(), n)) throw SchemaError("checkpoint: truncated string");
    return s;
}

void write_tensor(std::ostream& out, const Tensor& t) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) write_pod<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor read_tensor(std::istream& in) {
    const auto nd = read_pod<std::uint32_t>(in);
    std::vector<std::size_t> shape(nd);
    for (auto& d : shape) d = static_cast<std::size_t>(read_pod<std::uint64_t>(in));
    Tensor t(shape);
    if (!in.read(reinterpret_cast<char*>(t.data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double))))
        throw SchemaError("checkpoint: truncated tensor payload");
    return t;
}

}  // namespace

void write_params_stream(std::ostream& out, const ModelParams& params);
ModelParams read_params_stream(std::istream& in);

void write_params_stream(std::ostream& out, const ModelParams& params) {
    json cfg;
    cfg["encoder"] = encoder_to_json(params.config.encoder);
    cfg["num_outputs"] = params.config.num_outputs;
    write_string(out, cfg.dump());
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(params.encoder.size()));
    for (const auto& nt : params.encoder) {
        write_string(out, nt.name);
        write_tensor(out, nt.t);
    }
    write_tensor(out, params.head_w);
    write_tensor(out, params.head_b);
}

ModelParams read_params_stream(std::istream& in) {
    ModelParams p;
    const json cfg = json::parse(read_string(in));
    p.config.encoder = encoder_from_json(cfg.at("encoder"));
    p.config.num_outputs = cfg.at("num_outputs").get<std::size_t>();
    const auto n = read_pod<std::uint32_t>(in);
    for (std::uint32_t i = 0; i < n; ++i) {
        NamedTensor nt;
        nt.name = read_string(in);
        nt.t = read_tensor(in);
        p.encoder.push_back(std::move(nt));
    }
    p.head_w = read_tensor(in);
    p.head_b = read_tensor(in);
    return p;
}

void save_params(const std::string& path, const ModelParams& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open " + path + " for writing");
    out.write(kParamsMagic, sizeof(kParamsMagic));
    write_params_stream(out, params);
    if (!out) throw ConfigError("write failed: " + path);
}

ModelParams load_params(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kParamsMagic, 8) != 0)
        throw SchemaError("not a parameter checkpoint: " + path);
    return read_params_stream(in);
}

}  // namespace fedsim

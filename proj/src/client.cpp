#include "fedsim/client.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fedsim/errors.hpp"

namespace fedsim {

namespace {

constexpr double kNormEps = 1e-12;  // zero-norm guard in cosine similarities

InputBatch gather(const StageData& stage, const std::vector<std::size_t>& which,
                  const std::vector<std::size_t>& in_shape) {
    const std::size_t sample_len = Tensor::count(in_shape);
    InputBatch b;
    std::vector<std::size_t> shape = {which.size()};
    shape.insert(shape.end(), in_shape.begin(), in_shape.end());
    b.x = Tensor(shape);
    b.labels.reserve(which.size());
    for (std::size_t i = 0; i < which.size(); ++i) {
        const std::size_t idx = stage.indices[which[i]];
        const Tensor& s = stage.dataset->samples[idx];
        if (s.size() != sample_len) throw ConfigError("stage sample shape mismatch");
        std::memcpy(b.x.data() + i * sample_len, s.data(), sample_len * sizeof(double));
        b.labels.push_back(stage.dataset->labels[idx]);
    }
    return b;
}

// Features for every stage sample, in stage order. Chunked so prototype
// computation does not materialize giant batches.
Tensor encode_stage(const StageData& stage, const ModelParams& params,
                    std::vector<int>& labels_out) {
    const auto in_shape = params.config.encoder.input_shape();
    const std::size_t d = params.feature_dim();
    const std::size_t n = stage.size();
    Tensor features({n, d});
    labels_out.resize(n);
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < n; start += kChunk) {
        const std::size_t len = std::min(kChunk, n - start);
        std::vector<std::size_t> which(len);
        for (std::size_t i = 0; i < len; ++i) which[i] = start + i;
        const InputBatch batch = gather(stage, which, in_shape);
        const FeatureBatch fb = encode(params, batch);
        std::memcpy(features.data() + start * d, fb.features.data(), len * d * sizeof(double));
        for (std::size_t i = 0; i < len; ++i) labels_out[start + i] = batch.labels[i];
    }
    return features;
}

double cosine(const double* a, const double* b, std::size_t d) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / ((std::sqrt(aa) + kNormEps) * (std::sqrt(bb) + kNormEps));
}

// d(cos(a,b))/da accumulated into ga with weight w.
void cosine_grad_a(const double* a, const double* b, std::size_t d, double w, double* ga) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    const double na = std::sqrt(aa), nb = std::sqrt(bb);
    const double ua = 1.0 / (na + kNormEps), ub = 1.0 / (nb + kNormEps);
    const double s = ab * ua * ub;
    for (std::size_t i = 0; i < d; ++i) {
        double g = b[i] * ua * ub;
        if (na > 0.0) g -= s * ua * (a[i] / na);
        ga[i] += w * g;
    }
}

}  // namespace

std::vector<Prototype> compute_prototypes(const StageData& data, const ModelParams& params) {
    if (data.size() == 0) throw ConfigError("compute_prototypes: empty stage data");
    std::vector<int> labels;
    const Tensor features = encode_stage(data, params, labels);
    const std::size_t d = params.feature_dim();

    std::map<int, Prototype> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        Prototype& p = by_class[labels[i]];
        if (p.mean.empty()) {
            p.class_id = labels[i];
            p.mean.assign(d, 0.0);
        }
        const double* row = features.data() + i * d;
        for (std::size_t k = 0; k < d; ++k) p.mean[k] += row[k];
        p.support_count += 1;
    }
    std::vector<Prototype> out;
    out.reserve(by_class.size());
    for (auto& [c, p] : by_class) {
        for (auto& x : p.mean) x /= static_cast<double>(p.support_count);
        out.push_back(std::move(p));
    }
    return out;
}

RadiusStat compute_radius(const StageData& data, const ModelParams& params, RadiusMode mode) {
    if (data.size() == 0) throw ConfigError("compute_radius: empty stage data");
    std::vector<int> labels;
    const Tensor features = encode_stage(data, params, labels);
    const std::size_t d = params.feature_dim();

    // population covariance per class; only the trace is needed
    std::map<int, std::pair<std::vector<double>, std::size_t>> sums;  // class -> (sum, n)
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto& [sum, n] = sums[labels[i]];
        if (sum.empty()) sum.assign(d, 0.0);
        const double* row = features.data() + i * d;
        for (std::size_t k = 0; k < d; ++k) sum[k] += row[k];
        n += 1;
    }
    double trace_sum = 0.0;
    for (const auto& [c, entry] : sums) {
        const auto& [sum, n] = entry;
        std::vector<double> mean(d);
        for (std::size_t k = 0; k < d; ++k) mean[k] = sum[k] / static_cast<double>(n);
        double sq = 0.0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] != c) continue;
            const double* row = features.data() + i * d;
            for (std::size_t k = 0; k < d; ++k) {
                const double dev = row[k] - mean[k];
                sq += dev * dev;
            }
        }
        trace_sum += sq / static_cast<double>(n) / static_cast<double>(d);
    }
    const double denom = mode == RadiusMode::PerClassMean
                             ? static_cast<double>(sums.size())
                             : static_cast<double>(data.size());
    RadiusStat stat;
    stat.radius = std::sqrt(trace_sum / denom);
    stat.support_count = data.size();
    return stat;
}

std::vector<double> augment_prototype(const std::vector<double>& e, double r, Rng& rng) {
    std::vector<double> out(e.size());
    for (std::size_t i = 0; i < e.size(); ++i) out[i] = e[i] + r * rng.normal();
    return out;
}

namespace {

std::vector<int> eligible_classes(const GlobalPrototypeStore& store,
                                  const std::set<int>& active_classes) {
    std::vector<int> out;
    for (const auto& [c, _] : store.entries)
        if (!active_classes.count(c)) out.push_back(c);
    return out;
}

// The augmented-prototype batch behind the prototype loss. Draw order per
// entry: one uniform class index over the eligible set (sorted ascending),
// then the d normal draws of augment_prototype.
struct ProtoBatch {
    Tensor features;  // {B, d}
    std::vector<int> labels;
};

ProtoBatch make_proto_batch(const GlobalPrototypeStore& store,
                            const std::vector<int>& eligible, std::size_t batch_size,
                            std::size_t d, Rng& rng, std::size_t label_stride) {
    ProtoBatch pb;
    pb.features = Tensor({batch_size, d});
    pb.labels.reserve(batch_size);
    for (std::size_t n = 0; n < batch_size; ++n) {
        const int c = eligible[rng.uniform_int(0, eligible.size() - 1)];
        const auto aug = augment_prototype(store.entries.at(c).mean, store.radius, rng);
        std::memcpy(pb.features.data() + n * d, aug.data(), d * sizeof(double));
        pb.labels.push_back(c * static_cast<int>(label_stride));
    }
    return pb;
}

}  // namespace

double proto_loss(const GlobalPrototypeStore& store, const std::set<int>& active_classes,
                  const ModelParams& params, std::size_t batch_size, Rng& rng,
                  std::size_t label_stride) {
    const auto eligible = eligible_classes(store, active_classes);
    if (eligible.empty() || batch_size == 0) return 0.0;
    const ProtoBatch pb = make_proto_batch(store, eligible, batch_size, params.feature_dim(),
                                           rng, label_stride);
    const Tensor logits = classify(params, pb.features);
    return cross_entropy(logits, pb.labels, Reduction::Sum);
}

double repr_loss(const FeatureBatch& batch_features,
                 const std::vector<std::pair<int, std::vector<double>>>& augmented_old,
                 const std::set<int>& active_classes, Tensor* dfeatures, NegativesMode mode) {
    const std::size_t B = batch_features.features.shape[0];
    const std::size_t d = batch_features.features.shape[1];
    if (B == 0) throw ConfigError("repr_loss: empty batch");

    // pool: batch rows first, then one augmented prototype per class
    const std::size_t P = B + augmented_old.size();
    std::vector<const double*> vec(P);
    std::vector<int> label(P);
    for (std::size_t i = 0; i < B; ++i) {
        vec[i] = batch_features.features.data() + i * d;
        label[i] = batch_features.labels[i];
    }
    for (std::size_t j = 0; j < augmented_old.size(); ++j) {
        vec[B + j] = augmented_old[j].second.data();
        label[B + j] = augmented_old[j].first;
    }

    // per-class pooled means, used by the per-class-mean negative mode
    std::map<int, std::vector<double>> class_mean;
    std::map<int, std::size_t> class_count;
    if (mode == NegativesMode::PerClassMean) {
        for (std::size_t i = 0; i < P; ++i) {
            auto& m = class_mean[label[i]];
            if (m.empty()) m.assign(d, 0.0);
            for (std::size_t k = 0; k < d; ++k) m[k] += vec[i][k];
            class_count[label[i]] += 1;
        }
        for (auto& [c, m] : class_mean)
            for (auto& x : m) x /= static_cast<double>(class_count[c]);
    }

    std::vector<double> sim;           // pairwise, per-vector mode
    std::vector<double> g_sim;         // dL/ds for pairwise entries
    std::map<int, std::vector<double>> mean_sim;    // anchor x class, mean mode
    std::map<int, std::vector<double>> g_mean_sim;  // mirrors mean_sim
    if (mode == NegativesMode::PerVector) {
        sim.assign(P * P, 0.0);
        for (std::size_t i = 0; i < P; ++i)
            for (std::size_t j = i + 1; j < P; ++j) {
                const double s = cosine(vec[i], vec[j], d);
                sim[i * P + j] = s;
                sim[j * P + i] = s;
            }
        g_sim.assign(P * P, 0.0);
    } else {
        for (const auto& [c, m] : class_mean) {
            auto& row = mean_sim[c];
            row.resize(P);
            for (std::size_t i = 0; i < P; ++i) row[i] = cosine(vec[i], m.data(), d);
            g_mean_sim[c].assign(P, 0.0);
        }
        sim.assign(P * P, 0.0);
        for (std::size_t i = 0; i < P; ++i)
            for (std::size_t j = i + 1; j < P; ++j) {
                const double s = cosine(vec[i], vec[j], d);
                sim[i * P + j] = s;
                sim[j * P + i] = s;
            }
        g_sim.assign(P * P, 0.0);
    }

    // negative exponent sum per anchor (depends only on the anchor's class)
    std::vector<double> neg_sum(P, 0.0);
    for (std::size_t i = 0; i < P; ++i) {
        if (mode == NegativesMode::PerVector) {
            for (std::size_t k = 0; k < P; ++k)
                if (label[k] != label[i]) neg_sum[i] += std::exp(sim[i * P + k]);
        } else {
            for (const auto& [c, row] : mean_sim)
                if (c != label[i]) neg_sum[i] += std::exp(row[i]);
        }
    }

    double loss = 0.0;
    for (int c : active_classes) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < P; ++i)
            if (label[i] == c) members.push_back(i);
        const std::size_t nc = members.size();
        if (nc < 2) continue;
        const double wc = 1.0 / (static_cast<double>(B) * static_cast<double>(nc) *
                                 static_cast<double>(nc - 1));
        for (std::size_t a = 0; a < nc; ++a) {
            const std::size_t i = members[a];
            double coef_i = 0.0;  // sum over pairs of 1/(e^{s+} + n_i)
            for (std::size_t b = 0; b < nc; ++b) {
                if (a == b) continue;
                const std::size_t j = members[b];
                const double sp = sim[i * P + j];
                const double denom = std::exp(sp) + neg_sum[i];
                loss -= wc * (sp - std::log(denom));
                if (dfeatures) {
                    g_sim[i * P + j] += -wc * (neg_sum[i] / denom);
                    coef_i += wc / denom;
                }
            }
            if (dfeatures && coef_i != 0.0) {
                if (mode == NegativesMode::PerVector) {
                    for (std::size_t k = 0; k < P; ++k)
                        if (label[k] != c) g_sim[i * P + k] += coef_i * std::exp(sim[i * P + k]);
                } else {
                    for (const auto& [g, row] : mean_sim)
                        if (g != c) g_mean_sim[g][i] += coef_i * std::exp(row[i]);
                }
            }
        }
    }

    if (dfeatures) {
        std::vector<std::vector<double>> dp(P, std::vector<double>(d, 0.0));
        for (std::size_t i = 0; i < P; ++i)
            for (std::size_t k = 0; k < P; ++k) {
                const double g = g_sim[i * P + k];
                if (g == 0.0) continue;
                cosine_grad_a(vec[i], vec[k], d, g, dp[i].data());
                cosine_grad_a(vec[k], vec[i], d, g, dp[k].data());
            }
        for (const auto& [c, grow] : g_mean_sim) {
            const auto& m = class_mean[c];
            const double inv_n = 1.0 / static_cast<double>(class_count[c]);
            for (std::size_t i = 0; i < P; ++i) {
                const double g = grow[i];
                if (g == 0.0) continue;
                cosine_grad_a(vec[i], m.data(), d, g, dp[i].data());
                // chain into every member of class c through the mean
                std::vector<double> dm(d, 0.0);
                cosine_grad_a(m.data(), vec[i], d, g, dm.data());
                for (std::size_t k = 0; k < P; ++k)
                    if (label[k] == c)
                        for (std::size_t x = 0; x < d; ++x) dp[k][x] += dm[x] * inv_n;
            }
        }
        *dfeatures = Tensor({B, d});
        for (std::size_t i = 0; i < B; ++i)
            std::memcpy(dfeatures->data() + i * d, dp[i].data(), d * sizeof(double));
    }
    return loss;
}

ClientRoundResult local_train(const ModelParams& global, const GlobalPrototypeStore& store,
                              const StageData& stage, std::size_t round,
                              const ClientConfig& config, Rng& rng) {
    if (stage.size() == 0) throw ConfigError("local_train: empty stage data");
    if (config.batch < 1) throw ConfigError("local_train: batch must be >= 1");

    ClientRoundResult result;
    result.params = global;  // theta_k <- theta^(t-1)

    // prototypes and radius use the downloaded encoder, before any update
    result.prototypes = compute_prototypes(stage, global);
    result.radius = compute_radius(stage, global, config.radius_mode);
    for (const auto& p : result.prototypes) result.class_counts[p.class_id] = p.support_count;

    std::set<int> active;
    for (std::size_t i : stage.indices) active.insert(stage.dataset->labels[i]);

    const std::size_t stride = config.label_augment ? 4 : 1;
    const auto eligible = eligible_classes(store, active);
    const bool use_lp = config.lambda_p != 0.0 && !eligible.empty();
    const bool use_lr = config.lambda_r != 0.0;
    const std::size_t d = global.feature_dim();
    const auto in_shape = global.config.encoder.input_shape();

    OptimizerState opt = make_optimizer(result.params, config.schedule);

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto order = rng.permutation(stage.size());
        for (std::size_t start = 0; start < order.size(); start += config.batch) {
            const std::size_t bsz = std::min(config.batch, order.size() - start);
            std::vector<std::size_t> which(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(start + bsz));
            InputBatch raw = gather(stage, which, in_shape);
            InputBatch train_batch = config.label_augment ? label_augment(raw) : raw;

            ForwardCache cache;
            const FeatureBatch feat = encode(result.params, train_batch, &cache);
            const Tensor logits = classify(result.params, feat.features);
            const double ce = cross_entropy(logits, train_batch.labels);

            GradientSet grads = zeros_like(result.params);
            Tensor dfeat_ce;
            head_backward(result.params, feat.features,
                          cross_entropy_grad(logits, train_batch.labels), grads, &dfeat_ce);

            // prototype loss: classifier-only gradients
            double lp = 0.0;
            if (use_lp) {
                const ProtoBatch pb =
                    make_proto_batch(store, eligible, bsz, d, rng, stride);
                const Tensor plogits = classify(result.params, pb.features);
                lp = cross_entropy(plogits, pb.labels, Reduction::Sum);
                Tensor dplogits = cross_entropy_grad(plogits, pb.labels, Reduction::Sum);
                for (auto& g : dplogits.v) g *= config.lambda_p;
                head_backward(result.params, pb.features, dplogits, grads, nullptr);
            }

            // representation loss on the un-rotated feature rows
            double lr_val = 0.0;
            if (use_lr) {
                FeatureBatch base;
                base.labels = raw.labels;
                base.features = Tensor({bsz, d});
                for (std::size_t i = 0; i < bsz; ++i)
                    std::memcpy(base.features.data() + i * d,
                                feat.features.data() + i * stride * d, d * sizeof(double));
                std::vector<std::pair<int, std::vector<double>>> augmented;
                for (const auto& [c, entry] : store.entries)
                    augmented.emplace_back(c, augment_prototype(entry.mean, store.radius, rng));
                Tensor dbase;
                lr_val = repr_loss(base, augmented, active, &dbase, config.negatives);
                for (std::size_t i = 0; i < bsz; ++i) {
                    double* dst = dfeat_ce.data() + i * stride * d;
                    const double* src = dbase.data() + i * d;
                    for (std::size_t k = 0; k < d; ++k) dst[k] += config.lambda_r * src[k];
                }
            }

            const double total = ce + config.lambda_p * lp + config.lambda_r * lr_val;
            if (!std::isfinite(total))
                throw NumericError("local_train: non-finite loss at round " +
                                   std::to_string(round));
            result.trace.ce.push_back(ce);
            result.trace.lp.push_back(lp);
            result.trace.lr.push_back(lr_val);

            encoder_backward(result.params, cache, dfeat_ce, grads);
            for (const auto& nt : grads.encoder)
                if (!nt.t.finite())
                    throw NumericError("local_train: non-finite gradient for " + nt.name);
            if (!grads.head_w.finite() || !grads.head_b.finite())
                throw NumericError("local_train: non-finite head gradient");

            adam_step(result.params, grads, opt, round);
        }
    }
    return result;
}

}  // namespace fedsim

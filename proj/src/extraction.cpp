#include "steerkit/extraction.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include "steerkit/autodiff.hpp"
#include "steerkit/error.hpp"

namespace steerkit {

void ContrastivePairSet::validate(const EngineConfig& engine) const {
    if (pairs.empty()) fail(ErrorKind::Domain, "contrastive pair set is empty");
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        if (pairs[i].positive.empty() || pairs[i].negative.empty()) {
            throw Error(ErrorKind::Validation, fmt::format("pair {} has an empty side", i))
                .with_field(fmt::format("pairs[{}]", i));
        }
    }
    if (layer < 1 || layer > engine.num_layers) {
        throw Error(ErrorKind::Domain, fmt::format("layer {} outside [1, {}]", layer, engine.num_layers))
            .with_field("layer");
    }
}

namespace {

Tensor mean_state(const std::shared_ptr<const ModelBundle>& bundle, const std::vector<int>& tokens, int layer,
                  const PositionSelector& positions) {
    auto records = capture_hidden_states(bundle, tokens, {layer}, positions);
    if (records.size() == 1) return records.front().hidden;
    const std::size_t d = records.front().hidden.size();
    std::vector<double> acc(d, 0.0);
    for (const auto& r : records)
        for (std::size_t j = 0; j < d; ++j) acc[j] += r.hidden[j];
    std::vector<float> out(d);
    for (std::size_t j = 0; j < d; ++j) out[j] = static_cast<float>(acc[j] / records.size());
    return Tensor::vector(std::move(out));
}

void check_sides(std::span<const Tensor> plus, std::span<const Tensor> minus, bool paired) {
    if (plus.empty() || minus.empty()) fail(ErrorKind::Domain, "activation lists must be non-empty");
    if (paired && plus.size() != minus.size()) {
        fail(ErrorKind::Dimension,
             fmt::format("paired extraction needs equal list lengths, got {} and {}", plus.size(), minus.size()));
    }
    const auto d = plus.front().size();
    for (auto side : {plus, minus}) {
        for (const auto& h : side) {
            if (h.rank() != 1 || h.size() != d) {
                fail(ErrorKind::Dimension, fmt::format("activation has shape {}, expected [{}]", shape_string(h.shape()), d));
            }
        }
    }
}

std::vector<double> mean_of(std::span<const Tensor> hs) {
    std::vector<double> m(hs.front().size(), 0.0);
    for (const auto& h : hs)
        for (std::size_t j = 0; j < m.size(); ++j) m[j] += h[j];
    for (auto& x : m) x /= static_cast<double>(hs.size());
    return m;
}

double average_projection(std::span<const Tensor> hs, const std::vector<double>& v) {
    double total = 0.0;
    for (const auto& h : hs) {
        double p = 0.0;
        for (std::size_t j = 0; j < v.size(); ++j) p += v[j] * h[j];
        total += p;
    }
    return total / static_cast<double>(hs.size());
}

SteeringVector direction_vector(std::string method, const std::vector<double>& v, int layer) {
    SteeringVector out;
    out.name = method;
    out.method_id = std::move(method);
    out.source_layer = layer;
    std::vector<float> f(v.begin(), v.end());
    out.payload = Tensor::vector(std::move(f));
    return out;
}

void normalise(std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (auto& x : v) x /= n;
}

// Covariance (1/N) of the given rows, optionally after subtracting their mean.
std::vector<double> covariance(const std::vector<std::vector<double>>& rows, bool center) {
    const std::size_t d = rows.front().size();
    std::vector<double> mu(d, 0.0);
    if (center) {
        for (const auto& r : rows)
            for (std::size_t j = 0; j < d; ++j) mu[j] += r[j];
        for (auto& x : mu) x /= static_cast<double>(rows.size());
    }
    std::vector<double> cov(d * d, 0.0);
    for (const auto& r : rows)
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) cov[i * d + j] += (r[i] - mu[i]) * (r[j] - mu[j]);
    for (auto& x : cov) x /= static_cast<double>(rows.size());
    return cov;
}

PcaResult finish_pca(std::string method, std::vector<double> v, double ratio, std::span<const Tensor> plus,
                     std::span<const Tensor> minus, int layer) {
    normalise(v);
    PcaResult result;
    auto& diag = result.diagnostics;
    diag.explained_variance_ratio = ratio;
    diag.proj_plus = average_projection(plus, v);
    diag.proj_minus = average_projection(minus, v);
    diag.flipped = diag.proj_plus < diag.proj_minus;
    if (diag.flipped) {
        for (auto& x : v) x = -x;
        diag.proj_plus = -diag.proj_plus;
        diag.proj_minus = -diag.proj_minus;
    }
    result.vector = direction_vector(std::move(method), v, layer);
    result.vector.metadata["explained_variance_ratio"] = fmt::format("{:.6f}", ratio);
    result.vector.metadata["flipped"] = diag.flipped ? "true" : "false";
    result.vector.metadata["pairs"] = std::to_string(plus.size());
    return result;
}

bool all_zero(const std::vector<double>& m) {
    return std::all_of(m.begin(), m.end(), [](double x) { return x == 0.0; });
}

}  // namespace

PairActivations collect_pair_activations(std::shared_ptr<const ModelBundle> bundle, const ContrastivePairSet& data) {
    data.validate(bundle->config());
    PairActivations out;
    for (const auto& p : data.pairs) {
        out.plus.push_back(mean_state(bundle, p.positive, data.layer, data.positions));
        out.minus.push_back(mean_state(bundle, p.negative, data.layer, data.positions));
    }
    return out;
}

SteeringVector extract_caa(std::span<const Tensor> plus, std::span<const Tensor> minus, int layer) {
    check_sides(plus, minus, false);
    auto mp = mean_of(plus);
    const auto mm = mean_of(minus);
    for (std::size_t j = 0; j < mp.size(); ++j) mp[j] -= mm[j];
    auto v = direction_vector("caa", mp, layer);
    v.metadata["positives"] = std::to_string(plus.size());
    v.metadata["negatives"] = std::to_string(minus.size());
    return v;
}

Eigenpair leading_eigenpair(const std::vector<double>& sym, std::size_t d) {
    if (sym.size() != d * d || d == 0) fail(ErrorKind::Dimension, "leading_eigenpair: matrix is not d x d");
    Eigenpair out;
    for (std::size_t i = 0; i < d; ++i) out.trace += sym[i * d + i];

    if (d > 64) {
        std::vector<double> v(d), next(d);
        for (std::size_t i = 0; i < d; ++i) v[i] = 1.0 + 1e-3 * static_cast<double>(i % 7);
        normalise(v);
        for (int it = 0; it < 1000; ++it) {
            for (std::size_t i = 0; i < d; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < d; ++j) s += sym[i * d + j] * v[j];
                next[i] = s;
            }
            double n = 0.0;
            for (double x : next) n += x * x;
            if (n == 0.0) break;
            normalise(next);
            double delta = 0.0;
            for (std::size_t i = 0; i < d; ++i) delta = std::max(delta, std::fabs(next[i] - v[i]));
            v.swap(next);
            if (delta < 1e-8) break;
        }
        double lambda = 0.0;
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) lambda += v[i] * sym[i * d + j] * v[j];
        out.vector = std::move(v);
        out.value = lambda;
        return out;
    }

    // Cyclic Jacobi: rotate away off-diagonal entries, accumulating the
    // eigenvectors as columns of V.
    std::vector<double> a(sym), V(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) V[i * d + i] = 1.0;
    double scale = 0.0;
    for (double x : a) scale += x * x;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < d; ++p)
            for (std::size_t q = p + 1; q < d; ++q) off += a[p * d + q] * a[p * d + q];
        if (off <= 1e-30 * scale || off == 0.0) break;
        for (std::size_t p = 0; p < d; ++p) {
            for (std::size_t q = p + 1; q < d; ++q) {
                const double apq = a[p * d + q];
                if (apq == 0.0) continue;
                const double theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t k = 0; k < d; ++k) {
                    const double akp = a[k * d + p], akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < d; ++k) {
                    const double apk = a[p * d + k], aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < d; ++k) {
                    const double vkp = V[k * d + p], vkq = V[k * d + q];
                    V[k * d + p] = c * vkp - s * vkq;
                    V[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < d; ++i)
        if (a[i * d + i] > a[best * d + best]) best = i;
    out.value = a[best * d + best];
    out.vector.resize(d);
    for (std::size_t k = 0; k < d; ++k) out.vector[k] = V[k * d + best];
    return out;
}

PcaResult extract_pca_center(std::span<const Tensor> plus, std::span<const Tensor> minus, int layer) {
    check_sides(plus, minus, true);
    const std::size_t d = plus.front().size();
    std::vector<std::vector<double>> rows;
    std::vector<Tensor> centroids;
    for (std::size_t k = 0; k < plus.size(); ++k) {
        std::vector<double> m(d), a(d), b(d);
        std::vector<float> mf(d);
        for (std::size_t j = 0; j < d; ++j) {
            m[j] = (double(plus[k][j]) + minus[k][j]) / 2.0;
            a[j] = plus[k][j] - m[j];
            b[j] = minus[k][j] - m[j];
            mf[j] = static_cast<float>(m[j]);
        }
        centroids.push_back(Tensor::vector(std::move(mf)));
        rows.push_back(std::move(a));
        rows.push_back(std::move(b));
    }
    if (std::all_of(rows.begin(), rows.end(), all_zero)) {
        fail(ErrorKind::DegenerateVariance, "every pair has identical positive and negative states");
    }
    auto eig = leading_eigenpair(covariance(rows, false), d);
    auto result = finish_pca("pca_center", eig.vector, eig.trace > 0 ? eig.value / eig.trace : 0.0, plus, minus, layer);
    result.diagnostics.centroids = std::move(centroids);
    return result;
}

PcaResult extract_pca_diff(std::span<const Tensor> plus, std::span<const Tensor> minus, int layer) {
    check_sides(plus, minus, true);
    const std::size_t d = plus.front().size();
    std::vector<std::vector<double>> diffs;
    std::vector<double> mean(d, 0.0);
    for (std::size_t k = 0; k < plus.size(); ++k) {
        std::vector<double> r(d);
        for (std::size_t j = 0; j < d; ++j) {
            r[j] = double(plus[k][j]) - minus[k][j];
            mean[j] += r[j];
        }
        diffs.push_back(std::move(r));
    }
    for (auto& x : mean) x /= static_cast<double>(plus.size());
    const auto cov = covariance(diffs, true);
    double trace = 0.0;
    for (std::size_t i = 0; i < d; ++i) trace += cov[i * d + i];
    if (trace == 0.0) {
        // Every difference is the same vector: it is the only direction present.
        if (all_zero(mean)) fail(ErrorKind::DegenerateVariance, "all difference vectors are zero");
        return finish_pca("pca_diff", mean, 1.0, plus, minus, layer);
    }
    auto eig = leading_eigenpair(cov, d);
    return finish_pca("pca_diff", eig.vector, eig.value / eig.trace, plus, minus, layer);
}

namespace {

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

}  // namespace

ProbeResult train_linear_probe(std::span<const LabeledActivation> data, const ProbeOptions& options, int layer) {
    if (data.empty()) fail(ErrorKind::Domain, "probe needs at least one labelled activation");
    if (!(options.l2_lambda >= 0.0) || !std::isfinite(options.l2_lambda)) {
        fail(ErrorKind::Validation, "l2_lambda must be finite and non-negative");
    }
    const std::size_t d = data.front().h.size();
    std::size_t positives = 0;
    for (const auto& x : data) {
        if (x.label != 0 && x.label != 1) fail(ErrorKind::Validation, fmt::format("label {} is not 0 or 1", x.label));
        if (x.h.rank() != 1 || x.h.size() != d) fail(ErrorKind::Dimension, "probe activations differ in dimension");
        positives += x.label;
    }
    if (positives == 0 || positives == data.size()) {
        fail(ErrorKind::ClassBalance, "probe training data must contain both classes");
    }

    const double n = static_cast<double>(data.size());
    std::vector<double> w(d, 0.0), grad(d);
    // Written so that flipping every label yields exactly the negated
    // gradient and an identical loss: sigma(z) - 1 == -sigma(-z).
    auto evaluate = [&](bool want_grad) {
        double loss = 0.0;
        std::fill(grad.begin(), grad.end(), 0.0);
        for (const auto& x : data) {
            double z = 0.0;
            for (std::size_t j = 0; j < d; ++j) z += w[j] * x.h[j];
            const double residual = x.label == 1 ? -sigmoid(-z) : sigmoid(z);
            loss += x.label == 1 ? softplus(-z) : softplus(z);
            if (want_grad)
                for (std::size_t j = 0; j < d; ++j) grad[j] += residual * x.h[j];
        }
        double reg = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            reg += w[j] * w[j];
            grad[j] = grad[j] / n + 2.0 * options.l2_lambda * w[j];
        }
        return loss / n + options.l2_lambda * reg;
    };

    ProbeResult result;
    double loss = evaluate(true);
    for (int step = 0; step < options.max_steps; ++step) {
        for (std::size_t j = 0; j < d; ++j) w[j] -= options.learning_rate * grad[j];
        const double next = evaluate(true);
        result.steps = step + 1;
        if (!std::isfinite(next)) fail(ErrorKind::Optimization, fmt::format("probe loss became non-finite at step {}", step));
        const double change = std::fabs(next - loss);
        loss = next;
        if (change < options.tolerance) break;
    }
    double norm = 0.0;
    for (double x : w) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0 || !std::isfinite(norm)) fail(ErrorKind::Optimization, "probe weights have zero or non-finite norm");

    std::size_t correct = 0;
    for (const auto& x : data) {
        double z = 0.0;
        for (std::size_t j = 0; j < d; ++j) z += w[j] * x.h[j];
        correct += (z > 0.0 ? 1 : 0) == x.label;
    }
    result.accuracy = static_cast<double>(correct) / n;
    result.final_loss = loss;
    result.weights = Tensor::vector(std::vector<float>(w.begin(), w.end()));
    std::vector<double> unit(w);
    for (auto& x : unit) x /= norm;
    result.vector = direction_vector("linear_probe", unit, layer);
    result.vector.metadata["accuracy"] = fmt::format("{:.6f}", result.accuracy);
    result.vector.metadata["l2_lambda"] = fmt::format("{}", options.l2_lambda);
    return result;
}

void SaeWeights::validate() const {
    if (w_enc.rank() != 2) fail(ErrorKind::Dimension, "sae w_enc must be a matrix [n x d]");
    const std::size_t n = w_enc.dim(0), d = w_enc.dim(1);
    if (n < d) fail(ErrorKind::Dimension, fmt::format("sae has {} features for {} dimensions; needs n >= d", n, d));
    if (b_enc.shape() != Shape{n}) fail(ErrorKind::Dimension, fmt::format("sae b_enc must be [{}]", n));
    if (w_dec.shape() != Shape{d, n}) fail(ErrorKind::Dimension, fmt::format("sae w_dec must be [{}, {}]", d, n));
    if (b_dec.shape() != Shape{d}) fail(ErrorKind::Dimension, fmt::format("sae b_dec must be [{}]", d));
    if (feature_labels.size() != n) {
        fail(ErrorKind::Dimension, fmt::format("sae has {} labels for {} features", feature_labels.size(), n));
    }
}

Tensor sae_encode(const SaeWeights& sae, const Tensor& h) {
    const std::size_t n = sae.w_enc.dim(0), d = sae.w_enc.dim(1);
    if (h.rank() != 1 || h.size() != d) {
        fail(ErrorKind::Dimension, fmt::format("sae_encode: h has shape {}, expected [{}]", shape_string(h.shape()), d));
    }
    std::vector<float> f(n);
    for (std::size_t k = 0; k < n; ++k) {
        double s = sae.b_enc[k];
        for (std::size_t j = 0; j < d; ++j) s += double(sae.w_enc.at(k, j)) * h[j];
        f[k] = s > 0.0 ? static_cast<float>(s) : 0.0f;
    }
    return Tensor::vector(std::move(f));
}

Tensor sae_decode(const SaeWeights& sae, const Tensor& f) {
    const std::size_t d = sae.w_dec.dim(0), n = sae.w_dec.dim(1);
    if (f.rank() != 1 || f.size() != n) {
        fail(ErrorKind::Dimension, fmt::format("sae_decode: f has shape {}, expected [{}]", shape_string(f.shape()), n));
    }
    std::vector<float> h(d);
    for (std::size_t j = 0; j < d; ++j) {
        double s = sae.b_dec[j];
        for (std::size_t k = 0; k < n; ++k) s += double(sae.w_dec.at(j, k)) * f[k];
        h[j] = static_cast<float>(s);
    }
    return Tensor::vector(std::move(h));
}

SteeringVector sae_extract_feature_vector(const SaeWeights& sae, int k, int layer) {
    const int n = sae.num_features();
    if (k < 0 || k >= n) fail(ErrorKind::Index, fmt::format("feature index {} outside [0, {})", k, n));
    const std::size_t d = sae.w_dec.dim(0);
    std::vector<float> col(d);
    for (std::size_t j = 0; j < d; ++j) col[j] = sae.w_dec.at(j, k);
    SteeringVector v;
    v.name = fmt::format("sae_feature_{}", k);
    v.method_id = "sae";
    v.source_layer = layer;
    v.payload = Tensor::vector(std::move(col));
    v.metadata["feature_index"] = std::to_string(k);
    v.metadata["feature_label"] = k < static_cast<int>(sae.feature_labels.size()) ? sae.feature_labels[k] : "";
    return v;
}

namespace {

std::set<std::string> words_of(std::string_view text) {
    std::set<std::string> out;
    std::string cur;
    for (char c : text) {
        const auto u = static_cast<unsigned char>(c);
        if (std::isalnum(u)) {
            cur.push_back(static_cast<char>(std::tolower(u)));
        } else if (!cur.empty()) {
            out.insert(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.insert(std::move(cur));
    return out;
}

}  // namespace

std::vector<LabelMatch> sae_search_labels(const SaeWeights& sae, std::string_view query, int top_m) {
    if (top_m < 1) fail(ErrorKind::Validation, "top_m must be at least 1");
    const auto q = words_of(query);
    std::vector<LabelMatch> matches;
    for (std::size_t k = 0; k < sae.feature_labels.size(); ++k) {
        const auto words = words_of(sae.feature_labels[k]);
        double score = 0.0;
        for (const auto& w : q) score += static_cast<double>(words.count(w));
        if (score > 0.0) matches.push_back({static_cast<int>(k), sae.feature_labels[k], score});
    }
    std::stable_sort(matches.begin(), matches.end(), [](const LabelMatch& a, const LabelMatch& b) {
        return a.score != b.score ? a.score > b.score : a.index < b.index;
    });
    if (matches.size() > static_cast<std::size_t>(top_m)) matches.resize(top_m);
    return matches;
}

SaeWeights train_sae(std::span<const Tensor> activations, const SaeTrainOptions& options) {
    if (activations.empty()) fail(ErrorKind::Domain, "train_sae needs activations");
    const std::size_t d = activations.front().size();
    const std::size_t n = options.num_features > 0 ? options.num_features : 4 * d;
    if (n < d) fail(ErrorKind::Validation, "an SAE needs at least as many features as dimensions");
    const std::size_t rows = activations.size();

    std::vector<float> data;
    data.reserve(rows * d);
    for (const auto& h : activations) {
        if (h.size() != d) fail(ErrorKind::Dimension, "train_sae: activations differ in dimension");
        data.insert(data.end(), h.values().begin(), h.values().end());
    }
    const Tensor H = Tensor::matrix(rows, d, std::move(data));

    std::mt19937_64 rng(options.seed);
    std::normal_distribution<float> normal(0.0f, 1.0f / std::sqrt(static_cast<float>(d)));
    std::vector<float> enc(n * d);
    for (auto& x : enc) x = normal(rng);
    Tensor w_enc = Tensor::matrix(n, d, enc);
    Tensor w_dec = ops::transpose(w_enc);
    Tensor b_enc = Tensor::zeros({n});
    Tensor b_dec = Tensor::zeros({d});

    for (int step = 0; step < options.steps; ++step) {
        ad::GradTape tape;
        auto x = tape.constant(H);
        auto we = tape.parameter(w_enc), be = tape.parameter(b_enc);
        auto wd = tape.parameter(w_dec), bd = tape.parameter(b_dec);
        auto f = tape.relu(tape.add(tape.matmul(x, tape.transpose(we)), tape.broadcast_rows(be, rows)));
        auto recon = tape.add(tape.matmul(f, tape.transpose(wd)), tape.broadcast_rows(bd, rows));
        auto err = tape.sub(x, recon);
        auto loss = tape.add(tape.mean(tape.mul(err, err)),
                             tape.scale(tape.sum(f), static_cast<float>(options.l1 / static_cast<double>(rows))));
        auto g = tape.backward(loss);
        auto step_of = [&](const Tensor& p, ad::Var v) { return ops::sub(p, ops::scale(g[v], options.learning_rate)); };
        w_enc = step_of(w_enc, we);
        b_enc = step_of(b_enc, be);
        w_dec = step_of(w_dec, wd);
        b_dec = step_of(b_dec, bd);
    }
    SaeWeights sae{w_enc, b_enc, w_dec, b_dec, {}};
    for (std::size_t k = 0; k < n; ++k) sae.feature_labels.push_back(fmt::format("feature {}", k));
    return sae;
}

}  // namespace steerkit

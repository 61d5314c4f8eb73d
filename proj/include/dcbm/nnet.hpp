#pragma once

// Minimal feed-forward network stack: deterministic forward pass, exact
// analytic backpropagation, Adam, MSE and softmax cross-entropy losses,
// mini-batch training with seeded shuffling and validation-based early
// stopping. The optional skip connection concatenates the raw input onto the
// input of the layer producing the last hidden activation, so no width
// constraint is imposed.
//
// Everything is double precision and single-threaded per model: two runs
// from the same seed produce bit-identical parameters.

#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dcbm/errors.hpp"
#include "dcbm/io.hpp"
#include "dcbm/matrix.hpp"
#include "dcbm/rng.hpp"

namespace dcbm {

enum class Activation { ReLU, Tanh };
enum class Loss { MSE, SoftmaxCrossEntropy };

inline std::string to_string(Activation a) {
    return a == Activation::ReLU ? "relu" : "tanh";
}

struct MlpSpec {
    std::vector<std::size_t> layer_sizes; // input, hidden..., output
    Activation activation = Activation::ReLU;
    bool skip_input_to_penultimate = false;

    std::size_t input_dim() const { return layer_sizes.front(); }
    std::size_t output_dim() const { return layer_sizes.back(); }
    std::size_t num_weight_layers() const { return layer_sizes.size() - 1; }

    /// Weight layer receiving the concatenated skip input, or -1 when absent.
    std::ptrdiff_t skip_layer() const {
        if (!skip_input_to_penultimate) return -1;
        return static_cast<std::ptrdiff_t>(num_weight_layers()) - 2;
    }

    std::size_t in_width(std::size_t layer) const {
        std::size_t w = layer_sizes[layer];
        if (static_cast<std::ptrdiff_t>(layer) == skip_layer()) w += input_dim();
        return w;
    }

    void validate() const {
        if (layer_sizes.size() < 2)
            throw ConfigError("MlpSpec: need at least input and output sizes");
        for (std::size_t s : layer_sizes)
            if (s < 1) throw ConfigError("MlpSpec: all layer sizes must be >= 1");
        if (skip_input_to_penultimate && layer_sizes.size() < 3)
            throw ConfigError("MlpSpec: skip connection requires a hidden layer");
    }

    bool operator==(const MlpSpec&) const = default;
};

struct TrainConfig {
    double learning_rate = 1e-3;
    double lr_decay = 1.0; // multiplicative per-epoch decay (1 = constant)
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t batch_size = 32;
    std::size_t epochs = 100;
    std::uint64_t seed = 0;
    Loss loss = Loss::MSE;
    std::size_t patience = 20; // early-stopping patience (epochs), validation only
    bool shuffle = true;

    void validate() const {
        if (!(learning_rate >= 0)) throw ConfigError("TrainConfig: bad learning_rate");
        if (!(lr_decay > 0) || lr_decay > 1)
            throw ConfigError("TrainConfig: lr_decay must lie in (0, 1]");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw ConfigError("TrainConfig: betas must lie in [0, 1)");
        if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    }

    /// Learning rate in effect during the given epoch.
    double lr_at(std::size_t epoch) const {
        return lr_decay == 1.0
                   ? learning_rate
                   : learning_rate * std::pow(lr_decay, static_cast<double>(epoch));
    }
};

struct Gradients {
    std::vector<Matrix> w;
    std::vector<std::vector<double>> b;
};

struct MlpModel {
    MlpSpec spec;
    std::vector<Matrix> weights;             // [l]: layer_sizes[l+1] x in_width(l)
    std::vector<std::vector<double>> biases; // [l]: layer_sizes[l+1]
    // Adam state mirrors the parameters.
    std::vector<Matrix> adam_mw, adam_vw;
    std::vector<std::vector<double>> adam_mb, adam_vb;
    std::int64_t adam_step_count = 0;
    std::uint64_t seed = 0;
};

/// Kaiming-style fan-in initialization (Gaussian), biases zero, seeded.
inline MlpModel init_mlp(const MlpSpec& spec, std::uint64_t seed) {
    spec.validate();
    MlpModel m;
    m.spec = spec;
    m.seed = seed;
    RngStream root(seed);
    const std::size_t L = spec.num_weight_layers();
    for (std::size_t l = 0; l < L; ++l) {
        const std::size_t fan_in = spec.in_width(l);
        const std::size_t fan_out = spec.layer_sizes[l + 1];
        const double gain = spec.activation == Activation::ReLU ? 2.0 : 1.0;
        const double stddev = std::sqrt(gain / static_cast<double>(fan_in));
        RngStream rl = root.child("init/" + std::to_string(l));
        m.weights.push_back(random_gaussian(rl, fan_out, fan_in, stddev));
        m.biases.emplace_back(fan_out, 0.0);
        m.adam_mw.emplace_back(fan_out, fan_in, 0.0);
        m.adam_vw.emplace_back(fan_out, fan_in, 0.0);
        m.adam_mb.emplace_back(fan_out, 0.0);
        m.adam_vb.emplace_back(fan_out, 0.0);
    }
    return m;
}

namespace detail {

inline Matrix hcat(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows, a.cols + b.cols);
    for (std::size_t r = 0; r < a.rows; ++r) {
        for (std::size_t c = 0; c < a.cols; ++c) out(r, c) = a(r, c);
        for (std::size_t c = 0; c < b.cols; ++c) out(r, a.cols + c) = b(r, c);
    }
    return out;
}

inline void apply_activation(Matrix& z, Activation act) {
    if (act == Activation::ReLU) {
        for (double& v : z.data) v = v > 0.0 ? v : 0.0;
    } else {
        for (double& v : z.data) v = std::tanh(v);
    }
}

/// Derivative expressed through the post-activation value.
inline double activation_deriv_from_output(double a, Activation act) {
    return act == Activation::ReLU ? (a > 0.0 ? 1.0 : 0.0) : 1.0 - a * a;
}

struct ForwardCache {
    std::vector<Matrix> inputs; // per weight layer: the matrix it multiplied
    Matrix output;              // final pre-loss output (logits for CE)
};

inline ForwardCache forward_cached(const MlpModel& m, const Matrix& X) {
    if (X.cols != m.spec.input_dim())
        throw ShapeError("forward: input width " + std::to_string(X.cols) +
                         " does not match spec " + std::to_string(m.spec.input_dim()));
    ForwardCache cache;
    const std::size_t L = m.spec.num_weight_layers();
    Matrix act = X;
    for (std::size_t l = 0; l < L; ++l) {
        Matrix in = (static_cast<std::ptrdiff_t>(l) == m.spec.skip_layer())
                        ? hcat(act, X)
                        : std::move(act);
        Matrix z(in.rows, m.spec.layer_sizes[l + 1]);
        z.map().noalias() = in.map() * m.weights[l].map().transpose();
        for (std::size_t r = 0; r < z.rows; ++r)
            for (std::size_t c = 0; c < z.cols; ++c) z(r, c) += m.biases[l][c];
        cache.inputs.push_back(std::move(in));
        if (l + 1 < L) apply_activation(z, m.spec.activation);
        act = std::move(z);
    }
    cache.output = std::move(act);
    return cache;
}

inline void softmax_rows(Matrix& z) {
    for (std::size_t r = 0; r < z.rows; ++r) {
        double mx = z(r, 0);
        for (std::size_t c = 1; c < z.cols; ++c) mx = std::max(mx, z(r, c));
        double sum = 0.0;
        for (std::size_t c = 0; c < z.cols; ++c) {
            double e = std::exp(z(r, c) - mx);
            z(r, c) = e;
            sum += e;
        }
        for (std::size_t c = 0; c < z.cols; ++c) z(r, c) /= sum;
    }
}

} // namespace detail

/// Deterministic forward pass; rows are samples, output is pre-loss (logits
/// for classification).
inline Matrix forward(const MlpModel& m, const Matrix& X) {
    return detail::forward_cached(m, X).output;
}

/// Mean loss over the batch and its gradient with respect to the outputs.
inline std::pair<double, Matrix> loss_and_grad(const Matrix& outputs,
                                               const Matrix& targets, Loss loss) {
    if (!outputs.same_shape(targets))
        throw ShapeError("loss_and_grad: output/target shapes disagree");
    const double n = static_cast<double>(outputs.rows);
    Matrix grad(outputs.rows, outputs.cols);
    double total = 0.0;
    if (loss == Loss::MSE) {
        for (std::size_t i = 0; i < outputs.data.size(); ++i) {
            const double d = outputs.data[i] - targets.data[i];
            grad.data[i] = d / n;
            total += 0.5 * d * d;
        }
    } else {
        // Per row: log-sum-exp(z) - z . t, max-shifted so a uniform row costs
        // exactly log(K).
        Matrix sm = outputs;
        detail::softmax_rows(sm);
        for (std::size_t r = 0; r < outputs.rows; ++r) {
            double mx = outputs(r, 0);
            for (std::size_t c = 1; c < outputs.cols; ++c)
                mx = std::max(mx, outputs(r, c));
            double sumexp = 0.0, dot = 0.0, tsum = 0.0;
            for (std::size_t c = 0; c < outputs.cols; ++c) {
                sumexp += std::exp(outputs(r, c) - mx);
                dot += targets(r, c) * (outputs(r, c) - mx);
                tsum += targets(r, c);
            }
            total += tsum * std::log(sumexp) - dot;
            for (std::size_t c = 0; c < outputs.cols; ++c)
                grad(r, c) = (sm(r, c) * tsum - targets(r, c)) / n;
        }
    }
    const double mean_loss = total / n;
    if (!std::isfinite(mean_loss))
        throw TrainingError("loss_and_grad: non-finite loss (divergence)");
    return {mean_loss, std::move(grad)};
}

inline double loss_value(const Matrix& outputs, const Matrix& targets, Loss loss) {
    return loss_and_grad(outputs, targets, loss).first;
}

/// Backpropagate an output-space gradient through the cached forward pass.
inline Gradients backward_from_output_grad(const MlpModel& m,
                                           const detail::ForwardCache& cache,
                                           const Matrix& d_output) {
    const std::size_t L = m.spec.num_weight_layers();
    Gradients g;
    g.w.resize(L);
    g.b.resize(L);
    Matrix delta = d_output; // dLoss/dZ for the current layer
    for (std::size_t l = L; l-- > 0;) {
        const Matrix& in = cache.inputs[l];
        g.w[l] = Matrix(m.weights[l].rows, m.weights[l].cols);
        g.w[l].map().noalias() = delta.map().transpose() * in.map();
        g.b[l].assign(m.biases[l].size(), 0.0);
        for (std::size_t r = 0; r < delta.rows; ++r)
            for (std::size_t c = 0; c < delta.cols; ++c) g.b[l][c] += delta(r, c);
        if (l == 0) break;
        Matrix d_in(in.rows, in.cols);
        d_in.map().noalias() = delta.map() * m.weights[l].map();
        // Drop the skip half: the raw input needs no gradient.
        const std::size_t prev_width = m.spec.layer_sizes[l];
        Matrix d_act(in.rows, prev_width);
        for (std::size_t r = 0; r < in.rows; ++r)
            for (std::size_t c = 0; c < prev_width; ++c) d_act(r, c) = d_in(r, c);
        // Through the activation of layer l-1's output.
        const Matrix& prev_in_next = cache.inputs[l]; // holds activated values
        for (std::size_t r = 0; r < d_act.rows; ++r)
            for (std::size_t c = 0; c < prev_width; ++c)
                d_act(r, c) *= detail::activation_deriv_from_output(
                    prev_in_next(r, c), m.spec.activation);
        delta = std::move(d_act);
    }
    return g;
}

struct BackwardResult {
    Gradients grads;
    double loss = 0.0;
};

/// Exact gradients of the mean batch loss with respect to every parameter.
inline BackwardResult backward(const MlpModel& m, const Matrix& X,
                               const Matrix& targets, Loss loss) {
    detail::ForwardCache cache = detail::forward_cached(m, X);
    auto [value, d_out] = loss_and_grad(cache.output, targets, loss);
    return {backward_from_output_grad(m, cache, d_out), value};
}

/// Standard Adam update with bias correction; increments the step counter.
inline void adam_step(MlpModel& m, const Gradients& g, const TrainConfig& cfg) {
    m.adam_step_count += 1;
    const double t = static_cast<double>(m.adam_step_count);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
        for (std::size_t i = 0; i < m.weights[l].data.size(); ++i) {
            const double grad = g.w[l].data[i];
            double& mm = m.adam_mw[l].data[i];
            double& vv = m.adam_vw[l].data[i];
            mm = cfg.beta1 * mm + (1.0 - cfg.beta1) * grad;
            vv = cfg.beta2 * vv + (1.0 - cfg.beta2) * grad * grad;
            m.weights[l].data[i] -=
                cfg.learning_rate * (mm / bc1) / (std::sqrt(vv / bc2) + cfg.epsilon);
        }
        for (std::size_t i = 0; i < m.biases[l].size(); ++i) {
            const double grad = g.b[l][i];
            double& mm = m.adam_mb[l][i];
            double& vv = m.adam_vb[l][i];
            mm = cfg.beta1 * mm + (1.0 - cfg.beta1) * grad;
            vv = cfg.beta2 * vv + (1.0 - cfg.beta2) * grad * grad;
            m.biases[l][i] -=
                cfg.learning_rate * (mm / bc1) / (std::sqrt(vv / bc2) + cfg.epsilon);
        }
    }
}

struct TrainResult {
    std::vector<double> train_loss; // one entry per completed epoch
    std::vector<double> val_loss;   // parallel to train_loss when validation given
    bool diverged = false;
    std::size_t best_epoch = 0; // epoch index of the retained parameters
};

/// Mini-batch Adam training with seeded shuffling. When validation data is
/// given, the best-validation parameters are retained and training stops
/// after `patience` epochs without improvement. `train_offset` / `val_offset`
/// are added to the model output before the loss (used for residual heads).
inline TrainResult train(MlpModel& model, const Matrix& X, const Matrix& targets,
                         const TrainConfig& cfg, const Matrix* X_val = nullptr,
                         const Matrix* Y_val = nullptr,
                         const Matrix* train_offset = nullptr,
                         const Matrix* val_offset = nullptr) {
    cfg.validate();
    if (X.rows != targets.rows) throw ShapeError("train: X/target row counts disagree");
    if ((X_val == nullptr) != (Y_val == nullptr))
        throw ConfigError("train: validation needs both X_val and Y_val");

    TrainResult result;
    RngStream shuffle_rng = RngStream(cfg.seed).child("shuffle");
    std::vector<std::size_t> order(X.rows);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    MlpModel best = model;
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (cfg.shuffle) shuffle_rng.shuffle(order);
        TrainConfig step_cfg = cfg;
        step_cfg.learning_rate = cfg.lr_at(epoch);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        try {
            for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
                const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
                std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                             order.begin() + static_cast<std::ptrdiff_t>(stop));
                Matrix xb = take_rows(X, idx);
                Matrix tb = take_rows(targets, idx);
                detail::ForwardCache cache = detail::forward_cached(model, xb);
                if (train_offset != nullptr) {
                    Matrix off = take_rows(*train_offset, idx);
                    cache.output.map() += off.map();
                }
                auto [value, d_out] = loss_and_grad(cache.output, tb, cfg.loss);
                Gradients grads = backward_from_output_grad(model, cache, d_out);
                adam_step(model, grads, step_cfg);
                epoch_loss += value;
                ++batches;
            }
        } catch (const TrainingError&) {
            result.diverged = true;
            break;
        }
        result.train_loss.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(batches, 1)));

        if (X_val != nullptr) {
            Matrix vout = forward(model, *X_val);
            if (val_offset != nullptr) vout.map() += val_offset->map();
            double vloss;
            try {
                vloss = loss_value(vout, *Y_val, cfg.loss);
            } catch (const TrainingError&) {
                result.diverged = true;
                break;
            }
            result.val_loss.push_back(vloss);
            if (vloss < best_val) {
                best_val = vloss;
                best = model;
                result.best_epoch = epoch;
                since_best = 0;
            } else if (++since_best >= cfg.patience) {
                break;
            }
        }
    }
    if (X_val != nullptr && std::isfinite(best_val)) model = best;
    return result;
}

// ---------------------------------------------------------------------------
// Serialization: flat text tensor bundle, hexfloat payload, bit-exact.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_matrix(std::ostringstream& out, const std::string& tag, std::size_t index,
                       const Matrix& m) {
    out << tag << ' ' << index << ' ' << m.rows << ' ' << m.cols << '\n';
    for (std::size_t r = 0; r < m.rows; ++r) {
        for (std::size_t c = 0; c < m.cols; ++c) {
            if (c) out << ' ';
            out << fmt_hex(m(r, c));
        }
        out << '\n';
    }
}

inline void put_vector(std::ostringstream& out, const std::string& tag, std::size_t index,
                       const std::vector<double>& v) {
    out << tag << ' ' << index << ' ' << v.size() << '\n';
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out << ' ';
        out << fmt_hex(v[i]);
    }
    out << '\n';
}

inline Matrix get_matrix(std::istringstream& in, const std::string& tag,
                         std::size_t index) {
    std::string t;
    std::size_t idx, rows, cols;
    if (!(in >> t >> idx >> rows >> cols) || t != tag || idx != index)
        throw ConfigError("mlp load: malformed section (expected " + tag + ")");
    Matrix m(rows, cols);
    for (auto& v : m.data) {
        std::string cell;
        if (!(in >> cell)) throw ConfigError("mlp load: truncated matrix payload");
        v = std::strtod(cell.c_str(), nullptr);
    }
    return m;
}

inline std::vector<double> get_vector(std::istringstream& in, const std::string& tag,
                                      std::size_t index) {
    std::string t;
    std::size_t idx, size;
    if (!(in >> t >> idx >> size) || t != tag || idx != index)
        throw ConfigError("mlp load: malformed section (expected " + tag + ")");
    std::vector<double> v(size);
    for (auto& x : v) {
        std::string cell;
        if (!(in >> cell)) throw ConfigError("mlp load: truncated vector payload");
        x = std::strtod(cell.c_str(), nullptr);
    }
    return v;
}

} // namespace detail

inline std::string save_mlp(const MlpModel& m) {
    std::ostringstream out;
    out << "dcbm-mlp 1\n";
    out << "layers";
    for (std::size_t s : m.spec.layer_sizes) out << ' ' << s;
    out << '\n';
    out << "activation " << to_string(m.spec.activation) << '\n';
    out << "skip " << (m.spec.skip_input_to_penultimate ? 1 : 0) << '\n';
    out << "seed " << m.seed << '\n';
    out << "adam_step " << m.adam_step_count << '\n';
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
        detail::put_matrix(out, "W", l, m.weights[l]);
        detail::put_vector(out, "b", l, m.biases[l]);
        detail::put_matrix(out, "adam_mw", l, m.adam_mw[l]);
        detail::put_matrix(out, "adam_vw", l, m.adam_vw[l]);
        detail::put_vector(out, "adam_mb", l, m.adam_mb[l]);
        detail::put_vector(out, "adam_vb", l, m.adam_vb[l]);
    }
    out << "end\n";
    return out.str();
}

inline MlpModel load_mlp(const std::string& text) {
    std::istringstream in(text);
    std::string magic;
    int version = 0;
    if (!(in >> magic >> version) || magic != "dcbm-mlp" || version != 1)
        throw ConfigError("mlp load: bad header");
    MlpModel m;
    std::string line, key;
    std::getline(in, line);
    std::getline(in, line);
    {
        std::istringstream ls(line);
        ls >> key;
        if (key != "layers") throw ConfigError("mlp load: expected layers");
        std::size_t s;
        while (ls >> s) m.spec.layer_sizes.push_back(s);
    }
    std::string act;
    in >> key >> act;
    if (key != "activation") throw ConfigError("mlp load: expected activation");
    if (act == "relu")
        m.spec.activation = Activation::ReLU;
    else if (act == "tanh")
        m.spec.activation = Activation::Tanh;
    else
        throw ConfigError("mlp load: unknown activation " + act);
    int skip;
    in >> key >> skip;
    if (key != "skip") throw ConfigError("mlp load: expected skip");
    m.spec.skip_input_to_penultimate = skip != 0;
    in >> key >> m.seed;
    if (key != "seed") throw ConfigError("mlp load: expected seed");
    in >> key >> m.adam_step_count;
    if (key != "adam_step") throw ConfigError("mlp load: expected adam_step");
    m.spec.validate();
    const std::size_t L = m.spec.num_weight_layers();
    for (std::size_t l = 0; l < L; ++l) {
        m.weights.push_back(detail::get_matrix(in, "W", l));
        m.biases.push_back(detail::get_vector(in, "b", l));
        m.adam_mw.push_back(detail::get_matrix(in, "adam_mw", l));
        m.adam_vw.push_back(detail::get_matrix(in, "adam_vw", l));
        m.adam_mb.push_back(detail::get_vector(in, "adam_mb", l));
        m.adam_vb.push_back(detail::get_vector(in, "adam_vb", l));
        if (m.weights[l].rows != m.spec.layer_sizes[l + 1] ||
            m.weights[l].cols != m.spec.in_width(l))
            throw ConfigError("mlp load: weight shape inconsistent with spec");
    }
    return m;
}

// ---------------------------------------------------------------------------
// Gradient checking (shared by the test suites and the CLI's gradcheck).
// ---------------------------------------------------------------------------

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t trials = 0;
    bool pass = false;
};

namespace detail {

inline std::vector<double> flatten_params(const MlpModel& m) {
    std::vector<double> flat;
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
        flat.insert(flat.end(), m.weights[l].data.begin(), m.weights[l].data.end());
        flat.insert(flat.end(), m.biases[l].begin(), m.biases[l].end());
    }
    return flat;
}

inline void unflatten_params(MlpModel& m, const std::vector<double>& flat) {
    std::size_t pos = 0;
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
        for (double& v : m.weights[l].data) v = flat[pos++];
        for (double& v : m.biases[l]) v = flat[pos++];
    }
}

} // namespace detail

namespace detail {

/// Smallest |preactivation| over all hidden units. A ReLU loss surface is
/// non-differentiable where this hits zero; central differences there measure
/// an average of one-sided slopes instead of the gradient, so probe points
/// must keep clear of the kink by more than the FD step can move it.
inline double min_hidden_preactivation(const MlpModel& m, const Matrix& X) {
    double min_abs = std::numeric_limits<double>::infinity();
    const std::size_t L = m.spec.num_weight_layers();
    Matrix act = X;
    for (std::size_t l = 0; l + 1 < L; ++l) {
        Matrix in = (static_cast<std::ptrdiff_t>(l) == m.spec.skip_layer())
                        ? hcat(act, X)
                        : std::move(act);
        Matrix z(in.rows, m.spec.layer_sizes[l + 1]);
        z.map().noalias() = in.map() * m.weights[l].map().transpose();
        for (std::size_t r = 0; r < z.rows; ++r)
            for (std::size_t c = 0; c < z.cols; ++c) {
                z(r, c) += m.biases[l][c];
                min_abs = std::min(min_abs, std::abs(z(r, c)));
            }
        apply_activation(z, m.spec.activation);
        act = std::move(z);
    }
    return min_abs;
}

} // namespace detail

/// Analytic vs central-difference gradients over random small architectures,
/// both losses, with and without the skip connection. ReLU trials redraw
/// their probe inputs until every hidden preactivation sits farther from the
/// kink than an FD perturbation can reach, keeping the oracle valid.
inline GradCheckReport gradient_check_suite(std::size_t trials, std::uint64_t seed,
                                            double tol = 1e-4, double h = 1e-5) {
    RngStream root(seed);
    GradCheckReport report;
    report.trials = trials;
    for (std::size_t trial = 0; trial < trials; ++trial) {
        RngStream rng = root.child("trial/" + std::to_string(trial));
        const std::size_t depth = 1 + rng.below(3); // hidden layers: 1..3
        MlpSpec spec;
        spec.layer_sizes.push_back(2 + rng.below(6));
        for (std::size_t i = 0; i < depth; ++i)
            spec.layer_sizes.push_back(2 + rng.below(15));
        spec.layer_sizes.push_back(2 + rng.below(5));
        spec.activation = rng.below(2) == 0 ? Activation::ReLU : Activation::Tanh;
        spec.skip_input_to_penultimate = rng.below(2) == 0;
        const Loss loss = rng.below(2) == 0 ? Loss::MSE : Loss::SoftmaxCrossEntropy;

        MlpModel model = init_mlp(spec, rng.next_u64());
        const std::size_t n = 4 + rng.below(5);
        Matrix X = random_gaussian(rng, n, spec.input_dim(), 1.0);
        if (spec.activation == Activation::ReLU) {
            const double safe = 100.0 * h;
            for (int attempt = 0; attempt < 200; ++attempt) {
                if (detail::min_hidden_preactivation(model, X) > safe) break;
                X = random_gaussian(rng, n, spec.input_dim(), 1.0);
            }
        }
        Matrix T(n, spec.output_dim());
        if (loss == Loss::MSE) {
            T = random_gaussian(rng, n, spec.output_dim(), 1.0);
        } else {
            for (std::size_t r = 0; r < n; ++r)
                T(r, rng.below(spec.output_dim())) = 1.0;
        }

        BackwardResult analytic = backward(model, X, T, loss);
        std::vector<double> analytic_flat;
        for (std::size_t l = 0; l < analytic.grads.w.size(); ++l) {
            analytic_flat.insert(analytic_flat.end(), analytic.grads.w[l].data.begin(),
                                 analytic.grads.w[l].data.end());
            analytic_flat.insert(analytic_flat.end(), analytic.grads.b[l].begin(),
                                 analytic.grads.b[l].end());
        }

        std::vector<double> at = detail::flatten_params(model);
        MlpModel probe = model;
        auto f = [&](const std::vector<double>& params) {
            detail::unflatten_params(probe, params);
            return loss_value(forward(probe, X), T, loss);
        };
        std::vector<double> numeric(at.size());
        for (std::size_t i = 0; i < at.size(); ++i) {
            const double orig = at[i];
            at[i] = orig + h;
            const double fp = f(at);
            at[i] = orig - h;
            const double fm = f(at);
            at[i] = orig;
            numeric[i] = (fp - fm) / (2.0 * h);
        }
        for (std::size_t i = 0; i < at.size(); ++i) {
            const double denom =
                std::max(std::abs(analytic_flat[i]) + std::abs(numeric[i]), 1e-4);
            const double rel = std::abs(analytic_flat[i] - numeric[i]) / denom;
            report.max_rel_err = std::max(report.max_rel_err, rel);
        }
    }
    report.pass = report.max_rel_err < tol;
    return report;
}

} // namespace dcbm

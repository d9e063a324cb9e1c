#pragma once

// Small fully connected networks with reverse-mode gradients, Adam and
// exponential moving averages. Parameters live in one flat buffer so that
// optimizers, averaging and checkpoints can treat every network uniformly.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "arq/error.hpp"

namespace arq {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { identity, relu, swish };

inline std::string_view to_string(Activation a) {
    switch (a) {
        case Activation::identity: return "identity";
        case Activation::relu: return "relu";
        case Activation::swish: return "swish";
    }
    return "identity";
}

inline Activation activation_from_string(std::string_view s) {
    if (s == "identity") return Activation::identity;
    if (s == "relu") return Activation::relu;
    if (s == "swish") return Activation::swish;
    throw ParseError("unknown activation '" + std::string(s) + "'");
}

// One affine layer y = W * act(x) + b. The activation is applied to the
// layer's *input*, so a plain relu MLP is [identity, relu, relu] and a
// pre-activation residual block needs no extra bookkeeping.
// skip > 0 adds the raw input of layer (i - skip + 1) to the output.
struct LayerSpec {
    std::size_t in = 0;
    std::size_t out = 0;
    Activation act = Activation::identity;
    std::size_t skip = 0;

    bool operator==(const LayerSpec&) const = default;
};

// Flat parameter or gradient storage, aligned like Eigen's own buffers so
// vectorized kernels over maps into it take the same path wherever it lands.
using ParamBuffer = std::vector<double, Eigen::aligned_allocator<double>>;

class Mlp {
public:
    Mlp() = default;

    explicit Mlp(std::vector<LayerSpec> layers) : layers_(std::move(layers)) {
        require(!layers_.empty(), "Mlp: at least one layer required");
        std::size_t offset = 0;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const auto& l = layers_[i];
            require(l.in > 0 && l.out > 0, "Mlp: zero-sized layer");
            if (i > 0) require(layers_[i - 1].out == l.in, "Mlp: consecutive layer dims must match");
            if (l.skip > 0) {
                require(l.skip <= i + 1, "Mlp: skip reaches before the first layer");
                require(layers_[i + 1 - l.skip].in == l.out, "Mlp: skip connection dim mismatch");
            }
            offsets_.push_back(offset);
            offset += l.out * l.in + l.out;
        }
        params_.assign(offset, 0.0);
    }

    // Linear-act-...-Linear with `act` between hidden layers.
    static Mlp plain(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out,
                     Activation act) {
        std::vector<LayerSpec> spec;
        std::size_t prev = in;
        Activation input_act = Activation::identity;
        for (auto h : hidden) {
            spec.push_back({prev, h, input_act, 0});
            prev = h;
            input_act = act;
        }
        spec.push_back({prev, out, input_act, 0});
        return Mlp(std::move(spec));
    }

    // Input projection, `blocks` pre-activation residual blocks of two layers,
    // then an activated output projection. No normalization layers.
    static Mlp residual(std::size_t in, std::size_t width, std::size_t blocks, std::size_t out,
                        Activation act) {
        std::vector<LayerSpec> spec;
        spec.push_back({in, width, Activation::identity, 0});
        for (std::size_t b = 0; b < blocks; ++b) {
            spec.push_back({width, width, act, 0});
            spec.push_back({width, width, act, 2});
        }
        spec.push_back({width, out, act, 0});
        return Mlp(std::move(spec));
    }

    // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    void init_uniform(Rng& rng) {
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(layers_[i].in));
            std::uniform_real_distribution<double> dist(-bound, bound);
            auto p = layer_params(i);
            for (auto& x : p) x = dist(rng);
        }
        ++version_;
    }

    std::size_t input_dim() const { return layers_.front().in; }
    std::size_t output_dim() const { return layers_.back().out; }
    std::size_t param_count() const { return params_.size(); }
    const std::vector<LayerSpec>& layers() const { return layers_; }
    std::uint64_t version() const { return version_; }

    std::span<const double> params() const { return params_; }
    // Mutable access invalidates outstanding tapes.
    std::span<double> params() {
        ++version_;
        return params_;
    }

    Eigen::Map<const Matrix> weight(std::size_t i) const {
        return {params_.data() + offsets_[i], static_cast<Eigen::Index>(layers_[i].out),
                static_cast<Eigen::Index>(layers_[i].in)};
    }
    Eigen::Map<const Vector> bias(std::size_t i) const {
        return {params_.data() + offsets_[i] + layers_[i].out * layers_[i].in,
                static_cast<Eigen::Index>(layers_[i].out)};
    }
    std::size_t weight_offset(std::size_t i) const { return offsets_[i]; }
    std::size_t bias_offset(std::size_t i) const { return offsets_[i] + layers_[i].out * layers_[i].in; }

    bool same_shape(const Mlp& other) const { return layers_ == other.layers_; }

private:
    std::span<double> layer_params(std::size_t i) {
        return std::span<double>(params_).subspan(offsets_[i], layers_[i].out * layers_[i].in + layers_[i].out);
    }

    std::vector<LayerSpec> layers_;
    std::vector<std::size_t> offsets_;
    ParamBuffer params_;
    std::uint64_t version_ = 0;
};

namespace detail {

inline void activate(const Matrix& x, Activation a, Matrix& out) {
    switch (a) {
        case Activation::identity: out = x; return;
        case Activation::relu: out = x.cwiseMax(0.0); return;
        case Activation::swish: out = (x.array() / (1.0 + (-x.array()).exp())).matrix(); return;
    }
}

// g <- g * act'(x), elementwise.
inline void activate_backward(const Matrix& x, Matrix& g, Activation a) {
    switch (a) {
        case Activation::identity: return;
        case Activation::relu: g = (x.array() > 0.0).select(g, 0.0); return;
        case Activation::swish: {
            auto s = 1.0 / (1.0 + (-x.array()).exp());
            g.array() *= s * (1.0 + x.array() * (1.0 - s));
            return;
        }
    }
}

}  // namespace detail

// Per-layer inputs of one forward call, plus scratch space reused by later
// calls with the same tape.
struct Tape {
    const Mlp* net = nullptr;
    std::uint64_t version = 0;
    std::vector<Matrix> inputs;     // raw input of each layer
    std::vector<Matrix> activated;  // act(input)
    Matrix output;
    std::vector<Matrix> pending;    // backward scratch
    std::vector<bool> pending_set;
    Matrix scratch;
};

// Batched forward pass; columns of `x` are samples.
inline const Matrix& mlp_forward(const Mlp& net, const Matrix& x, Tape& tape) {
    const auto& layers = net.layers();
    if (static_cast<std::size_t>(x.rows()) != net.input_dim())
        throw ContractViolation("mlp_forward: input has " + std::to_string(x.rows()) + " rows, expected " +
                                std::to_string(net.input_dim()));
    const std::size_t n = layers.size();
    tape.net = &net;
    tape.version = net.version();
    tape.inputs.resize(n);
    tape.activated.resize(n);
    tape.inputs[0] = x;
    for (std::size_t i = 0; i < n; ++i) {
        detail::activate(tape.inputs[i], layers[i].act, tape.activated[i]);
        Matrix& y = i + 1 < n ? tape.inputs[i + 1] : tape.output;
        y.noalias() = net.weight(i) * tape.activated[i];
        y.colwise() += net.bias(i);
        if (layers[i].skip > 0) y += tape.inputs[i + 1 - layers[i].skip];
    }
    return tape.output;
}

inline Matrix mlp_forward(const Mlp& net, const Matrix& x) {
    Tape tape;
    return mlp_forward(net, x, tape);
}

inline Vector mlp_forward(const Mlp& net, const Vector& x) {
    Matrix in = x;
    return mlp_forward(net, in).col(0);
}

struct Gradients {
    ParamBuffer params;  // same layout as Mlp::params(), summed over the batch
    Matrix input;                // d loss / d input, one column per sample
};

// Accumulates parameter gradients into `param_grads` (must be sized to
// param_count) and returns d loss / d input.
inline const Matrix& mlp_backward_into(const Mlp& net, Tape& tape, const Matrix& output_grad,
                                       std::span<double> param_grads) {
    if (tape.net != &net || tape.version != net.version() || tape.inputs.size() != net.layers().size())
        throw ContractViolation("mlp_backward: tape does not belong to the current parameters");
    require(param_grads.size() == net.param_count(), "mlp_backward: gradient buffer size mismatch");
    const auto& layers = net.layers();
    const Eigen::Index batch = tape.inputs.front().cols();
    if (static_cast<std::size_t>(output_grad.rows()) != net.output_dim() || output_grad.cols() != batch)
        throw ContractViolation("mlp_backward: output gradient shape mismatch");

    const std::size_t n = layers.size();
    // pending[i] = d loss / d (raw input of layer i); pending[n] is the output.
    tape.pending.resize(n + 1);
    tape.pending_set.assign(n + 1, false);
    tape.pending[n] = output_grad;
    tape.pending_set[n] = true;
    auto accumulate = [&](std::size_t idx, const Matrix& g) {
        if (tape.pending_set[idx]) tape.pending[idx] += g;
        else {
            tape.pending[idx] = g;
            tape.pending_set[idx] = true;
        }
    };
    for (std::size_t k = n; k-- > 0;) {
        const auto& l = layers[k];
        const Matrix& gy = tape.pending[k + 1];
        Eigen::Map<Matrix> dw(param_grads.data() + net.weight_offset(k), static_cast<Eigen::Index>(l.out),
                              static_cast<Eigen::Index>(l.in));
        Eigen::Map<Vector> db(param_grads.data() + net.bias_offset(k), static_cast<Eigen::Index>(l.out));
        dw.noalias() += gy * tape.activated[k].transpose();
        db += gy.rowwise().sum();
        if (l.skip > 0) accumulate(k + 1 - l.skip, gy);
        tape.scratch.noalias() = net.weight(k).transpose() * gy;
        detail::activate_backward(tape.inputs[k], tape.scratch, l.act);
        accumulate(k, tape.scratch);
    }
    return tape.pending[0];
}

inline Gradients mlp_backward(const Mlp& net, Tape& tape, const Matrix& output_grad) {
    Gradients g;
    g.params.assign(net.param_count(), 0.0);
    g.input = mlp_backward_into(net, tape, output_grad, g.params);
    return g;
}

inline bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    AdamState() = default;
    explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

// Bias-corrected Adam. Non-finite gradients leave state and params untouched.
inline void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads, double lr) {
    require(params.size() == grads.size() && state.m.size() == params.size(), "adam_step: shape mismatch");
    require(lr > 0.0, "adam_step: learning rate must be positive");
    if (!all_finite(grads)) throw NumericalError("adam_step: non-finite gradient, step rejected");
    ++state.t;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
}

// shadow <- decay * shadow + (1 - decay) * params. Also used for polyak targets.
inline void ema_update(std::span<double> shadow, std::span<const double> params, double decay) {
    require(shadow.size() == params.size(), "ema_update: shape mismatch");
    require(decay >= 0.0 && decay <= 1.0, "ema_update: decay must lie in [0, 1]");
    for (std::size_t i = 0; i < shadow.size(); ++i) shadow[i] = decay * shadow[i] + (1.0 - decay) * params[i];
}

struct EmaParams {
    Mlp shadow;
    double decay = 0.999;

    void update(const Mlp& params) {
        require(shadow.same_shape(params), "EmaParams: shape mismatch");
        ema_update(shadow.params(), params.params(), decay);
    }
};

// Rounds every parameter to the nearest float so a float32 checkpoint holds it exactly.
inline void quantize_f32(Mlp& net) {
    for (auto& x : net.params()) x = static_cast<double>(static_cast<float>(x));
}

}  // namespace arq

#pragma once

// Context-aware encoder-decoder for low-light enhancement.
//
//   encoder stage i:  skip_i = block(f) [-> non-local], f = maxpool(skip_i)
//   bottleneck:       z = block(f) -> non-local (global context)
//   decoder stage i:  z = block([up(z), skip_i])
//   head:             3x3 conv to output channels, no activation
//
// `block` is a BasicBlock (two 3x3 conv + PReLU), or with local context
// enabled an entry 3x3 conv + PReLU followed by a DenseResidualBlock.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <variant>

#include "cen/ops.hpp"
#include "cen/random.hpp"

namespace cen {

enum class UpsampleMode { nearest, bilinear };

struct NetworkConfig {
    int num_stages = 4;
    int base_channels = 32;
    bool use_global_context = true;
    bool use_local_context = true;
    /// Resolution levels carrying a non-local block, 0 (full resolution)
    /// through num_stages (bottleneck). Empty means bottleneck only.
    std::vector<int> global_context_levels;
    UpsampleMode upsample = UpsampleMode::nearest;
    int input_channels = 3;
    int output_channels = 3;

    [[nodiscard]] std::size_t width(int level) const {
        return static_cast<std::size_t>(base_channels) << static_cast<unsigned>(level);
    }
    [[nodiscard]] std::size_t spatial_divisor() const { return std::size_t{1} << static_cast<unsigned>(num_stages); }

    [[nodiscard]] std::set<int> context_levels() const {
        if (!use_global_context) return {};
        if (global_context_levels.empty()) return {num_stages};
        return {global_context_levels.begin(), global_context_levels.end()};
    }

    void validate() const {
        if (num_stages < 1 || num_stages > 12) throw std::invalid_argument("num_stages must be in [1, 12]");
        if (base_channels < 1) throw std::invalid_argument("base_channels must be positive");
        if (input_channels < 1 || output_channels < 1) throw std::invalid_argument("channel counts must be positive");
        for (int level : global_context_levels)
            if (level < 0 || level > num_stages)
                throw std::invalid_argument("global context level " + std::to_string(level) + " outside [0, " +
                                            std::to_string(num_stages) + "]");
    }

    friend bool operator==(const NetworkConfig& a, const NetworkConfig& b) {
        return a.num_stages == b.num_stages && a.base_channels == b.base_channels &&
               a.context_levels() == b.context_levels() && a.use_local_context == b.use_local_context &&
               a.upsample == b.upsample && a.input_channels == b.input_channels &&
               a.output_channels == b.output_channels;
    }
};

/// Negative slope PReLU parameters start at; also used by the initializer's
/// gain.
inline constexpr double kPreluInitSlope = 0.25;

template <typename T>
struct ConvLayer {
    Tensor<T> weight;  // (cout, cin, k, k)
    Tensor<T> bias;    // (1, cout, 1, 1)

    ConvLayer() = default;
    ConvLayer(std::size_t cin, std::size_t cout, std::size_t k)
        : weight(Shape{cout, cin, k, k}), bias(Shape{1, cout, 1, 1}) {
        weight.set_requires_grad();
        bias.set_requires_grad();
    }

    [[nodiscard]] std::size_t in_channels() const { return weight.shape().c; }
    [[nodiscard]] std::size_t out_channels() const { return weight.shape().n; }

    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, 1, weight.shape().h / 2); }
};

template <typename T>
Tensor<T> make_slope(std::size_t channels) {
    Tensor<T> s(Shape{1, channels, 1, 1}, static_cast<T>(kPreluInitSlope));
    s.set_requires_grad();
    return s;
}

template <typename T>
struct BasicBlock {
    ConvLayer<T> conv1, conv2;
    Tensor<T> act1, act2;

    BasicBlock() = default;
    BasicBlock(std::size_t cin, std::size_t cout)
        : conv1(cin, cout, 3), conv2(cout, cout, 3), act1(make_slope<T>(cout)), act2(make_slope<T>(cout)) {}
};

/// Three cascaded 3x3 convolutions with growth rate equal to the input
/// width; layer l sees the concatenation of the block input and all earlier
/// layer outputs. The last layer is linear and feeds the residual add.
template <typename T>
struct DenseResidualBlock {
    std::array<ConvLayer<T>, 3> layers;
    std::array<Tensor<T>, 2> acts;

    DenseResidualBlock() = default;
    explicit DenseResidualBlock(std::size_t channels)
        : layers{ConvLayer<T>(channels, channels, 3), ConvLayer<T>(2 * channels, channels, 3),
                 ConvLayer<T>(3 * channels, channels, 3)},
          acts{make_slope<T>(channels), make_slope<T>(channels)} {}

    [[nodiscard]] std::size_t channels() const { return layers[0].in_channels(); }
};

/// Width-changing entry convolution followed by a dense residual block.
template <typename T>
struct DenseStage {
    ConvLayer<T> entry;
    Tensor<T> entry_act;
    DenseResidualBlock<T> drb;

    DenseStage() = default;
    DenseStage(std::size_t cin, std::size_t cout) : entry(cin, cout, 3), entry_act(make_slope<T>(cout)), drb(cout) {}
};

template <typename T>
using FeatureBlock = std::variant<BasicBlock<T>, DenseStage<T>>;

/// Embedded-Gaussian non-local block with a halved bottleneck width.
template <typename T>
struct NonLocalBlock {
    ConvLayer<T> query, key, value, out;

    NonLocalBlock() = default;
    explicit NonLocalBlock(std::size_t channels)
        : query(channels, inner(channels), 1),
          key(channels, inner(channels), 1),
          value(channels, inner(channels), 1),
          out(inner(channels), channels, 1) {}

    static std::size_t inner(std::size_t channels) { return (channels + 1) / 2; }
};

// ---------------------------------------------------------------------------
// Parameter enumeration

template <typename T, typename F>
void visit_parameters(ConvLayer<T>& layer, const std::string& prefix, F&& f) {
    f(prefix + ".weight", layer.weight);
    f(prefix + ".bias", layer.bias);
}

template <typename T, typename F>
void visit_parameters(BasicBlock<T>& b, const std::string& prefix, F&& f) {
    visit_parameters(b.conv1, prefix + ".bb.conv1", f);
    f(prefix + ".bb.act1.slope", b.act1);
    visit_parameters(b.conv2, prefix + ".bb.conv2", f);
    f(prefix + ".bb.act2.slope", b.act2);
}

template <typename T, typename F>
void visit_parameters(DenseResidualBlock<T>& b, const std::string& prefix, F&& f) {
    for (std::size_t l = 0; l < 3; ++l) {
        visit_parameters(b.layers[l], prefix + ".conv" + std::to_string(l + 1), f);
        if (l < 2) f(prefix + ".act" + std::to_string(l + 1) + ".slope", b.acts[l]);
    }
}

template <typename T, typename F>
void visit_parameters(DenseStage<T>& b, const std::string& prefix, F&& f) {
    visit_parameters(b.entry, prefix + ".entry", f);
    f(prefix + ".entry_act.slope", b.entry_act);
    visit_parameters(b.drb, prefix + ".drb", f);
}

template <typename T, typename F>
void visit_parameters(FeatureBlock<T>& b, const std::string& prefix, F&& f) {
    std::visit([&](auto& blk) { visit_parameters(blk, prefix, f); }, b);
}

template <typename T, typename F>
void visit_parameters(NonLocalBlock<T>& b, const std::string& prefix, F&& f) {
    visit_parameters(b.query, prefix + ".query", f);
    visit_parameters(b.key, prefix + ".key", f);
    visit_parameters(b.value, prefix + ".value", f);
    visit_parameters(b.out, prefix + ".out", f);
}

// ---------------------------------------------------------------------------
// Block forwards

template <typename T>
Tensor<T> basic_block_forward(const BasicBlock<T>& b, const Tensor<T>& f) {
    typename Tape<T>::Scope scope("basic_block");
    return prelu(b.conv2(prelu(b.conv1(f), b.act1)), b.act2);
}

template <typename T>
Tensor<T> drb_forward(const DenseResidualBlock<T>& b, const Tensor<T>& f) {
    typename Tape<T>::Scope scope("drb");
    if (f.shape().c != b.channels()) {
        throw DimensionError("dense residual block expects " + std::to_string(b.channels()) + " channels, got " +
                             std::to_string(f.shape().c));
    }
    const Tensor<T> y1 = prelu(b.layers[0](f), b.acts[0]);
    const Tensor<T> y2 = prelu(b.layers[1](concat_channels({f, y1})), b.acts[1]);
    const Tensor<T> y3 = b.layers[2](concat_channels({f, y1, y2}));
    return add(f, y3);
}

template <typename T>
Tensor<T> dense_stage_forward(const DenseStage<T>& b, const Tensor<T>& f) {
    return drb_forward(b.drb, prelu(b.entry(f), b.entry_act));
}

template <typename T>
Tensor<T> feature_block_forward(const FeatureBlock<T>& b, const Tensor<T>& f) {
    return std::visit(
        [&](const auto& blk) -> Tensor<T> {
            using B = std::decay_t<decltype(blk)>;
            if constexpr (std::is_same_v<B, BasicBlock<T>>)
                return basic_block_forward(blk, f);
            else
                return dense_stage_forward(blk, f);
        },
        b);
}

/// z + W_out(softmax(q kᵀ) v) over the H·W positions of each batch item.
template <typename T>
Tensor<T> nonlocal_forward(const NonLocalBlock<T>& b, const Tensor<T>& z) {
    typename Tape<T>::Scope scope("nonlocal");
    const Shape s = z.shape();
    const std::size_t positions = s.h * s.w;
    const std::size_t inner = b.query.out_channels();
    if (s.c != b.query.in_channels()) {
        throw DimensionError("non-local block expects " + std::to_string(b.query.in_channels()) + " channels, got " +
                             std::to_string(s.c));
    }
    const Shape flat{s.n, 1, inner, positions};
    constexpr std::array<std::size_t, 4> kTranspose{0, 1, 3, 2};
    const Tensor<T> q = permute(reshape(b.query(z), flat), kTranspose);  // (n,1,Np,C')
    const Tensor<T> k = reshape(b.key(z), flat);                          // (n,1,C',Np)
    const Tensor<T> v = permute(reshape(b.value(z), flat), kTranspose);  // (n,1,Np,C')
    const Tensor<T> attention = softmax_rows(matmul(q, k));              // (n,1,Np,Np)
    const Tensor<T> gathered = permute(matmul(attention, v), kTranspose);  // (n,1,C',Np)
    return add(z, b.out(reshape(gathered, Shape{s.n, inner, s.h, s.w})));
}

/// Row-stochastic attention matrix the block would use for `z`; for
/// inspection and tests only.
template <typename T>
Tensor<T> nonlocal_attention(const NonLocalBlock<T>& b, const Tensor<T>& z) {
    const Shape s = z.shape();
    const Shape flat{s.n, 1, b.query.out_channels(), s.h * s.w};
    const Tensor<T> q = permute(reshape(b.query(z), flat), {0, 1, 3, 2});
    return softmax_rows(matmul(q, reshape(b.key(z), flat)));
}

// ---------------------------------------------------------------------------
// Network

struct StructureCensus {
    std::size_t basic_blocks = 0;
    std::size_t dense_blocks = 0;
    std::size_t nonlocal_blocks = 0;
    std::size_t parameter_tensors = 0;
    std::size_t parameter_count = 0;
};

template <typename T>
struct EncoderOutput {
    Tensor<T> pooled;
    Tensor<T> skip;
};

template <typename T>
class Network {
public:
    explicit Network(NetworkConfig config) : config_(std::move(config)) {
        config_.validate();
        const int m = config_.num_stages;
        for (int i = 0; i < m; ++i) {
            const std::size_t cin = i == 0 ? static_cast<std::size_t>(config_.input_channels) : config_.width(i - 1);
            encoders_.push_back(make_block(cin, config_.width(i)));
        }
        bottleneck_ = make_block(config_.width(m - 1), config_.width(m));
        for (int i = 0; i < m; ++i) decoders_.push_back(make_block(config_.width(i + 1) + config_.width(i), config_.width(i)));
        head_ = ConvLayer<T>(config_.width(0), static_cast<std::size_t>(config_.output_channels), 3);
        for (int level : config_.context_levels()) global_.emplace(level, NonLocalBlock<T>(config_.width(level)));
        collect();
    }

    Network(const Network& other) : Network(other.config_) { copy_values_from(other); }
    Network& operator=(const Network&) = delete;
    Network(Network&&) noexcept = default;
    Network& operator=(Network&&) noexcept = default;

    [[nodiscard]] const NetworkConfig& config() const noexcept { return config_; }
    [[nodiscard]] std::vector<Parameter<T>>& parameters() noexcept { return params_; }
    [[nodiscard]] const std::vector<Parameter<T>>& parameters() const noexcept { return params_; }

    [[nodiscard]] Tensor<T>* find(std::string_view name) {
        for (auto& p : params_)
            if (p.name == name) return &p.value;
        return nullptr;
    }

    [[nodiscard]] const FeatureBlock<T>& encoder_block(int i) const { return encoders_.at(static_cast<std::size_t>(i)); }
    [[nodiscard]] const FeatureBlock<T>& decoder_block(int i) const { return decoders_.at(static_cast<std::size_t>(i)); }
    [[nodiscard]] const FeatureBlock<T>& bottleneck_block() const { return bottleneck_; }
    [[nodiscard]] const NonLocalBlock<T>* context_block(int level) const {
        auto it = global_.find(level);
        return it == global_.end() ? nullptr : &it->second;
    }

    EncoderOutput<T> encoder_stage(int i, const Tensor<T>& f) const {
        const Shape& s = f.shape();
        if (s.h % 2 != 0 || s.w % 2 != 0) {
            throw DimensionError("encoder stage " + std::to_string(i) + " needs even extents, got " + s.str());
        }
        Tensor<T> skip = feature_block_forward(encoders_.at(static_cast<std::size_t>(i)), f);
        if (const auto* gc = context_block(i)) skip = nonlocal_forward(*gc, skip);
        return {maxpool2d(skip), skip};
    }

    Tensor<T> decoder_stage(int i, const Tensor<T>& z, const Tensor<T>& skip) const {
        const Tensor<T> up = config_.upsample == UpsampleMode::nearest ? upsample_nearest2x(z) : upsample_bilinear2x(z);
        if (up.shape().h != skip.shape().h || up.shape().w != skip.shape().w) {
            throw DimensionError("decoder stage " + std::to_string(i) + ": upsampled " + up.shape().str() +
                                 " does not match skip " + skip.shape().str());
        }
        return feature_block_forward(decoders_.at(static_cast<std::size_t>(i)), concat_channels({up, skip}));
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        const Shape& s = x.shape();
        const std::size_t div = config_.spatial_divisor();
        if (s.c != static_cast<std::size_t>(config_.input_channels)) {
            throw DimensionError("network expects " + std::to_string(config_.input_channels) +
                                 " input channels, got " + std::to_string(s.c));
        }
        if (s.h % div != 0 || s.w % div != 0 || s.h == 0 || s.w == 0) {
            throw DimensionError("input extents " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                                 " must be positive multiples of " + std::to_string(div));
        }
        const int m = config_.num_stages;
        std::vector<Tensor<T>> skips;
        Tensor<T> f = x;
        for (int i = 0; i < m; ++i) {
            auto stage = encoder_stage(i, f);
            skips.push_back(std::move(stage.skip));
            f = std::move(stage.pooled);
        }
        Tensor<T> z = feature_block_forward(bottleneck_, f);
        if (const auto* gc = context_block(m)) z = nonlocal_forward(*gc, z);
        for (int i = m - 1; i >= 0; --i) z = decoder_stage(i, z, skips[static_cast<std::size_t>(i)]);
        return head_(z);
    }

    [[nodiscard]] StructureCensus census() const {
        StructureCensus c;
        auto count = [&](const FeatureBlock<T>& b) {
            if (std::holds_alternative<BasicBlock<T>>(b))
                ++c.basic_blocks;
            else
                ++c.dense_blocks;
        };
        for (const auto& b : encoders_) count(b);
        count(bottleneck_);
        for (const auto& b : decoders_) count(b);
        c.nonlocal_blocks = global_.size();
        c.parameter_tensors = params_.size();
        for (const auto& p : params_) c.parameter_count += p.value.numel();
        return c;
    }

    /// Copies values by parameter name; shapes must agree exactly.
    template <typename U>
    void copy_values_from(const Network<U>& other) {
        const auto& src = other.parameters();
        if (src.size() != params_.size()) throw DimensionError("networks differ in parameter count");
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (src[i].name != params_[i].name || src[i].value.shape() != params_[i].value.shape()) {
                throw DimensionError("parameter mismatch at " + params_[i].name);
            }
            auto dst = params_[i].value.data();
            auto s = src[i].value.data();
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(s[k]);
        }
    }

    template <typename U>
    [[nodiscard]] Network<U> cast() const {
        Network<U> out(config_);
        out.copy_values_from(*this);
        return out;
    }

    void zero_grad() {
        for (auto& p : params_) p.value.clear_grad();
    }

private:
    FeatureBlock<T> make_block(std::size_t cin, std::size_t cout) const {
        if (config_.use_local_context) return DenseStage<T>(cin, cout);
        return BasicBlock<T>(cin, cout);
    }

    void collect() {
        params_.clear();
        auto add_param = [this](const std::string& name, Tensor<T>& t) { params_.push_back({name, t}); };
        for (std::size_t i = 0; i < encoders_.size(); ++i) {
            const int level = static_cast<int>(i);
            visit_parameters(encoders_[i], "enc" + std::to_string(i), add_param);
            if (auto it = global_.find(level); it != global_.end())
                visit_parameters(it->second, "gc" + std::to_string(level), add_param);
        }
        visit_parameters(bottleneck_, std::string("mid"), add_param);
        if (auto it = global_.find(config_.num_stages); it != global_.end())
            visit_parameters(it->second, "gc" + std::to_string(config_.num_stages), add_param);
        for (std::size_t i = decoders_.size(); i-- > 0;) visit_parameters(decoders_[i], "dec" + std::to_string(i), add_param);
        visit_parameters(head_, std::string("head"), add_param);
    }

    NetworkConfig config_;
    std::vector<FeatureBlock<T>> encoders_;
    FeatureBlock<T> bottleneck_;
    std::vector<FeatureBlock<T>> decoders_;
    ConvLayer<T> head_;
    std::map<int, NonLocalBlock<T>> global_;
    std::vector<Parameter<T>> params_;
};

/// Fan-in uniform bound for a convolution weight feeding a PReLU with the
/// initial slope: sqrt(6 / ((1 + a^2) fan_in)).
inline double init_bound(std::size_t fan_in) {
    return std::sqrt(6.0 / ((1.0 + kPreluInitSlope * kPreluInitSlope) * static_cast<double>(fan_in)));
}

[[nodiscard]] inline bool is_context_output_weight(std::string_view name) {
    return name.starts_with("gc") && name.ends_with(".out.weight");
}

/// Deterministic initialization: fan-in uniform weights, zero biases,
/// PReLU slopes at 0.25, and zero non-local output projections so every
/// global-context block starts as the identity.
template <typename T>
void init_parameters(Network<T>& net, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& p : net.parameters()) {
        auto values = p.value.data();
        if (p.name.ends_with(".slope")) {
            std::fill(values.begin(), values.end(), static_cast<T>(kPreluInitSlope));
        } else if (p.name.ends_with(".bias") || is_context_output_weight(p.name)) {
            std::fill(values.begin(), values.end(), T(0));
        } else {
            const Shape& s = p.value.shape();
            const double bound = init_bound(s.c * s.h * s.w);
            for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
        }
    }
}

template <typename T>
Network<T> make_network(const NetworkConfig& config, std::uint64_t seed) {
    Network<T> net(config);
    init_parameters(net, seed);
    return net;
}

/// Reconstructs the architecture implied by a set of parameter names and
/// shapes; the upsampling mode carries no parameters and is taken from
/// `upsample`.
inline NetworkConfig infer_network_config(const std::map<std::string, Shape>& shapes,
                                          UpsampleMode upsample = UpsampleMode::nearest) {
    NetworkConfig cfg;
    int stages = 0;
    while (true) {
        const std::string prefix = "enc" + std::to_string(stages) + ".";
        bool any = false;
        for (const auto& [name, _] : shapes)
            if (name.starts_with(prefix)) any = true;
        if (!any) break;
        ++stages;
    }
    if (stages == 0) throw DimensionError("parameter set has no encoder stages");
    cfg.num_stages = stages;
    cfg.use_local_context = shapes.count("enc0.entry.weight") > 0;
    const std::string first = cfg.use_local_context ? "enc0.entry.weight" : "enc0.bb.conv1.weight";
    auto it = shapes.find(first);
    if (it == shapes.end()) throw DimensionError("parameter set lacks " + first);
    cfg.base_channels = static_cast<int>(it->second.n);
    cfg.input_channels = static_cast<int>(it->second.c);
    auto head = shapes.find("head.weight");
    if (head == shapes.end()) throw DimensionError("parameter set lacks head.weight");
    cfg.output_channels = static_cast<int>(head->second.n);
    std::vector<int> levels;
    for (int level = 0; level <= stages; ++level)
        if (shapes.count("gc" + std::to_string(level) + ".query.weight")) levels.push_back(level);
    cfg.use_global_context = !levels.empty();
    if (!(levels.size() == 1 && levels[0] == stages)) cfg.global_context_levels = levels;
    cfg.upsample = upsample;
    return cfg;
}

}  // namespace cen

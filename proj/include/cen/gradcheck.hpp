#pragma once

// Central finite-difference gradient checks in double precision.
//
// The op under test is scalarized as Σ output·w with fixed random weights
// w in [-1, 1]. Relative error per entry is |a - n| / max(|a|, |n|, 1e-3).

#include <functional>
#include <iomanip>
#include <ostream>

#include "cen/blocks.hpp"

namespace cen {

struct GradcheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    double denominator_floor = 1e-3;
};

/// A tensor whose gradient is checked. Empty `indices` means every entry.
struct GradInput {
    std::string name;
    Tensor<double> value;
    std::vector<std::size_t> indices;
};

struct InputError {
    std::string input;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

struct GradcheckResult {
    std::string op;
    double tolerance = 0.0;
    std::size_t trials = 0;
    std::vector<InputError> inputs;

    [[nodiscard]] double max_rel_error() const {
        double m = 0.0;
        for (const auto& e : inputs) m = std::max(m, e.max_rel_error);
        return m;
    }
    [[nodiscard]] bool passed() const {
        const double m = max_rel_error();
        return std::isfinite(m) && m < tolerance;
    }

    /// Folds another trial of the same op into this result.
    void merge(const GradcheckResult& trial) {
        trials += trial.trials;
        for (const auto& e : trial.inputs) {
            auto it = std::find_if(inputs.begin(), inputs.end(), [&](const InputError& x) { return x.input == e.input; });
            if (it == inputs.end()) {
                inputs.push_back(e);
            } else {
                it->max_rel_error = std::max(it->max_rel_error, e.max_rel_error);
                if (std::isnan(e.max_rel_error)) it->max_rel_error = e.max_rel_error;
                it->checked += e.checked;
            }
        }
    }
};

/// `f` rebuilds the output from the (aliased) input handles on every call.
inline GradcheckResult gradcheck(const std::string& op, std::vector<GradInput>& inputs,
                                 const std::function<Tensor<double>()>& f, Rng& rng,
                                 const GradcheckOptions& options = {}) {
    GradcheckResult result;
    result.op = op;
    result.tolerance = options.tolerance;
    result.trials = 1;

    for (auto& in : inputs) {
        in.value.set_requires_grad();
        in.value.clear_grad();
    }
    Tensor<double> weights;
    {
        Tape<double> tape;
        Tensor<double> out = f();
        std::vector<double> w(out.numel());
        for (auto& v : w) v = rng.uniform(-1.0, 1.0);
        weights = Tensor<double>(out.shape(), std::move(w));
        Tensor<double> loss = weighted_sum(out, weights);
        tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    for (auto& in : inputs) {
        if (in.value.has_grad()) {
            const auto g = in.value.grad();
            analytic.emplace_back(g.begin(), g.end());
        } else {
            analytic.emplace_back(in.value.numel(), 0.0);
        }
        in.value.clear_grad();
    }

    const auto loss_value = [&] {
        const Tensor<double> out = f();
        const auto o = out.data();
        const auto w = weights.data();
        double acc = 0.0;
        for (std::size_t i = 0; i < o.size(); ++i) acc += o[i] * w[i];
        return acc;
    };

    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& in = inputs[k];
        std::vector<std::size_t> idx = in.indices;
        if (idx.empty()) {
            idx.resize(in.value.numel());
            std::iota(idx.begin(), idx.end(), std::size_t{0});
        }
        InputError err{in.name, 0.0, idx.size()};
        auto x = in.value.data();
        for (std::size_t i : idx) {
            const double saved = x[i];
            x[i] = saved + options.step;
            const double plus = loss_value();
            x[i] = saved - options.step;
            const double minus = loss_value();
            x[i] = saved;
            const double numeric = (plus - minus) / (2.0 * options.step);
            const double a = analytic[k][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
            const double rel = std::abs(a - numeric) / denom;
            if (std::isnan(rel)) {
                err.max_rel_error = rel;
                break;
            }
            err.max_rel_error = std::max(err.max_rel_error, rel);
        }
        result.inputs.push_back(err);
    }
    return result;
}

struct GradcheckReport {
    std::vector<GradcheckResult> results;

    [[nodiscard]] bool passed() const {
        return std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed(); });
    }
    [[nodiscard]] const GradcheckResult* find(std::string_view op) const {
        for (const auto& r : results)
            if (r.op == op) return &r;
        return nullptr;
    }

    void print(std::ostream& os) const {
        for (const auto& r : results) {
            os << std::left << std::setw(22) << r.op << std::right << " trials=" << std::setw(2) << r.trials
               << "  max_rel_err=" << std::scientific << std::setprecision(3) << r.max_rel_error()
               << "  tol=" << std::setprecision(0) << r.tolerance << std::defaultfloat << "  "
               << (r.passed() ? "PASS" : "FAIL");
            if (!r.passed()) {
                for (const auto& e : r.inputs)
                    if (!(e.max_rel_error < r.tolerance))
                        os << "  [" << e.input << " " << std::scientific << std::setprecision(3) << e.max_rel_error
                           << std::defaultfloat << "]";
            }
            os << '\n';
        }
        os << (passed() ? "gradcheck: all passed" : "gradcheck: FAILED") << '\n';
    }
};

namespace detail {

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape.numel());
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<double>(shape, std::move(v));
}

/// Uniform in [-1, 1] but at least `margin` away from zero.
inline Tensor<double> random_off_zero(Rng& rng, Shape shape, double margin = 1e-2) {
    Tensor<double> t = random_tensor(rng, shape);
    for (auto& x : t.data())
        if (std::abs(x) < margin) x = x < 0 ? -margin : margin;
    return t;
}

/// Entries with pairwise gaps of at least 0.01 so no max-pool window is
/// near a tie.
inline Tensor<double> random_distinct(Rng& rng, Shape shape) {
    const std::size_t n = shape.numel();
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = -1.0 + 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    for (std::size_t i = n; i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
    return Tensor<double>(shape, std::move(v));
}

inline std::vector<std::size_t> sample_indices(Rng& rng, std::size_t numel, std::size_t count) {
    if (numel <= count) return {};
    std::vector<std::size_t> all(numel);
    std::iota(all.begin(), all.end(), std::size_t{0});
    for (std::size_t i = 0; i < count; ++i) std::swap(all[i], all[i + rng.below(numel - i)]);
    all.resize(count);
    std::sort(all.begin(), all.end());
    return all;
}

template <typename Block>
std::vector<GradInput> block_inputs(Block& block, const std::string& prefix, Rng& rng, std::size_t per_tensor) {
    std::vector<GradInput> out;
    visit_parameters(block, prefix, [&](const std::string& name, Tensor<double>& t) {
        for (auto& x : t.data()) x = rng.uniform(-0.5, 0.5);
        out.push_back({name, t, sample_indices(rng, t.numel(), per_tensor)});
    });
    return out;
}

}  // namespace detail

struct GradcheckSuiteOptions {
    std::size_t op_trials = 20;
    std::size_t block_trials = 3;
    std::size_t network_trials = 2;
    double op_tolerance = 1e-4;
    double block_tolerance = 1e-3;
    std::uint64_t seed = 20240601;
};

/// One result per op or block, each covering all of its trials.
inline GradcheckReport run_gradcheck_suite(const GradcheckSuiteOptions& so = {}) {
    using detail::random_off_zero;
    using detail::random_tensor;
    using D = Tensor<double>;
    GradcheckReport report;
    Rng rng(so.seed);
    GradcheckOptions op_opts;
    op_opts.tolerance = so.op_tolerance;
    GradcheckOptions block_opts;
    block_opts.tolerance = so.block_tolerance;

    auto run = [&](const std::string& name, std::size_t trials, const GradcheckOptions& opts, auto make_trial) {
        GradcheckResult total;
        total.op = name;
        total.tolerance = opts.tolerance;
        for (std::size_t t = 0; t < trials; ++t) {
            std::vector<GradInput> inputs;
            std::function<D()> f;
            make_trial(t, inputs, f);
            total.merge(gradcheck(name, inputs, f, rng, opts));
        }
        report.results.push_back(std::move(total));
    };

    run("conv2d", so.op_trials, op_opts, [&](std::size_t t, auto& in, auto& f) {
        const std::size_t stride = 1 + t % 2;
        const std::size_t pad = (t / 2) % 2;
        const std::size_t k = t % 3 == 2 ? 1 : 3;
        in = {{"input", random_tensor(rng, {1, 2, 5, 5}), {}},
              {"weight", random_tensor(rng, {3, 2, k, k}), {}},
              {"bias", random_tensor(rng, {1, 3, 1, 1}), {}}};
        f = [x = in[0].value, w = in[1].value, b = in[2].value, stride, pad] { return conv2d(x, w, b, stride, pad); };
    });
    run("maxpool2d", so.op_trials, op_opts, [&](std::size_t, auto& in, auto& f) {
        in = {{"input", detail::random_distinct(rng, {1, 2, 4, 6}), {}}};
        f = [x = in[0].value] { return maxpool2d(x); };
    });
    run("upsample_nearest2x", so.op_trials, op_opts, [&](std::size_t, auto& in, auto& f) {
        in = {{"input", random_tensor(rng, {1, 2, 3, 4}), {}}};
        f = [x = in[0].value] { return upsample_nearest2x(x); };
    });
    run("upsample_bilinear2x", so.op_trials, op_opts, [&](std::size_t, auto& in, auto& f) {
        in = {{"input", random_tensor(rng, {1, 2, 3, 4}), {}}};
        f = [x = in[0].value] { return upsample_bilinear2x(x); };
    });
    run("concat_channels", so.op_trials, op_opts, [&](std::size_t, auto& in, auto& f) {
        in = {{"a", random_tensor(rng, {2, 2, 3, 3}), {}},
              {"b", random_tensor(rng, {2, 1, 3, 3}), {}},
              {"c", random_tensor(rng, {2, 3, 3, 3}), {}}};
        f = [a = in[0].value, b = in[1].value, c = in[2].value] { return concat_channels({a, b, c}); };
    });
    run("prelu", so.op_trials, op_opts, [&](std::size_t, auto& in, auto& f) {
        in = {{"input", random_off_zero(rng, {2, 3, 3, 3}), {}}, {"slope", random_tensor(rng, {1, 3, 1, 1}), {}}};
        f = [x = in[0].value, a = in[1].value] { return prelu(x, a); };
    });
    run("softmax_rows", so.op_trials, op_opts, [&](std::size_t, auto& in, auto& f) {
        in = {{"input", random_tensor(rng, {1, 2, 3, 5}, -3.0, 3.0), {}}};
        f = [x = in[0].value] { return softmax_rows(x); };
    });
    run("matmul", so.op_trials, op_opts, [&](std::size_t, auto& in, auto& f) {
        in = {{"a", random_tensor(rng, {2, 1, 3, 4}), {}}, {"b", random_tensor(rng, {2, 1, 4, 2}), {}}};
        f = [a = in[0].value, b = in[1].value] { return matmul(a, b); };
    });
    run("add", so.op_trials, op_opts, [&](std::size_t, auto& in, auto& f) {
        in = {{"a", random_tensor(rng, {1, 2, 3, 3}), {}}, {"b", random_tensor(rng, {1, 2, 3, 3}), {}}};
        f = [a = in[0].value, b = in[1].value] { return add(a, b); };
    });
    run("scale", so.op_trials, op_opts, [&](std::size_t, auto& in, auto& f) {
        in = {{"input", random_tensor(rng, {1, 2, 3, 3}), {}}};
        f = [x = in[0].value, s = rng.uniform(-2.0, 2.0)] { return scale(x, s); };
    });
    run("reshape", so.op_trials, op_opts, [&](std::size_t, auto& in, auto& f) {
        in = {{"input", random_tensor(rng, {1, 2, 3, 4}), {}}};
        f = [x = in[0].value] { return reshape(x, Shape{1, 1, 6, 4}); };
    });
    run("permute", so.op_trials, op_opts, [&](std::size_t t, auto& in, auto& f) {
        static constexpr std::array<std::array<std::size_t, 4>, 3> kAxes{{{0, 2, 3, 1}, {0, 1, 3, 2}, {3, 2, 1, 0}}};
        in = {{"input", random_tensor(rng, {2, 3, 2, 4}), {}}};
        f = [x = in[0].value, axes = kAxes[t % 3]] { return permute(x, axes); };
    });
    run("sum", so.op_trials, op_opts, [&](std::size_t, auto& in, auto& f) {
        in = {{"input", random_tensor(rng, {1, 2, 3, 3}), {}}};
        f = [x = in[0].value] { return sum(x); };
    });
    run("weighted_sum", so.op_trials, op_opts, [&](std::size_t, auto& in, auto& f) {
        in = {{"input", random_tensor(rng, {1, 2, 3, 3}), {}}};
        f = [x = in[0].value, w = random_tensor(rng, {1, 2, 3, 3})] { return weighted_sum(x, w); };
    });
    run("l1_loss", so.op_trials, op_opts, [&](std::size_t, auto& in, auto& f) {
        const D target = random_tensor(rng, {1, 2, 3, 3});
        D pred = random_off_zero(rng, {1, 2, 3, 3});
        for (std::size_t i = 0; i < pred.numel(); ++i) pred.data()[i] += target.data()[i];
        in = {{"pred", pred, {}}};
        f = [p = pred, target] { return l1_loss(p, target); };
    });

    run("basic_block", so.block_trials, block_opts, [&](std::size_t, auto& in, auto& f) {
        auto block = std::make_shared<BasicBlock<double>>(3, 4);
        in = detail::block_inputs(*block, "bb", rng, 24);
        D x = random_tensor(rng, {1, 3, 6, 6});
        in.push_back({"input", x, {}});
        f = [block, x] { return basic_block_forward(*block, x); };
    });
    run("dense_residual_block", so.block_trials, block_opts, [&](std::size_t, auto& in, auto& f) {
        auto block = std::make_shared<DenseResidualBlock<double>>(3);
        in = detail::block_inputs(*block, "drb", rng, 24);
        D x = random_tensor(rng, {1, 3, 6, 6});
        in.push_back({"input", x, {}});
        f = [block, x] { return drb_forward(*block, x); };
    });
    run("nonlocal_block", so.block_trials, block_opts, [&](std::size_t, auto& in, auto& f) {
        auto block = std::make_shared<NonLocalBlock<double>>(5);
        in = detail::block_inputs(*block, "gc", rng, 24);
        D x = random_tensor(rng, {2, 5, 3, 4});
        in.push_back({"input", x, {}});
        f = [block, x] { return nonlocal_forward(*block, x); };
    });
    for (const bool full : {false, true}) {
        NetworkConfig cfg;
        cfg.num_stages = 2;
        cfg.base_channels = 4;
        cfg.use_global_context = full;
        cfg.use_local_context = full;
        run(full ? "network_full" : "network_baseline", so.network_trials, block_opts,
            [&](std::size_t, auto& in, auto& f) {
                auto net = std::make_shared<Network<double>>(make_network<double>(cfg, rng.next()));
                // Non-zero output projections so gradients reach the attention path.
                for (auto& p : net->parameters()) {
                    if (is_context_output_weight(p.name))
                        for (auto& v : p.value.data()) v = rng.uniform(-0.5, 0.5);
                    in.push_back({p.name, p.value, detail::sample_indices(rng, p.value.numel(), 16)});
                }
                D x = random_tensor(rng, {1, 3, 8, 8}, 0.0, 1.0);
                in.push_back({"input", x, {}});
                f = [net, x] { return net->forward(x); };
            });
    }
    return report;
}

}  // namespace cen

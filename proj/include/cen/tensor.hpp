#pragma once

// Dense NCHW tensor with a reverse-mode differentiation tape.
//
// A Tensor is a shared handle: copies alias the same storage, which is what
// lets the tape accumulate gradients into tensors the caller still holds.
// Use clone() for an independent deep copy.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cen {

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Shape {
    std::size_t n = 0;
    std::size_t c = 0;
    std::size_t h = 0;
    std::size_t w = 0;

    [[nodiscard]] constexpr std::size_t numel() const noexcept { return n * c * h * w; }
    [[nodiscard]] constexpr std::array<std::size_t, 4> dims() const noexcept { return {n, c, h, w}; }
    [[nodiscard]] static constexpr Shape from(const std::array<std::size_t, 4>& d) noexcept {
        return {d[0], d[1], d[2], d[3]};
    }
    friend constexpr bool operator==(const Shape&, const Shape&) = default;

    [[nodiscard]] std::string str() const {
        std::ostringstream os;
        os << n << "x" << c << "x" << h << "x" << w;
        return os.str();
    }
};

template <typename T>
class Tape;

template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<Impl>()) {
        impl_->shape = shape;
        impl_->data.assign(shape.numel(), fill);
    }

    Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<Impl>()) {
        if (values.size() != shape.numel()) {
            throw DimensionError("tensor of shape " + shape.str() + " needs " + std::to_string(shape.numel()) +
                                 " values, got " + std::to_string(values.size()));
        }
        impl_->shape = shape;
        impl_->data = std::move(values);
    }

    static Tensor scalar(T value) { return Tensor(Shape{1, 1, 1, 1}, value); }

    /// Row-major R x K matrix stored as a 1x1xRxK tensor.
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values) {
        return Tensor(Shape{1, 1, rows, cols}, std::move(values));
    }

    [[nodiscard]] bool defined() const noexcept { return impl_ != nullptr; }
    explicit operator bool() const noexcept { return defined(); }

    [[nodiscard]] const Shape& shape() const { return checked().shape; }
    [[nodiscard]] std::size_t numel() const { return checked().data.size(); }

    [[nodiscard]] std::span<T> data() { return checked().data; }
    [[nodiscard]] std::span<const T> data() const { return checked().data; }

    [[nodiscard]] bool has_grad() const { return !checked().grad.empty(); }
    [[nodiscard]] std::span<T> grad() { return checked().grad; }
    [[nodiscard]] std::span<const T> grad() const { return checked().grad; }

    /// Allocates a zeroed gradient buffer if none exists.
    std::span<T> ensure_grad() {
        auto& im = checked();
        if (im.grad.empty()) im.grad.assign(im.data.size(), T(0));
        return im.grad;
    }
    void zero_grad() {
        auto& g = checked().grad;
        std::fill(g.begin(), g.end(), T(0));
    }
    void clear_grad() { checked().grad.clear(); }

    [[nodiscard]] bool requires_grad() const { return checked().requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        checked().requires_grad = on;
        return *this;
    }

    [[nodiscard]] T item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape().str());
        return checked().data[0];
    }

    [[nodiscard]] std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        const auto& s = shape();
        return ((n * s.c + c) * s.h + h) * s.w + w;
    }
    T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) { return checked().data[offset(n, c, h, w)]; }
    T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return checked().data[offset(n, c, h, w)];
    }

    /// Deep copy of the values only; the copy is a fresh leaf.
    [[nodiscard]] Tensor clone() const { return Tensor(shape(), checked().data); }

    template <typename U>
    [[nodiscard]] Tensor<U> cast() const {
        std::vector<U> out(numel());
        std::transform(checked().data.begin(), checked().data.end(), out.begin(),
                       [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape(), std::move(out));
    }

    [[nodiscard]] bool same(const Tensor& other) const noexcept { return impl_ == other.impl_; }

private:
    struct Impl {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad;
        bool requires_grad = false;
        const Tape<T>* tape = nullptr;
    };

    Impl& checked() const {
        if (!impl_) throw ContractError("use of an undefined tensor");
        return *impl_;
    }

    std::shared_ptr<Impl> impl_;

    friend class Tape<T>;
};

/// A trainable tensor with a stable name; the name keys checkpoint records
/// and optimizer slots.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
};

/// Records operations executed while it is the active tape of its thread.
///
/// Every op executed under an active tape is counted in the census. An op is
/// additionally recorded for differentiation when any input requires a
/// gradient; its output then requires a gradient too. backward() walks the
/// recorded nodes in exact reverse order and may run once per reset().
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(std::span<const T> grad_out)>;

    Tape() : previous_(active_) { active_ = this; }
    ~Tape() { active_ = previous_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    [[nodiscard]] static Tape* current() noexcept { return active_; }

    /// Labels ops executed while alive; census keys become "label/op" in
    /// addition to the bare op name. A no-op without an active tape.
    class Scope {
    public:
        explicit Scope(std::string_view label) : tape_(Tape::current()) {
            if (tape_) tape_->scopes_.emplace_back(label);
        }
        ~Scope() {
            if (tape_) tape_->scopes_.pop_back();
        }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* tape_;
    };

    /// Returns true when the op was recorded for differentiation.
    bool record(std::string_view op, Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs,
                BackwardFn backward) {
        bool needs = false;
        for (const auto* in : inputs) needs = needs || (in->defined() && in->requires_grad());
        return record(op, out, needs, std::move(backward));
    }

    bool record(std::string_view op, Tensor<T>& out, bool needs_grad, BackwardFn backward) {
        ++census_[std::string(op)];
        if (!scopes_.empty()) ++census_[scopes_.back() + "/" + std::string(op)];
        if (!needs_grad) return false;
        if (consumed_) throw ContractError("tape already ran backward; reset() before recording");
        out.impl_->requires_grad = true;
        out.impl_->tape = this;
        nodes_.push_back(Node{std::string(op), out.impl_, std::move(backward)});
        return true;
    }

    void backward(Tensor<T>& loss) {
        if (consumed_) throw ContractError("backward() called twice without reset()");
        if (loss.numel() != 1) throw ContractError("backward() needs a scalar loss, got shape " + loss.shape().str());
        if (loss.impl_->tape != nullptr && loss.impl_->tape != this) {
            throw ContractError("loss was produced under a different tape");
        }
        if (!loss.requires_grad()) throw ContractError("loss does not depend on any tensor requiring a gradient");
        consumed_ = true;
        loss.ensure_grad()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->output->grad.empty()) continue;
            it->backward(std::span<const T>(it->output->grad));
        }
        nodes_.clear();
    }

    void reset() {
        nodes_.clear();
        census_.clear();
        consumed_ = false;
    }

    [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }
    [[nodiscard]] bool consumed() const noexcept { return consumed_; }

    /// Number of times `op` executed under this tape since the last reset.
    [[nodiscard]] std::size_t count(std::string_view op) const {
        auto it = census_.find(op);
        return it == census_.end() ? 0 : it->second;
    }
    [[nodiscard]] const std::map<std::string, std::size_t, std::less<>>& census() const noexcept { return census_; }

    /// Op names of the differentiable nodes in recording order.
    [[nodiscard]] std::vector<std::string> recorded_ops() const {
        std::vector<std::string> out;
        out.reserve(nodes_.size());
        for (const auto& n : nodes_) out.push_back(n.op);
        return out;
    }

private:
    struct Node {
        std::string op;
        std::shared_ptr<typename Tensor<T>::Impl> output;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
    std::map<std::string, std::size_t, std::less<>> census_;
    std::vector<std::string> scopes_;
    bool consumed_ = false;
    Tape* previous_;

    inline static thread_local Tape* active_ = nullptr;
};

/// Runs backward on the calling thread's active tape.
template <typename T>
void backward(Tensor<T>& loss) {
    auto* tape = Tape<T>::current();
    if (tape == nullptr) throw ContractError("backward() without an active tape");
    tape->backward(loss);
}

template <typename T>
[[nodiscard]] bool all_finite(std::span<const T> values) {
    return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

}  // namespace cen

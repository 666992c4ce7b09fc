#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "moeroute/error.hpp"
#include "moeroute/rng.hpp"

namespace moeroute {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::uint64_t id = 0;
};

inline std::uint64_t next_tensor_id() {
    thread_local std::uint64_t counter = 0;
    return ++counter;
}

}  // namespace detail

/// Dense row-major f64 tensor of rank 0, 1 or 2.
///
/// A Tensor is a handle: copies share storage, so the tape can accumulate
/// gradients into the same buffer a caller holds. Use clone() for a deep copy.
class Tensor {
public:
    Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

    Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<detail::TensorImpl>()) {
        if (shape.size() > 2) throw DimensionError("rank > 2 not supported: " + shape_str(shape));
        if (shape_numel(shape) != data.size()) {
            throw DimensionError("shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                                 " values, got " + std::to_string(data.size()));
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->id = detail::next_tensor_id();
    }

    static Tensor zeros(Shape shape) {
        const auto n = shape_numel(shape);
        return {std::move(shape), std::vector<double>(n, 0.0)};
    }
    static Tensor full(Shape shape, double v) {
        const auto n = shape_numel(shape);
        return {std::move(shape), std::vector<double>(n, v)};
    }
    static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
    static Tensor scalar(double v) { return {Shape{}, {v}}; }
    static Tensor vector(std::vector<double> v) {
        const auto n = v.size();
        return {Shape{n}, std::move(v)};
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return {Shape{rows, cols}, std::move(v)};
    }
    static Tensor identity(std::size_t n) {
        auto t = zeros({n, n});
        for (std::size_t i = 0; i < n; ++i) t.impl_->data[i * n + i] = 1.0;
        return t;
    }
    static Tensor randn(Shape shape, SeededRng& rng, double stddev = 1.0) {
        const auto n = shape_numel(shape);
        std::vector<double> v(n);
        for (auto& x : v) x = rng.normal(0.0, stddev);
        return {std::move(shape), std::move(v)};
    }
    static Tensor uniform(Shape shape, SeededRng& rng, double lo, double hi) {
        const auto n = shape_numel(shape);
        std::vector<double> v(n);
        for (auto& x : v) x = rng.uniform(lo, hi);
        return {std::move(shape), std::move(v)};
    }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }
    /// Rank-1 tensors read as a single row.
    std::size_t rows() const { return rank() == 2 ? impl_->shape[0] : 1; }
    std::size_t cols() const {
        if (rank() == 2) return impl_->shape[1];
        return rank() == 1 ? impl_->shape[0] : 1;
    }

    std::span<const double> data() const { return impl_->data; }
    /// Direct write access, for parameter updates and kernels that build outputs in place.
    std::span<double> mutable_data() { return impl_->data; }
    const std::vector<double>& values() const { return impl_->data; }

    double operator[](std::size_t i) const { return impl_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }
    double item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    const Tensor& set_requires_grad(bool on) const {
        impl_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    std::span<double> mutable_grad() const {
        ensure_grad();
        return impl_->grad;
    }
    void zero_grad() const { impl_->grad.clear(); }
    Tensor grad_tensor() const {
        if (!has_grad()) return zeros(shape());
        return {shape(), impl_->grad};
    }

    void accumulate_grad(std::span<const double> g) const {
        ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) impl_->grad[i] += g[i];
    }

    Tensor clone() const { return {shape(), impl_->data}; }
    Tensor reshape(Shape s) const {
        if (shape_numel(s) != numel()) throw DimensionError("cannot reshape " + shape_str(shape()) + " to " + shape_str(s));
        return {std::move(s), impl_->data};
    }

    std::uint64_t id() const { return impl_->id; }
    bool same(const Tensor& o) const { return impl_ == o.impl_; }

    bool all_finite() const {
        return std::all_of(impl_->data.begin(), impl_->data.end(), [](double v) { return std::isfinite(v); });
    }

private:
    void ensure_grad() const {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    }

    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of differentiable ops executed while a recording is active.
///
/// One tape per training step. Ops are appended as they run, so the record is
/// topological by construction; backward() walks it in exact reverse order.
class Tape {
public:
    struct Entry {
        std::vector<Tensor> inputs;
        Tensor output;
        std::function<void()> backward;
    };

    /// RAII guard that makes this tape the thread's active recorder.
    class Recording {
    public:
        explicit Recording(Tape& tape) : previous_(active_slot()) { active_slot() = &tape; }
        ~Recording() { active_slot() = previous_; }
        Recording(const Recording&) = delete;
        Recording& operator=(const Recording&) = delete;

    private:
        Tape* previous_;
    };

    /// Suspends recording inside a recording scope.
    class Pause {
    public:
        Pause() : previous_(active_slot()) { active_slot() = nullptr; }
        ~Pause() { active_slot() = previous_; }
        Pause(const Pause&) = delete;
        Pause& operator=(const Pause&) = delete;

    private:
        Tape* previous_;
    };

    Recording record() { return Recording(*this); }

    static Tape* active() { return active_slot(); }

    void push(std::vector<Tensor> inputs, Tensor output, std::function<void()> backward) {
        entries_.push_back({std::move(inputs), std::move(output), std::move(backward)});
    }

    std::size_t size() const { return entries_.size(); }
    const std::vector<Entry>& entries() const { return entries_; }
    void clear() { entries_.clear(); }

    bool contains(const Tensor& t) const {
        return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.output.same(t); });
    }

    /// Seeds d(loss)/d(loss) = 1 and propagates to every requires_grad tensor.
    /// Gradients accumulate into existing buffers.
    void backward(Tensor loss) {
        if (loss.numel() != 1) throw ContractError("backward needs a scalar loss, got " + shape_str(loss.shape()));
        if (!contains(loss)) throw ContractError("loss tensor was not produced on this tape");
        loss.accumulate_grad(std::vector<double>{1.0});
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            if (it->output.has_grad()) it->backward();
        }
    }

private:
    static Tape*& active_slot() {
        thread_local Tape* slot = nullptr;
        return slot;
    }

    std::vector<Entry> entries_;
};

}  // namespace moeroute

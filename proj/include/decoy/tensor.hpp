#pragma once

// Dense row-major tensors and the per-computation tape that records them.
//
// A Tensor is an immutable value: its shape and data are fixed when it is
// created and it may be shared freely between threads. Gradients never live
// on the tensor itself; they are owned by the Tape that recorded the
// computation, so several tapes can differentiate through the same
// (read-only) parameters concurrently.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace decoy {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Incompatible operand shapes. The message names every offending shape.
struct ShapeError : Error {
    using Error::Error;
};

/// Bad user-supplied configuration (maps to CLI exit code 2).
struct ConfigError : Error {
    using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

template <class T>
class Tape;

template <class T>
class Tensor {
public:
    using value_type = T;

    struct Node {
        Shape shape;
        std::vector<T> data;
        bool requires_grad = false;
    };

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (std::any_of(shape.begin(), shape.end(), [](std::size_t d) { return d == 0; }))
            throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
        if (numel_of(shape) != data.size())
            throw ShapeError("shape " + to_string(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
        node_ = std::make_shared<Node>(Node{std::move(shape), std::move(data), requires_grad});
    }

    static Tensor zeros(Shape shape) {
        auto n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)));
    }
    static Tensor full(Shape shape, T value) {
        auto n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value));
    }
    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->data.size(); }
    std::span<const T> data() const& { return node_->data; }
    // A span into a temporary would dangle once the full expression ends.
    std::span<const T> data() const&& = delete;
    const T* ptr() const { return node_->data.data(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape()));
        return node_->data[0];
    }
    T operator[](std::size_t i) const { return node_->data[i]; }
    T at(std::size_t i, std::size_t j) const { return node_->data[i * node_->shape.back() + j]; }

    /// Same values, marked as a differentiable leaf.
    Tensor with_grad() const { return Tensor(shape(), node_->data, true); }
    /// Same values, cut from any tape.
    Tensor detach() const { return Tensor(shape(), node_->data, false); }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> out(node_->data.begin(), node_->data.end());
        return Tensor<U>(shape(), std::move(out), requires_grad());
    }

    const Node* id() const { return node_.get(); }
    std::shared_ptr<const Node> node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

template <class T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) return false;
    auto da = a.data(), db = b.data();
    return std::equal(da.begin(), da.end(), db.begin(), [](T x, T y) {
        return std::memcmp(&x, &y, sizeof(T)) == 0;
    });
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("max_abs_diff: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    T m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

namespace detail {
template <class T>
Tape<T>*& active_tape() {
    thread_local Tape<T>* tape = nullptr;
    return tape;
}
}  // namespace detail

/// Ordered record of primitive operations for one computation.
///
/// Operations are recorded while a Recording guard for this tape is alive on
/// the current thread and at least one operand requires a gradient. A tape
/// supports exactly one backward sweep.
template <class T>
class Tape {
public:
    /// Backward kernel: reads the output gradient and accumulates into the
    /// input gradients. An input pointer is null when that input needs none.
    using Kernel = std::function<void(const T* grad_out, T* const* grad_in)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return entries_.size(); }
    bool consumed() const { return consumed_; }

    void record(const Tensor<T>& out, std::initializer_list<Tensor<T>> inputs, Kernel kernel) {
        record(out, std::vector<Tensor<T>>(inputs), std::move(kernel));
    }

    void record(const Tensor<T>& out, const std::vector<Tensor<T>>& inputs, Kernel kernel) {
        if (consumed_) throw Error("tape already swept; record a new computation on a fresh tape");
        Entry e;
        e.kernel = std::move(kernel);
        e.in_slots.reserve(inputs.size());
        for (const auto& in : inputs)
            e.in_slots.push_back(in.requires_grad() ? slot_for(in) : -1);
        e.out_slot = slot_for(out);
        entries_.push_back(std::move(e));
    }

    /// Populates gradients of every recorded tensor with respect to `output`.
    void backward(const Tensor<T>& output) {
        if (output.numel() != 1)
            throw ShapeError("backward needs a scalar output, got " + to_string(output.shape()));
        if (consumed_) throw Error("backward already run on this tape");
        auto it = slots_.find(output.id());
        if (it == slots_.end()) throw Error("output was not recorded on this tape");
        consumed_ = true;

        grads_.resize(sizes_.size());
        for (std::size_t s = 0; s < sizes_.size(); ++s) grads_[s].assign(sizes_[s], T(0));
        grads_[it->second][0] = T(1);

        std::vector<T*> in_ptrs;
        for (auto e = entries_.rbegin(); e != entries_.rend(); ++e) {
            in_ptrs.assign(e->in_slots.size(), nullptr);
            for (std::size_t k = 0; k < e->in_slots.size(); ++k)
                if (e->in_slots[k] >= 0) in_ptrs[k] = grads_[e->in_slots[k]].data();
            e->kernel(grads_[e->out_slot].data(), in_ptrs.data());
        }
    }

    /// d(output)/d(x); zeros when x is unreachable from the swept output.
    Tensor<T> grad(const Tensor<T>& x) const {
        auto it = slots_.find(x.id());
        if (!consumed_ || it == slots_.end()) return Tensor<T>::zeros(x.shape());
        return Tensor<T>(x.shape(), grads_[it->second]);
    }

private:
    struct Entry {
        std::vector<int> in_slots;
        int out_slot = -1;
        Kernel kernel;
    };

    int slot_for(const Tensor<T>& t) {
        auto [it, inserted] = slots_.try_emplace(t.id(), static_cast<int>(sizes_.size()));
        if (inserted) {
            sizes_.push_back(t.numel());
            alive_.push_back(t.node());  // pins the address used as key
        }
        return it->second;
    }

    std::vector<Entry> entries_;
    std::unordered_map<const void*, int> slots_;
    std::vector<std::size_t> sizes_;
    std::vector<std::shared_ptr<const typename Tensor<T>::Node>> alive_;
    std::vector<std::vector<T>> grads_;
    bool consumed_ = false;
};

/// Routes operations on the current thread into `tape` for its lifetime.
template <class T>
class Recording {
public:
    explicit Recording(Tape<T>& tape) : previous_(detail::active_tape<T>()) {
        detail::active_tape<T>() = &tape;
    }
    ~Recording() { detail::active_tape<T>() = previous_; }
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

private:
    Tape<T>* previous_;
};

/// Suspends recording on the current thread (e.g. for target evaluation).
template <class T>
class NoGrad {
public:
    NoGrad() : previous_(detail::active_tape<T>()) { detail::active_tape<T>() = nullptr; }
    ~NoGrad() { detail::active_tape<T>() = previous_; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

private:
    Tape<T>* previous_;
};

using Tensorf = Tensor<float>;
using Taped = Tape<double>;
using Tapef = Tape<float>;

}  // namespace decoy

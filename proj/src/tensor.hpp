#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "errors.hpp"

namespace drnet {

// Vector allocator that leaves trivial elements default-initialized, so
// buffers that a kernel fully overwrites never pay for a memset.
template <typename T, typename Base = std::allocator<T>>
struct DefaultInitAllocator : Base {
    template <typename U>
    struct rebind {
        using other = DefaultInitAllocator<U, typename std::allocator_traits<
                                                  Base>::template rebind_alloc<U>>;
    };
    using Base::Base;
    template <typename U>
    void construct(U* ptr) noexcept(std::is_nothrow_default_constructible_v<U>) {
        ::new (static_cast<void*>(ptr)) U;
    }
    template <typename U, typename... Args>
    void construct(U* ptr, Args&&... args) {
        std::allocator_traits<Base>::construct(static_cast<Base&>(*this), ptr,
                                               std::forward<Args>(args)...);
    }
};

// Dense n-dimensional array with an optional same-shape gradient
// accumulator. Copying a Tensor copies the handle, not the buffer; ops
// return fresh storage. Image tensors are laid out NCHW, contiguous,
// row-major.
template <typename S>
class Tensor {
public:
    using Buffer = std::vector<S, DefaultInitAllocator<S>>;

    Tensor() = default;

    explicit Tensor(std::vector<int> shape, S fill = S(0)) {
        st_ = std::make_shared<Storage>();
        st_->shape = std::move(shape);
        st_->value.assign(count(st_->shape), fill);
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, S v) { return Tensor(std::move(shape), v); }

    static Tensor scalar(S v) { return Tensor({1}, v); }

    // Uninitialized contents; for kernels that overwrite every element.
    static Tensor raw(std::vector<int> shape) {
        Tensor t;
        t.st_ = std::make_shared<Storage>();
        t.st_->shape = std::move(shape);
        t.st_->value.resize(static_cast<std::size_t>(count(t.st_->shape)));
        return t;
    }

    template <typename Vec>
    static Tensor from(std::vector<int> shape, const Vec& values) {
        Tensor t = raw(std::move(shape));
        if (t.size() != static_cast<std::int64_t>(values.size()))
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape product " + std::to_string(t.size()));
        std::copy(values.begin(), values.end(), t.st_->value.begin());
        return t;
    }

    static Tensor from(std::vector<int> shape, std::initializer_list<S> values) {
        return from(std::move(shape), std::vector<S>(values));
    }

    bool valid() const { return st_ != nullptr; }
    const std::vector<int>& shape() const { return st_->shape; }
    int ndim() const { return static_cast<int>(st_->shape.size()); }
    int dim(int i) const { return st_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return static_cast<std::int64_t>(st_->value.size()); }

    S* data() { return st_->value.data(); }
    const S* data() const { return st_->value.data(); }
    Buffer& values() { return st_->value; }
    const Buffer& values() const { return st_->value; }

    S item() const {
        if (size() != 1) throw ShapeError("item() on non-scalar tensor");
        return st_->value[0];
    }

    bool requires_grad() const { return st_ && st_->requires_grad; }
    void set_requires_grad(bool v) { st_->requires_grad = v; }

    bool grad_allocated() const { return st_ && !st_->grad.empty(); }

    // Lazily allocates the accumulator (zero-filled on first use).
    Buffer& grad() {
        if (st_->grad.empty()) st_->grad.assign(st_->value.size(), S(0));
        return st_->grad;
    }
    const Buffer& grad() const { return st_->grad; }

    void zero_grad() {
        if (!st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), S(0));
    }

    bool same_storage(const Tensor& o) const { return st_ == o.st_; }
    const void* storage_id() const { return st_.get(); }

    static std::int64_t count(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw ShapeError("negative extent in shape");
            n *= d;
        }
        return n;
    }

private:
    struct Storage {
        std::vector<int> shape;
        Buffer value;
        Buffer grad;  // empty until touched by backward
        bool requires_grad = false;
    };
    std::shared_ptr<Storage> st_;
};

// A named trainable tensor. Gradients accumulate across backward calls
// until zero_grad is invoked explicitly.
template <typename S>
struct Parameter {
    std::string name;
    Tensor<S> tensor;
    bool trainable = true;
};

// Reverse-mode tape: ops append closures in execution order; backward
// replays them once, in reverse. One tape serves one forward pass and is
// consumed by one backward.
template <typename S>
class Tape {
public:
    void record(std::function<void()> backward_fn, const void* output_storage) {
        records_.push_back(std::move(backward_fn));
        outputs_.insert(output_storage);
    }

    bool produced(const Tensor<S>& t) const { return outputs_.count(t.storage_id()) > 0; }

    std::size_t size() const { return records_.size(); }
    bool consumed() const { return consumed_; }

    void backward(Tensor<S> seed) {
        if (consumed_) throw Error("stale tape: backward already consumed this tape");
        if (seed.size() != 1) throw ShapeError("backward seed must be a scalar");
        if (!produced(seed)) throw Error("backward seed was not produced by this tape");
        consumed_ = true;
        seed.grad()[0] = S(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> records_;
    std::unordered_set<const void*> outputs_;
    bool consumed_ = false;
};

}  // namespace drnet

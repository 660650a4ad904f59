#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "hiflow/errors.hpp"

namespace hiflow {

// Dense row-major tensor with optional gradient storage, plus the recording
// tape for reverse-mode differentiation. Rank is arbitrary but everything the
// two networks need is rank 1 or 2; ops that require a matrix say so.
//
// A Tensor is a shared handle: copies alias the same storage. Values are
// written only at construction time or through recorded ops, so a recorded
// graph stays valid until the tape is cleared.

template <typename T>
struct TensorData {
    std::vector<int64_t> shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated iff requires_grad, same length as value
    bool requires_grad = false;
};

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

template <typename T>
class Tensor {
public:
    using Scalar = T;

    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false) {
        Tensor t;
        t.d_ = std::make_shared<TensorData<T>>();
        t.d_->shape = std::move(shape);
        const int64_t n = numel_of(t.d_->shape);
        t.d_->value.assign(static_cast<size_t>(n), T(0));
        t.d_->requires_grad = requires_grad;
        if (requires_grad) t.d_->grad.assign(static_cast<size_t>(n), T(0));
        return t;
    }

    static Tensor from(std::vector<int64_t> shape, std::vector<T> vals, bool requires_grad = false) {
        if (numel_of(shape) != static_cast<int64_t>(vals.size()))
            throw DimensionError("tensor init: shape " + shape_str(shape) + " does not match " +
                                 std::to_string(vals.size()) + " values");
        Tensor t = zeros(std::move(shape), requires_grad);
        t.d_->value = std::move(vals);
        return t;
    }

    static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

    bool defined() const { return static_cast<bool>(d_); }
    const std::vector<int64_t>& shape() const { return d_->shape; }
    int64_t rank() const { return static_cast<int64_t>(d_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(d_->value.size()); }
    bool requires_grad() const { return d_->requires_grad; }

    // matrix view: rank-1 tensors count as a single row
    int64_t rows() const { return rank() >= 2 ? d_->shape[0] : 1; }
    int64_t cols() const {
        if (rank() == 0) return 0;
        return rank() >= 2 ? numel() / d_->shape[0] : d_->shape[0];
    }

    T* data() { return d_->value.data(); }
    const T* data() const { return d_->value.data(); }
    T* grad() { return d_->grad.data(); }
    const T* grad() const { return d_->grad.data(); }

    T& at(int64_t r, int64_t c) { return d_->value[static_cast<size_t>(r * cols() + c)]; }
    T at(int64_t r, int64_t c) const { return d_->value[static_cast<size_t>(r * cols() + c)]; }
    T& operator[](int64_t i) { return d_->value[static_cast<size_t>(i)]; }
    T operator[](int64_t i) const { return d_->value[static_cast<size_t>(i)]; }

    const std::vector<T>& values() const { return d_->value; }
    std::vector<T>& values() { return d_->value; }
    const std::vector<T>& grads() const { return d_->grad; }

    void set_requires_grad(bool rg) {
        d_->requires_grad = rg;
        if (rg && d_->grad.size() != d_->value.size()) d_->grad.assign(d_->value.size(), T(0));
    }

    void zero_grad() {
        if (d_->requires_grad) std::fill(d_->grad.begin(), d_->grad.end(), T(0));
    }

    // deep copy; gradient buffer is reset, not copied
    Tensor clone() const {
        Tensor t = zeros(d_->shape, d_->requires_grad);
        t.d_->value = d_->value;
        return t;
    }

    bool same_storage(const Tensor& other) const { return d_ == other.d_; }

    static int64_t numel_of(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) {
            if (d <= 0) throw DimensionError("tensor shape has non-positive dim " + shape_str(shape));
            n *= d;
        }
        return n;
    }

private:
    std::shared_ptr<TensorData<T>> d_;
};

// Recording tape. Ops push one node per recorded operation; backward() replays
// nodes in reverse push order, which is a reverse topological order because an
// op's inputs always exist before the op runs. Each node is visited exactly
// once per backward pass.
template <typename T>
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    void set_recording(bool r) { recording_ = r; }

    void record(std::function<void()> backward_fn) {
        if (recording_) nodes_.push_back(std::move(backward_fn));
    }

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and propagates. `loss` must be a scalar that
    // requires grad; a loss that does not depend on any tracked tensor is a
    // wiring error.
    void backward(Tensor<T>& loss) {
        if (loss.numel() != 1)
            throw DimensionError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        if (!loss.requires_grad())
            throw ConfigError("backward: loss does not require grad (no parameters reached it)");
        loss.grad()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    bool recording_ = true;
    std::vector<std::function<void()>> nodes_;
};

}  // namespace hiflow

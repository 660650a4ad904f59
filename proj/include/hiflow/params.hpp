#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "hiflow/errors.hpp"
#include "hiflow/rng.hpp"
#include "hiflow/tensor.hpp"

namespace hiflow {

// Registry of named trainable tensors. Registration order is fixed by module
// construction order, which makes initialization, checkpoint layout, and
// optimizer state deterministic for a given config.

template <typename T>
class ParamStore {
public:
    explicit ParamStore(uint64_t init_seed = 0) : rng_(Rng::from_stream(init_seed, /*tag=*/0x9a7a)) {}

    Tensor<T> add(const std::string& name, std::vector<int64_t> shape, double init_std) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        Tensor<T> t = Tensor<T>::zeros(std::move(shape), /*requires_grad=*/true);
        if (init_std > 0.0) rng_.fill_normal(t.data(), static_cast<size_t>(t.numel()), init_std);
        index_[name] = names_.size();
        names_.push_back(name);
        tensors_.push_back(t);
        return t;
    }

    Tensor<T> add_zeros(const std::string& name, std::vector<int64_t> shape) {
        return add(name, std::move(shape), 0.0);
    }

    size_t size() const { return tensors_.size(); }
    const std::string& name(size_t i) const { return names_[i]; }
    Tensor<T>& tensor(size_t i) { return tensors_[i]; }
    const Tensor<T>& tensor(size_t i) const { return tensors_[i]; }

    Tensor<T>& by_name(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return tensors_[it->second];
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    int64_t total_count() const {
        int64_t n = 0;
        for (const auto& t : tensors_) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& t : tensors_) t.zero_grad();
    }

    std::vector<Tensor<T>>& tensors() { return tensors_; }
    const std::vector<Tensor<T>>& tensors() const { return tensors_; }

    // overwrite every parameter with fresh noise; test helper for probing
    // gradients away from structured init points (zero gates etc.)
    void randomize(Rng& rng, double std_dev) {
        for (auto& t : tensors_) rng.fill_normal(t.data(), static_cast<size_t>(t.numel()), std_dev);
    }

private:
    Rng rng_;
    std::vector<std::string> names_;
    std::vector<Tensor<T>> tensors_;
    std::unordered_map<std::string, size_t> index_;
};

}  // namespace hiflow

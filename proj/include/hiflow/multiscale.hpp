#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hiflow/errors.hpp"
#include "hiflow/ops.hpp"
#include "hiflow/tensor.hpp"

namespace hiflow {

// Parameter-free multi-scale machinery: Down averages T timesteps into i equal
// groups; Up linearly resamples back. Both are plain linear maps recorded on
// the tape, though under teacher forcing nothing differentiable ever flows
// through them.

struct ScaleSchedule {
    std::vector<int64_t> scales;  // strictly increasing, each divides T, last == T
    int64_t chunk_len = 0;        // T

    static ScaleSchedule make(std::vector<int64_t> scales, int64_t chunk_len) {
        if (scales.empty()) throw ConfigError("scale schedule: empty");
        if (chunk_len <= 0) throw ConfigError("scale schedule: chunk length must be positive");
        if (scales.back() != chunk_len)
            throw ConfigError("scale schedule: last scale " + std::to_string(scales.back()) +
                              " must equal chunk length " + std::to_string(chunk_len));
        for (size_t i = 0; i < scales.size(); ++i) {
            if (scales[i] <= 0) throw ConfigError("scale schedule: scales must be positive");
            if (i > 0 && scales[i] <= scales[i - 1])
                throw ConfigError("scale schedule: scales must be strictly increasing");
            if (chunk_len % scales[i] != 0)
                throw ConfigError("scale schedule: scale " + std::to_string(scales[i]) +
                                  " does not divide chunk length " + std::to_string(chunk_len));
        }
        return ScaleSchedule{std::move(scales), chunk_len};
    }

    size_t count() const { return scales.size(); }

    std::string str() const {
        std::string s = "{";
        for (size_t i = 0; i < scales.size(); ++i) s += (i ? "," : "") + std::to_string(scales[i]);
        return s + "}";
    }
};

// row g of the output is the mean of chunk rows [g*T/i, (g+1)*T/i)
template <typename T>
Tensor<T> down(Tape<T>& g, const Tensor<T>& chunk, int64_t scale) {
    require_matrix(chunk, "down");
    const int64_t t = chunk.rows(), a = chunk.cols();
    if (scale <= 0 || t % scale != 0)
        throw ConfigError("down: scale " + std::to_string(scale) + " does not divide chunk length " +
                          std::to_string(t));
    const int64_t group = t / scale;
    if (group == 1) return chunk.clone_on_tape(g);
    Tensor<T> out = Tensor<T>::zeros({scale, a});
    const T inv = T(1) / static_cast<T>(group);
    for (int64_t r = 0; r < scale; ++r) {
        T* orow = out.data() + r * a;
        for (int64_t s = 0; s < group; ++s) {
            const T* crow = chunk.data() + (r * group + s) * a;
            for (int64_t j = 0; j < a; ++j) orow[j] += crow[j];
        }
        for (int64_t j = 0; j < a; ++j) orow[j] *= inv;
    }
    if (track(g, chunk.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> cc = chunk, oc = out;
        g.record([cc, oc, scale, group, a, inv]() mutable {
            for (int64_t r = 0; r < scale; ++r) {
                const T* go = oc.grad() + r * a;
                for (int64_t s = 0; s < group; ++s) {
                    T* gc = cc.grad() + (r * group + s) * a;
                    for (int64_t j = 0; j < a; ++j) gc[j] += go[j] * inv;
                }
            }
        });
    }
    return out;
}

// Interpolation weights for Up: input row g is a sample at the center of its
// group, (g + 0.5) / in_len on the unit interval; output positions likewise.
// Endpoints clamp. in_len == out_len is the identity by construction.
inline void up_weights(int64_t in_len, int64_t out_len, int64_t t,
                       int64_t* lo, int64_t* hi, double* frac) {
    const double pos = (static_cast<double>(t) + 0.5) / static_cast<double>(out_len);
    const double src = pos * static_cast<double>(in_len) - 0.5;
    if (src <= 0.0) {
        *lo = *hi = 0;
        *frac = 0.0;
    } else if (src >= static_cast<double>(in_len - 1)) {
        *lo = *hi = in_len - 1;
        *frac = 0.0;
    } else {
        *lo = static_cast<int64_t>(src);
        *hi = *lo + 1;
        *frac = src - static_cast<double>(*lo);
    }
}

// linear upsampling along the temporal axis to target_len rows
template <typename T>
Tensor<T> up(Tape<T>& g, const Tensor<T>& coarse, int64_t target_len) {
    require_matrix(coarse, "up");
    const int64_t i = coarse.rows(), a = coarse.cols();
    if (target_len < i)
        throw ConfigError("up: target length " + std::to_string(target_len) + " below input length " +
                          std::to_string(i));
    if (target_len == i) return coarse.clone_on_tape(g);
    Tensor<T> out = Tensor<T>::zeros({target_len, a});
    std::vector<int64_t> lo(static_cast<size_t>(target_len)), hi(static_cast<size_t>(target_len));
    std::vector<double> frac(static_cast<size_t>(target_len));
    for (int64_t t = 0; t < target_len; ++t)
        up_weights(i, target_len, t, &lo[static_cast<size_t>(t)], &hi[static_cast<size_t>(t)],
                   &frac[static_cast<size_t>(t)]);
    for (int64_t t = 0; t < target_len; ++t) {
        const T f = static_cast<T>(frac[static_cast<size_t>(t)]);
        const T* rlo = coarse.data() + lo[static_cast<size_t>(t)] * a;
        const T* rhi = coarse.data() + hi[static_cast<size_t>(t)] * a;
        T* orow = out.data() + t * a;
        for (int64_t j = 0; j < a; ++j) orow[j] = (T(1) - f) * rlo[j] + f * rhi[j];
    }
    if (track(g, coarse.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> cc = coarse, oc = out;
        g.record([cc, oc, lo, hi, frac, target_len, a]() mutable {
            for (int64_t t = 0; t < target_len; ++t) {
                const T f = static_cast<T>(frac[static_cast<size_t>(t)]);
                const T* go = oc.grad() + t * a;
                T* glo = cc.grad() + lo[static_cast<size_t>(t)] * a;
                T* ghi = cc.grad() + hi[static_cast<size_t>(t)] * a;
                for (int64_t j = 0; j < a; ++j) {
                    glo[j] += (T(1) - f) * go[j];
                    ghi[j] += f * go[j];
                }
            }
        });
    }
    return out;
}

template <typename T>
struct MultiScaleTargets {
    std::map<int64_t, Tensor<T>> per_scale;  // scale -> [scale x A]
};

template <typename T>
MultiScaleTargets<T> build_targets(Tape<T>& g, const Tensor<T>& chunk, const ScaleSchedule& schedule) {
    require_matrix(chunk, "build_targets");
    if (chunk.rows() != schedule.chunk_len)
        throw ConfigError("build_targets: chunk has " + std::to_string(chunk.rows()) + " rows, schedule expects " +
                          std::to_string(schedule.chunk_len));
    MultiScaleTargets<T> out;
    for (int64_t s : schedule.scales) out.per_scale[s] = down(g, chunk, s);
    return out;
}

}  // namespace hiflow

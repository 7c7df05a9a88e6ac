#pragma once

#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "spd/errors.hpp"
#include "spd/rng.hpp"

namespace spd {

// Dense row-major tensor. The scalar type is the training/verification
// precision switch: float for training arithmetic, double for gradient
// checking.
template <class S>
struct Tensor {
    std::vector<size_t> shape;
    std::vector<S> data;
    bool requires_grad = false;
    std::vector<S> grad;  // empty until populated; same length as data otherwise

    Tensor() = default;
    Tensor(std::vector<size_t> shp, std::vector<S> dat, bool rg = false)
        : shape(std::move(shp)), data(std::move(dat)), requires_grad(rg) {
        if (numel_of(shape) != data.size()) throw ShapeError("tensor data length does not match shape");
    }

    static size_t numel_of(const std::vector<size_t>& shp) {
        size_t n = 1;
        for (size_t d : shp) n *= d;
        return n;
    }

    size_t numel() const { return data.size(); }
    bool is_scalar() const { return data.size() == 1; }
    bool is_matrix() const { return shape.size() == 2; }
    size_t rows() const {
        if (shape.size() != 2) throw ShapeError("rows() on non-matrix tensor");
        return shape[0];
    }
    size_t cols() const {
        if (shape.size() != 2) throw ShapeError("cols() on non-matrix tensor");
        return shape[1];
    }

    S& at(size_t i, size_t j) { return data[i * cols() + j]; }
    const S& at(size_t i, size_t j) const { return data[i * cols() + j]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }
    void zero_grad() { grad.assign(data.size(), S(0)); }
};

struct InitScheme {
    enum class Kind { xavier_uniform, constant, normal } kind = Kind::xavier_uniform;
    double c = 0.0;     // constant value
    double mean = 0.0;  // normal mean
    double std = 1.0;   // normal std

    static InitScheme xavier() { return {Kind::xavier_uniform, 0, 0, 1}; }
    static InitScheme constant(double v) { return {Kind::constant, v, 0, 1}; }
    static InitScheme normal(double mean, double std) { return {Kind::normal, 0, mean, std}; }
};

// Deterministic tensor construction. Xavier-uniform draws from U(-a, a) with
// a = sqrt(6 / (fan_in + fan_out)); for 1-D shapes fan_in = fan_out = length.
template <class S>
Tensor<S> init_tensor(const std::vector<size_t>& shape, const InitScheme& scheme, uint64_t seed) {
    if (shape.empty()) throw ShapeError("init_tensor: empty shape");
    for (size_t d : shape) {
        if (d == 0) throw ShapeError("init_tensor: zero or negative dimension");
    }
    const size_t n = Tensor<S>::numel_of(shape);
    std::vector<S> data(n);
    Rng rng(seed);
    switch (scheme.kind) {
        case InitScheme::Kind::constant:
            for (auto& x : data) x = static_cast<S>(scheme.c);
            break;
        case InitScheme::Kind::normal:
            for (auto& x : data) x = static_cast<S>(scheme.mean + scheme.std * rng.next_normal());
            break;
        case InitScheme::Kind::xavier_uniform: {
            size_t fan_in, fan_out;
            if (shape.size() == 1) {
                fan_in = fan_out = shape[0];
            } else {
                fan_out = shape[shape.size() - 2];
                fan_in = shape[shape.size() - 1];
            }
            const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
            for (auto& x : data) x = static_cast<S>((2.0 * rng.next_double() - 1.0) * a);
            break;
        }
    }
    return Tensor<S>(shape, std::move(data));
}

// Named parameter set. std::map keeps iteration in lexicographic name order,
// which the checkpoint format and Adam both rely on.
template <class S>
class ParamStore {
   public:
    explicit ParamStore(uint64_t rng_seed = 0) : rng_seed_(rng_seed) {}

    uint64_t rng_seed() const { return rng_seed_; }

    void add(const std::string& name, Tensor<S> t) {
        t.requires_grad = true;
        auto [it, inserted] = params_.emplace(name, std::move(t));
        if (!inserted) throw ConflictError("parameter already exists: " + name);
        (void)it;
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }

    Tensor<S>& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw MissingKeyError("no such parameter: " + name);
        return it->second;
    }
    const Tensor<S>& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw MissingKeyError("no such parameter: " + name);
        return it->second;
    }

    void remove(const std::string& name) { params_.erase(name); }

    void zero_grads() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    size_t total_numel() const {
        size_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    std::map<std::string, Tensor<S>>& items() { return params_; }
    const std::map<std::string, Tensor<S>>& items() const { return params_; }

   private:
    std::map<std::string, Tensor<S>> params_;
    uint64_t rng_seed_;
};

}  // namespace spd

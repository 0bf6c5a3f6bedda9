#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "vla/error.hpp"
#include "vla/rng.hpp"
#include "vla/tensor.hpp"

namespace vla {

// A named trainable (or frozen) buffer with persistent gradient storage.
struct Param {
    std::string name;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;      // same size, cleared by the optimizer
    bool frozen = false;           // frozen params never enter an optimizer
    bool grad_valid = false;       // set by Tape::backward, cleared by Adam::step
    std::size_t size() const { return value.size(); }
};

// Owns parameters with stable addresses and registry-level freeze enforcement.
class ParamStore {
public:
    Param& create(const std::string& name, Shape shape, std::vector<double> init);
    Param& create_normal(const std::string& name, Shape shape, Rng& rng, double stddev);
    Param& create_zeros(const std::string& name, Shape shape);
    Param& create_const(const std::string& name, Shape shape, double v);

    Param& at(const std::string& name);
    const Param& at(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    // Mark every parameter whose name starts with `prefix` as frozen.
    void freeze_prefix(const std::string& prefix);
    std::vector<Param*> with_prefix(const std::string& prefix);
    std::vector<Param*> all();
    std::vector<const Param*> all() const;
    std::size_t count() const { return params_.size(); }

private:
    std::deque<Param> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam. Deterministic given inputs; refuses frozen parameters
// at registration and parameters without fresh gradients at step time.
class Adam {
public:
    Adam(std::vector<Param*> params, AdamConfig cfg);

    void step();
    void zero_grad();

    std::uint64_t t() const { return t_; }
    const AdamConfig& config() const { return cfg_; }
    const std::vector<Param*>& params() const { return params_; }
    std::vector<double>& m(std::size_t i) { return m_[i]; }
    std::vector<double>& v(std::size_t i) { return v_[i]; }
    void set_t(std::uint64_t t) { t_ = t; }

private:
    std::vector<Param*> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::uint64_t t_ = 0;
    AdamConfig cfg_;
};

}  // namespace vla

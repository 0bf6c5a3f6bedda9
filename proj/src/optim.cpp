#include "vla/optim.hpp"

#include <cmath>

namespace vla {

Param& ParamStore::create(const std::string& name, Shape shape, std::vector<double> init) {
    if (index_.count(name)) throw ContractError("parameter already exists: " + name);
    if (shape_numel(shape) != init.size())
        throw ShapeError("param " + name + ": shape " + shape_str(shape) + " vs init length " +
                         std::to_string(init.size()));
    Param p;
    p.name = name;
    p.shape = std::move(shape);
    p.value = std::move(init);
    p.grad.assign(p.value.size(), 0.0);
    params_.push_back(std::move(p));
    index_.emplace(name, params_.size() - 1);
    return params_.back();
}

Param& ParamStore::create_normal(const std::string& name, Shape shape, Rng& rng, double stddev) {
    std::vector<double> init(shape_numel(shape));
    for (double& v : init) v = rng.normal() * stddev;
    return create(name, std::move(shape), std::move(init));
}

Param& ParamStore::create_zeros(const std::string& name, Shape shape) {
    std::vector<double> init(shape_numel(shape), 0.0);
    return create(name, std::move(shape), std::move(init));
}

Param& ParamStore::create_const(const std::string& name, Shape shape, double v) {
    std::vector<double> init(shape_numel(shape), v);
    return create(name, std::move(shape), std::move(init));
}

Param& ParamStore::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no such parameter: " + name);
    return params_[it->second];
}

const Param& ParamStore::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no such parameter: " + name);
    return params_[it->second];
}

void ParamStore::freeze_prefix(const std::string& prefix) {
    for (Param& p : params_)
        if (p.name.rfind(prefix, 0) == 0) p.frozen = true;
}

std::vector<Param*> ParamStore::with_prefix(const std::string& prefix) {
    std::vector<Param*> out;
    for (Param& p : params_)
        if (p.name.rfind(prefix, 0) == 0) out.push_back(&p);
    return out;
}

std::vector<Param*> ParamStore::all() {
    std::vector<Param*> out;
    out.reserve(params_.size());
    for (Param& p : params_) out.push_back(&p);
    return out;
}

std::vector<const Param*> ParamStore::all() const {
    std::vector<const Param*> out;
    out.reserve(params_.size());
    for (const Param& p : params_) out.push_back(&p);
    return out;
}

Adam::Adam(std::vector<Param*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Param* p : params_) {
        if (p == nullptr) throw ContractError("Adam: null parameter");
        if (p->frozen) throw ContractError("Adam: refusing frozen parameter " + p->name);
        m_.emplace_back(p->size(), 0.0);
        v_.emplace_back(p->size(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Param& p = *params_[i];
        if (!p.grad_valid)
            throw ContractError("Adam: missing gradient for parameter " + p.name);
        double* m = m_[i].data();
        double* v = v_[i].data();
        double* w = p.value.data();
        double* g = p.grad.data();
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
            double mhat = m[j] / bc1;
            double vhat = v[j] / bc2;
            w[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
    zero_grad();
}

void Adam::zero_grad() {
    for (Param* p : params_) {
        std::fill(p->grad.begin(), p->grad.end(), 0.0);
        p->grad_valid = false;
    }
}

}  // namespace vla

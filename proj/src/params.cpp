#include "dice/params.hpp"

#include "dice/error.hpp"

#include <stdexcept>

namespace dice {

std::size_t ParamSet::add(std::string name, Tensor init) {
    if (lookup_.contains(name))
        throw std::invalid_argument("duplicate parameter name: " + name);
    Parameter p;
    p.velocity = Tensor(init.rows(), init.cols());
    p.sq_avg = Tensor(init.rows(), init.cols());
    p.value = std::move(init);
    p.name = name;
    params_.push_back(std::move(p));
    lookup_.emplace(std::move(name), params_.size() - 1);
    return params_.size() - 1;
}

std::size_t ParamSet::index(std::string_view name) const {
    auto it = lookup_.find(std::string(name));
    if (it == lookup_.end())
        throw std::out_of_range("unknown parameter: " + std::string(name));
    return it->second;
}

void ParamSet::reset_state() {
    for (auto& p : params_) {
        p.velocity.mat().setZero();
        p.sq_avg.mat().setZero();
    }
}

bool ParamSet::values_bit_equal(const ParamSet& other) const {
    if (other.size() != size())
        return false;
    for (std::size_t i = 0; i < size(); ++i) {
        if (params_[i].name != other.params_[i].name || !bit_equal(params_[i].value, other.params_[i].value))
            return false;
    }
    return true;
}

Gradients::Gradients(const ParamSet& params) {
    grads_.reserve(params.size());
    for (const auto& p : params)
        grads_.emplace_back(p.value.rows(), p.value.cols());
}

void Gradients::add_scaled(const Gradients& other, double scale) {
    if (other.size() != size())
        throw ShapeError("gradient sets have different sizes");
    for (std::size_t i = 0; i < size(); ++i) {
        if (!grads_[i].same_shape(other[i]))
            throw ShapeError("gradient shape mismatch");
        grads_[i].mat() += scale * other[i].mat();
    }
}

} // namespace dice

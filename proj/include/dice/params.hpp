#pragma once

#include "dice/tensor.hpp"

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace dice {

struct Parameter {
    std::string name;
    Tensor value;
    Tensor velocity; // Nesterov momentum buffer
    Tensor sq_avg;   // RMSProp running mean of squared gradients
};

/// Named parameters in insertion order, each carrying its optimizer state.
class ParamSet {
public:
    std::size_t add(std::string name, Tensor init);

    std::size_t index(std::string_view name) const;
    bool contains(std::string_view name) const { return lookup_.contains(std::string(name)); }
    std::size_t size() const { return params_.size(); }

    Parameter& at(std::size_t i) { return params_.at(i); }
    const Parameter& at(std::size_t i) const { return params_.at(i); }
    Tensor& value(std::string_view name) { return params_[index(name)].value; }
    const Tensor& value(std::string_view name) const { return params_[index(name)].value; }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    /// Resets every optimizer buffer to zero.
    void reset_state();

    /// True when all values (not optimizer state) are bit-identical.
    bool values_bit_equal(const ParamSet& other) const;

private:
    std::vector<Parameter> params_;
    std::unordered_map<std::string, std::size_t> lookup_;
};

/// Per-parameter gradients aligned with the indices of one ParamSet.
/// Parameters that did not take part in a computation hold zeros.
class Gradients {
public:
    explicit Gradients(const ParamSet& params);

    std::size_t size() const { return grads_.size(); }
    Tensor& operator[](std::size_t i) { return grads_[i]; }
    const Tensor& operator[](std::size_t i) const { return grads_[i]; }
    const Tensor& of(const ParamSet& params, std::string_view name) const { return grads_[params.index(name)]; }

    /// Adds `scale * other` elementwise.
    void add_scaled(const Gradients& other, double scale);

private:
    std::vector<Tensor> grads_;
};

} // namespace dice

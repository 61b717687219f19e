#pragma once

// Reverse-mode automatic differentiation on dense double tensors.
//
// A Graph owns a tape of nodes appended in construction order, which is a
// valid topological order because an operation's inputs must exist before
// the operation itself. backward() sweeps the tape once in reverse.
// Parameters live outside graphs; Graph::use() binds a parameter's current
// value into the graph as a leaf whose backward pass accumulates into the
// parameter's persistent gradient buffer.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "coved/rng.hpp"

namespace coved {

class DimensionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily on the backward pass
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

using NodePtr = std::shared_ptr<TensorNode>;

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->data.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<const double> data() const { return node_->data; }
    double at(std::size_t i) const { return node_->data[i]; }

    // value of a single-element tensor
    double item() const {
        if (size() != 1)
            throw DimensionError("item() requires a scalar tensor, got " + shape_str(shape()));
        return node_->data[0];
    }

    // gradient accumulated by the last backward pass (empty span if none reached this node)
    std::span<const double> grad() const { return node_->grad; }

    const detail::NodePtr& node() const { return node_; }

private:
    friend class Graph;
    explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}
    detail::NodePtr node_;
};

// A named model parameter: persistent value plus gradient accumulator.
class Parameter {
public:
    Parameter(std::string name, Shape shape)
        : name_(std::move(name)), shape_(std::move(shape)) {
        for (std::size_t e : shape_)
            if (e == 0) throw DimensionError("parameter " + name_ + " has a zero extent");
        value.assign(shape_numel(shape_), 0.0);
        grad.assign(value.size(), 0.0);
    }

    const std::string& name() const { return name_; }
    const Shape& shape() const { return shape_; }
    std::size_t size() const { return value.size(); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

    std::vector<double> value;
    std::vector<double> grad;

private:
    std::string name_;
    Shape shape_;
};

using ParamPtr = std::shared_ptr<Parameter>;

// Registry of parameters keyed by hierarchical name (e.g. "encoder.token_gru.w_update").
// The map is ordered so every iteration over parameters is deterministic.
class ParameterStore {
public:
    ParamPtr create(const std::string& name, Shape shape) {
        if (params_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        auto p = std::make_shared<Parameter>(name, std::move(shape));
        params_[name] = p;
        return p;
    }

    ParamPtr create_uniform(const std::string& name, Shape shape, Rng& rng, double range = 0.08) {
        auto p = create(name, std::move(shape));
        for (double& v : p->value) v = rng.uniform(-range, range);
        return p;
    }

    ParamPtr get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }

    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    std::size_t size() const { return params_.size(); }

    const std::map<std::string, ParamPtr>& all() const { return params_; }

    std::vector<ParamPtr> list() const {
        std::vector<ParamPtr> out;
        out.reserve(params_.size());
        for (const auto& [_, p] : params_) out.push_back(p);
        return out;
    }

    void zero_grad() {
        for (auto& [_, p] : params_) p->zero_grad();
    }

private:
    std::map<std::string, ParamPtr> params_;
};

// FNV-1a over the raw bytes of the given parameters' values, in list order.
// Used to prove that a parameter set did not change across a training phase.
inline std::uint64_t hash_params(std::span<const ParamPtr> params) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : params) {
        for (double v : p->value) {
            unsigned char bytes[sizeof(double)];
            std::memcpy(bytes, &v, sizeof(double));
            for (unsigned char b : bytes) {
                h ^= b;
                h *= 0x100000001b3ull;
            }
        }
    }
    return h;
}

class Graph {
public:
    // constant leaf holding the given data
    Tensor input(Shape shape, std::vector<double> data) {
        check_shape_data(shape, data.size());
        return append(std::move(shape), std::move(data), {}, nullptr, false);
    }

    Tensor input(Shape shape, std::span<const double> data) {
        return input(std::move(shape), std::vector<double>(data.begin(), data.end()));
    }

    Tensor full(Shape shape, double v) {
        std::vector<double> data(shape_numel(shape), v);
        return append(std::move(shape), std::move(data), {}, nullptr, false);
    }

    Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

    // leaf bound to a parameter; when trainable, backward accumulates into p->grad
    Tensor use(const ParamPtr& p, bool trainable = true) {
        std::vector<double> data = p->value;
        if (!trainable) return append(p->shape(), std::move(data), {}, nullptr, false);
        ParamPtr captured = p;
        return append(
            p->shape(), std::move(data), {},
            [captured](detail::TensorNode& n) {
                for (std::size_t i = 0; i < n.grad.size(); ++i) captured->grad[i] += n.grad[i];
            },
            true);
    }

    // constant copy of a tensor's current values; gradients do not flow through
    Tensor detach(const Tensor& t) {
        return append(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), {},
                      nullptr, false);
    }

    // Registers an operation result. requires_grad is inherited from parents
    // unless forced by force_grad (used by parameter and embedding leaves).
    Tensor make_node(Shape shape, std::vector<double> data, std::vector<detail::NodePtr> parents,
                     std::function<void(detail::TensorNode&)> backward, bool force_grad = false) {
        check_shape_data(shape, data.size());
        bool rg = force_grad;
        for (const auto& p : parents)
            if (p->requires_grad) rg = true;
        if (!rg) return append(std::move(shape), std::move(data), {}, nullptr, false);
        return append(std::move(shape), std::move(data), std::move(parents), std::move(backward),
                      true);
    }

    // Reverse sweep over the tape from a scalar root. Each node is visited
    // exactly once; nodes the root does not depend on have no gradient buffer
    // and are skipped.
    void backward(const Tensor& root) {
        if (root.size() != 1)
            throw DimensionError("backward() requires a scalar root, got " +
                                 shape_str(root.shape()));
        root.node()->ensure_grad();
        root.node()->grad[0] += 1.0;
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
            detail::TensorNode& n = **it;
            if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
            n.backward(n);
        }
    }

    std::size_t size() const { return tape_.size(); }

    void clear() { tape_.clear(); }

private:
    static void check_shape_data(const Shape& shape, std::size_t n) {
        for (std::size_t e : shape)
            if (e == 0) throw DimensionError("zero extent in shape " + shape_str(shape));
        if (shape_numel(shape) != n)
            throw DimensionError("data length " + std::to_string(n) + " does not match shape " +
                                 shape_str(shape));
    }

    Tensor append(Shape shape, std::vector<double> data, std::vector<detail::NodePtr> parents,
                  std::function<void(detail::TensorNode&)> backward, bool rg) {
        auto n = std::make_shared<detail::TensorNode>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = rg;
        n->parents = std::move(parents);
        n->backward = std::move(backward);
        tape_.push_back(n);
        return Tensor(n);
    }

    std::vector<detail::NodePtr> tape_;
};

}  // namespace coved

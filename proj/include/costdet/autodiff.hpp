#pragma once

// Minimal reverse-mode automatic differentiation over dense float64 arrays.
//
// A Value is a handle to a node in a computation graph. Ops build new nodes
// that keep their parents alive; calling backward() on a scalar walks the
// graph once in reverse topological order. Graphs are single-threaded.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace costdet::ad {

using Shape = std::vector<std::size_t>;

/// Clamp applied to probabilities before taking logs.
inline constexpr double kProbEpsilon = 1e-7;

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into parents' grads.
    std::function<void(Node&)> backward_fn;
    bool requires_grad = false;
};

class Value {
public:
    Value() = default;

    static Value constant(Shape shape, std::vector<double> data);
    static Value scalar(double v) { return constant({}, {v}); }
    static Value parameter(Shape shape, std::vector<double> data);

    bool valid() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->data.size(); }
    std::size_t rows() const;
    std::size_t cols() const;
    bool requires_grad() const { return node_->requires_grad; }

    std::span<const double> data() const { return node_->data; }
    std::span<double> mutable_data() { return node_->data; }
    std::span<const double> grad() const { return node_->grad; }
    double item() const;
    double operator[](std::size_t i) const { return node_->data[i]; }

    void zero_grad();

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    explicit Value(std::shared_ptr<Node> node) : node_(std::move(node)) {}
    friend Value make_result(Shape, std::vector<double>, std::vector<Value>, std::function<void(Node&)>);

    std::shared_ptr<Node> node_;
};

// -- ops ---------------------------------------------------------------------

Value matmul(const Value& a, const Value& b);
/// x[m x n] + bias[n] broadcast over rows.
Value add_row_bias(const Value& x, const Value& bias);
Value add(const Value& a, const Value& b);
Value scale(const Value& a, double c);
Value sum(const Value& a);
Value mean(const Value& a);
Value tanh(const Value& x);
Value sigmoid(const Value& x);

/// Columns [begin, end) of a 2-D value.
Value columns(const Value& x, std::size_t begin, std::size_t end);
/// Rows of a 2-D value, in the given order.
Value select_rows(const Value& x, std::span<const std::size_t> rows);
/// Flat elements, as a 1-D value.
Value gather(const Value& x, std::span<const std::size_t> indices);

/// Sum over elements of -w_pos*t*log(p) - w_neg*(1-t)*log(1-p), with p
/// clamped to [kProbEpsilon, 1 - kProbEpsilon]. Targets may be soft.
Value weighted_bce(const Value& p, std::span<const double> targets, double w_pos, double w_neg);
Value weighted_bce(const Value& p, double target, double w_pos, double w_neg);

/// Sum over elements of the smooth-L1 penalty on (pred - target).
Value smooth_l1(const Value& pred, std::span<const double> target);

/// Maximum element; gradient goes to the first argmax only.
Value max_reduce(const Value& values);

/// Sums scalars left to right.
Value add_scalars(std::span<const Value> terms);

// -- graph traversal -----------------------------------------------------------

/// Back-propagates from a scalar loss. Grads of every node in the graph are
/// reset before accumulation.
void backward(const Value& loss);

/// Named collection of trainable leaves. Iteration order is by name.
class ParamStore {
public:
    ParamStore() = default;
    explicit ParamStore(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t seed() const { return seed_; }

    Value& add(const std::string& name, Shape shape, std::vector<double> init);
    const Value& get(const std::string& name) const;
    Value& get(const std::string& name);
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    const std::map<std::string, Value>& items() const { return params_; }
    std::size_t parameter_count() const;

    void zero_grad();
    /// In-place update theta -= lr * grad.
    void sgd_step(double lr);

    /// Deep copy (new leaves, same data).
    ParamStore clone() const;

private:
    std::uint64_t seed_ = 0;
    std::map<std::string, Value> params_;
};

/// Runs backward and returns d loss / d param for every parameter in the
/// store. Parameters not reachable from the loss get zero gradients.
std::map<std::string, std::vector<double>> backward(const Value& loss, ParamStore& params);

} // namespace costdet::ad

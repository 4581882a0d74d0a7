#include "costdet/autodiff.hpp"

#include "costdet/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

namespace costdet::ad {

namespace {

std::size_t element_count(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& s)
{
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        out += (i ? "x" : "") + std::to_string(s[i]);
    }
    return out + "]";
}

void require_2d(const Value& v, const char* op)
{
    if (v.shape().size() != 2) {
        throw DimensionError(std::string(op) + ": expected a 2-D value, got " + shape_str(v.shape()));
    }
}

double clamp_prob(double p) { return std::clamp(p, kProbEpsilon, 1.0 - kProbEpsilon); }

} // namespace

Value make_result(Shape shape, std::vector<double> data, std::vector<Value> inputs, std::function<void(Node&)> fn)
{
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->grad.assign(node->data.size(), 0.0);
    for (const auto& in : inputs) {
        if (in.requires_grad()) {
            node->requires_grad = true;
        }
    }
    if (node->requires_grad) {
        node->parents.reserve(inputs.size());
        for (auto& in : inputs) {
            node->parents.push_back(in.node());
        }
        node->backward_fn = std::move(fn);
    }
    return Value(std::move(node));
}

Value Value::constant(Shape shape, std::vector<double> data)
{
    if (element_count(shape) != data.size()) {
        throw DimensionError("constant: shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " elements");
    }
    return make_result(std::move(shape), std::move(data), {}, {});
}

Value Value::parameter(Shape shape, std::vector<double> data)
{
    Value v = constant(std::move(shape), std::move(data));
    v.node_->requires_grad = true;
    return v;
}

std::size_t Value::rows() const { return shape().size() == 2 ? shape()[0] : size(); }

std::size_t Value::cols() const { return shape().size() == 2 ? shape()[1] : 1; }

double Value::item() const
{
    if (size() != 1) {
        throw ContractError("item() on a value with " + std::to_string(size()) + " elements");
    }
    return node_->data[0];
}

void Value::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

Value matmul(const Value& a, const Value& b)
{
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " * " +
                             shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    const auto A = a.data();
    const auto B = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            if (av == 0.0) {
                continue;
            }
            const double* brow = &B[p * n];
            double* orow = &out[i * n];
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
    return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
        auto& na = *self.parents[0];
        auto& nb = *self.parents[1];
        const auto& g = self.grad;
        if (na.requires_grad) {
            // dA = G * B^T
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        acc += g[i * n + j] * nb.data[p * n + j];
                    }
                    na.grad[i * k + p] += acc;
                }
            }
        }
        if (nb.requires_grad) {
            // dB = A^T * G
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = na.data[i * k + p];
                    if (av == 0.0) {
                        continue;
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        nb.grad[p * n + j] += av * g[i * n + j];
                    }
                }
            }
        }
    });
}

Value add_row_bias(const Value& x, const Value& bias)
{
    require_2d(x, "add_row_bias");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    if (bias.size() != n) {
        throw DimensionError("add_row_bias: bias has " + std::to_string(bias.size()) + " elements, expected " +
                             std::to_string(n));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] += bias[j];
        }
    }
    return make_result({m, n}, std::move(out), {x, bias}, [m, n](Node& self) {
        auto& nx = *self.parents[0];
        auto& nb = *self.parents[1];
        if (nx.requires_grad) {
            for (std::size_t i = 0; i < m * n; ++i) {
                nx.grad[i] += self.grad[i];
            }
        }
        if (nb.requires_grad) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    nb.grad[j] += self.grad[i * n + j];
                }
            }
        }
    });
}

Value add(const Value& a, const Value& b)
{
    if (a.shape() != b.shape()) {
        throw DimensionError("add: shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] + b[i];
    }
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        for (auto& parent : self.parents) {
            if (parent->requires_grad) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    parent->grad[i] += self.grad[i];
                }
            }
        }
    });
}

Value scale(const Value& a, double c)
{
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& v : out) {
        v *= c;
    }
    return make_result(a.shape(), std::move(out), {a}, [c](Node& self) {
        auto& na = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            na.grad[i] += c * self.grad[i];
        }
    });
}

Value sum(const Value& a)
{
    double s = 0.0;
    for (double v : a.data()) {
        s += v;
    }
    return make_result({}, {s}, {a}, [](Node& self) {
        auto& na = *self.parents[0];
        for (auto& g : na.grad) {
            g += self.grad[0];
        }
    });
}

Value mean(const Value& a)
{
    if (a.size() == 0) {
        throw DimensionError("mean: empty input");
    }
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Value tanh(const Value& x)
{
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::tanh(x[i]);
    }
    return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
        auto& nx = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double t = self.data[i];
            nx.grad[i] += self.grad[i] * (1.0 - t * t);
        }
    });
}

Value sigmoid(const Value& x)
{
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x[i];
        // Split on sign so exp never overflows.
        if (v >= 0.0) {
            out[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
            const double e = std::exp(v);
            out[i] = e / (1.0 + e);
        }
    }
    return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
        auto& nx = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double s = self.data[i];
            nx.grad[i] += self.grad[i] * s * (1.0 - s);
        }
    });
}

Value columns(const Value& x, std::size_t begin, std::size_t end)
{
    require_2d(x, "columns");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    if (begin > end || end > n) {
        throw DimensionError("columns: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                             ") out of " + std::to_string(n));
    }
    const std::size_t w = end - begin;
    std::vector<double> out(m * w);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            out[i * w + j] = x[i * n + begin + j];
        }
    }
    return make_result({m, w}, std::move(out), {x}, [m, n, w, begin](Node& self) {
        auto& nx = *self.parents[0];
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                nx.grad[i * n + begin + j] += self.grad[i * w + j];
            }
        }
    });
}

Value select_rows(const Value& x, std::span<const std::size_t> rows)
{
    require_2d(x, "select_rows");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    std::vector<double> out(idx.size() * n);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= m) {
            throw DimensionError("select_rows: row " + std::to_string(idx[r]) + " out of " + std::to_string(m));
        }
        std::copy_n(&x.data()[idx[r] * n], n, &out[r * n]);
    }
    return make_result({idx.size(), n}, std::move(out), {x}, [idx, n](Node& self) {
        auto& nx = *self.parents[0];
        for (std::size_t r = 0; r < idx.size(); ++r) {
            for (std::size_t j = 0; j < n; ++j) {
                nx.grad[idx[r] * n + j] += self.grad[r * n + j];
            }
        }
    });
}

Value gather(const Value& x, std::span<const std::size_t> indices)
{
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    std::vector<double> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= x.size()) {
            throw DimensionError("gather: index " + std::to_string(idx[i]) + " out of " + std::to_string(x.size()));
        }
        out[i] = x[idx[i]];
    }
    return make_result({idx.size()}, std::move(out), {x}, [idx](Node& self) {
        auto& nx = *self.parents[0];
        for (std::size_t i = 0; i < idx.size(); ++i) {
            nx.grad[idx[i]] += self.grad[i];
        }
    });
}

Value weighted_bce(const Value& p, std::span<const double> targets, double w_pos, double w_neg)
{
    if (targets.size() != p.size()) {
        throw DimensionError("weighted_bce: " + std::to_string(p.size()) + " probabilities vs " +
                             std::to_string(targets.size()) + " targets");
    }
    std::vector<double> t(targets.begin(), targets.end());
    double loss = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double q = clamp_prob(p[i]);
        loss += -w_pos * t[i] * std::log(q) - w_neg * (1.0 - t[i]) * std::log(1.0 - q);
    }
    return make_result({}, {loss}, {p}, [t = std::move(t), w_pos, w_neg](Node& self) {
        auto& np = *self.parents[0];
        const double g = self.grad[0];
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double raw = np.data[i];
            // Zero gradient where the clamp is active.
            if (raw < kProbEpsilon || raw > 1.0 - kProbEpsilon) {
                continue;
            }
            np.grad[i] += g * (-w_pos * t[i] / raw + w_neg * (1.0 - t[i]) / (1.0 - raw));
        }
    });
}

Value weighted_bce(const Value& p, double target, double w_pos, double w_neg)
{
    const std::vector<double> t(p.size(), target);
    return weighted_bce(p, t, w_pos, w_neg);
}

Value smooth_l1(const Value& pred, std::span<const double> target)
{
    if (target.size() != pred.size()) {
        throw DimensionError("smooth_l1: " + std::to_string(pred.size()) + " predictions vs " +
                             std::to_string(target.size()) + " targets");
    }
    std::vector<double> diff(target.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < diff.size(); ++i) {
        const double d = pred[i] - target[i];
        diff[i] = d;
        const double ad = std::abs(d);
        loss += ad < 1.0 ? 0.5 * d * d : ad - 0.5;
    }
    return make_result({}, {loss}, {pred}, [diff = std::move(diff)](Node& self) {
        auto& np = *self.parents[0];
        const double g = self.grad[0];
        for (std::size_t i = 0; i < diff.size(); ++i) {
            const double d = diff[i];
            const double local = std::abs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0);
            np.grad[i] += g * local;
        }
    });
}

Value max_reduce(const Value& values)
{
    if (values.size() == 0) {
        throw DimensionError("max_reduce: empty reduction");
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) {
            best = i;
        }
    }
    return make_result({}, {values[best]}, {values}, [best](Node& self) {
        self.parents[0]->grad[best] += self.grad[0];
    });
}

Value add_scalars(std::span<const Value> terms)
{
    if (terms.empty()) {
        return Value::scalar(0.0);
    }
    Value acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) {
        acc = add(acc, terms[i]);
    }
    return acc;
}

void backward(const Value& loss)
{
    if (loss.size() != 1) {
        throw ContractError("backward: loss must be a scalar, got " + std::to_string(loss.size()) + " elements");
    }
    if (!loss.requires_grad()) {
        return;
    }
    // Iterative post-order DFS gives a topological order without recursion.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node* n : order) {
        std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }
    loss.node()->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) {
            (*it)->backward_fn(**it);
        }
    }
}

Value& ParamStore::add(const std::string& name, Shape shape, std::vector<double> init)
{
    if (params_.count(name) != 0) {
        throw ContractError("ParamStore: duplicate parameter '" + name + "'");
    }
    return params_.emplace(name, Value::parameter(std::move(shape), std::move(init))).first->second;
}

const Value& ParamStore::get(const std::string& name) const
{
    const auto it = params_.find(name);
    if (it == params_.end()) {
        throw ContractError("ParamStore: unknown parameter '" + name + "'");
    }
    return it->second;
}

Value& ParamStore::get(const std::string& name)
{
    return const_cast<Value&>(static_cast<const ParamStore&>(*this).get(name));
}

std::size_t ParamStore::parameter_count() const
{
    std::size_t n = 0;
    for (const auto& [name, v] : params_) {
        n += v.size();
    }
    return n;
}

void ParamStore::zero_grad()
{
    for (auto& [name, v] : params_) {
        v.zero_grad();
    }
}

void ParamStore::sgd_step(double lr)
{
    for (auto& [name, v] : params_) {
        auto data = v.mutable_data();
        const auto grad = v.grad();
        for (std::size_t i = 0; i < data.size(); ++i) {
            data[i] -= lr * grad[i];
        }
    }
}

ParamStore ParamStore::clone() const
{
    ParamStore out(seed_);
    for (const auto& [name, v] : params_) {
        out.add(name, v.shape(), std::vector<double>(v.data().begin(), v.data().end()));
    }
    return out;
}

std::map<std::string, std::vector<double>> backward(const Value& loss, ParamStore& params)
{
    params.zero_grad();
    backward(loss);
    std::map<std::string, std::vector<double>> grads;
    for (const auto& [name, v] : params.items()) {
        grads.emplace(name, std::vector<double>(v.grad().begin(), v.grad().end()));
    }
    return grads;
}

} // namespace costdet::ad

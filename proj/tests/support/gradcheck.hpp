#pragma once

// Central finite-difference gradient check shared by the unit and
// acceptance tests.

#include "costdet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace costdet::testing {

inline constexpr double kFdStep = 1e-5;
inline constexpr double kGradRelTol = 1e-4;
// Gradients smaller than this are compared in absolute terms against it.
inline constexpr double kGradFloor = 1e-4;

struct GradCheck {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
    bool ok() const { return max_rel_err <= kGradRelTol; }
};

inline double rel_err(double analytic, double numeric)
{
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradFloor});
}

/// Checks d f / d leaves for every element of every leaf. `f` must rebuild its
/// graph from the leaves on each call.
inline GradCheck gradcheck(std::vector<ad::Value>& leaves, const std::function<ad::Value()>& f)
{
    GradCheck out;
    for (auto& l : leaves) {
        l.zero_grad();
    }
    ad::backward(f());
    std::vector<std::vector<double>> analytic;
    for (const auto& l : leaves) {
        analytic.emplace_back(l.grad().begin(), l.grad().end());
    }
    for (std::size_t k = 0; k < leaves.size(); ++k) {
        auto data = leaves[k].mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double x0 = data[i];
            data[i] = x0 + kFdStep;
            const double up = f().item();
            data[i] = x0 - kFdStep;
            const double down = f().item();
            data[i] = x0;
            const double numeric = (up - down) / (2.0 * kFdStep);
            out.max_rel_err = std::max(out.max_rel_err, rel_err(analytic[k][i], numeric));
            ++out.checked;
        }
    }
    return out;
}

/// Checks only the listed (leaf, element) entries.
inline GradCheck gradcheck_entries(std::vector<ad::Value>& leaves, const std::function<ad::Value()>& f,
                                   const std::vector<std::pair<std::size_t, std::size_t>>& entries)
{
    GradCheck out;
    // Leaves the term does not reach keep stale grads otherwise.
    for (auto& l : leaves) {
        l.zero_grad();
    }
    ad::backward(f());
    for (const auto& [k, i] : entries) {
        const double analytic = leaves[k].grad()[i];
        auto data = leaves[k].mutable_data();
        const double x0 = data[i];
        data[i] = x0 + kFdStep;
        const double up = f().item();
        data[i] = x0 - kFdStep;
        const double down = f().item();
        data[i] = x0;
        out.max_rel_err = std::max(out.max_rel_err, rel_err(analytic, (up - down) / (2.0 * kFdStep)));
        ++out.checked;
    }
    return out;
}

/// Same check against named entries of a parameter store.
inline GradCheck gradcheck_params(ad::ParamStore& params, const std::function<ad::Value()>& f,
                                  const std::vector<std::pair<std::string, std::size_t>>& entries)
{
    GradCheck out;
    const auto grads = ad::backward(f(), params);
    for (const auto& [name, i] : entries) {
        auto data = params.get(name).mutable_data();
        const double x0 = data[i];
        data[i] = x0 + kFdStep;
        const double up = f().item();
        data[i] = x0 - kFdStep;
        const double down = f().item();
        data[i] = x0;
        const double numeric = (up - down) / (2.0 * kFdStep);
        out.max_rel_err = std::max(out.max_rel_err, rel_err(grads.at(name)[i], numeric));
        ++out.checked;
    }
    return out;
}

} // namespace costdet::testing

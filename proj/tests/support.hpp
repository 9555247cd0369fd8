#pragma once

#include "tdm/numeric/autograd.hpp"
#include "tdm/numeric/rng.hpp"
#include "tdm/oracles/oracles.hpp"

#include <doctest.h>

#include <filesystem>
#include <string>

namespace tdm::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

/// Largest relative error over the leaves of a finite-difference check.
inline double worst_relative_error(const std::function<Var()>& loss, const std::vector<std::pair<std::string, Var>>& leaves,
                                   double step = 1e-5) {
    double worst = 0.0;
    for (const auto& e : oracles::finite_difference_check(loss, leaves, step)) worst = std::max(worst, e.relative_error);
    return worst;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("tdm_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace tdm::test

#pragma once

#include <doctest.h>

#include <filesystem>
#include <functional>
#include <string>

#include "ccis/core/tensor.hpp"

namespace ccis::testutil {

// Central finite differences against the autograd result, double precision.
// loss_fn must rebuild the graph from the leaves on every call.
inline void check_gradients(std::vector<Tensor<double>> leaves,
                            const std::function<Tensor<double>()>& loss_fn, double step = 1e-5,
                            double tol = 1e-6) {
    auto loss = loss_fn();
    loss.backward();
    std::vector<Array<double>> analytic;
    for (auto& l : leaves) {
        REQUIRE(l.has_grad());
        analytic.push_back(l.grad_value());
    }
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = leaves[li];
        for (int64_t j = 0; j < leaf.numel(); ++j) {
            const double orig = leaf.val()[j];
            leaf.val()[j] = orig + step;
            const double fp = loss_fn().val()[0];
            leaf.val()[j] = orig - step;
            const double fm = loss_fn().val()[0];
            leaf.val()[j] = orig;
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[li][j];
            const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
            INFO("leaf " << li << " index " << j << " analytic " << a << " numeric " << numeric);
            CHECK(std::abs(a - numeric) / denom < tol);
        }
    }
    for (auto& l : leaves) l.zero_grad();
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               ("ccis_test_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace ccis::testutil

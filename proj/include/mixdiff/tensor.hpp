#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mixdiff {

// Dense row-major tensor of doubles. Shape conventions used across the
// project: scalars are {1}, row vectors {1,n}, matrices {rows,cols}.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {}

    static Tensor zeros(const std::vector<int>& shape);
    static Tensor full(const std::vector<int>& shape, double v);
    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor row(std::vector<double> v);
    static Tensor matrix(int rows, int cols, std::vector<double> v);

    int64_t numel() const;
    bool empty() const { return data.empty(); }

    // 2-d accessors (shape {r,c})
    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const { return shape.size() < 2 ? (shape.empty() ? 0 : 1) : shape[1]; }
    double& at(int i, int j) { return data[static_cast<size_t>(i) * cols() + j]; }
    double at(int i, int j) const { return data[static_cast<size_t>(i) * cols() + j]; }

    double item() const;  // scalar value; throws if numel != 1

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
    std::string shape_str() const;  // e.g. "[2x3]"
};

int64_t shape_numel(const std::vector<int>& shape);

}  // namespace mixdiff

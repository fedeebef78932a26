#include "mixdiff/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mixdiff {

int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw std::invalid_argument("tensor: negative dimension");
        n *= d;
    }
    return n;
}

Tensor Tensor::zeros(const std::vector<int>& shape) {
    Tensor t;
    t.shape = shape;
    t.data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
    return t;
}

Tensor Tensor::full(const std::vector<int>& shape, double v) {
    Tensor t = zeros(shape);
    for (double& x : t.data) x = v;
    return t;
}

Tensor Tensor::row(std::vector<double> v) {
    Tensor t;
    t.shape = {1, static_cast<int>(v.size())};
    t.data = std::move(v);
    return t;
}

Tensor Tensor::matrix(int rows, int cols, std::vector<double> v) {
    if (static_cast<int64_t>(v.size()) != static_cast<int64_t>(rows) * cols)
        throw std::invalid_argument("tensor: matrix data size does not match rows*cols");
    Tensor t;
    t.shape = {rows, cols};
    t.data = std::move(v);
    return t;
}

int64_t Tensor::numel() const { return shape_numel(shape); }

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("tensor: item() on non-scalar " + shape_str());
    return data[0];
}

bool Tensor::all_finite() const {
    for (double x : data)
        if (!std::isfinite(x)) return false;
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

}  // namespace mixdiff

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sdda/errors.hpp"

namespace sdda {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

// Dense float64 array in row-major order. Scalars have shape {1}.
struct Tensor {
    Shape shape{1};
    std::vector<double> values = std::vector<double>(1, 0.0);
    std::optional<std::vector<double>> grad;

    Tensor() = default;

    explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)) {
        check_shape();
        values.assign(shape_size(shape), fill);
    }

    Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
        check_shape();
        if (values.size() != shape_size(shape)) {
            throw DimensionError("tensor: " + std::to_string(values.size())
                                 + " values do not fill shape " + shape_string(shape));
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

    std::size_t size() const { return values.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
    std::size_t cols() const { return shape.back(); }

    double& operator[](std::size_t i) { return values[i]; }
    double operator[](std::size_t i) const { return values[i]; }
    double& at(std::size_t r, std::size_t c) { return values[r * shape.back() + c]; }
    double at(std::size_t r, std::size_t c) const { return values[r * shape.back() + c]; }

    double item() const {
        if (values.size() != 1) throw ContractError("tensor: item() on shape " + shape_string(shape));
        return values[0];
    }

    bool all_finite() const {
        for (double v : values) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    void zero_grad() { grad.emplace(values.size(), 0.0); }

    std::vector<double>& ensure_grad() {
        if (!grad || grad->size() != values.size()) grad.emplace(values.size(), 0.0);
        return *grad;
    }

private:
    void check_shape() const {
        if (shape.empty()) throw DimensionError("tensor: empty shape");
        for (std::size_t e : shape) {
            if (e == 0) throw DimensionError("tensor: zero extent in shape " + shape_string(shape));
        }
    }
};

// Row-major matrix with the given rows.
inline Tensor make_matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
}

inline Tensor make_vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
}

} // namespace sdda

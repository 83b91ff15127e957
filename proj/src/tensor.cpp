#include "madlab/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include <Eigen/Core>

#include "madlab/errors.hpp"

namespace madlab {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor() : Tensor(Shape{0}, {}) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::make_shared<const std::vector<double>>(std::move(data))) {
    if (shape_numel(shape_) != data_->size()) {
        throw ShapeError("tensor: shape " + shape_str(shape_) + " holds " +
                         std::to_string(shape_numel(shape_)) + " elements, got " +
                         std::to_string(data_->size()));
    }
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::identity(std::size_t n) {
    std::vector<double> d(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
    return Tensor(Shape{n, n}, std::move(d));
}

double Tensor::at(std::size_t row, std::size_t col) const {
    if (rank() != 2 || row >= shape_[0] || col >= shape_[1]) {
        throw ShapeError("tensor: index (" + std::to_string(row) + ", " + std::to_string(col) +
                         ") out of range for shape " + shape_str(shape_));
    }
    return (*data_)[row * shape_[1] + col];
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("tensor: item() on shape " + shape_str(shape_));
    return (*data_)[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != size()) {
        throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
    }
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
    if (rank() == 0 || begin > end || end > shape_[0]) {
        throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + shape_str(shape_));
    }
    const std::size_t row = shape_[0] ? size() / shape_[0] : 0;
    Shape s = shape_;
    s[0] = end - begin;
    return Tensor(std::move(s), std::vector<double>(data_->begin() + static_cast<std::ptrdiff_t>(begin * row),
                                                    data_->begin() + static_cast<std::ptrdiff_t>(end * row)));
}

Tensor Tensor::gather_rows(std::span<const std::size_t> rows) const {
    if (rank() == 0) throw ShapeError("gather_rows: scalar tensor");
    const std::size_t row = shape_[0] ? size() / shape_[0] : 0;
    std::vector<double> out(rows.size() * row);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= shape_[0]) {
            throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                             shape_str(shape_));
        }
        std::memcpy(out.data() + i * row, data_->data() + rows[i] * row, row * sizeof(double));
    }
    Shape s = shape_;
    s[0] = rows.size();
    return Tensor(std::move(s), std::move(out));
}

bool Tensor::all_finite() const noexcept {
    for (double v : *data_)
        if (!std::isfinite(v)) return false;
    return true;
}

bool Tensor::identical(const Tensor& other) const noexcept {
    return shape_ == other.shape_ && size() == other.size() &&
           (size() == 0 || std::memcmp(ptr(), other.ptr(), size() * sizeof(double)) == 0);
}

Tensor stack(std::span<const Tensor> items) {
    if (items.empty()) throw ShapeError("stack: no tensors");
    const Shape& inner = items.front().shape();
    std::vector<double> out;
    out.reserve(items.size() * items.front().size());
    for (const Tensor& t : items) {
        if (t.shape() != inner) {
            throw ShapeError("stack: shape " + shape_str(t.shape()) + " differs from " + shape_str(inner));
        }
        out.insert(out.end(), t.data().begin(), t.data().end());
    }
    Shape s{items.size()};
    s.insert(s.end(), inner.begin(), inner.end());
    return Tensor(std::move(s), std::move(out));
}

double frobenius_norm(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v * v;
    return std::sqrt(s);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n);
    Eigen::Map<const RowMat> ma(a.ptr(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    Eigen::Map<const RowMat> mb(b.ptr(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    Eigen::Map<RowMat> mc(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    mc.noalias() = ma * mb;
    return Tensor(Shape{m, n}, std::move(out));
}

}  // namespace madlab

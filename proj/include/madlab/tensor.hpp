#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace madlab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles. Immutable once built; copies share storage.
class Tensor {
public:
    Tensor();
    Tensor(Shape shape, std::vector<double> data);
    Tensor(std::initializer_list<std::size_t> shape, std::vector<double> data)
        : Tensor(Shape(shape), std::move(data)) {}

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);
    static Tensor vector(std::vector<double> values);
    static Tensor identity(std::size_t n);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_->size(); }
    bool empty() const noexcept { return data_->empty(); }

    std::span<const double> data() const noexcept { return {data_->data(), data_->size()}; }
    const double* ptr() const noexcept { return data_->data(); }
    double operator[](std::size_t i) const noexcept { return (*data_)[i]; }
    double at(std::size_t i) const { return data_->at(i); }
    double at(std::size_t row, std::size_t col) const;

    /// Value of a one-element tensor.
    double item() const;

    /// Same storage viewed with a different shape of equal element count.
    Tensor reshaped(Shape shape) const;

    /// Rows [begin, end) along the leading axis.
    Tensor slice_rows(std::size_t begin, std::size_t end) const;

    /// Copy of the selected leading-axis rows, in the given order.
    Tensor gather_rows(std::span<const std::size_t> rows) const;

    /// Writable copy of the elements.
    std::vector<double> to_vector() const { return *data_; }

    bool all_finite() const noexcept;

    /// Bit-identical shape and contents.
    bool identical(const Tensor& other) const noexcept;

private:
    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
};

/// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> items);

/// Square root of the sum of squared elements.
double frobenius_norm(const Tensor& t);

/// 2-D matrix product; both operands must be rank 2.
Tensor matmul(const Tensor& a, const Tensor& b);

}  // namespace madlab

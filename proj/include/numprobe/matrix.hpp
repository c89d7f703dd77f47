#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "numprobe/errors.hpp"

namespace numprobe {

template <class Scalar>
using RowMatrixOf = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrix = RowMatrixOf<double>;

// Dense row-major matrix of doubles. Entries are checked finite when built
// from external data; in-place arithmetic through eigen() is trusted.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw DimensionError("matrix data has " + std::to_string(data_.size()) +
                                 " entries, expected " + std::to_string(rows_ * cols_));
        }
        check_finite();
    }

    static Matrix from_eigen(const RowMatrix& m) {
        Matrix out(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
        out.eigen() = m;
        out.check_finite();
        return out;
    }

    static Matrix identity(std::size_t n) {
        Matrix out(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            out(i, i) = 1.0;
        }
        return out;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    Eigen::Map<RowMatrix> eigen() noexcept {
        return {data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
    }
    Eigen::Map<const RowMatrix> eigen() const noexcept {
        return {data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
    }

    Matrix select_rows(std::span<const std::size_t> idx) const {
        Matrix out(idx.size(), cols_);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::copy_n(data_.data() + idx[i] * cols_, cols_, out.data_.data() + i * cols_);
        }
        return out;
    }

    void append_rows(const Matrix& other) {
        if (empty() && rows_ == 0) {
            cols_ = other.cols_;
        }
        if (other.cols_ != cols_) {
            throw DimensionError("cannot append rows of width " + std::to_string(other.cols_) +
                                 " to matrix of width " + std::to_string(cols_));
        }
        data_.insert(data_.end(), other.data_.begin(), other.data_.end());
        rows_ += other.rows_;
    }

    void append_row(std::span<const double> r) {
        if (rows_ == 0 && cols_ == 0) {
            cols_ = r.size();
        }
        if (r.size() != cols_) {
            throw DimensionError("row width mismatch");
        }
        data_.insert(data_.end(), r.begin(), r.end());
        ++rows_;
    }

    void check_finite() const {
        for (std::size_t i = 0; i < data_.size(); ++i) {
            if (!std::isfinite(data_[i])) {
                throw DimensionError("non-finite matrix entry at (" + std::to_string(i / cols_) +
                                     ", " + std::to_string(i % cols_) + ")");
            }
        }
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

}  // namespace numprobe

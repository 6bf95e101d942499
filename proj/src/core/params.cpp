#include "core/params.hpp"

#include "core/error.hpp"

#include <algorithm>
#include <cmath>

namespace bdl {

std::size_t ParameterSet::add(std::string name, std::string group, std::size_t rows, std::size_t cols) {
    TensorInfo info{std::move(name), std::move(group), rows, cols, data_.size()};
    data_.resize(data_.size() + info.size(), 0.0);
    tensors_.push_back(std::move(info));
    return tensors_.size() - 1;
}

ParameterSet ParameterSet::zeros_like() const {
    ParameterSet p;
    p.tensors_ = tensors_;
    p.data_.assign(data_.size(), 0.0);
    return p;
}

MatrixView ParameterSet::matrix(std::size_t t) {
    const auto& i = tensors_.at(t);
    return {data_.data() + i.offset, static_cast<Eigen::Index>(i.rows), static_cast<Eigen::Index>(i.cols)};
}

ConstMatrixView ParameterSet::matrix(std::size_t t) const {
    const auto& i = tensors_.at(t);
    return {data_.data() + i.offset, static_cast<Eigen::Index>(i.rows), static_cast<Eigen::Index>(i.cols)};
}

VectorView ParameterSet::vector(std::size_t t) {
    const auto& i = tensors_.at(t);
    return {data_.data() + i.offset, static_cast<Eigen::Index>(i.size())};
}

ConstVectorView ParameterSet::vector(std::size_t t) const {
    const auto& i = tensors_.at(t);
    return {data_.data() + i.offset, static_cast<Eigen::Index>(i.size())};
}

std::size_t ParameterSet::find(const std::string& name) const {
    for (std::size_t t = 0; t < tensors_.size(); ++t) {
        if (tensors_[t].name == name) return t;
    }
    fail(ErrorCode::invalid_argument, "no parameter tensor named '" + name + "'");
}

void ParameterSet::set_zero() { std::fill(data_.begin(), data_.end(), 0.0); }

bool ParameterSet::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

bool ParameterSet::same_layout(const ParameterSet& other) const {
    if (tensors_.size() != other.tensors_.size() || data_.size() != other.data_.size()) return false;
    for (std::size_t t = 0; t < tensors_.size(); ++t) {
        const auto& a = tensors_[t];
        const auto& b = other.tensors_[t];
        if (a.name != b.name || a.rows != b.rows || a.cols != b.cols) return false;
    }
    return true;
}

} // namespace bdl

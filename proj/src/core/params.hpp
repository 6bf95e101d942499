#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <string>
#include <vector>

namespace bdl {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixView = Eigen::Map<RowMatrix>;
using ConstMatrixView = Eigen::Map<const RowMatrix>;
using VectorView = Eigen::Map<Eigen::VectorXd>;
using ConstVectorView = Eigen::Map<const Eigen::VectorXd>;

struct TensorInfo {
    std::string name;
    std::string group;   // embedding, encoder, attention, decoder, projection
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t offset = 0;

    std::size_t size() const { return rows * cols; }
};

// Named row-major tensors packed into one flat buffer. Gradients and
// optimizer moments use the same layout, so they are plain ParameterSets.
class ParameterSet {
public:
    std::size_t add(std::string name, std::string group, std::size_t rows, std::size_t cols);

    // Same layout, zero-filled.
    ParameterSet zeros_like() const;

    MatrixView matrix(std::size_t tensor);
    ConstMatrixView matrix(std::size_t tensor) const;
    // Column-vector view of a whole tensor (used for biases).
    VectorView vector(std::size_t tensor);
    ConstVectorView vector(std::size_t tensor) const;

    const std::vector<TensorInfo>& tensors() const { return tensors_; }
    std::size_t find(const std::string& name) const;

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }
    VectorView flat() { return {data_.data(), static_cast<Eigen::Index>(data_.size())}; }
    ConstVectorView flat() const { return {data_.data(), static_cast<Eigen::Index>(data_.size())}; }

    void set_zero();
    bool all_finite() const;
    bool same_layout(const ParameterSet& other) const;

private:
    std::vector<TensorInfo> tensors_;
    std::vector<double> data_;
};

} // namespace bdl

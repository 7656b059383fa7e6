#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "impactx/errors.hpp"

namespace impactx {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

// Dense row-major float32 n-d array. The universal value type for images,
// activations, parameters, gradients, and attribution maps.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    const Shape& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    float& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
    float operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // 2-d and 4-d accessors; callers guarantee rank.
    float& at(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
    float at(int i, int j) const { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
    float& at(int n, int c, int y, int x) {
        return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }
    float at(int n, int c, int y, int x) const {
        return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;
    void fill(float v);

    Tensor reshaped(Shape new_shape) const;

    const std::vector<float>& vec() const { return data_; }

private:
    Shape shape_;
    std::vector<float> data_;
};

std::int64_t shape_numel(const Shape& s);

void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

}  // namespace impactx

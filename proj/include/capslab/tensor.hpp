#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace capslab {

/// Thrown when tensor extents do not line up; message names the offending dimensions.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t checked_numel(const Shape& s) {
    if (s.empty()) throw ShapeError("tensor shape must have at least one dimension");
    std::size_t n = 1;
    for (std::size_t e : s) {
        if (e == 0) throw ShapeError("tensor extent must be >= 1, got shape " + shape_str(s));
        n *= e;
    }
    return n;
}

/// Dense row-major n-dimensional array. The universal numeric carrier.
template <typename S>
class BasicTensor {
public:
    using scalar_type = S;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape)
        : shape_(std::move(shape)), data_(checked_numel(shape_), S{0}) {}

    BasicTensor(Shape shape, S fill)
        : shape_(std::move(shape)), data_(checked_numel(shape_), fill) {}

    BasicTensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_numel(shape_) != data_.size())
            throw ShapeError("data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }
    static BasicTensor full(Shape shape, S v) { return BasicTensor(std::move(shape), v); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t extent(std::size_t d) const { return shape_[d]; }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }
    std::vector<S>& storage() { return data_; }
    const std::vector<S>& storage() const { return data_; }

    S& operator[](std::size_t i) { assert(i < data_.size()); return data_[i]; }
    const S& operator[](std::size_t i) const { assert(i < data_.size()); return data_[i]; }

    template <typename... Ix>
    S& operator()(Ix... idx) { return data_[offset(idx...)]; }
    template <typename... Ix>
    const S& operator()(Ix... idx) const { return data_[offset(idx...)]; }

    bool same_shape(const BasicTensor& o) const { return shape_ == o.shape_; }

    /// Reinterpret under a new shape with identical element count; data is shared by copy.
    BasicTensor reshaped(Shape s) const {
        if (checked_numel(s) != numel())
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        return BasicTensor(std::move(s), data_);
    }

    void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

    BasicTensor& operator+=(const BasicTensor& o) {
        require_same("operator+=", o);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    BasicTensor& operator-=(const BasicTensor& o) {
        require_same("operator-=", o);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    BasicTensor& operator*=(S v) {
        for (auto& x : data_) x *= v;
        return *this;
    }

    bool all_finite() const {
        for (S x : data_)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

private:
    void require_same(const char* op, const BasicTensor& o) const {
        if (!same_shape(o))
            throw ShapeError(std::string(op) + ": shape " + shape_str(shape_) +
                             " vs " + shape_str(o.shape_));
    }

    template <typename... Ix>
    std::size_t offset(Ix... idx) const {
        assert(sizeof...(idx) == shape_.size());
        const std::size_t ids[] = {static_cast<std::size_t>(idx)...};
        std::size_t off = 0;
        for (std::size_t d = 0; d < sizeof...(idx); ++d) {
            assert(ids[d] < shape_[d]);
            off = off * shape_[d] + ids[d];
        }
        return off;
    }

    Shape shape_;
    std::vector<S> data_;
};

#if defined(CAPSLAB_SINGLE_PRECISION)
using Real = float;
#else
using Real = double;
#endif

using Tensor = BasicTensor<Real>;

template <typename S>
S sum_of(const BasicTensor<S>& t) {
    S acc{0};
    for (std::size_t i = 0; i < t.numel(); ++i) acc += t[i];
    return acc;
}

template <typename S>
S max_abs_of(const BasicTensor<S>& t) {
    S m{0};
    for (std::size_t i = 0; i < t.numel(); ++i) m = std::max(m, std::abs(t[i]));
    return m;
}

}  // namespace capslab

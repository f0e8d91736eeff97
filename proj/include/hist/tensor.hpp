#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "hist/errors.hpp"

namespace hist {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major f64 tensor. Rank is arbitrary but the math ops treat
// everything as a matrix: rank-1 is a single row, rank>=3 must be reshaped
// into 2-D before use.
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_))
            throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

    const Shape& shape() const { return shape_; }
    size_t rank() const { return shape_.size(); }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    // Matrix view. Rank-1 tensors read as a single row.
    size_t rows() const {
        if (rank() <= 1) return shape_.empty() ? 0 : 1;
        if (rank() == 2) return shape_[0];
        throw ShapeError("rows() on rank-" + std::to_string(rank()) + " tensor " + shape_str(shape_));
    }
    size_t cols() const {
        if (rank() <= 1) return shape_.empty() ? 0 : shape_[0];
        if (rank() == 2) return shape_[1];
        throw ShapeError("cols() on rank-" + std::to_string(rank()) + " tensor " + shape_str(shape_));
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& at(size_t i) { return data_[i]; }
    double at(size_t i) const { return data_[i]; }
    double& at2(size_t r, size_t c) { return data_[r * cols() + c]; }
    double at2(size_t r, size_t c) const { return data_[r * cols() + c]; }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool on) {
        requires_grad_ = on;
        if (on)
            grad_.assign(data_.size(), 0.0);
        else
            grad_.clear();
    }

    std::vector<double>& grad() {
        if (!requires_grad_) throw ShapeError("grad() on tensor without requires_grad");
        return grad_;
    }
    const std::vector<double>& grad() const {
        if (!requires_grad_) throw ShapeError("grad() on tensor without requires_grad");
        return grad_;
    }
    void zero_grad() {
        if (requires_grad_) grad_.assign(data_.size(), 0.0);
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != size())
            throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(s) + " changes element count");
        Tensor out;
        out.shape_ = std::move(s);
        out.data_ = data_;
        return out;
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

  private:
    Shape shape_;
    std::vector<double> data_;
    std::vector<double> grad_;
    bool requires_grad_ = false;
};

// ---------------------------------------------------------------------------
// Tensor blob format ("HTEN"): magic, u32 version, u32 rank, rank x u64
// extents, then the row-major f64 payload, all little-endian.
// ---------------------------------------------------------------------------

inline constexpr uint32_t kTensorBlobVersion = 1;

namespace detail {
template <typename T>
void write_le(std::ostream& os, T v) {
    // Host is little-endian; write raw.
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_le(std::istream& is, const char* what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError(std::string("tensor blob truncated while reading ") + what);
    return v;
}
}  // namespace detail

inline void save_tensor_blob(const Tensor& t, std::ostream& os) {
    os.write("HTEN", 4);
    detail::write_le<uint32_t>(os, kTensorBlobVersion);
    detail::write_le<uint32_t>(os, static_cast<uint32_t>(t.rank()));
    for (size_t e : t.shape()) detail::write_le<uint64_t>(os, static_cast<uint64_t>(e));
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!os) throw DataError("tensor blob write failed");
}

inline Tensor load_tensor_blob(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "HTEN", 4) != 0) throw DataError("bad tensor blob magic (expected HTEN)");
    uint32_t version = detail::read_le<uint32_t>(is, "version");
    if (version != kTensorBlobVersion)
        throw DataError("unsupported tensor blob version " + std::to_string(version));
    uint32_t rank = detail::read_le<uint32_t>(is, "rank");
    if (rank > 8) throw DataError("tensor blob rank " + std::to_string(rank) + " out of range");
    Shape shape(rank);
    for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<size_t>(detail::read_le<uint64_t>(is, "extent"));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!is) throw DataError("tensor blob truncated in payload");
    return t;
}

inline void save_tensor_file(const Tensor& t, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for write: " + path);
    save_tensor_blob(t, os);
}

inline Tensor load_tensor_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open for read: " + path);
    return load_tensor_blob(is);
}

}  // namespace hist

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace sda {

// Dense row-major matrix of doubles. Rank <= 2: a scalar is 1x1, a row
// vector 1xn. All exposed operations keep values finite.
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int r, int c, double fill = 0.0) : rows(r), cols(c), v(static_cast<size_t>(r) * c, fill) {
        if (r < 0 || c < 0) throw std::invalid_argument("Tensor: negative shape");
    }

    static Tensor scalar(double x) {
        Tensor t(1, 1);
        t.v[0] = x;
        return t;
    }

    static Tensor from_rows(const std::vector<std::vector<double>>& rows_in) {
        if (rows_in.empty()) return Tensor();
        Tensor t(static_cast<int>(rows_in.size()), static_cast<int>(rows_in[0].size()));
        for (int i = 0; i < t.rows; ++i) {
            if (static_cast<int>(rows_in[i].size()) != t.cols)
                throw std::invalid_argument("Tensor::from_rows: ragged rows");
            std::copy(rows_in[i].begin(), rows_in[i].end(), t.v.begin() + static_cast<size_t>(i) * t.cols);
        }
        return t;
    }

    double& at(int i, int j) { return v[static_cast<size_t>(i) * cols + j]; }
    double at(int i, int j) const { return v[static_cast<size_t>(i) * cols + j]; }

    int size() const { return rows * cols; }
    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    double item() const {
        if (size() != 1) throw std::logic_error("Tensor::item: not a scalar");
        return v[0];
    }
};

// Bit-for-bit equality (0.0 == -0.0 would pass an arithmetic compare; it
// fails this one, which is what snapshot/restore contracts need).
inline bool bits_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    return a.v.empty() || std::memcmp(a.v.data(), b.v.data(), a.v.size() * sizeof(double)) == 0;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows) + "x" +
                                    std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                                    std::to_string(b.cols) + ")");
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dimensions differ");
    Tensor out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i)
        for (int k = 0; k < a.cols; ++k) {
            const double aik = a.at(i, k);
            if (aik == 0.0) continue;
            for (int j = 0; j < b.cols; ++j) out.at(i, j) += aik * b.at(k, j);
        }
    return out;
}

// a^T * b
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    if (a.rows != b.rows) throw std::invalid_argument("matmul_tn: shapes incompatible");
    Tensor out(a.cols, b.cols);
    for (int k = 0; k < a.rows; ++k)
        for (int i = 0; i < a.cols; ++i) {
            const double aki = a.at(k, i);
            if (aki == 0.0) continue;
            for (int j = 0; j < b.cols; ++j) out.at(i, j) += aki * b.at(k, j);
        }
    return out;
}

// a * b^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.cols != b.cols) throw std::invalid_argument("matmul_nt: shapes incompatible");
    Tensor out(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < b.rows; ++j) {
            double s = 0.0;
            for (int k = 0; k < a.cols; ++k) s += a.at(i, k) * b.at(j, k);
            out.at(i, j) = s;
        }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    Tensor out(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

inline double sqdist_rows(const Tensor& a, int i, const Tensor& b, int j) {
    double s = 0.0;
    for (int k = 0; k < a.cols; ++k) {
        const double d = a.at(i, k) - b.at(j, k);
        s += d * d;
    }
    return s;
}

}  // namespace sda

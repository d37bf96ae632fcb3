#pragma once

#include <array>
#include <cmath>

namespace kinefit {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
    double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator-() const { return {-x, -y, -z}; }
    Vec3& operator+=(const Vec3& o) {
        x += o.x;
        y += o.y;
        z += o.z;
        return *this;
    }

    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(dot(*this)); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

// Row-major 3x3 matrix.
struct Mat3 {
    std::array<double, 9> m{};

    static Mat3 identity() {
        Mat3 r;
        r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
        return r;
    }

    double& operator()(int r, int c) { return m[static_cast<size_t>(3 * r + c)]; }
    double operator()(int r, int c) const { return m[static_cast<size_t>(3 * r + c)]; }

    Vec3 operator*(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
                m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }

    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0.0;
                for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
                r(i, j) = s;
            }
        return r;
    }

    Mat3 transposed() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
        return r;
    }
};

// [v]x, the cross-product matrix.
inline Mat3 skew(const Vec3& v) {
    Mat3 k;
    k.m = {0, -v.z, v.y, v.z, 0, -v.x, -v.y, v.x, 0};
    return k;
}

// Rodrigues. Below the small-angle threshold the sin/cos coefficients switch
// to their series expansions.
inline constexpr double kSmallAngle = 1e-7;

inline Mat3 axis_angle_to_matrix(const Vec3& w) {
    const double theta2 = w.dot(w);
    const double theta = std::sqrt(theta2);
    double a, b;  // sin(t)/t, (1-cos(t))/t^2
    if (theta < kSmallAngle) {
        a = 1.0 - theta2 / 6.0;
        b = 0.5 - theta2 / 24.0;
    } else {
        a = std::sin(theta) / theta;
        b = (1.0 - std::cos(theta)) / theta2;
    }
    const Mat3 k = skew(w);
    const Mat3 k2 = k * k;
    Mat3 r = Mat3::identity();
    for (size_t i = 0; i < 9; ++i) r.m[i] += a * k.m[i] + b * k2.m[i];
    return r;
}

// Rotation about a fixed unit axis.
inline Mat3 hinge_to_matrix(const Vec3& axis, double angle) {
    const double s = std::sin(angle);
    const double c = 1.0 - std::cos(angle);
    const Mat3 k = skew(axis);
    const Mat3 k2 = k * k;
    Mat3 r = Mat3::identity();
    for (size_t i = 0; i < 9; ++i) r.m[i] += s * k.m[i] + c * k2.m[i];
    return r;
}

// Inverse of Rodrigues; returns the axis-angle vector of a rotation matrix.
inline Vec3 matrix_to_axis_angle(const Mat3& r) {
    const double tr = r(0, 0) + r(1, 1) + r(2, 2);
    double cos_t = 0.5 * (tr - 1.0);
    cos_t = cos_t > 1.0 ? 1.0 : (cos_t < -1.0 ? -1.0 : cos_t);
    const double theta = std::acos(cos_t);
    const Vec3 v{r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1)};
    if (theta < kSmallAngle) return v * 0.5;
    const double s = std::sin(theta);
    if (s > 1e-6) return v * (theta / (2.0 * s));
    // Near pi: recover the axis from the symmetric part.
    Vec3 axis{std::sqrt(std::max(0.0, (r(0, 0) + 1.0) / 2.0)),
              std::sqrt(std::max(0.0, (r(1, 1) + 1.0) / 2.0)),
              std::sqrt(std::max(0.0, (r(2, 2) + 1.0) / 2.0))};
    if (r(0, 1) + r(1, 0) < 0) axis.y = -axis.y;
    if (r(0, 2) + r(2, 0) < 0) axis.z = -axis.z;
    return axis * theta;
}

}  // namespace kinefit

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kinefit/error.hpp"
#include "kinefit/math3d.hpp"

namespace kinefit::ad {

using Id = std::int32_t;

// Camera intrinsics as consumed by the projection ops.
struct Intrinsics {
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0, k1 = 0.0, k2 = 0.0;
};

// Reverse-mode tape over tensor-granularity primitives. Evaluation is eager:
// each builder call computes its value immediately; backward() then sweeps the
// node list in exact reverse order, so gradient accumulation is deterministic.
//
// Shapes are (rows, cols) with row-major storage; vectors are n x 1. A tape is
// single-threaded; independent tapes may run concurrently.
class Tape {
public:
    struct Node {
        std::uint8_t op = 0;
        bool grad = false;  // any transitive dependence on an input
        Id a = -1, b = -1, c = -1;
        int rows = 0, cols = 0;
        std::size_t val = 0;  // offset into the value arena
        int ai = 0, an = 0;   // aux int slice
        int di = 0, dn = 0;   // aux double slice
    };

    // ---- construction -----------------------------------------------------

    Id input(std::string name, std::span<const double> data, int rows, int cols = 1) {
        check_count(data.size(), rows, cols, "input");
        Id id = push(OpInput, -1, -1, rows, cols);
        copy_in(id, data);
        nodes_[static_cast<size_t>(id)].grad = true;
        input_ids_.push_back(id);
        input_names_.push_back(std::move(name));
        return id;
    }

    Id constant(std::span<const double> data, int rows, int cols = 1) {
        check_count(data.size(), rows, cols, "constant");
        Id id = push(OpConst, -1, -1, rows, cols);
        copy_in(id, data);
        return id;
    }

    Id constant_scalar(double v) { return constant(std::span<const double>(&v, 1), 1, 1); }

    // ---- elementwise and reductions ----------------------------------------

    Id add(Id a, Id b) {
        require_same_shape(a, b, "add");
        Id id = push(OpAdd, a, b, rows(a), cols(a));
        auto [y, x1, x2] = vals2(id, a, b);
        for (int i = 0; i < size(id); ++i) y[i] = x1[i] + x2[i];
        return id;
    }

    Id sub(Id a, Id b) {
        require_same_shape(a, b, "sub");
        Id id = push(OpSub, a, b, rows(a), cols(a));
        auto [y, x1, x2] = vals2(id, a, b);
        for (int i = 0; i < size(id); ++i) y[i] = x1[i] - x2[i];
        return id;
    }

    Id mul(Id a, Id b) {
        require_same_shape(a, b, "mul");
        Id id = push(OpMul, a, b, rows(a), cols(a));
        auto [y, x1, x2] = vals2(id, a, b);
        for (int i = 0; i < size(id); ++i) y[i] = x1[i] * x2[i];
        return id;
    }

    Id scale(Id a, double s) {
        Id id = push(OpScale, a, -1, rows(a), cols(a));
        aux_d(id, {s});
        const double* x = val(a);
        double* y = val_mut(id);
        for (int i = 0; i < size(id); ++i) y[i] = s * x[i];
        return id;
    }

    // y = a .* x + b with constant coefficient vectors.
    Id affine(Id x, std::span<const double> a, std::span<const double> b) {
        const int n = size(x);
        if (static_cast<int>(a.size()) != n || static_cast<int>(b.size()) != n)
            throw ShapeError("affine: coefficient length mismatch");
        Id id = push(OpAffine, x, -1, rows(x), cols(x));
        int di = static_cast<int>(aux_doubles_.size());
        aux_doubles_.insert(aux_doubles_.end(), a.begin(), a.end());
        aux_doubles_.insert(aux_doubles_.end(), b.begin(), b.end());
        nodes_[static_cast<size_t>(id)].di = di;
        nodes_[static_cast<size_t>(id)].dn = 2 * n;
        const double* xv = val(x);
        double* y = val_mut(id);
        for (int i = 0; i < n; ++i) y[i] = a[i] * xv[i] + b[i];
        return id;
    }

    Id tanh(Id a) { return unary(OpTanh, a, [](double v) { return std::tanh(v); }); }
    Id sin(Id a) { return unary(OpSin, a, [](double v) { return std::sin(v); }); }
    Id cos(Id a) { return unary(OpCos, a, [](double v) { return std::cos(v); }); }
    Id sqrt(Id a) { return unary(OpSqrt, a, [](double v) { return std::sqrt(v); }); }
    Id reciprocal(Id a) { return unary(OpRecip, a, [](double v) { return 1.0 / v; }); }
    Id gelu(Id a) { return unary(OpGelu, a, [](double v) { return gelu_fwd(v); }); }

    Id sum(Id a) {
        Id id = push(OpSum, a, -1, 1, 1);
        const double* x = val(a);
        double s = 0.0;
        for (int i = 0; i < size(a); ++i) s += x[i];
        *val_mut(id) = s;
        return id;
    }

    Id dot(Id a, Id b) {
        if (size(a) != size(b)) throw ShapeError("dot: size mismatch");
        Id id = push(OpDot, a, b, 1, 1);
        const double* x1 = val(a);
        const double* x2 = val(b);
        double s = 0.0;
        for (int i = 0; i < size(a); ++i) s += x1[i] * x2[i];
        *val_mut(id) = s;
        return id;
    }

    Id product(Id a) {
        Id id = push(OpProd, a, -1, 1, 1);
        const double* x = val(a);
        double p = 1.0;
        for (int i = 0; i < size(a); ++i) p *= x[i];
        *val_mut(id) = p;
        return id;
    }

    Id norm(Id a) {
        Id id = push(OpNorm, a, -1, 1, 1);
        const double* x = val(a);
        double s = 0.0;
        for (int i = 0; i < size(a); ++i) s += x[i] * x[i];
        *val_mut(id) = std::sqrt(s);
        return id;
    }

    // Elementwise Huber of |x|. The kink takes the quadratic branch's slope.
    Id huber(Id a, double delta) {
        Id id = push(OpHuber, a, -1, rows(a), cols(a));
        aux_d(id, {delta});
        const double* x = val(a);
        double* y = val_mut(id);
        for (int i = 0; i < size(id); ++i) y[i] = huber_fwd(x[i], delta);
        return id;
    }

    // y_i = x[idx_i]; backward scatter-adds.
    Id gather(Id x, std::span<const int> idx, int rows_out, int cols_out = 1) {
        if (static_cast<int>(idx.size()) != rows_out * cols_out)
            throw ShapeError("gather: index count mismatch");
        const int n = size(x);
        for (int i : idx)
            if (i < 0 || i >= n) throw ShapeError("gather: index out of range");
        Id id = push(OpGather, x, -1, rows_out, cols_out);
        aux_i(id, idx);
        const double* xv = val(x);
        double* y = val_mut(id);
        for (size_t i = 0; i < idx.size(); ++i) y[i] = xv[idx[i]];
        return id;
    }

    // Row-wise concatenation; all parts must share a column count.
    Id concat_rows(std::span<const Id> parts) {
        if (parts.empty()) throw ShapeError("concat_rows: empty");
        const int c = cols(parts[0]);
        int r = 0;
        for (Id p : parts) {
            if (cols(p) != c) throw ShapeError("concat_rows: column mismatch");
            r += rows(p);
        }
        Id id = push(OpConcat, -1, -1, r, c);
        std::vector<int> ids(parts.begin(), parts.end());
        aux_i(id, ids);
        for (Id p : parts)
            if (nodes_[static_cast<size_t>(p)].grad) nodes_[static_cast<size_t>(id)].grad = true;
        double* y = val_mut(id);
        for (Id p : parts) {
            const double* x = val(p);
            for (int i = 0; i < size(p); ++i) *y++ = x[i];
        }
        return id;
    }

    // ---- linear algebra -----------------------------------------------------

    Id matmul(Id a, Id b) {
        if (cols(a) != rows(b)) throw ShapeError("matmul: inner dimension mismatch");
        const int m = rows(a), k = cols(a), n = cols(b);
        Id id = push(OpMatMul, a, b, m, n);
        const double* A = val(a);
        const double* B = val(b);
        double* Y = val_mut(id);
        for (int i = 0; i < m * n; ++i) Y[i] = 0.0;
        for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
                const double av = A[i * k + p];
                const double* brow = B + p * n;
                double* yrow = Y + i * n;
                for (int j = 0; j < n; ++j) yrow[j] += av * brow[j];
            }
        return id;
    }

    Id matvec(Id a, Id x) {
        if (cols(x) != 1) throw ShapeError("matvec: x must be a column vector");
        return matmul(a, x);
    }

    // C = A * B^T. Saves materializing transposes on the marker path.
    Id matmul_bt(Id a, Id b) {
        if (cols(a) != cols(b)) throw ShapeError("matmul_bt: inner dimension mismatch");
        const int m = rows(a), k = cols(a), n = rows(b);
        Id id = push(OpMatMulBT, a, b, m, n);
        const double* A = val(a);
        const double* B = val(b);
        double* Y = val_mut(id);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                double s = 0.0;
                const double* arow = A + i * k;
                const double* brow = B + j * k;
                for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
                Y[i * n + j] = s;
            }
        return id;
    }

    // y = W x + b. One node per dense layer.
    Id linear(Id w, Id bias, Id x) {
        if (cols(x) != 1 || cols(bias) != 1) throw ShapeError("linear: vector operands expected");
        if (cols(w) != rows(x) || rows(w) != rows(bias))
            throw ShapeError("linear: dimension mismatch");
        const int m = rows(w), k = cols(w);
        Id id = push(OpLinear, w, bias, m, 1);
        nodes_[static_cast<size_t>(id)].c = x;
        if (nodes_[static_cast<size_t>(x)].grad) nodes_[static_cast<size_t>(id)].grad = true;
        const double* W = val(w);
        const double* B = val(bias);
        const double* X = val(x);
        double* Y = val_mut(id);
        for (int i = 0; i < m; ++i) {
            double s = B[i];
            const double* wrow = W + i * k;
            for (int p = 0; p < k; ++p) s += wrow[p] * X[p];
            Y[i] = s;
        }
        return id;
    }

    // M (n x 3) + row vector v (3).
    Id add_row_broadcast(Id m, Id v) {
        if (cols(m) != 3 || size(v) != 3) throw ShapeError("add_row_broadcast: expects n x 3 and 3");
        Id id = push(OpAddRowB, m, v, rows(m), 3);
        const double* M = val(m);
        const double* V = val(v);
        double* Y = val_mut(id);
        for (int i = 0; i < rows(m); ++i)
            for (int j = 0; j < 3; ++j) Y[i * 3 + j] = M[i * 3 + j] + V[j];
        return id;
    }

    // y = s * x with a tape scalar s.
    Id scale_by(Id s, Id x) {
        if (size(s) != 1) throw ShapeError("scale_by: s must be scalar");
        Id id = push(OpScaleBy, s, x, rows(x), cols(x));
        const double sv = *val(s);
        const double* X = val(x);
        double* Y = val_mut(id);
        for (int i = 0; i < size(x); ++i) Y[i] = sv * X[i];
        return id;
    }

    // ---- rotations ----------------------------------------------------------

    // Rodrigues: axis-angle (3) -> rotation matrix (3 x 3).
    Id axis_angle_rotmat(Id w) {
        if (size(w) != 3) throw ShapeError("axis_angle_rotmat: expects 3-vector");
        Id id = push(OpAxisAngleRot, w, -1, 3, 3);
        const double* W = val(w);
        const Mat3 r = axis_angle_to_matrix(Vec3{W[0], W[1], W[2]});
        double* Y = val_mut(id);
        for (int i = 0; i < 9; ++i) Y[i] = r.m[static_cast<size_t>(i)];
        return id;
    }

    // Rotation about a fixed unit axis, angle is a tape scalar.
    Id hinge_rotmat(Id angle, const Vec3& axis) {
        if (size(angle) != 1) throw ShapeError("hinge_rotmat: angle must be scalar");
        Id id = push(OpHingeRot, angle, -1, 3, 3);
        aux_d(id, {axis.x, axis.y, axis.z});
        const Mat3 r = hinge_to_matrix(axis, *val(angle));
        double* Y = val_mut(id);
        for (int i = 0; i < 9; ++i) Y[i] = r.m[static_cast<size_t>(i)];
        return id;
    }

    // ---- projection ---------------------------------------------------------

    // Camera-frame points (n x 3) -> pixels (n x 2). Radial distortion k1, k2.
    // Non-positive depth is an error here; the fused loss op masks instead.
    Id pinhole_project(Id pts, const Intrinsics& in) {
        if (cols(pts) != 3) throw ShapeError("pinhole_project: expects n x 3");
        const int n = rows(pts);
        Id id = push(OpPinhole, pts, -1, n, 2);
        aux_d(id, {in.fx, in.fy, in.cx, in.cy, in.k1, in.k2});
        const double* X = val(pts);
        double* Y = val_mut(id);
        for (int i = 0; i < n; ++i) {
            const double z = X[i * 3 + 2];
            if (!(z > kMinDepth))
                throw BehindCameraError("pinhole_project: non-positive depth at point " +
                                        std::to_string(i));
            project_one(X + i * 3, in, Y + i * 2);
        }
        return id;
    }

    // Fused reprojection objective for one (timepoint, camera):
    //   sum_j w_j * huber(|| project(X_j) - y_j ||)
    // Terms behind the camera contribute zero value and zero gradient.
    Id reproj_huber(Id pts, const Intrinsics& in, std::span<const double> keypoints,
                    std::span<const double> weights, double delta) {
        if (cols(pts) != 3) throw ShapeError("reproj_huber: expects n x 3");
        const int n = rows(pts);
        if (static_cast<int>(keypoints.size()) != 2 * n ||
            static_cast<int>(weights.size()) != n)
            throw ShapeError("reproj_huber: keypoint/weight count mismatch");
        Id id = push(OpReprojHuber, pts, -1, 1, 1);
        int di = static_cast<int>(aux_doubles_.size());
        aux_doubles_.insert(aux_doubles_.end(), {in.fx, in.fy, in.cx, in.cy, in.k1, in.k2, delta});
        aux_doubles_.insert(aux_doubles_.end(), keypoints.begin(), keypoints.end());
        aux_doubles_.insert(aux_doubles_.end(), weights.begin(), weights.end());
        nodes_[static_cast<size_t>(id)].di = di;
        nodes_[static_cast<size_t>(id)].dn = 7 + 3 * n;
        const double* X = val(pts);
        double loss = 0.0;
        for (int i = 0; i < n; ++i) {
            const double z = X[i * 3 + 2];
            if (!(z > kMinDepth)) continue;
            double px[2];
            project_one(X + i * 3, in, px);
            const double dx = px[0] - keypoints[static_cast<size_t>(2 * i)];
            const double dy = px[1] - keypoints[static_cast<size_t>(2 * i + 1)];
            loss += weights[static_cast<size_t>(i)] * huber_fwd(std::sqrt(dx * dx + dy * dy), delta);
        }
        *val_mut(id) = loss;
        return id;
    }

    // ---- evaluation ---------------------------------------------------------

    int rows(Id id) const { return nodes_[static_cast<size_t>(id)].rows; }
    int cols(Id id) const { return nodes_[static_cast<size_t>(id)].cols; }
    int size(Id id) const { return rows(id) * cols(id); }

    std::span<const double> value(Id id) const {
        return {vals_.data() + nodes_[static_cast<size_t>(id)].val,
                static_cast<size_t>(size(id))};
    }
    double value_scalar(Id id) const {
        if (size(id) != 1) throw ShapeError("value_scalar: not a scalar");
        return vals_[nodes_[static_cast<size_t>(id)].val];
    }

    // Reverse sweep from a scalar node. Adjoints accumulate in node order
    // reversed, so repeated runs are bit-identical.
    void backward(Id loss) {
        if (size(loss) != 1) throw ShapeError("backward: loss must be scalar");
        adj_.assign(vals_.size(), 0.0);
        adj_[nodes_[static_cast<size_t>(loss)].val] = 1.0;
        for (Id i = static_cast<Id>(nodes_.size()) - 1; i >= 0; --i) {
            const Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.grad || i > loss) continue;
            backward_node(i, n);
        }
    }

    std::span<const double> adjoint(Id id) const {
        return {adj_.data() + nodes_[static_cast<size_t>(id)].val,
                static_cast<size_t>(size(id))};
    }

    std::span<const Id> inputs() const { return input_ids_; }
    const std::string& input_name(size_t slot) const { return input_names_[slot]; }
    size_t node_count() const { return nodes_.size(); }

    // First node holding a non-finite value, if any. Used for divergence
    // diagnostics.
    std::optional<Id> first_nonfinite() const {
        for (size_t i = 0; i < nodes_.size(); ++i) {
            const Node& n = nodes_[i];
            for (int k = 0; k < n.rows * n.cols; ++k)
                if (!std::isfinite(vals_[n.val + static_cast<size_t>(k)]))
                    return static_cast<Id>(i);
        }
        return std::nullopt;
    }

    void reset() {
        nodes_.clear();
        vals_.clear();
        adj_.clear();
        aux_ints_.clear();
        aux_doubles_.clear();
        input_ids_.clear();
        input_names_.clear();
    }

private:
    enum : std::uint8_t {
        OpInput,
        OpConst,
        OpAdd,
        OpSub,
        OpMul,
        OpScale,
        OpAffine,
        OpTanh,
        OpGelu,
        OpSin,
        OpCos,
        OpSqrt,
        OpRecip,
        OpSum,
        OpDot,
        OpProd,
        OpNorm,
        OpHuber,
        OpGather,
        OpConcat,
        OpMatMul,
        OpMatMulBT,
        OpLinear,
        OpAddRowB,
        OpScaleBy,
        OpAxisAngleRot,
        OpHingeRot,
        OpPinhole,
        OpReprojHuber,
    };

    static constexpr double kMinDepth = 1e-9;

    Id push(std::uint8_t op, Id a, Id b, int r, int c) {
        Node n;
        n.op = op;
        n.a = a;
        n.b = b;
        n.rows = r;
        n.cols = c;
        n.val = vals_.size();
        n.grad = (a >= 0 && nodes_[static_cast<size_t>(a)].grad) ||
                 (b >= 0 && nodes_[static_cast<size_t>(b)].grad);
        vals_.resize(vals_.size() + static_cast<size_t>(r) * static_cast<size_t>(c), 0.0);
        nodes_.push_back(n);
        return static_cast<Id>(nodes_.size() - 1);
    }

    void copy_in(Id id, std::span<const double> data) {
        double* y = val_mut(id);
        for (size_t i = 0; i < data.size(); ++i) y[i] = data[i];
    }

    static void check_count(size_t got, int r, int c, const char* what) {
        if (static_cast<size_t>(r) * static_cast<size_t>(c) != got)
            throw ShapeError(std::string(what) + ": data size does not match shape");
    }

    void require_same_shape(Id a, Id b, const char* what) const {
        if (rows(a) != rows(b) || cols(a) != cols(b))
            throw ShapeError(std::string(what) + ": shape mismatch");
    }

    const double* val(Id id) const { return vals_.data() + nodes_[static_cast<size_t>(id)].val; }
    double* val_mut(Id id) { return vals_.data() + nodes_[static_cast<size_t>(id)].val; }
    double* adj_mut(Id id) { return adj_.data() + nodes_[static_cast<size_t>(id)].val; }

    std::tuple<double*, const double*, const double*> vals2(Id y, Id a, Id b) {
        return {val_mut(y), val(a), val(b)};
    }

    void aux_d(Id id, std::initializer_list<double> ds) {
        nodes_[static_cast<size_t>(id)].di = static_cast<int>(aux_doubles_.size());
        nodes_[static_cast<size_t>(id)].dn = static_cast<int>(ds.size());
        aux_doubles_.insert(aux_doubles_.end(), ds.begin(), ds.end());
    }

    void aux_i(Id id, std::span<const int> is) {
        nodes_[static_cast<size_t>(id)].ai = static_cast<int>(aux_ints_.size());
        nodes_[static_cast<size_t>(id)].an = static_cast<int>(is.size());
        aux_ints_.insert(aux_ints_.end(), is.begin(), is.end());
    }

    template <class F>
    Id unary(std::uint8_t op, Id a, F&& f) {
        Id id = push(op, a, -1, rows(a), cols(a));
        const double* x = val(a);
        double* y = val_mut(id);
        for (int i = 0; i < size(id); ++i) y[i] = f(x[i]);
        return id;
    }

    static double huber_fwd(double x, double delta) {
        const double r = std::abs(x);
        return r <= delta ? 0.5 * r * r : delta * (r - 0.5 * delta);
    }
    static double huber_dfwd(double x, double delta) {
        const double r = std::abs(x);
        if (r <= delta) return x;
        return x > 0 ? delta : -delta;
    }

    static double gelu_fwd(double x) {
        const double u = kGeluC * (x + 0.044715 * x * x * x);
        return 0.5 * x * (1.0 + std::tanh(u));
    }
    static double gelu_dfwd(double x) {
        const double u = kGeluC * (x + 0.044715 * x * x * x);
        const double t = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    }
    static constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

    static void project_one(const double* p, const Intrinsics& in, double* out) {
        const double u = p[0] / p[2];
        const double v = p[1] / p[2];
        const double r2 = u * u + v * v;
        const double f = 1.0 + in.k1 * r2 + in.k2 * r2 * r2;
        out[0] = in.fx * u * f + in.cx;
        out[1] = in.fy * v * f + in.cy;
    }

    // d(pixel)/d(camera point) for one point, chained with the incoming pixel
    // adjoint (gx, gy); accumulates into gp[3].
    static void project_one_bwd(const double* p, const Intrinsics& in, double gx, double gy,
                                double* gp) {
        const double z = p[2];
        const double u = p[0] / z;
        const double v = p[1] / z;
        const double r2 = u * u + v * v;
        const double f = 1.0 + in.k1 * r2 + in.k2 * r2 * r2;
        const double g = in.k1 + 2.0 * in.k2 * r2;  // df/d(r2)
        const double gu_ = in.fx * gx;              // adjoint of u' = u*f
        const double gv_ = in.fy * gy;
        const double gu = gu_ * (f + 2.0 * u * u * g) + gv_ * (2.0 * u * v * g);
        const double gv = gu_ * (2.0 * u * v * g) + gv_ * (f + 2.0 * v * v * g);
        gp[0] += gu / z;
        gp[1] += gv / z;
        gp[2] += -(gu * u + gv * v) / z;
    }

    void backward_node(Id i, const Node& n) {
        const double* g = adj_.data() + n.val;  // adjoint of this node
        const int sz = n.rows * n.cols;
        const bool ga = n.a >= 0 && nodes_[static_cast<size_t>(n.a)].grad;
        const bool gb = n.b >= 0 && nodes_[static_cast<size_t>(n.b)].grad;
        switch (n.op) {
            case OpInput:
            case OpConst:
                break;
            case OpAdd: {
                if (ga) axpy(n.a, g, 1.0, sz);
                if (gb) axpy(n.b, g, 1.0, sz);
                break;
            }
            case OpSub: {
                if (ga) axpy(n.a, g, 1.0, sz);
                if (gb) axpy(n.b, g, -1.0, sz);
                break;
            }
            case OpMul: {
                if (ga) {
                    double* da = adj_mut(n.a);
                    const double* xb = val(n.b);
                    for (int k = 0; k < sz; ++k) da[k] += g[k] * xb[k];
                }
                if (gb) {
                    double* db = adj_mut(n.b);
                    const double* xa = val(n.a);
                    for (int k = 0; k < sz; ++k) db[k] += g[k] * xa[k];
                }
                break;
            }
            case OpScale:
                if (ga) axpy(n.a, g, aux_doubles_[static_cast<size_t>(n.di)], sz);
                break;
            case OpAffine: {
                if (ga) {
                    const double* a = aux_doubles_.data() + n.di;
                    double* da = adj_mut(n.a);
                    for (int k = 0; k < sz; ++k) da[k] += g[k] * a[k];
                }
                break;
            }
            case OpTanh: {
                if (ga) {
                    const double* y = val(i);
                    double* da = adj_mut(n.a);
                    for (int k = 0; k < sz; ++k) da[k] += g[k] * (1.0 - y[k] * y[k]);
                }
                break;
            }
            case OpGelu: {
                if (ga) {
                    const double* x = val(n.a);
                    double* da = adj_mut(n.a);
                    for (int k = 0; k < sz; ++k) da[k] += g[k] * gelu_dfwd(x[k]);
                }
                break;
            }
            case OpSin: {
                if (ga) {
                    const double* x = val(n.a);
                    double* da = adj_mut(n.a);
                    for (int k = 0; k < sz; ++k) da[k] += g[k] * std::cos(x[k]);
                }
                break;
            }
            case OpCos: {
                if (ga) {
                    const double* x = val(n.a);
                    double* da = adj_mut(n.a);
                    for (int k = 0; k < sz; ++k) da[k] -= g[k] * std::sin(x[k]);
                }
                break;
            }
            case OpSqrt: {
                if (ga) {
                    const double* y = val(i);
                    double* da = adj_mut(n.a);
                    for (int k = 0; k < sz; ++k) da[k] += g[k] * 0.5 / y[k];
                }
                break;
            }
            case OpRecip: {
                if (ga) {
                    const double* y = val(i);
                    double* da = adj_mut(n.a);
                    for (int k = 0; k < sz; ++k) da[k] -= g[k] * y[k] * y[k];
                }
                break;
            }
            case OpSum: {
                if (ga) {
                    double* da = adj_mut(n.a);
                    const double gs = g[0];
                    for (int k = 0; k < size(n.a); ++k) da[k] += gs;
                }
                break;
            }
            case OpDot: {
                const double gs = g[0];
                if (ga) {
                    double* da = adj_mut(n.a);
                    const double* xb = val(n.b);
                    for (int k = 0; k < size(n.a); ++k) da[k] += gs * xb[k];
                }
                if (gb) {
                    double* db = adj_mut(n.b);
                    const double* xa = val(n.a);
                    for (int k = 0; k < size(n.a); ++k) db[k] += gs * xa[k];
                }
                break;
            }
            case OpProd: {
                if (ga) {
                    // Prefix/suffix products; exact with zero entries.
                    const int m = size(n.a);
                    const double* x = val(n.a);
                    double* da = adj_mut(n.a);
                    std::vector<double> pre(static_cast<size_t>(m) + 1, 1.0);
                    std::vector<double> suf(static_cast<size_t>(m) + 1, 1.0);
                    for (int k = 0; k < m; ++k) pre[static_cast<size_t>(k + 1)] = pre[static_cast<size_t>(k)] * x[k];
                    for (int k = m - 1; k >= 0; --k) suf[static_cast<size_t>(k)] = suf[static_cast<size_t>(k + 1)] * x[k];
                    const double gs = g[0];
                    for (int k = 0; k < m; ++k)
                        da[k] += gs * pre[static_cast<size_t>(k)] * suf[static_cast<size_t>(k + 1)];
                }
                break;
            }
            case OpNorm: {
                if (ga) {
                    const double y = *val(i);
                    if (y > 0.0) {
                        const double gs = g[0] / y;
                        const double* x = val(n.a);
                        double* da = adj_mut(n.a);
                        for (int k = 0; k < size(n.a); ++k) da[k] += gs * x[k];
                    }
                }
                break;
            }
            case OpHuber: {
                if (ga) {
                    const double delta = aux_doubles_[static_cast<size_t>(n.di)];
                    const double* x = val(n.a);
                    double* da = adj_mut(n.a);
                    for (int k = 0; k < sz; ++k) da[k] += g[k] * huber_dfwd(x[k], delta);
                }
                break;
            }
            case OpGather: {
                if (ga) {
                    const int* idx = aux_ints_.data() + n.ai;
                    double* da = adj_mut(n.a);
                    for (int k = 0; k < n.an; ++k) da[idx[k]] += g[k];
                }
                break;
            }
            case OpConcat: {
                const int* ids = aux_ints_.data() + n.ai;
                int off = 0;
                for (int k = 0; k < n.an; ++k) {
                    const Id p = ids[k];
                    const int psz = size(p);
                    if (nodes_[static_cast<size_t>(p)].grad) {
                        double* dp = adj_mut(p);
                        for (int q = 0; q < psz; ++q) dp[q] += g[off + q];
                    }
                    off += psz;
                }
                break;
            }
            case OpMatMul: {
                const int m = rows(n.a), k = cols(n.a), c = n.cols;
                if (ga) {
                    // dA = g * B^T
                    double* da = adj_mut(n.a);
                    const double* B = val(n.b);
                    for (int r = 0; r < m; ++r)
                        for (int p = 0; p < k; ++p) {
                            double s = 0.0;
                            const double* grow = g + r * c;
                            const double* brow = B + p * c;
                            for (int j = 0; j < c; ++j) s += grow[j] * brow[j];
                            da[r * k + p] += s;
                        }
                }
                if (gb) {
                    // dB = A^T * g
                    double* db = adj_mut(n.b);
                    const double* A = val(n.a);
                    for (int p = 0; p < k; ++p)
                        for (int r = 0; r < m; ++r) {
                            const double av = A[r * k + p];
                            const double* grow = g + r * c;
                            double* brow = db + p * c;
                            for (int j = 0; j < c; ++j) brow[j] += av * grow[j];
                        }
                }
                break;
            }
            case OpMatMulBT: {
                // y = A * B^T, A: m x k, B: n x k, y: m x n
                const int m = rows(n.a), k = cols(n.a), c = n.cols;
                if (ga) {
                    // dA = g * B
                    double* da = adj_mut(n.a);
                    const double* B = val(n.b);
                    for (int r = 0; r < m; ++r)
                        for (int j = 0; j < c; ++j) {
                            const double gv = g[r * c + j];
                            const double* brow = B + j * k;
                            double* arow = da + r * k;
                            for (int p = 0; p < k; ++p) arow[p] += gv * brow[p];
                        }
                }
                if (gb) {
                    // dB = g^T * A
                    double* db = adj_mut(n.b);
                    const double* A = val(n.a);
                    for (int r = 0; r < m; ++r)
                        for (int j = 0; j < c; ++j) {
                            const double gv = g[r * c + j];
                            const double* arow = A + r * k;
                            double* brow = db + j * k;
                            for (int p = 0; p < k; ++p) brow[p] += gv * arow[p];
                        }
                }
                break;
            }
            case OpLinear: {
                const int m = n.rows, k = cols(n.a);
                const bool gc = n.c >= 0 && nodes_[static_cast<size_t>(n.c)].grad;
                if (ga) {
                    double* dw = adj_mut(n.a);
                    const double* X = val(n.c);
                    for (int r = 0; r < m; ++r) {
                        const double gv = g[r];
                        double* wrow = dw + r * k;
                        for (int p = 0; p < k; ++p) wrow[p] += gv * X[p];
                    }
                }
                if (gb) axpy(n.b, g, 1.0, m);
                if (gc) {
                    double* dx = adj_mut(n.c);
                    const double* W = val(n.a);
                    for (int r = 0; r < m; ++r) {
                        const double gv = g[r];
                        const double* wrow = W + r * k;
                        for (int p = 0; p < k; ++p) dx[p] += gv * wrow[p];
                    }
                }
                break;
            }
            case OpAddRowB: {
                if (ga) axpy(n.a, g, 1.0, sz);
                if (gb) {
                    double* db = adj_mut(n.b);
                    for (int r = 0; r < n.rows; ++r)
                        for (int j = 0; j < 3; ++j) db[j] += g[r * 3 + j];
                }
                break;
            }
            case OpScaleBy: {
                if (ga) {
                    const double* x = val(n.b);
                    double s = 0.0;
                    for (int k = 0; k < sz; ++k) s += g[k] * x[k];
                    *adj_mut(n.a) += s;
                }
                if (gb) {
                    const double sv = *val(n.a);
                    axpy(n.b, g, sv, sz);
                }
                break;
            }
            case OpAxisAngleRot:
                if (ga) axis_angle_rot_bwd(i, n, g);
                break;
            case OpHingeRot: {
                if (ga) {
                    const double* ax = aux_doubles_.data() + n.di;
                    const Vec3 axis{ax[0], ax[1], ax[2]};
                    const double th = *val(n.a);
                    const Mat3 k = skew(axis);
                    const Mat3 k2 = k * k;
                    const double c = std::cos(th), s = std::sin(th);
                    double acc = 0.0;
                    for (int q = 0; q < 9; ++q)
                        acc += g[q] * (c * k.m[static_cast<size_t>(q)] + s * k2.m[static_cast<size_t>(q)]);
                    *adj_mut(n.a) += acc;
                }
                break;
            }
            case OpPinhole: {
                if (ga) {
                    const double* d = aux_doubles_.data() + n.di;
                    const Intrinsics in{d[0], d[1], d[2], d[3], d[4], d[5]};
                    const double* X = val(n.a);
                    double* dx = adj_mut(n.a);
                    for (int r = 0; r < n.rows; ++r)
                        project_one_bwd(X + r * 3, in, g[r * 2], g[r * 2 + 1], dx + r * 3);
                }
                break;
            }
            case OpReprojHuber: {
                if (ga) {
                    const double* d = aux_doubles_.data() + n.di;
                    const Intrinsics in{d[0], d[1], d[2], d[3], d[4], d[5]};
                    const double delta = d[6];
                    const int m = rows(n.a);
                    const double* kp = d + 7;
                    const double* w = d + 7 + 2 * m;
                    const double* X = val(n.a);
                    double* dx = adj_mut(n.a);
                    const double gs = g[0];
                    for (int r = 0; r < m; ++r) {
                        const double z = X[r * 3 + 2];
                        if (!(z > kMinDepth)) continue;
                        double px[2];
                        project_one(X + r * 3, in, px);
                        const double ex = px[0] - kp[2 * r];
                        const double ey = px[1] - kp[2 * r + 1];
                        const double rr = std::sqrt(ex * ex + ey * ey);
                        // d(huber(r))/d(e) = e for r <= delta, delta*e/r beyond.
                        double cx, cy;
                        if (rr <= delta) {
                            cx = ex;
                            cy = ey;
                        } else {
                            cx = delta * ex / rr;
                            cy = delta * ey / rr;
                        }
                        project_one_bwd(X + r * 3, in, gs * w[r] * cx, gs * w[r] * cy, dx + r * 3);
                    }
                }
                break;
            }
            default:
                throw NumericError("backward: unknown op");
        }
    }

    void axpy(Id dst, const double* g, double s, int sz) {
        double* d = adj_mut(dst);
        for (int k = 0; k < sz; ++k) d[k] += s * g[k];
    }

    void axis_angle_rot_bwd(Id i, const Node& n, const double* g) {
        const double* wv = val(n.a);
        const Vec3 w{wv[0], wv[1], wv[2]};
        const double theta2 = w.dot(w);
        const double theta = std::sqrt(theta2);
        double a, b, ra, rb;  // coefficients and their theta-derivatives / theta
        if (theta < kSmallAngle) {
            a = 1.0 - theta2 / 6.0;
            b = 0.5 - theta2 / 24.0;
            ra = -1.0 / 3.0 + theta2 / 30.0;
            rb = -1.0 / 12.0 + theta2 / 180.0;
        } else {
            const double st = std::sin(theta), ct = std::cos(theta);
            a = st / theta;
            b = (1.0 - ct) / theta2;
            ra = (theta * ct - st) / (theta2 * theta);
            rb = (theta * st + 2.0 * ct - 2.0) / (theta2 * theta2);
        }
        const Mat3 K = skew(w);
        const Mat3 K2 = K * K;
        double s1 = 0.0, s2 = 0.0;  // <g, K>, <g, K^2>
        for (int q = 0; q < 9; ++q) {
            s1 += g[q] * K.m[static_cast<size_t>(q)];
            s2 += g[q] * K2.m[static_cast<size_t>(q)];
        }
        // H = G*K^T + K^T*G collects the <g, E_i K + K E_i> terms.
        Mat3 G;
        for (int q = 0; q < 9; ++q) G.m[static_cast<size_t>(q)] = g[q];
        const Mat3 Kt = K.transposed();
        const Mat3 H1 = G * Kt;
        const Mat3 H2 = Kt * G;
        Mat3 H;
        for (size_t q = 0; q < 9; ++q) H.m[q] = H1.m[q] + H2.m[q];
        auto skew_dot = [](const Mat3& M, int axis_i) {
            // <M, [e_i]x>
            switch (axis_i) {
                case 0: return M(2, 1) - M(1, 2);
                case 1: return M(0, 2) - M(2, 0);
                default: return M(1, 0) - M(0, 1);
            }
        };
        double* dw = adj_mut(n.a);
        for (int q = 0; q < 3; ++q) {
            const double common = (ra * s1 + rb * s2) * w[q];
            const double e_terms = a * skew_dot(G, q) + b * skew_dot(H, q);
            dw[q] += common + e_terms;
        }
        (void)i;
    }

    std::vector<Node> nodes_;
    std::vector<double> vals_;
    std::vector<double> adj_;
    std::vector<int> aux_ints_;
    std::vector<double> aux_doubles_;
    std::vector<Id> input_ids_;
    std::vector<std::string> input_names_;
};

// Loss value plus one gradient array per input slot, in declaration order.
struct GradientResult {
    double value = 0.0;
    std::vector<std::string> names;
    std::vector<std::vector<double>> grads;
};

inline GradientResult evaluate_with_gradients(Tape& tape, Id loss) {
    GradientResult r;
    r.value = tape.value_scalar(loss);
    if (!std::isfinite(r.value)) {
        auto bad = tape.first_nonfinite();
        throw NumericError("evaluate_with_gradients: non-finite value at node " +
                           std::to_string(bad ? *bad : loss));
    }
    tape.backward(loss);
    for (Id in : tape.inputs()) {
        auto g = tape.adjoint(in);
        r.grads.emplace_back(g.begin(), g.end());
    }
    for (size_t s = 0; s < tape.inputs().size(); ++s) r.names.push_back(tape.input_name(s));
    return r;
}

// Convenience: apply an axis-angle rotation to a 3-vector.
inline Id rotate_vec(Tape& t, Id axis_angle, Id v) {
    return t.matvec(t.axis_angle_rotmat(axis_angle), v);
}

}  // namespace kinefit::ad

#pragma once

#include <array>
#include <utility>

#include "acdet/autograd.hpp"
#include "acdet/tensor.hpp"

namespace acdet {

// ============================================================================
// Affine transforms over normalized image coordinates.
//
// Convention: a point is (u, v) with u the vertical coordinate normalized by
// the image height and v the horizontal coordinate normalized by the width,
// both in [0, 1]. Pixel-facing interfaces convert at the boundary. Entry
// layout of the 6-vector is row-major: (t11, t12, t13, t21, t22, t23) with the
// homogeneous row fixed at (0, 0, 1).
// ============================================================================

inline constexpr double kScaleMin = 0.2;
inline constexpr double kScaleMax = 2.0;
inline constexpr double kTransMin = -0.5;
inline constexpr double kTransMax = 0.5;
inline constexpr double kShearMin = -1.0;
inline constexpr double kShearMax = 1.0;
inline constexpr double kDetEps = 1e-6;

struct AffineMatrix {
    double t11 = 1.0, t12 = 0.0, t13 = 0.0;
    double t21 = 0.0, t22 = 1.0, t23 = 0.0;

    static AffineMatrix identity() { return {}; }
    static AffineMatrix from_array(const std::array<double, 6>& a) {
        return {a[0], a[1], a[2], a[3], a[4], a[5]};
    }
    std::array<double, 6> to_array() const { return {t11, t12, t13, t21, t22, t23}; }
    double det() const { return t11 * t22 - t12 * t21; }
};

inline const char* affine_entry_name(int i) {
    static const char* names[6] = {"t11", "t12", "t13", "t21", "t22", "t23"};
    return names[i];
}

/// Per-entry clamp bounds in 6-vector order.
inline std::array<double, 6> affine_clamp_lo() {
    return {kScaleMin, kShearMin, kTransMin, kShearMin, kScaleMin, kTransMin};
}
inline std::array<double, 6> affine_clamp_hi() {
    return {kScaleMax, kShearMax, kTransMax, kShearMax, kScaleMax, kTransMax};
}

inline AffineMatrix clamp_affine(const std::array<double, 6>& raw) {
    for (int i = 0; i < 6; ++i)
        if (!std::isfinite(raw[i]))
            throw ConfigError(std::string("clamp_affine: non-finite entry ") +
                              affine_entry_name(i));
    auto lo = affine_clamp_lo();
    auto hi = affine_clamp_hi();
    std::array<double, 6> c;
    for (int i = 0; i < 6; ++i) c[i] = std::clamp(raw[i], lo[i], hi[i]);
    return AffineMatrix::from_array(c);
}

inline std::pair<double, double> transform_point(double u, double v, const AffineMatrix& A) {
    return {A.t11 * u + A.t12 * v + A.t13, A.t21 * u + A.t22 * v + A.t23};
}

/// Inverse of the affine map. The result is not re-clamped.
inline AffineMatrix invert_affine(const AffineMatrix& A, double eps_det = kDetEps) {
    double det = A.det();
    if (std::abs(det) <= eps_det)
        throw SingularTransformError("invert_affine: determinant " + std::to_string(det) +
                                     " below threshold");
    AffineMatrix inv;
    inv.t11 = A.t22 / det;
    inv.t12 = -A.t12 / det;
    inv.t13 = (A.t12 * A.t23 - A.t13 * A.t22) / det;
    inv.t21 = -A.t21 / det;
    inv.t22 = A.t11 / det;
    inv.t23 = (A.t13 * A.t21 - A.t11 * A.t23) / det;
    return inv;
}

// ============================================================================
// Bilinear sampling. Coordinates are in pixel-node space: integer (py, px)
// lands exactly on stored pixel (py, px). Out-of-image neighbors read as 0.
// ============================================================================

namespace detail {
inline double pixel_or_zero(const Tensor& img, int ch, int y, int x) {
    if (y < 0 || y >= img.shape[1] || x < 0 || x >= img.shape[2]) return 0.0;
    return img.at3(ch, y, x);
}
}  // namespace detail

/// image: [C,H,W]; returns one value per channel.
inline std::vector<double> bilinear_sample(const Tensor& image, double py, double px) {
    int C = image.shape[0];
    double fy = std::floor(py), fx = std::floor(px);
    int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
    double wy = py - fy, wx = px - fx;
    std::vector<double> out(C);
    for (int c = 0; c < C; ++c) {
        double v00 = detail::pixel_or_zero(image, c, y0, x0);
        double v01 = detail::pixel_or_zero(image, c, y0, x0 + 1);
        double v10 = detail::pixel_or_zero(image, c, y0 + 1, x0);
        double v11 = detail::pixel_or_zero(image, c, y0 + 1, x0 + 1);
        out[c] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) + wy * ((1.0 - wx) * v10 + wx * v11);
    }
    return out;
}

struct BilinearGrad {
    std::vector<double> value, dpy, dpx;
};

/// Value plus analytic derivative w.r.t. the sample coordinates.
inline BilinearGrad bilinear_sample_grad(const Tensor& image, double py, double px) {
    int C = image.shape[0];
    double fy = std::floor(py), fx = std::floor(px);
    int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
    double wy = py - fy, wx = px - fx;
    BilinearGrad g{std::vector<double>(C), std::vector<double>(C), std::vector<double>(C)};
    for (int c = 0; c < C; ++c) {
        double v00 = detail::pixel_or_zero(image, c, y0, x0);
        double v01 = detail::pixel_or_zero(image, c, y0, x0 + 1);
        double v10 = detail::pixel_or_zero(image, c, y0 + 1, x0);
        double v11 = detail::pixel_or_zero(image, c, y0 + 1, x0 + 1);
        g.value[c] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) +
                     wy * ((1.0 - wx) * v10 + wx * v11);
        g.dpy[c] = -((1.0 - wx) * v00 + wx * v01) + ((1.0 - wx) * v10 + wx * v11);
        g.dpx[c] = (1.0 - wy) * (v01 - v00) + wy * (v11 - v10);
    }
    return g;
}

// ============================================================================
// Image warping. Output pixel (r, c) takes its normalized coordinate
// ((r+0.5)/H, (c+0.5)/W), maps it back through the inverse transform and
// samples the source there. Identity transforms reproduce the input bitwise.
// ============================================================================

inline Tensor warp_image(const Tensor& image, const AffineMatrix& A, double eps_det = kDetEps) {
    AffineMatrix inv = invert_affine(A, eps_det);
    int C = image.shape[0], H = image.shape[1], W = image.shape[2];
    Tensor out({C, H, W});
    for (int r = 0; r < H; ++r) {
        double up = (r + 0.5) / H;
        for (int c = 0; c < W; ++c) {
            double vp = (c + 0.5) / W;
            auto [u, v] = transform_point(up, vp, inv);
            double py = u * H - 0.5, px = v * W - 0.5;
            auto vals = bilinear_sample(image, py, px);
            for (int ch = 0; ch < C; ++ch) out.at3(ch, r, c) = vals[ch];
        }
    }
    return out;
}

// ============================================================================
// Point-set alignment: forward-map each point, drop those leaving the frame.
// Payload rows follow their point.
// ============================================================================

struct PointList {
    Tensor coords;   // [N,2] (u,v)
    Tensor payload;  // [N,P]; P = 0 when absent

    int size() const { return coords.data.empty() ? 0 : coords.rows(); }
    int payload_dim() const { return payload.rank() == 2 ? payload.cols() : 0; }
};

inline PointList make_point_list(int n, int payload_dim) {
    PointList p;
    p.coords = Tensor({n, 2});
    p.payload = Tensor({n, payload_dim});
    return p;
}

/// Normalized-coordinate alignment; keeps points with mapped (u,v) in [0,1]^2.
inline PointList align_points(const PointList& pts, const AffineMatrix& A) {
    int n = pts.size(), pd = pts.payload_dim();
    std::vector<int> keep;
    std::vector<std::pair<double, double>> mapped;
    keep.reserve(n);
    for (int i = 0; i < n; ++i) {
        auto [u, v] = transform_point(pts.coords.at(i, 0), pts.coords.at(i, 1), A);
        if (u >= 0.0 && u <= 1.0 && v >= 0.0 && v <= 1.0) {
            keep.push_back(i);
            mapped.emplace_back(u, v);
        }
    }
    PointList out = make_point_list(static_cast<int>(keep.size()), pd);
    for (size_t j = 0; j < keep.size(); ++j) {
        out.coords.at(static_cast<int>(j), 0) = mapped[j].first;
        out.coords.at(static_cast<int>(j), 1) = mapped[j].second;
        for (int k = 0; k < pd; ++k)
            out.payload.at(static_cast<int>(j), k) = pts.payload.at(keep[j], k);
    }
    return out;
}

/// Pixel-facing alignment: coords in pixels (y, x), bounds [0,H]x[0,W].
inline PointList align_points_px(const PointList& pts_px, const AffineMatrix& A, int H, int W) {
    PointList norm = pts_px;
    for (int i = 0; i < norm.size(); ++i) {
        norm.coords.at(i, 0) /= H;
        norm.coords.at(i, 1) /= W;
    }
    PointList out = align_points(norm, A);
    for (int i = 0; i < out.size(); ++i) {
        out.coords.at(i, 0) *= H;
        out.coords.at(i, 1) *= W;
    }
    return out;
}

// ============================================================================
// Differentiable variants (autograd)
// ============================================================================

/// Clamp a raw 6-vector into the valid parameter box; straight-through inside,
/// zero gradient outside.
inline Var var_clamp_affine(const Var& raw6) {
    if (raw6.value().numel() != 6) throw ConfigError("var_clamp_affine expects 6 values");
    for (int i = 0; i < 6; ++i)
        if (!std::isfinite(raw6.value()[i]))
            throw ConfigError(std::string("var_clamp_affine: non-finite entry ") +
                              affine_entry_name(i));
    auto lo = affine_clamp_lo();
    auto hi = affine_clamp_hi();
    Tensor tlo({6}), thi({6});
    for (int i = 0; i < 6; ++i) {
        tlo[i] = lo[i];
        thi[i] = hi[i];
    }
    return clamp_elem(raw6, std::move(tlo), std::move(thi));
}

/// Inverse of an affine 6-vector, composed from differentiable primitives.
inline Var var_affine_inverse(const Var& a6, double eps_det = kDetEps) {
    if (a6.value().numel() != 6) throw ConfigError("var_affine_inverse expects 6 values");
    Var a = slice_flat(a6, 0, 1), b = slice_flat(a6, 1, 1), c = slice_flat(a6, 2, 1);
    Var d = slice_flat(a6, 3, 1), e = slice_flat(a6, 4, 1), f = slice_flat(a6, 5, 1);
    Var det = sub(mul(a, e), mul(b, d));
    if (std::abs(det.value()[0]) <= eps_det)
        throw SingularTransformError("var_affine_inverse: determinant " +
                                     std::to_string(det.value()[0]) + " below threshold");
    return concat_flat({div_elem(e, det), neg(div_elem(b, det)),
                        div_elem(sub(mul(b, f), mul(c, e)), det), neg(div_elem(d, det)),
                        div_elem(a, det), div_elem(sub(mul(c, d), mul(a, f)), det)});
}

/// Differentiable warp given the inverse transform; gradients flow into both
/// the image and the inverse parameters (and through them into the forward
/// transform when composed with var_affine_inverse).
inline Var var_warp_with_inverse(const Var& image, const Var& inv6) {
    const Tensor& img = image.value();
    if (img.rank() != 3) throw ConfigError("var_warp_with_inverse expects [C,H,W] image");
    int C = img.shape[0], H = img.shape[1], W = img.shape[2];
    AffineMatrix inv = AffineMatrix::from_array(
        {inv6.value()[0], inv6.value()[1], inv6.value()[2], inv6.value()[3], inv6.value()[4],
         inv6.value()[5]});
    Tensor out({C, H, W});
    for (int r = 0; r < H; ++r) {
        double up = (r + 0.5) / H;
        for (int c = 0; c < W; ++c) {
            double vp = (c + 0.5) / W;
            auto [u, v] = transform_point(up, vp, inv);
            auto vals = bilinear_sample(img, u * H - 0.5, v * W - 0.5);
            for (int ch = 0; ch < C; ++ch) out.at3(ch, r, c) = vals[ch];
        }
    }
    return make_op(std::move(out), {image, inv6}, [C, H, W](Node& self) {
        Node* pimg = self.inputs[0].n.get();
        Node* pinv = self.inputs[1].n.get();
        const Tensor& img = pimg->value;
        AffineMatrix inv = AffineMatrix::from_array(
            {pinv->value[0], pinv->value[1], pinv->value[2], pinv->value[3], pinv->value[4],
             pinv->value[5]});
        Tensor* gimg = pimg->requires_grad ? &pimg->ensure_grad() : nullptr;
        Tensor* ginv = pinv->requires_grad ? &pinv->ensure_grad() : nullptr;
        for (int r = 0; r < H; ++r) {
            double up = (r + 0.5) / H;
            for (int c = 0; c < W; ++c) {
                double vp = (c + 0.5) / W;
                auto [u, v] = transform_point(up, vp, inv);
                double py = u * H - 0.5, px = v * W - 0.5;
                double fy = std::floor(py), fx = std::floor(px);
                int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
                double wy = py - fy, wx = px - fx;
                double acc_dpy = 0.0, acc_dpx = 0.0;
                for (int ch = 0; ch < C; ++ch) {
                    double go = self.grad.at3(ch, r, c);
                    if (go == 0.0) continue;
                    double v00 = detail::pixel_or_zero(img, ch, y0, x0);
                    double v01 = detail::pixel_or_zero(img, ch, y0, x0 + 1);
                    double v10 = detail::pixel_or_zero(img, ch, y0 + 1, x0);
                    double v11 = detail::pixel_or_zero(img, ch, y0 + 1, x0 + 1);
                    if (ginv) {
                        acc_dpy += go * (-((1.0 - wx) * v00 + wx * v01) +
                                         ((1.0 - wx) * v10 + wx * v11));
                        acc_dpx += go * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
                    }
                    if (gimg) {
                        auto scatter = [&](int y, int x, double w) {
                            if (y >= 0 && y < H && x >= 0 && x < W)
                                gimg->at3(ch, y, x) += go * w;
                        };
                        scatter(y0, x0, (1.0 - wy) * (1.0 - wx));
                        scatter(y0, x0 + 1, (1.0 - wy) * wx);
                        scatter(y0 + 1, x0, wy * (1.0 - wx));
                        scatter(y0 + 1, x0 + 1, wy * wx);
                    }
                }
                if (ginv) {
                    // py = (inv . (up,vp))_u * H - 0.5, px likewise with W
                    double du = acc_dpy * H, dv = acc_dpx * W;
                    (*ginv)[0] += du * up;
                    (*ginv)[1] += du * vp;
                    (*ginv)[2] += du;
                    (*ginv)[3] += dv * up;
                    (*ginv)[4] += dv * vp;
                    (*ginv)[5] += dv;
                }
            }
        }
    });
}

/// Differentiable warp by the forward transform A (6-vector Var).
inline Var var_warp_image(const Var& image, const Var& a6, double eps_det = kDetEps) {
    return var_warp_with_inverse(image, var_affine_inverse(a6, eps_det));
}

}  // namespace acdet

#ifndef PULPO_FIELD_OPS_HPP
#define PULPO_FIELD_OPS_HPP

#include <torch/torch.h>

#include <string>
#include <vector>

#include "pulpo/core.hpp"

// Dimension-generic kernels on batched tensors [N, C, *spatial] with the
// spatial rank D = dim()-2 in {2,3}. Displacement fields carry D channels,
// channel a displacing along spatial axis a, in voxel units. All functions
// are pure and differentiable where it matters for training.
namespace pulpo::ops {

enum class Interp { linear, nearest };

inline int64_t spatial_dim(const torch::Tensor& t) {
    PULPO_REQUIRE(t.dim() == 4 || t.dim() == 5,
                  "expected a batched tensor [N, C, *spatial] with D in {2,3}");
    return t.dim() - 2;
}

inline std::vector<int64_t> spatial_sizes(const torch::Tensor& t) {
    return std::vector<int64_t>(t.sizes().begin() + 2, t.sizes().end());
}

/// Identity coordinate grid as a displacement-shaped tensor [1, D, *spatial]:
/// channel a holds the voxel index along axis a.
inline torch::Tensor identity_grid(const std::vector<int64_t>& sizes,
                                   const torch::TensorOptions& opts) {
    const auto d = static_cast<int64_t>(sizes.size());
    std::vector<torch::Tensor> axes;
    axes.reserve(d);
    for (int64_t a = 0; a < d; ++a)
        axes.push_back(torch::arange(sizes[a], opts));
    auto mesh = torch::meshgrid(axes, "ij");
    return torch::stack(mesh, 0).unsqueeze(0);
}

/// Pull-back warp: out(x) = source(x + u(x)), reads clamped to the border.
/// Linear interpolation for intensities, nearest for hard labels.
inline torch::Tensor warp(const torch::Tensor& source, const torch::Tensor& field,
                          Interp interp = Interp::linear) {
    const auto d = spatial_dim(source);
    PULPO_REQUIRE(field.dim() == source.dim() && field.size(1) == d,
                  "warp: field must be [N, D, *spatial] matching the source rank");
    PULPO_REQUIRE(spatial_sizes(source) == spatial_sizes(field),
                  "warp: source and field must share spatial shape");
    if (!field.requires_grad())
        PULPO_REQUIRE(field.isfinite().all().item<bool>(), "warp: non-finite field");

    const auto sizes = spatial_sizes(source);
    auto pos = field + identity_grid(sizes, field.options());  // [N, D, *S]

    // grid_sample wants normalized coords in [-1,1], fastest axis first.
    std::vector<torch::Tensor> coords;
    coords.reserve(d);
    for (int64_t a = d - 1; a >= 0; --a) {
        auto c = pos.select(1, a);
        coords.push_back(2.0 * c / static_cast<double>(sizes[a] - 1) - 1.0);
    }
    auto grid = torch::stack(coords, -1);  // [N, *S, D]

    namespace F = torch::nn::functional;
    auto o = F::GridSampleFuncOptions().padding_mode(torch::kBorder).align_corners(true);
    if (interp == Interp::linear)
        o = o.mode(torch::kBilinear);  // trilinear for 3D inputs
    else
        o = o.mode(torch::kNearest);
    auto out = F::grid_sample(source, grid, o);
    return out;
}

/// Composition on displacements: (outer ∘ inner)(x) = outer(inner(x)), i.e.
/// u(x) = u_inner(x) + u_outer(x + u_inner(x)).
inline torch::Tensor compose(const torch::Tensor& outer, const torch::Tensor& inner) {
    PULPO_REQUIRE(outer.sizes() == inner.sizes(), "compose: shape mismatch");
    return inner + warp(outer, inner);
}

/// Scaling and squaring: phi ~= exp(v). Halve `steps` times, then
/// self-compose `steps` times.
inline torch::Tensor integrate_svf(const torch::Tensor& v, int steps = 7) {
    PULPO_REQUIRE(steps >= 1, "integrate_svf: steps must be >= 1");
    if (!v.requires_grad())
        PULPO_REQUIRE(v.isfinite().all().item<bool>(), "integrate_svf: non-finite velocity");
    auto u = v * std::pow(2.0, -steps);
    for (int s = 0; s < steps; ++s)
        u = compose(u, u);
    return u;
}

/// Linear ×1/2 downscale (anti-aliased 2^D-box average) or ×2 upscale.
/// Odd axes on downscale use floor semantics.
inline torch::Tensor resize_half(const torch::Tensor& img) {
    namespace F = torch::nn::functional;
    if (spatial_dim(img) == 2)
        return F::avg_pool2d(img, F::AvgPool2dFuncOptions(2).stride(2));
    return F::avg_pool3d(img, F::AvgPool3dFuncOptions(2).stride(2));
}

inline torch::Tensor resize_double(const torch::Tensor& img) {
    namespace F = torch::nn::functional;
    auto o = F::InterpolateFuncOptions().scale_factor(std::vector<double>(spatial_dim(img), 2.0));
    if (spatial_dim(img) == 2)
        o = o.mode(torch::kBilinear).align_corners(false);
    else
        o = o.mode(torch::kTrilinear).align_corners(false);
    return F::interpolate(img, o);
}

/// Velocity upsampling bridge between pyramid levels: double the grid and
/// express the vectors in the finer grid's voxel units (×2).
inline torch::Tensor upsample_velocity(const torch::Tensor& v) {
    return resize_double(v) * 2.0;
}

namespace detail {

/// Derivative of every channel along spatial axis `axis`: central differences
/// on the interior, one-sided at the two borders. Shape-preserving.
inline torch::Tensor deriv_central(const torch::Tensor& t, int64_t axis) {
    const int64_t a = axis + 2;
    const int64_t n = t.size(a);
    auto fwd = t.narrow(a, 1, n - 1) - t.narrow(a, 0, n - 1);  // one-sided
    auto first = fwd.narrow(a, 0, 1);
    auto last = fwd.narrow(a, n - 2, 1);
    auto central = (t.narrow(a, 2, n - 2) - t.narrow(a, 0, n - 2)) * 0.5;
    return torch::cat({first, central, last}, a);
}

}  // namespace detail

/// det(grad(x + u(x))) per voxel, [N, *spatial]. Central differences on the
/// interior, one-sided at borders; the identity field maps to 1 everywhere.
inline torch::Tensor jacobian_determinant(const torch::Tensor& field) {
    const auto d = spatial_dim(field);
    PULPO_REQUIRE(field.size(1) == d, "jacobian_determinant: channel count must equal D");
    for (auto s : spatial_sizes(field))
        PULPO_REQUIRE(s >= 3, "jacobian_determinant: spatial extents must be >= 3");

    // J[i][j] = d(x_i + u_i)/dx_j
    std::vector<std::vector<torch::Tensor>> J(d, std::vector<torch::Tensor>(d));
    for (int64_t j = 0; j < d; ++j) {
        auto dj = detail::deriv_central(field, j);  // [N, D, *S]
        for (int64_t i = 0; i < d; ++i)
            J[i][j] = dj.select(1, i) + (i == j ? 1.0 : 0.0);
    }
    if (d == 2)
        return J[0][0] * J[1][1] - J[0][1] * J[1][0];
    return J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
           J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
           J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
}

/// Forward differences of every channel along each spatial axis, last slice
/// replicated (zero gradient there). Returns one tensor per axis, each the
/// shape of `field`.
inline std::vector<torch::Tensor> spatial_gradient(const torch::Tensor& field) {
    const auto d = spatial_dim(field);
    std::vector<torch::Tensor> out;
    out.reserve(d);
    for (int64_t axis = 0; axis < d; ++axis) {
        const int64_t a = axis + 2;
        const int64_t n = field.size(a);
        auto diff = field.narrow(a, 1, n - 1) - field.narrow(a, 0, n - 1);
        auto zero = torch::zeros_like(field.narrow(a, 0, 1));
        out.push_back(torch::cat({diff, zero}, a));
    }
    return out;
}

}  // namespace pulpo::ops

#endif

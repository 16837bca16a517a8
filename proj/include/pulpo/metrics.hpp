#ifndef PULPO_METRICS_HPP
#define PULPO_METRICS_HPP

#include <torch/torch.h>

#include <cmath>
#include <map>
#include <vector>

#include "pulpo/core.hpp"
#include "pulpo/field_ops.hpp"

// Evaluation suite: alignment (RMSE, soft DSC, TRE), deformation regularity
// (% nonpositive Jacobian) and uncertainty calibration (signed global Pearson
// between predicted variance and realized squared error).
namespace pulpo::metrics {

inline double rmse(const torch::Tensor& a, const torch::Tensor& b) {
    PULPO_REQUIRE(a.sizes() == b.sizes(), "rmse: shape mismatch");
    return std::sqrt((a - b).pow(2).mean().item<double>());
}

/// One-hot stack [n_labels, *spatial] over the foreground labels (> 0) of an
/// integer label grid [*spatial].
inline torch::Tensor one_hot_labels(const torch::Tensor& seg, const std::vector<int64_t>& labels) {
    std::vector<torch::Tensor> chans;
    chans.reserve(labels.size());
    for (auto lb : labels)
        chans.push_back((seg == lb).to(torch::kFloat32));
    return torch::stack(chans, 0);
}

/// Mean over labels of 2*sum(p*q) / (sum p + sum q + eps) on (possibly
/// fractional) one-hot stacks [n_labels, *spatial].
inline double soft_dsc(const torch::Tensor& warped_onehot, const torch::Tensor& target_onehot,
                       double eps = 1e-6) {
    PULPO_REQUIRE(warped_onehot.sizes() == target_onehot.sizes(),
                  "soft_dsc: label stacks must share shape");
    const int64_t n_labels = warped_onehot.size(0);
    PULPO_REQUIRE(n_labels >= 1, "soft_dsc: empty label stack");
    auto p = warped_onehot.flatten(1);
    auto q = target_onehot.flatten(1);
    auto inter = (p * q).sum(1);
    auto denom = p.sum(1) + q.sum(1) + eps;
    return (2.0 * inter / denom).mean().item<double>();
}

/// Multilinear interpolation of a vector field [D, *spatial] at fractional
/// voxel coordinates [n, D]; reads clamp to the border.
inline torch::Tensor interpolate_field_at(const torch::Tensor& field, const torch::Tensor& pts) {
    const int64_t d = field.dim() - 1;
    PULPO_REQUIRE(pts.dim() == 2 && pts.size(1) == d, "interpolate_field_at: points must be [n, D]");
    auto f = field.to(torch::kFloat64).contiguous();
    auto p = pts.to(torch::kFloat64).contiguous();
    const int64_t n = p.size(0);
    auto out = torch::zeros({n, d}, torch::kFloat64);
    auto pa = p.accessor<double, 2>();
    auto oa = out.accessor<double, 2>();

    std::vector<int64_t> sz(f.sizes().begin() + 1, f.sizes().end());
    for (int64_t i = 0; i < n; ++i) {
        std::vector<int64_t> lo(d);
        std::vector<double> w(d);
        for (int64_t a = 0; a < d; ++a) {
            double x = std::clamp(pa[i][a], 0.0, static_cast<double>(sz[a] - 1));
            lo[a] = std::min(static_cast<int64_t>(std::floor(x)), sz[a] - 2);
            lo[a] = std::max<int64_t>(lo[a], 0);
            w[a] = x - lo[a];
        }
        const int corners = 1 << d;
        for (int c = 0; c < corners; ++c) {
            double wt = 1.0;
            std::vector<torch::indexing::TensorIndex> idx{torch::indexing::Slice()};
            for (int64_t a = 0; a < d; ++a) {
                const int bit = (c >> a) & 1;
                wt *= bit ? w[a] : (1.0 - w[a]);
                idx.push_back(lo[a] + bit);
            }
            if (wt == 0.0) continue;
            auto v = f.index(idx);  // [D]
            for (int64_t k = 0; k < d; ++k)
                oa[i][k] += wt * v[k].item<double>();
        }
    }
    return out;
}

/// Fixed-space landmarks mapped through phi (pull-back: x + u(x) is the
/// moving-space read position) vs the paired moving-space annotations.
/// Mean physical-space Euclidean distance in mm.
inline double tre(const LandmarkSet& fixed_lm, const LandmarkSet& moving_lm,
                  const torch::Tensor& phi, const std::vector<double>& spacing) {
    PULPO_REQUIRE(fixed_lm.size() >= 1, "tre: empty landmark set");
    std::map<int64_t, int64_t> mv_index;
    for (int64_t i = 0; i < moving_lm.size(); ++i) mv_index[moving_lm.ids[i]] = i;
    const int64_t d = phi.dim() - 1;

    auto u = interpolate_field_at(phi, fixed_lm.points);
    auto fixed_pts = fixed_lm.points.to(torch::kFloat64);
    double acc = 0.0;
    for (int64_t i = 0; i < fixed_lm.size(); ++i) {
        auto it = mv_index.find(fixed_lm.ids[i]);
        PULPO_REQUIRE(it != mv_index.end(), "tre: unmatched landmark id");
        auto mapped = fixed_pts[i] + u[i];
        auto target = moving_lm.points[it->second].to(torch::kFloat64);
        double e2 = 0.0;
        for (int64_t a = 0; a < d; ++a) {
            double diff = (mapped[a].item<double>() - target[a].item<double>()) * spacing[a];
            e2 += diff * diff;
        }
        acc += std::sqrt(e2);
    }
    return acc / static_cast<double>(fixed_lm.size());
}

/// 100 * |{interior voxels with det <= 0}| / |interior voxels|.
inline double percent_nonpositive_jacobian(const torch::Tensor& phi) {
    auto det = ops::jacobian_determinant(as_batch(phi)).squeeze(0);
    for (int64_t a = 0; a < det.dim(); ++a)
        det = det.narrow(a, 1, det.size(a) - 2);
    return 100.0 * (det <= 0.0).to(torch::kFloat64).mean().item<double>();
}

struct Correlation {
    double value = 0.0;
    bool degenerate = false;  // one side constant; value defined as 0
};

/// Signed global Pearson correlation over all elements.
inline Correlation pearson(const torch::Tensor& a, const torch::Tensor& b) {
    PULPO_REQUIRE(a.numel() == b.numel(), "pearson: size mismatch");
    auto x = a.flatten().to(torch::kFloat64);
    auto y = b.flatten().to(torch::kFloat64);
    auto xc = x - x.mean();
    auto yc = y - y.mean();
    double sx = xc.pow(2).sum().item<double>();
    double sy = yc.pow(2).sum().item<double>();
    if (sx <= 0.0 || sy <= 0.0) return {0.0, true};
    return {(xc * yc).sum().item<double>() / std::sqrt(sx * sy), false};
}

/// Calibration of voxel-level uncertainty: Pearson between the per-voxel
/// sample variance of the warped intensities and the per-voxel mean squared
/// error against f. Signed, so anti-correlation is visible.
inline Correlation calibration_ncc_vx(const std::vector<torch::Tensor>& warped_samples,
                                      const torch::Tensor& f) {
    PULPO_REQUIRE(warped_samples.size() >= 2, "calibration_ncc_vx: need >= 2 samples");
    auto stack = torch::stack(warped_samples, 0).to(torch::kFloat64);
    auto var = stack.var(0, /*unbiased=*/true);
    auto mse = (stack - f.to(torch::kFloat64).unsqueeze(0)).pow(2).mean(0);
    return pearson(var, mse);
}

/// Calibration of landmark-level uncertainty: per landmark, predictive
/// variance = trace of the sample covariance of its mapped position, error =
/// squared TRE of the mean mapped position; signed correlation across
/// landmarks.
inline Correlation calibration_ncc_lm(const std::vector<torch::Tensor>& phi_samples,
                                      const LandmarkSet& fixed_lm, const LandmarkSet& moving_lm,
                                      const std::vector<double>& spacing) {
    PULPO_REQUIRE(phi_samples.size() >= 2, "calibration_ncc_lm: need >= 2 samples");
    PULPO_REQUIRE(fixed_lm.size() >= 3, "calibration_ncc_lm: need >= 3 landmarks");
    std::map<int64_t, int64_t> mv_index;
    for (int64_t i = 0; i < moving_lm.size(); ++i) mv_index[moving_lm.ids[i]] = i;

    const int64_t n = fixed_lm.size();
    const int64_t d = phi_samples.front().dim() - 1;
    const int64_t s = static_cast<int64_t>(phi_samples.size());
    auto sp = torch::tensor(spacing, torch::kFloat64);

    auto mapped = torch::zeros({s, n, d}, torch::kFloat64);
    for (int64_t i = 0; i < s; ++i)
        mapped[i] = (fixed_lm.points.to(torch::kFloat64) +
                     interpolate_field_at(phi_samples[i], fixed_lm.points)) * sp;
    auto mean_pos = mapped.mean(0);
    auto var_tr = (mapped - mean_pos.unsqueeze(0)).pow(2).sum(2).sum(0) / static_cast<double>(s - 1);

    auto err = torch::zeros({n}, torch::kFloat64);
    for (int64_t i = 0; i < n; ++i) {
        auto it = mv_index.find(fixed_lm.ids[i]);
        PULPO_REQUIRE(it != mv_index.end(), "calibration_ncc_lm: unmatched landmark id");
        auto target = moving_lm.points[it->second].to(torch::kFloat64) * sp;
        err[i] = (mean_pos[i] - target).pow(2).sum();
    }
    return pearson(var_tr, err);
}

}  // namespace pulpo::metrics

#endif

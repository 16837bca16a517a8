#ifndef PULPO_OBJECTIVE_HPP
#define PULPO_OBJECTIVE_HPP

#include <torch/torch.h>

#include <cmath>
#include <string>
#include <vector>

#include "pulpo/core.hpp"
#include "pulpo/field_ops.hpp"

namespace pulpo {

/// Weights of the total training objective.
struct LossWeights {
    double beta = 0.1;     // KL weight
    double gamma = 0.05;   // similarity balance
    double lambda = 0.025; // diffusion regularizer weight

    /// Image-noise variance per level: 0.25 on the finest level, 1 below.
    static double sigma_i_sq(int level) { return level == 0 ? 0.25 : 1.0; }

    /// Level weight 2^(D*l); coarser levels have fewer voxels.
    static double level_weight(int level, int d) { return std::pow(2.0, d * level); }

    /// NCC window size k_l = 1 + 2(L - l).
    static int window(int level, int num_latent_levels) {
        return 1 + 2 * (num_latent_levels - level);
    }
};

/// Per-level forward-pass bundle. Level 0 is input resolution.
struct LevelData {
    GaussianFieldParams posterior;
    torch::Tensor z;      // [N, C_latent, *S_l]
    torch::Tensor v;      // accumulated velocity, [N, D, *S_l]
    torch::Tensor phi;    // integrated deformation, [N, D, *S_l]
    torch::Tensor f_hat;  // m_l warped by phi, [N, 1, *S_l]
};

struct LevelOutputs {
    std::vector<LevelData> levels;  // index l = 0 .. L-1, finest first
    bool ablation = false;

    const torch::Tensor& phi0() const { return levels.front().phi; }
    const torch::Tensor& f_hat0() const { return levels.front().f_hat; }
};

/// KL[ N(mu, diag(sigma^2)) || N(0, I) ], summed over all elements:
/// sum 1/2 (mu^2 + sigma^2 - 1 - log sigma^2).
inline torch::Tensor kl_diag_gaussian(const GaussianFieldParams& p) {
    PULPO_REQUIRE(p.mu.sizes() == p.log_sigma.sizes(),
                  "kl_diag_gaussian: mu/log_sigma shape mismatch");
    if (!p.mu.requires_grad() && !p.log_sigma.requires_grad())
        PULPO_REQUIRE(p.mu.isfinite().all().item<bool>() &&
                          p.log_sigma.isfinite().all().item<bool>(),
                      "kl_diag_gaussian: non-finite parameters");
    auto var = (2.0 * p.log_sigma).exp();
    return 0.5 * (p.mu.pow(2) + var - 1.0 - 2.0 * p.log_sigma).sum();
}

/// Mean over valid window positions of the squared local correlation
/// coefficient, in [0, 1]. Windows are k^D boxes fully inside the image.
inline torch::Tensor local_ncc(const torch::Tensor& a, const torch::Tensor& b, int k,
                               double eps = 1e-5) {
    PULPO_REQUIRE(a.sizes() == b.sizes(), "local_ncc: shape mismatch");
    PULPO_REQUIRE(k % 2 == 1, "local_ncc: window size must be odd");
    const auto sizes = ops::spatial_sizes(a);
    for (auto s : sizes)
        PULPO_REQUIRE(k <= s, "local_ncc: window exceeds spatial extent");

    namespace F = torch::nn::functional;
    const auto d = ops::spatial_dim(a);
    const double n = std::pow(static_cast<double>(k), static_cast<double>(d));
    auto boxsum = [&](const torch::Tensor& t) {
        if (d == 2)
            return F::avg_pool2d(t, F::AvgPool2dFuncOptions(k).stride(1)) * n;
        return F::avg_pool3d(t, F::AvgPool3dFuncOptions(k).stride(1)) * n;
    };

    auto sa = boxsum(a);
    auto sb = boxsum(b);
    auto cross = boxsum(a * b) - sa * sb / n;
    auto var_a = (boxsum(a * a) - sa * sa / n).clamp_min(0.0);
    auto var_b = (boxsum(b * b) - sb * sb / n).clamp_min(0.0);
    auto cc2 = cross * cross / (var_a * var_b + eps);
    return cc2.mean();
}

/// Mean over voxels of the summed squared forward-difference gradients of the
/// displacement. Zero iff the displacement is constant.
inline torch::Tensor diffusion_regularizer(const torch::Tensor& phi) {
    auto grads = ops::spatial_gradient(phi);
    auto acc = torch::zeros_like(phi.select(1, 0));
    for (const auto& g : grads)
        acc = acc + g.pow(2).sum(1);
    return acc.mean();
}

struct LossBreakdown {
    torch::Tensor total;              // scalar, graph-connected
    std::vector<torch::Tensor> kl;    // per-level mean KL (unweighted)
    std::vector<torch::Tensor> ncc;   // per-level NCC similarity (unweighted)
    std::vector<torch::Tensor> reg;   // per-level diffusion term (unweighted)
};

/// Eq.-style total objective:
///   beta * sum_l w_l KL_l  -  gamma/sigma_I,l^2 * sum_l w_l NCC(f_hat_l, f_l, k_l)
///   + lambda * sum_l w_l Diff(phi_l),
/// with KL as a per-element mean so beta stays commensurate across sizes,
/// f_l the repeated x1/2 downscale of f. In ablation mode only level-0 terms
/// are nonzero.
inline LossBreakdown total_loss(const LevelOutputs& out, const torch::Tensor& /*m*/,
                                const torch::Tensor& f, const LossWeights& w) {
    const int num_levels = static_cast<int>(out.levels.size());
    PULPO_REQUIRE(num_levels >= 1, "total_loss: no levels");
    const auto d = static_cast<int>(ops::spatial_dim(f));

    LossBreakdown bd;
    auto total = torch::zeros({}, f.options());
    auto f_l = f;
    for (int l = 0; l < num_levels; ++l) {
        if (l > 0) f_l = ops::resize_half(f_l);
        const auto& lvl = out.levels[l];
        torch::Tensor kl_l, ncc_l, reg_l;
        if (out.ablation && l > 0) {
            kl_l = torch::zeros({}, f.options());
            ncc_l = torch::zeros({}, f.options());
            reg_l = torch::zeros({}, f.options());
        } else {
            kl_l = kl_diag_gaussian(lvl.posterior) / lvl.posterior.mu.numel();
            ncc_l = local_ncc(lvl.f_hat, f_l, LossWeights::window(l, num_levels));
            reg_l = diffusion_regularizer(lvl.phi);
        }
        const double wl = LossWeights::level_weight(l, d);
        total = total + wl * (w.beta * kl_l - w.gamma / LossWeights::sigma_i_sq(l) * ncc_l +
                              w.lambda * reg_l);
        bd.kl.push_back(kl_l);
        bd.ncc.push_back(ncc_l);
        bd.reg.push_back(reg_l);
    }
    bd.total = total;
    return bd;
}

}  // namespace pulpo

#endif

#ifndef PULPO_MODEL_HPP
#define PULPO_MODEL_HPP

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "pulpo/core.hpp"
#include "pulpo/field_ops.hpp"
#include "pulpo/objective.hpp"

namespace pulpo {

struct ModelConfig {
    int spatial_dim = 2;        // D in {2,3}
    int total_levels = 5;       // K
    int latent_levels = 4;      // L <= K
    int latent_channels = 0;    // 0 -> defaults to D
    int base_channels = 16;     // encoder width at the finest level
    int integration_steps = 7;
    bool nonhierarchical_ablation = false;
    int64_t seed = 0;

    int latent_ch() const { return latent_channels > 0 ? latent_channels : spatial_dim; }
    int channels(int level) const { return base_channels << std::min(level, 3); }
    int64_t divisor() const { return int64_t{1} << (total_levels - 1); }

    void validate() const {
        PULPO_REQUIRE(spatial_dim == 2 || spatial_dim == 3, "ModelConfig: D must be 2 or 3");
        PULPO_REQUIRE(latent_levels >= 1 && latent_levels <= total_levels,
                      "ModelConfig: need 1 <= L <= K");
        PULPO_REQUIRE(latent_ch() >= 1, "ModelConfig: latent_channels must be >= 1");
        PULPO_REQUIRE(integration_steps >= 1, "ModelConfig: integration_steps >= 1");
        PULPO_REQUIRE(base_channels >= 1, "ModelConfig: base_channels >= 1");
    }
};

enum class ForwardMode { sample, mean };

namespace detail {

inline torch::nn::AnyModule make_conv(int d, int in_ch, int out_ch, int kernel,
                                      bool zero_init = false) {
    const int pad = kernel / 2;
    if (d == 2) {
        torch::nn::Conv2d c(torch::nn::Conv2dOptions(in_ch, out_ch, kernel).padding(pad));
        if (zero_init) {
            torch::NoGradGuard g;
            c->weight.zero_();
            c->bias.zero_();
        }
        return torch::nn::AnyModule(c);
    }
    torch::nn::Conv3d c(torch::nn::Conv3dOptions(in_ch, out_ch, kernel).padding(pad));
    if (zero_init) {
        torch::NoGradGuard g;
        c->weight.zero_();
        c->bias.zero_();
    }
    return torch::nn::AnyModule(c);
}

/// Two 3^D convolutions with leaky-rectified activations.
struct ConvBlockImpl : torch::nn::Module {
    torch::nn::AnyModule c1, c2;

    ConvBlockImpl(int d, int in_ch, int out_ch) {
        c1 = make_conv(d, in_ch, out_ch, 3);
        c2 = make_conv(d, out_ch, out_ch, 3);
        register_module("c1", c1.ptr());
        register_module("c2", c2.ptr());
    }

    torch::Tensor forward(const torch::Tensor& x) {
        auto h = torch::leaky_relu(c1.forward(x), 0.2);
        return torch::leaky_relu(c2.forward(h), 0.2);
    }
};
TORCH_MODULE(ConvBlock);

}  // namespace detail

/// v_l = upsample(v_below) + residual; the Laplacian-pyramid accumulation step.
inline torch::Tensor pyramid_accumulate(const torch::Tensor& v_accum_below,
                                        const torch::Tensor& residual) {
    auto up = ops::upsample_velocity(v_accum_below);
    PULPO_REQUIRE(up.sizes() == residual.sizes(),
                  "pyramid_accumulate: residual must be at double the resolution of v_below");
    return up + residual;
}

/// The hierarchical probabilistic registration network. Encoder over the
/// concatenated (m, f) pair, per-level posterior heads (zero-initialized, so
/// the fresh posterior equals the unit-Gaussian prior), latent sampling,
/// velocity decoding with pyramid accumulation, per-level integration and
/// warping, and feedback connections carrying (z_l, v_l, phi_l, f_hat_l) up
/// one level.
struct PulpoNetImpl : torch::nn::Module {
    ModelConfig cfg;
    std::vector<detail::ConvBlock> enc_blocks;
    std::vector<detail::ConvBlock> det_blocks;   // deterministic levels L..K-1
    std::vector<detail::ConvBlock> fuse_blocks;  // latent levels, index l
    std::vector<torch::nn::AnyModule> post_heads;
    std::vector<detail::ConvBlock> vel_blocks;
    std::vector<torch::nn::AnyModule> vel_heads;

    explicit PulpoNetImpl(const ModelConfig& config) : cfg(config) {
        cfg.validate();
        const int d = cfg.spatial_dim;
        const int K = cfg.total_levels;
        const int L = cfg.latent_levels;
        const int zc = cfg.latent_ch();

        for (int k = 0; k < K; ++k) {
            const int in_ch = k == 0 ? 2 : cfg.channels(k - 1);
            enc_blocks.push_back(detail::ConvBlock(d, in_ch, cfg.channels(k)));
            register_module("enc" + std::to_string(k), enc_blocks.back());
        }
        for (int k = L; k < K; ++k) {
            const int in_ch = k == K - 1 ? cfg.channels(k) : cfg.channels(k) + cfg.channels(k + 1);
            det_blocks.push_back(detail::ConvBlock(d, in_ch, cfg.channels(k)));
            register_module("det" + std::to_string(k), det_blocks.back());
        }
        for (int l = 0; l < L; ++l) {
            int fb_ch;
            if (l == L - 1)
                fb_ch = L < K ? cfg.channels(L) : 0;
            else
                fb_ch = zc + d + d + 1;  // (z, v, phi, f_hat) from below
            fuse_blocks.push_back(detail::ConvBlock(d, cfg.channels(l) + fb_ch, cfg.channels(l)));
            register_module("fuse" + std::to_string(l), fuse_blocks.back());
            post_heads.push_back(detail::make_conv(d, cfg.channels(l), 2 * zc, 1, true));
            register_module("post" + std::to_string(l), post_heads.back().ptr());
            vel_blocks.push_back(detail::ConvBlock(d, zc + cfg.channels(l), cfg.channels(l)));
            register_module("vel" + std::to_string(l), vel_blocks.back());
            vel_heads.push_back(detail::make_conv(d, cfg.channels(l), d, 3, true));
            register_module("velhead" + std::to_string(l), vel_heads.back().ptr());
        }
    }

    torch::Tensor pool(const torch::Tensor& x) const { return ops::resize_half(x); }

    /// Per-level feature grids over the pair, level k at resolution /2^k.
    std::vector<torch::Tensor> encode(const torch::Tensor& m, const torch::Tensor& f) {
        PULPO_REQUIRE(m.sizes() == f.sizes(), "encode: m and f must share shape");
        PULPO_REQUIRE(ops::spatial_dim(m) == cfg.spatial_dim, "encode: dimensionality mismatch");
        for (auto s : ops::spatial_sizes(m))
            PULPO_REQUIRE(s % cfg.divisor() == 0,
                          "encode: spatial extents must be divisible by 2^(K-1)");
        std::vector<torch::Tensor> feats;
        auto x = torch::cat({m, f}, 1);
        for (int k = 0; k < cfg.total_levels; ++k) {
            if (k > 0) x = pool(x);
            x = enc_blocks[k]->forward(x);
            feats.push_back(x);
        }
        return feats;
    }

    /// mu / log_sigma at level l; log_sigma clamped to [-10, 3]. Levels below
    /// the bottom latent level feed no latent feedback (q(z_{L-1} | m, f)).
    GaussianFieldParams posterior_params(int level, const torch::Tensor& features,
                                         const std::optional<torch::Tensor>& feedback) {
        const int L = cfg.latent_levels;
        PULPO_REQUIRE(level >= 0 && level < L, "posterior_params: level out of range");
        if (level < L - 1)
            PULPO_REQUIRE(feedback.has_value(), "posterior_params: missing feedback for l < L-1");
        auto in = feedback ? torch::cat({features, *feedback}, 1) : features;
        auto h = fuse_blocks[level]->forward(in);
        auto p = post_heads[level].forward(h);
        const int zc = cfg.latent_ch();
        GaussianFieldParams g;
        g.mu = p.narrow(1, 0, zc);
        g.log_sigma = p.narrow(1, zc, zc).clamp(-10.0, 3.0);
        last_fused_ = h;
        return g;
    }

    /// Reparameterized draw z = mu + sigma * eps.
    static torch::Tensor sample_latent(const GaussianFieldParams& p,
                                       std::optional<torch::Generator> gen) {
        auto eps = gen ? torch::randn(p.mu.sizes(), *gen, p.mu.options())
                       : torch::randn(p.mu.sizes(), p.mu.options());
        return p.mu + p.sigma() * eps;
    }

    /// Residual velocity at level l; head zero-initialized so a fresh model
    /// emits exactly zero.
    torch::Tensor decode_velocity(int level, const torch::Tensor& z, const torch::Tensor& fused) {
        auto h = vel_blocks[level]->forward(torch::cat({z, fused}, 1));
        return vel_heads[level].forward(h);
    }

    /// Full pass. `fixed_eps`, when given, replaces the random draw at each
    /// latent level (index l), making sample mode deterministic for gradient
    /// checks.
    LevelOutputs forward(const torch::Tensor& m, const torch::Tensor& f,
                         ForwardMode mode = ForwardMode::mean,
                         std::optional<torch::Generator> gen = std::nullopt,
                         const std::vector<torch::Tensor>* fixed_eps = nullptr) {
        const int K = cfg.total_levels;
        const int L = cfg.latent_levels;
        const int d = cfg.spatial_dim;
        auto feats = encode(m, f);

        // moving-image pyramid m_l
        std::vector<torch::Tensor> m_pyr{m};
        for (int l = 1; l < L; ++l) m_pyr.push_back(pool(m_pyr.back()));

        // deterministic decoder levels K-1 .. L with skip connections
        std::optional<torch::Tensor> fb;
        for (int k = K - 1; k >= L; --k) {
            auto in = fb ? torch::cat({feats[k], *fb}, 1) : feats[k];
            auto h = det_blocks[k - L]->forward(in);
            fb = ops::resize_double(h);
        }

        std::vector<LevelData> levels(L);
        torch::Tensor v_below;
        for (int l = L - 1; l >= 0; --l) {
            auto post = posterior_params(l, feats[l], fb);
            torch::Tensor z;
            const bool sample_here =
                mode == ForwardMode::sample && (!cfg.nonhierarchical_ablation || l == 0);
            if (sample_here) {
                if (fixed_eps) {
                    z = post.mu + post.sigma() * fixed_eps->at(l);
                } else {
                    z = sample_latent(post, gen);
                }
            } else {
                z = post.mu;
            }
            torch::Tensor residual;
            if (cfg.nonhierarchical_ablation && l > 0) {
                std::vector<int64_t> vs{z.size(0), d};
                for (auto s : ops::spatial_sizes(z)) vs.push_back(s);
                residual = torch::zeros(vs, z.options());
            } else {
                residual = decode_velocity(l, z, last_fused_);
            }

            auto v = (l == L - 1) ? residual : pyramid_accumulate(v_below, residual);
            auto phi = ops::integrate_svf(v, cfg.integration_steps);
            auto f_hat = ops::warp(m_pyr[l], phi);

            levels[l] = LevelData{post, z, v, phi, f_hat};
            v_below = v;
            if (l > 0) {
                auto up = ops::resize_double(torch::cat({z, v, phi, f_hat}, 1));
                // velocity/deformation channels change units on upsampling
                const int zc = cfg.latent_ch();
                fb = torch::cat({up.narrow(1, 0, zc), up.narrow(1, zc, 2 * d) * 2.0,
                                 up.narrow(1, zc + 2 * d, 1)},
                                1);
            }
        }

        LevelOutputs out;
        out.levels = std::move(levels);
        out.ablation = cfg.nonhierarchical_ablation;
        return out;
    }

private:
    torch::Tensor last_fused_;  // fused features of the most recent posterior_params call
};
TORCH_MODULE(PulpoNet);

inline torch::Generator make_generator(uint64_t seed) {
    auto gen = at::detail::createCPUGenerator(seed);
    return gen;
}

/// Derived per-sample stream: splitmix64 of (seed, index).
inline uint64_t derive_stream_seed(uint64_t seed, uint64_t index) {
    uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    x ^= x >> 30; x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27; x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

}  // namespace pulpo

#endif

#ifndef PULPO_INFERENCE_HPP
#define PULPO_INFERENCE_HPP

#include <torch/torch.h>

#include <string>
#include <vector>

#include "pulpo/core.hpp"
#include "pulpo/model.hpp"

namespace pulpo::inference {

struct RegistrationResult {
    torch::Tensor phi0;    // [D, *spatial]
    torch::Tensor f_hat0;  // [1, *spatial]
    std::string checkpoint_id;
    std::string mode;  // "mean" or "sample"
    uint64_t seed = 0;
};

struct UncertaintyMaps {
    torch::Tensor var_image;  // [*spatial], var(m . phi(z))
    torch::Tensor var_field;  // [*spatial], trace of displacement covariance
    int64_t n_samples = 0;
    uint64_t seed = 0;
};

/// MAP-approximate registration: one mean-propagation forward pass.
/// Deterministic; consumes no randomness.
inline RegistrationResult register_map(PulpoNet& model, const torch::Tensor& m,
                                       const torch::Tensor& f,
                                       const std::string& checkpoint_id = "") {
    torch::NoGradGuard ng;
    auto out = model->forward(as_batch(m), as_batch(f), ForwardMode::mean);
    RegistrationResult r;
    r.phi0 = out.phi0().squeeze(0);
    r.f_hat0 = out.f_hat0().squeeze(0);
    r.checkpoint_id = checkpoint_id;
    r.mode = "mean";
    return r;
}

/// n posterior samples with derived per-sample RNG streams; any prefix of a
/// longer run reproduces the shorter run.
inline std::vector<RegistrationResult> sample_registrations(PulpoNet& model,
                                                            const torch::Tensor& m,
                                                            const torch::Tensor& f, int n,
                                                            uint64_t seed,
                                                            const std::string& checkpoint_id = "") {
    PULPO_REQUIRE(n >= 1, "sample_registrations: n >= 1");
    torch::NoGradGuard ng;
    std::vector<RegistrationResult> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        auto gen = make_generator(derive_stream_seed(seed, static_cast<uint64_t>(i)));
        auto fwd = model->forward(as_batch(m), as_batch(f), ForwardMode::sample, gen);
        RegistrationResult r;
        r.phi0 = fwd.phi0().squeeze(0);
        r.f_hat0 = fwd.f_hat0().squeeze(0);
        r.checkpoint_id = checkpoint_id;
        r.mode = "sample";
        r.seed = seed;
        out.push_back(std::move(r));
    }
    return out;
}

/// Unbiased per-voxel variance of the warped intensities and the per-voxel
/// displacement variance summed over components.
inline UncertaintyMaps variance_maps(const std::vector<RegistrationResult>& samples) {
    PULPO_REQUIRE(samples.size() >= 2, "variance_maps: need >= 2 samples");
    std::vector<torch::Tensor> imgs, fields;
    for (const auto& s : samples) {
        PULPO_REQUIRE(s.phi0.sizes() == samples.front().phi0.sizes(),
                      "variance_maps: inhomogeneous sample shapes");
        imgs.push_back(s.f_hat0.to(torch::kFloat64));
        fields.push_back(s.phi0.to(torch::kFloat64));
    }
    UncertaintyMaps u;
    u.var_image = torch::stack(imgs, 0).var(0, /*unbiased=*/true).squeeze(0);
    u.var_field = torch::stack(fields, 0).var(0, /*unbiased=*/true).sum(0);
    u.n_samples = static_cast<int64_t>(samples.size());
    u.seed = samples.front().seed;
    return u;
}

}  // namespace pulpo::inference

#endif

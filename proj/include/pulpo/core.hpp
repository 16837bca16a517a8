#ifndef PULPO_CORE_HPP
#define PULPO_CORE_HPP

#include <torch/torch.h>

#include <stdexcept>
#include <string>
#include <vector>

namespace pulpo {

// Violated precondition / contract on an operation's inputs.
struct contract_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Filesystem / serialization failure.
struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Numerical failure (non-finite loss, degenerate input).
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define PULPO_REQUIRE(cond, msg)                       \
    do {                                               \
        if (!(cond)) throw ::pulpo::contract_error(msg); \
    } while (0)

/// Scalar intensity grid with voxel spacing. `data` is [C, *spatial]
/// with D spatial axes, D in {2,3}; C==1 for plain intensity images,
/// C>1 for one-hot label stacks.
struct Image {
    torch::Tensor data;
    std::vector<double> spacing;  // mm per voxel, one entry per spatial axis

    int64_t dim() const { return data.dim() - 1; }

    void validate() const {
        PULPO_REQUIRE(data.defined() && (dim() == 2 || dim() == 3),
                      "Image: expected [C, *spatial] with 2 or 3 spatial axes");
        PULPO_REQUIRE(static_cast<int64_t>(spacing.size()) == dim(),
                      "Image: spacing size must match spatial dimension");
        for (double s : spacing)
            PULPO_REQUIRE(s > 0.0, "Image: spacing must be strictly positive");
        for (int64_t a = 1; a < data.dim(); ++a)
            PULPO_REQUIRE(data.size(a) >= 2, "Image: spatial extents must be >= 2");
        PULPO_REQUIRE(data.isfinite().all().item<bool>(), "Image: intensities must be finite");
    }
};

/// Stationary velocity field, [D, *spatial], units = voxels of its own level.
struct VelocityField {
    torch::Tensor data;
    int64_t dim() const { return data.dim() - 1; }
};

/// Displacement field, [D, *spatial], voxel units. Convention: pull-back,
/// the output voxel x reads the source at x + u(x); channel a displaces
/// along spatial axis a.
struct DeformationField {
    torch::Tensor data;
    int64_t dim() const { return data.dim() - 1; }
};

/// Per-voxel diagonal-Gaussian parameters of one latent level,
/// both tensors [N, C_latent, *spatial].
struct GaussianFieldParams {
    torch::Tensor mu;
    torch::Tensor log_sigma;

    torch::Tensor sigma() const { return log_sigma.exp(); }
};

/// Point annotations in voxel coordinates with stable ids; corresponding
/// ids pair points across the two images of a registration pair.
struct LandmarkSet {
    std::vector<int64_t> ids;
    torch::Tensor points;  // [n, D], float64, voxel units

    int64_t size() const { return points.defined() ? points.size(0) : 0; }
};

inline torch::Tensor as_batch(const torch::Tensor& t) { return t.unsqueeze(0); }

}  // namespace pulpo

#endif

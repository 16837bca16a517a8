#ifndef PULPO_NIFTI_HPP
#define PULPO_NIFTI_HPP

#include <torch/torch.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "pulpo/core.hpp"

// Minimal single-file NIfTI-1 (.nii) IO. Scalar volumes are [1, *spatial];
// vector-valued grids (deformation fields, one-hot stacks) use the 5th NIfTI
// dimension and come back as [C, *spatial]. Uncompressed .nii only.
namespace pulpo::nifti {

#pragma pack(push, 1)
struct Nifti1Header {
    int32_t sizeof_hdr;     // 348
    char data_type[10];
    char db_name[18];
    int32_t extents;
    int16_t session_error;
    char regular;
    char dim_info;
    int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    int16_t intent_code;
    int16_t datatype;
    int16_t bitpix;
    int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    int16_t qform_code, sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4], srow_y[4], srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

constexpr int16_t DT_UINT8 = 2;
constexpr int16_t DT_INT16 = 4;
constexpr int16_t DT_INT32 = 8;
constexpr int16_t DT_FLOAT32 = 16;
constexpr int16_t DT_FLOAT64 = 64;

/// Read a .nii file into [C, *spatial] float32 plus per-axis spacing.
/// scl_slope/scl_inter are applied when set.
inline Image read_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("nifti: cannot open " + path);
    Nifti1Header h{};
    in.read(reinterpret_cast<char*>(&h), sizeof(h));
    if (!in || h.sizeof_hdr != 348)
        throw io_error("nifti: not a NIfTI-1 file (bad header size): " + path);
    if (std::strncmp(h.magic, "n+1", 3) != 0)
        throw io_error("nifti: only single-file n+1 images are supported: " + path);

    const int nd = h.dim[0];
    if (nd < 2 || nd > 5) throw io_error("nifti: unsupported rank in " + path);
    int spatial = 0;
    std::vector<int64_t> file_dims;
    for (int i = 1; i <= 3 && i <= nd; ++i)
        if (h.dim[i] > 1 || i <= 2) {
            file_dims.push_back(h.dim[i]);
            ++spatial;
        }
    if (spatial < 2) throw io_error("nifti: need at least 2 spatial axes in " + path);
    int64_t channels = nd >= 5 && h.dim[5] > 0 ? h.dim[5] : 1;

    int64_t count = channels;
    for (auto dsz : file_dims) count *= dsz;

    in.seekg(static_cast<std::streamoff>(h.vox_offset));
    torch::Tensor raw;
    auto read_as = [&](auto tag, torch::ScalarType st) {
        using T = decltype(tag);
        std::vector<T> buf(static_cast<size_t>(count));
        in.read(reinterpret_cast<char*>(buf.data()), count * static_cast<int64_t>(sizeof(T)));
        if (!in) throw io_error("nifti: truncated data in " + path);
        raw = torch::from_blob(buf.data(), {count}, st).clone().to(torch::kFloat32);
    };
    switch (h.datatype) {
        case DT_UINT8: read_as(uint8_t{}, torch::kUInt8); break;
        case DT_INT16: read_as(int16_t{}, torch::kInt16); break;
        case DT_INT32: read_as(int32_t{}, torch::kInt32); break;
        case DT_FLOAT32: read_as(float{}, torch::kFloat32); break;
        case DT_FLOAT64: read_as(double{}, torch::kFloat64); break;
        default: throw io_error("nifti: unsupported datatype in " + path);
    }
    if (h.scl_slope != 0.0f && !(h.scl_slope == 1.0f && h.scl_inter == 0.0f))
        raw = raw * h.scl_slope + h.scl_inter;

    // File order is x-fastest; tensor order is last-axis-fastest, so the
    // tensor's spatial axes are the reversed file axes.
    std::vector<int64_t> tdims{channels};
    for (auto it = file_dims.rbegin(); it != file_dims.rend(); ++it) tdims.push_back(*it);
    Image img;
    img.data = raw.view(tdims).contiguous();
    for (int i = spatial; i >= 1; --i)
        img.spacing.push_back(h.pixdim[i] > 0 ? h.pixdim[i] : 1.0);
    return img;
}

/// Write [C, *spatial] float32 as a single-file .nii.
inline void write_image(const std::string& path, const Image& img) {
    auto data = img.data.to(torch::kFloat32).contiguous();
    const int64_t c = data.size(0);
    const int64_t d = data.dim() - 1;
    PULPO_REQUIRE(d == 2 || d == 3, "nifti: only 2 or 3 spatial axes");

    Nifti1Header h{};
    h.sizeof_hdr = 348;
    h.regular = 'r';
    for (int i = 1; i < 8; ++i) h.dim[i] = 1;
    h.dim[0] = static_cast<int16_t>(c > 1 ? 5 : d);
    for (int64_t a = 0; a < d; ++a)
        h.dim[a + 1] = static_cast<int16_t>(data.size(d - a));  // reversed: x fastest
    h.dim[5] = static_cast<int16_t>(c);
    h.datatype = DT_FLOAT32;
    h.bitpix = 32;
    h.pixdim[0] = 1.0f;
    for (int64_t a = 0; a < d; ++a)
        h.pixdim[a + 1] = static_cast<float>(img.spacing.empty() ? 1.0 : img.spacing[d - 1 - a]);
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    std::strncpy(h.magic, "n+1", 4);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("nifti: cannot write " + path);
    out.write(reinterpret_cast<const char*>(&h), sizeof(h));
    const char ext[4] = {0, 0, 0, 0};
    out.write(ext, 4);
    out.write(reinterpret_cast<const char*>(data.data_ptr<float>()),
              data.numel() * static_cast<int64_t>(sizeof(float)));
    if (!out) throw io_error("nifti: write failed for " + path);
}

}  // namespace pulpo::nifti

#endif

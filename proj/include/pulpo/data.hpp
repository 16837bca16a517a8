#ifndef PULPO_DATA_HPP
#define PULPO_DATA_HPP

#include <torch/torch.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pulpo/core.hpp"
#include "pulpo/field_ops.hpp"
#include "pulpo/metrics.hpp"
#include "pulpo/nifti.hpp"

namespace pulpo::data {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Integer label grid [*spatial].
struct SegmentationMap {
    torch::Tensor labels;

    std::vector<int64_t> foreground_labels() const {
        auto u = std::get<0>(torch::_unique(labels));
        std::vector<int64_t> out;
        for (int64_t i = 0; i < u.numel(); ++i) {
            auto v = u[i].item<int64_t>();
            if (v > 0) out.push_back(v);
        }
        return out;
    }
};

enum class Session { none, preop, followup };

struct Subject {
    std::string id;
    Image image;
    std::optional<SegmentationMap> segmentation;
    std::optional<LandmarkSet> landmarks;
    Session session = Session::none;
};

/// Load a scalar volume: intensities min-max normalized to [0,1], spacing
/// from the header. A constant volume normalizes to all-zero (degenerate).
inline Image load_volume(const std::string& path, bool* degenerate = nullptr) {
    auto img = nifti::read_image(path);
    if (img.data.size(0) != 1) throw io_error("load_volume: expected a scalar volume: " + path);
    if (!img.data.isfinite().all().item<bool>())
        throw io_error("load_volume: non-finite intensities in " + path);
    auto lo = img.data.min();
    auto hi = img.data.max();
    const double range = (hi - lo).item<double>();
    if (degenerate) *degenerate = range <= 0.0;
    img.data = range > 0.0 ? (img.data - lo) / range : torch::zeros_like(img.data);
    return img;
}

// ---------------------------------------------------------------- landmarks

/// CSV format: header "id,x,y[,z]"; x is the first tensor spatial axis.
inline void save_landmarks(const std::string& path, const LandmarkSet& lm) {
    std::ofstream out(path);
    if (!out) throw io_error("save_landmarks: cannot write " + path);
    const int64_t d = lm.points.size(1);
    out << (d == 2 ? "id,x,y\n" : "id,x,y,z\n");
    auto p = lm.points.to(torch::kFloat64);
    out.precision(17);
    for (int64_t i = 0; i < lm.size(); ++i) {
        out << lm.ids[i];
        for (int64_t a = 0; a < d; ++a) out << ',' << p[i][a].item<double>();
        out << '\n';
    }
}

inline LandmarkSet load_landmarks(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("load_landmarks: cannot open " + path);
    std::string line;
    std::getline(in, line);  // header
    LandmarkSet lm;
    std::vector<double> coords;
    int64_t d = -1;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        std::getline(ss, tok, ',');
        lm.ids.push_back(std::stoll(tok));
        int64_t n = 0;
        while (std::getline(ss, tok, ',')) {
            coords.push_back(std::stod(tok));
            ++n;
        }
        if (d < 0) d = n;
        if (n != d) throw io_error("load_landmarks: ragged row in " + path);
    }
    lm.points = torch::tensor(coords, torch::kFloat64).view({static_cast<int64_t>(lm.ids.size()), d});
    return lm;
}

// ------------------------------------------------------------------ padding

struct PadInfo {
    std::vector<int64_t> before, after;
    bool any() const {
        for (size_t i = 0; i < before.size(); ++i)
            if (before[i] || after[i]) return true;
        return false;
    }
};

/// Zero-pad every axis up to the next multiple of 2^(K-1); landmarks are
/// translated by the leading pad. The returned offsets invert the padding.
inline PadInfo pad_to_pyramid(Subject& subject, int total_levels) {
    PULPO_REQUIRE(total_levels >= 1, "pad_to_pyramid: K >= 1");
    const int64_t div = int64_t{1} << (total_levels - 1);
    auto& t = subject.image.data;
    const int64_t d = t.dim() - 1;
    PadInfo info;
    info.before.resize(d);
    info.after.resize(d);
    std::vector<int64_t> pad_pairs;  // F::pad order: last axis first
    for (int64_t a = d - 1; a >= 0; --a) {
        const int64_t sz = t.size(a + 1);
        const int64_t target = (sz + div - 1) / div * div;
        const int64_t total = target - sz;
        info.before[a] = total / 2;
        info.after[a] = total - total / 2;
        pad_pairs.push_back(info.before[a]);
        pad_pairs.push_back(info.after[a]);
    }
    if (!info.any()) return info;
    namespace F = torch::nn::functional;
    t = F::pad(as_batch(t), F::PadFuncOptions(pad_pairs)).squeeze(0);
    if (subject.segmentation)
        subject.segmentation->labels =
            F::pad(subject.segmentation->labels.unsqueeze(0).unsqueeze(0).to(torch::kFloat32),
                   F::PadFuncOptions(pad_pairs))
                .squeeze(0)
                .squeeze(0)
                .to(torch::kInt64);
    if (subject.landmarks) {
        auto off = torch::tensor(info.before, torch::kFloat64);
        subject.landmarks->points = subject.landmarks->points.to(torch::kFloat64) + off;
    }
    return info;
}

/// Crop a padded [C, *spatial] grid back to its original shape.
inline torch::Tensor crop_padded(const torch::Tensor& t, const PadInfo& info) {
    auto out = t;
    for (size_t a = 0; a < info.before.size(); ++a) {
        const auto axis = static_cast<int64_t>(a) + 1;
        out = out.narrow(axis, info.before[a], t.size(axis) - info.before[a] - info.after[a]);
    }
    return out;
}

// -------------------------------------------------------------------- pairs

enum class PairScheme { inter, intra };

struct SubjectPair {
    std::string moving_id, fixed_id;
};

/// Inter: seeded shuffle of all ordered pairs of distinct subjects.
/// Intra: one pair per subject id, moving = follow-up, fixed = pre-operative.
inline std::vector<SubjectPair> make_pairs(const std::vector<Subject>& subjects,
                                           PairScheme scheme, uint64_t seed) {
    std::vector<SubjectPair> pairs;
    if (scheme == PairScheme::inter) {
        for (const auto& a : subjects)
            for (const auto& b : subjects)
                if (a.id != b.id) pairs.push_back({a.id, b.id});
        std::mt19937_64 rng(seed);
        std::shuffle(pairs.begin(), pairs.end(), rng);
    } else {
        // intra pairing expects subjects listed twice under the same id with
        // different sessions
        std::vector<std::string> seen;
        for (const auto& s : subjects) {
            if (s.session == Session::none)
                throw contract_error("make_pairs: intra scheme requires session tags");
            if (std::find(seen.begin(), seen.end(), s.id) != seen.end()) continue;
            seen.push_back(s.id);
            bool has_pre = false, has_follow = false;
            for (const auto& o : subjects)
                if (o.id == s.id) {
                    has_pre |= o.session == Session::preop;
                    has_follow |= o.session == Session::followup;
                }
            if (has_pre && has_follow) pairs.push_back({s.id + ":followup", s.id + ":preop"});
        }
    }
    return pairs;
}

// ---------------------------------------------------------------- synthetic

struct SyntheticPair {
    Image moving, fixed;
    DeformationField true_field;       // fixed-space pull-back displacement
    LandmarkSet lm_moving, lm_fixed;   // paired ids
    SegmentationMap seg_moving, seg_fixed;
    torch::Tensor lesion_mask;         // bool [*spatial], nonempty iff lesion on
    int64_t seed = 0;
};

namespace detail {

inline torch::Tensor gaussian_blur2d(const torch::Tensor& x, double sigma) {
    namespace F = torch::nn::functional;
    const int64_t r = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(3.0 * sigma)));
    auto t = torch::arange(-r, r + 1, x.options());
    auto k = (-t * t / (2.0 * sigma * sigma)).exp();
    k = k / k.sum();
    const int64_t n = 2 * r + 1;
    auto c = x.size(1);
    auto kx = k.view({1, 1, n, 1}).expand({c, 1, n, 1}).contiguous();
    auto ky = k.view({1, 1, 1, n}).expand({c, 1, 1, n}).contiguous();
    auto o1 = F::conv2d(x, kx, F::Conv2dFuncOptions().padding({r, 0}).groups(c));
    return F::conv2d(o1, ky, F::Conv2dFuncOptions().padding({0, r}).groups(c));
}

inline double randu(torch::Generator& gen, double lo, double hi) {
    auto r = torch::rand({1}, gen, torch::kFloat64).item<double>();
    return lo + (hi - lo) * r;
}

}  // namespace detail

/// Seeded 2D desk-scale pair: smooth blob texture with landmark-bearing
/// structure, a diffeomorphic ground-truth field (max displacement <= 5% of
/// the extent, rejection-sampled to positive Jacobian), fixed = warp(moving),
/// and optionally a bright lesion present in the moving image only.
inline SyntheticPair generate_synthetic_pair(uint64_t seed, int64_t size, bool lesion,
                                             int n_landmarks = 8) {
    PULPO_REQUIRE(size >= 32, "generate_synthetic_pair: size must be >= 32");
    auto gen = at::detail::createCPUGenerator(seed);
    auto opts = torch::kFloat32;
    const double s = static_cast<double>(size);

    auto ii = torch::arange(size, opts).view({size, 1}).expand({size, size});
    auto jj = torch::arange(size, opts).view({1, size}).expand({size, size});

    // blob texture
    auto tex = torch::zeros({size, size}, opts);
    const int n_bumps = 24;
    std::vector<std::array<double, 2>> centers;
    for (int b = 0; b < n_bumps; ++b) {
        const double ci = detail::randu(gen, 4.0, s - 5.0);
        const double cj = detail::randu(gen, 4.0, s - 5.0);
        const double sig = detail::randu(gen, 2.0, s / 10.0);
        const double amp = detail::randu(gen, 0.3, 1.0);
        tex = tex + amp * (-((ii - ci).pow(2) + (jj - cj).pow(2)) / (2.0 * sig * sig)).exp();
        centers.push_back({ci, cj});
    }
    tex = (tex - tex.min()) / (tex.max() - tex.min());
    auto moving_clean = tex.unsqueeze(0);  // [1, s, s]

    // diffeomorphic ground-truth field
    const double max_disp = 0.05 * s;
    torch::Tensor u;
    double amp = detail::randu(gen, 0.5, 1.0) * max_disp;
    for (int attempt = 0; attempt < 25; ++attempt) {
        auto noise = torch::randn({1, 2, size, size}, gen, opts);
        auto v = detail::gaussian_blur2d(noise, s / 10.0);
        auto mag = v.pow(2).sum(1).sqrt().max().item<double>();
        v = v * (amp / mag);
        u = ops::integrate_svf(v, 7);
        auto det = ops::jacobian_determinant(u);
        const bool diffeo = (det > 0).all().item<bool>();
        const double got = u.pow(2).sum(1).sqrt().max().item<double>();
        if (diffeo && got <= max_disp * 1.05) break;
        amp *= 0.8;
    }

    auto fixed = ops::warp(as_batch(moving_clean), u).squeeze(0);

    // landmarks: fixed-space anchors at bump centers, moving-space partner is
    // the exact pull-back position x + u(x)
    LandmarkSet lm_fixed, lm_moving;
    std::vector<double> fixed_coords;
    for (int i = 0; i < n_landmarks; ++i) {
        lm_fixed.ids.push_back(i + 1);
        lm_moving.ids.push_back(i + 1);
        fixed_coords.push_back(centers[i][0]);
        fixed_coords.push_back(centers[i][1]);
    }
    lm_fixed.points = torch::tensor(fixed_coords, torch::kFloat64).view({n_landmarks, 2});
    auto disp = metrics::interpolate_field_at(u.squeeze(0), lm_fixed.points);
    lm_moving.points = lm_fixed.points + disp;

    // segmentation: Voronoi of the moving landmarks; fixed labels warped along
    auto seg_m = torch::zeros({size, size}, torch::kInt64);
    {
        auto best = torch::full({size, size}, 1e30, opts);
        for (int i = 0; i < n_landmarks; ++i) {
            auto d2 = (ii - lm_moving.points[i][0].item<double>()).pow(2) +
                      (jj - lm_moving.points[i][1].item<double>()).pow(2);
            auto closer = d2 < best;
            seg_m.masked_fill_(closer, i + 1);
            best = torch::where(closer, d2, best);
        }
    }
    auto onehot = metrics::one_hot_labels(seg_m, [&] {
        std::vector<int64_t> ls(n_landmarks);
        for (int i = 0; i < n_landmarks; ++i) ls[i] = i + 1;
        return ls;
    }());
    auto warped_onehot = ops::warp(as_batch(onehot), u).squeeze(0);
    auto seg_f = warped_onehot.argmax(0) + 1;

    // lesion: bright compact region in the moving image only
    auto moving = moving_clean.clone();
    auto mask = torch::zeros({size, size}, torch::kBool);
    if (lesion) {
        const double li = detail::randu(gen, s * 0.3, s * 0.7);
        const double lj = detail::randu(gen, s * 0.3, s * 0.7);
        const double lr = s / 10.0;
        auto r2 = (ii - li).pow(2) + (jj - lj).pow(2);
        auto blob = 0.9 * (-r2 / (2.0 * (lr / 2.0) * (lr / 2.0))).exp();
        moving = (moving + blob.unsqueeze(0)).clamp(0.0, 1.0);
        mask = r2 <= lr * lr;
    }

    SyntheticPair p;
    p.moving = Image{moving, {1.0, 1.0}};
    p.fixed = Image{fixed, {1.0, 1.0}};
    p.true_field = DeformationField{u.squeeze(0)};
    p.lm_moving = lm_moving;
    p.lm_fixed = lm_fixed;
    p.seg_moving = SegmentationMap{seg_m};
    p.seg_fixed = SegmentationMap{seg_f};
    p.lesion_mask = mask;
    p.seed = static_cast<int64_t>(seed);
    return p;
}

// ----------------------------------------------------------------- manifest

struct PairRecord {
    std::string id;
    std::string moving, fixed;  // file paths relative to the manifest
    std::string seg_moving, seg_fixed;
    std::string lm_moving, lm_fixed;
    std::string true_field, lesion_mask;
    std::string split;  // train / val / test
};

struct Manifest {
    int schema_version = 1;
    uint64_t seed = 0;
    int64_t size = 0;
    bool lesion = false;
    std::vector<PairRecord> pairs;

    std::vector<PairRecord> split_pairs(const std::string& split) const {
        std::vector<PairRecord> out;
        for (const auto& p : pairs)
            if (split.empty() || p.split == split) out.push_back(p);
        return out;
    }
};

inline json to_json(const Manifest& m) {
    json j;
    j["schema_version"] = m.schema_version;
    j["seed"] = m.seed;
    j["size"] = m.size;
    j["lesion"] = m.lesion;
    j["pairs"] = json::array();
    for (const auto& p : m.pairs) {
        json r{{"id", p.id},       {"moving", p.moving},         {"fixed", p.fixed},
               {"split", p.split}, {"seg_moving", p.seg_moving}, {"seg_fixed", p.seg_fixed},
               {"lm_moving", p.lm_moving}, {"lm_fixed", p.lm_fixed},
               {"true_field", p.true_field}, {"lesion_mask", p.lesion_mask}};
        j["pairs"].push_back(r);
    }
    return j;
}

inline Manifest manifest_from_json(const json& j) {
    Manifest m;
    m.schema_version = j.at("schema_version");
    m.seed = j.at("seed");
    m.size = j.value("size", int64_t{0});
    m.lesion = j.value("lesion", false);
    for (const auto& r : j.at("pairs")) {
        PairRecord p;
        p.id = r.at("id");
        p.moving = r.at("moving");
        p.fixed = r.at("fixed");
        p.split = r.at("split");
        p.seg_moving = r.value("seg_moving", "");
        p.seg_fixed = r.value("seg_fixed", "");
        p.lm_moving = r.value("lm_moving", "");
        p.lm_fixed = r.value("lm_fixed", "");
        p.true_field = r.value("true_field", "");
        p.lesion_mask = r.value("lesion_mask", "");
        m.pairs.push_back(p);
    }
    return m;
}

inline void save_manifest(const std::string& path, const Manifest& m) {
    std::ofstream out(path);
    if (!out) throw io_error("save_manifest: cannot write " + path);
    out << to_json(m).dump(2) << "\n";
}

inline Manifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("load_manifest: cannot open " + path);
    json j;
    in >> j;
    return manifest_from_json(j);
}

/// Split membership as a pure function of (id, seed, ratios): FNV-1a hash of
/// "id:seed" mapped to [0, 1).
inline std::string split_of(const std::string& id, uint64_t seed, double train_ratio,
                            double val_ratio) {
    uint64_t h = 1469598103934665603ULL;
    auto mix = [&](const std::string& sc) {
        for (unsigned char c : sc) {
            h ^= c;
            h *= 1099511628211ULL;
        }
    };
    mix(id);
    mix(":" + std::to_string(seed));
    const double r = static_cast<double>(h >> 11) / static_cast<double>(1ULL << 53);
    if (r < train_ratio) return "train";
    if (r < train_ratio + val_ratio) return "val";
    return "test";
}

/// Generate and write `n` synthetic pairs plus a manifest into `dir`.
inline Manifest materialize_synthetic_dataset(const std::string& dir, int n, int64_t size,
                                              uint64_t seed, bool lesion,
                                              double train_ratio = 0.8, double val_ratio = 0.1) {
    fs::create_directories(dir);
    Manifest m;
    m.seed = seed;
    m.size = size;
    m.lesion = lesion;
    for (int i = 0; i < n; ++i) {
        auto pair = generate_synthetic_pair(seed + static_cast<uint64_t>(i) * 1000003ULL, size, lesion);
        PairRecord r;
        r.id = "pair" + std::to_string(i);
        r.split = split_of(r.id, seed, train_ratio, val_ratio);
        auto base = r.id + "_";
        r.moving = base + "moving.nii";
        r.fixed = base + "fixed.nii";
        r.seg_moving = base + "seg_moving.nii";
        r.seg_fixed = base + "seg_fixed.nii";
        r.lm_moving = base + "lm_moving.csv";
        r.lm_fixed = base + "lm_fixed.csv";
        r.true_field = base + "true_field.nii";
        r.lesion_mask = lesion ? base + "lesion_mask.nii" : "";
        nifti::write_image(dir + "/" + r.moving, pair.moving);
        nifti::write_image(dir + "/" + r.fixed, pair.fixed);
        nifti::write_image(dir + "/" + r.seg_moving,
                           Image{pair.seg_moving.labels.unsqueeze(0).to(torch::kFloat32), {1, 1}});
        nifti::write_image(dir + "/" + r.seg_fixed,
                           Image{pair.seg_fixed.labels.unsqueeze(0).to(torch::kFloat32), {1, 1}});
        save_landmarks(dir + "/" + r.lm_moving, pair.lm_moving);
        save_landmarks(dir + "/" + r.lm_fixed, pair.lm_fixed);
        nifti::write_image(dir + "/" + r.true_field, Image{pair.true_field.data, {1, 1}});
        if (lesion)
            nifti::write_image(dir + "/" + r.lesion_mask,
                               Image{pair.lesion_mask.unsqueeze(0).to(torch::kFloat32), {1, 1}});
        m.pairs.push_back(r);
    }
    save_manifest(dir + "/manifest.json", m);
    return m;
}

/// A fully loaded registration pair, tensors ready for the model.
struct LoadedPair {
    std::string id;
    torch::Tensor moving, fixed;  // [1, *spatial]
    std::optional<SegmentationMap> seg_moving, seg_fixed;
    std::optional<LandmarkSet> lm_moving, lm_fixed;
    torch::Tensor true_field;   // [D, *spatial] or undefined
    torch::Tensor lesion_mask;  // bool [*spatial] or undefined
    std::vector<double> spacing;
};

inline std::vector<LoadedPair> load_pairs(const Manifest& m, const std::string& dir,
                                          const std::string& split) {
    std::vector<LoadedPair> out;
    for (const auto& r : m.split_pairs(split)) {
        LoadedPair p;
        p.id = r.id;
        auto mi = load_volume(dir + "/" + r.moving);
        auto fi = load_volume(dir + "/" + r.fixed);
        p.moving = mi.data;
        p.fixed = fi.data;
        p.spacing = mi.spacing;
        if (!r.seg_moving.empty())
            p.seg_moving = SegmentationMap{nifti::read_image(dir + "/" + r.seg_moving)
                                               .data.squeeze(0)
                                               .round()
                                               .to(torch::kInt64)};
        if (!r.seg_fixed.empty())
            p.seg_fixed = SegmentationMap{nifti::read_image(dir + "/" + r.seg_fixed)
                                              .data.squeeze(0)
                                              .round()
                                              .to(torch::kInt64)};
        if (!r.lm_moving.empty()) p.lm_moving = load_landmarks(dir + "/" + r.lm_moving);
        if (!r.lm_fixed.empty()) p.lm_fixed = load_landmarks(dir + "/" + r.lm_fixed);
        if (!r.true_field.empty()) p.true_field = nifti::read_image(dir + "/" + r.true_field).data;
        if (!r.lesion_mask.empty())
            p.lesion_mask =
                nifti::read_image(dir + "/" + r.lesion_mask).data.squeeze(0) > 0.5;
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace pulpo::data

#endif

// Command-line front end: synthetic data generation, training, registration,
// evaluation and figure rendering for the probabilistic pyramid registration
// library.
#include <torch/torch.h>

#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <optional>
#include <string>
#include <vector>

#include "pulpo/checkpoint.hpp"
#include "pulpo/config.hpp"
#include "pulpo/data.hpp"
#include "pulpo/inference.hpp"
#include "pulpo/metrics.hpp"
#include "pulpo/nifti.hpp"
#include "pulpo/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace pulpo;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitIo = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

void write_run_manifest(const std::string& dir, const std::string& command, const json& args) {
    json j;
    j["schema_version"] = 1;
    j["command"] = command;
    j["args"] = args;
    fs::create_directories(dir);
    std::ofstream out(dir + "/run_manifest.json");
    if (!out) throw io_error("cannot write " + dir + "/run_manifest.json");
    out << j.dump(2) << "\n";
}

/// Normalize a [H, W] tensor into an 8-bit grayscale OpenCV image; returns the
/// value range used for the caption.
cv::Mat to_gray(const torch::Tensor& t, double& lo, double& hi) {
    auto x = t.to(torch::kFloat64).contiguous();
    lo = x.min().item<double>();
    hi = x.max().item<double>();
    const double range = hi > lo ? hi - lo : 1.0;
    auto u8 = ((x - lo) / range * 255.0).clamp(0, 255).to(torch::kUInt8).contiguous();
    cv::Mat m(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC1);
    std::memcpy(m.data, u8.data_ptr(), u8.numel());
    return m.clone();
}

/// 2D map on disk: 8-bit PNG preview plus raw float32 payload with a JSON
/// sidecar carrying shape and value range.
void save_map2d(const std::string& stem, const torch::Tensor& t) {
    double lo, hi;
    cv::imwrite(stem + ".png", to_gray(t, lo, hi));
    auto raw = t.to(torch::kFloat32).contiguous();
    std::ofstream bin(stem + ".raw", std::ios::binary);
    if (!bin) throw io_error("cannot write " + stem + ".raw");
    bin.write(reinterpret_cast<const char*>(raw.data_ptr<float>()),
              static_cast<std::streamsize>(raw.numel() * sizeof(float)));
    json side;
    side["dtype"] = "float32";
    side["shape"] = std::vector<int64_t>(raw.sizes().begin(), raw.sizes().end());
    side["min"] = lo;
    side["max"] = hi;
    std::ofstream js(stem + ".json");
    js << side.dump(2) << "\n";
}

/// Deformed-grid rendering of a displacement field [2, H, W].
cv::Mat render_grid(const torch::Tensor& phi, int stride = 4) {
    const int h = static_cast<int>(phi.size(1));
    const int w = static_cast<int>(phi.size(2));
    cv::Mat canvas(h, w, CV_8UC1, cv::Scalar(255));
    auto dense = phi.to(torch::kFloat64).contiguous();
    auto a = dense.accessor<double, 3>();
    auto pt = [&](int i, int j) {
        return cv::Point(static_cast<int>(std::lround(j + a[1][i][j])),
                         static_cast<int>(std::lround(i + a[0][i][j])));
    };
    for (int i = 0; i < h; i += stride)
        for (int j = 0; j + 1 < w; ++j) cv::line(canvas, pt(i, j), pt(i, j + 1), cv::Scalar(0));
    for (int j = 0; j < w; j += stride)
        for (int i = 0; i + 1 < h; ++i) cv::line(canvas, pt(i, j), pt(i + 1, j), cv::Scalar(0));
    return canvas;
}

struct Panel {
    cv::Mat img;
    std::string caption;
};

void save_figure(const std::string& path, const std::vector<Panel>& panels) {
    const int cols = panels.size() <= 4 ? 2 : 3;
    const int rows = static_cast<int>((panels.size() + cols - 1) / cols);
    const int cell = 220;
    const int caption_h = 28;
    cv::Mat canvas(rows * (cell + caption_h), cols * cell, CV_8UC3, cv::Scalar(255, 255, 255));
    for (size_t i = 0; i < panels.size(); ++i) {
        cv::Mat resized, color;
        cv::resize(panels[i].img, resized, cv::Size(cell, cell), 0, 0, cv::INTER_NEAREST);
        cv::cvtColor(resized, color, cv::COLOR_GRAY2BGR);
        const int r = static_cast<int>(i) / cols, c = static_cast<int>(i) % cols;
        color.copyTo(canvas(cv::Rect(c * cell, r * (cell + caption_h), cell, cell)));
        cv::putText(canvas, panels[i].caption,
                    cv::Point(c * cell + 4, r * (cell + caption_h) + cell + 18),
                    cv::FONT_HERSHEY_SIMPLEX, 0.38, cv::Scalar(0, 0, 0), 1);
    }
    if (!cv::imwrite(path, canvas)) throw io_error("cannot write " + path);
}

std::string fmt_range(double lo, double hi) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "[%.3g, %.3g]", lo, hi);
    return buf;
}

// ------------------------------------------------------------------ commands

int cmd_synth(const std::string& out, int n, int64_t size, uint64_t seed, bool lesion) {
    PULPO_REQUIRE(size >= 32 && size % 16 == 0,
                  "synth: --size must be >= 32 and divisible by 16");
    PULPO_REQUIRE(n >= 1, "synth: --n must be >= 1");
    write_run_manifest(out, "synth",
                       {{"n", n}, {"size", size}, {"seed", seed}, {"lesion", lesion}});
    auto m = data::materialize_synthetic_dataset(out, n, size, seed, lesion);
    std::cout << "wrote " << m.pairs.size() << " pairs to " << out << "\n";
    return kExitOk;
}

int cmd_train(const std::string& data_dir, const std::string& config_path, const std::string& out,
              const std::optional<std::string>& resume, bool verbose) {
    auto cfg = load_train_config(config_path);
    auto manifest = data::load_manifest(data_dir + "/manifest.json");
    auto train_pairs = data::load_pairs(manifest, data_dir, "train");
    auto val_pairs = data::load_pairs(manifest, data_dir, "val");
    write_run_manifest(out, "train",
                       {{"data", data_dir},
                        {"config", config_path},
                        {"seed", cfg.seed},
                        {"resume", resume ? *resume : ""},
                        {"n_train", train_pairs.size()},
                        {"n_val", val_pairs.size()}});
    auto res = trainer::train(cfg, train_pairs, val_pairs, out, resume, verbose);
    std::cout << "final checkpoint: " << res.final_checkpoint << "\n";
    if (!res.validation.empty()) {
        const auto& v = res.validation.back();
        std::cout << "final validation rmse=" << v.rmse << " tre=" << v.tre_mm
                  << " dsc=" << v.dsc << " jac%=" << v.pct_nonpos_jac << "\n";
    }
    return kExitOk;
}

int cmd_register(const std::string& ckpt, const std::string& moving_path,
                 const std::string& fixed_path, const std::string& out, int samples,
                 uint64_t seed) {
    PULPO_REQUIRE(samples == 0 || samples >= 2,
                  "register: --samples must be >= 2 (a single sample has no variance)");
    auto model = load_model(ckpt);
    model->eval();
    auto m = data::load_volume(moving_path);
    auto f = data::load_volume(fixed_path);
    PULPO_REQUIRE(m.data.sizes() == f.data.sizes(), "register: moving/fixed shape mismatch");
    const bool is2d = m.data.dim() == 3;

    write_run_manifest(out, "register",
                       {{"checkpoint", ckpt},
                        {"moving", moving_path},
                        {"fixed", fixed_path},
                        {"samples", samples},
                        {"seed", seed}});

    auto map = inference::register_map(model, m.data, f.data, ckpt);
    nifti::write_image(out + "/phi.nii", Image{map.phi0, m.spacing});
    nifti::write_image(out + "/warped.nii", Image{map.f_hat0, m.spacing});
    if (is2d) {
        save_map2d(out + "/warped", map.f_hat0.squeeze(0));
        save_map2d(out + "/moving", m.data.squeeze(0));
        save_map2d(out + "/fixed", f.data.squeeze(0));
    }

    json summary;
    summary["mode"] = samples ? "sample" : "mean";
    summary["samples"] = samples;
    summary["seed"] = seed;
    summary["rmse_map"] = metrics::rmse(map.f_hat0, f.data);
    summary["pct_nonpositive_jacobian"] = metrics::percent_nonpositive_jacobian(map.phi0);

    if (samples) {
        auto draws = inference::sample_registrations(model, m.data, f.data, samples, seed, ckpt);
        auto unc = inference::variance_maps(draws);
        nifti::write_image(out + "/var_image.nii",
                           Image{unc.var_image.unsqueeze(0).to(torch::kFloat32), m.spacing});
        nifti::write_image(out + "/var_field.nii",
                           Image{unc.var_field.unsqueeze(0).to(torch::kFloat32), m.spacing});
        if (is2d) {
            save_map2d(out + "/var_image", unc.var_image);
            save_map2d(out + "/var_field", unc.var_field);
        }
        auto ncc = metrics::calibration_ncc_vx(
            [&] {
                std::vector<torch::Tensor> ws;
                for (const auto& d : draws) ws.push_back(d.f_hat0);
                return ws;
            }(),
            f.data);
        if (!ncc.degenerate) summary["calibration_ncc_vx"] = ncc.value;
    }
    std::ofstream js(out + "/summary.json");
    js << summary.dump(2) << "\n";
    std::cout << summary.dump(2) << "\n";
    return kExitOk;
}

struct EvalRow {
    std::string id;
    double rmse = std::nan("");
    double dsc = std::nan("");
    double tre_mm = std::nan("");
    double jac = std::nan("");
    double ncc_vx = std::nan("");
    double ncc_lm = std::nan("");
};

int cmd_evaluate(const std::string& ckpt, const std::string& data_dir, const std::string& split,
                 const std::string& out, int samples, uint64_t seed) {
    PULPO_REQUIRE(samples == 0 || samples >= 2, "evaluate: --samples must be >= 2");
    auto model = load_model(ckpt);
    model->eval();
    auto manifest = data::load_manifest(data_dir + "/manifest.json");
    auto pairs = data::load_pairs(manifest, data_dir, split);
    PULPO_REQUIRE(!pairs.empty(), "evaluate: no pairs in split '" + split + "'");
    write_run_manifest(out, "evaluate",
                       {{"checkpoint", ckpt},
                        {"data", data_dir},
                        {"split", split},
                        {"samples", samples},
                        {"seed", seed}});

    std::vector<EvalRow> rows;
    for (const auto& p : pairs) {
        EvalRow row;
        row.id = p.id;
        auto r = inference::register_map(model, p.moving, p.fixed, ckpt);
        row.rmse = metrics::rmse(r.f_hat0, p.fixed);
        row.jac = metrics::percent_nonpositive_jacobian(r.phi0);
        if (p.seg_moving && p.seg_fixed) {
            auto labels = p.seg_fixed->foreground_labels();
            auto warped = ops::warp(as_batch(metrics::one_hot_labels(p.seg_moving->labels, labels)),
                                    as_batch(r.phi0))
                              .squeeze(0);
            row.dsc = metrics::soft_dsc(warped, metrics::one_hot_labels(p.seg_fixed->labels, labels));
        }
        if (p.lm_moving && p.lm_fixed)
            row.tre_mm = metrics::tre(*p.lm_fixed, *p.lm_moving, r.phi0, p.spacing);
        if (samples) {
            auto draws = inference::sample_registrations(model, p.moving, p.fixed, samples, seed);
            std::vector<torch::Tensor> imgs, fields;
            for (const auto& d : draws) {
                imgs.push_back(d.f_hat0);
                fields.push_back(d.phi0);
            }
            auto vx = metrics::calibration_ncc_vx(imgs, p.fixed);
            if (!vx.degenerate) row.ncc_vx = vx.value;
            if (p.lm_moving && p.lm_fixed && p.lm_fixed->size() >= 3) {
                auto lm = metrics::calibration_ncc_lm(fields, *p.lm_fixed, *p.lm_moving, p.spacing);
                if (!lm.degenerate) row.ncc_lm = lm.value;
            }
        }
        rows.push_back(row);
    }

    fs::create_directories(out);
    std::ofstream csv(out + "/report.csv");
    if (!csv) throw io_error("evaluate: cannot write " + out + "/report.csv");
    csv << "pair_id,rmse,dsc,tre_mm,pct_nonpos_jac,ncc_vx,ncc_lm,n_samples,seed\n";
    auto cell = [](double v) { return std::isnan(v) ? std::string() : std::to_string(v); };
    for (const auto& r : rows)
        csv << r.id << ',' << cell(r.rmse) << ',' << cell(r.dsc) << ',' << cell(r.tre_mm) << ','
            << cell(r.jac) << ',' << cell(r.ncc_vx) << ',' << cell(r.ncc_lm) << ',' << samples
            << ',' << seed << '\n';

    json summary;
    summary["n_pairs"] = rows.size();
    summary["split"] = split;
    auto put = [&](const std::string& key, auto getter) {
        std::vector<double> vals;
        for (const auto& r : rows) {
            double v = getter(r);
            if (!std::isnan(v)) vals.push_back(v);
        }
        if (vals.empty()) return;
        double mean = 0;
        for (double v : vals) mean += v;
        mean /= static_cast<double>(vals.size());
        double var = 0;
        for (double v : vals) var += (v - mean) * (v - mean);
        var = vals.size() > 1 ? var / static_cast<double>(vals.size() - 1) : 0.0;
        summary[key] = {{"mean", mean}, {"std", std::sqrt(var)}, {"n", vals.size()}};
    };
    put("rmse", [](const EvalRow& r) { return r.rmse; });
    put("dsc", [](const EvalRow& r) { return r.dsc; });
    put("tre_mm", [](const EvalRow& r) { return r.tre_mm; });
    put("pct_nonpos_jac", [](const EvalRow& r) { return r.jac; });
    put("ncc_vx", [](const EvalRow& r) { return r.ncc_vx; });
    put("ncc_lm", [](const EvalRow& r) { return r.ncc_lm; });
    std::ofstream js(out + "/summary.json");
    js << summary.dump(2) << "\n";
    std::cout << summary.dump(2) << "\n";
    return kExitOk;
}

torch::Tensor load_raw2d(const std::string& stem) {
    std::ifstream side(stem + ".json");
    if (!side) throw io_error("plot: missing sidecar " + stem + ".json");
    json j;
    side >> j;
    std::vector<int64_t> shape = j.at("shape");
    std::ifstream bin(stem + ".raw", std::ios::binary);
    if (!bin) throw io_error("plot: missing payload " + stem + ".raw");
    auto t = torch::empty(shape, torch::kFloat32);
    bin.read(reinterpret_cast<char*>(t.data_ptr<float>()),
             static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!bin) throw io_error("plot: truncated payload " + stem + ".raw");
    return t;
}

int cmd_plot(const std::string& run_dir, const std::string& out_path) {
    auto m = load_raw2d(run_dir + "/moving");
    auto f = load_raw2d(run_dir + "/fixed");
    auto w = load_raw2d(run_dir + "/warped");
    auto phi = nifti::read_image(run_dir + "/phi.nii").data;
    PULPO_REQUIRE(phi.dim() == 3 && phi.size(0) == 2, "plot: only 2D runs can be rendered");

    std::vector<Panel> panels;
    double lo, hi;
    auto add = [&](const torch::Tensor& t, const std::string& name) {
        auto img = to_gray(t, lo, hi);
        panels.push_back({img, name + " " + fmt_range(lo, hi)});
    };
    add(m, "moving");
    add(f, "fixed");
    add(w, "warped");
    panels.push_back({render_grid(phi), "deformed grid"});
    if (fs::exists(run_dir + "/var_image.raw")) {
        add(load_raw2d(run_dir + "/var_image"), "intensity var");
        add(load_raw2d(run_dir + "/var_field"), "field var");
    }
    save_figure(out_path, panels);
    std::cout << "wrote " << out_path << " (" << panels.size() << " panels)\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Probabilistic multi-scale deformable registration"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic 2D dataset");
    std::string synth_out;
    int synth_n = 20;
    int64_t synth_size = 64;
    uint64_t synth_seed = 0;
    bool synth_lesion = false;
    synth->add_option("--out", synth_out, "Output directory")->required();
    synth->add_option("--n", synth_n, "Number of pairs");
    synth->add_option("--size", synth_size, "Square image extent");
    synth->add_option("--seed", synth_seed, "Dataset seed");
    synth->add_flag("--lesion", synth_lesion, "Add a bright lesion to each moving image");

    // train
    auto* train = app.add_subcommand("train", "Train a model on a materialized dataset");
    std::string train_data, train_cfg, train_out, train_resume;
    bool train_verbose = false;
    train->add_option("--data", train_data, "Dataset directory (with manifest.json)")->required();
    train->add_option("--config", train_cfg, "Training configuration JSON")->required();
    train->add_option("--out", train_out, "Run output directory")->required();
    train->add_option("--resume", train_resume, "Checkpoint to resume from");
    train->add_flag("--verbose", train_verbose, "Print per-epoch validation metrics");

    // register
    auto* reg = app.add_subcommand("register", "Register a moving image onto a fixed image");
    std::string reg_ckpt, reg_moving, reg_fixed, reg_out;
    int reg_samples = 0;
    uint64_t reg_seed = 0;
    reg->add_option("--checkpoint", reg_ckpt, "Model checkpoint")->required();
    reg->add_option("--moving", reg_moving, "Moving volume")->required();
    reg->add_option("--fixed", reg_fixed, "Fixed volume")->required();
    reg->add_option("--out", reg_out, "Output directory")->required();
    reg->add_option("--samples", reg_samples, "Posterior samples for uncertainty maps (>= 2)");
    reg->add_option("--seed", reg_seed, "Sampling seed");

    // evaluate
    auto* eval = app.add_subcommand("evaluate", "Evaluate a checkpoint on a dataset split");
    std::string eval_ckpt, eval_data, eval_split = "test", eval_out;
    int eval_samples = 0;
    uint64_t eval_seed = 0;
    eval->add_option("--checkpoint", eval_ckpt, "Model checkpoint")->required();
    eval->add_option("--data", eval_data, "Dataset directory")->required();
    eval->add_option("--split", eval_split, "Dataset split (train/val/test)");
    eval->add_option("--out", eval_out, "Report output directory")->required();
    eval->add_option("--samples", eval_samples, "Posterior samples for calibration metrics");
    eval->add_option("--seed", eval_seed, "Sampling seed");

    // plot
    auto* plot = app.add_subcommand("plot", "Render a registration run as a figure");
    std::string plot_run, plot_out;
    plot->add_option("--run", plot_run, "Directory written by `register`")->required();
    plot->add_option("--out", plot_out, "Output PNG path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (synth->parsed())
            return cmd_synth(synth_out, synth_n, synth_size, synth_seed, synth_lesion);
        if (train->parsed())
            return cmd_train(train_data, train_cfg, train_out,
                             train_resume.empty() ? std::nullopt
                                                  : std::optional<std::string>(train_resume),
                             train_verbose);
        if (reg->parsed())
            return cmd_register(reg_ckpt, reg_moving, reg_fixed, reg_out, reg_samples, reg_seed);
        if (eval->parsed())
            return cmd_evaluate(eval_ckpt, eval_data, eval_split, eval_out, eval_samples, eval_seed);
        if (plot->parsed()) return cmd_plot(plot_run, plot_out);
    } catch (const contract_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const io_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const numeric_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    }
    return kExitUsage;
}

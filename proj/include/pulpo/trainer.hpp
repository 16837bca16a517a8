#ifndef PULPO_TRAINER_HPP
#define PULPO_TRAINER_HPP

#include <torch/torch.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pulpo/checkpoint.hpp"
#include "pulpo/config.hpp"
#include "pulpo/data.hpp"
#include "pulpo/inference.hpp"
#include "pulpo/metrics.hpp"
#include "pulpo/model.hpp"
#include "pulpo/objective.hpp"

namespace pulpo::trainer {

namespace fs = std::filesystem;

struct ValidationRow {
    int64_t epoch = 0;
    double rmse = std::nan("");
    double dsc = std::nan("");
    double tre_mm = std::nan("");
    double pct_nonpos_jac = std::nan("");
};

/// Mean MAP-inference metrics over a pair list. Metrics without annotations
/// stay NaN (absent), never fabricated.
inline ValidationRow validate(PulpoNet& model, const std::vector<data::LoadedPair>& pairs,
                              int64_t epoch = 0) {
    ValidationRow row;
    row.epoch = epoch;
    if (pairs.empty()) return row;
    double rmse_acc = 0, dsc_acc = 0, tre_acc = 0, jac_acc = 0;
    int n_dsc = 0, n_tre = 0;
    for (const auto& p : pairs) {
        auto r = inference::register_map(model, p.moving, p.fixed);
        rmse_acc += metrics::rmse(r.f_hat0, p.fixed);
        jac_acc += metrics::percent_nonpositive_jacobian(r.phi0);
        if (p.seg_moving && p.seg_fixed) {
            auto labels = p.seg_fixed->foreground_labels();
            auto onehot_m = metrics::one_hot_labels(p.seg_moving->labels, labels);
            auto warped = ops::warp(as_batch(onehot_m), as_batch(r.phi0)).squeeze(0);
            dsc_acc += metrics::soft_dsc(warped, metrics::one_hot_labels(p.seg_fixed->labels, labels));
            ++n_dsc;
        }
        if (p.lm_moving && p.lm_fixed) {
            tre_acc += metrics::tre(*p.lm_fixed, *p.lm_moving, r.phi0, p.spacing);
            ++n_tre;
        }
    }
    const double n = static_cast<double>(pairs.size());
    row.rmse = rmse_acc / n;
    row.pct_nonpos_jac = jac_acc / n;
    if (n_dsc) row.dsc = dsc_acc / n_dsc;
    if (n_tre) row.tre_mm = tre_acc / n_tre;
    return row;
}

struct TrainResult {
    std::string final_checkpoint;
    std::vector<double> loss_per_step;
    std::vector<ValidationRow> validation;
};

namespace detail {

inline void check_finite(const LossBreakdown& bd) {
    auto bad = [](const torch::Tensor& t) { return !t.isfinite().all().item<bool>(); };
    for (size_t l = 0; l < bd.kl.size(); ++l) {
        if (bad(bd.kl[l])) throw numeric_error("non-finite loss term kl_l" + std::to_string(l));
        if (bad(bd.ncc[l])) throw numeric_error("non-finite loss term ncc_l" + std::to_string(l));
        if (bad(bd.reg[l])) throw numeric_error("non-finite loss term reg_l" + std::to_string(l));
    }
    if (bad(bd.total)) throw numeric_error("non-finite loss term total");
}

}  // namespace detail

/// Seeded, checkpointed optimization loop. Deterministic given the seed;
/// resumable from any checkpoint with a bit-compatible continuation of the
/// RNG schedule. Appends one CSV row per step to <out_dir>/log.csv.
inline TrainResult train(const TrainConfig& config, const std::vector<data::LoadedPair>& train_pairs,
                         const std::vector<data::LoadedPair>& val_pairs, const std::string& out_dir,
                         const std::optional<std::string>& resume = std::nullopt,
                         bool verbose = false) {
    config.validate();
    PULPO_REQUIRE(!train_pairs.empty(), "train: dataset is empty");
    fs::create_directories(out_dir);

    torch::manual_seed(static_cast<uint64_t>(config.seed));
    PulpoNet model(config.model);
    torch::optim::Adam optim(model->parameters(),
                             torch::optim::AdamOptions(config.learning_rate));
    auto gen = make_generator(static_cast<uint64_t>(config.seed) ^ 0x5deece66dULL);

    int64_t start_epoch = 0;
    int64_t step = 0;
    if (resume) {
        auto meta = read_checkpoint_meta(*resume);
        load_model_state(*resume, model);
        if (meta.has_optimizer) load_optimizer_state(*resume, optim);
        gen.set_state(meta.rng_state);
        start_epoch = meta.epoch;
        step = meta.step;
    }

    const int L = config.model.latent_levels;
    std::ofstream log(out_dir + "/log.csv", resume ? std::ios::app : std::ios::trunc);
    if (!log) throw io_error("train: cannot write " + out_dir + "/log.csv");
    if (!resume) {
        log << "step,epoch,total";
        for (const char* t : {"kl", "ncc", "reg"})
            for (int l = 0; l < L; ++l) log << ',' << t << "_l" << l;
        log << ",wall_time_s\n";
    }

    const auto t0 = std::chrono::steady_clock::now();
    TrainResult result;

    for (int64_t epoch = start_epoch; epoch < config.epochs; ++epoch) {
        // sample order fixed by (seed, epoch); resume reproduces it exactly
        std::vector<size_t> order(train_pairs.size());
        std::iota(order.begin(), order.end(), size_t{0});
        std::mt19937_64 shuffle_rng(static_cast<uint64_t>(config.seed) * 1000003ULL +
                                    static_cast<uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        for (size_t b = 0; b < order.size(); b += config.batch_size) {
            const size_t e = std::min(order.size(), b + config.batch_size);
            std::vector<torch::Tensor> ms, fs_;
            for (size_t i = b; i < e; ++i) {
                ms.push_back(train_pairs[order[i]].moving);
                fs_.push_back(train_pairs[order[i]].fixed);
            }
            auto m = torch::stack(ms, 0);
            auto f = torch::stack(fs_, 0);

            optim.zero_grad();
            auto out = model->forward(m, f, ForwardMode::sample, gen);
            auto bd = total_loss(out, m, f, config.weights);
            detail::check_finite(bd);
            bd.total.backward();
            torch::nn::utils::clip_grad_norm_(model->parameters(), config.grad_clip);
            optim.step();

            const double wall =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            log << step << ',' << epoch << ',' << bd.total.item<double>();
            for (const auto* terms : {&bd.kl, &bd.ncc, &bd.reg})
                for (const auto& t : *terms) log << ',' << t.item<double>();
            log << ',' << wall << '\n';
            result.loss_per_step.push_back(bd.total.item<double>());
            ++step;
        }
        log.flush();

        if (!val_pairs.empty() && (epoch + 1) % config.validation_interval == 0) {
            auto row = validate(model, val_pairs, epoch + 1);
            result.validation.push_back(row);
            if (verbose)
                std::printf("epoch %lld val rmse=%.4f tre=%.3f dsc=%.3f jac%%=%.3f\n",
                            static_cast<long long>(epoch + 1), row.rmse, row.tre_mm, row.dsc,
                            row.pct_nonpos_jac);
        }
        if ((epoch + 1) % config.checkpoint_interval == 0 && epoch + 1 < config.epochs) {
            auto path = out_dir + "/ckpt_epoch" + std::to_string(epoch + 1) + ".pt";
            save_checkpoint(path, model, config, &optim, epoch + 1, step, gen);
        }
    }

    result.final_checkpoint = out_dir + "/ckpt_final.pt";
    save_checkpoint(result.final_checkpoint, model, config, &optim, config.epochs, step, gen);
    return result;
}

}  // namespace pulpo::trainer

#endif

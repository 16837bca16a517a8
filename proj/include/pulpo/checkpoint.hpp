#ifndef PULPO_CHECKPOINT_HPP
#define PULPO_CHECKPOINT_HPP

#include <torch/torch.h>

#include <string>

#include "pulpo/config.hpp"
#include "pulpo/model.hpp"

namespace pulpo {

// Single-archive checkpoint: parameters, config, optimizer state, epoch
// counter and RNG state, versioned by an integer schema field.
constexpr int64_t kCheckpointSchema = 1;

struct CheckpointMeta {
    TrainConfig config;
    int64_t epoch = 0;
    int64_t step = 0;
    torch::Tensor rng_state;
    bool has_optimizer = false;
};

inline void save_checkpoint(const std::string& path, PulpoNet& model, const TrainConfig& config,
                            torch::optim::Optimizer* optim, int64_t epoch, int64_t step,
                            const torch::Generator& gen) {
    for (const auto& p : model->parameters())
        if (!p.isfinite().all().item<bool>())
            throw numeric_error("save_checkpoint: refusing to write non-finite parameters");

    torch::serialize::OutputArchive ar;
    ar.write("schema_version", torch::tensor(kCheckpointSchema));
    ar.write("config_json", to_json(config).dump());
    ar.write("epoch", torch::tensor(epoch));
    ar.write("step", torch::tensor(step));
    ar.write("rng_state", gen.get_state());
    ar.write("has_optimizer", torch::tensor(optim != nullptr ? int64_t{1} : int64_t{0}));

    torch::serialize::OutputArchive model_ar;
    model->save(model_ar);
    ar.write("model", model_ar);
    if (optim) {
        torch::serialize::OutputArchive opt_ar;
        optim->save(opt_ar);
        ar.write("optimizer", opt_ar);
    }
    ar.save_to(path);
}

/// Read metadata only (config, counters, RNG state); model / optimizer state
/// is restored by the load_* helpers below.
inline CheckpointMeta read_checkpoint_meta(const std::string& path) {
    torch::serialize::InputArchive ar;
    try {
        ar.load_from(path);
    } catch (const c10::Error& e) {
        throw io_error("read_checkpoint_meta: cannot load " + path + ": " + e.what_without_backtrace());
    }
    torch::Tensor schema;
    ar.read("schema_version", schema);
    if (schema.item<int64_t>() != kCheckpointSchema)
        throw io_error("read_checkpoint_meta: unsupported checkpoint schema in " + path);
    CheckpointMeta meta;
    c10::IValue cfg;
    ar.read("config_json", cfg);
    meta.config = train_config_from_json(json::parse(cfg.toStringRef()));
    torch::Tensor t;
    ar.read("epoch", t);
    meta.epoch = t.item<int64_t>();
    ar.read("step", t);
    meta.step = t.item<int64_t>();
    ar.read("rng_state", meta.rng_state);
    ar.read("has_optimizer", t);
    meta.has_optimizer = t.item<int64_t>() != 0;
    return meta;
}

inline void load_model_state(const std::string& path, PulpoNet& model) {
    torch::serialize::InputArchive ar;
    ar.load_from(path);
    torch::serialize::InputArchive model_ar;
    ar.read("model", model_ar);
    model->load(model_ar);
}

inline void load_optimizer_state(const std::string& path, torch::optim::Optimizer& optim) {
    torch::serialize::InputArchive ar;
    ar.load_from(path);
    torch::serialize::InputArchive opt_ar;
    ar.read("optimizer", opt_ar);
    optim.load(opt_ar);
}

/// Construct a model from a checkpoint's stored config and load its weights.
inline PulpoNet load_model(const std::string& path, CheckpointMeta* meta_out = nullptr) {
    auto meta = read_checkpoint_meta(path);
    PulpoNet model(meta.config.model);
    load_model_state(path, model);
    if (meta_out) *meta_out = meta;
    return model;
}

}  // namespace pulpo

#endif

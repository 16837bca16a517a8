#ifndef PULPO_CONFIG_HPP
#define PULPO_CONFIG_HPP

#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

#include "pulpo/core.hpp"
#include "pulpo/model.hpp"
#include "pulpo/objective.hpp"

namespace pulpo {

using json = nlohmann::json;

inline json to_json(const ModelConfig& c) {
    return json{{"spatial_dim", c.spatial_dim},
                {"total_levels", c.total_levels},
                {"latent_levels", c.latent_levels},
                {"latent_channels", c.latent_channels},
                {"base_channels", c.base_channels},
                {"integration_steps", c.integration_steps},
                {"nonhierarchical_ablation", c.nonhierarchical_ablation},
                {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.spatial_dim = j.value("spatial_dim", 2);
    c.total_levels = j.value("total_levels", 5);
    c.latent_levels = j.value("latent_levels", 4);
    c.latent_channels = j.value("latent_channels", 0);
    c.base_channels = j.value("base_channels", 16);
    c.integration_steps = j.value("integration_steps", 7);
    c.nonhierarchical_ablation = j.value("nonhierarchical_ablation", false);
    c.seed = j.value("seed", int64_t{0});
    return c;
}

inline json to_json(const LossWeights& w) {
    return json{{"beta", w.beta}, {"gamma", w.gamma}, {"lambda", w.lambda}};
}

inline LossWeights loss_weights_from_json(const json& j) {
    LossWeights w;
    w.beta = j.value("beta", 0.1);
    w.gamma = j.value("gamma", 0.05);
    w.lambda = j.value("lambda", 0.025);
    return w;
}

/// Declarative training configuration; versioned JSON document on disk.
struct TrainConfig {
    int schema_version = 1;
    int epochs = 2;
    int batch_size = 8;
    double learning_rate = 1e-4;
    std::string pairing = "inter";  // or "intra"
    int64_t seed = 0;
    int checkpoint_interval = 1;  // epochs
    int validation_interval = 1;  // epochs
    double grad_clip = 1.0;
    LossWeights weights;
    ModelConfig model;

    void validate() const {
        PULPO_REQUIRE(epochs >= 1, "TrainConfig: epochs >= 1");
        PULPO_REQUIRE(batch_size >= 1, "TrainConfig: batch_size >= 1");
        PULPO_REQUIRE(learning_rate > 0, "TrainConfig: learning_rate > 0");
        PULPO_REQUIRE(pairing == "inter" || pairing == "intra",
                      "TrainConfig: pairing must be inter or intra");
        model.validate();
    }
};

inline json to_json(const TrainConfig& c) {
    return json{{"schema_version", c.schema_version},
                {"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"learning_rate", c.learning_rate},
                {"pairing", c.pairing},
                {"seed", c.seed},
                {"checkpoint_interval", c.checkpoint_interval},
                {"validation_interval", c.validation_interval},
                {"grad_clip", c.grad_clip},
                {"weights", to_json(c.weights)},
                {"model", to_json(c.model)}};
}

inline TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.schema_version = j.value("schema_version", 1);
    c.epochs = j.value("epochs", 2);
    c.batch_size = j.value("batch_size", 8);
    c.learning_rate = j.value("learning_rate", 1e-4);
    c.pairing = j.value("pairing", std::string("inter"));
    c.seed = j.value("seed", int64_t{0});
    c.checkpoint_interval = j.value("checkpoint_interval", 1);
    c.validation_interval = j.value("validation_interval", 1);
    c.grad_clip = j.value("grad_clip", 1.0);
    if (j.contains("weights")) c.weights = loss_weights_from_json(j["weights"]);
    if (j.contains("model")) c.model = model_config_from_json(j["model"]);
    return c;
}

inline TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("load_train_config: cannot open " + path);
    json j;
    in >> j;
    return train_config_from_json(j);
}

inline void save_train_config(const std::string& path, const TrainConfig& c) {
    std::ofstream out(path);
    if (!out) throw io_error("save_train_config: cannot write " + path);
    out << to_json(c).dump(2) << "\n";
}

}  // namespace pulpo

#endif

#pragma once

#include <cstdlib>
#include <fstream>
#include <set>

#include "relaxation.hpp"
#include "search_space.hpp"
#include "supernet.hpp"

namespace entran {

struct TrainerConfig {
    double lambda = 0.1;
    int epochs = 30;
    int batch_size = 16;
    double w_lr = 0.1, w_momentum = 0.9, w_weight_decay = 3e-4;
    double arch_lr = 6e-3, arch_beta1 = 0.5, arch_beta2 = 0.999, arch_weight_decay = 1e-3;
    double grad_clip = 5.0;
    std::uint64_t seed = 1;
    TemperatureSchedule temperature{5.0, 0.923};

    void validate() const {
        if (lambda < 0.0) throw std::invalid_argument("lambda must be >= 0");
        if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
        temperature.validate();
    }
};

struct RetrainConfig {
    int n_cells = 4;
    int init_channels = 8;
    int epochs = 16;
};

struct RunConfig {
    SearchSpaceConfig space;
    SupernetConfig supernet;
    TrainerConfig trainer;
    RetrainConfig retrain;
    std::string dataset = "synthetic:4,1,8,8,32,7";
    std::string out_dir;
};

namespace detail {

inline const std::set<std::string>& known_config_keys() {
    static const std::set<std::string> keys = {
        "mode",          "n_nodes",          "op_set",         "include_zero",      "ops",
        "n_cells",       "init_channels",    "bottleneck_ratio", "engine_placement", "feature_sharing",
        "transit_coeff", "node_norm",  "lambda",           "epochs",         "batch_size",        "w_lr",
        "w_momentum",    "w_weight_decay",   "arch_lr",        "arch_beta1",        "arch_beta2",
        "arch_weight_decay", "grad_clip",    "seed",           "temperature",       "temperature_decay",
        "dataset",       "out",              "retrain_cells",  "retrain_channels",  "retrain_epochs",
    };
    return keys;
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (!detail::known_config_keys().count(key))
            throw std::invalid_argument("unknown config key: \"" + key + "\"");

    RunConfig cfg;
    cfg.supernet.mode = mode_from_name(j.value("mode", "entran"));
    cfg.space.n_nodes = j.value("n_nodes", 6);
    cfg.space.op_set = op_set_from_name(j.value("op_set", "standard"));
    if (j.contains("ops")) {
        if (cfg.space.op_set != OpSet::custom)
            throw std::invalid_argument("config keys \"ops\" and \"op_set\" disagree: listing ops requires op_set=custom");
        for (const auto& name : j.at("ops")) cfg.space.custom_ops.push_back(op_from_name(name.get<std::string>()));
    } else if (cfg.space.op_set == OpSet::custom) {
        throw std::invalid_argument("config keys \"op_set\" and \"ops\" disagree: op_set=custom requires an ops list");
    }

    // DST removes the zero operation; an explicit include_zero=true conflicts.
    if (cfg.supernet.mode == Mode::dst) {
        if (j.contains("include_zero") && j.at("include_zero").get<bool>())
            throw std::invalid_argument("config keys \"mode\" and \"include_zero\" disagree: dst requires include_zero=false");
        cfg.space.include_zero = false;
    } else {
        cfg.space.include_zero = j.value("include_zero", true);
    }

    cfg.supernet.n_cells = j.value("n_cells", 8);
    cfg.supernet.init_channels = j.value("init_channels", 16);
    cfg.supernet.bottleneck_ratio = j.value("bottleneck_ratio", 4);
    cfg.supernet.engine_placement = placement_from_name(j.value("engine_placement", "first"));
    cfg.supernet.feature_sharing = j.value("feature_sharing", true);
    cfg.supernet.node_norm = j.value("node_norm", true);
    cfg.supernet.transit_coeff = transit_coeff_from_name(j.value("transit_coeff", "unit"));

    cfg.trainer.lambda = j.value("lambda", 0.1);
    cfg.trainer.epochs = j.value("epochs", 30);
    cfg.trainer.batch_size = j.value("batch_size", 16);
    cfg.trainer.w_lr = j.value("w_lr", 0.1);
    cfg.trainer.w_momentum = j.value("w_momentum", 0.9);
    cfg.trainer.w_weight_decay = j.value("w_weight_decay", 3e-4);
    cfg.trainer.arch_lr = j.value("arch_lr", 6e-3);
    cfg.trainer.arch_beta1 = j.value("arch_beta1", 0.5);
    cfg.trainer.arch_beta2 = j.value("arch_beta2", 0.999);
    cfg.trainer.arch_weight_decay = j.value("arch_weight_decay", 1e-3);
    cfg.trainer.grad_clip = j.value("grad_clip", 5.0);
    cfg.trainer.seed = j.value("seed", std::uint64_t(1));
    cfg.trainer.temperature.initial = j.value("temperature", 5.0);
    cfg.trainer.temperature.decay = j.value("temperature_decay", 0.923);

    cfg.retrain.n_cells = j.value("retrain_cells", 4);
    cfg.retrain.init_channels = j.value("retrain_channels", 8);
    cfg.retrain.epochs = j.value("retrain_epochs", 16);

    cfg.dataset = j.value("dataset", std::string("synthetic:4,1,8,8,32,7"));
    cfg.out_dir = j.value("out", std::string(""));

    cfg.trainer.validate();
    cfg.supernet.validate();
    if (cfg.supernet.init_channels % cfg.supernet.bottleneck_ratio != 0)
        throw std::invalid_argument("config keys \"init_channels\" and \"bottleneck_ratio\" disagree: " +
                                    std::to_string(cfg.supernet.init_channels) + " is not divisible by " +
                                    std::to_string(cfg.supernet.bottleneck_ratio));
    list_edges(cfg.space);       // validates n_nodes
    if (op_catalog(cfg.space).empty()) throw std::invalid_argument("operation catalog is empty");
    return cfg;
}

// File loads honor the ENTRAN_SEED override; embedded config snapshots
// (checkpoints) go through parse_config and are taken verbatim.
inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("config parse error in " + path + ": " + e.what());
    }
    RunConfig cfg = parse_config(j);
    if (const char* env = std::getenv("ENTRAN_SEED")) cfg.trainer.seed = std::strtoull(env, nullptr, 10);
    return cfg;
}

inline nlohmann::json config_to_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["mode"] = mode_name(cfg.supernet.mode);
    j["n_nodes"] = cfg.space.n_nodes;
    j["op_set"] = op_set_name(cfg.space.op_set);
    j["include_zero"] = cfg.space.include_zero;
    if (cfg.space.op_set == OpSet::custom) {
        auto ops = nlohmann::json::array();
        for (Op op : cfg.space.custom_ops) ops.push_back(op_name(op));
        j["ops"] = ops;
    }
    j["n_cells"] = cfg.supernet.n_cells;
    j["init_channels"] = cfg.supernet.init_channels;
    j["bottleneck_ratio"] = cfg.supernet.bottleneck_ratio;
    j["engine_placement"] = placement_name(cfg.supernet.engine_placement);
    j["feature_sharing"] = cfg.supernet.feature_sharing;
    j["node_norm"] = cfg.supernet.node_norm;
    j["transit_coeff"] = transit_coeff_name(cfg.supernet.transit_coeff);
    j["lambda"] = cfg.trainer.lambda;
    j["epochs"] = cfg.trainer.epochs;
    j["batch_size"] = cfg.trainer.batch_size;
    j["w_lr"] = cfg.trainer.w_lr;
    j["w_momentum"] = cfg.trainer.w_momentum;
    j["w_weight_decay"] = cfg.trainer.w_weight_decay;
    j["arch_lr"] = cfg.trainer.arch_lr;
    j["arch_beta1"] = cfg.trainer.arch_beta1;
    j["arch_beta2"] = cfg.trainer.arch_beta2;
    j["arch_weight_decay"] = cfg.trainer.arch_weight_decay;
    j["grad_clip"] = cfg.trainer.grad_clip;
    j["seed"] = cfg.trainer.seed;
    j["temperature"] = cfg.trainer.temperature.initial;
    j["temperature_decay"] = cfg.trainer.temperature.decay;
    j["retrain_cells"] = cfg.retrain.n_cells;
    j["retrain_channels"] = cfg.retrain.init_channels;
    j["retrain_epochs"] = cfg.retrain.epochs;
    j["dataset"] = cfg.dataset;
    if (!cfg.out_dir.empty()) j["out"] = cfg.out_dir;
    return j;
}

}  // namespace entran

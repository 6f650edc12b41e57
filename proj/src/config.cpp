#include "cimt/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "cimt/checkpoint.hpp"
#include "cimt/errors.hpp"
#include "cimt/rng.hpp"

namespace cimt {

using nlohmann::json;

namespace {

json difficulty_to_json(const DifficultyConfig& d) {
    json j;
    j["contrast_delta"] = d.contrast_delta;
    j["deform_amp"] = d.deform_amp;
    j["noise_std"] = d.noise_std;
    j["lumen_content_prob"] = d.lumen_content_prob;
    j["tumor_prob"] = d.tumor_prob;
    return j;
}

json data_to_json(const DataConfig& d) {
    json j;
    j["n_train"] = d.n_train;
    j["n_val"] = d.n_val;
    j["n_test"] = d.n_test;
    j["prevalence"] = d.prevalence;
    j["base_seed"] = d.base_seed;
    j["extents"] = d.extents;
    j["difficulty"] = difficulty_to_json(d.difficulty);
    return j;
}

json train_to_json(const TrainConfig& t) {
    json j;
    j["preset"] = t.preset;
    j["epochs"] = t.epochs;
    j["stage_a_epochs"] = t.stage_a_epochs;
    j["freeze_epochs"] = t.freeze_epochs;
    j["lr"] = t.lr;
    j["backbone_lr_multiplier"] = t.backbone_lr_multiplier;
    j["batch_size"] = t.batch_size;
    j["seed"] = t.seed;
    j["augment_flips"] = t.augment_flips;
    j["augment_intensity"] = t.augment_intensity;
    j["cls_weight"] = t.cls_weight;
    j["deep_weight"] = t.deep_weight;
    return j;
}

json eval_to_json(const EvalConfig& e) {
    json j;
    j["bootstrap_b"] = e.bootstrap_b;
    j["alpha"] = e.alpha;
    j["seed"] = e.seed;
    j["oracle_roi"] = e.oracle_roi;
    return j;
}

json config_to_json(const RunConfig& cfg) {
    json j;
    j["data"] = data_to_json(cfg.data);
    j["model"] = dims_to_json(cfg.model);
    j["train"] = train_to_json(cfg.train);
    j["eval"] = eval_to_json(cfg.eval);
    return j;
}

// Every key in `in` must exist in the default-built template with the same
// JSON category (object / array / bool / number / string).
void check_keys(const json& in, const json& tmpl, const std::string& path) {
    if (!in.is_object()) throw ConfigError("config section " + path + " must be an object");
    for (const auto& [key, val] : in.items()) {
        const std::string where = path.empty() ? key : path + "." + key;
        if (!tmpl.contains(key)) throw ConfigError("unknown config key: " + where);
        const json& tv = tmpl.at(key);
        if (tv.is_object()) {
            check_keys(val, tv, where);
        } else if (tv.is_array()) {
            if (!val.is_array() || val.size() != tv.size())
                throw ConfigError("config key " + where + " must be an array of " +
                                  std::to_string(tv.size()) + " numbers");
            for (const json& e : val)
                if (!e.is_number())
                    throw ConfigError("config key " + where + " must hold numbers");
        } else if (tv.is_boolean()) {
            if (!val.is_boolean()) throw ConfigError("config key " + where + " must be a bool");
        } else if (tv.is_string()) {
            if (!val.is_string()) throw ConfigError("config key " + where + " must be a string");
        } else {
            if (!val.is_number()) throw ConfigError("config key " + where + " must be a number");
        }
    }
}

template <typename T>
void read_into(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void DataConfig::validate() const {
    if (n_train < 0 || n_val < 0 || n_test < 0)
        throw ConfigError("data split sizes must be >= 0");
    if (n_train + n_val + n_test == 0) throw ConfigError("dataset would be empty");
    if (!(prevalence >= 0 && prevalence <= 1))
        throw ConfigError("data.prevalence must be in [0, 1]");
    for (int e : extents)
        if (e < 16 || e % 8 != 0)
            throw ConfigError("data.extents must be multiples of 8, at least 16");
    difficulty.validate();
}

void EvalConfig::validate() const {
    if (bootstrap_b < 100) throw ConfigError("eval.bootstrap_b must be >= 100");
    if (!(alpha > 0 && alpha < 1)) throw ConfigError("eval.alpha must be in (0, 1)");
}

void RunConfig::validate() const {
    data.validate();
    model.validate();
    train.validate();
    eval.validate();
}

RunConfig config_from_json_text(const std::string& text) {
    json in;
    try {
        in = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
    RunConfig cfg;
    check_keys(in, config_to_json(cfg), "");

    if (in.contains("data")) {
        const json& d = in.at("data");
        read_into(d, "n_train", cfg.data.n_train);
        read_into(d, "n_val", cfg.data.n_val);
        read_into(d, "n_test", cfg.data.n_test);
        read_into(d, "prevalence", cfg.data.prevalence);
        read_into(d, "base_seed", cfg.data.base_seed);
        read_into(d, "extents", cfg.data.extents);
        if (d.contains("difficulty")) {
            const json& f = d.at("difficulty");
            read_into(f, "contrast_delta", cfg.data.difficulty.contrast_delta);
            read_into(f, "deform_amp", cfg.data.difficulty.deform_amp);
            read_into(f, "noise_std", cfg.data.difficulty.noise_std);
            read_into(f, "lumen_content_prob", cfg.data.difficulty.lumen_content_prob);
            read_into(f, "tumor_prob", cfg.data.difficulty.tumor_prob);
        }
    }
    if (in.contains("model")) {
        const json& m = in.at("model");
        read_into(m, "in_channels", cfg.model.in_channels);
        read_into(m, "base_width", cfg.model.base_width);
        read_into(m, "num_classes", cfg.model.num_classes);
        read_into(m, "num_queries", cfg.model.num_queries);
        read_into(m, "embed_dim", cfg.model.embed_dim);
        read_into(m, "num_heads", cfg.model.num_heads);
        read_into(m, "cls_hidden", cfg.model.cls_hidden);
        read_into(m, "roi_margin", cfg.model.roi_margin);
    }
    if (in.contains("train")) {
        const json& t = in.at("train");
        read_into(t, "preset", cfg.train.preset);
        read_into(t, "epochs", cfg.train.epochs);
        read_into(t, "stage_a_epochs", cfg.train.stage_a_epochs);
        read_into(t, "freeze_epochs", cfg.train.freeze_epochs);
        read_into(t, "lr", cfg.train.lr);
        read_into(t, "backbone_lr_multiplier", cfg.train.backbone_lr_multiplier);
        read_into(t, "batch_size", cfg.train.batch_size);
        read_into(t, "seed", cfg.train.seed);
        read_into(t, "augment_flips", cfg.train.augment_flips);
        read_into(t, "augment_intensity", cfg.train.augment_intensity);
        read_into(t, "cls_weight", cfg.train.cls_weight);
        read_into(t, "deep_weight", cfg.train.deep_weight);
    }
    if (in.contains("eval")) {
        const json& e = in.at("eval");
        read_into(e, "bootstrap_b", cfg.eval.bootstrap_b);
        read_into(e, "alpha", cfg.eval.alpha);
        read_into(e, "seed", cfg.eval.seed);
        read_into(e, "oracle_roi", cfg.eval.oracle_roi);
    }
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    return config_from_json_text(buf.str());
}

std::string config_to_json_text(const RunConfig& cfg) {
    return config_to_json(cfg).dump(2) + "\n";
}

std::string config_hash(const RunConfig& cfg) {
    const std::string canon = config_to_json(cfg).dump();
    const uint64_t h = fnv1a(canon.data(), canon.size());
    std::ostringstream os;
    os << std::hex;
    for (int i = 15; i >= 0; --i) os << ((h >> (4 * i)) & 0xf);
    return os.str();
}

}  // namespace cimt

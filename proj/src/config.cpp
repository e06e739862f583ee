// SPDX-License-Identifier: Apache-2.0

#include "refseg/config.h"

#include <fstream>
#include <stdexcept>

namespace refseg {

namespace {

template <typename T>
void read_field(const nlohmann::json& j, const char* name, T& out) {
    if (!j.contains(name)) return;
    try {
        out = j.at(name).get<T>();
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("config field '") + name + "': " + e.what());
    }
}

void require_positive(const char* name, double v) {
    if (!(v > 0)) throw std::runtime_error(std::string("config field '") + name + "' must be positive");
}

} // namespace

void RunConfig::validate() const {
    require_positive("image_size", image_size);
    require_positive("max_tokens", max_tokens);
    require_positive("text_channels", text_channels);
    require_positive("text_blocks", text_blocks);
    require_positive("stem_channels", stem_channels);
    require_positive("heads", heads);
    require_positive("temperature", temperature);
    require_positive("lr0", lr0);
    require_positive("poly_power", poly_power);
    require_positive("total_steps", total_steps);
    require_positive("batch_size", batch_size);
    if (stage_channels.size() != 4)
        throw std::runtime_error("config field 'stage_channels' must list 4 stages");
    for (int c : stage_channels) require_positive("stage_channels", c);
    if (alpha_window_sides.size() != beta_run_lengths.size() || alpha_window_sides.empty())
        throw std::runtime_error(
            "config fields 'alpha_window_sides'/'beta_run_lengths' must be non-empty and equal length");
    for (int s : alpha_window_sides)
        if (s < 1 || s % 2 == 0)
            throw std::runtime_error("config field 'alpha_window_sides' entries must be odd and >= 1");
    for (int r : beta_run_lengths) require_positive("beta_run_lengths", r);
    if (image_size % 32 != 0)
        throw std::runtime_error("config field 'image_size' must be a multiple of 32");
    if (text_channels % heads != 0)
        throw std::runtime_error("config field 'text_channels' must be divisible by 'heads'");
    for (int n = 1; n < 4; n++)
        if (stage_channels[static_cast<size_t>(n)] % heads != 0)
            throw std::runtime_error("config field 'stage_channels' (stages 2..4) must be divisible by 'heads'");
    if (weight_decay < 0) throw std::runtime_error("config field 'weight_decay' must be >= 0");
    if (gen.image_size != image_size)
        throw std::runtime_error("config field 'generate.image_size' must match 'image_size'");
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    RunConfig c;
    read_field(j, "image_size", c.image_size);
    read_field(j, "max_tokens", c.max_tokens);
    read_field(j, "text_channels", c.text_channels);
    read_field(j, "text_blocks", c.text_blocks);
    read_field(j, "stem_channels", c.stem_channels);
    read_field(j, "stage_channels", c.stage_channels);
    read_field(j, "alpha_window_sides", c.alpha_window_sides);
    read_field(j, "beta_run_lengths", c.beta_run_lengths);
    read_field(j, "heads", c.heads);
    read_field(j, "ffn_mult", c.ffn_mult);
    read_field(j, "contrastive_dim", c.contrastive_dim);
    read_field(j, "temperature", c.temperature);
    read_field(j, "use_sim_loss", c.use_sim_loss);
    read_field(j, "use_con_loss", c.use_con_loss);
    read_field(j, "lr0", c.lr0);
    read_field(j, "weight_decay", c.weight_decay);
    read_field(j, "poly_power", c.poly_power);
    read_field(j, "total_steps", c.total_steps);
    read_field(j, "batch_size", c.batch_size);
    read_field(j, "seed", c.seed);
    read_field(j, "data_dir", c.data_dir);
    read_field(j, "out_dir", c.out_dir);
    read_field(j, "checkpoint_every", c.checkpoint_every);
    if (j.contains("generate")) {
        const auto& g = j.at("generate");
        read_field(g, "train_count", c.gen.train_count);
        read_field(g, "test_count", c.gen.test_count);
        read_field(g, "mix_one_to_one", c.gen.mix_one_to_one);
        read_field(g, "mix_one_to_many", c.gen.mix_one_to_many);
        read_field(g, "mix_one_to_zero", c.gen.mix_one_to_zero);
        read_field(g, "grid_rows", c.gen.grid_rows);
        read_field(g, "grid_cols", c.gen.grid_cols);
        read_field(g, "min_objects", c.gen.min_objects);
        read_field(g, "max_objects", c.gen.max_objects);
    }
    c.gen.image_size = c.image_size;
    c.gen.seed = c.seed;
    c.validate();
    return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error("malformed config " + path + ": " + e.what());
    }
    return from_json(j);
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j;
    j["image_size"] = image_size;
    j["max_tokens"] = max_tokens;
    j["text_channels"] = text_channels;
    j["text_blocks"] = text_blocks;
    j["stem_channels"] = stem_channels;
    j["stage_channels"] = stage_channels;
    j["alpha_window_sides"] = alpha_window_sides;
    j["beta_run_lengths"] = beta_run_lengths;
    j["heads"] = heads;
    j["ffn_mult"] = ffn_mult;
    j["contrastive_dim"] = contrastive_dim;
    j["temperature"] = temperature;
    j["use_sim_loss"] = use_sim_loss;
    j["use_con_loss"] = use_con_loss;
    j["lr0"] = lr0;
    j["weight_decay"] = weight_decay;
    j["poly_power"] = poly_power;
    j["total_steps"] = total_steps;
    j["batch_size"] = batch_size;
    j["seed"] = seed;
    j["data_dir"] = data_dir;
    j["out_dir"] = out_dir;
    j["checkpoint_every"] = checkpoint_every;
    j["generate"] = {{"train_count", gen.train_count},
                     {"test_count", gen.test_count},
                     {"mix_one_to_one", gen.mix_one_to_one},
                     {"mix_one_to_many", gen.mix_one_to_many},
                     {"mix_one_to_zero", gen.mix_one_to_zero},
                     {"grid_rows", gen.grid_rows},
                     {"grid_cols", gen.grid_cols},
                     {"min_objects", gen.min_objects},
                     {"max_objects", gen.max_objects},
                     {"image_size", gen.image_size}};
    return j;
}

} // namespace refseg

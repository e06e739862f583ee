// SPDX-License-Identifier: Apache-2.0

#ifndef REFSEG_CONFIG_H
#define REFSEG_CONFIG_H

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "refseg/dataset.h"

namespace refseg {

// Everything the CLI / trainer needs, with the desk-scale defaults.
struct RunConfig {
    // model
    int image_size = 64;
    int max_tokens = 20;
    int text_channels = 64;
    int text_blocks = 2;
    int stem_channels = 16;
    std::vector<int> stage_channels = {32, 64, 128, 256};
    std::vector<int> alpha_window_sides = {1, 3, 5}; // spatial extents per scale
    std::vector<int> beta_run_lengths = {1, 2, 3};   // token runs per scale
    int heads = 8;
    int ffn_mult = 2;
    int contrastive_dim = 64;

    // losses
    double temperature = 0.05;
    bool use_sim_loss = true;
    bool use_con_loss = true;

    // optimization
    double lr0 = 5e-5;
    double weight_decay = 0.01;
    double poly_power = 0.9;
    int total_steps = 3000;
    int batch_size = 8;
    uint64_t seed = 1;

    // io
    std::string data_dir = "data";
    std::string out_dir = "run";
    int checkpoint_every = 0; // 0 = final only
    int eval_batch = 1;       // per-sample evaluation keeps predictions batch-independent

    data::GenConfig gen;

    void validate() const; // throws with the offending field name

    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig from_file(const std::string& path);
    nlohmann::json to_json() const;
};

} // namespace refseg

#endif // REFSEG_CONFIG_H

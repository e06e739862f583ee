// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point: dataset generation, training, evaluation,
// prediction dumps and the gradient-check utility.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "refseg/config.h"
#include "refseg/dataset.h"
#include "refseg/trainer.h"

namespace fs = std::filesystem;
using namespace refseg;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string checkpoint;
    std::string out;
    long long seed = -1;
};

RunConfig load_config(const CommonArgs& args) {
    RunConfig cfg = args.config_path.empty() ? RunConfig{} : RunConfig::from_file(args.config_path);
    if (args.seed >= 0) {
        cfg.seed = static_cast<uint64_t>(args.seed);
        cfg.gen.seed = cfg.seed;
    }
    cfg.validate();
    return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args, bool with_checkpoint) {
    cmd->add_option("--config", args.config_path, "JSON config file");
    cmd->add_option("--out", args.out, "output directory override");
    cmd->add_option("--seed", args.seed, "seed override");
    if (with_checkpoint) cmd->add_option("--checkpoint", args.checkpoint, "checkpoint file");
}

nlohmann::json eval_report_json(model::Net<float>& net, const train::LoadedSet& set,
                                const RunConfig& cfg) {
    metrics::Accumulator overall, one, many, zero;
    for (size_t i = 0; i < set.samples.size(); i++) {
        auto batch = train::make_batch<float>(set, {i}, cfg, 0, false);
        ad::Tape<float> tape;
        int logits = net.forward_logits(tape, batch);
        Tensor<uint8_t> pred = model::logits_to_mask(tape.val(logits), 0);
        auto r = metrics::score_sample(pred, set.samples[i].mask, set.samples[i].setting);
        overall.add(r);
        switch (set.samples[i].setting) {
            case data::Setting::one_to_one: one.add(r); break;
            case data::Setting::one_to_many: many.add(r); break;
            case data::Setting::one_to_zero: zero.add(r); break;
        }
    }
    nlohmann::json j;
    j["overall"] = metrics::finalize(overall).to_json();
    j["by_setting"] = {{"one_to_one", metrics::finalize(one).to_json()},
                       {"one_to_many", metrics::finalize(many).to_json()},
                       {"one_to_zero", metrics::finalize(zero).to_json()}};
    return j;
}

int cmd_generate(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    const std::string out_dir = args.out.empty() ? cfg.data_dir : args.out;
    auto records = data::build_dataset(cfg.gen, out_dir);
    int zeros = 0;
    for (const auto& r : records) zeros += r.setting == data::Setting::one_to_zero;
    std::printf("wrote %zu samples (%d one-to-zero) to %s\n", records.size(), zeros,
                out_dir.c_str());
    return 0;
}

int cmd_train(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    if (!args.out.empty()) cfg.out_dir = args.out;
    train::Trainer trainer(cfg);
    fs::create_directories(cfg.out_dir);
    std::ios_base::openmode mode = std::ios::out;
    if (!args.checkpoint.empty()) {
        trainer.resume_from(args.checkpoint);
        mode = std::ios::app; // the log continues at the saved step
        std::printf("resumed from %s at step %lld\n", args.checkpoint.c_str(),
                    static_cast<long long>(trainer.step));
    }
    std::ofstream log((fs::path(cfg.out_dir) / "train_log.jsonl").string(), mode);
    std::ofstream snap((fs::path(cfg.out_dir) / "config_snapshot.json").string());
    snap << cfg.to_json().dump(2) << "\n";
    snap.close();
    trainer.train(&log);
    std::printf("trained to step %lld; checkpoint at %s\n",
                static_cast<long long>(trainer.step),
                trainer.checkpoint_path("checkpoint_final.ckpt").c_str());
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& split) {
    RunConfig cfg = load_config(args);
    if (!args.out.empty()) cfg.out_dir = args.out;
    if (args.checkpoint.empty()) throw std::runtime_error("eval requires --checkpoint");
    text::Vocab vocab = text::Vocab::load((fs::path(cfg.data_dir) / "vocab.json").string());
    model::Net<float> net(cfg, vocab.size());
    auto ckpt = train::read_checkpoint(args.checkpoint);
    train::restore_checkpoint<float>(ckpt, net.store, nullptr);
    auto set = train::load_split((fs::path(cfg.data_dir) / "manifest.jsonl").string(), vocab,
                                 cfg.max_tokens, split == "all" ? "" : split + "_");
    nlohmann::json report = eval_report_json(net, set, cfg);
    fs::create_directories(cfg.out_dir);
    std::ofstream out((fs::path(cfg.out_dir) / "report.json").string());
    out << report.dump(2) << "\n";
    std::cout << report.dump(2) << "\n";
    return 0;
}

int cmd_predict(const CommonArgs& args, const std::string& split) {
    RunConfig cfg = load_config(args);
    if (!args.out.empty()) cfg.out_dir = args.out;
    if (args.checkpoint.empty()) throw std::runtime_error("predict requires --checkpoint");
    text::Vocab vocab = text::Vocab::load((fs::path(cfg.data_dir) / "vocab.json").string());
    model::Net<float> net(cfg, vocab.size());
    auto ckpt = train::read_checkpoint(args.checkpoint);
    train::restore_checkpoint<float>(ckpt, net.store, nullptr);
    auto set = train::load_split((fs::path(cfg.data_dir) / "manifest.jsonl").string(), vocab,
                                 cfg.max_tokens, split == "all" ? "" : split + "_");
    auto out = train::evaluate(net, set, cfg, true);
    fs::create_directories(cfg.out_dir);
    std::ofstream dump((fs::path(cfg.out_dir) / "predictions.jsonl").string());
    for (const auto& [id, rle] : out.predictions) {
        nlohmann::json j;
        j["sample_id"] = id;
        nlohmann::json runs = nlohmann::json::array();
        for (const auto& [s, l] : rle) runs.push_back({s, l});
        j["rle"] = runs;
        dump << j.dump() << "\n";
    }
    std::cout << out.report.to_json().dump(2) << "\n";
    return 0;
}

int cmd_gradcheck(const CommonArgs& args) {
    RunConfig cfg;
    if (!args.config_path.empty()) cfg = RunConfig::from_file(args.config_path);
    else {
        // default tiny 64-bit configuration
        cfg.image_size = 32;
        cfg.max_tokens = 6;
        cfg.text_channels = 16;
        cfg.stem_channels = 8;
        cfg.stage_channels = {8, 16, 24, 32};
        cfg.contrastive_dim = 8;
        cfg.gen.image_size = 32;
    }
    if (args.seed >= 0) cfg.seed = static_cast<uint64_t>(args.seed);
    cfg.validate();
    auto report = train::gradcheck(cfg, cfg.seed, 10);
    std::printf("%-28s %12s %s\n", "group", "max_rel_err", "coords");
    for (const auto& g : report.groups)
        std::printf("%-28s %12.3e %6d\n", g.name.c_str(), g.max_rel_err, g.coords);
    std::printf("quadratic probe err: %.3e\n", report.probe_err);
    std::printf("overall max rel err: %.3e (%s)\n", report.max_rel_err,
                report.max_rel_err < 1e-3 ? "PASS" : "FAIL");
    if (!args.out.empty()) {
        fs::create_directories(args.out);
        std::ofstream out((fs::path(args.out) / "gradcheck.json").string());
        out << report.to_json().dump(2) << "\n";
    }
    return report.max_rel_err < 1e-3 ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"referring-expression segmentation on a synthetic zero/one/many benchmark"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, eval_args, pred_args, gc_args;
    std::string eval_split = "test", pred_split = "test";

    auto* gen = app.add_subcommand("generate", "generate the synthetic dataset");
    add_common(gen, gen_args, false);
    auto* tr = app.add_subcommand("train", "train the model");
    add_common(tr, train_args, true);
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(ev, eval_args, true);
    ev->add_option("--split", eval_split, "train|test|all");
    auto* pr = app.add_subcommand("predict", "dump per-sample predicted masks");
    add_common(pr, pred_args, true);
    pr->add_option("--split", pred_split, "train|test|all");
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check");
    add_common(gc, gc_args, false);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_generate(gen_args);
        if (tr->parsed()) return cmd_train(train_args);
        if (ev->parsed()) return cmd_eval(eval_args, eval_split);
        if (pr->parsed()) return cmd_predict(pred_args, pred_split);
        if (gc->parsed()) return cmd_gradcheck(gc_args);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}

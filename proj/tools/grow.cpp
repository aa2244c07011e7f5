// grow: plan/expand/inject/train/sample/verify over synthetic latent video.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage/config error,
// 3 verification failure. GROW_VERIFY_F64=1 runs the numeric core in 64-bit.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "grow/checkpoint.hpp"
#include "grow/config.hpp"
#include "grow/dataset.hpp"
#include "grow/diffusion.hpp"
#include "grow/expansion.hpp"
#include "grow/pgm.hpp"
#include "grow/verify.hpp"

namespace {

using namespace grow;

struct CliArgs {
    std::string command;
    std::string config_path;
    std::string ckpt;
    std::string out;
    std::string metrics;
    std::string spec;
    std::optional<uint64_t> seed;
    std::optional<int64_t> steps;
    std::optional<double> s_t5;
    std::optional<double> s_llm;
};

int exit_code_for(const Error& e) {
    switch (e.kind()) {
        case ErrorKind::usage:
        case ErrorKind::config:
            return 2;
        default:
            return 1;
    }
}

Config load_config(const CliArgs& args) {
    Config cfg = args.config_path.empty() ? Config{} : Config::parse_file(args.config_path);
    if (!args.ckpt.empty()) cfg.ckpt = args.ckpt;
    if (!args.out.empty()) cfg.out = args.out;
    if (!args.metrics.empty()) cfg.metrics = args.metrics;
    if (args.seed) cfg.seed = *args.seed;
    if (args.s_t5) cfg.s_t5 = *args.s_t5;
    if (args.s_llm) cfg.s_llm = *args.s_llm;
    return cfg;
}

std::string require_path(const std::string& value, const char* what) {
    if (value.empty()) fail(ErrorKind::usage, std::string("missing required path: ") + what);
    return value;
}

void write_metrics_csv(const std::string& path, const std::vector<StepMetric>& metrics) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot open metrics file '" + path + "'");
    out << "step,loss,wall_ms\n";
    char buf[96];
    for (const auto& m : metrics) {
        std::snprintf(buf, sizeof buf, "%lld,%.9g,%.3f\n", static_cast<long long>(m.step), m.loss,
                      m.wall_ms);
        out << buf;
        out.flush();
    }
}

template <typename S>
std::vector<PromptSet> sample_prompts(const Config& cfg) {
    TemplateSpec tmpl{cfg.template_prefix, cfg.template_suffix};
    if (!cfg.prompts.empty()) {
        auto rows = load_prompt_file(cfg.prompts);
        if (rows.empty()) fail(ErrorKind::config, "prompt file '" + cfg.prompts + "' is empty");
        std::vector<PromptSet> out;
        for (const auto& [p, p_l] : rows) out.push_back(make_prompt_set(p, p_l, tmpl, cfg.separator));
        return out;
    }
    return {make_prompt_set(cfg.sample_prompt, cfg.sample_prompt_long, tmpl, cfg.separator)};
}

// --- subcommands -----------------------------------------------------------

int cmd_plan(const Config& cfg, const CliArgs& args) {
    if (args.spec.empty()) fail(ErrorKind::usage, "plan requires --spec");
    ExpansionSpec spec = ExpansionSpec::parse(args.spec);
    ExpansionPlan plan = plan_expansion(cfg.model.blocks, spec, cfg.model.llm_branch);
    std::cout << plan.report();
    return 0;
}

template <typename S>
int cmd_train(const Config& cfg, const CliArgs& args) {
    std::string out_path = require_path(cfg.out, "--out");
    std::string metrics_path = cfg.metrics.empty() ? out_path + ".metrics.csv" : cfg.metrics;

    Config run_cfg = cfg;
    DitModel<S> model;
    AdamState<S> adam_state;
    if (!cfg.ckpt.empty()) {
        LoadedCheckpoint<S> loaded = load_checkpoint<S>(cfg.ckpt);
        model = std::move(loaded.model);
        if (loaded.opt) adam_state = std::move(*loaded.opt);
        run_cfg.model = loaded.cfg.model;
    } else {
        Rng init_rng(cfg.seed, 0xA11);
        model = init_model<S>(run_cfg.model, init_rng);
    }

    EncoderConfig enc = run_cfg.encoder_config();
    NoiseSchedule sched = run_cfg.schedule();
    SyntheticDataset<S> data = gen_synthetic_dataset<S>(run_cfg.dataset_size, model.cfg, run_cfg.data_seed, enc);

    TrainOptions opt;
    opt.steps = args.steps.value_or(run_cfg.train_steps);
    opt.batch = run_cfg.batch;
    opt.adam.lr = run_cfg.lr;
    opt.dropout = run_cfg.dropout_policy();
    opt.freeze_prefixes = run_cfg.freeze_prefix_list();

    Rng train_rng(run_cfg.seed, 0x7EA1);
    int64_t log_every = std::max<int64_t>(1, opt.steps / 20);
    auto metrics = train_loop<S>(model, data.examples, enc, sched, opt, adam_state, train_rng,
                                 [&](const StepMetric& m) {
                                     if (m.step == 1 || m.step % log_every == 0 || m.step == opt.steps)
                                         std::cerr << "step " << m.step << " loss " << m.loss << "\n";
                                 });

    write_metrics_csv(metrics_path, metrics);
    save_checkpoint<S>(model, &adam_state, run_cfg, out_path);
    std::cout << "trained " << opt.steps << " steps; final loss " << metrics.back().loss << "\n"
              << "checkpoint: " << out_path << "\nmetrics: " << metrics_path << "\n";
    return 0;
}

template <typename S>
int cmd_expand(const Config& cfg, const CliArgs& args) {
    if (args.spec.empty()) fail(ErrorKind::usage, "expand requires --spec");
    std::string out_path = require_path(cfg.out, "--out");
    LoadedCheckpoint<S> loaded = load_checkpoint<S>(require_path(cfg.ckpt, "--ckpt"));
    ExpansionSpec spec = ExpansionSpec::parse(args.spec);
    ExpansionPlan plan = plan_expansion(loaded.model.cfg.blocks, spec, loaded.model.cfg.llm_branch);
    DitModel<S> expanded = expand_model(loaded.model, plan);

    double diff = verify_identity(loaded.model, expanded, int(cfg.verify_probes), Rng(cfg.seed, 0x1DE));
    if (diff != 0.0) {
        std::cout << "identity: FAIL max_abs_diff=" << diff << "\n";
        std::cerr << "refusing to save an expansion that changes outputs\n";
        return 3;
    }
    std::cout << "identity: PASS max_abs_diff=0\n";

    Config out_cfg = loaded.cfg;
    out_cfg.model.blocks = expanded.cfg.blocks;
    save_checkpoint<S>(expanded, nullptr, out_cfg, out_path);  // fresh moments for the grown stack
    std::cout << "expanded " << plan.old_blocks << " -> " << plan.old_blocks + plan.new_blocks
              << " blocks; checkpoint: " << out_path << "\n";
    return 0;
}

template <typename S>
int cmd_inject(const Config& cfg, const CliArgs& args) {
    (void)args;
    std::string out_path = require_path(cfg.out, "--out");
    LoadedCheckpoint<S> loaded = load_checkpoint<S>(require_path(cfg.ckpt, "--ckpt"));
    Rng inj_rng(cfg.seed, 0x11F);
    DitModel<S> injected = inject_llm_branch(loaded.model, inj_rng);

    double diff = verify_identity(loaded.model, injected, int(cfg.verify_probes), Rng(cfg.seed, 0x1DF));
    if (diff != 0.0) {
        std::cout << "identity: FAIL max_abs_diff=" << diff << "\n";
        std::cerr << "refusing to save an injection that changes outputs\n";
        return 3;
    }
    std::cout << "identity: PASS max_abs_diff=0\n";

    Config out_cfg = loaded.cfg;
    out_cfg.model.llm_branch = true;
    save_checkpoint<S>(injected, nullptr, out_cfg, out_path);
    std::cout << "llm branch injected; checkpoint: " << out_path << "\n";
    return 0;
}

template <typename S>
int cmd_sample(const Config& cfg, const CliArgs& args) {
    std::string out_path = require_path(cfg.out, "--out");
    LoadedCheckpoint<S> loaded = load_checkpoint<S>(require_path(cfg.ckpt, "--ckpt"));
    DitModel<S>& model = loaded.model;

    Config run_cfg = cfg;
    run_cfg.model = loaded.cfg.model;
    EncoderConfig enc = run_cfg.encoder_config();
    NoiseSchedule sched = run_cfg.schedule();

    std::vector<PromptSet> prompts = sample_prompts<S>(run_cfg);
    CondBatch<S> cond = build_condition_batch(prompts, model, enc);
    GuidanceScales scales = run_cfg.guidance();
    int64_t n_steps = args.steps.value_or(run_cfg.sample_steps);

    Rng rng(run_cfg.seed, 0x5A3);
    Tensor<S> latent = ddim_sample(model, int64_t(prompts.size()), cond, scales, n_steps, rng, sched);

    save_tensor_file(latent, "sample.latent", run_cfg, out_path + ".latent");
    write_pgm_strip(latent, out_path + ".pgm");
    std::cout << "sampled " << prompts.size() << " latent(s) in " << n_steps << " steps\n"
              << "latent: " << out_path << ".latent\nstrip: " << out_path << ".pgm\n";
    return 0;
}

template <typename S>
int cmd_verify(const Config& cfg, const CliArgs& args) {
    (void)args;
    auto results = run_verification<S>(cfg.model, cfg.dropout_policy(), int(cfg.verify_probes), cfg.seed);
    bool all_pass = true;
    for (const auto& r : results) {
        std::cout << r.name << ": " << (r.pass ? "PASS" : "FAIL") << " " << r.detail << "\n";
        all_pass = all_pass && r.pass;
    }
    return all_pass ? 0 : 3;
}

template <typename S>
int dispatch(const CliArgs& args) {
    Config cfg = load_config(args);
    if (args.command == "plan") return cmd_plan(cfg, args);
    if (args.command == "train") return cmd_train<S>(cfg, args);
    if (args.command == "expand") return cmd_expand<S>(cfg, args);
    if (args.command == "inject") return cmd_inject<S>(cfg, args);
    if (args.command == "sample") return cmd_sample<S>(cfg, args);
    if (args.command == "verify") return cmd_verify<S>(cfg, args);
    fail(ErrorKind::usage, "unknown command '" + args.command + "'");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"continual pre-training toolkit for latent-video diffusion transformers"};
    app.require_subcommand(1);

    CliArgs args;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", args.config_path, "config file (key = value lines)");
        sub->add_option("--ckpt", args.ckpt, "input checkpoint path");
        sub->add_option("--out", args.out, "output path (checkpoint or sample prefix)");
        sub->add_option("--seed", args.seed, "seed override");
        sub->add_option("--steps", args.steps, "step-count override");
    };

    CLI::App* plan = app.add_subcommand("plan", "print an expansion plan report");
    add_common(plan);
    plan->add_option("--spec", args.spec, "insert:k=K | prefix:P=N | suffix:P=N");

    CLI::App* train = app.add_subcommand("train", "train on the synthetic dataset");
    add_common(train);
    train->add_option("--metrics", args.metrics, "metrics CSV path");

    CLI::App* expand = app.add_subcommand("expand", "expand a checkpoint's block stack");
    add_common(expand);
    expand->add_option("--spec", args.spec, "insert:k=K | prefix:P=N | suffix:P=N");

    CLI::App* inject = app.add_subcommand("inject", "add the gated llm cross-attention branch");
    add_common(inject);

    CLI::App* sample = app.add_subcommand("sample", "run the DDIM sampler and write latent + PGM strip");
    add_common(sample);
    sample->add_option("--s-t5", args.s_t5, "t5 guidance scale");
    sample->add_option("--s-llm", args.s_llm, "llm guidance scale");

    CLI::App* verify = app.add_subcommand("verify", "run the property suite");
    add_common(verify);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    args.command = app.get_subcommands().front()->get_name();
    const char* f64 = std::getenv("GROW_VERIFY_F64");
    bool use_f64 = f64 && std::string(f64) == "1";

    try {
        return use_f64 ? dispatch<double>(args) : dispatch<float>(args);
    } catch (const grow::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

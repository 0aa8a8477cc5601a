// command-line front end; talks to the core only through the C API
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hybridlm/capi.h"

namespace {

struct CommonArgs {
    std::string config_file;
    std::vector<std::string> sets;
    std::string out_dir = "run";
};

void add_common(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("-c,--config", a.config_file, "key=value config file")
        ->check(CLI::ExistingFile);
    cmd->add_option("-s,--set", a.sets, "override a config key (key=value, repeatable)");
    cmd->add_option("-o,--out", a.out_dir, "output directory")->capture_default_str();
}

// precedence: --set > config file > built-in defaults (later lines win)
std::string resolve_config(const CommonArgs& a, const std::vector<std::string>& flag_sets) {
    std::ostringstream text;
    if (!a.config_file.empty()) {
        std::ifstream is(a.config_file);
        text << is.rdbuf() << '\n';
    }
    for (const auto& kv : flag_sets) text << kv << '\n';
    for (const auto& kv : a.sets) text << kv << '\n';
    return text.str();
}

int report(int rc) {
    if (rc != HLM_OK) std::fprintf(stderr, "error (%d): %s\n", rc, hlm_last_error());
    return rc;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"hybrid decoder workbench"};
    app.require_subcommand(1);

    CommonArgs train_a, gen_a, bench_a, cost_a, eval_a;
    std::vector<std::string> train_kv, gen_kv, bench_kv, cost_kv, eval_kv;

    auto* train = app.add_subcommand("train", "run one training stage");
    add_common(train, train_a);
    std::string stage, resume;
    train->add_option("--stage", stage, "text | align | single_sft | multi_sft")->required();
    train->add_option("--resume", resume, "checkpoint of the previous stage");
    train->callback([&] {
        train_kv.push_back("stage=" + stage);
        if (!resume.empty()) train_kv.push_back("resume=" + resume);
    });

    auto* gen = app.add_subcommand("generate", "greedy decoding from a checkpoint");
    add_common(gen, gen_a);
    std::string ckpt, prompt;
    gen->add_option("--checkpoint", ckpt, "trained checkpoint")->required();
    gen->add_option("--prompt", prompt, "prompt text");
    gen->callback([&] {
        gen_kv.push_back("checkpoint=" + ckpt);
        if (!prompt.empty()) gen_kv.push_back("prompt=" + prompt);
    });

    auto* bench = app.add_subcommand("bench", "timing and memory measurements");
    add_common(bench, bench_a);
    std::string mode;
    bench->add_option("--mode", mode, "prefill | throughput | sweep-tokens | memory")->required();
    bench->callback([&] { bench_kv.push_back("mode=" + mode); });

    auto* cost = app.add_subcommand("costmodel", "analytic token/memory/compute table");
    add_common(cost, cost_a);

    auto* eval = app.add_subcommand("eval", "scored evaluation grids");
    add_common(eval, eval_a);
    std::string suite;
    eval->add_option("--suite", suite, "niah | icl | frames")->required();
    eval->callback([&] { eval_kv.push_back("suite=" + suite); });

    CLI11_PARSE(app, argc, argv);

    if (train->parsed())
        return report(hlm_run_train(resolve_config(train_a, train_kv).c_str(),
                                    train_a.out_dir.c_str()));
    if (gen->parsed())
        return report(hlm_run_generate(resolve_config(gen_a, gen_kv).c_str(),
                                       gen_a.out_dir.c_str()));
    if (bench->parsed())
        return report(hlm_run_bench(resolve_config(bench_a, bench_kv).c_str(),
                                    bench_a.out_dir.c_str()));
    if (cost->parsed())
        return report(hlm_run_costmodel(resolve_config(cost_a, cost_kv).c_str(),
                                        cost_a.out_dir.c_str()));
    if (eval->parsed())
        return report(hlm_run_eval(resolve_config(eval_a, eval_kv).c_str(),
                                   eval_a.out_dir.c_str()));
    return 0;
}

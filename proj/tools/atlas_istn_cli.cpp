// atlas_istn: generate data, train, evaluate, sweep lambda*, map subjects,
// export the atlas.

#include <CLI11.hpp>

#include <iostream>

#include "atlas_istn/cli.hpp"

namespace cli = atlas_istn::cli;

int main(int argc, char** argv) {
    CLI::App app{"Atlas-ISTN on synthetic 2D glyphs"};
    app.require_subcommand(1);
    app.set_version_flag("--version", ATLAS_ISTN_VERSION);

    std::string config_file, out_dir = "out";
    std::vector<std::string> sets;
    std::map<std::string, std::string> flags;  // config key -> value

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_file, "key = value config file")->check(CLI::ExistingFile);
        sub->add_option("--out", out_dir, "output directory")->capture_default_str();
        sub->add_option("--seed", flags["seed"], "master seed");
        sub->add_option("--data", flags["data.dir"], "dataset directory (generated in memory when omitted)");
        sub->add_option("--set", sets, "override any config key: key=value (repeatable)");
    };
    auto add_eval = [&](CLI::App* sub) {
        sub->add_option("--checkpoint", flags["eval.checkpoint"], "output directory of a train run")->required();
        sub->add_option("--split", flags["eval.split"], "train, val, test_clean or test_corrupt");
        sub->add_option("--mode", flags["eval.modes"], "comma list of itn, itn_1cc, 1pass, refine");
        sub->add_option("--lambda-star", flags["refine.lambda_star"], "refinement regularization weight");
        sub->add_option("--refine-iters", flags["refine.iterations"], "refinement iterations K");
        sub->add_option("--workers", flags["eval.workers"], "parallel evaluation workers");
    };

    auto* gen = app.add_subcommand("generate", "write the synthetic dataset");
    add_common(gen);
    auto* tr = app.add_subcommand("train", "train a model (resumes from <out>/checkpoint)");
    add_common(tr);
    tr->add_option("--variant", flags["train.variant"], "full, fixed_atlas, svf_only, vml, no_seg_loss, itn_only");
    tr->add_option("--epochs", flags["train.epochs"], "training epochs");
    auto* ev = app.add_subcommand("evaluate", "score a checkpoint on a split");
    add_common(ev);
    add_eval(ev);
    auto* sw = app.add_subcommand("sweep-lambda", "refine over a lambda* grid on both test splits");
    add_common(sw);
    add_eval(sw);
    sw->add_option("--grid", flags["sweep.grid"], "comma list of lambda* values");
    auto* mp = app.add_subcommand("map-subjects", "map one subject onto another through the atlas");
    add_common(mp);
    add_eval(mp);
    mp->add_option("--case-i", flags["map.case_i"], "index of subject i");
    mp->add_option("--case-j", flags["map.case_j"], "index of subject j");
    auto* ex = app.add_subcommand("export-atlas", "write the atlas of a checkpoint as PGM");
    add_common(ex);
    ex->add_option("--checkpoint", flags["eval.checkpoint"], "output directory of a train run")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    cli::RunConfig rc;
    try {
        cli::ConfigMap c = cli::default_config();
        if (!config_file.empty()) cli::apply_config_text(c, atlas_istn::read_text(config_file), config_file);
        for (const auto& [key, value] : flags)
            if (!value.empty()) cli::set_key(c, key, value);
        for (const auto& kv : sets) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw cli::usage_error("--set expects key=value, got '" + kv + "'");
            cli::set_key(c, cli::trim(kv.substr(0, eq)), cli::trim(kv.substr(eq + 1)));
        }
        rc = cli::resolve(c);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        const std::filesystem::path out(out_dir);
        if (gen->parsed()) return cli::cmd_generate(rc, out);
        if (tr->parsed()) return cli::cmd_train(rc, out);
        if (ev->parsed()) return cli::cmd_evaluate(rc, out);
        if (sw->parsed()) return cli::cmd_sweep_lambda(rc, out);
        if (mp->parsed()) return cli::cmd_map_subjects(rc, out);
        if (ex->parsed()) return cli::cmd_export_atlas(rc, out);
    } catch (const cli::usage_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

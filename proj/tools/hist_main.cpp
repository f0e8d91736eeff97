// Command line entry point: gen-data, train, eval, heatmap, ablate.
// Any extra --section.key=value token overrides that key of the JSON config.
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hist/harness.hpp"

namespace {

// remaining tokens arrive as "--a.b.c=v" or "--a.b.c v"; normalize to "a.b.c=v"
std::vector<std::string> collect_overrides(const std::vector<std::string>& extras) {
    std::vector<std::string> out;
    for (size_t i = 0; i < extras.size(); ++i) {
        std::string tok = extras[i];
        if (tok.rfind("--", 0) != 0)
            throw hist::ConfigError("unexpected argument '" + tok + "' (overrides look like --section.key=value)");
        tok = tok.substr(2);
        if (tok.find('=') == std::string::npos) {
            if (i + 1 >= extras.size()) throw hist::ConfigError("override --" + tok + " is missing a value");
            tok += "=" + extras[++i];
        }
        out.push_back(tok);
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hierarchical grounding trainer"};
    app.require_subcommand(1);
    app.allow_extras();

    std::string config_path;
    app.add_option("--config", config_path, "JSON run config (defaults apply when omitted)");

    CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic scene dataset");
    gen->allow_extras();
    CLI::App* train = app.add_subcommand("train", "train a model on the stored dataset");
    train->allow_extras();

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    eval_cmd->allow_extras();
    std::string eval_ckpt, eval_data, eval_mode = "single_phrase";
    uint64_t eval_seed = 0;
    eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
    eval_cmd->add_option("--data", eval_data, "dataset directory override");
    eval_cmd->add_option("--mode", eval_mode, "single_phrase or composite");
    CLI::Option* eval_seed_opt = eval_cmd->add_option("--seed", eval_seed, "evaluation seed");

    CLI::App* heat = app.add_subcommand("heatmap", "export one localization map as PGM");
    heat->allow_extras();
    std::string heat_ckpt, heat_scene, heat_phrase, heat_out = "heatmap.pgm", heat_head;
    uint64_t heat_layer = 0;
    heat->add_option("--ckpt", heat_ckpt, "checkpoint file")->required();
    heat->add_option("--scene", heat_scene, "scene id")->required();
    heat->add_option("--phrase", heat_phrase, "phrase to localize")->required();
    CLI::Option* layer_opt = heat->add_option("--layer", heat_layer, "cross-attention layer");
    heat->add_option("--head", heat_head, "head index or 'mean'");
    heat->add_option("--out", heat_out, "output PGM path");

    CLI::App* ablate = app.add_subcommand("ablate", "train and compare the loss-flag variants");
    ablate->allow_extras();

    CLI11_PARSE(app, argc, argv);

    try {
        hist::RunConfig rc = config_path.empty() ? hist::RunConfig{} : hist::RunConfig::load(config_path);
        rc = hist::apply_overrides(rc, collect_overrides(app.remaining(true)));
        hist::apply_seed_env(rc);

        if (gen->parsed()) {
            hist::cmd_gen_data(rc);
        } else if (train->parsed()) {
            hist::cmd_train(rc);
        } else if (eval_cmd->parsed()) {
            if (!eval_data.empty()) rc.data.dir = eval_data;
            const uint64_t seed = eval_seed_opt->count() > 0 ? eval_seed : rc.seeds.eval;
            hist::cmd_eval(rc, eval_ckpt, hist::parse_eval_mode(eval_mode), seed);
        } else if (heat->parsed()) {
            if (layer_opt->count() > 0) rc.loc.layer = heat_layer;
            if (!heat_head.empty()) rc.loc.head = hist::HeadSelector::parse(heat_head);
            rc.loc.validate(rc.model);
            hist::cmd_heatmap(rc, heat_ckpt, heat_scene, heat_phrase, heat_out);
        } else if (ablate->parsed()) {
            hist::cmd_ablate(rc);
        }
    } catch (const hist::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const hist::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const hist::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const hist::ShapeError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}

#include "genpi/genpi.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

/// 0 success, 2 unmet precondition or bad config, 3 numeric failure, 1 anything else.
int exit_code_for(std::exception_ptr const& e) {
    try {
        std::rethrow_exception(e);
    } catch (genpi::PreconditionError const&) {
        return 2;
    } catch (genpi::ConfigError const&) {
        return 2;
    } catch (genpi::NumericError const&) {
        return 3;
    } catch (...) {
        return 1;
    }
}

void print(genpi::StageResult const& r) {
    std::cout << r.stage << ": " << (r.skipped ? "up to date" : r.summary) << "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"genpi: synthesize data, internalize a prompt into an adapter, evaluate and profile"};
    app.require_subcommand(1);

    std::string config_path;
    bool force = false;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> output_dir;
    std::vector<std::string> sets;

    std::vector<std::pair<std::string, std::string>> const commands{
        {"synthesize", "generate pseudo inputs, role-play conversations, student outputs and reasons"},
        {"validate", "flag corpus quality and select trainable records"},
        {"train", "train one adapter per configured mode"},
        {"evaluate", "run the evaluation suite for every adapter and the prompted baseline"},
        {"profile", "analytic inference cost of prompted vs internalized conversations"},
        {"report", "join quality, scores, training and cost into one document"},
        {"run", "all stages in order"},
    };
    for (auto const& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "run config (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_flag("--force", force, "re-run completed stages and accept a changed config");
        sub->add_option("--seed", seed, "override the run seed");
        sub->add_option("--output-dir", output_dir, "override the output directory");
        sub->add_option("--set", sets, "override a config leaf: /json/pointer=<json value>");
    }
    CLI11_PARSE(app, argc, argv);

    try {
        genpi::ConfigOverrides o;
        o.seed = seed;
        if (output_dir) o.output_dir = *output_dir;
        for (auto const& s : sets) {
            auto const eq = s.find('=');
            if (eq == std::string::npos || s.empty() || s[0] != '/') {
                throw genpi::ConfigError("--set expects /pointer=value, got '" + s + "'");
            }
            auto value = nlohmann::json::parse(s.substr(eq + 1), nullptr, false);
            if (value.is_discarded()) value = s.substr(eq + 1);  // bare strings need no quotes
            o.set.emplace_back(s.substr(0, eq), std::move(value));
        }
        genpi::Pipeline pipeline(genpi::load_run_config(config_path, o), {force});
        auto const name = app.get_subcommands().front()->get_name();
        if (name == "synthesize") print(pipeline.synthesize());
        else if (name == "validate") print(pipeline.validate());
        else if (name == "train") print(pipeline.train());
        else if (name == "evaluate") print(pipeline.evaluate());
        else if (name == "profile") print(pipeline.profile());
        else if (name == "report") print(pipeline.report());
        else for (auto const& r : pipeline.run_all()) print(r);
        return 0;
    } catch (std::exception const& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(std::current_exception());
    }
}

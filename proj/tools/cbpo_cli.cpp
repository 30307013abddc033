// Command-line driver: generate, train, evaluate, estimate-alpha, sweep, verify.
//
// Exit codes: 0 success, 1 property or experiment failure, 2 usage or
// validation error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cbpo/alpha.hpp"
#include "cbpo/checks.hpp"
#include "cbpo/config.hpp"
#include "cbpo/datagen.hpp"
#include "cbpo/eval.hpp"
#include "cbpo/experiments.hpp"
#include "cbpo/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct Options {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> workers;
};

json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw cbpo::ConfigError("cannot open config '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw cbpo::ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw cbpo::InputError("cannot write '" + path.string() + "'");
    out << content;
}

void write_json(const fs::path& path, const ordered_json& j) { write_file(path, j.dump(2) + "\n"); }

/// Removes the optional "out" member from a config document. The --out flag
/// takes precedence over it.
std::optional<std::string> take_out(json& cfg) {
    if (!cfg.is_object() || !cfg.contains("out")) return std::nullopt;
    const json v = cfg.at("out");
    cfg.erase("out");
    if (!v.is_string() || v.get<std::string>().empty()) throw cbpo::ConfigError("'out' must be a non-empty string");
    return v.get<std::string>();
}

fs::path prepare_out(const Options& o, const std::optional<std::string>& from_config) {
    const std::string out = !o.out.empty() ? o.out : from_config.value_or("");
    if (out.empty()) throw cbpo::ConfigError("no output directory: pass --out or set \"out\" in the config");
    fs::path p(out);
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec || !fs::is_directory(p)) throw cbpo::InputError("cannot create output directory '" + out + "'");
    const fs::path probe = p / ".write_probe";
    {
        std::ofstream f(probe);
        if (!f) throw cbpo::InputError("output directory '" + out + "' is not writable");
    }
    fs::remove(probe, ec);
    return p;
}

/// Where the training data comes from: a directory written by `generate`, or
/// an inline population spec generated in memory.
struct DataSource {
    std::optional<std::string> corpus_dir;
    cbpo::PopulationSpec population;
};

cbpo::Population load_population(const DataSource& src) {
    if (!src.corpus_dir) return cbpo::generate_population(src.population);
    const fs::path dir(*src.corpus_dir);
    const json meta = load_json((dir / "population.json").string());
    cbpo::require_schema_version(meta);
    const auto spec = cbpo::population_spec_from_json(meta.at("population"));
    auto samples = cbpo::read_corpus((dir / "corpus.jsonl").string(), spec.vocab_size);
    return cbpo::population_from_corpus(spec, std::move(samples));
}

ordered_json source_json(const DataSource& src) {
    if (src.corpus_dir) return {{"corpus", *src.corpus_dir}};
    return {{"population", cbpo::to_json(src.population)}};
}

/// Parses the shared "corpus" | "population" pair; exactly one is required.
bool parse_source_field(const std::string& k, const json& v, DataSource& src, bool& have_pop) {
    if (k == "corpus") {
        src.corpus_dir = v.get<std::string>();
        return true;
    }
    if (k == "population") {
        src.population = cbpo::population_spec_from_json(v);
        have_pop = true;
        return true;
    }
    return false;
}

void check_source(const DataSource& src, bool have_pop) {
    if (src.corpus_dir.has_value() == have_pop) {
        throw cbpo::ConfigError("exactly one of 'corpus' or 'population' is required");
    }
}

// ---------------------------------------------------------------------------

int cmd_generate(const Options& o) {
    json cfg = load_json(o.config);
    cbpo::require_schema_version(cfg);
    const auto cfg_out = take_out(cfg);
    cbpo::PopulationSpec spec;
    cbpo::detail::parse_strict(cfg, "generate config", [&](const std::string& k, const json& v) {
        if (k == "schema_version") return true;
        if (k == "population") {
            spec = cbpo::population_spec_from_json(v);
            return true;
        }
        return false;
    });
    if (o.seed) spec.seed = *o.seed;
    spec.validate();
    const auto pop = cbpo::generate_population(spec);
    const fs::path out = prepare_out(o, cfg_out);
    write_file(out / "corpus.jsonl", cbpo::corpus_jsonl(pop.samples));
    write_json(out / "population.json", {{"schema_version", cbpo::kSchemaVersion}, {"population", cbpo::to_json(spec)}});
    std::cout << "wrote " << pop.samples.size() << " samples to " << (out / "corpus.jsonl").string() << "\n";
    return kExitOk;
}

int cmd_train(const Options& o) {
    json cfg = load_json(o.config);
    cbpo::require_schema_version(cfg);
    const auto cfg_out = take_out(cfg);
    DataSource src;
    bool have_pop = false;
    cbpo::DatasetSpec ds;
    cbpo::TrainConfig tc;
    cbpo::detail::parse_strict(cfg, "train config", [&](const std::string& k, const json& v) {
        if (k == "schema_version") return true;
        if (parse_source_field(k, v, src, have_pop)) return true;
        if (k == "dataset") ds = cbpo::dataset_spec_from_json(v);
        else if (k == "train") tc = cbpo::train_config_from_json(v);
        else return false;
        return true;
    });
    check_source(src, have_pop);
    if (o.seed) {
        tc.seed = *o.seed;
        src.population.seed = *o.seed;
    }
    tc.validate();

    const auto pop = load_population(src);
    const auto d = cbpo::prepare_dataset(pop, ds, tc.seed);
    const fs::path out = prepare_out(o, cfg_out);
    cbpo::RunResult r;
    try {
        r = cbpo::run(d, tc);
    } catch (const cbpo::NonFiniteLoss& e) {
        write_json(out / "nonfinite_batch.json", {{"error", e.what()}, {"batch", e.dump}});
        throw;
    }

    ordered_json ckpt = {{"schema_version", cbpo::kSchemaVersion}};
    const ordered_json source = source_json(src);
    for (const auto& [k, v] : source.items()) ckpt[k] = v;
    ckpt["dataset"] = cbpo::to_json(ds);
    ckpt["train"] = cbpo::to_json(tc);
    ckpt["alpha_used"] = r.alpha_used;
    ckpt["skipped_pairs"] = r.skipped_pairs;
    ckpt["state"] = cbpo::to_json(r.final_state);
    write_json(out / "checkpoint.json", ckpt);
    write_file(out / "metrics.csv", cbpo::metrics_csv(r.log));
    if (r.alpha_estimate) write_json(out / "alpha.json", r.alpha_estimate->to_json());
    std::cout << "trained " << cbpo::to_string(tc.method) << " for " << r.log.size() << " steps; checkpoint at "
              << (out / "checkpoint.json").string() << "\n";
    return kExitOk;
}

int cmd_evaluate(const Options& o) {
    json cfg = load_json(o.config);
    cbpo::require_schema_version(cfg);
    const auto cfg_out = take_out(cfg);
    std::string checkpoint_path;
    std::optional<std::string> corpus_override;
    cbpo::detail::parse_strict(cfg, "evaluate config", [&](const std::string& k, const json& v) {
        if (k == "schema_version") return true;
        if (k == "checkpoint") checkpoint_path = v.get<std::string>();
        else if (k == "corpus") corpus_override = v.get<std::string>();
        else return false;
        return true;
    });
    if (checkpoint_path.empty()) throw cbpo::ConfigError("evaluate config needs a 'checkpoint'");

    const json ckpt = load_json(checkpoint_path);
    cbpo::require_schema_version(ckpt);
    DataSource src;
    if (ckpt.contains("corpus")) src.corpus_dir = ckpt.at("corpus").get<std::string>();
    else src.population = cbpo::population_spec_from_json(ckpt.at("population"));
    if (corpus_override) src.corpus_dir = corpus_override;
    const auto ds = cbpo::dataset_spec_from_json(ckpt.at("dataset"));
    const auto tc = cbpo::train_config_from_json(ckpt.at("train"));
    const auto state = cbpo::run_state_from_json(ckpt.at("state"));

    const auto pop = load_population(src);
    if (pop.spec.vocab_size != state.policy.vocab_size) {
        throw cbpo::InputError("checkpoint vocabulary (" + std::to_string(state.policy.vocab_size) +
                               ") does not match corpus vocabulary (" + std::to_string(pop.spec.vocab_size) + ")");
    }
    const auto d = cbpo::prepare_dataset(pop, ds, tc.seed);
    const auto rep = cbpo::evaluate(state.policy, state.reference, d, tc.beta);
    const fs::path out = prepare_out(o, cfg_out);
    write_json(out / "eval.json", rep.to_json());
    std::cout << rep.to_json().dump() << "\n";
    return kExitOk;
}

int cmd_estimate_alpha(const Options& o) {
    json cfg = load_json(o.config);
    cbpo::require_schema_version(cfg);
    const auto cfg_out = take_out(cfg);
    DataSource src;
    bool have_pop = false;
    cbpo::DatasetSpec ds;
    cbpo::ProxyTrainingConfig proxy;
    std::uint64_t seed = 0;
    double heldout_fraction = 0.2;
    cbpo::detail::parse_strict(cfg, "estimate-alpha config", [&](const std::string& k, const json& v) {
        if (k == "schema_version") return true;
        if (parse_source_field(k, v, src, have_pop)) return true;
        if (k == "dataset") ds = cbpo::dataset_spec_from_json(v);
        else if (k == "seed") seed = v.get<std::uint64_t>();
        else if (k == "heldout_fraction") heldout_fraction = v.get<double>();
        else if (k == "proxy") proxy = cbpo::proxy_config_from_json(v);
        else return false;
        return true;
    });
    check_source(src, have_pop);
    if (o.seed) {
        seed = *o.seed;
        src.population.seed = *o.seed;
    }
    const auto pop = load_population(src);
    const auto d = cbpo::prepare_dataset(pop, ds, seed);
    const auto est = cbpo::estimate_alpha_from_sets(d.h_tar, d.h_aux, d.vocab_size, proxy,
                                                    cbpo::derive_seed(seed, 0xa1), heldout_fraction);
    const fs::path out = prepare_out(o, cfg_out);
    write_json(out / "alpha.json", est.to_json());
    std::cout << "alpha_hat " << cbpo::format_real(est.alpha_hat) << " (c_hat " << cbpo::format_real(est.c_hat)
              << ")\n";
    return kExitOk;
}

int cmd_sweep(const Options& o) {
    json raw = load_json(o.config);
    const auto cfg_out = take_out(raw);
    cbpo::SweepConfig cfg = cbpo::sweep_config_from_json(raw);
    if (o.seed) cfg.seeds = {*o.seed};
    if (o.workers) cfg.workers = *o.workers;
    cfg.validate();
    const fs::path out = prepare_out(o, cfg_out);
    try {
        const auto rows = cbpo::run_sweep(cfg);
        write_file(out / "sweep.csv", cbpo::sweep_csv(rows));
        std::cout << "wrote " << rows.size() << " rows to " << (out / "sweep.csv").string() << "\n";
    } catch (const cbpo::SweepAborted& e) {
        write_file(out / "sweep.csv", cbpo::sweep_csv(e.completed));
        std::cerr << "sweep aborted after " << e.completed.size() << " rows: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitOk;
}

int cmd_verify(const Options& o) {
    cbpo::VerifyConfig vc;
    std::optional<std::string> cfg_out;
    if (!o.config.empty()) {
        json cfg = load_json(o.config);
        cbpo::require_schema_version(cfg);
        cfg_out = take_out(cfg);
        cbpo::detail::parse_strict(cfg, "verify config", [&](const std::string& k, const json& v) {
            if (k == "schema_version") return true;
            if (k == "seed") vc.seed = v.get<std::uint64_t>();
            else if (k == "gradient_configurations") vc.gradient_configurations = v.get<std::size_t>();
            else if (k == "pu_replications") vc.pu_replications = v.get<std::size_t>();
            else if (k == "pu_n") vc.pu_n = v.get<std::size_t>();
            else if (k == "slope_sizes") vc.slope_sizes = v.get<std::vector<std::size_t>>();
            else return false;
            return true;
        });
    }
    if (o.seed) vc.seed = *o.seed;
    if (vc.pu_replications < 2 || vc.pu_n < 1 || vc.slope_sizes.size() < 2) {
        throw cbpo::ConfigError("verify needs pu_replications >= 2, pu_n >= 1 and >= 2 slope sizes");
    }
    const auto rep = cbpo::run_verify(vc);
    const fs::path out = prepare_out(o, cfg_out);
    write_json(out / "verify.json", rep.to_json());
    for (const auto& c : rep.checks) {
        std::cout << (c.at("passed").get<bool>() ? "PASS " : "FAIL ") << c.at("name").get<std::string>() << "\n";
    }
    if (!rep.passed) {
        std::cerr << "failed properties:";
        for (const auto& f : rep.failures()) std::cerr << " " << f;
        std::cerr << "\n";
        return kExitFailure;
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Binary-feedback preference optimization toolkit"};
    app.require_subcommand(1);
    Options opt;

    auto add_common = [&](CLI::App* sub, bool config_required) {
        auto* c = sub->add_option("--config", opt.config, "JSON config file");
        if (config_required) c->required();
        sub->add_option("--out", opt.out, "Output directory (overrides the config's \"out\")");
        sub->add_option("--seed", opt.seed, "Override the config seed");
        sub->add_option("--workers", opt.workers, "Parallel workers (sweep)")->check(CLI::PositiveNumber);
    };

    auto* gen = app.add_subcommand("generate", "Write a synthetic multi-user corpus");
    auto* train = app.add_subcommand("train", "Warm-start and train one policy");
    auto* eval = app.add_subcommand("evaluate", "Score a checkpoint on held-out data");
    auto* alpha = app.add_subcommand("estimate-alpha", "Estimate the correction coefficient");
    auto* sweep = app.add_subcommand("sweep", "Run a grid of train/evaluate points");
    auto* verify = app.add_subcommand("verify", "Run the gradient and PU property suites");
    for (auto* s : {gen, train, eval, alpha, sweep}) add_common(s, true);
    add_common(verify, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*gen) return cmd_generate(opt);
        if (*train) return cmd_train(opt);
        if (*eval) return cmd_evaluate(opt);
        if (*alpha) return cmd_estimate_alpha(opt);
        if (*sweep) return cmd_sweep(opt);
        if (*verify) return cmd_verify(opt);
    } catch (const cbpo::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const cbpo::InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}

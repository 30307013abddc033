#pragma once

// Grid sweeps over the generate -> train -> evaluate pipeline.

#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbpo/config.hpp"
#include "cbpo/datagen.hpp"
#include "cbpo/eval.hpp"
#include "cbpo/trainer.hpp"

namespace cbpo {

/// Outcome of one trained grid point.
struct PointOutcome {
    EvalReport report;
    double alpha_used = 0.0;
    std::optional<AlphaEstimate> alpha_estimate;
    double min_pure_neg_clamped = std::numeric_limits<double>::infinity();
    std::size_t negative_raw_steps = 0;  // steps with pure_neg_raw < 0
    std::size_t steps = 0;
    double aux_distance = 0.0;
};

inline PointOutcome run_point(const UserDataset& d, const TrainConfig& cfg, const PolicyParams& warm) {
    const RunResult r = run_from(d, cfg, warm);
    PointOutcome out;
    out.report = evaluate(r.policy, r.reference, d, cfg.beta);
    out.alpha_used = r.alpha_used;
    out.alpha_estimate = r.alpha_estimate;
    out.steps = r.log.size();
    for (const auto& rec : r.log) {
        out.min_pure_neg_clamped = std::min(out.min_pure_neg_clamped, rec.loss.pure_neg_clamped);
        if (rec.loss.pure_neg_raw < 0.0) ++out.negative_raw_steps;
    }
    out.aux_distance = aux_distance_to_target(d);
    return out;
}

// ---------------------------------------------------------------------------
// Sweep configuration

enum class SweepAxis { alpha, ratio_x, history_fraction, grouping, method };

inline const char* to_string(SweepAxis a) {
    switch (a) {
        case SweepAxis::alpha: return "alpha";
        case SweepAxis::ratio_x: return "ratio_x";
        case SweepAxis::history_fraction: return "history_fraction";
        case SweepAxis::grouping: return "grouping";
        case SweepAxis::method: return "method";
    }
    return "?";
}

inline SweepAxis parse_sweep_axis(const std::string& s) {
    if (s == "alpha") return SweepAxis::alpha;
    if (s == "ratio_x") return SweepAxis::ratio_x;
    if (s == "history_fraction") return SweepAxis::history_fraction;
    if (s == "grouping") return SweepAxis::grouping;
    if (s == "method") return SweepAxis::method;
    throw ConfigError("unknown sweep axis '" + s + "'");
}

struct SweepConfig {
    SweepAxis axis = SweepAxis::alpha;
    // Grid values as written in the config: numbers for alpha, ratio_x and
    // history_fraction; names for grouping and method ("estimate" is also
    // accepted on the alpha axis).
    std::vector<nlohmann::json> values;
    std::vector<std::uint64_t> seeds{0};
    std::vector<ReferenceMode> reference_modes;  // empty: the train config's mode
    PopulationSpec population;
    DatasetSpec dataset;
    TrainConfig train;
    std::size_t workers = 1;

    void validate() const {
        if (values.empty()) throw ConfigError("sweep needs at least one grid value");
        if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
        if (workers < 1) throw ConfigError("workers must be >= 1");
        population.validate();
        dataset.validate();
        train.validate();
    }
};

inline std::string value_label(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number()) return v.dump();
    throw ConfigError("sweep values must be numbers or strings");
}

/// Applies one grid value to copies of the base dataset/train configs.
inline void apply_axis(SweepAxis axis, const nlohmann::json& v, DatasetSpec& ds, TrainConfig& tc) {
    try {
        switch (axis) {
            case SweepAxis::alpha: tc.alpha = parse_alpha_field(v); break;
            case SweepAxis::ratio_x: ds.ratio_x = v.get<double>(); break;
            case SweepAxis::history_fraction: ds.history_fraction = v.get<double>(); break;
            case SweepAxis::grouping: ds.grouping = parse_grouping(v.get<std::string>()); break;
            case SweepAxis::method: tc.method = parse_method(v.get<std::string>()); break;
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad value on sweep axis '") + to_string(axis) + "': " + e.what());
    }
    ds.validate();
    tc.validate();
}

inline SweepConfig sweep_config_from_json(const nlohmann::json& j) {
    require_schema_version(j);
    SweepConfig c;
    bool have_axis = false;
    detail::parse_strict(j, "sweep config", [&](const std::string& k, const nlohmann::json& v) {
        if (k == "schema_version") {
        } else if (k == "axis") {
            c.axis = parse_sweep_axis(v.get<std::string>());
            have_axis = true;
        } else if (k == "values") {
            c.values = v.get<std::vector<nlohmann::json>>();
        } else if (k == "seeds") {
            c.seeds = v.get<std::vector<std::uint64_t>>();
        } else if (k == "reference_modes") {
            c.reference_modes.clear();
            for (const auto& m : v) c.reference_modes.push_back(parse_reference_mode(m.get<std::string>()));
        } else if (k == "population") {
            c.population = population_spec_from_json(v);
        } else if (k == "dataset") {
            c.dataset = dataset_spec_from_json(v);
        } else if (k == "train") {
            c.train = train_config_from_json(v);
        } else if (k == "workers") {
            c.workers = v.get<std::size_t>();
        } else {
            return false;
        }
        return true;
    });
    if (!have_axis) throw ConfigError("sweep config needs an 'axis'");
    // Reject bad grid values before any work starts.
    for (const auto& v : c.values) {
        DatasetSpec ds = c.dataset;
        TrainConfig tc = c.train;
        apply_axis(c.axis, v, ds, tc);
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Execution

struct SweepRow {
    std::string axis;
    std::string value;
    std::size_t value_index = 0;
    std::uint64_t seed = 0;
    std::string reference_mode;
    std::size_t mode_index = 0;
    std::string method;
    std::string grouping;
    double ratio_x = 0.0;
    double history_fraction = 0.0;
    double overlap_lambda = 0.0;
    PointOutcome outcome;
    std::string config_hash;
};

/// Full resolved configuration of one grid point; its hash tags the row.
inline nlohmann::ordered_json resolved_config(const PopulationSpec& ps, const DatasetSpec& ds, const TrainConfig& tc) {
    return {{"schema_version", kSchemaVersion},
            {"population", to_json(ps)},
            {"dataset", to_json(ds)},
            {"train", to_json(tc)}};
}

inline std::string config_hash(const nlohmann::ordered_json& resolved) { return hex64(fnv1a(resolved.dump())); }

inline bool row_order(const SweepRow& a, const SweepRow& b) {
    if (a.value_index != b.value_index) return a.value_index < b.value_index;
    if (a.mode_index != b.mode_index) return a.mode_index < b.mode_index;
    return a.seed < b.seed;
}

/// Thrown when a grid point fails; carries every row completed before it.
struct SweepAborted : Error {
    std::vector<SweepRow> completed;
    SweepAborted(const std::string& what, std::vector<SweepRow> rows) : Error(what), completed(std::move(rows)) {}
};

/// Runs every (value, reference mode, seed) point. Points sharing a seed share
/// one generated population. Rows come back in canonical order regardless of
/// the worker count.
inline std::vector<SweepRow> run_sweep(const SweepConfig& cfg) {
    cfg.validate();
    std::vector<ReferenceMode> modes = cfg.reference_modes;
    if (modes.empty()) modes.push_back(cfg.train.reference_mode);

    std::map<std::uint64_t, Population> populations;
    for (std::uint64_t s : cfg.seeds) {
        if (populations.count(s)) continue;
        PopulationSpec ps = cfg.population;
        ps.seed = s;
        populations.emplace(s, generate_population(ps));
    }

    struct Job {
        std::size_t vi, mi;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (std::size_t vi = 0; vi < cfg.values.size(); ++vi) {
        for (std::size_t mi = 0; mi < modes.size(); ++mi) {
            for (std::uint64_t s : cfg.seeds) jobs.push_back({vi, mi, s});
        }
    }

    std::vector<std::optional<SweepRow>> results(jobs.size());
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::mutex err_mu;
    std::string first_error;

    auto worker = [&] {
        while (!failed.load()) {
            const std::size_t k = next.fetch_add(1);
            if (k >= jobs.size()) return;
            const Job& job = jobs[k];
            try {
                const Population& pop = populations.at(job.seed);
                DatasetSpec ds = cfg.dataset;
                TrainConfig tc = cfg.train;
                apply_axis(cfg.axis, cfg.values[job.vi], ds, tc);
                tc.reference_mode = modes[job.mi];
                tc.seed = job.seed;
                const UserDataset d = prepare_dataset(pop, ds, job.seed);
                const PolicyParams warm = warm_start_policy(d, tc);

                SweepRow row;
                row.axis = to_string(cfg.axis);
                row.value = value_label(cfg.values[job.vi]);
                row.value_index = job.vi;
                row.seed = job.seed;
                row.reference_mode = to_string(tc.reference_mode);
                row.mode_index = job.mi;
                row.method = to_string(tc.method);
                row.grouping = to_string(ds.grouping);
                row.ratio_x = ds.ratio_x;
                row.history_fraction = ds.history_fraction;
                row.overlap_lambda = pop.spec.overlap_lambda;
                row.outcome = run_point(d, tc, warm);
                row.config_hash = config_hash(resolved_config(pop.spec, ds, tc));
                results[k] = std::move(row);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!failed.exchange(true)) {
                    first_error = "grid point " + value_label(cfg.values[job.vi]) + " seed " +
                                  std::to_string(job.seed) + ": " + e.what();
                }
            }
        }
    };

    const std::size_t n_threads = std::min(cfg.workers, jobs.size());
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    std::vector<SweepRow> rows;
    for (auto& r : results) {
        if (r) rows.push_back(std::move(*r));
    }
    std::sort(rows.begin(), rows.end(), row_order);
    if (failed) throw SweepAborted(first_error, std::move(rows));
    return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string out =
        "axis,value,seed,reference_mode,method,grouping,ratio_x,history_fraction,overlap_lambda,alpha_used,"
        "heldout_nll,pref_acc,delta_logp_aux,aux_distance,min_pure_neg_clamped,negative_raw_steps,steps,"
        "config_hash\n";
    for (const auto& r : rows) {
        const auto& o = r.outcome;
        out += r.axis + ',' + r.value + ',' + std::to_string(r.seed) + ',' + r.reference_mode + ',' + r.method + ',' +
               r.grouping + ',' + format_real(r.ratio_x) + ',' + format_real(r.history_fraction) + ',' +
               format_real(r.overlap_lambda) + ',' + format_real(o.alpha_used) + ',' +
               format_real(o.report.heldout_nll) + ',' + format_real(o.report.pref_acc) + ',' +
               format_real(o.report.delta_logp_aux) + ',' + format_real(o.aux_distance) + ',' +
               format_real(o.min_pure_neg_clamped) + ',' + std::to_string(o.negative_raw_steps) + ',' +
               std::to_string(o.steps) + ',' + r.config_hash + '\n';
    }
    return out;
}

}  // namespace cbpo

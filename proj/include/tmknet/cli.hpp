#ifndef TMKNET_CLI_HPP
#define TMKNET_CLI_HPP

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tmknet/data.hpp"
#include "tmknet/error.hpp"
#include "tmknet/experiment.hpp"
#include "tmknet/metrics.hpp"
#include "tmknet/model.hpp"

#ifndef TMKNET_BUILD_ID
#define TMKNET_BUILD_ID "unknown"
#endif

namespace tmknet::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
  if (!os) throw DataError("write failed for " + path.string());
}

inline nlohmann::json read_json_file(const fs::path& path, const std::string& flag) {
  std::ifstream is(path);
  if (!is) throw ConfigError(flag + ": cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(flag + ": " + path.string() + " is not valid JSON: " + e.what());
  }
}

inline void prepare_run_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("--out: cannot create run directory " + dir.string());
}

/// Writes run.json (seed, build id, command) into a run directory.
inline void write_run_info(const fs::path& dir, const std::string& command, std::uint64_t seed, const nlohmann::json& more = {}) {
  nlohmann::json j{{"command", command}, {"seed", seed}, {"build_id", TMKNET_BUILD_ID}};
  if (more.is_object())
    for (const auto& [k, v] : more.items()) j[k] = v;
  write_text(dir / "run.json", j.dump(2) + "\n");
}

inline std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("TMKNET_SEED");
  if (!s || !*s) return std::nullopt;
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(s, &pos);
    if (pos != std::string(s).size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("TMKNET_SEED: not an unsigned integer: '" + std::string(s) + "'");
  }
}

/// RunConfig flags; values given on the command line override the config file.
struct RunFlags {
  experiment::RunConfig values;
  std::string config_file;
  std::string adaptation = "posthoc";
  std::vector<std::pair<CLI::Option*, std::function<void(experiment::RunConfig&)>>> overrides;
  CLI::Option* seed_opt = nullptr;

  void attach(CLI::App& app) {
    auto& v = values;
    app.add_option("--config", config_file, "JSON run config (flags override its values)")->check(CLI::ExistingFile);
    auto bind = [&](CLI::Option* o, std::function<void(experiment::RunConfig&)> f) {
      o->capture_default_str();
      overrides.emplace_back(o, std::move(f));
    };
    bind(app.add_option("--data", v.data, "dataset directory"), [this](auto& c) { c.data = values.data; });
    bind(app.add_option("--subject", v.subject, "subject id"), [this](auto& c) { c.subject = values.subject; });
    bind(app.add_option("--target-session", v.target_session, "held-out session (1-based)"),
         [this](auto& c) { c.target_session = values.target_session; });
    bind(app.add_option("--epochs", v.epochs, "training epochs"), [this](auto& c) { c.epochs = values.epochs; });
    bind(app.add_option("--lr", v.lr, "learning rate"), [this](auto& c) { c.lr = values.lr; });
    bind(app.add_option("--weight-decay", v.weight_decay, "decoupled weight decay"),
         [this](auto& c) { c.weight_decay = values.weight_decay; });
    bind(app.add_option("--batch", v.batch, "batch size"), [this](auto& c) { c.batch = values.batch; });
    bind(app.add_option("--domains-per-batch", v.domains_per_batch, "source domains per batch"),
         [this](auto& c) { c.domains_per_batch = values.domains_per_batch; });
    bind(app.add_option("--holdout", v.holdout, "source validation fraction"), [this](auto& c) { c.holdout = values.holdout; });
    bind(app.add_option("--n-t", v.n_t, "temporal kernels per resolution"), [this](auto& c) { c.n_t = values.n_t; });
    bind(app.add_option("--n-s", v.n_s, "spatial kernels per branch"), [this](auto& c) { c.n_s = values.n_s; });
    bind(app.add_option("--n-b", v.n_b, "BiMap output size"), [this](auto& c) { c.n_b = values.n_b; });
    bind(app.add_option("--r-data", v.r_data, "kernel length as a fraction of Fs"), [this](auto& c) { c.r_data = values.r_data; });
    bind(app.add_option("--adaptation", adaptation, "target statistics: posthoc or interleaved")
             ->check(CLI::IsMember({"posthoc", "interleaved"})),
         [this](auto& c) {
           c.adaptation = adaptation == "interleaved" ? experiment::AdaptMode::Interleaved : experiment::AdaptMode::PostHoc;
         });
    bind(app.add_option("--adapt-batch", v.adapt_batch, "target batch size for adaptation"),
         [this](auto& c) { c.adapt_batch = values.adapt_batch; });
    bind(app.add_flag("--shared-norm", v.shared_norm, "one SPD batch norm for all domains (baseline)"),
         [this](auto& c) { c.shared_norm = values.shared_norm; });
    bind(app.add_flag("--drop-mrt", v.ablation.drop_mrt, "single temporal kernel"),
         [this](auto& c) { c.ablation.drop_mrt = values.ablation.drop_mrt; });
    bind(app.add_flag("--drop-mss", v.ablation.drop_mss, "global spatial kernel only"),
         [this](auto& c) { c.ablation.drop_mss = values.ablation.drop_mss; });
    seed_opt = app.add_option("--seed", v.seed, "random seed (fallback: TMKNET_SEED, then 0)")->capture_default_str();
  }

  experiment::RunConfig resolve() const {
    experiment::RunConfig c;
    bool seed_in_file = false;
    if (!config_file.empty()) {
      const nlohmann::json j = read_json_file(config_file, "--config");
      try {
        c = experiment::run_config_from_json(j);
      } catch (const ConfigError& e) {
        throw ConfigError("--config " + config_file + ": " + e.what());
      }
      seed_in_file = j.contains("seed");
    }
    for (const auto& [opt, apply] : overrides)
      if (opt->count() > 0) apply(c);
    if (seed_opt->count() > 0) c.seed = values.seed;
    else if (!seed_in_file)
      if (auto s = env_seed()) c.seed = *s;
    if (c.data.empty()) throw ConfigError("--data: no dataset given (flag or config file)");
    if (!fs::is_directory(c.data)) throw DataError("--data: not a directory: " + c.data);
    experiment::validate(c);
    return c;
  }
};

inline std::vector<std::size_t> all_indices(const data::Dataset& ds) {
  std::vector<std::size_t> v(ds.trials.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
  return v;
}

inline std::size_t domain_for(const data::Dataset& ds, int subject, int session, const std::string& flag) {
  const int d = ds.manifest.domain_index(subject, session);
  if (d < 0) throw ConfigError(flag + ": no domain for subject " + std::to_string(subject) + ", session " + std::to_string(session));
  return static_cast<std::size_t>(d);
}

/// Session of the checkpoint's target domain unless overridden.
inline std::size_t resolve_domain(const data::Dataset& ds, const nlohmann::json& extra, int subject, int session) {
  if (session > 0) return domain_for(ds, subject, session, "--session");
  if (!extra.contains("target_domain")) throw ConfigError("--session: checkpoint records no target domain; pass --session");
  const auto d = extra.at("target_domain").get<std::size_t>();
  if (d >= ds.manifest.domains.size()) throw DataError("--data: checkpoint target domain " + std::to_string(d) + " not in dataset");
  return d;
}

inline void check_compatible(const TmkNet& net, const data::Dataset& ds) {
  const auto& s = net.config().stem;
  if (s.sensors != ds.manifest.sensors || net.config().window != ds.manifest.window_samples() ||
      net.config().backbone.n_c != ds.manifest.classes())
    throw DataError("--data: dataset shape does not match the checkpoint (sensors, window or classes)");
}

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"TMKNet: SPD-manifold sEMG gesture decoding with domain-specific batch normalization", "tmknet"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(TMKNET_BUILD_ID));
  std::function<void()> action;

  // synth
  data::SynthSpec synth;
  std::string synth_out;
  auto* c_synth = app.add_subcommand("synth", "generate a synthetic domain-shifted dataset");
  c_synth->add_option("--classes", synth.classes, "gesture classes")->capture_default_str();
  c_synth->add_option("--sensors", synth.sensors, "sensor count (even)")->capture_default_str();
  c_synth->add_option("--domains", synth.domains, "sessions")->capture_default_str();
  c_synth->add_option("--trials-per-cell", synth.trials_per_cell, "windows per (session, class)")->capture_default_str();
  c_synth->add_option("--fs", synth.fs, "sampling rate in Hz")->capture_default_str();
  c_synth->add_option("--window-ms", synth.window_ms, "window length")->capture_default_str();
  c_synth->add_option("--overlap-ms", synth.overlap_ms, "window overlap")->capture_default_str();
  c_synth->add_option("--shift", synth.shift, "log-eigenvalue bound of the session congruence")->capture_default_str();
  c_synth->add_option("--active-gain", synth.active_gain, "latent drive amplitude")->capture_default_str();
  auto* synth_seed = c_synth->add_option("--seed", synth.seed, "random seed (fallback: TMKNET_SEED)")->capture_default_str();
  c_synth->add_option("--out", synth_out, "output dataset directory")->required();
  c_synth->callback([&] {
    action = [&] {
      if (synth_seed->count() == 0)
        if (auto s = env_seed()) synth.seed = *s;
      const data::Dataset ds = data::synth_generate(synth);
      data::write_dataset(ds, synth_out);
      out << "wrote " << ds.trials.size() << " trials to " << synth_out << "\n";
    };
  });

  // import
  std::string import_in, import_out;
  auto* c_import = app.add_subcommand("import", "validate a directory-format dataset and copy it");
  c_import->add_option("--in", import_in, "source dataset directory")->required()->check(CLI::ExistingDirectory);
  c_import->add_option("--out", import_out, "destination directory")->required();
  c_import->callback([&] {
    action = [&] {
      const data::Dataset ds = data::read_dataset(import_in);
      data::validate(ds);
      data::write_dataset(ds, import_out);
      out << "imported " << ds.trials.size() << " trials, " << ds.manifest.domains.size() << " domains, "
          << ds.manifest.classes() << " classes\n";
    };
  });

  // train
  RunFlags train_flags;
  std::string train_out;
  auto* c_train = app.add_subcommand("train", "train on source sessions; writes checkpoint and source-validation metrics");
  train_flags.attach(*c_train);
  c_train->add_option("--out", train_out, "run directory")->required();
  c_train->callback([&] {
    action = [&] {
      const experiment::RunConfig cfg = train_flags.resolve();
      const data::Dataset ds = data::read_dataset(cfg.data);
      prepare_run_dir(train_out);
      write_text(fs::path(train_out) / "config.json", experiment::to_json(cfg).dump(2) + "\n");
      std::ofstream log(fs::path(train_out) / "train.log");
      auto res = experiment::train(cfg, ds, &log);
      const nlohmann::json extra{{"target_domain", res.split.target_domain},
                                 {"source_domains", res.split.source_domains},
                                 {"best_epoch", res.best_epoch}};
      save_checkpoint(res.net, fs::path(train_out) / "model.ckpt", extra);
      write_text(fs::path(train_out) / "metrics.json", metrics::to_json(res.validation).dump(2) + "\n");
      write_run_info(train_out, "train", cfg.seed, {{"config_hash", res.net.config_hash()}, {"steps", res.steps}});
      out << "source validation accuracy " << res.validation.accuracy << " (best epoch " << res.best_epoch << ")\n";
    };
  });

  // adapt
  std::string ck_in, ck_data, ck_out;
  int subject = 1, session = 0;
  std::size_t adapt_batch = 50, adapt_passes = 1;
  auto* c_adapt = app.add_subcommand("adapt", "update target-session SPD statistics from unlabeled trials");
  c_adapt->add_option("--checkpoint", ck_in, "input checkpoint")->required()->check(CLI::ExistingFile);
  c_adapt->add_option("--data", ck_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  c_adapt->add_option("--subject", subject, "subject id")->capture_default_str();
  c_adapt->add_option("--session", session, "target session (0: the checkpoint's target)")->capture_default_str();
  c_adapt->add_option("--batch", adapt_batch, "adaptation batch size")->capture_default_str();
  c_adapt->add_option("--passes", adapt_passes, "passes over the target trials")->capture_default_str();
  c_adapt->add_option("--out", ck_out, "run directory")->required();
  c_adapt->callback([&] {
    action = [&] {
      nlohmann::json extra;
      TmkNet net = load_checkpoint(ck_in, &extra);
      const data::Dataset ds = data::read_dataset(ck_data);
      check_compatible(net, ds);
      const std::size_t dom = resolve_domain(ds, extra, subject, session);
      experiment::adapt(net, experiment::unlabeled(ds, dom), adapt_batch, adapt_passes);
      prepare_run_dir(ck_out);
      save_checkpoint(net, fs::path(ck_out) / "model.ckpt", extra);
      write_run_info(ck_out, "adapt", net.seed(), {{"checkpoint", ck_in}, {"domain", dom}});
      out << "adapted domain " << dom << " on " << ds.indices_of_domain(dom).size() << " trials\n";
    };
  });

  // eval
  std::string ev_ck, ev_data, ev_out;
  int ev_subject = 1, ev_session = 0;
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on one session");
  c_eval->add_option("--checkpoint", ev_ck, "checkpoint")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--data", ev_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  c_eval->add_option("--subject", ev_subject, "subject id")->capture_default_str();
  c_eval->add_option("--session", ev_session, "session (0: the checkpoint's target)")->capture_default_str();
  c_eval->add_option("--out", ev_out, "run directory")->required();
  c_eval->callback([&] {
    action = [&] {
      nlohmann::json extra;
      TmkNet net = load_checkpoint(ev_ck, &extra);
      const data::Dataset ds = data::read_dataset(ev_data);
      check_compatible(net, ds);
      const std::size_t dom = resolve_domain(ds, extra, ev_subject, ev_session);
      const auto rep = experiment::evaluate(net, ds, ds.indices_of_domain(dom));
      prepare_run_dir(ev_out);
      write_text(fs::path(ev_out) / "metrics.json", metrics::to_json(rep).dump(2) + "\n");
      write_run_info(ev_out, "eval", net.seed(), {{"checkpoint", ev_ck}, {"domain", dom}});
      out << "accuracy " << rep.accuracy << " macro_f1 " << rep.macro_f1 << "\n";
    };
  });

  // ablate
  RunFlags ab_flags;
  std::string ab_out, ab_variants;
  auto* c_ablate = app.add_subcommand("ablate", "train and evaluate the full model and ablated variants");
  ab_flags.attach(*c_ablate);
  c_ablate->add_option("--variants", ab_variants,
                       "comma-separated: no-mrt,no-mss,no-global,no-flexor-extensor,no-proximal-distal,no-dilated");
  c_ablate->add_option("--out", ab_out, "run directory")->required();
  c_ablate->callback([&] {
    action = [&] {
      std::vector<experiment::Variant> vs;
      std::stringstream ss(ab_variants);
      for (std::string tok; std::getline(ss, tok, ',');)
        if (!tok.empty()) {
          try {
            vs.push_back(experiment::parse_variant(tok));
          } catch (const ConfigError& e) {
            throw ConfigError(std::string("--variants: ") + e.what());
          }
        }
      const experiment::RunConfig cfg = ab_flags.resolve();
      const data::Dataset ds = data::read_dataset(cfg.data);
      prepare_run_dir(ab_out);
      write_text(fs::path(ab_out) / "config.json", experiment::to_json(cfg).dump(2) + "\n");
      std::ofstream log(fs::path(ab_out) / "ablate.log");
      const auto rows = experiment::ablate(cfg, ds, vs, &log);
      const std::string table = experiment::ablation_table(rows);
      write_text(fs::path(ab_out) / "ablation.txt", table);
      write_text(fs::path(ab_out) / "ablation.csv", experiment::ablation_csv(rows));
      nlohmann::json all = nlohmann::json::object();
      for (const auto& r : rows)
        for (const auto& [v, n] : experiment::variant_names())
          if (v == r.variant) all[n] = metrics::to_json(r.report);
      write_text(fs::path(ab_out) / "metrics.json", all.dump(2) + "\n");
      write_run_info(ab_out, "ablate", cfg.seed);
      out << table;
    };
  });

  // saliency
  std::string sa_ck, sa_data, sa_out;
  int sa_subject = 1, sa_session = 0;
  std::size_t sa_class = 0;
  long long sa_trial = -1;
  auto* c_sal = app.add_subcommand("saliency", "input-gradient saliency for one class");
  c_sal->add_option("--checkpoint", sa_ck, "checkpoint")->required()->check(CLI::ExistingFile);
  c_sal->add_option("--data", sa_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  c_sal->add_option("--class", sa_class, "target class id")->required();
  c_sal->add_option("--trial", sa_trial, "trial index (default: every trial of the class in the session)");
  c_sal->add_option("--subject", sa_subject, "subject id")->capture_default_str();
  c_sal->add_option("--session", sa_session, "session (0: the checkpoint's target)")->capture_default_str();
  c_sal->add_option("--out", sa_out, "run directory")->required();
  c_sal->callback([&] {
    action = [&] {
      nlohmann::json extra;
      TmkNet net = load_checkpoint(sa_ck, &extra);
      const data::Dataset ds = data::read_dataset(sa_data);
      check_compatible(net, ds);
      if (sa_class >= ds.manifest.classes()) throw ConfigError("--class: " + std::to_string(sa_class) + " out of range");
      std::vector<std::size_t> idx;
      if (sa_trial >= 0) {
        if (static_cast<std::size_t>(sa_trial) >= ds.trials.size()) throw ConfigError("--trial: index out of range");
        idx.push_back(static_cast<std::size_t>(sa_trial));
      } else {
        const std::size_t dom = resolve_domain(ds, extra, sa_subject, sa_session);
        for (std::size_t i : ds.indices_of_domain(dom))
          if (ds.trials[i].label == sa_class) idx.push_back(i);
        if (idx.empty()) throw DataError("--class: no trials of that class in the session");
      }
      const std::size_t c = ds.manifest.sensors, t = ds.manifest.window_samples();
      Tensor mean_map({c, t});
      std::vector<double> per_sensor(c, 0.0);
      for (std::size_t i : idx) {
        const auto s = experiment::saliency(net, ds.input(i), ds.trials[i].domain, sa_class);
        mean_map += s.map * (1.0 / static_cast<double>(idx.size()));
        for (std::size_t k = 0; k < c; ++k) per_sensor[k] += s.per_sensor[k] / static_cast<double>(idx.size());
      }
      prepare_run_dir(sa_out);
      std::ostringstream map_csv, sens_csv;
      map_csv << std::setprecision(17) << "sensor";
      for (std::size_t j = 0; j < t; ++j) map_csv << ",t" << j;
      map_csv << "\n";
      for (std::size_t k = 0; k < c; ++k) {
        map_csv << k;
        for (std::size_t j = 0; j < t; ++j) map_csv << "," << mean_map.at(k, j);
        map_csv << "\n";
      }
      sens_csv << std::setprecision(17) << "sensor,max_saliency\n";
      for (std::size_t k = 0; k < c; ++k) sens_csv << k << "," << per_sensor[k] << "\n";
      write_text(fs::path(sa_out) / "saliency_map.csv", map_csv.str());
      write_text(fs::path(sa_out) / "saliency_sensors.csv", sens_csv.str());
      write_run_info(sa_out, "saliency", net.seed(), {{"checkpoint", sa_ck}, {"class", sa_class}, {"trials", idx.size()}});
      out << "saliency over " << idx.size() << " trial(s) written to " << sa_out << "\n";
    };
  });

  // export-features
  std::string fe_ck, fe_data, fe_out;
  auto* c_feat = app.add_subcommand("export-features", "write SPD features before and after domain normalization as CSV");
  c_feat->add_option("--checkpoint", fe_ck, "checkpoint")->required()->check(CLI::ExistingFile);
  c_feat->add_option("--data", fe_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  c_feat->add_option("--out", fe_out, "run directory")->required();
  c_feat->callback([&] {
    action = [&] {
      nlohmann::json extra;
      TmkNet net = load_checkpoint(fe_ck, &extra);
      const data::Dataset ds = data::read_dataset(fe_data);
      check_compatible(net, ds);
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < ds.trials.size(); ++i)
        if (net.dsbn().initialized(net.norm_slot(static_cast<int>(ds.trials[i].domain)))) idx.push_back(i);
      if (idx.empty()) throw StateError("--checkpoint: no dataset domain has initialized statistics");
      const auto rows = experiment::export_features(net, ds, idx);
      prepare_run_dir(fe_out);
      std::ofstream os(fs::path(fe_out) / "features.csv");
      if (!os) throw DataError("--out: cannot write features.csv");
      experiment::write_features_csv(rows, os);
      write_run_info(fe_out, "export-features", net.seed(), {{"checkpoint", fe_ck}, {"rows", rows.size()}});
      out << "rows " << rows.size() << " dispersion_pre " << experiment::between_domain_dispersion(rows, false)
          << " dispersion_post " << experiment::between_domain_dispersion(rows, true) << "\n";
    };
  });

  // compare
  std::vector<std::string> cmp_files, cmp_a, cmp_b;
  std::string cmp_metric = "accuracy";
  auto* c_cmp = app.add_subcommand("compare", "Wilcoxon signed-rank test over paired metrics reports");
  c_cmp->add_option("files", cmp_files, "reports; first half is A, second half is B")->check(CLI::ExistingFile);
  c_cmp->add_option("--a", cmp_a, "reports of method A")->check(CLI::ExistingFile);
  c_cmp->add_option("--b", cmp_b, "reports of method B")->check(CLI::ExistingFile);
  c_cmp->add_option("--metric", cmp_metric, "accuracy or macro_f1")->check(CLI::IsMember({"accuracy", "macro_f1"}))->capture_default_str();
  c_cmp->callback([&] {
    action = [&] {
      std::vector<std::string> a = cmp_a, b = cmp_b;
      if (!cmp_files.empty()) {
        if (!a.empty() || !b.empty()) throw ConfigError("compare: use either positional files or --a/--b");
        if (cmp_files.size() % 2 != 0) throw ConfigError("files: need an even number of reports");
        const auto half = static_cast<std::ptrdiff_t>(cmp_files.size() / 2);
        a.assign(cmp_files.begin(), cmp_files.begin() + half);
        b.assign(cmp_files.begin() + half, cmp_files.end());
      }
      if (a.empty() || a.size() != b.size()) throw ConfigError("--a/--b: need equally many reports on each side");
      auto score = [&](const std::string& f) {
        const auto rep = metrics::report_from_json(read_json_file(f, "compare"));
        return cmp_metric == "accuracy" ? rep.accuracy : rep.macro_f1;
      };
      std::vector<double> sa, sb;
      for (const auto& f : a) sa.push_back(score(f));
      for (const auto& f : b) sb.push_back(score(f));
      const auto w = metrics::wilcoxon_signed_rank(sa, sb);
      out << std::setprecision(10) << "W " << w.statistic << " p " << w.p_value << " n " << w.n
          << (w.exact ? " exact" : " normal") << "\n";
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }
  try {
    if (action) action();
    return kOk;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const Error& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  }
}

}  // namespace tmknet::cli

#endif  // TMKNET_CLI_HPP

// Copyright 2026 The mergelab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//
// Command-line front end. Subcommands mirror the library pipeline:
// gen-tasks, finetune, merge, bound, stability, sweep, report. Every output
// is a deterministic function of the input files and seeds.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mergelab/bound_calc.hpp"
#include "mergelab/merge_algs.hpp"
#include "mergelab/param_vector.hpp"
#include "mergelab/stability_lab.hpp"
#include "mergelab/sweep.hpp"
#include "mergelab/task_suite.hpp"
#include "mergelab/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
}

void write_text_file(const std::string& path, const std::string& text) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("short write to " + path);
}

std::string dump(const ordered_json& j) { return j.dump(2) + "\n"; }

std::uint64_t digest_of(const std::string& text) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct SeedFlag {
  std::uint64_t value = 0;
  bool set = false;
};

void add_seed_option(CLI::App* cmd, SeedFlag& flag) {
  cmd->add_option_function<std::uint64_t>(
         "--seed",
         [&flag](std::uint64_t v) {
           flag.value = v;
           flag.set = true;
         },
         "Override every seed found in the input manifests");
}

// ---------------------------------------------------------------------------
// gen-tasks <family.json> -o <dir>
// ---------------------------------------------------------------------------

int cmd_gen_tasks(const std::string& family_path, const std::string& out_dir,
                  const SeedFlag& seed) {
  mergelab::TaskFamilyConfig cfg =
      mergelab::family_from_json(read_json_file(family_path));
  if (seed.set) cfg.seed = seed.value;
  mergelab::validate_config(cfg);

  const std::vector<mergelab::TaskEnvironment> envs =
      mergelab::gen_task_family(cfg);
  const mergelab::ParamVector x0 = mergelab::pretrained_base(cfg);

  fs::create_directories(out_dir);
  write_text_file((fs::path(out_dir) / "family.json").string(),
                  dump(mergelab::family_to_json(cfg)));
  mergelab::write_params(x0, (fs::path(out_dir) / "base.params").string());

  ordered_json tasks = ordered_json::array();
  for (const auto& env : envs) {
    ordered_json t;
    t["task"] = env.task_id();
    t["n"] = env.size();
    t["het_angle"] = env.spec().het_angle;
    tasks.push_back(t);
  }
  ordered_json summary;
  summary["family"] = mergelab::family_name(cfg.family);
  summary["param_dim"] = envs.front().param_dim();
  summary["tasks"] = tasks;
  write_text_file((fs::path(out_dir) / "tasks.json").string(), dump(summary));
  std::cout << dump(summary);
  return 0;
}

// ---------------------------------------------------------------------------
// finetune <family.json> <config.json> --task i -o out.params
// ---------------------------------------------------------------------------

int cmd_finetune(const std::string& family_path, const std::string& cfg_path,
                 int task, const std::string& out_path, const SeedFlag& seed) {
  mergelab::TaskFamilyConfig fam =
      mergelab::family_from_json(read_json_file(family_path));
  mergelab::validate_config(fam);
  mergelab::FinetuneConfig cfg =
      mergelab::finetune_from_json(read_json_file(cfg_path));
  if (seed.set) cfg.seed = seed.value;

  const std::vector<mergelab::TaskEnvironment> envs =
      mergelab::gen_task_family(fam);
  if (task < 0 || static_cast<std::size_t>(task) >= envs.size())
    throw std::invalid_argument("finetune: task index out of range");
  const mergelab::ParamVector x0 = mergelab::pretrained_base(fam);

  const mergelab::TrainResult res = mergelab::finetune(x0, envs[task], cfg);
  mergelab::write_params(res.final, out_path);

  std::uint64_t log_hash = 0xCBF29CE484222325ull;
  for (const auto& step : res.batch_index_log)
    for (std::uint32_t idx : step)
      log_hash = mergelab::detail::fnv1a(log_hash, idx);

  ordered_json side;
  side["task"] = task;
  side["config"] = mergelab::finetune_to_json(cfg);
  side["eta_ref"] = res.eta_ref;
  side["weight_vector"] = res.weight_vector.a;
  side["final_risk"] = mergelab::empirical_risk(envs[task], res.final);
  side["batch_log_hash"] = hex64(log_hash);
  write_text_file(out_path + ".json", dump(side));
  std::cout << dump(side);
  return 0;
}

// ---------------------------------------------------------------------------
// merge <spec.json> <base.params> <experts...> -o merged.params
// ---------------------------------------------------------------------------

int cmd_merge(const std::string& spec_path, const std::string& base_path,
              const std::vector<std::string>& expert_paths,
              const std::string& out_path, const SeedFlag& seed) {
  const json raw = read_json_file(spec_path);
  mergelab::MergeSpec spec = mergelab::merge_spec_from_json(raw);
  if (seed.set) spec.seed = seed.value;

  const mergelab::ParamVector base = mergelab::read_params(base_path);
  std::vector<mergelab::TrainResult> results;
  results.reserve(expert_paths.size());
  const bool needs_weights = spec.method == mergelab::MergeSpec::Method::kNormalized;
  for (const std::string& path : expert_paths) {
    mergelab::TrainResult r;
    r.final = mergelab::read_params(path);
    const std::string side_path = path + ".json";
    if (fs::exists(side_path)) {
      const json side = read_json_file(side_path);
      r.eta_ref = side.at("eta_ref").get<double>();
      r.weight_vector.a = side.at("weight_vector").get<std::vector<double>>();
    } else if (needs_weights) {
      throw std::invalid_argument(
          "normalized merge needs the training sidecar " + side_path);
    } else {
      r.eta_ref = 1.0;
      r.weight_vector.a = {1.0};
    }
    results.push_back(std::move(r));
  }

  std::vector<mergelab::TaskEnvironment> envs;
  if (spec.method == mergelab::MergeSpec::Method::kAdaptive) {
    if (!raw.contains("family"))
      throw std::invalid_argument(
          "adaptive merge needs a \"family\" entry (path or inline object)");
    const json& jf = raw.at("family");
    mergelab::TaskFamilyConfig fam = mergelab::family_from_json(
        jf.is_string() ? read_json_file(jf.get<std::string>()) : jf);
    envs = mergelab::gen_task_family(fam);
    if (envs.size() != results.size())
      throw std::invalid_argument(
          "adaptive merge: family size must match the expert count");
  }

  auto [merged, lambdas] = mergelab::apply_merge(base, results, envs, spec);
  mergelab::write_params(merged, out_path);

  ordered_json out;
  out["method"] = mergelab::MergeSpec::method_name(spec.method);
  out["dim"] = merged.dim();
  out["lambdas"] = std::vector<double>(lambdas.weights().begin(),
                                       lambdas.weights().end());
  std::cout << dump(out);
  return 0;
}

// ---------------------------------------------------------------------------
// bound <inputs.json> [-o out.json]
// ---------------------------------------------------------------------------

int cmd_bound(const std::string& inputs_path, const std::string& out_path) {
  const mergelab::BoundInputs in =
      mergelab::bound_inputs_from_json(read_json_file(inputs_path));
  const mergelab::BoundBreakdown bd = mergelab::excess_bound(in);
  const std::string text = dump(mergelab::breakdown_to_json(bd));
  std::cout << text;
  if (!out_path.empty()) write_text_file(out_path, text);
  return 0;
}

// ---------------------------------------------------------------------------
// stability <suite.json> [-o out.json]
// ---------------------------------------------------------------------------

int cmd_stability(const std::string& suite_path, const std::string& out_path,
                  const SeedFlag& seed) {
  const json suite = read_json_file(suite_path);
  mergelab::TaskFamilyConfig fam =
      mergelab::family_from_json(suite.at("family"));
  mergelab::validate_config(fam);
  mergelab::FinetuneConfig cfg =
      mergelab::finetune_from_json(suite.at("config"));

  mergelab::StabilityOptions opts;
  opts.replicates = suite.value("replicates", 20);
  opts.seed = suite.value("seed", static_cast<std::uint64_t>(0));
  if (seed.set) opts.seed = seed.value;

  const std::string mode = suite.value("mode", std::string("global"));
  if (mode != "local" && mode != "global")
    throw std::invalid_argument("stability: mode must be \"local\" or \"global\"");

  const std::vector<mergelab::TaskEnvironment> envs =
      mergelab::gen_task_family(fam);
  const mergelab::ParamVector x0 = mergelab::pretrained_base(fam);

  mergelab::ProbeOptions probe;
  if (suite.contains("probe")) {
    const json& jp = suite.at("probe");
    probe.count = jp.value("count", 32);
    probe.radius = jp.value("radius", 1.0);
    probe.seed = jp.value("seed", static_cast<std::uint64_t>(0x5EED));
  }
  const std::string profile_kind = suite.value("profile", std::string("probed"));
  const double ball_radius = suite.value("ball_radius", 1.0);

  mergelab::StabilityEstimate est;
  std::span<const mergelab::TaskEnvironment> scope;
  std::size_t scope_tasks = 0;
  int task = suite.value("task", 0);
  std::vector<mergelab::FinetuneConfig> cfgs;
  if (mode == "local") {
    if (task < 0 || static_cast<std::size_t>(task) >= envs.size())
      throw std::invalid_argument("stability: task index out of range");
    est = mergelab::empirical_local_stability(envs[static_cast<std::size_t>(task)],
                                              x0, cfg, opts);
    scope = std::span<const mergelab::TaskEnvironment>(
        &envs[static_cast<std::size_t>(task)], 1);
    scope_tasks = 1;
  } else {
    mergelab::MergeSpec merge;
    if (suite.contains("merge"))
      merge = mergelab::merge_spec_from_json(suite.at("merge"));
    cfgs.assign(envs.size(), cfg);
    est = mergelab::empirical_global_stability(envs, x0, cfgs, merge, opts);
    scope = envs;
    scope_tasks = envs.size();
  }

  mergelab::HeterogeneityProfile prof;
  if (profile_kind == "closed-form") {
    prof = mergelab::closed_form_profile(scope, x0, ball_radius, probe);
  } else if (profile_kind == "probed") {
    prof = mergelab::probe_profile(scope, x0, probe);
  } else {
    throw std::invalid_argument(
        "stability: profile must be \"closed-form\" or \"probed\"");
  }

  mergelab::BoundInputs in;
  in.profile = prof;
  for (std::size_t i = 0; i < scope_tasks; ++i) {
    in.n.push_back(mergelab::effective_size(scope[i], cfg.data_ratio));
    in.b.push_back(cfg.batch);
    in.K.push_back(cfg.steps);
  }
  in.lambdas = mergelab::MergeCoefficients::uniform(scope_tasks);
  in.eta_l = cfg.schedule.eta;
  const double bound_value = mergelab::stability_bound(in);

  int passing = 0;
  const int reps = est.replicates;
  for (int r = 0; r < reps; ++r) {
    double mean_r = 0.0;
    for (const auto& col : est.per_task_samples)
      mean_r += col[static_cast<std::size_t>(r)];
    mean_r /= static_cast<double>(est.per_task_samples.size());
    if (mean_r <= bound_value) passing += 1;
  }

  ordered_json out = mergelab::stability_estimate_to_json(est);
  out["bound_value"] = bound_value;
  out["holds"] = est.eps_sq <= bound_value;
  out["pass_rate"] =
      static_cast<double>(passing) / static_cast<double>(reps);
  out["mode"] = mode;
  out["config_digest"] = hex64(digest_of(suite.dump()));
  const std::string text = dump(out);
  std::cout << text;
  if (!out_path.empty()) write_text_file(out_path, text);
  return 0;
}

// ---------------------------------------------------------------------------
// sweep <manifest.json> -o report.json [--csv out.csv] [--jobs J]
// ---------------------------------------------------------------------------

int cmd_sweep(const std::string& manifest_path, const std::string& out_path,
              std::string csv_path, int jobs, const SeedFlag& seed) {
  mergelab::SweepManifest manifest =
      mergelab::manifest_from_json(read_json_file(manifest_path));
  if (seed.set) manifest.seed = seed.value;

  const mergelab::SweepReport report = mergelab::run_sweep(manifest, jobs);
  const ordered_json j = mergelab::report_to_json(report);
  write_text_file(out_path, dump(j));
  if (csv_path.empty())
    csv_path = fs::path(out_path).replace_extension(".csv").string();
  write_text_file(csv_path, mergelab::sweep_csv(j));

  ordered_json summary;
  summary["report"] = out_path;
  summary["csv"] = csv_path;
  summary["total_entries"] = report.total_entries;
  summary["collapsed_entries"] = report.collapsed_entries;
  std::cout << dump(summary);
  // Collapse-dominated sweeps are a distinct, detectable outcome.
  if (2 * report.collapsed_entries > report.total_entries) return 2;
  return 0;
}

// ---------------------------------------------------------------------------
// report <report.json> --csv out.csv
// ---------------------------------------------------------------------------

int cmd_report(const std::string& report_path, const std::string& csv_path) {
  const json j = read_json_file(report_path);
  if (!j.contains("cells"))
    throw std::invalid_argument("report: missing \"cells\" array");
  write_text_file(csv_path, mergelab::sweep_csv(j));
  ordered_json summary;
  summary["csv"] = csv_path;
  summary["rows"] = j.at("cells").size();
  std::cout << dump(summary);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic model-merging laboratory"};
  app.require_subcommand(1);
  int exit_code = 0;

  std::string gt_family, gt_out;
  SeedFlag gt_seed;
  auto* gen = app.add_subcommand("gen-tasks", "Generate a task family on disk");
  gen->add_option("family", gt_family, "Family manifest (JSON)")->required();
  gen->add_option("-o,--output", gt_out, "Output directory")->required();
  add_seed_option(gen, gt_seed);
  gen->callback([&] { exit_code = cmd_gen_tasks(gt_family, gt_out, gt_seed); });

  std::string ft_family, ft_cfg, ft_out;
  int ft_task = 0;
  SeedFlag ft_seed;
  auto* ft = app.add_subcommand("finetune", "Fine-tune one expert from the base");
  ft->add_option("family", ft_family, "Family manifest (JSON)")->required();
  ft->add_option("config", ft_cfg, "Training config (JSON)")->required();
  ft->add_option("--task", ft_task, "Task index")->capture_default_str();
  ft->add_option("-o,--output", ft_out, "Output parameter file")->required();
  add_seed_option(ft, ft_seed);
  ft->callback(
      [&] { exit_code = cmd_finetune(ft_family, ft_cfg, ft_task, ft_out, ft_seed); });

  std::string mg_spec, mg_base, mg_out;
  std::vector<std::string> mg_experts;
  SeedFlag mg_seed;
  auto* mg = app.add_subcommand("merge", "Merge expert parameter files");
  mg->add_option("spec", mg_spec, "Merge spec (JSON)")->required();
  mg->add_option("base", mg_base, "Base parameter file")->required();
  mg->add_option("experts", mg_experts, "Expert parameter files")->required();
  mg->add_option("-o,--output", mg_out, "Output parameter file")->required();
  add_seed_option(mg, mg_seed);
  mg->callback(
      [&] { exit_code = cmd_merge(mg_spec, mg_base, mg_experts, mg_out, mg_seed); });

  std::string bd_in, bd_out;
  auto* bd = app.add_subcommand("bound", "Evaluate the excess-risk prediction");
  bd->add_option("inputs", bd_in, "Bound inputs (JSON)")->required();
  bd->add_option("-o,--output", bd_out, "Optional output file");
  bd->callback([&] { exit_code = cmd_bound(bd_in, bd_out); });

  std::string st_suite, st_out;
  SeedFlag st_seed;
  auto* st = app.add_subcommand("stability", "Measure coupled-run stability");
  st->add_option("suite", st_suite, "Stability suite (JSON)")->required();
  st->add_option("-o,--output", st_out, "Optional output file");
  add_seed_option(st, st_seed);
  st->callback([&] { exit_code = cmd_stability(st_suite, st_out, st_seed); });

  std::string sw_manifest, sw_out, sw_csv;
  int sw_jobs = 1;
  SeedFlag sw_seed;
  auto* sw = app.add_subcommand("sweep", "Run a hyperparameter sweep");
  sw->add_option("manifest", sw_manifest, "Sweep manifest (JSON)")->required();
  sw->add_option("-o,--output", sw_out, "Report JSON path")->required();
  sw->add_option("--csv", sw_csv, "CSV path (default: report stem + .csv)");
  sw->add_option("--jobs", sw_jobs, "Worker threads")->capture_default_str();
  add_seed_option(sw, sw_seed);
  sw->callback(
      [&] { exit_code = cmd_sweep(sw_manifest, sw_out, sw_csv, sw_jobs, sw_seed); });

  std::string rp_report, rp_csv;
  auto* rp = app.add_subcommand("report", "Re-emit a stored report as CSV");
  rp->add_option("report", rp_report, "Report JSON path")->required();
  rp->add_option("--csv", rp_csv, "CSV output path")->required();
  rp->callback([&] { exit_code = cmd_report(rp_report, rp_csv); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return exit_code;
}

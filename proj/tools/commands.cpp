#include "commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <json.hpp>

#include "dynainfer/errors.hpp"
#include "dynainfer/eval.hpp"

namespace dynainfer::cli {

namespace fs = std::filesystem;

namespace {

constexpr Split kSplits[] = {Split::Train, Split::Test, Split::Adapt, Split::AdaptTest};

std::size_t per_env(const ExperimentConfig& c, Split s) {
  switch (s) {
    case Split::Train: return c.per_env.train;
    case Split::Test: return c.per_env.test;
    case Split::Adapt: return c.per_env.adapt;
    case Split::AdaptTest: return c.per_env.adapt_test;
  }
  return 0;
}

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::uint64_t fnv(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

// Datasets depend only on the system, environments and counts.
fs::path data_dir(const ExperimentConfig& c, std::uint64_t seed) {
  const EnvPreset p = c.resolved_preset();
  std::ostringstream key;
  key << std::setprecision(17) << c.preset << '|' << p.spec.name();
  for (const auto& e : p.train) for (double v : e.values) key << ',' << v;
  key << '|';
  for (const auto& e : p.adapt) for (double v : e.values) key << ',' << v;
  for (Split s : kSplits) key << '|' << per_env(c, s);
  return fs::path(c.out) / "data" / ("s" + std::to_string(seed) + "-" + hex(fnv(key.str())));
}

fs::path data_file(const ExperimentConfig& c, std::uint64_t seed, Split s) {
  return data_dir(c, seed) / (std::string(split_name(s)) + ".dyn");
}

bool split_available(const ExperimentConfig& c, Split s) {
  if (per_env(c, s) == 0) return false;
  return !c.resolved_preset().environments(s).empty();
}

Dataset ensure_split(const ExperimentConfig& c, std::uint64_t seed, Split s) {
  if (!split_available(c, s)) {
    throw ConfigError("the config defines no " + std::string(split_name(s)) + " split");
  }
  const fs::path path = data_file(c, seed, s);
  if (!fs::exists(path)) {
    save_dataset(generate_dataset(c.resolved_preset(), per_env(c, s), s, split_seed(seed, s)), path);
  }
  return load_dataset(path);
}

// Training-side data: exact derivative targets are attached from the stored
// environment tables when the loss asks for them.
Dataset load_for_loss(const ExperimentConfig& c, std::uint64_t seed, Split s) {
  Dataset ds = ensure_split(c, seed, s);
  if (c.loss.mode == LossMode::Derivative && c.loss.estimator == DerivativeEstimator::Exact) {
    attach_exact_derivatives(ds);
  }
  return ds;
}

fs::path run_dir(const ExperimentConfig& c, std::uint64_t seed) {
  return fs::path(c.out) / run_id(c, seed);
}

fs::path default_checkpoint(const ExperimentConfig& c, std::uint64_t seed) {
  return run_dir(c, seed) / "checkpoints" / "model.dynf";
}

ExperimentConfig single_seed(const ExperimentConfig& c, std::uint64_t seed) {
  ExperimentConfig one = c;
  one.seeds = {seed};
  return one;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw FileError("cannot write " + path.string());
  os << text;
}

void write_run_files(const ExperimentConfig& c, std::uint64_t seed) {
  const fs::path dir = run_dir(c, seed);
  write_text(dir / "config.json", config_to_json(single_seed(c, seed)) + "\n");
  nlohmann::json refs = nlohmann::json::object();
  for (Split s : kSplits) {
    if (split_available(c, s)) {
      refs[std::string(split_name(s))] = fs::absolute(data_file(c, seed, s)).lexically_normal().string();
    }
  }
  write_text(dir / "datasets.json", refs.dump(2) + "\n");
}

RunInfo run_info(const ExperimentConfig& c, std::uint64_t seed) {
  RunInfo info;
  info.run_id = run_id(c, seed);
  info.seed = seed;
  info.system = c.system;
  info.model_law = std::string(law_name(c.model.law));
  info.assignment_strategy = c.strategy.name();
  return info;
}

DecomposedModel load_checkpoint(const ExperimentConfig& c, std::uint64_t seed,
                                const CommandOptions& o) {
  const fs::path path = o.checkpoint ? *o.checkpoint : default_checkpoint(c, seed);
  if (!fs::exists(path)) throw FileError("checkpoint not found: " + path.string());
  return load_model(path);
}

TrainResult train_one(const ExperimentConfig& c, const Dataset& train,
                      std::size_t env_count, std::uint64_t seed) {
  ModelOptions mo = c.model;
  mo.env_count = env_count;
  TrainHyper h = c.hyper;
  h.seed = seed;
  const DatasetView view(train);
  if (c.strategy.dynainfer) return dynainfer_train(view, mo, c.loss, h);
  const DatasetView labelled = c.strategy.baseline == BaselineStrategy::Oracle
                                   ? DatasetView::unsealed(train)
                                   : view;
  const AssignmentState st = baseline_assign(c.strategy.baseline, labelled, env_count, seed);
  mo.env_count = baseline_env_count(c.strategy.baseline, labelled, env_count);
  return train_fixed(view, mo, st, c.loss, h);
}

// Test-time inference uses states only: rollout loss on the prefix.
LossSpec inference_spec(const ExperimentConfig& c, const Dataset& ds) {
  LossSpec s = LossSpec::defaults(ds.spec);
  s.substeps = c.loss.mode == LossMode::Rollout ? c.loss.substeps : s.substeps;
  return s;
}

MetricReport eval_test(const ExperimentConfig& c, const DecomposedModel& model,
                       const Dataset& test, bool oracle_env, double* accuracy) {
  const DatasetView view = DatasetView::unsealed(test);
  std::vector<std::size_t> envs;
  if (oracle_env) {
    for (std::int32_t t : view.true_labels()) envs.push_back(static_cast<std::size_t>(t));
    if (!envs.empty() && *std::max_element(envs.begin(), envs.end()) >= model.env_count()) {
      throw ConfigError("--oracle-env needs one model block per true environment");
    }
  } else {
    envs = infer_test_envs(model, DatasetView(test), c.prefix_points, inference_spec(c, test));
  }
  if (accuracy) *accuracy = match_accuracy(envs, view).accuracy;
  MetricReport rep = eval_rollout(model, view, envs, c.eval);
  rep.split = oracle_env ? "test-oracle-env" : "test";
  return rep;
}

struct Aggregate {
  std::vector<double> mse, mape;
};

void write_aggregate(const std::map<std::vector<std::string>, Aggregate>& groups,
                     const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw FileError("cannot write " + path.string());
  os << std::setprecision(10);
  os << "config,system,model_law,assignment_strategy,split,n_seeds,mse_mean,mse_std,mape_mean,mape_std\n";
  for (const auto& [key, agg] : groups) {
    const MeanStd m = mean_std(agg.mse), p = mean_std(agg.mape);
    for (const std::string& k : key) os << k << ',';
    os << agg.mse.size() << ',' << m.mean << ',' << m.std << ',' << p.mean << ',' << p.std << '\n';
  }
}

std::string config_tag(const ExperimentConfig& c) { return hex(config_hash(c)); }

}  // namespace

ExperimentConfig resolve(const GlobalOptions& g) {
  ExperimentConfig c = g.config.empty() ? default_config("lv") : load_config(g.config);
  if (g.seed) c.seeds = {*g.seed};
  if (g.out) c.out = *g.out;
  return c;
}

int cmd_gen(const ExperimentConfig& c) {
  for (std::uint64_t seed : c.seeds) {
    for (Split s : kSplits) {
      if (!split_available(c, s)) continue;
      const Dataset ds = ensure_split(c, seed, s);
      std::printf("%s: %zu trajectories\n", data_file(c, seed, s).string().c_str(),
                  ds.trajectories.size());
    }
  }
  return 0;
}

int cmd_train(const ExperimentConfig& c) {
  std::map<std::vector<std::string>, Aggregate> groups;
  for (std::uint64_t seed : c.seeds) {
    const Dataset train = load_for_loss(c, seed, Split::Train);
    const Dataset test = ensure_split(c, seed, Split::Test);
    const TrainResult res = train_one(c, train, c.env_count, seed);
    const fs::path dir = run_dir(c, seed);
    write_run_files(c, seed);
    save_model(res.model, default_checkpoint(c, seed));
    write_rounds_csv(res.report, dir / "csv" / "rounds.csv");
    const DatasetView labelled = DatasetView::unsealed(train);
    write_assignments_csv(res.report, labelled, dir / "csv" / "assignments.csv");

    double test_acc = 0.0;
    MetricReport rep = eval_test(c, res.model, test, false, &test_acc);
    rep.seed = seed;
    write_metrics_csv({{run_info(c, seed), rep}}, dir / "csv" / "metrics.csv");
    const double train_acc = match_accuracy(res.report.assignments.labels, labelled).accuracy;
    std::printf("%s: R %.6e, train accuracy %.4f, labels %zu, test mse %.6e (env accuracy %.4f)\n",
                run_id(c, seed).c_str(), res.report.rounds.back().r_total, train_acc,
                label_count(res.report.assignments.labels), rep.mse, test_acc);
    Aggregate& a = groups[{config_tag(c), c.system, std::string(law_name(c.model.law)),
                           c.strategy.name(), rep.split}];
    a.mse.push_back(rep.mse);
    a.mape.push_back(rep.mape);
  }
  write_aggregate(groups, fs::path(c.out) / ("aggregate-" + config_tag(c) + ".csv"));
  return 0;
}

int cmd_eval(const ExperimentConfig& c, const CommandOptions& o) {
  for (std::uint64_t seed : c.seeds) {
    const DecomposedModel model = load_checkpoint(c, seed, o);
    const Dataset test = ensure_split(c, seed, Split::Test);
    MetricReport rep = eval_test(c, model, test, o.oracle_env, nullptr);
    rep.seed = seed;
    const fs::path out = run_dir(c, seed) / "csv" /
                         (o.oracle_env ? "metrics_oracle_env.csv" : "metrics.csv");
    write_metrics_csv({{run_info(c, seed), rep}}, out);
    std::printf("%s: %s mse %.6e mape %.4f flagged %zu\n", run_id(c, seed).c_str(),
                rep.split.c_str(), rep.mse, rep.mape, rep.n_flagged);
  }
  return 0;
}

int cmd_adapt(const ExperimentConfig& c, const CommandOptions& o) {
  if (!split_available(c, Split::Adapt) || !split_available(c, Split::AdaptTest)) {
    throw ConfigError("adapt needs adapt and adapt_test splits (per_env.adapt, "
                      "per_env.adapt_test and adaptation environments)");
  }
  for (std::uint64_t seed : c.seeds) {
    const DecomposedModel trained = load_checkpoint(c, seed, o);
    const Dataset data = load_for_loss(c, seed, Split::Adapt);
    const Dataset test = ensure_split(c, seed, Split::AdaptTest);
    const std::uint64_t before = checksum(trained.shared);
    const DecomposedModel adapted =
        adapt(trained, DatasetView::unsealed(data), c.loss, c.adapt_epochs, c.adapt_lr, seed);
    const std::uint64_t after = checksum(adapted.shared);
    if (before != after) throw NumericError("shared parameters changed during adaptation");
    const fs::path dir = run_dir(c, seed);
    write_run_files(c, seed);
    save_model(adapted, dir / "checkpoints" / "adapted.dynf");

    const DatasetView view = DatasetView::unsealed(test);
    std::vector<std::size_t> envs;
    for (std::int32_t t : view.true_labels()) envs.push_back(static_cast<std::size_t>(t));
    MetricReport rep = eval_rollout(adapted, view, envs, c.eval);
    rep.split = "adapt";
    rep.seed = seed;
    write_metrics_csv({{run_info(c, seed), rep}}, dir / "csv" / "metrics_adapt.csv");
    std::printf("%s: adapt mse %.6e mape %.4f, shared checksum %016llx unchanged\n",
                run_id(c, seed).c_str(), rep.mse, rep.mape,
                static_cast<unsigned long long>(after));
  }
  return 0;
}

int cmd_sweep_m(const ExperimentConfig& base, const CommandOptions& o) {
  ExperimentConfig c = base;
  c.strategy = Strategy{};
  const std::vector<std::size_t> ms = o.m_list.empty() ? c.sweep_m : o.m_list;
  if (ms.empty()) throw ConfigError("empty M list");
  std::vector<SweepRow> rows;
  for (std::uint64_t seed : c.seeds) {
    const Dataset train = load_for_loss(c, seed, Split::Train);
    const Dataset test = ensure_split(c, seed, Split::Test);
    for (std::size_t m : ms) {
      const TrainResult res = train_one(c, train, m, seed);
      SweepRow row;
      row.env_count = m;
      row.seed = seed;
      row.test_mse = eval_test(c, res.model, test, false, nullptr).mse;
      row.accuracy = match_accuracy(res.report.assignments.labels, DatasetView::unsealed(train)).accuracy;
      row.label_count = label_count(res.report.assignments.labels);
      rows.push_back(row);
      std::printf("seed %llu M %zu: test mse %.6e, accuracy %.4f, labels %zu\n",
                  static_cast<unsigned long long>(seed), m, row.test_mse, row.accuracy,
                  row.label_count);
    }
  }
  const std::string tag = config_tag(c);
  write_sweep_csv(rows, fs::path(c.out) / ("sweep-" + tag + ".csv"));

  const fs::path summary = fs::path(c.out) / ("sweep-" + tag + "-summary.csv");
  std::ofstream os(summary);
  if (!os) throw FileError("cannot write " + summary.string());
  os << std::setprecision(10) << "M,n_seeds,test_mse_mean,test_mse_std,accuracy_mean,accuracy_std,label_count_mean\n";
  for (std::size_t m : ms) {
    std::vector<double> mse, acc, lc;
    for (const SweepRow& r : rows) {
      if (r.env_count != m) continue;
      mse.push_back(r.test_mse);
      acc.push_back(r.accuracy);
      lc.push_back(static_cast<double>(r.label_count));
    }
    const MeanStd a = mean_std(mse), b = mean_std(acc), l = mean_std(lc);
    os << m << ',' << mse.size() << ',' << a.mean << ',' << a.std << ',' << b.mean << ','
       << b.std << ',' << l.mean << '\n';
  }
  return 0;
}

int cmd_loss_matrix(const ExperimentConfig& c, const CommandOptions& o) {
  for (std::uint64_t seed : c.seeds) {
    const DecomposedModel model = load_checkpoint(c, seed, o);
    const Dataset train = load_for_loss(c, seed, Split::Train);
    const DatasetView view(train);
    const Tensor losses = loss_matrix(model, view, c.loss);
    const fs::path out = run_dir(c, seed) / "csv" / "loss_matrix.csv";
    write_loss_matrix_csv(losses, view, out);
    std::printf("%s: %zu x %zu loss matrix -> %s\n", run_id(c, seed).c_str(), losses.rows(),
                losses.cols(), out.string().c_str());
  }
  return 0;
}

int cmd_report(const ExperimentConfig& c) {
  const fs::path root(c.out);
  if (!fs::is_directory(root)) throw FileError("no output directory " + root.string());
  std::map<std::vector<std::string>, Aggregate> groups;
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(root)) {
    const fs::path csv = entry.path() / "csv";
    if (!fs::is_directory(csv)) continue;
    for (const auto& f : fs::directory_iterator(csv)) {
      const std::string name = f.path().filename().string();
      if (name.rfind("metrics", 0) == 0 && f.path().extension() == ".csv") files.push_back(f.path());
    }
  }
  std::sort(files.begin(), files.end());
  for (const fs::path& f : files) {
    std::ifstream is(f);
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
      std::vector<std::string> cols;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) cols.push_back(cell);
      if (cols.size() != 9) throw FormatError("malformed metrics row in " + f.string());
      const std::string id = cols[0];
      const std::string tag = id.substr(id.find('-') + 1);
      Aggregate& a = groups[{tag, cols[2], cols[3], cols[4], cols[5]}];
      a.mse.push_back(std::stod(cols[6]));
      a.mape.push_back(std::stod(cols[7]));
    }
  }
  const fs::path out = root / "report.csv";
  write_aggregate(groups, out);
  std::printf("%zu metric files, %zu groups -> %s\n", files.size(), groups.size(), out.string().c_str());
  return 0;
}

}  // namespace dynainfer::cli

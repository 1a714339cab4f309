#include "marlhf/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "marlhf/config.hpp"
#include "marlhf/errors.hpp"
#include "marlhf/trainer.hpp"

namespace marlhf {
namespace {

namespace fs = std::filesystem;

std::string overrides_footer() {
  std::ostringstream os;
  os << "Config overrides (--set key=value):\n";
  for (const auto& k : config_keys()) {
    os << "  " << k.name;
    for (std::size_t i = k.name.size(); i < 18; ++i) os << ' ';
    os << k.help << "\n";
  }
  return os.str();
}

// Shared --config/--set/--seed handling.
struct ConfigOptions {
  std::string path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", path, "config file (.json, or key = value lines)");
    cmd->add_option("--set", sets, "override one config key, key=value (repeatable)");
    cmd->add_option("--seed", seed, "shorthand for --set seed=N");
  }

  TrainConfig load() const {
    TrainConfig cfg = path.empty() ? TrainConfig{} : load_config(path);
    for (const auto& s : sets) apply_override(cfg, s);
    if (seed) cfg.seed = *seed;
    validate(cfg);
    return cfg;
  }
};

template <typename T>
std::vector<T> parse_list(const std::string& text) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::istringstream is(item);
    T v{};
    if (!(is >> v) || !is.eof()) throw ConfigError("list", "cannot parse '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("list", "empty list");
  return out;
}

nlohmann::json segmentation_json(const Segmentation& seg, const std::string& rule) {
  nlohmann::json j;
  j["rule"] = rule;
  j["start"] = seg.start();
  j["boundaries"] = seg.boundaries();
  j["lengths"] = seg.lengths();
  return j;
}

void print_segments(std::ostream& out, std::span<const Token> tokens, const Segmentation& seg) {
  for (std::size_t s = 0; s < seg.size(); ++s) {
    out << "[";
    for (std::size_t t = seg.begin_of(s); t < seg.end_of(s); ++t) {
      out << (t == seg.begin_of(s) ? "" : " ") << tokens[t];
    }
    out << "]" << (s + 1 < seg.size() ? " " : "\n");
  }
  out << "lengths [";
  const auto lengths = seg.lengths();
  for (std::size_t i = 0; i < lengths.size(); ++i) out << (i ? "," : "") << lengths[i];
  out << "]\n";
}

std::vector<fs::path> run_dirs(const fs::path& dir) {
  std::vector<fs::path> runs;
  if (fs::exists(dir / "metrics.jsonl")) runs.push_back(dir);
  if (fs::is_directory(dir)) {
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_directory() && fs::exists(entry.path() / "metrics.jsonl")) {
        runs.push_back(entry.path());
      }
    }
  }
  std::sort(runs.begin(), runs.end());
  return runs;
}

}  // namespace

std::vector<double> histogram_edges() {
  std::vector<double> edges;
  for (int i = 0; i <= 14; ++i) edges.push_back(-2.5 + 0.25 * i);
  return edges;
}

std::vector<std::size_t> histogram_counts(const std::vector<double>& scores) {
  const auto edges = histogram_edges();
  std::vector<std::size_t> counts(edges.size() - 1, 0);
  for (double s : scores) {
    // Out-of-range scores land in the outermost bins.
    std::size_t bin = 0;
    while (bin + 1 < counts.size() && s >= edges[bin + 1]) ++bin;
    ++counts[bin];
  }
  return counts;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Macro-action PPO training toolkit", "marlhf"};
  app.require_subcommand(1);
  app.footer(overrides_footer());

  // sft
  ConfigOptions sft_cfg;
  std::string sft_out = "runs/sft";
  auto* sft_cmd = app.add_subcommand("sft", "supervised warm start; writes a checkpoint");
  sft_cfg.attach(sft_cmd);
  sft_cmd->add_option("--out", sft_out, "output directory");

  // train
  ConfigOptions train_cfg;
  std::string train_out = "runs/train";
  bool train_quiet = false;
  auto* train_cmd = app.add_subcommand("train", "SFT, then (MA-)PPO; writes metrics and checkpoints");
  train_cfg.attach(train_cmd);
  train_cmd->add_option("--out", train_out, "output directory");
  train_cmd->add_flag("--quiet", train_quiet, "do not echo the log to stdout");

  // eval
  ConfigOptions eval_cfg;
  std::string eval_ckpt;
  bool eval_json = false;
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on the held-out prompts");
  eval_cfg.attach(eval_cmd);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_flag("--json", eval_json, "print the full score list as JSON");

  // best-of-n
  ConfigOptions bon_cfg;
  std::string bon_ckpt;
  std::string bon_n = "1,4,8,16";
  std::string bon_temps = "0.8";
  std::string bon_csv;
  auto* bon_cmd = app.add_subcommand("best-of-n", "mean best-of-N score per (N, temperature)");
  bon_cfg.attach(bon_cmd);
  bon_cmd->add_option("--checkpoint", bon_ckpt, "checkpoint file")->required();
  bon_cmd->add_option("--n", bon_n, "comma separated N values");
  bon_cmd->add_option("--temperature", bon_temps, "comma separated temperatures");
  bon_cmd->add_option("--csv", bon_csv, "also write the table to this file");

  // segment
  ConfigOptions seg_cfg;
  std::string seg_tokens;
  std::string seg_episode;
  std::optional<std::string> seg_rule;
  std::optional<std::string> seg_ngram;
  bool seg_json = false;
  auto* seg_cmd = app.add_subcommand("segment", "show macro-action boundaries for a response");
  seg_cfg.attach(seg_cmd);
  seg_cmd->add_option("--tokens", seg_tokens, "response token ids, space or comma separated");
  seg_cmd->add_option("--episode", seg_episode,
                      "episode JSON with response, optional ref_logps/mask/prompt");
  seg_cmd->add_option("--termination", seg_rule, "fixed|random|ppl|parsing");
  seg_cmd->add_option("--ngram", seg_ngram, "n for the fixed rule (or inf)");
  seg_cmd->add_flag("--json", seg_json, "machine-readable output");

  // export
  std::string exp_dir;
  std::string exp_out;
  auto* exp_cmd = app.add_subcommand("export", "merge metrics and histogram final eval scores");
  exp_cmd->add_option("--dir", exp_dir, "run directory, or a directory of run directories")
      ->required();
  exp_cmd->add_option("--out", exp_out, "output directory (default: --dir)");

  for (auto* cmd : {sft_cmd, train_cmd, eval_cmd, bon_cmd, seg_cmd, exp_cmd}) {
    cmd->footer(overrides_footer());
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*sft_cmd) {
      const TrainConfig cfg = sft_cfg.load();
      Trainer trainer(cfg, &err);
      const PolicyParams params = trainer.sft(trainer.initial_params());
      fs::create_directories(fs::path(sft_out) / "checkpoints");
      save_checkpoint(params, (fs::path(sft_out) / "checkpoints" / "sft.ckpt").string());
      std::ofstream(fs::path(sft_out) / "config.json") << to_json(cfg).dump(2) << "\n";
      out << "sft loss " << sft_loss(params, trainer.demonstrations()) << "\n";
      return kExitOk;
    }
    if (*train_cmd) {
      const TrainConfig cfg = train_cfg.load();  // validated before any output exists
      std::ostringstream log;
      Trainer trainer(cfg, &log);
      RunResult result = trainer.run();
      write_run(train_out, cfg, result);
      std::ofstream(fs::path(train_out) / "stdout.log") << log.str();
      if (!train_quiet) out << log.str();
      if (!result.metrics.empty()) {
        out << "final eval mean " << result.metrics.back().eval_mean << "\n";
      }
      return kExitOk;
    }
    if (*eval_cmd) {
      const TrainConfig cfg = eval_cfg.load();
      if (!fs::exists(eval_ckpt)) {
        err << "checkpoint not found: " << eval_ckpt << "\n";
        return kExitRuntime;
      }
      const PolicyParams params = load_checkpoint(eval_ckpt);
      Trainer trainer(cfg);
      const EvalResult r =
          trainer.evaluate(params, trainer.programmatic_reward(), trainer.eval_prompts(),
                           cfg.sampler, checkpoint_eval_stream(cfg.seed));
      if (eval_json) {
        nlohmann::ordered_json j;
        j["mean"] = r.mean;
        j["p10"] = r.p10;
        j["p50"] = r.p50;
        j["p90"] = r.p90;
        j["mean_length"] = r.mean_length;
        j["scores"] = r.scores;
        out << j.dump() << "\n";
      } else {
        out << "eval mean " << r.mean << " p10 " << r.p10 << " p50 " << r.p50 << " p90 " << r.p90
            << " length " << r.mean_length << "\n";
      }
      return kExitOk;
    }
    if (*bon_cmd) {
      TrainConfig cfg = bon_cfg.load();
      const auto ns = parse_list<std::size_t>(bon_n);
      const auto temps = parse_list<double>(bon_temps);
      if (!fs::exists(bon_ckpt)) {
        err << "checkpoint not found: " << bon_ckpt << "\n";
        return kExitRuntime;
      }
      const PolicyParams params = load_checkpoint(bon_ckpt);
      Trainer trainer(cfg);
      std::ostringstream table;
      table << "n,temperature,mean_score,stderr\n";
      for (std::size_t n : ns) {
        if (n == 0) throw ConfigError("n", "N must be >= 1");
        for (double temp : temps) {
          SamplerConfig sc = cfg.sampler;
          sc.temperature = temp;
          const auto& prompts = trainer.eval_prompts();
          std::vector<double> best(prompts.size());
          for (std::size_t k = 0; k < prompts.size(); ++k) {
            // Same per-prompt streams as `eval`, so N = 1 reproduces it.
            Rng rng(eval_sample_seed(checkpoint_eval_stream(cfg.seed), k));
            best[k] = best_of_n(params, trainer.programmatic_reward(), prompts[k], n, sc, rng).score;
          }
          double mean = 0.0;
          for (double b : best) mean += b;
          mean /= static_cast<double>(best.size());
          double var = 0.0;
          for (double b : best) var += (b - mean) * (b - mean);
          const double se =
              best.size() > 1
                  ? std::sqrt(var / static_cast<double>(best.size() - 1) /
                              static_cast<double>(best.size()))
                  : 0.0;
          table << n << ',' << temp << ',' << mean << ',' << se << "\n";
        }
      }
      out << table.str();
      if (!bon_csv.empty()) std::ofstream(bon_csv) << table.str();
      return kExitOk;
    }
    if (*seg_cmd) {
      TrainConfig cfg = seg_cfg.load();
      if (seg_rule) set_config_value(cfg, "termination", *seg_rule);
      if (seg_ngram) set_config_value(cfg, "ngram", *seg_ngram);
      validate(cfg);
      if (seg_tokens.empty() == seg_episode.empty()) {
        throw ConfigError("tokens", "give exactly one of --tokens or --episode");
      }
      Tokens response;
      std::vector<double> ref_logps;
      Mask mask;
      Prompt prompt;
      prompt.kind = cfg.task;
      if (!seg_tokens.empty()) {
        std::string text = seg_tokens;
        std::replace(text.begin(), text.end(), ',', ' ');
        std::istringstream is(text);
        Token t;
        while (is >> t) response.push_back(t);
        if (!is.eof()) throw ConfigError("tokens", "token ids must be integers");
      } else {
        std::ifstream in(seg_episode);
        if (!in) {
          err << "cannot read episode file " << seg_episode << "\n";
          return kExitRuntime;
        }
        nlohmann::json j;
        try {
          in >> j;
          response = j.at("response").get<Tokens>();
          if (j.contains("ref_logps")) ref_logps = j["ref_logps"].get<std::vector<double>>();
          if (j.contains("mask")) mask = j["mask"].get<Mask>();
          if (j.contains("prompt")) prompt.tokens = j["prompt"].get<Tokens>();
        } catch (const nlohmann::json::exception& e) {
          throw ConfigError("episode", std::string("malformed episode file: ") + e.what());
        }
      }
      if (response.empty()) throw ConfigError("tokens", "empty response");
      if (cfg.termination == TerminationKind::Perplexity && ref_logps.size() < response.size()) {
        throw ConfigError("termination",
                          "the ppl rule needs an --episode file with ref_logps per response token");
      }
      const Task task(cfg.task, cfg.noisy_copy, cfg.bracket);
      const auto tree = task.parse_tree(prompt, response);
      SegmentInput in;
      in.response_len = response.size();
      in.mask = mask;
      in.ref_logps = ref_logps;
      in.tree = tree ? &*tree : nullptr;
      Rng rng(cfg.seed);
      const Segmentation seg = segment(cfg.rule(), in, rng);
      if (seg_json) {
        out << segmentation_json(seg, describe(cfg.rule())).dump() << "\n";
      } else {
        out << describe(cfg.rule()) << "\n";
        print_segments(out, response, seg);
      }
      return kExitOk;
    }
    if (*exp_cmd) {
      const fs::path dir(exp_dir);
      const auto runs = run_dirs(dir);
      if (runs.empty()) {
        err << "no metrics found under " << exp_dir << "\n";
        return kExitRuntime;
      }
      const fs::path target = exp_out.empty() ? dir : fs::path(exp_out);
      fs::create_directories(target);
      std::ofstream merged(target / "export_metrics.csv");
      std::ofstream hist(target / "export_histogram.csv");
      merged << "run," << csv_header() << "\n";
      hist << "run,bin_low,bin_high,count\n";
      const auto edges = histogram_edges();
      for (const auto& run : runs) {
        const std::string name = run == dir ? "." : run.filename().string();
        std::ifstream in(run / "metrics.jsonl");
        std::string line;
        while (std::getline(in, line)) {
          if (line.empty()) continue;
          const auto j = nlohmann::json::parse(line);
          MetricsRecord r;
          r.update = j.at("update").get<std::size_t>();
          r.eval_mean = j.at("eval_mean").get<double>();
          r.eval_p10 = j.at("eval_p10").get<double>();
          r.eval_p50 = j.at("eval_p50").get<double>();
          r.eval_p90 = j.at("eval_p90").get<double>();
          r.adv_norm = j.at("adv_norm").get<double>();
          r.return_norm = j.at("return_norm").get<double>();
          r.kl = j.at("kl").get<double>();
          r.train_score = j.at("train_score").get<double>();
          r.response_length = j.at("response_length").get<double>();
          r.macro_count = j.at("macro_count").get<double>();
          r.policy_loss = j.at("policy_loss").get<double>();
          r.critic_loss = j.at("critic_loss").get<double>();
          if (j.contains("wall_clock")) r.wall_clock = j["wall_clock"].get<double>();
          merged << name << ',' << to_csv_row(r) << "\n";
        }
        std::vector<double> last_scores;
        std::ifstream scores(run / "scores.jsonl");
        while (std::getline(scores, line)) {
          if (!line.empty()) last_scores = nlohmann::json::parse(line).at("scores").get<std::vector<double>>();
        }
        const auto counts = histogram_counts(last_scores);
        for (std::size_t b = 0; b < counts.size(); ++b) {
          hist << name << ',' << edges[b] << ',' << edges[b + 1] << ',' << counts[b] << "\n";
        }
      }
      out << "exported " << runs.size() << " run(s) to " << target.string() << "\n";
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace marlhf

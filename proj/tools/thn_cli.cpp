// Command-line front end: data generation, three-phase training,
// strassenification of checkpoints, fixed-point quantization, cost reports,
// inference, and evaluation.
//
// Dataset arguments: gen-data, train, and strassenify take a path PREFIX and
// read/write <prefix>.train.kwsf, <prefix>.val.kwsf, <prefix>.test.kwsf.
// quantize, infer, and eval take one .kwsf feature file.
//
// Exit codes: 0 ok, 2 config/usage, 3 bad file format, 4 numeric failure.

#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "thn/thn.hpp"

using nlohmann::json;
using namespace thn;

namespace {

json load_json(const std::string& path) {
  std::string text = io::slurp(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

template <typename T>
void take(json& j, const char* key, T& dst) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    dst = it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
  j.erase(it);
}

void reject_leftovers(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    throw ConfigError(path + ": unknown config key '" + it.key() + "'");
}

TrainConfig train_config(const std::string& path) {
  TrainConfig c;
  if (path.empty()) return c;
  json j = load_json(path);
  if (!j.is_object()) throw ConfigError(path + ": config must be a JSON object");
  take(j, "batch_size", c.batch_size);
  take(j, "epochs1", c.epochs1);
  take(j, "epochs2", c.epochs2);
  take(j, "epochs3", c.epochs3);
  take(j, "lr", c.lr);
  take(j, "lr_step", c.lr_step);
  take(j, "lr_decay", c.lr_decay);
  take(j, "loss", c.loss);
  take(j, "kd_lambda", c.kd_lambda);
  take(j, "kd_tau", c.kd_tau);
  take(j, "sigma_i_start", c.sigma_i_start);
  take(j, "sigma_i_end", c.sigma_i_end);
  take(j, "seed", c.seed);
  take(j, "adam_beta1", c.adam_beta1);
  take(j, "adam_beta2", c.adam_beta2);
  take(j, "adam_eps", c.adam_eps);
  reject_leftovers(j, path);
  return c;
}

GenConfig gen_config(const std::string& path) {
  GenConfig c;
  if (path.empty()) return c;
  json j = load_json(path);
  if (!j.is_object()) throw ConfigError(path + ": config must be a JSON object");
  take(j, "classes", c.classes);
  take(j, "per_class", c.per_class);
  take(j, "height", c.height);
  take(j, "width", c.width);
  take(j, "difficulty", c.difficulty);
  take(j, "seed", c.seed);
  reject_leftovers(j, path);
  return c;
}

CountMode parse_count_mode(const std::string& s) {
  if (s == "inference_nnz") return CountMode::inference_nnz;
  if (s == "dense_estimate") return CountMode::dense_estimate;
  throw ConfigError("count mode must be inference_nnz or dense_estimate, got '" + s + "'");
}

PredictMode parse_tree_mode(const std::string& s) {
  if (s == "soft") return PredictMode::soft;
  if (s == "hard") return PredictMode::hard;
  throw ConfigError("tree mode must be soft or hard, got '" + s + "'");
}

struct SplitPaths {
  std::string train, val, test;
  explicit SplitPaths(const std::string& prefix)
      : train(prefix + ".train.kwsf"), val(prefix + ".val.kwsf"), test(prefix + ".test.kwsf") {}
};

void print_analysis(const HybridModel& m, CountMode mode, PredictMode tree_mode,
                    const std::string& csv_path) {
  OpReport ops = count_ops(m, mode, tree_mode);
  SizeReport size = model_size(m);
  MemoryReport mem = memory_footprint(m);
  std::cout << "model " << m.name << "\n\n" << op_report_text(ops) << "\n";
  std::printf("model size:     %s  (ternary %s + full precision %s)\n",
              format_kib(size.total_bytes).c_str(), format_kib(size.ternary_bytes()).c_str(),
              format_kib(size.other_bytes()).c_str());
  std::printf("activation max: %s  (%s)\n", format_kib(mem.peak_pair_bytes).c_str(),
              mem.peak_pair.c_str());
  std::printf("footprint:      %s\n", format_kib(mem.total_bytes()).c_str());
  if (!csv_path.empty()) {
    io::spit(csv_path, op_report_csv(ops));
    std::printf("wrote %s\n", csv_path.c_str());
  }
}

int run(int argc, char** argv) {
  CLI::App app{"ternary strassen networks with tree classifier heads"};
  app.require_subcommand(1);

  std::string arch_path, model_path, data_path, out_path, config_path, history_path;
  std::string mode_str = "inference_nnz", tree_mode_str = "soft", policy_str = "mixed";
  std::string csv_path;
  uint64_t seed = 0;
  bool have_seed = false, count_ops_flag = false;
  int64_t max_samples = 64;

  auto add_seed = [&](CLI::App* c) {
    c->add_option("--seed", seed, "override the config seed")->each([&](const std::string&) {
      have_seed = true;
    });
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic feature corpus");
  gen->add_option("--out", out_path, "output path prefix")->required();
  gen->add_option("--config", config_path, "generator config (json)");
  add_seed(gen);

  CLI::App* train_cmd = app.add_subcommand("train", "run the training phases");
  train_cmd->add_option("--arch", arch_path, "architecture text file (fresh start)");
  train_cmd->add_option("--model", model_path, "checkpoint to continue from");
  train_cmd->add_option("--data", data_path, "dataset path prefix")->required();
  train_cmd->add_option("--out", out_path, "output model file")->required();
  train_cmd->add_option("--config", config_path, "training config (json)");
  train_cmd->add_option("--history", history_path, "write per-epoch stats CSV here");
  add_seed(train_cmd);

  CLI::App* str_cmd =
      app.add_subcommand("strassenify", "run phases 2-3 on a phase-1 checkpoint");
  str_cmd->add_option("--model", model_path, "phase-1 checkpoint")->required();
  str_cmd->add_option("--data", data_path, "dataset path prefix")->required();
  str_cmd->add_option("--out", out_path, "output model file")->required();
  str_cmd->add_option("--config", config_path, "training config (json)");
  str_cmd->add_option("--history", history_path, "write per-epoch stats CSV here");
  add_seed(str_cmd);

  CLI::App* quant_cmd = app.add_subcommand("quantize", "fold batch norm and fix point formats");
  quant_cmd->add_option("--model", model_path, "trained model")->required();
  quant_cmd->add_option("--data", data_path, "calibration feature file")->required();
  quant_cmd->add_option("--out", out_path, "output model file")->required();
  quant_cmd->add_option("--policy", policy_str, "mixed, all8, or all16");
  quant_cmd->add_option("--tree-mode", tree_mode_str, "soft or hard calibration scoring");
  quant_cmd->add_option("--max-samples", max_samples,
                        "calibration samples to use (ranges clip to what these cover)");

  CLI::App* analyze_cmd = app.add_subcommand("analyze", "op counts, size, and memory report");
  analyze_cmd->add_option("--arch", arch_path, "architecture text file");
  analyze_cmd->add_option("--model", model_path, "model file");
  analyze_cmd->add_option("--mode", mode_str, "inference_nnz or dense_estimate");
  analyze_cmd->add_option("--tree-mode", tree_mode_str, "soft or hard tree accounting");
  analyze_cmd->add_option("--csv", csv_path, "also write the op table as CSV");
  add_seed(analyze_cmd);

  CLI::App* infer_cmd = app.add_subcommand("infer", "print class scores for a feature file");
  infer_cmd->add_option("--model", model_path, "model file")->required();
  infer_cmd->add_option("--data", data_path, "feature file")->required();
  infer_cmd->add_option("--tree-mode", tree_mode_str, "soft or hard routing");
  infer_cmd->add_flag("--count-ops", count_ops_flag, "also print executed op counts");

  CLI::App* eval_cmd = app.add_subcommand("eval", "accuracy and confusion matrix");
  eval_cmd->add_option("--model", model_path, "model file")->required();
  eval_cmd->add_option("--data", data_path, "feature file")->required();
  eval_cmd->add_option("--tree-mode", tree_mode_str, "soft or hard routing");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // usage problems are config errors
  }

  if (gen->parsed()) {
    GenConfig cfg = gen_config(config_path);
    if (have_seed) cfg.seed = seed;
    GeneratedData d = gen_data(cfg);
    SplitPaths paths(out_path);
    save_features(d.train, paths.train);
    save_features(d.val, paths.val);
    save_features(d.test, paths.test);
    std::printf("wrote %s (%lld), %s (%lld), %s (%lld)\n", paths.train.c_str(),
                (long long)d.train.size(), paths.val.c_str(), (long long)d.val.size(),
                paths.test.c_str(), (long long)d.test.size());
    return 0;
  }

  if (train_cmd->parsed() || str_cmd->parsed()) {
    TrainConfig cfg = train_config(config_path);
    if (have_seed) cfg.seed = seed;
    HybridModel m;
    if (str_cmd->parsed()) {
      m = load_model(model_path);
      cfg.epochs1 = 0;
    } else if (!arch_path.empty() && !model_path.empty()) {
      throw ConfigError("pass either --arch or --model, not both");
    } else if (!arch_path.empty()) {
      m = materialize(parse_arch(io::slurp(arch_path)), cfg.seed);
    } else if (!model_path.empty()) {
      m = load_model(model_path);
    } else {
      throw ConfigError("train needs --arch or --model");
    }
    SplitPaths paths(data_path);
    FeatureDataset train_set = load_features(paths.train);
    FeatureDataset val_set = load_features(paths.val);
    TrainResult res = train(m, train_set, val_set, cfg);
    save_model(m, out_path);
    if (!history_path.empty()) write_history_csv(history_path, res.history);
    if (!res.history.empty()) {
      const EpochStats& last = res.history.back();
      std::printf("phase %d epoch %d: loss %.4f train %.1f%% val %.1f%%\n", last.phase,
                  last.epoch, last.loss, 100 * last.train_acc, 100 * last.val_acc);
    }
    std::printf("wrote %s\n", out_path.c_str());
    return 0;
  }

  if (quant_cmd->parsed()) {
    HybridModel m = load_model(model_path);
    FeatureDataset calib = load_features(data_path);
    if (has_batchnorm(m)) fold_batchnorm(m);
    quantize_model(m, calib, quant_policy(policy_str), max_samples, parse_tree_mode(tree_mode_str));
    save_model(m, out_path);
    double acc = evaluate_accuracy(m, calib, parse_tree_mode(tree_mode_str));
    std::printf("calibration accuracy %.2f%%\n", 100 * acc);
    std::printf("wrote %s\n", out_path.c_str());
    return 0;
  }

  if (analyze_cmd->parsed()) {
    HybridModel m;
    if (!arch_path.empty() && !model_path.empty())
      throw ConfigError("pass either --arch or --model, not both");
    if (!arch_path.empty()) {
      // materialize, then collapse so strassen layers have countable weights
      m = materialize(parse_arch(io::slurp(arch_path)), have_seed ? seed : 1);
      trainer::for_each_spn(m, [](StrassenLayer& S) {
        if (S.shadow) collapse_layer(S);
      });
    } else if (!model_path.empty()) {
      m = load_model(model_path);
      trainer::for_each_spn(m, [](StrassenLayer& S) {
        if (S.shadow) collapse_layer(S);
      });
    } else {
      throw ConfigError("analyze needs --arch or --model");
    }
    print_analysis(m, parse_count_mode(mode_str), parse_tree_mode(tree_mode_str), csv_path);
    return 0;
  }

  if (infer_cmd->parsed()) {
    HybridModel m = load_model(model_path);
    FeatureDataset d = load_features(data_path);
    PredictMode tm = parse_tree_mode(tree_mode_str);
    for (int64_t i = 0; i < d.size(); ++i) {
      Tensor s = model_scores(m, d.samples[static_cast<size_t>(i)], tm);
      std::printf("sample %lld: class %lld  scores", (long long)i, (long long)argmax(s));
      for (int64_t j = 0; j < s.size(); ++j) std::printf(" %.4f", s[j]);
      std::printf("\n");
    }
    if (count_ops_flag && d.size() > 0) {
      OpCounter counter;
      forward(m, d.samples[0], &counter, tm);
      std::printf("\nexecuted per sample: %lld muls, %lld adds, %lld macs\n",
                  (long long)counter.muls, (long long)counter.adds, (long long)counter.macs);
    }
    return 0;
  }

  if (eval_cmd->parsed()) {
    HybridModel m = load_model(model_path);
    FeatureDataset d = load_features(data_path);
    PredictMode tm = parse_tree_mode(tree_mode_str);
    std::vector<std::vector<int64_t>> confusion(
        static_cast<size_t>(m.num_classes), std::vector<int64_t>(static_cast<size_t>(m.num_classes), 0));
    int64_t hit = 0;
    for (int64_t i = 0; i < d.size(); ++i) {
      int64_t truth = d.labels[static_cast<size_t>(i)];
      int64_t pred = argmax(model_scores(m, d.samples[static_cast<size_t>(i)], tm));
      ++confusion[static_cast<size_t>(truth)][static_cast<size_t>(pred)];
      if (pred == truth) ++hit;
    }
    std::printf("accuracy %.2f%% (%lld/%lld)\n", 100.0 * hit / d.size(), (long long)hit,
                (long long)d.size());
    std::printf("confusion (rows = truth)\n");
    for (int64_t t = 0; t < m.num_classes; ++t) {
      for (int64_t p = 0; p < m.num_classes; ++p)
        std::printf("%6lld", (long long)confusion[static_cast<size_t>(t)][static_cast<size_t>(p)]);
      std::printf("\n");
    }
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {  // config, shape, state, policy
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}

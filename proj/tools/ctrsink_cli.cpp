// ctrsink: synthetic data, training, evaluation, attention probes and sweeps.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ctrsink/ctrsink.hpp"

namespace fs = std::filesystem;
using namespace ctrsink;

namespace {

constexpr int kRuntimeError = 1;
constexpr int kUsageError = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const std::map<std::string, SinkMode> kModes{
    {"none", SinkMode::none}, {"generic_sink", SinkMode::generic_sink}, {"info_sink", SinkMode::info_sink}};
const std::map<std::string, SignalKind> kSignals{
    {"temporal", SignalKind::temporal}, {"similarity", SignalKind::similarity}, {"random", SignalKind::random}};
const std::map<std::string, ArchMode> kArchs{{"bidirectional", ArchMode::bidirectional}, {"causal", ArchMode::causal}};
const std::map<std::string, Pooling> kPoolings{
    {"all_mean", Pooling::all_mean}, {"sink_mean", Pooling::sink_mean}, {"last_token", Pooling::last_token}};

struct TrainArgs {
  fs::path data, val, checkpoint, log;
  SinkMode mode = SinkMode::info_sink;
  SignalKind signal = SignalKind::temporal;
  ArchMode arch = ArchMode::bidirectional;
  std::optional<Pooling> pooling;
  bool two_stage = false;
  bool sink_bias = true;
  std::size_t epochs = 3;
  std::size_t stage1_epochs = 3;
  std::size_t k = 8;
  std::size_t d_model = 64, n_layers = 4, n_heads = 4, d_ff = 128;
  std::size_t sink_embed_dim = 32;
  std::size_t d_max = kDefaultDMax;
  std::size_t rep_dim = 32;
  std::size_t batch_size = 64;
  double dropout = 0.1;
  double lr = 1e-3;
  double warm_ratio = 0.05;
  double weight_decay = 0.01;
  std::uint64_t seed = 1;
};

void add_train_options(CLI::App* cmd, TrainArgs& a, bool sweep) {
  cmd->add_option("--data", a.data, "Training dataset (JSON lines)")->required()->check(CLI::ExistingFile);
  auto* val = cmd->add_option("--val", a.val, "Validation dataset")->check(CLI::ExistingFile);
  if (sweep) val->required();
  cmd->add_option("--mode", a.mode, "none | generic_sink | info_sink")
      ->transform(CLI::CheckedTransformer(kModes, CLI::ignore_case))
      ->capture_default_str();
  cmd->add_option("--signal", a.signal, "temporal | similarity | random")
      ->transform(CLI::CheckedTransformer(kSignals, CLI::ignore_case));
  cmd->add_option("--arch", a.arch, "bidirectional | causal")->transform(CLI::CheckedTransformer(kArchs, CLI::ignore_case));
  cmd->add_option("--pooling", a.pooling, "Final pooling (default: all_mean, last_token when causal)")
      ->transform(CLI::CheckedTransformer(kPoolings, CLI::ignore_case));
  cmd->add_option("--two_stage", a.two_stage, "Sink-only stage before full training (on/off)")
      ->capture_default_str();
  cmd->add_option("--sink_bias", a.sink_bias, "Sink-to-sink attention bias on every layer (on/off)")
      ->capture_default_str();
  cmd->add_option("--epochs", a.epochs, "Epochs (of stage 2 when two-stage)")->capture_default_str();
  cmd->add_option("--stage1_epochs", a.stage1_epochs, "Stage-1 epochs")->capture_default_str();
  cmd->add_option("--k", a.k, "Retrieved behaviors per sample")->capture_default_str();
  cmd->add_option("--d_model", a.d_model)->capture_default_str();
  cmd->add_option("--n_layers", a.n_layers)->capture_default_str();
  cmd->add_option("--n_heads", a.n_heads)->capture_default_str();
  cmd->add_option("--d_ff", a.d_ff)->capture_default_str();
  cmd->add_option("--sink_embed_dim", a.sink_embed_dim)->capture_default_str();
  cmd->add_option("--d_max", a.d_max, "Largest sink signal value")->capture_default_str();
  cmd->add_option("--rep_dim", a.rep_dim, "Retrieval representation width")->capture_default_str();
  cmd->add_option("--batch_size", a.batch_size)->capture_default_str();
  cmd->add_option("--dropout", a.dropout)->capture_default_str();
  cmd->add_option("--lr", a.lr, "Peak learning rate")->capture_default_str();
  cmd->add_option("--warm_ratio", a.warm_ratio)->capture_default_str();
  cmd->add_option("--weight_decay", a.weight_decay)->capture_default_str();
  cmd->add_option("--seed", a.seed)->capture_default_str();
}

void check_consistency(const TrainArgs& a) {
  if (a.two_stage && a.mode == SinkMode::none) throw UsageError("--two_stage on requires --mode generic_sink or info_sink");
  if (a.pooling == Pooling::sink_mean && a.mode == SinkMode::none) throw UsageError("--pooling sink_mean requires sinks");
  if (a.pooling == Pooling::last_token && a.arch != ArchMode::causal)
    throw UsageError("--pooling last_token requires --arch causal");
  if (a.epochs == 0) throw UsageError("--epochs must be at least 1");
  if (a.k == 0) throw UsageError("--k must be at least 1");
  if (a.n_heads == 0 || a.d_model % a.n_heads != 0) throw UsageError("--d_model must be divisible by --n_heads");
  if (a.warm_ratio <= 0.0 || a.warm_ratio >= 1.0) throw UsageError("--warm_ratio must lie in (0, 1)");
  if (a.dropout < 0.0 || a.dropout >= 1.0) throw UsageError("--dropout must lie in [0, 1)");
}

PipelineConfig pipeline_of(const TrainArgs& a) {
  PipelineConfig p;
  p.k = a.k;
  p.mode = a.mode;
  p.signal = a.mode == SinkMode::generic_sink ? SignalKind::generic : a.signal;
  p.d_max = a.d_max;
  p.rep_dim = a.rep_dim;
  return p;
}

ModelConfig model_config_of(const TrainArgs& a, const Vocab& vocab, std::size_t longest) {
  ModelConfig c;
  c.d_model = a.d_model;
  c.n_layers = a.n_layers;
  c.n_heads = a.n_heads;
  c.d_ff = a.d_ff;
  c.vocab_size = vocab.size();
  c.max_positions = std::max<std::size_t>(longest, 256);
  c.arch_mode = a.arch;
  c.sink_embed_dim = a.sink_embed_dim;
  c.d_max = a.d_max;
  c.dropout_p = a.dropout;
  c.pooling = a.pooling.value_or(a.arch == ArchMode::causal ? Pooling::last_token : Pooling::all_mean);
  if (a.sink_bias && a.mode != SinkMode::none) c.enable_bias_everywhere();
  return c;
}

std::size_t longest(const LabeledSequences& d) {
  std::size_t n = 0;
  for (const auto& s : d.sequences) n = std::max(n, s.size());
  return n;
}

struct TrainOutcome {
  Model<float> model;
  TrainingLog log;
  std::optional<Evaluation> val;
  nlohmann::json metadata;
};

TrainOutcome run_training(const TrainArgs& a) {
  const auto train_samples = read_dataset(a.data);
  if (train_samples.empty()) throw InvalidArgument("training data is empty: " + a.data.string());
  const auto vocab = vocab_from_samples(train_samples);
  const auto pc = pipeline_of(a);
  const auto rep = make_rep_table(vocab, pc.rep_dim, pc.rep_seed);
  const auto train = prepare_sequences(train_samples, pc, vocab, rep);
  std::optional<LabeledSequences> val;
  if (!a.val.empty()) val = prepare_sequences(read_dataset(a.val), pc, vocab, rep);
  std::size_t n_max = longest(train);
  if (val) n_max = std::max(n_max, longest(*val));

  TrainOutcome out{init_model<float>(model_config_of(a, vocab, n_max), a.seed), {}, std::nullopt, {}};
  StageConfig final_stage;
  final_stage.name = a.two_stage ? "stage2" : "single";
  final_stage.epochs = a.epochs;
  final_stage.peak_lr = a.lr;
  final_stage.warm_ratio = a.warm_ratio;
  final_stage.weight_decay = a.weight_decay;
  final_stage.batch_size = a.batch_size;
  final_stage.seed = a.seed;
  const LabeledSequences* vp = val ? &*val : nullptr;
  if (a.two_stage) {
    TwoStageConfig ts;
    ts.stage1 = final_stage;
    ts.stage1.name = "stage1";
    ts.stage1.epochs = a.stage1_epochs;
    ts.stage1.seed = a.seed + 1;
    ts.stage2 = final_stage;
    out.log = two_stage_train(out.model, train, vp, ts);
  } else {
    out.log = train_stage(out.model, train, vp, final_stage);
  }
  if (vp) out.val = evaluate(out.model, *vp);
  out.metadata = {{"vocab", vocab.tokens()}, {"pipeline", pc}, {"seed", a.seed}, {"two_stage", a.two_stage}};
  return out;
}

struct Loaded {
  Model<float> model;
  Vocab vocab;
  PipelineConfig pipeline;
};

Loaded load(const fs::path& path) {
  auto ck = load_checkpoint<float>(path);
  try {
    auto vocab = Vocab::from_tokens(ck.metadata.at("vocab").get<std::vector<std::string>>());
    auto pc = ck.metadata.at("pipeline").get<PipelineConfig>();
    if (vocab.size() != ck.model.config.vocab_size)
      throw IoError("checkpoint vocabulary size differs from its model config");
    return {std::move(ck.model), std::move(vocab), pc};
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint lacks pipeline metadata: " + std::string(e.what()));
  }
}

LabeledSequences prepare_for(const Loaded& l, const fs::path& data) {
  const auto rep = make_rep_table(l.vocab, l.pipeline.rep_dim, l.pipeline.rep_seed);
  auto seqs = prepare_sequences(read_dataset(data), l.pipeline, l.vocab, rep);
  if (seqs.size() == 0) throw InvalidArgument("dataset is empty: " + data.string());
  if (longest(seqs) > l.model.config.max_positions)
    throw InvalidArgument("dataset sequences exceed the checkpoint's max_positions");
  return seqs;
}

std::string fmt(double v) { return format_value(v); }

std::string auc_text(const std::optional<double>& a) { return a ? fmt(*a) : "null"; }

std::vector<std::size_t> parse_values(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v <= 0) throw std::invalid_argument(item);
      out.push_back(std::size_t(v));
    } catch (const std::exception&) {
      throw UsageError("--values: '" + item + "' is not a positive integer");
    }
  }
  if (out.empty()) throw UsageError("--values must list at least one value");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CTR-Sink transformer lab"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML config file; flags override it");

  // synth
  SynthParams sp;
  std::uint64_t synth_seed = 7;
  fs::path synth_out;
  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset");
  synth->add_option("--out", synth_out, "Output path")->required();
  synth->add_option("--seed", synth_seed)->capture_default_str();
  synth->add_option("--n_users", sp.n_users)->capture_default_str();
  synth->add_option("--history_len", sp.history_len)->capture_default_str();
  synth->add_option("--n_categories", sp.n_categories)->capture_default_str();
  synth->add_option("--items_per_category", sp.items_per_category)->capture_default_str();
  synth->add_option("--recency_window", sp.recency_window)->capture_default_str();
  synth->add_option("--p_hit", sp.p_hit)->capture_default_str();
  synth->add_option("--p_miss", sp.p_miss)->capture_default_str();

  // train
  TrainArgs targs;
  auto* train = app.add_subcommand("train", "Train a model; prints the training log");
  add_train_options(train, targs, false);
  train->add_option("--checkpoint", targs.checkpoint, "Write the trained model here");
  train->add_option("--log", targs.log, "Write the training log here instead of stdout");

  // eval
  fs::path eval_ckpt, eval_data, eval_scores;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data)->required()->check(CLI::ExistingFile);
  eval->add_option("--scores", eval_scores, "Write per-sample logits here");

  // probe
  fs::path probe_ckpt, probe_data, probe_out;
  std::size_t probe_limit = 200, probe_heatmaps = 2;
  auto* probe = app.add_subcommand("probe", "Attention diagnostics: metrics, layer profile, heatmaps");
  probe->add_option("--checkpoint", probe_ckpt)->required()->check(CLI::ExistingFile);
  probe->add_option("--data", probe_data)->required()->check(CLI::ExistingFile);
  probe->add_option("--out", probe_out, "Output directory")->required();
  probe->add_option("--limit", probe_limit, "Samples probed")->capture_default_str();
  probe->add_option("--heatmaps", probe_heatmaps, "Samples exported as heatmaps")->capture_default_str();

  // sweep
  TrainArgs sargs;
  std::string axis, values_text;
  fs::path sweep_out;
  auto* sweep = app.add_subcommand("sweep", "Train and evaluate once per axis value");
  add_train_options(sweep, sargs, true);
  sweep->add_option("--axis", axis, "sink_embed_dim | k")->required()->check(CLI::IsMember({"sink_embed_dim", "k"}));
  sweep->add_option("--values", values_text, "Comma-separated values, e.g. 32,64,128,256")->required();
  sweep->add_option("--out", sweep_out, "Write the results table here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (*synth) {
      try {
        validate(sp);
      } catch (const InvalidArgument& e) {
        throw UsageError(e.what());
      }
      const auto samples = synth_dataset(sp, synth_seed);
      if (samples.empty()) std::cerr << "warning: n_users is 0; writing an empty dataset\n";
      write_dataset(synth_out, samples);
    } else if (*train) {
      check_consistency(targs);
      auto res = run_training(targs);
      if (targs.log.empty()) {
        write_training_log(std::cout, res.log);
      } else {
        std::ofstream log(targs.log);
        if (!log) throw IoError("cannot write log " + targs.log.string());
        write_training_log(log, res.log);
      }
      if (!targs.checkpoint.empty()) save_checkpoint(targs.checkpoint, res.model, res.metadata);
      if (res.val) std::cerr << "final validation AUC " << auc_text(res.val->auc) << '\n';
    } else if (*eval) {
      const auto l = load(eval_ckpt);
      const auto data = prepare_for(l, eval_data);
      const auto ev = evaluate(l.model, data);
      nlohmann::ordered_json j;
      j["n"] = data.size();
      j["auc"] = ev.auc ? nlohmann::ordered_json(*ev.auc) : nlohmann::ordered_json(nullptr);
      j["loss"] = ev.mean_loss;
      std::cout << j.dump() << '\n';
      if (!eval_scores.empty()) {
        std::ofstream out(eval_scores);
        if (!out) throw IoError("cannot write scores " + eval_scores.string());
        out << "index,label,logit\n";
        for (std::size_t i = 0; i < data.size(); ++i) out << i << ',' << data.labels[i] << ',' << fmt(ev.scores[i]) << '\n';
      }
    } else if (*probe) {
      const auto l = load(probe_ckpt);
      const auto data = prepare_for(l, probe_data);
      fs::create_directories(probe_out);
      std::ofstream metrics(probe_out / "metrics.csv");
      if (!metrics) throw IoError("cannot write into " + probe_out.string());
      write_metrics_header(metrics);
      std::vector<std::vector<LayerProfile>> profiles;
      ForwardOptions opt;
      opt.capture = true;
      NoGradGuard no_grad;
      const std::size_t n = std::min(probe_limit, data.size());
      for (std::size_t i = 0; i < n; ++i) {
        const auto res = forward(l.model, data.sequences[i], opt);
        const auto& recs = res.records.at(0);
        write_metrics_rows(metrics, std::to_string(i), recs);
        profiles.push_back(layerwise_profile(recs));
        if (i < probe_heatmaps)
          for (const auto& r : recs)
            export_heatmap(r.matrix,
                           probe_out / ("heatmap_s" + std::to_string(i) + "_l" + std::to_string(r.layer) + "_h" +
                                        std::to_string(r.head) + ".pgm"),
                           r.sink_positions);
      }
      const auto summary = summarize_profiles(profiles);
      std::ofstream prof(probe_out / "profile.csv");
      write_layer_summary(prof, summary);
      write_layer_summary(std::cout, summary);
    } else if (*sweep) {
      check_consistency(sargs);
      const auto values = parse_values(values_text);
      std::ostringstream table;
      table << "axis,value,val_auc,val_loss\n";
      for (auto v : values) {
        TrainArgs a = sargs;
        (axis == "k" ? a.k : a.sink_embed_dim) = v;
        check_consistency(a);
        const auto res = run_training(a);
        table << axis << ',' << v << ',' << auc_text(res.val->auc) << ',' << fmt(res.val->mean_loss) << '\n';
        std::cerr << axis << '=' << v << " done\n";
      }
      if (sweep_out.empty()) {
        std::cout << table.str();
      } else {
        std::ofstream out(sweep_out);
        if (!out) throw IoError("cannot write " + sweep_out.string());
        out << table.str();
      }
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return 0;
}

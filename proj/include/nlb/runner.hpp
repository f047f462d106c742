#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <json.hpp>

#include "nlb/baselines.hpp"
#include "nlb/bayesopt.hpp"
#include "nlb/common.hpp"
#include "nlb/data.hpp"
#include "nlb/evalstats.hpp"
#include "nlb/slice.hpp"
#include "nlb/training.hpp"

// Experiment orchestration: model dispatch, tuned vs. default hyperparameters,
// slice on/off, JSONL persistence and the CSV/JSON emission layer.
namespace nlb::runner {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Model tags
// ---------------------------------------------------------------------------

enum class Family { Map, MapNl, RegNl, BnMlNl, BnBoNl, Mfvi, Mcd };

struct ModelTag {
  Family family;
  int layers;  // 1 or 2 hidden layers of 50 units
  std::string name;
};

inline ModelTag parse_model_tag(const std::string& tag) {
  static const std::vector<std::pair<std::string, Family>> kFamilies = {
      {"map-nl-", Family::MapNl},   {"reg-nl-", Family::RegNl},
      {"bn-ml-nl-", Family::BnMlNl}, {"bn-bo-nl-", Family::BnBoNl},
      {"mfvi-", Family::Mfvi},      {"mcd-", Family::Mcd},
      {"map-", Family::Map}};
  for (const auto& [prefix, family] : kFamilies) {
    if (tag.rfind(prefix, 0) == 0) {
      const std::string rest = tag.substr(prefix.size());
      if (rest == "1" || rest == "2")
        return {family, rest == "1" ? 1 : 2, tag};
    }
  }
  throw ConfigError("unknown model tag: " + tag);
}

inline std::vector<std::string> all_model_tags() {
  return {"map-1",      "map-2",      "map-nl-1",   "map-nl-2",
          "reg-nl-1",   "reg-nl-2",   "bn-ml-nl-1", "bn-ml-nl-2",
          "bn-bo-nl-1", "bn-bo-nl-2", "mfvi-1",     "mfvi-2",
          "mcd-1",      "mcd-2"};
}

inline std::vector<int> layer_sizes_for(const ModelTag& tag, Index input_dim) {
  std::vector<int> sizes{static_cast<int>(input_dim)};
  for (int l = 0; l < tag.layers; ++l) sizes.push_back(50);
  sizes.push_back(1);
  return sizes;
}

inline bool has_sampled_head(Family f) {
  return f == Family::MapNl || f == Family::RegNl || f == Family::BnMlNl ||
         f == Family::BnBoNl;
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::string model = "bn-ml-nl-1";
  std::string dataset = "toy";        // manifest name, or "toy"
  SplitKind split_kind = SplitKind::Standard;
  std::vector<int> split_indices;     // empty = all splits of the generator
  bool tune = true;
  bool slice = true;
  std::uint64_t seed = 0;
  int bo_random = 10;
  int bo_iters = 50;
  std::string data_dir;               // default: $NLB_DATA_DIR or ./data
  std::string out_dir = ".";
  int workers = 2;
  bool emit_toy_curves = false;       // write predictive curves on toy runs
  int baseline_steps = 25000;         // MFVI / MC-dropout gradient steps
};

inline json config_to_json(const ExperimentConfig& c) {
  return json{{"model", c.model},
              {"dataset", c.dataset},
              {"split_kind", c.split_kind == SplitKind::Standard ? "standard"
                             : c.split_kind == SplitKind::Gap    ? "gap"
                                                                 : "toy"},
              {"split_indices", c.split_indices},
              {"tune", c.tune},
              {"slice", c.slice},
              {"seed", c.seed},
              {"bo_random", c.bo_random},
              {"bo_iters", c.bo_iters},
              {"workers", c.workers}};
}

struct ResultRecord {
  std::string model;
  std::string dataset;
  std::string split_kind;
  int split_index = 0;
  std::uint64_t seed = 0;
  bool tuned = true;
  bool slice = true;
  bool failed = false;
  std::string error;
  double test_ll = 0.0, test_rmse = 0.0;
  double train_ll = 0.0, train_rmse = 0.0;
  double val_ll = std::numeric_limits<double>::quiet_NaN();
  // Metrics of the model trained on the tuning portion only (before the final
  // retrain on train+validation); NaN when no tuning phase ran.
  double pre_test_ll = std::numeric_limits<double>::quiet_NaN();
  double pre_test_rmse = std::numeric_limits<double>::quiet_NaN();
  json hyperparameters = json::object();
  json slice_summary = json::object();
  json bo_history = json::array();
  json network = json::object();  // trained MlpParams, flat tensors per layer
  double wall_seconds = 0.0;
  json config_echo = json::object();
};

// Flat per-layer serialization of the network parameters (row-major weights).
inline json params_to_json(const mlp::Params& p) {
  json layers = json::array();
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    const auto& w = p.weights[l];
    layers.push_back(
        {{"in", w.rows()},
         {"out", w.cols()},
         {"weights", std::vector<double>(w.data(), w.data() + w.size())},
         {"biases", std::vector<double>(p.biases[l].data(),
                                        p.biases[l].data() + p.biases[l].size())}});
  }
  return {{"layer_sizes", p.layer_sizes}, {"layers", layers}};
}

inline json record_to_json(const ResultRecord& r) {
  json j{{"library_version", kVersion},
         {"model", r.model},
         {"dataset", r.dataset},
         {"split_kind", r.split_kind},
         {"split_index", r.split_index},
         {"seed", r.seed},
         {"tuned", r.tuned},
         {"slice", r.slice},
         {"failed", r.failed},
         {"hyperparameters", r.hyperparameters},
         {"slice_summary", r.slice_summary},
         {"bo_history", r.bo_history},
         {"network", r.network},
         {"wall_seconds", r.wall_seconds},
         {"config", r.config_echo}};
  auto put = [&](const char* key, double v) {
    if (std::isfinite(v))
      j[key] = v;
    else
      j[key] = nullptr;
  };
  put("test_ll", r.test_ll);
  put("test_rmse", r.test_rmse);
  put("train_ll", r.train_ll);
  put("train_rmse", r.train_rmse);
  put("val_ll", r.val_ll);
  put("pre_test_ll", r.pre_test_ll);
  put("pre_test_rmse", r.pre_test_rmse);
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

inline ResultRecord record_from_json(const json& j) {
  ResultRecord r;
  try {
    r.model = j.at("model").get<std::string>();
    r.dataset = j.at("dataset").get<std::string>();
    r.split_kind = j.at("split_kind").get<std::string>();
    r.split_index = j.at("split_index").get<int>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.tuned = j.at("tuned").get<bool>();
    r.slice = j.at("slice").get<bool>();
    r.failed = j.at("failed").get<bool>();
    auto get_num = [&](const char* key) {
      return j.contains(key) && j.at(key).is_number()
                 ? j.at(key).get<double>()
                 : std::numeric_limits<double>::quiet_NaN();
    };
    r.test_ll = get_num("test_ll");
    r.test_rmse = get_num("test_rmse");
    r.train_ll = get_num("train_ll");
    r.train_rmse = get_num("train_rmse");
    r.val_ll = get_num("val_ll");
    r.pre_test_ll = get_num("pre_test_ll");
    r.pre_test_rmse = get_num("pre_test_rmse");
    if (j.contains("hyperparameters")) r.hyperparameters = j.at("hyperparameters");
    if (j.contains("slice_summary")) r.slice_summary = j.at("slice_summary");
    if (j.contains("bo_history")) r.bo_history = j.at("bo_history");
    if (j.contains("network")) r.network = j.at("network");
    if (j.contains("wall_seconds")) r.wall_seconds = j.at("wall_seconds").get<double>();
    if (j.contains("config")) r.config_echo = j.at("config");
    if (j.contains("error") && j.at("error").is_string())
      r.error = j.at("error").get<std::string>();
  } catch (const json::exception& e) {
    throw SchemaMismatch(std::string("record: ") + e.what());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Dataset resolution
// ---------------------------------------------------------------------------

inline std::string resolve_data_dir(const ExperimentConfig& c) {
  if (!c.data_dir.empty()) return c.data_dir;
  if (const char* env = std::getenv("NLB_DATA_DIR")) return env;
  return "data";
}

inline Dataset load_dataset(const ExperimentConfig& c) {
  const std::string dir = resolve_data_dir(c);
  const std::string manifest_path = dir + "/" + c.dataset + ".json";
  Manifest m = load_manifest(manifest_path);
  return load_csv(dir + "/" + m.path, m);
}

// ---------------------------------------------------------------------------
// Fitted artifacts and prediction
// ---------------------------------------------------------------------------

struct FittedMap {
  mlp::Params params;
  double sigma2;
};

struct FittedNl {
  mlp::Params params;
  HeadMixture head;
};

struct FittedMfvi {
  baselines::MfviParams params;
};

struct FittedMcd {
  baselines::McdParams params;
};

using Artifact = std::variant<FittedMap, FittedNl, FittedMfvi, FittedMcd>;

// Per-point predictive mixtures (standardized units) on a batch.
inline std::vector<PredictiveMixture> predict_batch(const Artifact& artifact,
                                                    const Matrix& x,
                                                    std::uint64_t predict_seed) {
  if (const auto* m = std::get_if<FittedMap>(&artifact)) {
    const Vector out = mlp::forward_output(m->params, x);
    std::vector<PredictiveMixture> mixtures;
    mixtures.reserve(x.rows());
    for (Index i = 0; i < x.rows(); ++i)
      mixtures.push_back(
          PredictiveMixture{std::vector<GaussianPredictive>{{out(i), m->sigma2}}});
    return mixtures;
  }
  if (const auto* m = std::get_if<FittedNl>(&artifact)) {
    const Matrix phi = mlp::forward_features(m->params, x);
    std::vector<PredictiveMixture> mixtures;
    mixtures.reserve(x.rows());
    for (Index i = 0; i < x.rows(); ++i)
      mixtures.push_back(head_predict(m->head, phi.row(i)));
    return mixtures;
  }
  if (const auto* m = std::get_if<FittedMfvi>(&artifact)) {
    Rng rng(derive_seed(predict_seed, {0x9dULL}));
    return baselines::mfvi_predict(m->params, x, 100, rng);
  }
  const auto& m = std::get<FittedMcd>(artifact);
  Rng rng(derive_seed(predict_seed, {0x9dULL}));
  return baselines::mcd_predict(m.params, x, 100, rng);
}

struct EvaluatedMetrics {
  double ll = 0.0;    // original units
  double rmse = 0.0;  // original units
};

inline EvaluatedMetrics evaluate(const Artifact& artifact, const Matrix& x_std,
                                 const Vector& y_std, const Standardizer& std_izer,
                                 std::uint64_t predict_seed) {
  const auto mixtures = predict_batch(artifact, x_std, predict_seed);
  std::vector<double> lds(mixtures.size()), preds(mixtures.size()),
      targets(mixtures.size());
  for (std::size_t i = 0; i < mixtures.size(); ++i) {
    const MixtureStats s = mixture_predict(mixtures[i], y_std(static_cast<Index>(i)));
    lds[i] = std_izer.ll_to_original(s.log_density);
    preds[i] = s.mean * std_izer.y_std + std_izer.y_mean;
    targets[i] = y_std(static_cast<Index>(i)) * std_izer.y_std + std_izer.y_mean;
  }
  const evalstats::Metrics m = evalstats::metrics(lds, preds, targets);
  return {m.avg_ll, m.rmse};
}

// ---------------------------------------------------------------------------
// Hyperparameter spaces and defaults
// ---------------------------------------------------------------------------

inline bo::SearchSpace search_space(const ModelTag& tag, Index n_train) {
  bo::SearchSpace space;
  switch (tag.family) {
    case Family::Map:
    case Family::MapNl:
      space.dims = {
          {"gamma_logvar", -5.0, 5.0, bo::Scale::Linear},
          {"lr_weights", 1e-4, 1e-2, bo::Scale::Log},
          {"lr_noise", 1e-4, 1e-2, bo::Scale::Log},
          {"epochs", 0.0, static_cast<double>(epochs_for_steps(n_train, 32)),
           bo::Scale::Linear}};
      break;
    case Family::RegNl:
      space.dims = {{"gamma_w_logvar", -10.0, 10.0, bo::Scale::Linear},
                    {"gamma_b_logvar", -10.0, 10.0, bo::Scale::Linear},
                    {"lr_theta", 1e-4, 1e-2, bo::Scale::Log},
                    {"lr_sigma", 1e-4, 1e-2, bo::Scale::Log},
                    {"epochs", 0.0, 5000.0, bo::Scale::Linear}};
      break;
    case Family::BnBoNl:
      space.dims = {{"a0", 0.0, 20.0, bo::Scale::Linear},
                    {"b0", 0.0, 10.0, bo::Scale::Linear},
                    {"log_alpha_w", -10.0, 10.0, bo::Scale::Linear},
                    {"log_alpha_b", -10.0, 10.0, bo::Scale::Linear},
                    {"lr", 1e-4, 1e-2, bo::Scale::Log},
                    {"epochs", 0.0, 5000.0, bo::Scale::Linear}};
      break;
    default:
      throw ConfigError("search_space: model family is not BO-tuned");
  }
  return space;
}

// "Reasonable" practitioner defaults for the untuned mode.
inline json default_hyperparameters(const ModelTag& tag, Index n_train) {
  switch (tag.family) {
    case Family::Map:
    case Family::MapNl:
      return {{"gamma", 0.5},
              {"lr_weights", 1e-3},
              {"lr_noise", 1e-3},
              {"epochs", epochs_for_steps(n_train, 32)}};
    case Family::RegNl:
      return {{"gamma_w", 0.5},
              {"gamma_b", 0.5},
              {"lr_theta", 1e-3},
              {"lr_sigma", 1e-3},
              {"epochs", 5000}};
    case Family::BnMlNl:
      return {{"a0", 1.0}, {"b0", 1.0},   {"alpha_w", 1.0}, {"alpha_b", 1.0},
              {"lr", 1e-3}, {"max_epochs", 5000}, {"optimize_prior", true}};
    case Family::BnBoNl:
      return {{"a0", 1.0}, {"b0", 1.0},   {"alpha_w", 1.0}, {"alpha_b", 1.0},
              {"lr", 1e-3}, {"max_epochs", 5000}, {"optimize_prior", false}};
    case Family::Mfvi:
      return {{"lr", 1e-3}, {"steps", 25000}, {"batch_size", 32}};
    case Family::Mcd:
      return {{"lr", 1e-3},
              {"steps", 25000},
              {"batch_size", 32},
              {"dropout_p", 0.05}};
  }
  throw ConfigError("default_hyperparameters: unreachable");
}

// ---------------------------------------------------------------------------
// Training dispatch
// ---------------------------------------------------------------------------

namespace detail {

// Train one NL-family model from a hyperparameter JSON on (train, val).
inline TrainedModel train_from_hypers(const ModelTag& tag, const json& h,
                                      const TrainData& train, const TrainData& val,
                                      const std::vector<int>& sizes,
                                      std::uint64_t seed) {
  switch (tag.family) {
    case Family::Map:
    case Family::MapNl: {
      MapConfig cfg;
      cfg.gamma = h.at("gamma").get<double>();
      cfg.lr_weights = h.at("lr_weights").get<double>();
      cfg.lr_noise = h.at("lr_noise").get<double>();
      cfg.epochs = h.at("epochs").get<int>();
      return train_map(train, val, cfg, sizes, seed);
    }
    case Family::RegNl: {
      RegConfig cfg;
      cfg.gamma_w = h.at("gamma_w").get<double>();
      cfg.gamma_b = h.at("gamma_b").get<double>();
      cfg.lr_theta = h.at("lr_theta").get<double>();
      cfg.lr_sigma = h.at("lr_sigma").get<double>();
      cfg.epochs = h.at("epochs").get<int>();
      return train_reg_nl(train, val, cfg, sizes, seed);
    }
    case Family::BnMlNl:
    case Family::BnBoNl: {
      BnConfig cfg;
      cfg.prior = NigPrior{h.at("alpha_w").get<double>(), h.at("alpha_b").get<double>(),
                           h.at("a0").get<double>(), h.at("b0").get<double>()};
      cfg.lr = h.at("lr").get<double>();
      cfg.max_epochs = h.at("max_epochs").get<int>();
      cfg.optimize_prior = h.at("optimize_prior").get<bool>();
      return train_bn(train, val, cfg, sizes, seed);
    }
    default:
      throw ConfigError("train_from_hypers: not an NL-family model");
  }
}

// Convert a BO point into the hyperparameter JSON of the family.
inline json hypers_from_point(const ModelTag& tag, const bo::SearchSpace& space,
                              const Vector& point) {
  json h;
  for (Index i = 0; i < space.size(); ++i) h[space.dims[i].name] = point(i);
  switch (tag.family) {
    case Family::Map:
    case Family::MapNl:
      return {{"gamma", gamma_from_log_variance(h.at("gamma_logvar").get<double>())},
              {"lr_weights", h.at("lr_weights")},
              {"lr_noise", h.at("lr_noise")},
              {"epochs", static_cast<int>(std::lround(h.at("epochs").get<double>()))}};
    case Family::RegNl:
      return {{"gamma_w", gamma_from_log_variance(h.at("gamma_w_logvar").get<double>())},
              {"gamma_b", gamma_from_log_variance(h.at("gamma_b_logvar").get<double>())},
              {"lr_theta", h.at("lr_theta")},
              {"lr_sigma", h.at("lr_sigma")},
              {"epochs", static_cast<int>(std::lround(h.at("epochs").get<double>()))}};
    case Family::BnBoNl:
      // a0, b0 ranges include 0; an improper prior has no evidence, so floor.
      return {{"a0", std::max(h.at("a0").get<double>(), 1e-3)},
              {"b0", std::max(h.at("b0").get<double>(), 1e-3)},
              {"alpha_w", std::exp(h.at("log_alpha_w").get<double>())},
              {"alpha_b", std::exp(h.at("log_alpha_b").get<double>())},
              {"lr", h.at("lr")},
              {"max_epochs", static_cast<int>(std::lround(h.at("epochs").get<double>()))},
              {"optimize_prior", false}};
    default:
      throw ConfigError("hypers_from_point: not a BO-tuned family");
  }
}

inline Artifact artifact_from(const ModelTag& tag, const TrainedModel& model,
                              const TrainData& train, bool slice_enabled,
                              std::uint64_t slice_seed, json* slice_summary) {
  if (tag.family == Family::Map) {
    return FittedMap{model.params, std::get<GaussianHead>(model.head).prior.sigma2};
  }
  const Matrix phi = mlp::forward_features(model.params, train.x);
  const SuffStats stats = suff_stats(phi, train.y);
  SliceConfig cfg;  // defaults: 200 samples, 20 burn-in, unit step
  Rng rng(slice_seed);
  HeadMixture head = std::holds_alternative<GaussianHead>(model.head)
      ? (slice_enabled
             ? HeadMixture{slice_marginalize(
                   stats, std::get<GaussianHead>(model.head).prior, cfg, rng)}
             : HeadMixture{point_head(stats, std::get<GaussianHead>(model.head).prior)})
      : (slice_enabled
             ? HeadMixture{slice_marginalize(stats, std::get<NigHead>(model.head).prior,
                                             cfg, rng)}
             : HeadMixture{point_head(stats, std::get<NigHead>(model.head).prior)});
  if (slice_summary) {
    const SliceSummary& s = std::visit([](const auto& h) -> const SliceSummary& {
      return h.summary;
    }, head);
    json summary = json::object();
    for (std::size_t i = 0; i < s.names.size(); ++i)
      summary[s.names[i]] = {{"mean", s.mean(static_cast<Index>(i))},
                             {"std", s.stddev(static_cast<Index>(i))}};
    *slice_summary = std::move(summary);
  }
  return FittedNl{model.params, std::move(head)};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// One experiment cell (dataset x split x model)
// ---------------------------------------------------------------------------

struct CellInputs {
  TrainData train_full;  // standardized training rows (train + validation)
  TrainData test;        // standardized test rows
  Standardizer standardizer;
  int val_denominator = 5;  // toy uses 2
};

inline CellInputs prepare_cell(const Dataset& ds, const Split& split) {
  Dataset train = subset(ds, split.train);
  Dataset test = subset(ds, split.test);
  CellInputs cell;
  cell.standardizer = Standardizer::fit(train.x, train.y);
  cell.train_full = {cell.standardizer.apply_x(train.x),
                     cell.standardizer.apply_y(train.y)};
  cell.test = {cell.standardizer.apply_x(test.x), cell.standardizer.apply_y(test.y)};
  return cell;
}

inline ResultRecord run_cell(const ExperimentConfig& config, const ModelTag& tag,
                             const CellInputs& cell, int split_index) {
  const auto t0 = std::chrono::steady_clock::now();
  ResultRecord rec;
  rec.model = tag.name;
  rec.dataset = config.dataset;
  rec.split_kind = config.split_kind == SplitKind::Standard ? "standard"
                   : config.split_kind == SplitKind::Gap    ? "gap"
                                                            : "toy";
  rec.split_index = split_index;
  rec.seed = config.seed;
  rec.tuned = config.tune && tag.family != Family::Mfvi && tag.family != Family::Mcd;
  rec.slice = config.slice && has_sampled_head(tag.family);
  rec.config_echo = config_to_json(config);

  const std::uint64_t cell_seed =
      derive_seed(config.seed, {static_cast<std::uint64_t>(split_index)});
  const std::uint64_t tune_seed = derive_seed(cell_seed, {1});
  const std::uint64_t train_seed = derive_seed(cell_seed, {2});
  const std::uint64_t slice_seed = derive_seed(cell_seed, {3});
  const std::uint64_t predict_seed = derive_seed(cell_seed, {4});

  const std::vector<int> sizes = layer_sizes_for(tag, cell.train_full.x.cols());

  // Baselines: fixed hyperparameters, trained on the full training portion.
  if (tag.family == Family::Mfvi || tag.family == Family::Mcd) {
    rec.hyperparameters = default_hyperparameters(tag, cell.train_full.n());
    rec.hyperparameters["steps"] = config.baseline_steps;
    baselines::MfviConfig mfvi_cfg;
    mfvi_cfg.steps = config.baseline_steps;
    baselines::McdConfig mcd_cfg;
    mcd_cfg.steps = config.baseline_steps;
    Artifact artifact =
        tag.family == Family::Mfvi
            ? Artifact{FittedMfvi{baselines::mfvi_train(cell.train_full, sizes,
                                                        mfvi_cfg, train_seed)}}
            : Artifact{FittedMcd{baselines::mcd_train(cell.train_full, sizes,
                                                      mcd_cfg, train_seed)}};
    const EvaluatedMetrics test_m =
        evaluate(artifact, cell.test.x, cell.test.y, cell.standardizer, predict_seed);
    const EvaluatedMetrics train_m =
        evaluate(artifact, cell.train_full.x, cell.train_full.y, cell.standardizer,
                 derive_seed(predict_seed, {1}));
    rec.test_ll = test_m.ll;
    rec.test_rmse = test_m.rmse;
    rec.train_ll = train_m.ll;
    rec.train_rmse = train_m.rmse;
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
  }

  // NL families: optional tuning on a held-out validation split, then a final
  // retrain on train+validation with the chosen settings. The untuned mode is
  // the practitioner's fixed recipe: no validation split, no early stopping,
  // the default epoch budget run to the end.
  json chosen;
  std::optional<TrainedModel> tuned_model;  // trained on train minus validation
  auto [train_part, val_part] =
      split_validation(cell.train_full, tune_seed, cell.val_denominator);

  if (rec.tuned) {
    if (tag.family == Family::BnMlNl) {
      BnConfig cfg;  // unit prior, optimize_prior = true
      auto [model, lr] = select_lr_grid(train_part, val_part, cfg, sizes, tune_seed);
      chosen = default_hyperparameters(tag, cell.train_full.n());
      chosen["lr"] = lr;
      chosen["max_epochs"] = model.stats.best_epoch;
      rec.val_ll = model.stats.val_ll;
      tuned_model = std::move(model);
    } else {
      const bo::SearchSpace space = search_space(tag, train_part.n());
      auto objective = [&](const Vector& point) {
        const json h = detail::hypers_from_point(tag, space, point);
        TrainedModel m =
            detail::train_from_hypers(tag, h, train_part, val_part, sizes, tune_seed);
        return m.stats.val_ll;
      };
      bo::BoResult res =
          bo::maximize(objective, space, config.bo_random, config.bo_iters, tune_seed);
      if (!std::isfinite(res.best_value))
        throw NonFiniteObjective("tuning failed on every evaluation");
      chosen = detail::hypers_from_point(tag, space, res.best_point);
      rec.val_ll = res.best_value;
      for (const auto& e : res.history) {
        json pt = json::object();
        for (Index i = 0; i < space.size(); ++i) pt[space.dims[i].name] = e.point(i);
        rec.bo_history.push_back({{"point", pt},
                                  {"val_ll", e.failed ? json(nullptr) : json(e.value)},
                                  {"seconds", e.seconds}});
      }
      tuned_model =
          detail::train_from_hypers(tag, chosen, train_part, val_part, sizes, tune_seed);
      if (tag.family == Family::BnBoNl)
        chosen["max_epochs"] = tuned_model->stats.best_epoch;
    }
  } else {
    chosen = default_hyperparameters(tag, cell.train_full.n());
  }

  if (tuned_model) {
    // Metrics of the pre-retrain model (fit on the tuning portion only),
    // recorded alongside the retrained model's metrics.
    json pre_summary;
    Artifact pre = detail::artifact_from(tag, *tuned_model, train_part, rec.slice,
                                         derive_seed(slice_seed, {1}), &pre_summary);
    const EvaluatedMetrics pre_m =
        evaluate(pre, cell.test.x, cell.test.y, cell.standardizer, predict_seed);
    rec.pre_test_ll = pre_m.ll;
    rec.pre_test_rmse = pre_m.rmse;
  }

  // Final model on train+validation with the chosen settings (no early
  // stopping left: the epoch budget is part of the settings).
  TrainedModel final_model = detail::train_from_hypers(
      tag, chosen, cell.train_full, TrainData{Matrix(0, cell.train_full.x.cols()), Vector(0)},
      sizes, train_seed);

  Artifact artifact = detail::artifact_from(tag, final_model, cell.train_full,
                                            rec.slice, slice_seed, &rec.slice_summary);
  rec.hyperparameters = chosen;
  rec.network = params_to_json(final_model.params);
  if (const auto* head = std::get_if<GaussianHead>(&final_model.head)) {
    rec.hyperparameters["alpha_w"] = head->prior.alpha_w;
    rec.hyperparameters["alpha_b"] = head->prior.alpha_b;
    rec.hyperparameters["sigma2"] = head->prior.sigma2;
  } else if (const auto* nig = std::get_if<NigHead>(&final_model.head)) {
    rec.hyperparameters["alpha_w"] = nig->prior.alpha_w;
    rec.hyperparameters["alpha_b"] = nig->prior.alpha_b;
    rec.hyperparameters["a0"] = nig->prior.a0;
    rec.hyperparameters["b0"] = nig->prior.b0;
  }

  const EvaluatedMetrics test_m =
      evaluate(artifact, cell.test.x, cell.test.y, cell.standardizer, predict_seed);
  const EvaluatedMetrics train_m = evaluate(
      artifact, cell.train_full.x, cell.train_full.y, cell.standardizer,
      derive_seed(predict_seed, {1}));
  rec.test_ll = test_m.ll;
  rec.test_rmse = test_m.rmse;
  rec.train_ll = train_m.ll;
  rec.train_rmse = train_m.rmse;

  // Toy predictive curves: grid over [-6, 6] in original input units.
  if (config.emit_toy_curves && config.dataset == "toy") {
    std::filesystem::create_directories(config.out_dir);
    std::ofstream out(config.out_dir + "/toy_curve_" + tag.name + ".csv");
    out << "x,mean,std\n";
    const int n_grid = 241;
    Matrix grid(n_grid, 1);
    for (int i = 0; i < n_grid; ++i) grid(i, 0) = -6.0 + 0.05 * i;
    const Matrix grid_std = cell.standardizer.apply_x(grid);
    const auto mixtures = predict_batch(artifact, grid_std, predict_seed);
    for (int i = 0; i < n_grid; ++i) {
      const MixtureStats s = mixture_predict(mixtures[i], 0.0);
      out << grid(i, 0) << ',' << s.mean * cell.standardizer.y_std + cell.standardizer.y_mean
          << ',' << std::sqrt(s.variance) * cell.standardizer.y_std << '\n';
    }
  }

  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

// ---------------------------------------------------------------------------
// Experiment driver
// ---------------------------------------------------------------------------

inline std::vector<Split> splits_for(const ExperimentConfig& config, const Dataset& ds,
                                     int n_splits_manifest) {
  switch (config.split_kind) {
    case SplitKind::Standard:
      return standard_splits(ds.n(), n_splits_manifest, 0.1, config.seed);
    case SplitKind::Gap:
      return gap_splits(ds.x);
    case SplitKind::Toy:
      return {};  // toy generates its own train/test pair
  }
  return {};
}

inline ResultRecord failed_record(const ExperimentConfig& config, const ModelTag& tag,
                                  int split_index, const std::string& message) {
  ResultRecord rec;
  rec.model = tag.name;
  rec.dataset = config.dataset;
  rec.split_kind = config.split_kind == SplitKind::Standard ? "standard"
                   : config.split_kind == SplitKind::Gap    ? "gap"
                                                            : "toy";
  rec.split_index = split_index;
  rec.seed = config.seed;
  rec.tuned = config.tune;
  rec.slice = config.slice;
  rec.failed = true;
  rec.error = message;
  rec.test_ll = rec.test_rmse = rec.train_ll = rec.train_rmse =
      std::numeric_limits<double>::quiet_NaN();
  rec.config_echo = config_to_json(config);
  return rec;
}

// Runs every requested split of one model/dataset cell. Per-split failures
// are recorded and do not stop the run; configuration errors abort up front.
inline std::vector<ResultRecord> run_experiment(const ExperimentConfig& config) {
  const ModelTag tag = parse_model_tag(config.model);

  struct Task {
    int split_index;
    CellInputs cell;
  };
  std::vector<Task> tasks;

  if (config.dataset == "toy" || config.split_kind == SplitKind::Toy) {
    auto [train, test] = toy_dataset(config.seed);
    CellInputs cell;
    cell.standardizer = Standardizer::fit(train.x, train.y);
    cell.train_full = {cell.standardizer.apply_x(train.x),
                       cell.standardizer.apply_y(train.y)};
    cell.test = {cell.standardizer.apply_x(test.x), cell.standardizer.apply_y(test.y)};
    cell.val_denominator = 2;  // toy: half the training set for validation
    tasks.push_back({0, std::move(cell)});
  } else {
    const std::string dir = resolve_data_dir(config);
    const Manifest manifest = load_manifest(dir + "/" + config.dataset + ".json");
    const Dataset ds = load_csv(dir + "/" + manifest.path, manifest);
    const std::vector<Split> splits = splits_for(config, ds, manifest.n_splits);
    std::vector<int> indices = config.split_indices;
    if (indices.empty()) {
      indices.resize(splits.size());
      std::iota(indices.begin(), indices.end(), 0);
    }
    for (int idx : indices) {
      if (idx < 0 || idx >= static_cast<int>(splits.size()))
        throw ConfigError("split index " + std::to_string(idx) + " out of range (" +
                          std::to_string(splits.size()) + " splits)");
      tasks.push_back({idx, prepare_cell(ds, splits[idx])});
    }
  }

  std::vector<ResultRecord> records(tasks.size());
  std::mutex mu;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t mine;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= tasks.size()) return;
        mine = next++;
      }
      const Task& task = tasks[mine];
      ResultRecord rec;
      try {
        rec = run_cell(config, tag, task.cell, task.split_index);
      } catch (const Error& e) {
        rec = failed_record(config, tag, task.split_index, e.what());
      }
      records[mine] = std::move(rec);
    }
  };
  const int n_workers =
      std::max(1, std::min<int>(config.workers, static_cast<int>(tasks.size())));
  std::vector<std::thread> pool;
  for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  return records;
}

// Append records to a JSONL file (one record per line).
inline void write_records(const std::vector<ResultRecord>& records,
                          const std::string& path) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot open for append: " + path);
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
}

inline std::vector<ResultRecord> read_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open records file: " + path);
  std::vector<ResultRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    records.push_back(record_from_json(json::parse(line, nullptr, true)));
  }
  return records;
}

// ---------------------------------------------------------------------------
// Emission: tables, diffs, ranks
// ---------------------------------------------------------------------------

inline std::vector<evalstats::MetricRow> metric_rows(
    const std::vector<ResultRecord>& records) {
  std::vector<evalstats::MetricRow> rows;
  for (const auto& r : records) {
    if (r.failed) continue;
    evalstats::MetricRow row;
    row.dataset = r.dataset;
    row.model = r.model;
    row.tuned = r.tuned;
    row.slice_enabled = r.slice;
    row.split_index = r.split_index;
    row.seed = r.seed;
    row.test_ll = r.test_ll;
    row.test_rmse = r.test_rmse;
    row.train_ll = r.train_ll;
    row.train_rmse = r.train_rmse;
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void emit_tables(const std::vector<ResultRecord>& records,
                        const std::string& path) {
  auto table = evalstats::aggregate(metric_rows(records));
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "dataset,model,tuned,slice,n,test_ll,test_ll_stderr,test_rmse,"
         "test_rmse_stderr,train_ll,train_ll_stderr,train_rmse,train_rmse_stderr\n";
  for (const auto& t : table) {
    out << t.dataset << ',' << t.model << ',' << (t.tuned ? 1 : 0) << ','
        << (t.slice_enabled ? 1 : 0) << ',' << t.n << ',' << t.test_ll_mean << ','
        << t.test_ll_se << ',' << t.test_rmse_mean << ',' << t.test_rmse_se << ','
        << t.train_ll_mean << ',' << t.train_ll_se << ',' << t.train_rmse_mean << ','
        << t.train_rmse_se << '\n';
  }
}

// Differences across a boolean axis of the records ("tuned" or "slice"):
// rows with the flag set minus rows with it cleared, paired per cell.
inline void emit_diffs(const std::vector<ResultRecord>& records,
                       const std::string& axis, const std::string& path) {
  std::vector<evalstats::MetricRow> with, without;
  for (auto& row : metric_rows(records)) {
    const bool flag = axis == "tuned" ? row.tuned : row.slice_enabled;
    // The axis flag must not split the pairing key.
    evalstats::MetricRow keyed = row;
    keyed.tuned = axis == "tuned" ? true : row.tuned;
    keyed.slice_enabled = axis == "slice" ? true : row.slice_enabled;
    (flag ? with : without).push_back(keyed);
  }
  auto diffs = evalstats::paired_differences(with, without);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "dataset,model,n," << axis << "_ll_diff," << axis << "_ll_diff_stderr,"
      << axis << "_rmse_diff," << axis << "_rmse_diff_stderr\n";
  for (const auto& d : diffs)
    out << d.dataset << ',' << d.model << ',' << d.n << ',' << d.test_ll_diff_mean
        << ',' << d.test_ll_diff_se << ',' << d.test_rmse_diff_mean << ','
        << d.test_rmse_diff_se << '\n';
}

// Average-rank report over all (dataset, split) cells shared by every model.
inline json rank_report(const std::vector<ResultRecord>& records) {
  std::set<std::string> model_set;
  std::map<std::tuple<std::string, int, std::uint64_t>,
           std::map<std::string, std::pair<double, double>>>
      cells;
  for (const auto& r : records) {
    if (r.failed) continue;
    model_set.insert(r.model);
    cells[{r.dataset, r.split_index, r.seed}][r.model] = {r.test_ll, r.test_rmse};
  }
  const std::vector<std::string> models(model_set.begin(), model_set.end());
  const int k = static_cast<int>(models.size());
  std::vector<std::array<std::vector<double>, 2>> columns;  // [cell][metric][model]
  for (const auto& [key, per_model] : cells) {
    if (static_cast<int>(per_model.size()) != k) continue;  // incomplete cell
    std::array<std::vector<double>, 2> col;
    for (const auto& m : models) {
      col[0].push_back(per_model.at(m).first);
      col[1].push_back(per_model.at(m).second);
    }
    columns.push_back(std::move(col));
  }
  if (k < 2 || columns.size() < 2)
    throw PairingError("rank_report: need >= 2 models on >= 2 complete cells");

  json out;
  out["models"] = models;
  out["n_observations"] = columns.size();
  const char* metric_names[2] = {"test_ll", "test_rmse"};
  const bool higher_better[2] = {true, false};
  for (int metric = 0; metric < 2; ++metric) {
    Matrix values(k, static_cast<Index>(columns.size()));
    for (std::size_t c = 0; c < columns.size(); ++c)
      for (int m = 0; m < k; ++m) values(m, static_cast<Index>(c)) = columns[c][metric][m];
    const evalstats::RankReport rep =
        evalstats::friedman_ranks(values, higher_better[metric]);
    json jm;
    jm["average_ranks"] = rep.avg_ranks;
    jm["critical_difference"] = rep.critical_difference;
    jm["friedman_statistic"] = rep.friedman_stat;
    jm["groups"] = rep.groups;
    out[metric_names[metric]] = std::move(jm);
  }
  return out;
}

// Wilcoxon I/W/N verdicts per model between two runs, paired per cell.
inline json compare_runs(const std::vector<ResultRecord>& a,
                         const std::vector<ResultRecord>& b) {
  using Key = std::tuple<std::string, std::string, int, std::uint64_t>;
  std::map<Key, const ResultRecord*> bmap;
  for (const auto& r : b) {
    if (r.failed) continue;
    bmap[{r.dataset, r.model, r.split_index, r.seed}] = &r;
  }
  std::map<std::string, std::array<std::vector<double>, 4>> series;  // per model
  std::size_t matched = 0;
  for (const auto& r : a) {
    if (r.failed) continue;
    auto it = bmap.find({r.dataset, r.model, r.split_index, r.seed});
    if (it == bmap.end())
      throw PairingError("compare_runs: unmatched cell " + r.dataset + "/" + r.model +
                         "/split " + std::to_string(r.split_index));
    ++matched;
    auto& s = series[r.model];
    s[0].push_back(r.test_ll);
    s[1].push_back(it->second->test_ll);
    s[2].push_back(r.test_rmse);
    s[3].push_back(it->second->test_rmse);
  }
  if (matched != bmap.size())
    throw PairingError("compare_runs: records in b without a partner in a");

  json out = json::object();
  for (const auto& [model, s] : series) {
    // LL: higher is better. RMSE: lower is better, so swap the arguments.
    const evalstats::WilcoxonResult ll = evalstats::wilcoxon_signed_rank(s[0], s[1]);
    const evalstats::WilcoxonResult rmse = evalstats::wilcoxon_signed_rank(s[3], s[2]);
    out[model] = {{"ll", evalstats::to_string(ll.verdict)},
                  {"ll_p", ll.p_value},
                  {"rmse", evalstats::to_string(rmse.verdict)},
                  {"rmse_p", rmse.p_value}};
  }
  return out;
}

}  // namespace nlb::runner

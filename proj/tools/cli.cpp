#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sevdet/classifier/classifier.hpp"
#include "sevdet/error.hpp"
#include "sevdet/finegrain/finegrain.hpp"
#include "sevdet/image.hpp"
#include "sevdet/metrics/metrics.hpp"
#include "sevdet/nn/checkpoint.hpp"
#include "sevdet/pipeline/pipeline.hpp"
#include "sevdet/random.hpp"
#include "sevdet/synth/synth.hpp"
#include "sevdet/vae/vae.hpp"

namespace sevdet::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;
using nn::Tensor;

namespace {

/// Bad flags, config keys or values; exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Sub-seed streams derived from the global --seed.
constexpr std::uint64_t kVaeStream = 0x7661;
constexpr std::uint64_t kClassifierStream = 0x636c;
constexpr std::uint64_t kFinegrainStream = 0x6667;
constexpr std::uint64_t kMatchPlanStream = 0x6d70;

const std::vector<double> kDefaultTaus{0.99, 0.98, 0.95, 0.9, 0.85, 0.8, 0.7, 0.6, 0.5};

// ---------------------------------------------------------------------------
// Config files: a JSON object whose keys are the command's long flag names.

std::vector<std::string> json_values(const std::string& key, const Json& v) {
  if (v.is_string()) return {v.get<std::string>()};
  if (v.is_boolean()) return {v.get<bool>() ? "true" : "false"};
  if (v.is_number()) return {v.dump()};
  if (v.is_array()) {
    std::vector<std::string> out;
    for (const Json& e : v) {
      if (e.is_array() || e.is_object()) throw UsageError("config key '" + key + "': nested values are not allowed");
      const auto one = json_values(key, e);
      out.insert(out.end(), one.begin(), one.end());
    }
    return out;
  }
  throw UsageError("config key '" + key + "': unsupported value " + v.dump());
}

/// Fills options not given on the command line; flags win.
void apply_config(CLI::App& app, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const std::exception& e) {
    throw UsageError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw UsageError("config file '" + path + "' must hold a JSON object");
  for (const auto& [key, value] : j.items()) {
    CLI::Option* opt = key == "config" ? nullptr : app.get_option_no_throw("--" + key);
    if (opt == nullptr) {
      throw UsageError("config file '" + path + "': unknown key '" + key + "' for command '" + app.get_name() + "'");
    }
    if (opt->count() > 0) continue;
    for (const std::string& s : json_values(key, value)) opt->add_result(s);
    try {
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw UsageError("config key '" + key + "': " + e.what());
    }
  }
}

void require(const std::string& value, const std::string& flag) {
  if (value.empty()) throw UsageError("missing required option " + flag);
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::ofstream open_out(const fs::path& p) {
  ensure_parent(p);
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  return out;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out = open_out(p);
  out << text;
  if (!out) throw IoError("write failed for '" + p.string() + "'");
}

synth::Split parse_split_flag(const std::string& s) {
  const auto split = synth::parse_split(s);
  if (!split) throw UsageError("unknown split '" + s + "' (train, val, test)");
  return *split;
}

vae::Vae load_vae(const std::string& path) { return vae::Vae::from_checkpoint(nn::load_checkpoint(path)); }

classifier::Classifier load_classifier(const std::string& path) {
  return classifier::Classifier::from_checkpoint(nn::load_checkpoint(path));
}

finegrain::FinegrainModel load_finegrain(const std::string& path) {
  return finegrain::FinegrainModel::from_checkpoint(nn::load_checkpoint(path));
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string out;
  std::size_t image_size = 64;
  std::size_t train = 40;
  std::size_t val = 30;
  std::size_t test = 50;
  double noise = 0.04;
  double tint = 0.15;
  double patch_frac = 0.125;
  std::string match;
  std::size_t match_length = 3000;
  std::size_t match_events = 5;
};

void add_synth(CLI::App& app, SynthArgs& a) {
  app.add_option("--out", a.out, "Dataset output directory (required)");
  app.add_option("--image-size", a.image_size, "Rendered image side in pixels");
  app.add_option("--train", a.train, "Images per class in the train split");
  app.add_option("--val", a.val, "Images per class in the val split");
  app.add_option("--test", a.test, "Images per class in the test split");
  app.add_option("--noise", a.noise, "Per-pixel noise standard deviation");
  app.add_option("--tint", a.tint, "Per-channel illumination gain range");
  app.add_option("--patch-frac", a.patch_frac, "Card patch side as a fraction of the image side");
  app.add_option("--match", a.match, "Also render a planted match into this directory");
  app.add_option("--match-length", a.match_length, "Planted match length in frames");
  app.add_option("--match-events", a.match_events, "Number of planted events");
}

int cmd_synth(const SynthArgs& a, std::uint64_t seed, std::ostream& out) {
  require(a.out, "--out");
  synth::SynthSpec spec = synth::SynthSpec::uniform(seed, a.image_size, {a.train, a.val, a.test});
  spec.noise = a.noise;
  spec.tint = a.tint;
  spec.card_patch_frac = a.patch_frac;
  std::optional<synth::MatchPlan> plan;
  try {
    spec.validate();
    if (!a.match.empty()) plan = synth::random_match_plan(derive_seed(seed, kMatchPlanStream), a.match_length, a.match_events);
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  const synth::DatasetManifest m = synth::generate(spec, a.out);
  out << "wrote " << m.entries.size() << " images to " << a.out << '\n';
  if (plan) {
    synth::plant_match(spec, *plan, a.match);
    out << "wrote " << plan->length << "-frame match with " << plan->events.size() << " planted events to "
        << a.match << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainCommon {
  std::string data;
  std::string out;
  std::string metrics;
  std::size_t epochs = 20;
  std::size_t batch = 16;
  double lr = 1e-3;
  std::size_t image_size = 64;
};

void add_train_common(CLI::App& app, TrainCommon& a) {
  app.add_option("--data", a.data, "Dataset directory (required)");
  app.add_option("--out", a.out, "Checkpoint path (required)");
  app.add_option("--metrics", a.metrics, "Per-epoch CSV (default: <out>.metrics.csv)");
  app.add_option("--epochs", a.epochs, "Training epochs");
  app.add_option("--batch", a.batch, "Batch size");
  app.add_option("--lr", a.lr, "Adam learning rate");
  app.add_option("--image-size", a.image_size, "Model input side; images are resized on load");
}

struct TrainVaeArgs {
  TrainCommon common;
  std::size_t latent = 32;
};

struct TrainClassifierArgs {
  TrainCommon common;
  std::string taxonomy = "nine";
  bool no_augment = false;
};

struct TrainFinegrainArgs {
  TrainCommon common;
  double lambda = 0.5;
  std::size_t branches = 2;
  std::size_t feature_dim = 64;
  bool no_augment = false;
};

void check_common(const TrainCommon& a) {
  require(a.data, "--data");
  require(a.out, "--out");
  if (a.epochs == 0 || a.batch == 0) throw UsageError("--epochs and --batch must be positive");
  if (!(a.lr > 0.0)) throw UsageError("--lr must be positive");
}

std::string metrics_path(const TrainCommon& a) { return a.metrics.empty() ? a.out + ".metrics.csv" : a.metrics; }

std::vector<synth::LabeledImage> load_split(const synth::DatasetManifest& m, synth::Split split, std::size_t size,
                                            std::vector<synth::SynthClass> classes = {}) {
  synth::LoadOptions lo;
  lo.image_size = size;
  lo.classes = std::move(classes);
  return synth::load(m, split, lo);
}

std::vector<synth::SynthClass> event_classes() {
  std::vector<synth::SynthClass> out;
  for (ClassLabel c : kAllClassLabels) {
    if (is_event(c)) out.push_back(synth::to_synth(c));
  }
  return out;
}

void write_curves(const fs::path& path, std::vector<std::pair<std::string, std::vector<double>>> series) {
  std::ofstream os = open_out(path);
  metrics::write_curves_csv(os, series);
}

int cmd_train_vae(const TrainVaeArgs& a, std::uint64_t seed, std::ostream& out) {
  check_common(a.common);
  vae::VaeConfig cfg;
  cfg.input_size = a.common.image_size;
  cfg.latent_dim = a.latent;
  try {
    cfg.validate();
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  const auto m = synth::read_manifest(a.common.data);
  // The VAE only ever sees the seven event classes.
  const auto train = load_split(m, synth::Split::Train, cfg.input_size, event_classes());
  const auto val = load_split(m, synth::Split::Val, cfg.input_size, event_classes());
  vae::VaeTrainOptions opts;
  opts.epochs = a.common.epochs;
  opts.batch_size = a.common.batch;
  opts.adam.learning_rate = a.common.lr;
  opts.seed = derive_seed(seed, kVaeStream);
  const vae::VaeTrainResult r = vae::train_vae(cfg, train, val, opts);
  ensure_parent(a.common.out);
  nn::save_checkpoint(a.common.out, r.model.to_checkpoint());
  write_curves(metrics_path(a.common), {{"train_loss", r.train_loss}, {"val_loss", r.val_loss}});
  out << "vae: " << train.size() << " train images, val loss " << r.val_loss.front() << " -> " << r.val_loss.back()
      << ", saved " << a.common.out << '\n';
  return kExitOk;
}

int cmd_train_classifier(const TrainClassifierArgs& a, std::uint64_t seed, std::ostream& out) {
  check_common(a.common);
  classifier::ClassifierConfig cfg;
  cfg.input_size = a.common.image_size;
  if (a.taxonomy == "nine") {
    cfg.taxonomy = classifier::Taxonomy::Nine;
  } else if (a.taxonomy == "ten") {
    cfg.taxonomy = classifier::Taxonomy::Ten;
  } else {
    throw UsageError("--taxonomy must be 'nine' or 'ten'");
  }
  try {
    cfg.validate();
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  const auto m = synth::read_manifest(a.common.data);
  const auto train = load_split(m, synth::Split::Train, cfg.input_size);
  const auto val = load_split(m, synth::Split::Val, cfg.input_size);
  const bool nine = cfg.taxonomy == classifier::Taxonomy::Nine;
  const auto ts = nine ? classifier::nine_class_samples(train) : classifier::ten_class_samples(train);
  const auto vs = nine ? classifier::nine_class_samples(val) : classifier::ten_class_samples(val);
  classifier::TrainOptions opts;
  opts.epochs = a.common.epochs;
  opts.batch_size = a.common.batch;
  opts.adam.learning_rate = a.common.lr;
  opts.augment.enabled = !a.no_augment;
  // Same stream for both taxonomies so the two are trained identically.
  opts.seed = derive_seed(seed, kClassifierStream);
  const classifier::TrainResult r = classifier::train_classifier(cfg, ts, vs, opts);
  ensure_parent(a.common.out);
  nn::save_checkpoint(a.common.out, r.model.to_checkpoint());
  write_curves(metrics_path(a.common), {{"train_loss", r.train_loss}, {"val_accuracy", r.val_accuracy}});
  out << "classifier (" << a.taxonomy << "): " << ts.size() << " train images, val accuracy "
      << r.val_accuracy[r.best_epoch] << " at epoch " << r.best_epoch + 1 << ", saved " << a.common.out << '\n';
  return kExitOk;
}

int cmd_train_finegrain(const TrainFinegrainArgs& a, std::uint64_t seed, std::ostream& out) {
  check_common(a.common);
  finegrain::FinegrainConfig cfg;
  cfg.input_size = a.common.image_size;
  cfg.lambda_mamc = a.lambda;
  cfg.branches = a.branches;
  cfg.feature_dim = a.feature_dim;
  try {
    cfg.validate();
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  if (a.common.batch < 4 || a.common.batch % 2 != 0) throw UsageError("--batch must be even and at least 4");
  const auto m = synth::read_manifest(a.common.data);
  const std::vector<synth::SynthClass> cards{synth::SynthClass::YellowCard, synth::SynthClass::RedCard};
  const auto train = load_split(m, synth::Split::Train, cfg.input_size, cards);
  const auto val = load_split(m, synth::Split::Val, cfg.input_size, cards);
  const auto ts = finegrain::card_samples(train);
  const auto vs = finegrain::card_samples(val);
  finegrain::FinegrainTrainOptions opts;
  opts.epochs = a.common.epochs;
  opts.batch_size = a.common.batch;
  opts.adam.learning_rate = a.common.lr;
  opts.augment.enabled = !a.no_augment;
  opts.seed = derive_seed(seed, kFinegrainStream);
  const finegrain::FinegrainTrainResult r = finegrain::train_finegrain(cfg, ts, vs, opts);
  ensure_parent(a.common.out);
  nn::save_checkpoint(a.common.out, r.model.to_checkpoint());
  write_curves(metrics_path(a.common), {{"train_loss", r.train_loss}, {"val_accuracy", r.val_accuracy}});
  out << "finegrain: " << ts.size() << " train cards, val accuracy " << r.val_accuracy[r.best_epoch]
      << " at epoch " << r.best_epoch + 1 << ", saved " << a.common.out << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// sweep items shared by calibrate and sweep

struct GroupedImages {
  std::vector<synth::LabeledImage> images;  ///< event and pool images only
  std::vector<synth::TestGroup> groups;
};

GroupedImages grouped_split(const synth::DatasetManifest& m, synth::Split split) {
  GroupedImages g;
  for (auto& im : synth::load(m, split)) {
    const auto group = synth::test_group(im.cls);
    if (!group) continue;
    g.groups.push_back(*group);
    g.images.push_back(std::move(im));
  }
  return g;
}

std::vector<Tensor> resized_all(const std::vector<synth::LabeledImage>& v, std::size_t size) {
  std::vector<Tensor> out;
  for (const auto& im : v) out.push_back(resize_square(im.image, size));
  return out;
}

std::vector<const Tensor*> ptrs_of(const std::vector<Tensor>& v) {
  std::vector<const Tensor*> out;
  for (const auto& t : v) out.push_back(&t);
  return out;
}

std::vector<metrics::SweepItem> sweep_items(const GroupedImages& g, const std::vector<double>& losses,
                                            double vae_threshold, const classifier::Classifier& cls) {
  const std::vector<Tensor> in = resized_all(g.images, cls.config().input_size);
  const auto preds = classifier::predict_all(cls, ptrs_of(in));
  std::vector<metrics::SweepItem> items;
  for (std::size_t i = 0; i < g.images.size(); ++i) {
    metrics::SweepItem it{g.groups[i], std::nullopt, vae::gate_from_loss(losses[i], vae_threshold).accepted,
                          static_cast<NineClass>(preds[i].top_index), preds[i].top_prob};
    if (const auto label = g.images[i].label()) it.truth = merge_card_labels(*label);
    items.push_back(it);
  }
  return items;
}

void check_nine(const classifier::Classifier& cls) {
  if (cls.config().taxonomy != classifier::Taxonomy::Nine) {
    throw UsageError("the cascade needs a nine-class (merged card) classifier");
  }
}

void check_taus(const std::vector<double>& taus) {
  if (taus.empty()) throw UsageError("--taus needs at least one value");
  for (double t : taus) {
    if (!(t > 0.0 && t < 1.0)) throw UsageError("--taus values must lie in (0,1)");
  }
}

// ---------------------------------------------------------------------------
// calibrate

struct CalibrateArgs {
  std::string data;
  std::string vae;
  std::string classifier;
  std::string out;
  std::string report;
  std::string split = "val";
  std::vector<double> taus = kDefaultTaus;
};

int cmd_calibrate(const CalibrateArgs& a, std::ostream& out) {
  require(a.data, "--data");
  require(a.vae, "--vae");
  require(a.classifier, "--classifier");
  require(a.out, "--out");
  check_taus(a.taus);
  const synth::Split split = parse_split_flag(a.split);
  const vae::Vae v = load_vae(a.vae);
  const classifier::Classifier cls = load_classifier(a.classifier);
  check_nine(cls);

  const auto m = synth::read_manifest(a.data);
  const GroupedImages g = grouped_split(m, split);
  const std::vector<Tensor> vin = resized_all(g.images, v.config().input_size);
  const std::vector<double> losses = vae::image_losses(v, ptrs_of(vin));
  std::vector<double> in_losses, out_losses;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    if (g.groups[i] == synth::TestGroup::Event) in_losses.push_back(losses[i]);
    if (g.groups[i] == synth::TestGroup::NonSoccer) out_losses.push_back(losses[i]);
  }
  if (in_losses.empty() || out_losses.empty()) {
    throw InvalidArgument("calibrate: split '" + a.split + "' needs event and non-soccer images");
  }
  const vae::Calibration cal = vae::calibrate_threshold(in_losses, out_losses);
  const auto items = sweep_items(g, losses, cal.threshold, cls);
  const metrics::SweepReport sweep = metrics::threshold_sweep(items, a.taus);
  if (!sweep.best) throw InvalidArgument("calibrate: event F1 is undefined at every threshold");
  const double tau = sweep.rows[*sweep.best].threshold;

  const pipeline::PipelineConfig defaults;
  Json j;
  j["vae-threshold"] = cal.threshold;
  j["softmax-tau"] = tau;
  j["fps"] = defaults.fps;
  j["window"] = defaults.window;
  j["majority"] = defaults.majority;
  j["dedup-seconds"] = defaults.dedup_window_s;
  write_text(a.out, j.dump(2) + "\n");

  std::ostringstream rep;
  rep << vae::calibration_report(cal, in_losses, out_losses);
  rep << "\n# softmax threshold sweep (gate at " << cal.threshold << ")\n";
  metrics::write_sweep_table(rep, sweep);
  if (!a.report.empty()) write_text(a.report, rep.str());
  out << "vae threshold " << cal.threshold << " (balanced accuracy " << cal.balanced_accuracy << ")\n";
  metrics::write_sweep_table(out, sweep);
  out << "softmax tau " << tau << ", wrote " << a.out << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepArgs {
  std::string data;
  std::string vae;
  std::string classifier;
  std::string pipeline_config;
  double vae_threshold = 0.0;
  std::string split = "test";
  std::string csv;
  std::vector<double> taus = kDefaultTaus;
};

int cmd_sweep(const SweepArgs& a, std::ostream& out) {
  require(a.data, "--data");
  require(a.vae, "--vae");
  require(a.classifier, "--classifier");
  check_taus(a.taus);
  double threshold = a.vae_threshold;
  if (!(threshold > 0.0) && !a.pipeline_config.empty()) {
    std::ifstream in(a.pipeline_config);
    if (!in) throw UsageError("cannot open '" + a.pipeline_config + "'");
    try {
      threshold = Json::parse(in).at("vae-threshold").get<double>();
    } catch (const std::exception& e) {
      throw UsageError("'" + a.pipeline_config + "' has no usable vae-threshold: " + e.what());
    }
  }
  if (!(threshold > 0.0)) throw UsageError("--vae-threshold (or --pipeline) is required");
  const synth::Split split = parse_split_flag(a.split);
  const vae::Vae v = load_vae(a.vae);
  const classifier::Classifier cls = load_classifier(a.classifier);
  check_nine(cls);
  const auto m = synth::read_manifest(a.data);
  const GroupedImages g = grouped_split(m, split);
  const std::vector<Tensor> vin = resized_all(g.images, v.config().input_size);
  const auto losses = vae::image_losses(v, ptrs_of(vin));
  const metrics::SweepReport sweep = metrics::threshold_sweep(sweep_items(g, losses, threshold, cls), a.taus);
  metrics::write_sweep_table(out, sweep);
  if (!a.csv.empty()) {
    std::ofstream os = open_out(a.csv);
    metrics::write_sweep_csv(os, sweep);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// detect

struct DetectArgs {
  std::string frames;
  std::string vae;
  std::string classifier;
  std::string finegrain;
  std::string log;
  std::string trace;
  std::string ground_truth;
  std::size_t batch = 64;
  pipeline::PipelineConfig pipe;
};

int cmd_detect(const DetectArgs& a, std::ostream& out) {
  require(a.frames, "--frames");
  require(a.vae, "--vae");
  require(a.classifier, "--classifier");
  require(a.finegrain, "--finegrain");
  require(a.log, "--log");
  if (a.batch == 0) throw UsageError("--batch must be positive");
  try {
    a.pipe.validate();
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  if (!fs::is_directory(a.frames)) throw IoError("frames directory '" + a.frames + "' does not exist");
  const vae::Vae v = load_vae(a.vae);
  const classifier::Classifier cls = load_classifier(a.classifier);
  const finegrain::FinegrainModel fg = load_finegrain(a.finegrain);
  check_nine(cls);
  const pipeline::Models models{&v, &cls, &fg};

  std::vector<pipeline::FrameRecord> frames;
  const bool empty_dir = fs::is_empty(a.frames);
  if (!empty_dir) frames = pipeline::read_frame_manifest(a.frames);
  const pipeline::DetectionResult r = pipeline::run_detection(frames, models, a.pipe, a.batch);

  {
    std::ofstream os = open_out(a.log);
    pipeline::write_event_log(os, r.occurrences);
  }
  if (!a.trace.empty()) {
    std::ofstream os = open_out(a.trace);
    pipeline::write_trace(os, r);
  }
  out << frames.size() << " frames, " << r.tags.size() << " tags, " << r.occurrences.size() << " occurrences\n";
  for (const auto& [kind, n] : pipeline::occurrence_counts(r.occurrences)) out << to_string(kind) << '\t' << n << '\n';
  if (!a.ground_truth.empty()) {
    const auto planted = synth::read_ground_truth(a.ground_truth);
    const pipeline::DetectionScore s = pipeline::score_detection(r.occurrences, planted, a.pipe);
    out << "recovered " << s.recovered << "/" << s.planted << ", false occurrences " << s.false_occurrences
        << ", dedup violations " << s.dedup_violations << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string predictions;
  std::string truth;
  std::string data;
  std::string classifier;
  std::string finegrain;
  std::string split = "test";
  std::string predictions_out;
  std::string confusion_csv;
};

/// Report order for every label name a prediction file may contain.
const std::vector<std::string>& canonical_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (ClassLabel c : kAllClassLabels) {
      v.emplace_back(to_string(c));
      if (c == ClassLabel::YellowCard) v.emplace_back(to_string(NineClass::Card));
    }
    return v;
  }();
  return names;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

/// Reads `id -> label` from a CSV with a `frame_id` column and the first of
/// `label_columns` present.
std::map<std::string, std::string> read_label_csv(const std::string& path,
                                                  const std::vector<std::string>& label_columns) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw IoError("'" + path + "' is empty");
  const auto header = split_csv(line);
  const auto col = [&](const std::string& name) -> std::optional<std::size_t> {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto id_col = col("frame_id");
  std::optional<std::size_t> label_col;
  for (const auto& c : label_columns) {
    if ((label_col = col(c))) break;
  }
  if (!id_col || !label_col) throw IoError("'" + path + "' lacks a frame_id or label column");
  std::map<std::string, std::string> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size()) throw IoError("'" + path + "' line " + std::to_string(lineno) + ": wrong column count");
    if (!out.emplace(cells[*id_col], cells[*label_col]).second) {
      throw IoError("'" + path + "' line " + std::to_string(lineno) + ": duplicate frame_id '" + cells[*id_col] + "'");
    }
  }
  return out;
}

void report_labels(const std::vector<std::string>& truth, const std::vector<std::string>& pred, const EvalArgs& a,
                   std::ostream& out) {
  const auto& canon = canonical_names();
  std::vector<std::string> names;
  for (const auto& n : canon) {
    if (std::find(truth.begin(), truth.end(), n) != truth.end() || std::find(pred.begin(), pred.end(), n) != pred.end()) {
      names.push_back(n);
    }
  }
  const auto index = [&](const std::string& n) {
    const auto it = std::find(names.begin(), names.end(), n);
    if (it == names.end()) throw IoError("unknown class label '" + n + "'");
    return static_cast<std::size_t>(it - names.begin());
  };
  std::vector<std::size_t> t, p;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    t.push_back(index(truth[i]));
    p.push_back(index(pred[i]));
  }
  if (names.empty()) throw InvalidArgument("eval: no labelled items");
  const metrics::ConfusionMatrix cm = metrics::confusion_counts(t, p, names.size());
  metrics::write_class_report(out, cm, names);
  out << '\n';
  metrics::write_confusion_table(out, cm, names);
  if (!a.confusion_csv.empty()) {
    std::ofstream os = open_out(a.confusion_csv);
    metrics::write_confusion_csv(os, cm, names);
  }
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const bool file_mode = !a.predictions.empty() || !a.truth.empty();
  const bool data_mode = !a.data.empty() || !a.classifier.empty();
  if (file_mode == data_mode) {
    throw UsageError("eval needs either --predictions and --truth, or --data and --classifier");
  }
  std::vector<std::string> truth, pred;
  if (file_mode) {
    require(a.predictions, "--predictions");
    require(a.truth, "--truth");
    const auto p = read_label_csv(a.predictions, {"predicted", "top_class"});
    const auto t = read_label_csv(a.truth, {"class", "truth"});
    for (const auto& [id, label] : t) {
      const auto it = p.find(id);
      if (it == p.end()) throw IoError("no prediction for frame_id '" + id + "'");
      truth.push_back(label);
      pred.push_back(it->second);
    }
    if (p.size() != t.size()) throw IoError("predictions list frame ids absent from the ground truth");
  } else {
    require(a.data, "--data");
    require(a.classifier, "--classifier");
    const synth::Split split = parse_split_flag(a.split);
    const classifier::Classifier cls = load_classifier(a.classifier);
    std::optional<finegrain::FinegrainModel> fg;
    if (!a.finegrain.empty()) {
      check_nine(cls);
      fg = load_finegrain(a.finegrain);
    }
    const bool nine = cls.config().taxonomy == classifier::Taxonomy::Nine;
    const auto m = synth::read_manifest(a.data);
    std::vector<synth::LabeledImage> images;
    for (auto& im : synth::load(m, split)) {
      if (im.label()) images.push_back(std::move(im));
    }
    const std::vector<Tensor> in = resized_all(images, cls.config().input_size);
    const auto preds = classifier::predict_all(cls, ptrs_of(in));
    std::ofstream pred_os;
    if (!a.predictions_out.empty()) {
      pred_os = open_out(a.predictions_out);
      pred_os << "frame_id,truth,predicted,confidence\n";
    }
    for (std::size_t i = 0; i < images.size(); ++i) {
      const ClassLabel label = *images[i].label();
      std::string p(classifier::class_name(cls.config().taxonomy, preds[i].top_index));
      double confidence = preds[i].top_prob;
      if (fg && static_cast<NineClass>(preds[i].top_index) == NineClass::Card) {
        const finegrain::CardVerdict cv =
            finegrain::classify_card(*fg, resize_square(images[i].image, fg->config().input_size));
        p = std::string(to_string(finegrain::event_kind_of(cv.color)));
        confidence *= cv.confidence;
      }
      const std::string t = nine && !fg ? std::string(to_string(merge_card_labels(label))) : std::string(to_string(label));
      truth.push_back(t);
      pred.push_back(p);
      if (pred_os.is_open()) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.9f", confidence);
        pred_os << images[i].path << ',' << t << ',' << p << ',' << buf << '\n';
      }
    }
  }
  report_labels(truth, pred, a, out);
  return kExitOk;
}

// ---------------------------------------------------------------------------

void add_model_paths(CLI::App& app, std::string* vae, std::string* cls, std::string* fg) {
  if (vae) app.add_option("--vae", *vae, "VAE checkpoint");
  if (cls) app.add_option("--classifier", *cls, "Nine-class classifier checkpoint");
  if (fg) app.add_option("--finegrain", *fg, "Fine-grain card checkpoint");
}

struct Invocation {
  CLI::App* app;
  std::string config;
  std::function<int()> run;
};

}  // namespace

int run(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Soccer event detection: synthetic data, training, calibration, detection and evaluation", "sevdet"};
  app.require_subcommand(1);
  std::uint64_t seed = 1;
  app.add_option("--seed", seed, "Global seed; every stochastic component derives its own stream");

  // Options bind to Invocation::config, so the vector must never reallocate.
  std::vector<Invocation> invocations;
  invocations.reserve(8);
  const auto with_config = [&](CLI::App* sub, std::function<int()> fn) {
    invocations.push_back({sub, {}, std::move(fn)});
    sub->add_option("--config", invocations.back().config, "JSON file of flag values (flags win)");
  };

  SynthArgs synth_args;
  CLI::App* synth = app.add_subcommand("synth", "Render the synthetic dataset (and optionally a planted match)");
  add_synth(*synth, synth_args);
  with_config(synth, [&] { return cmd_synth(synth_args, seed, out); });

  CLI::App* train = app.add_subcommand("train", "Train one component");
  train->require_subcommand(1);
  TrainVaeArgs vae_args;
  CLI::App* train_vae = train->add_subcommand("vae", "Train the VAE gate on event images");
  add_train_common(*train_vae, vae_args.common);
  train_vae->add_option("--latent", vae_args.latent, "Latent dimension");
  with_config(train_vae, [&] { return cmd_train_vae(vae_args, seed, out); });

  TrainClassifierArgs cls_args;
  CLI::App* train_cls = train->add_subcommand("classifier", "Train the event classifier");
  add_train_common(*train_cls, cls_args.common);
  train_cls->add_option("--taxonomy", cls_args.taxonomy, "nine (merged card) or ten");
  train_cls->add_flag("--no-augment", cls_args.no_augment, "Disable augmentation");
  with_config(train_cls, [&] { return cmd_train_classifier(cls_args, seed, out); });

  TrainFinegrainArgs fg_args;
  fg_args.common.epochs = 60;
  CLI::App* train_fg = train->add_subcommand("finegrain", "Train the yellow/red card module");
  add_train_common(*train_fg, fg_args.common);
  train_fg->add_option("--lambda", fg_args.lambda, "Weight of the metric-learning term");
  train_fg->add_option("--branches", fg_args.branches, "Attention branches");
  train_fg->add_option("--feature-dim", fg_args.feature_dim, "Per-branch feature width");
  train_fg->add_flag("--no-augment", fg_args.no_augment, "Disable augmentation");
  with_config(train_fg, [&] { return cmd_train_finegrain(fg_args, seed, out); });

  CalibrateArgs cal_args;
  CLI::App* calibrate = app.add_subcommand("calibrate", "Pick the VAE threshold and softmax tau");
  calibrate->add_option("--data", cal_args.data, "Dataset directory");
  add_model_paths(*calibrate, &cal_args.vae, &cal_args.classifier, nullptr);
  calibrate->add_option("--out", cal_args.out, "Pipeline config JSON to write");
  calibrate->add_option("--report", cal_args.report, "Calibration report path");
  calibrate->add_option("--split", cal_args.split, "Split used for calibration");
  calibrate->add_option("--taus", cal_args.taus, "Softmax thresholds to sweep")->delimiter(',');
  with_config(calibrate, [&] { return cmd_calibrate(cal_args, out); });

  DetectArgs det_args;
  CLI::App* detect = app.add_subcommand("detect", "Run the cascade over a frame directory");
  detect->add_option("--frames", det_args.frames, "Directory with frames.txt and frame_%08d.ppm");
  add_model_paths(*detect, &det_args.vae, &det_args.classifier, &det_args.finegrain);
  detect->add_option("--log", det_args.log, "Event log (JSON lines)");
  detect->add_option("--trace", det_args.trace, "Per-frame verdict trace (JSON lines)");
  detect->add_option("--ground-truth", det_args.ground_truth, "Planted ground truth to score against");
  detect->add_option("--batch", det_args.batch, "Frames per inference batch");
  detect->add_option("--fps", det_args.pipe.fps, "Frames per second");
  detect->add_option("--window", det_args.pipe.window, "Vote window in frames (odd)");
  detect->add_option("--majority", det_args.pipe.majority, "Votes needed within the window");
  detect->add_option("--dedup-seconds", det_args.pipe.dedup_window_s, "Per-kind repeat suppression window");
  detect->add_option("--vae-threshold", det_args.pipe.vae_threshold, "Accept frames with VAE loss <= this");
  detect->add_option("--softmax-tau", det_args.pipe.softmax_tau, "Accept classes with probability > this");
  with_config(detect, [&] { return cmd_detect(det_args, out); });

  EvalArgs eval_args;
  CLI::App* eval = app.add_subcommand("eval", "Per-class precision/recall/F1 and confusion matrix");
  eval->add_option("--predictions", eval_args.predictions, "CSV with frame_id and predicted (or top_class)");
  eval->add_option("--truth", eval_args.truth, "CSV with frame_id and class");
  eval->add_option("--data", eval_args.data, "Dataset directory (predict instead of reading files)");
  add_model_paths(*eval, nullptr, &eval_args.classifier, &eval_args.finegrain);
  eval->add_option("--split", eval_args.split, "Split to evaluate in --data mode");
  eval->add_option("--predictions-out", eval_args.predictions_out, "Write the --data mode predictions here");
  eval->add_option("--confusion-csv", eval_args.confusion_csv, "Row-normalized confusion matrix CSV");
  with_config(eval, [&] { return cmd_eval(eval_args, out); });

  SweepArgs sweep_args;
  CLI::App* sweep = app.add_subcommand("sweep", "Softmax threshold sweep over the three test groups");
  sweep->add_option("--data", sweep_args.data, "Dataset directory");
  add_model_paths(*sweep, &sweep_args.vae, &sweep_args.classifier, nullptr);
  sweep->add_option("--vae-threshold", sweep_args.vae_threshold, "VAE gate threshold");
  sweep->add_option("--pipeline", sweep_args.pipeline_config, "Read the VAE threshold from a calibrate output");
  sweep->add_option("--split", sweep_args.split, "Split to sweep");
  sweep->add_option("--csv", sweep_args.csv, "Sweep CSV path");
  sweep->add_option("--taus", sweep_args.taus, "Softmax thresholds")->delimiter(',');
  with_config(sweep, [&] { return cmd_sweep(sweep_args, out); });

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n' << "run 'sevdet --help' for usage\n";
    return kExitUsage;
  }

  for (Invocation& inv : invocations) {
    if (!inv.app->parsed()) continue;
    try {
      if (!inv.config.empty()) apply_config(*inv.app, inv.config);
      return inv.run();
    } catch (const UsageError& e) {
      err << "usage error: " << e.what() << '\n';
      return kExitUsage;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return kExitFailure;
    }
  }
  err << "usage error: no command given\n";
  return kExitUsage;
}

}  // namespace sevdet::cli

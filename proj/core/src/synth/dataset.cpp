#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "sevdet/error.hpp"
#include "sevdet/image.hpp"
#include "sevdet/random.hpp"
#include "sevdet/synth/synth.hpp"

namespace sevdet::synth {

namespace fs = std::filesystem;
using nn::Tensor;

namespace {

constexpr std::array<std::string_view, kNumSynthClasses> kSynthNames{
    "PenaltyKick",  "CornerKick",      "FreeKick",         "Tackle",
    "ToSubstitute", "RedCard",         "YellowCard",       "CenterCircle",
    "LeftPenaltyArea", "RightPenaltyArea", "OtherSoccer", "NonSoccer"};

constexpr std::array<Split, 3> kSplits{Split::Train, Split::Val, Split::Test};

// Stream ids for seed derivation. Both card classes map to one id.
constexpr std::uint64_t kCardStream = 0xCA4D;
constexpr std::uint64_t kMatchStream = 0x3A7C;

std::uint64_t class_stream(SynthClass c) {
  if (c == SynthClass::RedCard || c == SynthClass::YellowCard) return kCardStream;
  return static_cast<std::uint64_t>(c) + 1;
}

std::string fmt_timestamp(double t) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", t);
  return buf;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find('\t', start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace

std::optional<ClassLabel> as_class_label(SynthClass c) {
  const auto i = static_cast<std::size_t>(c);
  if (i >= kNumClassLabels) return std::nullopt;
  return static_cast<ClassLabel>(i);
}

std::string_view to_string(SynthClass c) { return kSynthNames.at(static_cast<std::size_t>(c)); }

std::optional<SynthClass> parse_synth_class(std::string_view s) {
  for (std::size_t i = 0; i < kSynthNames.size(); ++i) {
    if (kSynthNames[i] == s) return static_cast<SynthClass>(i);
  }
  return std::nullopt;
}

std::optional<TestGroup> test_group(SynthClass c) {
  if (c == SynthClass::OtherSoccer) return TestGroup::OtherSoccer;
  if (c == SynthClass::NonSoccer) return TestGroup::NonSoccer;
  const auto label = as_class_label(c);
  if (label && is_event(*label)) return TestGroup::Event;
  return std::nullopt;
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

std::optional<Split> parse_split(std::string_view s) {
  for (Split sp : kSplits) {
    if (to_string(sp) == s) return sp;
  }
  return std::nullopt;
}

std::size_t SplitCounts::of(Split s) const {
  switch (s) {
    case Split::Train: return train;
    case Split::Val: return val;
    case Split::Test: return test;
  }
  return 0;
}

SynthSpec SynthSpec::uniform(std::uint64_t seed, std::size_t image_size, SplitCounts per_class) {
  SynthSpec spec;
  spec.seed = seed;
  spec.image_size = image_size;
  spec.counts.fill(per_class);
  return spec;
}

void SynthSpec::validate() const {
  if (image_size < 16) throw InvalidArgument("synth: image_size must be at least 16");
  for (std::size_t i = 0; i < kNumSynthClasses; ++i) {
    const SplitCounts& c = counts[i];
    if (c.train == 0 || c.val == 0 || c.test == 0) {
      throw InvalidArgument("synth: counts for " + std::string(kSynthNames[i]) +
                            " must be positive in every split");
    }
  }
  const auto side = std::lround(card_patch_frac * static_cast<double>(image_size));
  if (side < 1) throw InvalidArgument("synth: card patch is smaller than one pixel");
  if (static_cast<double>(side * side) > 0.04 * static_cast<double>(image_size * image_size)) {
    throw InvalidArgument("synth: card patch exceeds 4% of the image area");
  }
  if (yellow == red) throw InvalidArgument("synth: yellow and red patch colours are identical");
  if (!(noise >= 0.0 && noise <= 0.5)) throw InvalidArgument("synth: noise must be in [0,0.5]");
  if (!(tint >= 0.0 && tint < 0.5)) throw InvalidArgument("synth: tint must be in [0,0.5)");
}

std::uint64_t image_seed(const SynthSpec& spec, SynthClass cls, Split split, std::size_t index) {
  const std::uint64_t stream = (class_stream(cls) << 40) ^
                               (static_cast<std::uint64_t>(split) << 32) ^
                               static_cast<std::uint64_t>(index);
  return derive_seed(spec.seed, stream);
}

std::size_t DatasetManifest::count(SynthClass cls, Split split) const {
  return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [&](const auto& e) {
    return e.cls == cls && e.split == split;
  }));
}

void DatasetManifest::check_files() const {
  for (const auto& e : entries) {
    if (!fs::is_regular_file(root / e.path)) {
      throw IoError("manifest lists missing file '" + (root / e.path).string() + "'");
    }
  }
}

void write_manifest(const DatasetManifest& manifest) {
  const fs::path path = manifest.root / kManifestName;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest '" + path.string() + "'");
  for (const auto& e : manifest.entries) {
    out << e.path << '\t' << to_string(e.cls) << '\t' << to_string(e.split) << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

DatasetManifest read_manifest(const fs::path& root) {
  const fs::path path = root / kManifestName;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  DatasetManifest m;
  m.root = root;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    const auto where = path.string() + ":" + std::to_string(lineno);
    if (fields.size() != 3) throw IoError("malformed manifest line " + where);
    const auto cls = parse_synth_class(fields[1]);
    const auto split = parse_split(fields[2]);
    if (!cls) throw IoError("unknown class '" + fields[1] + "' at " + where);
    if (!split) throw IoError("unknown split '" + fields[2] + "' at " + where);
    m.entries.push_back({fields[0], *cls, *split});
  }
  return m;
}

DatasetManifest generate(const SynthSpec& spec, const fs::path& out_dir) {
  spec.validate();
  DatasetManifest m;
  m.root = out_dir;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());
  for (Split split : kSplits) {
    for (std::size_t ci = 0; ci < kNumSynthClasses; ++ci) {
      const auto cls = static_cast<SynthClass>(ci);
      const std::string name(to_string(cls));
      const fs::path rel_dir = fs::path(std::string(to_string(split))) / name;
      fs::create_directories(out_dir / rel_dir, ec);
      if (ec) throw IoError("cannot create '" + (out_dir / rel_dir).string() + "': " + ec.message());
      const std::size_t n = spec.counts[ci].of(split);
      for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t seed = image_seed(spec, cls, split, i);
        const Tensor img = render(cls, seed, derive_seed(seed, 1), spec);
        char file[96];
        std::snprintf(file, sizeof file, "%s_%05zu.ppm", name.c_str(), i);
        const fs::path rel = rel_dir / file;
        write_ppm(out_dir / rel, img);
        m.entries.push_back({rel.generic_string(), cls, split});
      }
    }
  }
  write_manifest(m);
  return m;
}

std::vector<LabeledImage> load(const DatasetManifest& manifest, Split split,
                               const LoadOptions& opts) {
  std::vector<LabeledImage> out;
  for (const auto& e : manifest.entries) {
    if (e.split != split) continue;
    if (!opts.classes.empty() &&
        std::find(opts.classes.begin(), opts.classes.end(), e.cls) == opts.classes.end()) {
      continue;
    }
    Tensor img = read_ppm(manifest.root / e.path);
    if (img.dim(1) != img.dim(2)) {
      throw IoError("image '" + (manifest.root / e.path).string() + "' is not square");
    }
    if (opts.image_size != 0) img = resize_square(img, opts.image_size);
    out.push_back({std::move(img), e.cls, e.path});
  }
  if (opts.shuffle_seed) {
    Rng rng(*opts.shuffle_seed);
    for (std::size_t i = out.size(); i > 1; --i) {
      std::swap(out[i - 1], out[uniform_index(rng, i)]);
    }
  }
  return out;
}

void MatchPlan::validate() const {
  if (length == 0) throw InvalidArgument("match: length must be positive");
  if (run_length < 11) throw InvalidArgument("match: run_length must be at least 11");
  if (!(fps > 0.0)) throw InvalidArgument("match: fps must be positive");
  if (min_shot == 0 || min_shot > max_shot) throw InvalidArgument("match: invalid shot length range");
  std::vector<std::size_t> starts;
  for (const auto& e : events) {
    if (e.frame_index + run_length > length) {
      throw InvalidArgument("match: planted event at frame " + std::to_string(e.frame_index) +
                            " runs past the end");
    }
    starts.push_back(e.frame_index);
  }
  std::sort(starts.begin(), starts.end());
  const std::size_t gap = std::max<std::size_t>(30, run_length);
  for (std::size_t i = 1; i < starts.size(); ++i) {
    if (starts[i] - starts[i - 1] < gap) {
      throw InvalidArgument("match: overlapping plants at frames " + std::to_string(starts[i - 1]) +
                            " and " + std::to_string(starts[i]));
    }
  }
}

MatchPlan random_match_plan(std::uint64_t seed, std::size_t length, std::size_t count,
                            std::size_t run_length) {
  MatchPlan plan;
  plan.length = length;
  plan.run_length = run_length;
  if (count == 0) return plan;
  const std::size_t seg = length / count;
  if (seg < 2 * run_length + 16) {
    throw InvalidArgument("match: " + std::to_string(count) + " events of " + std::to_string(run_length) +
                          " frames do not fit in " + std::to_string(length) + " frames");
  }
  Rng rng(derive_seed(seed, kMatchStream + 1));
  std::array<EventKind, kNumEventKinds> kinds = kAllEventKinds;
  for (std::size_t i = kinds.size(); i > 1; --i) std::swap(kinds[i - 1], kinds[uniform_index(rng, i)]);
  const std::size_t quarter = std::min(seg / 4, seg / 2 - run_length / 2 - 8);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t jitter = uniform_index(rng, 2 * quarter + 1);
    const std::size_t start = i * seg + seg / 2 - run_length / 2 - quarter + jitter;
    plan.events.push_back({kinds[i % kinds.size()], start});
  }
  plan.validate();
  return plan;
}

std::string frame_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%08zu.ppm", index);
  return buf;
}

std::vector<SynthClass> plant_match(const SynthSpec& spec, const MatchPlan& plan,
                                    const fs::path& out_dir) {
  plan.validate();
  const std::size_t n = plan.length;
  std::vector<SynthClass> cls(n);
  std::vector<std::uint64_t> layout(n);

  // Filler: consecutive shots, each a single layout held for its duration.
  Rng rng(derive_seed(spec.seed, kMatchStream));
  for (std::size_t i = 0, shot = 0; i < n; ++shot) {
    const std::size_t len = plan.min_shot + uniform_index(rng, plan.max_shot - plan.min_shot + 1);
    const SynthClass c = uniform01(rng) < 0.6 ? SynthClass::OtherSoccer : SynthClass::NonSoccer;
    const std::uint64_t seed = derive_seed(spec.seed, (kMatchStream << 32) ^ shot);
    for (std::size_t k = 0; k < len && i < n; ++k, ++i) {
      cls[i] = c;
      layout[i] = seed;
    }
  }
  std::vector<PlantedEvent> truth = plan.events;
  std::sort(truth.begin(), truth.end(),
            [](const auto& a, const auto& b) { return a.frame_index < b.frame_index; });
  for (std::size_t p = 0; p < truth.size(); ++p) {
    const std::uint64_t seed = derive_seed(spec.seed, (kMatchStream << 33) ^ p);
    for (std::size_t k = 0; k < plan.run_length; ++k) {
      cls[truth[p].frame_index + k] = to_synth(static_cast<ClassLabel>(index_of(truth[p].kind)));
      layout[truth[p].frame_index + k] = seed;
    }
  }

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());
  std::ofstream frames(out_dir / kFramesManifest);
  std::ofstream gt(out_dir / kGroundTruthName);
  if (!frames || !gt) throw IoError("cannot write match manifests under '" + out_dir.string() + "'");
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor img = render(cls[i], layout[i], derive_seed(layout[i], 0x100000000ULL + i), spec);
    write_ppm(out_dir / frame_file_name(i), img);
    frames << i << '\t' << fmt_timestamp(static_cast<double>(i) / plan.fps) << '\n';
  }
  for (const auto& e : truth) gt << to_string(e.kind) << '\t' << e.frame_index << '\n';
  if (!frames || !gt) throw IoError("write failed under '" + out_dir.string() + "'");
  return cls;
}

std::vector<PlantedEvent> read_ground_truth(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open ground truth '" + path.string() + "'");
  std::vector<PlantedEvent> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    const auto kind = f.size() == 2 ? parse_event_kind(f[0]) : std::nullopt;
    if (!kind) throw IoError("malformed ground truth line " + path.string() + ":" + std::to_string(lineno));
    try {
      out.push_back({*kind, static_cast<std::size_t>(std::stoull(f[1]))});
    } catch (const std::exception&) {
      throw IoError("bad frame index at " + path.string() + ":" + std::to_string(lineno));
    }
  }
  return out;
}

}  // namespace sevdet::synth

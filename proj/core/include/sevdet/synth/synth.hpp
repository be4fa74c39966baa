#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sevdet/classifier/labels.hpp"
#include "sevdet/nn/tensor.hpp"

namespace sevdet::synth {

/// Everything the generator can render: the ten dataset classes (same
/// indices as ClassLabel) plus the two no-highlight test pools.
enum class SynthClass : std::size_t {
  PenaltyKick,
  CornerKick,
  FreeKick,
  Tackle,
  ToSubstitute,
  RedCard,
  YellowCard,
  CenterCircle,
  LeftPenaltyArea,
  RightPenaltyArea,
  OtherSoccer,
  NonSoccer,
};

inline constexpr std::size_t kNumSynthClasses = 12;

constexpr SynthClass to_synth(ClassLabel c) { return static_cast<SynthClass>(index_of(c)); }
std::optional<ClassLabel> as_class_label(SynthClass c);
std::string_view to_string(SynthClass c);
std::optional<SynthClass> parse_synth_class(std::string_view s);

/// Three-way grouping of the held-out test pools.
enum class TestGroup { Event, OtherSoccer, NonSoccer };
/// Scene classes have no test group (they are never in the test pools).
std::optional<TestGroup> test_group(SynthClass c);

enum class Split { Train, Val, Test };
std::string_view to_string(Split s);
std::optional<Split> parse_split(std::string_view s);

struct SplitCounts {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
  std::size_t of(Split s) const;
};

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

struct SynthSpec {
  std::uint64_t seed = 1;
  std::size_t image_size = 64;
  std::array<SplitCounts, kNumSynthClasses> counts{};
  /// Card patch side as a fraction of the image side; area must stay <= 4%.
  double card_patch_frac = 0.125;
  /// Amber and vermilion: close enough that the illumination tint makes the
  /// absolute patch colour ambiguous without image context.
  Rgb yellow{230, 160, 40};
  Rgb red{230, 100, 40};
  /// Standard deviation of additive per-pixel noise, in [0,1] units.
  double noise = 0.04;
  /// Per-image, per-channel illumination gain drawn from [1-tint, 1+tint].
  double tint = 0.15;

  /// Same counts for every class and pool.
  static SynthSpec uniform(std::uint64_t seed, std::size_t image_size, SplitCounts per_class);
  void validate() const;
};

/// Square region where card classes may differ, in pixels.
struct PatchRect {
  std::size_t x0, y0, size;
};

/// Renders one image. `layout_seed` fixes geometry; `noise_seed` fixes the
/// per-pixel noise. RedCard and YellowCard under equal seeds differ only
/// inside `card_patch_rect(spec, layout_seed)`.
nn::Tensor render(SynthClass cls, std::uint64_t layout_seed, std::uint64_t noise_seed,
                  const SynthSpec& spec);
PatchRect card_patch_rect(const SynthSpec& spec, std::uint64_t layout_seed);

/// Layout seed of image `index` of `cls` in `split`. The two card classes
/// share seeds so each red image has a yellow twin.
std::uint64_t image_seed(const SynthSpec& spec, SynthClass cls, Split split, std::size_t index);

struct ManifestEntry {
  std::string path;  ///< relative to the manifest root
  SynthClass cls;
  Split split;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;

  std::size_t count(SynthClass cls, Split split) const;
  /// Throws IoError naming the first listed file that does not exist.
  void check_files() const;
};

inline constexpr const char* kManifestName = "manifest.txt";

void write_manifest(const DatasetManifest& manifest);
/// Parses `<root>/manifest.txt` (`path<TAB>class<TAB>split` per line).
DatasetManifest read_manifest(const std::filesystem::path& root);

/// Renders the whole dataset under `out_dir` and writes its manifest.
DatasetManifest generate(const SynthSpec& spec, const std::filesystem::path& out_dir);

struct LabeledImage {
  nn::Tensor image;  ///< [3,S,S], values in [0,1]
  SynthClass cls;
  std::string path;
  std::optional<ClassLabel> label() const { return as_class_label(cls); }
};

struct LoadOptions {
  std::size_t image_size = 0;  ///< 0 keeps the stored size
  std::optional<std::uint64_t> shuffle_seed;
  /// Empty means every class.
  std::vector<SynthClass> classes;
};

/// Decodes every entry of `split` in manifest order (or a seeded shuffle).
std::vector<LabeledImage> load(const DatasetManifest& manifest, Split split,
                               const LoadOptions& opts = {});

/// One planted event: the first frame of its run and the class rendered.
struct PlantedEvent {
  EventKind kind;
  std::size_t frame_index;
};

struct MatchPlan {
  std::vector<PlantedEvent> events;
  std::size_t length = 3000;
  std::size_t run_length = 20;
  double fps = 30.0;
  /// Filler shots have a length drawn uniformly from [min, max].
  std::size_t min_shot = 30;
  std::size_t max_shot = 90;

  void validate() const;
};

/// `count` events over equal segments of the match: each run starts at its
/// segment middle with a jitter of up to a quarter segment, so consecutive
/// starts are at least half a segment apart. Kinds cycle through a seeded
/// permutation of the seven kinds. Throws if a segment cannot hold a run
/// plus the 7-frame vote margins.
MatchPlan random_match_plan(std::uint64_t seed, std::size_t length, std::size_t count,
                            std::size_t run_length = 20);

inline constexpr const char* kFramesManifest = "frames.txt";
inline constexpr const char* kGroundTruthName = "ground_truth.txt";

std::string frame_file_name(std::size_t index);

/// Writes `frame_%08d.ppm`, `frames.txt` (`index<TAB>timestamp_s`) and
/// `ground_truth.txt` (`kind<TAB>frame_index`) under `out_dir`. Returns the
/// class rendered at each frame.
std::vector<SynthClass> plant_match(const SynthSpec& spec, const MatchPlan& plan,
                                    const std::filesystem::path& out_dir);

std::vector<PlantedEvent> read_ground_truth(const std::filesystem::path& path);

}  // namespace sevdet::synth

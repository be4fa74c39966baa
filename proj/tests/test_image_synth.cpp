#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <vector>

#include "doctest.h"
#include "sevdet/error.hpp"
#include "sevdet/image.hpp"
#include "sevdet/synth/synth.hpp"
#include "test_util.hpp"

using namespace sevdet;
using namespace sevdet::synth;
using nn::Tensor;
using sevdet::test::TempDir;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

SynthSpec small_spec(std::uint64_t seed, std::size_t per_split = 2) {
  return SynthSpec::uniform(seed, 32, {per_split, per_split, per_split});
}

}  // namespace

TEST_CASE("ppm round trip is exact for quantized images") {
  TempDir dir("ppm");
  Tensor img = test::random_tensor({3, 5, 7}, 1, 0.0, 1.0);
  quantize(img);
  write_ppm(dir / "a.ppm", img);
  const Tensor back = read_ppm(dir / "a.ppm");
  CHECK(back.shape() == img.shape());
  CHECK(max_abs_diff(back, img) == 0.0);
}

TEST_CASE("ppm reader rejects missing and malformed files with the path") {
  TempDir dir("ppm_bad");
  CHECK_THROWS_AS(read_ppm(dir / "missing.ppm"), IoError);
  test::write_file(dir / "bad.ppm", "P3\n2 2\n255\n");
  try {
    read_ppm(dir / "bad.ppm");
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("bad.ppm") != std::string::npos);
  }
}

TEST_CASE("resize_square box-averages down and replicates up") {
  Tensor img({3, 4, 4});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i % 16) / 15.0;
  const Tensor half = resize_square(img, 2);
  CHECK(half.shape() == nn::Shape{3, 2, 2});
  // Top-left block holds pixels 0,1,4,5.
  CHECK(half[0] == doctest::Approx((0 + 1 + 4 + 5) / 4.0 / 15.0));
  const Tensor up = resize_square(half, 4);
  CHECK(up[0] == half[0]);
  CHECK(up[1] == half[0]);
  CHECK(up[4] == half[0]);
  CHECK(max_abs_diff(resize_square(img, 4), img) == 0.0);
  CHECK_THROWS(resize_square(img, 3));
}

TEST_CASE("identity warp reproduces the input and a flip warp equals flip_horizontal") {
  Tensor img = test::random_tensor({3, 8, 8}, 2, 0.0, 1.0);
  CHECK(max_abs_diff(warp_affine(img, {}), img) < 1e-12);
  AffineWarp flip;
  flip.flip = true;
  CHECK(max_abs_diff(warp_affine(img, flip), flip_horizontal(img)) < 1e-12);
  CHECK(max_abs_diff(flip_horizontal(flip_horizontal(img)), img) == 0.0);
}

TEST_CASE("stack_images and expect_image validate shapes") {
  Tensor a = test::random_tensor({3, 4, 4}, 3, 0.0, 1.0);
  Tensor b = test::random_tensor({3, 4, 4}, 4, 0.0, 1.0);
  const Tensor* ptrs[] = {&a, &b};
  const Tensor s = stack_images(ptrs);
  CHECK(s.shape() == nn::Shape{2, 3, 4, 4});
  CHECK(s[48] == b[0]);
  Tensor c({3, 5, 5});
  const Tensor* bad[] = {&a, &c};
  CHECK_THROWS(stack_images(bad));
  CHECK_NOTHROW(expect_image(a, 4, "a"));
  CHECK_THROWS(expect_image(a, 8, "a"));
  a[0] = 1.5;
  CHECK_THROWS(expect_image(a, 4, "a"));
}

TEST_CASE("render is deterministic in its seeds and stays in range") {
  const SynthSpec spec = small_spec(9);
  for (std::size_t ci = 0; ci < kNumSynthClasses; ++ci) {
    const auto cls = static_cast<SynthClass>(ci);
    const Tensor a = render(cls, 11, 12, spec);
    const Tensor b = render(cls, 11, 12, spec);
    CHECK(a.shape() == nn::Shape{3, 32, 32});
    CHECK(max_abs_diff(a, b) == 0.0);
    CHECK(std::all_of(a.values().begin(), a.values().end(), [](double v) { return v >= 0 && v <= 1; }));
    CHECK(max_abs_diff(a, render(cls, 13, 12, spec)) > 0.0);
  }
}

TEST_CASE("card twins differ only inside the patch") {
  SynthSpec spec = small_spec(5);
  spec.image_size = 64;
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    const Tensor red = render(SynthClass::RedCard, seed, 77, spec);
    const Tensor yellow = render(SynthClass::YellowCard, seed, 77, spec);
    const PatchRect r = card_patch_rect(spec, seed);
    CHECK(r.x0 + r.size <= spec.image_size);
    CHECK(r.y0 + r.size <= spec.image_size);
    CHECK(r.size * r.size <= spec.image_size * spec.image_size * 4 / 100);
    std::size_t inside_diffs = 0;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < 64; ++y)
        for (std::size_t x = 0; x < 64; ++x) {
          const std::size_t i = (c * 64 + y) * 64 + x;
          const bool inside = x >= r.x0 && x < r.x0 + r.size && y >= r.y0 && y < r.y0 + r.size;
          if (inside) {
            inside_diffs += red[i] != yellow[i];
          } else {
            CHECK(red[i] == yellow[i]);
          }
        }
    CHECK(inside_diffs > 0);
  }
}

TEST_CASE("right penalty area is the mirror of the left before noise") {
  SynthSpec spec = small_spec(6);
  spec.noise = 0.0;
  const Tensor left = render(SynthClass::LeftPenaltyArea, 21, 22, spec);
  const Tensor right = render(SynthClass::RightPenaltyArea, 21, 22, spec);
  CHECK(max_abs_diff(flip_horizontal(left), right) == 0.0);
  CHECK(max_abs_diff(left, right) > 0.0);
}

TEST_CASE("card classes share layout seeds, other classes do not") {
  const SynthSpec spec = small_spec(8);
  CHECK(image_seed(spec, SynthClass::RedCard, Split::Train, 3) ==
        image_seed(spec, SynthClass::YellowCard, Split::Train, 3));
  CHECK(image_seed(spec, SynthClass::Tackle, Split::Train, 3) !=
        image_seed(spec, SynthClass::FreeKick, Split::Train, 3));
  CHECK(image_seed(spec, SynthClass::Tackle, Split::Train, 3) !=
        image_seed(spec, SynthClass::Tackle, Split::Val, 3));
}

TEST_CASE("spec validation") {
  SynthSpec spec = small_spec(1);
  CHECK_NOTHROW(spec.validate());
  SUBCASE("tiny image") { spec.image_size = 8; }
  SUBCASE("patch above 4% of the area") { spec.card_patch_frac = 0.25; }
  SUBCASE("identical card colours") { spec.red = spec.yellow; }
  SUBCASE("negative noise") { spec.noise = -0.1; }
  SUBCASE("tint too large") { spec.tint = 0.5; }
  CHECK_THROWS_AS(spec.validate(), InvalidArgument);
}

TEST_CASE("generate writes the requested counts and identical trees for equal seeds") {
  TempDir a("gen_a"), b("gen_b");
  SynthSpec spec = small_spec(4, 1);
  spec.counts[static_cast<std::size_t>(SynthClass::Tackle)] = {3, 2, 1};
  const DatasetManifest m = generate(spec, a.path());
  generate(spec, b.path());
  CHECK(m.count(SynthClass::Tackle, Split::Train) == 3);
  CHECK(m.count(SynthClass::Tackle, Split::Val) == 2);
  CHECK(m.count(SynthClass::NonSoccer, Split::Test) == 1);
  CHECK(m.entries.size() == 3 * kNumSynthClasses + 3);
  const DatasetManifest back = read_manifest(a.path());
  CHECK(back.entries.size() == m.entries.size());
  CHECK_NOTHROW(back.check_files());
  for (const auto& e : m.entries) CHECK(test::read_file(a / e.path) == test::read_file(b / e.path));
  CHECK(test::read_file(a / kManifestName) == test::read_file(b / kManifestName));

  const auto imgs = load(back, Split::Train, {.image_size = 16, .classes = {SynthClass::Tackle}});
  CHECK(imgs.size() == 3);
  CHECK(imgs[0].image.shape() == nn::Shape{3, 16, 16});
  CHECK(imgs[0].label() == ClassLabel::Tackle);

  std::filesystem::remove(a / m.entries.front().path);
  CHECK_THROWS_AS(back.check_files(), IoError);
}

TEST_CASE("different seeds give different datasets") {
  const SynthSpec s1 = small_spec(1), s2 = small_spec(2);
  CHECK(image_seed(s1, SynthClass::CornerKick, Split::Test, 0) !=
        image_seed(s2, SynthClass::CornerKick, Split::Test, 0));
}

TEST_CASE("plant_match writes frames and ground truth matching the plan") {
  TempDir dir("match");
  SynthSpec spec = small_spec(3);
  spec.image_size = 16;
  MatchPlan plan;
  plan.length = 200;
  plan.events = {{EventKind::Tackle, 40}, {EventKind::RedCard, 120}};
  const auto cls = plant_match(spec, plan, dir.path());
  REQUIRE(cls.size() == 200);
  for (std::size_t i = 40; i < 60; ++i) CHECK(cls[i] == SynthClass::Tackle);
  for (std::size_t i = 120; i < 140; ++i) CHECK(cls[i] == SynthClass::RedCard);
  CHECK(test_group(cls[39]).has_value());
  CHECK(test_group(cls[39]) != TestGroup::Event);
  const auto gt = read_ground_truth(dir / kGroundTruthName);
  REQUIRE(gt.size() == 2);
  CHECK(gt[0].kind == EventKind::Tackle);
  CHECK(gt[0].frame_index == 40);
  CHECK(gt[1].kind == EventKind::RedCard);
  CHECK(std::filesystem::exists(dir / frame_file_name(199)));
  CHECK(frame_file_name(7) == "frame_00000007.ppm");
  // A run holds one layout, so consecutive frames differ only by noise.
  const Tensor f40 = read_ppm(dir / frame_file_name(40));
  const Tensor f41 = read_ppm(dir / frame_file_name(41));
  CHECK(max_abs_diff(f40, f41) < 0.5);
}

TEST_CASE("match plan validation") {
  MatchPlan plan;
  plan.length = 100;
  SUBCASE("run past the end") { plan.events = {{EventKind::Tackle, 90}}; }
  SUBCASE("overlapping runs") { plan.events = {{EventKind::Tackle, 10}, {EventKind::FreeKick, 25}}; }
  SUBCASE("short runs") { plan.run_length = 5; }
  SUBCASE("bad shot range") {
    plan.min_shot = 50;
    plan.max_shot = 40;
  }
  CHECK_THROWS_AS(plan.validate(), InvalidArgument);
}

TEST_CASE("random_match_plan spaces events and cycles kinds") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const MatchPlan plan = random_match_plan(seed, 3000, 5);
    REQUIRE(plan.events.size() == 5);
    std::set<EventKind> kinds;
    for (std::size_t i = 0; i < 5; ++i) {
      const auto& e = plan.events[i];
      kinds.insert(e.kind);
      CHECK(e.frame_index >= i * 600 + 7);
      CHECK(e.frame_index + plan.run_length + 7 <= (i + 1) * 600);
      if (i > 0) CHECK(e.frame_index - plan.events[i - 1].frame_index >= 300);
    }
    CHECK(kinds.size() == 5);
    const MatchPlan again = random_match_plan(seed, 3000, 5);
    for (std::size_t i = 0; i < 5; ++i) CHECK(again.events[i].frame_index == plan.events[i].frame_index);
  }
  const MatchPlan nine = random_match_plan(2, 9000, 9);
  CHECK(nine.events[7].kind == nine.events[0].kind);
  CHECK_THROWS_AS(random_match_plan(1, 100, 5), InvalidArgument);
  CHECK(random_match_plan(1, 100, 0).events.empty());
}

TEST_CASE("class and split names round trip") {
  for (std::size_t ci = 0; ci < kNumSynthClasses; ++ci) {
    const auto cls = static_cast<SynthClass>(ci);
    CHECK(parse_synth_class(to_string(cls)) == cls);
  }
  for (Split s : {Split::Train, Split::Val, Split::Test}) CHECK(parse_split(to_string(s)) == s);
  CHECK_FALSE(parse_synth_class("Goal").has_value());
  CHECK(test_group(SynthClass::CenterCircle) == std::nullopt);
  CHECK(test_group(SynthClass::NonSoccer) == TestGroup::NonSoccer);
  CHECK(merge_card_labels(ClassLabel::RedCard) == NineClass::Card);
  CHECK(merge_card_labels(ClassLabel::LeftPenaltyArea) == NineClass::LeftPenaltyArea);
  CHECK(direct_event_kind(NineClass::Card) == std::nullopt);
  CHECK(direct_event_kind(NineClass::Tackle) == EventKind::Tackle);
}

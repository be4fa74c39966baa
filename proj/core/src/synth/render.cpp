#include <algorithm>
#include <array>
#include <cmath>

#include "sevdet/error.hpp"
#include "sevdet/image.hpp"
#include "sevdet/random.hpp"
#include "sevdet/synth/synth.hpp"

namespace sevdet::synth {

using nn::Tensor;

namespace {

using Color = std::array<double, 3>;

constexpr Color rgb(int r, int g, int b) { return {r / 255.0, g / 255.0, b / 255.0}; }

constexpr Color kGrassA = rgb(46, 122, 50);
constexpr Color kGrassB = rgb(58, 140, 60);
constexpr Color kLine = rgb(232, 232, 226);
constexpr Color kTeamA = rgb(38, 60, 186);
constexpr Color kTeamB = rgb(236, 236, 236);
constexpr Color kShorts = rgb(30, 30, 40);
constexpr Color kKeeper = rgb(140, 62, 172);
constexpr Color kReferee = rgb(22, 22, 24);
constexpr Color kSkin = rgb(222, 178, 140);
constexpr Color kHair = rgb(60, 40, 28);
constexpr Color kNet = rgb(180, 186, 190);
constexpr Color kFlag = rgb(214, 60, 190);
constexpr Color kTrack = rgb(112, 112, 118);
constexpr Color kBoard = rgb(18, 18, 20);
constexpr Color kDigit = rgb(110, 250, 90);

// Drawing surface in unit coordinates: (0,0) is top-left, (1,1) bottom-right.
// A pixel is covered when its centre falls inside the shape.
class Canvas {
 public:
  Canvas(std::size_t size, std::array<double, 3> gain)
      : n_(size), img_({3, size, size}), gain_(gain) {}

  std::size_t size() const { return n_; }
  Tensor& image() { return img_; }

  template <typename Inside>
  void paint(const Color& color, Inside inside) {
    for (std::size_t y = 0; y < n_; ++y) {
      const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(n_);
      for (std::size_t x = 0; x < n_; ++x) {
        const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(n_);
        if (inside(u, v)) set(x, y, color);
      }
    }
  }

  void set(std::size_t x, std::size_t y, const Color& color) {
    for (std::size_t c = 0; c < 3; ++c) img_[(c * n_ + y) * n_ + x] = std::min(1.0, color[c] * gain_[c]);
  }

  void rect(double x0, double y0, double x1, double y1, const Color& c) {
    paint(c, [&](double u, double v) { return u >= x0 && u < x1 && v >= y0 && v < y1; });
  }
  void disc(double cx, double cy, double r, const Color& c) {
    paint(c, [&](double u, double v) { return (u - cx) * (u - cx) + (v - cy) * (v - cy) <= r * r; });
  }
  void ring(double cx, double cy, double r, double t, const Color& c) {
    paint(c, [&](double u, double v) {
      return std::abs(std::hypot(u - cx, v - cy) - r) <= t / 2.0;
    });
  }
  void segment(double x0, double y0, double x1, double y1, double t, const Color& c) {
    const double dx = x1 - x0, dy = y1 - y0, len2 = dx * dx + dy * dy;
    paint(c, [&](double u, double v) {
      double s = len2 > 0.0 ? ((u - x0) * dx + (v - y0) * dy) / len2 : 0.0;
      s = std::clamp(s, 0.0, 1.0);
      return std::hypot(u - (x0 + s * dx), v - (y0 + s * dy)) <= t / 2.0;
    });
  }
  void outline(double x0, double y0, double x1, double y1, double t, const Color& c) {
    segment(x0, y0, x1, y0, t, c);
    segment(x1, y0, x1, y1, t, c);
    segment(x1, y1, x0, y1, t, c);
    segment(x0, y1, x0, y0, t, c);
  }

 private:
  std::size_t n_;
  Tensor img_;
  std::array<double, 3> gain_;
};

double jitter(Rng& rng, double amount) { return uniform(rng, -amount, amount); }

// Mowed-grass stripes; `vertical` selects stripe orientation.
void grass(Canvas& cv, Rng& rng, bool vertical) {
  const double width = uniform(rng, 0.12, 0.2);
  const double phase = uniform(rng, 0.0, width * 2.0);
  cv.paint(kGrassA, [](double, double) { return true; });
  cv.paint(kGrassB, [&](double u, double v) {
    const double t = (vertical ? u : v) + phase;
    return std::fmod(t, 2.0 * width) < width;
  });
}

// Standing player: shirt torso, shorts, head. Height in unit coordinates.
void player(Canvas& cv, double x, double y, double h, const Color& shirt) {
  const double w = h * 0.36;
  cv.rect(x - w / 2, y - h * 0.55, x + w / 2, y - h * 0.1, shirt);
  cv.rect(x - w / 2, y - h * 0.1, x + w / 2, y + h * 0.15, kShorts);
  cv.rect(x - w * 0.35, y + h * 0.15, x - w * 0.05, y + h * 0.45, kSkin);
  cv.rect(x + w * 0.05, y + h * 0.15, x + w * 0.35, y + h * 0.45, kSkin);
  cv.disc(x, y - h * 0.68, h * 0.14, kSkin);
}

void ball(Canvas& cv, double x, double y, double r) {
  cv.disc(x, y, r, kLine);
  cv.disc(x, y, r * 0.4, kShorts);
}

void draw_penalty_kick(Canvas& cv, Rng& rng) {
  grass(cv, rng, false);
  const double t = 0.02;
  const double cx = 0.5 + jitter(rng, 0.04);
  cv.segment(0.0, 0.14, 1.0, 0.14, t, kLine);
  cv.rect(cx - 0.22, 0.02, cx + 0.22, 0.14, kNet);
  cv.outline(cx - 0.22, 0.02, cx + 0.22, 0.14, t, kLine);
  cv.outline(cx - 0.36, 0.14, cx + 0.36, 0.36, t, kLine);
  player(cv, cx + jitter(rng, 0.08), 0.13, 0.16, kKeeper);
  const double spot_y = 0.58 + jitter(rng, 0.03);
  ball(cv, cx, spot_y, 0.028);
  player(cv, cx + jitter(rng, 0.06), spot_y + 0.2, 0.26, kTeamA);
}

void draw_corner_kick(Canvas& cv, Rng& rng) {
  grass(cv, rng, true);
  const double t = 0.022;
  const double gy = 0.82 + jitter(rng, 0.04);
  const double gx = 0.12 + jitter(rng, 0.04);
  cv.segment(gx, 0.0, gx, gy, t, kLine);
  cv.segment(gx, gy, 1.0, gy, t, kLine);
  cv.paint(kLine, [&](double u, double v) {
    return u > gx && v < gy && std::abs(std::hypot(u - gx, v - gy) - 0.12) <= t / 2;
  });
  cv.segment(gx, gy, gx, gy - 0.2, 0.012, kLine);
  cv.paint(kFlag, [&](double u, double v) {
    return u >= gx && v >= gy - 0.2 && v <= gy - 0.12 && (u - gx) <= (v - (gy - 0.2)) * 1.2;
  });
  ball(cv, gx + 0.06, gy - 0.05, 0.03);
  player(cv, gx + 0.2 + jitter(rng, 0.04), gy - 0.22, 0.3, kTeamA);
}

void draw_free_kick(Canvas& cv, Rng& rng) {
  grass(cv, rng, false);
  const double wy = 0.42 + jitter(rng, 0.05);
  const double wx = 0.5 + jitter(rng, 0.06);
  const int n = 4 + static_cast<int>(uniform_index(rng, 2));
  const double h = 0.26;
  for (int i = 0; i < n; ++i) {
    const double x = wx + (i - (n - 1) / 2.0) * h * 0.4;
    player(cv, x, wy, h, kTeamB);
  }
  const double by = 0.78 + jitter(rng, 0.03);
  ball(cv, wx + jitter(rng, 0.05), by, 0.03);
  player(cv, wx - 0.22 + jitter(rng, 0.04), by + 0.05, 0.22, kTeamA);
}

void draw_tackle(Canvas& cv, Rng& rng) {
  grass(cv, rng, true);
  const double cx = 0.5 + jitter(rng, 0.06), cy = 0.55 + jitter(rng, 0.06);
  player(cv, cx - 0.08, cy - 0.05, 0.42, kTeamA);
  // Sliding opponent: body laid out horizontally, legs towards the ball.
  cv.rect(cx - 0.02, cy + 0.12, cx + 0.3, cy + 0.22, kTeamB);
  cv.rect(cx - 0.2, cy + 0.14, cx - 0.02, cy + 0.2, kSkin);
  cv.disc(cx + 0.35, cy + 0.16, 0.06, kSkin);
  ball(cv, cx - 0.24, cy + 0.2, 0.035);
}

void draw_to_substitute(Canvas& cv, Rng& rng) {
  grass(cv, rng, true);
  const double ty = 0.68 + jitter(rng, 0.04);
  cv.rect(0.0, ty, 1.0, 1.0, kTrack);
  cv.segment(0.0, ty, 1.0, ty, 0.022, kLine);
  const double ox = 0.5 + jitter(rng, 0.08);
  player(cv, ox, ty + 0.05, 0.36, kReferee);
  const double bx0 = ox - 0.14, by0 = ty - 0.42;
  cv.rect(bx0, by0, bx0 + 0.28, by0 + 0.14, kBoard);
  cv.rect(bx0 + 0.04, by0 + 0.03, bx0 + 0.11, by0 + 0.11, kDigit);
  cv.rect(bx0 + 0.17, by0 + 0.03, bx0 + 0.24, by0 + 0.11, kDigit);
  player(cv, ox - 0.3 + jitter(rng, 0.03), ty - 0.02, 0.34, kTeamA);
  player(cv, ox + 0.3 + jitter(rng, 0.03), ty - 0.02, 0.34, kTeamA);
}

struct CardLayout {
  bool right_arm;
  double cx, head_y, hand_x, hand_y;
};

CardLayout card_layout(Rng& rng) {
  CardLayout l{};
  l.right_arm = uniform01(rng) < 0.5;
  l.cx = 0.5 + jitter(rng, 0.06);
  l.head_y = 0.3 + jitter(rng, 0.03);
  l.hand_x = l.cx + (l.right_arm ? 1.0 : -1.0) * uniform(rng, 0.22, 0.3);
  l.hand_y = uniform(rng, 0.12, 0.2);
  return l;
}

PatchRect patch_from(const CardLayout& l, std::size_t n, double frac) {
  const auto side = static_cast<std::size_t>(std::lround(frac * static_cast<double>(n)));
  const double px = l.hand_x * static_cast<double>(n) - static_cast<double>(side) / 2.0;
  const double py = (l.hand_y - 0.03) * static_cast<double>(n) - static_cast<double>(side);
  const auto clampi = [&](double v) {
    return static_cast<std::size_t>(std::clamp(std::lround(v), 0L, static_cast<long>(n - side)));
  };
  return {clampi(px), clampi(py), side};
}

void draw_card(Canvas& cv, Rng& rng, const SynthSpec& spec, const Rgb& patch) {
  grass(cv, rng, true);
  const CardLayout l = card_layout(rng);
  const double sx = l.cx + (l.right_arm ? 0.14 : -0.14);
  cv.rect(l.cx - 0.2, 0.44, l.cx + 0.2, 1.0, kReferee);
  cv.segment(sx, 0.5, l.hand_x, l.hand_y + 0.02, 0.08, kReferee);
  cv.disc(l.hand_x, l.hand_y, 0.04, kSkin);
  cv.disc(l.cx, l.head_y, 0.12, kSkin);
  cv.rect(l.cx - 0.12, l.head_y - 0.13, l.cx + 0.12, l.head_y - 0.06, kHair);
  const PatchRect p = patch_from(l, cv.size(), spec.card_patch_frac);
  const Color c = rgb(patch.r, patch.g, patch.b);
  for (std::size_t y = p.y0; y < p.y0 + p.size; ++y) {
    for (std::size_t x = p.x0; x < p.x0 + p.size; ++x) cv.set(x, y, c);
  }
}

void draw_center_circle(Canvas& cv, Rng& rng) {
  grass(cv, rng, true);
  const double cx = 0.5 + jitter(rng, 0.08), cy = 0.5 + jitter(rng, 0.08);
  const double r = uniform(rng, 0.26, 0.32);
  cv.segment(cx, 0.0, cx, 1.0, 0.022, kLine);
  cv.ring(cx, cy, r, 0.022, kLine);
  cv.disc(cx, cy, 0.025, kLine);
}

void draw_left_penalty_area(Canvas& cv, Rng& rng) {
  grass(cv, rng, true);
  const double t = 0.022;
  const double gx = 0.06 + jitter(rng, 0.03);
  const double cy = 0.5 + jitter(rng, 0.06);
  cv.rect(0.0, cy - 0.12, gx, cy + 0.12, kNet);
  cv.segment(gx, 0.0, gx, 1.0, t, kLine);
  cv.outline(gx, cy - 0.34, gx + 0.4, cy + 0.34, t, kLine);
  cv.outline(gx, cy - 0.16, gx + 0.14, cy + 0.16, t, kLine);
  const double spot_x = gx + 0.28;
  cv.disc(spot_x, cy, 0.02, kLine);
  cv.paint(kLine, [&](double u, double v) {
    return u > gx + 0.4 + t / 2 && std::abs(std::hypot(u - spot_x, v - cy) - 0.2) <= t / 2;
  });
}

void draw_other_soccer(Canvas& cv, Rng& rng) {
  switch (uniform_index(rng, 3)) {
    case 0: {  // throw-in at the touchline
      grass(cv, rng, true);
      const double lx = 0.14 + jitter(rng, 0.04);
      cv.rect(0.0, 0.0, lx, 1.0, kTrack);
      cv.segment(lx, 0.0, lx, 1.0, 0.022, kLine);
      const double py = 0.6 + jitter(rng, 0.06);
      player(cv, lx + 0.05, py, 0.34, kTeamB);
      cv.segment(lx + 0.0, py - 0.2, lx + 0.02, py - 0.34, 0.04, kSkin);
      cv.segment(lx + 0.1, py - 0.2, lx + 0.08, py - 0.34, 0.04, kSkin);
      ball(cv, lx + 0.05, py - 0.38, 0.04);
      player(cv, 0.7 + jitter(rng, 0.1), 0.4 + jitter(rng, 0.1), 0.16, kTeamA);
      break;
    }
    case 1: {  // stands above an advertising strip
      grass(cv, rng, false);
      const double band = uniform(rng, 0.35, 0.5);
      cv.rect(0.0, 0.0, 1.0, band, rgb(50, 48, 56));
      const std::size_t dots = 60 + uniform_index(rng, 40);
      for (std::size_t i = 0; i < dots; ++i) {
        const Color c = rgb(60 + static_cast<int>(uniform_index(rng, 190)),
                            40 + static_cast<int>(uniform_index(rng, 160)),
                            60 + static_cast<int>(uniform_index(rng, 190)));
        cv.disc(uniform01(rng), uniform(rng, 0.0, band - 0.04), 0.022, c);
      }
      cv.rect(0.0, band - 0.06, 1.0, band, rgb(30, 90, 200));
      cv.rect(0.1, band - 0.05, 0.4, band - 0.01, kLine);
      cv.rect(0.6, band - 0.05, 0.9, band - 0.01, kLine);
      player(cv, uniform(rng, 0.2, 0.8), band + 0.25, 0.18, kTeamA);
      break;
    }
    default: {  // wide shot with scattered players
      grass(cv, rng, true);
      cv.segment(0.0, 0.1, 1.0, 0.1, 0.016, kLine);
      const std::size_t n = 7 + uniform_index(rng, 5);
      for (std::size_t i = 0; i < n; ++i) {
        player(cv, uniform(rng, 0.08, 0.92), uniform(rng, 0.25, 0.9), 0.1,
               i % 2 == 0 ? kTeamA : kTeamB);
      }
      break;
    }
  }
}

// Off-palette colour: the green component is never the largest.
Color off_palette(Rng& rng) {
  Color c{uniform01(rng), uniform01(rng), uniform01(rng)};
  if (c[1] >= std::max(c[0], c[2])) c[1] = 0.6 * std::max(c[0], c[2]);
  return c;
}

void draw_non_soccer(Canvas& cv, Rng& rng) {
  switch (uniform_index(rng, 3)) {
    case 0: {  // two-colour linear gradient
      const Color a = off_palette(rng), b = off_palette(rng);
      const double ang = uniform(rng, 0.0, 6.283185307179586);
      const double dx = std::cos(ang), dy = std::sin(ang);
      for (std::size_t y = 0; y < cv.size(); ++y) {
        for (std::size_t x = 0; x < cv.size(); ++x) {
          const double u = (x + 0.5) / cv.size() - 0.5, v = (y + 0.5) / cv.size() - 0.5;
          const double s = std::clamp((u * dx + v * dy) / 1.42 + 0.5, 0.0, 1.0);
          cv.set(x, y, {a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s, a[2] + (b[2] - a[2]) * s});
        }
      }
      break;
    }
    case 1: {  // cluttered indoor-like blocks
      const Color bg = off_palette(rng);
      cv.paint(bg, [](double, double) { return true; });
      const std::size_t n = 5 + uniform_index(rng, 6);
      for (std::size_t i = 0; i < n; ++i) {
        const Color c = off_palette(rng);
        const double x = uniform01(rng), y = uniform01(rng), s = uniform(rng, 0.08, 0.3);
        if (uniform01(rng) < 0.5) {
          cv.rect(x - s / 2, y - s / 2, x + s / 2, y + s / 2, c);
        } else {
          cv.disc(x, y, s / 2, c);
        }
      }
      break;
    }
    default: {  // sky over bare ground
      const double horizon = uniform(rng, 0.4, 0.7);
      const Color sky = rgb(110 + static_cast<int>(uniform_index(rng, 60)), 160, 230);
      const Color ground = rgb(150 + static_cast<int>(uniform_index(rng, 50)), 120, 90);
      cv.rect(0.0, 0.0, 1.0, horizon, sky);
      cv.rect(0.0, horizon, 1.0, 1.0, ground);
      const double sx = uniform(rng, 0.1, 0.9);
      cv.disc(sx, horizon * 0.3, 0.07, rgb(250, 240, 200));
      break;
    }
  }
}

// Global brightness in [0.9,1.1] times an independent per-channel tint.
std::array<double, 3> illumination(Rng& rng, const SynthSpec& spec) {
  const double brightness = uniform(rng, 0.9, 1.1);
  std::array<double, 3> g{};
  for (double& v : g) v = brightness * (1.0 + uniform(rng, -spec.tint, spec.tint));
  return g;
}

}  // namespace

PatchRect card_patch_rect(const SynthSpec& spec, std::uint64_t layout_seed) {
  // Replays render()'s draw order up to the card layout.
  Rng rng(layout_seed);
  illumination(rng, spec);
  Canvas scratch(1, {1.0, 1.0, 1.0});
  grass(scratch, rng, true);
  return patch_from(card_layout(rng), spec.image_size, spec.card_patch_frac);
}

Tensor render(SynthClass cls, std::uint64_t layout_seed, std::uint64_t noise_seed,
              const SynthSpec& spec) {
  Rng rng(layout_seed);
  Canvas cv(spec.image_size, illumination(rng, spec));
  switch (cls) {
    case SynthClass::PenaltyKick: draw_penalty_kick(cv, rng); break;
    case SynthClass::CornerKick: draw_corner_kick(cv, rng); break;
    case SynthClass::FreeKick: draw_free_kick(cv, rng); break;
    case SynthClass::Tackle: draw_tackle(cv, rng); break;
    case SynthClass::ToSubstitute: draw_to_substitute(cv, rng); break;
    case SynthClass::RedCard: draw_card(cv, rng, spec, spec.red); break;
    case SynthClass::YellowCard: draw_card(cv, rng, spec, spec.yellow); break;
    case SynthClass::CenterCircle: draw_center_circle(cv, rng); break;
    case SynthClass::LeftPenaltyArea: draw_left_penalty_area(cv, rng); break;
    case SynthClass::RightPenaltyArea: draw_left_penalty_area(cv, rng); break;
    case SynthClass::OtherSoccer: draw_other_soccer(cv, rng); break;
    case SynthClass::NonSoccer: draw_non_soccer(cv, rng); break;
  }
  Tensor img = cls == SynthClass::RightPenaltyArea ? flip_horizontal(cv.image()) : cv.image();
  Rng noise(noise_seed);
  for (double& v : img.values()) v = std::clamp(v + spec.noise * standard_normal(noise), 0.0, 1.0);
  quantize(img);
  return img;
}

}  // namespace sevdet::synth

#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string_view>

namespace sevdet {

/// The ten dataset classes: seven events followed by three scene classes.
enum class ClassLabel : std::size_t {
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
};

inline constexpr std::size_t kNumClassLabels = 10;
inline constexpr std::array<ClassLabel, kNumClassLabels> kAllClassLabels{
    ClassLabel::PenaltyKick,  ClassLabel::CornerKick, ClassLabel::FreeKick,
    ClassLabel::Tackle,       ClassLabel::ToSubstitute, ClassLabel::RedCard,
    ClassLabel::YellowCard,   ClassLabel::CenterCircle, ClassLabel::LeftPenaltyArea,
    ClassLabel::RightPenaltyArea};

/// Merged-card taxonomy used by the event classifier.
enum class NineClass : std::size_t {
  PenaltyKick,
  CornerKick,
  FreeKick,
  Tackle,
  ToSubstitute,
  Card,
  CenterCircle,
  LeftPenaltyArea,
  RightPenaltyArea,
};

inline constexpr std::size_t kNumNineClasses = 9;
inline constexpr std::array<NineClass, kNumNineClasses> kAllNineClasses{
    NineClass::PenaltyKick,  NineClass::CornerKick, NineClass::FreeKick,
    NineClass::Tackle,       NineClass::ToSubstitute, NineClass::Card,
    NineClass::CenterCircle, NineClass::LeftPenaltyArea, NineClass::RightPenaltyArea};

/// Event kinds a detection can report. Card colours are distinct kinds.
enum class EventKind : std::size_t {
  PenaltyKick,
  CornerKick,
  FreeKick,
  Tackle,
  ToSubstitute,
  RedCard,
  YellowCard,
};

inline constexpr std::size_t kNumEventKinds = 7;
inline constexpr std::array<EventKind, kNumEventKinds> kAllEventKinds{
    EventKind::PenaltyKick, EventKind::CornerKick,   EventKind::FreeKick, EventKind::Tackle,
    EventKind::ToSubstitute, EventKind::RedCard, EventKind::YellowCard};

constexpr std::size_t index_of(ClassLabel c) { return static_cast<std::size_t>(c); }
constexpr std::size_t index_of(NineClass c) { return static_cast<std::size_t>(c); }
constexpr std::size_t index_of(EventKind c) { return static_cast<std::size_t>(c); }

constexpr bool is_event(ClassLabel c) { return index_of(c) < kNumEventKinds; }
constexpr bool is_scene(ClassLabel c) { return !is_event(c); }
constexpr bool is_card(ClassLabel c) {
  return c == ClassLabel::RedCard || c == ClassLabel::YellowCard;
}

/// RedCard and YellowCard collapse to Card; every other label maps to its namesake.
constexpr NineClass merge_card_labels(ClassLabel c) {
  switch (c) {
    case ClassLabel::PenaltyKick: return NineClass::PenaltyKick;
    case ClassLabel::CornerKick: return NineClass::CornerKick;
    case ClassLabel::FreeKick: return NineClass::FreeKick;
    case ClassLabel::Tackle: return NineClass::Tackle;
    case ClassLabel::ToSubstitute: return NineClass::ToSubstitute;
    case ClassLabel::RedCard:
    case ClassLabel::YellowCard: return NineClass::Card;
    case ClassLabel::CenterCircle: return NineClass::CenterCircle;
    case ClassLabel::LeftPenaltyArea: return NineClass::LeftPenaltyArea;
    case ClassLabel::RightPenaltyArea: return NineClass::RightPenaltyArea;
  }
  return NineClass::Card;
}

/// True exactly for the three no-highlight scene classes.
constexpr bool is_scene_class(NineClass c) {
  return c == NineClass::CenterCircle || c == NineClass::LeftPenaltyArea ||
         c == NineClass::RightPenaltyArea;
}

/// Event kind for a non-card, non-scene nine-class label.
std::optional<EventKind> direct_event_kind(NineClass c);
std::optional<EventKind> event_kind_of(ClassLabel c);

std::string_view to_string(ClassLabel c);
std::string_view to_string(NineClass c);
std::string_view to_string(EventKind c);

std::optional<ClassLabel> parse_class_label(std::string_view s);
std::optional<NineClass> parse_nine_class(std::string_view s);
std::optional<EventKind> parse_event_kind(std::string_view s);

}  // namespace sevdet

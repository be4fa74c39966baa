#include "sevdet/classifier/labels.hpp"

namespace sevdet {

namespace {
constexpr std::array<std::string_view, kNumClassLabels> kClassNames{
    "PenaltyKick", "CornerKick", "FreeKick", "Tackle", "ToSubstitute",
    "RedCard", "YellowCard", "CenterCircle", "LeftPenaltyArea", "RightPenaltyArea"};
constexpr std::array<std::string_view, kNumNineClasses> kNineNames{
    "PenaltyKick", "CornerKick",   "FreeKick",        "Tackle",          "ToSubstitute",
    "Card",        "CenterCircle", "LeftPenaltyArea", "RightPenaltyArea"};
}  // namespace

std::optional<EventKind> direct_event_kind(NineClass c) {
  switch (c) {
    case NineClass::PenaltyKick: return EventKind::PenaltyKick;
    case NineClass::CornerKick: return EventKind::CornerKick;
    case NineClass::FreeKick: return EventKind::FreeKick;
    case NineClass::Tackle: return EventKind::Tackle;
    case NineClass::ToSubstitute: return EventKind::ToSubstitute;
    default: return std::nullopt;
  }
}

std::optional<EventKind> event_kind_of(ClassLabel c) {
  if (!is_event(c)) return std::nullopt;
  return static_cast<EventKind>(index_of(c));
}

std::string_view to_string(ClassLabel c) { return kClassNames.at(index_of(c)); }
std::string_view to_string(NineClass c) { return kNineNames.at(index_of(c)); }
std::string_view to_string(EventKind c) { return kClassNames.at(index_of(c)); }

std::optional<ClassLabel> parse_class_label(std::string_view s) {
  for (std::size_t i = 0; i < kClassNames.size(); ++i) {
    if (kClassNames[i] == s) return static_cast<ClassLabel>(i);
  }
  return std::nullopt;
}

std::optional<NineClass> parse_nine_class(std::string_view s) {
  for (std::size_t i = 0; i < kNineNames.size(); ++i) {
    if (kNineNames[i] == s) return static_cast<NineClass>(i);
  }
  return std::nullopt;
}

std::optional<EventKind> parse_event_kind(std::string_view s) {
  auto c = parse_class_label(s);
  if (!c) return std::nullopt;
  return event_kind_of(*c);
}

}  // namespace sevdet

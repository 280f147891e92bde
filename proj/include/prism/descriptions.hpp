#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace prism {

/// Planar location vocabulary. Each label owns a fixed axis-aligned rectangle
/// in normalized [0,1]^2 coordinates; {left,right} and {top,bottom} partition
/// the unit square exactly.
enum class LocationLabel { left_half, right_half, top_half, bottom_half, full };

inline constexpr std::array<LocationLabel, 5> kAllLocations = {
    LocationLabel::left_half, LocationLabel::right_half, LocationLabel::top_half,
    LocationLabel::bottom_half, LocationLabel::full};

const char* location_name(LocationLabel loc);

/// Throws unknown-location naming the token when it is not in the vocabulary.
LocationLabel parse_location(std::string_view token);

struct Rect {
  double x0, y0, x1, y1;

  bool operator==(const Rect&) const = default;
};

Rect location_rect(LocationLabel loc);

/// PropBank-style semantic role header attached to relational clauses.
struct RelationHeader {
  std::string arg0;
  std::string pred;
  std::string arg1;      // may be empty
  std::string argm_loc;  // may be empty

  bool operator==(const RelationHeader&) const = default;
};

/// "[ARG0: …|PRED: …|ARG1: …|ARGM-LOC: …]". pred must be non-empty.
std::string serialize_header(const RelationHeader& header);

/// Parses a header at the start of a description field. Returns the header
/// and the byte count consumed (including one following space, if present),
/// or nullopt when the field does not start with one.
std::optional<std::pair<RelationHeader, std::size_t>> parse_header_prefix(std::string_view desc);

/// Drops a leading relation header, if any. The diffusion text conditioning
/// uses this; parse/serialize keep headers verbatim.
std::string strip_relation_header(std::string_view desc);

struct ObjectTuple {
  std::string name;
  std::string desc;  // optional leading RelationHeader, kept verbatim
  LocationLabel loc;

  bool operator==(const ObjectTuple&) const = default;
};

/// Scene description: exactly two object tuples plus background text.
struct StructuredDescription {
  std::array<ObjectTuple, 2> objects;
  std::string background;

  bool operator==(const StructuredDescription&) const = default;
};

/// Canonical surface form "(o1: d1: loc1), (o2: d2: loc2), bg". Separator
/// characters inside fields are backslash-escaped.
std::string serialize_description(const StructuredDescription& d);

/// Inverse of serialize_description. Errors carry the byte offset of the
/// offending token: wrong arity, unknown location, duplicate locations.
StructuredDescription parse_description(std::string_view text);

/// Accepts either the surface syntax or the JSON mirror
/// {"objects":[{"name","desc","loc"}],"background"} (used for files).
StructuredDescription parse_description_any(std::string_view text);

/// Deterministic oracle prompt: names the keyword, the location vocabulary,
/// the header convention, and the required output syntax.
std::string build_prompt(std::string_view keyword);

}  // namespace prism

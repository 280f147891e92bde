#include "prism/descriptions.hpp"

#include <cctype>

#include "json.hpp"
#include "prism/common.hpp"

namespace prism {

const char* location_name(LocationLabel loc) {
  switch (loc) {
    case LocationLabel::left_half: return "left-half";
    case LocationLabel::right_half: return "right-half";
    case LocationLabel::top_half: return "top-half";
    case LocationLabel::bottom_half: return "bottom-half";
    case LocationLabel::full: return "full";
  }
  throw Error(ErrorCode::unknown_location, "corrupt location enum");
}

LocationLabel parse_location(std::string_view token) {
  for (LocationLabel loc : kAllLocations) {
    if (token == location_name(loc)) return loc;
  }
  throw Error(ErrorCode::unknown_location, "'" + std::string(token) + "' is not a location label");
}

Rect location_rect(LocationLabel loc) {
  switch (loc) {
    case LocationLabel::left_half: return {0.0, 0.0, 0.5, 1.0};
    case LocationLabel::right_half: return {0.5, 0.0, 1.0, 1.0};
    case LocationLabel::top_half: return {0.0, 0.0, 1.0, 0.5};
    case LocationLabel::bottom_half: return {0.0, 0.5, 1.0, 1.0};
    case LocationLabel::full: return {0.0, 0.0, 1.0, 1.0};
  }
  throw Error(ErrorCode::unknown_location, "corrupt location enum");
}

std::string serialize_header(const RelationHeader& header) {
  if (header.pred.empty()) throw Error(ErrorCode::parse, "relation header requires a predicate");
  return "[ARG0: " + header.arg0 + "|PRED: " + header.pred + "|ARG1: " + header.arg1 +
         "|ARGM-LOC: " + header.argm_loc + "]";
}

std::optional<std::pair<RelationHeader, std::size_t>> parse_header_prefix(std::string_view desc) {
  constexpr std::string_view kOpen = "[ARG0: ";
  if (desc.substr(0, kOpen.size()) != kOpen) return std::nullopt;
  const std::size_t close = desc.find(']');
  if (close == std::string_view::npos) return std::nullopt;

  // Fields appear in fixed order; anything else is not a header.
  std::string_view body = desc.substr(kOpen.size(), close - kOpen.size());
  RelationHeader header;
  std::string* fields[4] = {&header.arg0, &header.pred, &header.arg1, &header.argm_loc};
  constexpr std::string_view kTags[3] = {"|PRED: ", "|ARG1: ", "|ARGM-LOC: "};
  for (int i = 0; i < 3; ++i) {
    const std::size_t tag = body.find(kTags[i]);
    if (tag == std::string_view::npos) return std::nullopt;
    *fields[i] = std::string(body.substr(0, tag));
    body.remove_prefix(tag + kTags[i].size());
  }
  *fields[3] = std::string(body);
  if (header.pred.empty()) return std::nullopt;

  std::size_t consumed = close + 1;
  if (consumed < desc.size() && desc[consumed] == ' ') ++consumed;
  return std::make_pair(std::move(header), consumed);
}

std::string strip_relation_header(std::string_view desc) {
  if (auto parsed = parse_header_prefix(desc)) return std::string(desc.substr(parsed->second));
  return std::string(desc);
}

namespace {

// Separator characters escaped inside field values, plus the escape
// character itself. Inside a tuple the parentheses delimit the fields, so a
// comma is unambiguous there and stays raw; the background field escapes it.
std::string escape_field(std::string_view field, bool escape_comma) {
  std::string out;
  out.reserve(field.size());
  for (char c : field) {
    if (c == '\\' || c == ':' || c == '(' || c == ')' || (escape_comma && c == ',')) {
      out.push_back('\\');
    }
    out.push_back(c);
  }
  return out;
}

[[noreturn]] void fail(ErrorCode code, std::size_t offset, const std::string& what) {
  throw Error(code, what + " at byte " + std::to_string(offset));
}

struct Cursor {
  std::string_view text;
  std::size_t pos = 0;

  bool done() const { return pos >= text.size(); }
  char peek() const { return text[pos]; }

  void skip_space() {
    while (!done() && std::isspace(static_cast<unsigned char>(peek()))) ++pos;
  }

  void expect(char c, const char* what) {
    if (done() || peek() != c) fail(ErrorCode::parse, pos, std::string("expected ") + what);
    ++pos;
  }

  // Reads until an unescaped stop character, unescaping as it goes. The stop
  // character is not consumed.
  std::string field_until(std::string_view stops) {
    std::string out;
    while (!done()) {
      const char c = peek();
      if (c == '\\') {
        if (pos + 1 >= text.size()) fail(ErrorCode::parse, pos, "dangling escape");
        out.push_back(text[pos + 1]);
        pos += 2;
        continue;
      }
      if (stops.find(c) != std::string_view::npos) break;
      out.push_back(c);
      ++pos;
    }
    return out;
  }
};

ObjectTuple parse_tuple(Cursor& cur) {
  cur.expect('(', "'(' opening an object tuple");
  const std::size_t start = cur.pos;
  const std::string name = trim(cur.field_until(":)"));
  if (cur.done() || cur.peek() == ')') fail(ErrorCode::wrong_arity, cur.pos, "tuple needs 3 fields");
  cur.expect(':', "':'");
  const std::string desc = trim(cur.field_until(":)"));
  if (cur.done() || cur.peek() == ')') fail(ErrorCode::wrong_arity, cur.pos, "tuple needs 3 fields");
  cur.expect(':', "':'");
  cur.skip_space();  // offsets in errors point at the token, not its padding
  const std::size_t loc_offset = cur.pos;
  const std::string loc_token = trim(cur.field_until(":)"));
  if (!cur.done() && cur.peek() == ':') fail(ErrorCode::wrong_arity, cur.pos, "tuple has extra fields");
  cur.expect(')', "')' closing an object tuple");
  if (name.empty()) fail(ErrorCode::parse, start, "empty object name");
  if (desc.empty()) fail(ErrorCode::parse, start, "empty object description");
  LocationLabel loc;
  try {
    loc = parse_location(loc_token);
  } catch (const Error&) {
    fail(ErrorCode::unknown_location, loc_offset, "'" + loc_token + "' is not a location label");
  }
  return ObjectTuple{name, desc, loc};
}

}  // namespace

std::string serialize_description(const StructuredDescription& d) {
  if (d.objects[0].loc == d.objects[1].loc) {
    throw Error(ErrorCode::duplicate_location, "objects share location label '" +
                                                   std::string(location_name(d.objects[0].loc)) + "'");
  }
  std::string out;
  for (const ObjectTuple& obj : d.objects) {
    if (obj.name.empty() || obj.desc.empty()) {
      throw Error(ErrorCode::parse, "object tuple fields must be non-empty");
    }
    out += "(" + escape_field(obj.name, false) + ": " + escape_field(obj.desc, false) + ": " +
           location_name(obj.loc) + "), ";
  }
  out += escape_field(d.background, true);
  return out;
}

StructuredDescription parse_description(std::string_view text) {
  Cursor cur{text};
  cur.skip_space();

  StructuredDescription d;
  for (int i = 0; i < 2; ++i) {
    if (cur.done() || cur.peek() != '(') {
      fail(ErrorCode::wrong_arity, cur.pos, "expected 2 object tuples, found " + std::to_string(i));
    }
    d.objects[i] = parse_tuple(cur);
    cur.skip_space();
    cur.expect(',', "',' after an object tuple");
    cur.skip_space();
  }
  if (!cur.done() && cur.peek() == '(') {
    fail(ErrorCode::wrong_arity, cur.pos, "expected 2 object tuples, found more");
  }
  if (d.objects[0].loc == d.objects[1].loc) {
    fail(ErrorCode::duplicate_location, cur.pos,
         "objects share location label '" + std::string(location_name(d.objects[0].loc)) + "'");
  }
  d.background = trim(cur.field_until(""));
  if (d.background.empty()) fail(ErrorCode::parse, cur.pos, "empty background");
  return d;
}

StructuredDescription parse_description_any(std::string_view text) {
  const std::string trimmed = trim(text);
  if (trimmed.empty() || trimmed.front() != '{') return parse_description(text);

  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(trimmed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, std::string("bad description JSON: ") + e.what());
  }
  try {
    const auto& objects = doc.at("objects");
    if (!objects.is_array() || objects.size() != 2) {
      throw Error(ErrorCode::wrong_arity,
                  "expected 2 object tuples, found " + std::to_string(objects.size()));
    }
    StructuredDescription d;
    for (int i = 0; i < 2; ++i) {
      d.objects[i].name = objects.at(i).at("name").get<std::string>();
      d.objects[i].desc = objects.at(i).at("desc").get<std::string>();
      d.objects[i].loc = parse_location(objects.at(i).at("loc").get<std::string>());
    }
    d.background = doc.at("background").get<std::string>();
    if (d.objects[0].loc == d.objects[1].loc) {
      throw Error(ErrorCode::duplicate_location, "objects share a location label");
    }
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, std::string("bad description JSON: ") + e.what());
  }
}

std::string build_prompt(std::string_view keyword) {
  const std::string key = trim(keyword);
  if (key.empty()) throw Error(ErrorCode::usage, "prompt keyword must be non-empty");
  std::string labels;
  for (LocationLabel loc : kAllLocations) {
    if (!labels.empty()) labels += ", ";
    labels += location_name(loc);
  }
  return "Describe the two most important objects in the image. For each object, give its "
         "attributes and its relationships to the other object, emphasizing " + key + ". "
         "Assign each object exactly one location label from: " + labels + ". "
         "Prefix any relational clause with a PropBank-style header of the form "
         "[ARG0: agent|PRED: predicate|ARG1: patient|ARGM-LOC: place]. "
         "Then describe the background. "
         "Answer with exactly one line of the form "
         "(name: description: location), (name: description: location), background.";
}

}  // namespace prism

#pragma once

#include <sdlab/core/types.hpp>

#include <nlohmann/json.hpp>

#include <array>
#include <stdexcept>
#include <string>

namespace sdlab::scenes {

enum class Shape { circle = 0, square = 1, triangle = 2, cross = 3 };
enum class Accessory { none = 0, dot = 1, ring = 2 };

constexpr int kNumShapes = 4;
constexpr int kNumColors = 6;
constexpr int kNumAccessories = 3;
constexpr int kNumBackgrounds = 4;

/// Fixed palette; indices are part of the prompt-code contract and must not
/// be reordered.
constexpr std::array<std::array<double, 3>, kNumColors> kPalette = {{
    {0.90, 0.15, 0.15},  // red
    {0.15, 0.80, 0.20},  // green
    {0.20, 0.30, 0.90},  // blue
    {0.95, 0.85, 0.20},  // yellow
    {0.85, 0.20, 0.80},  // magenta
    {0.20, 0.85, 0.85},  // cyan
}};

constexpr std::array<std::array<double, 3>, kNumBackgrounds> kBackgrounds = {{
    {0.12, 0.12, 0.12},
    {0.85, 0.85, 0.85},
    {0.08, 0.10, 0.25},
    {0.90, 0.85, 0.70},
}};

constexpr std::array<const char*, kNumShapes> kShapeNames = {"circle", "square", "triangle",
                                                            "cross"};
constexpr std::array<const char*, kNumColors> kColorNames = {"red",    "green",   "blue",
                                                             "yellow", "magenta", "cyan"};
constexpr std::array<const char*, kNumAccessories> kAccessoryNames = {"none", "dot", "ring"};

/// Procedural scene description: what to draw and where.
struct SceneSpec {
  Shape shape = Shape::circle;
  int color_id = 0;
  Accessory accessory = Accessory::none;
  int background_id = 0;
  double pos_x = 0.0;  // center offset, [-0.2, 0.2]
  double pos_y = 0.0;
  double scale = 0.7;  // [0.5, 0.9]

  void validate() const {
    if (int(shape) < 0 || int(shape) >= kNumShapes)
      throw std::invalid_argument("SceneSpec: shape out of range");
    if (color_id < 0 || color_id >= kNumColors)
      throw std::invalid_argument("SceneSpec: color_id out of range");
    if (int(accessory) < 0 || int(accessory) >= kNumAccessories)
      throw std::invalid_argument("SceneSpec: accessory out of range");
    if (background_id < 0 || background_id >= kNumBackgrounds)
      throw std::invalid_argument("SceneSpec: background_id out of range");
    if (pos_x < -0.2 || pos_x > 0.2 || pos_y < -0.2 || pos_y > 0.2)
      throw std::invalid_argument("SceneSpec: position outside [-0.2, 0.2]");
    if (scale < 0.5 || scale > 0.9)
      throw std::invalid_argument("SceneSpec: scale outside [0.5, 0.9]");
  }

  bool operator==(const SceneSpec&) const = default;
};

/// Condition index for the denoiser. Injective over the
/// (shape, color, accessory) triple; the last index is the reserved null
/// code used for unconditional prediction.
struct PromptCode {
  int value = 0;

  static constexpr int num_attribute_codes() { return kNumShapes * kNumColors * kNumAccessories; }
  static constexpr int vocab_size() { return num_attribute_codes() + 1; }
  static PromptCode null() { return {num_attribute_codes()}; }
  bool is_null() const { return value == num_attribute_codes(); }

  static PromptCode encode(Shape s, int color, Accessory a) {
    return {(int(s) * kNumColors + color) * kNumAccessories + int(a)};
  }
  static PromptCode encode(const SceneSpec& spec) {
    return encode(spec.shape, spec.color_id, spec.accessory);
  }

  Shape shape() const { return Shape(value / (kNumColors * kNumAccessories)); }
  int color_id() const { return (value / kNumAccessories) % kNumColors; }
  Accessory accessory() const { return Accessory(value % kNumAccessories); }

  bool operator==(const PromptCode&) const = default;
};

/// Short human-readable description, used as bench prompts.
inline std::string describe(Shape shape, int color, Accessory acc) {
  std::string s = std::string("a ") + kColorNames[std::size_t(color)] + " " +
                  kShapeNames[std::size_t(int(shape))];
  if (acc == Accessory::dot) s += " with a dot";
  if (acc == Accessory::ring) s += " with a ring";
  return s;
}
inline std::string describe(const SceneSpec& spec) {
  return describe(spec.shape, spec.color_id, spec.accessory);
}
inline std::string describe(PromptCode code) {
  if (code.is_null()) return "(unconditional)";
  return describe(code.shape(), code.color_id(), code.accessory());
}

inline nlohmann::ordered_json spec_to_json(const SceneSpec& spec) {
  nlohmann::ordered_json j;
  j["shape"] = kShapeNames[std::size_t(int(spec.shape))];
  j["color"] = kColorNames[std::size_t(spec.color_id)];
  j["accessory"] = kAccessoryNames[std::size_t(int(spec.accessory))];
  j["background"] = spec.background_id;
  j["position"] = {spec.pos_x, spec.pos_y};
  j["scale"] = spec.scale;
  return j;
}

template <class Names>
int lookup_name(const Names& names, const std::string& value, const char* what) {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (value == names[i]) return int(i);
  throw std::invalid_argument(std::string("unknown ") + what + ": " + value);
}

inline SceneSpec spec_from_json(const nlohmann::json& j) {
  SceneSpec spec;
  spec.shape = Shape(lookup_name(kShapeNames, j.at("shape").get<std::string>(), "shape"));
  spec.color_id = lookup_name(kColorNames, j.at("color").get<std::string>(), "color");
  spec.accessory =
      Accessory(lookup_name(kAccessoryNames, j.at("accessory").get<std::string>(), "accessory"));
  spec.background_id = j.at("background").get<int>();
  spec.pos_x = j.at("position").at(0).get<double>();
  spec.pos_y = j.at("position").at(1).get<double>();
  spec.scale = j.at("scale").get<double>();
  spec.validate();
  return spec;
}

}  // namespace sdlab::scenes

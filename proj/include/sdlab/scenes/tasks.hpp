#pragma once

#include <sdlab/scenes/scene.hpp>

#include <array>
#include <stdexcept>
#include <string>

namespace sdlab::scenes {

enum class EditType { texturing = 0, addition = 1, translation = 2 };

constexpr std::array<const char*, 3> kEditTypeNames = {"texturing", "addition", "translation"};

inline const char* edit_type_name(EditType t) { return kEditTypeNames[std::size_t(int(t))]; }

inline EditType edit_type_from_name(const std::string& s) {
  return EditType(lookup_name(kEditTypeNames, s, "edit type"));
}

struct EditTask {
  EditType type = EditType::texturing;
  SceneSpec src_spec;
  SceneSpec tgt_spec;
  PromptCode src_code;
  PromptCode tgt_code;
};

/// The three canonical single-attribute edits of a scene: recolour the
/// object (texturing), add or swap the accessory (addition), and change the
/// shape (translation). Each task alters exactly one attribute.
inline std::array<EditTask, 3> make_edit_tasks(const SceneSpec& spec) {
  spec.validate();
  std::array<EditTask, 3> tasks;

  SceneSpec tex = spec;
  tex.color_id = (spec.color_id + 2) % kNumColors;
  tasks[0] = {EditType::texturing, spec, tex, PromptCode::encode(spec), PromptCode::encode(tex)};

  SceneSpec add = spec;
  add.accessory = spec.accessory == Accessory::none
                      ? Accessory::dot
                      : (spec.accessory == Accessory::dot ? Accessory::ring : Accessory::dot);
  tasks[1] = {EditType::addition, spec, add, PromptCode::encode(spec), PromptCode::encode(add)};

  SceneSpec tra = spec;
  tra.shape = Shape((int(spec.shape) + 1) % kNumShapes);
  tasks[2] = {EditType::translation, spec, tra, PromptCode::encode(spec),
              PromptCode::encode(tra)};
  return tasks;
}

}  // namespace sdlab::scenes

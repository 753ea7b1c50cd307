#pragma once

#include <string>
#include <vector>

#include "krkc/error.hpp"

namespace krkc {

enum class TeacherUpdates { none, frozen, refreshing };

// A training strategy is a set of switches on the single trainer.
struct Strategy {
  std::string name;
  bool use_exemplars = false;
  bool use_distillation = false;
  TeacherUpdates teacher = TeacherUpdates::none;
  bool msc = false;    // model-space consolidation at task end
  bool fsc = false;    // fused working+memory features for retrieval
  bool joint = false;  // pool every task into one training set

  bool operator==(const Strategy&) const = default;
};

inline void validate(const Strategy& s) {
  auto fail = [&](const std::string& why) { throw Error("strategy '" + s.name + "': " + why); };
  if (s.joint) {
    if (s.use_exemplars || s.use_distillation || s.teacher != TeacherUpdates::none || s.msc || s.fsc) {
      fail("joint training takes no other switches");
    }
    return;
  }
  if (s.use_distillation != (s.teacher != TeacherUpdates::none)) fail("distillation requires a teacher and vice versa");
  if (s.teacher == TeacherUpdates::none && (s.msc || s.fsc)) fail("consolidation requires a memory model");
  if (s.teacher == TeacherUpdates::refreshing && !s.use_exemplars) fail("refreshing requires exemplars");
}

namespace strategies {

inline Strategy naive() { return {"naive", false, false, TeacherUpdates::none, false, false, false}; }
// Rehearsal with a frozen teacher; identical to rehearsal alone (KRH).
inline Strategy frozen_teacher() { return {"frozen_teacher", true, true, TeacherUpdates::frozen, false, false, false}; }
inline Strategy krh_krf() { return {"krh_krf", true, true, TeacherUpdates::refreshing, false, false, false}; }
inline Strategy krh_krf_msc() { return {"krh_krf_msc", true, true, TeacherUpdates::refreshing, true, false, false}; }
inline Strategy krh_krf_fsc() { return {"krh_krf_fsc", true, true, TeacherUpdates::refreshing, false, true, false}; }
inline Strategy krh_msc_fsc() { return {"krh_msc_fsc", true, true, TeacherUpdates::frozen, true, true, false}; }
inline Strategy krkc() { return {"krkc", true, true, TeacherUpdates::refreshing, true, true, false}; }
inline Strategy joint() { return {"joint", false, false, TeacherUpdates::none, false, false, true}; }

inline std::vector<Strategy> all() {
  return {naive(), frozen_teacher(), krh_krf(), krh_krf_msc(), krh_krf_fsc(), krh_msc_fsc(), krkc(), joint()};
}

inline Strategy by_name(const std::string& name) {
  if (name == "krh") return frozen_teacher();
  for (auto& s : all()) {
    if (s.name == name) return s;
  }
  throw Error("unknown strategy '" + name + "'");
}

}  // namespace strategies

}  // namespace krkc

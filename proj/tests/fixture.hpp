#pragma once

#include <cstdlib>
#include <filesystem>

#include "xmb/experiment.hpp"

namespace fx {

inline std::filesystem::path cache_dir() {
  if (const char* d = std::getenv("XMB_TEST_CACHE")) return d;
  return std::filesystem::temp_directory_path() / "xmb-test-cache";
}

// Default experiment staged under the shared cache, so the clean and
// poisoned checkpoints are trained once per build tree.
inline xmb::Experiment& experiment() {
  static xmb::Experiment e = [] {
    xmb::ExperimentConfig c;
    c.output_dir = cache_dir().string();
    return xmb::Experiment(c);
  }();
  return e;
}

inline const xmb::World& world() { return experiment().world(); }
inline const xmb::Pipeline& clean() { return experiment().clean(); }
inline const xmb::DoorArtifacts& door(xmb::Modality d) { return experiment().door(d); }

}  // namespace fx

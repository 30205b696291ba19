#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "attentropy/entropy.hpp"
#include "attentropy/vit.hpp"

namespace attentropy::cli {

enum ExitCode : int { kOk = 0, kRuntimeError = 1, kUsageError = 2 };

// Runs one command line (args[0] is the program name). Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Per-layer entropy maps for one frame, merged across sliding windows when
// the frame is larger than the model input.
struct EntropyBundle {
  std::vector<EntropyMap> maps;
  std::size_t image_width = 0;
  std::size_t image_height = 0;
  std::size_t windows = 1;
  bool has_class_token = false;
  bool renormalize = true;
};

struct SlidingOptions {
  std::size_t window = 0;  // 0: model input size
  std::size_t stride = 0;  // 0: window / 2 rounded down to a patch multiple
  ExtractOptions extract;
};

// Windows are placed on patch boundaries and merged on the frame's patch
// grid. Frame dimensions must be multiples of the patch size.
EntropyBundle extract_entropy(const GrayImage& image, const LoadedModel& model,
                              const SlidingOptions& options,
                              AttentionStack* single_pass_stack = nullptr);

void save_entropy_bundle(const EntropyBundle& bundle, const std::filesystem::path& dir);
EntropyBundle load_entropy_bundle(const std::filesystem::path& dir);

// Aggregate, orient and interpolate to the frame resolution.
ScoreMap score_frame(const EntropyBundle& bundle, const LayerAggregation& agg,
                     std::optional<std::size_t> common_grid = std::nullopt);

}  // namespace attentropy::cli

#pragma once

// Procedural temporal-reasoning clips.
//
// A bright square moves across a static smooth-noise background on a torus.
// The class is the motion direction (left, right, up, down) and, for K = 8,
// also the phase (moving early then stopping, or stopping then moving late).
// Start positions are uniform on the torus, so every single frame has the
// same position distribution for every class, and reversing a clip in time
// yields a valid clip of the opposite class with the same background.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

#include "tdrl/tensor.hpp"

namespace tdrl {

enum class Direction { left = 0, right = 1, up = 2, down = 3 };
enum class Phase { uniform = 0, early_then_stop = 1, stop_then_late = 2 };

struct GenSpec {
  std::size_t classes = 4;  // 4 or 8
  std::size_t frames = 8;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t square = 5;
  std::size_t speed = 2;  // pixels per moving frame
  float square_value = 1.0f;
  float background_max = 0.6f;
  std::size_t background_grid = 8;  // control points per axis of the smooth background

  void validate() const;
};

struct ClipParams {
  int label = 0;
  Direction direction = Direction::left;
  Phase phase = Phase::uniform;
  std::vector<std::size_t> x;  // top-left corner of the square per frame
  std::vector<std::size_t> y;
  std::uint64_t background_seed = 0;
};

// Direction and phase carried by a class label.
Direction class_direction(int label, const GenSpec& spec);
Phase class_phase(int label, const GenSpec& spec);
int class_label(Direction direction, Phase phase, const GenSpec& spec);

// The background and start position depend only on seed, not on the class.
ClipParams sample_clip_params(std::uint32_t seed, int label, const GenSpec& spec);

// Parameters of the time-reversed clip: opposite direction, swapped phase,
// same background.
ClipParams mirror_params(const ClipParams& params, const GenSpec& spec);

// [T, 1, H, W] with values in [0, 1].
Tensor render_clip(const ClipParams& params, const GenSpec& spec);

Tensor generate_clip(std::uint32_t seed, int label, const GenSpec& spec);

// Reverses the frame order of a [T, ...] or [N, T, ...] clip tensor.
Tensor reverse_time(const Tensor& clip, bool batched);

struct ClipBatch {
  Tensor clips;  // [N, T, 1, H, W]
  std::vector<int> labels;
  std::vector<std::uint32_t> seeds;

  std::size_t size() const { return labels.size(); }
  // Sub-batch made of the given rows.
  ClipBatch gather(const std::vector<std::size_t>& rows) const;
};

ClipBatch generate_batch(const std::vector<std::uint32_t>& seeds, const std::vector<int>& labels,
                         const GenSpec& spec);

struct DataSplit {
  ClipBatch train;
  ClipBatch val;
};

// Seeds are distinct 24-bit values (exact in float32); train and val never share a seed.
// Labels cycle through the classes.
DataSplit generate_split(std::size_t n_train, std::size_t n_val, std::uint64_t seed, const GenSpec& spec);

inline constexpr std::string_view kClipCacheMagic = "CLIPS1";
void save_clip_cache(const std::filesystem::path& path, const ClipBatch& batch);
ClipBatch load_clip_cache(const std::filesystem::path& path);

// Tracks the square's centroid through a [T,1,H,W] clip and returns the
// class implied by its motion.
int centroid_oracle(const Tensor& clip, const GenSpec& spec);

}  // namespace tdrl

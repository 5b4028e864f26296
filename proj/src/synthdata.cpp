#include "tdrl/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "tdrl/checkpoint.hpp"

namespace tdrl {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

double unit_real(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Cumulative displacement after frame t for a motion profile.
std::size_t displacement(Phase phase, std::size_t t, std::size_t frames, std::size_t speed) {
  const std::size_t moving = frames / 2;
  switch (phase) {
    case Phase::uniform: return speed * t;
    case Phase::early_then_stop: return speed * std::min(t, moving);
    case Phase::stop_then_late: {
      // time reversal of early_then_stop
      const std::size_t lag = frames - 1 - moving;
      return t > lag ? speed * (t - lag) : 0;
    }
  }
  return 0;
}

}  // namespace

void GenSpec::validate() const {
  if (classes != 4 && classes != 8) throw std::invalid_argument("gen: classes must be 4 or 8");
  if (frames < 2) throw std::invalid_argument("gen: frames must be >= 2");
  if (square == 0 || square >= width || square >= height) throw std::invalid_argument("gen: square must fit the frame");
  if (speed == 0) throw std::invalid_argument("gen: speed must be positive");
  if (background_grid < 2) throw std::invalid_argument("gen: background_grid must be >= 2");
  if (!(background_max >= 0.0f && background_max < square_value && square_value <= 1.0f)) {
    throw std::invalid_argument("gen: need 0 <= background_max < square_value <= 1");
  }
}

Direction class_direction(int label, const GenSpec& spec) {
  if (label < 0 || static_cast<std::size_t>(label) >= spec.classes) {
    throw std::out_of_range("gen: class " + std::to_string(label) + " outside [0, " + std::to_string(spec.classes) + ")");
  }
  return static_cast<Direction>(label % 4);
}

Phase class_phase(int label, const GenSpec& spec) {
  class_direction(label, spec);
  if (spec.classes == 4) return Phase::uniform;
  return label < 4 ? Phase::early_then_stop : Phase::stop_then_late;
}

int class_label(Direction direction, Phase phase, const GenSpec& spec) {
  const int d = static_cast<int>(direction);
  if (spec.classes == 4) {
    if (phase != Phase::uniform) throw std::invalid_argument("gen: phase classes need classes = 8");
    return d;
  }
  if (phase == Phase::uniform) throw std::invalid_argument("gen: classes = 8 needs a phase");
  return phase == Phase::early_then_stop ? d : d + 4;
}

ClipParams sample_clip_params(std::uint32_t seed, int label, const GenSpec& spec) {
  spec.validate();
  ClipParams p;
  p.label = label;
  p.direction = class_direction(label, spec);
  p.phase = class_phase(label, spec);
  std::mt19937_64 rng(splitmix64(seed));
  p.background_seed = rng();
  const std::size_t x0 = rng() % spec.width;
  const std::size_t y0 = rng() % spec.height;
  p.x.resize(spec.frames);
  p.y.resize(spec.frames);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    const std::size_t s = displacement(p.phase, t, spec.frames, spec.speed);
    std::size_t x = x0, y = y0;
    switch (p.direction) {
      case Direction::left: x = (x0 + spec.width - s % spec.width) % spec.width; break;
      case Direction::right: x = (x0 + s) % spec.width; break;
      case Direction::up: y = (y0 + spec.height - s % spec.height) % spec.height; break;
      case Direction::down: y = (y0 + s) % spec.height; break;
    }
    p.x[t] = x;
    p.y[t] = y;
  }
  return p;
}

ClipParams mirror_params(const ClipParams& params, const GenSpec& spec) {
  ClipParams m = params;
  std::reverse(m.x.begin(), m.x.end());
  std::reverse(m.y.begin(), m.y.end());
  switch (params.direction) {
    case Direction::left: m.direction = Direction::right; break;
    case Direction::right: m.direction = Direction::left; break;
    case Direction::up: m.direction = Direction::down; break;
    case Direction::down: m.direction = Direction::up; break;
  }
  if (params.phase == Phase::early_then_stop) m.phase = Phase::stop_then_late;
  else if (params.phase == Phase::stop_then_late) m.phase = Phase::early_then_stop;
  m.label = class_label(m.direction, m.phase, spec);
  return m;
}

Tensor render_clip(const ClipParams& params, const GenSpec& spec) {
  spec.validate();
  const std::size_t T = spec.frames, H = spec.height, W = spec.width, G = spec.background_grid;
  if (params.x.size() != T || params.y.size() != T) throw std::invalid_argument("gen: trajectory length != frames");

  // periodic bilinear interpolation of a G x G grid of random levels
  std::mt19937_64 rng(params.background_seed);
  std::vector<double> grid(G * G);
  for (double& v : grid) v = unit_real(rng) * spec.background_max;
  std::vector<float> background(H * W);
  for (std::size_t r = 0; r < H; ++r) {
    const double gy = static_cast<double>(r) * static_cast<double>(G) / static_cast<double>(H);
    const auto y0 = static_cast<std::size_t>(gy);
    const double fy = gy - static_cast<double>(y0);
    for (std::size_t c = 0; c < W; ++c) {
      const double gx = static_cast<double>(c) * static_cast<double>(G) / static_cast<double>(W);
      const auto x0 = static_cast<std::size_t>(gx);
      const double fx = gx - static_cast<double>(x0);
      const double a = grid[(y0 % G) * G + x0 % G], b = grid[(y0 % G) * G + (x0 + 1) % G];
      const double d = grid[((y0 + 1) % G) * G + x0 % G], e = grid[((y0 + 1) % G) * G + (x0 + 1) % G];
      background[r * W + c] = static_cast<float>((1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * d + fx * e));
    }
  }

  Tensor clip({T, 1, H, W});
  auto out = clip.mutable_data();
  for (std::size_t t = 0; t < T; ++t) {
    float* frame = out.data() + t * H * W;
    std::copy(background.begin(), background.end(), frame);
    for (std::size_t i = 0; i < spec.square; ++i)
      for (std::size_t j = 0; j < spec.square; ++j) {
        frame[((params.y[t] + i) % H) * W + (params.x[t] + j) % W] = spec.square_value;
      }
  }
  return clip;
}

Tensor generate_clip(std::uint32_t seed, int label, const GenSpec& spec) {
  return render_clip(sample_clip_params(seed, label, spec), spec);
}

Tensor reverse_time(const Tensor& clip, bool batched) {
  const std::size_t axis = batched ? 1 : 0;
  const std::size_t outer = batched ? clip.dim(0) : 1;
  const std::size_t T = clip.dim(axis);
  const std::size_t inner = clip.numel() / (outer * T);
  std::vector<float> out(clip.numel());
  const float* src = clip.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t t = 0; t < T; ++t)
      std::copy_n(src + (o * T + t) * inner, inner, out.data() + (o * T + (T - 1 - t)) * inner);
  return Tensor(clip.shape(), std::move(out));
}

ClipBatch ClipBatch::gather(const std::vector<std::size_t>& rows) const {
  const std::size_t per = clips.numel() / size();
  Shape shape = clips.shape();
  shape[0] = rows.size();
  std::vector<float> data(rows.size() * per);
  ClipBatch out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= size()) throw std::out_of_range("ClipBatch::gather: row out of range");
    std::copy_n(clips.data().data() + rows[i] * per, per, data.data() + i * per);
    out.labels.push_back(labels[rows[i]]);
    out.seeds.push_back(seeds[rows[i]]);
  }
  out.clips = Tensor(std::move(shape), std::move(data));
  return out;
}

ClipBatch generate_batch(const std::vector<std::uint32_t>& seeds, const std::vector<int>& labels,
                         const GenSpec& spec) {
  if (seeds.size() != labels.size() || seeds.empty()) {
    throw std::invalid_argument("generate_batch: need equally many (>0) seeds and labels");
  }
  const std::size_t per = spec.frames * spec.height * spec.width;
  std::vector<float> data(seeds.size() * per);
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    const Tensor clip = generate_clip(seeds[i], labels[i], spec);
    std::copy(clip.data().begin(), clip.data().end(), data.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  ClipBatch batch;
  batch.clips = Tensor({seeds.size(), spec.frames, 1, spec.height, spec.width}, std::move(data));
  batch.labels = labels;
  batch.seeds = seeds;
  return batch;
}

DataSplit generate_split(std::size_t n_train, std::size_t n_val, std::uint64_t seed, const GenSpec& spec) {
  constexpr std::uint32_t kSeedSpace = 1u << 24;
  if (n_train == 0 || n_val == 0 || n_train + n_val > kSeedSpace) {
    throw std::invalid_argument("generate_split: need 0 < n_train, n_val and n_train + n_val <= 2^24");
  }
  const auto offset = static_cast<std::uint32_t>(splitmix64(seed) % kSeedSpace);
  auto make = [&](std::size_t first, std::size_t count) {
    std::vector<std::uint32_t> seeds(count);
    std::vector<int> labels(count);
    for (std::size_t i = 0; i < count; ++i) {
      seeds[i] = static_cast<std::uint32_t>((offset + first + i) % kSeedSpace);
      labels[i] = static_cast<int>(i % spec.classes);
    }
    return generate_batch(seeds, labels, spec);
  };
  return {make(0, n_train), make(n_train, n_val)};
}

void save_clip_cache(const std::filesystem::path& path, const ClipBatch& batch) {
  const std::size_t n = batch.size();
  write_tensor_file(path, kClipCacheMagic,
                    {{"clips", batch.clips},
                     {"labels", Tensor({n}, std::vector<float>(batch.labels.begin(), batch.labels.end()))},
                     {"seeds", Tensor({n}, std::vector<float>(batch.seeds.begin(), batch.seeds.end()))}});
}

ClipBatch load_clip_cache(const std::filesystem::path& path) {
  const NamedTensors records = read_tensor_file(path, kClipCacheMagic);
  if (records.size() != 3 || records[0].first != "clips" || records[1].first != "labels" ||
      records[2].first != "seeds") {
    throw FormatError(path.string() + ": expected records clips, labels, seeds");
  }
  ClipBatch batch;
  batch.clips = records[0].second;
  for (float v : records[1].second.data()) batch.labels.push_back(static_cast<int>(v));
  for (float v : records[2].second.data()) batch.seeds.push_back(static_cast<std::uint32_t>(v));
  if (batch.clips.rank() != 5 || batch.clips.dim(0) != batch.labels.size() || batch.labels.size() != batch.seeds.size()) {
    throw FormatError(path.string() + ": inconsistent clip cache");
  }
  return batch;
}

int centroid_oracle(const Tensor& clip, const GenSpec& spec) {
  const std::size_t T = spec.frames, H = spec.height, W = spec.width;
  if (clip.shape() != Shape{T, 1, H, W}) throw ShapeError("centroid_oracle: clip must be " + shape_str({T, 1, H, W}));
  const float threshold = 0.5f * (spec.background_max + spec.square_value);
  const double two_pi = 2.0 * std::numbers::pi;

  // circular mean handles squares that wrap around the edges
  std::vector<double> cx(T), cy(T);
  for (std::size_t t = 0; t < T; ++t) {
    double sx = 0, cxs = 0, sy = 0, cys = 0;
    const float* frame = clip.data().data() + t * H * W;
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        if (frame[r * W + c] < threshold) continue;
        sx += std::sin(two_pi * static_cast<double>(c) / static_cast<double>(W));
        cxs += std::cos(two_pi * static_cast<double>(c) / static_cast<double>(W));
        sy += std::sin(two_pi * static_cast<double>(r) / static_cast<double>(H));
        cys += std::cos(two_pi * static_cast<double>(r) / static_cast<double>(H));
      }
    cx[t] = std::atan2(sx, cxs) * static_cast<double>(W) / two_pi;
    cy[t] = std::atan2(sy, cys) * static_cast<double>(H) / two_pi;
  }
  auto wrap = [](double d, double extent) { return d - extent * std::round(d / extent); };
  std::vector<double> dx(T - 1), dy(T - 1);
  double total_x = 0, total_y = 0;
  for (std::size_t t = 0; t + 1 < T; ++t) {
    dx[t] = wrap(cx[t + 1] - cx[t], static_cast<double>(W));
    dy[t] = wrap(cy[t + 1] - cy[t], static_cast<double>(H));
    total_x += dx[t];
    total_y += dy[t];
  }
  Direction dir;
  if (std::abs(total_x) >= std::abs(total_y)) dir = total_x < 0 ? Direction::left : Direction::right;
  else dir = total_y < 0 ? Direction::up : Direction::down;
  if (spec.classes == 4) return class_label(dir, Phase::uniform, spec);

  const std::size_t window = (T - 1) / 2;
  double early = 0, late = 0;
  for (std::size_t t = 0; t < window; ++t) {
    early += std::hypot(dx[t], dy[t]);
    late += std::hypot(dx[T - 2 - t], dy[T - 2 - t]);
  }
  return class_label(dir, early > late ? Phase::early_then_stop : Phase::stop_then_late, spec);
}

}  // namespace tdrl

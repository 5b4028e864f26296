#include "tdrl/export.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "tdrl/ops.hpp"

namespace tdrl {

namespace {

void check_enhancement(const Tensor& a, std::size_t sample) {
  if (a.rank() != 3) throw ShapeError("enhancement must be [N,T,C], got " + shape_str(a.shape()));
  if (sample >= a.dim(0)) throw std::out_of_range("sample " + std::to_string(sample) + " out of range");
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

std::string enhancement_csv(const Tensor& enhancement, std::size_t sample) {
  check_enhancement(enhancement, sample);
  const std::size_t T = enhancement.dim(1), C = enhancement.dim(2);
  const float* a = enhancement.data().data() + sample * T * C;
  std::string out = "t,channel,value\n";
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < C; ++c) {
      out += std::to_string(t) + "," + std::to_string(c) + "," + num(a[t * C + c]) + "\n";
    }
  }
  return out;
}

std::string diversity_csv(const std::vector<double>& matrix, std::size_t frames) {
  if (matrix.size() != frames * frames) throw ShapeError("diversity matrix must be T x T");
  std::string out = "i,j,mean_cosine\n";
  for (std::size_t i = 0; i < frames; ++i) {
    for (std::size_t j = 0; j < frames; ++j) {
      out += std::to_string(i) + "," + std::to_string(j) + "," + num(matrix[i * frames + j]) + "\n";
    }
  }
  return out;
}

ChannelRanking rank_channels(const Tensor& enhancement, std::size_t sample, std::size_t k) {
  check_enhancement(enhancement, sample);
  const std::size_t T = enhancement.dim(1), C = enhancement.dim(2);
  const float* a = enhancement.data().data() + sample * T * C;
  k = std::min(k, C);
  ChannelRanking r;
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<std::size_t> idx(C);
    std::iota(idx.begin(), idx.end(), 0);
    const float* row = a + t * C;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return row[x] > row[y]; });
    r.most.emplace_back(idx.begin(), idx.begin() + k);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
      return row[x] < row[y] || (row[x] == row[y] && x < y);
    });
    r.least.emplace_back(idx.begin(), idx.begin() + k);
  }
  return r;
}

std::string ranking_csv(const ChannelRanking& ranking) {
  std::string out = "t,rank,most_enhanced,least_enhanced\n";
  for (std::size_t t = 0; t < ranking.most.size(); ++t) {
    for (std::size_t i = 0; i < ranking.most[t].size(); ++i) {
      out += std::to_string(t) + "," + std::to_string(i) + "," + std::to_string(ranking.most[t][i]) + "," +
             std::to_string(ranking.least[t][i]) + "\n";
    }
  }
  return out;
}

std::vector<std::filesystem::path> export_all(const NetworkConfig& cfg, const NetworkParams<float>& params,
                                              const Tensor& clip, const std::filesystem::path& dir) {
  if (clip.rank() != 4) throw ShapeError("export expects one clip [T,C,H,W], got " + shape_str(clip.shape()));
  NoGradGuard guard;
  Shape batched{1};
  batched.insert(batched.end(), clip.shape().begin(), clip.shape().end());
  const NetworkOutput<float> out = network_forward(reshape(clip, batched), cfg, params);

  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  for (const auto& [id, a] : out.enhancement_by_block) {
    const std::string stem = "block" + std::to_string(id);
    written.push_back(dir / (stem + "_enhancement.csv"));
    write_file(written.back(), enhancement_csv(a));
    written.push_back(dir / (stem + "_top_channels.csv"));
    write_file(written.back(), ranking_csv(rank_channels(a)));
  }
  for (const auto& [id, z] : out.z_by_block) {
    const std::size_t channels = cfg.td.regularized_channels(z.dim(2));
    written.push_back(dir / ("block" + std::to_string(id) + "_diversity.csv"));
    write_file(written.back(), diversity_csv(frame_similarity_matrix(z, channels, cfg.td.eps), z.dim(1)));
  }
  return written;
}

}  // namespace tdrl

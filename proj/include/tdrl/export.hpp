#pragma once

// CSV exports of PEM enhancement and post-TM frame similarity.

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "tdrl/backbone.hpp"

namespace tdrl {

// "t,channel,value" for sample `sample` of A [N,T,C].
std::string enhancement_csv(const Tensor& enhancement, std::size_t sample = 0);

// "i,j,mean_cosine" for a row-major T x T matrix.
std::string diversity_csv(const std::vector<double>& matrix, std::size_t frames);

struct ChannelRanking {
  std::vector<std::vector<std::size_t>> most;   // per frame, highest enhancement first
  std::vector<std::vector<std::size_t>> least;  // per frame, lowest enhancement first
};

// Channel indices with the k highest and k lowest enhancement per frame. Ties
// go to the lower channel index.
ChannelRanking rank_channels(const Tensor& enhancement, std::size_t sample = 0, std::size_t k = 10);

// "t,rank,most_enhanced,least_enhanced"
std::string ranking_csv(const ChannelRanking& ranking);

// Runs clip [T,C_img,H,W] through the network and writes, per block,
// block<id>_enhancement.csv and block<id>_top_channels.csv (PEM blocks) and
// block<id>_diversity.csv (TD-regularized blocks). Returns the files written.
std::vector<std::filesystem::path> export_all(const NetworkConfig& cfg, const NetworkParams<float>& params,
                                              const Tensor& clip, const std::filesystem::path& dir);

}  // namespace tdrl

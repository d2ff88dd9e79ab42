#pragma once

// Binary containers. All integers and floats are little-endian.
//
// Model checkpoint ("PRNC", version 1):
//   magic[4] u32 version
//   config: u64 depth, heads, group_size, image_side, patch_side, channels,
//           num_classes; u64 n + n x u64 embed_choices; u64 n + n x f64 mlp ratios
//   u64 tensor count, then per tensor in WeightStore::for_each_tensor order:
//           u32 name length, name bytes, u64 rows, u64 cols, rows*cols x f64
//   zero or more sections: tag[4], u64 payload bytes, payload
//
// Selector section ("SLCT"):
//   u32 strategy (0 prune, 1 merge, 2 prune-merge), u64 state_dim, u64 hidden,
//   u64 action_dim, then the actor's six tensors, log_std, the critic's six
//   tensors, the state shift and the state scale, each as u64 rows, u64 cols,
//   f64 data.
//
// Dataset ("PRDS", version 1):
//   magic[4] u32 version u64 samples u32 channels u32 height u32 width
//   u32 label_width, then samples*channels*height*width x f32 pixels, then
//   samples*label_width x i32 labels (class, then the hard flag when width 2).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "adavit/elastic_model.hpp"
#include "adavit/selector.hpp"

namespace adavit {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::filesystem::path& path, const WeightStore& w,
                     const SelectorNets* selector = nullptr);

struct Checkpoint {
  WeightStore weights;
  std::optional<SelectorNets> selector;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

struct Dataset {
  std::size_t channels = 1;
  std::size_t side = 0;
  std::vector<std::vector<double>> images;  // channels x side x side each
  std::vector<int> labels;
  std::vector<int> hard;  // 1 for hard samples; empty when unknown

  std::size_t size() const { return labels.size(); }
  /// Subset by index, in the given order.
  Dataset subset(std::span<const std::size_t> idx) const;
};

void save_dataset(const std::filesystem::path& path, const Dataset& d);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace adavit

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sevdet/nn/ops.hpp"

namespace sevdet::nn {

/// In-memory form of a model checkpoint.
///
/// On disk (version 1, all integers little-endian):
///   "SEVDETCK" u32 version
///   u32 n_meta   { str key, str value }
///   u32 n_layers { str name, u8 kind, u32 in, u32 out, u32 kernel, u32 stride,
///                  u8 padding, f64 momentum, f64 eps,
///                  u32 n_arrays { str tag, u32 rank, u32 dims[rank], f32 data[] } }
/// where str = u32 length + bytes. Weights are stored as 32-bit floats, so a
/// model round-trips exactly once its parameters have been passed through
/// `snap_to_f32`. A text manifest listing layer order and shapes is written
/// next to the binary as `<path>.manifest`.
struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, LayerParams>> layers;

  const LayerParams& layer(const std::string& name) const;
  const std::string& meta_at(const std::string& key) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_manifest(const Checkpoint& ckpt);

/// Rounds every stored array of `p` to the nearest 32-bit float.
void snap_to_f32(LayerParams& p);

/// Copies weights/bias/running stats from `src` into `dst` after checking that
/// kinds and shapes agree.
void assign_params(LayerParams& dst, const LayerParams& src, const std::string& name);

/// Tracks the parameters of the best-scoring epoch; later epochs win ties.
class BestSnapshot {
 public:
  /// Copies `params` if `score` is at least the best seen so far.
  void offer(std::size_t epoch, double score, std::span<LayerParams* const> params);
  /// Writes the kept copy back; no-op if nothing was offered.
  void restore(std::span<LayerParams* const> params) const;
  std::size_t epoch() const { return epoch_; }

 private:
  double score_ = -1.0;
  std::size_t epoch_ = 0;
  std::vector<LayerParams> saved_;
};

}  // namespace sevdet::nn

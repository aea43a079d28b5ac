#pragma once

#include "hetreg/model.hpp"
#include "hetreg/synthetic.hpp"
#include "hetreg/volume.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace hetreg {

enum class DType : std::uint8_t
{
  F32 = 0,
  U16 = 1,
  F64 = 2, ///< checkpoints only
};

/*
 * Little-endian layout, 35-byte header:
 *
 *   0  "HRGV"        magic
 *   4  u16           version (1)
 *   6  u8            dtype
 *   7  u32 x 4       channels, D, H, W
 *   23 f32 x 3       spacing (mm)
 *   35 payload       row-major, channels * D * H * W elements
 */
struct VolumeFile
{
  static constexpr std::uint16_t version     = 1;
  static constexpr std::size_t   header_size = 35;

  DType                     dtype    = DType::F32;
  std::uint32_t             channels = 1, depth = 0, height = 0, width = 0;
  std::array<float, 3>      spacing{1.0f, 1.0f, 1.0f};
  std::vector<std::uint8_t> payload;

  std::vector<std::uint8_t> encode() const;
  /// Throws IoError naming the byte offset of the first problem.
  static VolumeFile decode(std::span<const std::uint8_t> bytes);
};

std::vector<std::uint8_t> read_bytes(const std::string &path);
void                      write_bytes(const std::string &path, std::span<const std::uint8_t> bytes);

VolumeFile to_file(const Volume &v);
VolumeFile to_file(const SegVolume &s);
VolumeFile to_file(const DeformationField &phi, const Spacing &spacing);
Volume           volume_from(const VolumeFile &f);
SegVolume        labels_from(const VolumeFile &f);
DeformationField field_from(const VolumeFile &f);

void             write_volume(const std::string &path, const Volume &v);
void             write_labels(const std::string &path, const SegVolume &s);
void             write_field(const std::string &path, const DeformationField &phi, const Spacing &spacing);
Volume           read_volume(const std::string &path);
SegVolume        read_labels(const std::string &path);
DeformationField read_field(const std::string &path);

/// Pair directory: fixed.hrgv, fixed_seg.hrgv, moving.hrgv, moving_seg.hrgv
/// and gt_field.hrgv (the last is optional when reading; zeros if absent).
void          write_pair(const std::string &dir, const SyntheticPair &pair);
SyntheticPair read_pair(const std::string &dir);

/*
 * Checkpoint: the same 35-byte header with magic "HRGC", dtype F64, channels
 * = tensor count and zero extents; then u32 length + run configuration text;
 * then per tensor u32 name length, name bytes, u32 rank, u32 extents, f64
 * payload.
 */
struct Checkpoint
{
  std::string  config_text;
  NamedTensors tensors;

  std::vector<std::uint8_t> encode() const;
  static Checkpoint         decode(std::span<const std::uint8_t> bytes);
};

void       save_checkpoint(const std::string &path, const RunConfig &cfg, const Model &model);
Checkpoint load_checkpoint(const std::string &path);
/// Copies values into the model's parameters; names and shapes must match.
void       restore(Model &model, const Checkpoint &ckpt);

} // namespace hetreg

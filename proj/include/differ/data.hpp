#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "differ/aspect.hpp"
#include "differ/types.hpp"

namespace differ {

// Ground-truth generative factors of a synthetic sample.
struct LatentFactors {
  VectorF b;  // identity, constant per pid
  VectorF c;  // clothing, constant per clothid
  VectorF h;  // hair, constant per (pid, outfit)
  VectorF p;  // pose, per image
  std::uint64_t noise_seed = 0;
};

struct Sample {
  std::string image_id;
  std::string path;
  int pid = -1;
  int camid = -1;
  int clothid = -1;  // -1 means unknown
  VectorF input;     // empty when the source is a real-image manifest
  std::optional<LatentFactors> factors;
};

struct SynthConfig {
  Index num_ids = 50;
  Index outfits_per_id = 2;
  Index images_per_outfit = 10;
  // Outfits generated per id for evaluation only: their clothing vectors
  // never appear in training, making the query split genuinely
  // clothes-changed. Each eval outfit contributes 4 images (2 query,
  // 2 gallery); every training outfit contributes 2 more gallery-only
  // images.
  Index eval_outfits_per_id = 1;
  Index num_cameras = 4;
  Index d_b = 16;
  Index d_c = 16;
  Index d_h = 8;
  Index d_p = 8;
  Index input_dim = 96;
  double noise_sigma = 0.1;
  double camera_sigma = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Dataset {
  std::vector<Sample> samples;
  bool synthetic = false;
  SynthConfig synth;

  // Generation-time mixing model, kept for reconstruction checks; the
  // matrices are not persisted.
  Matrix mix_b, mix_c, mix_h, mix_p;  // input_dim x d_*
  MatrixF cam_offsets;                // num_cameras x input_dim

  Index size() const { return static_cast<Index>(samples.size()); }
  Matrix inputs_for(const std::vector<Index>& rows) const;
  std::vector<int> pids_for(const std::vector<Index>& rows) const;
  std::vector<int> camids_for(const std::vector<Index>& rows) const;

  // Ground-truth text-feature oracle: the sample's factor vector for the
  // aspect, zero-padded to `dim` and normalized to unit length.
  Vector oracle_text_feature(Index sample, Aspect aspect, Index dim) const;
};

// Linear factor mixture with additive camera offset and Gaussian noise,
// fully determined by the seed.
Dataset generate_dataset(const SynthConfig& cfg);

// Deterministic train / query / gallery split by image position within each
// (pid, outfit) group. Queries and their gallery mates land on different
// cameras so every protocol has valid positives.
struct DatasetSplit {
  std::vector<Index> train, query, gallery;
};
DatasetSplit split_dataset(const Dataset& dataset);

// Copy of the selected rows, preserving the generation metadata.
Dataset subset(const Dataset& dataset, const std::vector<Index>& rows);

// --- Manifests ---------------------------------------------------------

struct ManifestRecord {
  std::string image_id;
  std::string path;
  int pid = -1;
  int camid = -1;
  int clothid = -1;
};

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);

// Reads a manifest; rows with synth:// paths resolve inputs and factors
// from the arrays container next to the manifest.
Dataset load_manifest(const std::filesystem::path& path);

// Writes arrays.bin plus all/train/query/gallery manifests into dir.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);

// --- PK sampling -------------------------------------------------------

// Batches of P distinct ids x K instances. Ids with fewer than K instances
// are padded by resampling and flagged.
class PkSampler {
 public:
  PkSampler(std::vector<int> labels, Index p, Index k, std::uint64_t seed);

  std::vector<std::vector<Index>> epoch(Index epoch_index) const;
  bool uses_replacement() const { return uses_replacement_; }
  Index batch_size() const { return p_ * k_; }

 private:
  struct Group {
    int label;
    std::vector<Index> indices;
  };
  std::vector<Group> groups_;
  Index p_, k_;
  std::uint64_t seed_;
  bool uses_replacement_ = false;
};

std::vector<Index> pk_sample(const std::vector<int>& labels, Index p, Index k,
                             std::uint64_t seed);

}  // namespace differ

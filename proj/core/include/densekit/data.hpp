#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "densekit/rng.hpp"
#include "densekit/tensor.hpp"

namespace densekit {

// Labeled uint8 images, channel-planar (all of channel 0, then 1, then 2).
struct Dataset {
  int n = 0;
  int channels = 3;
  int height = 32;
  int width = 32;
  int num_classes = 10;
  std::string name;
  std::vector<uint8_t> images;  // n * channels * height * width
  std::vector<uint8_t> labels;  // n

  int64_t image_bytes() const { return static_cast<int64_t>(channels) * height * width; }
  const uint8_t* image(int i) const;
  uint8_t label(int i) const;
  Dataset subset(const std::vector<int>& indices, const std::string& subset_name) const;
};

// Reads the binary distribution layout: data_batch_1..5.bin plus test_batch.bin,
// records of 3073 bytes (label byte, then 1024 red, 1024 green, 1024 blue).
// File sizes must be an exact multiple of the record size.
std::pair<Dataset, Dataset> load_cifar10(const std::string& dir);

// Writes one batch file in the same record layout load_cifar10 reads, so
// synthetic data can flow through any tool that expects the binary format.
void save_cifar_batch(const Dataset& dataset, const std::string& path);

// Ten-class synthetic imagery whose label is a pure function of geometry: an
// 8x8 bright patch sits inside quadrant label%4, and the patch's dominant
// channel is label/4. Background noise stays below 16 and patch brightness at
// or above 200, so per-quadrant and per-channel sums recover the label with a
// provable margin, never just a probable one. Class counts are balanced to
// within one. `stream_name` separates independent datasets under one seed.
Dataset synth_dataset(int n, uint64_t seed, const std::string& stream_name = "synth");

struct NormStats {
  std::array<float, 3> mean{};  // in pixel/255 units
  std::array<float, 3> std{};   // population standard deviation

  bool operator==(const NormStats&) const = default;
};

NormStats compute_norm_stats(const Dataset& train);

// (pixel/255 - mean) / std, laid out [C,H,W]
Tensor normalize_image(const uint8_t* image, const NormStats& stats, int channels, int height, int width);
// inverse of normalize_image, back to pixel/255 units
Tensor denormalize_image(const Tensor& image, const NormStats& stats);

// zero-pad by 4, crop back to the original extent at (offset_y, offset_x) in
// [0,8], then flip horizontally if asked; (4,4,false) is the identity
void augment_image(const uint8_t* in, uint8_t* out, int channels, int height, int width, int offset_y, int offset_x,
                   bool flip);
// draws offset_y, offset_x uniform in [0,8] then a fair flip, in that order
void augment_image(const uint8_t* in, uint8_t* out, int channels, int height, int width, RngStream& rng);

// Fisher-Yates permutation of [0,n) from the ("shuffle", epoch) substream
std::vector<int> epoch_permutation(int n, uint64_t seed, int epoch);
std::vector<int> permutation(int n, RngStream& rng);

struct BatcherOptions {
  int batch_size = 64;
  bool shuffle = true;
  bool augment = false;
  uint64_t seed = 42;
};

struct Batch {
  Tensor images;            // [b, C, H, W], normalized
  std::vector<int> labels;  // b entries
  std::vector<int> indices; // dataset indices, for provenance
};

// Deterministic batch producer: the same (seed, epoch) always yields the same
// shuffled order, crops, and flips. The final partial batch is included.
class Batcher {
 public:
  Batcher(const Dataset& dataset, const NormStats& stats, BatcherOptions options);

  int batches_per_epoch() const;

  class Epoch {
   public:
    // fills `out` and returns true until the epoch is exhausted
    bool next(Batch& out);

   private:
    friend class Batcher;
    Epoch(const Batcher* owner, int epoch_index);
    const Batcher* owner_;
    std::vector<int> order_;
    RngStream augment_rng_;
    size_t cursor_ = 0;
  };

  Epoch epoch(int epoch_index) const;

 private:
  friend class Epoch;
  const Dataset* dataset_;
  NormStats stats_;
  BatcherOptions options_;
};

}  // namespace densekit

#include "densekit/data.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "densekit/errors.hpp"

namespace densekit {

namespace fs = std::filesystem;

const uint8_t* Dataset::image(int i) const {
  if (i < 0 || i >= n) throw UsageError("dataset index " + std::to_string(i) + " out of range [0," + std::to_string(n) + ")");
  return images.data() + static_cast<int64_t>(i) * image_bytes();
}

uint8_t Dataset::label(int i) const {
  if (i < 0 || i >= n) throw UsageError("dataset index " + std::to_string(i) + " out of range [0," + std::to_string(n) + ")");
  return labels[static_cast<size_t>(i)];
}

Dataset Dataset::subset(const std::vector<int>& indices, const std::string& subset_name) const {
  Dataset out;
  out.n = static_cast<int>(indices.size());
  out.channels = channels;
  out.height = height;
  out.width = width;
  out.num_classes = num_classes;
  out.name = subset_name;
  out.images.resize(static_cast<size_t>(out.n) * image_bytes());
  out.labels.resize(static_cast<size_t>(out.n));
  for (size_t i = 0; i < indices.size(); ++i) {
    std::memcpy(out.images.data() + static_cast<int64_t>(i) * image_bytes(), image(indices[i]), image_bytes());
    out.labels[i] = label(indices[i]);
  }
  return out;
}

namespace {

constexpr int64_t kCifarRecord = 3073;  // label byte + 3 * 1024 pixel bytes

void load_cifar_file(const std::string& path, Dataset& out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open data file: " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed reading data file: " + path);
  if (bytes.empty() || static_cast<int64_t>(bytes.size()) % kCifarRecord != 0) {
    throw FormatError("data file " + path + " holds " + std::to_string(bytes.size()) +
                      " bytes, not a multiple of the " + std::to_string(kCifarRecord) + "-byte record");
  }
  const int64_t records = static_cast<int64_t>(bytes.size()) / kCifarRecord;
  for (int64_t r = 0; r < records; ++r) {
    const uint8_t* rec = reinterpret_cast<const uint8_t*>(bytes.data()) + r * kCifarRecord;
    const uint8_t label = rec[0];
    if (label >= 10) {
      throw DataError("label " + std::to_string(label) + " out of range [0,10) at record " +
                      std::to_string(out.n) + " (" + path + ")");
    }
    out.labels.push_back(label);
    out.images.insert(out.images.end(), rec + 1, rec + kCifarRecord);
    out.n += 1;
  }
}

}  // namespace

std::pair<Dataset, Dataset> load_cifar10(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError("data directory does not exist: " + dir);
  Dataset train;
  train.name = "cifar10-train";
  for (int i = 1; i <= 5; ++i) {
    load_cifar_file((fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin")).string(), train);
  }
  Dataset test;
  test.name = "cifar10-test";
  load_cifar_file((fs::path(dir) / "test_batch.bin").string(), test);
  return {std::move(train), std::move(test)};
}

void save_cifar_batch(const Dataset& dataset, const std::string& path) {
  if (dataset.image_bytes() != kCifarRecord - 1) {
    throw ConfigError("dataset geometry " + std::to_string(dataset.channels) + "x" + std::to_string(dataset.height) +
                      "x" + std::to_string(dataset.width) + " does not fit the " + std::to_string(kCifarRecord) +
                      "-byte record");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open output file: " + path);
  for (int i = 0; i < dataset.n; ++i) {
    const char label = static_cast<char>(dataset.label(i));
    out.write(&label, 1);
    out.write(reinterpret_cast<const char*>(dataset.image(i)), dataset.image_bytes());
  }
  out.flush();
  if (!out) throw IoError("failed writing data file: " + path);
}

Dataset synth_dataset(int n, uint64_t seed, const std::string& stream_name) {
  if (n < 1) throw ConfigError("synthetic dataset size must be >= 1, got " + std::to_string(n));
  Dataset ds;
  ds.n = n;
  ds.name = stream_name + ":" + std::to_string(n);
  ds.images.resize(static_cast<size_t>(n) * ds.image_bytes());
  ds.labels.resize(static_cast<size_t>(n));

  RngStream rng(seed, stream_name);

  // balanced to within one: n/10 per class, the first n%10 classes get one more
  std::vector<uint8_t> labels;
  labels.reserve(static_cast<size_t>(n));
  for (int c = 0; c < 10; ++c) {
    const int count = n / 10 + (c < n % 10 ? 1 : 0);
    for (int i = 0; i < count; ++i) labels.push_back(static_cast<uint8_t>(c));
  }
  for (int i = n - 1; i >= 1; --i) {
    const int j = static_cast<int>(rng.next_below(static_cast<uint32_t>(i + 1)));
    std::swap(labels[static_cast<size_t>(i)], labels[static_cast<size_t>(j)]);
  }

  const int H = ds.height, W = ds.width;
  const int64_t plane = static_cast<int64_t>(H) * W;
  for (int i = 0; i < n; ++i) {
    const int c = labels[static_cast<size_t>(i)];
    ds.labels[static_cast<size_t>(i)] = static_cast<uint8_t>(c);
    uint8_t* img = ds.images.data() + static_cast<int64_t>(i) * ds.image_bytes();

    // background noise strictly below 16 keeps every non-patch quadrant sum
    // under 256*3*15 = 11520, while the patch quadrant holds at least
    // 64*200 = 12800; the separation survives even adversarial draws
    for (int64_t p = 0; p < 3 * plane; ++p) img[p] = static_cast<uint8_t>(rng.next_below(16));

    const int quadrant = c % 4;
    const int hue = c / 4;
    const int qy = (quadrant / 2) * 16;
    const int qx = (quadrant % 2) * 16;
    const int ty = qy + 1 + static_cast<int>(rng.next_below(7));
    const int tx = qx + 1 + static_cast<int>(rng.next_below(7));
    for (int ch = 0; ch < 3; ++ch) {
      uint8_t* cp = img + ch * plane;
      for (int y = ty; y < ty + 8; ++y) {
        for (int x = tx; x < tx + 8; ++x) {
          const uint8_t v = ch == hue ? static_cast<uint8_t>(200 + rng.next_below(56))
                                      : static_cast<uint8_t>(rng.next_below(60));
          cp[static_cast<int64_t>(y) * W + x] = v;
        }
      }
    }
  }
  return ds;
}

NormStats compute_norm_stats(const Dataset& train) {
  if (train.n < 1) throw ConfigError("cannot compute normalization statistics from an empty dataset");
  if (train.channels != 3) throw ConfigError("normalization expects 3 channels, got " + std::to_string(train.channels));
  NormStats stats;
  const int64_t plane = static_cast<int64_t>(train.height) * train.width;
  const double count = static_cast<double>(train.n) * plane;
  for (int c = 0; c < 3; ++c) {
    double sum = 0.0, sum_sq = 0.0;
    for (int i = 0; i < train.n; ++i) {
      const uint8_t* cp = train.image(i) + c * plane;
      for (int64_t p = 0; p < plane; ++p) {
        const double v = cp[p] / 255.0;
        sum += v;
        sum_sq += v * v;
      }
    }
    const double mean = sum / count;
    double var = sum_sq / count - mean * mean;
    if (var < 0.0) var = 0.0;
    if (var == 0.0) {
      throw ConfigError("channel " + std::to_string(c) + " has zero variance; cannot normalize");
    }
    stats.mean[static_cast<size_t>(c)] = static_cast<float>(mean);
    stats.std[static_cast<size_t>(c)] = static_cast<float>(std::sqrt(var));
  }
  return stats;
}

Tensor normalize_image(const uint8_t* image, const NormStats& stats, int channels, int height, int width) {
  Tensor out({channels, height, width});
  const int64_t plane = static_cast<int64_t>(height) * width;
  for (int c = 0; c < channels; ++c) {
    const float mean = stats.mean[static_cast<size_t>(c)];
    const float inv_std = 1.0f / stats.std[static_cast<size_t>(c)];
    const uint8_t* src = image + c * plane;
    float* dst = out.data() + c * plane;
    for (int64_t p = 0; p < plane; ++p) dst[p] = (static_cast<float>(src[p]) / 255.0f - mean) * inv_std;
  }
  return out;
}

Tensor denormalize_image(const Tensor& image, const NormStats& stats) {
  if (image.rank() != 3) throw UsageError("denormalize_image expects [C,H,W], got " + image.shape_str());
  Tensor out(image.shape());
  const int64_t plane = static_cast<int64_t>(image.dim(1)) * image.dim(2);
  for (int c = 0; c < image.dim(0); ++c) {
    const float mean = stats.mean[static_cast<size_t>(c)];
    const float sd = stats.std[static_cast<size_t>(c)];
    const float* src = image.data() + c * plane;
    float* dst = out.data() + c * plane;
    for (int64_t p = 0; p < plane; ++p) dst[p] = src[p] * sd + mean;
  }
  return out;
}

void augment_image(const uint8_t* in, uint8_t* out, int channels, int height, int width, int offset_y, int offset_x,
                   bool flip) {
  if (offset_y < 0 || offset_y > 8 || offset_x < 0 || offset_x > 8) {
    throw UsageError("augment offsets must be in [0,8], got (" + std::to_string(offset_y) + "," +
                     std::to_string(offset_x) + ")");
  }
  const int64_t plane = static_cast<int64_t>(height) * width;
  for (int c = 0; c < channels; ++c) {
    const uint8_t* src = in + c * plane;
    uint8_t* dst = out + c * plane;
    for (int y = 0; y < height; ++y) {
      const int sy = y + offset_y - 4;  // position in the padded canvas, mapped back
      for (int x = 0; x < width; ++x) {
        const int ox = flip ? width - 1 - x : x;
        const int sx = x + offset_x - 4;
        const bool inside = sy >= 0 && sy < height && sx >= 0 && sx < width;
        dst[static_cast<int64_t>(y) * width + ox] = inside ? src[static_cast<int64_t>(sy) * width + sx] : 0;
      }
    }
  }
}

void augment_image(const uint8_t* in, uint8_t* out, int channels, int height, int width, RngStream& rng) {
  const int oy = static_cast<int>(rng.next_below(9));
  const int ox = static_cast<int>(rng.next_below(9));
  const bool flip = rng.next_double() < 0.5;
  augment_image(in, out, channels, height, width, oy, ox, flip);
}

std::vector<int> permutation(int n, RngStream& rng) {
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  for (int i = n - 1; i >= 1; --i) {
    const int j = static_cast<int>(rng.next_below(static_cast<uint32_t>(i + 1)));
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }
  return order;
}

std::vector<int> epoch_permutation(int n, uint64_t seed, int epoch) {
  RngStream rng(seed, "shuffle", static_cast<uint64_t>(epoch));
  return permutation(n, rng);
}

Batcher::Batcher(const Dataset& dataset, const NormStats& stats, BatcherOptions options)
    : dataset_(&dataset), stats_(stats), options_(options) {
  if (options_.batch_size < 1) throw ConfigError("batch_size must be >= 1, got " + std::to_string(options_.batch_size));
  if (dataset.n < 1) throw ConfigError("cannot batch an empty dataset");
}

int Batcher::batches_per_epoch() const {
  return (dataset_->n + options_.batch_size - 1) / options_.batch_size;
}

Batcher::Epoch::Epoch(const Batcher* owner, int epoch_index)
    : owner_(owner), augment_rng_(owner->options_.seed, "augment", static_cast<uint64_t>(epoch_index)) {
  if (owner->options_.shuffle) {
    order_ = epoch_permutation(owner->dataset_->n, owner->options_.seed, epoch_index);
  } else {
    order_.resize(static_cast<size_t>(owner->dataset_->n));
    for (int i = 0; i < owner->dataset_->n; ++i) order_[static_cast<size_t>(i)] = i;
  }
}

bool Batcher::Epoch::next(Batch& out) {
  const Dataset& ds = *owner_->dataset_;
  if (cursor_ >= order_.size()) return false;
  const int b = static_cast<int>(std::min<size_t>(owner_->options_.batch_size, order_.size() - cursor_));
  out.images = Tensor({b, ds.channels, ds.height, ds.width});
  out.labels.resize(static_cast<size_t>(b));
  out.indices.resize(static_cast<size_t>(b));
  const int64_t img_elems = ds.image_bytes();
  std::vector<uint8_t> scratch(static_cast<size_t>(img_elems));
  for (int i = 0; i < b; ++i) {
    const int idx = order_[cursor_++];
    out.indices[static_cast<size_t>(i)] = idx;
    out.labels[static_cast<size_t>(i)] = ds.label(idx);
    const uint8_t* raw = ds.image(idx);
    if (owner_->options_.augment) {
      augment_image(raw, scratch.data(), ds.channels, ds.height, ds.width, augment_rng_);
      raw = scratch.data();
    }
    const int64_t plane = static_cast<int64_t>(ds.height) * ds.width;
    float* dst = out.images.data() + static_cast<int64_t>(i) * img_elems;
    for (int c = 0; c < ds.channels; ++c) {
      const float mean = owner_->stats_.mean[static_cast<size_t>(c)];
      const float inv_std = 1.0f / owner_->stats_.std[static_cast<size_t>(c)];
      const uint8_t* src = raw + c * plane;
      float* cdst = dst + c * plane;
      for (int64_t p = 0; p < plane; ++p) cdst[p] = (static_cast<float>(src[p]) / 255.0f - mean) * inv_std;
    }
  }
  return true;
}

Batcher::Epoch Batcher::epoch(int epoch_index) const { return Epoch(this, epoch_index); }

}  // namespace densekit

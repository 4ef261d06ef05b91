#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mednc/core/rng.hpp"
#include "mednc/core/tensor.hpp"

namespace mednc::data {

/// One labeled sample. `pixels` is (channels, H, W) in [0, 1]; it is empty
/// for samples that only exist as rows of precomputed feature tables.
struct ImageRecord {
  std::string id;
  int label = 0;
  Tensord pixels;
  std::string origin;

  bool has_pixels() const { return pixels.rank() == 3 && pixels.size() > 0; }
};

struct Dataset {
  std::vector<std::string> class_names;
  std::vector<ImageRecord> records;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::vector<std::size_t> class_counts() const;
};

// --- preprocessing -----------------------------------------------------------

/// Maps 8-bit intensities to [0, 1] with fixed bounds 0 and 255.
Vector<double> normalize_pixels(std::span<const int> raw, std::string_view id = {});

/// Bilinear resize with the align-corners convention: output corners sample
/// input corners exactly.
ImageRecord resize(const ImageRecord& img, Index height, Index width);
Tensord resize_pixels(const Tensord& pixels, Index height, Index width);

Tensord flip_horizontal(const Tensord& pixels);
Tensord flip_vertical(const Tensord& pixels);
/// Counter-clockwise rotation by a multiple of 90 degrees.
Tensord rotate(const Tensord& pixels, int degrees);

struct AugmentSpec {
  bool horizontal_flip = false;
  bool vertical_flip = false;
  std::vector<int> rotations;  // subset of {90, 180, 270}

  bool empty() const { return !horizontal_flip && !vertical_flip && rotations.empty(); }
  std::size_t multiplier() const { return 1 + horizontal_flip + vertical_flip + rotations.size(); }
};

void validate(const AugmentSpec& spec);

/// Originals followed by each enabled transform of each image. Ids gain a
/// "#hflip", "#vflip" or "#rot<deg>" suffix; labels are copied.
std::vector<ImageRecord> augment(std::span<const ImageRecord> batch, const AugmentSpec& spec);

/// Down-samples every class to the minority count, without replacement.
/// Retained records keep their original relative order.
Dataset balance_classes(const Dataset& dataset, Rng& rng);

// --- Monte Carlo cross-validation splits -------------------------------------

enum class Part { train = 0, val = 1, test_a = 2, test_b = 3 };
inline constexpr std::array<Part, 4> kParts{Part::train, Part::val, Part::test_a, Part::test_b};
std::string_view to_string(Part p);

struct SplitSpec {
  std::array<double, 4> ratios{0.6, 0.2, 0.1, 0.1};
  std::uint64_t seed = 0;
};

void validate(const SplitSpec& spec);

struct DatasetSplit {
  SplitSpec spec;
  std::map<std::string, Part> assignment;
  std::array<std::vector<std::size_t>, 4> indices;  // record indices per part, shuffled order

  const std::vector<std::size_t>& part(Part p) const { return indices[static_cast<std::size_t>(p)]; }
  std::size_t size(Part p) const { return part(p).size(); }
};

/// Global sizes: floor(N * ratio) for train/val/testA, remainder to testB.
std::array<std::size_t, 4> split_sizes(std::size_t n, const std::array<double, 4>& ratios);

/// Seeded stratified split. Each class is shuffled and dealt out so that the
/// global sizes follow split_sizes() exactly and every class is within one
/// sample of its proportional share in each part.
DatasetSplit split_mccv(const Dataset& dataset, const SplitSpec& spec);

/// Seed used for MCCV repetition r.
inline std::uint64_t repetition_seed(std::uint64_t base, int r) { return base + static_cast<std::uint64_t>(r); }

// --- sources -----------------------------------------------------------------

enum class Pattern { gaussian_blob, stripes, checker };
std::string_view to_string(Pattern p);
Pattern pattern_from_string(std::string_view name);

struct SyntheticConfig {
  int classes = 2;
  int per_class = 400;
  Index height = 32;
  Index width = 32;
  Index channels = 1;
  Pattern pattern = Pattern::gaussian_blob;
  double noise = 0.0;  // std-dev of additive Gaussian pixel noise
  int jitter = 0;      // max translation in pixels
};

/// Class-dependent template pattern, translated by up to `jitter` pixels,
/// plus Gaussian noise, clipped and quantized to 8 bits, then normalized.
/// Each record draws from its own stream derived from (seed, id).
Dataset make_synthetic(const SyntheticConfig& config, std::uint64_t seed);

/// root/<class_name>/*.png; class index is the lexicographic rank of the
/// directory name. Images are converted to `channels` (1 or 3), normalized,
/// and resized when target extents are given (0 keeps source size).
Dataset load_image_tree(const std::filesystem::path& root, Index channels, Index height = 0, Index width = 0);

/// 8-bit PNG writer, used for fixtures and exports. pixels (C, H, W) in [0, 1].
void write_png(const std::filesystem::path& path, const Tensord& pixels);
/// Raw 8-bit PNG reader: (channels, H, W) integer intensities.
std::vector<int> read_png(const std::filesystem::path& path, Index channels, Index& height, Index& width);

}  // namespace mednc::data

#include "mednc/data/dataset.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "mednc/core/errors.hpp"

namespace mednc::data {

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(class_names.size(), 0);
  for (const auto& r : records) counts.at(static_cast<std::size_t>(r.label))++;
  return counts;
}

// --- preprocessing -----------------------------------------------------------

Vector<double> normalize_pixels(std::span<const int> raw, std::string_view id) {
  constexpr double lo = 0.0, hi = 255.0;
  Vector<double> out(static_cast<Index>(raw.size()));
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] < 0 || raw[i] > 255) {
      throw DataError("pixel value " + std::to_string(raw[i]) + " outside [0, 255] in image '" + std::string(id) + "'");
    }
    out[static_cast<Index>(i)] = (static_cast<double>(raw[i]) - lo) / (hi - lo);
  }
  return out;
}

Tensord resize_pixels(const Tensord& pixels, Index height, Index width) {
  if (pixels.rank() != 3) throw DimensionError("resize expects (channels, H, W), got " + shape_string(pixels.shape()));
  if (height < 1 || width < 1) throw ConfigError("resize target must be at least 1x1");
  const Index C = pixels.dim(0), H = pixels.dim(1), W = pixels.dim(2);
  if (H == height && W == width) return pixels;
  Tensord out(Shape{C, height, width});
  auto source = [](Index i, Index out_n, Index in_n) {
    return out_n == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(in_n - 1) / static_cast<double>(out_n - 1);
  };
  for (Index y = 0; y < height; ++y) {
    const double sy = source(y, height, H);
    const Index y0 = std::min(static_cast<Index>(std::floor(sy)), H - 1);
    const Index y1 = std::min(y0 + 1, H - 1);
    const double fy = sy - static_cast<double>(y0);
    for (Index x = 0; x < width; ++x) {
      const double sx = source(x, width, W);
      const Index x0 = std::min(static_cast<Index>(std::floor(sx)), W - 1);
      const Index x1 = std::min(x0 + 1, W - 1);
      const double fx = sx - static_cast<double>(x0);
      for (Index c = 0; c < C; ++c) {
        auto at = [&](Index yy, Index xx) { return pixels[(c * H + yy) * W + xx]; };
        const double top = at(y0, x0) * (1 - fx) + at(y0, x1) * fx;
        const double bottom = at(y1, x0) * (1 - fx) + at(y1, x1) * fx;
        out[(c * height + y) * width + x] = std::clamp(top * (1 - fy) + bottom * fy, 0.0, 1.0);
      }
    }
  }
  return out;
}

ImageRecord resize(const ImageRecord& img, Index height, Index width) {
  ImageRecord out = img;
  out.pixels = resize_pixels(img.pixels, height, width);
  return out;
}

namespace {

template <typename F>
Tensord remap(const Tensord& p, Index out_h, Index out_w, F source) {
  const Index C = p.dim(0), H = p.dim(1), W = p.dim(2);
  Tensord out(Shape{C, out_h, out_w});
  for (Index c = 0; c < C; ++c) {
    for (Index y = 0; y < out_h; ++y) {
      for (Index x = 0; x < out_w; ++x) {
        const auto [sy, sx] = source(y, x);
        out[(c * out_h + y) * out_w + x] = p[(c * H + sy) * W + sx];
      }
    }
  }
  return out;
}

void expect_image(const Tensord& p) {
  if (p.rank() != 3) throw DimensionError("expected (channels, H, W) image, got " + shape_string(p.shape()));
}

}  // namespace

Tensord flip_horizontal(const Tensord& p) {
  expect_image(p);
  const Index W = p.dim(2);
  return remap(p, p.dim(1), W, [W](Index y, Index x) { return std::pair{y, W - 1 - x}; });
}

Tensord flip_vertical(const Tensord& p) {
  expect_image(p);
  const Index H = p.dim(1);
  return remap(p, H, p.dim(2), [H](Index y, Index x) { return std::pair{H - 1 - y, x}; });
}

Tensord rotate(const Tensord& p, int degrees) {
  expect_image(p);
  const Index H = p.dim(1), W = p.dim(2);
  switch (((degrees % 360) + 360) % 360) {
    case 0:
      return p;
    case 90:  // out(y, x) = in(x, W-1-y), output is W x H
      return remap(p, W, H, [W](Index y, Index x) { return std::pair{x, W - 1 - y}; });
    case 180:
      return remap(p, H, W, [H, W](Index y, Index x) { return std::pair{H - 1 - y, W - 1 - x}; });
    case 270:
      return remap(p, W, H, [H](Index y, Index x) { return std::pair{H - 1 - x, y}; });
    default:
      throw ConfigError("rotation must be a multiple of 90 degrees, got " + std::to_string(degrees));
  }
}

void validate(const AugmentSpec& spec) {
  for (std::size_t i = 0; i < spec.rotations.size(); ++i) {
    const int r = spec.rotations[i];
    if (r != 90 && r != 180 && r != 270) {
      throw ConfigError("augment rotations must be drawn from {90, 180, 270}, got " + std::to_string(r));
    }
    if (std::count(spec.rotations.begin(), spec.rotations.end(), r) > 1) {
      throw ConfigError("augment rotation " + std::to_string(r) + " listed twice");
    }
  }
}

std::vector<ImageRecord> augment(std::span<const ImageRecord> batch, const AugmentSpec& spec) {
  validate(spec);
  std::vector<ImageRecord> out(batch.begin(), batch.end());
  out.reserve(batch.size() * spec.multiplier());
  auto emit = [&](const ImageRecord& src, Tensord pixels, const std::string& suffix) {
    ImageRecord r{src.id + "#" + suffix, src.label, std::move(pixels), src.origin};
    out.push_back(std::move(r));
  };
  for (const auto& img : batch) {
    if (!img.has_pixels()) throw DataError("cannot augment '" + img.id + "': sample has no pixels");
    if (spec.horizontal_flip) emit(img, flip_horizontal(img.pixels), "hflip");
    if (spec.vertical_flip) emit(img, flip_vertical(img.pixels), "vflip");
    for (int deg : spec.rotations) emit(img, rotate(img.pixels, deg), "rot" + std::to_string(deg));
  }
  return out;
}

Dataset balance_classes(const Dataset& dataset, Rng& rng) {
  if (dataset.num_classes() < 2) throw DataError("class balancing needs at least two classes");
  const auto counts = dataset.class_counts();
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) throw DataError("class '" + dataset.class_names[c] + "' is empty");
  }
  const std::size_t target = *std::min_element(counts.begin(), counts.end());
  std::vector<bool> keep(dataset.records.size(), false);
  for (std::size_t c = 0; c < counts.size(); ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < dataset.records.size(); ++i) {
      if (static_cast<std::size_t>(dataset.records[i].label) == c) members.push_back(i);
    }
    if (members.size() > target) rng.shuffle(members.begin(), members.end());
    for (std::size_t j = 0; j < target; ++j) keep[members[j]] = true;
  }
  Dataset out;
  out.class_names = dataset.class_names;
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    if (keep[i]) out.records.push_back(dataset.records[i]);
  }
  return out;
}

// --- splits ------------------------------------------------------------------

std::string_view to_string(Part p) {
  switch (p) {
    case Part::train:
      return "train";
    case Part::val:
      return "val";
    case Part::test_a:
      return "testA";
    case Part::test_b:
      return "testB";
  }
  return "?";
}

void validate(const SplitSpec& spec) {
  double total = 0.0;
  for (double r : spec.ratios) {
    if (!(r > 0.0 && r < 1.0)) throw ConfigError("split ratios must lie in (0, 1)");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1, got " + std::to_string(total));
}

std::array<std::size_t, 4> split_sizes(std::size_t n, const std::array<double, 4>& ratios) {
  std::array<std::size_t, 4> sizes{};
  std::size_t used = 0;
  for (std::size_t p = 0; p < 3; ++p) {
    // Small epsilon so ratios like 0.6 * 1000 are not floored to 599.
    sizes[p] = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios[p] + 1e-9));
    used += sizes[p];
  }
  sizes[3] = n - used;
  return sizes;
}

DatasetSplit split_mccv(const Dataset& dataset, const SplitSpec& spec) {
  validate(spec);
  const std::size_t n = dataset.records.size();
  if (n == 0) throw DataError("cannot split an empty dataset");
  const auto totals = split_sizes(n, spec.ratios);

  const std::size_t k = static_cast<std::size_t>(dataset.num_classes());
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < n; ++i) members.at(static_cast<std::size_t>(dataset.records[i].label)).push_back(i);
  for (std::size_t c = 0; c < k; ++c) {
    if (!members[c].empty() && members[c].size() < 4) {
      throw DataError("class '" + dataset.class_names[c] + "' has " + std::to_string(members[c].size()) +
                      " samples; stratifying into four parts needs at least 4");
    }
  }

  // Per-class quotas: floor of the proportional share, then the leftover
  // units are placed greedily (largest remaining column demand first), which
  // always realizes the required row and column sums.
  std::vector<std::array<std::size_t, 4>> quota(k);
  std::array<std::size_t, 4> demand = totals;
  std::vector<std::size_t> leftover(k);
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t assigned = 0;
    for (std::size_t p = 0; p < 4; ++p) {
      quota[c][p] = members[c].size() * totals[p] / n;
      assigned += quota[c][p];
      demand[p] -= quota[c][p];
    }
    leftover[c] = members[c].size() - assigned;
  }
  for (std::size_t c = 0; c < k; ++c) {
    std::array<std::size_t, 4> order{0, 1, 2, 3};
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return demand[a] > demand[b]; });
    for (std::size_t j = 0; j < leftover[c]; ++j) {
      const std::size_t p = order[j];
      if (demand[p] == 0) throw Error("split_mccv: quota rounding failed");
      ++quota[c][p];
      --demand[p];
    }
  }

  DatasetSplit split;
  split.spec = spec;
  Rng rng(spec.seed);
  for (std::size_t c = 0; c < k; ++c) {
    auto& m = members[c];
    rng.shuffle(m.begin(), m.end());
    std::size_t cursor = 0;
    for (std::size_t p = 0; p < 4; ++p) {
      for (std::size_t j = 0; j < quota[c][p]; ++j, ++cursor) {
        const std::size_t idx = m[cursor];
        split.indices[p].push_back(idx);
        split.assignment[dataset.records[idx].id] = kParts[p];
      }
    }
  }
  for (auto& part : split.indices) rng.shuffle(part.begin(), part.end());
  return split;
}

// --- synthetic ---------------------------------------------------------------

std::string_view to_string(Pattern p) {
  switch (p) {
    case Pattern::gaussian_blob:
      return "gaussian_blob";
    case Pattern::stripes:
      return "stripes";
    case Pattern::checker:
      return "checker";
  }
  return "?";
}

Pattern pattern_from_string(std::string_view name) {
  if (name == "gaussian_blob") return Pattern::gaussian_blob;
  if (name == "stripes") return Pattern::stripes;
  if (name == "checker") return Pattern::checker;
  throw ConfigError("unknown synthetic pattern '" + std::string(name) + "'");
}

namespace {

double template_value(Pattern pattern, int cls, double y, double x, Index H, Index W) {
  switch (pattern) {
    case Pattern::gaussian_blob: {
      // Blob width grows with the class index.
      const double sigma = static_cast<double>(std::min(H, W)) * (0.10 + 0.05 * cls);
      const double dy = y - 0.5 * static_cast<double>(H - 1), dx = x - 0.5 * static_cast<double>(W - 1);
      return 0.1 + 0.75 * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
    }
    case Pattern::stripes: {
      const double cycles = 2.0 + 1.5 * cls;
      return 0.5 + 0.35 * std::sin(2 * std::numbers::pi * cycles * x / static_cast<double>(W));
    }
    case Pattern::checker: {
      const auto cell = static_cast<long>(2 + 2 * cls);
      const long cy = static_cast<long>(std::floor(y)) / cell, cx = static_cast<long>(std::floor(x)) / cell;
      return ((cy + cx) % 2 == 0) ? 0.25 : 0.75;
    }
  }
  return 0.0;
}

}  // namespace

Dataset make_synthetic(const SyntheticConfig& cfg, std::uint64_t seed) {
  if (cfg.classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (cfg.per_class < 1 || cfg.height < 1 || cfg.width < 1 || cfg.channels < 1) {
    throw ConfigError("synthetic dataset extents must be positive");
  }
  if (cfg.noise < 0.0 || cfg.jitter < 0) throw ConfigError("synthetic noise and jitter must be non-negative");
  Dataset ds;
  for (int c = 0; c < cfg.classes; ++c) ds.class_names.push_back("class" + std::to_string(c));
  const Index H = cfg.height, W = cfg.width, C = cfg.channels;
  std::vector<int> raw(static_cast<std::size_t>(C * H * W));
  for (int c = 0; c < cfg.classes; ++c) {
    for (int i = 0; i < cfg.per_class; ++i) {
      char buf[48];
      std::snprintf(buf, sizeof(buf), "syn_c%d_%05d", c, i);
      const std::string id = buf;
      Rng rng(derive_seed(seed, id));
      const auto span = static_cast<std::uint64_t>(2 * cfg.jitter + 1);
      const double shift_y = static_cast<double>(rng.below(span)) - cfg.jitter;
      const double shift_x = static_cast<double>(rng.below(span)) - cfg.jitter;
      for (Index y = 0; y < H; ++y) {
        for (Index x = 0; x < W; ++x) {
          const double base = template_value(cfg.pattern, c, static_cast<double>(y) - shift_y,
                                             static_cast<double>(x) - shift_x, H, W);
          for (Index ch = 0; ch < C; ++ch) {
            const double v = std::clamp(base + cfg.noise * rng.normal(), 0.0, 1.0);
            raw[static_cast<std::size_t>((ch * H + y) * W + x)] = static_cast<int>(std::lround(v * 255.0));
          }
        }
      }
      ImageRecord r{id, c, Tensord(Shape{C, H, W}, normalize_pixels(raw, id)),
                    "synthetic:" + std::string(to_string(cfg.pattern))};
      ds.records.push_back(std::move(r));
    }
  }
  return ds;
}

// --- PNG ingestion -----------------------------------------------------------

std::vector<int> read_png(const std::filesystem::path& path, Index channels, Index& height, Index& width) {
  if (channels != 1 && channels != 3) throw ConfigError("images must be read as 1 or 3 channels");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw DataError("cannot read PNG '" + path.string() + "': " + image.message);
  }
  image.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw DataError("cannot decode PNG '" + path.string() + "': " + image.message);
  }
  height = static_cast<Index>(image.height);
  width = static_cast<Index>(image.width);
  // Interleaved HWC -> planar CHW.
  std::vector<int> raw(buffer.size());
  for (Index y = 0; y < height; ++y) {
    for (Index x = 0; x < width; ++x) {
      for (Index c = 0; c < channels; ++c) {
        raw[static_cast<std::size_t>((c * height + y) * width + x)] =
            buffer[static_cast<std::size_t>((y * width + x) * channels + c)];
      }
    }
  }
  return raw;
}

void write_png(const std::filesystem::path& path, const Tensord& pixels) {
  expect_image(pixels);
  const Index C = pixels.dim(0), H = pixels.dim(1), W = pixels.dim(2);
  if (C != 1 && C != 3) throw ConfigError("PNG export supports 1 or 3 channels");
  std::vector<png_byte> buffer(static_cast<std::size_t>(C * H * W));
  for (Index y = 0; y < H; ++y) {
    for (Index x = 0; x < W; ++x) {
      for (Index c = 0; c < C; ++c) {
        const double v = std::clamp(pixels[(c * H + y) * W + x], 0.0, 1.0);
        buffer[static_cast<std::size_t>((y * W + x) * C + c)] = static_cast<png_byte>(std::lround(v * 255.0));
      }
    }
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(W);
  image.height = static_cast<png_uint_32>(H);
  image.format = C == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, buffer.data(), 0, nullptr)) {
    throw DataError("cannot write PNG '" + path.string() + "': " + image.message);
  }
}

Dataset load_image_tree(const std::filesystem::path& root, Index channels, Index height, Index width) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw DataError("image root '" + root.string() + "' is not a readable directory");
  Dataset ds;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) ds.class_names.push_back(entry.path().filename().string());
  }
  std::sort(ds.class_names.begin(), ds.class_names.end());
  if (ds.class_names.size() < 2) {
    throw DataError("image root '" + root.string() + "' needs at least two class directories");
  }
  for (std::size_t c = 0; c < ds.class_names.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(root / ds.class_names[c])) {
      auto ext = entry.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
      if (entry.is_regular_file() && ext == ".png") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      Index h = 0, w = 0;
      const auto raw = read_png(f, channels, h, w);
      const std::string id = ds.class_names[c] + "/" + f.filename().string();
      ImageRecord r{id, static_cast<int>(c), Tensord(Shape{channels, h, w}, normalize_pixels(raw, id)), f.string()};
      if (height > 0 && width > 0) r.pixels = resize_pixels(r.pixels, height, width);
      ds.records.push_back(std::move(r));
    }
  }
  return ds;
}

}  // namespace mednc::data

#include "hardaware/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "hardaware/checkpoint.hpp"
#include "hardaware/errors.hpp"
#include "hardaware/random.hpp"

namespace hardaware {

std::vector<std::size_t> LabeledImageSet::positive_counts() const {
  const std::size_t n = attribute_count();
  std::vector<std::size_t> c(n, 0);
  for (std::size_t i = 0; i < size(); ++i)
    for (std::size_t j = 0; j < n; ++j) c[j] += attributes[i * n + j] == 1.0;
  return c;
}

std::vector<std::size_t> LabeledImageSet::negative_counts() const {
  std::vector<std::size_t> c = positive_counts();
  for (std::size_t& x : c) x = size() - x;
  return c;
}

void LabeledImageSet::validate() const {
  if (images.rank() != 4) throw DimensionError("image set needs [n x C x H x W] images, got " + to_string(images.shape()));
  const std::size_t n = size();
  if (!classes.empty()) {
    if (classes.size() != n) throw DimensionError("image set has " + std::to_string(classes.size()) + " class labels for " + std::to_string(n) + " images");
    for (int c : classes)
      if (c < 0 || static_cast<std::size_t>(c) >= num_classes) throw LabelError("class label " + std::to_string(c) + " out of range");
  }
  if (!attributes.empty()) {
    if (attributes.rank() != 2 || attributes.dim(0) != n) {
      throw DimensionError("attribute matrix " + to_string(attributes.shape()) + " does not match " + std::to_string(n) + " images");
    }
    for (double y : attributes.data())
      if (y != 0.0 && y != 1.0) throw LabelError("attribute label " + std::to_string(y) + " is not 0 or 1");
  }
  for (double v : images.data())
    if (!(v >= -1.0 && v <= 1.0)) throw DimensionError("pixel value " + std::to_string(v) + " outside [-1, 1]");
}

// IDX ---------------------------------------------------------------------------------

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_u32(const std::vector<unsigned char>& b, std::size_t offset, const std::string& what) {
  if (offset + 4 > b.size()) throw FormatError(what + ": truncated header", offset);
  return (std::uint32_t{b[offset]} << 24) | (std::uint32_t{b[offset + 1]} << 16) | (std::uint32_t{b[offset + 2]} << 8) |
         std::uint32_t{b[offset + 3]};
}

void put_u32(std::ofstream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                              static_cast<char>(v)};
  out.write(b.data(), 4);
}

}  // namespace

LabeledImageSet load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto ib = read_file(images);
  const auto lb = read_file(labels);
  const std::string iname = images.filename().string(), lname = labels.filename().string();
  if (const auto magic = read_u32(ib, 0, iname); magic != 0x00000803) {
    throw FormatError(iname + ": bad image magic " + std::to_string(magic), 0);
  }
  if (const auto magic = read_u32(lb, 0, lname); magic != 0x00000801) {
    throw FormatError(lname + ": bad label magic " + std::to_string(magic), 0);
  }
  const std::size_t count = read_u32(ib, 4, iname), rows = read_u32(ib, 8, iname), cols = read_u32(ib, 12, iname);
  const std::size_t lcount = read_u32(lb, 4, lname);
  if (count != lcount) {
    throw FormatError(lname + ": " + std::to_string(lcount) + " labels for " + std::to_string(count) + " images", 4);
  }
  if (count == 0 || rows == 0 || cols == 0) throw FormatError(iname + ": empty image file", 4);
  const std::size_t pixels = count * rows * cols;
  if (ib.size() < 16 + pixels) throw FormatError(iname + ": truncated pixel data", ib.size());
  if (lb.size() < 8 + count) throw FormatError(lname + ": truncated label data", lb.size());

  LabeledImageSet set;
  set.images = Tensor({count, 1, rows, cols});
  for (std::size_t i = 0; i < pixels; ++i) set.images[i] = static_cast<double>(ib[16 + i]) / 127.5 - 1.0;
  set.classes.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned char c = lb[8 + i];
    if (c > 9) throw FormatError(lname + ": label " + std::to_string(c) + " outside 0..9", 8 + i);
    set.classes[i] = c;
  }
  set.num_classes = 10;
  return set;
}

void save_mnist_idx(const LabeledImageSet& set, const std::filesystem::path& images,
                    const std::filesystem::path& labels) {
  if (set.images.rank() != 4 || set.images.dim(1) != 1) throw DimensionError("IDX export needs single-channel images");
  if (set.classes.size() != set.size()) throw DimensionError("IDX export needs one class label per image");
  std::ofstream io(images, std::ios::binary), lo(labels, std::ios::binary);
  if (!io || !lo) throw std::runtime_error("cannot write IDX files");
  put_u32(io, 0x00000803);
  put_u32(io, static_cast<std::uint32_t>(set.size()));
  put_u32(io, static_cast<std::uint32_t>(set.images.dim(2)));
  put_u32(io, static_cast<std::uint32_t>(set.images.dim(3)));
  std::vector<char> px(set.images.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp((set.images[i] + 1.0) * 127.5, 0.0, 255.0))));
  }
  io.write(px.data(), static_cast<std::streamsize>(px.size()));
  put_u32(lo, 0x00000801);
  put_u32(lo, static_cast<std::uint32_t>(set.size()));
  for (int c : set.classes) lo.put(static_cast<char>(c));
}

LabeledImageSet pad_images(const LabeledImageSet& set, std::size_t pad) {
  LabeledImageSet out = set;
  const std::size_t n = set.size(), c = set.images.dim(1), h = set.images.dim(2), w = set.images.dim(3);
  const std::size_t oh = h + 2 * pad, ow = w + 2 * pad;
  out.images = Tensor({n, c, oh, ow}, -1.0);
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(set.images.ptr() + (p * h + y) * w, w, out.images.ptr() + (p * oh + y + pad) * ow + pad);
  return out;
}

Tensor crop_images(const Tensor& images, std::size_t pad) {
  if (images.rank() != 4 || images.dim(2) <= 2 * pad || images.dim(3) <= 2 * pad) {
    throw DimensionError("cannot crop " + std::to_string(pad) + " pixels from " + to_string(images.shape()));
  }
  const std::size_t planes = images.dim(0) * images.dim(1), h = images.dim(2), w = images.dim(3);
  const std::size_t oh = h - 2 * pad, ow = w - 2 * pad;
  Tensor out({images.dim(0), images.dim(1), oh, ow});
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      std::copy_n(images.ptr() + (p * h + y + pad) * w + pad, ow, out.ptr() + (p * oh + y) * ow);
  return out;
}

// Subsets ------------------------------------------------------------------------------

std::vector<std::size_t> subset_indices(const LabeledImageSet& set, const SubsetRequest& request, std::uint64_t seed) {
  auto rng = make_rng(seed, streams::kSubset);
  std::vector<std::size_t> picked;
  if (request.n_per_class > 0) {
    if (set.classes.empty()) throw ConfigError("stratified subset needs class labels");
    std::vector<std::vector<std::size_t>> by_class(set.num_classes);
    for (std::size_t i = 0; i < set.size(); ++i) by_class[static_cast<std::size_t>(set.classes[i])].push_back(i);
    for (std::size_t c = 0; c < by_class.size(); ++c) {
      auto& idx = by_class[c];
      if (idx.size() < request.n_per_class) {
        throw ConfigError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) + " images, " +
                          std::to_string(request.n_per_class) + " requested");
      }
      std::shuffle(idx.begin(), idx.end(), rng);
      picked.insert(picked.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(request.n_per_class));
    }
  } else {
    if (request.n_total == 0 || request.n_total > set.size()) {
      throw ConfigError("subset of " + std::to_string(request.n_total) + " from " + std::to_string(set.size()) + " images");
    }
    std::vector<std::size_t> idx(set.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    picked.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(request.n_total));
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

LabeledImageSet select(const LabeledImageSet& set, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ConfigError("cannot select zero images");
  Batch b = gather(set, indices);
  LabeledImageSet out;
  out.images = std::move(b.images);
  out.classes = std::move(b.classes);
  out.num_classes = set.num_classes;
  out.attributes = std::move(b.attributes);
  out.split = set.split;
  return out;
}

LabeledImageSet subset(const LabeledImageSet& set, const SubsetRequest& request, std::uint64_t seed) {
  return select(set, subset_indices(set, request, seed));
}

// Synthetic multi-label data ----------------------------------------------------------------

std::vector<std::size_t> SyntheticSpec::expected_counts() const {
  std::vector<std::size_t> c(attributes);
  for (std::size_t j = 0; j < attributes; ++j) {
    const double raw = static_cast<double>(max_count) * std::pow(static_cast<double>(j + 1), -alpha);
    c[j] = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(raw)), min_count, max_count);
  }
  return c;
}

void SyntheticSpec::validate() const {
  if (attributes == 0 || attributes > kMaxSyntheticAttributes) {
    throw ConfigError("synthetic attributes must lie in [1, " + std::to_string(kMaxSyntheticAttributes) + "]");
  }
  if (count == 0) throw ConfigError("synthetic count must be positive");
  if (!(alpha >= 0.0)) throw ConfigError("synthetic alpha must be >= 0");
  if (min_count == 0) throw ConfigError("synthetic min_count must be >= 1");
  if (min_count > max_count) throw ConfigError("synthetic min_count exceeds max_count");
  if (max_count > count) throw ConfigError("synthetic max_count exceeds the image count");
  if (!(amplitude > 0.0) || !(noise >= 0.0)) throw ConfigError("synthetic amplitude must be > 0 and noise >= 0");
  const auto counts = expected_counts();
  const std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  if (total < count) {
    throw ConfigError("synthetic counts provide " + std::to_string(total) + " positives for " + std::to_string(count) +
                      " images; every image needs one");
  }
}

nlohmann::json SyntheticSpec::to_json() const {
  return {{"attributes", attributes}, {"count", count},         {"alpha", alpha}, {"max_count", max_count},
          {"min_count", min_count},   {"amplitude", amplitude}, {"noise", noise}, {"seed", seed}};
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  try {
    s.attributes = j.value("attributes", s.attributes);
    s.count = j.value("count", s.count);
    s.alpha = j.value("alpha", s.alpha);
    s.max_count = j.value("max_count", s.max_count);
    s.min_count = j.value("min_count", s.min_count);
    s.amplitude = j.value("amplitude", s.amplitude);
    s.noise = j.value("noise", s.noise);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

namespace {

// Texture index pairs (u, v) in [0, 8)^2 without (0, 0), ordered by u then v.
std::pair<unsigned, unsigned> texture_of(std::size_t attribute) {
  const auto k = static_cast<unsigned>(attribute + 1);
  return {k / 8, k % 8};
}

double walsh(unsigned u, std::size_t x) { return std::popcount(u & static_cast<unsigned>(x & 7)) % 2 ? -1.0 : 1.0; }

}  // namespace

Tensor synthetic_pattern(std::size_t attribute) {
  if (attribute >= kMaxSyntheticAttributes) throw ConfigError("no texture for attribute " + std::to_string(attribute));
  const auto [u, v] = texture_of(attribute);
  Tensor t({kSyntheticSide, kSyntheticSide});
  for (std::size_t y = 0; y < kSyntheticSide; ++y)
    for (std::size_t x = 0; x < kSyntheticSide; ++x) t.at(y, x) = walsh(u, y) * walsh(v, x);
  return t;
}

LabeledImageSet make_synthetic_multilabel(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t n = spec.count, na = spec.attributes, plane = kSyntheticSide * kSyntheticSide;
  auto rng = make_rng(spec.seed, streams::kSynthetic);
  const auto counts = spec.expected_counts();

  // Assign each attribute to a uniformly chosen set of images.
  std::vector<std::vector<std::uint8_t>> has(n, std::vector<std::uint8_t>(na, 0));
  std::vector<std::size_t> per_image(n, 0);
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  for (std::size_t j = 0; j < na; ++j) {
    std::shuffle(all.begin(), all.end(), rng);
    for (std::size_t r = 0; r < counts[j]; ++r) {
      has[all[r]][j] = 1;
      ++per_image[all[r]];
    }
  }
  // Give every empty image one positive taken from an image holding two or
  // more, which leaves the per-attribute counts unchanged.
  std::vector<std::size_t> donors;
  for (std::size_t i = 0; i < n; ++i)
    if (per_image[i] >= 2) donors.push_back(i);
  for (std::size_t e = 0; e < n; ++e) {
    if (per_image[e] > 0) continue;
    while (true) {
      if (donors.empty()) throw ConfigError("synthetic counts cannot cover every image");
      std::uniform_int_distribution<std::size_t> pick(0, donors.size() - 1);
      const std::size_t slot = pick(rng), d = donors[slot];
      if (per_image[d] < 2) {
        donors[slot] = donors.back();
        donors.pop_back();
        continue;
      }
      std::vector<std::size_t> held;
      for (std::size_t j = 0; j < na; ++j)
        if (has[d][j]) held.push_back(j);
      std::uniform_int_distribution<std::size_t> which(0, held.size() - 1);
      const std::size_t j = held[which(rng)];
      has[d][j] = 0;
      --per_image[d];
      has[e][j] = 1;
      ++per_image[e];
      break;
    }
  }

  std::vector<Tensor> patterns;
  for (std::size_t j = 0; j < na; ++j) patterns.push_back(synthetic_pattern(j));
  LabeledImageSet set;
  set.images = Tensor({n, 1, kSyntheticSide, kSyntheticSide}, 0.0);
  set.attributes = Tensor({n, na}, 0.0);
  std::uniform_real_distribution<double> jitter(-spec.noise, spec.noise);
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double* img = set.images.ptr() + i * plane;
    for (std::size_t j = 0; j < na; ++j) {
      if (!has[i][j]) continue;
      set.attributes[i * na + j] = 1.0;
      for (std::size_t q = 0; q < plane; ++q) img[q] += spec.amplitude * patterns[j][q];
    }
    for (std::size_t q = 0; q < plane; ++q) {
      if (spec.noise > 0.0) img[q] += jitter(rng);
      peak = std::max(peak, std::abs(img[q]));
    }
  }
  // One global rescale keeps pixels in [-1, 1] without disturbing orthogonality.
  if (peak > 1.0) set.images.scale_(1.0 / peak);
  set.split = "synthetic";
  return set;
}

Tensor detect_synthetic_attributes(const Tensor& images, std::size_t attributes) {
  const std::size_t plane = kSyntheticSide * kSyntheticSide;
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != kSyntheticSide || images.dim(3) != kSyntheticSide) {
    throw DimensionError("synthetic detection needs [n x 1 x 32 x 32] images, got " + to_string(images.shape()));
  }
  const std::size_t n = images.dim(0);
  std::vector<Tensor> patterns;
  for (std::size_t j = 0; j < attributes; ++j) patterns.push_back(synthetic_pattern(j));
  Tensor labels({n, attributes}, 0.0);
  std::vector<double> proj(attributes);
  for (std::size_t i = 0; i < n; ++i) {
    const double* img = images.ptr() + i * plane;
    double strongest = 0.0;
    for (std::size_t j = 0; j < attributes; ++j) {
      double s = 0.0;
      for (std::size_t q = 0; q < plane; ++q) s += img[q] * patterns[j][q];
      proj[j] = s / static_cast<double>(plane);
      strongest = std::max(strongest, proj[j]);
    }
    for (std::size_t j = 0; j < attributes; ++j) labels[i * attributes + j] = proj[j] > 0.5 * strongest ? 1.0 : 0.0;
  }
  return labels;
}

void save_image_set(const LabeledImageSet& set, const std::filesystem::path& manifest, const nlohmann::json& meta) {
  Checkpoint cp;
  cp.tensors.push_back({"images", set.images});
  if (!set.attributes.empty()) cp.tensors.push_back({"attributes", set.attributes});
  if (!set.classes.empty()) {
    Tensor c({set.classes.size()});
    for (std::size_t i = 0; i < set.classes.size(); ++i) c[i] = set.classes[i];
    cp.tensors.push_back({"classes", c});
  }
  cp.meta = meta;
  cp.meta["kind"] = "image-set";
  cp.meta["num_classes"] = set.num_classes;
  cp.meta["split"] = set.split;
  save_checkpoint(manifest, cp);
}

LabeledImageSet load_image_set(const std::filesystem::path& manifest) {
  const Checkpoint cp = load_checkpoint(manifest);
  if (cp.meta.value("kind", std::string{}) != "image-set") throw FormatError(manifest.string() + " is not an image set", 0);
  LabeledImageSet set;
  set.images = cp.at("images");
  if (const Tensor* a = cp.find("attributes")) set.attributes = *a;
  if (const Tensor* c = cp.find("classes")) {
    for (double v : c->data()) set.classes.push_back(static_cast<int>(v));
  }
  set.num_classes = cp.meta.value("num_classes", std::size_t{0});
  set.split = cp.meta.value("split", std::string{});
  set.validate();
  return set;
}

// Batching -------------------------------------------------------------------------------

BatchSampler::BatchSampler(std::size_t count, std::size_t batch_size, std::uint64_t seed)
    : count_(count), batch_size_(batch_size), seed_(seed) {
  if (batch_size == 0 || batch_size > count) {
    throw ConfigError("batch size " + std::to_string(batch_size) + " must lie in [1, " + std::to_string(count) + "]");
  }
}

std::vector<std::size_t> BatchSampler::epoch_order(std::uint64_t epoch) const {
  std::vector<std::size_t> order(count_);
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(seed_, streams::kShuffle, epoch);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::vector<std::size_t> BatchSampler::indices(std::uint64_t step) const {
  std::vector<std::size_t> out;
  out.reserve(batch_size_);
  const std::uint64_t start = step * batch_size_;
  std::uint64_t epoch = start / count_;
  std::vector<std::size_t> order = epoch_order(epoch);
  for (std::uint64_t p = start; p < start + batch_size_; ++p) {
    if (p / count_ != epoch) {
      epoch = p / count_;
      order = epoch_order(epoch);
    }
    out.push_back(order[p % count_]);
  }
  return out;
}

Batch gather(const LabeledImageSet& set, const std::vector<std::size_t>& indices) {
  Batch b;
  b.indices = indices;
  const std::size_t per = set.images.size() / set.size();
  Shape shape = set.images.shape();
  shape[0] = indices.size();
  b.images = Tensor(shape);
  const std::size_t na = set.attribute_count();
  if (na) b.attributes = Tensor({indices.size(), na});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t i = indices[r];
    if (i >= set.size()) throw ConfigError("image index " + std::to_string(i) + " out of range");
    std::copy_n(set.images.ptr() + i * per, per, b.images.ptr() + r * per);
    if (!set.classes.empty()) b.classes.push_back(set.classes[i]);
    if (na) std::copy_n(set.attributes.ptr() + i * na, na, b.attributes.ptr() + r * na);
  }
  return b;
}

std::vector<Tensor> build_pyramid(const Tensor& top, std::size_t rungs) {
  if (top.rank() != 4 || rungs == 0) throw DimensionError("pyramid needs [B x C x H x W] input, got " + to_string(top.shape()));
  std::vector<Tensor> out(rungs);
  out[rungs - 1] = top;
  for (std::size_t r = rungs - 1; r > 0; --r) {
    const Tensor& hi = out[r];
    const std::size_t planes = hi.dim(0) * hi.dim(1), h = hi.dim(2), w = hi.dim(3);
    if (h % 2 || w % 2) throw DimensionError("pyramid rung " + to_string(hi.shape()) + " is not divisible by 2");
    Tensor lo({hi.dim(0), hi.dim(1), h / 2, w / 2});
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < h / 2; ++y)
        for (std::size_t x = 0; x < w / 2; ++x) {
          const double* src = hi.ptr() + (p * h + 2 * y) * w + 2 * x;
          lo[(p * (h / 2) + y) * (w / 2) + x] = 0.25 * (src[0] + src[1] + src[w] + src[w + 1]);
        }
    out[r - 1] = std::move(lo);
  }
  return out;
}

}  // namespace hardaware

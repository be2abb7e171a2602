#include "compat/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "compat/digest.hpp"
#include "compat/error.hpp"
#include "compat/rng.hpp"
#include "compat/serde.hpp"

namespace compat {

namespace {

// 8x8 stencils. Every glyph is asymmetric under quarter turns, and each
// carries a 2x2 orientation tab at its top-left, so the applied rotation is
// recoverable from image content.
const std::map<std::string, std::array<std::string, 8>>& glyph_catalog() {
  static const std::map<std::string, std::array<std::string, 8>> cat = {
      {"arrow",  {"##..#...", "##.###..", "..#####.", "...#....", "...#....",
                  "...#....", "...#....", "...#...."}},
      {"ell",    {"##......", "##......", ".#......", ".#......", ".#......",
                  ".#......", ".#####..", "........"}},
      {"flag",   {"##......", "##.####.", ".######.", ".#.####.", ".#......",
                  ".#......", ".#......", ".#......"}},
      {"hook",   {"##...#..", "##...#..",".....#..", ".....#..", ".....#..",
                  ".#...#..", ".#...#..", "..###..."}},
      {"tee",    {"##......", "#######.", "...#....", "...#....", "...#....",
                  "...#....", "...#....", "........"}},
      {"key",    {"##......", "###.....", "#.#.....", "###.....", ".#......",
                  ".##.....", ".#......", ".##....."}},
      {"lambda", {"##......", "##......", "..#.....", "..##....", "..#.#...",
                  ".#...#..", ".#....#.", "#......#"}},
      {"seven",  {"##......", "#######.", ".....#..", "....#...", "...#....",
                  "..#.....", ".#......", ".#......"}},
      {"gamma",  {"##......", "######..", ".#......", ".#......", ".#......",
                  ".#......", ".#......", ".#......"}},
      {"pi",     {"##......", ".######.", "..#..#..", "..#..#..", "..#..#..",
                  "..#..#..", ".#...##.", "........"}},
      {"zig",    {"##......", "######..", "....#...", "...#....", "..#.....",
                  ".#......", ".#####..", "........"}},
      {"fork",   {"##......", "#..#..#.", "#..#..#.", ".######.", "...#....",
                  "...#....", "...#....", "...#...."}},
      {"anchor", {"##.##...", "...#....", ".#####..", "...#....", "...#....",
                  "#..#..#.", "#..#..#.", ".#####.."}},
      {"rho",    {"##......", ".####...", ".#...#..", ".#...#..", ".####...",
                  ".#......", ".#......", "#......."}},
  };
  return cat;
}

const std::map<std::string, int>& texture_catalog() {
  static const std::map<std::string, int> cat = {
      {"solid", 0}, {"striped", 1}, {"checker", 2}};
  return cat;
}

std::array<float, 3> hsv_to_rgb(float h, float s, float v) {
  const float c = v * s;
  const float hp = h * 6.0f;
  const float x = c * (1.0f - std::fabs(std::fmod(hp, 2.0f) - 1.0f));
  float r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const float m = v - c;
  return {r + m, g + m, b + m};
}

// Stable per-class color from the canonical name.
std::array<float, 3> class_color(const std::string& canonical) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (char ch : canonical) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ull;
  }
  const float hue = static_cast<float>(h % 3600) / 3600.0f;
  return hsv_to_rgb(hue, 0.78f, 0.92f);
}

float texture_mod(int texture, int cx, int cy) {
  switch (texture) {
    case 1: return (cy % 2 == 0) ? 1.0f : 0.45f;            // striped
    case 2: return ((cx + cy) % 2 == 0) ? 1.0f : 0.45f;     // checker
    default: return 1.0f;                                   // solid
  }
}

void render_example(float* img, int S, const ShapeSpec& spec,
                    const StyleParams& style, Rng& rng) {
  const auto& rows = glyph_catalog().at(spec.glyph);
  const int texture = texture_catalog().at(spec.texture);
  const std::array<float, 3> color = class_color(spec.canonical());

  const double scale = rng.uniform(1.15, 1.6);
  const int span = static_cast<int>(std::ceil(8.0 * scale));
  const int lo = 1, hi = std::max(lo, S - 1 - span);
  const int px = rng.range_int(lo, hi);
  const int py = rng.range_int(lo, hi);
  const float brightness = static_cast<float>(rng.uniform(0.85, 1.15));

  // Background and noise fill all three channels first.
  for (int ch = 0; ch < 3; ++ch)
    for (int i = 0; i < S * S; ++i)
      img[ch * S * S + i] =
          style.background + style.tint[static_cast<size_t>(ch)] +
          static_cast<float>(rng.normal(0.0, style.noise_sigma));

  for (int y = py; y < std::min(S, py + span); ++y) {
    const int cy = static_cast<int>((y - py) / scale);
    if (cy < 0 || cy > 7) continue;
    for (int x = px; x < std::min(S, px + span); ++x) {
      const int cx = static_cast<int>((x - px) / scale);
      if (cx < 0 || cx > 7) continue;
      if (rows[static_cast<size_t>(cy)][static_cast<size_t>(cx)] != '#') continue;
      // Orientation tab (stencil rows 0..1, cols 0..1) renders white.
      const bool tab = cy <= 1 && cx <= 1;
      const float mod = tab ? 1.0f : texture_mod(texture, cx, cy);
      for (int ch = 0; ch < 3; ++ch) {
        const float base = tab ? 1.0f : color[static_cast<size_t>(ch)];
        img[ch * S * S + y * S + x] =
            style.background * 0.3f +
            style.glyph_gain * brightness * mod * base +
            style.tint[static_cast<size_t>(ch)];
      }
    }
  }

  for (int i = 0; i < 3 * S * S; ++i) img[i] = std::clamp(img[i], 0.0f, 1.0f);
}

TaskDataset generate_split(const std::vector<ShapeSpec>& classes,
                           const StyleParams& style, int n, Rng rng,
                           int image_size, const std::string& task_id,
                           const std::string& split) {
  TaskDataset d;
  d.task_id = task_id;
  d.split = split;
  d.style = style;
  for (const auto& s : classes) d.class_names.push_back(s.canonical());
  d.images = Tensor({n, 3, image_size, image_size});
  d.labels.resize(static_cast<size_t>(n));
  const int K = static_cast<int>(classes.size());
  const int64_t stride = 3LL * image_size * image_size;
  for (int i = 0; i < n; ++i) {
    const int label = i % K;  // balanced within 1 by construction
    d.labels[static_cast<size_t>(i)] = label;
    render_example(d.images.data() + i * stride, image_size,
                   classes[static_cast<size_t>(label)], style, rng);
  }
  return d;
}

}  // namespace

ShapeSpec parse_shape_spec(const std::string& text) {
  ShapeSpec spec;
  const auto colon = text.find(':');
  spec.glyph = text.substr(0, colon);
  if (colon != std::string::npos) spec.texture = text.substr(colon + 1);
  if (!glyph_catalog().count(spec.glyph))
    throw ConfigError("unknown glyph '" + spec.glyph + "' in shape spec '" +
                      text + "'");
  if (!texture_catalog().count(spec.texture))
    throw ConfigError("unknown texture '" + spec.texture + "' in shape spec '" +
                      text + "'");
  return spec;
}

std::vector<std::string> glyph_names() {
  std::vector<std::string> out;
  for (const auto& [name, rows] : glyph_catalog()) out.push_back(name);
  return out;
}

std::vector<std::string> texture_names() {
  std::vector<std::string> out;
  for (const auto& [name, id] : texture_catalog()) out.push_back(name);
  return out;
}

GeneratedTask generate_task(const std::vector<ShapeSpec>& classes,
                            const StyleParams& style, int n_train, int n_test,
                            uint64_t seed, int image_size,
                            const std::string& task_id) {
  if (classes.size() < 2)
    throw ConfigError("generate_task: need at least 2 classes");
  std::set<std::string> seen;
  for (const auto& s : classes) {
    parse_shape_spec(s.canonical());  // validates glyph and texture names
    if (!seen.insert(s.canonical()).second)
      throw ConfigError("generate_task: duplicate class " + s.canonical());
  }
  if (n_train <= 0 || n_test <= 0)
    throw ConfigError("generate_task: non-positive split size");

  Rng base(seed);
  GeneratedTask out;
  out.train = generate_split(classes, style, n_train, base.fork("train"),
                             image_size, task_id, "train");
  out.test = generate_split(classes, style, n_test, base.fork("test"),
                            image_size, task_id, "test");
  return out;
}

TaskPair make_pair(const PairSpec& spec, uint64_t seed) {
  std::set<std::string> all;
  auto check_disjoint = [&all](const std::vector<ShapeSpec>& v,
                               const char* which) {
    for (const auto& s : v)
      if (!all.insert(s.canonical()).second)
        throw ConfigError(std::string("make_pair: class ") + s.canonical() +
                          " appears twice (" + which + ")");
  };
  check_disjoint(spec.shared, "shared");
  check_disjoint(spec.exclusive_a, "exclusive_a");
  check_disjoint(spec.exclusive_b, "exclusive_b");

  std::vector<ShapeSpec> vocab_a = spec.shared;
  vocab_a.insert(vocab_a.end(), spec.exclusive_a.begin(), spec.exclusive_a.end());
  std::vector<ShapeSpec> vocab_b = spec.shared;
  vocab_b.insert(vocab_b.end(), spec.exclusive_b.begin(), spec.exclusive_b.end());

  Rng base(seed);
  TaskPair pair;
  pair.a = generate_task(vocab_a, spec.style_a, spec.n_train, spec.n_test,
                         base.fork("task_a").next_u64(), spec.image_size, "a");
  pair.b = generate_task(vocab_b, spec.style_b, spec.n_train, spec.n_test,
                         base.fork("task_b").next_u64(), spec.image_size, "b");

  const int ka = static_cast<int>(vocab_a.size());
  const int kb = static_cast<int>(vocab_b.size());
  pair.map_a_to_b.assign(static_cast<size_t>(ka), -1);
  pair.map_b_to_a.assign(static_cast<size_t>(kb), -1);
  pair.common_pos_a.assign(static_cast<size_t>(ka), -1);
  pair.common_pos_b.assign(static_cast<size_t>(kb), -1);
  for (size_t i = 0; i < spec.shared.size(); ++i) {
    const std::string name = spec.shared[i].canonical();
    const int ia = static_cast<int>(i);  // shared classes lead both vocabularies
    const int ib = static_cast<int>(i);
    pair.common_classes.push_back(name);
    pair.map_a_to_b[static_cast<size_t>(ia)] = ib;
    pair.map_b_to_a[static_cast<size_t>(ib)] = ia;
    pair.common_pos_a[static_cast<size_t>(ia)] = static_cast<int>(i);
    pair.common_pos_b[static_cast<size_t>(ib)] = static_cast<int>(i);
  }
  return pair;
}

TaskDataset apply_domain_shift(const TaskDataset& d, const DomainShift& shift) {
  TaskDataset out = d;
  out.images = d.images.clone();
  const int N = d.size(), S = d.image_size();
  float* p = out.images.data();
  Rng rng(shift.noise_seed);
  const int64_t plane = static_cast<int64_t>(S) * S;
  for (int i = 0; i < N; ++i)
    for (int ch = 0; ch < 3; ++ch) {
      float* row = p + (static_cast<int64_t>(i) * 3 + ch) * plane;
      for (int64_t j = 0; j < plane; ++j) {
        float v = row[j];
        if (shift.contrast_invert) v = 1.0f - v;
        v += shift.tint[static_cast<size_t>(ch)];
        if (shift.extra_noise_sigma > 0)
          v += static_cast<float>(rng.normal(0.0, shift.extra_noise_sigma));
        row[j] = std::clamp(v, 0.0f, 1.0f);
      }
    }
  return out;
}

Tensor gather_images(const TaskDataset& d, std::span<const int> indices) {
  const int S = d.image_size();
  const int64_t stride = 3LL * S * S;
  Tensor out({static_cast<int>(indices.size()), 3, S, S});
  const float* src = d.images.data();
  float* dst = out.data();
  for (size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= d.size())
      throw InputError("gather_images: index out of range");
    std::memcpy(dst + static_cast<int64_t>(i) * stride,
                src + static_cast<int64_t>(indices[i]) * stride,
                sizeof(float) * static_cast<size_t>(stride));
  }
  return out;
}

std::vector<int> gather_labels(const TaskDataset& d,
                               std::span<const int> indices) {
  std::vector<int> out(indices.size());
  for (size_t i = 0; i < indices.size(); ++i)
    out[i] = d.labels[static_cast<size_t>(indices[i])];
  return out;
}

std::vector<int> indices_with_labels(const TaskDataset& d,
                                     const std::vector<int>& labels) {
  std::set<int> want(labels.begin(), labels.end());
  std::vector<int> out;
  for (int i = 0; i < d.size(); ++i)
    if (want.count(d.labels[static_cast<size_t>(i)])) out.push_back(i);
  return out;
}

TaskDataset restrict_classes(const TaskDataset& d,
                             const std::vector<int>& class_labels) {
  std::vector<int> remap(d.class_names.size(), -1);
  TaskDataset out;
  out.task_id = d.task_id;
  out.split = d.split;
  out.style = d.style;
  for (size_t i = 0; i < class_labels.size(); ++i) {
    const int c = class_labels[i];
    if (c < 0 || c >= d.num_classes())
      throw ConfigError("restrict_classes: label " + std::to_string(c) +
                        " out of range");
    remap[static_cast<size_t>(c)] = static_cast<int>(i);
    out.class_names.push_back(d.class_names[static_cast<size_t>(c)]);
  }
  std::vector<int> keep;
  for (int i = 0; i < d.size(); ++i)
    if (remap[static_cast<size_t>(d.labels[static_cast<size_t>(i)])] >= 0)
      keep.push_back(i);
  out.images = gather_images(d, keep);
  out.labels.reserve(keep.size());
  for (int i : keep)
    out.labels.push_back(remap[static_cast<size_t>(d.labels[static_cast<size_t>(i)])]);
  return out;
}

void save_dataset_cache(const TaskDataset& d,
                        const std::filesystem::path& path) {
  nlohmann::json meta;
  meta["task_id"] = d.task_id;
  meta["split"] = d.split;
  meta["class_names"] = d.class_names;
  meta["n"] = d.size();
  meta["image_size"] = d.image_size();
  meta["style"] = {{"background", d.style.background},
                   {"noise_sigma", d.style.noise_sigma},
                   {"tint", d.style.tint},
                   {"glyph_gain", d.style.glyph_gain}};
  const std::string meta_text = meta.dump();

  std::string buf;
  buf.append("COMPDATA", 8);
  const uint32_t version = 1;
  buf.append(reinterpret_cast<const char*>(&version), 4);
  const uint64_t mlen = meta_text.size();
  buf.append(reinterpret_cast<const char*>(&mlen), 8);
  buf.append(meta_text);
  buf.append(reinterpret_cast<const char*>(d.images.data()),
             sizeof(float) * static_cast<size_t>(d.images.size()));
  std::vector<uint16_t> labels(d.labels.begin(), d.labels.end());
  buf.append(reinterpret_cast<const char*>(labels.data()),
             sizeof(uint16_t) * labels.size());
  const Digest32 dig = sha256(buf.data(), buf.size());
  buf.append(reinterpret_cast<const char*>(dig.data()), dig.size());

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TaskDataset load_dataset_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  if (buf.size() < 8 + 4 + 8 + 32 || std::memcmp(buf.data(), "COMPDATA", 8) != 0)
    throw CheckpointError("not a dataset cache: " + path.string());
  const Digest32 want = sha256(buf.data(), buf.size() - 32);
  if (std::memcmp(buf.data() + buf.size() - 32, want.data(), 32) != 0)
    throw CheckpointError("digest mismatch in " + path.string());
  size_t pos = 8;
  uint32_t version = 0;
  std::memcpy(&version, buf.data() + pos, 4);
  pos += 4;
  if (version != 1)
    throw CheckpointError("unsupported dataset cache version in " +
                          path.string());
  uint64_t mlen = 0;
  std::memcpy(&mlen, buf.data() + pos, 8);
  pos += 8;
  nlohmann::json meta = nlohmann::json::parse(buf.substr(pos, mlen));
  pos += mlen;

  TaskDataset d;
  d.task_id = meta.at("task_id").get<std::string>();
  d.split = meta.at("split").get<std::string>();
  d.class_names = meta.at("class_names").get<std::vector<std::string>>();
  const int n = meta.at("n").get<int>();
  const int s = meta.at("image_size").get<int>();
  d.style.background = meta.at("style").at("background").get<float>();
  d.style.noise_sigma = meta.at("style").at("noise_sigma").get<float>();
  d.style.tint = meta.at("style").at("tint").get<std::array<float, 3>>();
  d.style.glyph_gain = meta.at("style").at("glyph_gain").get<float>();

  d.images = Tensor({n, 3, s, s});
  const size_t img_bytes = sizeof(float) * static_cast<size_t>(d.images.size());
  if (pos + img_bytes + sizeof(uint16_t) * static_cast<size_t>(n) + 32 !=
      buf.size())
    throw CheckpointError("payload size mismatch in " + path.string());
  std::memcpy(d.images.data(), buf.data() + pos, img_bytes);
  pos += img_bytes;
  std::vector<uint16_t> labels(static_cast<size_t>(n));
  std::memcpy(labels.data(), buf.data() + pos, sizeof(uint16_t) * labels.size());
  d.labels.assign(labels.begin(), labels.end());
  return d;
}

}  // namespace compat

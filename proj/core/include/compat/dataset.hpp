#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "compat/tensor.hpp"

namespace compat {

// Task look: background level, pixel noise, a global color cast. Two tasks
// with different styles stand in for datasets with a domain gap.
struct StyleParams {
  float background = 0.15f;
  float noise_sigma = 0.03f;
  std::array<float, 3> tint{0.0f, 0.0f, 0.0f};
  float glyph_gain = 1.0f;
};

// A class is a glyph drawn with a texture; "arrow", "arrow:striped", ...
struct ShapeSpec {
  std::string glyph;
  std::string texture = "solid";
  std::string canonical() const { return glyph + ":" + texture; }
};

ShapeSpec parse_shape_spec(const std::string& text);
std::vector<std::string> glyph_names();
std::vector<std::string> texture_names();

struct TaskDataset {
  std::string task_id;
  std::string split;  // "train" or "test"
  Tensor images;      // [N,3,S,S], values in [0,1]
  std::vector<int> labels;
  std::vector<std::string> class_names;  // canonical spec strings
  StyleParams style;

  int size() const { return images.defined() ? images.dim(0) : 0; }
  int image_size() const { return images.dim(2); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
};

struct GeneratedTask {
  TaskDataset train, test;
};

// Deterministic in (arguments, seed); train/test use disjoint seed streams;
// per-class counts are balanced within 1.
GeneratedTask generate_task(const std::vector<ShapeSpec>& classes,
                            const StyleParams& style, int n_train, int n_test,
                            uint64_t seed, int image_size = 16,
                            const std::string& task_id = "task");

struct TaskPair {
  GeneratedTask a, b;
  std::vector<std::string> common_classes;  // canonical names, shared order
  // Label-index bijection on the common classes; -1 marks exclusive classes.
  std::vector<int> map_a_to_b, map_b_to_a;
  // Own label -> position in common_classes, -1 when exclusive.
  std::vector<int> common_pos_a, common_pos_b;

  int common_count() const { return static_cast<int>(common_classes.size()); }
};

struct PairSpec {
  std::vector<ShapeSpec> shared, exclusive_a, exclusive_b;
  StyleParams style_a, style_b;
  int n_train = 2048, n_test = 512;
  int image_size = 16;
};

TaskPair make_pair(const PairSpec& spec, uint64_t seed);

struct DomainShift {
  std::array<float, 3> tint{0.0f, 0.0f, 0.0f};
  bool contrast_invert = false;
  float extra_noise_sigma = 0.0f;
  uint64_t noise_seed = 7;

  bool is_identity() const {
    return tint[0] == 0 && tint[1] == 0 && tint[2] == 0 && !contrast_invert &&
           extra_noise_sigma == 0;
  }
};

// Labels are untouched; pixel statistics move.
TaskDataset apply_domain_shift(const TaskDataset& d, const DomainShift& shift);

// Row-gather into a training batch.
Tensor gather_images(const TaskDataset& d, std::span<const int> indices);
std::vector<int> gather_labels(const TaskDataset& d,
                               std::span<const int> indices);

// Indices of examples whose label is in the given set.
std::vector<int> indices_with_labels(const TaskDataset& d,
                                     const std::vector<int>& labels);

// Restriction to a class subset with relabeling 0..k-1 (subset order).
TaskDataset restrict_classes(const TaskDataset& d,
                             const std::vector<int>& class_labels);

// On-disk cache, same container family as checkpoints.
void save_dataset_cache(const TaskDataset& d,
                        const std::filesystem::path& path);
TaskDataset load_dataset_cache(const std::filesystem::path& path);

}  // namespace compat

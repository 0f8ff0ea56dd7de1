#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim {

// Spatial structure of one class: a plane wave plus Gaussian blobs, shared
// across centers so that staining is the only inter-center difference.
struct ClassPrototype {
    double freq = 1.0;
    double angle = 0.0;
    double phase = 0.0;
    double wave_amp = 0.28;
    std::vector<std::array<double, 2>> blobs;  // relative (x, y) in [0,1]
    double blob_amp = 0.35;
    double blob_sigma = 0.12;
};

// Per-center affine color map: pixel' = matrix * pixel + offset, row-major 3x3.
struct StainTransform {
    std::array<double, 9> matrix{1, 0, 0, 0, 1, 0, 0, 0, 1};
    std::array<double, 3> offset{0, 0, 0};
};

struct CenterSpec {
    int center_id = 0;
    std::size_t n_per_class = 0;
    std::vector<ClassPrototype> class_prototypes;
    StainTransform stain;
    double noise_sigma = 0.0;
};

struct Sample {
    Tensor image;  // (C, H, W), values in [0, 1]
    int label = 0;
    int center_id = 0;
};

struct PseudoSample {
    Tensor image;  // (C, H, W), values in [0, 1]
    int center_id = 0;
};

struct CenterDataset {
    int center_id = 0;
    std::size_t n_classes = 0;
    std::vector<Sample> samples;
};

// n_per_class samples per class: clamp(stain(structure + noise), 0, 1).
CenterDataset generate_center_dataset(const CenterSpec& spec, std::size_t height,
                                      std::size_t width, std::uint64_t seed);

// Per-center Gaussian resampler over the pooled real images (mean image +
// per-pixel variance). No output is bit-identical to any input; collisions
// trigger a resample.
std::vector<PseudoSample> generate_pseudo_images(const CenterDataset& dataset, std::size_t n,
                                                 std::uint64_t seed);

// Swap k disjoint pairs of grid x grid patches, uniformly at random.
Tensor corrupt(const Tensor& image, std::size_t grid, std::size_t k_swaps, std::uint64_t seed);

// {0,90,180,270} rotations x {none, horizontal flip}; original first.
std::vector<Tensor> augment(const Tensor& image);

// Stratified k-fold split: per class the fold sizes differ by at most one,
// the k test sets partition the dataset.
using FoldIndices = std::pair<std::vector<std::size_t>, std::vector<std::size_t>>;  // train, test
std::vector<FoldIndices> kfold_split(const CenterDataset& dataset, std::size_t k,
                                     std::uint64_t seed);

// every sample replaced by its 8 augmented variants
std::vector<Sample> augment_samples(const std::vector<Sample>& samples);

// (n, C*H*W) batch from selected samples, plus their labels
Tensor flatten_images(const std::vector<Sample>& samples, const std::vector<std::size_t>& idx);
std::vector<int> gather_labels(const std::vector<Sample>& samples,
                               const std::vector<std::size_t>& idx);

// Archive I/O; labels of -1 mark pseudo samples. Bit-exact round-trip.
void save_dataset(const CenterDataset& dataset, const std::string& path);
CenterDataset load_dataset(const std::string& path);
void save_pseudo(const std::vector<PseudoSample>& pseudo, std::size_t n_classes,
                 const std::string& path);
std::vector<PseudoSample> load_pseudo(const std::string& path);

// Built-in center/class defaults used by the stock experiment configs.
std::vector<ClassPrototype> default_class_prototypes(std::size_t n_classes);
std::vector<CenterSpec> default_center_specs(std::size_t n_centers, std::size_t n_classes,
                                             const std::vector<std::size_t>& n_per_class);

} // namespace fedsim

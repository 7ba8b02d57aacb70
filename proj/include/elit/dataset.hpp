#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "elit/tensor.hpp"

namespace elit {

enum class DatasetKind { shapes, external_image_dir };

std::string to_string(DatasetKind kind);
DatasetKind parse_dataset_kind(const std::string& s);

struct ToyDatasetSpec {
    DatasetKind kind = DatasetKind::shapes;
    int image_size = 16;
    int channels = 3;
    int num_classes = 16;
    int samples_per_class = 64;
    std::uint64_t seed = 0;
    // external_image_dir only: one sub-directory of PNG files per class,
    // classes ordered by directory name.
    std::string image_dir;

    void validate() const;
    bool operator==(const ToyDatasetSpec&) const = default;
};

struct Dataset {
    std::vector<Image> images;
    std::vector<int> labels;
    int num_classes = 0;

    size_t size() const { return images.size(); }
};

// Number of distinct shape x color classes the generator can draw.
int shapes_class_capacity(int channels);

// Class c draws shape c % shapes in color c / shapes, at a random position
// and scale, over a dark background. Pixels lie in [-1, 1]. Classes are
// interleaved so that every prefix of the dataset is close to balanced.
Dataset gen_shapes_dataset(const ToyDatasetSpec& spec);

Dataset load_image_dir(const ToyDatasetSpec& spec);

Dataset make_dataset(const ToyDatasetSpec& spec);

// Loads the dataset from cache_dir if a matching archive exists, otherwise
// generates it and writes the archive. The archive name carries
// spec_hash(spec).
Dataset cached_dataset(const ToyDatasetSpec& spec, const std::filesystem::path& cache_dir);

std::uint32_t spec_hash(const ToyDatasetSpec& spec);
void write_dataset_archive(const std::filesystem::path& path, const ToyDatasetSpec& spec, const Dataset& data);
Dataset read_dataset_archive(const std::filesystem::path& path, const ToyDatasetSpec& spec);

// Deterministic split: the last `count` samples become the validation set.
std::pair<Dataset, Dataset> split_validation(const Dataset& data, size_t count);

struct PaddedVariantSpec {
    int pad_factor = 1; // token multiplier; a perfect square
    float fill_value = 0.0f;

    void validate() const;
    int side_factor() const;
    bool operator==(const PaddedVariantSpec&) const = default;
};

// Real content sits in the top-left sub-grid of a canvas side_factor times
// larger on each side. token_mask[i] is true for raster token i holding real
// content.
struct PaddedDataset {
    Dataset data;
    int real_size = 0;
    int padded_size = 0;
    int patch_size = 1;
    std::vector<bool> token_mask;

    int real_tokens() const;
    int padded_tokens() const { return static_cast<int>(token_mask.size()); }
};

PaddedDataset make_padded_variant(const Dataset& data, const PaddedVariantSpec& spec, int patch_size);

Image pad_image(const Image& image, int side_factor, float fill);
Image crop_image(const Image& padded, int height, int width);

// Repeats a per-token mask into a (samples * N) x patch_dim 0/1 matrix.
template <typename T>
Mat<T> token_mask_matrix(const std::vector<bool>& mask, Index samples, int patch_dim);

} // namespace elit

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "impactx/explainer.hpp"
#include "impactx/rng.hpp"
#include "impactx/tensor.hpp"

namespace impactx {

struct LabeledDataset {
    Tensor images;            // [n,c,h,w], values in [0,1]
    std::vector<int> labels;  // in [0, num_classes)
    std::vector<int> ids;     // original sample indices, preserved across splits
    int num_classes = 2;
    std::string split_tag;  // train | val | test

    int size() const { return images.ndim() == 4 ? images.dim(0) : 0; }
    Tensor sample(int i) const;  // [c,h,w] copy
    Tensor batch(const std::vector<int>& positions) const;
    void validate() const;
};

// Two-class images that differ only in where a fixed patch is stamped over
// i.i.d. background noise; linearly separable by construction.
struct SyntheticWatermarkConfig {
    int image_size = 32;
    int channels = 1;
    int patch_size = 6;
    int class0_row = 1, class0_col = 1;
    int class1_row = 25, class1_col = 25;
    float patch_value = 0.85f;
    float noise_level = 0.6f;
    int train_count = 512;
    int test_count = 256;
    std::uint64_t seed = 1234;

    void validate() const;
};

std::pair<LabeledDataset, LabeledDataset> generate_synthetic(const SyntheticWatermarkConfig& config);

// Standard binary batches: records of 3073 bytes, one label byte then 3072
// channel-major pixel bytes. Expects data_batch_1..5.bin and test_batch.bin.
std::pair<LabeledDataset, LabeledDataset> load_cifar10_binary(const std::string& directory);

// Seed-deterministic stratified shuffle split; per-class counts within one
// of the exact proportion.
std::pair<LabeledDataset, LabeledDataset> split_train_val(const LabeledDataset& dataset, float fraction,
                                                          std::uint64_t seed);

Tensor mean_image(const LabeledDataset& dataset);                          // [c,h,w]
std::vector<std::pair<float, float>> channel_ranges(const LabeledDataset& dataset);

// AttributionCache container: magic "IXAC", version u32, sample count u32,
// h u32, w u32, then per entry sample-id u32, class u32, h*w little-endian
// float32 values. Round-trips bit-exactly; writes are atomic (tmp + rename).
void cache_write(const std::string& path, const AttributionCache& cache);
AttributionCache cache_read(const std::string& path);

}  // namespace impactx

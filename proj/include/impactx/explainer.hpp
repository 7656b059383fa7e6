#pragma once

#include <cstdint>
#include <functional>
#include <unordered_map>
#include <vector>

#include "impactx/model.hpp"
#include "impactx/tensor.hpp"

namespace impactx {

// Rectangular region grid tiling an h x w image exactly; region index is
// row-major. Uneven sizes are balanced to within one pixel.
struct RegionGrid {
    int rows = 0, cols = 0, h = 0, w = 0;

    int count() const { return rows * cols; }
    // pixel bounds [y0,y1) x [x0,x1) of region r
    void bounds(int r, int& y0, int& y1, int& x0, int& x1) const;
    int pixel_count(int r) const;
};

struct MaskerConfig {
    enum class Baseline { DatasetMean, Constant };
    Baseline kind = Baseline::DatasetMean;
    float constant_value = 0.0f;
    int grid_rows = 8, grid_cols = 8;
    Tensor mean_image;  // [c,h,w], required for DatasetMean

    RegionGrid grid_for(const Tensor& x) const;  // x: [c,h,w]
    void validate(const Tensor& x) const;
};

// Copy of x with every region not in `keep` replaced by the baseline.
// keep is a bitmask over region indices.
Tensor apply_mask(const Tensor& x, std::uint64_t keep, const RegionGrid& grid, const MaskerConfig& masker);

// Per-pixel relevance for one input and one class.
struct AttributionMap {
    Tensor values;  // [1,h,w]
    int class_index = 0;
    int sample_id = 0;

    // Sum of pixel values inside region r; per-region attribution since maps
    // distribute each region's value uniformly over its pixels.
    double region_value(int r, const RegionGrid& grid) const;
};

// Persisted map from training-sample index to its true-class map.
struct AttributionCache {
    int h = 0, w = 0;
    std::unordered_map<std::uint32_t, AttributionMap> entries;

    bool contains(std::uint32_t sample_id) const { return entries.count(sample_id) > 0; }
    const AttributionMap& at(std::uint32_t sample_id) const;
};

// Binary tree over the region grid: each node is a rectangular block of
// regions split along its longer axis; leaves are single regions. Node ids
// are preorder, which fixes the refinement tie-break order.
struct PartitionNode {
    int r0, r1, c0, c1;  // region-coordinate bounds
    int left = -1, right = -1;
    int region = -1;  // leaf region index, -1 for internal
};

struct PartitionTree {
    int rows = 0, cols = 0;
    std::vector<PartitionNode> nodes;

    int leaf_count() const { return rows * cols; }
    std::uint64_t region_bits(int node) const;
};

PartitionTree build_partition_tree(int rows, int cols);

// Batched model evaluation: [n,c,h,w] -> [n,K] per-class scores.
using ScoreFn = std::function<Tensor(const Tensor&)>;

// Owen-style recursive attribution over the partition tree under an
// evaluation budget (one masked forward = one evaluation, cache hits are
// free). Nodes are refined most-important-first; when the budget runs out,
// a node's value is spread uniformly over its pixels.
AttributionMap partition_shap(const ScoreFn& score_fn, const Tensor& x, int class_k,
                              const MaskerConfig& masker, int budget, int sample_id = 0);

// Exact Shapley values by full coalition enumeration; at most 12 regions.
AttributionMap exact_shapley(const ScoreFn& score_fn, const Tensor& x, int class_k,
                             const MaskerConfig& masker, int sample_id = 0);

// r_i = attribution of the stage-1 classifier's softmax score for the true
// class y — the map cached for training, always the labelled class.
AttributionMap true_class_attribution(const Backbone& model, const Tensor& x, int y,
                                      const MaskerConfig& masker, int budget, int sample_id);

// Instrumentation: counts score-fn evaluations (rows) and maps produced.
namespace explainer_stats {
std::int64_t score_evals();
std::int64_t maps_generated();
void reset();
}  // namespace explainer_stats

}  // namespace impactx

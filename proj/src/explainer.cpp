#include "impactx/explainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <queue>

namespace impactx {

namespace {

std::atomic<std::int64_t> g_score_evals{0};
std::atomic<std::int64_t> g_maps{0};

}  // namespace

namespace explainer_stats {
std::int64_t score_evals() { return g_score_evals.load(); }
std::int64_t maps_generated() { return g_maps.load(); }
void reset() {
    g_score_evals = 0;
    g_maps = 0;
}
}  // namespace explainer_stats

void RegionGrid::bounds(int r, int& y0, int& y1, int& x0, int& x1) const {
    const int row = r / cols, col = r % cols;
    y0 = static_cast<int>(static_cast<std::int64_t>(row) * h / rows);
    y1 = static_cast<int>(static_cast<std::int64_t>(row + 1) * h / rows);
    x0 = static_cast<int>(static_cast<std::int64_t>(col) * w / cols);
    x1 = static_cast<int>(static_cast<std::int64_t>(col + 1) * w / cols);
}

int RegionGrid::pixel_count(int r) const {
    int y0, y1, x0, x1;
    bounds(r, y0, y1, x0, x1);
    return (y1 - y0) * (x1 - x0);
}

RegionGrid MaskerConfig::grid_for(const Tensor& x) const {
    if (x.ndim() != 3) throw DimensionError("masker expects a [c,h,w] sample, got " + shape_str(x.shape()));
    return RegionGrid{grid_rows, grid_cols, x.dim(1), x.dim(2)};
}

void MaskerConfig::validate(const Tensor& x) const {
    if (grid_rows < 1 || grid_cols < 1 || grid_rows * grid_cols < 2) {
        throw ConfigError("masker grid must have at least 2 regions, got " + std::to_string(grid_rows) +
                          "x" + std::to_string(grid_cols));
    }
    if (grid_rows * grid_cols > 64) {
        throw ConfigError("masker grid limited to 64 regions, got " +
                          std::to_string(grid_rows * grid_cols));
    }
    if (x.ndim() != 3) throw DimensionError("masker expects a [c,h,w] sample, got " + shape_str(x.shape()));
    if (x.dim(1) < grid_rows || x.dim(2) < grid_cols) {
        throw ConfigError("masker grid " + std::to_string(grid_rows) + "x" + std::to_string(grid_cols) +
                          " is finer than the image " + shape_str(x.shape()));
    }
    if (kind == Baseline::DatasetMean) {
        if (!mean_image.same_shape(x)) {
            throw ConfigError("masker mean image " + shape_str(mean_image.shape()) +
                              " does not match sample " + shape_str(x.shape()));
        }
    }
}

Tensor apply_mask(const Tensor& x, std::uint64_t keep, const RegionGrid& grid,
                  const MaskerConfig& masker) {
    Tensor out = x;
    const int C = x.dim(0);
    for (int r = 0; r < grid.count(); ++r) {
        if (keep & (1ULL << r)) continue;
        int y0, y1, x0, x1;
        grid.bounds(r, y0, y1, x0, x1);
        for (int c = 0; c < C; ++c) {
            for (int y = y0; y < y1; ++y) {
                float* row = out.data() + (static_cast<std::int64_t>(c) * grid.h + y) * grid.w;
                if (masker.kind == MaskerConfig::Baseline::Constant) {
                    for (int xx = x0; xx < x1; ++xx) row[xx] = masker.constant_value;
                } else {
                    const float* mrow =
                        masker.mean_image.data() + (static_cast<std::int64_t>(c) * grid.h + y) * grid.w;
                    for (int xx = x0; xx < x1; ++xx) row[xx] = mrow[xx];
                }
            }
        }
    }
    return out;
}

double AttributionMap::region_value(int r, const RegionGrid& grid) const {
    int y0, y1, x0, x1;
    grid.bounds(r, y0, y1, x0, x1);
    double sum = 0.0;
    for (int y = y0; y < y1; ++y) {
        const float* row = values.data() + static_cast<std::int64_t>(y) * grid.w;
        for (int xx = x0; xx < x1; ++xx) sum += row[xx];
    }
    return sum;
}

const AttributionMap& AttributionCache::at(std::uint32_t sample_id) const {
    auto it = entries.find(sample_id);
    if (it == entries.end()) {
        throw DataError("attribution cache is missing sample " + std::to_string(sample_id));
    }
    return it->second;
}

// ---- partition tree ----

namespace {

int build_node(PartitionTree& tree, int r0, int r1, int c0, int c1) {
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back(PartitionNode{r0, r1, c0, c1, -1, -1, -1});
    if ((r1 - r0) * (c1 - c0) == 1) {
        tree.nodes[static_cast<size_t>(id)].region = r0 * tree.cols + c0;
        return id;
    }
    int left, right;
    if (r1 - r0 >= c1 - c0) {  // split rows; ties split rows
        const int mid = (r0 + r1) / 2;
        left = build_node(tree, r0, mid, c0, c1);
        right = build_node(tree, mid, r1, c0, c1);
    } else {
        const int mid = (c0 + c1) / 2;
        left = build_node(tree, r0, r1, c0, mid);
        right = build_node(tree, r0, r1, mid, c1);
    }
    tree.nodes[static_cast<size_t>(id)].left = left;
    tree.nodes[static_cast<size_t>(id)].right = right;
    return id;
}

}  // namespace

PartitionTree build_partition_tree(int rows, int cols) {
    if (rows < 1 || cols < 1 || rows * cols < 2) {
        throw ConfigError("partition tree needs at least 2 regions, got " + std::to_string(rows) + "x" +
                          std::to_string(cols));
    }
    if (rows * cols > 64) {
        throw ConfigError("partition tree limited to 64 regions, got " + std::to_string(rows * cols));
    }
    PartitionTree tree;
    tree.rows = rows;
    tree.cols = cols;
    build_node(tree, 0, rows, 0, cols);
    return tree;
}

std::uint64_t PartitionTree::region_bits(int node) const {
    const PartitionNode& n = nodes[static_cast<size_t>(node)];
    std::uint64_t bits = 0;
    for (int r = n.r0; r < n.r1; ++r) {
        for (int c = n.c0; c < n.c1; ++c) bits |= 1ULL << (r * cols + c);
    }
    return bits;
}

// ---- shared coalition evaluator ----

namespace {

class CoalitionEvaluator {
public:
    CoalitionEvaluator(const ScoreFn& fn, const Tensor& x, int class_k, const RegionGrid& grid,
                       const MaskerConfig& masker)
        : fn_(fn), x_(x), class_k_(class_k), grid_(grid), masker_(masker) {}

    bool known(std::uint64_t coalition) const { return cache_.count(coalition) > 0; }
    double get(std::uint64_t coalition) const { return cache_.at(coalition); }
    std::int64_t evaluations() const { return evals_; }

    // Number of uncached coalitions in the list.
    int cost(const std::vector<std::uint64_t>& coalitions) const {
        int n = 0;
        std::uint64_t seen_dup[8];
        int dup = 0;
        for (std::uint64_t c : coalitions) {
            bool repeated = false;
            for (int i = 0; i < dup; ++i) {
                if (seen_dup[i] == c) repeated = true;
            }
            if (repeated || known(c)) continue;
            if (dup < 8) seen_dup[dup++] = c;
            ++n;
        }
        return n;
    }

    // Evaluates all uncached coalitions in one batched score-fn call.
    void evaluate(const std::vector<std::uint64_t>& coalitions) {
        std::vector<std::uint64_t> todo;
        for (std::uint64_t c : coalitions) {
            if (!known(c) && std::find(todo.begin(), todo.end(), c) == todo.end()) todo.push_back(c);
        }
        if (todo.empty()) return;
        const int C = x_.dim(0);
        Tensor batch({static_cast<int>(todo.size()), C, grid_.h, grid_.w});
        for (size_t i = 0; i < todo.size(); ++i) {
            Tensor masked = apply_mask(x_, todo[i], grid_, masker_);
            std::copy(masked.data(), masked.data() + masked.size(),
                      batch.data() + static_cast<std::int64_t>(i) * masked.size());
        }
        const Tensor scores = fn_(batch);
        if (scores.ndim() != 2 || scores.dim(0) != static_cast<int>(todo.size())) {
            throw DimensionError("score-fn returned " + shape_str(scores.shape()) + " for batch of " +
                                 std::to_string(todo.size()));
        }
        if (class_k_ < 0 || class_k_ >= scores.dim(1)) {
            throw DataError("class " + std::to_string(class_k_) + " out of range [0," +
                            std::to_string(scores.dim(1)) + ")");
        }
        evals_ += static_cast<std::int64_t>(todo.size());
        g_score_evals += static_cast<std::int64_t>(todo.size());
        for (size_t i = 0; i < todo.size(); ++i) {
            const float s = scores.at(static_cast<int>(i), class_k_);
            if (!std::isfinite(s)) {
                throw NumericError("score-fn produced a non-finite score for class " +
                                   std::to_string(class_k_));
            }
            cache_[todo[i]] = static_cast<double>(s);
        }
    }

private:
    const ScoreFn& fn_;
    const Tensor& x_;
    int class_k_;
    RegionGrid grid_;
    const MaskerConfig& masker_;
    std::unordered_map<std::uint64_t, double> cache_;
    std::int64_t evals_ = 0;
};

Tensor take_sample(const Tensor& x) {
    if (x.ndim() == 4) {
        if (x.dim(0) != 1) throw DimensionError("explainer expects one sample, got " + shape_str(x.shape()));
        return x.reshaped({x.dim(1), x.dim(2), x.dim(3)});
    }
    if (x.ndim() != 3) throw DimensionError("explainer expects [c,h,w], got " + shape_str(x.shape()));
    return x;
}

AttributionMap spread_map(const std::vector<double>& region_phi, const RegionGrid& grid, int class_k,
                          int sample_id) {
    AttributionMap map;
    map.class_index = class_k;
    map.sample_id = sample_id;
    map.values = Tensor({1, grid.h, grid.w});
    for (int r = 0; r < grid.count(); ++r) {
        int y0, y1, x0, x1;
        grid.bounds(r, y0, y1, x0, x1);
        const float per_pixel = static_cast<float>(region_phi[static_cast<size_t>(r)] /
                                                   static_cast<double>(grid.pixel_count(r)));
        for (int y = y0; y < y1; ++y) {
            float* row = map.values.data() + static_cast<std::int64_t>(y) * grid.w;
            for (int xx = x0; xx < x1; ++xx) row[xx] = per_pixel;
        }
    }
    return map;
}

}  // namespace

// ---- partition explainer ----

AttributionMap partition_shap(const ScoreFn& score_fn, const Tensor& x_in, int class_k,
                              const MaskerConfig& masker, int budget, int sample_id) {
    const Tensor x = take_sample(x_in);
    masker.validate(x);
    const RegionGrid grid = masker.grid_for(x);
    const PartitionTree tree = build_partition_tree(masker.grid_rows, masker.grid_cols);
    const int R = grid.count();
    if (budget < 2 * R) {
        throw ConfigError("budget " + std::to_string(budget) + " below minimum " + std::to_string(2 * R) +
                          " (2x region count)");
    }

    CoalitionEvaluator ev(score_fn, x, class_k, grid, masker);
    const std::uint64_t full = (R == 64) ? ~0ULL : ((1ULL << R) - 1);
    ev.evaluate({full, 0});
    const double v_full = ev.get(full), v_empty = ev.get(0);

    struct Pending {
        double phi;
        int node;
    };
    // Most important node first; ties resolved by creation (preorder) id.
    auto cmp = [](const Pending& a, const Pending& b) {
        const double aa = std::fabs(a.phi), bb = std::fabs(b.phi);
        if (aa != bb) return aa < bb;
        return a.node > b.node;
    };
    std::priority_queue<Pending, std::vector<Pending>, decltype(cmp)> heap(cmp);
    heap.push({v_full - v_empty, 0});

    std::vector<double> region_phi(static_cast<size_t>(R), 0.0);
    std::vector<Pending> unrefined;
    bool exhausted = false;

    while (!heap.empty()) {
        const Pending cur = heap.top();
        heap.pop();
        const PartitionNode& node = tree.nodes[static_cast<size_t>(cur.node)];
        if (node.region >= 0) {
            region_phi[static_cast<size_t>(node.region)] = cur.phi;
            continue;
        }
        const std::uint64_t n_bits = tree.region_bits(cur.node);
        const std::uint64_t l_bits = tree.region_bits(node.left);
        const std::uint64_t r_bits = tree.region_bits(node.right);
        const std::vector<std::uint64_t> needed = {full,          full ^ l_bits, full ^ r_bits,
                                                   full ^ n_bits, 0,             l_bits,
                                                   r_bits,        n_bits};
        if (exhausted || static_cast<int>(ev.evaluations()) + ev.cost(needed) > budget) {
            // Budget exhausted: this and all remaining nodes stay unrefined.
            exhausted = true;
            unrefined.push_back(cur);
            continue;
        }
        ev.evaluate(needed);
        // Marginal contribution of each child averaged over the four
        // contexts: sibling present/absent x everything-outside present/absent.
        const double phi_l = 0.25 * ((ev.get(full) - ev.get(full ^ l_bits)) +
                                     (ev.get(full ^ r_bits) - ev.get(full ^ n_bits)) +
                                     (ev.get(n_bits) - ev.get(r_bits)) + (ev.get(l_bits) - ev.get(0)));
        const double phi_r = 0.25 * ((ev.get(full) - ev.get(full ^ r_bits)) +
                                     (ev.get(full ^ l_bits) - ev.get(full ^ n_bits)) +
                                     (ev.get(n_bits) - ev.get(l_bits)) + (ev.get(r_bits) - ev.get(0)));
        // Redistribute the parent-assigned value so children sum to it
        // exactly; weights by magnitude keep null children at zero.
        const double resid = cur.phi - (phi_l + phi_r);
        const double denom = std::fabs(phi_l) + std::fabs(phi_r);
        const double w_l = denom > 1e-12 ? std::fabs(phi_l) / denom : 0.5;
        heap.push({phi_l + w_l * resid, node.left});
        heap.push({phi_r + (1.0 - w_l) * resid, node.right});
    }

    AttributionMap map = spread_map(region_phi, grid, class_k, sample_id);
    // Unrefined nodes: value spread uniformly over all their pixels.
    for (const Pending& p : unrefined) {
        const PartitionNode& node = tree.nodes[static_cast<size_t>(p.node)];
        std::int64_t pixels = 0;
        for (int r = node.r0; r < node.r1; ++r) {
            for (int c = node.c0; c < node.c1; ++c) pixels += grid.pixel_count(r * grid.cols + c);
        }
        const float per_pixel = static_cast<float>(p.phi / static_cast<double>(pixels));
        for (int r = node.r0; r < node.r1; ++r) {
            for (int c = node.c0; c < node.c1; ++c) {
                int y0, y1, x0, x1;
                grid.bounds(r * grid.cols + c, y0, y1, x0, x1);
                for (int y = y0; y < y1; ++y) {
                    float* row = map.values.data() + static_cast<std::int64_t>(y) * grid.w;
                    for (int xx = x0; xx < x1; ++xx) row[xx] += per_pixel;
                }
            }
        }
    }
    if (!map.values.all_finite()) throw NumericError("partition_shap produced a non-finite map");
    g_maps += 1;
    return map;
}

// ---- exact oracle ----

AttributionMap exact_shapley(const ScoreFn& score_fn, const Tensor& x_in, int class_k,
                             const MaskerConfig& masker, int sample_id) {
    const Tensor x = take_sample(x_in);
    masker.validate(x);
    const RegionGrid grid = masker.grid_for(x);
    const int R = grid.count();
    if (R > 12) {
        throw ConfigError("exact_shapley limited to 12 regions, got " + std::to_string(R));
    }

    CoalitionEvaluator ev(score_fn, x, class_k, grid, masker);
    const std::uint64_t total = 1ULL << R;
    std::vector<std::uint64_t> all(total);
    for (std::uint64_t s = 0; s < total; ++s) all[s] = s;
    for (size_t off = 0; off < all.size(); off += 256) {
        const size_t end = std::min(all.size(), off + 256);
        ev.evaluate(std::vector<std::uint64_t>(all.begin() + static_cast<std::ptrdiff_t>(off),
                                               all.begin() + static_cast<std::ptrdiff_t>(end)));
    }

    std::vector<double> fact(static_cast<size_t>(R) + 1, 1.0);
    for (int i = 1; i <= R; ++i) fact[static_cast<size_t>(i)] = fact[static_cast<size_t>(i - 1)] * i;

    std::vector<double> phi(static_cast<size_t>(R), 0.0);
    for (int i = 0; i < R; ++i) {
        const std::uint64_t bit = 1ULL << i;
        double acc = 0.0;
        for (std::uint64_t s = 0; s < total; ++s) {
            if (s & bit) continue;
            const int size = __builtin_popcountll(s);
            const double weight = fact[static_cast<size_t>(size)] *
                                  fact[static_cast<size_t>(R - size - 1)] / fact[static_cast<size_t>(R)];
            acc += weight * (ev.get(s | bit) - ev.get(s));
        }
        phi[static_cast<size_t>(i)] = acc;
    }

    AttributionMap map = spread_map(phi, grid, class_k, sample_id);
    g_maps += 1;
    return map;
}

AttributionMap true_class_attribution(const Backbone& model, const Tensor& x, int y,
                                      const MaskerConfig& masker, int budget, int sample_id) {
    if (y < 0 || y >= model.spec().num_classes) {
        throw DataError("true class " + std::to_string(y) + " out of range [0," +
                        std::to_string(model.spec().num_classes) + ")");
    }
    ScoreFn fn = [&model](const Tensor& batch) { return model.scores(batch); };
    return partition_shap(fn, x, y, masker, budget, sample_id);
}

}  // namespace impactx

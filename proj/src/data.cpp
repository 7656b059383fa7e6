#include "impactx/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include "binio.hpp"

namespace impactx {

Tensor LabeledDataset::sample(int i) const {
    const int c = images.dim(1), h = images.dim(2), w = images.dim(3);
    const std::int64_t len = static_cast<std::int64_t>(c) * h * w;
    Tensor out({c, h, w});
    std::copy(images.data() + i * len, images.data() + (i + 1) * len, out.data());
    return out;
}

Tensor LabeledDataset::batch(const std::vector<int>& positions) const {
    const int c = images.dim(1), h = images.dim(2), w = images.dim(3);
    const std::int64_t len = static_cast<std::int64_t>(c) * h * w;
    Tensor out({static_cast<int>(positions.size()), c, h, w});
    for (size_t i = 0; i < positions.size(); ++i) {
        std::copy(images.data() + positions[i] * len, images.data() + (positions[i] + 1) * len,
                  out.data() + static_cast<std::int64_t>(i) * len);
    }
    return out;
}

void LabeledDataset::validate() const {
    if (images.ndim() != 4) throw DataError("dataset images must be [n,c,h,w], got " + shape_str(images.shape()));
    if (static_cast<int>(labels.size()) != size() || static_cast<int>(ids.size()) != size()) {
        throw DataError("dataset has " + std::to_string(size()) + " images but " +
                        std::to_string(labels.size()) + " labels / " + std::to_string(ids.size()) + " ids");
    }
    for (int l : labels) {
        if (l < 0 || l >= num_classes) {
            throw DataError("label " + std::to_string(l) + " out of range [0," +
                            std::to_string(num_classes) + ")");
        }
    }
    for (std::int64_t i = 0; i < images.size(); ++i) {
        const float v = images[i];
        if (!(v >= 0.0f && v <= 1.0f)) {
            throw DataError("pixel value " + std::to_string(v) + " outside [0,1]");
        }
    }
}

// ---- synthetic watermark dataset ----

void SyntheticWatermarkConfig::validate() const {
    if (image_size < 4 || channels < 1) throw ConfigError("synthetic: bad image size or channel count");
    if (patch_size < 1) throw ConfigError("synthetic: patch size must be positive");
    auto check = [&](int r, int c, const char* which) {
        if (r < 0 || c < 0 || r + patch_size > image_size || c + patch_size > image_size) {
            throw ConfigError(std::string("synthetic: ") + which + " patch at (" + std::to_string(r) +
                              "," + std::to_string(c) + ") size " + std::to_string(patch_size) +
                              " overflows a " + std::to_string(image_size) + "px image");
        }
    };
    check(class0_row, class0_col, "class-0");
    check(class1_row, class1_col, "class-1");
    if (noise_level < 0.0f || noise_level > 1.0f) throw ConfigError("synthetic: noise level outside [0,1]");
    if (patch_value < 0.0f || patch_value > 1.0f) throw ConfigError("synthetic: patch value outside [0,1]");
    if (train_count < 2 || test_count < 2) throw ConfigError("synthetic: need at least 2 samples per split");
}

namespace {

LabeledDataset synth_split(const SyntheticWatermarkConfig& cfg, int count, Rng rng, std::string tag,
                           int id_offset) {
    const int s = cfg.image_size, c = cfg.channels;
    LabeledDataset ds;
    ds.images = Tensor({count, c, s, s});
    ds.labels.resize(static_cast<size_t>(count));
    ds.ids.resize(static_cast<size_t>(count));
    ds.num_classes = 2;
    ds.split_tag = std::move(tag);
    for (int i = 0; i < count; ++i) {
        const int label = i % 2;  // balanced
        ds.labels[static_cast<size_t>(i)] = label;
        ds.ids[static_cast<size_t>(i)] = id_offset + i;
        const int pr = label == 0 ? cfg.class0_row : cfg.class1_row;
        const int pc = label == 0 ? cfg.class0_col : cfg.class1_col;
        for (int ch = 0; ch < c; ++ch) {
            float* img = ds.images.data() +
                         ((static_cast<std::int64_t>(i) * c + ch) * s) * s;
            for (int y = 0; y < s; ++y) {
                for (int x = 0; x < s; ++x) img[y * s + x] = cfg.noise_level * rng.uniform();
            }
            for (int y = pr; y < pr + cfg.patch_size; ++y) {
                for (int x = pc; x < pc + cfg.patch_size; ++x) img[y * s + x] = cfg.patch_value;
            }
        }
    }
    return ds;
}

}  // namespace

std::pair<LabeledDataset, LabeledDataset> generate_synthetic(const SyntheticWatermarkConfig& config) {
    config.validate();
    Rng root(config.seed);
    LabeledDataset train = synth_split(config, config.train_count, root.fork(1), "train", 0);
    LabeledDataset test = synth_split(config, config.test_count, root.fork(2), "test", config.train_count);
    return {std::move(train), std::move(test)};
}

// ---- CIFAR-10 binary ----

namespace {

constexpr int kCifarRecord = 3073;
constexpr int kCifarPixels = 3072;

void load_cifar_file(const std::string& path, LabeledDataset& ds, int& cursor) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("missing CIFAR-10 batch file " + path);
    in.seekg(0, std::ios::end);
    const std::int64_t file_size = in.tellg();
    in.seekg(0);
    if (file_size % kCifarRecord != 0) {
        throw FormatError(path + ": size " + std::to_string(file_size) +
                          " is not a multiple of 3073-byte records (truncated at byte offset " +
                          std::to_string((file_size / kCifarRecord) * kCifarRecord) + ")");
    }
    const int records = static_cast<int>(file_size / kCifarRecord);
    std::vector<unsigned char> buf(kCifarRecord);
    for (int r = 0; r < records; ++r) {
        if (!in.read(reinterpret_cast<char*>(buf.data()), kCifarRecord)) {
            throw FormatError(path + ": read failed at byte offset " +
                              std::to_string(static_cast<std::int64_t>(r) * kCifarRecord));
        }
        const int label = buf[0];
        if (label >= 10) {
            throw FormatError(path + ": label byte " + std::to_string(label) + " at record " +
                              std::to_string(r) + " out of range [0,10)");
        }
        ds.labels[static_cast<size_t>(cursor)] = label;
        ds.ids[static_cast<size_t>(cursor)] = cursor;
        float* img = ds.images.data() + static_cast<std::int64_t>(cursor) * kCifarPixels;
        for (int i = 0; i < kCifarPixels; ++i) {
            img[i] = static_cast<float>(buf[static_cast<size_t>(1 + i)]) / 255.0f;
        }
        ++cursor;
    }
}

int cifar_file_records(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("missing CIFAR-10 batch file " + path);
    in.seekg(0, std::ios::end);
    const std::int64_t file_size = in.tellg();
    if (file_size % kCifarRecord != 0) {
        throw FormatError(path + ": size " + std::to_string(file_size) +
                          " is not a multiple of 3073-byte records (truncated at byte offset " +
                          std::to_string((file_size / kCifarRecord) * kCifarRecord) + ")");
    }
    return static_cast<int>(file_size / kCifarRecord);
}

}  // namespace

std::pair<LabeledDataset, LabeledDataset> load_cifar10_binary(const std::string& directory) {
    namespace fs = std::filesystem;
    std::vector<std::string> train_files;
    for (int i = 1; i <= 5; ++i) {
        train_files.push_back((fs::path(directory) / ("data_batch_" + std::to_string(i) + ".bin")).string());
    }
    const std::string test_file = (fs::path(directory) / "test_batch.bin").string();

    int train_n = 0;
    for (const auto& f : train_files) train_n += cifar_file_records(f);
    const int test_n = cifar_file_records(test_file);

    LabeledDataset train;
    train.images = Tensor({train_n, 3, 32, 32});
    train.labels.resize(static_cast<size_t>(train_n));
    train.ids.resize(static_cast<size_t>(train_n));
    train.num_classes = 10;
    train.split_tag = "train";
    int cursor = 0;
    for (const auto& f : train_files) load_cifar_file(f, train, cursor);

    LabeledDataset test;
    test.images = Tensor({test_n, 3, 32, 32});
    test.labels.resize(static_cast<size_t>(test_n));
    test.ids.resize(static_cast<size_t>(test_n));
    test.num_classes = 10;
    test.split_tag = "test";
    cursor = 0;
    load_cifar_file(test_file, test, cursor);

    return {std::move(train), std::move(test)};
}

// ---- splits ----

std::pair<LabeledDataset, LabeledDataset> split_train_val(const LabeledDataset& dataset, float fraction,
                                                          std::uint64_t seed) {
    if (!(fraction > 0.0f && fraction < 1.0f)) {
        throw ConfigError("validation fraction must be in (0,1), got " + std::to_string(fraction));
    }
    const int n = dataset.size();
    std::vector<std::vector<int>> by_class(static_cast<size_t>(dataset.num_classes));
    for (int i = 0; i < n; ++i) by_class[static_cast<size_t>(dataset.labels[static_cast<size_t>(i)])].push_back(i);

    Rng rng(seed);
    std::vector<int> train_pos, val_pos;
    for (size_t c = 0; c < by_class.size(); ++c) {
        std::vector<int>& members = by_class[c];
        Rng class_rng = rng.fork(c + 1);
        class_rng.shuffle(members);
        const int take = static_cast<int>(std::lround(static_cast<double>(members.size()) * fraction));
        for (size_t i = 0; i < members.size(); ++i) {
            (static_cast<int>(i) < take ? val_pos : train_pos).push_back(members[i]);
        }
    }
    if (train_pos.empty() || val_pos.empty()) {
        throw ConfigError("validation fraction " + std::to_string(fraction) + " leaves an empty split for " +
                          std::to_string(n) + " samples");
    }
    std::sort(train_pos.begin(), train_pos.end());
    std::sort(val_pos.begin(), val_pos.end());

    auto subset = [&](const std::vector<int>& pos, const char* tag) {
        LabeledDataset out;
        out.images = dataset.batch(pos);
        out.num_classes = dataset.num_classes;
        out.split_tag = tag;
        for (int p : pos) {
            out.labels.push_back(dataset.labels[static_cast<size_t>(p)]);
            out.ids.push_back(dataset.ids[static_cast<size_t>(p)]);
        }
        return out;
    };
    return {subset(train_pos, "train"), subset(val_pos, "val")};
}

Tensor mean_image(const LabeledDataset& dataset) {
    const int n = dataset.size(), c = dataset.images.dim(1), h = dataset.images.dim(2),
              w = dataset.images.dim(3);
    if (n == 0) throw DataError("mean_image of an empty dataset");
    const std::int64_t len = static_cast<std::int64_t>(c) * h * w;
    std::vector<double> acc(static_cast<size_t>(len), 0.0);
    for (int i = 0; i < n; ++i) {
        const float* img = dataset.images.data() + i * len;
        for (std::int64_t j = 0; j < len; ++j) acc[static_cast<size_t>(j)] += img[j];
    }
    Tensor out({c, h, w});
    for (std::int64_t j = 0; j < len; ++j) {
        out[j] = static_cast<float>(acc[static_cast<size_t>(j)] / n);
    }
    return out;
}

std::vector<std::pair<float, float>> channel_ranges(const LabeledDataset& dataset) {
    const int n = dataset.size(), c = dataset.images.dim(1), h = dataset.images.dim(2),
              w = dataset.images.dim(3);
    if (n == 0) throw DataError("channel_ranges of an empty dataset");
    std::vector<std::pair<float, float>> ranges(static_cast<size_t>(c),
                                                {std::numeric_limits<float>::max(),
                                                 std::numeric_limits<float>::lowest()});
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            const float* p = dataset.images.data() + (static_cast<std::int64_t>(i) * c + ch) * plane;
            auto& [lo, hi] = ranges[static_cast<size_t>(ch)];
            for (std::int64_t j = 0; j < plane; ++j) {
                lo = std::min(lo, p[j]);
                hi = std::max(hi, p[j]);
            }
        }
    }
    return ranges;
}

// ---- attribution cache persistence ----

void cache_write(const std::string& path, const AttributionCache& cache) {
    for (const auto& [id, entry] : cache.entries) {
        if (entry.values.ndim() != 3 || entry.values.dim(0) != 1 || entry.values.dim(1) != cache.h ||
            entry.values.dim(2) != cache.w) {
            throw DataError("cache entry " + std::to_string(id) + " has shape " +
                            shape_str(entry.values.shape()) + ", expected (1," + std::to_string(cache.h) +
                            "," + std::to_string(cache.w) + ")");
        }
    }
    std::vector<std::uint32_t> order;
    order.reserve(cache.entries.size());
    for (const auto& [id, entry] : cache.entries) order.push_back(id);
    std::sort(order.begin(), order.end());

    binio::AtomicFileWriter writer(path);
    std::ostream& out = writer.stream();
    out.write("IXAC", 4);
    binio::write_u32(out, 1);
    binio::write_u32(out, static_cast<std::uint32_t>(order.size()));
    binio::write_u32(out, static_cast<std::uint32_t>(cache.h));
    binio::write_u32(out, static_cast<std::uint32_t>(cache.w));
    for (std::uint32_t id : order) {
        const AttributionMap& entry = cache.entries.at(id);
        binio::write_u32(out, id);
        binio::write_u32(out, static_cast<std::uint32_t>(entry.class_index));
        binio::write_f32_array(out, entry.values.data(), static_cast<size_t>(entry.values.size()));
    }
    writer.commit();
}

AttributionCache cache_read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open attribution cache " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::string(magic, 4) != "IXAC") {
        throw FormatError("bad attribution cache magic in " + path);
    }
    const std::uint32_t version = binio::read_u32(in, "cache version");
    if (version != 1) throw FormatError("unsupported attribution cache version " + std::to_string(version));
    AttributionCache cache;
    const std::uint32_t count = binio::read_u32(in, "cache entry count");
    cache.h = static_cast<int>(binio::read_u32(in, "cache height"));
    cache.w = static_cast<int>(binio::read_u32(in, "cache width"));
    if (cache.h <= 0 || cache.w <= 0 || cache.h > 65536 || cache.w > 65536) {
        throw FormatError("implausible cache map size " + std::to_string(cache.h) + "x" +
                          std::to_string(cache.w));
    }
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t id = binio::read_u32(in, "cache sample id");
        AttributionMap entry;
        entry.sample_id = static_cast<int>(id);
        entry.class_index = static_cast<int>(binio::read_u32(in, "cache class"));
        entry.values = Tensor({1, cache.h, cache.w});
        binio::read_f32_array(in, entry.values.data(), static_cast<size_t>(entry.values.size()),
                              "cache map");
        cache.entries.emplace(id, std::move(entry));
    }
    return cache;
}

}  // namespace impactx

#include "impactx/model.hpp"

#include <cmath>
#include <fstream>

#include "binio.hpp"

namespace impactx {

namespace {

std::atomic<std::int64_t> g_m_forwards{0};
std::atomic<std::int64_t> g_lep_forwards{0};
std::atomic<std::int64_t> g_decoder_forwards{0};
std::atomic<std::int64_t> g_classifier_forwards{0};

Parameter* make_param(std::vector<std::unique_ptr<Parameter>>& pool, const std::string& name,
                      Tensor value) {
    pool.push_back(std::make_unique<Parameter>(name, std::move(value)));
    Parameter* p = pool.back().get();
    p->id = static_cast<int>(pool.size()) - 1;
    return p;
}

void check_input(const Tensor& x, const BackboneSpec& s, const char* who) {
    if (x.ndim() != 4 || x.dim(1) != s.in_c || x.dim(2) != s.in_h || x.dim(3) != s.in_w) {
        throw DimensionError(std::string(who) + ": input " + shape_str(x.shape()) +
                             " does not match expected (n," + std::to_string(s.in_c) + "," +
                             std::to_string(s.in_h) + "," + std::to_string(s.in_w) + ")");
    }
}

}  // namespace

namespace model_stats {
std::int64_t m_forwards() { return g_m_forwards.load(); }
std::int64_t lep_forwards() { return g_lep_forwards.load(); }
std::int64_t decoder_forwards() { return g_decoder_forwards.load(); }
std::int64_t classifier_forwards() { return g_classifier_forwards.load(); }
void reset() {
    g_m_forwards = 0;
    g_lep_forwards = 0;
    g_decoder_forwards = 0;
    g_classifier_forwards = 0;
}
}  // namespace model_stats

Tensor kaiming_uniform(Shape shape, int fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
    return t;
}

Tensor softmax_rows(const Tensor& logits) {
    if (logits.ndim() != 2) throw DimensionError("softmax_rows: expected rank 2, got " + shape_str(logits.shape()));
    const int n = logits.dim(0), k = logits.dim(1);
    Tensor out({n, k});
    for (int i = 0; i < n; ++i) {
        const float* row = logits.data() + static_cast<std::int64_t>(i) * k;
        float* o = out.data() + static_cast<std::int64_t>(i) * k;
        float mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < k; ++j) {
            const double e = std::exp(static_cast<double>(row[j]) - mx);
            o[j] = static_cast<float>(e);
            sum += e;
        }
        const float inv = static_cast<float>(1.0 / sum);
        for (int j = 0; j < k; ++j) o[j] *= inv;
    }
    return out;
}

int argmax_row(const float* row, int k) {
    int best = 0;
    for (int j = 1; j < k; ++j) {
        if (row[j] > row[best]) best = j;
    }
    return best;
}

void BackboneSpec::validate() const {
    if (num_classes < 2) throw ConfigError("backbone needs at least 2 classes");
    if (conv_filters.empty()) throw ConfigError("backbone needs at least one conv block");
    int h = in_h, w = in_w;
    for (size_t i = 0; i < conv_filters.size(); ++i) {
        if (conv_filters[i] <= 0) throw ConfigError("conv filter counts must be positive");
        if (h % 2 != 0 || w % 2 != 0) {
            throw ConfigError("input " + std::to_string(in_h) + "x" + std::to_string(in_w) +
                              " not divisible by the pooling stack");
        }
        h /= 2;
        w /= 2;
    }
}

// ---- ConvStack ----

ConvStack::ConvStack(int in_c, int in_h, int in_w, const std::vector<int>& filters, Rng& rng,
                     std::vector<std::unique_ptr<Parameter>>& pool, const std::string& prefix) {
    int c = in_c, h = in_h, w = in_w;
    for (size_t i = 0; i < filters.size(); ++i) {
        const int f = filters[i];
        Block blk;
        blk.k = make_param(pool, prefix + ".conv" + std::to_string(i) + ".k",
                           kaiming_uniform({f, c, 3, 3}, c * 9, rng));
        blk.b = make_param(pool, prefix + ".conv" + std::to_string(i) + ".b", Tensor({f}));
        blocks_.push_back(blk);
        c = f;
        h /= 2;
        w /= 2;
    }
    out_c_ = c;
    out_h_ = h;
    out_w_ = w;
}

Value ConvStack::forward(Tape& t, Value x) const {
    Value v = x;
    for (const Block& blk : blocks_) {
        v = conv2d(t, v, t.weight(*blk.k), t.weight(*blk.b));
        v = relu(t, v);
        v = maxpool2(t, v);
    }
    return v;
}

// ---- Backbone ----

Backbone::Backbone(BackboneSpec spec, Rng& rng) : spec_(std::move(spec)) {
    spec_.validate();
    stack_ = ConvStack(spec_.in_c, spec_.in_h, spec_.in_w, spec_.conv_filters, rng, pool_, "m");
    int in = stack_.out_c() * stack_.out_h() * stack_.out_w();
    for (size_t i = 0; i < spec_.fc_hidden.size(); ++i) {
        const int out = spec_.fc_hidden[i];
        FC fc;
        fc.w = make_param(pool_, "m.fc" + std::to_string(i) + ".w", kaiming_uniform({in, out}, in, rng));
        fc.b = make_param(pool_, "m.fc" + std::to_string(i) + ".b", Tensor({out}));
        fcs_.push_back(fc);
        in = out;
    }
    FC head;
    head.w = make_param(pool_, "m.head.w", kaiming_uniform({in, spec_.num_classes}, in, rng));
    head.b = make_param(pool_, "m.head.b", Tensor({spec_.num_classes}));
    fcs_.push_back(head);
}

Value Backbone::forward(Tape& t, Value x) const {
    check_input(t.value(x), spec_, "backbone");
    g_m_forwards += t.value(x).dim(0);
    Value v = stack_.forward(t, x);
    const Tensor& fm = t.value(v);
    v = reshape(t, v, {fm.dim(0), fm.dim(1) * fm.dim(2) * fm.dim(3)});
    for (size_t i = 0; i < fcs_.size(); ++i) {
        v = dense(t, v, t.weight(*fcs_[i].w), t.weight(*fcs_[i].b));
        if (i + 1 < fcs_.size()) v = relu(t, v);
    }
    return v;
}

Tensor Backbone::logits(const Tensor& x) const {
    Tape t(false);
    return t.value(forward(t, t.borrow(x)));
}

Tensor Backbone::scores(const Tensor& x) const { return softmax_rows(logits(x)); }

std::vector<int> Backbone::predict(const Tensor& x) const {
    const Tensor probs = scores(x);
    const int n = probs.dim(0), k = probs.dim(1);
    std::vector<int> out(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        out[static_cast<size_t>(i)] = argmax_row(probs.data() + static_cast<std::int64_t>(i) * k, k);
    }
    return out;
}

std::vector<Parameter*> Backbone::parameters() const {
    std::vector<Parameter*> out;
    out.reserve(pool_.size());
    for (const auto& p : pool_) out.push_back(p.get());
    return out;
}

std::vector<int> predict_baseline(const Backbone& model, const Tensor& x) { return model.predict(x); }

// ---- Lep ----

Lep::Lep(const BackboneSpec& backbone, int latent_dim, Rng& rng) : latent_dim_(latent_dim) {
    if (latent_dim_ <= 0) throw ConfigError("latent dimension must be positive");
    stack_ = ConvStack(backbone.in_c, backbone.in_h, backbone.in_w, backbone.conv_filters, rng, pool_,
                       "lep");
    const int in = stack_.out_c() * stack_.out_h() * stack_.out_w();
    fc_w_ = make_param(pool_, "lep.fc.w", kaiming_uniform({in, latent_dim_}, in, rng));
    fc_b_ = make_param(pool_, "lep.fc.b", Tensor({latent_dim_}));
}

Value Lep::forward(Tape& t, Value x) const {
    g_lep_forwards += t.value(x).dim(0);
    Value v = stack_.forward(t, x);
    const Tensor& fm = t.value(v);
    v = reshape(t, v, {fm.dim(0), fm.dim(1) * fm.dim(2) * fm.dim(3)});
    v = dense(t, v, t.weight(*fc_w_), t.weight(*fc_b_));
    return sigmoid(t, v);
}

Tensor Lep::encode(const Tensor& x) const {
    Tape t(false);
    return t.value(forward(t, t.borrow(x)));
}

std::vector<Parameter*> Lep::parameters() const {
    std::vector<Parameter*> out;
    out.reserve(pool_.size());
    for (const auto& p : pool_) out.push_back(p.get());
    return out;
}

// ---- Decoder ----

DecoderSpec DecoderSpec::for_input(int h, int w, int latent_dim, int seed_channels) {
    if (h != w) throw ConfigError("decoder expects square inputs, got " + std::to_string(h) + "x" + std::to_string(w));
    int blocks = 1;
    while ((h >> blocks) > 12) ++blocks;
    if (h % (1 << blocks) != 0) {
        throw ConfigError("input size " + std::to_string(h) + " not divisible by the upsampling stack");
    }
    DecoderSpec spec;
    spec.latent_dim = latent_dim;
    spec.seed_channels = seed_channels;
    spec.seed_h = h >> blocks;
    spec.seed_w = w >> blocks;
    spec.out_h = h;
    spec.out_w = w;
    spec.block_channels.clear();
    int c = seed_channels;
    for (int i = 0; i < blocks; ++i) {
        spec.block_channels.push_back(c);
        c = std::max(8, c / 2);
    }
    return spec;
}

Decoder::Decoder(DecoderSpec spec, Rng& rng) : spec_(std::move(spec)) {
    const int seed = spec_.seed_channels * spec_.seed_h * spec_.seed_w;
    fc_w_ = make_param(pool_, "dec.fc.w", kaiming_uniform({spec_.latent_dim, seed}, spec_.latent_dim, rng));
    fc_b_ = make_param(pool_, "dec.fc.b", Tensor({seed}));
    int c = spec_.seed_channels;
    for (size_t i = 0; i < spec_.block_channels.size(); ++i) {
        const int f = spec_.block_channels[i];
        ConvP a;
        a.k = make_param(pool_, "dec.block" + std::to_string(i) + ".conv0.k",
                         kaiming_uniform({f, c, 3, 3}, c * 9, rng));
        a.b = make_param(pool_, "dec.block" + std::to_string(i) + ".conv0.b", Tensor({f}));
        convs_.push_back(a);
        ConvP b;
        b.k = make_param(pool_, "dec.block" + std::to_string(i) + ".conv1.k",
                         kaiming_uniform({f, f, 3, 3}, f * 9, rng));
        b.b = make_param(pool_, "dec.block" + std::to_string(i) + ".conv1.b", Tensor({f}));
        convs_.push_back(b);
        c = f;
    }
    ConvP out;
    out.k = make_param(pool_, "dec.out.k", kaiming_uniform({1, c, 3, 3}, c * 9, rng));
    out.b = make_param(pool_, "dec.out.b", Tensor({1}));
    convs_.push_back(out);
}

Value Decoder::forward(Tape& t, Value z) const {
    const Tensor& zv = t.value(z);
    if (zv.ndim() != 2 || zv.dim(1) != spec_.latent_dim) {
        throw DimensionError("decoder: latent " + shape_str(zv.shape()) + " does not match width " +
                             std::to_string(spec_.latent_dim));
    }
    g_decoder_forwards += zv.dim(0);
    const int n = zv.dim(0);
    Value v = dense(t, z, t.weight(*fc_w_), t.weight(*fc_b_));
    v = relu(t, v);
    v = reshape(t, v, {n, spec_.seed_channels, spec_.seed_h, spec_.seed_w});
    size_t ci = 0;
    for (size_t blk = 0; blk < spec_.block_channels.size(); ++blk) {
        v = conv2d(t, v, t.weight(*convs_[ci].k), t.weight(*convs_[ci].b));
        v = relu(t, v);
        ++ci;
        v = conv2d(t, v, t.weight(*convs_[ci].k), t.weight(*convs_[ci].b));
        v = relu(t, v);
        ++ci;
        v = upsample2x(t, v);
    }
    v = conv2d(t, v, t.weight(*convs_[ci].k), t.weight(*convs_[ci].b));
    return v;
}

Tensor Decoder::decode(const Tensor& z) const {
    Tape t(false);
    return t.value(forward(t, t.borrow(z)));
}

std::vector<Parameter*> Decoder::parameters() const {
    std::vector<Parameter*> out;
    out.reserve(pool_.size());
    for (const auto& p : pool_) out.push_back(p.get());
    return out;
}

// ---- FusedClassifier ----

FusedClassifier::FusedClassifier(ClassifierSpec spec, Rng& rng) : spec_(spec) {
    const int in = spec_.num_classes + spec_.latent_dim;
    if (spec_.hidden > 0) {
        w1_ = make_param(pool_, "cls.fc0.w", kaiming_uniform({in, spec_.hidden}, in, rng));
        b1_ = make_param(pool_, "cls.fc0.b", Tensor({spec_.hidden}));
        w2_ = make_param(pool_, "cls.fc1.w",
                         kaiming_uniform({spec_.hidden, spec_.num_classes}, spec_.hidden, rng));
        b2_ = make_param(pool_, "cls.fc1.b", Tensor({spec_.num_classes}));
    } else {
        w1_ = make_param(pool_, "cls.fc0.w", kaiming_uniform({in, spec_.num_classes}, in, rng));
        b1_ = make_param(pool_, "cls.fc0.b", Tensor({spec_.num_classes}));
    }
}

Value FusedClassifier::forward(Tape& t, Value m, Value z) const {
    const Tensor& mv = t.value(m);
    const Tensor& zv = t.value(z);
    if (mv.ndim() != 2 || mv.dim(1) != spec_.num_classes) {
        throw DimensionError("classifier: m " + shape_str(mv.shape()) + " does not match K=" +
                             std::to_string(spec_.num_classes));
    }
    if (zv.ndim() != 2 || zv.dim(1) != spec_.latent_dim) {
        throw DimensionError("classifier: z " + shape_str(zv.shape()) + " does not match latent width " +
                             std::to_string(spec_.latent_dim));
    }
    g_classifier_forwards += mv.dim(0);
    Value v = concat_cols(t, m, z);
    v = dense(t, v, t.weight(*w1_), t.weight(*b1_));
    if (w2_) {
        v = relu(t, v);
        v = dense(t, v, t.weight(*w2_), t.weight(*b2_));
    }
    return v;
}

std::vector<Parameter*> FusedClassifier::parameters() const {
    std::vector<Parameter*> out;
    out.reserve(pool_.size());
    for (const auto& p : pool_) out.push_back(p.get());
    return out;
}

// ---- ImpactxModel ----

ImpactxModel::ImpactxModel(ImpactxSpec spec, Rng& rng) : spec_(std::move(spec)) {
    m_ = std::make_unique<Backbone>(spec_.backbone, rng);
    lep_ = std::make_unique<Lep>(spec_.backbone, spec_.latent_dim, rng);
    decoder_ = std::make_unique<Decoder>(
        DecoderSpec::for_input(spec_.backbone.in_h, spec_.backbone.in_w, spec_.latent_dim,
                               spec_.decoder_seed_channels),
        rng);
    classifier_ = std::make_unique<FusedClassifier>(
        ClassifierSpec{spec_.backbone.num_classes, spec_.latent_dim, spec_.classifier_hidden}, rng);
}

Tensor ImpactxModel::fused_logits(const Tensor& x) const {
    Tape t(false);
    Value xv = t.borrow(x);
    Value m = m_->forward(t, xv);
    Value z = lep_->forward(t, xv);
    return t.value(classifier_->forward(t, m, z));
}

ImpactxModel::Prediction ImpactxModel::predict(const Tensor& x) const {
    if (!frozen(Subnet::M)) {
        throw StateError("predict on an untrained model: backbone is not frozen");
    }
    Tape t(false);
    Value xv = t.borrow(x);
    Value m = m_->forward(t, xv);
    Value z = lep_->forward(t, xv);
    Value logits = classifier_->forward(t, m, z);
    Value maps = decoder_->forward(t, z);
    const Tensor probs = softmax_rows(t.value(logits));
    const int n = probs.dim(0), k = probs.dim(1);
    Prediction pred;
    pred.labels.resize(static_cast<size_t>(n));
    pred.scores.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const float* row = probs.data() + static_cast<std::int64_t>(i) * k;
        const int label = argmax_row(row, k);
        pred.labels[static_cast<size_t>(i)] = label;
        pred.scores[static_cast<size_t>(i)] = row[label];
    }
    pred.maps = t.value(maps);
    return pred;
}

std::vector<Parameter*> ImpactxModel::parameters() const {
    std::vector<Parameter*> out;
    for (Subnet s : {Subnet::M, Subnet::LepNet, Subnet::DecoderNet, Subnet::ClassifierNet}) {
        auto sub = subnet_parameters(s);
        out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
}

std::vector<Parameter*> ImpactxModel::trainable_parameters() const {
    std::vector<Parameter*> out;
    for (Subnet s : {Subnet::M, Subnet::LepNet, Subnet::DecoderNet, Subnet::ClassifierNet}) {
        if (frozen(s)) continue;
        auto sub = subnet_parameters(s);
        out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
}

std::vector<Parameter*> ImpactxModel::subnet_parameters(Subnet s) const {
    switch (s) {
        case Subnet::M:
            return m_->parameters();
        case Subnet::LepNet:
            return lep_->parameters();
        case Subnet::DecoderNet:
            return decoder_->parameters();
        case Subnet::ClassifierNet:
            return classifier_->parameters();
    }
    return {};
}

void ImpactxModel::save(const std::string& path) const {
    save_checkpoint(path, {{"backbone", m_->parameters()},
                           {"lep", lep_->parameters()},
                           {"decoder", decoder_->parameters()},
                           {"classifier", classifier_->parameters()}});
}

void ImpactxModel::load(const std::string& path) {
    load_checkpoint(path, {{"backbone", m_->parameters()},
                           {"lep", lep_->parameters()},
                           {"decoder", decoder_->parameters()},
                           {"classifier", classifier_->parameters()}});
}

// ---- checkpoint container ----

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, std::vector<Parameter*>>>& subnets) {
    binio::AtomicFileWriter writer(path);
    std::ostream& out = writer.stream();
    out.write("IMPX", 4);
    binio::write_u32(out, 1);
    binio::write_u32(out, static_cast<std::uint32_t>(subnets.size()));
    for (const auto& [name, params] : subnets) {
        binio::write_string(out, name);
        binio::write_u32(out, static_cast<std::uint32_t>(params.size()));
        for (const Parameter* p : params) {
            binio::write_u32(out, static_cast<std::uint32_t>(p->value.ndim()));
            for (int d = 0; d < p->value.ndim(); ++d) {
                binio::write_u32(out, static_cast<std::uint32_t>(p->value.dim(d)));
            }
            binio::write_f32_array(out, p->value.data(), static_cast<size_t>(p->value.size()));
        }
    }
    writer.commit();
}

void load_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, std::vector<Parameter*>>>& subnets) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::string(magic, 4) != "IMPX") {
        throw FormatError("bad checkpoint magic in " + path);
    }
    const std::uint32_t version = binio::read_u32(in, "checkpoint version");
    if (version != 1) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t count = binio::read_u32(in, "subnet count");
    if (count != subnets.size()) {
        throw FormatError("checkpoint has " + std::to_string(count) + " sub-networks, expected " +
                          std::to_string(subnets.size()));
    }
    for (const auto& [name, params] : subnets) {
        const std::string got = binio::read_string(in, "subnet name");
        if (got != name) throw FormatError("checkpoint subnet '" + got + "', expected '" + name + "'");
        const std::uint32_t pcount = binio::read_u32(in, "parameter count");
        if (pcount != params.size()) {
            throw FormatError("subnet '" + name + "' has " + std::to_string(pcount) +
                              " parameters, expected " + std::to_string(params.size()));
        }
        for (Parameter* p : params) {
            const std::uint32_t ndim = binio::read_u32(in, "parameter rank");
            Shape shape(ndim);
            for (std::uint32_t d = 0; d < ndim; ++d) {
                shape[d] = static_cast<int>(binio::read_u32(in, "parameter dim"));
            }
            if (shape != p->value.shape()) {
                throw FormatError("checkpoint parameter " + p->name + " has shape " + shape_str(shape) +
                                  ", model expects " + shape_str(p->value.shape()));
            }
            binio::read_f32_array(in, p->value.data(), static_cast<size_t>(p->value.size()),
                                  "parameter data");
        }
    }
}

}  // namespace impactx

#pragma once

#include <array>
#include <atomic>
#include <memory>
#include <string>
#include <vector>

#include "impactx/autograd.hpp"
#include "impactx/rng.hpp"

namespace impactx {

// Kaiming-uniform fan-in init: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
Tensor kaiming_uniform(Shape shape, int fan_in, Rng& rng);

// Plain (tape-free) helpers shared by inference paths.
Tensor softmax_rows(const Tensor& logits);
int argmax_row(const float* row, int k);  // first-index tie-break

// ---- sub-network specs ----

struct BackboneSpec {
    int in_c = 3, in_h = 32, in_w = 32;
    std::vector<int> conv_filters{6, 16};  // one [conv3x3, relu, maxpool2] block per entry
    std::vector<int> fc_hidden{120, 84};
    int num_classes = 10;

    void validate() const;
};

struct DecoderSpec {
    int latent_dim = 512;
    int seed_channels = 32;
    int seed_h = 8, seed_w = 8;
    std::vector<int> block_channels{32, 16};  // output channels of each [conv,conv,upsample] block
    int out_h = 32, out_w = 32;

    // Seed grid rule: fewest upsampling blocks (at least one) that bring the
    // output size down to a seed of 12 or less: 32 -> 8x8 with two blocks,
    // 96 -> 12x12 with three.
    static DecoderSpec for_input(int h, int w, int latent_dim, int seed_channels);
};

struct ClassifierSpec {
    int num_classes = 10;
    int latent_dim = 512;
    int hidden = 128;  // 0 = single linear layer
};

// ---- modules ----

class ConvStack {
public:
    ConvStack() = default;
    ConvStack(int in_c, int in_h, int in_w, const std::vector<int>& filters, Rng& rng,
              std::vector<std::unique_ptr<Parameter>>& pool, const std::string& prefix);

    Value forward(Tape& t, Value x) const;
    int out_c() const { return out_c_; }
    int out_h() const { return out_h_; }
    int out_w() const { return out_w_; }

private:
    struct Block {
        Parameter* k = nullptr;
        Parameter* b = nullptr;
    };
    std::vector<Block> blocks_;
    int out_c_ = 0, out_h_ = 0, out_w_ = 0;
};

// Feature extractor with classification head; emits the K pre-softmax scores.
class Backbone {
public:
    Backbone(BackboneSpec spec, Rng& rng);

    const BackboneSpec& spec() const { return spec_; }
    Value forward(Tape& t, Value x) const;

    Tensor logits(const Tensor& x) const;
    Tensor scores(const Tensor& x) const;              // softmax probabilities
    std::vector<int> predict(const Tensor& x) const;   // argmax of softmax

    std::vector<Parameter*> parameters() const;

private:
    BackboneSpec spec_;
    std::vector<std::unique_ptr<Parameter>> pool_;
    ConvStack stack_;
    struct FC {
        Parameter* w = nullptr;
        Parameter* b = nullptr;
    };
    std::vector<FC> fcs_;  // hidden layers + final logits layer
};

// Latent explanation predictor: backbone conv topology with the FC stack
// replaced by one fully-connected layer to the latent width, sigmoid output.
class Lep {
public:
    Lep(const BackboneSpec& backbone, int latent_dim, Rng& rng);

    int latent_dim() const { return latent_dim_; }
    Value forward(Tape& t, Value x) const;
    Tensor encode(const Tensor& x) const;

    std::vector<Parameter*> parameters() const;

private:
    int latent_dim_ = 512;
    std::vector<std::unique_ptr<Parameter>> pool_;
    ConvStack stack_;
    Parameter* fc_w_ = nullptr;
    Parameter* fc_b_ = nullptr;
};

// FC from latent to a seed grid, then [conv,conv,upsample] blocks and a
// final conv to one channel at the input spatial size.
class Decoder {
public:
    Decoder(DecoderSpec spec, Rng& rng);

    const DecoderSpec& spec() const { return spec_; }
    Value forward(Tape& t, Value z) const;
    Tensor decode(const Tensor& z) const;  // [n,1,out_h,out_w]

    std::vector<Parameter*> parameters() const;

private:
    DecoderSpec spec_;
    std::vector<std::unique_ptr<Parameter>> pool_;
    Parameter* fc_w_ = nullptr;
    Parameter* fc_b_ = nullptr;
    struct ConvP {
        Parameter* k = nullptr;
        Parameter* b = nullptr;
    };
    std::vector<ConvP> convs_;  // two per block, plus the final 1-channel conv
};

// Shallow FC classifier over concat(m, z).
class FusedClassifier {
public:
    FusedClassifier(ClassifierSpec spec, Rng& rng);

    const ClassifierSpec& spec() const { return spec_; }
    Value forward(Tape& t, Value m, Value z) const;

    std::vector<Parameter*> parameters() const;

private:
    ClassifierSpec spec_;
    std::vector<std::unique_ptr<Parameter>> pool_;
    Parameter* w1_ = nullptr;
    Parameter* b1_ = nullptr;
    Parameter* w2_ = nullptr;  // null when hidden == 0
    Parameter* b2_ = nullptr;
};

// ---- the composed dual-branch model ----

enum class Subnet { M = 0, LepNet = 1, DecoderNet = 2, ClassifierNet = 3 };

struct ImpactxSpec {
    BackboneSpec backbone;
    int latent_dim = 512;
    int classifier_hidden = 128;
    int decoder_seed_channels = 32;
};

class ImpactxModel {
public:
    ImpactxModel(ImpactxSpec spec, Rng& rng);

    const ImpactxSpec& spec() const { return spec_; }
    Backbone& backbone() { return *m_; }
    const Backbone& backbone() const { return *m_; }
    Lep& lep() { return *lep_; }
    const Lep& lep() const { return *lep_; }
    Decoder& decoder() { return *decoder_; }
    const Decoder& decoder() const { return *decoder_; }
    FusedClassifier& classifier() { return *classifier_; }
    const FusedClassifier& classifier() const { return *classifier_; }

    void freeze(Subnet s, bool on = true) { frozen_[static_cast<size_t>(s)] = on; }
    bool frozen(Subnet s) const { return frozen_[static_cast<size_t>(s)]; }

    // Fused logits C(M(x), LEP(x)) for a batch, forward-only.
    Tensor fused_logits(const Tensor& x) const;

    struct Prediction {
        std::vector<int> labels;
        std::vector<float> scores;  // softmax score of the predicted class
        Tensor maps;                // [n,1,h,w]
    };
    // Self-contained inference: class plus reconstructed attribution map.
    // Requires the backbone to be frozen (trained two-stage state); throws
    // StateError otherwise.
    Prediction predict(const Tensor& x) const;

    std::vector<Parameter*> parameters() const;
    std::vector<Parameter*> trainable_parameters() const;  // respects frozen flags
    std::vector<Parameter*> subnet_parameters(Subnet s) const;

    void save(const std::string& path) const;
    void load(const std::string& path);

private:
    ImpactxSpec spec_;
    std::unique_ptr<Backbone> m_;
    std::unique_ptr<Lep> lep_;
    std::unique_ptr<Decoder> decoder_;
    std::unique_ptr<FusedClassifier> classifier_;
    std::array<bool, 4> frozen_{false, false, false, false};
};

std::vector<int> predict_baseline(const Backbone& model, const Tensor& x);

// ---- checkpoint container ----
// Layout: magic "IMPX", version u32, subnet count u32; per subnet a name
// (u32 length + bytes) and parameter count u32; per parameter ndim u32,
// dims u32 each, then raw little-endian float32 data. Bit-exact round-trip.
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, std::vector<Parameter*>>>& subnets);
void load_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, std::vector<Parameter*>>>& subnets);

// Per-sample forward counters (test instrumentation).
namespace model_stats {
std::int64_t m_forwards();
std::int64_t lep_forwards();
std::int64_t decoder_forwards();
std::int64_t classifier_forwards();
void reset();
}  // namespace model_stats

}  // namespace impactx

#pragma once

// Small masked block-diffusion transformer with LoRA adapters on the Q, K and
// V projections. Forward and reverse-mode passes are written out by hand.

#include <Eigen/Dense>

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "edit/numeric.hpp"

namespace edit {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

inline constexpr int kMaskToken = 0;
inline constexpr int kSepToken = 1;
inline constexpr int kFirstContentToken = 2;

struct ModelConfig {
    int vocab_size = 64;
    int d_model = 64;
    int n_heads = 4;
    int n_layers = 2;  ///< transformer blocks
    int d_ff = 128;
    int lora_rank = 4;
    double lora_scale = 1.0;
    int block_length = 16;
    int max_blocks = 2;
    int max_positions = 96;
    std::uint64_t seed = 0;

    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Projection { q = 0, k = 1, v = 2 };
enum class LoraSide { a = 0, b = 1 };
enum class TapKind { branch, full };

const char* to_string(Projection p) noexcept;
const char* to_string(LoraSide s) noexcept;

/// Which projection output feeds the alignment engine.
struct TapSpec {
    int layer = -1;  ///< -1 means last layer
    Projection proj = Projection::q;
    LoraSide side = LoraSide::b;
    TapKind kind = TapKind::branch;

    /// e.g. "L1.q.B"
    std::string module_id(const ModelConfig& cfg) const;
    int resolved_layer(const ModelConfig& cfg) const;
    /// Activation length: rank for A taps, d_model otherwise.
    int width(const ModelConfig& cfg) const;
};

struct LoraPair {
    Mat a;  ///< r x d_in
    Mat b;  ///< d_out x r
};

struct LayerParams {
    Vec g1, g2;
    std::array<Mat, 3> w;  ///< q, k, v: d x d (x W)
    Mat wo;
    Mat w1;
    Vec b1;
    Mat w2;
    Vec b2;
    std::array<LoraPair, 3> lora;
};

struct ModelParams {
    Mat tok_emb;  ///< V x d
    Mat pos_emb;  ///< P x d
    std::vector<LayerParams> layers;
    Vec gf;
    Mat w_out;  ///< d x V
    Vec b_out;
};

struct ParamRef {
    std::string name;
    Eigen::Map<Mat> value;
};

/// Named views over every base tensor (vectors as 1 x n), in a fixed order.
std::vector<ParamRef> base_tensors(ModelParams& p);
/// Named views over every LoRA tensor: L{l}.{q,k,v}.{A,B}
std::vector<ParamRef> lora_tensors(ModelParams& p);

enum class GradScope { none, lora, all };

/// Per-position pinned tap outputs (token freezing). Only meaningful for
/// branch or full taps on the B side; rows replace the tapped output.
using TapPins = std::map<int, DenseVector>;

struct LayerCache {
    Mat x_in, h;
    Vec inv1;
    std::array<Mat, 3> ha;   ///< h A^T  (n x r)
    std::array<Mat, 3> branch;  ///< LoRA branch outputs (n x d), after pinning
    std::array<Mat, 3> out;  ///< projection outputs (n x d)
    std::vector<Mat> attn;   ///< per head n x n
    Mat o, x2, h2, z;
    Vec inv2;
};

struct ForwardResult {
    Mat logits;  ///< n x V
    std::vector<LayerCache> cache;
    Mat x_final, h_final;
    Vec inv_f;
    std::vector<int> tokens;
    bool recorded = false;
};

class ToyModel {
public:
    explicit ToyModel(ModelConfig cfg);

    const ModelConfig& config() const noexcept { return cfg_; }
    ModelParams& params() noexcept { return params_; }
    const ModelParams& params() const noexcept { return params_; }

    /// Throws VocabOverflow on bad ids. `record` keeps the activations needed
    /// by backward.
    ForwardResult forward(const std::vector<int>& tokens, bool record = true,
                          const TapSpec* pin_tap = nullptr, const TapPins* pins = nullptr) const;

    /// Gradients of sum(dlogits . logits) into `grads` (same layout as params).
    void backward(const ForwardResult& fwd, const Mat& dlogits, ModelParams& grads, GradScope scope) const;

    /// Tap output rows for the given positions.
    std::vector<DenseVector> tap(const ForwardResult& fwd, const TapSpec& spec,
                                 const std::vector<int>& positions) const;

    ModelParams zero_like() const;
    /// CRC32 over the base tensors (LoRA excluded).
    std::uint32_t base_checksum() const;
    /// Zeroes every LoRA B (identity-at-init).
    void reset_lora();

    void save(const std::filesystem::path& path) const;
    static ToyModel load(const std::filesystem::path& path);

private:
    ModelConfig cfg_;
    ModelParams params_;
};

/// Softmax of a logits row.
DenseVector softmax_row(const Mat& logits, int row);

/// Cross-entropy over target positions; returns the mean loss and fills
/// dlogits (already divided by the number of targets).
double masked_cross_entropy(const Mat& logits, const std::vector<std::pair<int, int>>& targets, Mat& dlogits);

}  // namespace edit

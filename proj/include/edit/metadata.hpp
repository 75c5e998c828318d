#pragma once

// Training-time capture of AdamW dynamics over LoRA parameters and the
// compact reasoning-map metadata persisted after fine-tuning.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "edit/numeric.hpp"

namespace edit {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    /// Only `false` is supported: the captured update omits the
    /// 1/(1-beta^k) factors.
    bool bias_correction = false;

    void validate() const;
};

struct MomentState {
    DenseMatrix m;
    DenseMatrix v;
    std::size_t step = 0;

    static MomentState zeros(std::size_t rows, std::size_t cols) {
        return {DenseMatrix(rows, cols), DenseMatrix(rows, cols), 0};
    }
};

struct AdamWStep {
    MomentState state;
    DenseMatrix update;  ///< U = M / (sqrt(V) + eps), element-wise
};

/// One moment update. Weight decay is not part of the gradient here; callers
/// apply it to the parameter separately.
AdamWStep adamw_step(const MomentState& state, const DenseMatrix& grad, const AdamWConfig& cfg);

/// In-place variant used by training loops; returns the update tensor.
DenseMatrix& adamw_step_inplace(MomentState& state, const DenseMatrix& grad,
                                const AdamWConfig& cfg, DenseMatrix& update);

/// Running average of update tensors across fine-tuning steps.
class EvolutionAccumulator {
public:
    EvolutionAccumulator() = default;
    EvolutionAccumulator(std::size_t rows, std::size_t cols);

    void accumulate(const DenseMatrix& update);

    std::size_t count() const noexcept { return count_; }
    const DenseMatrix& running_sum() const noexcept { return sum_u_; }

    /// Mean over all accumulated tensors. Each element is summed pairwise over
    /// its sorted history, so the result does not depend on call order.
    DenseMatrix finalize() const;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    DenseMatrix sum_u_;
    std::size_t count_ = 0;
    std::vector<DenseMatrix> history_;
};

/// Free-function form of EvolutionAccumulator::accumulate.
EvolutionAccumulator accumulate_evolution(EvolutionAccumulator acc, const DenseMatrix& update);

struct EvolutionVector {
    DenseVector u;
    std::string module_id;
    std::uint32_t d_out = 0;
    std::uint32_t rank = 0;

    friend bool operator==(const EvolutionVector&, const EvolutionVector&) = default;
};

struct SubspaceBasis {
    DenseMatrix columns;  ///< d_out x k
    std::uint32_t k = 0;
    std::string source_module;

    friend bool operator==(const SubspaceBasis&, const SubspaceBasis&) = default;
};

/// u[p] = ||row p||_2
EvolutionVector reduce_row_energy(const DenseMatrix& evolution, std::string module_id = {});
/// u[p] = mean |row p|
EvolutionVector reduce_row_mean(const DenseMatrix& evolution, std::string module_id = {});

SubspaceBasis build_subspace(const DenseMatrix& evolution, std::size_t k,
                             std::string source_module = {});

struct MetadataBundle {
    std::vector<EvolutionVector> vectors;
    std::vector<SubspaceBasis> bases;

    const EvolutionVector* find_vector(const std::string& module_id) const;
    const SubspaceBasis* find_basis(const std::string& module_id) const;
};

/// EDITMETA encoding. Coefficients are stored as little-endian float32.
std::vector<std::uint8_t> encode_metadata(const std::vector<EvolutionVector>& vectors,
                                          const std::vector<SubspaceBasis>& bases);
MetadataBundle decode_metadata(const std::vector<std::uint8_t>& bytes);

std::size_t persist_metadata(const std::vector<EvolutionVector>& vectors,
                             const std::vector<SubspaceBasis>& bases,
                             const std::filesystem::path& path);
MetadataBundle load_metadata(const std::filesystem::path& path);

/// Number of coefficient-payload bytes an entry with these dimensions carries.
constexpr std::size_t coefficient_payload_bytes(std::size_t d_out, std::size_t k) {
    return d_out * (k < 1 ? 1 : k) * sizeof(float);
}

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t len);

}  // namespace edit

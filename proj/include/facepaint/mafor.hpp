#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "facepaint/backend.hpp"
#include "facepaint/container.hpp"
#include "facepaint/dataprep.hpp"
#include "facepaint/optim.hpp"

namespace facepaint {

struct ControlBranchConfig {
    int latent_channels = 4;
    int hidden_channels = 8;
    int embedding_dim = 16;
    int time_dim = 8;
    int condition_channels = 8;  // width of the condition encoder's hidden stages
    int factor = 8;              // image -> latent downsampling, a power of two
    bool zero_init = true;
};

struct ConditionTrace {
    std::vector<Grid> inputs;  // input of each stage's conv (after pooling)
    std::vector<Grid> outputs;  // output of each stage (after tanh where applied)
};

struct BranchTrace {
    Grid z;
    LatentGrid condition;
    std::vector<double> pooled;
    std::vector<double> temb;
    Grid stem_conv;
    std::vector<double> stem_scale;
    Grid b1, b2;
};

// Trainable copy of the denoiser's first two stages, fed the latent plus a
// learned encoding of the naked face, emitting residuals for the middle and
// upsampling stages through zero-initialised 1x1 convolutions.
class ControlBranch {
public:
    // Copies stem and middle weights from `base`; other blocks are seeded.
    ControlBranch(const ToyPredictor& base, std::uint64_t seed, bool zero_init = true,
                  int factor = 8);
    ControlBranch(ControlBranchConfig config, ParamStore params);

    // Naked image (H x W x 3 in [0, 1]) -> condition latent (H/f x W/f x latent channels).
    LatentGrid encode_condition(const ImageGrid& naked, ConditionTrace* trace = nullptr) const;

    ControlResiduals forward(const LatentGrid& z_t, const PromptEmbedding& prompt, int t,
                             const LatentGrid& condition, BranchTrace* trace = nullptr) const;

    // Accumulates d(loss)/d(params) into `grads`; d(loss)/d(condition) goes to d_condition.
    void backward(const BranchTrace& trace, const ControlResiduals& d_residuals,
                  std::vector<double>& grads, LatentGrid* d_condition) const;
    void backward_condition(const ConditionTrace& trace, const LatentGrid& d_condition,
                            std::vector<double>& grads) const;

    const ControlBranchConfig& config() const { return config_; }
    const ParamStore& params() const { return params_; }
    ParamStore& mutable_params() { return params_; }

    static ParamStore make_layout(const ControlBranchConfig& config);

private:
    void index_blocks();
    int stages() const;

    ControlBranchConfig config_;
    ParamStore params_;
    std::vector<std::size_t> cond_w_, cond_b_;
    std::size_t hint_w_ = 0, hint_b_ = 0, mid_w_ = 0, mid_b_ = 0;
    std::size_t zero_mid_w_ = 0, zero_mid_b_ = 0, zero_up_w_ = 0, zero_up_b_ = 0;
};

// base(z_t, prompt, t) with the branch residuals injected.
LatentGrid controlled_eps(const ControlBranch& branch, const NoisePredictor& base, const LatentGrid& z_t,
                          const PromptEmbedding& prompt, int t, const LatentGrid& condition);

// controlled_eps - base prediction.
LatentGrid branch_contribution(const ControlBranch& branch, const NoisePredictor& base,
                               const LatentGrid& z_t, const PromptEmbedding& prompt, int t,
                               const LatentGrid& condition);

struct MaForTrainConfig {
    double learning_rate = 1e-4;
    int grad_accum_steps = 4;
    int total_steps = 15000;
    int batch_size = 1;
    std::uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::adam;
};

// Settings sized for the toy backend (300 steps).
MaForTrainConfig toy_mafor_config(std::uint64_t seed = 0);

struct MaForResult {
    ControlBranch branch;
    std::vector<double> losses;  // one entry per optimizer step
};

using StepCallback = std::function<void(int step, double loss)>;

// Trains a fresh branch on the pairs against the frozen base with the empty prompt.
MaForResult train_mafor(std::span<const PseudoPair> pairs, const ToyBackend& base,
                        const MaForTrainConfig& config, const StepCallback& on_step = {});
// Continues training an existing branch.
MaForResult train_mafor(std::span<const PseudoPair> pairs, const ToyBackend& base,
                        const MaForTrainConfig& config, ControlBranch branch,
                        const StepCallback& on_step = {});

// One sampled training term: squared error of the controlled prediction.
struct MaForSample {
    std::size_t pair = 0;
    int t = 0;
    LatentGrid noise;
};

// Mean loss of `samples`; when grads is non-null the averaged gradient w.r.t.
// branch parameters is added to it. zero_condition replaces c by zeros.
double mafor_loss(const ControlBranch& branch, const ToyBackend& base, std::span<const PseudoPair> pairs,
                  std::span<const MaForSample> samples, std::vector<double>* grads = nullptr,
                  bool zero_condition = false);

std::vector<MaForSample> draw_mafor_samples(std::size_t pair_count, const ToyBackend& base, int latent_h,
                                            int latent_w, int count, std::uint64_t seed);

void save_branch(const ControlBranch& branch, const std::filesystem::path& path);
ControlBranch load_branch(const std::filesystem::path& path);
void put_branch(Container& c, const ControlBranch& branch);
ControlBranch get_branch(const Container& c);

void write_loss_log(const std::filesystem::path& path, std::span<const double> losses);

}  // namespace facepaint

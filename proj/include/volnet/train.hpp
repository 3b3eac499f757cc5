#ifndef VOLNET_TRAIN_HPP
#define VOLNET_TRAIN_HPP

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "volnet/model.hpp"
#include "volnet/tensor.hpp"

namespace volnet {

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};
struct CkptBadMagicError : CheckpointError {
    explicit CkptBadMagicError(const std::string& msg) : CheckpointError(msg) {}
};
struct CkptVersionError : CheckpointError {
    explicit CkptVersionError(const std::string& msg) : CheckpointError(msg) {}
};
struct CkptTruncatedError : CheckpointError {
    explicit CkptTruncatedError(const std::string& msg) : CheckpointError(msg) {}
};
struct CkptShapeConflictError : CheckpointError {
    explicit CkptShapeConflictError(const std::string& msg) : CheckpointError(msg) {}
};
struct ArchitectureMismatchError : std::runtime_error {
    explicit ArchitectureMismatchError(const std::string& msg) : std::runtime_error(msg) {}
};
struct EmptySplitError : std::runtime_error {
    explicit EmptySplitError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NanLossError : std::runtime_error {
    NanLossError(size_t epoch, size_t batch)
        : std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch)),
          epoch(epoch),
          batch(batch) {}
    size_t epoch, batch;
};
struct EpochRangeError : std::runtime_error {
    explicit EpochRangeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainConfig {
    size_t batch_size = 6;
    double base_lr = 1e-4;
    double lr_floor = 5e-6;
    size_t warm_epochs = 30;   // epochs at base_lr before halving starts
    size_t halve_every = 10;
    size_t total_epochs = 70;
    double weight_decay = 0.0;  // off by default
    double grad_clip = 0.0;     // global L2 clip; 0 disables
    uint64_t seed = 0;
    std::string task = "synthetic";

    void validate() const;
};

// lr = max(base_lr * 2^-k, lr_floor), k = 0 for epoch <= warm_epochs else
// ceil((epoch - warm_epochs) / halve_every); epoch is 1-based
double lr_at_epoch(const TrainConfig& config, size_t epoch);

struct AdamState {
    std::vector<Tensor> m;  // parallel to the model's trainable parameters
    std::vector<Tensor> v;
    size_t t = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

// bias-corrected Adam; zeroes grads afterward
void adam_step(ModelParams& model, AdamState& state, double lr);

struct Checkpoint {
    uint32_t version = 1;
    ModelParams params;  // values plus BN running stats, grads not saved
    std::optional<AdamState> optimizer;
    size_t epoch = 0;
    uint64_t seed = 0;
    std::string task;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// copies checkpoint tensors into an already-built model; throws
// CkptShapeConflictError naming the first offending tensor
void load_into(const Checkpoint& ckpt, ModelParams& target);

// transfer protocol: initialize the target task's network from the source
// checkpoint (all parameters and BN stats, no optimizer state)
ModelParams transfer_init(const Checkpoint& source, const ModelConfig& target_config);

struct TrainSample {
    Tensor volume;  // [D,H,W], already normalized
    size_t label = 0;
};

struct Dataset {
    std::vector<TrainSample> train;
    std::vector<TrainSample> val;
};

struct EpochRecord {
    size_t epoch = 0;
    double lr = 0;
    double train_loss = 0;
    double val_acc = 0;
    double val_auc = 0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    Checkpoint best;  // highest validation accuracy
    double best_val_acc = -1;
    size_t best_epoch = 0;
};

struct FitCallbacks {
    std::function<void(const EpochRecord&)> on_epoch;
};

TrainHistory fit(ModelParams& model, const Dataset& dataset, const TrainConfig& config,
                 const FitCallbacks& callbacks = {});

// positive-class probabilities for a set of samples, inference mode
std::pair<std::vector<double>, std::vector<int>> score_samples(
    ModelParams& model, const std::vector<TrainSample>& samples, size_t batch_size);

std::string history_csv(const TrainHistory& history);

}  // namespace volnet

#endif

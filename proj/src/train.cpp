#include "volnet/train.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "volnet/metrics.hpp"
#include "volnet/rng.hpp"

namespace volnet {

void TrainConfig::validate() const {
    if (batch_size < 1) throw InvalidConfigError("batch_size must be >= 1");
    if (total_epochs < 1) throw InvalidConfigError("total_epochs must be >= 1");
    if (lr_floor <= 0 || lr_floor > base_lr) {
        throw InvalidConfigError("need 0 < lr_floor <= base_lr");
    }
    if (halve_every < 1) throw InvalidConfigError("halve_every must be >= 1");
}

double lr_at_epoch(const TrainConfig& config, size_t epoch) {
    if (epoch < 1 || epoch > config.total_epochs) {
        throw EpochRangeError("epoch " + std::to_string(epoch) + " outside [1," +
                              std::to_string(config.total_epochs) + "]");
    }
    size_t k = 0;
    if (epoch > config.warm_epochs) {
        k = (epoch - config.warm_epochs + config.halve_every - 1) / config.halve_every;
    }
    return std::max(config.base_lr * std::pow(2.0, -static_cast<double>(k)), config.lr_floor);
}

void adam_step(ModelParams& model, AdamState& state, double lr) {
    std::vector<ParamTensor*> trainable;
    for (auto& p : model.params) {
        if (p.trainable) trainable.push_back(&p);
    }
    if (state.m.empty()) {
        for (auto* p : trainable) {
            state.m.emplace_back(p->value.shape());
            state.v.emplace_back(p->value.shape());
        }
    }
    if (state.m.size() != trainable.size()) {
        throw InvalidConfigError("Adam state tracks " + std::to_string(state.m.size()) +
                                 " parameters but model has " + std::to_string(trainable.size()));
    }
    ++state.t;
    const double b1 = state.beta1, b2 = state.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    for (size_t i = 0; i < trainable.size(); ++i) {
        auto& p = *trainable[i];
        if (!p.grad.same_shape(state.m[i])) {
            throw CkptShapeConflictError("Adam state shape mismatch for " + p.name);
        }
        for (size_t j = 0; j < p.value.size(); ++j) {
            const double g = p.grad[j];
            const double m = b1 * state.m[i][j] + (1.0 - b1) * g;
            const double v = b2 * state.v[i][j] + (1.0 - b2) * g * g;
            state.m[i][j] = static_cast<float>(m);
            state.v[i][j] = static_cast<float>(v);
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            p.value[j] = static_cast<float>(p.value[j] - lr * mhat / (std::sqrt(vhat) + state.eps));
        }
        p.zero_grad();
    }
}

// ---------------------------------------------------------------------------
// Checkpoint container: "VNCK", u32 version, config, metadata, then
// length-prefixed name/shape/float32-data records, all little-endian.
// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'V', 'N', 'C', 'K'};

struct Writer {
    std::vector<unsigned char> buf;
    template <class T>
    void put(T v) {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        buf.insert(buf.end(), b, b + sizeof(T));
    }
    void put_str(const std::string& s) {
        put<uint32_t>(static_cast<uint32_t>(s.size()));
        buf.insert(buf.end(), s.begin(), s.end());
    }
    void put_tensor(const Tensor& t) {
        put<uint32_t>(static_cast<uint32_t>(t.ndim()));
        for (size_t i = 0; i < t.ndim(); ++i) put<uint64_t>(t.dim(i));
        const auto* p = reinterpret_cast<const unsigned char*>(t.data());
        buf.insert(buf.end(), p, p + 4 * t.size());
    }
};

struct Reader {
    const std::vector<unsigned char>& buf;
    size_t pos = 0;
    std::string path;
    template <class T>
    T get() {
        if (pos + sizeof(T) > buf.size()) throw CkptTruncatedError(path + ": truncated checkpoint");
        T v;
        std::memcpy(&v, buf.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }
    std::string get_str() {
        const uint32_t len = get<uint32_t>();
        if (pos + len > buf.size()) throw CkptTruncatedError(path + ": truncated checkpoint");
        std::string s(reinterpret_cast<const char*>(buf.data() + pos), len);
        pos += len;
        return s;
    }
    Tensor get_tensor() {
        const uint32_t ndim = get<uint32_t>();
        std::vector<size_t> shape(ndim);
        size_t n = 1;
        for (uint32_t i = 0; i < ndim; ++i) {
            shape[i] = static_cast<size_t>(get<uint64_t>());
            n *= shape[i];
        }
        if (pos + 4 * n > buf.size()) throw CkptTruncatedError(path + ": truncated checkpoint");
        std::vector<float> data(n);
        std::memcpy(data.data(), buf.data() + pos, 4 * n);
        pos += 4 * n;
        return Tensor::from_data(std::move(shape), std::move(data));
    }
};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    Writer w;
    w.buf.insert(w.buf.end(), kCkptMagic, kCkptMagic + 4);
    w.put<uint32_t>(ckpt.version);

    const auto& cfg = ckpt.params.config;
    w.put<uint32_t>(static_cast<uint32_t>(cfg.stage_channels.size()));
    for (size_t c : cfg.stage_channels) w.put<uint32_t>(static_cast<uint32_t>(c));
    w.put<uint32_t>(static_cast<uint32_t>(cfg.blocks_per_stage));
    w.put<uint32_t>(static_cast<uint32_t>(cfg.num_classes));
    w.put<uint32_t>(static_cast<uint32_t>(cfg.reduction));

    w.put<uint64_t>(ckpt.epoch);
    w.put<uint64_t>(ckpt.seed);
    w.put_str(ckpt.task);

    w.put<uint32_t>(static_cast<uint32_t>(ckpt.params.params.size()));
    for (const auto& p : ckpt.params.params) {
        w.put_str(p.name);
        w.put<uint8_t>(p.trainable ? 1 : 0);
        w.put_tensor(p.value);
    }

    w.put<uint8_t>(ckpt.optimizer ? 1 : 0);
    if (ckpt.optimizer) {
        const auto& o = *ckpt.optimizer;
        w.put<uint64_t>(o.t);
        w.put<double>(o.beta1);
        w.put<double>(o.beta2);
        w.put<double>(o.eps);
        w.put<uint32_t>(static_cast<uint32_t>(o.m.size()));
        for (size_t i = 0; i < o.m.size(); ++i) {
            w.put_tensor(o.m[i]);
            w.put_tensor(o.v[i]);
        }
    }

    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(w.buf.data()),
            static_cast<std::streamsize>(w.buf.size()));
    if (!f) throw CheckpointError("failed writing " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
    Reader r{buf, 0, path};
    if (buf.size() < 4 || std::memcmp(buf.data(), kCkptMagic, 4) != 0) {
        throw CkptBadMagicError(path + ": bad checkpoint magic");
    }
    r.pos = 4;
    Checkpoint ckpt;
    ckpt.version = r.get<uint32_t>();
    if (ckpt.version != 1) {
        throw CkptVersionError(path + ": unsupported checkpoint version " +
                               std::to_string(ckpt.version));
    }

    ModelConfig cfg;
    cfg.stage_channels.resize(r.get<uint32_t>());
    for (auto& c : cfg.stage_channels) c = r.get<uint32_t>();
    cfg.blocks_per_stage = r.get<uint32_t>();
    cfg.num_classes = r.get<uint32_t>();
    cfg.reduction = r.get<uint32_t>();

    ckpt.epoch = static_cast<size_t>(r.get<uint64_t>());
    ckpt.seed = r.get<uint64_t>();
    ckpt.task = r.get_str();

    ckpt.params.config = cfg;
    const uint32_t ntensors = r.get<uint32_t>();
    for (uint32_t i = 0; i < ntensors; ++i) {
        const std::string name = r.get_str();
        const bool trainable = r.get<uint8_t>() != 0;
        ckpt.params.add(name, r.get_tensor(), trainable);
    }

    if (r.get<uint8_t>() != 0) {
        AdamState o;
        o.t = static_cast<size_t>(r.get<uint64_t>());
        o.beta1 = r.get<double>();
        o.beta2 = r.get<double>();
        o.eps = r.get<double>();
        const uint32_t n = r.get<uint32_t>();
        for (uint32_t i = 0; i < n; ++i) {
            o.m.push_back(r.get_tensor());
            o.v.push_back(r.get_tensor());
        }
        ckpt.optimizer = std::move(o);
    }
    return ckpt;
}

void load_into(const Checkpoint& ckpt, ModelParams& target) {
    for (auto& p : target.params) {
        if (!ckpt.params.has(p.name)) {
            throw CkptShapeConflictError("checkpoint is missing tensor " + p.name);
        }
        const auto& src = ckpt.params.at(p.name);
        if (!src.value.same_shape(p.value)) {
            throw CkptShapeConflictError("shape conflict for " + p.name + ": checkpoint has " +
                                         src.value.shape_str() + ", model expects " +
                                         p.value.shape_str());
        }
        p.value = src.value;
        p.zero_grad();
    }
}

ModelParams transfer_init(const Checkpoint& source, const ModelConfig& target_config) {
    if (!(source.params.config == target_config)) {
        throw ArchitectureMismatchError(
            "transfer_init requires architecturally identical configs");
    }
    ModelParams m = build_model(target_config, 0);
    load_into(source, m);
    return m;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

Tensor assemble_batch(const std::vector<TrainSample>& samples, const std::vector<size_t>& idx,
                      size_t begin, size_t end, std::vector<size_t>& labels) {
    const auto& shape = samples[idx[begin]].volume.shape();
    const size_t B = end - begin;
    Tensor batch({B, 1, shape[0], shape[1], shape[2]});
    labels.clear();
    const size_t V = shape[0] * shape[1] * shape[2];
    for (size_t b = 0; b < B; ++b) {
        const auto& s = samples[idx[begin + b]];
        std::memcpy(batch.data() + b * V, s.volume.data(), 4 * V);
        labels.push_back(s.label);
    }
    return batch;
}

}  // namespace

std::pair<std::vector<double>, std::vector<int>> score_samples(
    ModelParams& model, const std::vector<TrainSample>& samples, size_t batch_size) {
    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<size_t> idx(samples.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<size_t> batch_labels;
    for (size_t begin = 0; begin < samples.size(); begin += batch_size) {
        const size_t end = std::min(begin + batch_size, samples.size());
        Tensor batch = assemble_batch(samples, idx, begin, end, batch_labels);
        auto trace = model_forward(model, batch, false);
        const size_t K = trace.probs.dim(1);
        for (size_t b = 0; b < end - begin; ++b) {
            scores.push_back(trace.probs[b * K + 1]);  // positive-class probability
            labels.push_back(static_cast<int>(batch_labels[b]));
        }
    }
    return {std::move(scores), std::move(labels)};
}

TrainHistory fit(ModelParams& model, const Dataset& dataset, const TrainConfig& config,
                 const FitCallbacks& callbacks) {
    config.validate();
    if (dataset.train.empty()) throw EmptySplitError("training split is empty");
    if (dataset.val.empty()) throw EmptySplitError("validation split is empty");

    TrainHistory history;
    AdamState adam;
    std::vector<size_t> idx(dataset.train.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    for (size_t epoch = 1; epoch <= config.total_epochs; ++epoch) {
        const double lr = lr_at_epoch(config, epoch);

        CounterRng rng(CounterRng::mix(config.seed, epoch));
        for (size_t i = idx.size(); i > 1; --i) {
            std::swap(idx[i - 1], idx[rng.next_u64() % i]);
        }

        double loss_sum = 0;
        size_t seen = 0, batch_index = 0;
        std::vector<size_t> labels;
        for (size_t begin = 0; begin < idx.size(); begin += config.batch_size, ++batch_index) {
            const size_t end = std::min(begin + config.batch_size, idx.size());
            Tensor batch = assemble_batch(dataset.train, idx, begin, end, labels);
            auto trace = model_forward(model, batch, true);
            auto ce = softmax_cross_entropy(trace.logits, labels);
            if (!std::isfinite(ce.loss)) throw NanLossError(epoch, batch_index);
            loss_sum += static_cast<double>(ce.loss) * static_cast<double>(end - begin);
            seen += end - begin;
            model_backward(model, trace, ce.grad_logits);

            if (config.weight_decay > 0) {
                for (auto& p : model.params) {
                    if (!p.trainable) continue;
                    for (size_t j = 0; j < p.grad.size(); ++j) {
                        p.grad[j] += static_cast<float>(config.weight_decay) * p.value[j];
                    }
                }
            }
            if (config.grad_clip > 0) {
                double norm2 = 0;
                for (auto& p : model.params) {
                    if (!p.trainable) continue;
                    for (size_t j = 0; j < p.grad.size(); ++j) {
                        norm2 += static_cast<double>(p.grad[j]) * p.grad[j];
                    }
                }
                const double norm = std::sqrt(norm2);
                if (norm > config.grad_clip) {
                    const float scale = static_cast<float>(config.grad_clip / norm);
                    for (auto& p : model.params) {
                        if (!p.trainable) continue;
                        for (size_t j = 0; j < p.grad.size(); ++j) p.grad[j] *= scale;
                    }
                }
            }
            adam_step(model, adam, lr);
        }

        auto [scores, val_labels] = score_samples(model, dataset.val, config.batch_size);
        const Confusion c = confusion(scores, val_labels);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr;
        rec.train_loss = loss_sum / static_cast<double>(seen);
        rec.val_acc = summarize(c).acc;
        try {
            rec.val_auc = auc(scores, val_labels);
        } catch (const SingleClassError&) {
            rec.val_auc = std::numeric_limits<double>::quiet_NaN();
        }
        history.epochs.push_back(rec);
        if (callbacks.on_epoch) callbacks.on_epoch(rec);

        if (rec.val_acc > history.best_val_acc) {
            history.best_val_acc = rec.val_acc;
            history.best_epoch = epoch;
            history.best.params = model;
            history.best.epoch = epoch;
            history.best.seed = config.seed;
            history.best.task = config.task;
        }
    }
    return history;
}

std::string history_csv(const TrainHistory& history) {
    std::ostringstream os;
    os << "epoch,lr,train_loss,val_acc,val_auc\n";
    os << std::setprecision(10);
    for (const auto& e : history.epochs) {
        os << e.epoch << "," << e.lr << "," << e.train_loss << "," << e.val_acc << ",";
        if (std::isfinite(e.val_auc)) os << e.val_auc;
        os << "\n";
    }
    return os.str();
}

}  // namespace volnet

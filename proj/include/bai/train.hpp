#pragma once

// Adam + learning-rate schedules, joint CE/BAI training, validation,
// checkpoints and metric streams.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "bai/config.hpp"
#include "bai/decode.hpp"
#include "bai/objective.hpp"

namespace bai {

// ---------------------------------------------------------------------------
// Learning rate

inline double noam_lr(std::size_t step, std::size_t hidden, std::size_t warmup) {
    if (step < 1) throw ContractError("noam_lr: step must be >= 1");
    const double s = static_cast<double>(step), w = static_cast<double>(warmup);
    return std::pow(static_cast<double>(hidden), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

// `step` counts optimizer updates from 1, `epoch` counts completed epochs.
inline double learning_rate(const LrConfig& lr, std::size_t step, std::size_t epoch, std::size_t hidden) {
    double v = 0.0;
    switch (lr.kind) {
        case LrKind::noam: v = noam_lr(step, hidden, lr.warmup); break;
        case LrKind::fixed: v = lr.value; break;
        case LrKind::step_decay:
            v = lr.value * std::pow(lr.factor, static_cast<double>(epoch / lr.every));
            if (lr.warmup > 0) v *= std::min(1.0, static_cast<double>(step) / static_cast<double>(lr.warmup));
            break;
    }
    return v * lr.scale;
}

// ---------------------------------------------------------------------------
// Adam

template <class T>
struct AdamMoments {
    std::map<std::string, std::vector<T>> m, v;
    std::uint64_t step = 0;
};

// Throws NumericError naming the first parameter with a non-finite gradient.
template <class T>
void check_gradients(const ParamStore<T>& ps) {
    for (const auto& [path, p] : ps) {
        if (!p.has_grad()) continue;
        for (auto g : p.grad())
            if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in parameter '" + path + "'");
    }
}

// Bias-corrected Adam. Parameters that received no gradient are treated as
// having a zero gradient.
template <class T>
void adam_step(ParamStore<T>& ps, AdamMoments<T>& st, double lr, const AdamConfig& cfg) {
    check_gradients(ps);
    ++st.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    for (auto& [path, p] : ps) {
        auto& m = st.m[path];
        auto& v = st.v[path];
        if (m.empty()) {
            m.assign(p.numel(), T(0));
            v.assign(p.numel(), T(0));
        }
        const bool has = p.has_grad();
        auto g = has ? p.grad() : std::span<const T>{};
        auto w = p.data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = has ? static_cast<double>(g[i]) : 0.0;
            const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double upd = lr * (static_cast<double>(m[i]) / c1) / (std::sqrt(static_cast<double>(v[i]) / c2) + cfg.eps);
            w[i] = static_cast<T>(static_cast<double>(w[i]) - upd);
        }
    }
}

// Rescales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
template <class T>
double clip_grad_norm(ParamStore<T>& ps, double max_norm) {
    double sq = 0.0;
    for (const auto& [_, p] : ps)
        if (p.has_grad())
            for (auto g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T f = static_cast<T>(max_norm / norm);
        for (auto& [_, p] : ps)
            if (p.has_grad())
                for (auto& g : p.grad_mut()) g *= f;
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricRecord {
    std::string phase;  // "train" per iteration, "valid" per epoch
    std::size_t epoch = 0;
    std::uint64_t iteration = 0;
    double ce = 0, beta = 0, lambda = 0, total = 0;
    double valid_token_accuracy = std::numeric_limits<double>::quiet_NaN();
    double valid_bleu = std::numeric_limits<double>::quiet_NaN();
    double wall_ms = 0;  // written to timing.csv only, so metric files stay deterministic
};

inline const char* metrics_csv_header() { return "phase,epoch,iteration,ce,beta,lambda,total,valid_token_accuracy,valid_bleu"; }

namespace detail {
inline std::string json_number(double x) { return std::isfinite(x) ? format_double(x) : "null"; }
inline std::string csv_number(double x) { return std::isfinite(x) ? format_double(x) : ""; }
}  // namespace detail

inline std::string to_json(const MetricRecord& r) {
    using detail::json_number;
    return "{\"phase\":\"" + r.phase + "\",\"epoch\":" + std::to_string(r.epoch) + ",\"iteration\":" + std::to_string(r.iteration) +
           ",\"ce\":" + json_number(r.ce) + ",\"beta\":" + json_number(r.beta) + ",\"lambda\":" + json_number(r.lambda) +
           ",\"total\":" + json_number(r.total) + ",\"valid_token_accuracy\":" + json_number(r.valid_token_accuracy) +
           ",\"valid_bleu\":" + json_number(r.valid_bleu) + "}";
}

inline std::string to_csv(const MetricRecord& r) {
    using detail::csv_number;
    return r.phase + "," + std::to_string(r.epoch) + "," + std::to_string(r.iteration) + "," + csv_number(r.ce) + "," +
           csv_number(r.beta) + "," + csv_number(r.lambda) + "," + csv_number(r.total) + "," + csv_number(r.valid_token_accuracy) +
           "," + csv_number(r.valid_bleu);
}

// Append-only metrics.jsonl / metrics.csv / timing.csv in one directory.
class MetricWriter {
public:
    MetricWriter() = default;
    MetricWriter(const std::filesystem::path& dir, bool append) {
        const auto mode = append ? std::ios::app : std::ios::trunc;
        const bool fresh_csv = !append || !std::filesystem::exists(dir / "metrics.csv");
        const bool fresh_timing = !append || !std::filesystem::exists(dir / "timing.csv");
        jsonl_.open(dir / "metrics.jsonl", std::ios::out | mode);
        csv_.open(dir / "metrics.csv", std::ios::out | mode);
        timing_.open(dir / "timing.csv", std::ios::out | mode);
        if (!jsonl_ || !csv_ || !timing_) throw InputError("cannot write metric files in '" + dir.string() + "'");
        if (fresh_csv) csv_ << metrics_csv_header() << "\n";
        if (fresh_timing) timing_ << "phase,epoch,iteration,wall_ms\n";
    }
    void write(const MetricRecord& r) {
        if (!jsonl_.is_open()) return;
        jsonl_ << to_json(r) << "\n";
        csv_ << to_csv(r) << "\n";
        timing_ << r.phase << "," << r.epoch << "," << r.iteration << "," << detail::format_double(r.wall_ms) << "\n";
        if (r.phase != "train") flush();
    }
    void flush() {
        jsonl_.flush();
        csv_.flush();
        timing_.flush();
    }

private:
    std::ofstream jsonl_, csv_, timing_;
};

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (all integers little-endian):
//   "BAICKPT\0"  u32 version
//   str config   u64 iteration  u64 epochs_done  str rng_state
//   u32 count, then per array: str name, u32 rank, u32 dims[rank],
//                              f32 value[n], f32 adam_m[n], f32 adam_v[n]
//   u64 adam_step
//   u64 FNV-1a digest of every preceding byte
// str = u32 byte length + bytes.

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'B', 'A', 'I', 'C', 'K', 'P', 'T', '\0'};

struct CheckpointArray {
    std::string name;
    Shape shape;
    std::vector<float> value, adam_m, adam_v;
};

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::string config_text;
    std::uint64_t iteration = 0;
    std::uint64_t epochs_done = 0;
    std::string rng_state;
    std::vector<CheckpointArray> arrays;
    std::uint64_t adam_step = 0;
};

namespace detail {

class ByteWriter {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float f) {
        std::uint32_t v;
        std::memcpy(&v, &f, 4);
        u32(v);
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes.insert(bytes.end(), s.begin(), s.end());
    }
    std::vector<std::uint8_t> bytes;
};

class ByteReader {
public:
    ByteReader(const std::vector<std::uint8_t>& b, std::size_t end, std::string path) : b_(b), end_(end), path_(std::move(path)) {}
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
        return v;
    }
    float f32() {
        const std::uint32_t v = u32();
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }
    std::string str() {
        const auto n = u32();
        need(n);
        std::string s(b_.begin() + static_cast<std::ptrdiff_t>(pos_), b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }
    void need(std::size_t n) const {
        if (n > end_ - pos_) throw LoadError(path_ + ": checkpoint truncated at byte " + std::to_string(pos_));
    }
    std::size_t pos() const { return pos_; }

private:
    const std::vector<std::uint8_t>& b_;
    std::size_t end_;
    std::size_t pos_ = 0;
    std::string path_;
};

inline void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw InputError("cannot write '" + tmp.string() + "'");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw InputError("short write to '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
    detail::ByteWriter w;
    w.bytes.insert(w.bytes.end(), kCheckpointMagic, kCheckpointMagic + 8);
    w.u32(c.version);
    w.str(c.config_text);
    w.u64(c.iteration);
    w.u64(c.epochs_done);
    w.str(c.rng_state);
    w.u32(static_cast<std::uint32_t>(c.arrays.size()));
    for (const auto& a : c.arrays) {
        const std::size_t n = numel_of(a.shape);
        if (a.value.size() != n || a.adam_m.size() != n || a.adam_v.size() != n)
            throw ContractError("checkpoint array '" + a.name + "' does not match its shape " + shape_str(a.shape));
        w.str(a.name);
        w.u32(static_cast<std::uint32_t>(a.shape.size()));
        for (auto d : a.shape) w.u32(static_cast<std::uint32_t>(d));
        for (auto* vec : {&a.value, &a.adam_m, &a.adam_v})
            for (float f : *vec) w.f32(f);
    }
    w.u64(c.adam_step);
    w.u64(fnv1a64(w.bytes.data(), w.bytes.size()));
    return std::move(w.bytes);
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    detail::write_file_atomic(path, serialize_checkpoint(c));
}

inline Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<checkpoint>") {
    if (bytes.size() < 8 + 4 + 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw LoadError(origin + ": not a checkpoint file (bad magic or too short)");
    const std::size_t body = bytes.size() - 8;
    std::uint64_t stored = 0;
    for (std::size_t i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(bytes[body + i]) << (8 * i);
    detail::ByteReader r(bytes, body, origin);
    r.u64();  // magic
    Checkpoint c;
    c.version = r.u32();
    if (c.version != kCheckpointVersion)
        throw LoadError(origin + ": checkpoint version " + std::to_string(c.version) + ", expected " + std::to_string(kCheckpointVersion));
    if (fnv1a64(bytes.data(), body) != stored) throw LoadError(origin + ": integrity digest mismatch (file corrupt or truncated)");
    c.config_text = r.str();
    c.iteration = r.u64();
    c.epochs_done = r.u64();
    c.rng_state = r.str();
    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointArray a;
        a.name = r.str();
        const auto rank = r.u32();
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            a.shape.push_back(r.u32());
            n *= a.shape.back();
        }
        r.need(n * 12);
        for (auto* vec : {&a.value, &a.adam_m, &a.adam_v}) {
            vec->resize(n);
            for (auto& f : *vec) f = r.f32();
        }
        c.arrays.push_back(std::move(a));
    }
    c.adam_step = r.u64();
    if (r.pos() != body) throw LoadError(origin + ": " + std::to_string(body - r.pos()) + " unexpected trailing bytes");
    return c;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open checkpoint '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_checkpoint(bytes, path.string());
}

template <class T>
Checkpoint make_checkpoint(const TrainConfig& cfg, const Model<T>& model, const AdamMoments<T>& adam, std::uint64_t iteration,
                           std::uint64_t epochs_done, const Rng& rng) {
    Checkpoint c;
    c.config_text = config_to_text(cfg);
    c.iteration = iteration;
    c.epochs_done = epochs_done;
    std::ostringstream rs;
    rs << rng;
    c.rng_state = rs.str();
    c.adam_step = adam.step;
    for (const auto& [path, p] : model.params()) {
        CheckpointArray a;
        a.name = path;
        a.shape = p.shape();
        a.value.assign(p.values().begin(), p.values().end());
        auto m = adam.m.find(path);
        auto v = adam.v.find(path);
        if (m != adam.m.end() && !m->second.empty()) {
            a.adam_m.assign(m->second.begin(), m->second.end());
            a.adam_v.assign(v->second.begin(), v->second.end());
        } else {
            a.adam_m.assign(p.numel(), 0.0f);
            a.adam_v.assign(p.numel(), 0.0f);
        }
        c.arrays.push_back(std::move(a));
    }
    return c;
}

// Copies checkpoint arrays into a model built from the same config.
template <class T>
void restore_parameters(const Checkpoint& c, Model<T>& model, AdamMoments<T>* adam = nullptr) {
    if (c.arrays.size() != model.params().size())
        throw LoadError("checkpoint holds " + std::to_string(c.arrays.size()) + " arrays, model has " +
                        std::to_string(model.params().size()) + " parameters");
    for (const auto& a : c.arrays) {
        if (!model.params().contains(a.name)) throw LoadError("checkpoint array '" + a.name + "' is not a model parameter");
        auto& p = model.params().at(a.name);
        if (p.shape() != a.shape)
            throw LoadError("checkpoint array '" + a.name + "' has shape " + shape_str(a.shape) + ", model expects " + shape_str(p.shape()));
        auto dst = p.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(a.value[i]);
        if (adam) {
            adam->m[a.name].assign(a.adam_m.begin(), a.adam_m.end());
            adam->v[a.name].assign(a.adam_v.begin(), a.adam_v.end());
        }
    }
    if (adam) adam->step = c.adam_step;
}

// ---------------------------------------------------------------------------
// Validation

struct EvalReport {
    double ce = 0, beta = 0, token_accuracy = 0;
    double bleu = std::numeric_limits<double>::quiet_NaN();
    std::size_t sequences = 0, tokens = 0, decoded = 0;
};

// Teacher-forced CE, beta and token accuracy over `samples` (dropout off),
// plus corpus BLEU of greedy (beam_width 1) or beam decodes of the first
// `bleu_samples` samples.
template <class T>
EvalReport evaluate(const Model<T>& model, const std::vector<Sample>& samples, std::size_t batch_size, std::size_t bleu_samples,
                    std::size_t max_steps, std::size_t beam_width = 1,
                    std::vector<std::vector<TokenId>>* decodes = nullptr) {
    if (samples.empty()) throw ContractError("evaluate: no samples");
    NoGradScope<T> no_grad;
    EvalReport rep;
    double ce_sum = 0, beta_sum = 0;
    std::size_t hits = 0, live_sequences = 0;
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) idx.push_back(i);
        const auto batch = make_batch(samples, idx);
        const auto out = model.forward(batch);
        const auto loss = joint_loss(model.config().arch, out, T(0));
        std::size_t valid = 0;
        for (auto m : out.target_mask) valid += m;
        ce_sum += static_cast<double>(loss.ce.item()) * static_cast<double>(valid);
        std::size_t live = 0;
        for (auto len : batch.tgt_lengths) live += len > 0;
        beta_sum += static_cast<double>(loss.beta.item()) * static_cast<double>(live);
        hits += token_hits(out.logits, out.targets, out.target_mask).first;
        rep.tokens += valid;
        live_sequences += live;
        rep.sequences += batch.size;
    }
    rep.ce = ce_sum / static_cast<double>(rep.tokens);
    rep.beta = beta_sum / static_cast<double>(live_sequences);
    rep.token_accuracy = static_cast<double>(hits) / static_cast<double>(rep.tokens);
    const std::size_t n = std::min(bleu_samples, samples.size());
    if (n > 0) {
        std::vector<std::vector<TokenId>> cands, refs;
        for (std::size_t i = 0; i < n; ++i) {
            if (beam_width <= 1) {
                cands.push_back(greedy_decode(model, samples[i].src, max_steps));
            } else {
                BeamConfig bc;
                bc.width = beam_width;
                bc.max_steps = max_steps;
                cands.push_back(beam_search(model, samples[i].src, bc).tokens);
            }
            refs.push_back(samples[i].tgt);
        }
        rep.bleu = bleu(cands, refs);
        rep.decoded = n;
        if (decodes) *decodes = std::move(cands);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Training

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t batch_seed(std::uint64_t seed, std::size_t epoch) { return splitmix64(seed ^ splitmix64(epoch + 1)); }
inline std::uint64_t dropout_seed(std::uint64_t seed) { return splitmix64(seed ^ 0xd1b54a32d192ed03ull); }

// Fills model.vocab from the dataset when 0 and checks that every sample
// fits the model.
inline TrainConfig resolve_config(TrainConfig cfg, const Dataset& ds) {
    if (cfg.model.vocab == 0) cfg.model.vocab = std::max<std::size_t>(ds.vocab.size(), kFirstToken + 1);
    if (cfg.model.vocab < ds.vocab.size())
        throw ConfigError("model.vocab=" + std::to_string(cfg.model.vocab) + " is smaller than the task vocabulary (" +
                          std::to_string(ds.vocab.size()) + " tokens)");
    cfg.validate();
    std::size_t src = 0, tgt = 0;
    for (const auto* split : {&ds.train, &ds.valid})
        for (const auto& s : *split) {
            src = std::max(src, s.src.size());
            tgt = std::max(tgt, s.tgt.size() + 1);
        }
    const bool fits = cfg.model.arch == Arch::decoder_only ? src + tgt <= cfg.model.max_len
                                                           : src <= cfg.model.max_len && tgt <= cfg.model.max_len;
    if (!fits)
        throw ConfigError("model.max_len=" + std::to_string(cfg.model.max_len) + " is too short for the task (longest source " +
                          std::to_string(src) + ", longest target with eos " + std::to_string(tgt) + ")");
    return cfg;
}

struct TrainHooks {
    std::function<void(const MetricRecord&)> on_record;  // every record, including per-iteration ones
};

template <class T>
struct TrainOutcome {
    Model<T> model;
    TrainConfig config;  // resolved
    std::vector<MetricRecord> valid_records;
    EvalReport final_eval;
    std::filesystem::path last_checkpoint;
};

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::size_t epoch) {
    return dir / ("checkpoint_epoch" + std::to_string(epoch) + ".bin");
}

// Runs cfg.epochs epochs (continuing from `resume` when given). With an
// empty out_dir nothing is written to disk.
template <class T>
TrainOutcome<T> train(const TrainConfig& config, const Dataset& ds, const std::filesystem::path& out_dir,
                      const Checkpoint* resume = nullptr, const TrainHooks& hooks = {}) {
    using clock = std::chrono::steady_clock;
    const TrainConfig cfg = resolve_config(config, ds);
    if (ds.train.empty() || ds.valid.empty()) throw ConfigError("task produced an empty train or valid split");
    const bool write = !out_dir.empty();
    if (write) std::filesystem::create_directories(out_dir);

    TrainOutcome<T> res{Model<T>(cfg.model, cfg.seed), cfg, {}, {}, {}};
    auto& model = res.model;
    AdamMoments<T> adam;
    Rng drop_rng(dropout_seed(cfg.seed));
    std::uint64_t iteration = 0;
    std::size_t first_epoch = 0;
    if (resume) {
        const auto saved = resolve_config(parse_config_text(resume->config_text, "checkpoint config"), ds);
        auto a = config_entries(saved), b = config_entries(cfg);
        for (std::size_t i = 0; i < a.size(); ++i)
            if (a[i].first != "train.epochs" && a[i] != b[i])
                throw ConfigError("resume: checkpoint was written with " + a[i].first + "=" + a[i].second + ", run has " + b[i].second);
        restore_parameters(*resume, model, &adam);
        std::istringstream rs(resume->rng_state);
        rs >> drop_rng;
        if (!rs) throw LoadError("resume: unreadable RNG state");
        iteration = resume->iteration;
        first_epoch = static_cast<std::size_t>(resume->epochs_done);
    }

    LambdaSchedule sched = resolved_schedule(cfg);
    sched.iters_per_epoch = static_cast<double>(plan_batches(ds.train, cfg.batching, batch_seed(cfg.seed, 0)).size());
    sched.validate();

    MetricWriter writer;
    if (write) writer = MetricWriter(out_dir, resume != nullptr);
    auto emit = [&](const MetricRecord& r) {
        writer.write(r);
        if (hooks.on_record) hooks.on_record(r);
    };
    auto checkpoint = [&](std::size_t epochs_done) {
        if (!write) return;
        const auto path = checkpoint_path(out_dir, epochs_done);
        const auto bytes = serialize_checkpoint(make_checkpoint(cfg, model, adam, iteration, epochs_done, drop_rng));
        detail::write_file_atomic(path, bytes);
        detail::write_file_atomic(out_dir / "checkpoint_last.bin", bytes);
        res.last_checkpoint = path;
    };
    if (!resume) checkpoint(0);

    const ForwardContext ctx{&drop_rng, cfg.model.dropout};
    for (std::size_t epoch = first_epoch; epoch < cfg.epochs; ++epoch) {
        const auto plan = plan_batches(ds.train, cfg.batching, batch_seed(cfg.seed, epoch));
        for (const auto& idx : plan) {
            const auto t0 = clock::now();
            const auto batch = make_batch(ds.train, idx);
            const double lambda = cfg.bai_enabled ? lambda_weight(sched, static_cast<double>(iteration)) : 0.0;
            auto diverged = [&](const std::string& what) {
                return NumericError(what + " at iteration " + std::to_string(iteration + 1) +
                                    (res.last_checkpoint.empty() ? std::string() : "; last good checkpoint: " + res.last_checkpoint.string()));
            };
            Graph<T> graph;
            MetricRecord rec;
            try {
                GraphScope<T> scope(graph);
                const auto out = model.forward(batch, ctx);
                const auto loss = joint_loss(cfg.model.arch, out, static_cast<T>(lambda), cfg.detach_d);
                const Tensor<T>& objective = cfg.bai_enabled ? loss.total : loss.ce;
                rec.ce = static_cast<double>(loss.ce.item());
                rec.beta = static_cast<double>(loss.beta.item());
                rec.total = static_cast<double>(objective.item());
                if (!std::isfinite(rec.total)) throw NumericError("non-finite loss");
                model.params().zero_grad();
                graph.backward(objective);
                if (cfg.clip > 0.0) clip_grad_norm(model.params(), cfg.clip);
                adam_step(model.params(), adam, learning_rate(cfg.lr, iteration + 1, epoch, cfg.model.hidden), cfg.adam);
            } catch (const NumericError& e) {
                throw diverged(e.what());
            }
            ++iteration;
            rec.phase = "train";
            rec.epoch = epoch;
            rec.iteration = iteration;
            rec.lambda = lambda;
            rec.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
            emit(rec);
        }
        model.params().zero_grad();

        const auto t0 = clock::now();
        const auto ev = evaluate(model, ds.valid, cfg.eval_batch_size, cfg.bleu_samples, cfg.decode_max_steps);
        MetricRecord rec;
        rec.phase = "valid";
        rec.epoch = epoch + 1;
        rec.iteration = iteration;
        rec.ce = ev.ce;
        rec.beta = ev.beta;
        rec.lambda = cfg.bai_enabled ? lambda_weight(sched, static_cast<double>(iteration)) : 0.0;
        rec.total = rec.lambda * rec.beta + rec.ce;
        rec.valid_token_accuracy = ev.token_accuracy;
        rec.valid_bleu = ev.bleu;
        rec.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
        emit(rec);
        res.valid_records.push_back(rec);
        res.final_eval = ev;
        checkpoint(epoch + 1);
    }
    return res;
}

}  // namespace bai

#pragma once

// Training-run description and its flat key=value text form.
//
//   # comment
//   model.arch = expansion
//   model.groups = 4,8
//   bai.schedule = eq5
//
// Every key has a type, a default and a one-line description; the key table
// is the single source for parsing, serialization and documentation.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "bai/data.hpp"
#include "bai/errors.hpp"
#include "bai/models.hpp"
#include "bai/schedule.hpp"

namespace bai {

enum class LrKind { noam, fixed, step_decay };

inline const char* to_string(LrKind k) {
    switch (k) {
        case LrKind::noam: return "noam";
        case LrKind::fixed: return "fixed";
        case LrKind::step_decay: return "step_decay";
    }
    return "?";
}

inline LrKind parse_lr_kind(const std::string& s) {
    if (s == "noam") return LrKind::noam;
    if (s == "fixed") return LrKind::fixed;
    if (s == "step_decay") return LrKind::step_decay;
    throw ConfigError("unknown lr kind '" + s + "' (noam, fixed, step_decay)");
}

struct LrConfig {
    LrKind kind = LrKind::noam;
    double value = 2e-4;        // fixed / step_decay base rate
    std::size_t warmup = 4000;  // noam warmup; linear warmup for step_decay (0 = none)
    double factor = 0.8;        // step_decay multiplier
    std::size_t every = 2;      // step_decay period in epochs
    double scale = 1.0;         // multiplies every kind
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
};

struct TrainConfig {
    ModelConfig model;
    TaskSpec task;
    std::string schedule_name = "eq5";
    LambdaSchedule schedule;  // iters_per_epoch is filled in by train()
    bool bai_enabled = true;
    bool detach_d = false;
    std::size_t epochs = 10;
    BatchPolicy batching;
    LrConfig lr;
    AdamConfig adam;
    double clip = 1.0;  // global gradient-norm clip; 0 disables
    std::uint64_t seed = 1;
    std::string precision = "f32";
    std::size_t eval_batch_size = 100;
    std::size_t bleu_samples = 200;  // validation samples greedy-decoded for BLEU each epoch; 0 disables
    std::size_t decode_max_steps = 64;

    void validate() const {
        if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
        if ((batching.batch_size == 0) == (batching.token_batch_size == 0))
            throw ConfigError("exactly one of train.batch_size and train.token_batch_size must be non-zero");
        if (batching.bucket_width < 1) throw ConfigError("train.bucket_width must be >= 1");
        if (!(lr.scale > 0.0)) throw ConfigError("train.lr_scale must be > 0");
        if (lr.kind != LrKind::noam && !(lr.value > 0.0)) throw ConfigError("train.lr must be > 0");
        if (lr.kind == LrKind::noam && lr.warmup < 1) throw ConfigError("train.warmup must be >= 1 for the noam schedule");
        if (lr.kind == LrKind::step_decay && (lr.every < 1 || !(lr.factor > 0.0)))
            throw ConfigError("train.decay_every must be >= 1 and train.decay_factor > 0");
        if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw ConfigError("train.adam_beta1 must be in [0, 1)");
        if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw ConfigError("train.adam_beta2 must be in [0, 1)");
        if (!(adam.eps > 0.0)) throw ConfigError("train.adam_eps must be > 0");
        if (clip < 0.0) throw ConfigError("train.clip must be >= 0");
        if (precision != "f32" && precision != "f64") throw ConfigError("train.precision must be f32 or f64");
        if (eval_batch_size < 1) throw ConfigError("train.eval_batch_size must be >= 1");
        schedule_preset(schedule_name, schedule);
        if (task.min_len < 1 || task.min_len > task.max_len) throw ConfigError("task.min_len must be in [1, task.max_len]");
        if (model.vocab != 0) model.validate();
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

template <class N>
N parse_number(const std::string& key, const std::string& v) {
    N out{};
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end) throw ConfigError(key + ": expected a number, got '" + v + "'");
    return out;
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
    if (!v.empty() && v[0] == '-') throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return parse_number<std::size_t>(key, v);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "off" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected a boolean (true/false/on/off), got '" + v + "'");
}

// Shortest text that reads back to the same double.
inline std::string format_double(double x) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, p);
}

inline std::string join_counts(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline std::vector<std::size_t> parse_counts(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string part;
    while (std::getline(ss, part, ',')) out.push_back(parse_count(key, trim(part)));
    if (out.empty()) throw ConfigError(key + ": expected a comma-separated list of integers");
    return out;
}

}  // namespace detail

struct ConfigKey {
    std::string key;
    std::string type;
    std::string doc;
    std::function<std::string(const TrainConfig&)> get;
    std::function<void(TrainConfig&, const std::string&)> set;
};

inline const std::vector<ConfigKey>& config_keys() {
    using namespace detail;
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> k;
        auto count = [&k](std::string key, std::string doc, auto member) {
            k.push_back({key, "int", std::move(doc), [member](const TrainConfig& c) { return std::to_string(member(const_cast<TrainConfig&>(c))); },
                         [member, key](TrainConfig& c, const std::string& v) { member(c) = parse_count(key, v); }});
        };
        auto real = [&k](std::string key, std::string doc, auto member) {
            k.push_back({key, "real", std::move(doc), [member](const TrainConfig& c) { return format_double(member(const_cast<TrainConfig&>(c))); },
                         [member, key](TrainConfig& c, const std::string& v) { member(c) = parse_number<double>(key, v); }});
        };
        auto flag = [&k](std::string key, std::string doc, auto member) {
            k.push_back({key, "bool", std::move(doc),
                         [member](const TrainConfig& c) { return std::string(member(const_cast<TrainConfig&>(c)) ? "true" : "false"); },
                         [member, key](TrainConfig& c, const std::string& v) { member(c) = parse_bool(key, v); }});
        };
        auto text = [&k](std::string key, std::string type, std::string doc, std::function<std::string(const TrainConfig&)> get,
                         std::function<void(TrainConfig&, const std::string&)> set) {
            k.push_back({std::move(key), std::move(type), std::move(doc), std::move(get), std::move(set)});
        };

        text("model.arch", "transformer|expansion|decoder_only", "model family",
             [](const TrainConfig& c) { return std::string(to_string(c.model.arch)); },
             [](TrainConfig& c, const std::string& v) { c.model.arch = parse_arch(v); });
        count("model.layers", "encoder and decoder layers (N)", [](TrainConfig& c) -> auto& { return c.model.layers; });
        count("model.hidden", "model width H", [](TrainConfig& c) -> auto& { return c.model.hidden; });
        count("model.ff", "feed-forward inner width", [](TrainConfig& c) -> auto& { return c.model.ff_size; });
        count("model.heads", "attention heads (must divide H)", [](TrainConfig& c) -> auto& { return c.model.heads; });
        count("model.vocab", "output vocabulary V; 0 takes the task vocabulary size", [](TrainConfig& c) -> auto& { return c.model.vocab; });
        text("model.groups", "int list", "expansion group sizes G, comma separated",
             [](const TrainConfig& c) { return join_counts(c.model.groups); },
             [](TrainConfig& c, const std::string& v) { c.model.groups = parse_counts("model.groups", v); });
        count("model.max_len", "longest accepted source / target (decoder_only: prompt + target)",
              [](TrainConfig& c) -> auto& { return c.model.max_len; });
        real("model.dropout", "dropout rate during training", [](TrainConfig& c) -> auto& { return c.model.dropout; });
        flag("model.scale_embedding", "multiply token embeddings by sqrt(H)", [](TrainConfig& c) -> auto& { return c.model.scale_embedding; });
        flag("model.tie_embeddings", "output projection shares the embedding table", [](TrainConfig& c) -> auto& { return c.model.tie_embeddings; });
        flag("model.d_positional", "BAI targets D include positional encodings", [](TrainConfig& c) -> auto& { return c.model.d_positional; });
        flag("model.d_scaled", "BAI targets D include the sqrt(H) embedding scale", [](TrainConfig& c) -> auto& { return c.model.d_scaled; });

        text("task.kind", "copy|reverse|sort|arith_translate|parallel_file", "task generator",
             [](const TrainConfig& c) { return std::string(to_string(c.task.kind)); },
             [](TrainConfig& c, const std::string& v) { c.task.kind = parse_task_kind(v); });
        count("task.vocab", "synthetic vocabulary size including the 4 reserved ids", [](TrainConfig& c) -> auto& { return c.task.vocab; });
        count("task.min_len", "shortest generated source", [](TrainConfig& c) -> auto& { return c.task.min_len; });
        count("task.max_len", "longest source/target; longer file pairs are dropped", [](TrainConfig& c) -> auto& { return c.task.max_len; });
        count("task.train", "training samples", [](TrainConfig& c) -> auto& { return c.task.train_count; });
        count("task.valid", "validation samples", [](TrainConfig& c) -> auto& { return c.task.valid_count; });
        count("task.seed", "generator seed", [](TrainConfig& c) -> auto& { return c.task.seed; });
        text("task.path", "path", "parallel corpus (source<TAB>target per line)", [](const TrainConfig& c) { return c.task.path; },
             [](TrainConfig& c, const std::string& v) { c.task.path = v; });
        real("task.valid_fraction", "parallel_file: tail fraction held out for validation",
             [](TrainConfig& c) -> auto& { return c.task.valid_fraction; });

        flag("bai.enabled", "add the lambda * beta term to the loss", [](TrainConfig& c) -> auto& { return c.bai_enabled; });
        text("bai.schedule", "preset", "lambda schedule: eq5, l1..l5, const, linear_up, linear_down",
             [](const TrainConfig& c) { return c.schedule_name; }, [](TrainConfig& c, const std::string& v) { c.schedule_name = v; });
        real("bai.eta", "schedule floor eta", [](TrainConfig& c) -> auto& { return c.schedule.eta; });
        real("bai.gamma", "eq5 slope gamma (> 0)", [](TrainConfig& c) -> auto& { return c.schedule.gamma; });
        real("bai.phi", "eq5 midpoint, in epochs", [](TrainConfig& c) -> auto& { return c.schedule.phi; });
        real("bai.const", "value of the const schedule", [](TrainConfig& c) -> auto& { return c.schedule.const_value; });
        real("bai.ramp_epochs", "ramp length of linear_up / linear_down", [](TrainConfig& c) -> auto& { return c.schedule.ramp_epochs; });
        flag("bai.detach_d", "stop gradients from beta into the embedding table", [](TrainConfig& c) -> auto& { return c.detach_d; });

        count("train.epochs", "training epochs", [](TrainConfig& c) -> auto& { return c.epochs; });
        count("train.batch_size", "sequences per batch (0 when token batching)", [](TrainConfig& c) -> auto& { return c.batching.batch_size; });
        count("train.token_batch_size", "padded tokens per batch (0 when sequence batching)",
              [](TrainConfig& c) -> auto& { return c.batching.token_batch_size; });
        text("train.batching", "random|length_bucketed", "batch composition",
             [](const TrainConfig& c) { return std::string(to_string(c.batching.kind)); },
             [](TrainConfig& c, const std::string& v) { c.batching.kind = parse_batching(v); });
        count("train.bucket_width", "source-length bucket width", [](TrainConfig& c) -> auto& { return c.batching.bucket_width; });
        text("train.lr_kind", "noam|fixed|step_decay", "learning-rate schedule",
             [](const TrainConfig& c) { return std::string(to_string(c.lr.kind)); },
             [](TrainConfig& c, const std::string& v) { c.lr.kind = parse_lr_kind(v); });
        real("train.lr", "base rate for fixed / step_decay", [](TrainConfig& c) -> auto& { return c.lr.value; });
        count("train.warmup", "warmup steps", [](TrainConfig& c) -> auto& { return c.lr.warmup; });
        real("train.decay_factor", "step_decay multiplier", [](TrainConfig& c) -> auto& { return c.lr.factor; });
        count("train.decay_every", "step_decay period in epochs", [](TrainConfig& c) -> auto& { return c.lr.every; });
        real("train.lr_scale", "multiplier applied to every lr kind", [](TrainConfig& c) -> auto& { return c.lr.scale; });
        real("train.adam_beta1", "Adam beta1", [](TrainConfig& c) -> auto& { return c.adam.beta1; });
        real("train.adam_beta2", "Adam beta2", [](TrainConfig& c) -> auto& { return c.adam.beta2; });
        real("train.adam_eps", "Adam epsilon", [](TrainConfig& c) -> auto& { return c.adam.eps; });
        real("train.clip", "global gradient-norm clip (0 disables)", [](TrainConfig& c) -> auto& { return c.clip; });
        count("train.seed", "seed for initialization, batching and dropout", [](TrainConfig& c) -> auto& { return c.seed; });
        text("train.precision", "f32|f64", "parameter and activation precision", [](const TrainConfig& c) { return c.precision; },
             [](TrainConfig& c, const std::string& v) { c.precision = v; });
        count("train.eval_batch_size", "validation batch size", [](TrainConfig& c) -> auto& { return c.eval_batch_size; });
        count("train.bleu_samples", "validation samples decoded for BLEU per epoch (0 disables)",
              [](TrainConfig& c) -> auto& { return c.bleu_samples; });
        count("train.decode_max_steps", "decoding step limit", [](TrainConfig& c) -> auto& { return c.decode_max_steps; });
        return k;
    }();
    return keys;
}

inline const ConfigKey& find_config_key(const std::string& key) {
    for (const auto& k : config_keys())
        if (k.key == key) return k;
    throw ConfigError("unknown config key '" + key + "'");
}

inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
    find_config_key(key).set(cfg, detail::trim(value));
}

// "key=value" as given on the command line.
inline void apply_override(TrainConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
    set_config_value(cfg, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline TrainConfig parse_config_text(const std::string& text, const std::string& origin = "<config>") {
    TrainConfig cfg;
    std::istringstream in(text);
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
        try {
            set_config_value(cfg, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

inline TrainConfig load_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path);
}

// Every key in table order, defaults materialized.
inline std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& k : config_keys()) out.emplace_back(k.key, k.get(cfg));
    return out;
}

inline std::string config_to_text(const TrainConfig& cfg) {
    std::string s;
    for (const auto& [k, v] : config_entries(cfg)) s += k + " = " + v + "\n";
    return s;
}

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 14695981039346656037ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 15];
    return s;
}

inline std::string config_digest(const TrainConfig& cfg) {
    const auto text = config_to_text(cfg);
    return hex64(fnv1a64(text.data(), text.size()));
}

// Effective lambda schedule (preset resolved, T still unset).
inline LambdaSchedule resolved_schedule(const TrainConfig& cfg) { return schedule_preset(cfg.schedule_name, cfg.schedule); }

}  // namespace bai

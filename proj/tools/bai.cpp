// bai: train, evaluate and decode BAI models; plot-data and ablation helpers.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "bai/gradcheck.hpp"
#include "bai/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr const char* kToolVersion = BAI_VERSION;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Options {
    std::string config;
    std::vector<std::string> overrides;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::size_t beam = 4;
    std::string bai;
    std::vector<std::string> schedules;
    std::string checkpoint;
    std::string input;
    std::string arch = "transformer";
    std::size_t limit = 0;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> iters_per_epoch;
};

bool looks_like_json(const std::string& text) {
    const auto p = text.find_first_not_of(" \t\r\n");
    return p != std::string::npos && text[p] == '{';
}

// A config file or a run manifest (whose "config" object is replayed key by key).
bai::TrainConfig read_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    if (!looks_like_json(text)) return bai::parse_config_text(text, path);
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw bai::ConfigError(path + ": " + e.what());
    }
    if (!doc.contains("config") || !doc["config"].is_object()) throw bai::ConfigError(path + ": manifest has no \"config\" object");
    bai::TrainConfig cfg;
    for (const auto& [k, v] : doc["config"].items()) {
        if (!v.is_string()) throw bai::ConfigError(path + ": config value of '" + k + "' must be a string");
        bai::set_config_value(cfg, k, v.get<std::string>());
    }
    return cfg;
}

void apply_flags(bai::TrainConfig& cfg, const Options& o, bool schedule_flag) {
    for (const auto& kv : o.overrides) bai::apply_override(cfg, kv);
    if (o.seed) cfg.seed = *o.seed;
    if (!o.bai.empty()) cfg.bai_enabled = bai::detail::parse_bool("--bai", o.bai);
    if (schedule_flag && !o.schedules.empty()) {
        if (o.schedules.size() > 1) throw UsageError("--schedule given more than once");
        cfg.schedule_name = o.schedules.front();
    }
    if (o.epochs) cfg.epochs = *o.epochs;
}

bai::TrainConfig build_config(const Options& o, bool schedule_flag = true) {
    bai::TrainConfig cfg = o.config.empty() ? bai::TrainConfig{} : read_config(o.config);
    apply_flags(cfg, o, schedule_flag);
    cfg.validate();
    return cfg;
}

json config_json(const bai::TrainConfig& cfg) {
    json j = json::object();
    for (const auto& [k, v] : bai::config_entries(cfg)) j[k] = v;
    return j;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw bai::InputError("cannot write '" + path.string() + "'");
    out << text;
}

void write_manifest(const fs::path& dir, const std::string& command, const bai::TrainConfig& cfg, const json& artifacts) {
    json m;
    m["tool"] = "bai";
    m["version"] = kToolVersion;
    m["command"] = command;
    m["config_digest"] = bai::config_digest(cfg);
    m["config"] = config_json(cfg);
    m["artifacts"] = artifacts;
    write_text(dir / "manifest.json", m.dump(2) + "\n");
}

std::string fixed(double x, int digits = 4) {
    if (!std::isfinite(x)) return "-";
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << x;
    return s.str();
}

template <class T>
bai::TrainOutcome<T> run_training(const bai::TrainConfig& cfg, const bai::Dataset& ds, const fs::path& out, const bai::Checkpoint* resume,
                                  bool verbose) {
    bai::TrainHooks hooks;
    if (verbose)
        hooks.on_record = [](const bai::MetricRecord& r) {
            if (r.phase != "valid") return;
            std::cout << "epoch " << r.epoch << "  iter " << r.iteration << "  ce " << fixed(r.ce) << "  beta " << fixed(r.beta)
                      << "  lambda " << fixed(r.lambda, 6) << "  acc " << fixed(r.valid_token_accuracy) << "  bleu "
                      << fixed(r.valid_bleu) << std::endl;
        };
    return bai::train<T>(cfg, ds, out, resume, hooks);
}

struct TrainSummary {
    std::vector<bai::MetricRecord> valid;
    std::string last_checkpoint;
};

TrainSummary train_into(const bai::TrainConfig& cfg, const fs::path& out, const bai::Checkpoint* resume, bool verbose) {
    const auto ds = bai::make_dataset(cfg.task);
    TrainSummary s;
    bai::TrainConfig resolved;
    if (cfg.precision == "f64") {
        auto r = run_training<double>(cfg, ds, out, resume, verbose);
        s = {r.valid_records, r.last_checkpoint.string()};
        resolved = r.config;
    } else {
        auto r = run_training<float>(cfg, ds, out, resume, verbose);
        s = {r.valid_records, r.last_checkpoint.string()};
        resolved = r.config;
    }
    json checkpoints = json::array();
    for (std::size_t e = 0; e <= resolved.epochs; ++e)
        if (fs::exists(bai::checkpoint_path(out, e))) checkpoints.push_back(bai::checkpoint_path(out, e).filename().string());
    json artifacts;
    artifacts["metrics_jsonl"] = "metrics.jsonl";
    artifacts["metrics_csv"] = "metrics.csv";
    artifacts["timing_csv"] = "timing.csv";
    artifacts["checkpoints"] = checkpoints;
    artifacts["last_checkpoint"] = "checkpoint_last.bin";
    write_manifest(out, "train", resolved, artifacts);
    return s;
}

fs::path require_out(const Options& o, const char* command) {
    if (o.out.empty()) throw UsageError(std::string(command) + ": --out is required");
    return o.out;
}

int cmd_train(const Options& o) {
    const auto cfg = build_config(o);
    const auto out = require_out(o, "train");
    std::optional<bai::Checkpoint> resume;
    if (!o.checkpoint.empty()) resume = bai::load_checkpoint(o.checkpoint);
    train_into(cfg, out, resume ? &*resume : nullptr, true);
    std::cout << "wrote " << (out / "manifest.json").string() << "\n";
    return 0;
}

// Model, config and dataset restored from a checkpoint; overrides may
// retarget the task or evaluation settings.
template <class T>
struct Restored {
    bai::TrainConfig config;
    bai::Dataset data;
    bai::Model<T> model;
};

template <class T>
Restored<T> restore(const Options& o) {
    if (o.checkpoint.empty()) throw UsageError("--checkpoint is required");
    const auto ck = bai::load_checkpoint(o.checkpoint);
    auto cfg = o.config.empty() ? bai::parse_config_text(ck.config_text, o.checkpoint + " (config)") : read_config(o.config);
    apply_flags(cfg, o, false);
    auto ds = bai::make_dataset(cfg.task);
    cfg = bai::resolve_config(cfg, ds);
    bai::Model<T> model(cfg.model, cfg.seed);
    bai::restore_parameters(ck, model);
    return {cfg, std::move(ds), std::move(model)};
}

std::vector<bai::Sample> limited(const std::vector<bai::Sample>& s, std::size_t limit) {
    if (limit == 0 || limit >= s.size()) return s;
    return {s.begin(), s.begin() + static_cast<std::ptrdiff_t>(limit)};
}

int cmd_eval(const Options& o) {
    if (o.beam < 1) throw UsageError("--beam must be >= 1");
    auto r = restore<float>(o);
    const auto samples = limited(r.data.valid, o.limit);
    if (samples.empty()) throw bai::ConfigError("eval: the task has no validation samples");
    const auto ev = bai::evaluate(r.model, samples, r.config.eval_batch_size, samples.size(), r.config.decode_max_steps, o.beam);
    json rep;
    rep["checkpoint"] = o.checkpoint;
    rep["task"] = bai::to_string(r.config.task.kind);
    rep["beam"] = o.beam;
    rep["sequences"] = ev.sequences;
    rep["tokens"] = ev.tokens;
    rep["token_accuracy"] = ev.token_accuracy;
    rep["bleu"] = ev.bleu;
    rep["ce"] = ev.ce;
    rep["beta"] = ev.beta;
    std::cout << rep.dump() << "\n";
    if (!o.out.empty()) {
        fs::create_directories(o.out);
        write_text(fs::path(o.out) / "eval.json", rep.dump(2) + "\n");
    }
    return 0;
}

int cmd_decode(const Options& o) {
    if (o.beam < 1) throw UsageError("--beam must be >= 1");
    const auto out = require_out(o, "decode");
    auto r = restore<float>(o);
    std::vector<std::vector<bai::TokenId>> sources;
    if (o.input.empty()) {
        for (const auto& s : limited(r.data.valid, o.limit)) sources.push_back(s.src);
    } else {
        std::ifstream in(o.input);
        if (!in) throw UsageError("cannot open input file '" + o.input + "'");
        for (std::string line; std::getline(in, line);) sources.push_back(r.data.vocab.encode(line));
    }
    fs::create_directories(out);
    std::ofstream dec(out / "decoded.txt", std::ios::binary | std::ios::trunc);
    if (!dec) throw bai::InputError("cannot write '" + (out / "decoded.txt").string() + "'");
    bai::BeamConfig bc;
    bc.width = o.beam;
    bc.max_steps = r.config.decode_max_steps;
    for (const auto& src : sources) {
        if (src.empty() || src.size() > r.config.model.max_len) {
            dec << "\n";
            continue;
        }
        const auto tokens = o.beam == 1 ? bai::greedy_decode(r.model, src, bc.max_steps) : bai::beam_search(r.model, src, bc).tokens;
        dec << r.data.vocab.decode(tokens) << "\n";
    }
    std::cout << "decoded " << sources.size() << " sequences (beam " << o.beam << ") to " << (out / "decoded.txt").string() << "\n";
    return 0;
}

int cmd_lambda(const Options& o) {
    const auto cfg = build_config(o);
    auto sched = bai::resolved_schedule(cfg);
    std::size_t iters = 0;
    if (o.iters_per_epoch) {
        iters = *o.iters_per_epoch;
    } else {
        const auto ds = bai::make_dataset(cfg.task);
        iters = bai::plan_batches(ds.train, cfg.batching, bai::batch_seed(cfg.seed, 0)).size();
    }
    if (iters < 1) throw UsageError("--iters-per-epoch must be >= 1");
    sched.iters_per_epoch = static_cast<double>(iters);
    std::ostringstream csv;
    csv << "iteration,epoch,lambda\n";
    for (std::size_t t = 0; t <= cfg.epochs * iters; ++t)
        csv << t << "," << bai::detail::format_double(static_cast<double>(t) / static_cast<double>(iters)) << ","
            << bai::detail::format_double(bai::lambda_weight(sched, static_cast<double>(t))) << "\n";
    if (o.out.empty()) {
        std::cout << csv.str();
    } else {
        const fs::path p(o.out);
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        write_text(p, csv.str());
    }
    return 0;
}

int cmd_ablate(const Options& o) {
    if (o.schedules.size() < 2) throw UsageError("ablate: give at least two --schedule values (a preset name or 'off')");
    const auto base = build_config(o, false);
    const auto out = require_out(o, "ablate");
    for (const auto& name : o.schedules)
        if (name != "off") bai::schedule_preset(name, base.schedule);
    fs::create_directories(out);
    std::ostringstream table;
    table << "schedule,best_valid_token_accuracy,best_valid_bleu,final_beta,final_ce\n";
    std::cout << std::left << std::setw(14) << "schedule" << std::setw(12) << "best_acc" << std::setw(12) << "best_bleu" << std::setw(12)
              << "final_beta" << "final_ce\n";
    for (const auto& name : o.schedules) {
        auto cfg = base;
        if (name == "off") {
            cfg.bai_enabled = false;
        } else {
            cfg.bai_enabled = true;
            cfg.schedule_name = name;
        }
        const auto s = train_into(cfg, out / name, nullptr, false);
        double acc = -1, bleu = -1;
        for (const auto& r : s.valid) {
            acc = std::max(acc, r.valid_token_accuracy);
            if (std::isfinite(r.valid_bleu)) bleu = std::max(bleu, r.valid_bleu);
        }
        const auto& last = s.valid.back();
        const double best_bleu = bleu < 0 ? std::numeric_limits<double>::quiet_NaN() : bleu;
        table << name << "," << bai::detail::csv_number(acc) << "," << bai::detail::csv_number(best_bleu) << "," << bai::detail::csv_number(last.beta) << ","
              << bai::detail::csv_number(last.ce) << "\n";
        std::cout << std::left << std::setw(14) << name << std::setw(12) << fixed(acc) << std::setw(12) << fixed(best_bleu) << std::setw(12)
                  << fixed(last.beta) << fixed(last.ce) << std::endl;
    }
    write_text(out / "ablation.csv", table.str());
    return 0;
}

int cmd_gradcheck(const Options& o) {
    std::vector<bai::Arch> archs;
    if (o.arch == "all")
        archs = {bai::Arch::transformer, bai::Arch::expansion, bai::Arch::decoder_only};
    else
        archs = {bai::parse_arch(o.arch)};
    std::vector<bai::GradcheckRow> rows;
    for (const auto& n : bai::gradcheck_op_names()) rows.push_back(bai::gradcheck_op(n));
    for (auto a : archs) rows.push_back(bai::gradcheck_objective(a));
    std::size_t failed = 0;
    std::cout << std::left << std::setw(28) << "op" << std::setw(14) << "max_rel_err" << std::setw(9) << "checked" << "status\n";
    for (const auto& r : rows) {
        std::ostringstream err;
        err << std::scientific << std::setprecision(2) << r.max_rel_err;
        std::cout << std::left << std::setw(28) << r.op << std::setw(14) << err.str() << std::setw(9) << r.checked
                  << (r.passed ? "ok" : "FAIL") << "\n";
        failed += !r.passed;
    }
    if (failed) {
        for (const auto& r : rows)
            if (!r.passed) std::cerr << "gradcheck failed: " << r.op << " relative error " << r.max_rel_err << "\n";
        return 1;
    }
    std::cout << rows.size() << " checks passed\n";
    return 0;
}

void add_config_flags(CLI::App* c, Options& o) {
    c->add_option("--config", o.config, "config file or run manifest");
    c->add_option("--override", o.overrides, "key=value, applied after the config (repeatable)")->take_all();
    c->add_option("--seed", o.seed, "overrides train.seed");
    c->add_option("--bai", o.bai, "on|off, overrides bai.enabled")->check(CLI::IsMember({"on", "off", "true", "false"}));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"BAI training and evaluation tool"};
    app.set_version_flag("--version", std::string("bai ") + kToolVersion);
    app.require_subcommand(1);
    Options o;

    auto* train = app.add_subcommand("train", "train a model, writing manifest, metrics and checkpoints to --out");
    add_config_flags(train, o);
    train->add_option("--out", o.out, "run directory")->required();
    train->add_option("--schedule", o.schedules, "lambda schedule preset (overrides bai.schedule)");
    train->add_option("--checkpoint", o.checkpoint, "resume from this checkpoint");
    train->add_option("--epochs", o.epochs, "overrides train.epochs");

    auto* eval = app.add_subcommand("eval", "token accuracy and BLEU of a checkpoint on the validation split");
    add_config_flags(eval, o);
    eval->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
    eval->add_option("--beam", o.beam, "beam width (1 = greedy)")->capture_default_str();
    eval->add_option("--limit", o.limit, "evaluate only the first N validation samples (0 = all)");
    eval->add_option("--out", o.out, "also write eval.json here");

    auto* decode = app.add_subcommand("decode", "decode the validation split or --input lines into decoded.txt");
    add_config_flags(decode, o);
    decode->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
    decode->add_option("--beam", o.beam, "beam width (1 = greedy)")->capture_default_str();
    decode->add_option("--input", o.input, "source sequences, one per line, space-separated tokens");
    decode->add_option("--limit", o.limit, "decode only the first N validation samples (0 = all)");
    decode->add_option("--out", o.out, "output directory")->required();

    auto* lambda = app.add_subcommand("lambda", "print the lambda schedule per iteration as CSV");
    add_config_flags(lambda, o);
    lambda->add_option("--schedule", o.schedules, "schedule preset (overrides bai.schedule)");
    lambda->add_option("--epochs", o.epochs, "epochs to sample (default train.epochs)");
    lambda->add_option("--iters-per-epoch", o.iters_per_epoch, "iterations per epoch T (default: from the task and batching)");
    lambda->add_option("--out", o.out, "CSV file (default stdout)");

    auto* ablate = app.add_subcommand("ablate", "train one run per schedule and tabulate the best validation metrics");
    add_config_flags(ablate, o);
    ablate->add_option("--schedule", o.schedules, "schedule preset or 'off' (repeat, at least two)")->required();
    ablate->add_option("--epochs", o.epochs, "overrides train.epochs");
    ablate->add_option("--out", o.out, "output directory, one sub-directory per schedule")->required();

    auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every op and the joint objective");
    grad->add_option("--arch", o.arch, "transformer|expansion|decoder_only|all")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (train->parsed()) return cmd_train(o);
        if (eval->parsed()) return cmd_eval(o);
        if (decode->parsed()) return cmd_decode(o);
        if (lambda->parsed()) return cmd_lambda(o);
        if (ablate->parsed()) return cmd_ablate(o);
        if (grad->parsed()) return cmd_gradcheck(o);
    } catch (const UsageError& e) {
        std::cerr << "bai: " << e.what() << "\n";
        return 2;
    } catch (const bai::ConfigError& e) {
        std::cerr << "bai: config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "bai: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

// sliderquant: pretrain a desk-scale LM, quantize it with sliding-window
// calibration, evaluate perplexity, probe layer sensitivity, dump schedules,
// and run the ablation grid. JSON config with flag overrides; every run
// writes a run.json manifest with the fully resolved configuration.

#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>

#include "slq/calibrate.hpp"
#include "slq/evalprobe.hpp"
#include "slq/packio.hpp"
#include "slq/schedule.hpp"

using json = nlohmann::ordered_json;
using namespace slq;

namespace {

constexpr const char* kToolVersion = "1.0.0";

// exit codes: 0 ok, 2 usage/config, 3 file/format, 4 runtime
enum ExitCode : int { exit_ok = 0, exit_usage = 2, exit_io = 3, exit_runtime = 4 };

json load_config_file(const std::string& path, const std::vector<std::string>& known_keys) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
    for (auto& [key, value] : j.items()) {
        (void)value;
        if (std::find(known_keys.begin(), known_keys.end(), key) == known_keys.end())
            throw ConfigError("config: unknown key '" + key + "'");
    }
    return j;
}

void write_run_manifest(const std::string& out_dir, const std::string& command, const json& cfg) {
    json manifest;
    manifest["tool"] = "sliderquant";
    manifest["version"] = kToolVersion;
    manifest["command"] = command;
    manifest["config"] = cfg;
    std::ofstream os(out_dir.empty() ? "run.json" : out_dir + "/run.json", std::ios::trunc);
    os << manifest.dump(2) << "\n";
}

std::string dir_of(const std::string& path) {
    const size_t pos = path.find_last_of('/');
    return pos == std::string::npos ? std::string() : path.substr(0, pos);
}

// picks the value explicitly given on the command line, else the config
// file entry, else the built-in default already stored in `value`
template <typename T>
void merge_key(const CLI::App* app, const std::string& flag, const json& file_cfg,
               const std::string& key, T& value) {
    if (app->count(flag) > 0) return;   // flag overrides file
    if (file_cfg.contains(key)) value = file_cfg.at(key).get<T>();
}

struct QuantizeArgs {
    std::string ckpt, corpus, out = "quantized.slq", loss_log, config_path;
    int wbits = 4, abits = 4;
    std::string group = "channel";
    int64_t ls = 4, ld = 4, s = 2, i = 1;
    double gamma = 0.5;
    int64_t epochs = 0, batch = 4, samples = 32, sample_len = 128;
    double lr_scale = 1e-3, lr_lora = 1e-4;
    int64_t rank = 4;
    uint64_t seed = 0;
    std::string target_stream = "quant";
};

CalibConfig to_calib_config(const QuantizeArgs& a) {
    CalibConfig cfg;
    cfg.weight_bits = a.wbits;
    cfg.act_bits = a.abits;
    if (a.group == "channel") {
        cfg.weight_granularity = Granularity::per_channel;
    } else {
        cfg.weight_granularity = Granularity::group_wise;
        try {
            cfg.group_size = std::stoll(a.group);
        } catch (...) {
            throw ConfigError("config: group must be 'channel' or a positive integer");
        }
        if (cfg.group_size < 1) throw ConfigError("config: group size must be >= 1");
    }
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch;
    cfg.lr_scale = static_cast<float>(a.lr_scale);
    cfg.lr_lora = static_cast<float>(a.lr_lora);
    cfg.lora_rank = a.rank;
    cfg.seed = a.seed;
    if (a.target_stream == "quant") {
        cfg.target_stream = TargetStream::quantized;
    } else if (a.target_stream == "fp") {
        cfg.target_stream = TargetStream::fp;
    } else {
        throw ConfigError("config: target-stream must be 'quant' or 'fp'");
    }
    return cfg;
}

json quantize_args_json(const QuantizeArgs& a, const std::string& kind) {
    json j;
    j["kind"] = kind;
    j["ckpt"] = a.ckpt;
    j["corpus"] = a.corpus;
    j["out"] = a.out;
    j["wbits"] = a.wbits;
    j["abits"] = a.abits;
    j["group"] = a.group;
    j["ls"] = a.ls;
    j["ld"] = a.ld;
    j["s"] = a.s;
    j["i"] = a.i;
    j["gamma"] = a.gamma;
    j["epochs"] = a.epochs;
    j["batch"] = a.batch;
    j["samples"] = a.samples;
    j["sample_len"] = a.sample_len;
    j["lr_scale"] = a.lr_scale;
    j["lr_lora"] = a.lr_lora;
    j["rank"] = a.rank;
    j["seed"] = a.seed;
    j["target_stream"] = a.target_stream;
    return j;
}

void add_quantize_options(CLI::App* cmd, QuantizeArgs& a, bool schedule_flags) {
    cmd->add_option("--config", a.config_path, "JSON config file (flags override)");
    cmd->add_option("--ckpt", a.ckpt, "model checkpoint path");
    cmd->add_option("--corpus", a.corpus, "corpus text file (calibration split source)");
    cmd->add_option("--out", a.out, "output artifact path");
    cmd->add_option("--loss-log", a.loss_log, "per-window loss CSV path");
    cmd->add_option("--wbits", a.wbits, "weight bits {2,3,4,8,16}")->default_val(4);
    cmd->add_option("--abits", a.abits, "activation bits {4,8,16}; 16 = weight-only")
        ->default_val(4);
    cmd->add_option("--group", a.group, "weight granularity: 'channel' or a group size")
        ->default_val("channel");
    if (schedule_flags) {
        cmd->add_option("--ls", a.ls, "shallow layers L_s")->default_val(4);
        cmd->add_option("--ld", a.ld, "deep layers L_d")->default_val(4);
        cmd->add_option("--s", a.s, "fixed window size s")->default_val(2);
        cmd->add_option("--i", a.i, "window stride i")->default_val(1);
        cmd->add_option("--gamma", a.gamma, "intra-layer stage ratio")->default_val(0.5);
    }
    cmd->add_option("--epochs", a.epochs, "epochs per window (0 = 20, or 60 at 2-bit)")
        ->default_val(0);
    cmd->add_option("--batch", a.batch, "calibration batch size")->default_val(4);
    cmd->add_option("--samples", a.samples, "calibration samples c")->default_val(32);
    cmd->add_option("--sample-len", a.sample_len, "tokens per calibration sample k")
        ->default_val(128);
    cmd->add_option("--lr-scale", a.lr_scale, "channel-scale learning rate")->default_val(1e-3);
    cmd->add_option("--lr-lora", a.lr_lora, "LoRA learning rate")->default_val(1e-4);
    cmd->add_option("--rank", a.rank, "LoRA rank")->default_val(4);
    cmd->add_option("--seed", a.seed, "seed")->default_val(0);
    cmd->add_option("--target-stream", a.target_stream,
                    "window-target input stream: quant | fp")
        ->default_val("quant");
}

void merge_quantize_config(const CLI::App* cmd, QuantizeArgs& a) {
    if (a.config_path.empty()) return;
    const std::vector<std::string> keys = {
        "ckpt", "corpus", "out", "loss_log", "wbits", "abits", "group", "ls", "ld", "s", "i",
        "gamma", "epochs", "batch", "samples", "sample_len", "lr_scale", "lr_lora", "rank",
        "seed", "target_stream"};
    const json j = load_config_file(a.config_path, keys);
    merge_key(cmd, "--ckpt", j, "ckpt", a.ckpt);
    merge_key(cmd, "--corpus", j, "corpus", a.corpus);
    merge_key(cmd, "--out", j, "out", a.out);
    merge_key(cmd, "--loss-log", j, "loss_log", a.loss_log);
    merge_key(cmd, "--wbits", j, "wbits", a.wbits);
    merge_key(cmd, "--abits", j, "abits", a.abits);
    merge_key(cmd, "--group", j, "group", a.group);
    merge_key(cmd, "--ls", j, "ls", a.ls);
    merge_key(cmd, "--ld", j, "ld", a.ld);
    merge_key(cmd, "--s", j, "s", a.s);
    merge_key(cmd, "--i", j, "i", a.i);
    merge_key(cmd, "--gamma", j, "gamma", a.gamma);
    merge_key(cmd, "--epochs", j, "epochs", a.epochs);
    merge_key(cmd, "--batch", j, "batch", a.batch);
    merge_key(cmd, "--samples", j, "samples", a.samples);
    merge_key(cmd, "--sample-len", j, "sample_len", a.sample_len);
    merge_key(cmd, "--lr-scale", j, "lr_scale", a.lr_scale);
    merge_key(cmd, "--lr-lora", j, "lr_lora", a.lr_lora);
    merge_key(cmd, "--rank", j, "rank", a.rank);
    merge_key(cmd, "--seed", j, "seed", a.seed);
    merge_key(cmd, "--target-stream", j, "target_stream", a.target_stream);
}

struct LoadedSubject {
    Model model;
    CharVocab vocab;
    TokenStream stream;
    CalibSet calib;
};

LoadedSubject load_subject(const QuantizeArgs& a, bool need_calib) {
    if (a.ckpt.empty()) throw ConfigError("config: --ckpt is required");
    if (a.corpus.empty()) throw ConfigError("config: --corpus is required");
    LoadedSubject s;
    s.model = load_checkpoint(a.ckpt);
    auto [vocab, stream] = load_corpus(a.corpus);
    s.vocab = std::move(vocab);
    s.stream = std::move(stream);
    if (s.vocab.bytes != s.model.vocab)
        throw ConfigError("config: corpus vocabulary does not match the checkpoint");
    if (need_calib)
        s.calib = make_calibset(s.stream.calib(), a.samples, a.sample_len, a.seed);
    return s;
}

WindowSchedule schedule_for(const QuantizeArgs& a, int64_t layers) {
    ScheduleConfig sc;
    sc.layers = layers;
    sc.shallow = a.ls;
    sc.deep = a.ld;
    sc.window = a.s;
    sc.stride = a.i;
    sc.gamma = a.gamma;
    return generate_schedule(sc);
}

int cmd_pretrain(const std::string& config_path, const CLI::App* cmd, std::string corpus,
                 std::string out, int64_t layers, int64_t d_model, int64_t heads, int64_t d_ff,
                 int64_t max_seq, int64_t steps, int64_t batch, int64_t seq_len, double lr,
                 uint64_t seed) {
    if (!config_path.empty()) {
        const std::vector<std::string> keys = {"corpus", "out", "layers", "d_model", "heads",
                                               "d_ff", "max_seq", "steps", "batch", "seq_len",
                                               "lr", "seed"};
        const json j = load_config_file(config_path, keys);
        merge_key(cmd, "--corpus", j, "corpus", corpus);
        merge_key(cmd, "--out", j, "out", out);
        merge_key(cmd, "--layers", j, "layers", layers);
        merge_key(cmd, "--d-model", j, "d_model", d_model);
        merge_key(cmd, "--heads", j, "heads", heads);
        merge_key(cmd, "--d-ff", j, "d_ff", d_ff);
        merge_key(cmd, "--max-seq", j, "max_seq", max_seq);
        merge_key(cmd, "--steps", j, "steps", steps);
        merge_key(cmd, "--batch", j, "batch", batch);
        merge_key(cmd, "--seq-len", j, "seq_len", seq_len);
        merge_key(cmd, "--lr", j, "lr", lr);
        merge_key(cmd, "--seed", j, "seed", seed);
    }
    if (corpus.empty()) throw ConfigError("config: --corpus is required");
    if (out.empty()) throw ConfigError("config: --out is required");

    auto [vocab, stream] = load_corpus(corpus);
    ModelConfig mc;
    mc.vocab_size = vocab.size();
    mc.d_model = d_model;
    mc.n_heads = heads;
    mc.n_layers = layers;
    mc.d_ff = d_ff;
    mc.max_seq = max_seq;
    mc.seed = seed;
    Model model = init_model(mc, vocab.bytes);

    PretrainConfig pc;
    pc.steps = steps;
    pc.batch = batch;
    pc.seq_len = seq_len;
    pc.lr = static_cast<float>(lr);
    pc.seed = seed;
    PretrainResult res = pretrain(model, stream, pc, &std::cout);
    save_checkpoint(model, out);

    const double ppl = perplexity(model, stream.test(), 8192);
    std::cout << "final training loss " << res.final_loss << "\n";
    std::cout << "held-out perplexity " << ppl << "\n";
    std::cout << "checkpoint written to " << out << "\n";

    json cfgj;
    cfgj["corpus"] = corpus;
    cfgj["out"] = out;
    cfgj["layers"] = layers;
    cfgj["d_model"] = d_model;
    cfgj["heads"] = heads;
    cfgj["d_ff"] = d_ff;
    cfgj["max_seq"] = max_seq;
    cfgj["steps"] = steps;
    cfgj["batch"] = batch;
    cfgj["seq_len"] = seq_len;
    cfgj["lr"] = lr;
    cfgj["seed"] = seed;
    cfgj["final_loss"] = res.final_loss;
    cfgj["test_perplexity"] = ppl;
    write_run_manifest(dir_of(out), "pretrain", cfgj);
    return exit_ok;
}

int cmd_quantize(const CLI::App* cmd, QuantizeArgs& a) {
    merge_quantize_config(cmd, a);
    const CalibConfig cfg = to_calib_config(a);
    cfg.validate();
    LoadedSubject subject = load_subject(a, true);
    const WindowSchedule sched = schedule_for(a, subject.model.config.n_layers);

    PipelineResult res = run_pipeline(subject.model, sched, subject.calib, cfg);
    save_artifact(res.artifact, a.out);
    if (!a.loss_log.empty()) write_loss_log_csv(a.loss_log, res.loss_log);
    write_run_manifest(dir_of(a.out), "quantize", quantize_args_json(a, "sliderquant"));
    std::cout << "artifact written to " << a.out << " (" << res.loss_log.size()
              << " loss rows)\n";
    return exit_ok;
}

int cmd_baseline(const CLI::App* cmd, QuantizeArgs& a, std::string& kind_name) {
    merge_quantize_config(cmd, a);
    const BaselineKind kind = baseline_kind_from_name(kind_name);
    const CalibConfig cfg = to_calib_config(a);
    cfg.validate();
    LoadedSubject subject = load_subject(a, kind != BaselineKind::rtn);

    PipelineResult res = run_baseline(kind, subject.model, subject.calib, cfg, a.s, a.i);
    save_artifact(res.artifact, a.out);
    if (!a.loss_log.empty()) write_loss_log_csv(a.loss_log, res.loss_log);
    write_run_manifest(dir_of(a.out), "baseline", quantize_args_json(a, kind_name));
    std::cout << "artifact written to " << a.out << "\n";
    return exit_ok;
}

int cmd_eval(const std::string& artifact_path, const std::string& tokens_path,
             const std::string& csv_path, int64_t max_tokens) {
    if (artifact_path.empty()) throw ConfigError("config: --artifact is required");
    if (tokens_path.empty()) throw ConfigError("config: --tokens is required");
    const QuantizedModel qm = load_artifact(artifact_path);

    std::ifstream in(tokens_path, std::ios::binary);
    if (!in) throw ConfigError("config: cannot open " + tokens_path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (text.empty()) throw ConfigError("config: token file is empty");
    // evaluate on the held-out tail, tokenized with the artifact's own vocab
    const CharVocab vocab = CharVocab::from_bytes(qm.vocab);
    const std::vector<int> ids = vocab.encode(text);
    const int64_t start = static_cast<int64_t>(ids.size()) * 95 / 100;
    std::span<const int> test(ids.data() + start,
                              ids.size() - static_cast<size_t>(start));

    const double ppl = perplexity(qm, test, max_tokens);
    std::cout << "perplexity " << ppl << "\n";
    if (!csv_path.empty()) {
        std::ofstream os(csv_path, std::ios::trunc);
        os << "artifact,wbits,abits,tokens,perplexity\n";
        os << artifact_path << "," << qm.weight_bits << "," << qm.act_bits << ","
           << std::min<int64_t>(max_tokens < 0 ? static_cast<int64_t>(test.size()) : max_tokens,
                                static_cast<int64_t>(test.size()))
           << "," << ppl << "\n";
    }
    json cfgj;
    cfgj["artifact"] = artifact_path;
    cfgj["tokens"] = tokens_path;
    cfgj["max_tokens"] = max_tokens;
    cfgj["perplexity"] = ppl;
    write_run_manifest(dir_of(csv_path), "eval", cfgj);
    return exit_ok;
}

struct ProbeArgs {
    QuantizeArgs q;
    std::string mode = "single";
    std::string method = "rtn";
    std::string out_csv;
    int64_t max_tokens = 8192;
    int jobs = 1;
    bool emit_gnuplot = false;
};

int cmd_probe(const CLI::App* cmd, ProbeArgs& pa) {
    merge_quantize_config(cmd, pa.q);
    const CalibConfig cfg = to_calib_config(pa.q);
    cfg.validate();
    if (pa.mode != "single" && pa.mode != "prefix")
        throw ConfigError("config: probe mode must be 'single' or 'prefix'");
    const ProbeMethod method = probe_method_from_name(pa.method);
    LoadedSubject subject = load_subject(pa.q, true);
    const int64_t L = subject.model.config.n_layers;
    std::span<const int> test = subject.stream.test();

    const double fp_ref = perplexity(subject.model, test, pa.max_tokens);

    // the calibrated prefix probe reuses one full-pipeline artifact
    std::optional<QuantizedModel> artifact;
    if (pa.mode == "prefix" && method == ProbeMethod::calibrated) {
        const WindowSchedule sched = schedule_for(pa.q, L);
        artifact = run_pipeline(subject.model, sched, subject.calib, cfg).artifact;
    }

    auto probe_one = [&](int64_t l) -> double {
        if (pa.mode == "single")
            return probe_single_layer(subject.model, l, cfg, method, &subject.calib, test,
                                      pa.max_tokens);
        return probe_prefix(subject.model, l, cfg, method, artifact ? &*artifact : nullptr, test,
                            pa.max_tokens);
    };

    const int64_t first = (pa.mode == "single") ? 0 : 1;
    const int64_t last = (pa.mode == "single") ? L - 1 : L;
    std::vector<double> ppls(static_cast<size_t>(last - first + 1), 0.0);

    if (pa.jobs <= 1) {
        for (int64_t l = first; l <= last; ++l)
            ppls[static_cast<size_t>(l - first)] = probe_one(l);
    } else {
        // independent probes in worker processes, one result double per pipe
        std::vector<int> fds(static_cast<size_t>(last - first + 1), -1);
        std::vector<pid_t> workers;
        int64_t next = first;
        while (next <= last || !workers.empty()) {
            while (next <= last && static_cast<int>(workers.size()) < pa.jobs) {
                int pipefd[2];
                if (pipe(pipefd) != 0) throw std::runtime_error("probe: pipe failed");
                const pid_t pid = fork();
                if (pid < 0) throw std::runtime_error("probe: fork failed");
                if (pid == 0) {
                    close(pipefd[0]);
                    const double v = probe_one(next);
                    (void)!write(pipefd[1], &v, sizeof(v));
                    close(pipefd[1]);
                    _exit(0);
                }
                close(pipefd[1]);
                fds[static_cast<size_t>(next - first)] = pipefd[0];
                workers.push_back(pid);
                next += 1;
            }
            int status = 0;
            const pid_t done = wait(&status);
            std::erase(workers, done);
        }
        for (int64_t l = first; l <= last; ++l) {
            double v = 0.0;
            const int fd = fds[static_cast<size_t>(l - first)];
            if (read(fd, &v, sizeof(v)) != static_cast<ssize_t>(sizeof(v)))
                throw std::runtime_error("probe: worker for layer " + std::to_string(l) +
                                         " returned no result");
            close(fd);
            ppls[static_cast<size_t>(l - first)] = v;
        }
    }

    std::vector<SensitivityRow> rows;
    for (int64_t l = first; l <= last; ++l) {
        SensitivityRow row;
        row.layer = l;
        row.ppl = ppls[static_cast<size_t>(l - first)];
        row.fp_reference = fp_ref;
        row.method = pa.method;
        row.weight_bits = cfg.weight_bits;
        row.act_bits = cfg.act_bits;
        row.seed = cfg.seed;
        rows.push_back(row);
        std::cout << pa.mode << " l=" << l << " ppl=" << row.ppl << " (fp " << fp_ref << ")\n";
    }

    const std::string csv = pa.out_csv.empty()
                                ? (pa.mode == "single" ? "sensitivity_single.csv"
                                                       : "sensitivity_prefix.csv")
                                : pa.out_csv;
    write_sensitivity_csv(csv, pa.mode, rows);
    if (pa.emit_gnuplot)
        write_gnuplot_script("sensitivity.gnuplot", "sensitivity_single.csv",
                             "sensitivity_prefix.csv");
    json cfgj = quantize_args_json(pa.q, "probe");
    cfgj["mode"] = pa.mode;
    cfgj["method"] = pa.method;
    cfgj["max_tokens"] = pa.max_tokens;
    cfgj["fp_reference"] = fp_ref;
    write_run_manifest(dir_of(csv), "probe", cfgj);
    std::cout << "wrote " << csv << "\n";
    return exit_ok;
}

int cmd_dump_schedule(int64_t L, int64_t ls, int64_t ld, int64_t s, int64_t i, double gamma,
                      bool as_json) {
    ScheduleConfig sc;
    sc.layers = L;
    sc.shallow = ls;
    sc.deep = ld;
    sc.window = s;
    sc.stride = i;
    sc.gamma = gamma;
    const WindowSchedule sched = generate_schedule(sc);
    const ValidationReport rep = validate_schedule(sched, sc);
    if (!rep.all_passed()) throw std::runtime_error("dump-schedule: generated schedule invalid");
    std::cout << (as_json ? schedule_to_json(sched) + "\n" : schedule_to_text(sched));
    return exit_ok;
}

struct AblateArgs {
    QuantizeArgs q;
    std::string out_dir = ".";
    int64_t max_tokens = 8192;
    int jobs = 1;
};

struct AblateCell {
    std::string name;
    bool pesw = false, pcsw = false;
    double gamma = 1.0;
    double ppl = 0.0;
};

int cmd_ablate(const CLI::App* cmd, AblateArgs& aa) {
    merge_quantize_config(cmd, aa.q);
    const CalibConfig cfg = to_calib_config(aa.q);
    cfg.validate();
    LoadedSubject subject = load_subject(aa.q, true);
    const int64_t L = subject.model.config.n_layers;
    std::span<const int> test = subject.stream.test();

    std::vector<AblateCell> grid = {
        {"baseline", false, false, 1.0, 0.0},
        {"pesw", true, false, 1.0, 0.0},
        {"pcsw", false, true, 1.0, 0.0},
        {"pesw+pcsw", true, true, 1.0, 0.0},
        {"pesw+pcsw+intra", true, true, aa.q.gamma, 0.0},
    };

    auto run_cell = [&](AblateCell& cell) {
        ScheduleConfig sc;
        sc.layers = L;
        sc.shallow = cell.pesw ? aa.q.ls : 1;
        sc.deep = cell.pcsw ? aa.q.ld : 1;
        sc.window = aa.q.s;
        sc.stride = aa.q.i;
        sc.gamma = cell.gamma;
        sc.use_pesw = cell.pesw;
        sc.use_pcsw = cell.pcsw;
        const WindowSchedule sched = generate_schedule(sc);
        PipelineResult res = run_pipeline(subject.model, sched, subject.calib, cfg);
        write_loss_log_csv(aa.out_dir + "/ablate_loss_" + cell.name + ".csv", res.loss_log);
        cell.ppl = perplexity(res.artifact, test, aa.max_tokens);
        std::cout << "cell " << cell.name << " ppl " << cell.ppl << "\n";
    };

    if (aa.jobs <= 1) {
        for (AblateCell& cell : grid) run_cell(cell);
    } else {
        std::vector<int> fds(grid.size(), -1);
        std::vector<pid_t> workers;
        std::vector<size_t> owner(grid.size());
        size_t next = 0;
        while (next < grid.size() || !workers.empty()) {
            while (next < grid.size() && static_cast<int>(workers.size()) < aa.jobs) {
                int pipefd[2];
                if (pipe(pipefd) != 0) throw std::runtime_error("ablate: pipe failed");
                const pid_t pid = fork();
                if (pid < 0) throw std::runtime_error("ablate: fork failed");
                if (pid == 0) {
                    close(pipefd[0]);
                    run_cell(grid[next]);
                    (void)!write(pipefd[1], &grid[next].ppl, sizeof(double));
                    close(pipefd[1]);
                    _exit(0);
                }
                close(pipefd[1]);
                fds[next] = pipefd[0];
                workers.push_back(pid);
                next += 1;
            }
            int status = 0;
            const pid_t done = wait(&status);
            std::erase(workers, done);
        }
        for (size_t c = 0; c < grid.size(); ++c) {
            if (read(fds[c], &grid[c].ppl, sizeof(double)) != static_cast<ssize_t>(sizeof(double)))
                throw std::runtime_error("ablate: worker returned no result");
            close(fds[c]);
        }
    }

    // markdown + csv table
    std::ofstream md(aa.out_dir + "/ablation.md", std::ios::trunc);
    std::ofstream csv(aa.out_dir + "/ablation.csv", std::ios::trunc);
    md << "| variant | PESW | PCSW | intra | perplexity |\n";
    md << "|---|---|---|---|---|\n";
    csv << "variant,pesw,pcsw,gamma,perplexity\n";
    double best = grid[0].ppl;
    std::string best_name = grid[0].name;
    for (const AblateCell& c : grid) {
        md << "| " << c.name << " | " << (c.pesw ? "x" : " ") << " | " << (c.pcsw ? "x" : " ")
           << " | " << (c.gamma < 1.0 ? "x" : " ") << " | " << c.ppl << " |\n";
        csv << c.name << "," << c.pesw << "," << c.pcsw << "," << c.gamma << "," << c.ppl << "\n";
        if (c.ppl < best) {
            best = c.ppl;
            best_name = c.name;
        }
    }
    const bool full_is_best = best_name == "pesw+pcsw+intra";
    md << "\nbest cell: " << best_name << (full_is_best ? "" : "  (flag: full design not minimal)")
       << "\n";
    std::cout << "best cell: " << best_name << "\n";
    if (!full_is_best)
        std::cout << "flag: full design is not the grid minimum on this seed (see loss logs)\n";

    json cfgj = quantize_args_json(aa.q, "ablate");
    cfgj["max_tokens"] = aa.max_tokens;
    cfgj["best_cell"] = best_name;
    write_run_manifest(aa.out_dir, "ablate", cfgj);
    return exit_ok;
}

int cmd_storage(const std::string& artifact_path) {
    if (artifact_path.empty()) throw ConfigError("config: --artifact is required");
    const QuantizedModel qm = load_artifact(artifact_path);
    const StorageReport rep = storage_report(qm);
    std::cout << storage_report_text(rep);
    return exit_ok;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"SliderQuant: adaptive sliding-window post-training quantization on a "
                 "desk-scale transformer LM"};
    app.require_subcommand(1);

    // pretrain
    std::string pt_config, pt_corpus, pt_out;
    int64_t pt_layers = 12, pt_d = 128, pt_heads = 4, pt_ff = 344, pt_seq = 128;
    int64_t pt_steps = 3000, pt_batch = 4, pt_seqlen = 128;
    double pt_lr = 1e-3;
    uint64_t pt_seed = 0;
    CLI::App* pt = app.add_subcommand("pretrain", "train the tiny LM from scratch");
    pt->add_option("--config", pt_config, "JSON config file (flags override)");
    pt->add_option("--corpus", pt_corpus, "corpus text file");
    pt->add_option("--out", pt_out, "checkpoint output path");
    pt->add_option("--layers", pt_layers, "decoder blocks")->default_val(12);
    pt->add_option("--d-model", pt_d, "model width")->default_val(128);
    pt->add_option("--heads", pt_heads, "attention heads")->default_val(4);
    pt->add_option("--d-ff", pt_ff, "MLP width")->default_val(344);
    pt->add_option("--max-seq", pt_seq, "context length")->default_val(128);
    pt->add_option("--steps", pt_steps, "training steps")->default_val(3000);
    pt->add_option("--batch", pt_batch, "sequences per step")->default_val(4);
    pt->add_option("--seq-len", pt_seqlen, "training sequence length")->default_val(128);
    pt->add_option("--lr", pt_lr, "peak learning rate (linear decay)")->default_val(1e-3);
    pt->add_option("--seed", pt_seed, "seed")->default_val(0);

    // quantize
    QuantizeArgs qa;
    CLI::App* qz = app.add_subcommand("quantize", "sliding-window calibration quantization");
    add_quantize_options(qz, qa, true);

    // baseline
    QuantizeArgs ba;
    std::string baseline_kind = "rtn";
    CLI::App* bl = app.add_subcommand("baseline", "baseline quantization strategies");
    bl->add_option("--kind", baseline_kind, "rtn | layerwise | blockwise | fixed")
        ->default_val("rtn");
    add_quantize_options(bl, ba, true);

    // eval
    std::string ev_artifact, ev_tokens, ev_csv;
    int64_t ev_max_tokens = -1;
    CLI::App* ev = app.add_subcommand("eval", "perplexity of a packed artifact");
    ev->add_option("--artifact", ev_artifact, "packed artifact path");
    ev->add_option("--tokens", ev_tokens, "text file; held-out tail is evaluated");
    ev->add_option("--csv", ev_csv, "also write a CSV row");
    ev->add_option("--max-tokens", ev_max_tokens, "cap evaluated tokens (-1 = all)")
        ->default_val(-1);

    // probe
    ProbeArgs pa;
    CLI::App* pr = app.add_subcommand("probe", "layer sensitivity probes");
    pr->add_option("--mode", pa.mode, "single | prefix")->default_val("single");
    pr->add_option("--method", pa.method, "rtn | calibrated")->default_val("rtn");
    pr->add_option("--out-csv", pa.out_csv, "output CSV path");
    pr->add_option("--max-tokens", pa.max_tokens, "cap evaluated tokens")->default_val(8192);
    pr->add_option("--jobs", pa.jobs, "parallel worker processes")->default_val(1);
    pr->add_flag("--emit-gnuplot", pa.emit_gnuplot, "write a ready gnuplot script");
    add_quantize_options(pr, pa.q, true);

    // dump-schedule
    int64_t ds_L = 12, ds_ls = 4, ds_ld = 4, ds_s = 2, ds_i = 1;
    double ds_gamma = 0.5;
    bool ds_json = false;
    CLI::App* ds = app.add_subcommand("dump-schedule", "print the sliding-window schedule");
    ds->add_option("--L", ds_L, "total layers")->default_val(12);
    ds->add_option("--ls", ds_ls, "shallow layers L_s")->default_val(4);
    ds->add_option("--ld", ds_ld, "deep layers L_d")->default_val(4);
    ds->add_option("--s", ds_s, "fixed window size")->default_val(2);
    ds->add_option("--i", ds_i, "window stride")->default_val(1);
    ds->add_option("--gamma", ds_gamma, "intra-layer stage ratio")->default_val(0.5);
    ds->add_flag("--json", ds_json, "JSON output");

    // ablate
    AblateArgs aa;
    CLI::App* ab = app.add_subcommand("ablate", "run the schedule-design ablation grid");
    ab->add_option("--out-dir", aa.out_dir, "directory for tables and loss logs")
        ->default_val(".");
    ab->add_option("--max-tokens", aa.max_tokens, "cap evaluated tokens")->default_val(8192);
    ab->add_option("--jobs", aa.jobs, "parallel worker processes")->default_val(1);
    add_quantize_options(ab, aa.q, true);

    // storage
    std::string st_artifact;
    CLI::App* st = app.add_subcommand("storage", "packed vs fp32 storage report");
    st->add_option("--artifact", st_artifact, "packed artifact path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_ok : exit_usage;
    }

    try {
        if (pt->parsed())
            return cmd_pretrain(pt_config, pt, pt_corpus, pt_out, pt_layers, pt_d, pt_heads,
                                pt_ff, pt_seq, pt_steps, pt_batch, pt_seqlen, pt_lr, pt_seed);
        if (qz->parsed()) return cmd_quantize(qz, qa);
        if (bl->parsed()) return cmd_baseline(bl, ba, baseline_kind);
        if (ev->parsed()) return cmd_eval(ev_artifact, ev_tokens, ev_csv, ev_max_tokens);
        if (pr->parsed()) return cmd_probe(pr, pa);
        if (ds->parsed())
            return cmd_dump_schedule(ds_L, ds_ls, ds_ld, ds_s, ds_i, ds_gamma, ds_json);
        if (ab->parsed()) return cmd_ablate(ab, aa);
        if (st->parsed()) return cmd_storage(st_artifact);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return exit_usage;
    } catch (const PackError& e) {
        std::cerr << "artifact error: " << e.what() << "\n";
        return exit_io;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_runtime;
    }
    return exit_usage;
}

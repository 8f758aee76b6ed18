#pragma once

#include <chrono>
#include <filesystem>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "eval.hpp"
#include "pfa.hpp"

namespace sda {

using njson = nlohmann::ordered_json;

enum class Method { SDA, SFT, DT };

inline std::string method_name(Method m) {
    switch (m) {
        case Method::SDA: return "sda";
        case Method::SFT: return "sft";
        case Method::DT: return "dt";
    }
    throw std::logic_error("method_name: bad enum");
}

inline Method parse_method(const std::string& s) {
    if (s == "sda") return Method::SDA;
    if (s == "sft") return Method::SFT;
    if (s == "dt") return Method::DT;
    throw std::invalid_argument("unknown method '" + s + "' (expected sda, sft or dt)");
}

// Everything a benchmark run depends on. Sub-seeds for data, batching and
// initialization all derive from the single top-level seed.
struct BenchmarkConfig {
    uint64_t seed = 1;
    Method method = Method::SDA;
    int k_ids = 32;
    double test_id_fraction = 0.5;
    bool dump_features = false;
    ModelConfig model;
    PretrainConfig pretrain;
    PfaConfig adapt;
    double sft_lr = 0.01;
    EvalConfig eval;
    std::vector<DomainSpec> stream;

    static BenchmarkConfig defaults() {
        BenchmarkConfig c;
        c.adapt.tau = 8.0;
        c.adapt.feat_lr = 0.03;
        c.adapt.feat_epochs = 30;
        c.sft_lr = c.adapt.feat_lr;  // both methods fine-tune at the same rate
        DomainSpec base;
        base.domain = 1;
        base.id_count = 128;
        base.cameras = 3;
        base.samples_per_id_per_camera = 4;
        base.input_dim = c.model.input_dim;
        base.identity_cluster_spread = 0.5;
        base.domain_shift_scale = 0.0;
        base.seed = 1;
        c.stream.push_back(base);
        // target domains are deliberately lean (two samples per id per
        // camera) and noisy so that few-shot supervision can overfit
        const double shifts[] = {0.55, 0.65, 0.75, 0.85};
        for (int t = 2; t <= 5; ++t) {
            DomainSpec d = base;
            d.domain = t;
            d.id_count = 150;
            d.samples_per_id_per_camera = 2;
            d.identity_cluster_spread = 0.8;
            d.domain_shift_scale = shifts[t - 2];
            d.seed = t;
            c.stream.push_back(d);
        }
        return c;
    }

    // Collects every violation before throwing, so a bad config file is
    // diagnosed in one pass.
    void validate() const {
        std::vector<std::string> problems;
        auto need = [&](bool ok, const std::string& msg) {
            if (!ok) problems.push_back(msg);
        };
        need(stream.size() >= 2, "stream: need at least two domains (one base, one target)");
        need(k_ids >= 1, "k_ids: must be >= 1");
        need(test_id_fraction > 0.0 && test_id_fraction < 1.0, "test_id_fraction: must lie in (0, 1)");
        need(pretrain.epochs >= 1, "pretrain.epochs: must be >= 1");
        need(pretrain.batch_p >= 2, "pretrain.batch_p: need >= 2 identities per batch");
        need(pretrain.batch_k >= 2, "pretrain.batch_k: need >= 2 instances per identity");
        need(pretrain.base_lr >= 0.0, "pretrain.base_lr: must be >= 0");
        need(pretrain.warmup_epochs >= 0, "pretrain.warmup_epochs: must be >= 0");
        need(pretrain.momentum >= 0.0, "pretrain.momentum: must be >= 0");
        need(pretrain.weight_decay >= 0.0, "pretrain.weight_decay: must be >= 0");
        need(pretrain.meta.lr_inner >= 0.0, "pretrain.lr_inner: must be >= 0");
        need(pretrain.meta.lr_outer >= 0.0, "pretrain.lr_outer: must be >= 0");
        need(pretrain.loss.margin >= 0.0, "loss.margin: must be >= 0");
        need(pretrain.loss.label_smooth >= 0.0 && pretrain.loss.label_smooth < 1.0,
             "loss.label_smooth: must lie in [0, 1)");
        need(sft_lr > 0.0, "sft_lr: must be > 0");
        need(eval.max_rank >= 10, "eval.max_rank: results tables report up to rank 10");
        try {
            model.validate();
        } catch (const std::exception& e) {
            problems.emplace_back(e.what());
        }
        try {
            adapt.validate();
        } catch (const std::exception& e) {
            problems.emplace_back(e.what());
        }
        std::set<int> domains;
        for (size_t i = 0; i < stream.size(); ++i) {
            const DomainSpec& d = stream[i];
            try {
                d.validate();
            } catch (const std::exception& e) {
                problems.push_back("stream[" + std::to_string(i) + "]: " + e.what());
            }
            if (!domains.insert(d.domain).second)
                problems.push_back("stream[" + std::to_string(i) + "]: duplicate domain id");
            if (d.input_dim != model.input_dim)
                problems.push_back("stream[" + std::to_string(i) + "]: input_dim differs from model.input_dim");
            if (i > 0) {
                const int test_ids = std::clamp(
                    static_cast<int>(std::lround(test_id_fraction * d.id_count)), 1, d.id_count - 1);
                if (k_ids > d.id_count - test_ids)
                    problems.push_back("stream[" + std::to_string(i) + "]: k_ids exceeds the " +
                                       std::to_string(d.id_count - test_ids) + " train identities");
            }
        }
        if (!problems.empty()) {
            std::string joined = "invalid benchmark config:";
            for (const std::string& p : problems) joined += "\n  - " + p;
            throw std::invalid_argument(joined);
        }
    }
};

// ---- config JSON (round-trips exactly; nested seeds are derived, not stored) ----

inline njson config_to_json(const BenchmarkConfig& c) {
    njson j;
    j["seed"] = c.seed;
    j["method"] = method_name(c.method);
    j["k_ids"] = c.k_ids;
    j["test_id_fraction"] = c.test_id_fraction;
    j["dump_features"] = c.dump_features;
    j["model"] = {{"input_dim", c.model.input_dim},
                  {"backbone_hidden", c.model.backbone_hidden},
                  {"feature_dim", c.model.feature_dim},
                  {"latent_dim", c.model.latent_dim},
                  {"coder_hidden", c.model.coder_hidden}};
    j["loss"] = {{"margin", c.pretrain.loss.margin}, {"label_smooth", c.pretrain.loss.label_smooth}};
    j["pretrain"] = {{"epochs", c.pretrain.epochs},
                     {"batch_p", c.pretrain.batch_p},
                     {"batch_k", c.pretrain.batch_k},
                     {"base_lr", c.pretrain.base_lr},
                     {"warmup_epochs", c.pretrain.warmup_epochs},
                     {"momentum", c.pretrain.momentum},
                     {"weight_decay", c.pretrain.weight_decay},
                     {"meta_enabled", c.pretrain.meta_enabled},
                     {"lr_inner", c.pretrain.meta.lr_inner},
                     {"lr_outer", c.pretrain.meta.lr_outer},
                     {"outer_scope", c.pretrain.meta.outer_scope == OuterScope::All ? "all" : "encoder_only"},
                     {"split_mode", c.pretrain.meta.split_mode == MetaSplitMode::ByCamera ? "camera" : "domain"}};
    j["adapt"] = {{"proto_lr", c.adapt.proto_lr},
                  {"proto_budget", c.adapt.proto_budget},
                  {"proto_tol", c.adapt.proto_tol},
                  {"feat_lr", c.adapt.feat_lr},
                  {"feat_epochs", c.adapt.feat_epochs},
                  {"batch_p", c.adapt.batch_p},
                  {"batch_k", c.adapt.batch_k},
                  {"tau", c.adapt.tau},
                  {"enc_lr", c.adapt.enc_lr},
                  {"enc_steps", c.adapt.enc_steps},
                  {"order", c.adapt.order == AdaptOrder::PrototypesThenEncoder  ? "prototypes_then_encoder"
                            : c.adapt.order == AdaptOrder::EncoderThenPrototypes ? "encoder_then_prototypes"
                                                                                 : "alternating"}};
    j["sft_lr"] = c.sft_lr;
    j["eval"] = {{"max_rank", c.eval.max_rank},
                 {"l2_normalize", c.eval.l2_normalize},
                 {"feature_mode", c.eval.feature_mode == FeatureMode::Refined ? "refined" : "backbone"}};
    j["stream"] = njson::array();
    for (const DomainSpec& d : c.stream)
        j["stream"].push_back({{"domain", d.domain},
                               {"id_count", d.id_count},
                               {"cameras", d.cameras},
                               {"samples_per_id_per_camera", d.samples_per_id_per_camera},
                               {"input_dim", d.input_dim},
                               {"identity_cluster_spread", d.identity_cluster_spread},
                               {"camera_shift_scale", d.camera_shift_scale},
                               {"domain_shift_scale", d.domain_shift_scale},
                               {"id_base", d.id_base},
                               {"seed", d.seed}});
    return j;
}

// Absent fields keep their defaults; present fields override. An empty
// object therefore parses to the full default config.
inline BenchmarkConfig config_from_json(const njson& j) {
    BenchmarkConfig c = BenchmarkConfig::defaults();
    try {
        c.seed = j.value("seed", c.seed);
        if (j.contains("method")) c.method = parse_method(j.at("method").get<std::string>());
        c.k_ids = j.value("k_ids", c.k_ids);
        c.test_id_fraction = j.value("test_id_fraction", c.test_id_fraction);
        c.dump_features = j.value("dump_features", c.dump_features);
        if (j.contains("model")) {
            const njson& m = j.at("model");
            c.model.input_dim = m.value("input_dim", c.model.input_dim);
            c.model.backbone_hidden = m.value("backbone_hidden", c.model.backbone_hidden);
            c.model.feature_dim = m.value("feature_dim", c.model.feature_dim);
            c.model.latent_dim = m.value("latent_dim", c.model.latent_dim);
            c.model.coder_hidden = m.value("coder_hidden", c.model.coder_hidden);
        }
        if (j.contains("loss")) {
            const njson& l = j.at("loss");
            c.pretrain.loss.margin = l.value("margin", c.pretrain.loss.margin);
            c.pretrain.loss.label_smooth = l.value("label_smooth", c.pretrain.loss.label_smooth);
        }
        if (j.contains("pretrain")) {
            const njson& p = j.at("pretrain");
            c.pretrain.epochs = p.value("epochs", c.pretrain.epochs);
            c.pretrain.batch_p = p.value("batch_p", c.pretrain.batch_p);
            c.pretrain.batch_k = p.value("batch_k", c.pretrain.batch_k);
            c.pretrain.base_lr = p.value("base_lr", c.pretrain.base_lr);
            c.pretrain.warmup_epochs = p.value("warmup_epochs", c.pretrain.warmup_epochs);
            c.pretrain.momentum = p.value("momentum", c.pretrain.momentum);
            c.pretrain.weight_decay = p.value("weight_decay", c.pretrain.weight_decay);
            c.pretrain.meta_enabled = p.value("meta_enabled", c.pretrain.meta_enabled);
            c.pretrain.meta.lr_inner = p.value("lr_inner", c.pretrain.meta.lr_inner);
            c.pretrain.meta.lr_outer = p.value("lr_outer", c.pretrain.meta.lr_outer);
            if (p.contains("outer_scope")) {
                const std::string scope = p.at("outer_scope").get<std::string>();
                if (scope != "all" && scope != "encoder_only")
                    throw std::invalid_argument("pretrain.outer_scope: expected 'all' or 'encoder_only'");
                c.pretrain.meta.outer_scope = scope == "all" ? OuterScope::All : OuterScope::EncoderOnly;
            }
            if (p.contains("split_mode")) {
                const std::string split = p.at("split_mode").get<std::string>();
                if (split != "camera" && split != "domain")
                    throw std::invalid_argument("pretrain.split_mode: expected 'camera' or 'domain'");
                c.pretrain.meta.split_mode = split == "camera" ? MetaSplitMode::ByCamera : MetaSplitMode::ByDomain;
            }
        }
        if (j.contains("adapt")) {
            const njson& a = j.at("adapt");
            c.adapt.proto_lr = a.value("proto_lr", c.adapt.proto_lr);
            c.adapt.proto_budget = a.value("proto_budget", c.adapt.proto_budget);
            c.adapt.proto_tol = a.value("proto_tol", c.adapt.proto_tol);
            c.adapt.feat_lr = a.value("feat_lr", c.adapt.feat_lr);
            c.adapt.feat_epochs = a.value("feat_epochs", c.adapt.feat_epochs);
            c.adapt.batch_p = a.value("batch_p", c.adapt.batch_p);
            c.adapt.batch_k = a.value("batch_k", c.adapt.batch_k);
            c.adapt.tau = a.value("tau", c.adapt.tau);
            c.adapt.enc_lr = a.value("enc_lr", c.adapt.enc_lr);
            c.adapt.enc_steps = a.value("enc_steps", c.adapt.enc_steps);
            if (a.contains("order")) {
                const std::string order = a.at("order").get<std::string>();
                if (order == "prototypes_then_encoder")
                    c.adapt.order = AdaptOrder::PrototypesThenEncoder;
                else if (order == "encoder_then_prototypes")
                    c.adapt.order = AdaptOrder::EncoderThenPrototypes;
                else if (order == "alternating")
                    c.adapt.order = AdaptOrder::Alternating;
                else
                    throw std::invalid_argument("adapt.order: unknown value '" + order + "'");
            }
        }
        c.sft_lr = j.value("sft_lr", c.sft_lr);
        if (j.contains("eval")) {
            const njson& e = j.at("eval");
            c.eval.max_rank = e.value("max_rank", c.eval.max_rank);
            c.eval.l2_normalize = e.value("l2_normalize", c.eval.l2_normalize);
            if (e.contains("feature_mode")) {
                const std::string fm = e.at("feature_mode").get<std::string>();
                if (fm != "refined" && fm != "backbone")
                    throw std::invalid_argument("eval.feature_mode: expected 'refined' or 'backbone'");
                c.eval.feature_mode = fm == "refined" ? FeatureMode::Refined : FeatureMode::Backbone;
            }
        }
        if (j.contains("stream")) {
            c.stream.clear();
            for (const njson& dj : j.at("stream")) {
                DomainSpec d;
                d.input_dim = c.model.input_dim;
                d.domain = dj.value("domain", d.domain);
                d.id_count = dj.value("id_count", d.id_count);
                d.cameras = dj.value("cameras", d.cameras);
                d.samples_per_id_per_camera = dj.value("samples_per_id_per_camera", d.samples_per_id_per_camera);
                d.input_dim = dj.value("input_dim", d.input_dim);
                d.identity_cluster_spread = dj.value("identity_cluster_spread", d.identity_cluster_spread);
                d.camera_shift_scale = dj.value("camera_shift_scale", d.camera_shift_scale);
                d.domain_shift_scale = dj.value("domain_shift_scale", d.domain_shift_scale);
                d.id_base = dj.value("id_base", d.id_base);
                d.seed = dj.value("seed", d.seed);
                c.stream.push_back(d);
            }
        }
    } catch (const njson::exception& e) {
        throw std::invalid_argument(std::string("config parse error: ") + e.what());
    }
    return c;
}

inline BenchmarkConfig load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config file: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    std::string text = buf.str();
    // an empty or whitespace-only file means "all defaults"
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) return BenchmarkConfig::defaults();
    njson j;
    try {
        j = njson::parse(text);
    } catch (const njson::exception& e) {
        throw std::invalid_argument("config is not valid JSON: " + std::string(e.what()));
    }
    return config_from_json(j);
}

inline std::string config_hash(const BenchmarkConfig& c) {
    const uint64_t h = fnv1a64(config_to_json(c).dump());
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

// ---- prototype bank persistence: checkpoint plus a text tag manifest ----

inline void save_bank(const std::string& path, const PrototypeBank& bank) {
    if (bank.current_count() != 0) throw std::logic_error("save_bank: retire the current block first");
    TensorMap t;
    t["bank/past"] = bank.past;
    save_checkpoint(path, t);
    std::ofstream ts(path + ".tags", std::ios::trunc);
    if (!ts) throw std::runtime_error("save_bank: cannot open tag manifest");
    for (const auto& [domain, identity] : bank.past_tags) ts << domain << ' ' << identity << '\n';
}

inline PrototypeBank load_bank(const std::string& path) {
    TensorMap t = load_checkpoint(path);
    PrototypeBank bank;
    bank.past = t.at("bank/past");
    bank.feature_dim = bank.past.cols;
    std::ifstream ts(path + ".tags");
    if (!ts) throw std::runtime_error("load_bank: missing tag manifest");
    int d = 0, id = 0;
    while (ts >> d >> id) bank.past_tags.emplace_back(d, id);
    if (static_cast<int>(bank.past_tags.size()) != bank.past.rows)
        throw std::runtime_error("load_bank: tag manifest does not match prototype rows");
    return bank;
}

// ---- sequential fine-tuning baseline ----

struct SftConfig {
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int batch_p = 18;
    int batch_k = 5;
    LossCfg loss;
    uint64_t seed = 1;
};

struct SftReport {
    long backbone_steps = 0;
    std::vector<double> loss_trace;
};

// Identity-loss fine-tuning on the few-shot set for exactly step_budget
// backbone updates; the classifier grows columns for the new identities.
inline SftReport sft_adapt(ModelBundle& m, const DomainDataset& few, long step_budget, const SftConfig& cfg) {
    if (step_budget < 1) throw std::invalid_argument("sft_adapt: step budget must be >= 1");
    std::vector<int> new_ids;
    for (int id : few.identity_list())
        if (!m.id_to_class.count(id)) new_ids.push_back(id);
    if (!new_ids.empty()) m.extend_classifier(new_ids, derive_seed(cfg.seed, "sft_classifier", few.domain));

    const int p_eff = std::min(cfg.batch_p, static_cast<int>(few.identity_list().size()));
    SftReport rep;
    for (long step = 0; rep.backbone_steps < step_budget; ++step) {
        auto batch = pk_batch(few, p_eff, cfg.batch_k, derive_seed(cfg.seed, "sft_batch", few.domain, step));
        m.zero_grad();
        Var f = backbone_forward(m, features_of(batch));
        IdLossResult idl =
            id_loss(classifier_logits(m, f), f, class_indices(m, labels_of(batch)), cfg.loss.margin,
                    cfg.loss.label_smooth);
        rep.loss_trace.push_back(idl.loss.value().item());
        idl.loss.backward();
        sgd_step(m.backbone, cfg.lr, cfg.momentum, cfg.weight_decay);
        sgd_step(m.classifier, cfg.lr, cfg.momentum, cfg.weight_decay);
        m.zero_grad();
        ++rep.backbone_steps;
    }
    return rep;
}

// The step budget the prototype-guided stage consumes on the same few-shot
// set; the fine-tuning baseline is granted exactly this many updates.
inline long stage2_step_budget(const DomainDataset& few, const PfaConfig& cfg) {
    const int p_eff = std::min(cfg.batch_p, static_cast<int>(few.identity_list().size()));
    const int batch = p_eff * cfg.batch_k;
    const int steps = std::max(1, static_cast<int>((few.samples.size() + batch - 1) / batch));
    return static_cast<long>(steps) * cfg.feat_epochs;
}

// ---- run record ----

struct DomainOutcome {
    int domain = 0;
    double mean_ap = 0.0;
    double rank1 = 0.0;
    double rank5 = 0.0;
    double rank10 = 0.0;
    int query_count = 0;
    int skipped_queries = 0;
};

inline DomainOutcome outcome_of(const EvalResult& r) {
    DomainOutcome o;
    o.domain = r.domain;
    o.mean_ap = r.mean_ap;
    o.rank1 = r.cmc.empty() ? 0.0 : r.cmc[0];
    o.rank5 = r.cmc.size() >= 5 ? r.cmc[4] : r.cmc.back();
    o.rank10 = r.cmc.size() >= 10 ? r.cmc[9] : r.cmc.back();
    o.query_count = r.query_count;
    o.skipped_queries = r.skipped_queries;
    return o;
}

struct RunRecord {
    std::string config_hash;
    std::string method;
    uint64_t seed = 0;
    std::vector<int> stream_domains;
    long pretrain_backbone_steps = 0;
    double pretrain_final_id_loss = 0.0;
    DomainOutcome initial_base;
    std::vector<DomainOutcome> adaptation;
    std::vector<double> base_map_history;
    double forgetting_drop = 0.0;
    double centroid_shift_first_adapt = 0.0;
    std::vector<long> backbone_steps_per_domain;
    std::vector<DomainOutcome> final_seen;
    double final_mean_ap = 0.0;
    double final_mean_rank1 = 0.0;
};

inline njson outcome_json(const DomainOutcome& o) {
    return njson{{"domain", o.domain},          {"mean_ap", o.mean_ap},
                 {"rank1", o.rank1},            {"rank5", o.rank5},
                 {"rank10", o.rank10},          {"query_count", o.query_count},
                 {"skipped_queries", o.skipped_queries}};
}

// Serialization is fully determined by the run's numbers; wall-clock data
// lives in a separate timing file so records can be compared bitwise.
inline std::string run_record_json(const RunRecord& r) {
    njson j;
    j["config_hash"] = r.config_hash;
    j["method"] = r.method;
    j["seed"] = r.seed;
    j["stream_domains"] = r.stream_domains;
    j["pretrain"] = {{"backbone_steps", r.pretrain_backbone_steps},
                     {"final_id_loss", r.pretrain_final_id_loss}};
    j["initial_base"] = outcome_json(r.initial_base);
    j["adaptation"] = njson::array();
    for (const DomainOutcome& o : r.adaptation) j["adaptation"].push_back(outcome_json(o));
    j["base_map_history"] = r.base_map_history;
    j["forgetting_drop"] = r.forgetting_drop;
    j["centroid_shift_first_adapt"] = r.centroid_shift_first_adapt;
    j["backbone_steps_per_domain"] = r.backbone_steps_per_domain;
    j["final_seen"] = njson::array();
    for (const DomainOutcome& o : r.final_seen) j["final_seen"].push_back(outcome_json(o));
    j["final_mean_ap"] = r.final_mean_ap;
    j["final_mean_rank1"] = r.final_mean_rank1;
    return j.dump(2) + "\n";
}

inline void write_results_table(const std::string& path,
                                const std::vector<std::pair<std::string, DomainOutcome>>& rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("write_results_table: cannot open " + path);
    os << "checkpoint\tdomain\tmean_ap\trank1\trank5\trank10\tquery_count\n";
    char buf[40];
    auto num = [&](double x) {
        std::snprintf(buf, sizeof buf, "%.6f", x);
        return std::string(buf);
    };
    for (const auto& [label, o] : rows)
        os << label << '\t' << o.domain << '\t' << num(o.mean_ap) << '\t' << num(o.rank1) << '\t' << num(o.rank5)
           << '\t' << num(o.rank10) << '\t' << o.query_count << '\n';
}

// ---- the benchmark protocol ----

namespace detail {
template <typename PathFn, typename TimeFn>
void run_benchmark_impl(const BenchmarkConfig& cfg, PathFn out_path, RunRecord& rec,
                        std::vector<std::pair<std::string, DomainOutcome>>& table, TimeFn note_time);
}

// Pretrain on the base domain, then walk the stream: adapt with the chosen
// method on a k-identity few-shot set, score the current domain immediately
// (adaptation quality) and the base domain again (forgetting), and finish
// with a sweep over every seen domain. All artifacts land in outdir.
inline RunRecord run_benchmark(const BenchmarkConfig& cfg, const std::string& outdir) {
    cfg.validate();
    std::filesystem::create_directories(outdir);
    auto out_path = [&](const std::string& name) { return (std::filesystem::path(outdir) / name).string(); };

    std::vector<std::pair<std::string, double>> timings;
    auto clock_now = [] { return std::chrono::steady_clock::now(); };
    auto phase_start = clock_now();
    auto note_time = [&](const std::string& phase) {
        auto now = clock_now();
        timings.emplace_back(phase, std::chrono::duration<double>(now - phase_start).count());
        phase_start = now;
    };

    RunRecord rec;
    rec.config_hash = config_hash(cfg);
    rec.method = method_name(cfg.method);
    rec.seed = cfg.seed;
    for (const DomainSpec& d : cfg.stream) rec.stream_domains.push_back(d.domain);
    std::vector<std::pair<std::string, DomainOutcome>> table;

    auto flush_outputs = [&] {
        std::ofstream os(out_path("run_record.json"), std::ios::trunc);
        if (!os) throw std::runtime_error("run_benchmark: cannot write run record");
        os << run_record_json(rec);
        write_results_table(out_path("results.tsv"), table);
        std::ofstream ts(out_path("timings.tsv"), std::ios::trunc);
        ts << "phase\tseconds\n";
        for (const auto& [phase, sec] : timings) ts << phase << '\t' << sec << '\n';
    };

    // a failure mid-run still persists whatever was measured, plus a marker
    try {
        detail::run_benchmark_impl(cfg, out_path, rec, table, note_time);
    } catch (const std::exception& e) {
        flush_outputs();
        std::ofstream(out_path("FAILED"), std::ios::trunc) << e.what() << '\n';
        throw;
    }
    flush_outputs();
    return rec;
}

namespace detail {

template <typename PathFn, typename TimeFn>
void run_benchmark_impl(const BenchmarkConfig& cfg, PathFn out_path, RunRecord& rec,
                        std::vector<std::pair<std::string, DomainOutcome>>& table, TimeFn note_time) {
    // data: generate, split identities, fix each domain's query/gallery
    std::vector<DomainDataset> train, test;
    std::vector<QueryGallery> galleries;
    for (const DomainSpec& spec : cfg.stream) {
        DomainSpec eff = spec;
        eff.seed = derive_seed(cfg.seed, "domain_data", spec.domain, spec.seed);
        DomainDataset full = generate_domain(eff);
        auto [tr, te] = split_identities(full, cfg.test_id_fraction, derive_seed(cfg.seed, "id_split", spec.domain));
        galleries.push_back(make_query_gallery(te, derive_seed(cfg.seed, "query_gallery", spec.domain)));
        train.push_back(std::move(tr));
        test.push_back(std::move(te));
    }
    note_time("data");

    ModelBundle model = ModelBundle::init(cfg.model, derive_seed(cfg.seed, "model_init"));
    PretrainConfig pre = cfg.pretrain;
    pre.seed = derive_seed(cfg.seed, "pretrain");
    PretrainReport pre_rep = pretrain_base(model, train[0], pre);
    rec.pretrain_backbone_steps = pre_rep.backbone_steps;
    rec.pretrain_final_id_loss = pre_rep.id_loss_per_epoch.back();
    note_time("pretrain");

    EvalResult initial = evaluate_retrieval(model, galleries[0], cfg.eval);
    rec.initial_base = outcome_of(initial);
    rec.base_map_history.push_back(initial.mean_ap);
    table.emplace_back("pretrain", rec.initial_base);
    save_model(out_path("checkpoint_pretrain.bin"), model);
    note_time("initial_eval");

    ModelBundle at_pretrain = model.clone();
    PrototypeBank bank;
    if (cfg.method == Method::SDA) seed_bank_from_base(model, train[0], bank);

    for (size_t t = 1; t < cfg.stream.size(); ++t) {
        const int domain = cfg.stream[t].domain;
        DomainDataset few = sample_few_shot(train[t], cfg.k_ids, derive_seed(cfg.seed, "few_shot", domain));

        long steps = 0;
        switch (cfg.method) {
            case Method::SDA: {
                PfaConfig ad = cfg.adapt;
                ad.seed = derive_seed(cfg.seed, "adapt", domain);
                AdaptReport rep = adapt_domain(model, bank, few, ad);
                steps = rep.backbone_steps;
                break;
            }
            case Method::SFT: {
                SftConfig sc;
                sc.lr = cfg.sft_lr;
                sc.momentum = cfg.pretrain.momentum;
                sc.weight_decay = cfg.pretrain.weight_decay;
                sc.batch_p = cfg.adapt.batch_p;
                sc.batch_k = cfg.adapt.batch_k;
                sc.loss = cfg.pretrain.loss;
                sc.seed = derive_seed(cfg.seed, "adapt", domain);
                SftReport rep = sft_adapt(model, few, stage2_step_budget(few, cfg.adapt), sc);
                steps = rep.backbone_steps;
                break;
            }
            case Method::DT:
                // no adaptation; the post-pretrain clone guards bitwise
                // equality after the final sweep
                steps = 0;
                break;
        }
        rec.backbone_steps_per_domain.push_back(steps);
        note_time("adapt_d" + std::to_string(domain));

        EvalResult adapt_eval = evaluate_retrieval(model, galleries[t], cfg.eval);
        rec.adaptation.push_back(outcome_of(adapt_eval));
        table.emplace_back("adapt_d" + std::to_string(domain), rec.adaptation.back());

        EvalResult base_again = evaluate_retrieval(model, galleries[0], cfg.eval);
        rec.base_map_history.push_back(base_again.mean_ap);

        if (t == 1)
            rec.centroid_shift_first_adapt = centroid_shift(at_pretrain, model, test[0].samples, cfg.eval);
        save_model(out_path("checkpoint_adapt_d" + std::to_string(domain) + ".bin"), model);
        note_time("eval_d" + std::to_string(domain));
    }
    rec.forgetting_drop = rec.base_map_history.front() - rec.base_map_history.back();
    if (cfg.method == Method::DT && !snapshots_equal(snapshot(model), snapshot(at_pretrain)))
        throw std::logic_error("run_benchmark: direct transfer moved parameters");

    SeenDomainsResult final_sweep = evaluate_seen_domains(model, galleries, cfg.eval);
    for (size_t t = 0; t < final_sweep.per_domain.size(); ++t) {
        rec.final_seen.push_back(outcome_of(final_sweep.per_domain[t]));
        table.emplace_back("final", rec.final_seen.back());
    }
    rec.final_mean_ap = final_sweep.mean_ap;
    rec.final_mean_rank1 = final_sweep.mean_rank1;
    save_model(out_path("checkpoint_final.bin"), model);
    if (cfg.method == Method::SDA) save_bank(out_path("bank_final.bin"), bank);
    note_time("final_eval");

    if (cfg.dump_features) {
        // Test datasets plus final features: enough to re-score any
        // checkpoint offline through the eval entry point.
        for (size_t t = 0; t < test.size(); ++t) {
            const std::string dom = std::to_string(cfg.stream[t].domain);
            dump_dataset(out_path("test_d" + dom + ".txt"), test[t]);
            Tensor f = extract_features(model, test[t].samples, cfg.eval);
            dump_features(out_path("features_final_d" + dom + ".txt"), test[t].samples, f);
        }
        note_time("dump_features");
    }
}

}  // namespace detail
}  // namespace sda

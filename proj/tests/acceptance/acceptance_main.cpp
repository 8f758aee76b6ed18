// Acceptance suite. Prints exactly one PASS/FAIL line per criterion on
// stdout and exits with the number of failures. Progress goes to stderr;
// the trend criteria run the full default benchmark across five seeds and
// three methods, so expect a couple of minutes of wall time.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sda/benchmark.hpp"
#include "sda/gradcheck.hpp"
#include "support/retrieval_oracle.hpp"

namespace fs = std::filesystem;
using namespace sda;

namespace {

int g_failures = 0;

std::string strf(const char* fmt, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, fmt);
    std::vsnprintf(buf, sizeof buf, fmt, ap);
    va_end(ap);
    return buf;
}

void report(int n, bool ok, const std::string& detail) {
    std::printf("AC-%d %s  %s\n", n, ok ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    if (!ok) ++g_failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Bitwise equality of one parameter group inside a full-model snapshot.
bool group_equal(const TensorMap& a, const TensorMap& b, const std::string& group) {
    const std::string prefix = group + "/";
    for (const auto& [k, t] : a) {
        if (k.rfind(prefix, 0) != 0) continue;
        auto it = b.find(k);
        if (it == b.end() || !bits_equal(t, it->second)) return false;
    }
    return true;
}

std::string slurp_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + p.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// ---- AC-1: every training loss matches finite differences ----

void run_ac1() {
    const auto t0 = std::chrono::steady_clock::now();

    ModelConfig mc;
    mc.input_dim = 6;
    mc.backbone_hidden = 8;
    mc.feature_dim = 6;
    mc.latent_dim = 3;
    mc.coder_hidden = 8;
    ModelBundle m = ModelBundle::init(mc, 11);
    m.extend_classifier({1, 2, 3}, 12);

    const Tensor x = oracle::randn(6, 6, 13);
    const std::vector<int> cls{0, 1, 2, 0, 1, 2};
    const double margin = 0.3, smooth = 0.1, eps = 1e-5;

    double worst = 0.0;
    std::string worst_name = "none";
    auto track = [&](const char* name, const GradCheckReport& r) {
        std::fprintf(stderr, "  [grad] %-18s max rel err %.3e\n", name, r.max_rel_err);
        if (r.max_rel_err > worst) {
            worst = r.max_rel_err;
            worst_name = name;
        }
    };

    track("cross-entropy", grad_check([&] {
        return cross_entropy_smoothed(classifier_logits(m, backbone_forward(m, x)), cls, smooth);
    }, {&m.backbone, &m.classifier}, eps));

    track("triplet", grad_check([&] {
        return triplet_batch_hard(backbone_forward(m, x), cls, margin).loss;
    }, {&m.backbone}, eps));

    track("identity", grad_check([&] {
        Var f = backbone_forward(m, x);
        return id_loss(classifier_logits(m, f), f, cls, margin, smooth).loss;
    }, {&m.backbone, &m.classifier}, eps));

    track("prior distance", grad_check([&] {
        return w2_to_prior(encode_distribution(m, backbone_forward(m, x)));
    }, {&m.backbone, &m.dist_encoder}, eps));

    // The sampling rng is rebuilt per call, so every evaluation sees the
    // same latent draw and the loss is a deterministic function of the
    // parameters; that is what makes finite differences meaningful here.
    track("reconstruction", grad_check([&] {
        Var f = backbone_forward(m, x);
        LatentVars lv = encode_distribution(m, f);
        auto rng = make_rng(17);
        return reconstruction_loss(f, decode_latent(m, sample_latent(lv, rng)));
    }, {&m.backbone, &m.dist_encoder, &m.decoder}, eps));

    track("refined identity", grad_check([&] {
        Var f = backbone_forward(m, x);
        LatentVars lv = encode_distribution(m, f);
        auto rng = make_rng(19);
        RefineOut r = refine_features(m, f, decode_latent(m, sample_latent(lv, rng)));
        return id_loss(classifier_logits(m, r.features), r.features, cls, margin, smooth).loss;
    }, {&m.backbone, &m.classifier, &m.dist_encoder, &m.decoder, &m.refine}, eps));

    LossCfg lcfg;
    lcfg.margin = margin;
    lcfg.label_smooth = smooth;
    const Tensor feat_const = backbone_forward(m, x).value();
    track("alignment total", grad_check([&] {
        auto rng = make_rng(23);
        return meta_objective(m, feat_const, cls, lcfg, rng).total;
    }, {&m.dist_encoder, &m.decoder, &m.refine, &m.classifier}, eps));

    // Anchor loss: gradients must reach both the features and the current
    // prototype rows. Var copies share the leaf node, so an aliased Param
    // lets the checker perturb the bank's actual current block.
    PrototypeBank bank;
    bank.feature_dim = 4;
    bank.past = oracle::randn(3, 4, 29);
    bank.past_tags = {{1, 1}, {1, 2}, {1, 3}};
    bank.set_current(oracle::randn(2, 4, 31), {{2, 21}, {2, 22}});
    ParamSet anchor_in("anchor");
    anchor_in.add("f", oracle::randn(5, 4, 37));
    Param alias;
    alias.value = bank.current.value;
    alias.momentum = Tensor(bank.current_count(), 4);
    anchor_in.items.emplace("protos", std::move(alias));
    const std::vector<int> ids{21, 22, 21, 22, 21};
    track("prototype anchor", grad_check([&] {
        return prototype_anchor_loss(anchor_in.at("f").value, ids, bank, 2.0);
    }, {&anchor_in}, eps));

    const double secs = seconds_since(t0);
    report(1, worst < 1e-4 && secs < 30.0,
           strf("eight loss forms vs finite differences: worst rel err %.2e (%s) in %.1fs",
                worst, worst_name.c_str(), secs));
}

// ---- AC-2: transport math against an independent numeric oracle ----

// Normal quantile: Acklam's rational approximation polished with one Halley
// step of Phi(x) - p. Accurate to near machine precision; shares nothing
// with the library code under test.
double inv_norm_cdf(double p) {
    static const double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                -2.759285104469687e+02, 1.383577518672690e+02,
                                -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                -1.556989798598866e+02, 6.680131188771972e+01,
                                -1.328068155288572e+01};
    static const double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                -2.400758277161838e+00, -2.549732539343734e+00,
                                4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                                2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425;

    double x;
    if (p < plow) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - plow) {
        const double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
    const double u = e * std::sqrt(2.0 * M_PI) * std::exp(x * x / 2.0);
    return x - u / (1.0 + x * u / 2.0);
}

void run_ac2() {
    // Quantile coupling: for 1-D Gaussians the transport map is monotone,
    // so W2^2 is the average squared quantile gap. Midpoint quadrature over
    // M points carries a tail truncation error far below the tolerance.
    const int M = 4000000;
    std::vector<double> q(M);
    for (int i = 0; i < M; ++i) q[i] = inv_norm_cdf((i + 0.5) / static_cast<double>(M));

    auto rng = make_rng(2024);
    std::uniform_real_distribution<double> um(-2.0, 2.0), us(0.3, 2.5);
    double worst_gap = 0.0;
    for (int t = 0; t < 100; ++t) {
        const double mu = um(rng), sd = us(rng);
        double acc = 0.0;
        for (int i = 0; i < M; ++i) {
            const double diff = mu + (sd - 1.0) * q[i];
            acc += diff * diff;
        }
        const double numeric = std::sqrt(acc / M);

        Tensor mt(1, 1), st(1, 1);
        mt.at(0, 0) = mu;
        st.at(0, 0) = sd;
        LatentVars lv{Var::constant(mt), Var::constant(st)};
        const double lib = w2_to_prior(lv).value().item();
        worst_gap = std::max(worst_gap, std::abs(lib - numeric));
    }

    std::uniform_real_distribution<double> vm(-3.0, 3.0), vs(0.1, 3.0);
    auto draw = [&](std::vector<double>& mu, std::vector<double>& sd) {
        mu.resize(3);
        sd.resize(3);
        for (double& v : mu) v = vm(rng);
        for (double& v : sd) v = vs(rng);
    };
    int sym_bad = 0, tri_bad = 0;
    for (int t = 0; t < 1000; ++t) {
        std::vector<double> am, as, bm, bs, cm, cs;
        draw(am, as);
        draw(bm, bs);
        draw(cm, cs);
        const double ab = w2_between(am, as, bm, bs);
        const double ba = w2_between(bm, bs, am, as);
        const double ac = w2_between(am, as, cm, cs);
        const double cb = w2_between(cm, cs, bm, bs);
        if (std::abs(ab - ba) > 1e-10) ++sym_bad;
        if (ab > ac + cb + 1e-10) ++tri_bad;
    }

    report(2, worst_gap <= 1e-4 && sym_bad == 0 && tri_bad == 0,
           strf("quantile-coupling gap %.2e over 100 Gaussians; %d symmetry and %d triangle violations in 1000 triples",
                worst_gap, sym_bad, tri_bad));
}

// ---- AC-3: freeze contracts, asserted bitwise from the outside ----

void run_ac3() {
    DomainSpec base_spec;
    base_spec.domain = 1;
    base_spec.id_count = 10;
    base_spec.cameras = 2;
    base_spec.samples_per_id_per_camera = 2;
    base_spec.input_dim = 6;
    base_spec.seed = 41;
    DomainDataset base = generate_domain(base_spec);

    DomainSpec few_spec = base_spec;
    few_spec.domain = 2;
    few_spec.id_count = 6;
    few_spec.domain_shift_scale = 0.6;
    few_spec.seed = 42;
    DomainDataset few = generate_domain(few_spec);

    ModelConfig mc;
    mc.input_dim = 6;
    mc.backbone_hidden = 8;
    mc.feature_dim = 6;
    mc.latent_dim = 3;
    mc.coder_hidden = 8;
    ModelBundle m = ModelBundle::init(mc, 43);
    m.extend_classifier(base.identity_list(), 44);

    PfaConfig pc;
    pc.proto_budget = 6;
    pc.feat_epochs = 2;
    pc.batch_p = 4;
    pc.batch_k = 2;
    pc.enc_steps = 4;
    pc.tau = 2.0;
    pc.seed = 45;

    PrototypeBank bank;
    seed_bank_from_base(m, base, bank);

    // Stage 1 moves prototype rows only.
    TensorMap before = snapshot(m);
    learn_prototypes(m, few, bank, pc);
    const bool stage1_ok = snapshots_equal(snapshot(m), before);

    // Stage 2 moves the backbone only; every prototype row stays put.
    const Tensor cur_before = bank.current.value.value();
    const Tensor past_before = bank.past;
    before = snapshot(m);
    learn_features(m, few, bank, pc);
    TensorMap after = snapshot(m);
    const bool stage2_protos_ok = bits_equal(bank.current.value.value(), cur_before) &&
                                  bits_equal(bank.past, past_before);
    const bool stage2_heads_ok = group_equal(before, after, "classifier") &&
                                 group_equal(before, after, "dist_encoder") &&
                                 group_equal(before, after, "decoder") &&
                                 group_equal(before, after, "refine");
    const bool stage2_moved = !group_equal(before, after, "backbone");

    // The label-free update moves the distribution encoder only.
    before = snapshot(m);
    few_shot_update_encoder(m, few.samples, 0.05, 4, 46);
    after = snapshot(m);
    const bool enc_frozen_ok = group_equal(before, after, "backbone") &&
                               group_equal(before, after, "classifier") &&
                               group_equal(before, after, "decoder") &&
                               group_equal(before, after, "refine");
    const bool enc_moved = !group_equal(before, after, "dist_encoder");

    const bool ok = stage1_ok && stage2_protos_ok && stage2_heads_ok && stage2_moved &&
                    enc_frozen_ok && enc_moved;
    report(3, ok,
           strf("prototype fit froze model %s; feature fit froze prototypes %s, heads %s; "
                "encoder update froze the rest %s (each stage moved its own parameters)",
                stage1_ok ? "yes" : "NO", stage2_protos_ok ? "yes" : "NO",
                stage2_heads_ok ? "yes" : "NO", enc_frozen_ok ? "yes" : "NO"));
}

// ---- AC-4..AC-7: benchmark trends over five master seeds ----

RunRecord run_one(uint64_t seed, Method method, int k_ids, const fs::path& dir) {
    BenchmarkConfig cfg = BenchmarkConfig::defaults();
    cfg.seed = seed;
    cfg.method = method;
    cfg.k_ids = k_ids;
    const auto t0 = std::chrono::steady_clock::now();
    RunRecord rec = run_benchmark(cfg, dir.string());
    std::fprintf(stderr, "  [bench] seed=%llu method=%s k=%d done in %.1fs\n",
                 static_cast<unsigned long long>(seed), method_name(method).c_str(), k_ids,
                 seconds_since(t0));
    return rec;
}

double mean_adaptation_map(const RunRecord& r) {
    double acc = 0.0;
    for (const DomainOutcome& o : r.adaptation) acc += o.mean_ap;
    return r.adaptation.empty() ? 0.0 : acc / static_cast<double>(r.adaptation.size());
}

void run_trends(const fs::path& outroot) {
    int ac4_hits = 0, ac5_hits = 0, ac6_hits = 0;
    int ac7_inversions = 0;
    bool ac7_per_seed_ok = true;
    double sum_drop_sda = 0.0, sum_drop_sft = 0.0;
    double sum_shift_sda = 0.0, sum_shift_sft = 0.0;
    double sum_map_sda = 0.0, sum_map_sft = 0.0, sum_map_dt = 0.0;

    for (uint64_t seed = 1; seed <= 5; ++seed) {
        const std::string tag = "seed" + std::to_string(seed);
        RunRecord sda = run_one(seed, Method::SDA, 32, outroot / (tag + "_sda"));
        RunRecord sft = run_one(seed, Method::SFT, 32, outroot / (tag + "_sft"));
        RunRecord dt = run_one(seed, Method::DT, 32, outroot / (tag + "_dt"));

        ac4_hits += sda.forgetting_drop <= 0.5 * sft.forgetting_drop;
        sum_drop_sda += sda.forgetting_drop;
        sum_drop_sft += sft.forgetting_drop;

        ac5_hits += sda.centroid_shift_first_adapt < sft.centroid_shift_first_adapt;
        sum_shift_sda += sda.centroid_shift_first_adapt;
        sum_shift_sft += sft.centroid_shift_first_adapt;

        bool per_domain_ok = sda.adaptation.size() == dt.adaptation.size();
        for (size_t i = 0; per_domain_ok && i < sda.adaptation.size(); ++i)
            per_domain_ok = sda.adaptation[i].mean_ap >= dt.adaptation[i].mean_ap;
        const double map_sda = mean_adaptation_map(sda);
        const double map_sft = mean_adaptation_map(sft);
        ac6_hits += per_domain_ok && map_sda >= map_sft;
        sum_map_sda += map_sda;
        sum_map_sft += map_sft;
        sum_map_dt += mean_adaptation_map(dt);

        RunRecord k8 = run_one(seed, Method::SDA, 8, outroot / (tag + "_sda_k8"));
        RunRecord k16 = run_one(seed, Method::SDA, 16, outroot / (tag + "_sda_k16"));
        const double m8 = mean_adaptation_map(k8);
        const double m16 = mean_adaptation_map(k16);
        const int inv = (m16 < m8) + (map_sda < m16);
        ac7_inversions += inv;
        if (inv > 1) ac7_per_seed_ok = false;
        std::fprintf(stderr, "  [trend] seed=%llu drop sda/sft %.3f/%.3f shift %.3f/%.3f "
                             "adapt map sda/sft/dt %.3f/%.3f/%.3f k-sweep %.3f %.3f %.3f\n",
                     static_cast<unsigned long long>(seed), sda.forgetting_drop, sft.forgetting_drop,
                     sda.centroid_shift_first_adapt, sft.centroid_shift_first_adapt,
                     map_sda, map_sft, mean_adaptation_map(dt), m8, m16, map_sda);
    }

    report(4, ac4_hits >= 4,
           strf("base-domain forgetting drop at most half of fine-tuning on %d/5 seeds "
                "(mean drop %.3f vs %.3f)", ac4_hits, sum_drop_sda / 5.0, sum_drop_sft / 5.0));
    report(5, ac5_hits >= 4,
           strf("base identity centroids moved less after one adaptation on %d/5 seeds "
                "(mean shift %.3f vs %.3f)", ac5_hits, sum_shift_sda / 5.0, sum_shift_sft / 5.0));
    report(6, ac6_hits >= 4,
           strf("adaptation mAP beats no-adaptation per domain and fine-tuning on average on %d/5 seeds "
                "(mean adaptation mAP %.3f vs %.3f fine-tune, %.3f no-adapt)",
                ac6_hits, sum_map_sda / 5.0, sum_map_sft / 5.0, sum_map_dt / 5.0));
    report(7, ac7_per_seed_ok,
           strf("mean adaptation mAP non-decreasing over 8/16/32 few-shot identities on every seed "
                "(%d inversions total)", ac7_inversions));
}

// ---- AC-8: ranking metrics equal an exhaustive oracle ----

void run_ac8() {
    auto rng = make_rng(808);
    double worst = 0.0;
    int instances = 0, mismatches = 0, cmc_violations = 0, max_gallery = 0;
    for (int t = 0; t < 50; ++t) {
        DomainSpec spec;
        spec.domain = 1 + static_cast<int>(rng() % 3);
        spec.id_count = 2 + static_cast<int>(rng() % 4);
        spec.cameras = 2 + static_cast<int>(rng() % 2);
        spec.samples_per_id_per_camera = 1 + static_cast<int>(rng() % 2);
        spec.input_dim = 5;
        spec.identity_cluster_spread = 0.5;
        spec.domain_shift_scale = 0.3;
        spec.seed = rng();
        DomainDataset ds = generate_domain(spec);
        QueryGallery qg = make_query_gallery(ds, rng());
        max_gallery = std::max(max_gallery, static_cast<int>(qg.gallery.size()));

        ModelConfig mc;
        mc.input_dim = 5;
        mc.backbone_hidden = 6;
        mc.feature_dim = 4;
        mc.latent_dim = 2;
        mc.coder_hidden = 5;
        ModelBundle m = ModelBundle::init(mc, rng());

        EvalConfig ec;
        ec.max_rank = 10;
        ec.feature_mode = (t % 2 != 0) ? FeatureMode::Refined : FeatureMode::Backbone;
        ec.l2_normalize = (t % 3 != 0);

        EvalResult lib = evaluate_retrieval(m, qg, ec);
        const Tensor qf = extract_features(m, qg.query, ec);
        const Tensor gf = extract_features(m, qg.gallery, ec);
        EvalResult ora = oracle::brute_force(qf, gf, metas_of(qg.query), metas_of(qg.gallery), ec.max_rank);

        bool same = lib.query_count == ora.query_count && lib.skipped_queries == ora.skipped_queries &&
                    lib.cmc.size() == ora.cmc.size();
        double gap = std::abs(lib.mean_ap - ora.mean_ap);
        for (size_t i = 0; same && i < lib.cmc.size(); ++i)
            gap = std::max(gap, std::abs(lib.cmc[i] - ora.cmc[i]));
        worst = std::max(worst, gap);
        if (!same || gap > 1e-12) ++mismatches;
        for (size_t i = 1; i < lib.cmc.size(); ++i)
            if (lib.cmc[i] < lib.cmc[i - 1]) ++cmc_violations;
        ++instances;
    }
    report(8, mismatches == 0 && cmc_violations == 0,
           strf("%d randomized instances (gallery <= %d) match the brute-force oracle, worst gap %.1e; "
                "%d rank-curve monotonicity violations", instances, max_gallery, worst, cmc_violations));
}

// ---- AC-9: repeated runs are byte-identical ----

void run_ac9(const fs::path& outroot) {
    BenchmarkConfig cfg = BenchmarkConfig::defaults();
    cfg.seed = 7;
    cfg.method = Method::SDA;
    const fs::path a = outroot / "repeat_a", b = outroot / "repeat_b";
    run_benchmark(cfg, a.string());
    run_benchmark(cfg, b.string());

    // timings.tsv carries wall-clock numbers and is the one file allowed to
    // differ; records, tables, checkpoints and the bank must match exactly.
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(a)) {
        const std::string n = entry.path().filename().string();
        if (n != "timings.tsv") names.push_back(n);
    }
    std::sort(names.begin(), names.end());

    int compared = 0, different = 0;
    std::string first_diff;
    for (const std::string& n : names) {
        ++compared;
        if (!fs::exists(b / n) || slurp_bytes(a / n) != slurp_bytes(b / n)) {
            ++different;
            if (first_diff.empty()) first_diff = n;
        }
    }
    const bool ok = different == 0 && compared >= 9;
    std::string detail = strf("two seed-7 runs produced %d byte-identical artifacts "
                              "(records, tables, checkpoints, bank); evaluation is single threaded, "
                              "so thread count cannot enter", compared);
    if (!ok) detail = strf("%d of %d artifacts differ, first: %s", different, compared, first_diff.c_str());
    report(9, ok, detail);
}

template <typename F>
void guarded(std::initializer_list<int> ids, F&& f) {
    try {
        f();
    } catch (const std::exception& e) {
        for (int n : ids) report(n, false, strf("exception: %s", e.what()));
    }
}

}  // namespace

int main() {
    const fs::path outroot = fs::temp_directory_path() / "sda_acceptance";
    std::error_code ec;
    fs::remove_all(outroot, ec);
    fs::create_directories(outroot);

    guarded({1}, [] { run_ac1(); });
    guarded({2}, [] { run_ac2(); });
    guarded({3}, [] { run_ac3(); });
    guarded({4, 5, 6, 7}, [&] { run_trends(outroot); });
    guarded({8}, [] { run_ac8(); });
    guarded({9}, [&] { run_ac9(outroot); });

    return g_failures;
}

// Command-line front end: run the continual benchmark, score a saved
// checkpoint against a dumped dataset, or print the default config.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "sda/benchmark.hpp"

namespace {

int cmd_run(const std::string& config_path, const std::string& outdir, long long seed_override,
            const std::string& method_override, bool dump_features) {
    sda::BenchmarkConfig cfg =
        config_path.empty() ? sda::BenchmarkConfig::defaults() : sda::load_config_file(config_path);
    if (seed_override >= 0) cfg.seed = static_cast<uint64_t>(seed_override);
    if (!method_override.empty()) cfg.method = sda::parse_method(method_override);
    if (dump_features) cfg.dump_features = true;

    sda::RunRecord rec = sda::run_benchmark(cfg, outdir);

    std::printf("method=%s seed=%llu hash=%s\n", rec.method.c_str(),
                static_cast<unsigned long long>(rec.seed), rec.config_hash.c_str());
    std::printf("base domain %d: mAP %.4f rank1 %.4f (%d queries)\n", rec.initial_base.domain,
                rec.initial_base.mean_ap, rec.initial_base.rank1, rec.initial_base.query_count);
    for (const sda::DomainOutcome& o : rec.adaptation)
        std::printf("adapted domain %d: mAP %.4f rank1 %.4f (%d queries)\n", o.domain, o.mean_ap, o.rank1,
                    o.query_count);
    std::printf("base mAP after stream: %.4f (drop %.4f)\n", rec.base_map_history.back(), rec.forgetting_drop);
    std::printf("seen-domain mean: mAP %.4f rank1 %.4f\n", rec.final_mean_ap, rec.final_mean_rank1);
    std::printf("artifacts written to %s\n", outdir.c_str());
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset, uint64_t seed, int max_rank,
             const std::string& feature_mode, bool raw_features) {
    sda::ModelBundle m = sda::load_model(checkpoint);
    sda::DomainDataset ds = sda::load_dataset(dataset);
    sda::QueryGallery qg = sda::make_query_gallery(ds, seed);
    sda::EvalConfig ec;
    ec.max_rank = max_rank;
    ec.l2_normalize = !raw_features;
    if (feature_mode == "refined")
        ec.feature_mode = sda::FeatureMode::Refined;
    else if (feature_mode == "backbone")
        ec.feature_mode = sda::FeatureMode::Backbone;
    else
        throw std::invalid_argument("feature mode must be 'refined' or 'backbone'");
    sda::DomainOutcome o = sda::outcome_of(sda::evaluate_retrieval(m, qg, ec));
    std::printf("domain\tmean_ap\trank1\trank5\trank10\tquery_count\n");
    std::printf("%d\t%.6f\t%.6f\t%.6f\t%.6f\t%d\n", o.domain, o.mean_ap, o.rank1, o.rank5, o.rank10,
                o.query_count);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"continual few-shot identity retrieval benchmark"};
    app.require_subcommand(1);

    std::string config_path, outdir, method_override;
    long long seed_override = -1;
    bool dump_features = false;
    CLI::App* run = app.add_subcommand("run", "run the benchmark protocol end to end");
    run->add_option("--config", config_path, "config JSON (defaults used when omitted)")
        ->check(CLI::ExistingFile);
    run->add_option("--out", outdir, "output directory for all artifacts")->required();
    run->add_option("--seed", seed_override, "override the config seed");
    run->add_option("--method", method_override, "override the method: sda, sft or dt");
    run->add_flag("--dump-features", dump_features,
                  "also dump per-domain test datasets and final feature tables");

    std::string checkpoint, dataset, feature_mode = "refined";
    uint64_t eval_seed = 1;
    int max_rank = 10;
    bool raw_features = false;
    CLI::App* ev = app.add_subcommand("eval", "score a checkpoint on a dumped dataset");
    ev->add_option("--checkpoint", checkpoint, "model checkpoint file")->required()->check(CLI::ExistingFile);
    ev->add_option("--dataset", dataset, "dataset dump to score against")->required()->check(CLI::ExistingFile);
    ev->add_option("--seed", eval_seed, "seed for query selection");
    ev->add_option("--max-rank", max_rank, "deepest match rank to report")->check(CLI::PositiveNumber);
    ev->add_option("--feature-mode", feature_mode, "refined or backbone features");
    ev->add_flag("--raw", raw_features, "skip feature normalization before ranking");

    std::string defaults_out;
    CLI::App* emit = app.add_subcommand("emit-defaults", "print the default config as JSON");
    emit->add_option("--out", defaults_out, "write to a file instead of stdout");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(config_path, outdir, seed_override, method_override, dump_features);
        if (ev->parsed()) return cmd_eval(checkpoint, dataset, eval_seed, max_rank, feature_mode, raw_features);
        if (emit->parsed()) {
            const std::string text = sda::config_to_json(sda::BenchmarkConfig::defaults()).dump(2) + "\n";
            if (defaults_out.empty()) {
                std::cout << text;
            } else {
                std::ofstream os(defaults_out, std::ios::trunc);
                if (!os) throw std::runtime_error("cannot write " + defaults_out);
                os << text;
            }
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

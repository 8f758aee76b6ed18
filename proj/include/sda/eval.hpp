#pragma once

#include "mda.hpp"

namespace sda {

enum class FeatureMode { Refined, Backbone };

struct EvalConfig {
    int max_rank = 10;
    bool l2_normalize = true;
    FeatureMode feature_mode = FeatureMode::Refined;
};

// Retrieval features. The refined path runs the full pipeline with the
// latent mean instead of a sampled latent, so evaluation is deterministic.
inline Tensor extract_features(const ModelBundle& m, const std::vector<Sample>& samples, const EvalConfig& cfg) {
    Var f = backbone_forward(m, features_of(samples));
    Tensor out;
    if (cfg.feature_mode == FeatureMode::Backbone) {
        out = f.value();
    } else {
        LatentVars lv = encode_distribution(m, f);
        Var gen = decode_latent(m, lv.mean);
        out = refine_features(m, f, gen).features.value();
    }
    if (cfg.l2_normalize) {
        for (int i = 0; i < out.rows; ++i) {
            double norm = 0.0;
            for (int j = 0; j < out.cols; ++j) norm += out.at(i, j) * out.at(i, j);
            norm = std::sqrt(norm);
            if (norm > 0.0)
                for (int j = 0; j < out.cols; ++j) out.at(i, j) /= norm;
        }
    }
    return out;
}

// Average precision of one ranked relevance list: mean over relevant
// positions k of (relevant seen up to k) / k.
inline double average_precision(const std::vector<char>& relevance) {
    int rel_seen = 0;
    double acc = 0.0;
    for (size_t k = 0; k < relevance.size(); ++k)
        if (relevance[k]) {
            ++rel_seen;
            acc += static_cast<double>(rel_seen) / static_cast<double>(k + 1);
        }
    if (rel_seen == 0) throw std::invalid_argument("average_precision: no relevant item in list");
    return acc / rel_seen;
}

struct ItemMeta {
    int identity = 0;
    int camera = 0;
};

struct EvalResult {
    int domain = 0;
    double mean_ap = 0.0;
    std::vector<double> cmc;  // cmc[r-1] = fraction of queries matched within rank r
    int query_count = 0;      // queries that entered the averages
    int skipped_queries = 0;  // queries with no cross-camera match available
};

// Core ranking given an explicit query x gallery distance matrix. Gallery
// entries sharing the query's identity and camera are junk and excluded.
// Ties sort by gallery index, so results are reproducible. Queries with no
// relevant gallery entry left are skipped and reported, not averaged.
inline EvalResult evaluate_from_distances(const std::vector<std::vector<double>>& dist,
                                          const std::vector<ItemMeta>& queries,
                                          const std::vector<ItemMeta>& gallery, int max_rank) {
    if (dist.size() != queries.size()) throw std::invalid_argument("evaluate_from_distances: row count mismatch");
    if (max_rank < 1) throw std::invalid_argument("evaluate_from_distances: max_rank must be >= 1");
    EvalResult out;
    out.cmc.assign(max_rank, 0.0);
    std::vector<int> first_hits;
    double ap_sum = 0.0;

    for (size_t qi = 0; qi < queries.size(); ++qi) {
        if (dist[qi].size() != gallery.size())
            throw std::invalid_argument("evaluate_from_distances: column count mismatch");
        std::vector<int> order;
        order.reserve(gallery.size());
        for (size_t gi = 0; gi < gallery.size(); ++gi) {
            const bool junk =
                gallery[gi].identity == queries[qi].identity && gallery[gi].camera == queries[qi].camera;
            if (!junk) order.push_back(static_cast<int>(gi));
        }
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            if (dist[qi][a] != dist[qi][b]) return dist[qi][a] < dist[qi][b];
            return a < b;
        });
        std::vector<char> relevance(order.size());
        int first_hit = -1;
        bool any = false;
        for (size_t k = 0; k < order.size(); ++k) {
            relevance[k] = gallery[order[k]].identity == queries[qi].identity;
            if (relevance[k]) {
                any = true;
                if (first_hit < 0) first_hit = static_cast<int>(k) + 1;
            }
        }
        if (!any) {
            ++out.skipped_queries;
            continue;
        }
        ap_sum += average_precision(relevance);
        first_hits.push_back(first_hit);
        ++out.query_count;
    }

    if (out.query_count > 0) {
        out.mean_ap = ap_sum / out.query_count;
        for (int r = 1; r <= max_rank; ++r) {
            int hit = 0;
            for (int fh : first_hits)
                if (fh <= r) ++hit;
            out.cmc[r - 1] = static_cast<double>(hit) / out.query_count;
        }
    }
    if (out.skipped_queries > 0)
        std::cerr << "evaluate_from_distances: skipped " << out.skipped_queries
                  << " query(ies) without a reachable match\n";
    return out;
}

inline std::vector<ItemMeta> metas_of(const std::vector<Sample>& samples) {
    std::vector<ItemMeta> out(samples.size());
    for (size_t i = 0; i < samples.size(); ++i) out[i] = {samples[i].identity, samples[i].camera};
    return out;
}

// Euclidean ranking on extracted query/gallery feature rows.
inline EvalResult evaluate_features(const Tensor& query_f, const Tensor& gallery_f,
                                    const std::vector<ItemMeta>& queries, const std::vector<ItemMeta>& gallery,
                                    int max_rank) {
    if (query_f.cols != gallery_f.cols) throw std::invalid_argument("evaluate_features: feature dims differ");
    std::vector<std::vector<double>> dist(query_f.rows, std::vector<double>(gallery_f.rows));
    for (int i = 0; i < query_f.rows; ++i)
        for (int j = 0; j < gallery_f.rows; ++j) dist[i][j] = std::sqrt(sqdist_rows(query_f, i, gallery_f, j));
    return evaluate_from_distances(dist, queries, gallery, max_rank);
}

inline EvalResult evaluate_retrieval(const ModelBundle& m, const QueryGallery& qg, const EvalConfig& cfg) {
    if (qg.query.empty()) throw std::invalid_argument("evaluate_retrieval: no queries");
    Tensor qf = extract_features(m, qg.query, cfg);
    Tensor gf = extract_features(m, qg.gallery, cfg);
    EvalResult out = evaluate_features(qf, gf, metas_of(qg.query), metas_of(qg.gallery), cfg.max_rank);
    out.domain = qg.query.front().domain;
    return out;
}

struct SeenDomainsResult {
    std::vector<EvalResult> per_domain;
    double mean_ap = 0.0;
    double mean_rank1 = 0.0;
};

// Anti-forgetting protocol: one model state, every seen domain's benchmark.
inline SeenDomainsResult evaluate_seen_domains(const ModelBundle& m, const std::vector<QueryGallery>& seen,
                                               const EvalConfig& cfg) {
    if (seen.empty()) throw std::invalid_argument("evaluate_seen_domains: no domains");
    SeenDomainsResult out;
    for (const QueryGallery& qg : seen) {
        out.per_domain.push_back(evaluate_retrieval(m, qg, cfg));
        out.mean_ap += out.per_domain.back().mean_ap;
        out.mean_rank1 += out.per_domain.back().cmc[0];
    }
    out.mean_ap /= seen.size();
    out.mean_rank1 /= seen.size();
    return out;
}

// Mean distance between per-identity feature centroids of two model states
// on the same probe samples: how far the representation of already-learned
// identities moved.
inline double centroid_shift(const ModelBundle& before, const ModelBundle& after,
                             const std::vector<Sample>& probe, const EvalConfig& cfg) {
    if (probe.empty()) throw std::invalid_argument("centroid_shift: empty probe set");
    Tensor fb = extract_features(before, probe, cfg);
    Tensor fa = extract_features(after, probe, cfg);
    std::map<int, std::pair<std::vector<double>, int>> acc_b, acc_a;
    for (size_t i = 0; i < probe.size(); ++i) {
        auto& [vb, nb] = acc_b[probe[i].identity];
        auto& [va, na] = acc_a[probe[i].identity];
        vb.resize(fb.cols);
        va.resize(fa.cols);
        ++nb;
        ++na;
        for (int j = 0; j < fb.cols; ++j) {
            vb[j] += fb.at(static_cast<int>(i), j);
            va[j] += fa.at(static_cast<int>(i), j);
        }
    }
    double total = 0.0;
    for (auto& [id, vb] : acc_b) {
        auto& va = acc_a.at(id);
        double sq = 0.0;
        for (size_t j = 0; j < vb.first.size(); ++j) {
            const double d = vb.first[j] / vb.second - va.first[j] / va.second;
            sq += d * d;
        }
        total += std::sqrt(sq);
    }
    return total / static_cast<double>(acc_b.size());
}

// Text dump of extracted features, one row per sample:
// domain identity camera f0..f{D-1}.
inline void dump_features(const std::string& path, const std::vector<Sample>& samples, const Tensor& features) {
    if (static_cast<int>(samples.size()) != features.rows)
        throw std::invalid_argument("dump_features: row count mismatch");
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("dump_features: cannot open " + path);
    os << "sda-features rows=" << features.rows << " cols=" << features.cols << "\n";
    char buf[40];
    for (int i = 0; i < features.rows; ++i) {
        os << samples[i].domain << ' ' << samples[i].identity << ' ' << samples[i].camera;
        for (int j = 0; j < features.cols; ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", features.at(i, j));
            os << ' ' << buf;
        }
        os << '\n';
    }
}

}  // namespace sda

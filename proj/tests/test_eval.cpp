#include <catch2/catch_amalgamated.hpp>

#include "support/retrieval_oracle.hpp"

using namespace sda;
using Catch::Approx;
using oracle::brute_force;
using oracle::randn;

TEST_CASE("average precision reproduces hand-computed values", "[eval]") {
    CHECK(average_precision({1, 0, 1}) == Approx(0.5 * (1.0 + 2.0 / 3.0)).epsilon(1e-15));
    CHECK(average_precision({0, 1}) == Approx(0.5).epsilon(1e-15));
    CHECK(average_precision({1, 1, 1}) == 1.0);
    CHECK(average_precision({0, 0, 1, 0}) == Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK_THROWS_AS(average_precision({0, 0}), std::invalid_argument);
}

TEST_CASE("ranking follows distances with index-ordered ties", "[eval]") {
    // two gallery entries at the same distance: the lower index wins
    std::vector<std::vector<double>> dist{{2.0, 1.0, 1.0}};
    std::vector<ItemMeta> q{{7, 0}};
    std::vector<ItemMeta> g{{7, 1}, {9, 1}, {7, 2}};
    EvalResult r = evaluate_from_distances(dist, q, g, 3);
    // order: idx1 (d=1), idx2 (d=1), idx0 (d=2) -> relevance 0,1,1
    CHECK(r.mean_ap == Approx(0.5 * (0.5 + 2.0 / 3.0)).epsilon(1e-12));
    CHECK(r.cmc[0] == 0.0);
    CHECK(r.cmc[1] == 1.0);
}

TEST_CASE("same-camera matches are junk and cannot inflate the score", "[eval]") {
    std::vector<std::vector<double>> dist{{0.0, 5.0, 1.0}};
    std::vector<ItemMeta> q{{1, 0}};
    std::vector<ItemMeta> g{{1, 0}, {1, 1}, {2, 1}};  // nearest entry is same id, same camera
    EvalResult r = evaluate_from_distances(dist, q, g, 2);
    // junk removed: ranking is id2 (d=1) then id1 (d=5)
    CHECK(r.mean_ap == Approx(0.5).epsilon(1e-12));
    CHECK(r.cmc[0] == 0.0);
    CHECK(r.cmc[1] == 1.0);
    CHECK(r.query_count == 1);
}

TEST_CASE("queries with no reachable match are skipped, not averaged", "[eval]") {
    std::vector<std::vector<double>> dist{{1.0, 2.0}, {1.0, 2.0}};
    std::vector<ItemMeta> q{{1, 0}, {5, 0}};  // id 5 has no gallery entry at all
    std::vector<ItemMeta> g{{1, 1}, {2, 1}};
    EvalResult r = evaluate_from_distances(dist, q, g, 2);
    CHECK(r.query_count == 1);
    CHECK(r.skipped_queries == 1);
    CHECK(r.mean_ap == 1.0);
}

TEST_CASE("CMC is non-decreasing and bounded by one", "[eval]") {
    Tensor qf = randn(6, 4, 11);
    Tensor gf = randn(20, 4, 12);
    std::vector<ItemMeta> q, g;
    for (int i = 0; i < 6; ++i) q.push_back({i % 3, 0});
    for (int i = 0; i < 20; ++i) g.push_back({i % 5, 1});
    EvalResult r = evaluate_features(qf, gf, q, g, 10);
    for (size_t k = 1; k < r.cmc.size(); ++k) CHECK(r.cmc[k] >= r.cmc[k - 1]);
    CHECK(r.cmc.back() <= 1.0);
}

TEST_CASE("scores are invariant under strictly monotone distance transforms", "[eval]") {
    auto rng = make_rng(13);
    std::uniform_real_distribution<double> ud(0.1, 9.0);
    std::vector<std::vector<double>> dist(5, std::vector<double>(30));
    for (auto& row : dist)
        for (double& d : row) d = ud(rng);
    std::vector<ItemMeta> q, g;
    for (int i = 0; i < 5; ++i) q.push_back({i, 0});
    for (int i = 0; i < 30; ++i) g.push_back({i % 7, 1 + i % 2});

    auto cubed = dist;
    for (auto& row : cubed)
        for (double& d : row) d = d * d * d;
    EvalResult a = evaluate_from_distances(dist, q, g, 5);
    EvalResult b = evaluate_from_distances(cubed, q, g, 5);
    CHECK(a.mean_ap == b.mean_ap);
    CHECK(a.cmc == b.cmc);
}

TEST_CASE("well-separated identity clusters retrieve perfectly", "[eval]") {
    // one-hot clusters, two cameras; every query's match is its twin
    std::vector<Sample> qs, gs;
    Tensor qf(4, 4), gf(8, 4);
    for (int i = 0; i < 4; ++i) {
        qf.at(i, i) = 10.0;
        gf.at(2 * i, i) = 10.1;
        gf.at(2 * i + 1, i) = 9.9;
    }
    std::vector<ItemMeta> qm, gm;
    for (int i = 0; i < 4; ++i) {
        qm.push_back({i, 0});
        gm.push_back({i, 1});
        gm.push_back({i, 1});
    }
    EvalResult r = evaluate_features(qf, gf, qm, gm, 3);
    CHECK(r.mean_ap == 1.0);
    CHECK(r.cmc[0] == 1.0);
}

TEST_CASE("the ranking pipeline equals brute force on randomized instances", "[eval]") {
    auto seed_rng = make_rng(2024);
    for (int instance = 0; instance < 10; ++instance) {
        const uint64_t s = seed_rng();
        auto rng = make_rng(s);
        std::uniform_int_distribution<int> nq(3, 8), ng(10, 40), ids(0, 6), cams(0, 2);
        const int q_n = nq(rng), g_n = ng(rng);
        Tensor qf = randn(q_n, 5, s + 1);
        Tensor gf = randn(g_n, 5, s + 2);
        std::vector<ItemMeta> qm, gm;
        for (int i = 0; i < q_n; ++i) qm.push_back({ids(rng), cams(rng)});
        for (int i = 0; i < g_n; ++i) gm.push_back({ids(rng), cams(rng)});

        EvalResult got = evaluate_features(qf, gf, qm, gm, 10);
        EvalResult want = brute_force(qf, gf, qm, gm, 10);
        INFO("instance " << instance << " seed " << s);
        REQUIRE(got.query_count == want.query_count);
        REQUIRE(got.skipped_queries == want.skipped_queries);
        CHECK(got.mean_ap == Approx(want.mean_ap).margin(1e-12));
        for (int r = 0; r < 10; ++r) CHECK(got.cmc[r] == Approx(want.cmc[r]).margin(1e-12));
    }
}

TEST_CASE("per-row scaling washes out under L2 normalization", "[eval]") {
    ModelConfig mc;
    mc.input_dim = 5;
    mc.backbone_hidden = 8;
    mc.feature_dim = 6;
    mc.latent_dim = 3;
    mc.coder_hidden = 8;
    ModelBundle m = ModelBundle::init(mc, 3);

    DomainSpec spec;
    spec.domain = 1;
    spec.id_count = 5;
    spec.cameras = 2;
    spec.samples_per_id_per_camera = 3;
    spec.input_dim = 5;
    spec.seed = 8;
    DomainDataset ds = generate_domain(spec);

    EvalConfig cfg;
    Tensor f = extract_features(m, ds.samples, cfg);
    for (int i = 0; i < f.rows; ++i) {
        double norm = 0.0;
        for (int j = 0; j < f.cols; ++j) norm += f.at(i, j) * f.at(i, j);
        CHECK(std::sqrt(norm) == Approx(1.0).epsilon(1e-12));
    }

    // evaluation through the full model is reproducible
    QueryGallery qg = make_query_gallery(ds, 4);
    EvalResult r1 = evaluate_retrieval(m, qg, cfg);
    EvalResult r2 = evaluate_retrieval(m, qg, cfg);
    CHECK(r1.mean_ap == r2.mean_ap);
    CHECK(r1.cmc == r2.cmc);
    CHECK(r1.domain == 1);
}

TEST_CASE("seen-domain sweeps average the per-domain scores", "[eval]") {
    ModelConfig mc;
    mc.input_dim = 5;
    mc.backbone_hidden = 8;
    mc.feature_dim = 6;
    mc.latent_dim = 3;
    mc.coder_hidden = 8;
    ModelBundle m = ModelBundle::init(mc, 3);

    std::vector<QueryGallery> seen;
    for (int d = 1; d <= 3; ++d) {
        DomainSpec spec;
        spec.domain = d;
        spec.id_count = 4;
        spec.cameras = 2;
        spec.samples_per_id_per_camera = 2;
        spec.input_dim = 5;
        spec.seed = 80 + d;
        seen.push_back(make_query_gallery(generate_domain(spec), 4));
    }
    SeenDomainsResult r = evaluate_seen_domains(m, seen, EvalConfig{});
    REQUIRE(r.per_domain.size() == 3);
    double acc = 0.0;
    for (auto& e : r.per_domain) acc += e.mean_ap;
    CHECK(r.mean_ap == Approx(acc / 3.0).epsilon(1e-12));
}

TEST_CASE("centroid drift is zero for identical models and grows with change", "[eval]") {
    ModelConfig mc;
    mc.input_dim = 5;
    mc.backbone_hidden = 8;
    mc.feature_dim = 6;
    mc.latent_dim = 3;
    mc.coder_hidden = 8;
    ModelBundle m = ModelBundle::init(mc, 3);
    DomainSpec spec;
    spec.domain = 1;
    spec.id_count = 4;
    spec.cameras = 2;
    spec.samples_per_id_per_camera = 2;
    spec.input_dim = 5;
    spec.seed = 90;
    DomainDataset ds = generate_domain(spec);

    ModelBundle same = m.clone();
    CHECK(centroid_shift(m, same, ds.samples, EvalConfig{}) == 0.0);

    ModelBundle moved = m.clone();
    moved.backbone.at("l1.w").value.value_mut().v[0] += 0.5;
    CHECK(centroid_shift(m, moved, ds.samples, EvalConfig{}) > 0.0);
}

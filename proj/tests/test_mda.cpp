#include <catch2/catch_amalgamated.hpp>

#include "sda/gradcheck.hpp"
#include "sda/mda.hpp"

using namespace sda;
using Catch::Approx;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig c;
    c.input_dim = 6;
    c.backbone_hidden = 10;
    c.feature_dim = 8;
    c.latent_dim = 4;
    c.coder_hidden = 10;
    return c;
}

DomainSpec tiny_domain(int domain, double shift) {
    DomainSpec s;
    s.domain = domain;
    s.id_count = 8;
    s.cameras = 3;
    s.samples_per_id_per_camera = 2;
    s.input_dim = 6;
    s.domain_shift_scale = shift;
    s.seed = 400 + domain;
    return s;
}

ModelBundle ready_bundle(const DomainDataset& ds, uint64_t seed) {
    ModelBundle m = ModelBundle::init(tiny_cfg(), seed);
    m.extend_classifier(ds.identity_list(), seed);
    return m;
}

double grad_norm(const ParamSet& ps) {
    double acc = 0.0;
    for (const auto& [k, p] : ps.items)
        for (double g : p.value.grad().v) acc += g * g;
    return std::sqrt(acc);
}

}  // namespace

TEST_CASE("the alignment objective reaches all three heads but not the backbone", "[mda]") {
    DomainDataset ds = generate_domain(tiny_domain(1, 0.0));
    ModelBundle m = ready_bundle(ds, 3);
    auto batch = pk_batch(ds, 4, 3, 5);
    Tensor f = backbone_forward(m, features_of(batch)).value();
    auto idx = class_indices(m, labels_of(batch));

    m.zero_grad();
    auto rng = make_rng(9);
    MetaLossParts parts = meta_objective(m, f, idx, LossCfg{}, rng);
    CHECK(parts.total.value().item() ==
          Approx(parts.prior_sq.value().item() + parts.reconstruction.value().item() +
                 parts.refined_id.value().item())
              .epsilon(1e-12));
    parts.total.backward();
    CHECK(grad_norm(m.dist_encoder) > 0.0);
    CHECK(grad_norm(m.decoder) > 0.0);
    CHECK(grad_norm(m.refine) > 0.0);
    CHECK(grad_norm(m.backbone) == 0.0);  // features enter as constants
}

TEST_CASE("alignment objective gradients pass finite differences", "[mda]") {
    DomainDataset ds = generate_domain(tiny_domain(1, 0.0));
    ModelBundle m = ready_bundle(ds, 7);
    auto batch = pk_batch(ds, 3, 2, 11);
    Tensor f = backbone_forward(m, features_of(batch)).value();
    auto idx = class_indices(m, labels_of(batch));

    auto fn = [&]() {
        auto rng = make_rng(31);  // identical draws on every call
        return meta_objective(m, f, idx, LossCfg{}, rng).total;
    };
    auto rep = grad_check(fn, {&m.dist_encoder, &m.decoder, &m.refine}, 1e-5);
    INFO(rep.worst_param << " analytic=" << rep.worst_analytic << " numeric=" << rep.worst_numeric);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("inner adaptation produces detached weights and leaves the bundle alone", "[mda]") {
    DomainDataset ds = generate_domain(tiny_domain(1, 0.0));
    ModelBundle m = ready_bundle(ds, 13);
    auto batch = pk_batch(ds, 4, 3, 17);
    Tensor f = backbone_forward(m, features_of(batch)).value();
    auto idx = class_indices(m, labels_of(batch));

    TensorMap before = snapshot(m);
    auto rng1 = make_rng(21);
    FastWeights fast = inner_adapted_weights(m, f, idx, LossCfg{}, 0.05, rng1);
    CHECK(snapshots_equal(snapshot(m), before));
    REQUIRE(fast.size() == m.dist_encoder.items.size() + m.decoder.items.size() + m.refine.items.size());

    // recompute the same gradient independently and compare one tensor
    m.zero_grad();
    auto rng2 = make_rng(21);
    meta_objective(m, f, idx, LossCfg{}, rng2).total.backward();
    const Param& p = m.dist_encoder.at("l1.w");
    const Tensor& fw = fast.at("dist_encoder/l1.w");
    for (int i = 0; i < fw.size(); ++i)
        CHECK(fw.v[i] == Approx(p.value.value().v[i] - 0.05 * p.value.grad().v[i]).margin(1e-15));
    m.zero_grad();
}

TEST_CASE("a zero inner rate reduces the outer step to plain descent", "[mda]") {
    DomainDataset ds = generate_domain(tiny_domain(1, 0.0));
    ModelBundle m = ready_bundle(ds, 23);
    ModelBundle manual = m.clone();
    auto batch = pk_batch(ds, 4, 3, 29);
    Tensor f = backbone_forward(m, features_of(batch)).value();
    auto idx = class_indices(m, labels_of(batch));

    auto rng_inner = make_rng(41);
    FastWeights fast = inner_adapted_weights(m, f, idx, LossCfg{}, 0.0, rng_inner);
    auto rng_outer = make_rng(43);
    meta_outer_step(m, fast, f, idx, LossCfg{}, 0.02, OuterScope::All, rng_outer);

    auto rng_manual = make_rng(43);
    manual.zero_grad();
    meta_objective(manual, f, idx, LossCfg{}, rng_manual).total.backward();
    for (ParamSet* g : meta_adapted_groups(manual))
        for (auto& [k, p] : g->items) {
            Tensor& val = p.value.value_mut();
            const Tensor& grad = p.value.grad();
            for (int i = 0; i < val.size(); ++i) val.v[i] -= 0.02 * grad.v[i];
        }
    manual.zero_grad();
    CHECK(snapshots_equal(snapshot(m), snapshot(manual)));
}

TEST_CASE("outer scope controls which heads move", "[mda]") {
    DomainDataset ds = generate_domain(tiny_domain(1, 0.0));
    auto batch = pk_batch(ds, 4, 3, 37);

    for (OuterScope scope : {OuterScope::All, OuterScope::EncoderOnly}) {
        ModelBundle m = ready_bundle(ds, 31);
        Tensor f = backbone_forward(m, features_of(batch)).value();
        auto idx = class_indices(m, labels_of(batch));
        TensorMap before = snapshot(m);

        auto ri = make_rng(47);
        FastWeights fast = inner_adapted_weights(m, f, idx, LossCfg{}, 0.05, ri);
        auto ro = make_rng(53);
        meta_outer_step(m, fast, f, idx, LossCfg{}, 0.02, scope, ro);
        TensorMap after = snapshot(m);

        auto moved = [&](const std::string& prefix) {
            for (const auto& [name, t] : after)
                if (name.rfind(prefix, 0) == 0 && !bits_equal(t, before.at(name))) return true;
            return false;
        };
        CHECK(moved("dist_encoder/"));
        CHECK(moved("decoder/") == (scope == OuterScope::All));
        CHECK(moved("refine/") == (scope == OuterScope::All));
        CHECK_FALSE(moved("backbone/"));
        CHECK_FALSE(moved("classifier/"));
    }
}

TEST_CASE("base pretraining reduces the identity loss and is reproducible", "[mda][slow]") {
    DomainDataset ds = generate_domain(tiny_domain(1, 0.0));
    PretrainConfig cfg;
    cfg.epochs = 8;
    cfg.batch_p = 4;
    cfg.batch_k = 3;
    cfg.base_lr = 0.05;
    cfg.warmup_epochs = 3;
    cfg.seed = 61;

    ModelBundle a = ModelBundle::init(tiny_cfg(), 67);
    PretrainReport rep = pretrain_base(a, ds, cfg);
    REQUIRE(rep.id_loss_per_epoch.size() == 8);
    CHECK(rep.id_loss_per_epoch.back() < rep.id_loss_per_epoch.front());
    CHECK(rep.backbone_steps == 8 * 4);  // 48 samples / batch 12 = 4 steps per epoch

    ModelBundle b = ModelBundle::init(tiny_cfg(), 67);
    pretrain_base(b, ds, cfg);
    CHECK(snapshots_equal(snapshot(a), snapshot(b)));

    ModelBundle c = ModelBundle::init(tiny_cfg(), 67);
    CHECK_THROWS_AS(pretrain_base(a, ds, cfg), std::logic_error);  // classifier already set
    (void)c;
}

TEST_CASE("zero learning rates make pretraining a bitwise no-op", "[mda]") {
    DomainDataset ds = generate_domain(tiny_domain(1, 0.0));
    ModelBundle m = ModelBundle::init(tiny_cfg(), 71);
    TensorMap before = snapshot(m);

    PretrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_p = 4;
    cfg.batch_k = 3;
    cfg.base_lr = 0.0;
    cfg.meta.lr_inner = 0.0;
    cfg.meta.lr_outer = 0.0;
    cfg.seed = 73;
    pretrain_base(m, ds, cfg);

    TensorMap after = snapshot(m);
    for (const auto& [name, t] : before) CHECK(bits_equal(t, after.at(name)));
}

TEST_CASE("few-shot encoder updating shrinks the prior distance and freezes the rest", "[mda]") {
    DomainDataset base = generate_domain(tiny_domain(1, 0.0));
    DomainDataset target = generate_domain(tiny_domain(2, 0.8));
    ModelBundle m = ready_bundle(base, 83);

    TensorMap before = snapshot(m);
    EncoderUpdateReport rep = few_shot_update_encoder(m, target.samples, 0.01, 30, 89);
    REQUIRE(rep.prior_trace.size() == 31);
    CHECK(rep.prior_trace.back() < rep.prior_trace.front());

    TensorMap after = snapshot(m);
    bool encoder_moved = false;
    for (const auto& [name, t] : after) {
        if (name.rfind("dist_encoder/", 0) == 0) {
            if (!bits_equal(t, before.at(name))) encoder_moved = true;
        } else {
            CHECK(bits_equal(t, before.at(name)));
        }
    }
    CHECK(encoder_moved);

    CHECK_THROWS_AS(few_shot_update_encoder(m, target.samples, 0.01, 0, 89), std::invalid_argument);
    CHECK_THROWS_AS(few_shot_update_encoder(m, {}, 0.01, 5, 89), std::invalid_argument);
}

TEST_CASE("meta steps are deterministic given the seed", "[mda]") {
    DomainDataset ds = generate_domain(tiny_domain(1, 0.0));
    auto batch = pk_batch(ds, 4, 3, 97);

    ModelBundle a = ready_bundle(ds, 101);
    ModelBundle b = ready_bundle(ds, 101);
    MetaStepConfig cfg;
    MetaStepReport ra = meta_step(a, batch, LossCfg{}, cfg, 103);
    MetaStepReport rb = meta_step(b, batch, LossCfg{}, cfg, 103);
    CHECK(ra.query_loss == rb.query_loss);
    CHECK(snapshots_equal(snapshot(a), snapshot(b)));
}

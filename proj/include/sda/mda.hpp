#pragma once

#include "losses.hpp"

namespace sda {

struct LossCfg {
    double margin = 0.3;
    double label_smooth = 0.1;
};

enum class OuterScope { All, EncoderOnly };

struct MetaLossParts {
    Var total;
    Var prior_sq;        // squared batch distance to the standard-normal prior
    Var reconstruction;  // mean row norm between features and decoded draw
    Var refined_id;      // identity loss on refined features
    bool triplet_skipped = false;
};

// The alignment objective: encode pooled backbone features into latent
// Gaussians, pull them toward the prior, reconstruct through a sampled
// latent, refine the features with the generated ones and demand that the
// refined features still discriminate identities. Backbone features enter
// as constants: this objective trains the encoder/decoder/refine heads and
// never moves the backbone.
inline MetaLossParts meta_objective(const ModelBundle& m, const Tensor& features,
                                    const std::vector<int>& class_idx, const LossCfg& cfg,
                                    std::mt19937_64& rng) {
    Var f = Var::constant(features);
    LatentVars lv = encode_distribution(m, f);
    Var prior = w2_to_prior(lv);
    Var z = sample_latent(lv, rng);
    Var gen = decode_latent(m, z);
    Var rec = reconstruction_loss(f, gen);
    RefineOut refined = refine_features(m, f, gen);
    Var logits = classifier_logits(m, refined.features);
    IdLossResult ref = id_loss(logits, refined.features, class_idx, cfg.margin, cfg.label_smooth);

    MetaLossParts out;
    out.prior_sq = square(prior);
    out.reconstruction = rec;
    out.refined_id = ref.loss;
    out.triplet_skipped = ref.triplet_skipped;
    out.total = add(add(out.prior_sq, rec), ref.loss);
    return out;
}

// Groups adapted in the simulated (inner) step.
inline std::vector<ParamSet*> meta_adapted_groups(ModelBundle& m) {
    return {&m.dist_encoder, &m.decoder, &m.refine};
}

using FastWeights = std::map<std::string, Tensor>;

// One plain gradient step on the support half, materialized as a detached
// weight map; the bundle itself is left untouched (first-order scheme).
inline FastWeights inner_adapted_weights(ModelBundle& m, const Tensor& features,
                                         const std::vector<int>& class_idx, const LossCfg& cfg,
                                         double lr_inner, std::mt19937_64& rng) {
    m.zero_grad();
    MetaLossParts parts = meta_objective(m, features, class_idx, cfg, rng);
    parts.total.backward();
    FastWeights fast;
    for (ParamSet* g : meta_adapted_groups(m))
        for (auto& [k, p] : g->items) {
            Tensor w = p.value.value();
            const Tensor& grad = p.value.grad();
            for (int i = 0; i < w.size(); ++i) w.v[i] -= lr_inner * grad.v[i];
            fast.emplace(g->name + "/" + k, std::move(w));
        }
    m.zero_grad();
    return fast;
}

// Evaluates the objective on the query half at the fast weights and applies
// that gradient to the original weights (plain gradient descent). scope
// selects whether all three heads or only the encoder receive the update.
inline void meta_outer_step(ModelBundle& m, const FastWeights& fast, const Tensor& features,
                            const std::vector<int>& class_idx, const LossCfg& cfg, double lr_outer,
                            OuterScope scope, std::mt19937_64& rng) {
    std::map<std::string, Tensor> saved;
    for (ParamSet* g : meta_adapted_groups(m))
        for (auto& [k, p] : g->items) {
            const std::string name = g->name + "/" + k;
            saved.emplace(name, p.value.value());
            p.value.node->val = fast.at(name);
        }

    m.zero_grad();
    MetaLossParts parts = meta_objective(m, features, class_idx, cfg, rng);
    parts.total.backward();

    for (ParamSet* g : meta_adapted_groups(m)) {
        const bool apply = scope == OuterScope::All || g->name == "dist_encoder";
        for (auto& [k, p] : g->items) {
            Tensor restored = saved.at(g->name + "/" + k);
            if (apply) {
                const Tensor& grad = p.value.grad();
                for (int i = 0; i < restored.size(); ++i) restored.v[i] -= lr_outer * grad.v[i];
            }
            p.value.node->val = std::move(restored);
        }
    }
    m.zero_grad();
}

struct MetaStepConfig {
    double lr_inner = 0.01;
    double lr_outer = 0.01;
    OuterScope outer_scope = OuterScope::All;
    MetaSplitMode split_mode = MetaSplitMode::ByCamera;
};

struct MetaStepReport {
    double support_loss = 0.0;
    double query_loss = 0.0;
};

// Full bilevel step on one batch: split into disjoint-camera halves,
// simulate adaptation on one half, update on the other.
inline MetaStepReport meta_step(ModelBundle& m, const std::vector<Sample>& batch, const LossCfg& loss_cfg,
                                const MetaStepConfig& cfg, uint64_t seed) {
    MetaSplit split = split_meta(batch, cfg.split_mode, derive_seed(seed, "meta_split_choice"));
    Tensor train_f = backbone_forward(m, features_of(split.meta_train)).value();
    Tensor test_f = backbone_forward(m, features_of(split.meta_test)).value();
    std::vector<int> train_idx = class_indices(m, labels_of(split.meta_train));
    std::vector<int> test_idx = class_indices(m, labels_of(split.meta_test));

    auto rng = make_rng(derive_seed(seed, "meta_latents"));
    MetaStepReport rep;
    {
        auto probe_rng = rng;  // loss values for reporting reuse the same draws
        MetaLossParts parts = meta_objective(m, train_f, train_idx, loss_cfg, probe_rng);
        rep.support_loss = parts.total.value().item();
    }
    FastWeights fast = inner_adapted_weights(m, train_f, train_idx, loss_cfg, cfg.lr_inner, rng);
    auto outer_rng = make_rng(derive_seed(seed, "meta_latents_outer"));
    {
        auto probe_rng = outer_rng;
        MetaLossParts parts = meta_objective(m, test_f, test_idx, loss_cfg, probe_rng);
        rep.query_loss = parts.total.value().item();
    }
    meta_outer_step(m, fast, test_f, test_idx, loss_cfg, cfg.lr_outer, cfg.outer_scope, outer_rng);
    return rep;
}

struct PretrainConfig {
    int epochs = 20;
    int batch_p = 18;
    int batch_k = 5;
    double base_lr = 0.01;
    int warmup_epochs = 10;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    LossCfg loss;
    MetaStepConfig meta;
    bool meta_enabled = true;
    uint64_t seed = 1;
};

struct PretrainReport {
    std::vector<double> id_loss_per_epoch;
    std::vector<double> query_loss_per_epoch;
    long backbone_steps = 0;
};

// Base-domain training: alternating identity steps (momentum SGD with
// warmup on backbone + classifier) and bilevel alignment steps (the outer
// rate follows the same warmup schedule; the inner rate is fixed).
inline PretrainReport pretrain_base(ModelBundle& m, const DomainDataset& base, const PretrainConfig& cfg) {
    if (!m.class_ids.empty()) throw std::logic_error("pretrain_base: classifier already initialized");
    if (cfg.epochs < 1) throw std::invalid_argument("pretrain_base: epochs must be >= 1");
    m.extend_classifier(base.identity_list(), derive_seed(cfg.seed, "classifier_init"));

    const int batch_size = cfg.batch_p * cfg.batch_k;
    const int steps = std::max(1, static_cast<int>((base.samples.size() + batch_size - 1) / batch_size));
    PretrainReport rep;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = warmup_lr(epoch, cfg.base_lr, cfg.warmup_epochs);
        const double lr_outer = warmup_lr(epoch, cfg.meta.lr_outer, cfg.warmup_epochs);
        double id_sum = 0.0, query_sum = 0.0;
        for (int step = 0; step < steps; ++step) {
            auto batch = pk_batch(base, cfg.batch_p, cfg.batch_k,
                                  derive_seed(cfg.seed, "pretrain_batch", epoch, step));
            std::vector<int> idx = class_indices(m, labels_of(batch));

            m.zero_grad();
            Var f = backbone_forward(m, features_of(batch));
            IdLossResult idl = id_loss(classifier_logits(m, f), f, idx, cfg.loss.margin, cfg.loss.label_smooth);
            id_sum += idl.loss.value().item();
            idl.loss.backward();
            sgd_step(m.backbone, lr, cfg.momentum, cfg.weight_decay);
            sgd_step(m.classifier, lr, cfg.momentum, cfg.weight_decay);
            m.zero_grad();
            ++rep.backbone_steps;

            if (cfg.meta_enabled) {
                MetaStepConfig ms = cfg.meta;
                ms.lr_outer = lr_outer;
                MetaStepReport msr =
                    meta_step(m, batch, cfg.loss, ms, derive_seed(cfg.seed, "pretrain_meta", epoch, step));
                query_sum += msr.query_loss;
            }
        }
        rep.id_loss_per_epoch.push_back(id_sum / steps);
        rep.query_loss_per_epoch.push_back(query_sum / steps);
    }
    return rep;
}

struct EncoderUpdateReport {
    std::vector<double> prior_trace;  // batch prior distance before each step, plus after the last
    int steps = 0;
};

// Label-free few-shot update: with everything but the distribution encoder
// frozen, descend reconstruction + squared prior distance on the target
// features. Freeze contracts are enforced bitwise, not just by convention.
inline EncoderUpdateReport few_shot_update_encoder(ModelBundle& m, const std::vector<Sample>& target,
                                                   double lr, int steps, uint64_t seed) {
    if (steps < 1) throw std::invalid_argument("few_shot_update_encoder: steps must be >= 1");
    if (target.empty()) throw std::invalid_argument("few_shot_update_encoder: empty target sample set");
    TensorMap before = snapshot(m);
    const Tensor features = backbone_forward(m, features_of(target)).value();
    auto rng = make_rng(derive_seed(seed, "encoder_update"));

    EncoderUpdateReport rep;
    rep.steps = steps;
    for (int step = 0; step <= steps; ++step) {
        m.zero_grad();
        Var f = Var::constant(features);
        LatentVars lv = encode_distribution(m, f);
        Var prior = w2_to_prior(lv);
        rep.prior_trace.push_back(prior.value().item());
        if (step == steps) break;
        Var gen = decode_latent(m, sample_latent(lv, rng));
        Var total = add(reconstruction_loss(f, gen), square(prior));
        total.backward();
        for (auto& [k, p] : m.dist_encoder.items) {
            const Tensor& grad = p.value.grad();
            Tensor& val = p.value.value_mut();
            for (int i = 0; i < val.size(); ++i) {
                if (!std::isfinite(grad.v[i]))
                    throw std::runtime_error("few_shot_update_encoder: non-finite gradient");
                val.v[i] -= lr * grad.v[i];
            }
        }
    }
    m.zero_grad();

    TensorMap after = snapshot(m);
    for (const auto& [name, t] : before) {
        if (name.rfind("dist_encoder/", 0) == 0) continue;
        if (!bits_equal(t, after.at(name)))
            throw std::logic_error("few_shot_update_encoder: frozen parameters moved: " + name);
    }
    return rep;
}

}  // namespace sda

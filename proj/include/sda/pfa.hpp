#pragma once

#include "mda.hpp"

namespace sda {

enum class AdaptOrder { PrototypesThenEncoder, EncoderThenPrototypes, Alternating };

struct PfaConfig {
    double proto_lr = 0.1;    // stage-1 rate on the prototype rows
    int proto_budget = 200;   // stage-1 epoch budget
    double proto_tol = 1e-5;  // stage-1 stop: epoch improvement below this
    double feat_lr = 0.01;    // stage-2 rate on the backbone
    int feat_epochs = 15;
    int batch_p = 18;  // stage-2 batch composition (clamped to the id count)
    int batch_k = 5;
    double tau = 1.0;
    double enc_lr = 0.01;  // few-shot encoder update
    int enc_steps = 50;
    AdaptOrder order = AdaptOrder::PrototypesThenEncoder;
    uint64_t seed = 1;

    void validate() const {
        if (proto_lr <= 0 || feat_lr <= 0 || enc_lr <= 0) throw std::invalid_argument("PfaConfig: rates must be > 0");
        if (proto_budget < 1 || feat_epochs < 1 || enc_steps < 1)
            throw std::invalid_argument("PfaConfig: budgets must be >= 1");
        if (tau <= 0) throw std::invalid_argument("PfaConfig: tau must be > 0");
        if (batch_p < 1 || batch_k < 1) throw std::invalid_argument("PfaConfig: batch shape must be >= 1");
        if (proto_tol < 0) throw std::invalid_argument("PfaConfig: proto_tol must be >= 0");
    }
};

namespace detail {

inline Tensor identity_centroids(const Tensor& features, const std::vector<int>& ids,
                                 const std::vector<int>& id_order) {
    std::map<int, int> row_of;
    for (size_t i = 0; i < id_order.size(); ++i) row_of[id_order[i]] = static_cast<int>(i);
    Tensor centroids(static_cast<int>(id_order.size()), features.cols);
    std::vector<int> counts(id_order.size(), 0);
    for (int i = 0; i < features.rows; ++i) {
        const int r = row_of.at(ids[i]);
        ++counts[r];
        for (int j = 0; j < features.cols; ++j) centroids.at(r, j) += features.at(i, j);
    }
    for (size_t r = 0; r < id_order.size(); ++r) {
        if (counts[r] == 0) throw std::logic_error("identity_centroids: identity without samples");
        for (int j = 0; j < features.cols; ++j) centroids.at(static_cast<int>(r), j) /= counts[r];
    }
    return centroids;
}

}  // namespace detail

// Installs the base domain's identities into the past block: with plenty of
// base data the class centroids of the trained features serve directly as
// prototypes, no fitting stage required.
inline void seed_bank_from_base(const ModelBundle& m, const DomainDataset& base, PrototypeBank& bank) {
    if (bank.current_count() != 0 || bank.past_count() != 0)
        throw std::logic_error("seed_bank_from_base: bank is not empty");
    Tensor f = backbone_forward(m, features_of(base.samples)).value();
    std::vector<int> id_order = base.identity_list();
    Tensor centroids = detail::identity_centroids(f, labels_of(base.samples), id_order);
    std::vector<std::pair<int, int>> tags;
    for (int id : id_order) tags.emplace_back(base.domain, id);
    bank.set_current(centroids, tags);
    bank.retire_current();
}

struct Stage1Report {
    std::vector<double> loss_trace;  // loss before each epoch, plus after the last
    int epochs_run = 0;
    bool converged = false;
};

// Stage 1: the backbone is frozen; only the new domain's prototype rows
// descend the anchor loss, starting from the few-shot class centroids.
// Enforced bitwise: no model parameter may move here.
inline Stage1Report learn_prototypes(const ModelBundle& m, const DomainDataset& few, PrototypeBank& bank,
                                     const PfaConfig& cfg) {
    cfg.validate();
    if (bank.current_count() != 0) throw std::logic_error("learn_prototypes: bank already has a current block");
    TensorMap model_before = snapshot(m);

    const Tensor features = backbone_forward(m, features_of(few.samples)).value();
    const std::vector<int> ids = labels_of(few.samples);
    std::vector<int> id_order = few.identity_list();
    Tensor init = detail::identity_centroids(features, ids, id_order);
    std::vector<std::pair<int, int>> tags;
    for (int id : id_order) tags.emplace_back(few.domain, id);
    bank.set_current(init, tags);

    Var f = Var::constant(features);
    Stage1Report rep;
    double prev = std::numeric_limits<double>::infinity();
    for (int epoch = 0; epoch < cfg.proto_budget; ++epoch) {
        bank.current.value.zero_grad();
        Var loss = prototype_anchor_loss(f, ids, bank, cfg.tau);
        const double cur = loss.value().item();
        rep.loss_trace.push_back(cur);
        if (prev - cur < cfg.proto_tol && epoch > 0) {
            rep.converged = true;
            break;
        }
        prev = cur;
        loss.backward();
        Tensor& protos = bank.current.value.value_mut();
        const Tensor& grad = bank.current.value.grad();
        for (int i = 0; i < protos.size(); ++i) {
            if (!std::isfinite(grad.v[i])) throw std::runtime_error("learn_prototypes: non-finite gradient");
            protos.v[i] -= cfg.proto_lr * grad.v[i];
        }
        ++rep.epochs_run;
    }
    bank.current.value.zero_grad();
    rep.loss_trace.push_back(prototype_anchor_loss(f, ids, bank, cfg.tau).value().item());

    if (!snapshots_equal(snapshot(m), model_before))
        throw std::logic_error("learn_prototypes: model parameters moved during prototype fitting");
    return rep;
}

struct Stage2Report {
    std::vector<double> loss_trace;  // mean anchor loss per epoch
    long backbone_steps = 0;
};

// Stage 2: prototypes (current and past) are fixed; the backbone descends
// the anchor loss so its features migrate toward the anchors. Classifier,
// coder heads and every prototype row are bitwise-frozen.
inline Stage2Report learn_features(ModelBundle& m, const DomainDataset& few, PrototypeBank& bank,
                                   const PfaConfig& cfg, uint64_t seed_salt = 0) {
    cfg.validate();
    if (bank.current_count() == 0) throw std::logic_error("learn_features: no current prototypes to guide stage 2");
    Tensor protos_before = bank.current.value.value();
    Tensor past_before = bank.past;
    TensorMap before = snapshot(m);

    const std::vector<int> id_order = few.identity_list();
    const int p_eff = std::min(cfg.batch_p, static_cast<int>(id_order.size()));
    const int batch_size = p_eff * cfg.batch_k;
    const int steps = std::max(1, static_cast<int>((few.samples.size() + batch_size - 1) / batch_size));

    Stage2Report rep;
    for (int epoch = 0; epoch < cfg.feat_epochs; ++epoch) {
        double loss_sum = 0.0;
        for (int step = 0; step < steps; ++step) {
            auto batch = pk_batch(few, p_eff, cfg.batch_k,
                                  derive_seed(cfg.seed, "stage2_batch", epoch + seed_salt * 1000, step));
            m.zero_grad();
            bank.current.value.zero_grad();
            Var f = backbone_forward(m, features_of(batch));
            Var loss = prototype_anchor_loss(f, labels_of(batch), bank, cfg.tau);
            loss_sum += loss.value().item();
            loss.backward();
            for (auto& [k, p] : m.backbone.items) {
                const Tensor& grad = p.value.grad();
                Tensor& val = p.value.value_mut();
                for (int i = 0; i < val.size(); ++i) {
                    if (!std::isfinite(grad.v[i])) throw std::runtime_error("learn_features: non-finite gradient");
                    val.v[i] -= cfg.feat_lr * grad.v[i];
                }
            }
            m.zero_grad();
            bank.current.value.zero_grad();
            ++rep.backbone_steps;
        }
        rep.loss_trace.push_back(loss_sum / steps);
    }

    if (!bits_equal(bank.current.value.value(), protos_before) || !bits_equal(bank.past, past_before))
        throw std::logic_error("learn_features: prototypes moved during feature learning");
    TensorMap after = snapshot(m);
    for (const auto& [name, t] : before)
        if (name.rfind("backbone/", 0) != 0 && !bits_equal(t, after.at(name)))
            throw std::logic_error("learn_features: frozen parameters moved: " + name);
    return rep;
}

// Finishing a domain: its prototypes join the past block and stop learning.
inline void extend_bank(PrototypeBank& bank) { bank.retire_current(); }

struct AdaptReport {
    Stage1Report stage1;
    Stage2Report stage2;
    EncoderUpdateReport encoder;
    long backbone_steps = 0;
};

// One full few-shot adaptation: fit prototypes, migrate backbone features,
// refresh the distribution encoder on unlabeled target features, then
// retire the prototypes into the bank. The classifier is never touched.
inline AdaptReport adapt_domain(ModelBundle& m, PrototypeBank& bank, const DomainDataset& few,
                                const PfaConfig& cfg) {
    cfg.validate();
    if (bank.current_count() != 0) throw std::logic_error("adapt_domain: previous domain was never retired");
    if (few.samples.empty()) throw std::invalid_argument("adapt_domain: empty few-shot set");
    Tensor classifier_w_before =
        m.class_ids.empty() ? Tensor() : m.classifier.at("out.w").value.value();

    AdaptReport rep;
    const uint64_t enc_seed = derive_seed(cfg.seed, "adapt_encoder", few.domain);
    switch (cfg.order) {
        case AdaptOrder::PrototypesThenEncoder:
            rep.stage1 = learn_prototypes(m, few, bank, cfg);
            rep.stage2 = learn_features(m, few, bank, cfg);
            rep.encoder = few_shot_update_encoder(m, few.samples, cfg.enc_lr, cfg.enc_steps, enc_seed);
            break;
        case AdaptOrder::EncoderThenPrototypes:
            rep.encoder = few_shot_update_encoder(m, few.samples, cfg.enc_lr, cfg.enc_steps, enc_seed);
            rep.stage1 = learn_prototypes(m, few, bank, cfg);
            rep.stage2 = learn_features(m, few, bank, cfg);
            break;
        case AdaptOrder::Alternating: {
            rep.stage1 = learn_prototypes(m, few, bank, cfg);
            PfaConfig one = cfg;
            one.feat_epochs = 1;
            const int chunk = std::max(1, cfg.enc_steps / cfg.feat_epochs);
            int enc_done = 0;
            for (int e = 0; e < cfg.feat_epochs; ++e) {
                Stage2Report part = learn_features(m, few, bank, one, e);
                rep.stage2.backbone_steps += part.backbone_steps;
                rep.stage2.loss_trace.push_back(part.loss_trace.front());
                const int todo = e + 1 == cfg.feat_epochs ? std::max(cfg.enc_steps - enc_done, 1) : chunk;
                EncoderUpdateReport er =
                    few_shot_update_encoder(m, few.samples, cfg.enc_lr, todo, derive_seed(enc_seed, "alt", e));
                enc_done += todo;
                rep.encoder.steps += er.steps;
                rep.encoder.prior_trace.insert(rep.encoder.prior_trace.end(), er.prior_trace.begin(),
                                               er.prior_trace.end());
            }
            break;
        }
    }
    extend_bank(bank);
    rep.backbone_steps = rep.stage2.backbone_steps;

    if (!m.class_ids.empty() && !bits_equal(m.classifier.at("out.w").value.value(), classifier_w_before))
        throw std::logic_error("adapt_domain: classifier moved during adaptation");
    return rep;
}

}  // namespace sda

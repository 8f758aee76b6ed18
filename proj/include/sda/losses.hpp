#pragma once

#include <iostream>

#include "autodiff.hpp"
#include "model.hpp"

namespace sda {

// Label-smoothed softmax cross-entropy. The smoothed target puts
// 1 - eps + eps/C on the true class and eps/C on every other class, so the
// per-row loss is lse - (1-eps)*true_logit - (eps/C)*sum(logits).
inline Var cross_entropy_smoothed(const Var& logits, const std::vector<int>& class_idx, double eps) {
    if (!(eps >= 0.0 && eps < 1.0)) throw std::invalid_argument("cross_entropy_smoothed: eps outside [0, 1)");
    const int m = logits.value().rows;
    const int c = logits.value().cols;
    if (static_cast<int>(class_idx.size()) != m)
        throw std::invalid_argument("cross_entropy_smoothed: one label per row required");
    Var lse = logsumexp_rows(logits);
    Var own = select_per_row(logits, class_idx);
    Var fit = add(smul(own, 1.0 - eps), smul(row_sums(logits), eps / c));
    return vmean(sub(lse, fit));
}

struct TripletResult {
    Var loss;
    int anchors_kept = 0;
    bool all_skipped = false;
};

// Batch-hard triplet on Euclidean distances: per anchor, hardest positive
// (farthest same label, excluding self) against hardest negative (closest
// other label), hinged at the margin. Anchors without a positive or without
// a negative are skipped; an entirely skipped batch yields a zero loss and
// a warning flag instead of an error. Ties pick the smallest index.
inline TripletResult triplet_batch_hard(const Var& features, const std::vector<int>& labels, double margin) {
    if (margin < 0.0) throw std::invalid_argument("triplet_batch_hard: negative margin");
    const int m = features.value().rows;
    if (static_cast<int>(labels.size()) != m)
        throw std::invalid_argument("triplet_batch_hard: one label per row required");

    Var dist = sqrt_safe(pairwise_sqdist(features, features));
    const Tensor& dv = dist.value();

    std::vector<int> anchor_idx, pos_idx, neg_idx;
    for (int i = 0; i < m; ++i) {
        int best_p = -1, best_n = -1;
        for (int j = 0; j < m; ++j) {
            if (j == i) continue;
            if (labels[j] == labels[i]) {
                if (best_p < 0 || dv.at(i, j) > dv.at(i, best_p)) best_p = j;
            } else {
                if (best_n < 0 || dv.at(i, j) < dv.at(i, best_n)) best_n = j;
            }
        }
        if (best_p < 0 || best_n < 0) continue;
        anchor_idx.push_back(i);
        pos_idx.push_back(best_p);
        neg_idx.push_back(best_n);
    }

    TripletResult out;
    out.anchors_kept = static_cast<int>(anchor_idx.size());
    if (anchor_idx.empty()) {
        out.all_skipped = true;
        out.loss = Var::constant(Tensor::scalar(0.0));
        std::cerr << "triplet_batch_hard: no anchor had both a positive and a negative; zero loss\n";
        return out;
    }
    Var dp = gather2(dist, anchor_idx, pos_idx);
    Var dn = gather2(dist, anchor_idx, neg_idx);
    out.loss = vmean(relu(sadd(sub(dp, dn), margin)));
    return out;
}

struct IdLossResult {
    Var loss;
    bool triplet_skipped = false;
};

// Identity objective: smoothed cross-entropy plus batch-hard triplet.
inline IdLossResult id_loss(const Var& logits, const Var& features, const std::vector<int>& class_idx,
                            double margin, double eps) {
    Var ce = cross_entropy_smoothed(logits, class_idx, eps);
    TripletResult tri = triplet_batch_hard(features, class_idx, margin);
    return {add(ce, tri.loss), tri.all_skipped};
}

// Distance from each row's diagonal Gaussian to the standard normal prior,
// averaged over the batch: mean_i sqrt(|mean_i|^2 + sum_j (stddev_ij - 1)^2).
inline Var w2_to_prior(const LatentVars& lv) {
    for (double s : lv.stddev.value().v)
        if (s <= 0.0) throw std::invalid_argument("w2_to_prior: stddev must be positive");
    Var per_row = add(row_sums(square(lv.mean)), row_sums(square(sadd(lv.stddev, -1.0))));
    return vmean(sqrt_safe(per_row));
}

// 2-Wasserstein distance between two diagonal Gaussians given as mean and
// stddev vectors: sqrt(|mu1 - mu2|^2 + |s1 - s2|^2). Plain-double test and
// analysis helper; no gradients involved.
inline double w2_between(const std::vector<double>& mu1, const std::vector<double>& s1,
                         const std::vector<double>& mu2, const std::vector<double>& s2) {
    if (mu1.size() != s1.size() || mu2.size() != s2.size() || mu1.size() != mu2.size())
        throw std::invalid_argument("w2_between: dimension mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < mu1.size(); ++i) {
        if (s1[i] <= 0.0 || s2[i] <= 0.0) throw std::invalid_argument("w2_between: stddev must be positive");
        const double dm = mu1[i] - mu2[i];
        const double ds = s1[i] - s2[i];
        acc += dm * dm + ds * ds;
    }
    return std::sqrt(acc);
}

// Mean Euclidean row distance between a reconstruction and its target;
// exactly zero when the two agree bitwise.
inline Var reconstruction_loss(const Var& target, const Var& reconstructed) {
    check_same_shape(target.value(), reconstructed.value(), "reconstruction_loss");
    return vmean(sqrt_safe(row_sums(square(sub(reconstructed, target)))));
}

// Prototype bank: a learnable block of current-domain prototypes plus a
// frozen block of prototypes from all previously finished domains. Past
// rows enter the loss denominator only, so new features are pushed away
// from old identities without moving them.
struct PrototypeBank {
    int feature_dim = 0;
    Param current;  // K x feature_dim, learnable during prototype fitting
    std::vector<std::pair<int, int>> current_tags;  // (domain, identity) per row
    std::map<int, int> current_index;               // identity -> row
    Tensor past;                                     // N x feature_dim, frozen
    std::vector<std::pair<int, int>> past_tags;

    PrototypeBank() = default;
    PrototypeBank(const PrototypeBank&) = delete;
    PrototypeBank& operator=(const PrototypeBank&) = delete;
    PrototypeBank(PrototypeBank&&) = default;
    PrototypeBank& operator=(PrototypeBank&&) = default;

    int current_count() const { return current.value.defined() ? current.value.value().rows : 0; }
    int past_count() const { return past.rows; }

    void set_current(const Tensor& protos, const std::vector<std::pair<int, int>>& tags) {
        if (protos.rows != static_cast<int>(tags.size()))
            throw std::invalid_argument("PrototypeBank: one tag per prototype row required");
        if (feature_dim == 0) feature_dim = protos.cols;
        if (protos.cols != feature_dim) throw std::invalid_argument("PrototypeBank: feature_dim mismatch");
        current = Param(protos);
        current_tags = tags;
        current_index.clear();
        for (size_t r = 0; r < tags.size(); ++r) {
            if (!current_index.emplace(tags[r].second, static_cast<int>(r)).second)
                throw std::invalid_argument("PrototypeBank: duplicate identity in current block");
            if (past_index_of(tags[r].second) >= 0)
                throw std::invalid_argument("PrototypeBank: identity already in past block");
        }
    }

    int past_index_of(int identity) const {
        for (size_t r = 0; r < past_tags.size(); ++r)
            if (past_tags[r].second == identity) return static_cast<int>(r);
        return -1;
    }

    // Moves the current block into the past block; the bank then has no
    // learnable rows until the next domain installs its prototypes.
    void retire_current() {
        if (current_count() == 0) throw std::logic_error("PrototypeBank: nothing to retire");
        const Tensor& cur = current.value.value();
        Tensor merged(past.rows + cur.rows, feature_dim);
        for (int i = 0; i < past.rows; ++i)
            for (int j = 0; j < feature_dim; ++j) merged.at(i, j) = past.at(i, j);
        for (int i = 0; i < cur.rows; ++i)
            for (int j = 0; j < feature_dim; ++j) merged.at(past.rows + i, j) = cur.at(i, j);
        past = std::move(merged);
        past_tags.insert(past_tags.end(), current_tags.begin(), current_tags.end());
        current = Param();
        current_tags.clear();
        current_index.clear();
    }
};

// Softmax over negative squared distances to every prototype, current and
// past, at temperature tau; the loss is the mean negative log-probability
// of each feature's own prototype. Gradients reach the features and the
// current block; the past block is constant.
inline Var prototype_anchor_loss(const Var& features, const std::vector<int>& identities,
                                 const PrototypeBank& bank, double tau) {
    if (tau <= 0.0) throw std::invalid_argument("prototype_anchor_loss: tau must be positive");
    if (bank.current_count() == 0) throw std::logic_error("prototype_anchor_loss: bank has no current prototypes");
    const int m = features.value().rows;
    if (static_cast<int>(identities.size()) != m)
        throw std::invalid_argument("prototype_anchor_loss: one identity per row required");
    std::vector<int> own(m);
    for (int i = 0; i < m; ++i) {
        auto it = bank.current_index.find(identities[i]);
        if (it == bank.current_index.end())
            throw std::out_of_range("prototype_anchor_loss: identity has no current prototype");
        own[i] = it->second;
    }

    Var sq_cur = pairwise_sqdist(features, bank.current.value);
    Var scores = smul(sq_cur, -1.0 / tau);
    if (bank.past_count() > 0) {
        Var sq_past = pairwise_sqdist(features, Var::constant(bank.past));
        scores = concat_cols(scores, smul(sq_past, -1.0 / tau));
    }
    Var own_sq = select_per_row(sq_cur, own);
    return vmean(add(smul(own_sq, 1.0 / tau), logsumexp_rows(scores)));
}

}  // namespace sda

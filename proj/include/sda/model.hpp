#pragma once

#include "checkpoint.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "synthetic.hpp"

namespace sda {

struct ModelConfig {
    int input_dim = 24;
    int backbone_hidden = 48;
    int feature_dim = 32;
    int latent_dim = 16;
    int coder_hidden = 48;

    void validate() const {
        if (input_dim < 1 || backbone_hidden < 1 || feature_dim < 1 || latent_dim < 1 || coder_hidden < 1)
            throw std::invalid_argument("ModelConfig: all dimensions must be >= 1");
    }
};

// Five parameter groups. The backbone and classifier carry the identity
// loss; the distribution encoder/decoder/refine head model features as a
// diagonal Gaussian in latent space and reconstruct/blend them back.
struct ModelBundle {
    ModelConfig cfg;
    ParamSet backbone{"backbone"};
    ParamSet classifier{"classifier"};
    ParamSet dist_encoder{"dist_encoder"};
    ParamSet decoder{"decoder"};
    ParamSet refine{"refine"};
    std::vector<int> class_ids;  // classifier column -> identity
    std::map<int, int> id_to_class;

    ModelBundle() = default;
    ModelBundle(const ModelBundle&) = delete;
    ModelBundle& operator=(const ModelBundle&) = delete;
    ModelBundle(ModelBundle&&) = default;
    ModelBundle& operator=(ModelBundle&&) = default;

    std::vector<ParamSet*> groups() { return {&backbone, &classifier, &dist_encoder, &decoder, &refine}; }
    std::vector<const ParamSet*> groups() const {
        return {&backbone, &classifier, &dist_encoder, &decoder, &refine};
    }

    ParamSet& group(const std::string& name) {
        for (ParamSet* g : groups())
            if (g->name == name) return *g;
        throw std::out_of_range("ModelBundle: unknown group " + name);
    }

    void zero_grad() {
        for (ParamSet* g : groups()) g->zero_grad();
    }

    ModelBundle clone() const {
        ModelBundle out;
        out.cfg = cfg;
        out.backbone = backbone.clone();
        out.classifier = classifier.clone();
        out.dist_encoder = dist_encoder.clone();
        out.decoder = decoder.clone();
        out.refine = refine.clone();
        out.class_ids = class_ids;
        out.id_to_class = id_to_class;
        return out;
    }

    static ModelBundle init(const ModelConfig& cfg, uint64_t seed);
    void extend_classifier(const std::vector<int>& new_ids, uint64_t seed);
};

namespace detail {

inline Tensor he_normal(int rows, int cols, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / rows));
    Tensor t(rows, cols);
    for (double& x : t.v) x = nd(rng);
    return t;
}

inline void add_linear(ParamSet& ps, const std::string& stem, int in, int out, std::mt19937_64& rng) {
    ps.add(stem + ".w", he_normal(in, out, rng));
    ps.add(stem + ".b", Tensor(1, out));
}

inline Var linear(const ParamSet& ps, const std::string& stem, const Var& x) {
    return add_rowvec(matmul(x, ps.at(stem + ".w").value), ps.at(stem + ".b").value);
}

}  // namespace detail

inline ModelBundle ModelBundle::init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelBundle m;
    m.cfg = cfg;
    auto rng = make_rng(derive_seed(seed, "model_init"));
    detail::add_linear(m.backbone, "l1", cfg.input_dim, cfg.backbone_hidden, rng);
    detail::add_linear(m.backbone, "l2", cfg.backbone_hidden, cfg.backbone_hidden, rng);
    detail::add_linear(m.backbone, "l3", cfg.backbone_hidden, cfg.feature_dim, rng);
    detail::add_linear(m.dist_encoder, "l1", cfg.feature_dim, cfg.coder_hidden, rng);
    detail::add_linear(m.dist_encoder, "l2", cfg.coder_hidden, cfg.coder_hidden, rng);
    detail::add_linear(m.dist_encoder, "l3", cfg.coder_hidden, 2 * cfg.latent_dim, rng);
    detail::add_linear(m.decoder, "l1", cfg.latent_dim, cfg.coder_hidden, rng);
    detail::add_linear(m.decoder, "l2", cfg.coder_hidden, cfg.coder_hidden, rng);
    detail::add_linear(m.decoder, "l3", cfg.coder_hidden, cfg.feature_dim, rng);
    detail::add_linear(m.refine, "gate", cfg.feature_dim, cfg.feature_dim, rng);
    return m;
}

// Appends classifier columns for previously unseen identities. Existing
// columns and their momentum are preserved bit-exactly.
inline void ModelBundle::extend_classifier(const std::vector<int>& new_ids, uint64_t seed) {
    for (int id : new_ids)
        if (id_to_class.count(id)) throw std::invalid_argument("extend_classifier: identity already registered");
    auto rng = make_rng(derive_seed(seed, "classifier_extend", class_ids.size()));
    const int old_c = static_cast<int>(class_ids.size());
    const int add_c = static_cast<int>(new_ids.size());
    Tensor neww = detail::he_normal(cfg.feature_dim, old_c + add_c, rng);
    Tensor newb(1, old_c + add_c);
    Tensor newmw(cfg.feature_dim, old_c + add_c);
    Tensor newmb(1, old_c + add_c);
    if (old_c > 0) {
        Param& w = classifier.at("out.w");
        Param& b = classifier.at("out.b");
        for (int i = 0; i < cfg.feature_dim; ++i)
            for (int j = 0; j < old_c; ++j) {
                neww.at(i, j) = w.value.value().at(i, j);
                newmw.at(i, j) = w.momentum.at(i, j);
            }
        for (int j = 0; j < old_c; ++j) {
            newb.at(0, j) = b.value.value().at(0, j);
            newmb.at(0, j) = b.momentum.at(0, j);
        }
        w.value.node->val = std::move(neww);
        w.momentum = std::move(newmw);
        b.value.node->val = std::move(newb);
        b.momentum = std::move(newmb);
        w.value.zero_grad();
        b.value.zero_grad();
    } else {
        for (int j = 0; j < add_c; ++j) newb.at(0, j) = 0.0;
        classifier.add("out.w", std::move(neww));
        classifier.add("out.b", std::move(newb));
    }
    for (int id : new_ids) {
        id_to_class[id] = static_cast<int>(class_ids.size());
        class_ids.push_back(id);
    }
}

// ---- forward passes ----

inline Var backbone_forward(const ModelBundle& m, const Var& x) {
    if (x.value().cols != m.cfg.input_dim) throw std::invalid_argument("backbone_forward: input_dim mismatch");
    Var h1 = relu(detail::linear(m.backbone, "l1", x));
    Var h2 = relu(detail::linear(m.backbone, "l2", h1));
    return detail::linear(m.backbone, "l3", h2);
}

inline Var backbone_forward(const ModelBundle& m, const Tensor& x) {
    return backbone_forward(m, Var::constant(x));
}

inline Var classifier_logits(const ModelBundle& m, const Var& features) {
    if (m.class_ids.empty()) throw std::logic_error("classifier_logits: classifier has no classes yet");
    return detail::linear(m.classifier, "out", features);
}

inline std::vector<int> class_indices(const ModelBundle& m, const std::vector<int>& identities) {
    std::vector<int> out(identities.size());
    for (size_t i = 0; i < identities.size(); ++i) {
        auto it = m.id_to_class.find(identities[i]);
        if (it == m.id_to_class.end())
            throw std::out_of_range("class_indices: identity without classifier column");
        out[i] = it->second;
    }
    return out;
}

struct LatentVars {
    Var mean;    // m x latent_dim
    Var stddev;  // m x latent_dim, strictly positive
};

// Row-wise diagonal Gaussian over feature vectors. The second half of the
// last layer passes through softplus plus a floor, so stddev > 0 always.
inline LatentVars encode_distribution(const ModelBundle& m, const Var& features) {
    Var h1 = relu(detail::linear(m.dist_encoder, "l1", features));
    Var h2 = relu(detail::linear(m.dist_encoder, "l2", h1));
    Var raw = detail::linear(m.dist_encoder, "l3", h2);
    const int n = m.cfg.latent_dim;
    LatentVars lv;
    lv.mean = slice_cols(raw, 0, n);
    lv.stddev = sadd(softplus(slice_cols(raw, n, 2 * n)), 1e-6);
    return lv;
}

// Reparameterized draw: z = mean + stddev * eps with eps a constant, so
// gradients flow into both encoder heads.
inline Var sample_latent(const LatentVars& lv, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    Tensor eps(lv.mean.value().rows, lv.mean.value().cols);
    for (double& x : eps.v) x = nd(rng);
    return add(lv.mean, mul(lv.stddev, Var::constant(std::move(eps))));
}

inline Var decode_latent(const ModelBundle& m, const Var& z) {
    if (z.value().cols != m.cfg.latent_dim) throw std::invalid_argument("decode_latent: latent_dim mismatch");
    Var h1 = relu(detail::linear(m.decoder, "l1", z));
    Var h2 = relu(detail::linear(m.decoder, "l2", h1));
    return detail::linear(m.decoder, "l3", h2);
}

struct RefineOut {
    Var gate;      // m x feature_dim in (0, 1)
    Var features;  // (1 - gate) * observed + gate * generated
};

inline RefineOut refine_features(const ModelBundle& m, const Var& observed, const Var& generated) {
    check_same_shape(observed.value(), generated.value(), "refine_features");
    Var gate = sigmoid(detail::linear(m.refine, "gate", sub(observed, generated)));
    RefineOut out;
    out.gate = gate;
    out.features = add(observed, mul(gate, sub(generated, observed)));
    return out;
}

// ---- persistence and freeze contracts ----

inline TensorMap snapshot(const ModelBundle& m) {
    TensorMap out;
    for (const ParamSet* g : m.groups())
        for (const auto& [k, p] : g->items) out[g->name + "/" + k] = p.value.value();
    return out;
}

inline bool snapshots_equal(const TensorMap& a, const TensorMap& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [k, t] : a) {
        auto it = b.find(k);
        if (it == b.end() || !bits_equal(t, it->second)) return false;
    }
    return true;
}

inline void freeze(ModelBundle& m, const std::vector<std::string>& group_names) {
    for (const std::string& name : group_names) m.group(name).frozen = true;
}

inline void unfreeze_all(ModelBundle& m) {
    for (ParamSet* g : m.groups()) g->frozen = false;
}

// Checkpoints hold the parameter tensors plus two metadata rows: the model
// dimensions and the classifier column-to-identity table.
inline void save_model(const std::string& path, const ModelBundle& m) {
    TensorMap t = snapshot(m);
    Tensor dims(1, 5);
    dims.v = {static_cast<double>(m.cfg.input_dim), static_cast<double>(m.cfg.backbone_hidden),
              static_cast<double>(m.cfg.feature_dim), static_cast<double>(m.cfg.latent_dim),
              static_cast<double>(m.cfg.coder_hidden)};
    t["meta/dims"] = dims;
    if (!m.class_ids.empty()) {
        Tensor ids(1, static_cast<int>(m.class_ids.size()));
        for (size_t i = 0; i < m.class_ids.size(); ++i) ids.v[i] = static_cast<double>(m.class_ids[i]);
        t["meta/class_ids"] = ids;
    }
    save_checkpoint(path, t);
}

inline ModelBundle load_model(const std::string& path) {
    TensorMap t = load_checkpoint(path);
    auto dims_it = t.find("meta/dims");
    if (dims_it == t.end() || dims_it->second.size() != 5)
        throw std::runtime_error("load_model: checkpoint lacks model dimensions");
    ModelConfig cfg;
    cfg.input_dim = static_cast<int>(dims_it->second.v[0]);
    cfg.backbone_hidden = static_cast<int>(dims_it->second.v[1]);
    cfg.feature_dim = static_cast<int>(dims_it->second.v[2]);
    cfg.latent_dim = static_cast<int>(dims_it->second.v[3]);
    cfg.coder_hidden = static_cast<int>(dims_it->second.v[4]);
    ModelBundle m = ModelBundle::init(cfg, 0);
    if (auto ids_it = t.find("meta/class_ids"); ids_it != t.end()) {
        std::vector<int> ids(ids_it->second.size());
        for (int i = 0; i < ids_it->second.size(); ++i) ids[i] = static_cast<int>(ids_it->second.v[i]);
        m.extend_classifier(ids, 0);
    }
    for (ParamSet* g : m.groups())
        for (auto& [k, p] : g->items) {
            auto it = t.find(g->name + "/" + k);
            if (it == t.end()) throw std::runtime_error("load_model: missing tensor " + g->name + "/" + k);
            if (!p.value.value().same_shape(it->second))
                throw std::runtime_error("load_model: shape mismatch for " + g->name + "/" + k);
            p.value.node->val = it->second;
        }
    return m;
}

}  // namespace sda

#pragma once

#include <cstdint>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace sda {

struct Sample {
    int domain = 0;
    int identity = 0;
    int camera = 0;
    std::vector<double> x;
};

struct DomainDataset {
    int domain = 0;
    int input_dim = 0;
    int camera_count = 0;
    std::vector<Sample> samples;
    // The applied domain transform, kept for tests and diagnostics:
    // every sample is transform * (pre-domain point) + shift.
    Tensor transform;
    std::vector<double> shift;

    std::vector<int> identity_list() const {
        std::set<int> ids;
        for (const Sample& s : samples) ids.insert(s.identity);
        return std::vector<int>(ids.begin(), ids.end());
    }
};

// A domain draws identity centers, camera offsets and instance noise from
// seed-derived substreams, then maps everything through an affine domain
// transform. The substreams depend only on the seed, never on the scales,
// so two specs differing only in a scale describe the same underlying
// people seen under a different distribution shift.
struct DomainSpec {
    int domain = 1;
    int id_count = 100;
    int cameras = 3;
    int samples_per_id_per_camera = 4;
    int input_dim = 24;
    double identity_cluster_spread = 0.35;
    double camera_shift_scale = 0.5;
    double domain_shift_scale = 0.0;
    long id_base = -1;  // negative: resolved to domain * 1000000
    uint64_t seed = 1;

    long resolved_id_base() const { return id_base >= 0 ? id_base : static_cast<long>(domain) * 1000000L; }

    void validate() const {
        if (domain < 1) throw std::invalid_argument("DomainSpec: domain must be >= 1");
        if (id_count < 1) throw std::invalid_argument("DomainSpec: id_count must be >= 1");
        if (cameras < 1) throw std::invalid_argument("DomainSpec: cameras must be >= 1");
        if (samples_per_id_per_camera < 1) throw std::invalid_argument("DomainSpec: samples_per_id_per_camera >= 1");
        if (input_dim < 1) throw std::invalid_argument("DomainSpec: input_dim must be >= 1");
        if (identity_cluster_spread < 0 || camera_shift_scale < 0 || domain_shift_scale < 0)
            throw std::invalid_argument("DomainSpec: scales must be non-negative");
    }
};

namespace detail {

// Modified Gram-Schmidt on the columns of a square Gaussian draw; for the
// dimensions used here the draw is never close to singular.
inline Tensor random_orthogonal(int d, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    Tensor q(d, d);
    for (double& x : q.v) x = nd(rng);
    for (int j = 0; j < d; ++j) {
        for (int k = 0; k < j; ++k) {
            double dot = 0.0;
            for (int i = 0; i < d; ++i) dot += q.at(i, k) * q.at(i, j);
            for (int i = 0; i < d; ++i) q.at(i, j) -= dot * q.at(i, k);
        }
        double norm = 0.0;
        for (int i = 0; i < d; ++i) norm += q.at(i, j) * q.at(i, j);
        norm = std::sqrt(norm);
        if (norm < 1e-12) throw std::runtime_error("random_orthogonal: degenerate draw");
        for (int i = 0; i < d; ++i) q.at(i, j) /= norm;
    }
    return q;
}

}  // namespace detail

inline DomainDataset generate_domain(const DomainSpec& spec) {
    spec.validate();
    const int d = spec.input_dim;

    auto centers_rng = make_rng(derive_seed(spec.seed, "identity_centers"));
    auto camera_rng = make_rng(derive_seed(spec.seed, "camera_offsets"));
    auto noise_rng = make_rng(derive_seed(spec.seed, "instance_noise"));
    auto transform_rng = make_rng(derive_seed(spec.seed, "domain_transform"));
    std::normal_distribution<double> nd(0.0, 1.0);

    Tensor centers(spec.id_count, d);
    for (double& x : centers.v) x = nd(centers_rng);
    Tensor offsets(spec.cameras, d);
    for (double& x : offsets.v) x = nd(camera_rng) * spec.camera_shift_scale;

    const double s = spec.domain_shift_scale;
    Tensor q = detail::random_orthogonal(d, transform_rng);
    Tensor a(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) a.at(i, j) = s * q.at(i, j) + (i == j ? 1.0 - s : 0.0);
    std::vector<double> shift(d);
    for (double& x : shift) x = s * nd(transform_rng);

    DomainDataset out;
    out.domain = spec.domain;
    out.input_dim = d;
    out.camera_count = spec.cameras;
    out.transform = a;
    out.shift = shift;
    out.samples.reserve(static_cast<size_t>(spec.id_count) * spec.cameras * spec.samples_per_id_per_camera);

    std::vector<double> point(d);
    for (int id = 0; id < spec.id_count; ++id)
        for (int cam = 0; cam < spec.cameras; ++cam)
            for (int k = 0; k < spec.samples_per_id_per_camera; ++k) {
                for (int i = 0; i < d; ++i)
                    point[i] = centers.at(id, i) + offsets.at(cam, i) + spec.identity_cluster_spread * nd(noise_rng);
                Sample smp;
                smp.domain = spec.domain;
                smp.identity = static_cast<int>(spec.resolved_id_base()) + id;
                smp.camera = cam;
                smp.x.resize(d);
                for (int i = 0; i < d; ++i) {
                    double acc = shift[i];
                    for (int j = 0; j < d; ++j) acc += a.at(i, j) * point[j];
                    smp.x[i] = acc;
                }
                out.samples.push_back(std::move(smp));
            }
    return out;
}

// Keeps every sample of k randomly chosen identities, in original order.
inline DomainDataset sample_few_shot(const DomainDataset& ds, int k_ids, uint64_t seed) {
    std::vector<int> ids = ds.identity_list();
    if (k_ids < 1 || k_ids > static_cast<int>(ids.size()))
        throw std::invalid_argument("sample_few_shot: k_ids outside [1, identity count]");
    auto rng = make_rng(derive_seed(seed, "few_shot_ids"));
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(k_ids);
    std::set<int> keep(ids.begin(), ids.end());

    DomainDataset out;
    out.domain = ds.domain;
    out.input_dim = ds.input_dim;
    out.camera_count = ds.camera_count;
    out.transform = ds.transform;
    out.shift = ds.shift;
    for (const Sample& s : ds.samples)
        if (keep.count(s.identity)) out.samples.push_back(s);
    return out;
}

// Splits identities (not samples) into disjoint train/test subsets.
inline std::pair<DomainDataset, DomainDataset> split_identities(const DomainDataset& ds, double test_fraction,
                                                                uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw std::invalid_argument("split_identities: test_fraction outside (0, 1)");
    std::vector<int> ids = ds.identity_list();
    if (ids.size() < 2) throw std::invalid_argument("split_identities: need at least two identities");
    auto rng = make_rng(derive_seed(seed, "identity_split"));
    std::shuffle(ids.begin(), ids.end(), rng);
    int n_test = static_cast<int>(std::lround(test_fraction * static_cast<double>(ids.size())));
    n_test = std::clamp(n_test, 1, static_cast<int>(ids.size()) - 1);
    std::set<int> test_ids(ids.begin(), ids.begin() + n_test);

    DomainDataset train = ds, test = ds;
    train.samples.clear();
    test.samples.clear();
    for (const Sample& s : ds.samples) (test_ids.count(s.identity) ? test : train).samples.push_back(s);
    return {std::move(train), std::move(test)};
}

// P identities x K instances; identities without K samples draw with
// replacement. Instances of one identity are consecutive in the batch.
inline std::vector<Sample> pk_batch(const DomainDataset& ds, int p_ids, int k_instances, uint64_t seed) {
    std::vector<int> ids = ds.identity_list();
    if (p_ids < 1 || p_ids > static_cast<int>(ids.size()))
        throw std::invalid_argument("pk_batch: p_ids outside [1, identity count]");
    if (k_instances < 1) throw std::invalid_argument("pk_batch: k_instances must be >= 1");

    std::map<int, std::vector<const Sample*>> by_id;
    for (const Sample& s : ds.samples) by_id[s.identity].push_back(&s);

    auto rng = make_rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(p_ids);

    std::vector<Sample> batch;
    batch.reserve(static_cast<size_t>(p_ids) * k_instances);
    for (int id : ids) {
        auto& pool = by_id.at(id);
        if (static_cast<int>(pool.size()) >= k_instances) {
            std::vector<int> idx(pool.size());
            for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
            std::shuffle(idx.begin(), idx.end(), rng);
            for (int k = 0; k < k_instances; ++k) batch.push_back(*pool[idx[k]]);
        } else {
            std::uniform_int_distribution<int> pick(0, static_cast<int>(pool.size()) - 1);
            for (int k = 0; k < k_instances; ++k) batch.push_back(*pool[pick(rng)]);
        }
    }
    return batch;
}

enum class MetaSplitMode { ByDomain, ByCamera };

struct MetaSplit {
    std::vector<Sample> meta_train;
    std::vector<Sample> meta_test;
};

// Partitions a batch into two non-empty halves with disjoint camera (or
// domain) sets. A batch covering just one group falls back to a random
// sample-level split so both halves stay non-empty.
inline MetaSplit split_meta(const std::vector<Sample>& batch, MetaSplitMode mode, uint64_t seed) {
    if (batch.size() < 2) throw std::invalid_argument("split_meta: need at least two samples");
    std::set<int> groups_set;
    for (const Sample& s : batch) groups_set.insert(mode == MetaSplitMode::ByCamera ? s.camera : s.domain);
    std::vector<int> groups(groups_set.begin(), groups_set.end());
    auto rng = make_rng(derive_seed(seed, "meta_split"));

    MetaSplit out;
    if (groups.size() < 2) {
        std::vector<int> idx(batch.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
        std::shuffle(idx.begin(), idx.end(), rng);
        const size_t half = batch.size() / 2;
        for (size_t i = 0; i < idx.size(); ++i)
            (i < half ? out.meta_train : out.meta_test).push_back(batch[idx[i]]);
        return out;
    }
    std::shuffle(groups.begin(), groups.end(), rng);
    const size_t half = (groups.size() + 1) / 2;
    std::set<int> train_groups(groups.begin(), groups.begin() + half);
    for (const Sample& s : batch) {
        const int g = mode == MetaSplitMode::ByCamera ? s.camera : s.domain;
        (train_groups.count(g) ? out.meta_train : out.meta_test).push_back(s);
    }
    return out;
}

struct QueryGallery {
    std::vector<Sample> query;
    std::vector<Sample> gallery;
    int single_camera_ids = 0;
};

// One query per identity, drawn from a random camera; every other sample
// goes to the gallery. Identities seen by a single camera cannot be matched
// cross-camera and contribute gallery samples only.
inline QueryGallery make_query_gallery(const DomainDataset& ds, uint64_t seed) {
    std::map<int, std::map<int, std::vector<const Sample*>>> by_id_cam;
    for (const Sample& s : ds.samples) by_id_cam[s.identity][s.camera].push_back(&s);

    auto rng = make_rng(derive_seed(seed, "query_gallery"));
    QueryGallery out;
    for (auto& [id, cams] : by_id_cam) {
        if (cams.size() < 2) {
            ++out.single_camera_ids;
            for (auto& [cam, pool] : cams)
                for (const Sample* s : pool) out.gallery.push_back(*s);
            continue;
        }
        std::vector<int> cam_list;
        for (auto& [cam, pool] : cams) cam_list.push_back(cam);
        std::uniform_int_distribution<int> pick_cam(0, static_cast<int>(cam_list.size()) - 1);
        const int qcam = cam_list[pick_cam(rng)];
        auto& qpool = cams.at(qcam);
        std::uniform_int_distribution<int> pick_q(0, static_cast<int>(qpool.size()) - 1);
        const Sample* q = qpool[pick_q(rng)];
        out.query.push_back(*q);
        for (auto& [cam, pool] : cams)
            for (const Sample* s : pool)
                if (s != q) out.gallery.push_back(*s);
    }
    if (out.single_camera_ids > 0)
        std::cerr << "make_query_gallery: " << out.single_camera_ids
                  << " identity(ies) seen by one camera only; gallery-only\n";
    return out;
}

// ---- text dump format ----
// Header line "sda-dataset domain=<t> input_dim=<d> cameras=<c> samples=<n>",
// then one sample per line: domain identity camera v0..v_{d-1}. Doubles are
// printed with 17 significant digits and round-trip exactly.

inline void dump_dataset(const std::string& path, const DomainDataset& ds) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("dump_dataset: cannot open " + path);
    os << "sda-dataset domain=" << ds.domain << " input_dim=" << ds.input_dim << " cameras=" << ds.camera_count
       << " samples=" << ds.samples.size() << "\n";
    char buf[40];
    for (const Sample& s : ds.samples) {
        os << s.domain << ' ' << s.identity << ' ' << s.camera;
        for (double x : s.x) {
            std::snprintf(buf, sizeof buf, "%.17g", x);
            os << ' ' << buf;
        }
        os << '\n';
    }
    if (!os) throw std::runtime_error("dump_dataset: write failed: " + path);
}

inline DomainDataset load_dataset(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_dataset: cannot open " + path);
    std::string header;
    std::getline(is, header);
    DomainDataset ds;
    size_t count = 0;
    if (std::sscanf(header.c_str(), "sda-dataset domain=%d input_dim=%d cameras=%d samples=%zu", &ds.domain,
                    &ds.input_dim, &ds.camera_count, &count) != 4)
        throw std::runtime_error("load_dataset: bad header in " + path);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        Sample s;
        if (!(ls >> s.domain >> s.identity >> s.camera)) throw std::runtime_error("load_dataset: bad sample line");
        s.x.resize(ds.input_dim);
        for (int i = 0; i < ds.input_dim; ++i)
            if (!(ls >> s.x[i])) throw std::runtime_error("load_dataset: sample line too short");
        ds.samples.push_back(std::move(s));
    }
    if (ds.samples.size() != count) throw std::runtime_error("load_dataset: sample count mismatch");
    return ds;
}

inline Tensor features_of(const std::vector<Sample>& samples) {
    if (samples.empty()) throw std::invalid_argument("features_of: empty sample list");
    Tensor x(static_cast<int>(samples.size()), static_cast<int>(samples[0].x.size()));
    for (size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].x.size() != samples[0].x.size()) throw std::invalid_argument("features_of: ragged samples");
        for (size_t j = 0; j < samples[i].x.size(); ++j) x.at(static_cast<int>(i), static_cast<int>(j)) = samples[i].x[j];
    }
    return x;
}

inline std::vector<int> labels_of(const std::vector<Sample>& samples) {
    std::vector<int> y(samples.size());
    for (size_t i = 0; i < samples.size(); ++i) y[i] = samples[i].identity;
    return y;
}

}  // namespace sda

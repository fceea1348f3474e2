// Joint training with epoch-end atlas updates, 1-pass prediction, test-time
// refinement, inter-subject mapping and per-case evaluation.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "atlas_istn/adam.hpp"
#include "atlas_istn/atlas.hpp"
#include "atlas_istn/losses.hpp"
#include "atlas_istn/metrics.hpp"
#include "atlas_istn/nets.hpp"
#include "atlas_istn/synthdata.hpp"
#include "atlas_istn/warp.hpp"

namespace atlas_istn {

enum class Variant { full, fixed_atlas, svf_only, vml, no_seg_loss, itn_only };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::fixed_atlas: return "fixed_atlas";
        case Variant::svf_only: return "svf_only";
        case Variant::vml: return "vml";
        case Variant::no_seg_loss: return "no_seg_loss";
        case Variant::itn_only: return "itn_only";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    for (Variant v : {Variant::full, Variant::fixed_atlas, Variant::svf_only, Variant::vml, Variant::no_seg_loss,
                      Variant::itn_only})
        if (s == variant_name(v)) return v;
    throw std::invalid_argument("unknown variant '" + s +
                                "' (full, fixed_atlas, svf_only, vml, no_seg_loss, itn_only)");
}

struct AugmentSpec {
    bool enabled = true;
    double translation_px = 4.0;
    double rotation_deg = 15.0;
    double scale_min = 0.9;
    double scale_max = 1.1;
};

struct TrainConfig {
    std::size_t epochs = 300;
    std::size_t batch_size = 8;
    double lr0 = 1e-3;
    double lr_half_life = 200;
    std::size_t affine_start_epoch = 75;
    AugmentSpec augment;
    std::uint64_t seed = 0;
    Variant variant = Variant::full;
    LossWeights weights;
    double eta = 0.01;
    std::size_t n_squarings = 6;
    std::size_t atlas_chunk = 25;  // cases per no-grad forward in the atlas pass
    ItnConfig itn;
    StnConfig stn;

    void validate() const {
        if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (affine_start_epoch > epochs) throw std::invalid_argument("TrainConfig: affine_start_epoch exceeds epochs");
        if (eta < 0 || eta > 1) throw std::invalid_argument("TrainConfig: eta must lie in [0,1]");
        weights.validate();
    }

    // Network configs adjusted for the variant.
    ItnConfig itn_config() const { return itn; }
    StnConfig stn_config() const {
        StnConfig s = stn;
        s.in_channels = variant == Variant::vml ? 2 * itn.in_channels : 2 * (itn.out_channels - 1);
        if (variant == Variant::svf_only) s.affine_enabled = false;
        return s;
    }
};

struct RefineConfig {
    std::size_t iterations = 100;
    double lr = 1e-3;
    double beta_star = 1.0;
    double gamma_star = 0.0;
    double lambda_star = 1.0;
    std::size_t n_squarings = 6;

    LossWeights weights() const {
        LossWeights w;
        w.beta_star = beta_star;
        w.gamma_star = gamma_star;
        w.lambda_star = lambda_star;
        return w;
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double lr = 0, omega = 0;
    double seg = 0, a2s = 0, s2a = 0, reg = 0, total = 0;
    double val_dsc_itn = 0, val_dsc_1pass = 0;
    double affine_max_abs = 0;  // largest |affine parameter| seen in the atlas pass
};

inline nlohmann::json to_json(const EpochRecord& r) {
    return {{"epoch", r.epoch}, {"lr", r.lr},       {"omega", r.omega},         {"seg", r.seg},
            {"a2s", r.a2s},     {"s2a", r.s2a},     {"reg", r.reg},             {"total", r.total},
            {"val_dsc_itn", r.val_dsc_itn},         {"val_dsc_1pass", r.val_dsc_1pass},
            {"affine_max_abs", r.affine_max_abs}};
}

inline EpochRecord epoch_record_from_json(const nlohmann::json& j) {
    EpochRecord r;
    r.epoch = j.at("epoch");
    r.lr = j.at("lr");
    r.omega = j.at("omega");
    r.seg = j.at("seg");
    r.a2s = j.at("a2s");
    r.s2a = j.at("s2a");
    r.reg = j.at("reg");
    r.total = j.at("total");
    r.val_dsc_itn = j.at("val_dsc_itn");
    r.val_dsc_1pass = j.at("val_dsc_1pass");
    r.affine_max_abs = j.at("affine_max_abs");
    return r;
}

struct TrainState {
    ModelParams<float> model;
    AtlasState atlas;
    AdamState<float> adam;
    std::vector<EpochRecord> history;
    std::size_t epoch = 0;  // epochs completed
};

// Whether the model at this stage predicts an affine component.
inline bool affine_active(const TrainConfig& cfg, std::size_t epoch) {
    return cfg.stn_config().affine_enabled && epoch >= cfg.affine_start_epoch;
}

namespace detail {

inline Tensor<float> stack(const std::vector<const Tensor<float>*>& parts) {
    const Shape& s = parts.front()->shape();
    Shape out = s;
    out[0] = 0;
    std::vector<float> data;
    for (const auto* p : parts) {
        if (p->rank() != s.size() || !std::equal(s.begin() + 1, s.end(), p->shape().begin() + 1))
            throw shape_error("stack: inconsistent shapes");
        out[0] += p->size(0);
        data.insert(data.end(), p->data().begin(), p->data().end());
    }
    return Tensor<float>(out, std::move(data));
}

// Hard one-hot of the per-pixel argmax.
inline Tensor<float> harden(const Tensor<float>& soft) {
    const auto lab = argmax_channels(soft);
    const std::size_t n = soft.size(0), c = soft.size(1), hw = soft.size(2) * soft.size(3);
    Tensor<float> out(soft.shape(), 0.f);
    auto d = out.mutable_data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p) d[(b * c + lab[b][p]) * hw + p] = 1.f;
    return out;
}

inline std::mt19937_64 epoch_rng(std::uint64_t seed, std::size_t epoch) {
    return std::mt19937_64(splitmix64(splitmix64(seed) + 0x5851f42d4c957f2dULL * (epoch + 1)));
}

// Random isotropic similarity transforms per case, applied to image and
// label alike; labels are re-hardened after bilinear resampling.
inline void augment(Tensor<float>& x, Tensor<float>& y, const AugmentSpec& a, std::mt19937_64& rng) {
    const std::size_t n = x.size(0), h = x.size(2), w = x.size(3);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
    std::vector<Tensor<float>> fields;
    for (std::size_t b = 0; b < n; ++b) {
        const double tx = uniform(-a.translation_px, a.translation_px);
        const double ty = uniform(-a.translation_px, a.translation_px);
        const double th = uniform(-a.rotation_deg, a.rotation_deg) * M_PI / 180.0;
        const double ls = std::log(uniform(a.scale_min, a.scale_max));
        fields.push_back(affine_field<float>(build_affine(tx, ty, th, ls, ls), h, w));
    }
    std::vector<const Tensor<float>*> ptrs;
    for (auto& f : fields) ptrs.push_back(&f);
    const Tensor<float> field = stack(ptrs);
    NoGradGuard ng;
    x = warp(x, field);
    y = harden(warp(y, field));
}

}  // namespace detail

inline std::size_t n_classes(const TrainConfig& cfg) { return cfg.itn.out_channels; }

// Fresh parameters and initial atlas. The fixed_atlas and itn_only variants
// use training case 0 as their atlas (the latter for independent-STN
// refinement); every other variant starts from the mean of the undeformed
// training cases.
inline TrainState init_train_state(const std::vector<Sample>& train_set, const TrainConfig& cfg) {
    cfg.validate();
    if (train_set.empty()) throw std::invalid_argument("init_train_state: empty training set");
    TrainState st;
    st.model = init_model<float>(cfg.itn_config(), cfg.stn_config(), cfg.seed);
    std::vector<Tensor<float>> labels, images;
    if (cfg.variant == Variant::fixed_atlas || cfg.variant == Variant::itn_only) {
        labels.push_back(train_set.front().label);
        images.push_back(train_set.front().image);
    } else {
        for (const auto& s : train_set) {
            labels.push_back(s.label);
            images.push_back(s.image);
        }
    }
    st.atlas = init_atlas(labels, images, cfg.eta);
    return st;
}

namespace detail {

struct StepResult {
    Tensor<float> loss;
    double seg = 0, a2s = 0, s2a = 0, reg = 0, omega = 0;
    Tensor<float> affine;
};

// Loss for one mini-batch under the configured variant.
inline StepResult variant_loss(const TrainState& st, const TrainConfig& cfg, const Tensor<float>& x,
                               const Tensor<float>& y, std::size_t epoch) {
    const auto& m = st.model;
    const bool aff = affine_active(cfg, epoch);
    StepResult r;
    if (cfg.variant == Variant::itn_only) {
        r.loss = seg_loss(y, itn_forward(x, m.itn, m.itn_config));
        r.seg = r.loss.item();
        return r;
    }
    Tensor<float> y_hat;
    StnOutput<float> so;
    if (cfg.variant == Variant::vml) {
        so = stn_forward(x, st.atlas.image, m.stn, m.stn_config, aff);
    } else {
        y_hat = itn_forward(x, m.itn, m.itn_config);
        so = stn_forward(slice_channels(y_hat, 1, y_hat.size(1)), slice_channels(st.atlas.labelmap, 1, st.atlas.labelmap.size(1)),
                         m.stn, m.stn_config, aff);
    }
    const auto tf = transformation_computation(so.svf, so.affine, cfg.n_squarings);
    const bool use_seg = cfg.variant != Variant::vml && cfg.variant != Variant::no_seg_loss;
    auto terms = total_loss(y, use_seg ? y_hat : y, st.atlas.labelmap, tf, cfg.weights, double(epoch), use_seg);
    r.loss = terms.total;
    r.seg = terms.seg;
    r.a2s = terms.a2s;
    r.s2a = terms.s2a;
    r.reg = terms.reg;
    r.omega = terms.omega;
    r.affine = so.affine;
    return r;
}

}  // namespace detail

struct Transforms {
    Tensor<float> y_hat;    // [N,C,H,W] logits (undefined for vml)
    Tensor<float> phi;      // [N,2,H,W]
    Tensor<float> phi_inv;  // [N,2,H,W]
    Tensor<float> phi_half; // [N,2,H/2,W/2]
    Tensor<float> affine;   // [N,5] or undefined
};

// No-grad forward of a batch of images for any variant with an STN.
inline Transforms infer_transforms(const Tensor<float>& x, const ModelParams<float>& m, const AtlasState& atlas,
                                   Variant variant, bool aff, std::size_t n_squarings = 6) {
    NoGradGuard ng;
    Transforms t;
    StnOutput<float> so;
    if (variant == Variant::vml) {
        so = stn_forward(x, atlas.image, m.stn, m.stn_config, aff);
    } else {
        t.y_hat = itn_forward(x, m.itn, m.itn_config);
        so = stn_forward(slice_channels(t.y_hat, 1, t.y_hat.size(1)),
                         slice_channels(atlas.labelmap, 1, atlas.labelmap.size(1)), m.stn, m.stn_config, aff);
    }
    auto tf = transformation_computation(so.svf, so.affine, n_squarings);
    t.phi = tf.Phi;
    t.phi_inv = tf.Phi_inv;
    t.phi_half = tf.phi_half;
    t.affine = so.affine;
    return t;
}

// Foreground (argmax >= 1) of each batch entry.
inline std::vector<Mask> foreground_masks(const Tensor<float>& soft) {
    const auto lab = argmax_channels(soft);
    std::vector<Mask> out;
    for (const auto& l : lab) {
        Mask m(soft.size(2), soft.size(3));
        for (std::size_t i = 0; i < l.size(); ++i) m.pixels[i] = l[i] >= 1;
        out.push_back(std::move(m));
    }
    return out;
}

namespace detail {

inline double mean_val_dsc(const TrainState& st, const TrainConfig& cfg, const std::vector<Sample>& val,
                           bool one_pass) {
    if (val.empty()) return 0.0;
    NoGradGuard ng;
    double sum = 0;
    for (std::size_t b = 0; b < val.size(); b += cfg.atlas_chunk) {
        std::vector<const Tensor<float>*> xs;
        for (std::size_t i = b; i < std::min(val.size(), b + cfg.atlas_chunk); ++i) xs.push_back(&val[i].image);
        const auto x = stack(xs);
        std::vector<Mask> pred;
        if (one_pass) {
            const auto t = infer_transforms(x, st.model, st.atlas, cfg.variant, affine_active(cfg, st.epoch), cfg.n_squarings);
            pred = foreground_masks(warp(st.atlas.labelmap, t.phi_inv));
        } else {
            pred = foreground_masks(itn_forward(x, st.model.itn, st.model.itn_config));
        }
        for (std::size_t i = 0; i < pred.size(); ++i) sum += dsc(pred[i], val[b + i].mask);
    }
    return sum / double(val.size());
}

}  // namespace detail

using EpochCallback = std::function<void(const TrainState&)>;

// Runs epochs st.epoch .. cfg.epochs-1. Each epoch draws its shuffling and
// augmentation from a generator seeded by (seed, epoch), so a run resumed
// from a saved state continues bit-identically.
inline void train(TrainState& st, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    if (train_set.empty()) throw std::invalid_argument("train: empty training set");
    const bool has_stn = cfg.variant != Variant::itn_only;
    const bool updates_atlas = has_stn && cfg.variant != Variant::fixed_atlas;
    for (std::size_t epoch = st.epoch; epoch < cfg.epochs; ++epoch) {
        auto rng = detail::epoch_rng(cfg.seed, epoch);
        std::vector<std::size_t> order(train_set.size());
        std::iota(order.begin(), order.end(), std::size_t(0));
        std::shuffle(order.begin(), order.end(), rng);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = decayed_learning_rate(cfg.lr0, double(epoch), cfg.lr_half_life);
        rec.omega = cfg.weights.omega.at(double(epoch));
        double total_w = 0;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            std::vector<const Tensor<float>*> xs, ys;
            for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) {
                xs.push_back(&train_set[order[i]].image);
                ys.push_back(&train_set[order[i]].label);
            }
            Tensor<float> x = detail::stack(xs), y = detail::stack(ys);
            if (cfg.augment.enabled) detail::augment(x, y, cfg.augment, rng);
            st.model.itn.zero_grad();
            st.model.stn.zero_grad();
            detail::StepResult r;
            try {
                r = detail::variant_loss(st, cfg, x, y, epoch);
                backward(r.loss);
                adam_step(std::vector<ParamSet<float>*>{&st.model.itn, &st.model.stn}, st.adam, rec.lr);
            } catch (const numeric_error& e) {
                throw numeric_error("training diverged at epoch " + std::to_string(epoch) + ", batch starting at case " +
                                    std::to_string(order[b]) + ": " + e.what());
            }
            const double wgt = double(xs.size());
            total_w += wgt;
            rec.seg += wgt * r.seg;
            rec.a2s += wgt * r.a2s;
            rec.s2a += wgt * r.s2a;
            rec.reg += wgt * r.reg;
            rec.total += wgt * r.loss.item();
        }
        for (double* v : {&rec.seg, &rec.a2s, &rec.s2a, &rec.reg, &rec.total}) *v /= total_w;

        if (updates_atlas) {
            NoGradGuard ng;
            std::vector<Tensor<float>> warped_labels, warped_images;
            for (std::size_t b = 0; b < train_set.size(); b += cfg.atlas_chunk) {
                std::vector<const Tensor<float>*> xs, ys;
                for (std::size_t i = b; i < std::min(train_set.size(), b + cfg.atlas_chunk); ++i) {
                    xs.push_back(&train_set[i].image);
                    ys.push_back(&train_set[i].label);
                }
                const auto x = detail::stack(xs);
                const auto t = infer_transforms(x, st.model, st.atlas, cfg.variant, affine_active(cfg, epoch), cfg.n_squarings);
                if (t.affine.defined()) rec.affine_max_abs = std::max(rec.affine_max_abs, max_abs(t.affine));
                warped_labels.push_back(warp(detail::stack(ys), t.phi));
                warped_images.push_back(warp(x, t.phi));
            }
            epoch_update(st.atlas, warped_labels, warped_images);
        }
        st.epoch = epoch + 1;
        if (cfg.variant != Variant::vml) rec.val_dsc_itn = detail::mean_val_dsc(st, cfg, val_set, false);
        if (has_stn) rec.val_dsc_1pass = detail::mean_val_dsc(st, cfg, val_set, true);
        st.history.push_back(rec);
        if (on_epoch) on_epoch(st);
    }
}

// ---- prediction and refinement -------------------------------------------

struct Prediction {
    Tensor<float> y_hat;          // [1,C,H,W] (undefined for vml)
    Tensor<float> warped_atlas;   // [1,C,H,W] atlas o Phi_inv
    Mask itn_mask;                // argmax(y_hat) >= 1
    Mask atlas_mask;              // argmax(warped_atlas) >= 1
    Tensor<float> phi, phi_inv;   // [1,2,H,W]
    std::vector<double> loss_trace;
};

// Single forward pass; the segmentation is the atlas warped by Phi_inv.
inline Prediction predict_1pass(const Tensor<float>& x, const ModelParams<float>& m, const AtlasState& atlas,
                                Variant variant = Variant::full, bool aff = true, std::size_t n_squarings = 6) {
    NoGradGuard ng;
    const auto t = infer_transforms(x, m, atlas, variant, aff, n_squarings);
    Prediction p;
    p.y_hat = t.y_hat;
    p.phi = t.phi;
    p.phi_inv = t.phi_inv;
    p.warped_atlas = warp(atlas.labelmap, t.phi_inv);
    p.atlas_mask = foreground_masks(p.warped_atlas).front();
    if (t.y_hat.defined()) p.itn_mask = foreground_masks(t.y_hat).front();
    return p;
}

// Optimizes a private copy of STN weights against the fixed ITN logits
// y_hat for rc.iterations Adam steps and returns the warped atlas. The
// loss trace holds the objective before each step and after the last one.
inline Prediction refine_stn(const Tensor<float>& y_hat, ParamSet<float> stn, const StnConfig& stn_cfg,
                             const AtlasState& atlas, const RefineConfig& rc, bool aff = true) {
    const Tensor<float> target = y_hat.detach();
    const Tensor<float> target_fg = slice_channels(target, 1, target.size(1));
    const Tensor<float> atlas_fg = slice_channels(atlas.labelmap, 1, atlas.labelmap.size(1));
    const LossWeights w = rc.weights();
    AdamState<float> adam;
    Prediction p;
    p.y_hat = target;
    p.itn_mask = foreground_masks(target).front();
    for (std::size_t k = 0;; ++k) {
        const bool last = k == rc.iterations;
        std::optional<NoGradGuard> ng;
        if (last) ng.emplace();
        const auto so = stn_forward(target_fg, atlas_fg, stn, stn_cfg, aff);
        const auto tf = transformation_computation(so.svf, so.affine, rc.n_squarings);
        const auto loss = refine_loss(target, atlas.labelmap, tf, w);
        p.loss_trace.push_back(loss.item());
        if (last) {
            p.phi = tf.Phi;
            p.phi_inv = tf.Phi_inv;
            p.warped_atlas = warp(atlas.labelmap, tf.Phi_inv);
            p.atlas_mask = foreground_masks(p.warped_atlas).front();
            return p;
        }
        stn.zero_grad();
        try {
            backward(loss);
            adam_step(stn, adam, rc.lr);
        } catch (const numeric_error& e) {
            throw numeric_error("refinement diverged at iteration " + std::to_string(k) + ": " + e.what());
        }
    }
}

// Test-time refinement of a trained model. Global parameters are untouched.
inline Prediction refine(const Tensor<float>& x, const ModelParams<float>& m, const AtlasState& atlas,
                         const RefineConfig& rc, bool aff = true) {
    Tensor<float> y_hat;
    {
        NoGradGuard ng;
        y_hat = itn_forward(x, m.itn, m.itn_config);
    }
    return refine_stn(y_hat, m.stn.clone(), m.stn_config, atlas, rc, aff);
}

// Refinement from freshly initialized STN weights against a fixed atlas.
inline Prediction refine_independent(const Tensor<float>& x, const ParamSet<float>& itn, const ItnConfig& itn_cfg,
                                     const StnConfig& stn_cfg, const AtlasState& fixed_atlas, const RefineConfig& rc,
                                     std::uint64_t stn_seed) {
    Tensor<float> y_hat;
    {
        NoGradGuard ng;
        y_hat = itn_forward(x, itn, itn_cfg);
    }
    return refine_stn(y_hat, init_stn<float>(stn_cfg, stn_seed), stn_cfg, fixed_atlas, rc, stn_cfg.affine_enabled);
}

struct SubjectMapping {
    Tensor<float> j_to_i;      // (y^a_j o Phi_j) o Phi_i^-1, [1,C,H,W]
    Tensor<float> i_to_j;      // (y^a_i o Phi_i) o Phi_j^-1
    Tensor<float> i_round_trip;  // y^a_i mapped to j and back
    Tensor<float> atlas_i, atlas_j;  // y^a o Phi_i^-1, y^a o Phi_j^-1
};

// Maps the atlas-registered labelmaps of two subjects onto each other
// through atlas space. Each direction composes the two displacement fields
// first and resamples once.
inline SubjectMapping inter_subject_map(const Tensor<float>& phi_i, const Tensor<float>& phi_inv_i,
                                        const Tensor<float>& phi_j, const Tensor<float>& phi_inv_j,
                                        const AtlasState& atlas) {
    NoGradGuard ng;
    SubjectMapping r;
    r.atlas_i = warp(atlas.labelmap, phi_inv_i);
    r.atlas_j = warp(atlas.labelmap, phi_inv_j);
    const auto j_to_i_field = compose_fields(phi_j, phi_inv_i);  // p -> Phi_j(Phi_i^-1(p))
    const auto i_to_j_field = compose_fields(phi_i, phi_inv_j);
    r.j_to_i = warp(r.atlas_j, j_to_i_field);
    r.i_to_j = warp(r.atlas_i, i_to_j_field);
    r.i_round_trip = warp(r.atlas_i, compose_fields(i_to_j_field, j_to_i_field));
    return r;
}

// ---- evaluation ------------------------------------------------------------

enum class Mode { itn, itn_1cc, one_pass, refine };

inline const char* mode_name(Mode m) {
    switch (m) {
        case Mode::itn: return "itn";
        case Mode::itn_1cc: return "itn_1cc";
        case Mode::one_pass: return "1pass";
        case Mode::refine: return "refine";
    }
    return "?";
}

inline Mode parse_mode(const std::string& s) {
    for (Mode m : {Mode::itn, Mode::itn_1cc, Mode::one_pass, Mode::refine})
        if (s == mode_name(m)) return m;
    throw std::invalid_argument("unknown mode '" + s + "' (itn, itn_1cc, 1pass, refine)");
}

struct CaseScore {
    double dsc = 0, asd = 0, hd = 0;
    std::size_t components = 0, holes = 0;
    bool empty = false;
};

// Surface distances of an empty prediction are charged the image diagonal.
inline CaseScore score_case(const Mask& pred, const Mask& truth) {
    CaseScore s;
    s.dsc = dsc(pred, truth);
    const auto topo = topology(pred);
    s.components = topo.components;
    s.holes = topo.holes;
    s.empty = pred.empty();
    if (s.empty || truth.empty()) {
        s.asd = s.hd = std::hypot(double(pred.height), double(pred.width));
    } else {
        s.asd = asd(pred, truth);
        s.hd = hausdorff(pred, truth);
    }
    return s;
}

struct CaseResult {
    std::size_t index = 0;
    std::map<std::string, CaseScore> scores;
    std::vector<double> refine_trace;
    double mice = -1, ic_dsc = -1;  // refined transforms; -1 when not computed
    Mask refine_mask, one_pass_mask, itn_mask;
    Tensor<float> phi, phi_inv;    // refined transforms (or 1-pass when not refining)
};

struct EvalOptions {
    std::vector<Mode> modes{Mode::itn, Mode::itn_1cc, Mode::one_pass, Mode::refine};
    RefineConfig refine;
    Variant variant = Variant::full;
    bool affine = true;
    bool inverse_consistency = false;
    std::size_t workers = 1;
    // Independent-STN refinement (no trained STN): fresh weights per case.
    bool independent_stn = false;
    std::uint64_t independent_seed = 0;
};

inline bool has_mode(const EvalOptions& o, Mode m) {
    return std::find(o.modes.begin(), o.modes.end(), m) != o.modes.end();
}

inline CaseResult evaluate_case(const Sample& s, const ModelParams<float>& m, const AtlasState& atlas,
                                const EvalOptions& o) {
    CaseResult r;
    r.index = s.index;
    const bool itn_modes = has_mode(o, Mode::itn) || has_mode(o, Mode::itn_1cc);
    const bool stn_modes = has_mode(o, Mode::one_pass) || has_mode(o, Mode::refine);
    if (o.variant == Variant::vml && itn_modes) throw std::invalid_argument("evaluate: vml has no ITN");
    if (o.variant == Variant::itn_only && stn_modes && !o.independent_stn)
        throw std::invalid_argument("evaluate: itn_only has no trained STN");
    if (itn_modes) {
        NoGradGuard ng;
        r.itn_mask = foreground_masks(itn_forward(s.image, m.itn, m.itn_config)).front();
        if (has_mode(o, Mode::itn)) r.scores["itn"] = score_case(r.itn_mask, s.mask);
        if (has_mode(o, Mode::itn_1cc)) r.scores["itn_1cc"] = score_case(largest_component(r.itn_mask), s.mask);
    }
    if (has_mode(o, Mode::one_pass)) {
        if (o.independent_stn) {
            RefineConfig zero = o.refine;
            zero.iterations = 0;
            const auto p = refine_independent(s.image, m.itn, m.itn_config, m.stn_config, atlas, zero, o.independent_seed);
            r.one_pass_mask = p.atlas_mask;
            r.phi = p.phi;
            r.phi_inv = p.phi_inv;
        } else {
            const auto p = predict_1pass(s.image, m, atlas, o.variant, o.affine, o.refine.n_squarings);
            r.one_pass_mask = p.atlas_mask;
            r.phi = p.phi;
            r.phi_inv = p.phi_inv;
        }
        r.scores["1pass"] = score_case(r.one_pass_mask, s.mask);
    }
    if (has_mode(o, Mode::refine)) {
        if (o.variant == Variant::vml) throw std::invalid_argument("evaluate: vml cannot be refined against ITN logits");
        const auto p = o.independent_stn
                           ? refine_independent(s.image, m.itn, m.itn_config, m.stn_config, atlas, o.refine, o.independent_seed)
                           : refine(s.image, m, atlas, o.refine, o.affine);
        r.refine_mask = p.atlas_mask;
        r.refine_trace = p.loss_trace;
        r.phi = p.phi;
        r.phi_inv = p.phi_inv;
        r.scores["refine"] = score_case(r.refine_mask, s.mask);
    }
    if (o.inverse_consistency && r.phi.defined()) {
        r.mice = mice(atlas.labelmap, r.phi, r.phi_inv);
        r.ic_dsc = ic_dsc(atlas.labelmap, r.phi, r.phi_inv);
    }
    return r;
}

// Cases are distributed over `workers` threads; results keep case order.
inline std::vector<CaseResult> evaluate_cases(const std::vector<Sample>& cases, const ModelParams<float>& m,
                                              const AtlasState& atlas, const EvalOptions& o) {
    std::vector<CaseResult> out(cases.size());
    const std::size_t workers = std::max<std::size_t>(1, std::min(o.workers, cases.size()));
    if (workers == 1) {
        for (std::size_t i = 0; i < cases.size(); ++i) out[i] = evaluate_case(cases[i], m, atlas, o);
        return out;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i; (i = next.fetch_add(1)) < cases.size();) out[i] = evaluate_case(cases[i], m, atlas, o);
            } catch (...) {
                errors[w] = std::current_exception();
                next = cases.size();
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

struct ModeSummary {
    std::size_t n = 0;
    double dsc_mean = 0, dsc_std = 0, asd_mean = 0, asd_std = 0, hd_mean = 0, hd_std = 0;
    double topology_ok_rate = 0;  // fraction with the target (components, holes)
    std::size_t empty = 0;
};

inline ModeSummary summarize(const std::vector<CaseResult>& cases, const std::string& mode, Topology target = {1, 2}) {
    ModeSummary s;
    std::vector<double> d, a, h;
    std::size_t ok = 0;
    for (const auto& c : cases) {
        auto it = c.scores.find(mode);
        if (it == c.scores.end()) continue;
        d.push_back(it->second.dsc);
        a.push_back(it->second.asd);
        h.push_back(it->second.hd);
        ok += it->second.components == target.components && it->second.holes == target.holes;
        s.empty += it->second.empty;
    }
    s.n = d.size();
    if (s.n == 0) return s;
    auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
        mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
        double acc = 0;
        for (double x : v) acc += (x - mean) * (x - mean);
        sd = std::sqrt(acc / double(v.size()));
    };
    stats(d, s.dsc_mean, s.dsc_std);
    stats(a, s.asd_mean, s.asd_std);
    stats(h, s.hd_mean, s.hd_std);
    s.topology_ok_rate = double(ok) / double(s.n);
    return s;
}

inline nlohmann::json to_json(const CaseScore& s) {
    return {{"dsc", s.dsc}, {"asd", s.asd}, {"hd", s.hd}, {"components", s.components}, {"holes", s.holes},
            {"empty", s.empty}};
}

inline nlohmann::json to_json(const ModeSummary& s) {
    return {{"n", s.n},
            {"dsc", {{"mean", s.dsc_mean}, {"std", s.dsc_std}}},
            {"asd", {{"mean", s.asd_mean}, {"std", s.asd_std}}},
            {"hd", {{"mean", s.hd_mean}, {"std", s.hd_std}}},
            {"topology_ok_rate", s.topology_ok_rate},
            {"empty", s.empty}};
}

inline nlohmann::json cases_json(const std::vector<CaseResult>& cases) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : cases) {
        nlohmann::json j{{"index", c.index}};
        for (const auto& [mode, s] : c.scores) j[mode] = to_json(s);
        if (!c.refine_trace.empty())
            j["refine_loss"] = {{"first", c.refine_trace.front()}, {"last", c.refine_trace.back()}};
        if (c.mice >= 0) {
            j["mice"] = c.mice;
            j["ic_dsc"] = c.ic_dsc;
        }
        arr.push_back(std::move(j));
    }
    return arr;
}

inline nlohmann::json summary_json(const std::vector<CaseResult>& cases, const std::vector<Mode>& modes) {
    nlohmann::json j = nlohmann::json::object();
    for (Mode m : modes) j[mode_name(m)] = to_json(summarize(cases, mode_name(m)));
    double mice_sum = 0, ic_sum = 0;
    std::size_t n = 0;
    for (const auto& c : cases)
        if (c.mice >= 0) {
            mice_sum += c.mice;
            ic_sum += c.ic_dsc;
            ++n;
        }
    if (n) j["inverse_consistency"] = {{"n", n}, {"mice_mean", mice_sum / double(n)}, {"ic_dsc_mean", ic_sum / double(n)}};
    return j;
}

// ---- checkpoints -----------------------------------------------------------

// <dir>/model.json, itn.json, stn.json (+ blobs), atlas files, Adam moments
// and state.json with the epoch counter and history.
inline void save_train_state(const std::filesystem::path& dir, const TrainState& st) {
    save_model(dir, st.model);
    save_atlas(dir, st.atlas);
    nlohmann::json moments = nlohmann::json::array();
    for (const auto& [name, m] : st.adam.m) {
        const auto& v = st.adam.v.at(name);
        const std::string fm = "adam/" + name + ".m.atn1", fv = "adam/" + name + ".v.atn1";
        save_atn1(dir / fm, Tensor<float>(Shape{m.size()}, m));
        save_atn1(dir / fv, Tensor<float>(Shape{v.size()}, v));
        moments.push_back({{"name", name}, {"m", fm}, {"v", fv}});
    }
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& r : st.history) hist.push_back(to_json(r));
    nlohmann::json state{{"epoch", st.epoch},
                         {"adam", {{"step", st.adam.step}, {"beta1", st.adam.beta1}, {"beta2", st.adam.beta2},
                                   {"eps", st.adam.eps}, {"moments", moments}}},
                         {"history", hist}};
    write_text(dir / "state.json", state.dump(2) + "\n");
}

inline TrainState load_train_state(const std::filesystem::path& dir) {
    TrainState st;
    st.model = load_model(dir);
    st.atlas = load_atlas(dir);
    const auto j = nlohmann::json::parse(read_text(dir / "state.json"));
    st.epoch = j.at("epoch");
    const auto& a = j.at("adam");
    st.adam.step = a.at("step");
    st.adam.beta1 = a.at("beta1");
    st.adam.beta2 = a.at("beta2");
    st.adam.eps = a.at("eps");
    for (const auto& e : a.at("moments")) {
        const std::string name = e.at("name");
        auto m = load_atn1(dir / e.at("m").get<std::string>());
        auto v = load_atn1(dir / e.at("v").get<std::string>());
        st.adam.m[name].assign(m.data().begin(), m.data().end());
        st.adam.v[name].assign(v.data().begin(), v.data().end());
    }
    for (const auto& r : j.at("history")) st.history.push_back(epoch_record_from_json(r));
    return st;
}

}  // namespace atlas_istn

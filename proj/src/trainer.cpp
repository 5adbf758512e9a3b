#include "msdet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "msdet/errors.hpp"
#include "msdet/rng.hpp"

namespace msdet {

void validate_trainer_config(const TrainerConfig& cfg)
{
    if (cfg.epochs < 1) throw std::invalid_argument("trainer.epochs must be >= 1");
    if (!(cfg.sgd.lr >= 0) || !(cfg.sgd.momentum >= 0 && cfg.sgd.momentum < 1))
        throw std::invalid_argument("trainer.sgd: lr >= 0 and momentum in [0,1) required");
    if (cfg.rpn_batch.size < 1 || cfg.cls_batch.size < 1) throw std::invalid_argument("trainer batch sizes must be >= 1");
    for (const BatchSpec* b : {&cfg.rpn_batch, &cfg.cls_batch})
        if (!(b->positive_fraction > 0 && b->positive_fraction < 1))
            throw std::invalid_argument("trainer batch positive_fraction must lie in (0, 1)");
    if (cfg.lambda < 0 || !(cfg.beta > 0)) throw std::invalid_argument("trainer.lambda >= 0 and beta > 0 required");
    validate_inference_config(cfg.inference);
    validate_protocol(cfg.protocol);
}

namespace {

Delta weighted(const Delta& d, const Delta& w) { return {d[0] * w[0], d[1] * w[1], d[2] * w[2], d[3] * w[3]}; }

double sample_loss(double logit, int label, const Delta& pred, const Delta& target, double lambda, double beta)
{
    double l = bce_with_logit(logit, label);
    if (label == 1)
        for (int j = 0; j < 4; ++j) l += lambda * smooth_l1(pred[j] - target[j], beta);
    return l;
}

void force_best_anchors(std::vector<RoiSample>& samples, std::span<const Box> anchor_boxes, std::span<const Box> gts,
                        const GtRouting& routing)
{
    for (std::size_t g : routing.in_range) {
        bool has = false;
        for (const auto& s : samples)
            if (s.role == RoiRole::positive && s.matched_gt == g) {
                has = true;
                break;
            }
        if (has) continue;
        double best = 0;
        std::size_t best_i = samples.size();
        for (std::size_t i = 0; i < samples.size(); ++i) {
            if (samples[i].role == RoiRole::discard || samples[i].role == RoiRole::positive) continue;
            const double v = iou(anchor_boxes[i], gts[g]);
            if (v > best) {
                best = v;
                best_i = i;
            }
        }
        if (best_i < samples.size()) {
            samples[best_i].role = RoiRole::positive;
            samples[best_i].matched_gt = g;
            samples[best_i].max_iou = best;
        }
    }
}

} // namespace

StepPlan plan_step(const Model& model, const BackboneState& bb, const AnnotatedImage& img, const SplitScheme& routing,
                   const TrainerConfig& cfg, std::uint64_t seed)
{
    const ModelSpec& spec = model.spec();
    const int W = img.image.width, H = img.image.height;
    const std::span<const Box> gts(img.boxes);
    StepPlan plan;
    plan.heads.resize(spec.heads.size());

    for (std::size_t h = 0; h < spec.heads.size(); ++h) {
        const HeadBinding& hb = spec.heads[h];
        HeadPlan& hp = plan.heads[h];
        const GtRouting route = route_gt(gts, routing, hb.detector_id);
        if (route.in_range.empty()) continue;

        const Tensor& curr = bb.feature(hb.curr_stage);
        const RpnState rpn = model.rpn_forward(h, curr);
        const AnchorSet anchors = model.anchors(h, W, H);
        const std::vector<Box> anchor_boxes = anchors.boxes();

        // proposal branch batch
        std::vector<RoiSample> asamples = label_rois(anchor_boxes, gts, route, hb.detector_id, cfg.thresholds);
        if (cfg.force_best_anchor) force_best_anchors(asamples, anchor_boxes, gts, route);
        BatchSpec rs = cfg.rpn_batch;
        rs.hard_mining = false;
        rs.seed = sub_seed(seed, 2 * h);
        try {
            const Batch b = sample_batch(asamples, rs);
            hp.rpn_stats = batch_stats(asamples, b, build_negative_pool(asamples, sub_seed(rs.seed, 1)).size(),
                                       hb.detector_id);
            for (std::size_t i : b.positives) {
                hp.anchors.push_back(i);
                hp.anchor_labels.push_back(1);
                hp.anchor_targets.push_back(
                    weighted(encode_delta(gts[*asamples[i].matched_gt], anchor_boxes[i]), kRpnDeltaWeights));
            }
            for (std::size_t i : b.negatives) {
                hp.anchors.push_back(i);
                hp.anchor_labels.push_back(0);
                hp.anchor_targets.push_back({0, 0, 0, 0});
            }
        } catch (const EmptyBatchError&) {
        }

        // proposals from the current parameters plus in-range ground truth
        RpnOutput ro{hb.detector_id, anchors, rpn.objectness.data, rpn.deltas.data};
        const auto props = propose(std::span<const RpnOutput>(&ro, 1), cfg.inference, ProposalMode::train, W, H).front();
        std::vector<Box> rois;
        rois.reserve(props.size() + route.in_range.size());
        for (const auto& p : props) rois.push_back(p.box);
        for (std::size_t g : route.in_range) rois.push_back(gts[g]);
        const std::vector<RoiSample> rsamples = label_rois(rois, gts, route, hb.detector_id, cfg.thresholds);

        BatchSpec cs = cfg.cls_batch;
        cs.seed = sub_seed(seed, 2 * h + 1);
        std::vector<double> losses(rsamples.size(), 0.0);
        std::vector<Delta> targets(rsamples.size(), Delta{0, 0, 0, 0});
        for (std::size_t i = 0; i < rsamples.size(); ++i)
            if (rsamples[i].role == RoiRole::positive)
                targets[i] = weighted(encode_delta(gts[*rsamples[i].matched_gt], rois[i]), kClsDeltaWeights);
        const std::vector<std::size_t> pool = build_negative_pool(rsamples, sub_seed(cs.seed, 1));
        if (cs.hard_mining) {
            std::vector<std::size_t> cand = pool;
            for (std::size_t i = 0; i < rsamples.size(); ++i)
                if (rsamples[i].role == RoiRole::positive) cand.push_back(i);
            if (!cand.empty()) {
                std::vector<Box> cboxes;
                for (std::size_t i : cand) cboxes.push_back(rois[i]);
                const ClsState st = model.cls_forward(h, bb.feature(hb.prev_stage), curr, cboxes);
                for (std::size_t k = 0; k < cand.size(); ++k) {
                    const std::size_t i = cand[k];
                    const int label = rsamples[i].role == RoiRole::positive ? 1 : 0;
                    const Delta pred{st.deltas[4 * k], st.deltas[4 * k + 1], st.deltas[4 * k + 2], st.deltas[4 * k + 3]};
                    losses[i] = sample_loss(st.scores[k], label, pred, targets[i], cfg.lambda, cfg.beta);
                }
            }
        }
        try {
            const Batch b = cs.hard_mining ? sample_batch(rsamples, cs, std::span<const double>(losses))
                                           : sample_batch(rsamples, cs);
            hp.cls_stats = batch_stats(rsamples, b, pool.size(), hb.detector_id);
            for (std::size_t i : b.positives) {
                hp.rois.push_back(rois[i]);
                hp.roi_labels.push_back(1);
                hp.roi_targets.push_back(targets[i]);
            }
            for (std::size_t i : b.negatives) {
                hp.rois.push_back(rois[i]);
                hp.roi_labels.push_back(0);
                hp.roi_targets.push_back({0, 0, 0, 0});
            }
        } catch (const EmptyBatchError&) {
        }
    }
    return plan;
}

StepLoss plan_loss(const Model& model, const Tensor& image, const StepPlan& plan, const TrainerConfig& cfg,
                   ParamSet* grads)
{
    return plan_loss(model, model.forward_backbone(image), plan, cfg, grads);
}

StepLoss plan_loss(const Model& model, const BackboneState& bb, const StepPlan& plan, const TrainerConfig& cfg,
                   ParamSet* grads)
{
    const ModelSpec& spec = model.spec();
    if (plan.heads.size() != spec.heads.size()) throw std::invalid_argument("plan_loss: plan does not match model heads");
    const int W = bb.acts[0].dim(3), H = bb.acts[0].dim(2);
    StepLoss out;
    std::vector<Tensor> fgrads(spec.backbone.num_stages());
    auto add = [](LossTerms& acc, const LossTerms& t) {
        acc.total += t.total;
        acc.cls += t.cls;
        acc.box += t.box;
    };

    for (std::size_t h = 0; h < spec.heads.size(); ++h) {
        const HeadPlan& hp = plan.heads[h];
        if (hp.empty()) continue;
        const HeadBinding& hb = spec.heads[h];
        const Tensor& prev = bb.feature(hb.prev_stage);
        const Tensor& curr = bb.feature(hb.curr_stage);

        if (!hp.anchors.empty()) {
            const RpnState rpn = model.rpn_forward(h, curr);
            const AnchorSet anchors = model.anchors(h, W, H);
            const std::size_t n = hp.anchors.size();
            std::vector<double> logits(n), gl(n);
            std::vector<Delta> pred(n), gd(n);
            for (std::size_t k = 0; k < n; ++k) {
                logits[k] = rpn.objectness[hp.anchors[k]];
                pred[k] = anchor_delta(anchors, rpn.deltas.data, hp.anchors[k]);
            }
            const bool want = grads != nullptr;
            add(out.rpn, detection_loss(logits, hp.anchor_labels, pred, hp.anchor_targets, cfg.lambda, cfg.beta,
                                        want ? std::span<double>(gl) : std::span<double>(),
                                        want ? std::span<Delta>(gd) : std::span<Delta>()));
            if (want) {
                Tensor g_obj(rpn.objectness.shape), g_del(rpn.deltas.shape);
                const std::size_t cells = anchors.cells();
                for (std::size_t k = 0; k < n; ++k) {
                    const std::size_t idx = hp.anchors[k], a = idx / cells, cell = idx % cells;
                    g_obj[idx] += gl[k];
                    for (int j = 0; j < 4; ++j) g_del[(a * 4 + j) * cells + cell] += gd[k][j];
                }
                model.rpn_backward(h, curr, rpn, g_obj, g_del, *grads, fgrads[hb.curr_stage]);
            }
        }
        if (!hp.rois.empty()) {
            const ClsState cs = model.cls_forward(h, prev, curr, hp.rois);
            const std::size_t n = hp.rois.size();
            std::vector<double> logits(n), gl(n);
            std::vector<Delta> pred(n), gd(n);
            for (std::size_t k = 0; k < n; ++k) {
                logits[k] = cs.scores[k];
                pred[k] = {cs.deltas[4 * k], cs.deltas[4 * k + 1], cs.deltas[4 * k + 2], cs.deltas[4 * k + 3]};
            }
            const bool want = grads != nullptr;
            add(out.cls, detection_loss(logits, hp.roi_labels, pred, hp.roi_targets, cfg.lambda, cfg.beta,
                                        want ? std::span<double>(gl) : std::span<double>(),
                                        want ? std::span<Delta>(gd) : std::span<Delta>()));
            if (want) {
                Tensor g_s(cs.scores.shape), g_d(cs.deltas.shape);
                for (std::size_t k = 0; k < n; ++k) {
                    g_s[k] = gl[k];
                    for (int j = 0; j < 4; ++j) g_d[4 * k + j] = gd[k][j];
                }
                model.cls_backward(h, prev, curr, cs, g_s, g_d, *grads, fgrads[hb.prev_stage], fgrads[hb.curr_stage]);
            }
        }
    }
    if (grads) model.backward_backbone(bb, fgrads, *grads);
    return out;
}

double clip_gradients(ParamSet& grads, double max_norm)
{
    double sq = 0;
    for (const auto& t : grads.items())
        for (double v : t.value.data) sq += v * v;
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& t : grads.items())
            for (double& v : t.value.data) v *= s;
    }
    return norm;
}

namespace {

struct ModelTrainer {
    ParamSet velocity;
    ParamSet grads;
    int step = 0;
    std::uint64_t seed = 0;
};

bool owns_any(const AnnotatedImage& img, const ModelSpec& spec, const SplitScheme& routing)
{
    for (const Box& b : img.boxes) {
        const auto r = route_range(b.h, routing);
        if (!r) continue;
        for (const auto& h : spec.heads)
            if (h.detector_id == *r) return true;
    }
    return false;
}

} // namespace

TrainResult train(const Dataset& train_set, const Dataset& val, const EnsembleSpec& spec, const TrainerConfig& cfg,
                  std::uint64_t seed, const std::function<void(const std::string&)>& on_epoch)
{
    validate_trainer_config(cfg);
    if (train_set.empty()) throw std::invalid_argument("train: empty training set");
    TrainResult res;
    res.ensemble = Ensemble::create(spec, seed);
    Ensemble& ens = res.ensemble;

    std::vector<ModelTrainer> mt(ens.models.size());
    for (std::size_t m = 0; m < mt.size(); ++m) {
        mt[m].velocity = ens.models[m].params().zeros_like();
        mt[m].grads = ens.models[m].params().zeros_like();
        mt[m].seed = sub_seed(seed, 1000 + m);
    }

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double sums[5] = {};
        std::size_t steps = 0;
        for (std::size_t m = 0; m < ens.models.size(); ++m) {
            Model& model = ens.models[m];
            ModelTrainer& t = mt[m];
            std::vector<std::size_t> order(train_set.size());
            std::iota(order.begin(), order.end(), std::size_t{0});
            Rng rng(sub_seed(t.seed, static_cast<std::uint64_t>(epoch)));
            rng.shuffle(order.begin(), order.end());

            for (std::size_t i : order) {
                const bool flip = cfg.random_flip && rng.coin();
                if (!owns_any(train_set[i], model.spec(), spec.scheme)) continue;
                const AnnotatedImage img = flip ? hflip(train_set[i]) : train_set[i];
                const GrayImage padded = pad_to_multiple(img.image, model.spec().max_stride());
                const BackboneState bb = model.forward_backbone(Model::image_tensor(padded));
                AnnotatedImage view{img.image_id, padded, img.boxes};
                const StepPlan plan =
                    plan_step(model, bb, view, spec.scheme, cfg, sub_seed(t.seed, 1u << 20 | static_cast<unsigned>(t.step)));
                t.grads.set_zero();
                const StepLoss loss = plan_loss(model, bb, plan, cfg, &t.grads);
                if (!std::isfinite(loss.total()) || !t.grads.all_finite()) {
                    if (cfg.divergence_checkpoint) save_checkpoint(*cfg.divergence_checkpoint, ens);
                    throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                                          std::to_string(t.step) + " (model " + std::to_string(m) + ")");
                }
                clip_gradients(t.grads, cfg.sgd.clip_norm);
                const ParamSet last_good = model.params();
                sgd_step(model.params(), t.grads, t.velocity, learning_rate(cfg.sgd, t.step), cfg.sgd.momentum,
                         cfg.sgd.weight_decay);
                if (!model.params().all_finite()) {
                    model.params() = last_good;
                    if (cfg.divergence_checkpoint) save_checkpoint(*cfg.divergence_checkpoint, ens);
                    throw DivergenceError("non-finite parameters after step " + std::to_string(t.step) + " (model " +
                                          std::to_string(m) + ")");
                }
                ++t.step;
                ++steps;
                sums[0] += loss.total();
                sums[1] += loss.rpn.cls;
                sums[2] += loss.rpn.box;
                sums[3] += loss.cls.cls;
                sums[4] += loss.cls.box;
            }
        }

        nlohmann::ordered_json rec;
        rec["epoch"] = epoch + 1;
        rec["steps"] = steps;
        const double d = steps ? static_cast<double>(steps) : 1.0;
        rec["loss"] = {{"total", sums[0] / d}, {"rpn_cls", sums[1] / d}, {"rpn_box", sums[2] / d},
                       {"cls_cls", sums[3] / d}, {"cls_box", sums[4] / d}};
        const bool last = epoch + 1 == cfg.epochs;
        const bool eval_now = !val.empty() && (last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0));
        rec["ap"] = nlohmann::ordered_json::object();
        if (eval_now) {
            const auto dets = detect_all(val, ens, cfg.inference);
            EvalReport report = evaluate(dets, val, cfg.protocol);
            for (const auto& b : report.buckets) rec["ap"][b.name] = b.ap;
            if (last) res.final_report = std::move(report);
        }
        res.metrics.push_back(rec.dump());
        if (on_epoch) on_epoch(res.metrics.back());
    }
    return res;
}

std::vector<SweepRow> stride_sweep(const Dataset& train_set, const Dataset& val, const ScaleRange& bucket,
                                   std::span<const int> candidate_stages, const BackboneSpec& backbone,
                                   const HeadSpec& head, const TrainerConfig& cfg, std::uint64_t seed)
{
    if (candidate_stages.empty()) throw std::invalid_argument("stride_sweep: no candidates");
    TrainerConfig c = cfg;
    c.protocol.buckets = {{"bucket", bucket.lo, bucket.hi}};
    c.eval_every = 0;
    std::vector<SweepRow> rows;
    for (int stage : candidate_stages) {
        EnsembleSpec es;
        es.mode = TrainMode::naive;
        es.scheme = {"bucket", {bucket}};
        es.models.push_back(single_range_spec(bucket, 0, stage, backbone, head));
        const TrainResult r = train(train_set, val, es, c, sub_seed(seed, static_cast<std::uint64_t>(stage)));
        const double ap = r.final_report ? r.final_report->bucket("bucket").ap : 0.0;
        rows.push_back({stage, backbone.stride(stage), ap});
    }
    return rows;
}

int sweep_argmax(std::span<const SweepRow> rows)
{
    if (rows.empty()) throw std::invalid_argument("sweep_argmax: no rows");
    const SweepRow* best = &rows[0];
    for (const auto& r : rows)
        if (r.ap > best->ap || (r.ap == best->ap && r.stride < best->stride)) best = &r;
    return best->stride;
}

} // namespace msdet

#include "msdet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace msdet {

void validate_inference_config(const InferenceConfig& cfg)
{
    if (cfg.max_side < 1) throw std::invalid_argument("inference.max_side must be positive");
    if (cfg.train_budget < 1 || cfg.test_budget < 1 || cfg.pre_nms_top < 1)
        throw std::invalid_argument("inference budgets must be positive");
    auto unit = [](double v, const char* name) {
        if (!(v > 0.0 && v < 1.0)) throw std::invalid_argument(std::string("inference.") + name + " must be in (0,1)");
    };
    unit(cfg.proposal_nms, "proposal_nms");
    unit(cfg.final_nms, "final_nms");
    if (!(cfg.score_floor >= 0.0 && cfg.score_floor < 1.0))
        throw std::invalid_argument("inference.score_floor must be in [0,1)");
}

std::vector<std::size_t> nms_indices(std::span<const Box> boxes, std::span<const double> scores, double threshold,
                                     std::size_t limit)
{
    if (boxes.size() != scores.size()) throw std::invalid_argument("nms: boxes and scores differ in length");
    if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("nms: threshold must be in (0,1)");
    std::vector<std::size_t> order(boxes.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        if (boxes[a].area() != boxes[b].area()) return boxes[a].area() < boxes[b].area();
        return a < b;
    });
    std::vector<std::size_t> kept;
    for (std::size_t i : order) {
        bool keep = true;
        for (std::size_t k : kept)
            if (iou(boxes[i], boxes[k]) > threshold) {
                keep = false;
                break;
            }
        if (!keep) continue;
        kept.push_back(i);
        if (limit > 0 && kept.size() >= limit) break;
    }
    return kept;
}

std::vector<Detection> nms(std::span<const Detection> dets, double threshold)
{
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (const auto& d : dets) {
        boxes.push_back(d.box);
        scores.push_back(d.score);
    }
    std::vector<Detection> out;
    for (std::size_t i : nms_indices(boxes, scores, threshold)) out.push_back(dets[i]);
    return out;
}

Delta anchor_delta(const AnchorSet& anchors, std::span<const double> deltas, std::size_t index)
{
    const std::size_t cells = anchors.cells();
    const std::size_t a = index / cells, cell = index % cells;
    Delta d;
    for (int j = 0; j < 4; ++j) d[j] = deltas[(a * 4 + j) * cells + cell];
    return d;
}

std::vector<std::vector<Detection>> propose(std::span<const RpnOutput> outputs, const InferenceConfig& cfg,
                                            ProposalMode mode, int image_w, int image_h)
{
    validate_inference_config(cfg);
    std::vector<std::vector<Detection>> out;
    for (const RpnOutput& o : outputs) {
        const std::size_t n = o.anchors.size();
        if (o.objectness.size() != n || o.deltas.size() != 4 * n)
            throw std::invalid_argument("propose: output size does not match the anchor set");

        // pre-NMS truncation by score with the same tie-break as nms
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        const std::size_t top = std::min<std::size_t>(n, static_cast<std::size_t>(cfg.pre_nms_top));
        std::partial_sort(order.begin(), order.begin() + static_cast<long>(top), order.end(),
                          [&](std::size_t a, std::size_t b) {
                              if (o.objectness[a] != o.objectness[b]) return o.objectness[a] > o.objectness[b];
                              return a < b;
                          });
        order.resize(top);

        std::vector<Box> boxes;
        std::vector<double> scores;
        std::vector<std::size_t> source;
        for (std::size_t idx : order) {
            Delta d = anchor_delta(o.anchors, o.deltas, idx);
            for (int j = 0; j < 4; ++j) d[j] /= kRpnDeltaWeights[j];
            const Box b = clip_box(decode_delta(o.anchors.anchor(idx), d), image_w, image_h);
            if (!b.valid()) continue;
            boxes.push_back(b);
            scores.push_back(sigmoid(o.objectness[idx]));
            source.push_back(idx);
        }
        std::vector<Detection> props;
        for (std::size_t k : nms_indices(boxes, scores, cfg.proposal_nms, static_cast<std::size_t>(cfg.budget(mode))))
            props.push_back({boxes[k], scores[k], o.detector_id, {}});
        out.push_back(std::move(props));
    }
    return out;
}

GrayImage pad_to_multiple(const GrayImage& img, int multiple)
{
    const int w = (img.width + multiple - 1) / multiple * multiple;
    const int h = (img.height + multiple - 1) / multiple * multiple;
    if (w == img.width && h == img.height) return img;
    GrayImage out(w, h, 128);
    for (int y = 0; y < img.height; ++y)
        std::copy_n(&img.pixels[static_cast<std::size_t>(y) * img.width], img.width,
                    &out.pixels[static_cast<std::size_t>(y) * w]);
    return out;
}

std::vector<Detection> detect(const AnnotatedImage& image, const Ensemble& ens, const InferenceConfig& cfg)
{
    validate_inference_config(cfg);
    const AnnotatedImage scaled = resize_longest(image, cfg.max_side);
    const int W = scaled.image.width, H = scaled.image.height;
    const int W0 = image.image.width, H0 = image.image.height;
    const double sx = W > 0 ? static_cast<double>(W0) / W : 1.0;
    const double sy = H > 0 ? static_cast<double>(H0) / H : 1.0;

    std::vector<Detection> all;
    for (const Model& model : ens.models) {
        const GrayImage padded = pad_to_multiple(scaled.image, model.spec().max_stride());
        const BackboneState bb = model.forward_backbone(Model::image_tensor(padded));
        for (std::size_t h = 0; h < model.spec().heads.size(); ++h) {
            const HeadBinding& hb = model.spec().heads[h];
            const Tensor& curr = bb.feature(hb.curr_stage);
            const RpnState rpn = model.rpn_forward(h, curr);
            RpnOutput ro{hb.detector_id, model.anchors(h, padded.width, padded.height), rpn.objectness.data,
                         rpn.deltas.data};
            const auto props = propose(std::span<const RpnOutput>(&ro, 1), cfg, ProposalMode::test, W, H).front();
            if (props.empty()) continue;
            std::vector<Box> rois;
            for (const auto& p : props) rois.push_back(p.box);
            const ClsState cs = model.cls_forward(h, bb.feature(hb.prev_stage), curr, rois);
            for (std::size_t i = 0; i < rois.size(); ++i) {
                Delta d;
                for (int j = 0; j < 4; ++j) d[j] = cs.deltas[i * 4 + j] / kClsDeltaWeights[j];
                const Box b = clip_box(decode_delta(rois[i], d), W, H);
                if (!b.valid()) continue;
                all.push_back({b, sigmoid(cs.scores[i]), hb.detector_id, image.image_id});
            }
        }
    }
    std::vector<Detection> out;
    for (Detection d : nms(all, cfg.final_nms)) {
        if (d.score < cfg.score_floor) continue;
        if (W != W0 || H != H0) {
            d.box = clip_box({d.box.x * sx, d.box.y * sy, d.box.w * sx, d.box.h * sy}, W0, H0);
            if (!d.box.valid()) continue;
        }
        out.push_back(d);
    }
    return out;
}

std::vector<Detection> detect_all(const Dataset& data, const Ensemble& ens, const InferenceConfig& cfg)
{
    std::vector<std::vector<Detection>> per(data.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < data.size(); ++i) per[i] = detect(data[i], ens, cfg);
    std::vector<Detection> out;
    for (auto& v : per) out.insert(out.end(), v.begin(), v.end());
    return out;
}

std::string detection_line(const Detection& d)
{
    nlohmann::json j;
    j["detector_id"] = d.detector_id;
    j["h"] = d.box.h;
    j["image_id"] = d.image_id;
    j["score"] = d.score;
    j["w"] = d.box.w;
    j["x"] = d.box.x;
    j["y"] = d.box.y;
    return j.dump();
}

Detection parse_detection_line(const std::string& line)
{
    try {
        const auto j = nlohmann::json::parse(line);
        Detection d;
        d.image_id = j.at("image_id").get<std::string>();
        d.box = {j.at("x").get<double>(), j.at("y").get<double>(), j.at("w").get<double>(), j.at("h").get<double>()};
        d.score = j.at("score").get<double>();
        d.detector_id = j.value("detector_id", std::size_t{0});
        if (!std::isfinite(d.score) || d.score < 0 || d.score > 1)
            throw std::invalid_argument("detection score outside [0,1]");
        return d;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("bad detection line: ") + e.what());
    }
}

void save_detections(const std::filesystem::path& path, std::span<const Detection> dets)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    for (const auto& d : dets) f << detection_line(d) << "\n";
}

std::vector<Detection> load_detections(const std::filesystem::path& path)
{
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    std::vector<Detection> out;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) out.push_back(parse_detection_line(line));
    return out;
}

} // namespace msdet

#include "costdet/autodiff.hpp"
#include "costdet/box.hpp"
#include "costdet/errors.hpp"
#include "costdet/evaluator.hpp"
#include "costdet/losses.hpp"
#include "costdet/syndata.hpp"
#include "costdet/trainer.hpp"

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <tuple>

namespace py = pybind11;
using namespace costdet;

namespace {

using BoxTuple = std::tuple<double, double, double, double>;

Box to_box(const BoxTuple& t)
{
    return {std::get<0>(t), std::get<1>(t), std::get<2>(t), std::get<3>(t)};
}

std::vector<Box> to_boxes(const std::vector<BoxTuple>& ts)
{
    std::vector<Box> out;
    for (const auto& t : ts) {
        out.push_back(to_box(t));
    }
    return out;
}

// Returns the loss and d(loss)/d(probs).
std::pair<double, std::vector<double>> lesion_loss(const std::vector<double>& probs, const std::vector<int>& labels,
                                                   double alpha, double beta)
{
    losses::CostConfig cfg;
    cfg.alpha_lesion = alpha;
    cfg.beta_lesion = beta;
    ad::Value p = ad::Value::parameter({probs.size()}, probs);
    ad::Value loss = losses::lesion_cost_loss(p, labels, cfg);
    ad::backward(loss);
    const auto g = p.grad();
    return {loss.item(), {g.begin(), g.end()}};
}

py::dict match(const std::vector<std::tuple<double, double, double, double, double>>& dets,
               const std::vector<BoxTuple>& gt, double iou_thresh)
{
    std::vector<detector::Detection> ds;
    for (const auto& [x1, y1, x2, y2, s] : dets) {
        ds.push_back({Box{x1, y1, x2, y2}, s, {}});
    }
    const auto boxes = to_boxes(gt);
    const auto r = eval::match_lesions(ds, boxes, iou_thresh);
    py::dict d;
    d["tp"] = r.tp;
    d["fp"] = r.fp;
    d["fn"] = r.fn;
    return d;
}

std::string generate(const std::string& config_json, const std::string& out_dir)
{
    auto cfg = nlohmann::json::parse(config_json).get<syndata::GenConfig>();
    cfg.validate();
    const auto slices = syndata::generate(cfg);
    const auto m = syndata::save_dataset(slices, out_dir);
    return nlohmann::json{{"train", m.train_count},
                          {"val", m.val_count},
                          {"test", m.test_count},
                          {"sha256", syndata::dataset_digest(slices)}}
        .dump();
}

std::string digest(const std::string& dir)
{
    return syndata::dataset_digest(syndata::load_dataset(dir));
}

std::string train(const std::string& data_dir, const std::string& checkpoint, const std::string& config_json)
{
    const auto cfg = nlohmann::json::parse(config_json).get<trainer::TrainConfig>();
    const auto data = syndata::load_dataset(data_dir);
    const auto result = trainer::train(data, cfg);
    trainer::save_checkpoint(checkpoint, result.model, {cfg.seed, cfg.cost, nlohmann::json(cfg)});
    nlohmann::json losses = nlohmann::json::array();
    for (const auto& row : result.log.rows) {
        losses.push_back(row.total);
    }
    return nlohmann::json{{"updates", result.updates}, {"epoch_loss", losses}}.dump();
}

std::string evaluate(const std::string& data_dir, const std::string& checkpoint, const std::string& split,
                     double threshold, int max_det)
{
    const auto data = syndata::load_dataset(data_dir);
    const auto part = syndata::filter_split(data, syndata::split_from_string(split));
    const auto ck = trainer::load_checkpoint(checkpoint);
    return eval::to_json(eval::evaluate(ck.model, part, threshold, max_det)).dump();
}

} // namespace

PYBIND11_MODULE(_core, m)
{
    m.doc() = "Cost-sensitive two-stage lesion detector";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

    m.def("iou", [](const BoxTuple& a, const BoxTuple& b) { return iou(to_box(a), to_box(b)); });
    m.def(
        "nms",
        [](const std::vector<BoxTuple>& boxes, const std::vector<double>& scores, double thr) {
            return nms(to_boxes(boxes), scores, thr);
        },
        py::arg("boxes"), py::arg("scores"), py::arg("iou_threshold") = 0.5);
    m.def("lesion_loss", &lesion_loss, py::arg("probs"), py::arg("labels"), py::arg("alpha") = 1.0,
          py::arg("beta") = 1.0);
    m.def("match_lesions", &match, py::arg("detections"), py::arg("gt"), py::arg("iou_thresh") = eval::kLesionIou);
    m.def("generate", &generate, py::arg("config_json"), py::arg("out_dir"));
    m.def("dataset_digest", &digest, py::arg("data_dir"));
    m.def("train", &train, py::arg("data_dir"), py::arg("checkpoint"), py::arg("config_json"),
          py::call_guard<py::gil_scoped_release>());
    m.def("evaluate", &evaluate, py::arg("data_dir"), py::arg("checkpoint"), py::arg("split") = "test",
          py::arg("threshold") = 0.7, py::arg("max_det") = 6, py::call_guard<py::gil_scoped_release>());
}

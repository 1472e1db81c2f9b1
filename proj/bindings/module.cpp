// Python bindings for the core operations: schedules, masking, the
// distillation cross-entropy, evaluation metrics, perturbations, and the
// pretrain/eval/analyze entry points.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ibot/app.hpp"

namespace py = pybind11;
using namespace ibot;

namespace {

Tensor<double> tensor_from(py::array_t<double, py::array::c_style | py::array::forcecast> a) {
  std::vector<std::size_t> shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[i] = static_cast<std::size_t>(a.shape(i));
  std::vector<double> data(a.data(), a.data() + a.size());
  return Tensor<double>::from(std::move(shape), std::move(data));
}

Image image_from(py::array_t<float, py::array::c_style | py::array::forcecast> a) {
  if (a.ndim() != 3) throw std::invalid_argument("image array must be (h, w, c)");
  Image im(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
           static_cast<std::size_t>(a.shape(2)));
  std::copy(a.data(), a.data() + a.size(), im.pix.begin());
  return im;
}

py::array_t<float> image_to(const Image& im) {
  py::array_t<float> out({im.h, im.w, im.c});
  std::copy(im.pix.begin(), im.pix.end(), out.mutable_data());
  return out;
}

RunConfig config_from(const std::map<std::string, std::string>& kv) {
  RunConfig cfg;
  for (const auto& [k, v] : kv) cfg.set(k, v);
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "masked image modeling with an online tokenizer: core operations";

  // schedules and bookkeeping
  m.def(
      "effective_epochs",
      [](double epochs, std::size_t global_count, std::size_t global_size, std::size_t local_count,
         std::size_t local_size) {
        CropConfig cc;
        cc.global_count = global_count;
        cc.global_size = global_size;
        cc.local_count = local_count;
        cc.local_size = local_size;
        return effective_epochs(epochs, cc);
      },
      py::arg("epochs"), py::arg("global_count") = 2, py::arg("global_size") = 224, py::arg("local_count") = 10,
      py::arg("local_size") = 96, "multi-crop effective epoch count");
  m.def(
      "cosine_lr",
      [](std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr, double final_lr) {
        TrainConfig tc;
        tc.epochs = total_steps;
        tc.steps_per_epoch = 1;
        tc.warmup_epochs = warmup_steps;
        tc.base_lr_scale = base_lr * 256.0 / tc.batch_size;
        tc.final_lr = final_lr;
        return lr_at(step, tc);
      },
      py::arg("step"), py::arg("total_steps"), py::arg("warmup_steps"), py::arg("base_lr"), py::arg("final_lr"),
      "warmup plus cosine learning rate at a step");

  // masking
  m.def(
      "blockwise_mask",
      [](std::size_t grid_h, std::size_t grid_w, double ratio, std::uint64_t seed) {
        Rng rng(seed);
        auto spec = ibot::blockwise_mask(grid_h, grid_w, ratio, rng);
        py::array_t<std::uint8_t> mask({grid_h, grid_w});
        std::copy(spec.mask.begin(), spec.mask.end(), mask.mutable_data());
        return py::make_tuple(mask, spec.realized_ratio());
      },
      py::arg("grid_h"), py::arg("grid_w"), py::arg("ratio"), py::arg("seed"),
      "(mask, realized_ratio) for one blockwise draw");
  m.def(
      "sample_mask_ratio",
      [](double p_zero, double lo, double hi, std::uint64_t seed) {
        RatioPolicy pol;
        pol.p_zero = p_zero;
        pol.range_lo = lo;
        pol.range_hi = hi;
        Rng rng(seed);
        return sample_ratio(pol, rng);
      },
      py::arg("p_zero") = 0.5, py::arg("lo") = 0.1, py::arg("hi") = 0.5, py::arg("seed") = 0);

  // the distillation cross-entropy
  m.def(
      "distill_cross_entropy",
      [](py::array_t<double> student_logits, py::array_t<double> teacher_logits, py::array_t<double> center,
         double tau_s, double tau_t) {
        auto s = tensor_from(student_logits);
        auto t = tensor_from(teacher_logits);
        auto c = tensor_from(center);
        auto out = distill_ce(s, t, c, tau_s, tau_t);
        py::array_t<double> arr(out.shape());
        std::copy(out.data().begin(), out.data().end(), arr.mutable_data());
        return arr;
      },
      py::arg("student_logits"), py::arg("teacher_logits"), py::arg("center"), py::arg("tau_s") = 0.1,
      py::arg("tau_t") = 0.04, "per-item H(student, centered sharpened teacher) with stop-gradient semantics");
  m.def(
      "mean_color_token",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> patch, std::size_t channels) {
        std::vector<float> pix(patch.data(), patch.data() + patch.size());
        return mean_color_token(pix, channels);
      },
      py::arg("patch"), py::arg("channels") = 3, "3-bit-per-channel fixed tokenizer id of a patch");

  // evaluation metrics
  m.def(
      "knn_classify",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> features, std::vector<std::size_t> labels,
         std::size_t num_classes, py::array_t<double, py::array::c_style | py::array::forcecast> queries,
         std::size_t k, double temperature) {
        if (features.ndim() != 2 || queries.ndim() != 2) throw std::invalid_argument("features must be 2-d");
        FeatureBank bank;
        bank.dim = static_cast<std::size_t>(features.shape(1));
        bank.features.assign(features.data(), features.data() + features.size());
        bank.labels = std::move(labels);
        bank.num_classes = num_classes;
        for (std::size_t i = 0; i < bank.labels.size(); ++i) bank.ids.push_back(i);
        std::vector<double> q(queries.data(), queries.data() + queries.size());
        return ibot::knn_classify(bank, q, k, temperature);
      },
      py::arg("features"), py::arg("labels"), py::arg("num_classes"), py::arg("queries"), py::arg("k") = 10,
      py::arg("temperature") = 0.07, "cosine weighted-vote k-NN prediction");
  m.def(
      "cluster_metrics",
      [](std::vector<std::size_t> pred, std::vector<std::size_t> truth) {
        auto r = ibot::cluster_metrics(pred, truth);
        return py::dict(py::arg("acc") = r.acc, py::arg("ari") = r.ari, py::arg("nmi") = r.nmi,
                        py::arg("fmi") = r.fmi);
      },
      py::arg("pred"), py::arg("truth"), "clustering agreement: accuracy, ARI, NMI, FMI");

  // image perturbations
  m.def(
      "occlusion_perturb",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> image, double ratio, const std::string& mode,
         std::size_t patch_size, std::vector<double> attention, std::uint64_t seed) {
        OcclusionMode om;
        if (mode == "salient") om = OcclusionMode::salient;
        else if (mode == "non_salient") om = OcclusionMode::non_salient;
        else if (mode == "random") om = OcclusionMode::random;
        else throw std::invalid_argument("mode must be salient, non_salient, or random");
        Rng rng(seed);
        return image_to(ibot::occlusion_perturb(image_from(image), ratio, om, patch_size, attention, rng));
      },
      py::arg("image"), py::arg("ratio"), py::arg("mode") = "random", py::arg("patch_size") = 8,
      py::arg("attention") = std::vector<double>{}, py::arg("seed") = 0);
  m.def(
      "shuffle_perturb",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> image, std::size_t grid, std::uint64_t seed) {
        Rng rng(seed);
        return image_to(ibot::shuffle_perturb(image_from(image), grid, rng));
      },
      py::arg("image"), py::arg("grid"), py::arg("seed") = 0);

  // pipeline entry points
  m.def(
      "generate_synthetic",
      [](const std::string& out_dir, std::size_t classes, std::size_t per_class, std::size_t size,
         std::uint64_t seed) {
        auto man = ibot::generate_synthetic(out_dir, {classes, per_class, size, seed});
        return man.size();
      },
      py::arg("out_dir"), py::arg("classes") = 4, py::arg("per_class") = 500, py::arg("size") = 32,
      py::arg("seed") = 0, "write a labeled synthetic dataset, returns the sample count");
  m.def(
      "pretrain",
      [](const std::map<std::string, std::string>& config, const std::string& resume) {
        return cmd_pretrain(config_from(config), resume);
      },
      py::arg("config"), py::arg("resume") = "", "run pretraining; config maps dotted keys to values");
  m.def("evaluate", &cmd_eval, py::arg("protocol"), py::arg("checkpoint"), py::arg("data_dir"), py::arg("report_dir"),
        "run an evaluation protocol and write its report");
  m.def("analyze", &cmd_analyze, py::arg("kind"), py::arg("checkpoint"), py::arg("images"), py::arg("export_dir"),
        "write attention, token-layout, or correspondence exports");
  m.def(
      "knn_eval",
      [](const std::string& checkpoint, const std::string& train_dir, const std::string& val_dir) {
        auto model = load_model(checkpoint);
        auto train = load_dataset(train_dir);
        auto val = load_dataset(val_dir);
        return eval_knn_best(model.teacher, train, val);
      },
      py::arg("checkpoint"), py::arg("train_dir"), py::arg("val_dir"),
      "best frozen-CLS k-NN accuracy over the {1,5,10,20} grid");
}

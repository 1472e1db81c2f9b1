// ibot command line: pretraining, evaluation, analysis, and synthetic data
// generation for the self-distillation masked image modeling core.

#include <CLI11.hpp>
#include <iostream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "ibot/app.hpp"

namespace {

ibot::RunConfig build_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  ibot::RunConfig cfg;
  if (!config_path.empty()) cfg.load_file(config_path);
  for (const auto& kv : overrides) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    auto trim = [](std::string s) {
      auto a = s.find_first_not_of(" \t");
      auto b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    cfg.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // training allocates and frees large graph buffers every step; keep them in
  // the heap instead of cycling mmap/munmap
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"masked image modeling with an online tokenizer"};
  app.require_subcommand(1);

  std::string config_path, resume_path;
  std::vector<std::string> overrides;

  auto* pretrain = app.add_subcommand("pretrain", "run self-distillation pretraining");
  pretrain->add_option("--config", config_path, "config file (key = value lines)");
  pretrain->add_option("--set", overrides, "override a config key, key=value")->take_all();
  pretrain->add_option("--resume", resume_path, "checkpoint to resume from");

  std::string protocol, ckpt_path, data_dir, out_dir;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval->add_option("--protocol", protocol, "knn | linear | part | cluster | robustness")->required();
  eval->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  eval->add_option("--data", data_dir, "dataset directory with manifest.txt")->required();
  eval->add_option("--out", out_dir, "report directory (default: reports/ next to the checkpoint)");

  std::string kind;
  std::vector<std::string> images;
  auto* analyze = app.add_subcommand("analyze", "export attention maps, token layouts, correspondences");
  analyze->add_option("--kind", kind, "attention | token_layout | correspondence")->required();
  analyze->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  analyze->add_option("--image", images, "input image(s), .ppm or .pgm")->take_all();
  analyze->add_option("--out", out_dir, "export directory (default: exports/ next to the checkpoint)");

  ibot::SynthSpec spec;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic labeled dataset");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--classes", spec.classes, "number of classes");
  gen->add_option("--per-class", spec.per_class, "samples per class");
  gen->add_option("--size", spec.size, "image side length");
  gen->add_option("--seed", spec.seed, "generation seed");

  auto* eff = app.add_subcommand("effective-epochs", "report the multi-crop epoch scaling factor");
  double eff_epochs = 1.0;
  eff->add_option("--config", config_path, "config file (key = value lines)");
  eff->add_option("--set", overrides, "override a config key, key=value")->take_all();
  eff->add_option("--epochs", eff_epochs, "actual epoch count to scale");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*pretrain) {
      auto cfg = build_config(config_path, overrides);
      std::size_t steps = ibot::cmd_pretrain(cfg, resume_path, &std::cout);
      std::cout << "done: " << steps << " steps, run dir "
                << (std::filesystem::path(cfg.get("run.dir")) / cfg.get("run.name")).string() << "\n";
    } else if (*eval) {
      if (out_dir.empty()) out_dir = (std::filesystem::path(ckpt_path).parent_path().parent_path() / "reports").string();
      ibot::cmd_eval(protocol, ckpt_path, data_dir, out_dir);
      std::cout << "report written to " << out_dir << "/" << protocol << ".txt\n";
    } else if (*analyze) {
      if (out_dir.empty()) out_dir = (std::filesystem::path(ckpt_path).parent_path().parent_path() / "exports").string();
      ibot::cmd_analyze(kind, ckpt_path, images, out_dir);
      std::cout << "exports written to " << out_dir << "\n";
    } else if (*gen) {
      auto m = ibot::generate_synthetic(gen_out, spec);
      std::cout << "wrote " << m.size() << " images in " << spec.classes << " classes to " << gen_out << "\n";
    } else if (*eff) {
      auto cfg = build_config(config_path, overrides);
      auto crops = ibot::crops_from_config(cfg);
      std::printf("%.2f\n", ibot::effective_epochs(eff_epochs, crops));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

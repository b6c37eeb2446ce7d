#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "moeclip/moeclip.hpp"

namespace fs = std::filesystem;
using namespace moeclip;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kUsage = 2, kNumerical = 3 };

std::optional<std::uint64_t> env_seed() {
  const char* env = std::getenv("MOEC_SEED");
  if (!env) return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (*env == '\0' || *env == '-' || *end != '\0') throw FormatError("MOEC_SEED must be a non-negative integer");
  return v;
}

TrainConfig config_with_env(const std::string& path) {
  TrainConfig c = load_config(path);
  if (auto s = env_seed()) c.seed = *s;
  return c;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw FormatError("cannot create directory '" + dir + "': " + ec.message());
}

void write_text(const fs::path& p, const std::string& text) { detail::write_file(p.string(), text); }

void check_compatible(const Model& m, const Dataset& ds) {
  const std::size_t side = m.config.image_size();
  if (ds.height != side || ds.width != side)
    throw ShapeError("dataset images are " + std::to_string(ds.height) + "x" + std::to_string(ds.width) +
                     " but the checkpoint expects " + std::to_string(side) + "x" + std::to_string(side));
  if (ds.samples.empty()) throw ShapeError("dataset is empty");
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
  const TrainConfig cfg = config_with_env(config_path);
  ensure_dir(out_dir);
  const Dataset train = make_train_set(cfg);
  const std::uint64_t steps = total_steps(cfg, train.size());
  FitResult res = fit(cfg, train, [&](const StepRecord& r) {
    if (r.step % 100 == 0 || r.step + 1 == steps)
      std::fprintf(stderr, "step %llu/%llu epoch %zu lr %.2e loss %.6f\n", static_cast<unsigned long long>(r.step + 1),
                   static_cast<unsigned long long>(steps), r.epoch, r.lr, r.total);
  });
  const std::string bytes = encode_checkpoint(res.checkpoint);
  detail::write_file((fs::path(out_dir) / "checkpoint.moec").string(), bytes);
  write_text(fs::path(out_dir) / "loss_trace.csv", trace_csv(res.trace));
  write_text(fs::path(out_dir) / "config.conf", format_config(cfg));
  std::cout << "checkpoint " << (fs::path(out_dir) / "checkpoint.moec").string() << " digest " << hex64(fnv1a(bytes))
            << "\n";
  return kOk;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& out_dir, bool per_image_pixel,
             bool oracle) {
  const Checkpoint ck = load_checkpoint(ckpt);
  const Dataset ds = load_dataset(data);
  check_compatible(ck.model, ds);
  Predictions pred;
  if (oracle) {
    for (const auto& s : ds.samples) {
      pred.pixel.emplace_back(s.mask.begin(), s.mask.end());
      pred.image.push_back(s.label);
    }
  } else {
    pred = predict(ck.model, ds);
  }
  const auto rows = build_report(ds, pred, per_image_pixel);
  ensure_dir(out_dir);
  const std::string csv = report_csv(rows);
  write_text(fs::path(out_dir) / "report.csv", csv);
  std::cout << csv;
  return kOk;
}

int cmd_gradcheck(double tol, std::uint64_t seed, bool inject_bug) {
  if (auto s = env_seed()) seed = *s;
  const auto entries = gradcheck_suite(seed, tol, inject_bug ? 1.01 : 1.0);
  bool ok = true;
  std::printf("%-8s %-22s %12s %8s  %s\n", "loss", "group", "max_rel_err", "coords", "status");
  for (const auto& e : entries) {
    const auto& r = e.report;
    std::printf("%-8s %-22s %12.3e %8zu  %s", e.loss.c_str(), r.name.c_str(), r.max_rel_error, r.checked,
                r.passed ? "PASS" : "FAIL");
    if (!r.passed)
      std::printf("  worst[%zu] analytic=%.9e numeric=%.9e%s", r.worst_index, r.worst_analytic, r.worst_numeric,
                  r.finite ? "" : " (non-finite loss)");
    std::printf("\n");
    ok = ok && r.passed;
  }
  std::printf("gradcheck %s (tol %.1e)\n", ok ? "PASSED" : "FAILED", tol);
  return ok ? kOk : kCheckFailed;
}

int cmd_inspect(const std::string& ckpt, const std::string& data, const std::string& out_dir) {
  const Checkpoint ck = load_checkpoint(ckpt);
  const Dataset ds = load_dataset(data);
  check_compatible(ck.model, ds);
  const Specialization sp = inspect_specialization(ck.model, ds);
  const Predictions pred = predict(ck.model, ds);
  ensure_dir(out_dir);
  const fs::path maps = fs::path(out_dir) / "maps";
  ensure_dir(maps.string());
  for (std::size_t l = 0; l < sp.similarity.size(); ++l)
    write_text(fs::path(out_dir) / ("similarity_level" + std::to_string(l) + ".csv"), matrix_csv(sp.similarity[l].similarity));
  write_text(fs::path(out_dir) / "utilization.csv", utilization_csv(sp.utilization));
  char name[64];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::snprintf(name, sizeof name, "sample_%04zu.pgm", i);
    write_text(maps / name, encode_pgm(pred.pixel[i], ds.width, ds.height));
  }
  std::printf("mean inter-expert similarity %.6f, load CV^2 %.6f, %zu maps written\n", sp.mean_similarity(),
              sp.load_cv2, ds.size());
  return kOk;
}

int cmd_gen_data(const std::string& config_path, const std::string& out, const std::string& split) {
  const TrainConfig cfg = config_with_env(config_path);
  const Dataset ds = split == "train" ? make_train_set(cfg) : make_test_set(cfg);
  if (auto parent = fs::path(out).parent_path(); !parent.empty()) ensure_dir(parent.string());
  save_dataset(out, ds);
  std::printf("%zu %s images written to %s\n", ds.size(), split.c_str(), out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MoE low-rank adapter for zero-shot anomaly detection on synthetic textures"};
  app.require_subcommand(1);

  std::string config, out, ckpt, data, split = "test";
  bool per_image_pixel = false, oracle = false, inject_bug = false;
  double tol = 1e-4;
  std::uint64_t seed = 0;

  auto* train = app.add_subcommand("train", "train on the seen classes and write a checkpoint");
  train->add_option("--config", config, "config file")->required();
  train->add_option("--out", out, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "image and pixel AUROC/AP per class");
  eval->add_option("--ckpt", ckpt, "checkpoint file")->required();
  eval->add_option("--data", data, "dataset file")->required();
  eval->add_option("--out", out, "output directory")->required();
  eval->add_flag("--per-image-pixel-metrics", per_image_pixel, "average pixel metrics over anomalous images");
  eval->add_flag("--inject-oracle", oracle)->group("");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every gradient");
  grad->add_option("--tol", tol, "maximum relative error")->check(CLI::PositiveNumber);
  grad->add_option("--seed", seed, "instance seed");
  grad->add_flag("--inject-bug", inject_bug)->group("");

  auto* inspect = app.add_subcommand("inspect", "expert similarity, utilization and anomaly maps");
  inspect->add_option("--ckpt", ckpt, "checkpoint file")->required();
  inspect->add_option("--data", data, "dataset file")->required();
  inspect->add_option("--out", out, "output directory")->required();

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
  gen->add_option("--config", config, "config file")->required();
  gen->add_option("--out", out, "output file")->required();
  gen->add_option("--split", split, "train (seen classes) or test (unseen classes)")
      ->check(CLI::IsMember({"train", "test"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*train) return cmd_train(config, out);
    if (*eval) return cmd_eval(ckpt, data, out, per_image_pixel, oracle);
    if (*grad) return cmd_gradcheck(tol, seed, inject_bug);
    if (*inspect) return cmd_inspect(ckpt, data, out);
    if (*gen) return cmd_gen_data(config, out, split);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

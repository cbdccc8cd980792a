// hyatt: synthetic data, training, evaluation, FLOP accounting and gradient checks.
//
// Errors are reported on stderr as a single line
//   hyatt: error: <kind>: <message>
// with a nonzero exit status.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "hyatt/checkpoint.hpp"
#include "hyatt/flops.hpp"
#include "hyatt/gradcheck_suite.hpp"
#include "hyatt/synthetic.hpp"
#include "hyatt/train.hpp"

namespace fs = std::filesystem;
using namespace hyatt;

namespace {

enum Exit { kOk = 0, kFailed = 1, kUsage = 2, kConfig = 3, kData = 4, kCheckpoint = 5, kInternal = 6 };

int report_error(const char* kind, std::string message, int code) {
  const std::string prefix = std::string(kind) + ": ";
  if (message.rfind(prefix, 0) == 0) message.erase(0, prefix.size());
  for (auto& c : message) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  std::fprintf(stderr, "hyatt: error: %s: %s\n", kind, message.c_str());
  return code;
}

std::string resolve_relative(const std::string& base_file, const std::string& path) {
  if (path.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(base_file).parent_path() / path).string();
}

int cmd_gen(const std::string& spec_path, const std::string& out) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(spec_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<file>", "invalid JSON in " + spec_path + ": " + e.what());
  }
  const SyntheticSpec spec = synthetic_spec_from_json(j);
  const DatasetManifest m = generate_synthetic(spec, out);
  std::printf("wrote %zu images and %s\n", m.samples.size(), (fs::path(out) / "manifest.json").c_str());
  return kOk;
}

int cmd_train(const std::string& config_path, const std::string& out, bool quiet) {
  const HyattConfig cfg = with_env_seed(load_config(config_path));
  if (cfg.train_manifest.empty()) throw ConfigError("train_manifest", "required for training");
  const Dataset train_set = load_dataset(resolve_relative(config_path, cfg.train_manifest), cfg.in_channels);
  std::optional<Dataset> val_set;
  if (!cfg.val_manifest.empty()) val_set = load_dataset(resolve_relative(config_path, cfg.val_manifest), cfg.in_channels);
  check_compatible(cfg, train_set, "train");
  if (val_set) check_compatible(cfg, *val_set, "validation");

  const TrainResult r = train(cfg, train_set, val_set ? &*val_set : nullptr, [&](const EpochLog& e) {
    if (quiet) return;
    std::printf("epoch %zu iterations %zu loss %.6g", e.epoch, e.iterations, e.loss);
    if (e.val_mre) std::printf(" val_mre %.4f", *e.val_mre);
    std::printf("\n");
    std::fflush(stdout);
  });
  write_training_outputs(out, r);
  const EvalReport rep = evaluate(r.net, train_set, cfg.sdr_thresholds);
  std::printf("train %s\n", rep.summary().c_str());
  return kOk;
}

int cmd_eval(const std::string& ckpt, const std::string& manifest, const std::string& out) {
  const HyattNet<float> net = load_checkpoint(ckpt);
  const Dataset ds = load_dataset(manifest, net.config().in_channels);
  const EvalReport rep = evaluate(net, ds, net.config().sdr_thresholds);
  write_report(out, rep);
  std::printf("%s\n%s", rep.summary().c_str(), rep.csv().c_str());
  return kOk;
}

int cmd_flops(const std::string& config_path) {
  const FlopReport r = flops_report(load_config(config_path));
  std::printf("%s", r.csv().c_str());
  bool ok = true;
  for (const auto& s : r.stages) ok = ok && s.counters_match() && s.ratio_is_exact();
  std::printf("total_dense_macs=%llu total_bra_macs=%llu counters_match=%s\n", (unsigned long long)r.total_dense(),
              (unsigned long long)r.total_bra(), ok ? "yes" : "no");
  return ok ? kOk : kFailed;
}

int cmd_gradcheck(bool extended, std::size_t samples) {
  bool ok = true;
  auto print = [&](const GradCheckResult& r) {
    std::printf("op %-22s checked %5zu max_rel %.3e %s\n", r.name.c_str(), r.checked, r.max_rel_error, r.passed ? "PASS" : "FAIL");
    ok = ok && r.passed;
  };
  if (extended) {
    for (const auto& r : op_gradcheck_suite<double>(op_check_options(true))) print(r);
  } else {
    for (const auto& r : op_gradcheck_suite<float>(op_check_options(false))) print(r);
    HyattConfig cfg;
    cfg.height = cfg.width = 64;
    NetworkGradCheckOptions opt;
    opt.samples = samples;
    const auto r = network_gradcheck(cfg, opt);
    for (const auto& p : r.probes) {
      std::printf("net %s[%zu] analytic % .6e numeric % .6e rel %.3e\n", p.parameter.c_str(), p.element, p.analytic, p.numeric,
                  p.rel_error);
    }
    std::printf("network 64x64 probes %zu max_rel %.3e %s\n", r.probes.size(), r.max_rel_error, r.passed ? "PASS" : "FAIL");
    ok = ok && r.passed;
  }
  return ok ? kOk : kFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HYATT-Net landmark detector"};
  app.require_subcommand(1);

  std::string spec, out, config, checkpoint, manifest;
  bool quiet = false, extended = false;
  std::size_t samples = 24;

  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  gen->add_option("--spec", spec, "Synthetic spec JSON")->required();
  gen->add_option("--out", out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train from a config file");
  tr->add_option("--config", config, "Config JSON")->required();
  tr->add_option("--out", out, "Output directory")->required();
  tr->add_flag("--quiet", quiet, "No per-epoch output");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ev->add_option("--manifest", manifest, "Dataset manifest")->required();
  ev->add_option("--out", out, "Output directory")->required();

  auto* fl = app.add_subcommand("flops", "Token-attention MAC report");
  fl->add_option("--config", config, "Config JSON")->required();

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_flag("--extended-precision", extended, "Double precision, strict tolerance");
  gc->add_option("--samples", samples, "Parameters probed in the network check")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what(), kUsage);
  }

  try {
    if (*gen) return cmd_gen(spec, out);
    if (*tr) return cmd_train(config, out, quiet);
    if (*ev) return cmd_eval(checkpoint, manifest, out);
    if (*fl) return cmd_flops(config);
    if (*gc) return cmd_gradcheck(extended, samples);
  } catch (const ConfigError& e) {
    return report_error("config", e.what(), kConfig);
  } catch (const ManifestError& e) {
    return report_error("manifest", e.what(), kData);
  } catch (const ImageError& e) {
    return report_error("image", e.what(), kData);
  } catch (const CheckpointError& e) {
    return report_error("checkpoint", e.what(), kCheckpoint);
  } catch (const IoError& e) {
    return report_error("io", e.what(), kData);
  } catch (const DimensionError& e) {
    return report_error("dimension", e.what(), kData);
  } catch (const std::exception& e) {
    return report_error("runtime", e.what(), kInternal);
  }
  return kUsage;
}

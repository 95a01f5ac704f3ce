#pragma once

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dnet/analysis.hpp"
#include "dnet/checkpoint.hpp"
#include "dnet/config_json.hpp"
#include "dnet/gradcheck.hpp"
#include "dnet/model.hpp"
#include "dnet/training.hpp"
#include "dnet/volume_io.hpp"

// Command-line front end. Exit codes: 0 success, 1 runtime failure (single
// "ERR: ..." line on stderr), 2 usage error.

namespace dnet::cli {

namespace detail_cli {

inline ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
  nlohmann::json j;
  in >> j;
  return config_from_json(j);
}

inline train::SynthSpec load_synth_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open synth spec file '" + path + "'");
  nlohmann::json j;
  in >> j;
  return synth_spec_from_json(j);
}

inline std::array<std::size_t, 3> parse_dims(const std::string& s) {
  std::array<std::size_t, 3> dims{};
  std::stringstream ss(s);
  std::string tok;
  int i = 0;
  while (std::getline(ss, tok, ',')) {
    if (i >= 3) throw std::runtime_error("expected three input dims, got '" + s + "'");
    dims[i++] = static_cast<std::size_t>(std::stoull(tok));
  }
  if (i != 3) throw std::runtime_error("expected three input dims, got '" + s + "'");
  return dims;
}

inline std::vector<analysis::ErfLayer> parse_erf_layers(const std::string& s) {
  std::vector<analysis::ErfLayer> layers;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    analysis::ErfLayer l;
    if (std::sscanf(tok.c_str(), "%d:%d:%d", &l.kernel, &l.dilation, &l.stride) != 3) {
      throw std::runtime_error("bad layer '" + tok + "', expected kernel:dilation:stride");
    }
    layers.push_back(l);
  }
  return layers;
}

inline std::string format_count(std::uint64_t n, double unit, const char* suffix) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2)
     << static_cast<double>(n) / unit << suffix;
  return os.str();
}

inline nlohmann::json report_to_json(const analysis::FlopReport& r) {
  nlohmann::json j;
  j["input_extents"] = r.input_extents;
  j["total_params"] = r.total_params;
  j["total_macs"] = r.total_macs;
  j["total_flops_x1"] = r.total_flops_x1;
  j["total_flops_x2"] = r.total_flops_x2;
  j["notes"] = r.notes;
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"path", l.path},
                      {"param_count", l.param_count},
                      {"macs", l.macs},
                      {"flops_x1", l.flops_x1},
                      {"flops_x2", l.flops_x2}});
  }
  j["layers"] = layers;
  return j;
}

struct GroupAgg {
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

inline void print_report_table(std::ostream& out, const analysis::FlopReport& r,
                               bool per_layer) {
  std::vector<std::pair<std::string, GroupAgg>> rows;
  if (per_layer) {
    for (const auto& l : r.layers) rows.push_back({l.path, {l.param_count, l.macs}});
  } else {
    std::map<std::string, GroupAgg> groups;
    std::vector<std::string> order;
    for (const auto& l : r.layers) {
      const std::size_t dot = l.path.find('.');
      std::string g = dot == std::string::npos ? l.path : l.path.substr(0, dot);
      if (!groups.count(g)) order.push_back(g);
      groups[g].params += l.param_count;
      groups[g].macs += l.macs;
    }
    for (const auto& g : order) rows.push_back({g, groups[g]});
  }
  std::size_t width = 12;
  for (const auto& [name, agg] : rows) width = std::max(width, name.size());
  out << std::left << std::setw(static_cast<int>(width) + 2) << "layer"
      << std::right << std::setw(14) << "params" << std::setw(18) << "macs"
      << "\n";
  for (const auto& [name, agg] : rows) {
    out << std::left << std::setw(static_cast<int>(width) + 2) << name
        << std::right << std::setw(14) << agg.params << std::setw(18) << agg.macs
        << "\n";
  }
  out << std::left << std::setw(static_cast<int>(width) + 2) << "total"
      << std::right << std::setw(14) << r.total_params << std::setw(18)
      << r.total_macs << "\n";
}

inline void write_trace_csv(const std::string& path,
                            const std::vector<train::TraceRow>& trace) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open trace file '" + path + "'");
  out << "step,lr,loss,dice,iou\n";
  out << std::setprecision(17);
  for (const auto& row : trace) {
    out << row.step << "," << row.lr << "," << row.loss << "," << row.dice << ","
        << row.iou << "\n";
  }
}

inline void write_trace_json(const std::string& path,
                             const std::vector<train::TraceRow>& trace) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : trace) {
    rows.push_back({{"step", row.step},
                    {"lr", row.lr},
                    {"loss", row.loss},
                    {"dice", row.dice},
                    {"iou", row.iou}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open trace file '" + path + "'");
  out << rows.dump(2) << "\n";
}

}  // namespace detail_cli

inline int run(const std::vector<std::string>& args, std::ostream& out,
               std::ostream& err) {
  CLI::App app{"D-Net volumetric segmentation toolkit"};
  app.require_subcommand(1);

  // summary / flops
  std::string config_path, input_dims_str = "96,96,96";
  bool as_json = false, per_layer = false;
  auto* summary = app.add_subcommand("summary", "parameters, FLOPs and ERF");
  summary->add_option("--config", config_path, "model config JSON")->required();
  summary->add_option("--input-dims", input_dims_str, "D,H,W input patch dims");
  summary->add_flag("--json", as_json, "emit JSON");
  summary->add_flag("--per-layer", per_layer, "per-layer rows in the text table");

  auto* flops = app.add_subcommand("flops", "FLOP/MAC report");
  flops->add_option("--config", config_path, "model config JSON")->required();
  flops->add_option("--input-dims", input_dims_str, "D,H,W input patch dims");
  flops->add_flag("--json", as_json, "emit JSON");
  flops->add_flag("--per-layer", per_layer, "per-layer rows in the text table");

  // infer
  std::string weights_path, input_path, output_path;
  bool argmax = false, force = false;
  auto* infer = app.add_subcommand("infer", "run a forward pass on a volume");
  infer->add_option("--config", config_path, "model config JSON")->required();
  infer->add_option("--weights", weights_path, "checkpoint (.dnw)")->required();
  infer->add_option("--input", input_path, "input volume (.dvol)")->required();
  infer->add_option("--output", output_path, "output volume (.dvol)")->required();
  infer->add_flag("--argmax", argmax, "write argmax labels instead of logits");
  infer->add_flag("--force", force, "load despite config hash mismatch");

  // gradcheck
  double tol = 1e-3;
  std::uint64_t seed = 0;
  std::size_t samples = 8;
  auto* gradcheck = app.add_subcommand("gradcheck",
                                       "finite-difference gradient verification");
  gradcheck->add_option("--config", config_path, "model config JSON")->required();
  gradcheck->add_option("--tol", tol, "relative error tolerance");
  gradcheck->add_option("--seed", seed, "seed for inputs and sampling");
  gradcheck->add_option("--samples", samples, "elements checked per tensor (0=all)");

  // train-toy
  std::string spec_path, out_weights, trace_path, trace_json_path;
  std::int64_t steps = 100;
  double lr = 0.05, momentum = 0.9, poly_power = 0.9;
  double lambda_dice = 0.5, lambda_ce = 0.5;
  int batch = 2, eval_interval = 10;
  auto* train_toy = app.add_subcommand("train-toy",
                                       "train on synthetic spheres at desk scale");
  train_toy->add_option("--config", config_path, "model config JSON")->required();
  train_toy->add_option("--spec", spec_path, "synthetic dataset spec JSON")->required();
  train_toy->add_option("--steps", steps, "optimization steps")->required();
  train_toy->add_option("--seed", seed, "training seed");
  train_toy->add_option("--out", out_weights, "output checkpoint (.dnw)");
  train_toy->add_option("--trace", trace_path, "metric trace CSV");
  train_toy->add_option("--trace-json", trace_json_path, "metric trace JSON");
  train_toy->add_option("--lr", lr, "initial learning rate");
  train_toy->add_option("--momentum", momentum, "SGD momentum");
  train_toy->add_option("--poly-power", poly_power, "poly decay exponent");
  train_toy->add_option("--lambda-dice", lambda_dice, "Dice loss weight");
  train_toy->add_option("--lambda-ce", lambda_ce, "cross-entropy loss weight");
  train_toy->add_option("--batch", batch, "batch size");
  train_toy->add_option("--eval-interval", eval_interval, "steps between evals");

  // erf
  std::string layers_str;
  auto* erf = app.add_subcommand("erf", "effective receptive field of a cascade");
  erf->add_option("--layers", layers_str,
                  "comma-separated kernel:dilation:stride triples")
      ->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    err << app.help();
    return 2;
  }

  try {
    if (summary->parsed() || flops->parsed()) {
      const ModelConfig config = detail_cli::load_config(config_path);
      const auto dims = detail_cli::parse_dims(input_dims_str);
      const analysis::FlopReport report = analysis::model_report(config, dims);
      const std::int64_t dlk_erf_value = analysis::compute_erf({{5, 1, 1}, {7, 3, 1}});
      const std::int64_t encoder_erf =
          analysis::compute_erf(analysis::encoder_erf_layers(config));
      if (as_json) {
        nlohmann::json j = detail_cli::report_to_json(report);
        if (summary->parsed()) {
          j["config"] = config_to_json(config);
          j["dlk_erf"] = dlk_erf_value;
          j["encoder_erf"] = encoder_erf;
        }
        out << j.dump(2) << "\n";
      } else {
        if (summary->parsed()) {
          out << "variant: " << to_string(config.variant)
              << "  C=" << config.base_width
              << "  stages=" << config.num_stages
              << "  classes=" << config.num_classes << "\n";
          out << "DLK ERF: " << dlk_erf_value
              << "   encoder path ERF: " << encoder_erf << "\n";
        }
        out << "input " << extents_to_string(report.input_extents) << "\n";
        detail_cli::print_report_table(out, report, per_layer);
        out << "params: " << detail_cli::format_count(report.total_params, 1e6, " M")
            << "   flops(x1): "
            << detail_cli::format_count(report.total_flops_x1, 1e9, " G")
            << "   flops(x2): "
            << detail_cli::format_count(report.total_flops_x2, 1e9, " G") << "\n";
      }
      return 0;
    }

    if (infer->parsed()) {
      const ModelConfig config = detail_cli::load_config(config_path);
      Model<float> model = build_model<float>(config);
      const WeightStore expected = store_from_model(model);
      const WeightStore loaded = load_weights(weights_path);
      if (loaded.config_hash != expected.config_hash && !force) {
        throw std::runtime_error(
            "checkpoint config hash mismatch (expected " +
            std::to_string(expected.config_hash) + ", file has " +
            std::to_string(loaded.config_hash) + "); pass --force to override");
      }
      load_model_from_store(model, loaded, force);
      const VolumeData vol = load_volume(input_path);
      if (!std::holds_alternative<DenseTensor<float>>(vol)) {
        throw std::runtime_error("infer: input volume must hold f32 intensities");
      }
      const DenseTensor<float> input = as_batched(std::get<DenseTensor<float>>(vol));
      const DenseTensor<float> logits = model_forward(model, input, RunMode::eval);
      if (argmax) {
        train::LabelVolume labels = train::argmax_labels(logits);
        if (labels.extents[0] == 1) {
          // [1, D, H, W] already matches the rank-4 single-channel layout
          save_volume(output_path, labels);
        } else {
          labels.extents = {labels.extents[0], 1, labels.extents[1],
                            labels.extents[2], labels.extents[3]};
          save_volume(output_path, labels);
        }
      } else {
        save_volume(output_path, logits);
      }
      return 0;
    }

    if (gradcheck->parsed()) {
      const ModelConfig config = detail_cli::load_config(config_path);
      Model<double> model = build_model<double>(config);
      const std::size_t mult = config.required_multiple();
      DenseTensor<double> input(
          {1, static_cast<std::size_t>(config.in_channels), mult, mult, mult});
      SplitMix64 rng(seed ^ 0xabcdef12ULL);
      for (double& v : input.data) v = rng.uniform(-1.0, 1.0);
      train::LabelVolume labels;
      labels.extents = {1, mult, mult, mult};
      labels.data.resize(mult * mult * mult);
      for (auto& l : labels.data) {
        l = static_cast<std::uint16_t>(
            rng.uniform_int(0, config.num_classes - 1));
      }
      train::LossConfig loss_cfg;
      auto make_loss = [&](Session<double>& s, Model<double>& m) {
        Var logits = model_forward_on(s, m, s.tape.leaf(input));
        return train::combined_loss_op(s.tape, logits, labels, loss_cfg);
      };
      const GradCheckReport report =
          gradcheck_params(model, make_loss, 1e-3, tol, samples, seed);
      for (const auto& g : report.groups) {
        out << (g.pass ? "PASS" : "FAIL") << "  " << std::left << std::setw(12)
            << g.group << "  max_rel_err=" << std::scientific
            << std::setprecision(3) << g.max_rel_err << "  (" << g.checked
            << " elements";
        if (g.skipped) out << ", " << g.skipped << " at kinks skipped";
        out << ")\n";
      }
      out << (report.pass ? "PASS" : "FAIL") << "  overall  max_rel_err="
          << std::scientific << std::setprecision(3) << report.max_rel_err
          << "  (" << report.checked << " elements, " << report.skipped
          << " skipped, tol " << tol << ")\n";
      return report.pass ? 0 : 1;
    }

    if (train_toy->parsed()) {
      const ModelConfig config = detail_cli::load_config(config_path);
      const train::SynthSpec spec = detail_cli::load_synth_spec(spec_path);
      train::OptimConfig optim;
      optim.lr0 = lr;
      optim.momentum = momentum;
      optim.poly_power = poly_power;
      train::LossConfig loss_cfg;
      loss_cfg.lambda_dice = lambda_dice;
      loss_cfg.lambda_ce = lambda_ce;
      const train::TrainResult result = train::train_toy(
          config, spec, steps, seed, optim, loss_cfg, batch, eval_interval);
      if (!out_weights.empty()) save_weights(result.weights, out_weights);
      if (!trace_path.empty()) detail_cli::write_trace_csv(trace_path, result.trace);
      if (!trace_json_path.empty()) {
        detail_cli::write_trace_json(trace_json_path, result.trace);
      }
      const train::TraceRow& last = result.trace.back();
      out << std::fixed << std::setprecision(4) << "steps=" << last.step
          << " loss=" << last.loss << " dice=" << last.dice
          << " iou=" << last.iou << "\n";
      return 0;
    }

    if (erf->parsed()) {
      const auto layers = detail_cli::parse_erf_layers(layers_str);
      out << analysis::compute_erf(layers) << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    err << "ERR: " << e.what() << "\n";
    return 1;
  }
  err << "ERR: no subcommand executed\n";
  return 1;
}

}  // namespace dnet::cli

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "stcnet/binio.hpp"
#include "stcnet/checkpoint.hpp"
#include "stcnet/data.hpp"
#include "stcnet/harness.hpp"
#include "stcnet/model.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace stcnet;

namespace {

struct ModelFlags {
  int sigma = 0;
  std::string stream = "joint";
  int k = 4;
  int c_mid = 0;
  std::string exclude_same_node = "on";
  bool straight_line = false;
  double temperature = 1.0;
  double width_scale = 1.0;
  bool no_stc = false;
};

void add_model_flags(CLI::App* cmd, ModelFlags& mf) {
  cmd->add_option("--sigma", mf.sigma, "Dilation scaling factor")->check(CLI::Range(0, 2));
  cmd->add_option("--stream", mf.stream, "Input stream: joint or bone")
      ->check(CLI::IsMember({"joint", "bone"}));
  cmd->add_option("--k", mf.k, "Curve candidates per step");
  cmd->add_option("--c-mid", mf.c_mid, "Curve aggregation width (0: channels/4)");
  cmd->add_option("--exclude-same-node", mf.exclude_same_node,
                  "Drop the current joint from the next frame's candidates")
      ->check(CLI::IsMember({"on", "off"}));
  cmd->add_flag("--straight-line", mf.straight_line, "Chain single nearest neighbors (k=1)");
  cmd->add_option("--temperature", mf.temperature, "Selection softmax temperature");
  cmd->add_option("--width-scale", mf.width_scale, "Uniform channel-width multiplier");
  cmd->add_flag("--no-stc", mf.no_stc, "Replace every curve module with a pointwise stage");
}

model::ModelConfig to_model_config(const ModelFlags& mf) {
  model::ModelConfig mc;
  mc.sigma = mf.sigma;
  mc.stream = harness::parse_stream(mf.stream);
  mc.stc.k = mf.k;
  mc.stc.c_mid = mf.c_mid;
  mc.stc.exclude_same_node = mf.exclude_same_node == "on";
  mc.stc.straight_line = mf.straight_line;
  mc.stc.temperature = mf.temperature;
  if (mf.no_stc) mc.stc_blocks.clear();
  if (mf.width_scale != 1.0) mc = model::scaled_channels(mc, mf.width_scale);
  return mc;
}

std::vector<std::vector<double>> matrix_rows(const Tensor<double>& m) {
  std::vector<std::vector<double>> rows;
  for (int64_t i = 0; i < m.dim(0); ++i) {
    std::vector<double> row;
    for (int64_t j = 0; j < m.dim(1); ++j) row.push_back(m.at(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

void emit(const std::string& text, const std::string& out_path) {
  if (out_path.empty())
    std::cout << text << "\n";
  else
    write_file_bytes(out_path, text + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Skeleton action recognition: curve modules over dilated graph kernels"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic skeleton dataset");
  data::SynthSpec spec;
  int train_per_class = 100, val_per_class = 25;
  std::string gen_out;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--seed", spec.seed, "Generator seed");
  gen->add_option("--nodes", spec.num_nodes, "Joints in the skeleton tree");
  gen->add_option("--frames", spec.frames, "Frames per sample");
  gen->add_option("--classes", spec.num_classes, "Action classes");
  gen->add_option("--train-per-class", train_per_class, "Training samples per class");
  gen->add_option("--val-per-class", val_per_class, "Validation samples per class");
  gen->add_option("--noise", spec.noise_std, "Additive Gaussian noise std");
  gen->callback([&] {
    spec.per_class = train_per_class + val_per_class;
    data::Dataset all = data::generate_synthetic(spec);
    auto [train_ds, val_ds] = data::split_per_class(all, train_per_class);
    fs::create_directories(gen_out);
    data::write_dataset(train_ds, gen_out + "/train.stcd");
    data::write_dataset(val_ds, gen_out + "/val.stcd");
    ordered_json j{{"train", gen_out + "/train.stcd"},
                   {"val", gen_out + "/val.stcd"},
                   {"train_samples", train_ds.size()},
                   {"val_samples", val_ds.size()}};
    std::cout << j.dump() << "\n";
  });

  // train
  auto* tr = app.add_subcommand("train", "Train a model and keep the best-val checkpoint");
  harness::TrainConfig tc;
  ModelFlags tr_mf;
  std::string tr_train, tr_val, tr_out = ".";
  tr->add_option("--train", tr_train, "Training dataset (.stcd)")->required();
  tr->add_option("--val", tr_val, "Validation dataset (.stcd)")->required();
  tr->add_option("--out", tr_out, "Output directory for checkpoint.stck and metrics.jsonl");
  tr->add_option("--seed", tc.seed, "Training seed");
  tr->add_option("--epochs", tc.epochs, "Training epochs");
  tr->add_option("--batch", tc.batch_size, "Batch size");
  tr->add_option("--warmup", tc.warmup_epochs, "Warmup epochs");
  tr->add_option("--base-lr", tc.base_lr, "Peak learning rate");
  tr->add_option("--final-lr", tc.final_lr, "Learning rate at the last epoch");
  tr->add_option("--momentum", tc.momentum, "Nesterov momentum");
  tr->add_option("--weight-decay", tc.weight_decay, "Coupled weight decay");
  add_model_flags(tr, tr_mf);
  tr->callback([&] {
    data::Dataset train_ds = data::read_dataset(tr_train);
    data::Dataset val_ds = data::read_dataset(tr_val);
    tc.sigma = tr_mf.sigma;
    tc.stream = harness::parse_stream(tr_mf.stream);
    fs::create_directories(tr_out);
    harness::TrainResult res =
        harness::train(tc, to_model_config(tr_mf), train_ds, val_ds,
                       tr_out + "/checkpoint.stck", tr_out + "/metrics.jsonl");
    ordered_json j{{"best_epoch", res.best_epoch},
                   {"best_val_acc", res.best_val_acc},
                   {"checkpoint", tr_out + "/checkpoint.stck"},
                   {"metrics", tr_out + "/metrics.jsonl"}};
    std::cout << j.dump() << "\n";
  });

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  std::string ev_ckpt, ev_data, ev_out;
  int ev_batch = 16;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint (.stck)")->required();
  ev->add_option("--data", ev_data, "Dataset (.stcd)")->required();
  ev->add_option("--out", ev_out, "Score file to write (JSON)");
  ev->add_option("--batch", ev_batch, "Batch size");
  ev->callback([&] {
    model::StcNet<float> net = ckpt::load_checkpoint(ev_ckpt);
    data::Dataset ds = data::read_dataset(ev_data);
    harness::EvalResult res = harness::evaluate(net, ds, ev_batch);
    if (!ev_out.empty()) harness::write_scores(res.scores, ev_out);
    ordered_json j{{"accuracy", res.accuracy},
                   {"samples", static_cast<int64_t>(res.scores.labels.size())},
                   {"stream", res.scores.stream},
                   {"sigma", res.scores.sigma}};
    std::cout << j.dump() << "\n";
  });

  // ensemble
  auto* en = app.add_subcommand("ensemble", "Fuse score files by probability sum");
  std::vector<std::string> en_files;
  en->add_option("scores", en_files, "Score files (JSON)")->required()->expected(-1);
  en->callback([&] {
    std::vector<harness::ScoreFile> files;
    for (const auto& p : en_files) files.push_back(harness::read_scores(p));
    harness::EnsembleResult res = harness::ensemble(files);
    ordered_json j{{"fused_accuracy", res.fused_accuracy},
                   {"per_stream_accuracy", res.per_stream_accuracy}};
    std::cout << j.dump() << "\n";
  });

  // dump-adjacency
  auto* da = app.add_subcommand("dump-adjacency", "Print a dilated directional kernel");
  int da_nodes = 15, da_d = 1;
  std::string da_kernel = "cp", da_data, da_out;
  bool da_raw = false;
  da->add_option("--nodes", da_nodes, "Joints in the default body tree");
  da->add_option("--data", da_data, "Dataset whose skeleton to use instead");
  da->add_option("--d", da_d, "Dilation")->required();
  da->add_option("--kernel", da_kernel, "Kernel direction")
      ->check(CLI::IsMember({"cp", "id", "cf"}));
  da->add_flag("--raw", da_raw, "Emit the unnormalized binary kernel");
  da->add_option("--out", da_out, "Write JSON here instead of stdout");
  da->callback([&] {
    graph::SkeletonGraph g =
        da_data.empty() ? data::body_graph(da_nodes) : data::read_dataset(da_data).graph;
    graph::AdjacencyKernelSet ks = graph::kernel_set(g, da_d);
    const Tensor<double>* a = &ks.a_cp;
    const Tensor<int64_t>* u = &ks.u_cp;
    if (da_kernel == "id") a = &ks.a_id, u = &ks.u_id;
    if (da_kernel == "cf") a = &ks.a_cf, u = &ks.u_cf;
    ordered_json j{{"d", da_d}, {"kernel", da_kernel}, {"normalized", !da_raw}};
    j["matrix"] = da_raw ? ordered_json(matrix_rows(u->template cast<double>()))
                         : ordered_json(matrix_rows(*a));
    emit(j.dump(), da_out);
  });

  // export-curves
  auto* ex = app.add_subcommand("export-curves", "Trace curve selections for chosen samples");
  std::string ex_ckpt, ex_data, ex_out, ex_svg;
  std::vector<int64_t> ex_samples;
  ex->add_option("--checkpoint", ex_ckpt, "Checkpoint (.stck)")->required();
  ex->add_option("--data", ex_data, "Dataset (.stcd)")->required();
  ex->add_option("--samples", ex_samples, "Sample indices")->required()->delimiter(',');
  ex->add_option("--out", ex_out, "JSON output path (default stdout)");
  ex->add_option("--svg-dir", ex_svg, "Also render one SVG per sample and block");
  ex->callback([&] {
    model::StcNet<float> net = ckpt::load_checkpoint(ex_ckpt);
    data::Dataset ds = data::read_dataset(ex_data);
    harness::CurveExportOptions opts;
    if (!ex_svg.empty()) {
      fs::create_directories(ex_svg);
      opts.svg_dir = ex_svg;
    }
    emit(harness::export_curves(net, ds, ex_samples, opts), ex_out);
  });

  // count-params / count-flops
  auto* cp = app.add_subcommand("count-params", "Trainable parameter count for a config");
  ModelFlags cp_mf;
  int cp_nodes = 15, cp_classes = 4;
  cp->add_option("--nodes", cp_nodes, "Joints in the skeleton");
  cp->add_option("--classes", cp_classes, "Output classes");
  add_model_flags(cp, cp_mf);
  cp->callback([&] {
    model::ModelConfig mc = to_model_config(cp_mf);
    mc.skeleton = data::body_graph(cp_nodes);
    mc.num_classes = cp_classes;
    std::cout << model::count_params(mc) << "\n";
  });

  auto* cf = app.add_subcommand("count-flops", "Forward FLOPs at batch 1 for a config");
  ModelFlags cf_mf;
  int cf_nodes = 15, cf_classes = 4, cf_frames = 32;
  cf->add_option("--nodes", cf_nodes, "Joints in the skeleton");
  cf->add_option("--classes", cf_classes, "Output classes");
  cf->add_option("--frames", cf_frames, "Frames per sample");
  add_model_flags(cf, cf_mf);
  cf->callback([&] {
    model::ModelConfig mc = to_model_config(cf_mf);
    mc.skeleton = data::body_graph(cf_nodes);
    mc.num_classes = cf_classes;
    std::cout << static_cast<int64_t>(std::llround(model::count_flops(mc, cf_frames))) << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}

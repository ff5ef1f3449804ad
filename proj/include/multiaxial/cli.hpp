#pragma once

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "multiaxial/evaluation.hpp"
#include "multiaxial/nifti_io.hpp"
#include "multiaxial/phantom.hpp"
#include "multiaxial/pipeline.hpp"
#include "multiaxial/postprocess.hpp"
#include "multiaxial/training.hpp"
#include "multiaxial/volume_core.hpp"

namespace multiaxial::cli {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kWeightsEnv = "MULTIAXIAL_WEIGHTS";

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kInternalError = 3 };

/// Raised for flag combinations CLI11 cannot check on its own.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a subcommand needs, filled by the parser and validated before
/// any file is read.
struct RunConfig {
  std::string subcommand;
  std::vector<std::string> inputs;  // -i, or positional for info
  std::vector<std::string> labels;  // reference labels paired with inputs
  std::vector<std::string> val_inputs, val_labels;
  std::vector<std::string> subjects;
  std::string output;
  std::string record;      // conform record (JSON)
  std::string provenance;  // segmentation sidecar; default <output>.provenance.json
  std::string report;
  std::string history;
  std::string weights;  // bundle manifest
  std::string bundle_dir;
  std::array<std::string, 3> axis_models;  // axial, coronal, sagittal
  std::string format = "csv";
  std::string merge = "consensus";
  bool postprocess = true;
  std::int64_t min_voxels = 27;
  std::vector<int> classes;
  std::vector<std::int32_t> exclude;
  std::uint64_t seed = 0;
  int threads = default_threads();
  bool deterministic = false;
  std::string log_level = "info";

  // train / train-consensus
  std::string axis = "axial";
  int depth = 6, base_filters = 16, filter_cap = 64;
  int epochs = 0;
  double lr = 1e-5;
  int batch_size = 8;
  int crop = 0;
  int patience = 0;
  double ce_weight = 0;
  bool ce_balanced = false;
  bool class_mean = false;
  bool cosine = false;
  bool augment = false;
  bool bias = false;
  int stride = 4;

  // split / phantom
  int count = 0;
  std::vector<int> sizes;
  int fold = 0;
  std::vector<std::int64_t> dims;

  void validate() const {
    auto need = [](const std::string& v, const char* flag) {
      if (v.empty()) throw UsageError(std::string("missing ") + flag);
    };
    if (threads < 1) throw UsageError("--threads must be at least 1");
    for (int c : classes)
      if (c < 0 || c >= kNumClasses) throw UsageError("--classes: code " + std::to_string(c) + " out of range");
    if (labels.size() != inputs.size() && (subcommand == "train" || subcommand == "train-consensus"))
      throw UsageError("--image and --label must be given the same number of times");
    if (val_labels.size() != val_inputs.size())
      throw UsageError("--val-image and --val-label must be given the same number of times");
    if (subcommand == "evaluate") {
      if (labels.size() != inputs.size()) throw UsageError("--pred and --truth must be given the same number of times");
      if (!subjects.empty() && subjects.size() != inputs.size())
        throw UsageError("--subject must be given once per --pred");
    }
    if (subcommand == "train" || subcommand == "train-consensus") {
      if (inputs.empty()) throw UsageError("at least one --image/--label pair is required");
      if (epochs < 0) throw UsageError("--epochs must be nonnegative");
      if (!(lr > 0)) throw UsageError("--lr must be positive");
      if (batch_size < 1) throw UsageError("--batch must be positive");
    }
    if (subcommand == "train-consensus")
      for (const auto& m : axis_models) need(m, "--axial/--coronal/--sagittal");
    if (subcommand == "split" && sizes.size() != 3) throw UsageError("--sizes takes three counts");
    if (subcommand == "phantom" && !dims.empty() && dims.size() != 3) throw UsageError("--dims takes three extents");
  }
};

namespace detail {

inline std::shared_ptr<spdlog::logger> make_logger(const std::string& level) {
  auto log = std::make_shared<spdlog::logger>("multiaxial", std::make_shared<spdlog::sinks::stderr_sink_st>());
  log->set_pattern("%Y-%m-%dT%H:%M:%S.%e %l %v");
  log->set_level(spdlog::level::from_str(level));
  return log;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("write error in " + path.string());
}

inline LabelVolume read_labels(const std::string& path) { return to_labels(nifti::read_nifti(path)); }

/// Conformed image and labels of one subject read from disk.
inline train::Subject load_subject(const std::string& image, const std::string& labels) {
  const auto raw = nifti::read_nifti(image);
  const auto lab = read_labels(labels);
  require_same_geometry(raw, lab, "subject");
  auto c = conform(raw);
  auto conformed_labels = conform_labels(lab);
  conformed_labels.affine = c.volume.affine;
  return {std::filesystem::path(image).filename().string(), std::move(c.volume), std::move(conformed_labels)};
}

inline void write_weights(const ModelWeights& w, const std::string& path, spdlog::logger& log) {
  save_weights(w, path);
  log.info("wrote {} ({} parameters)", path, w.element_count());
}

// ---------------------------------------------------------------------------
// Subcommands

inline int run_conform(const RunConfig& cfg, spdlog::logger& log) {
  const auto raw = nifti::read_nifti(cfg.inputs.at(0));
  const auto c = conform(raw);
  log.info("conformed {} ({}x{}x{}), p95 {}", cfg.inputs[0], raw.dims()[0], raw.dims()[1], raw.dims()[2], c.record.p95);
  nifti::write_nifti(c.volume, cfg.output, nifti::DataType::kFloat32);
  write_text(cfg.record, c.record.to_json().dump(2) + "\n");
  return kOk;
}

inline int run_segment(const RunConfig& cfg, spdlog::logger& log) {
  const auto bundle = load_bundle(cfg.weights);
  log.info("loaded weight bundle {}", cfg.weights);
  const auto raw = nifti::read_nifti(cfg.inputs.at(0));
  SegmentOptions opt;
  opt.merge = cfg.merge == "vote" ? MergeMode::kVote : MergeMode::kConsensus;
  opt.postprocess = cfg.postprocess;
  opt.postprocess_config.min_voxels = cfg.min_voxels;
  opt.threads = cfg.threads;
  const auto res = segment(raw, bundle, opt);
  nifti::write_nifti(res.labels, cfg.output, nifti::DataType::kUInt8);
  auto prov = res.provenance;
  prov["input"] = cfg.inputs[0];
  prov["weights"] = cfg.weights;
  prov["version"] = kVersion;
  const auto sidecar = cfg.provenance.empty() ? cfg.output + ".provenance.json" : cfg.provenance;
  write_text(sidecar, prov.dump(2) + "\n");
  log.info("wrote {} and {}", cfg.output, sidecar);
  return kOk;
}

inline int run_postprocess(const RunConfig& cfg, spdlog::logger& log) {
  auto labels = read_labels(cfg.inputs.at(0));
  const auto report = postprocess::apply_all(labels, {cfg.min_voxels});
  log.info("postprocess changed {} voxels in {} rounds", report.total(), report.iterations);
  nifti::write_nifti(labels, cfg.output, nifti::DataType::kUInt8);
  if (!cfg.report.empty()) write_text(cfg.report, report.to_text());
  return kOk;
}

inline std::vector<train::Subject> load_subjects(const std::vector<std::string>& images,
                                                 const std::vector<std::string>& labels, spdlog::logger& log) {
  std::vector<train::Subject> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.push_back(load_subject(images[i], labels[i]));
    log.info("loaded subject {}", out.back().id);
  }
  return out;
}

inline int run_train(const RunConfig& cfg, spdlog::logger& log) {
  UNetConfig net;
  net.depth = cfg.depth;
  net.base_filters = cfg.base_filters;
  net.filter_cap = cfg.filter_cap;
  net.seed = cfg.seed;
  net.validate();
  const Axis axis = axis_from_name(cfg.axis);
  std::vector<std::string> warnings;
  const auto samples = train::slice_dataset(load_subjects(cfg.inputs, cfg.labels, log), axis, &warnings);
  const auto val = train::slice_dataset(load_subjects(cfg.val_inputs, cfg.val_labels, log), axis, &warnings);
  for (const auto& w : warnings) log.warn("{}", w);
  train::TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.lr = cfg.lr;
  tc.seed = cfg.seed;
  tc.augment.enabled = cfg.augment;
  tc.dice_form = cfg.class_mean ? train::DiceForm::kClassMean : train::DiceForm::kGeneralized;
  tc.ce_weight = cfg.ce_weight;
  tc.ce_balanced = cfg.ce_balanced;
  tc.cosine_decay = cfg.cosine;
  tc.crop = cfg.crop;
  tc.patience = cfg.patience;
  tc.threads = cfg.threads;
  tc.on_epoch = [&](const train::EpochRecord& r) { log.info("epoch {} loss {:.6f} val_dice {:.4f}", r.epoch, r.loss, r.val_dice); };
  log.info("training {} model on {} slices", cfg.axis, samples.size());
  const auto res = train::train_axis_model(net, samples, val, tc);
  write_weights(res.weights, cfg.output, log);
  if (!cfg.history.empty()) write_text(cfg.history, train::history_csv(res.history));
  return kOk;
}

inline void gather(const std::vector<train::Subject>& subjects, const std::array<UNet<float>, 3>& nets,
                   train::ConsensusSamples& out, const RunConfig& cfg) {
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    std::array<ProbVolume, 3> p;
    for (std::size_t i = 0; i < 3; ++i) p[i] = infer_axis(nets[i], subjects[s].image.grid, kConsensusOrder[i], cfg.threads);
    train::gather_consensus_samples(p[0], p[1], p[2], subjects[s].labels.grid, out, cfg.stride, 4, cfg.seed + s);
  }
}

inline int run_train_consensus(const RunConfig& cfg, spdlog::logger& log) {
  WeightBundle bundle;
  for (std::size_t i = 0; i < 3; ++i) bundle.model(kConsensusOrder[i]) = load_weights(cfg.axis_models[i]);
  const std::array<UNet<float>, 3> nets{UNet<float>::from_weights(bundle.axial), UNet<float>::from_weights(bundle.coronal),
                                        UNet<float>::from_weights(bundle.sagittal)};
  train::ConsensusSamples tr, va;
  gather(load_subjects(cfg.inputs, cfg.labels, log), nets, tr, cfg);
  gather(load_subjects(cfg.val_inputs, cfg.val_labels, log), nets, va, cfg);
  if (va.size() == 0) va = tr;
  log.info("consensus samples: {} train, {} validation", tr.size(), va.size());
  train::ConsensusTrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.lr = cfg.lr;
  tc.bias = cfg.bias;
  const auto res = train::train_consensus(tr, va, tc);
  log.info("validation Dice {:.4f} -> {:.4f}{}", res.initial_val_dice, res.final_val_dice,
           res.reverted ? " (reverted to diagonal)" : "");
  bundle.consensus = res.layer.to_weights();
  write_weights(bundle.consensus, cfg.output, log);
  if (!cfg.bundle_dir.empty()) log.info("wrote bundle manifest {}", save_bundle(bundle, cfg.bundle_dir).string());
  return kOk;
}

inline int run_evaluate(const RunConfig& cfg, spdlog::logger& log) {
  eval::DiceReport report;
  report.classes = cfg.classes.empty() ? eval::all_classes() : cfg.classes;
  for (std::size_t i = 0; i < cfg.inputs.size(); ++i) {
    const auto pred = read_labels(cfg.inputs[i]);
    const auto truth = read_labels(cfg.labels[i]);
    const auto id = cfg.subjects.empty() ? std::filesystem::path(cfg.inputs[i]).filename().string() : cfg.subjects[i];
    report.add_subject(id, eval::dice_per_class(pred, truth, report.classes));
  }
  report.finalize();
  eval::emit_report(report, cfg.output, cfg.format == "text" ? eval::ReportFormat::kText : eval::ReportFormat::kCsv);
  log.info("wrote {} ({} subjects)", cfg.output, report.rows.size());
  return kOk;
}

inline int run_map_labels(const RunConfig& cfg, spdlog::logger& log) {
  const auto parcels = to_parcels(nifti::read_nifti(cfg.inputs.at(0)));
  const auto truth = read_labels(cfg.labels.at(0));
  const auto r = eval::map_parcellation(parcels, truth, {cfg.exclude.begin(), cfg.exclude.end()});
  nifti::write_nifti(r.remapped, cfg.output, nifti::DataType::kUInt8);
  if (!cfg.report.empty()) {
    std::ostringstream os;
    os << "code,voxels,wm_overlap,gm_overlap,tissue,excluded\n";
    for (const auto& e : r.mapping.entries)
      os << e.code << "," << e.voxels << "," << e.wm_overlap << "," << e.gm_overlap << "," << int(e.tissue) << ","
         << (e.excluded ? 1 : 0) << "\n";
    write_text(cfg.report, os.str());
  }
  log.info("mapped {} parcel codes", r.mapping.entries.size());
  return kOk;
}

inline int run_split(const RunConfig& cfg, spdlog::logger& log) {
  const auto plan = train::make_splits(cfg.count, {cfg.sizes[0], cfg.sizes[1], cfg.sizes[2]}, cfg.seed, cfg.fold);
  write_text(cfg.output, plan.to_json().dump(2) + "\n");
  log.info("wrote split plan {}", cfg.output);
  return kOk;
}

inline nlohmann::json describe_weights(const ModelWeights& w) {
  nlohmann::json j{{"kind", w.kind}, {"version", w.version}, {"metadata", w.metadata}, {"parameters", w.element_count()}};
  auto& tensors = j["tensors"] = nlohmann::json::array();
  for (const auto& t : w.tensors) tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"elements", t.data.size()}});
  if (w.kind == "unet") {
    const auto c = UNetConfig::from_json(w.metadata.at("config"));
    j["config_parameters"] = count_parameters(c);
  }
  return j;
}

inline nlohmann::json describe_nifti(const std::string& path) {
  const auto h = nifti::read_header(path);
  const auto vol = nifti::read_nifti(path);
  return {{"dims", h.dims3()},
          {"datatype", h.datatype},
          {"pixdim", std::vector<float>(h.pixdim.begin() + 1, h.pixdim.begin() + 4)},
          {"scl_slope", h.scl_slope},
          {"scl_inter", h.scl_inter},
          {"qform_code", h.qform_code},
          {"sform_code", h.sform_code},
          {"affine", affine_to_json(vol.affine)},
          {"orientation", nifti::orientation_string(nifti::orientation_codes(vol.affine))}};
}

inline int run_info(const RunConfig& cfg, spdlog::logger&) {
  const auto& path = cfg.inputs.at(0);
  const auto j = nifti::detail::has_suffix(path, ".maxw") ? describe_weights(load_weights(path)) : describe_nifti(path);
  if (cfg.output.empty())
    std::cout << j.dump(2) << "\n";
  else
    write_text(cfg.output, j.dump(2) + "\n");
  return kOk;
}

inline int run_phantom(const RunConfig& cfg, spdlog::logger& log) {
  PhantomSpec spec;
  spec.seed = cfg.seed;
  if (cfg.seed != 0) {
    std::mt19937_64 rng(cfg.seed);
    spec = spec.jittered(rng, 4.0, cfg.seed);
  }
  if (!cfg.dims.empty()) {
    // Shrink or grow the head with the grid; shell thicknesses stay in mm.
    for (int a = 0; a < 3; ++a) {
      const double f = double(cfg.dims[a]) / double(spec.dims[a]);
      spec.center[a] *= f;
      spec.radii[a] *= f;
      spec.sinus_radii[a] *= f;
      if (a == 2) spec.sinus_height *= f;
      spec.dims[a] = cfg.dims[a];
    }
  }
  const auto p = make_phantom(spec);
  nifti::write_nifti(p.image, cfg.output, nifti::DataType::kFloat32);
  nifti::write_nifti(p.labels, cfg.labels.at(0), nifti::DataType::kUInt8);
  log.info("wrote phantom {} and {}", cfg.output, cfg.labels[0]);
  return kOk;
}

}  // namespace detail

/// Parses argv, validates, and runs one subcommand. Log lines go to stderr;
/// results go only to the files named by flags (info prints to stdout when
/// no --out is given).
inline int dispatch(int argc, const char* const* argv) {
  RunConfig cfg;
  CLI::App app{"Whole-head MRI tissue segmentation", "multiaxial"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  app.add_option("--threads", cfg.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--deterministic", cfg.deterministic, "Pin one thread");
  app.add_option("--log-level", cfg.log_level, "trace, debug, info, warn, error or off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  auto common = [&](CLI::App* s) {
    s->add_option("--threads", cfg.threads, "Worker threads")->check(CLI::PositiveNumber);
    s->add_flag("--deterministic", cfg.deterministic, "Pin one thread");
    s->add_option("--seed", cfg.seed, "Random seed");
  };
  auto output = [&](CLI::App* s, const char* what) { s->add_option("-o,--out", cfg.output, what)->required(); };

  auto* conform_cmd = app.add_subcommand("conform", "Resample, reorient, pad/crop to 256^3 and normalize");
  conform_cmd->add_option("-i,--input", cfg.inputs, "Input NIfTI")->required()->expected(1);
  output(conform_cmd, "Conformed NIfTI");
  conform_cmd->add_option("--record", cfg.record, "Conform record (JSON)")->required();
  common(conform_cmd);

  auto* segment_cmd = app.add_subcommand("segment", "Segment a head image into 7 tissue classes");
  segment_cmd->add_option("-i,--input", cfg.inputs, "Input NIfTI")->required()->expected(1);
  output(segment_cmd, "Label NIfTI");
  segment_cmd->add_option("-w,--weights", cfg.weights, "Weight manifest")->envname(kWeightsEnv);
  segment_cmd->add_option("--merge", cfg.merge, "consensus or vote")->check(CLI::IsMember({"consensus", "vote"}));
  segment_cmd->add_flag("!--no-postprocess", cfg.postprocess, "Skip the cleanup rules");
  segment_cmd->add_option("--min-voxels", cfg.min_voxels, "Smallest component kept")->check(CLI::NonNegativeNumber);
  segment_cmd->add_option("--provenance", cfg.provenance, "Provenance sidecar (default <out>.provenance.json)");
  common(segment_cmd);

  auto* post_cmd = app.add_subcommand("postprocess", "Apply the cleanup rules to a label volume");
  post_cmd->add_option("-i,--input", cfg.inputs, "Label NIfTI")->required()->expected(1);
  output(post_cmd, "Cleaned label NIfTI");
  post_cmd->add_option("--min-voxels", cfg.min_voxels, "Smallest component kept")->check(CLI::NonNegativeNumber);
  post_cmd->add_option("--report", cfg.report, "Per-rule change counts");
  common(post_cmd);

  auto training = [&](CLI::App* s) {
    s->add_option("--image", cfg.inputs, "Training image (repeatable)")->required();
    s->add_option("--label", cfg.labels, "Training labels, paired with --image")->required();
    s->add_option("--val-image", cfg.val_inputs, "Validation image (repeatable)");
    s->add_option("--val-label", cfg.val_labels, "Validation labels");
    s->add_option("--epochs", cfg.epochs, "Epochs")->required();
    s->add_option("--lr", cfg.lr, "Adam learning rate");
    common(s);
  };
  auto* train_cmd = app.add_subcommand("train", "Train one per-axis U-Net");
  training(train_cmd);
  output(train_cmd, "Model container (.maxw)");
  train_cmd->add_option("--axis", cfg.axis, "axial, coronal or sagittal")
      ->check(CLI::IsMember({"axial", "coronal", "sagittal"}));
  train_cmd->add_option("--depth", cfg.depth, "U-Net depth");
  train_cmd->add_option("--base", cfg.base_filters, "Filters at level 0");
  train_cmd->add_option("--cap", cfg.filter_cap, "Filter cap");
  train_cmd->add_option("--batch", cfg.batch_size, "Slices per batch");
  train_cmd->add_option("--crop", cfg.crop, "Train on random crops of this size");
  train_cmd->add_option("--patience", cfg.patience, "Early stopping patience (epochs)");
  train_cmd->add_option("--ce-weight", cfg.ce_weight, "Weight of an added cross-entropy term");
  train_cmd->add_flag("--balanced-ce", cfg.ce_balanced, "Class-balanced cross-entropy");
  train_cmd->add_flag("--class-mean", cfg.class_mean, "Mean of per-class Dice instead of generalized Dice");
  train_cmd->add_flag("--cosine", cfg.cosine, "Cosine learning-rate decay");
  train_cmd->add_flag("--augment", cfg.augment, "Random rotation and shear");
  train_cmd->add_option("--history", cfg.history, "Per-epoch loss CSV");

  auto* cons_cmd = app.add_subcommand("train-consensus", "Train the consensus layer on frozen axis models");
  training(cons_cmd);
  output(cons_cmd, "Consensus container (.maxw)");
  cons_cmd->add_option("--axial", cfg.axis_models[0], "Axial model")->required();
  cons_cmd->add_option("--coronal", cfg.axis_models[1], "Coronal model")->required();
  cons_cmd->add_option("--sagittal", cfg.axis_models[2], "Sagittal model")->required();
  cons_cmd->add_flag("--bias", cfg.bias, "Learn a per-class bias");
  cons_cmd->add_option("--stride", cfg.stride, "Voxel sampling stride")->check(CLI::PositiveNumber);
  cons_cmd->add_option("--bundle", cfg.bundle_dir, "Also write a complete bundle with manifest here");

  auto* eval_cmd = app.add_subcommand("evaluate", "Dice report of predictions against references");
  eval_cmd->add_option("--pred", cfg.inputs, "Predicted labels (repeatable)")->required();
  eval_cmd->add_option("--truth", cfg.labels, "Reference labels, paired with --pred")->required();
  eval_cmd->add_option("--subject", cfg.subjects, "Subject ids, paired with --pred");
  eval_cmd->add_option("--classes", cfg.classes, "Class codes to score")->delimiter(',');
  eval_cmd->add_option("--format", cfg.format, "csv or text")->check(CLI::IsMember({"csv", "text"}));
  output(eval_cmd, "Report file");
  common(eval_cmd);

  auto* map_cmd = app.add_subcommand("map-labels", "Map parcellation codes to white and gray matter");
  map_cmd->add_option("--parcels", cfg.inputs, "Parcellation NIfTI")->required()->expected(1);
  map_cmd->add_option("--truth", cfg.labels, "Tissue reference")->required()->expected(1);
  map_cmd->add_option("--exclude", cfg.exclude, "Parcel codes to drop")->delimiter(',');
  map_cmd->add_option("--table", cfg.report, "Mapping table CSV");
  output(map_cmd, "Remapped label NIfTI");
  common(map_cmd);

  auto* split_cmd = app.add_subcommand("split", "Seeded train/validation/test split");
  split_cmd->add_option("--n", cfg.count, "Number of subjects")->required()->check(CLI::NonNegativeNumber);
  split_cmd->add_option("--sizes", cfg.sizes, "train,validation,test")->required()->delimiter(',');
  split_cmd->add_option("--fold", cfg.fold, "Fold index")->check(CLI::NonNegativeNumber);
  output(split_cmd, "Split plan (JSON)");
  common(split_cmd);

  auto* info_cmd = app.add_subcommand("info", "Describe a NIfTI header or a weight container");
  info_cmd->add_option("path", cfg.inputs, "File to inspect")->required()->expected(1);
  info_cmd->add_option("-o,--out", cfg.output, "Write the description here instead of stdout");

  auto* phantom_cmd = app.add_subcommand("phantom", "Write a synthetic head phantom and its labels");
  output(phantom_cmd, "Image NIfTI");
  phantom_cmd->add_option("--labels", cfg.labels, "Label NIfTI")->required()->expected(1);
  phantom_cmd->add_option("--dims", cfg.dims, "Grid extents")->delimiter(',');
  common(phantom_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code == 0) return kOk;
    std::cerr << app.help();
    return kUsage;
  }
  cfg.subcommand = app.get_subcommands().front()->get_name();
  if (cfg.deterministic) cfg.threads = 1;

  auto log = detail::make_logger(cfg.log_level);
  try {
    cfg.validate();
    if (cfg.subcommand == "segment" && cfg.weights.empty())
      throw UsageError(std::string("missing --weights (or set ") + kWeightsEnv + ")");
  } catch (const UsageError& e) {
    log->error("{}", e.what());
    std::cerr << app.get_subcommands().front()->help();
    return kUsage;
  }

  log->info("multiaxial {} {} (threads {})", kVersion, cfg.subcommand, cfg.threads);
  try {
    FlushDenormals ftz;
    const std::string& s = cfg.subcommand;
    if (s == "conform") return detail::run_conform(cfg, *log);
    if (s == "segment") return detail::run_segment(cfg, *log);
    if (s == "postprocess") return detail::run_postprocess(cfg, *log);
    if (s == "train") return detail::run_train(cfg, *log);
    if (s == "train-consensus") return detail::run_train_consensus(cfg, *log);
    if (s == "evaluate") return detail::run_evaluate(cfg, *log);
    if (s == "map-labels") return detail::run_map_labels(cfg, *log);
    if (s == "split") return detail::run_split(cfg, *log);
    if (s == "info") return detail::run_info(cfg, *log);
    if (s == "phantom") return detail::run_phantom(cfg, *log);
    throw std::logic_error("unhandled subcommand " + s);
  } catch (const Error& e) {
    log->error("{}", e.what());
    return kDataError;
  } catch (const std::filesystem::filesystem_error& e) {
    log->error("{}", e.what());
    return kDataError;
  } catch (const std::exception& e) {
    log->critical("internal error: {}", e.what());
    return kInternalError;
  }
}

}  // namespace multiaxial::cli

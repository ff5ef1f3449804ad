#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <set>

#include "multiaxial/cli.hpp"
#include "support/scratch.hpp"

using namespace multiaxial;
using testing_support::ScratchDir;
namespace fs = std::filesystem;

namespace {

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"multiaxial"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::dispatch(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::set<std::string> listing(const fs::path& dir) {
  std::set<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) out.insert(fs::relative(e.path(), dir).string());
  return out;
}

/// Phantom image, labels and a tiny random bundle shared by the suite.
struct Fixture {
  ScratchDir dir{"cli"};
  std::string image = (dir / "head.nii.gz").string();
  std::string labels = (dir / "head_labels.nii.gz").string();
  std::string manifest;
  std::array<std::string, 3> models;

  Fixture() {
    if (run({"phantom", "-o", image, "--labels", labels, "--dims", "150,176,160"}) != 0) throw std::runtime_error("phantom");
    WeightBundle b;
    for (std::uint64_t i = 0; i < 3; ++i) {
      UNetConfig c;
      c.depth = 1;
      c.base_filters = 1;
      c.seed = i + 1;
      b.model(kConsensusOrder[i]) = UNet<float>(c).to_weights();
    }
    b.consensus = ConsensusLayer::diagonal().to_weights();
    manifest = save_bundle(b, dir / "bundle").string();
    for (std::size_t i = 0; i < 3; ++i)
      models[i] = (dir / "bundle" / (std::string(axis_name(kConsensusOrder[i])) + ".maxw")).string();
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST(Dispatch, UsageErrorsExitOne) {
  EXPECT_EQ(run({}), 1);
  EXPECT_EQ(run({"frobnicate"}), 1);
  EXPECT_EQ(run({"split", "--n", "4", "--sizes", "2,1,1", "-o", "x.json", "--bogus"}), 1);
  EXPECT_EQ(run({"split", "--sizes", "2,1,1", "-o", "x.json"}), 1);  // --n missing
  EXPECT_EQ(run({"split", "--n", "4", "--sizes", "2,1", "-o", "x.json"}), 1);
  EXPECT_EQ(run({"segment", "-i", "a.nii", "-o", "b.nii", "-w", "m.txt", "--merge", "median"}), 1);
  EXPECT_EQ(run({"evaluate", "--pred", "a.nii", "--pred", "b.nii", "--truth", "t.nii", "-o", "r.csv"}), 1);
  EXPECT_EQ(run({"evaluate", "--pred", "a.nii", "--truth", "t.nii", "--classes", "2,9", "-o", "r.csv"}), 1);
  EXPECT_FALSE(fs::exists("x.json"));
  EXPECT_EQ(run({"--help"}), 0);
  EXPECT_EQ(run({"segment", "--help"}), 0);
}

TEST(Dispatch, DataErrorsExitTwo) {
  ScratchDir dir("clierr");
  EXPECT_EQ(run({"conform", "-i", (dir / "missing.nii").string(), "-o", (dir / "c.nii").string(), "--record",
                 (dir / "r.json").string()}),
            2);
  EXPECT_EQ(run({"split", "--n", "4", "--sizes", "2,1,2", "-o", (dir / "s.json").string()}), 2);
  {
    std::ofstream os(dir / "manifest.txt");
    os << "axial nowhere.maxw 00\n";
  }
  EXPECT_EQ(run({"segment", "-i", fixture().image, "-o", (dir / "l.nii").string(), "-w", (dir / "manifest.txt").string()}),
            2);
  EXPECT_EQ(listing(dir.path()), (std::set<std::string>{"manifest.txt"}));
}

TEST(Dispatch, WeightsComeFromTheEnvironment) {
  ScratchDir dir("clienv");
  ::unsetenv(cli::kWeightsEnv);
  EXPECT_EQ(run({"segment", "-i", fixture().image, "-o", (dir / "l.nii").string()}), 1);
  ::setenv(cli::kWeightsEnv, (dir / "absent.txt").c_str(), 1);
  // The manifest named by the environment is used; it does not exist.
  EXPECT_EQ(run({"segment", "-i", fixture().image, "-o", (dir / "l.nii").string()}), 2);
  ::unsetenv(cli::kWeightsEnv);
}

TEST(Split, MatchesLibraryAndIsSeeded) {
  ScratchDir dir("clisplit");
  const auto a = dir / "a.json", b = dir / "b.json";
  ASSERT_EQ(run({"split", "--n", "98", "--sizes", "76,12,10", "--seed", "7", "--fold", "2", "-o", a.string()}), 0);
  ASSERT_EQ(run({"split", "--n", "98", "--sizes", "76,12,10", "--seed", "7", "--fold", "2", "-o", b.string()}), 0);
  EXPECT_EQ(slurp(a), slurp(b));
  const auto j = nlohmann::json::parse(slurp(a));
  EXPECT_EQ(j, train::make_splits(98, {76, 12, 10}, 7, 2).to_json());
}

TEST(Conform, WritesVolumeAndRecord) {
  ScratchDir dir("cliconf");
  const auto out = dir / "c.nii.gz", rec = dir / "c.json";
  ASSERT_EQ(run({"conform", "-i", fixture().image, "-o", out.string(), "--record", rec.string()}), 0);
  EXPECT_EQ(listing(dir.path()), (std::set<std::string>{"c.nii.gz", "c.json"}));
  const auto vol = nifti::read_nifti(out);
  EXPECT_EQ(vol.dims(), (Index3{256, 256, 256}));
  const auto r = ConformRecord::from_json(nlohmann::json::parse(slurp(rec)));
  EXPECT_NO_THROW(validate_record(r));
  EXPECT_EQ(r.original_dims, (Index3{150, 176, 160}));
  EXPECT_GT(r.p95, 0);
}

TEST(Postprocess, RepairsDefectAndReports) {
  ScratchDir dir("clipost");
  auto labels = to_labels(nifti::read_nifti(fixture().labels));
  labels.grid(0, 2, 2) = kAir;  // air on the border
  nifti::write_nifti(labels, dir / "in.nii.gz", nifti::DataType::kUInt8);
  ASSERT_EQ(run({"postprocess", "-i", (dir / "in.nii.gz").string(), "-o", (dir / "out.nii.gz").string(), "--report",
                 (dir / "rep.txt").string()}),
            0);
  const auto out = to_labels(nifti::read_nifti(dir / "out.nii.gz"));
  EXPECT_EQ(out.grid(0, 2, 2), kBackground);
  EXPECT_NE(slurp(dir / "rep.txt").find("clear_external_air = 1\n"), std::string::npos);
}

TEST(Evaluate, BrainOnlyReport) {
  ScratchDir dir("clieval");
  auto pred = to_labels(nifti::read_nifti(fixture().labels));
  const auto truth = pred;
  std::int64_t flipped = 0;
  for (std::size_t v = 0; v < pred.grid.size() && flipped < 500; ++v)
    if (pred.grid[v] == kWhiteMatter) pred.grid[v] = kGrayMatter, ++flipped;
  nifti::write_nifti(pred, dir / "p.nii.gz", nifti::DataType::kUInt8);
  const auto rep = dir / "report.csv";
  ASSERT_EQ(run({"evaluate", "--pred", (dir / "p.nii.gz").string(), "--truth", fixture().labels, "--subject", "s1",
                 "--classes", "2,3", "-o", rep.string()}),
            0);
  const auto r = eval::read_report(rep, eval::ReportFormat::kCsv);
  EXPECT_EQ(r.classes, (std::vector<int>{2, 3}));
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.rows[0].subject, "s1");
  const auto expected = eval::dice_per_class(pred, truth, {2, 3});
  EXPECT_NEAR(*r.rows[0].per_class[0], *expected[0], 1e-6);
  EXPECT_NEAR(*r.rows[0].per_class[1], *expected[1], 1e-6);
  EXPECT_LT(*r.rows[0].per_class[0], 1.0);
  EXPECT_EQ(slurp(rep).rfind("subject,2,3,mean\n", 0), 0u);
}

TEST(MapLabels, WritesRemapAndTable) {
  ScratchDir dir("climap");
  const auto truth = to_labels(nifti::read_nifti(fixture().labels));
  ParcelVolume parcels;
  parcels.affine = truth.affine;
  parcels.grid = Grid3<std::int32_t>(truth.dims());
  for (std::size_t v = 0; v < truth.grid.size(); ++v)
    parcels.grid[v] = truth.grid[v] == kWhiteMatter ? 1000 : truth.grid[v] == kGrayMatter ? (v % 2 ? 2000 : 2001) : 0;
  nifti::write_nifti(parcels, dir / "parc.nii.gz", nifti::DataType::kInt32);
  ASSERT_EQ(run({"map-labels", "--parcels", (dir / "parc.nii.gz").string(), "--truth", fixture().labels, "--exclude",
                 "2001", "--table", (dir / "map.csv").string(), "-o", (dir / "out.nii.gz").string()}),
            0);
  const auto out = to_labels(nifti::read_nifti(dir / "out.nii.gz"));
  for (std::size_t v = 0; v < out.grid.size(); ++v) {
    const auto want = parcels.grid[v] == 1000 ? kWhiteMatter : parcels.grid[v] == 2000 ? kGrayMatter : kBackground;
    ASSERT_EQ(out.grid[v], want) << v;
  }
  const auto table = slurp(dir / "map.csv");
  EXPECT_NE(table.find("\n2001,"), std::string::npos);
  EXPECT_NE(table.find(",0,1\n"), std::string::npos);  // 2001: excluded, background
}

TEST(Info, DescribesContainerAndHeader) {
  ScratchDir dir("cliinfo");
  ASSERT_EQ(run({"info", fixture().models[0], "-o", (dir / "w.json").string()}), 0);
  const auto j = nlohmann::json::parse(slurp(dir / "w.json"));
  const auto w = load_weights(fixture().models[0]);
  EXPECT_EQ(j.at("kind"), "unet");
  EXPECT_EQ(j.at("parameters").get<std::int64_t>(), w.element_count());
  EXPECT_EQ(j.at("config_parameters").get<std::int64_t>(), w.element_count());
  EXPECT_EQ(j.at("tensors").size(), w.tensors.size());

  testing::internal::CaptureStdout();
  ASSERT_EQ(run({"info", fixture().image}), 0);
  const auto h = nlohmann::json::parse(testing::internal::GetCapturedStdout());
  EXPECT_EQ(h.at("dims"), (nlohmann::json{150, 176, 160}));
  EXPECT_EQ(h.at("orientation"), "RAS");
}

TEST(Segment, ReproducibleWithSidecar) {
  ScratchDir dir("cliseg");
  const auto& f = fixture();
  const std::vector<std::string> base{"segment", "-i", f.image, "-w", f.manifest, "--seed", "3", "--threads", "1"};
  auto with = [&](std::vector<std::string> extra) {
    auto a = base;
    a.insert(a.end(), extra.begin(), extra.end());
    return run(a);
  };
  ASSERT_EQ(with({"-o", (dir / "a.nii.gz").string()}), 0);
  ASSERT_EQ(with({"-o", (dir / "b.nii.gz").string(), "--provenance", (dir / "b.json").string()}), 0);
  EXPECT_EQ(slurp(dir / "a.nii.gz"), slurp(dir / "b.nii.gz"));
  EXPECT_EQ(slurp(dir / "a.nii.gz.provenance.json"), slurp(dir / "b.json"));
  EXPECT_EQ(listing(dir.path()), (std::set<std::string>{"a.nii.gz", "a.nii.gz.provenance.json", "b.nii.gz", "b.json"}));

  const auto labels = to_labels(nifti::read_nifti(dir / "a.nii.gz"));
  EXPECT_EQ(labels.dims(), (Index3{150, 176, 160}));
  const auto prov = nlohmann::json::parse(slurp(dir / "b.json"));
  EXPECT_EQ(prov.at("merge"), "consensus");
  EXPECT_TRUE(prov.at("postprocess").get<bool>());
  EXPECT_TRUE(prov.contains("postprocess_report"));
  EXPECT_EQ(prov.at("bundle_digests").size(), 4u);
  EXPECT_GT(prov.at("p95").get<double>(), 0);
  EXPECT_EQ(prov.at("version"), cli::kVersion);

  ASSERT_EQ(with({"-o", (dir / "v.nii.gz").string(), "--merge", "vote", "--no-postprocess", "--deterministic"}), 0);
  const auto vp = nlohmann::json::parse(slurp(dir / "v.nii.gz.provenance.json"));
  EXPECT_EQ(vp.at("merge"), "vote");
  EXPECT_FALSE(vp.at("postprocess").get<bool>());
  EXPECT_FALSE(vp.contains("postprocess_report"));

  // The library path with the same options gives the same labels.
  SegmentOptions opt;
  opt.merge = MergeMode::kVote;
  opt.postprocess = false;
  const auto lib = segment(nifti::read_nifti(f.image), load_bundle(f.manifest), opt);
  EXPECT_EQ(to_labels(nifti::read_nifti(dir / "v.nii.gz")).grid.values(), lib.labels.grid.values());
}

TEST(Train, WritesLoadableModelReproducibly) {
  ScratchDir dir("clitrain");
  const auto& f = fixture();
  auto train = [&](const std::string& out) {
    return run({"train", "--image", f.image, "--label", f.labels, "--axis", "coronal", "--depth", "1", "--base", "1",
                "--epochs", "1", "--lr", "1e-3", "--batch", "16", "--seed", "4", "--threads", "1", "--history",
                (dir / (out + ".csv")).string(), "-o", (dir / out).string()});
  };
  ASSERT_EQ(train("a.maxw"), 0);
  ASSERT_EQ(train("b.maxw"), 0);
  EXPECT_EQ(slurp(dir / "a.maxw"), slurp(dir / "b.maxw"));
  EXPECT_EQ(slurp(dir / "a.maxw.csv"), slurp(dir / "b.maxw.csv"));
  const auto net = UNet<float>::from_weights(load_weights(dir / "a.maxw"));
  EXPECT_EQ(net.config().depth, 1);
  EXPECT_EQ(net.config().seed, 4u);
  EXPECT_EQ(slurp(dir / "a.maxw.csv").rfind("epoch,loss,val_dice\n1,", 0), 0u);
}

TEST(TrainConsensus, WritesLayerAndBundle) {
  ScratchDir dir("clicons");
  const auto& f = fixture();
  ASSERT_EQ(run({"train-consensus", "--image", f.image, "--label", f.labels, "--axial", f.models[0], "--coronal",
                 f.models[1], "--sagittal", f.models[2], "--epochs", "5", "--lr", "1e-2", "--stride", "8", "--bias",
                 "--threads", "1", "--bundle", (dir / "bundle").string(), "-o", (dir / "consensus.maxw").string()}),
            0);
  const auto layer = ConsensusLayer::from_weights(load_weights(dir / "consensus.maxw"));
  EXPECT_EQ(layer.weight.shape(), (nn::Shape{kNumClasses, 3 * kNumClasses}));
  const auto b = load_bundle(dir / "bundle" / "manifest.txt");
  EXPECT_EQ(serialize_weights(b.consensus), serialize_weights(load_weights(dir / "consensus.maxw")));
  EXPECT_EQ(serialize_weights(b.axial), serialize_weights(load_weights(f.models[0])));
}

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "fixtures.hpp"
#include "tnas/data.hpp"
#include "tnas/metrics.hpp"
#include "tnas/train.hpp"

using namespace tnas;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("tnas_data_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                         "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string str() const { return path_.string(); }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

// Frame bytes built directly from the documented layout.
void write_frame(const fs::path& p, std::uint32_t c, std::uint32_t h, std::uint32_t w, const std::vector<float>& v,
                 const char* magic = "EVF1") {
  std::ofstream out(p, std::ios::binary);
  out.write(magic, 4);
  for (std::uint32_t d : {c, h, w}) {
    unsigned char b[4] = {static_cast<unsigned char>(d), static_cast<unsigned char>(d >> 8),
                          static_cast<unsigned char>(d >> 16), static_cast<unsigned char>(d >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  }
  for (float f : v) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                          static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  }
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Loader, EmptyManifestIsValid) {
  TempDir dir;
  write_text(dir / "m.csv", "path,label,split,condition\n");
  const auto ds = load_dataset((dir / "m.csv").string());
  EXPECT_TRUE(ds.samples.empty());
}

TEST(Loader, OutOfRangeValuesAreClampedAndCounted) {
  TempDir dir;
  write_frame(dir / "a.evf", 1, 1, 3, {1.0000001f, 0.5f, -0.25f});
  write_text(dir / "m.csv", "path,label,split,condition\na.evf,0,train,\n");
  const auto ds = load_dataset((dir / "m.csv").string());
  ASSERT_EQ(ds.samples.size(), 1u);
  EXPECT_EQ(ds.samples[0].frame[0], 1.0);
  EXPECT_EQ(ds.samples[0].frame[1], 0.5);
  EXPECT_EQ(ds.samples[0].frame[2], 0.0);
  EXPECT_EQ(ds.clamped_values, 2u);
}

TEST(Loader, RoundTripIsBitExact) {
  TempDir dir;
  SyntheticSpec spec;
  spec.num_classes = 3;
  spec.height = spec.width = 8;
  spec.train_counts = {2, 1, 1};
  spec.eval_counts = {1, 1, 1};
  spec.calib_counts = {1, 0, 0};
  spec.seed = 4;
  const auto ds = generate_synthetic(spec);
  const auto loaded = load_dataset(write_dataset(ds, dir.str()));
  ASSERT_EQ(loaded.samples.size(), ds.samples.size());
  EXPECT_EQ(loaded.num_classes, 3u);
  EXPECT_EQ(loaded.height, 8u);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    EXPECT_TRUE(loaded.samples[i].frame == ds.samples[i].frame) << i;
    EXPECT_EQ(loaded.samples[i].label, ds.samples[i].label);
    EXPECT_EQ(loaded.samples[i].split, ds.samples[i].split);
  }
}

TEST(Loader, BadMagicNamesTheFile) {
  TempDir dir;
  write_frame(dir / "bad.evf", 1, 1, 1, {0.5f}, "EVF2");
  write_text(dir / "m.csv", "path,label,split,condition\nbad.evf,0,train,\n");
  EXPECT_THROW(load_dataset((dir / "m.csv").string()), FormatError);
  EXPECT_NE(error_of([&] { load_dataset((dir / "m.csv").string()); }).find("bad.evf"), std::string::npos);
}

TEST(Loader, ShapeMismatchNamesTheFile) {
  TempDir dir;
  write_frame(dir / "a.evf", 1, 1, 2, {0.1f, 0.2f});
  write_frame(dir / "b.evf", 1, 2, 1, {0.1f, 0.2f});
  write_text(dir / "m.csv", "path,label,split,condition\na.evf,0,train,\nb.evf,0,train,\n");
  const auto msg = error_of([&] { load_dataset((dir / "m.csv").string()); });
  EXPECT_NE(msg.find("b.evf"), std::string::npos) << msg;
  write_frame(dir / "t.evf", 1, 1, 4, {0.1f, 0.2f});  // truncated payload
  write_text(dir / "m2.csv", "path,label,split,condition\nt.evf,0,train,\n");
  EXPECT_THROW(load_dataset((dir / "m2.csv").string()), FormatError);
}

TEST(Loader, LabelOutOfRangeNamesTheFile) {
  TempDir dir;
  write_frame(dir / "a.evf", 1, 1, 1, {0.5f});
  write_text(dir / "m.csv", "# num_classes=3\npath,label,split,condition\na.evf,3,train,\n");
  EXPECT_THROW(load_dataset((dir / "m.csv").string()), FormatError);
  EXPECT_NE(error_of([&] { load_dataset((dir / "m.csv").string()); }).find("a.evf"), std::string::npos);
}

TEST(Loader, MissingFrameNamesTheFile) {
  TempDir dir;
  write_text(dir / "m.csv", "path,label,split,condition\nnope.evf,0,train,\n");
  EXPECT_THROW(load_dataset((dir / "m.csv").string()), MissingArtifact);
  EXPECT_NE(error_of([&] { load_dataset((dir / "m.csv").string()); }).find("nope.evf"), std::string::npos);
  EXPECT_THROW(load_dataset((dir / "absent.csv").string()), MissingArtifact);
}

TEST(Loader, SplitsMustBeDisjointUnlessAllowed) {
  TempDir dir;
  write_frame(dir / "a.evf", 1, 1, 1, {0.5f});
  write_text(dir / "m.csv", "path,label,split,condition\na.evf,0,train,\na.evf,0,calib,\n");
  EXPECT_THROW(load_dataset((dir / "m.csv").string()), FormatError);
  LoadOptions opt;
  opt.allow_calib_in_train = true;
  EXPECT_EQ(load_dataset((dir / "m.csv").string(), opt).samples.size(), 2u);
  write_text(dir / "m2.csv", "path,label,split,condition\na.evf,0,train,\na.evf,0,eval,\n");
  EXPECT_THROW(load_dataset((dir / "m2.csv").string(), opt), FormatError);
}

TEST(Synthetic, NoiseFreeSamplesOfAClassAreIdentical) {
  SyntheticSpec spec;
  spec.noise = 0.0;
  spec.train_counts.assign(7, 3);
  const auto ds = generate_synthetic(spec);
  for (const auto& s : ds.samples) {
    const auto& first = *std::find_if(ds.samples.begin(), ds.samples.end(), [&](const auto& o) { return o.label == s.label; });
    EXPECT_TRUE(s.frame == first.frame);
  }
  EXPECT_FALSE(ds.samples[0].frame == ds.samples[3].frame);  // different classes differ
}

TEST(Synthetic, ValuesInRangeAndShape) {
  SyntheticSpec spec;
  spec.noise = 0.5;
  const auto ds = generate_synthetic(spec);
  for (const auto& s : ds.samples) {
    EXPECT_EQ(s.frame.shape(), (Shape{4, 32, 32}));
    for (double v : s.frame.values()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

TEST(Synthetic, SameSeedBitIdentical) {
  SyntheticSpec spec;
  spec.seed = 77;
  const auto a = generate_synthetic(spec), b = generate_synthetic(spec);
  ASSERT_EQ(a.samples.size(), b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) EXPECT_TRUE(a.samples[i].frame == b.samples[i].frame);
  spec.seed = 78;
  EXPECT_FALSE(generate_synthetic(spec).samples[0].frame == a.samples[0].frame);
}

TEST(Synthetic, ImbalanceSeparatesWarFromUar) {
  SyntheticSpec spec;
  spec.eval_counts = {10, 5, 5, 5, 5, 5, 5};
  const auto ds = generate_synthetic(spec);
  // a classifier biased toward class 0: right on class 0, right on half of the rest
  std::vector<int> truth, pred;
  for (auto i : ds.indices("eval")) {
    const int y = ds.samples[i].label;
    truth.push_back(y);
    pred.push_back(y == 0 || truth.size() % 2 ? y : 0);
  }
  const auto cm = ConfusionMatrix::from_predictions(7, truth, pred);
  EXPECT_LT(war(cm), 1.0);
  EXPECT_NE(war(cm), uar(cm));
}

TEST(Synthetic, SmallNetworkSeparatesClasses) {
  auto cfg = fixtures::small_config(8, 16);
  SyntheticSpec spec;
  spec.height = spec.width = 16;
  spec.train_counts.assign(7, 16);
  spec.eval_counts.assign(7, 10);
  spec.noise = 0.1;
  spec.seed = 5;
  const auto ds = generate_synthetic(spec);
  Rng rng(5);
  auto net = Network::initialize(cfg, Genome::parse("3,3,3,3"), NormMode::BatchNorm, rng);
  train_network(net, ds, {10, 16, 5e-3, 5});
  EXPECT_GE(war(evaluate_ann(net, ds, "eval")), 0.9);
}

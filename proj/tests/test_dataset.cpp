#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>

#include "thn/dataset.hpp"

using namespace thn;

namespace {

std::string temp_path(const std::string& stem) {
  return "/tmp/thn_test_" + stem + "_" + std::to_string(::getpid());
}

FeatureDataset tiny_set() {
  FeatureDataset d;
  d.height = 3;
  d.width = 2;
  d.num_classes = 4;
  Rng rng(19);
  for (int i = 0; i < 9; ++i) {
    Tensor t({1, 3, 2});
    for (int64_t j = 0; j < t.size(); ++j) t[j] = snap_f32(rng.uniform(-2.0, 2.0));
    d.samples.push_back(std::move(t));
    d.labels.push_back(i % 4);
  }
  return d;
}

}  // namespace

TEST_CASE("feature files round trip bit for bit") {
  FeatureDataset d = tiny_set();
  std::string path = temp_path("roundtrip.kwsf");
  save_features(d, path);
  FeatureDataset e = load_features(path);

  REQUIRE(e.height == 3);
  REQUIRE(e.width == 2);
  REQUIRE(e.num_classes == 4);
  REQUIRE(e.size() == 9);
  REQUIRE(e.labels == d.labels);
  for (int64_t i = 0; i < d.size(); ++i)
    for (int64_t j = 0; j < d.samples[0].size(); ++j)
      REQUIRE(e.samples[static_cast<size_t>(i)][j] == d.samples[static_cast<size_t>(i)][j]);
  std::remove(path.c_str());
}

TEST_CASE("corrupt feature files fail with a located error") {
  FeatureDataset d = tiny_set();
  std::string path = temp_path("corrupt.kwsf");
  save_features(d, path);
  std::string bytes = io::slurp(path);

  SECTION("wrong magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    io::spit(path, bad);
    try {
      load_features(path);
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      REQUIRE(e.offset == 0);
    }
  }
  SECTION("unsupported version") {
    std::string bad = bytes;
    bad[4] = 9;
    io::spit(path, bad);
    try {
      load_features(path);
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      REQUIRE(e.offset == 4);
    }
  }
  SECTION("truncated mid-sample") {
    io::spit(path, bytes.substr(0, bytes.size() - 3));
    REQUIRE_THROWS_AS(load_features(path), FormatError);
  }
  SECTION("trailing bytes") {
    io::spit(path, bytes + "zz");
    try {
      load_features(path);
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      REQUIRE(e.offset == static_cast<long long>(bytes.size()));
    }
  }
  SECTION("out-of-range label") {
    std::string bad = bytes;
    bad[bad.size() - 1] = 17;  // last record's label byte
    io::spit(path, bad);
    REQUIRE_THROWS_AS(load_features(path), FormatError);
  }
  std::remove(path.c_str());
}

TEST_CASE("csv import parses labels and row-major values") {
  std::string path = temp_path("import.csv");
  {
    std::ofstream out(path);
    out << "1,0.5,-0.25,3,4,5,6\n";
    out << "\n";  // blank lines are skipped
    out << "0,1,2,3,4,5,6\n";
  }
  FeatureDataset d = import_csv(path, 3, 2, 2);
  REQUIRE(d.size() == 2);
  REQUIRE(d.labels[0] == 1);
  REQUIRE(d.labels[1] == 0);
  REQUIRE(d.samples[0][0] == Catch::Approx(0.5));
  REQUIRE(d.samples[0][1] == Catch::Approx(-0.25));
  REQUIRE(d.samples[0][5] == Catch::Approx(6.0));
  d.validate();

  SECTION("short rows are rejected") {
    std::ofstream out(path);
    out << "0,1,2,3\n";
    out.close();
    REQUIRE_THROWS_AS(import_csv(path, 3, 2, 2), FormatError);
  }
  SECTION("bad labels are rejected") {
    std::ofstream out(path);
    out << "7,1,2,3,4,5,6\n";
    out.close();
    REQUIRE_THROWS_AS(import_csv(path, 3, 2, 2), FormatError);
  }
  SECTION("extra cells are rejected") {
    std::ofstream out(path);
    out << "0,1,2,3,4,5,6,7\n";
    out.close();
    REQUIRE_THROWS_AS(import_csv(path, 3, 2, 2), FormatError);
  }
  std::remove(path.c_str());
}

TEST_CASE("synthetic generation is deterministic and splits 80/10/10") {
  GenConfig cfg;
  cfg.classes = 5;
  cfg.per_class = 20;
  cfg.height = 8;
  cfg.width = 6;
  cfg.seed = 123;

  GeneratedData a = gen_data(cfg);
  GeneratedData b = gen_data(cfg);

  REQUIRE(a.train.size() == 5 * 16);
  REQUIRE(a.val.size() == 5 * 2);
  REQUIRE(a.test.size() == 5 * 2);
  REQUIRE(a.prototypes.size() == 5);
  a.train.validate();
  a.val.validate();
  a.test.validate();

  // identical seeds give identical bytes
  for (int64_t i = 0; i < a.train.size(); ++i)
    for (int64_t j = 0; j < a.train.samples[0].size(); ++j)
      REQUIRE(a.train.samples[static_cast<size_t>(i)][j] ==
              b.train.samples[static_cast<size_t>(i)][j]);

  // every class is represented in every split
  for (const FeatureDataset* s : {&a.train, &a.val, &a.test}) {
    std::vector<int> seen(5, 0);
    for (int l : s->labels) ++seen[static_cast<size_t>(l)];
    for (int c = 0; c < 5; ++c) REQUIRE(seen[static_cast<size_t>(c)] > 0);
  }

  SECTION("a different seed moves the data") {
    cfg.seed = 124;
    GeneratedData c = gen_data(cfg);
    bool any_diff = false;
    for (int64_t j = 0; j < a.train.samples[0].size(); ++j)
      if (c.train.samples[0][j] != a.train.samples[0][j]) any_diff = true;
    REQUIRE(any_diff);
  }
  SECTION("harder settings spread samples from their prototype") {
    cfg.difficulty = 0.0;
    GeneratedData clean = gen_data(cfg);
    // with no noise every sample is exactly its class prototype
    const Tensor& proto = clean.prototypes[static_cast<size_t>(clean.train.labels[0])];
    for (int64_t j = 0; j < proto.size(); ++j)
      REQUIRE(clean.train.samples[0][j] == Catch::Approx(proto[j]).margin(1e-6));
  }
}

TEST_CASE("generation guards its configuration") {
  GenConfig cfg;
  cfg.classes = 1;
  REQUIRE_THROWS_AS(gen_data(cfg), ConfigError);
  cfg.classes = 3;
  cfg.per_class = 5;
  REQUIRE_THROWS_AS(gen_data(cfg), ConfigError);
}

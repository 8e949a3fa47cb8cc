#include <filesystem>
#include <set>

#include "doctest.h"
#include "fnoseg/binio.hpp"
#include "fnoseg/data.hpp"

using namespace fnoseg;
namespace fs = std::filesystem;

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.grid = {16, 16, 16};
  s.samples = 6;
  s.seed = 5;
  return s;
}

std::string tmp_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "fnoseg_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

int format_reason(const std::string& bytes) {
  try {
    decode_volume(bytes);
  } catch (const FormatError& e) {
    return static_cast<int>(e.reason());
  }
  return -1;
}

}  // namespace

TEST_CASE("samples are deterministic in (spec, index)") {
  const auto spec = small_spec();
  const auto a = generate_sample(spec, 2), b = generate_sample(spec, 2);
  CHECK(a.image == b.image);
  CHECK(a.labels == b.labels);
  CHECK(encode_volume(a) == encode_volume(b));
  CHECK_FALSE(generate_sample(spec, 3).labels == a.labels);
  auto other = spec;
  other.seed = 6;
  CHECK_FALSE(generate_sample(other, 2).image == a.image);
}

TEST_CASE("generated datasets are byte-identical") {
  const auto spec = small_spec();
  const auto d1 = tmp_dir("gen1"), d2 = tmp_dir("gen2");
  const auto m1 = generate_synthetic(spec, d1);
  generate_synthetic(spec, d2);
  CHECK(m1.entries.size() == 6);
  for (const auto& e : fs::directory_iterator(d1)) {
    const auto name = e.path().filename().string();
    CAPTURE(name);
    CHECK(binio::read_file(e.path().string()) == binio::read_file((fs::path(d2) / name).string()));
  }
  const auto loaded = DatasetManifest::load((fs::path(d1) / "manifest.json").string());
  CHECK(loaded.spec_hash == spec.hash());
  const auto train = load_split(loaded, d1, "train");
  CHECK(train.size() == loaded.split("train").size());
  CHECK(train[0].image == generate_sample(spec, std::stoul(train[0].id.substr(4))).image);
}

TEST_CASE("nested regions, every default sample has all labels") {
  SyntheticSpec spec;
  for (std::size_t i = 0; i < 12; ++i) {
    const auto s = generate_sample(spec, i);
    std::array<std::size_t, 4> count{};
    for (std::size_t v = 0; v < s.labels.size(); ++v) count[s.labels[v]]++;
    CAPTURE(i);
    for (std::size_t l = 0; l < 4; ++l) CHECK(count[l] > 0);
    const auto masks = region_masks(s.labels);
    for (std::size_t v = 0; v < s.labels.size(); ++v) {
      REQUIRE(masks[0][v] >= masks[1][v]);
      REQUIRE(masks[1][v] >= masks[2][v]);
    }
    // Core voxels are never adjacent to background.
    for (std::size_t x = 1; x + 1 < 64; ++x)
      for (std::size_t y = 1; y + 1 < 64; ++y)
        for (std::size_t z = 1; z + 1 < 64; ++z)
          if (s.labels(0, x, y, z) == 3) {
            REQUIRE(s.labels(0, x + 1, y, z) != 0);
            REQUIRE(s.labels(0, x - 1, y, z) != 0);
            REQUIRE(s.labels(0, x, y, z + 1) != 0);
          }
  }
}

TEST_CASE("with zero noise the intensities equal the contrast table") {
  SyntheticSpec spec = small_spec();
  spec.grid = {32, 32, 32};
  spec.samples = 1;
  spec.noise = 0.0;
  const auto s = generate_sample(spec, 0);
  std::array<std::size_t, 4> seen{};
  for (std::size_t v = 0; v < s.labels.size(); ++v) {
    const auto l = s.labels[v];
    if (l == 0) continue;  // background carries texture
    seen[l]++;
    for (std::size_t m = 0; m < 4; ++m) REQUIRE(s.image.channel(m)[v] == static_cast<float>(spec.contrast[m][l]));
  }
  CHECK(seen[3] > 0);
  spec.texture = 0.0;
  const auto flat = generate_sample(spec, 0);
  for (std::size_t v = 0; v < flat.labels.size(); ++v)
    if (flat.labels[v] == 0) REQUIRE(flat.image.channel(2)[v] == static_cast<float>(spec.contrast[2][0]));
}

TEST_CASE("splits") {
  SyntheticSpec spec;
  const auto split = assign_splits(spec);
  std::size_t test = 0, val = 0, train = 0;
  for (const auto& s : split) (s == "test" ? test : s == "val" ? val : train)++;
  CHECK(test == 40);
  CHECK(val == 16);
  CHECK(train == 144);
  CHECK(assign_splits(spec) == split);
  spec.seed = 1;
  CHECK_FALSE(assign_splits(spec) == split);
}

TEST_CASE("volume format round trip and errors") {
  const auto s = generate_sample(small_spec(), 0);
  const auto bytes = encode_volume(s);
  CHECK(bytes.substr(0, 4) == "FNV1");
  const auto back = decode_volume(bytes);
  CHECK(back.image == s.image);
  CHECK(back.labels == s.labels);
  CHECK(back.id == s.id);
  CHECK(encode_volume(back) == bytes);

  const auto path = (fs::path(tmp_dir("vol")) / "a.fnv").string();
  write_volume(s, path);
  CHECK(read_volume(path).image == s.image);

  std::string bad = bytes;
  bad[0] = 'G';
  CHECK(format_reason(bad) == int(FormatError::Reason::kCorruptHeader));
  CHECK(format_reason(bytes.substr(0, bytes.size() - 1)) == int(FormatError::Reason::kTruncated));
  CHECK(format_reason(bytes.substr(0, 6)) == int(FormatError::Reason::kTruncated));
  bad = bytes;
  bad[4] = 2;
  CHECK(format_reason(bad) == int(FormatError::Reason::kVersionMismatch));
  CHECK(format_reason(bytes + "x") == int(FormatError::Reason::kCorruptHeader));
  bad = bytes;
  bad.back() = 9;  // label outside the alphabet
  CHECK(format_reason(bad) == int(FormatError::Reason::kCorruptHeader));
  CHECK_THROWS_AS(read_volume(path + ".missing"), FormatError);
}

TEST_CASE("one_hot and argmax") {
  LabelVolume zeros(1, 3, 3, 3);
  const auto oh = one_hot<double>(zeros, 4);
  for (std::size_t v = 0; v < 27; ++v) {
    CHECK(oh.channel(0)[v] == 1.0);
    for (std::size_t l = 1; l < 4; ++l) CHECK(oh.channel(l)[v] == 0.0);
  }
  const auto s = generate_sample(small_spec(), 1);
  const auto h = one_hot<float>(s.labels, 4);
  for (std::size_t v = 0; v < s.labels.size(); ++v) {
    float sum = 0;
    for (std::size_t l = 0; l < 4; ++l) sum += h.channel(l)[v];
    REQUIRE(sum == 1.0f);
  }
  CHECK(argmax_labels(h) == s.labels);
  LabelVolume bad(1, 2, 2, 2);
  bad[3] = 4;
  CHECK_THROWS_AS(one_hot<float>(bad, 4), DataError);
}

TEST_CASE("region masks on a hand-made cube") {
  LabelVolume lv(1, 2, 2, 2);
  const std::uint8_t labels[8] = {0, 1, 2, 3, 3, 2, 1, 0};
  for (std::size_t i = 0; i < 8; ++i) lv[i] = labels[i];
  const auto m = region_masks(lv);
  const std::uint8_t wt[8] = {0, 1, 1, 1, 1, 1, 1, 0};
  const std::uint8_t tc[8] = {0, 0, 1, 1, 1, 1, 0, 0};
  const std::uint8_t et[8] = {0, 0, 0, 1, 1, 0, 0, 0};
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(m[0][i] == wt[i]);
    CHECK(m[1][i] == tc[i]);
    CHECK(m[2][i] == et[i]);
  }
  const auto empty = region_masks(LabelVolume(1, 2, 2, 2));
  for (const auto& r : empty)
    for (std::size_t i = 0; i < 8; ++i) CHECK(r[i] == 0);
}

TEST_CASE("spec and manifest json") {
  auto spec = small_spec();
  CHECK(SyntheticSpec::from_json(spec.to_json()).hash() == spec.hash());
  auto other = spec;
  other.noise = 0.31;
  CHECK(other.hash() != spec.hash());
  Json j = spec.to_json();
  j["colour"] = "red";
  CHECK_THROWS_AS(SyntheticSpec::from_json(j), ConfigError);
  j = spec.to_json();
  j["grid"] = {16, 0, 16};
  CHECK_THROWS_AS(SyntheticSpec::from_json(j), ConfigError);

  DatasetManifest m;
  m.spec = spec;
  m.spec_hash = spec.hash();
  m.entries = {{"case000", "case000.fnv", "train"}};
  CHECK(DatasetManifest::from_json(m.to_json()).entries[0].id == "case000");
  Json mj = m.to_json();
  mj["spec_hash"] = "0000000000000000";
  CHECK_THROWS_AS(DatasetManifest::from_json(mj), DataError);
}

TEST_CASE("datasets need every split") {
  SyntheticSpec spec = small_spec();
  spec.samples = 2;
  CHECK_THROWS_AS(assign_splits(spec), ConfigError);
  CHECK_NOTHROW(generate_sample(spec, 0));
}

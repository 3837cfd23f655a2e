#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "fuseseg/rng.hpp"
#include "fuseseg/unet.hpp"

using namespace fuseseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* name) {
  fs::path p = fs::temp_directory_path() / "fuseseg_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Independent parameter-count oracle: walks the documented layer list
// (double conv blocks per stage, stride-2 2x2x2 transposed convs, three
// 2-channel 1x1x1 heads) without touching layer_specs.
int64_t shape_walk_count(int in_channels, int stages, int base, int cap, int heads) {
  auto ch = [&](int s) { return std::min<int64_t>(static_cast<int64_t>(base) << (s - 1), cap); };
  auto block = [](int64_t cin, int64_t cout) {
    int64_t conv1 = cout * cin * 27 + cout;
    int64_t conv2 = cout * cout * 27 + cout;
    int64_t norms = 4 * cout;  // gamma+beta after each conv
    return conv1 + conv2 + norms;
  };
  int64_t total = 0;
  for (int s = 1; s <= stages; ++s)
    total += block(s == 1 ? in_channels : ch(s - 1), ch(s));
  for (int s = stages - 1; s >= 1; --s) {
    total += ch(s + 1) * ch(s) * 8;  // transposed conv, no bias
    total += block(2 * ch(s), ch(s));
  }
  total += heads * (2 * ch(1) + 2);
  return total;
}

nn::Tensor5 random_input(const nn::Shape5& s, uint64_t seed) {
  Rng rng(seed);
  nn::Tensor5 t = nn::Tensor5::zeros(s);
  for (auto& v : t.data) v = static_cast<float>(rng.normal());
  return t;
}

}  // namespace

TEST_CASE("parameter count matches the shape-walk oracle and frozen constant") {
  UNetConfig cfg;
  cfg.in_channels = 1;
  cfg.stages = 2;
  cfg.base_channels = 4;
  UNetModel m = build_unet(cfg, 1);
  int64_t oracle = shape_walk_count(1, 2, 4, 256, 3);
  CHECK(m.parameter_count() == oracle);
  CHECK(m.parameter_count() == 4810);  // frozen regression constant

  UNetConfig big;
  big.in_channels = 4;
  UNetModel mb = build_unet(big, 1);
  CHECK(mb.parameter_count() == shape_walk_count(4, 4, 16, 256, 3));
}

TEST_CASE("seeded builds are bitwise identical") {
  UNetConfig cfg;
  cfg.in_channels = 2;
  cfg.stages = 3;
  cfg.base_channels = 8;
  UNetModel a = build_unet(cfg, 7);
  UNetModel b = build_unet(cfg, 7);
  REQUIRE(a.params.size() == b.params.size());
  for (size_t i = 0; i < a.params.size(); ++i) {
    CHECK(a.params[i].name == b.params[i].name);
    CHECK(std::memcmp(a.params[i].value.data.data(), b.params[i].value.data.data(),
                      a.params[i].value.data.size() * 4) == 0);
  }
  UNetModel c = build_unet(cfg, 8);
  CHECK(std::memcmp(a.params[0].value.data.data(), c.params[0].value.data.data(),
                    a.params[0].value.data.size() * 4) != 0);
}

TEST_CASE("in_channels only changes the first conv weight shape") {
  UNetConfig c1, c4;
  c1.in_channels = 1;
  c4.in_channels = 4;
  UNetModel m1 = build_unet(c1, 3);
  UNetModel m4 = build_unet(c4, 3);
  REQUIRE(m1.params.size() == m4.params.size());
  for (size_t i = 0; i < m1.params.size(); ++i) {
    CHECK(m1.params[i].name == m4.params[i].name);
    bool same_shape = m1.params[i].value.shape == m4.params[i].value.shape;
    if (m1.params[i].name == "enc1.conv1.w")
      CHECK(!same_shape);
    else
      CHECK(same_shape);
  }
}

TEST_CASE("forward shapes, range, and divisibility check") {
  UNetConfig cfg;  // defaults: 4 stages, base 16, in 4
  UNetModel m = build_unet(cfg, 5);
  nn::Tensor5 x = random_input({1, 4, 16, 32, 32}, 11);
  nn::Tape tape;
  auto fw = m.forward(tape, x, false);
  REQUIRE(fw.heads.size() == 3);
  for (auto* h : fw.heads) {
    CHECK(h->value.shape == nn::Shape5{1, 1, 16, 32, 32});
    for (float v : h->value.data) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
      CHECK(std::isfinite(v));
    }
  }

  nn::Tensor5 bad = random_input({1, 4, 12, 32, 32}, 12);  // 12 % 8 != 0
  nn::Tape t2;
  CHECK_THROWS_AS(m.forward(t2, bad, false), Error);

  nn::Tensor5 wrong_c = random_input({1, 3, 16, 32, 32}, 13);
  nn::Tape t3;
  CHECK_THROWS_AS(m.forward(t3, wrong_c, false), Error);
}

TEST_CASE("fresh models are not saturated at init") {
  UNetConfig cfg;
  cfg.in_channels = 2;
  cfg.stages = 2;
  cfg.base_channels = 8;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    UNetModel m = build_unet(cfg, seed);
    nn::Tensor5 x = random_input({1, 2, 8, 16, 16}, 100 + seed);
    nn::Tape tape;
    auto fw = m.forward(tape, x, false);
    for (auto* h : fw.heads) {
      double mean = 0;
      for (float v : h->value.data) mean += v;
      mean /= static_cast<double>(h->value.data.size());
      CHECK(mean > 0.05);
      CHECK(mean < 0.95);
    }
  }
}

TEST_CASE("all-zero head weights give exactly 0.5 probabilities") {
  UNetConfig cfg;
  cfg.in_channels = 1;
  cfg.stages = 2;
  cfg.base_channels = 4;
  UNetModel m = build_unet(cfg, 2);
  for (auto& p : m.params)
    if (p.name.rfind("head_", 0) == 0)
      std::fill(p.value.data.begin(), p.value.data.end(), 0.0f);
  nn::Tensor5 x = random_input({1, 1, 4, 8, 8}, 3);
  nn::Tape tape;
  auto fw = m.forward(tape, x, false);
  for (auto* h : fw.heads)
    for (float v : h->value.data) CHECK(v == 0.5f);
}

TEST_CASE("checkpoint roundtrip is bitwise lossless") {
  auto dir = temp_dir("ckpt");
  UNetConfig cfg;
  cfg.in_channels = 2;
  cfg.stages = 3;
  cfg.base_channels = 8;
  UNetModel m = build_unet(cfg, 9);
  std::string path = (dir / "m.ckpt").string();
  save_checkpoint(m, path);
  UNetModel r = load_checkpoint(path);
  REQUIRE(r.params.size() == m.params.size());
  for (size_t i = 0; i < m.params.size(); ++i) {
    CHECK(r.params[i].name == m.params[i].name);
    CHECK(std::memcmp(r.params[i].value.data.data(), m.params[i].value.data.data(),
                      m.params[i].value.data.size() * 4) == 0);
  }

  nn::Tensor5 x = random_input({1, 2, 8, 8, 8}, 77);
  nn::Tape t1, t2;
  auto f1 = m.forward(t1, x, false);
  auto f2 = r.forward(t2, x, false);
  for (int h = 0; h < 3; ++h)
    CHECK(std::memcmp(f1.heads[h]->value.data.data(), f2.heads[h]->value.data.data(),
                      f1.heads[h]->value.data.size() * 4) == 0);
}

TEST_CASE("checkpoint error paths") {
  auto dir = temp_dir("ckpt_err");
  UNetConfig cfg;
  cfg.in_channels = 1;
  cfg.stages = 2;
  cfg.base_channels = 4;
  UNetModel m = build_unet(cfg, 4);
  std::string path = (dir / "m.ckpt").string();
  save_checkpoint(m, path);

  SUBCASE("truncated file") {
    auto size = fs::file_size(path);
    fs::resize_file(path, size / 2);
    try {
      load_checkpoint(path);
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == Err::IoError);
    }
  }

  SUBCASE("config mismatch names the first offending parameter") {
    // Flip base_channels 4 -> 8 inside the embedded config JSON; the stored
    // parameter blocks no longer match what the config implies.
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    auto pos = bytes.find("\"base_channels\":4");
    REQUIRE(pos != std::string::npos);
    bytes.replace(pos, 17, "\"base_channels\":8");
    std::ofstream(path, std::ios::binary).write(bytes.data(), static_cast<long>(bytes.size()));
    try {
      load_checkpoint(path);
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == Err::ShapeMismatch);
      CHECK(std::string(e.what()).find("enc1.conv1.w") != std::string::npos);
    }
  }

  SUBCASE("bad magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("NOPE", 4);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), Error);
  }
}

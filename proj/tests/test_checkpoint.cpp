#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <iterator>

#include "xvit/checkpoint.hpp"

using namespace xvit;
namespace fs = std::filesystem;

namespace {

ModelConfig small() {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.embed_dim = 16;
  cfg.heads = 2;
  cfg.depth = 2;
  cfg.class_depth = 1;
  cfg.mlp_ratio = 2;
  cfg.patch_stride = 4;
  return cfg;
}

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("xvit_test_ckpt_" + name);
}

std::vector<char> bytes_of(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<char>& b) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(b.data(), static_cast<std::streamsize>(b.size()));
}

void check_bit_exact(const ModelParams& a, const ModelParams& b) {
  std::vector<const Tensor*> ta, tb;
  a.visit([&](const std::string&, const Tensor& t) { ta.push_back(&t); });
  b.visit([&](const std::string&, const Tensor& t) { tb.push_back(&t); });
  REQUIRE(ta.size() == tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) CHECK(ta[i]->bit_equal(*tb[i]));
}

}  // namespace

TEST_CASE("round trip is bit-exact for both element types") {
  for (DType dt : {DType::f32, DType::f64}) {
    ModelConfig cfg = small();
    cfg.mechanism = Mechanism::softmax;
    const ModelParams mp = init_params(cfg, 77, dt);
    const auto path = temp_file("rt.bin");
    save_checkpoint(mp, cfg, path);
    const Checkpoint ck = load_checkpoint(path);
    CHECK(ck.config == cfg);
    CHECK(ck.params.dtype() == dt);
    check_bit_exact(mp, ck.params);
    CHECK(ck.params.blocks[0].attn.heads == 2);
    Rng rng(1);
    Tensor img = uniform({1, 16, 16}, 0, 1, rng, dt);
    CHECK(model_forward(img, mp, cfg).bit_equal(model_forward(img, ck.params, ck.config)));
    fs::remove(path);
  }
}

TEST_CASE("payloads are 64-byte aligned") {
  const ModelConfig cfg = small();
  const auto path = temp_file("align.bin");
  save_checkpoint(init_params(cfg, 1), cfg, path);
  const auto b = bytes_of(path);
  CHECK(std::string(b.data(), 4) == "XVIT");
  CHECK(b.size() % 8 == 0);
  fs::remove(path);
}

TEST_CASE("corruption is rejected with a LoadError") {
  const ModelConfig cfg = small();
  const auto path = temp_file("bad.bin");
  save_checkpoint(init_params(cfg, 2), cfg, path);
  const auto good = bytes_of(path);

  SUBCASE("header byte flipped") {
    auto b = good;
    b[30] ^= 0x20;
    write_bytes(path, b);
    try {
      load_checkpoint(path);
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(std::string(e.what()).find("checksum") != std::string::npos);
    }
  }
  SUBCASE("bad magic") {
    auto b = good;
    b[0] = 'Y';
    write_bytes(path, b);
    CHECK_THROWS_AS(load_checkpoint(path), LoadError);
  }
  SUBCASE("future version") {
    auto b = good;
    b[4] = 9;
    write_bytes(path, b);
    CHECK_THROWS_AS(load_checkpoint(path), LoadError);
  }
  SUBCASE("truncated payload") {
    auto b = good;
    b.resize(b.size() - 5);
    write_bytes(path, b);
    try {
      load_checkpoint(path);
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(std::string(e.what()).find("head.b") != std::string::npos);
    }
  }
  SUBCASE("truncated header") {
    write_bytes(path, std::vector<char>(good.begin(), good.begin() + 40));
    CHECK_THROWS_AS(load_checkpoint(path), LoadError);
  }
  SUBCASE("empty file") {
    write_bytes(path, {});
    CHECK_THROWS_AS(load_checkpoint(path), LoadError);
  }
  fs::remove(path);
}

TEST_CASE("missing file") {
  CHECK_THROWS_AS(load_checkpoint(temp_file("does_not_exist.bin")), LoadError);
}

TEST_CASE("loading into a different config names the tensor") {
  const ModelConfig cfg = small();
  const auto path = temp_file("mismatch.bin");
  save_checkpoint(init_params(cfg, 3), cfg, path);
  ModelConfig other = cfg;
  other.mlp_ratio = 3;
  try {
    load_checkpoint(path, other);
    FAIL("expected LoadError");
  } catch (const LoadError& e) {
    CHECK(std::string(e.what()).find("blocks.0.mlp.w1") != std::string::npos);
  }
  CHECK_NOTHROW(load_checkpoint(path, cfg));
  fs::remove(path);
}

TEST_CASE("saving params that do not fit the config fails") {
  const ModelConfig cfg = small();
  ModelParams mp = init_params(cfg, 4);
  mp.head_b = Tensor::zeros({7});
  CHECK_THROWS_AS(save_checkpoint(mp, cfg, temp_file("never.bin")), ShapeError);
}

#include <fstream>

#include "doctest.h"

#include "differ/archive.hpp"
#include "differ/error.hpp"
#include "test_support.hpp"

using namespace differ;

TEST_CASE("archive round-trips arrays and metadata bitwise") {
  test::TempDir dir("archive");
  const auto path = dir.path() / "test.bin";

  Rng rng(5);
  MatrixF m(3, 4);
  for (Index r = 0; r < 3; ++r) {
    for (Index c = 0; c < 4; ++c) m(r, c) = static_cast<float>(rng.normal());
  }
  VectorF v(7);
  for (Index i = 0; i < 7; ++i) v[i] = static_cast<float>(rng.normal());

  ArrayArchive archive;
  archive.put("weights", m);
  archive.put("bias", v);
  archive.set_meta("config", nlohmann::json{{"dim", 4}, {"name", "toy"}});
  archive.save(path);

  const ArrayArchive loaded = ArrayArchive::load(path);
  CHECK(loaded.names() == std::vector<std::string>{"weights", "bias"});
  CHECK(loaded.array("weights") == m);
  CHECK(loaded.vector("bias") == v);
  CHECK(loaded.shape("weights") == std::vector<Index>{3, 4});
  CHECK(loaded.shape("bias") == std::vector<Index>{7});
  CHECK(loaded.meta("config").at("dim").get<int>() == 4);

  CHECK_THROWS_AS(loaded.array("missing"), IoError);
  CHECK_THROWS_AS(loaded.meta("missing"), IoError);
}

TEST_CASE("archive rejects unknown headers") {
  test::TempDir dir("archive_bad");
  const auto path = dir.path() / "bad.bin";
  std::ofstream(path, std::ios::binary) << "NOTANARCHIVE____garbage";
  CHECK_THROWS_AS(ArrayArchive::load(path), IoError);
  CHECK_THROWS_AS(ArrayArchive::load(dir.path() / "absent.bin"), IoError);
}

TEST_CASE("archive overwrites arrays by name") {
  ArrayArchive archive;
  archive.put("x", MatrixF(MatrixF::Zero(2, 2)));
  archive.put("x", MatrixF(MatrixF::Ones(2, 2)));
  CHECK(archive.names().size() == 1);
  CHECK(archive.array("x")(0, 0) == 1.0f);
}

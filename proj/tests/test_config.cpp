#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ilm/common.hpp"
#include "ilm/config.hpp"

using namespace ilm;

TEST_CASE("key-value parsing") {
  const auto kv = KeyValues::parse("# run\nlr = 1e-4\nvariant=ilm  # trailing\n\nsteps = 10000\nclip = true\n");
  CHECK(kv.get("variant") == "ilm");
  CHECK(kv.get_double("lr") == doctest::Approx(1e-4));
  CHECK(kv.get_uint("steps") == 10000u);
  CHECK(kv.get_bool("clip") == true);
  CHECK_FALSE(kv.get("missing").has_value());
  CHECK(kv.entries().size() == 4);
}

TEST_CASE("malformed values name the key") {
  const auto kv = KeyValues::parse("lr = fast\nsteps = -3\nflag = maybe\n");
  try {
    (void)kv.get_double("lr");
    FAIL("expected UsageError");
  } catch (const UsageError& e) {
    CHECK(std::string(e.what()).find("lr") != std::string::npos);
  }
  CHECK_THROWS_AS(kv.get_uint("steps"), UsageError);
  CHECK_THROWS_AS(kv.get_bool("flag"), UsageError);
  CHECK_THROWS_AS(KeyValues::parse("novalue\n"), UsageError);
}

TEST_CASE("set overrides file values") {
  auto kv = KeyValues::parse("lr = 1\n");
  kv.set("lr", "2");
  CHECK(kv.get_double("lr") == 2.0);
}

TEST_CASE("load from disk") {
  const auto p = std::filesystem::temp_directory_path() / "ilm_test_config.cfg";
  std::ofstream(p) << "seed = 7\n";
  CHECK(KeyValues::load(p).get_uint("seed") == 7u);
  std::filesystem::remove(p);
  CHECK_THROWS_AS(KeyValues::load(p), IoError);
}

TEST_CASE("fnv1a") {
  CHECK(fnv1a("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a("foobar") == 0x85944171f73967e8ull);
  CHECK(hex64(0xabcull) == "0000000000000abc");
  const auto p = std::filesystem::temp_directory_path() / "ilm_test_fnv.bin";
  std::ofstream(p) << "foobar";
  CHECK(fnv1a_file(p) == fnv1a("foobar"));
  std::filesystem::remove(p);
}

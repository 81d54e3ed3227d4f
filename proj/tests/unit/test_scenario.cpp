#include <doctest.h>

#include <fstream>

#include <nlohmann/json.hpp>

#include "cityfabric/errors.hpp"
#include "cityfabric/scenario.hpp"
#include "support.hpp"

using namespace cityfabric;
using nlohmann::json;

namespace {

json toy() {
  std::ifstream in(testing::scenario_path("toy4"));
  return json::parse(in);
}

std::string message_of(const json& j) {
  try {
    scenario_from_json(j, testing::scenario_path("toy4").parent_path());
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_SUITE("scenario") {
  TEST_CASE("shipped scenarios load and validate") {
    for (const char* name : {"toy4", "neighborhood100"}) {
      const auto cfg = testing::load(name);
      CHECK_NOTHROW(validate(cfg));
      CHECK(cfg.classes.size() == 8);
    }
    const auto n = testing::load("neighborhood100");
    CHECK(n.streams.size() == 100);
    CHECK(n.devices.size() == 9);
    CHECK(n.fl.clients.size() == 9);
    double mean = 0;
    for (const auto& s : n.streams) mean += s.process.rate_per_min;
    CHECK(mean / 100 == doctest::Approx(564.0).epsilon(1e-3));
  }

  TEST_CASE("power table references resolve") {
    const auto cfg = testing::load("toy4");
    REQUIRE(cfg.devices.size() == 2);
    const auto& d = cfg.fleet()->devices();
    CHECK(d[0].model_name == "JO32");
    CHECK(d[0].power_idle_w == doctest::Approx(22.4));
    CHECK(d[1].fps_capacity == 400);
  }

  TEST_CASE("serialize then parse is the identity") {
    for (const char* name : {"toy4", "neighborhood100"}) {
      const auto cfg = testing::load(name);
      const auto again = parse_scenario(serialize_scenario(cfg));
      CHECK(again == cfg);
    }
  }

  TEST_CASE("syntax errors report the line") {
    const std::string text = "{\n  \"name\": \"x\",\n  \"seed\": ,\n}";
    try {
      parse_scenario(text);
      FAIL("expected a parse error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kParse);
      CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
  }

  TEST_CASE("field errors name the json path") {
    auto j = toy();
    j["streams"][1]["fps"] = 0;
    CHECK(message_of(j).find("/streams/1/fps") != std::string::npos);

    j = toy();
    j["intervals"]["window_len_s"] = 40;
    CHECK(message_of(j).find("/intervals/window_len_s") != std::string::npos);

    j = toy();
    j["fl"]["tau"] = 1.5;
    CHECK(message_of(j).find("/fl/tau") != std::string::npos);

    j = toy();
    j["streams"][0].erase("id");
    CHECK(message_of(j).find("/streams/0/id") != std::string::npos);

    j = toy();
    j["seed"] = "abc";
    CHECK(message_of(j).find("/seed") != std::string::npos);
  }

  TEST_CASE("reference and duplicate errors") {
    auto j = toy();
    j["streams"][0]["junction_id"] = "p1";  // camera-less vertex
    CHECK(testing::code_of([&] { scenario_from_json(j, testing::scenario_path("toy4").parent_path()); }) ==
          ErrorCode::kReference);
    j = toy();
    j["streams"][0]["junction_id"] = "nowhere";
    CHECK(testing::code_of([&] { scenario_from_json(j, testing::scenario_path("toy4").parent_path()); }) ==
          ErrorCode::kReference);
    j = toy();
    j["streams"][1]["id"] = j["streams"][0]["id"];
    CHECK(testing::code_of([&] { scenario_from_json(j, testing::scenario_path("toy4").parent_path()); }) ==
          ErrorCode::kDuplicateId);
    j = toy();
    j["devices"][0]["model"] = "JO128";
    CHECK(testing::code_of([&] { scenario_from_json(j, testing::scenario_path("toy4").parent_path()); }) ==
          ErrorCode::kReference);
    j = toy();
    j["congestion_thresholds"] = {{"t1", 90}, {"t2", 10}};
    CHECK(testing::code_of([&] { scenario_from_json(j, testing::scenario_path("toy4").parent_path()); }) ==
          ErrorCode::kParse);
  }

  TEST_CASE("stream lookup") {
    const auto cfg = testing::load("toy4");
    CHECK(cfg.stream("cam2").desc.junction_id == "C");
    CHECK(testing::code_of([&] { cfg.stream("cam9"); }) == ErrorCode::kUnknownStream);
    CHECK(cfg.camera_ids() == std::vector<std::string>{"cam0", "cam1", "cam2", "cam3"});
  }

  TEST_CASE("bare names resolve under the scenarios directory") {
    const auto p = resolve_scenario_path("toy4");
    CHECK(p.filename() == "toy4.json");
    CHECK(testing::code_of([] { resolve_scenario_path("no-such-scenario"); }) == ErrorCode::kIo);
  }

  TEST_CASE("fleet file") {
    const auto d = load_fleet(testing::scenario_path("fleet_5x200_4x400"));
    CHECK(d.size() == 9);
  }
}

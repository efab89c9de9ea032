#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "endoev/taxonomy.hpp"
#include "endoev/util.hpp"

using namespace endoev;

TEST_CASE("shipped default taxonomy loads with five ordered regions") {
  LabelSpace space = load_taxonomy(std::string(ENDOEV_SOURCE_DIR) + "/data/taxonomy_default.txt");
  CHECK(space.num_regions() == 5);
  CHECK(space.num_classes() == 12);
  CHECK(space.region_order().front() == 0);
  CHECK(space.class_info(space.region_order().front()).name == "mouth");
  CHECK(space.class_info(space.region_order().back()).name == "colon");
  int landmarks = 0, pathologies = 0;
  for (const ClassInfo& info : space.classes()) {
    landmarks += info.kind == ClassKind::landmark;
    pathologies += info.kind == ClassKind::pathology;
  }
  CHECK(landmarks >= 2);
  CHECK(pathologies >= 3);
  CHECK(space == default_label_space());
}

TEST_CASE("minimal taxonomy: one region, nothing else") {
  LabelSpace space = parse_taxonomy(
      "[classes]\n0 region gut\n[region_order]\n0\n[landmark_rules]\n");
  CHECK(space.num_classes() == 1);
  CHECK(space.num_regions() == 1);
  CHECK(space.region_rank(0) == 0);
}

TEST_CASE("landmark referencing an unknown region is rejected by name") {
  std::string text =
      "[classes]\n0 region gut\n1 landmark gate\n[region_order]\n0\n"
      "[landmark_rules]\n1 regions=99 tolerance=5\n";
  CHECK_THROWS_WITH_AS(parse_taxonomy(text),
                       doctest::Contains("landmark 1 references unknown region 99"), InputError);
}

TEST_CASE("structural errors name the offending field") {
  CHECK_THROWS_WITH_AS(
      parse_taxonomy("[classes]\n0 region a\n0 region b\n[region_order]\n0\n"),
      doctest::Contains("duplicate class id 0"), InputError);
  CHECK_THROWS_WITH_AS(
      parse_taxonomy("[classes]\n0 pathology p\n[region_order]\n[landmark_rules]\n"),
      doctest::Contains("region"), InputError);
  // region_order must cover every region
  CHECK_THROWS_WITH_AS(
      parse_taxonomy("[classes]\n0 region a\n1 region b\n[region_order]\n0\n"),
      doctest::Contains("region_order"), InputError);
  // ids must be dense
  CHECK_THROWS_WITH_AS(
      parse_taxonomy("[classes]\n0 region a\n2 region b\n[region_order]\n0 2\n"),
      doctest::Contains("dense"), InputError);
}

TEST_CASE("region_rank: ranks for regions, absent otherwise, error out of range") {
  LabelSpace space = default_label_space();
  CHECK(space.region_rank(0).value() == 0);   // most proximal
  CHECK(space.region_rank(4).value() == 4);   // most distal of 5
  CHECK_FALSE(space.region_rank(8).has_value());  // pathology
  CHECK_FALSE(space.region_rank(6).has_value());  // landmark
  CHECK_THROWS_AS(space.region_rank(12), InputError);
  CHECK_THROWS_AS(space.region_rank(-1), InputError);
}

TEST_CASE("region_rank is a bijection onto 0..R-1") {
  LabelSpace space = default_label_space();
  std::vector<bool> seen(static_cast<std::size_t>(space.num_regions()), false);
  for (const ClassInfo& info : space.classes()) {
    auto rank = space.region_rank(info.id);
    if (info.kind == ClassKind::region) {
      REQUIRE(rank.has_value());
      CHECK(*rank >= 0);
      CHECK(*rank < space.num_regions());
      CHECK_FALSE(seen[static_cast<std::size_t>(*rank)]);
      seen[static_cast<std::size_t>(*rank)] = true;
    } else {
      CHECK_FALSE(rank.has_value());
    }
  }
  for (bool hit : seen) CHECK(hit);
}

TEST_CASE("serialize/parse round trip is identity") {
  LabelSpace space = default_label_space();
  LabelSpace reloaded = parse_taxonomy(serialize_taxonomy(space));
  CHECK(space == reloaded);
  // and again, to make sure serialization is stable
  CHECK(serialize_taxonomy(reloaded) == serialize_taxonomy(space));
}

TEST_CASE("names may contain spaces") {
  LabelSpace space = parse_taxonomy(
      "[classes]\n0 region upper gi tract\n[region_order]\n0\n");
  CHECK(space.class_info(0).name == "upper gi tract");
  CHECK(parse_taxonomy(serialize_taxonomy(space)) == space);
}

#include "doctest.h"

#include <cmath>
#include <fstream>
#include <sstream>

#include "hyperattn/interleave.hpp"
#include "hyperattn/mat.hpp"

using namespace hyperattn;

namespace {

// Independent grid-selection oracle: enumerate the seven candidate grids and
// apply the documented metric and tie-break by hand. (1,1) is a legal crop
// role but never a candidate; a cropped image always gets a real grid.
Grid grid_oracle(int w, int h) {
  static const Grid candidates[] = {{2, 2}, {1, 3}, {1, 4}, {3, 1},
                                    {4, 1}, {2, 3}, {3, 2}};
  double want = std::log(static_cast<double>(w) / h);
  Grid best = candidates[0];
  double best_err = 1e300;
  for (const Grid& g : candidates) {
    double err = std::fabs(std::log(static_cast<double>(g.cols) / g.rows) - want);
    bool better = err < best_err;
    if (err == best_err) {
      int cells = g.rows * g.cols, best_cells = best.rows * best.cols;
      better = cells < best_cells ||
               (cells == best_cells &&
                (g.rows < best.rows || (g.rows == best.rows && g.cols < best.cols)));
    }
    if (better) {
      best = g;
      best_err = err;
    }
  }
  return best;
}

InterleavedSequence two_image_sequence() {
  std::vector<Segment> segs;
  segs.push_back(Segment::make_text({10, 11, 12}));
  segs.push_back(Segment::make_image(0xaa));
  segs.push_back(Segment::make_text({13, 14}));
  segs.push_back(Segment::make_image(0xbb));
  segs.push_back(Segment::make_text({15}));
  return build_sequence(segs, CropPolicy::off);
}

}  // namespace

TEST_CASE("two images interleaved with text") {
  InterleavedSequence seq = two_image_sequence();
  CHECK(seq.length() == 8);
  CHECK(seq.num_slots() == 2);
  CHECK(seq.tokens[3] == seq.placeholder_id);
  CHECK(seq.tokens[6] == seq.placeholder_id);
  CHECK(seq.image_slots[0].placeholder_position == 3);
  CHECK(seq.image_slots[1].placeholder_position == 6);
  CHECK(seq.image_slots[0].image_id == 0xaa);
  CHECK(seq.image_slots[1].image_id == 0xbb);
  CHECK(seq.image_slots[0].crop_role.global);
  validate_sequence(seq);
}

TEST_CASE("video expands to one placeholder per frame") {
  std::vector<Segment> segs = {Segment::make_video(0xcc, 8)};
  InterleavedSequence seq = build_sequence(segs, CropPolicy::off);
  CHECK(seq.length() == 8);
  CHECK(seq.num_slots() == 8);
  for (int t = 0; t < 8; ++t) {
    CHECK(seq.tokens[t] == seq.placeholder_id);
    CHECK(seq.image_slots[t].placeholder_position == t);
    CHECK(seq.image_slots[t].image_id == 0xcc);
  }
  RotaryPositionMap rope = build_rope_map(seq);
  for (int s = 0; s < 8; ++s) CHECK(rope.visual_key_positions[s] == s);
}

TEST_CASE("square image with cropping yields a global view plus a 2x2 grid") {
  CHECK(grid_oracle(448, 448) == Grid{2, 2});  // pin the oracle itself first
  std::vector<Segment> segs;
  segs.push_back(Segment::make_text({42}));
  segs.push_back(Segment::make_image(0xdd, 448, 448));
  InterleavedSequence seq = build_sequence(segs, CropPolicy::on);
  int placeholders = 0;
  for (TokenId t : seq.tokens) placeholders += t == seq.placeholder_id;
  CHECK(placeholders == 1);
  CHECK(seq.tokens[1] == seq.placeholder_id);
  REQUIRE(seq.num_slots() == 5);
  CHECK(seq.image_slots[0].crop_role.global);
  for (int s = 1; s < 5; ++s) {
    const CropRole& r = seq.image_slots[s].crop_role;
    CHECK_FALSE(r.global);
    CHECK(r.grid_rows == 2);
    CHECK(r.grid_cols == 2);
  }
  // row-major crop order after the global view
  CHECK(seq.image_slots[1].crop_role == CropRole::cell({2, 2}, 0, 0));
  CHECK(seq.image_slots[2].crop_role == CropRole::cell({2, 2}, 0, 1));
  CHECK(seq.image_slots[3].crop_role == CropRole::cell({2, 2}, 1, 0));
  CHECK(seq.image_slots[4].crop_role == CropRole::cell({2, 2}, 1, 1));
  for (const auto& s : seq.image_slots) CHECK(s.placeholder_position == 1);
  RotaryPositionMap rope = build_rope_map(seq);
  for (int s = 0; s < 5; ++s) CHECK(rope.visual_key_positions[s] == 1);
  validate_sequence(seq);
}

TEST_CASE("crop grid selection matches the enumeration oracle") {
  CHECK(select_crop_grid(448, 448) == Grid{2, 2});
  CHECK(select_crop_grid(1600, 400) == Grid{1, 4});
  CHECK(select_crop_grid(300, 900) == Grid{3, 1});
  Rng rng(31);
  for (int i = 0; i < 500; ++i) {
    int w = rng.uniform_int(1, 4000), h = rng.uniform_int(1, 4000);
    Grid got = select_crop_grid(w, h);
    Grid want = grid_oracle(w, h);
    CAPTURE(w);
    CAPTURE(h);
    CHECK(got == want);
    // scale invariance
    CHECK(select_crop_grid(3 * w, 3 * h) == got);
  }
  CHECK_THROWS_AS(select_crop_grid(0, 10), std::invalid_argument);
  CHECK_THROWS_AS(select_crop_grid(10, -1), std::invalid_argument);
}

TEST_CASE("rope map uses placeholder positions for visual keys") {
  InterleavedSequence seq = two_image_sequence();
  RotaryPositionMap rope = build_rope_map(seq);
  REQUIRE(rope.query_positions.size() == 8);
  for (int t = 0; t < 8; ++t) CHECK(rope.query_positions[t] == t);
  REQUIRE(rope.visual_key_positions.size() == 2);
  CHECK(rope.visual_key_positions[0] == 3);
  CHECK(rope.visual_key_positions[1] == 6);
}

TEST_CASE("cross mask applies the inclusive causal rule") {
  std::vector<Segment> segs;
  segs.push_back(Segment::make_text({1}));
  segs.push_back(Segment::make_image(0x1));
  segs.push_back(Segment::make_text({2}));
  segs.push_back(Segment::make_image(0x2));
  segs.push_back(Segment::make_text({3}));
  InterleavedSequence seq = build_sequence(segs, CropPolicy::off);
  REQUIRE(seq.length() == 5);
  CrossAttentionMask mask = build_cross_mask(seq);
  CHECK_FALSE(mask.at(0, 0));
  CHECK_FALSE(mask.at(0, 1));
  CHECK(mask.at(1, 0));  // placeholder attends its own image
  CHECK(mask.at(2, 0));
  CHECK_FALSE(mask.at(2, 1));
  CHECK(mask.at(4, 0));
  CHECK(mask.at(4, 1));
}

TEST_CASE("cross mask edge shapes") {
  InterleavedSequence text_only =
      build_sequence({Segment::make_text({1, 2, 3})}, CropPolicy::off);
  CrossAttentionMask m0 = build_cross_mask(text_only);
  CHECK(m0.num_slots == 0);
  CHECK(m0.text_len == 3);

  std::vector<Segment> segs = {Segment::make_image(0x9),
                               Segment::make_text({1, 2})};
  CrossAttentionMask m1 = build_cross_mask(build_sequence(segs, CropPolicy::off));
  for (int t = 0; t < 3; ++t) CHECK(m1.at(t, 0));
}

TEST_CASE("mask causality and monotone visibility over random interleavings") {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Segment> segs;
    int n_images = rng.uniform_int(1, 5);
    for (int i = 0; i < n_images; ++i) {
      int run = rng.uniform_int(0, 3);
      if (run > 0) {
        std::vector<TokenId> toks;
        for (int t = 0; t < run; ++t) toks.push_back(rng.uniform_int(1, 100));
        segs.push_back(Segment::make_text(toks));
      }
      segs.push_back(Segment::make_image(0x100 + static_cast<ImageId>(i)));
    }
    segs.push_back(Segment::make_text({7}));
    InterleavedSequence seq = build_sequence(segs, CropPolicy::off);
    validate_sequence(seq);
    CrossAttentionMask mask = build_cross_mask(seq);
    RotaryPositionMap rope = build_rope_map(seq);
    for (int s = 0; s < mask.num_slots; ++s) {
      int pp = seq.image_slots[s].placeholder_position;
      CHECK(rope.visual_key_positions[s] == pp);
      CHECK(rope.visual_key_positions[s] <= seq.length() - 1);
      for (int t = 0; t < mask.text_len; ++t) {
        if (mask.at(t, s)) CHECK(pp <= t);
        if (t > 0 && mask.at(t - 1, s)) CHECK(mask.at(t, s));  // monotone
        CHECK(mask.at(t, s) == (pp <= t));
      }
    }
  }
}

TEST_CASE("placeholder counting across segment kinds") {
  std::vector<Segment> segs;
  segs.push_back(Segment::make_text({1, 2}));
  segs.push_back(Segment::make_image(0x1));
  segs.push_back(Segment::make_video(0x2, 3));
  segs.push_back(Segment::make_text({3}));
  segs.push_back(Segment::make_image(0x3, 800, 400));
  InterleavedSequence off = build_sequence(segs, CropPolicy::off);
  int ph = 0;
  for (TokenId t : off.tokens) ph += t == off.placeholder_id;
  CHECK(ph == 5);  // 2 images + 3 frames
  CHECK(off.num_slots() == 5);

  InterleavedSequence on = build_sequence(segs, CropPolicy::on);
  int ph_on = 0;
  for (TokenId t : on.tokens) ph_on += t == on.placeholder_id;
  CHECK(ph_on == 5);  // same placeholders...
  Grid g = select_crop_grid(800, 400);
  // ...but images gain 1 + rows*cols slots each; frames are never cropped
  CHECK(on.num_slots() == (1 + 2 * 2) + 3 + (1 + g.rows * g.cols));
}

TEST_CASE("build_sequence rejects malformed segments") {
  CHECK_THROWS_AS(build_sequence({}, CropPolicy::off), std::invalid_argument);
  CHECK_THROWS_AS(build_sequence({Segment::make_text({})}, CropPolicy::off),
                  std::invalid_argument);
  CHECK_THROWS_AS(build_sequence({Segment::make_video(0x1, 0)}, CropPolicy::off),
                  std::invalid_argument);
  Segment bad_image = Segment::make_image(0x1, 0, 448);
  CHECK_THROWS_AS(build_sequence({bad_image}, CropPolicy::on),
                  std::invalid_argument);
}

TEST_CASE("validate_sequence rejects corrupted slot records") {
  InterleavedSequence seq = two_image_sequence();
  InterleavedSequence bad = seq;
  bad.image_slots[1].placeholder_position = 2;  // not a placeholder token
  CHECK_THROWS_AS(validate_sequence(bad), std::invalid_argument);
  bad = seq;
  bad.image_slots[0].slot_index = 5;
  CHECK_THROWS_AS(validate_sequence(bad), std::invalid_argument);
  bad = seq;
  bad.image_slots[0].placeholder_position = 6;
  bad.image_slots[1].placeholder_position = 3;
  CHECK_THROWS_AS(validate_sequence(bad), std::invalid_argument);
}

TEST_CASE("fixture round-trip preserves every field") {
  std::vector<Segment> segs;
  segs.push_back(Segment::make_text({9, 8}));
  segs.push_back(Segment::make_image(0x77, 900, 300));
  segs.push_back(Segment::make_text({7}));
  InterleavedSequence seq = build_sequence(segs, CropPolicy::on);
  std::stringstream ss;
  write_sequence_fixture(ss, seq);
  InterleavedSequence back = read_sequence_fixture(ss);
  CHECK(back.tokens == seq.tokens);
  CHECK(back.placeholder_id == seq.placeholder_id);
  REQUIRE(back.num_slots() == seq.num_slots());
  for (int s = 0; s < seq.num_slots(); ++s) {
    CHECK(back.image_slots[s].slot_index == seq.image_slots[s].slot_index);
    CHECK(back.image_slots[s].image_id == seq.image_slots[s].image_id);
    CHECK(back.image_slots[s].placeholder_position ==
          seq.image_slots[s].placeholder_position);
    CHECK(back.image_slots[s].crop_role == seq.image_slots[s].crop_role);
  }
}

TEST_CASE("golden two-image fixture stays stable") {
  InterleavedSequence seq = two_image_sequence();
  std::stringstream ss;
  write_sequence_fixture(ss, seq);
  std::ifstream golden(std::string(TEST_DATA_DIR) + "/seq_2img.txt");
  REQUIRE(golden.good());
  std::ostringstream want;
  want << golden.rdbuf();
  CHECK(ss.str() == want.str());
}

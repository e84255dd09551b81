#include "doctest.h"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "hyperattn/distractor.hpp"

using namespace hyperattn;

namespace {

NeedleTask hand_task() {
  NeedleTask t;
  t.n_images = 2;
  t.needle_index = 2;
  t.images = {{0, 1}, {4, 6}};  // circle/blue, hexagon/black
  t.query_shape = true;
  t.question = "what is the shape of the object?";
  t.options = {shape_palette()[2], shape_palette()[4], shape_palette()[0],
               shape_palette()[7]};
  t.answer_index = 1;  // hexagon
  t.task_key = 42;
  return t;
}

struct Position0Adapter : ModelAdapter {
  std::string name() const override { return "pos0"; }
  int answer(const InterleavedSequence&, const Mat&,
             const std::vector<std::string>&, const CallContext&) override {
    return 0;
  }
};

struct ThrowingAdapter : ModelAdapter {
  std::string name() const override { return "throwing"; }
  int answer(const InterleavedSequence&, const Mat&,
             const std::vector<std::string>&, const CallContext&) override {
    throw std::runtime_error("backend unavailable");
  }
};

struct OutOfRangeAdapter : ModelAdapter {
  std::string name() const override { return "oob"; }
  int answer(const InterleavedSequence&, const Mat&,
             const std::vector<std::string>&, const CallContext&) override {
    return 7;
  }
};

}  // namespace

TEST_CASE("prompt rendering follows the template byte for byte") {
  NeedleTask t = hand_task();
  RenderedPrompt p = render_prompt(t, 511, 512);
  CHECK(p.text ==
        "Image 1: <|image|> Image 2: <|image|>. In Image 2, "
        "what is the shape of the object?");
  // token layout: [Image 1 :] ph [Image 2 :] ph [tail of 13]
  REQUIRE(p.seq.length() == 2 * 4 + 13);
  CHECK(p.seq.num_slots() == 2);
  CHECK(p.seq.tokens[0] == words::kImage);
  CHECK(p.seq.tokens[1] == words::kNumBase + 1);
  CHECK(p.seq.tokens[2] == words::kColon);
  CHECK(p.seq.tokens[3] == 511);
  CHECK(p.seq.tokens[7] == 511);
  CHECK(p.seq.image_slots[0].placeholder_position == 3);
  CHECK(p.seq.image_slots[1].placeholder_position == 7);
  CHECK(p.seq.tokens[8] == words::kPeriod);
  CHECK(p.seq.tokens[11] == words::kNumBase + 2);  // the queried index X
  CHECK(p.seq.tokens[16] == words::kShape);
  CHECK(p.seq.tokens[20] == words::kQuestionMark);
  // descriptor ids reproduce the image attributes
  REQUIRE(p.image_ids.size() == 2);
  CHECK(descriptor_shape(p.image_ids[1]) == 4);
  CHECK(descriptor_color(p.image_ids[1]) == 6);

  RenderedPrompt again = render_prompt(t, 511, 512);
  CHECK(again.text == p.text);
  CHECK(again.seq.tokens == p.seq.tokens);

  NeedleTask color = t;
  color.query_shape = false;
  color.question = "what is the color of the object?";
  RenderedPrompt pc = render_prompt(color, 511, 512);
  CHECK(pc.seq.tokens[16] == words::kColor);

  NeedleTask wide = t;
  wide.n_images = 500;
  wide.images.assign(500, {0, 0});
  CHECK_THROWS_AS(render_prompt(wide, 511, 512), std::invalid_argument);
}

TEST_CASE("task generation is deterministic, stratified, and answerable") {
  EvalConfig cfg;
  cfg.n_values = {4};
  cfg.questions = 12;
  std::vector<NeedleTask> tasks = gen_tasks(cfg);
  REQUIRE(tasks.size() == 12);
  CHECK(tasks_to_json(tasks) == tasks_to_json(gen_tasks(cfg)));

  for (std::size_t q = 0; q < tasks.size(); ++q) {
    const NeedleTask& t = tasks[q];
    CHECK(t.needle_index == static_cast<int>(q) % 4 + 1);  // every slot covered
    REQUIRE(t.images.size() == 4);
    const auto& needle = t.images[static_cast<std::size_t>(t.needle_index - 1)];
    const auto& names = t.query_shape ? shape_palette() : color_palette();
    int correct_code = t.query_shape ? needle.first : needle.second;

    // exactly one option carries the needle's queried attribute
    int hits = 0;
    for (int i = 0; i < kNumOptions; ++i)
      hits += t.options[static_cast<std::size_t>(i)] ==
              names[static_cast<std::size_t>(correct_code)];
    CHECK(hits == 1);
    CHECK(t.options[static_cast<std::size_t>(t.answer_index)] ==
          names[static_cast<std::size_t>(correct_code)]);
    std::set<std::string> distinct(t.options.begin(), t.options.end());
    CHECK(distinct.size() == kNumOptions);

    // no distractor shares the queried attribute, so the needle is unique
    for (int i = 0; i < t.n_images; ++i) {
      if (i == t.needle_index - 1) continue;
      int code = t.query_shape ? t.images[static_cast<std::size_t>(i)].first
                               : t.images[static_cast<std::size_t>(i)].second;
      CHECK(code != correct_code);
    }
  }

  // a different seed reshuffles the tasks
  EvalConfig other = cfg;
  other.rng_seed = 1;
  CHECK(tasks_to_json(gen_tasks(other)) != tasks_to_json(tasks));

  EvalConfig bad = cfg;
  bad.questions = 0;
  CHECK_THROWS_AS(gen_tasks(bad), std::invalid_argument);
  bad = cfg;
  bad.n_values = {0};
  CHECK_THROWS_AS(gen_tasks(bad), std::invalid_argument);
}

TEST_CASE("distractor resampling keeps the needle and the uniqueness invariant") {
  EvalConfig cfg;
  cfg.n_values = {6};
  cfg.questions = 6;
  for (const NeedleTask& t : gen_tasks(cfg)) {
    auto own = variant_images(t, 0);
    CHECK(own == t.images);
    const auto& needle = t.images[static_cast<std::size_t>(t.needle_index - 1)];
    int correct_code = t.query_shape ? needle.first : needle.second;
    for (int ds = 1; ds <= 3; ++ds) {
      auto vi = variant_images(t, ds);
      REQUIRE(vi.size() == t.images.size());
      CHECK(vi[static_cast<std::size_t>(t.needle_index - 1)] == needle);
      for (int i = 0; i < t.n_images; ++i) {
        if (i == t.needle_index - 1) continue;
        int code = t.query_shape ? vi[static_cast<std::size_t>(i)].first
                                 : vi[static_cast<std::size_t>(i)].second;
        CHECK(code != correct_code);
      }
      // resampling actually changes something across the set
    }
  }
}

TEST_CASE("the probing oracle closes the loop at 100 percent") {
  EvalConfig cfg;
  cfg.n_values = {1, 3};
  cfg.questions = 6;
  cfg.distractor_seeds = 2;
  std::vector<NeedleTask> tasks = gen_tasks(cfg);
  auto oracle = make_adapter("oracle", 0);
  std::vector<NeedleResult> res = circular_eval(*oracle, tasks, cfg);
  REQUIRE(res.size() == 2);
  for (const auto& r : res) {
    CHECK(r.questions == 6);
    CHECK(r.correct == 6);
    CHECK(r.accuracy == 1.0);
    CHECK(r.adapter_failures == 0);
  }
}

TEST_CASE("rotation consistency defeats a position-committed adapter") {
  EvalConfig cfg;
  cfg.n_values = {2};
  cfg.questions = 8;
  std::vector<NeedleTask> tasks = gen_tasks(cfg);
  Position0Adapter fixed;

  // under full rotation the answer slot moves, so a constant guess never
  // survives all four presentations
  std::vector<NeedleResult> strict = circular_eval(fixed, tasks, cfg);
  CHECK(strict[0].accuracy == 0.0);

  // with a single rotation it can still luck into answer_index == 0 tasks
  EvalConfig lax = cfg;
  lax.rotations = 1;
  std::vector<NeedleResult> loose = circular_eval(fixed, tasks, lax);
  int zero_idx = 0;
  for (const auto& t : tasks) zero_idx += t.answer_index == 0;
  CHECK(loose[0].correct == zero_idx);
}

TEST_CASE("more rotations never increase an adapter's accuracy") {
  EvalConfig cfg;
  cfg.n_values = {3};
  cfg.questions = 40;
  std::vector<NeedleTask> tasks = gen_tasks(cfg);
  auto random = make_adapter("random", 7);
  EvalConfig one = cfg;
  one.rotations = 1;
  double acc1 = circular_eval(*random, tasks, one)[0].accuracy;
  double acc4 = circular_eval(*random, tasks, cfg)[0].accuracy;
  CHECK(acc4 <= acc1);
}

TEST_CASE("adapter exceptions and out-of-range answers count as failures") {
  EvalConfig cfg;
  cfg.n_values = {2};
  cfg.questions = 5;
  std::vector<NeedleTask> tasks = gen_tasks(cfg);

  ThrowingAdapter thrower;
  std::vector<NeedleResult> res = circular_eval(thrower, tasks, cfg);
  REQUIRE(res.size() == 1);
  CHECK(res[0].correct == 0);
  CHECK(res[0].accuracy == 0.0);
  CHECK(res[0].adapter_failures == 5);  // one per task, not per rotation

  OutOfRangeAdapter oob;
  std::vector<NeedleResult> res2 = circular_eval(oob, tasks, cfg);
  CHECK(res2[0].correct == 0);
  CHECK(res2[0].adapter_failures == 5);

  CHECK_THROWS_AS(circular_eval(thrower, {}, cfg), std::invalid_argument);
}

TEST_CASE("first-image probing decays exactly with the needle position") {
  EvalConfig cfg;
  cfg.n_values = {1, 3};
  cfg.questions = 6;
  std::vector<NeedleTask> tasks = gen_tasks(cfg);
  auto first = make_adapter("first-image", 0);
  std::vector<NeedleResult> res = circular_eval(*first, tasks, cfg);
  REQUIRE(res.size() == 2);
  CHECK(res[0].accuracy == 1.0);  // N=1: the first image is the needle
  // N=3, stratified needles 1,2,3,1,2,3: correct only when the needle leads
  CHECK(res[1].correct == 2);
}

TEST_CASE("adapters are constructable by name") {
  for (const char* name : {"oracle", "random", "first-image", "toy-model"}) {
    auto a = make_adapter(name, 3);
    REQUIRE(a != nullptr);
    CHECK(a->name() == name);
  }
  CHECK_THROWS_AS(make_adapter("gpt-5", 0), std::invalid_argument);
  CHECK(eval_threads() >= 1);
}

TEST_CASE("tasks serialize to json and back") {
  EvalConfig cfg;
  cfg.n_values = {2, 3};
  cfg.questions = 3;
  std::vector<NeedleTask> tasks = gen_tasks(cfg);
  std::vector<NeedleTask> back = tasks_from_json(tasks_to_json(tasks));
  REQUIRE(back.size() == tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    CHECK(back[i].n_images == tasks[i].n_images);
    CHECK(back[i].needle_index == tasks[i].needle_index);
    CHECK(back[i].images == tasks[i].images);
    CHECK(back[i].query_shape == tasks[i].query_shape);
    CHECK(back[i].question == tasks[i].question);
    CHECK(back[i].options == tasks[i].options);
    CHECK(back[i].answer_index == tasks[i].answer_index);
    CHECK(back[i].task_key == tasks[i].task_key);
  }
  CHECK_THROWS(tasks_from_json("["));
  // structurally valid but inconsistent: the needle points past the images
  CHECK_THROWS_AS(
      tasks_from_json("[{\"n_images\": 1, \"needle_index\": 2, \"images\": [[0, 0]],"
                      " \"query_shape\": true, \"question\": \"q\","
                      " \"options\": [\"a\", \"b\", \"c\", \"d\"],"
                      " \"answer_index\": 0, \"task_key\": 0}]"),
      std::invalid_argument);
}

TEST_CASE("results csv carries the documented schema") {
  std::vector<NeedleResult> results(2);
  results[0] = {1, 400, 400, 1.0, 0};
  results[1] = {50, 400, 100, 0.25, 3};
  std::string path = "distractor_roundtrip.csv";
  write_results_csv(results, path);
  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  std::getline(in, line);
  CHECK(line == "n_images,questions,correct,accuracy");
  std::getline(in, line);
  CHECK(line == "1,400,400,1.000000");
  std::getline(in, line);
  CHECK(line == "50,400,100,0.250000");
  in.close();
  std::remove(path.c_str());
}

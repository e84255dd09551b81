#include "hyperattn/distractor.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <stdexcept>
#include <thread>

#include "json.hpp"

namespace hyperattn {

using nlohmann::json;

const std::array<std::string, kPaletteSize>& shape_palette() {
  static const std::array<std::string, kPaletteSize> p = {
      "circle", "square", "triangle", "star", "hexagon", "diamond", "cross", "ring"};
  return p;
}

const std::array<std::string, kPaletteSize>& color_palette() {
  static const std::array<std::string, kPaletteSize> p = {
      "red", "blue", "green", "yellow", "purple", "orange", "black", "white"};
  return p;
}

int eval_threads() {
  if (const char* env = std::getenv("HYPERATTN_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(std::min(hw, 8u));
}

// --- task generation ---------------------------------------------------------

static std::pair<int, int> sample_distractor(std::uint64_t key,
                                             const std::pair<int, int>& needle,
                                             bool query_shape) {
  // distractors always differ from the needle in the queried attribute so the
  // needle uniquely determines the correct option
  int shape, color;
  if (query_shape) {
    shape = static_cast<int>(mix64(key, 11) % (kPaletteSize - 1));
    if (shape >= needle.first) ++shape;
    color = static_cast<int>(mix64(key, 12) % kPaletteSize);
  } else {
    color = static_cast<int>(mix64(key, 13) % (kPaletteSize - 1));
    if (color >= needle.second) ++color;
    shape = static_cast<int>(mix64(key, 14) % kPaletteSize);
  }
  return {shape, color};
}

std::vector<std::pair<int, int>> variant_images(const NeedleTask& task, int dseed) {
  if (dseed == 0) return task.images;
  std::vector<std::pair<int, int>> imgs = task.images;
  const auto& needle = task.images[static_cast<std::size_t>(task.needle_index - 1)];
  for (int i = 0; i < task.n_images; ++i) {
    if (i == task.needle_index - 1) continue;
    imgs[static_cast<std::size_t>(i)] = sample_distractor(
        mix64(task.task_key, static_cast<std::uint64_t>(dseed),
              static_cast<std::uint64_t>(i)),
        needle, task.query_shape);
  }
  return imgs;
}

std::vector<NeedleTask> gen_tasks(const EvalConfig& cfg) {
  if (cfg.questions <= 0 || cfg.rotations < 1 || cfg.distractor_seeds < 1)
    throw std::invalid_argument("gen_tasks: bad config");
  std::vector<NeedleTask> tasks;
  tasks.reserve(cfg.n_values.size() * static_cast<std::size_t>(cfg.questions));
  for (int n : cfg.n_values) {
    if (n < 1) throw std::invalid_argument("gen_tasks: n_images must be >= 1");
    for (int q = 0; q < cfg.questions; ++q) {
      NeedleTask t;
      t.n_images = n;
      t.needle_index = q % n + 1;  // stratified so every slot gets exercised
      t.task_key = mix64(cfg.rng_seed, static_cast<std::uint64_t>(n),
                         static_cast<std::uint64_t>(q));
      t.query_shape = mix64(t.task_key, 1) % 2 == 0;
      std::pair<int, int> needle = {
          static_cast<int>(mix64(t.task_key, 2) % kPaletteSize),
          static_cast<int>(mix64(t.task_key, 3) % kPaletteSize)};
      t.images.resize(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        if (i == t.needle_index - 1) {
          t.images[static_cast<std::size_t>(i)] = needle;
        } else {
          t.images[static_cast<std::size_t>(i)] = sample_distractor(
              mix64(t.task_key, 0, static_cast<std::uint64_t>(i)), needle,
              t.query_shape);
        }
      }
      t.question = t.query_shape ? "what is the shape of the object?"
                                 : "what is the color of the object?";
      // four distinct option values including the answer, in a seeded order
      int correct = t.query_shape ? needle.first : needle.second;
      std::array<int, kPaletteSize> pool;
      for (int i = 0; i < kPaletteSize; ++i) pool[static_cast<std::size_t>(i)] = i;
      // seeded partial Fisher-Yates over the non-answer values
      std::swap(pool[static_cast<std::size_t>(correct)], pool[kPaletteSize - 1]);
      for (int i = 0; i < kNumOptions - 1; ++i) {
        int j = i + static_cast<int>(mix64(t.task_key, 4, static_cast<std::uint64_t>(i)) %
                                     static_cast<std::uint64_t>(kPaletteSize - 1 - i));
        std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
      }
      std::array<int, kNumOptions> values;
      for (int i = 0; i < kNumOptions - 1; ++i) values[static_cast<std::size_t>(i)] = pool[static_cast<std::size_t>(i)];
      values[kNumOptions - 1] = correct;
      // place the answer at a seeded position
      int pos = static_cast<int>(mix64(t.task_key, 5) % kNumOptions);
      std::swap(values[static_cast<std::size_t>(pos)], values[kNumOptions - 1]);
      const auto& names = t.query_shape ? shape_palette() : color_palette();
      for (int i = 0; i < kNumOptions; ++i) {
        t.options[static_cast<std::size_t>(i)] =
            names[static_cast<std::size_t>(values[static_cast<std::size_t>(i)])];
        if (values[static_cast<std::size_t>(i)] == correct) t.answer_index = i;
      }
      tasks.push_back(std::move(t));
    }
  }
  return tasks;
}

// --- prompt rendering ----------------------------------------------------------

RenderedPrompt render_prompt(const NeedleTask& task, TokenId placeholder_id,
                             int vocab_size) {
  if (words::kNumBase + task.n_images >= vocab_size - 1)
    throw std::invalid_argument("render_prompt: vocabulary too small for N");
  RenderedPrompt r;
  std::vector<Segment> segs;
  std::string text;
  for (int i = 1; i <= task.n_images; ++i) {
    if (i > 1) text += " ";
    text += "Image " + std::to_string(i) + ": <|image|>";
    segs.push_back(Segment::make_text(
        {words::kImage, words::kNumBase + i, words::kColon}));
    const auto& img = task.images[static_cast<std::size_t>(i - 1)];
    ImageId id = make_descriptor_id(img.first, img.second);
    segs.push_back(Segment::make_image(id));
    r.image_ids.push_back(id);
  }
  text += ". In Image " + std::to_string(task.needle_index) + ", " + task.question;
  std::vector<TokenId> tail = {words::kPeriod, words::kIn, words::kImage,
                               words::kNumBase + task.needle_index, words::kComma,
                               words::kWhat, words::kIs, words::kThe,
                               task.query_shape ? words::kShape : words::kColor,
                               words::kOf, words::kThe, words::kObject,
                               words::kQuestionMark};
  segs.push_back(Segment::make_text(tail));
  r.text = std::move(text);
  r.seq = build_sequence(segs, CropPolicy::off, placeholder_id);
  return r;
}

// --- adapters -------------------------------------------------------------------

namespace {

int option_position(const std::vector<std::string>& opts, const std::string& value) {
  for (std::size_t i = 0; i < opts.size(); ++i)
    if (opts[i] == value) return static_cast<int>(i);
  return -1;
}

// Reads X and the queried attribute from the prompt tokens, then probes the
// stub features of slot X for the descriptor.
class OracleAdapter : public ModelAdapter {
 public:
  std::string name() const override { return "oracle"; }
  int answer(const InterleavedSequence& seq, const Mat& raw_feats,
             const std::vector<std::string>& opts, const CallContext&) override {
    int x = -1;
    bool query_shape = true;
    for (std::size_t i = 0; i + 1 < seq.tokens.size(); ++i) {
      if (seq.tokens[i] == words::kIn && seq.tokens[i + 1] == words::kImage &&
          i + 2 < seq.tokens.size())
        x = seq.tokens[i + 2] - words::kNumBase;
      if (seq.tokens[i] == words::kShape) query_shape = true;
      if (seq.tokens[i] == words::kColor) query_shape = false;
    }
    if (x < 1 || x > seq.num_slots())
      throw std::runtime_error("oracle adapter: no needle index in prompt");
    int patches = raw_feats.rows / seq.num_slots();
    const double* probe = raw_feats.row((x - 1) * patches);
    int code = static_cast<int>(query_shape ? probe[0] : probe[1]);
    const auto& names = query_shape ? shape_palette() : color_palette();
    int pos = option_position(opts, names[static_cast<std::size_t>(code)]);
    return pos >= 0 ? pos : 0;
  }
};

// Stateless uniform choice; keyed by the call context so concurrent and
// repeated evaluations agree.
class RandomAdapter : public ModelAdapter {
 public:
  explicit RandomAdapter(std::uint64_t seed) : seed_(seed) {}
  std::string name() const override { return "random"; }
  int answer(const InterleavedSequence&, const Mat&,
             const std::vector<std::string>& opts, const CallContext& ctx) override {
    std::uint64_t h = mix64(seed_, static_cast<std::uint64_t>(ctx.n_images) << 32 |
                                       static_cast<std::uint32_t>(ctx.question_index),
                            static_cast<std::uint64_t>(ctx.rotation) << 32 |
                                static_cast<std::uint32_t>(ctx.distractor_seed));
    return static_cast<int>(h % opts.size());
  }

 private:
  std::uint64_t seed_;
};

// Always answers from the first image, ignoring X: the distractor-failure
// strawman the harness must be able to detect.
class FirstImageAdapter : public ModelAdapter {
 public:
  std::string name() const override { return "first-image"; }
  int answer(const InterleavedSequence& seq, const Mat& raw_feats,
             const std::vector<std::string>& opts, const CallContext&) override {
    bool query_shape = true;
    for (TokenId t : seq.tokens) {
      if (t == words::kShape) query_shape = true;
      if (t == words::kColor) query_shape = false;
    }
    const double* probe = raw_feats.row(0);
    int code = static_cast<int>(query_shape ? probe[0] : probe[1]);
    const auto& names = query_shape ? shape_palette() : color_palette();
    int pos = option_position(opts, names[static_cast<std::size_t>(code)]);
    // value absent from the options: commit to presented position 0, which
    // cannot be consistent across rotations
    return pos >= 0 ? pos : 0;
  }
};

// Scores each option by the logit of its palette token at the final position.
class ToyModelAdapter : public ModelAdapter {
 public:
  explicit ToyModelAdapter(std::uint64_t seed) {
    ModelConfig cfg;
    cfg.hidden_dim = 32;
    cfg.n_heads = 2;
    cfg.n_layers = 4;
    cfg.ffn_dim = 64;
    cfg.patches_per_slot = 4;
    cfg.hatb_indices = default_hatb_indices(4, 2);
    cfg.variant = Variant::hyper;
    cfg.seed = seed;
    model_ = build_model(cfg);
  }
  std::string name() const override { return "toy-model"; }
  int answer(const InterleavedSequence& seq, const Mat& raw_feats,
             const std::vector<std::string>& opts, const CallContext&) override {
    Mat feats = raw_feats;
    if (model_.cfg.patches_per_slot * seq.num_slots() != raw_feats.rows ||
        raw_feats.cols != model_.cfg.hidden_dim) {
      // re-encode at this model's scale
      std::vector<ImageId> ids;
      for (const auto& s : seq.image_slots) ids.push_back(s.image_id);
      feats = encode_images_stub(ids, model_.cfg.patches_per_slot,
                                 model_.cfg.hidden_dim, model_.cfg.seed);
    }
    ModelOutput out = model_forward(model_, seq, feats);
    const double* last = out.logits.row(out.logits.rows - 1);
    int best = 0;
    double best_score = -1e300;
    for (std::size_t i = 0; i < opts.size(); ++i) {
      TokenId tok = option_token(opts[i]);
      if (last[tok] > best_score) {
        best_score = last[tok];
        best = static_cast<int>(i);
      }
    }
    return best;
  }

 private:
  static TokenId option_token(const std::string& value) {
    const auto& sh = shape_palette();
    for (int i = 0; i < kPaletteSize; ++i)
      if (sh[static_cast<std::size_t>(i)] == value) return words::kShapeName0 + i;
    const auto& co = color_palette();
    for (int i = 0; i < kPaletteSize; ++i)
      if (co[static_cast<std::size_t>(i)] == value) return words::kColorName0 + i;
    throw std::invalid_argument("unknown option '" + value + "'");
  }
  Model model_;
};

}  // namespace

std::unique_ptr<ModelAdapter> make_adapter(const std::string& name,
                                           std::uint64_t seed) {
  if (name == "oracle") return std::make_unique<OracleAdapter>();
  if (name == "random") return std::make_unique<RandomAdapter>(seed);
  if (name == "first-image") return std::make_unique<FirstImageAdapter>();
  if (name == "toy-model") return std::make_unique<ToyModelAdapter>(seed);
  throw std::invalid_argument("unknown adapter '" + name + "'");
}

// --- CircularEval ----------------------------------------------------------------

static bool eval_question(ModelAdapter& adapter, const NeedleTask& task,
                          const EvalConfig& cfg, int question_index,
                          std::uint8_t& failed) {
  // the model-facing vocabulary for prompts; big enough for N=400 numerals
  int vocab = 512;
  for (int ds = 0; ds < cfg.distractor_seeds; ++ds) {
    NeedleTask variant = task;
    variant.images = variant_images(task, ds);
    RenderedPrompt prompt = render_prompt(variant, vocab - 1, vocab);
    Mat feats = encode_images_stub(prompt.image_ids, 4, 32, cfg.rng_seed);
    for (int r = 0; r < cfg.rotations; ++r) {
      std::vector<std::string> presented(static_cast<std::size_t>(kNumOptions));
      for (int i = 0; i < kNumOptions; ++i)
        presented[static_cast<std::size_t>((i + r) % kNumOptions)] =
            task.options[static_cast<std::size_t>(i)];
      CallContext ctx;
      ctx.n_images = task.n_images;
      ctx.question_index = question_index;
      ctx.rotation = r;
      ctx.distractor_seed = ds;
      int got;
      try {
        got = adapter.answer(prompt.seq, feats, presented, ctx);
      } catch (const std::exception&) {
        failed = 1;
        return false;
      }
      if (got < 0 || got >= kNumOptions) {
        failed = 1;
        return false;
      }
      if (got != (task.answer_index + r) % kNumOptions) return false;
    }
  }
  return true;
}

std::vector<NeedleResult> circular_eval(ModelAdapter& adapter,
                                        const std::vector<NeedleTask>& tasks,
                                        const EvalConfig& cfg) {
  if (tasks.empty()) throw std::invalid_argument("circular_eval: no tasks");
  std::vector<std::uint8_t> ok(tasks.size(), 0);
  std::vector<std::uint8_t> failed(tasks.size(), 0);
  int threads = adapter.thread_safe() ? eval_threads() : 1;
  threads = std::min<int>(threads, static_cast<int>(tasks.size()));
  // per-N question indices drive context-keyed adapters
  std::vector<int> qindex(tasks.size(), 0);
  {
    std::map<int, int> counter;
    for (std::size_t i = 0; i < tasks.size(); ++i)
      qindex[i] = counter[tasks[i].n_images]++;
  }
  auto worker = [&](int w) {
    for (std::size_t i = static_cast<std::size_t>(w); i < tasks.size();
         i += static_cast<std::size_t>(threads))
      ok[i] = eval_question(adapter, tasks[i], cfg, qindex[i], failed[i]) ? 1 : 0;
  };
  if (threads <= 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) pool.emplace_back(worker, w);
    for (auto& th : pool) th.join();
  }

  std::vector<NeedleResult> results;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    int n = tasks[i].n_images;
    if (results.empty() || results.back().n_images != n) {
      NeedleResult r;
      r.n_images = n;
      results.push_back(r);
    }
    results.back().questions += 1;
    results.back().correct += ok[i];
    results.back().adapter_failures += failed[i];
  }
  for (auto& r : results)
    r.accuracy = static_cast<double>(r.correct) / r.questions;
  return results;
}

void write_results_csv(const std::vector<NeedleResult>& results,
                       const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "n_images,questions,correct,accuracy\n";
  char line[128];
  for (const auto& r : results) {
    std::snprintf(line, sizeof(line), "%d,%d,%d,%.6f", r.n_images, r.questions,
                  r.correct, r.accuracy);
    out << line << "\n";
  }
}

std::string tasks_to_json(const std::vector<NeedleTask>& tasks) {
  json arr = json::array();
  for (const auto& t : tasks) {
    json j;
    j["n_images"] = t.n_images;
    j["needle_index"] = t.needle_index;
    json imgs = json::array();
    for (const auto& im : t.images) imgs.push_back({im.first, im.second});
    j["images"] = std::move(imgs);
    j["query_shape"] = t.query_shape;
    j["question"] = t.question;
    j["options"] = t.options;
    j["answer_index"] = t.answer_index;
    j["task_key"] = t.task_key;
    arr.push_back(std::move(j));
  }
  return arr.dump(1);
}

std::vector<NeedleTask> tasks_from_json(const std::string& text) {
  json arr = json::parse(text);
  std::vector<NeedleTask> tasks;
  for (const auto& j : arr) {
    NeedleTask t;
    t.n_images = j.at("n_images").get<int>();
    t.needle_index = j.at("needle_index").get<int>();
    for (const auto& im : j.at("images"))
      t.images.emplace_back(im[0].get<int>(), im[1].get<int>());
    t.query_shape = j.at("query_shape").get<bool>();
    t.question = j.at("question").get<std::string>();
    auto opts = j.at("options").get<std::vector<std::string>>();
    if (opts.size() != kNumOptions)
      throw std::invalid_argument("tasks_from_json: bad option count");
    std::copy(opts.begin(), opts.end(), t.options.begin());
    t.answer_index = j.at("answer_index").get<int>();
    t.task_key = j.at("task_key").get<std::uint64_t>();
    if (t.needle_index < 1 || t.needle_index > t.n_images ||
        static_cast<int>(t.images.size()) != t.n_images)
      throw std::invalid_argument("tasks_from_json: inconsistent task");
    tasks.push_back(std::move(t));
  }
  return tasks;
}

}  // namespace hyperattn

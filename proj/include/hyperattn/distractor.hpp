#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "hyperattn/interleave.hpp"
#include "hyperattn/model.hpp"

namespace hyperattn {

// Word-level toy vocabulary for prompt templating. Ids above kNumBase encode
// integers (kNumBase + n). The placeholder id stays at the top of the vocab.
namespace words {
constexpr TokenId kImage = 1;
constexpr TokenId kColon = 2;
constexpr TokenId kPeriod = 3;
constexpr TokenId kIn = 4;
constexpr TokenId kComma = 5;
constexpr TokenId kWhat = 6;
constexpr TokenId kIs = 7;
constexpr TokenId kThe = 8;
constexpr TokenId kShape = 9;
constexpr TokenId kColor = 10;
constexpr TokenId kOf = 11;
constexpr TokenId kObject = 12;
constexpr TokenId kQuestionMark = 13;
constexpr TokenId kShapeName0 = 20;  // 20..27
constexpr TokenId kColorName0 = 30;  // 30..37
constexpr TokenId kNumBase = 100;    // 100 + n encodes the integer n
}  // namespace words

constexpr int kPaletteSize = 8;
const std::array<std::string, kPaletteSize>& shape_palette();
const std::array<std::string, kPaletteSize>& color_palette();

constexpr int kNumOptions = 4;

struct NeedleTask {
  int n_images = 1;
  int needle_index = 1;  // 1-based X
  std::vector<std::pair<int, int>> images;  // (shape, color) codes per image
  bool query_shape = true;
  std::string question;
  std::array<std::string, kNumOptions> options;  // canonical (rotation 0) order
  int answer_index = 0;
  std::uint64_t task_key = 0;  // seeds distractor resampling
};

struct EvalConfig {
  std::vector<int> n_values = {1, 5, 10, 20, 50, 100, 200, 400};
  int rotations = kNumOptions;
  int distractor_seeds = 1;
  int questions = 400;  // per N
  std::uint64_t rng_seed = 0;
};

struct RenderedPrompt {
  std::string text;
  InterleavedSequence seq;
  std::vector<ImageId> image_ids;  // descriptor id per image, in order
};

// `Image 1: <|image|> ... Image N: <|image|>. In Image X, {question}`
RenderedPrompt render_prompt(const NeedleTask& task, TokenId placeholder_id,
                             int vocab_size);

struct CallContext {
  int n_images = 0;
  int question_index = 0;  // within its N bucket
  int rotation = 0;
  int distractor_seed = 0;
};

class ModelAdapter {
 public:
  virtual ~ModelAdapter() = default;
  virtual std::string name() const = 0;
  virtual bool thread_safe() const { return true; }
  // Returns the presented position of the chosen option.
  virtual int answer(const InterleavedSequence& seq, const Mat& raw_feats,
                     const std::vector<std::string>& presented_options,
                     const CallContext& ctx) = 0;
};

// Factory by CLI name: oracle | random | first-image | toy-model.
// toy-model builds a hyper-variant model from cfg_seed.
std::unique_ptr<ModelAdapter> make_adapter(const std::string& name,
                                           std::uint64_t seed);

std::vector<NeedleTask> gen_tasks(const EvalConfig& cfg);

// Resampled distractor set for one CircularEval variant; dseed 0 returns the
// task's own images.
std::vector<std::pair<int, int>> variant_images(const NeedleTask& task, int dseed);

struct NeedleResult {
  int n_images = 0;
  int questions = 0;
  int correct = 0;
  double accuracy = 0.0;
  int adapter_failures = 0;
};

std::vector<NeedleResult> circular_eval(ModelAdapter& adapter,
                                        const std::vector<NeedleTask>& tasks,
                                        const EvalConfig& cfg);

void write_results_csv(const std::vector<NeedleResult>& results,
                       const std::string& path);

std::string tasks_to_json(const std::vector<NeedleTask>& tasks);
std::vector<NeedleTask> tasks_from_json(const std::string& text);

// Thread cap from HYPERATTN_THREADS (>=1); hardware concurrency otherwise.
int eval_threads();

}  // namespace hyperattn

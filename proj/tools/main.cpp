#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hyperattn/bench.hpp"
#include "hyperattn/checks.hpp"
#include "hyperattn/distractor.hpp"
#include "hyperattn/model.hpp"

using namespace hyperattn;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stoi(item));
  }
  if (out.empty()) throw std::invalid_argument("empty integer list '" + s + "'");
  return out;
}

struct ModelFlags {
  std::string config_path;
  std::uint64_t seed = 0;
  int dim = 0;
  int layers = 0;
  std::string hatb_indices;
  bool seed_set = false;
};

void add_model_flags(CLI::App* cmd, ModelFlags& f) {
  cmd->add_option("--config", f.config_path, "model config JSON file");
  cmd->add_option("--seed", f.seed, "rng seed")->each([&](const std::string&) {
    f.seed_set = true;
  });
  cmd->add_option("--dim", f.dim, "hidden dimension override");
  cmd->add_option("--layers", f.layers, "layer count override");
  cmd->add_option("--hatb-indices", f.hatb_indices,
                  "comma list of fusion layer indices");
}

ModelConfig resolve_config(const ModelFlags& f) {
  ModelConfig cfg;
  if (!f.config_path.empty()) cfg = config_from_json(read_file(f.config_path));
  if (f.seed_set) cfg.seed = f.seed;
  if (f.dim > 0) cfg.hidden_dim = f.dim;
  if (f.layers > 0) {
    cfg.n_layers = f.layers;
    if (f.hatb_indices.empty() && f.config_path.empty())
      cfg.hatb_indices = default_hatb_indices(
          f.layers, std::min<int>(f.layers, static_cast<int>(cfg.hatb_indices.size())));
  }
  if (!f.hatb_indices.empty()) cfg.hatb_indices = parse_int_list(f.hatb_indices);
  cfg.validate();
  return cfg;
}

void print_config(const ModelConfig& cfg) {
  std::cout << "resolved config:\n" << config_to_json(cfg) << "\n";
}

int run_demo(const ModelFlags& flags) {
  ModelConfig cfg = resolve_config(flags);
  print_config(cfg);

  // a small 2-image prompt traced through one hyper attention block
  Rng rng(mix64(cfg.seed, 0xdeb0ull));
  std::vector<Segment> segs;
  segs.push_back(Segment::make_text({5, 9, 12}));
  segs.push_back(Segment::make_image(0xa1));
  segs.push_back(Segment::make_text({7, 3}));
  segs.push_back(Segment::make_image(0xa2));
  segs.push_back(Segment::make_text({4, 8, 2, 6}));
  InterleavedSequence seq =
      build_sequence(segs, CropPolicy::off, cfg.placeholder_id());
  RotaryPositionMap rope = build_rope_map(seq);
  CrossAttentionMask mask = build_cross_mask(seq);

  std::cout << "\ntokens (" << seq.length() << "):";
  for (int t = 0; t < seq.length(); ++t) {
    if (seq.tokens[static_cast<std::size_t>(t)] == seq.placeholder_id)
      std::cout << " <|image|>";
    else
      std::cout << " " << seq.tokens[static_cast<std::size_t>(t)];
  }
  std::cout << "\nslots:\n";
  for (const auto& s : seq.image_slots)
    std::cout << "  slot " << s.slot_index << ": image 0x" << std::hex
              << s.image_id << std::dec << " at placeholder position "
              << s.placeholder_position << "\n";
  std::cout << "visual key rotary positions:";
  for (int p : rope.visual_key_positions) std::cout << " " << p;
  std::cout << "\ncross mask (token x slot):\n";
  for (int t = 0; t < mask.text_len; ++t) {
    std::cout << "  t=" << t << " ";
    for (int s = 0; s < mask.num_slots; ++s) std::cout << (mask.at(t, s) ? '1' : '0');
    std::cout << "\n";
  }

  int dim = cfg.hidden_dim, heads = cfg.n_heads;
  Mat h_text(seq.length(), dim), h_img(seq.num_slots() * cfg.patches_per_slot, dim);
  for (auto& x : h_text.d) x = rng.normal();
  for (auto& x : h_img.d) x = rng.normal();
  AttentionInputs in = make_attention_inputs(std::move(h_text), std::move(h_img),
                                             rope, mask, cfg.patches_per_slot, heads);
  BlockWeights w = checks::random_block_weights(rng, dim, cfg.ffn_dim);
  HatbParams p = make_hatb_params(w);
  checks::randomize_hatb_extras(rng, p);
  counters::reset_attn_flops();
  HatbOutput out = hatb_forward(in, p);
  std::cout << "\nper-token gate / bypass:\n";
  for (int t = 0; t < seq.length(); ++t) {
    char line[128];
    std::snprintf(line, sizeof(line), "  t=%-2d gate=%.6f bypass=%d", t,
                  out.gate[static_cast<std::size_t>(t)],
                  static_cast<int>(out.bypass[static_cast<std::size_t>(t)]));
    std::cout << line << "\n";
  }
  std::cout << "attention flops: " << counters::attn_flops() << "\n";

  Model m = build_model(cfg);
  ParamCounts pc = count_params(m);
  std::cout << "model parameters: base " << pc.base << ", added by "
            << variant_name(cfg.variant) << " " << pc.added_by_fusion << ", total "
            << pc.total() << "\n";
  return 0;
}

int run_gradcheck(std::uint64_t seed, int dim, const std::string& out_path) {
  std::cout << "resolved config: { seed: " << seed << ", dim: " << dim << " }\n";
  oracle::ComparisonReport rep = checks::gradcheck_single(seed, dim);
  std::string js = rep.to_json();
  std::cout << js << "\n";
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write " + out_path);
    out << js << "\n";
    std::cout << "wrote " << out_path << "\n";
  }
  return rep.pass ? 0 : 1;
}

int run_selftest(std::uint64_t seed) {
  std::cout << "resolved config: { seed: " << seed << " }\n";
  bool ok = true;
  for (const auto& c : checks::run_selftest(seed)) {
    std::cout << (c.pass ? "[PASS] " : "[FAIL] ") << c.name << ": " << c.detail
              << "\n";
    ok = ok && c.pass;
  }
  return ok ? 0 : 1;
}

int run_bench(const ModelFlags& flags, const std::string& variants_csv,
              const std::string& n_csv, const std::string& out_path) {
  ModelConfig cfg = resolve_config(flags);
  print_config(cfg);

  std::vector<Variant> variants;
  {
    std::stringstream ss(variants_csv);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) variants.push_back(variant_from_string(item));
  }
  if (variants.empty()) throw std::invalid_argument("no variants requested");
  std::vector<int> ns = parse_int_list(n_csv);

  std::vector<CostReport> rows;
  Workload w;
  w.config = cfg;
  w.patches_per_slot = cfg.patches_per_slot;
  for (Variant v : variants) {
    for (int n : ns) {
      w.n_images = n;
      rows.push_back(measure(v, cfg, w));
      const CostReport& r = rows.back();
      char line[160];
      std::snprintf(line, sizeof(line),
                    "%s n=%d seq=%lld flops=%lld median=%.3fms", r.variant.c_str(),
                    r.n_images, static_cast<long long>(r.lm_seq_len),
                    static_cast<long long>(r.attn_flops), r.wall_ms_median);
      std::cout << line << "\n";
    }
  }
  emit_report(rows, out_path);
  std::cout << "wrote " << rows.size() << " rows to " << out_path << "\n";
  return 0;
}

int run_distractor(std::uint64_t seed, const std::string& n_csv,
                   const std::string& adapter_name, int questions, int rotations,
                   int dseeds, const std::string& out_path) {
  EvalConfig ec;
  ec.n_values = parse_int_list(n_csv);
  ec.questions = questions;
  ec.rotations = rotations;
  ec.distractor_seeds = dseeds;
  ec.rng_seed = seed;
  std::cout << "resolved config: { adapter: " << adapter_name << ", n:";
  for (int n : ec.n_values) std::cout << " " << n;
  std::cout << ", questions: " << ec.questions << ", rotations: " << ec.rotations
            << ", distractor_seeds: " << ec.distractor_seeds
            << ", seed: " << ec.rng_seed << " }\n";

  auto adapter = make_adapter(adapter_name, mix64(seed, 0xadull));
  std::vector<NeedleTask> tasks = gen_tasks(ec);
  std::vector<NeedleResult> results = circular_eval(*adapter, tasks, ec);
  for (const auto& r : results) {
    char line[128];
    std::snprintf(line, sizeof(line), "N=%-4d accuracy=%.4f (%d/%d)%s", r.n_images,
                  r.accuracy, r.correct, r.questions,
                  r.adapter_failures ? " [adapter failures]" : "");
    std::cout << line << "\n";
  }
  write_results_csv(results, out_path);
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hyper attention block: demos, validation, benchmarks"};
  app.require_subcommand(1);
  int rc = 0;

  ModelFlags demo_flags;
  auto* demo = app.add_subcommand("demo", "worked 2-image forward trace");
  add_model_flags(demo, demo_flags);
  demo->callback([&] { rc = run_demo(demo_flags); });

  std::uint64_t gc_seed = 0;
  int gc_dim = 8;
  std::string gc_out;
  auto* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient validation");
  gradcheck->add_option("--seed", gc_seed, "rng seed");
  gradcheck->add_option("--dim", gc_dim, "hidden dimension (even)");
  gradcheck->add_option("--out", gc_out, "JSON report path");
  gradcheck->callback([&] { rc = run_gradcheck(gc_seed, gc_dim, gc_out); });

  std::uint64_t st_seed = 0;
  auto* selftest =
      app.add_subcommand("selftest", "oracle equivalence and invariant suites");
  selftest->add_option("--seed", st_seed, "rng seed");
  selftest->callback([&] { rc = run_selftest(st_seed); });

  ModelFlags bench_flags;
  std::string bench_variants = "hyper,concat";
  std::string bench_n = "1,5,10,20,50,100";
  std::string bench_out = "bench.csv";
  auto* bench = app.add_subcommand("bench", "fusion-variant scaling benchmark");
  add_model_flags(bench, bench_flags);
  bench->add_option("--variants", bench_variants, "comma list of fusion variants");
  bench->add_option("--n", bench_n, "comma list of image counts");
  bench->add_option("--out", bench_out, "CSV output path");
  bench->callback(
      [&] { rc = run_bench(bench_flags, bench_variants, bench_n, bench_out); });

  std::uint64_t di_seed = 0;
  std::string di_n = "1,5,10,20,50,100,200,400";
  std::string di_adapter = "oracle";
  std::string di_out = "distractor.csv";
  int di_questions = 400, di_rotations = 4, di_dseeds = 1;
  auto* distractor =
      app.add_subcommand("distractor", "distractor-resistance harness");
  distractor->add_option("--seed", di_seed, "rng seed");
  distractor->add_option("--n", di_n, "comma list of image counts");
  distractor->add_option("--adapter", di_adapter,
                         "oracle | random | first-image | toy-model");
  distractor->add_option("--questions", di_questions, "questions per N");
  distractor->add_option("--rotations", di_rotations, "option-order rotations");
  distractor->add_option("--distractor-seeds", di_dseeds,
                         "distractor resamples per question");
  distractor->add_option("--out", di_out, "CSV output path");
  distractor->callback([&] {
    rc = run_distractor(di_seed, di_n, di_adapter, di_questions, di_rotations,
                        di_dseeds, di_out);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}

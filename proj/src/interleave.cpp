#include "hyperattn/interleave.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace hyperattn {

Segment Segment::make_text(std::vector<TokenId> tokens) {
  Segment s;
  s.kind = SegmentKind::text;
  s.text = std::move(tokens);
  return s;
}

Segment Segment::make_image(ImageId id, int width, int height) {
  Segment s;
  s.kind = SegmentKind::image;
  s.image_id = id;
  s.width = width;
  s.height = height;
  return s;
}

Segment Segment::make_video(ImageId id, int frame_count) {
  Segment s;
  s.kind = SegmentKind::video;
  s.image_id = id;
  s.frame_count = frame_count;
  return s;
}

Grid select_crop_grid(int width, int height) {
  if (width <= 0 || height <= 0)
    throw std::invalid_argument("select_crop_grid: non-positive dimensions");
  // Candidates ordered by (cells, rows, cols); strict improvement means the
  // earliest candidate wins ties.
  static constexpr std::array<Grid, 7> kCandidates = {
      Grid{1, 3}, Grid{3, 1}, Grid{1, 4}, Grid{2, 2},
      Grid{4, 1}, Grid{2, 3}, Grid{3, 2}};
  const double target = std::log(static_cast<double>(width) / height);
  Grid best = kCandidates[0];
  double best_diff = std::abs(std::log(static_cast<double>(best.cols) / best.rows) - target);
  for (std::size_t i = 1; i < kCandidates.size(); ++i) {
    const Grid g = kCandidates[i];
    double diff = std::abs(std::log(static_cast<double>(g.cols) / g.rows) - target);
    if (diff < best_diff) {
      best = g;
      best_diff = diff;
    }
  }
  return best;
}

namespace {

void validate_segments(const std::vector<Segment>& segments) {
  if (segments.empty()) throw std::invalid_argument("build_sequence: empty segment list");
  for (const Segment& s : segments) {
    switch (s.kind) {
      case SegmentKind::text:
        if (s.text.empty())
          throw std::invalid_argument("build_sequence: empty text segment");
        break;
      case SegmentKind::image:
        if (s.width <= 0 || s.height <= 0)
          throw std::invalid_argument("build_sequence: image needs positive dimensions");
        break;
      case SegmentKind::video:
        if (s.frame_count < 1)
          throw std::invalid_argument("build_sequence: video needs frame_count >= 1");
        break;
      default:
        throw std::invalid_argument("build_sequence: unknown segment kind");
    }
  }
}

}  // namespace

InterleavedSequence build_sequence(const std::vector<Segment>& segments,
                                   CropPolicy crop_policy, TokenId placeholder_id) {
  validate_segments(segments);
  InterleavedSequence seq;
  seq.placeholder_id = placeholder_id;
  auto add_slot = [&seq](ImageId id, int pos, CropRole role) {
    seq.image_slots.push_back(ImageSlot{seq.num_slots(), id, pos, role});
  };
  for (const Segment& s : segments) {
    switch (s.kind) {
      case SegmentKind::text:
        seq.tokens.insert(seq.tokens.end(), s.text.begin(), s.text.end());
        break;
      case SegmentKind::image: {
        const int pos = seq.length();
        seq.tokens.push_back(placeholder_id);
        add_slot(s.image_id, pos, CropRole::global_view());
        if (crop_policy == CropPolicy::on) {
          const Grid g = select_crop_grid(s.width, s.height);
          for (int r = 0; r < g.rows; ++r)
            for (int c = 0; c < g.cols; ++c)
              add_slot(s.image_id, pos, CropRole::cell(g, r, c));
        }
        break;
      }
      case SegmentKind::video:
        // One placeholder and one slot per sampled frame; videos are never cropped.
        for (int f = 0; f < s.frame_count; ++f) {
          const int pos = seq.length();
          seq.tokens.push_back(placeholder_id);
          add_slot(s.image_id, pos, CropRole::global_view());
        }
        break;
    }
  }
  return seq;
}

void validate_sequence(const InterleavedSequence& seq) {
  int prev_pos = -1;
  for (int i = 0; i < seq.num_slots(); ++i) {
    const ImageSlot& slot = seq.image_slots[i];
    if (slot.slot_index != i)
      throw std::invalid_argument("sequence: slot_index not contiguous from 0");
    if (slot.placeholder_position < 0 || slot.placeholder_position >= seq.length())
      throw std::invalid_argument("sequence: placeholder_position out of range");
    if (seq.tokens[slot.placeholder_position] != seq.placeholder_id)
      throw std::invalid_argument("sequence: slot does not point at a placeholder token");
    if (slot.placeholder_position < prev_pos)
      throw std::invalid_argument("sequence: placeholder positions not weakly increasing");
    prev_pos = slot.placeholder_position;
  }
  // Each placeholder position must belong to exactly one source image.
  for (int i = 1; i < seq.num_slots(); ++i) {
    const ImageSlot& a = seq.image_slots[i - 1];
    const ImageSlot& b = seq.image_slots[i];
    if (a.placeholder_position == b.placeholder_position && a.image_id != b.image_id)
      throw std::invalid_argument("sequence: placeholder shared by two images");
  }
  for (int t = 0; t < seq.length(); ++t) {
    if (seq.tokens[t] != seq.placeholder_id) continue;
    bool covered = false;
    for (const ImageSlot& slot : seq.image_slots)
      if (slot.placeholder_position == t) covered = true;
    if (!covered)
      throw std::invalid_argument("sequence: placeholder token without an image record");
  }
}

RotaryPositionMap build_rope_map(const InterleavedSequence& seq) {
  validate_sequence(seq);
  RotaryPositionMap map;
  map.query_positions.resize(seq.length());
  for (int t = 0; t < seq.length(); ++t) map.query_positions[t] = t;
  map.visual_key_positions.reserve(seq.num_slots());
  for (const ImageSlot& slot : seq.image_slots)
    map.visual_key_positions.push_back(slot.placeholder_position);
  return map;
}

CrossAttentionMask build_cross_mask(const InterleavedSequence& seq) {
  validate_sequence(seq);
  CrossAttentionMask mask;
  mask.text_len = seq.length();
  mask.num_slots = seq.num_slots();
  mask.visible.assign(static_cast<std::size_t>(mask.text_len) * mask.num_slots, 0);
  for (int t = 0; t < mask.text_len; ++t)
    for (int s = 0; s < mask.num_slots; ++s)
      if (seq.image_slots[s].placeholder_position <= t)
        mask.visible[static_cast<std::size_t>(t) * mask.num_slots + s] = 1;
  return mask;
}

std::string crop_role_to_string(const CropRole& role) {
  if (role.global) return "global";
  std::ostringstream os;
  os << "crop " << role.grid_rows << ' ' << role.grid_cols << ' ' << role.row << ' '
     << role.col;
  return os.str();
}

void write_sequence_fixture(std::ostream& os, const InterleavedSequence& seq) {
  os << "placeholder " << seq.placeholder_id << '\n';
  os << "tokens " << seq.length() << '\n';
  for (int t = 0; t < seq.length(); ++t)
    os << "token " << t << ' ' << seq.tokens[t] << ' '
       << (seq.tokens[t] == seq.placeholder_id ? 1 : 0) << '\n';
  os << "slots " << seq.num_slots() << '\n';
  for (const ImageSlot& slot : seq.image_slots)
    os << "slot " << slot.slot_index << ' ' << slot.image_id << ' '
       << slot.placeholder_position << ' ' << crop_role_to_string(slot.crop_role) << '\n';
}

InterleavedSequence read_sequence_fixture(std::istream& is) {
  InterleavedSequence seq;
  std::string word;
  auto expect = [&](const char* tag) {
    if (!(is >> word) || word != tag)
      throw std::runtime_error(std::string("sequence fixture: expected '") + tag + "'");
  };
  expect("placeholder");
  is >> seq.placeholder_id;
  expect("tokens");
  int n_tokens = 0;
  is >> n_tokens;
  seq.tokens.resize(n_tokens);
  for (int i = 0; i < n_tokens; ++i) {
    expect("token");
    int index = 0, id = 0, is_ph = 0;
    is >> index >> id >> is_ph;
    if (index != i) throw std::runtime_error("sequence fixture: token index mismatch");
    seq.tokens[i] = id;
  }
  expect("slots");
  int n_slots = 0;
  is >> n_slots;
  for (int i = 0; i < n_slots; ++i) {
    expect("slot");
    ImageSlot slot;
    is >> slot.slot_index >> slot.image_id >> slot.placeholder_position >> word;
    if (word == "global") {
      slot.crop_role = CropRole::global_view();
    } else if (word == "crop") {
      Grid g;
      int r = 0, c = 0;
      is >> g.rows >> g.cols >> r >> c;
      slot.crop_role = CropRole::cell(g, r, c);
    } else {
      throw std::runtime_error("sequence fixture: bad crop role '" + word + "'");
    }
    seq.image_slots.push_back(slot);
  }
  if (!is) throw std::runtime_error("sequence fixture: truncated input");
  validate_sequence(seq);
  return seq;
}

}  // namespace hyperattn

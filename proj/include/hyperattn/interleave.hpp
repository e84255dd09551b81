#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace hyperattn {

using TokenId = int;
using ImageId = std::uint64_t;

// Reserved <|image|> token id. Callers that know their vocabulary pass
// vocab_size - 1 instead; this default matches the toy vocab of 512.
constexpr TokenId kDefaultPlaceholderId = 511;

enum class SegmentKind { text, image, video };

struct Segment {
  SegmentKind kind = SegmentKind::text;
  std::vector<TokenId> text;  // text segments only
  ImageId image_id = 0;       // image and video segments
  int frame_count = 0;        // video segments only
  int width = 0, height = 0;  // image segments only

  static Segment make_text(std::vector<TokenId> tokens);
  static Segment make_image(ImageId id, int width = 448, int height = 448);
  static Segment make_video(ImageId id, int frame_count);
};

struct Grid {
  int rows = 1;
  int cols = 1;
  bool operator==(const Grid&) const = default;
};

// Which view of its source image a slot holds: the retained global view or
// one cell of the selected cropping grid.
struct CropRole {
  bool global = true;
  int grid_rows = 0, grid_cols = 0;
  int row = 0, col = 0;

  static CropRole global_view() { return CropRole{}; }
  static CropRole cell(Grid g, int r, int c) { return CropRole{false, g.rows, g.cols, r, c}; }
  bool operator==(const CropRole&) const = default;
};

struct ImageSlot {
  int slot_index = 0;
  ImageId image_id = 0;
  int placeholder_position = 0;  // 0-based token index of the <|image|> token
  CropRole crop_role;
};

struct InterleavedSequence {
  std::vector<TokenId> tokens;
  std::vector<ImageSlot> image_slots;
  TokenId placeholder_id = kDefaultPlaceholderId;

  int length() const { return static_cast<int>(tokens.size()); }
  int num_slots() const { return static_cast<int>(image_slots.size()); }
};

struct RotaryPositionMap {
  std::vector<int> query_positions;      // one per text-sequence token
  std::vector<int> visual_key_positions; // one per image slot
};

struct CrossAttentionMask {
  int text_len = 0;
  int num_slots = 0;
  std::vector<std::uint8_t> visible;  // [text_len x num_slots], row-major

  bool at(int t, int s) const {
    return visible[static_cast<std::size_t>(t) * num_slots + s] != 0;
  }
};

enum class CropPolicy { off, on };

// Picks the grid whose aspect is closest to the image aspect in log space;
// ties go to fewer cells, then lexicographic (rows, cols).
Grid select_crop_grid(int width, int height);

InterleavedSequence build_sequence(const std::vector<Segment>& segments,
                                   CropPolicy crop_policy,
                                   TokenId placeholder_id = kDefaultPlaceholderId);

// Throws std::invalid_argument if the sequence violates its invariants.
void validate_sequence(const InterleavedSequence& seq);

RotaryPositionMap build_rope_map(const InterleavedSequence& seq);
CrossAttentionMask build_cross_mask(const InterleavedSequence& seq);

// Text fixture format, one record per line:
//   tokens <count>
//   token <index> <id> <is_placeholder>
//   slots <count>
//   slot <slot_index> <image_id> <placeholder_position> global
//   slot <slot_index> <image_id> <placeholder_position> crop <rows> <cols> <row> <col>
void write_sequence_fixture(std::ostream& os, const InterleavedSequence& seq);
InterleavedSequence read_sequence_fixture(std::istream& is);

std::string crop_role_to_string(const CropRole& role);

}  // namespace hyperattn

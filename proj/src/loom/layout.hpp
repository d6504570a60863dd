#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "loom/kernels.hpp"

namespace loom {

enum class Role : uint8_t { Input, Text, Query };
enum class Delim : uint8_t { None, ImgOpen, ImgClose };

struct SegmentEvent {
    Role kind = Role::Text;
    int len = 0;
};

struct Position {
    Role role = Role::Text;
    int block = -1;  // query block index, -1 for input/text
    int pos_id = 0;  // embedding index; query rows reuse their opening delimiter's id
    Delim delim = Delim::None;
};

// Interleaved input / text / query-block sequence. Query blocks are always
// bracketed by an opening and closing delimiter position, inserted here so
// callers only describe payload segments.
struct SequenceLayout {
    std::vector<Position> positions;
    int n_input = 0;
    int n_text = 0;  // includes delimiter positions
    int n_blocks = 0;
    int block_len = 0;

    int size() const { return static_cast<int>(positions.size()); }
    std::vector<int> input_indices() const;
    std::vector<int> text_indices() const;
    std::vector<int> block_indices(int b) const;
};

// Builds the position table from payload segments. Requirements: the first
// segment is the only input segment, every length is positive, and all query
// segments share one block length.
SequenceLayout build_layout(const std::vector<SegmentEvent>& events);

// Same sequence with the query blocks removed. Delimiters stay: they are text
// positions and the surrounding text genuinely attends to them. Non-query
// position ids are untouched, which is what makes stripped and unstripped
// forwards agree bitwise on the text path.
SequenceLayout strip_queries(const SequenceLayout& layout);

struct MaskOptions {
    bool bidirectional_input = false;
};

// Dense visibility matrix: at(i, j) says row i may attend column j.
struct AttentionMask {
    int n = 0;
    std::vector<uint8_t> bits;

    bool at(int i, int j) const { return bits[static_cast<size_t>(i) * n + j] != 0; }
    void set(int i, int j, bool v) { bits[static_cast<size_t>(i) * n + j] = v ? 1 : 0; }
};

// Visibility rules:
//   input rows  -> input columns, causally (or all of them when
//                  bidirectional_input is set); never text or query columns
//   text rows   -> every input column, plus text columns at or before
//                  themselves; never query columns
//   query rows  -> every input column, text columns before their block's
//                  opening delimiter (inclusive), every column of earlier
//                  query blocks, and the whole of their own block
AttentionMask build_mask(const SequenceLayout& layout, const MaskOptions& opts = {});

kernels::MaskRows to_mask_rows(const AttentionMask& mask);

// One line of '0'/'1' characters per row; the golden-file dump format.
std::string mask_to_text(const AttentionMask& mask);

// Parses "input:2,text:3,query:2" into segment events.
std::vector<SegmentEvent> parse_layout_spec(const std::string& spec);

}  // namespace loom

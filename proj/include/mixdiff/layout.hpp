#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace mixdiff {

enum class Modality { TEXT, VIS_ENC, VIS_LAT };
enum class Role { PROMPT, RESPONSE, CONDITION, TARGET };

const char* to_string(Modality m);
const char* to_string(Role r);
Modality modality_from_string(const std::string& s);
Role role_from_string(const std::string& s);

struct Segment {
    Modality modality = Modality::TEXT;
    Role role = Role::PROMPT;
    int length = 1;
    int sample_id = 0;
    int turn_index = 0;
    bool active = false;  // trailing generation block(s); runtime-only, not serialized
};

// Ordered list of modality/role/length segments describing one packed input
// sequence. Source of truth for attention masks and loss masks.
struct SegmentLayout {
    std::vector<Segment> segments;

    int total_len() const;
    int segment_start(int seg_index) const;
    // segment index owning a flat position
    int segment_of(int pos) const;

    // Throws layout_error when invariants are violated (length < 1,
    // non-contiguous sample ids).
    void validate() const;

    SegmentLayout with_appended(const Segment& s) const;
    // restriction to one sample's segments
    SegmentLayout sample_slice(int sample_id) const;
    std::vector<int> sample_ids() const;
};

struct LayoutError : std::runtime_error {
    explicit LayoutError(const std::string& what);
};

// allowed[q][k]: query q may attend key k. Stored row-major, one byte each.
struct AttentionMask {
    int n = 0;
    std::vector<uint8_t> allowed;

    bool at(int q, int k) const { return allowed[static_cast<size_t>(q) * n + k] != 0; }
    void set(int q, int k, bool v) { allowed[static_cast<size_t>(q) * n + k] = v ? 1 : 0; }
};

// Intra-modality bidirectional mask: full attention inside each segment,
// block-causal across segments of the same sample (keys in segments up to and
// including the query's), nothing across samples.
AttentionMask build_mask(const SegmentLayout& layout);

// Index splitting the immutable conditioning prefix from the trailing active
// block(s). Throws when no segment is flagged active or actives are not
// trailing.
int prefix_boundary(const SegmentLayout& layout);

enum class LossMode { UND, GEN, INTERLEAVED };

// UND: RESPONSE text positions of every turn. GEN: VIS_LAT TARGET positions.
// INTERLEAVED: every VIS_LAT position, no text.
std::vector<uint8_t> loss_positions(const SegmentLayout& layout, LossMode mode);

// Line-oriented text format, one segment per line:
//   sample_id turn modality role length
std::string serialize_layout(const SegmentLayout& layout);
SegmentLayout parse_layout(const std::string& text);
SegmentLayout parse_layout_stream(std::istream& in, int max_lines = -1);

}  // namespace mixdiff

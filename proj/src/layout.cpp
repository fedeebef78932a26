#include "mixdiff/layout.hpp"

#include <set>
#include <sstream>
#include <stdexcept>

namespace mixdiff {

LayoutError::LayoutError(const std::string& what) : std::runtime_error(what) {}

const char* to_string(Modality m) {
    switch (m) {
        case Modality::TEXT: return "TEXT";
        case Modality::VIS_ENC: return "VIS_ENC";
        case Modality::VIS_LAT: return "VIS_LAT";
    }
    return "?";
}

const char* to_string(Role r) {
    switch (r) {
        case Role::PROMPT: return "PROMPT";
        case Role::RESPONSE: return "RESPONSE";
        case Role::CONDITION: return "CONDITION";
        case Role::TARGET: return "TARGET";
    }
    return "?";
}

Modality modality_from_string(const std::string& s) {
    if (s == "TEXT") return Modality::TEXT;
    if (s == "VIS_ENC") return Modality::VIS_ENC;
    if (s == "VIS_LAT") return Modality::VIS_LAT;
    throw LayoutError("unknown modality: " + s);
}

Role role_from_string(const std::string& s) {
    if (s == "PROMPT") return Role::PROMPT;
    if (s == "RESPONSE") return Role::RESPONSE;
    if (s == "CONDITION") return Role::CONDITION;
    if (s == "TARGET") return Role::TARGET;
    throw LayoutError("unknown role: " + s);
}

int SegmentLayout::total_len() const {
    int n = 0;
    for (const auto& s : segments) n += s.length;
    return n;
}

int SegmentLayout::segment_start(int seg_index) const {
    int off = 0;
    for (int i = 0; i < seg_index; ++i) off += segments[i].length;
    return off;
}

int SegmentLayout::segment_of(int pos) const {
    int off = 0;
    for (size_t i = 0; i < segments.size(); ++i) {
        off += segments[i].length;
        if (pos < off) return static_cast<int>(i);
    }
    throw LayoutError("position out of range");
}

void SegmentLayout::validate() const {
    std::set<int> seen;
    int prev_sample = -1;
    for (const auto& s : segments) {
        if (s.length < 1) throw LayoutError("segment length must be >= 1");
        if (s.sample_id < 0) throw LayoutError("sample_id must be non-negative");
        if (s.turn_index < 0) throw LayoutError("turn_index must be non-negative");
        if (s.sample_id != prev_sample) {
            if (seen.count(s.sample_id))
                throw LayoutError("segments of sample " + std::to_string(s.sample_id) + " are not contiguous");
            seen.insert(s.sample_id);
            prev_sample = s.sample_id;
        }
    }
}

SegmentLayout SegmentLayout::with_appended(const Segment& s) const {
    SegmentLayout out = *this;
    out.segments.push_back(s);
    return out;
}

SegmentLayout SegmentLayout::sample_slice(int sample_id) const {
    SegmentLayout out;
    for (const auto& s : segments)
        if (s.sample_id == sample_id) out.segments.push_back(s);
    return out;
}

std::vector<int> SegmentLayout::sample_ids() const {
    std::vector<int> ids;
    for (const auto& s : segments)
        if (ids.empty() || ids.back() != s.sample_id) ids.push_back(s.sample_id);
    return ids;
}

AttentionMask build_mask(const SegmentLayout& layout) {
    layout.validate();
    const int n = layout.total_len();
    AttentionMask mask;
    mask.n = n;
    mask.allowed.assign(static_cast<size_t>(n) * n, 0);

    // per-position segment index and sample id
    std::vector<int> seg_of(n), sample_of(n);
    int pos = 0;
    for (size_t si = 0; si < layout.segments.size(); ++si) {
        for (int i = 0; i < layout.segments[si].length; ++i, ++pos) {
            seg_of[pos] = static_cast<int>(si);
            sample_of[pos] = layout.segments[si].sample_id;
        }
    }
    for (int q = 0; q < n; ++q) {
        for (int k = 0; k < n; ++k) {
            if (sample_of[q] != sample_of[k]) continue;
            if (seg_of[k] <= seg_of[q]) mask.set(q, k, true);
        }
    }
    return mask;
}

int prefix_boundary(const SegmentLayout& layout) {
    layout.validate();
    int first_active = -1;
    for (size_t i = 0; i < layout.segments.size(); ++i) {
        if (layout.segments[i].active) {
            first_active = static_cast<int>(i);
            break;
        }
    }
    if (first_active < 0) throw LayoutError("prefix_boundary: no active segment designated");
    for (size_t i = first_active; i < layout.segments.size(); ++i)
        if (!layout.segments[i].active)
            throw LayoutError("prefix_boundary: active segments must be trailing");
    return layout.segment_start(first_active);
}

std::vector<uint8_t> loss_positions(const SegmentLayout& layout, LossMode mode) {
    const int n = layout.total_len();
    std::vector<uint8_t> out(n, 0);
    int pos = 0;
    for (const auto& s : layout.segments) {
        bool on = false;
        switch (mode) {
            case LossMode::UND:
                on = s.modality == Modality::TEXT && s.role == Role::RESPONSE;
                break;
            case LossMode::GEN:
                on = s.modality == Modality::VIS_LAT && s.role == Role::TARGET;
                break;
            case LossMode::INTERLEAVED:
                on = s.modality == Modality::VIS_LAT;
                break;
        }
        for (int i = 0; i < s.length; ++i, ++pos) out[pos] = on ? 1 : 0;
    }
    return out;
}

std::string serialize_layout(const SegmentLayout& layout) {
    std::ostringstream os;
    for (const auto& s : layout.segments)
        os << s.sample_id << " " << s.turn_index << " " << to_string(s.modality) << " "
           << to_string(s.role) << " " << s.length << "\n";
    return os.str();
}

static bool parse_segment_line(const std::string& line, Segment& out) {
    std::istringstream is(line);
    std::string modality, role;
    if (!(is >> out.sample_id >> out.turn_index >> modality >> role >> out.length)) return false;
    std::string extra;
    if (is >> extra) throw LayoutError("layout line has trailing fields: " + line);
    out.modality = modality_from_string(modality);
    out.role = role_from_string(role);
    out.active = false;
    return true;
}

SegmentLayout parse_layout(const std::string& text) {
    std::istringstream is(text);
    return parse_layout_stream(is);
}

SegmentLayout parse_layout_stream(std::istream& in, int max_lines) {
    SegmentLayout layout;
    std::string line;
    int count = 0;
    while ((max_lines < 0 || count < max_lines) && std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        Segment s;
        if (!parse_segment_line(line, s)) throw LayoutError("bad layout line: " + line);
        layout.segments.push_back(s);
        ++count;
    }
    layout.validate();
    return layout;
}

}  // namespace mixdiff

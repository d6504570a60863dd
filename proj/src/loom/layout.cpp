#include "loom/layout.hpp"

#include <sstream>
#include <stdexcept>

namespace loom {

std::vector<int> SequenceLayout::input_indices() const {
    std::vector<int> out;
    for (int i = 0; i < size(); i++)
        if (positions[i].role == Role::Input) out.push_back(i);
    return out;
}

std::vector<int> SequenceLayout::text_indices() const {
    std::vector<int> out;
    for (int i = 0; i < size(); i++)
        if (positions[i].role == Role::Text) out.push_back(i);
    return out;
}

std::vector<int> SequenceLayout::block_indices(int b) const {
    std::vector<int> out;
    for (int i = 0; i < size(); i++)
        if (positions[i].role == Role::Query && positions[i].block == b) out.push_back(i);
    return out;
}

SequenceLayout build_layout(const std::vector<SegmentEvent>& events) {
    if (events.empty() || events[0].kind != Role::Input)
        throw std::invalid_argument("layout must start with the input segment");
    SequenceLayout out;
    int next_pos_id = 0;
    for (size_t e = 0; e < events.size(); e++) {
        const SegmentEvent& ev = events[e];
        if (ev.len <= 0) throw std::invalid_argument("layout segment lengths must be positive");
        if (ev.kind == Role::Input) {
            if (e != 0) throw std::invalid_argument("layout allows exactly one input segment");
            for (int i = 0; i < ev.len; i++)
                out.positions.push_back({Role::Input, -1, next_pos_id++, Delim::None});
            out.n_input = ev.len;
        } else if (ev.kind == Role::Text) {
            for (int i = 0; i < ev.len; i++)
                out.positions.push_back({Role::Text, -1, next_pos_id++, Delim::None});
            out.n_text += ev.len;
        } else {
            if (out.block_len != 0 && out.block_len != ev.len)
                throw std::invalid_argument("query blocks must share one length");
            out.block_len = ev.len;
            const int open_id = next_pos_id++;
            out.positions.push_back({Role::Text, -1, open_id, Delim::ImgOpen});
            for (int i = 0; i < ev.len; i++)
                out.positions.push_back({Role::Query, out.n_blocks, open_id, Delim::None});
            out.positions.push_back({Role::Text, -1, next_pos_id++, Delim::ImgClose});
            out.n_text += 2;
            out.n_blocks++;
        }
    }
    return out;
}

SequenceLayout strip_queries(const SequenceLayout& layout) {
    SequenceLayout out;
    out.n_input = layout.n_input;
    out.n_text = layout.n_text;
    out.n_blocks = 0;
    out.block_len = 0;
    for (const Position& p : layout.positions)
        if (p.role != Role::Query) out.positions.push_back(p);
    return out;
}

AttentionMask build_mask(const SequenceLayout& layout, const MaskOptions& opts) {
    const int n = layout.size();
    AttentionMask mask;
    mask.n = n;
    mask.bits.assign(static_cast<size_t>(n) * n, 0);

    // first index of each query block, i.e. its opening delimiter + 1
    std::vector<int> block_start(layout.n_blocks, -1);
    for (int i = 0; i < n; i++) {
        const Position& p = layout.positions[i];
        if (p.role == Role::Query && block_start[p.block] < 0) block_start[p.block] = i;
    }

    for (int i = 0; i < n; i++) {
        const Position& pi = layout.positions[i];
        for (int j = 0; j < n; j++) {
            const Position& pj = layout.positions[j];
            bool ok = false;
            switch (pi.role) {
                case Role::Input:
                    ok = pj.role == Role::Input && (opts.bidirectional_input || j <= i);
                    break;
                case Role::Text:
                    ok = pj.role == Role::Input || (pj.role == Role::Text && j <= i);
                    break;
                case Role::Query:
                    if (pj.role == Role::Input) {
                        ok = true;
                    } else if (pj.role == Role::Text) {
                        ok = j < block_start[pi.block];
                    } else {
                        ok = pj.block <= pi.block;
                    }
                    break;
            }
            mask.set(i, j, ok);
        }
    }
    return mask;
}

kernels::MaskRows to_mask_rows(const AttentionMask& mask) {
    kernels::MaskRows rows;
    rows.nq = mask.n;
    rows.nk = mask.n;
    rows.off.resize(mask.n + 1);
    rows.off[0] = 0;
    for (int i = 0; i < mask.n; i++) {
        for (int j = 0; j < mask.n; j++)
            if (mask.at(i, j)) rows.idx.push_back(j);
        rows.off[i + 1] = static_cast<int32_t>(rows.idx.size());
    }
    return rows;
}

std::string mask_to_text(const AttentionMask& mask) {
    std::string out;
    out.reserve(static_cast<size_t>(mask.n) * (mask.n + 1));
    for (int i = 0; i < mask.n; i++) {
        for (int j = 0; j < mask.n; j++) out.push_back(mask.at(i, j) ? '1' : '0');
        out.push_back('\n');
    }
    return out;
}

std::vector<SegmentEvent> parse_layout_spec(const std::string& spec) {
    std::vector<SegmentEvent> events;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const size_t colon = item.find(':');
        if (colon == std::string::npos)
            throw std::invalid_argument("bad layout segment '" + item + "', want kind:len");
        const std::string kind = item.substr(0, colon);
        int len = 0;
        try {
            len = std::stoi(item.substr(colon + 1));
        } catch (const std::exception&) {
            throw std::invalid_argument("bad segment length in '" + item + "'");
        }
        Role role;
        if (kind == "input") {
            role = Role::Input;
        } else if (kind == "text") {
            role = Role::Text;
        } else if (kind == "query") {
            role = Role::Query;
        } else {
            throw std::invalid_argument("unknown segment kind '" + kind + "'");
        }
        events.push_back({role, len});
    }
    if (events.empty()) throw std::invalid_argument("empty layout spec");
    return events;
}

}  // namespace loom

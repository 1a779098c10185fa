#include "seqcls/types.hpp"

namespace seqcls {

std::string_view to_string(Label label) { return label == Label::drone ? "drone" : "bird"; }

std::optional<Label> parse_label(std::string_view text) {
    if (text == "drone") return Label::drone;
    if (text == "bird") return Label::bird;
    return std::nullopt;
}

std::string_view to_string(Split split) { return split == Split::train ? "train" : "val"; }

std::optional<Split> parse_split(std::string_view text) {
    if (text == "train") return Split::train;
    if (text == "val") return Split::val;
    return std::nullopt;
}

}  // namespace seqcls

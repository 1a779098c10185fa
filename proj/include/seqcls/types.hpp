#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace seqcls {

// Class order is fixed: index 0 = drone, index 1 = bird (confusion-matrix order).
enum class Label { drone = 0, bird = 1 };
constexpr int kNumClasses = 2;
constexpr std::array<Label, 2> kLabels{Label::drone, Label::bird};

std::string_view to_string(Label label);
std::optional<Label> parse_label(std::string_view text);
inline int index_of(Label label) { return static_cast<int>(label); }
inline Label label_at(int index) { return index == 0 ? Label::drone : Label::bird; }

enum class Split { train, val };
constexpr std::array<Split, 2> kSplits{Split::train, Split::val};

std::string_view to_string(Split split);
std::optional<Split> parse_split(std::string_view text);

}  // namespace seqcls

#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace factcheck {

// Lowercases and splits on any non-alphanumeric run; punctuation vanishes.
std::vector<std::string> tokenize_words(std::string_view text);

}  // namespace factcheck

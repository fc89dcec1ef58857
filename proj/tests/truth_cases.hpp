#pragma once

#include "hallu/labeler.hpp"

namespace truth_cases {

using hallu::labeler::Label;

inline constexpr auto H = Label::hallucinated;
inline constexpr auto G = Label::grounded;
inline constexpr auto N = Label::invalid;

struct Case {
    bool answerable;
    int c, g, f, idk;
    Label expected;
};

// All 32 inputs written out one by one, independently of the table source.
inline constexpr Case kCases[] = {
    {true, 0, 0, 0, 0, G}, {true, 0, 0, 0, 1, H}, {true, 0, 0, 1, 0, H}, {true, 0, 0, 1, 1, H},
    {true, 0, 1, 0, 0, G}, {true, 0, 1, 0, 1, H}, {true, 0, 1, 1, 0, G}, {true, 0, 1, 1, 1, N},
    {true, 1, 0, 0, 0, H}, {true, 1, 0, 0, 1, H}, {true, 1, 0, 1, 0, H}, {true, 1, 0, 1, 1, H},
    {true, 1, 1, 0, 0, H}, {true, 1, 1, 0, 1, H}, {true, 1, 1, 1, 0, H}, {true, 1, 1, 1, 1, N},
    {false, 0, 0, 0, 0, G}, {false, 0, 0, 0, 1, G}, {false, 0, 0, 1, 0, H}, {false, 0, 0, 1, 1, H},
    {false, 0, 1, 0, 0, G}, {false, 0, 1, 0, 1, G}, {false, 0, 1, 1, 0, N}, {false, 0, 1, 1, 1, N},
    {false, 1, 0, 0, 0, H}, {false, 1, 0, 0, 1, H}, {false, 1, 0, 1, 0, H}, {false, 1, 0, 1, 1, H},
    {false, 1, 1, 0, 0, H}, {false, 1, 1, 0, 1, H}, {false, 1, 1, 1, 0, H}, {false, 1, 1, 1, 1, N},
};

}  // namespace truth_cases

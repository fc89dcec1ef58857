#pragma once

#include <charconv>
#include <chrono>
#include <compare>
#include <optional>
#include <string>
#include <string_view>

#include <fmt/format.h>

namespace hallu {

/// A proleptic-Gregorian calendar day, ordered chronologically.
class Date {
public:
    Date() = default;
    explicit Date(std::chrono::year_month_day ymd) : ymd_(ymd) {}

    /// Parses strict ISO "YYYY-MM-DD". Returns nullopt for anything else,
    /// including impossible days such as 2023-02-29.
    static std::optional<Date> parse(std::string_view text) {
        if (text.size() != 10 || text[4] != '-' || text[7] != '-') return std::nullopt;
        auto field = [&](std::size_t pos, std::size_t len) -> std::optional<int> {
            int value = 0;
            auto first = text.data() + pos;
            auto last = first + len;
            auto [ptr, ec] = std::from_chars(first, last, value);
            if (ec != std::errc{} || ptr != last) return std::nullopt;
            return value;
        };
        auto y = field(0, 4);
        auto m = field(5, 2);
        auto d = field(8, 2);
        if (!y || !m || !d) return std::nullopt;
        std::chrono::year_month_day ymd{std::chrono::year{*y},
                                        std::chrono::month{static_cast<unsigned>(*m)},
                                        std::chrono::day{static_cast<unsigned>(*d)}};
        if (!ymd.ok()) return std::nullopt;
        return Date{ymd};
    }

    std::string to_string() const {
        return fmt::format("{:04d}-{:02d}-{:02d}", static_cast<int>(ymd_.year()),
                           static_cast<unsigned>(ymd_.month()), static_cast<unsigned>(ymd_.day()));
    }

    std::chrono::year_month_day ymd() const { return ymd_; }

    friend auto operator<=>(const Date& a, const Date& b) {
        return std::chrono::sys_days{a.ymd_} <=> std::chrono::sys_days{b.ymd_};
    }
    friend bool operator==(const Date& a, const Date& b) = default;

private:
    std::chrono::year_month_day ymd_{std::chrono::year{1970}, std::chrono::January, std::chrono::day{1}};
};

}  // namespace hallu

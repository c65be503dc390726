#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace nudgecast::csv {

/// One parsed record plus the 1-based line on which it started.
struct Row {
    std::vector<std::string> cells;
    std::size_t line = 0;
};

/// RFC 4180 reader: comma separated, double-quote quoting, "" escapes a
/// quote, quoted cells may span lines. Accepts LF and CRLF. A UTF-8 BOM is
/// skipped. Blank lines between records are ignored.
/// Throws ValidationError on an unterminated quote.
std::vector<Row> parse(std::string_view text);

/// Quotes a cell only when it contains a comma, quote, CR or LF.
std::string escape(std::string_view cell);

std::string join(const std::vector<std::string>& cells);

}  // namespace nudgecast::csv

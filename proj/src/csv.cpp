#include "nudgecast/csv.hpp"

#include "nudgecast/errors.hpp"

namespace nudgecast::csv {

std::vector<Row> parse(std::string_view text) {
    if (text.starts_with("\xEF\xBB\xBF")) {
        text.remove_prefix(3);
    }
    std::vector<Row> rows;
    Row row;
    std::string cell;
    bool in_quotes = false;
    bool cell_started = false;  // row has content (distinguishes blank lines)
    std::size_t line = 1;
    row.line = 1;

    auto finish_row = [&] {
        if (cell_started || !row.cells.empty()) {
            row.cells.push_back(std::move(cell));
            rows.push_back(std::move(row));
        }
        row = Row{};
        cell.clear();
        cell_started = false;
    };

    for (std::size_t i = 0; i < text.size(); ++i) {
        char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    cell.push_back('"');
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                if (c == '\n') ++line;
                cell.push_back(c);
            }
            continue;
        }
        switch (c) {
            case '"':
                in_quotes = true;
                cell_started = true;
                break;
            case ',':
                row.cells.push_back(std::move(cell));
                cell.clear();
                cell_started = true;
                break;
            case '\r':
                if (i + 1 < text.size() && text[i + 1] == '\n') break;
                [[fallthrough]];
            case '\n':
                finish_row();
                ++line;
                row.line = line;
                break;
            default:
                if (!cell_started && row.cells.empty()) row.line = line;
                cell.push_back(c);
                cell_started = true;
        }
    }
    if (in_quotes) {
        throw ValidationError("row " + std::to_string(row.line) + ": unterminated quoted field");
    }
    finish_row();
    return rows;
}

std::string escape(std::string_view cell) {
    if (cell.find_first_of(",\"\r\n") == std::string_view::npos) {
        return std::string(cell);
    }
    std::string out = "\"";
    for (char c : cell) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

std::string join(const std::vector<std::string>& cells) {
    std::string out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out.push_back(',');
        out += escape(cells[i]);
    }
    return out;
}

}  // namespace nudgecast::csv

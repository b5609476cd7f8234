#pragma once

#include <string>
#include <vector>

namespace topogate {

/// Write via a temp file in the same directory plus rename, so readers never
/// observe a partial file.
void atomic_write_text(const std::string& path, const std::string& content);

std::string read_text_file(const std::string& path);

/// Compact deterministic number formatting for tabular output.
std::string format_double(double v);

/// Minimal CSV: no quoting (fields in this project never contain commas),
/// lines starting with '#' are comments.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const std::string& path);

}  // namespace topogate

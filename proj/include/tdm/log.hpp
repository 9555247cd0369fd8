#pragma once

#include <string>
#include <vector>

namespace tdm {

/// Process-wide sink for recoverable anomalies (degenerate statistics, skipped files).
/// Records are kept in memory and, when echo is enabled, also written to stderr.
void record_warning(std::string message);
std::vector<std::string> warnings();
std::size_t warning_count();
void clear_warnings();
void set_warning_echo(bool echo);

}  // namespace tdm

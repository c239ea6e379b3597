#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace kvcore::cli {

enum ExitCode : int {
    kOk = 0,
    kInternal = 1,
    kUsage = 2,
    kInputFormat = 3,
    kNumerical = 4,
};

/// Runs one `kvcore` invocation. `args` excludes the program name. Reports
/// go to `out`, the line log and error messages to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

} // namespace kvcore::cli

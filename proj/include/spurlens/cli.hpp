#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace spurlens {

using Settings = std::map<std::string, std::string>;

/// Flat key=value lines; '#' starts a comment, blank lines are ignored and
/// surrounding whitespace is trimmed. A malformed line is a ConfigError.
Settings parse_config(std::string_view text, const std::string& origin = "config");

/// Subcommand names in usage order.
std::vector<std::string> cli_commands();
/// Keys a subcommand accepts, sorted; ConfigError for an unknown command.
std::vector<std::string> cli_keys(const std::string& command);

/// Run directory name for a resolved configuration: "<command>-<hash>". Input
/// files enter the hash by content, so the name does not depend on where
/// they live; `out` does not enter it.
std::string run_name(const std::string& command, const Settings& resolved);

/// `args[0]` is the program name. Exit code 0 on success, 2 on I/O failure,
/// 1 on any other error (bad flag, unknown key, violated contract).
int run_cli(std::span<const std::string> args, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv);

}  // namespace spurlens

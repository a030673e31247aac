// Line-oriented scenario scripts driving the simulated kernel.
//
//   driver sentinel [watch=a.exe,b.exe] [report-only=1]
//   driver duqu [config=F] [stub1=F] [stub2=F] [mask=F] [kernel-base=N]
//               [window=N] [versions=v1,v2]
//   set-mode normal|debug|failsafe
//   set-version <version>
//   process <name> <fixture> [base=N] [pid=N] [path=P]
//   module <system|pid|process-name> <name> <fixture> [base=N] [path=P]
//   run <pid|process-name>
//   tick [count]
//   expect <substring of a later log line>
//
// '#' starts a comment line. Fixture paths are relative to the script.
// Pending reinitialization routines run once after every command.

#ifndef DUQUSIM_SCENARIO_HPP
#define DUQUSIM_SCENARIO_HPP

#include "duqusim/simkernel.hpp"

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace duqusim::scenario {

// Malformed script or unreadable input.
class ScenarioError : public std::runtime_error {
public:
    ScenarioError(std::size_t line, const std::string& message);
    [[nodiscard]] std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

struct Command {
    std::size_t line = 0;
    std::string verb;
    std::vector<std::string> args;            // positional
    std::map<std::string, std::string> opts;  // key=value
    std::string text;                         // expect only: the raw substring
};

std::vector<Command> parse_scenario(const std::string& text);

struct ExpectationFailure {
    std::size_t line = 0;
    std::string text;
};

struct ScenarioResult {
    std::vector<sim::LogLine> log;
    std::vector<ExpectationFailure> failures;
    std::size_t expectations = 0;

    [[nodiscard]] int exit_code() const noexcept { return failures.empty() ? 0 : 1; }
};

// Throws ScenarioError for parse errors and missing fixtures.
ScenarioResult run_scenario(const std::string& text, const std::filesystem::path& base_dir);
ScenarioResult run_scenario_file(const std::filesystem::path& path);

} // namespace duqusim::scenario

#endif // DUQUSIM_SCENARIO_HPP

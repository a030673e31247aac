// duqusim: scenario runner, fixture generator, static scanner and hasher.
//
// Exit codes: 0 success, 1 unmet expectation or scan findings,
// 2 unreadable or malformed input.

#include "duqusim/fixtures.hpp"
#include "duqusim/pe_format.hpp"
#include "duqusim/scanner.hpp"
#include "duqusim/scenario.hpp"
#include "duqusim/simkernel.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>

namespace {

using namespace duqusim;

constexpr int kExitOk = 0;
constexpr int kExitFailed = 1;
constexpr int kExitInput = 2;

enum class LogFormat { plain, json };

LogFormat log_format_from_env()
{
    const char* v = std::getenv("SENTINEL_LOG_FORMAT");
    if (v == nullptr || std::string_view(v) == "plain" || *v == '\0')
        return LogFormat::plain;
    if (std::string_view(v) == "json")
        return LogFormat::json;
    std::cerr << "duqusim: ignoring SENTINEL_LOG_FORMAT=" << v << " (expected plain or json)\n";
    return LogFormat::plain;
}

std::string render(const sim::LogLine& line, LogFormat format)
{
    if (format == LogFormat::plain)
        return line.text;
    const nlohmann::json j = {{"seq", line.seq}, {"source", line.source}, {"text", line.text}};
    return j.dump();
}

std::optional<pe::Bytes> read_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        return std::nullopt;
    return pe::Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

int cmd_run(const std::string& scenario_path, const std::string& log_path)
{
    scenario::ScenarioResult result;
    try {
        result = scenario::run_scenario_file(scenario_path);
    } catch (const scenario::ScenarioError& e) {
        std::cerr << "duqusim: " << scenario_path << ": " << e.what() << "\n";
        return kExitInput;
    }
    const LogFormat format = log_format_from_env();
    std::ofstream log_file;
    if (!log_path.empty()) {
        log_file.open(log_path, std::ios::trunc);
        if (!log_file) {
            std::cerr << "duqusim: cannot write " << log_path << "\n";
            return kExitInput;
        }
    }
    for (const sim::LogLine& line : result.log) {
        const std::string text = render(line, format);
        std::cout << text << "\n";
        if (log_file)
            log_file << text << "\n";
    }
    for (const scenario::ExpectationFailure& f : result.failures)
        std::cerr << "duqusim: line " << f.line << ": expectation not met: " << f.text << "\n";
    return result.exit_code();
}

int cmd_scan(const std::string& path, const std::string& anchor)
{
    const auto bytes = read_file(path);
    if (!bytes) {
        std::cerr << "duqusim: cannot read " << path << "\n";
        return kExitInput;
    }
    scan::ScanOptions options;
    if (!anchor.empty())
        options.anchor_export = anchor;
    scan::ScanReport report;
    try {
        report = scan::scan_pe(*bytes, options);
    } catch (const pe::PeError& e) {
        std::cerr << "duqusim: " << path << ": " << e.what() << "\n";
        return kExitInput;
    }
    report.path = path;
    if (log_format_from_env() == LogFormat::json) {
        nlohmann::json j = {{"path", report.path}, {"findings", nlohmann::json::array()}};
        for (const scan::Finding& f : report.findings)
            j["findings"].push_back(
                {{"kind", scan::to_string(f.kind)}, {"address", sim::hex8(f.address)}, {"detail", f.detail}});
        std::cout << j.dump() << "\n";
    } else {
        for (const scan::Finding& f : report.findings)
            std::cout << report.path << ": " << scan::to_string(f.kind) << " at " << sim::hex8(f.address) << ": "
                      << f.detail << "\n";
        if (report.findings.empty())
            std::cout << report.path << ": clean\n";
    }
    return report.findings.empty() ? kExitOk : kExitFailed;
}

int cmd_make_fixtures(const std::string& dir)
{
    try {
        fixtures::write_fixtures(dir);
    } catch (const std::exception& e) {
        std::cerr << "duqusim: " << e.what() << "\n";
        return kExitInput;
    }
    for (const fixtures::FixtureFile& f : fixtures::fixture_set())
        std::cout << dir << "/" << f.name << " (" << f.bytes.size() << " bytes)\n";
    return kExitOk;
}

int cmd_hash(const std::string& path)
{
    const auto bytes = read_file(path);
    if (!bytes) {
        std::cerr << "duqusim: cannot read " << path << "\n";
        return kExitInput;
    }
    std::cout << sim::hex8(pe::ror13_hash(*bytes)) << "\n";
    return kExitOk;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Simulated kernel for the Duqu injection pipeline and its entrypoint-checksum defense"};
    app.require_subcommand(1);

    std::string scenario_path, log_path, scan_path, anchor, fixture_dir, hash_path;
    auto* run = app.add_subcommand("run", "Run a scenario script and print its log");
    run->add_option("scenario", scenario_path, "Scenario file")->required();
    run->add_option("--log", log_path, "Also write the log to this file");

    auto* scan = app.add_subcommand("scan", "Statically scan a PE32 file for injection signatures");
    scan->add_option("pe", scan_path, "PE32 file")->required();
    scan->add_option("--anchor-export", anchor, "Export whose call anchors the ZwProtectVirtualMemory pattern");

    auto* make = app.add_subcommand("make-fixtures", "Write the generated fixture set and scenarios");
    make->add_option("dir", fixture_dir, "Output directory")->required();

    auto* hash = app.add_subcommand("hash", "Print the ror13 hash of a file's bytes");
    hash->add_option("file", hash_path, "Input file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitInput;
    }

    if (run->parsed())
        return cmd_run(scenario_path, log_path);
    if (scan->parsed())
        return cmd_scan(scan_path, anchor);
    if (make->parsed())
        return cmd_make_fixtures(fixture_dir);
    return cmd_hash(hash_path);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "duqusim/duqu_replica.hpp"
#include "duqusim/fixtures.hpp"
#include "duqusim/scanner.hpp"
#include "duqusim/scenario.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

using namespace duqusim;
using pe::Bytes;
namespace fs = std::filesystem;

namespace {

// Fresh directory under the system temp dir, removed on scope exit.
struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag)
    {
        path = fs::temp_directory_path() / ("duqusim-" + tag + "-" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir()
    {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

Bytes slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::vector<scan::FindingKind> kinds(const scan::ScanReport& r)
{
    std::vector<scan::FindingKind> out;
    for (const auto& f : r.findings)
        out.push_back(f.kind);
    return out;
}

scan::ScanOptions anchored()
{
    scan::ScanOptions o;
    o.anchor_export = "ZwAllocateVirtualMemory";
    return o;
}

bool log_has(const scenario::ScenarioResult& r, const std::string& text)
{
    for (const auto& l : r.log)
        if (l.text.find(text) != std::string::npos)
            return true;
    return false;
}

} // namespace

TEST_SUITE("scanner")
{
    TEST_CASE("the hooked services fixture has exactly one entry hook at its entrypoint")
    {
        const scan::ScanReport r = scan::scan_pe(fixtures::services_hooked_image(), anchored());
        REQUIRE(r.findings.size() == 1);
        CHECK(r.findings[0].kind == scan::FindingKind::entry_hook);
        CHECK(r.findings[0].address == 0x01012475);
        CHECK(r.findings[0].detail.find("0x000a18bd") != std::string::npos);
    }

    TEST_CASE("the clean services fixture is clean")
    {
        CHECK(scan::scan_pe(fixtures::services_image(), anchored()).findings.empty());
        CHECK(scan::scan_pe(fixtures::plain_exe_image()).findings.empty());
    }

    TEST_CASE("the kernel fixture reports the call pattern only when anchored")
    {
        const Bytes kernel = fixtures::kernel_image();
        const scan::ScanReport r = scan::scan_pe(kernel, anchored());
        CHECK(kinds(r) == std::vector{scan::FindingKind::zwprotect_pattern});
        CHECK(r.findings[0].address == 0x004ED1EA);
        CHECK(scan::scan_pe(kernel).findings.empty());
        CHECK(scan::scan_pe(fixtures::kernel_image({.with_push = false}), anchored()).findings.empty());
    }

    TEST_CASE("stub 1's split signature constants are reported")
    {
        const scan::ScanReport r = scan::scan_pe(fixtures::stub1_image());
        REQUIRE(kinds(r) == std::vector{scan::FindingKind::obfuscated_pe_const});
        CHECK((pe::kSignatureXorKey ^ pe::kObfuscatedSignature) == 0x00004550);
        CHECK(r.findings[0].detail.find("0xf750f284") != std::string::npos);
        CHECK(r.findings[0].detail.find("0xf750b7d4") != std::string::npos);
    }

    TEST_CASE("a split constant outside a code section is not reported")
    {
        pe::ImageSpec spec;
        spec.image_base = 0x00400000;
        spec.entry_point_rva = 0x1000;
        spec.sections.push_back({".text", pe::kCodeSection, Bytes(0x40, 0x90), 0, 0});
        Bytes data(0x40, 0);
        pe::store_u32(data, 0, 0xF750F284);
        pe::store_u32(data, 8, 0xF750B7D4);
        spec.sections.push_back({".data", pe::kDataSection, data, 0, 0});
        CHECK(scan::scan_pe(pe::build_image(spec)).findings.empty());
        std::swap(spec.sections[0].data, spec.sections[1].data);
        CHECK(kinds(scan::scan_pe(pe::build_image(spec))) == std::vector{scan::FindingKind::obfuscated_pe_const});
    }

    TEST_CASE("the hook planted into random images is found, random images stay clean")
    {
        std::mt19937 rng(0x5CA7);
        for (int i = 0; i < 200; ++i) {
            pe::ImageSpec spec = testsupport::random_spec(rng);
            CHECK(scan::scan_pe(pe::build_image(spec)).findings.empty());
            const std::uint32_t off = spec.entry_point_rva - 0x1000;
            if (off + 7 > spec.sections[0].data.size())
                continue;
            const auto hook = duqu::encode_hook(static_cast<std::uint32_t>(rng()));
            std::copy(hook.begin(), hook.end(), spec.sections[0].data.begin() + off);
            const scan::ScanReport r = scan::scan_pe(pe::build_image(spec));
            CHECK(kinds(r) == std::vector{scan::FindingKind::entry_hook});
            CHECK(r.findings[0].address == spec.image_base + spec.entry_point_rva);
        }
    }

    TEST_CASE("non-PE input throws")
    {
        CHECK_THROWS_AS((void)scan::scan_pe(Bytes(16, 0)), pe::PeError);
        CHECK_THROWS_AS((void)scan::scan_pe(Bytes{'M', 'Z'}), pe::PeError);
    }
}

TEST_SUITE("fixtures")
{
    TEST_CASE("the services fixture's entrypoint")
    {
        const pe::PeImage s = pe::parse_pe(fixtures::services_image());
        CHECK(s.entry_point() == 0x01012475);
        const std::uint32_t off = pe::rva_to_offset(s, s.nt.entry_point_rva);
        CHECK(Bytes(s.raw.begin() + off, s.raw.begin() + off + 12) ==
              Bytes(fixtures::kServicesEntryBytes.begin(), fixtures::kServicesEntryBytes.end()));
        CHECK(oracle::dump(fixtures::services_image()).entry == 0x12475);
    }

    TEST_CASE("the emitted payload blob decrypts to a PE32")
    {
        const Bytes plain = oracle::xor_decrypt(fixtures::encrypted_payload(), fixtures::kBlobKey);
        const oracle::Dump d = oracle::dump(plain);
        CHECK(d.mz == 0x5A4D);
        CHECK(d.signature == 0x00004550);
        CHECK(d.magic == 0x010B);
        CHECK_NOTHROW((void)pe::parse_pe(plain));
    }

    TEST_CASE("make-fixtures twice writes byte-identical files")
    {
        TempDir a("fx-a");
        TempDir b("fx-b");
        fixtures::write_fixtures(a.path);
        fixtures::write_fixtures(b.path);
        const std::vector<Bytes> first = [&] {
            std::vector<Bytes> v;
            for (const auto& f : fixtures::fixture_set())
                v.push_back(slurp(a.path / f.name));
            return v;
        }();
        fixtures::write_fixtures(a.path);
        std::size_t i = 0;
        for (const auto& f : fixtures::fixture_set()) {
            CHECK(slurp(a.path / f.name) == first[i]);
            CHECK(slurp(b.path / f.name) == first[i]);
            CHECK(f.bytes == first[i]);
            ++i;
        }
        CHECK(i >= 15);
    }

    TEST_CASE("every shipped scenario runs clean against the written fixtures")
    {
        TempDir dir("fx-run");
        fixtures::write_fixtures(dir.path);
        for (const auto& f : fixtures::fixture_set()) {
            if (fs::path(f.name).extension() != ".scn")
                continue;
            CAPTURE(f.name);
            const scenario::ScenarioResult r = scenario::run_scenario_file(dir.path / f.name);
            CHECK(r.exit_code() == 0);
            CHECK(r.expectations > 0);
        }
    }
}

TEST_SUITE("scenario")
{
    TEST_CASE("malformed scripts are rejected with the offending line")
    {
        const std::vector<std::pair<std::string, std::size_t>> bad = {
            {"frobnicate x", 1},
            {"# c\n\nprocess onlyname", 3},
            {"process a.exe a.exe color=red", 1},
            {"process a.exe a.exe base=0x1zz", 1},
            {"process a.exe a.exe pid=0x100000000", 1},
            {"driver rootkit", 1},
            {"set-mode safe", 1},
            {"expect", 1},
            {"tick 3 4", 1},
            {"module system x.dll x.dll =1", 1},
            {"driver sentinel report-only=maybe", 1},
        };
        for (const auto& [text, line] : bad) {
            CAPTURE(text);
            try {
                (void)scenario::parse_scenario(text);
                FAIL("parsed");
            } catch (const scenario::ScenarioError& e) {
                CHECK(e.line() == line);
            }
        }
    }

    TEST_CASE("comments, blank lines and CRLF are accepted")
    {
        const auto cmds = scenario::parse_scenario("# header\r\n\r\n  tick 2\r\nexpect some text here\r\n");
        REQUIRE(cmds.size() == 2);
        CHECK(cmds[0].verb == "tick");
        CHECK(cmds[0].args == std::vector<std::string>{"2"});
        CHECK(cmds[1].text == "some text here");
    }

    TEST_CASE("a missing fixture is an input error")
    {
        TempDir dir("fx-missing");
        CHECK_THROWS_AS((void)scenario::run_scenario("process a.exe nothere.exe", dir.path), scenario::ScenarioError);
    }

    TEST_CASE("no drivers and one process: only loader lines")
    {
        TempDir dir("fx-plain");
        fixtures::write_fixtures(dir.path);
        const auto r = scenario::run_scenario("process calc.exe calc.exe\nexpect create process calc.exe", dir.path);
        CHECK(r.exit_code() == 0);
        for (const auto& l : r.log)
            CHECK(l.source == "kernel");
    }

    TEST_CASE("an expectation that never appears fails the run")
    {
        TempDir dir("fx-never");
        fixtures::write_fixtures(dir.path);
        const auto r = scenario::run_scenario("process calc.exe calc.exe\nexpect never-appears", dir.path);
        CHECK(r.exit_code() == 1);
        REQUIRE(r.failures.size() == 1);
        CHECK(r.failures[0].line == 2);
    }

    TEST_CASE("expectations match in order")
    {
        TempDir dir("fx-order");
        fixtures::write_fixtures(dir.path);
        const std::string body = "process calc.exe calc.exe\nprocess notepad.exe calc.exe\n";
        CHECK(scenario::run_scenario(body + "expect notepad.exe\nexpect calc.exe", dir.path).exit_code() == 1);
        CHECK(scenario::run_scenario("process calc.exe calc.exe\nexpect calc.exe\nprocess notepad.exe calc.exe\n"
                                     "expect notepad.exe",
                                     dir.path)
                  .exit_code() == 0);
    }

    TEST_CASE("runtime errors are logged and the run continues")
    {
        TempDir dir("fx-runtime");
        fixtures::write_fixtures(dir.path);
        const auto r = scenario::run_scenario("module ghost.exe x.dll shell32.dll\nprocess calc.exe calc.exe\n"
                                              "expect create process calc.exe",
                                              dir.path);
        CHECK(r.exit_code() == 0);
        CHECK(log_has(r, "[scenario] line 1:"));
    }

    TEST_CASE("the PoC run shows the checksum error then the termination")
    {
        TempDir dir("fx-poc");
        fixtures::write_fixtures(dir.path);
        const auto r = scenario::run_scenario_file(dir.path / "poc_duqu_attack.scn");
        CHECK(r.exit_code() == 0);
        std::size_t error_at = 0, terminate_at = 0;
        for (std::size_t i = 0; i < r.log.size(); ++i) {
            if (r.log[i].text == "-> Checksum error !!!!")
                error_at = i;
            if (r.log[i].text == "-> Terminating services.exe")
                terminate_at = i;
        }
        CHECK(error_at > 0);
        CHECK(terminate_at == error_at + 1);
    }

    TEST_CASE("two runs of the same scenario produce identical streams")
    {
        TempDir dir("fx-det");
        fixtures::write_fixtures(dir.path);
        for (const char* name : {"poc_duqu_attack.scn", "poc_reverse_order.scn", "duqu_infection.scn"}) {
            const auto a = scenario::run_scenario_file(dir.path / name);
            const auto b = scenario::run_scenario_file(dir.path / name);
            REQUIRE(a.log.size() == b.log.size());
            for (std::size_t i = 0; i < a.log.size(); ++i) {
                CHECK(a.log[i].seq == b.log[i].seq);
                CHECK(a.log[i].source == b.log[i].source);
                CHECK(a.log[i].text == b.log[i].text);
            }
        }
    }
}

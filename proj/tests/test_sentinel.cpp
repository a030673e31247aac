#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "duqusim/duqu_replica.hpp"
#include "duqusim/fixtures.hpp"
#include "duqusim/sentinel.hpp"
#include "duqusim/simkernel.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

#include <memory>
#include <random>

using namespace duqusim;
using pe::Bytes;
using sentinel::Sentinel;
using sim::Kernel;

namespace {

constexpr std::uint32_t kPid = 0x914;
constexpr std::uint32_t kEntry = fixtures::kServicesBase + fixtures::kServicesEntryRva;

const Bytes& services()
{
    static const Bytes image = fixtures::services_image();
    return image;
}

const Bytes& kernel32()
{
    static const Bytes image = fixtures::kernel32_image();
    return image;
}

const Bytes& shell32()
{
    static const Bytes image = fixtures::shell32_image();
    return image;
}

sim::ProcessOptions services_options(const std::string& path = "Desktop\\services.exe")
{
    sim::ProcessOptions o;
    o.pid = kPid;
    o.path = path;
    return o;
}

duqu::DuquOptions duqu_options()
{
    duqu::DuquOptions o;
    o.config_blob = fixtures::config_blob();
    o.stub1 = fixtures::stub1_image();
    o.stub2 = fixtures::stub2_image();
    o.mask = duqu::decode_mask(fixtures::mask_file());
    o.kernel_base = fixtures::kKernelBase;
    return o;
}

enum class Order { sentinel_first, duqu_first };

// The proof-of-concept run with both drivers in the given order.
struct PocRun {
    Kernel kernel;
    std::unique_ptr<Sentinel> sentinel;
    std::unique_ptr<duqu::DuquDriver> duqu;

    explicit PocRun(Order order)
    {
        auto add_sentinel = [this] {
            sentinel = std::make_unique<Sentinel>(kernel);
            sentinel->init();
        };
        auto add_duqu = [this] {
            duqu = std::make_unique<duqu::DuquDriver>(kernel, duqu_options());
            duqu->boot_init();
        };
        if (order == Order::sentinel_first) {
            add_sentinel();
            add_duqu();
        } else {
            add_duqu();
            add_sentinel();
        }
        kernel.load_module(Kernel::kSystemPid, "ntoskrnl.exe", fixtures::kernel_image());
        kernel.load_module(Kernel::kSystemPid, "hal.dll", fixtures::hal_image());
        kernel.run_reinitialization();
        kernel.create_process("services.exe", services(), services_options());
        kernel.load_module(kPid, "kernel32.dll", kernel32(), fixtures::kKernel32Base);
        if (kernel.alive(kPid))
            kernel.load_module(kPid, "shell32.dll", shell32(), fixtures::kShell32Base);
    }

    std::vector<std::string> sentinel_lines() const
    {
        std::vector<std::string> out;
        for (const sim::LogLine& l : kernel.log_lines())
            if (l.source == "sentinel")
                out.push_back(l.text);
        return out;
    }
};

const sentinel::Verification* verification_for(const Sentinel& s, std::string_view module)
{
    for (const auto& v : s.verifications())
        if (v.module_name == module)
            return &v;
    return nullptr;
}

// Kernel with only the sentinel and a services.exe whose entry span was
// made writable.
struct Lone {
    Kernel kernel;
    Sentinel sentinel{kernel};

    Lone()
    {
        sentinel.init();
        kernel.create_process("services.exe", services(), services_options());
        kernel.protect_memory(kPid, kEntry, 12, sim::kRWX);
    }
};

} // namespace

TEST_SUITE("record")
{
    TEST_CASE("services.exe creation stores the entrypoint record")
    {
        Lone l;
        const sentinel::IntegrityRecord* r = l.sentinel.record(kPid);
        REQUIRE(r != nullptr);
        CHECK(r->entrypoint == 0x01012475);
        CHECK(r->name == "services.exe");
        const Bytes first8(r->baseline.begin(), r->baseline.begin() + 8);
        CHECK(first8 == Bytes{0x6a, 0x70, 0x68, 0xe0, 0x15, 0x00, 0x01, 0xe8});
        CHECK(r->baseline_hash == oracle::ror13(Bytes(r->baseline.begin(), r->baseline.end())));
        // Frozen from the oracle above.
        CHECK(r->baseline_hash == 0x2ce5c33e);
    }

    TEST_CASE("calc.exe is ignored")
    {
        Kernel k;
        Sentinel s(k);
        s.init();
        const auto pid = k.create_process("calc.exe", fixtures::plain_exe_image()).pid;
        CHECK(s.record(pid) == nullptr);
        CHECK(s.record_count() == 0);
        k.load_module(pid, "kernel32.dll", kernel32());
        CHECK(s.verifications().empty());
        for (const sim::LogLine& l : k.log_lines())
            CHECK(l.text.find("Verify") == std::string::npos);
    }

    TEST_CASE("the watched name is matched on the image file name, case-insensitively")
    {
        Kernel k;
        Sentinel s(k);
        s.init();
        sim::ProcessOptions o;
        o.path = "C:\\Users\\x\\SERVICES.EXE";
        const auto pid = k.create_process("SERVICES.EXE", services(), o).pid;
        CHECK(s.record(pid) != nullptr);
    }

    TEST_CASE("a renamed services.exe on another list is watched by that list only")
    {
        Kernel k;
        sentinel::SentinelOptions o;
        o.watched = {"lsass.exe"};
        Sentinel s(k, o);
        s.init();
        k.create_process("services.exe", services(), services_options());
        CHECK(s.record_count() == 0);
        const auto pid = k.create_process("lsass.exe", services()).pid;
        CHECK(s.record(pid) != nullptr);
    }

    TEST_CASE("records are dropped when the process exits")
    {
        Lone l;
        CHECK(l.sentinel.record_count() == 1);
        l.kernel.terminate_process(kPid);
        CHECK(l.sentinel.record_count() == 0);
    }

    TEST_CASE("the create transcript follows the debugger grammar")
    {
        Lone l;
        std::vector<std::string> lines;
        for (const sim::LogLine& line : l.kernel.log_lines())
            if (line.source == "sentinel")
                lines.push_back(line.text);
        const std::vector<std::string> expected = {
            "-+* Create process 0x914 *+-",
            "ProcessImageInformation:",
            "  PEB=0x7ffd6000 ImageBaseAddress=0x01000000",
            "  UniqueProcessId=0x914",
            "Entrypoint bytes at 0x01012475:",
            "  0x6a 0x70 0x68 0xe0 0x15 0x00 0x01 0xe8",
            "ProcessImageName: Desktop\\services.exe",
            "ProcessImageName: save processID=0x914",
            "CreateProcessNotify: ImageBaseAddress=0x01000000",
            "  EntryPoint=0x01012475",
            "  EntrypointChecksum=0x2ce5c33e",
            // the main image's own load notification
            "* Loaded module Desktop\\services.exe *",
            "LoadImageNotifyRoutine:",
            "  ImageBaseAddress=0x01000000 ProcessId=0x914",
            "-> Verify services.exe process:",
            "   Entrypoint at 0x01012475:",
            "     0x6a 0x70 0x68 0xe0 0x15 0x00 0x01 0xe8",
            "-> OK!",
        };
        CHECK(lines == expected);
    }
}

TEST_SUITE("verify")
{
    TEST_CASE("an untouched entrypoint verifies OK on every load")
    {
        Lone l;
        l.kernel.load_module(kPid, "kernel32.dll", kernel32());
        l.kernel.load_module(kPid, "shell32.dll", shell32());
        CHECK(l.sentinel.verifications().size() == 3);
        CHECK(l.sentinel.mismatches() == 0);
        CHECK(l.kernel.alive(kPid));
    }

    TEST_CASE("the hook bytes mismatch and terminate")
    {
        Lone l;
        l.kernel.write_memory(kPid, kEntry, Bytes(fixtures::kHookedEntryBytes.begin(), fixtures::kHookedEntryBytes.end()));
        l.kernel.load_module(kPid, "shell32.dll", shell32());
        const sentinel::Verification& v = l.sentinel.verifications().back();
        CHECK_FALSE(v.ok);
        CHECK(v.module_name == "shell32.dll");
        CHECK(v.hash == oracle::ror13(Bytes(fixtures::kHookedEntryBytes.begin(), fixtures::kHookedEntryBytes.end())));
        CHECK(v.hash == 0x1b7b4118);
        CHECK_FALSE(l.kernel.alive(kPid));
        const auto& log = l.kernel.log_lines();
        REQUIRE(log.size() >= 3);
        CHECK(log[log.size() - 3].text == "-> Checksum error !!!!");
        CHECK(log[log.size() - 2].text == "-> Terminating services.exe");
    }

    TEST_CASE("report-only mode flags without terminating")
    {
        Kernel k;
        sentinel::SentinelOptions o;
        o.report_only = true;
        Sentinel s(k, o);
        s.init();
        k.create_process("services.exe", services(), services_options());
        k.protect_memory(kPid, kEntry, 12, sim::kRWX);
        k.write_memory(kPid, kEntry + 11, Bytes{0x01});
        k.load_module(kPid, "kernel32.dll", kernel32());
        k.load_module(kPid, "shell32.dll", shell32());
        CHECK(s.mismatches() == 2);
        CHECK(k.alive(kPid));
    }

    TEST_CASE("an unreadable entrypoint fails closed")
    {
        Lone l;
        l.kernel.protect_memory(kPid, kEntry, 12, sim::Perm::none);
        l.kernel.load_module(kPid, "kernel32.dll", kernel32());
        const sentinel::Verification& v = l.sentinel.verifications().back();
        CHECK_FALSE(v.readable);
        CHECK_FALSE(v.ok);
        CHECK_FALSE(l.kernel.alive(kPid));
    }

    TEST_CASE("exhaustive single-byte perturbation of the 12-byte span always mismatches")
    {
        const Bytes original(fixtures::kServicesEntryBytes.begin(), fixtures::kServicesEntryBytes.end());
        const std::uint32_t baseline = oracle::ror13(original);
        std::size_t cases = 0;
        for (std::size_t pos = 0; pos < 12; ++pos) {
            for (int delta = 1; delta < 256; ++delta) {
                Bytes changed = original;
                changed[pos] = static_cast<std::uint8_t>(changed[pos] ^ delta);
                CHECK(pe::ror13_hash(changed) != baseline);
                ++cases;
            }
        }
        CHECK(cases == 12 * 255);

        // And end to end for one alternate value per position.
        for (std::size_t pos = 0; pos < 12; ++pos) {
            Lone l;
            l.kernel.write_memory(kPid, kEntry + static_cast<std::uint32_t>(pos),
                                  Bytes{static_cast<std::uint8_t>(original[pos] ^ 0x80)});
            l.kernel.load_module(kPid, "kernel32.dll", kernel32());
            CHECK_FALSE(l.sentinel.verifications().back().ok);
            CHECK_FALSE(l.kernel.alive(kPid));
        }
    }

    TEST_CASE("writes just outside the span go unnoticed")
    {
        for (const std::uint32_t at : {kEntry - 1, kEntry + 12}) {
            Kernel k;
            Sentinel s(k);
            s.init();
            k.create_process("services.exe", services(), services_options());
            k.protect_memory(kPid, at, 1, sim::kRWX);
            k.write_memory(kPid, at, Bytes{0x90});
            k.load_module(kPid, "kernel32.dll", kernel32());
            CHECK(s.mismatches() == 0);
        }
    }

    TEST_CASE("property: no false positives without a write to the span")
    {
        std::mt19937 rng(0x5E47);
        const std::vector<std::pair<std::string, Bytes>> dlls = {
            {"kernel32.dll", kernel32()},
            {"shell32.dll", shell32()},
            {"ntdll.dll", fixtures::ntdll_image()},
        };
        for (int iter = 0; iter < 200; ++iter) {
            Kernel k;
            Sentinel s(k);
            s.init();
            k.create_process("services.exe", services(), services_options());
            const int steps = std::uniform_int_distribution<int>(1, 8)(rng);
            for (int i = 0; i < steps; ++i) {
                switch (rng() % 3) {
                case 0: {
                    const auto& [name, image] = dlls[rng() % dlls.size()];
                    k.load_module(kPid, name, image);
                    break;
                }
                case 1: {
                    const std::uint32_t a = k.allocate_memory(kPid, 0x1000, sim::kRW);
                    k.write_memory(kPid, a, testsupport::random_bytes(rng, 0x100));
                    break;
                }
                default:
                    k.create_process("calc.exe", fixtures::plain_exe_image());
                    break;
                }
            }
            k.load_module(kPid, "shell32.dll", shell32());
            CHECK(s.mismatches() == 0);
            CHECK(k.alive(kPid));
        }
    }

    TEST_CASE("termination is final: no further reads or logs for the pid")
    {
        Lone l;
        l.kernel.write_memory(kPid, kEntry, Bytes{0xCC});
        l.kernel.load_module(kPid, "kernel32.dll", kernel32());
        REQUIRE_FALSE(l.kernel.alive(kPid));
        const std::size_t verifications = l.sentinel.verifications().size();
        const std::size_t lines = l.kernel.log_lines().size();
        CHECK_THROWS_AS(l.kernel.load_module(kPid, "shell32.dll", shell32()), sim::KernelError);
        CHECK(l.sentinel.verifications().size() == verifications);
        CHECK(l.kernel.log_lines().size() == lines);
        CHECK(l.sentinel.record(kPid) == nullptr);
    }
}

TEST_SUITE("against the replica")
{
    TEST_CASE("sentinel first: kernel32 verifies OK, shell32 mismatches")
    {
        PocRun run(Order::sentinel_first);
        const auto* k32 = verification_for(*run.sentinel, "kernel32.dll");
        const auto* s32 = verification_for(*run.sentinel, "shell32.dll");
        REQUIRE(k32 != nullptr);
        REQUIRE(s32 != nullptr);
        CHECK(k32->ok);
        CHECK_FALSE(s32->ok);
        CHECK_FALSE(run.kernel.alive(kPid));

        const auto lines = run.sentinel_lines();
        const std::vector<std::string> tail(lines.end() - 9, lines.end());
        const std::vector<std::string> expected = {
            "* Loaded module \\WINDOWS\\system32\\shell32.dll *",
            "LoadImageNotifyRoutine:",
            "  ImageBaseAddress=0x7c9d0000 ProcessId=0x914",
            "-> Verify services.exe process:",
            "   Entrypoint at 0x01012475:",
            "     0xb8 0xbd 0x18 0x0a 0x00 0xff 0xd0 0xe8",
            "-> Checksum error !!!!",
            "-> Terminating services.exe",
        };
        CHECK(std::vector<std::string>(tail.begin() + 1, tail.end()) == expected);
    }

    TEST_CASE("duqu first: the kernel32 load itself mismatches")
    {
        PocRun run(Order::duqu_first);
        const auto* k32 = verification_for(*run.sentinel, "kernel32.dll");
        REQUIRE(k32 != nullptr);
        CHECK_FALSE(k32->ok);
        CHECK(verification_for(*run.sentinel, "shell32.dll") == nullptr);
        CHECK_FALSE(run.kernel.alive(kPid));
        // The replica staged on the create notification before the record was taken,
        // yet the record holds the original bytes: staging does not touch them.
        CHECK(run.duqu->injection(kPid) != nullptr);
    }

    TEST_CASE("the hook never reaches execution when the sentinel wins")
    {
        for (const Order order : {Order::sentinel_first, Order::duqu_first}) {
            PocRun run(order);
            CHECK(run.duqu->milestones().empty());
            const sim::ExecutionResult r = run.kernel.execute_entrypoint(kPid);
            CHECK(r.native_calls.empty());
            CHECK_FALSE(r.reached_original_code);
        }
    }
}

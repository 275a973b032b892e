#pragma once

// "SLQ1" packed artifact: header, per-tensor records (raw float32 or
// bit-packed codes with per-slice step/beta), CRC32 footer. Little-endian
// throughout, codes packed LSB-first; serialization is canonical (a pure
// function of content).

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "slq/qmodel.hpp"

namespace slq {

enum class PackErrc : uint8_t {
    bad_magic = 1,
    bad_version = 2,
    bad_crc = 3,
    truncated = 4,
    malformed = 5,
};

const char* pack_errc_name(PackErrc c);

struct PackError : std::runtime_error {
    PackErrc code;
    PackError(PackErrc c, const std::string& msg)
        : std::runtime_error(std::string(pack_errc_name(c)) + ": " + msg), code(c) {}
};

uint32_t crc32_ieee(std::span<const uint8_t> bytes);

// LSB-first bit packing of b-bit codes into bytes; final padding bits are zero.
std::vector<uint8_t> pack_codes(std::span<const uint32_t> codes, int bits);
std::vector<uint32_t> unpack_codes(std::span<const uint8_t> bytes, int64_t count, int bits);
int64_t packed_code_bytes(int64_t count, int bits);

std::vector<uint8_t> pack(const QuantizedModel& model);
QuantizedModel unpack(std::span<const uint8_t> bytes);

void save_artifact(const QuantizedModel& model, const std::string& path);
QuantizedModel load_artifact(const std::string& path);

// ---------------------------------------------------------------------------
// storage accounting
// ---------------------------------------------------------------------------

struct StorageRow {
    std::string name;
    int64_t fp32_bytes = 0;
    int64_t packed_bytes = 0;   // codes + per-slice params for quantized tensors
    bool quantized = false;
    double ratio() const { return static_cast<double>(fp32_bytes) / static_cast<double>(packed_bytes); }
};

struct StorageReport {
    std::vector<StorageRow> rows;
    int64_t total_fp32 = 0;
    int64_t total_packed = 0;
    double total_ratio() const { return static_cast<double>(total_fp32) / static_cast<double>(total_packed); }
};

StorageReport storage_report(const QuantizedModel& model);   // empty model -> ContractError
std::string storage_report_text(const StorageReport& report);

} // namespace slq

#include "slq/packio.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace slq {

const char* pack_errc_name(PackErrc c) {
    switch (c) {
        case PackErrc::bad_magic: return "bad_magic";
        case PackErrc::bad_version: return "bad_version";
        case PackErrc::bad_crc: return "bad_crc";
        case PackErrc::truncated: return "truncated";
        case PackErrc::malformed: return "malformed";
    }
    return "?";
}

uint32_t crc32_ieee(std::span<const uint8_t> bytes) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t crc = 0xFFFFFFFFu;
    for (uint8_t b : bytes) crc = table[(crc ^ b) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

int64_t packed_code_bytes(int64_t count, int bits) { return (count * bits + 7) / 8; }

std::vector<uint8_t> pack_codes(std::span<const uint32_t> codes, int bits) {
    std::vector<uint8_t> out(static_cast<size_t>(packed_code_bytes(static_cast<int64_t>(codes.size()), bits)), 0);
    uint64_t acc = 0;
    int nbits = 0;
    size_t pos = 0;
    for (uint32_t c : codes) {
        acc |= static_cast<uint64_t>(c & ((1u << bits) - 1u)) << nbits;
        nbits += bits;
        while (nbits >= 8) {
            out[pos++] = static_cast<uint8_t>(acc & 0xFFu);
            acc >>= 8;
            nbits -= 8;
        }
    }
    if (nbits > 0) out[pos++] = static_cast<uint8_t>(acc & 0xFFu);
    return out;
}

std::vector<uint32_t> unpack_codes(std::span<const uint8_t> bytes, int64_t count, int bits) {
    if (static_cast<int64_t>(bytes.size()) < packed_code_bytes(count, bits))
        throw PackError(PackErrc::truncated, "code payload shorter than declared");
    std::vector<uint32_t> codes(static_cast<size_t>(count));
    uint64_t acc = 0;
    int nbits = 0;
    size_t pos = 0;
    for (int64_t i = 0; i < count; ++i) {
        while (nbits < bits) {
            acc |= static_cast<uint64_t>(bytes[pos++]) << nbits;
            nbits += 8;
        }
        codes[static_cast<size_t>(i)] = static_cast<uint32_t>(acc & ((1u << bits) - 1u));
        acc >>= bits;
        nbits -= bits;
    }
    return codes;
}

// ---------------------------------------------------------------------------
// byte writer / reader
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'S', 'L', 'Q', '1'};
constexpr uint32_t kVersion = 1;

struct Writer {
    std::vector<uint8_t> bytes;

    void u8(uint8_t v) { bytes.push_back(v); }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xFFu));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xFFu));
    }
    void i32(int32_t v) { u32(static_cast<uint32_t>(v)); }
    void f32(float v) {
        uint32_t u;
        std::memcpy(&u, &v, 4);
        u32(u);
    }
    void raw(const void* p, size_t n) {
        const uint8_t* b = static_cast<const uint8_t*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
};

struct Reader {
    std::span<const uint8_t> bytes;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > bytes.size())
            throw PackError(PackErrc::truncated, "unexpected end of artifact");
    }
    uint8_t u8() {
        need(1);
        return bytes[pos++];
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes[pos++]) << (8 * i);
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(bytes[pos++]) << (8 * i);
        return v;
    }
    int32_t i32() { return static_cast<int32_t>(u32()); }
    float f32() {
        const uint32_t u = u32();
        float v;
        std::memcpy(&v, &u, 4);
        return v;
    }
    std::span<const uint8_t> raw(size_t n) {
        need(n);
        auto s = bytes.subspan(pos, n);
        pos += n;
        return s;
    }
    std::string str() {
        const uint32_t n = u32();
        auto s = raw(n);
        return std::string(reinterpret_cast<const char*>(s.data()), s.size());
    }
};

void write_raw_record(Writer& w, const std::string& name, const Shape& shape,
                      std::span<const float> data) {
    w.str(name);
    w.u8(0);
    w.u32(static_cast<uint32_t>(shape.size()));
    for (int64_t d : shape) w.u64(static_cast<uint64_t>(d));
    for (float v : data) w.f32(v);
}

void write_quant_record(Writer& w, const std::string& name, const QuantizedTensor& q) {
    w.str(name);
    w.u8(1);
    w.u32(static_cast<uint32_t>(q.shape.size()));
    for (int64_t d : q.shape) w.u64(static_cast<uint64_t>(d));
    w.u32(static_cast<uint32_t>(q.bits));
    w.u8(static_cast<uint8_t>(q.params.granularity));
    w.u8(static_cast<uint8_t>(q.params.axis));
    w.u64(static_cast<uint64_t>(q.params.group_size));
    w.u64(static_cast<uint64_t>(q.params.slice_count()));
    for (float s : q.params.step) w.f32(s);
    for (int64_t b : q.params.beta) {
        if (b < std::numeric_limits<int32_t>::min() || b > std::numeric_limits<int32_t>::max())
            throw DomainError("pack: quantizer offset does not fit 32 bits");
        w.i32(static_cast<int32_t>(b));
    }
    const std::vector<uint8_t> payload = pack_codes(q.codes, q.bits);
    w.u64(static_cast<uint64_t>(payload.size()));
    w.raw(payload.data(), payload.size());
}

std::vector<float> read_raw_record(Reader& r, int64_t expect_numel, const std::string& name) {
    std::vector<float> data(static_cast<size_t>(expect_numel));
    for (int64_t i = 0; i < expect_numel; ++i) data[static_cast<size_t>(i)] = r.f32();
    (void)name;
    return data;
}

QuantizedTensor read_quant_record(Reader& r, const Shape& shape) {
    QuantizedTensor q;
    q.shape = shape;
    q.bits = static_cast<int>(r.u32());
    if (q.bits < 2 || q.bits > 16) throw PackError(PackErrc::malformed, "bits out of range");
    q.params.shape = shape;
    q.params.granularity = static_cast<Granularity>(r.u8());
    q.params.axis = static_cast<int>(r.u8());
    q.params.group_size = static_cast<int64_t>(r.u64());
    const uint64_t slices = r.u64();
    if (slices == 0 || slices > static_cast<uint64_t>(shape_numel(shape)))
        throw PackError(PackErrc::malformed, "slice count out of range");
    q.params.step.resize(slices);
    q.params.beta.resize(slices);
    for (uint64_t i = 0; i < slices; ++i) q.params.step[i] = r.f32();
    for (uint64_t i = 0; i < slices; ++i) q.params.beta[i] = r.i32();
    for (float s : q.params.step)
        if (!(s > 0.0f) || !std::isfinite(s)) throw PackError(PackErrc::malformed, "bad step value");
    const uint64_t payload = r.u64();
    const int64_t count = shape_numel(shape);
    if (static_cast<int64_t>(payload) != packed_code_bytes(count, q.bits))
        throw PackError(PackErrc::malformed, "payload length does not match shape");
    q.codes = unpack_codes(r.raw(payload), count, q.bits);
    return q;
}

struct RecordHead {
    std::string name;
    uint8_t kind;
    Shape shape;
};

RecordHead read_record_head(Reader& r) {
    RecordHead h;
    h.name = r.str();
    h.kind = r.u8();
    if (h.kind > 1) throw PackError(PackErrc::malformed, "unknown record kind");
    const uint32_t ndim = r.u32();
    if (ndim > 4) throw PackError(PackErrc::malformed, "implausible rank");
    for (uint32_t i = 0; i < ndim; ++i) {
        const uint64_t d = r.u64();
        if (d == 0 || d > (1ull << 32)) throw PackError(PackErrc::malformed, "implausible extent");
        h.shape.push_back(static_cast<int64_t>(d));
    }
    return h;
}

const std::array<const char*, 7>& linear_names() { return kLinearNames; }

} // namespace

std::vector<uint8_t> pack(const QuantizedModel& m) {
    if (m.blocks.empty()) throw ContractError("pack: model has no blocks");
    if (static_cast<int64_t>(m.blocks.size()) != m.config.n_layers)
        throw ContractError("pack: block count does not match config");

    Writer w;
    w.raw(kMagic, 4);
    w.u32(kVersion);
    w.u32(static_cast<uint32_t>(m.weight_bits));
    w.u32(static_cast<uint32_t>(m.act_bits));
    w.u32(static_cast<uint32_t>(m.weight_granularity));
    w.u64(static_cast<uint64_t>(m.group_size));
    w.u64(static_cast<uint64_t>(m.config.vocab_size));
    w.u64(static_cast<uint64_t>(m.config.d_model));
    w.u64(static_cast<uint64_t>(m.config.n_heads));
    w.u64(static_cast<uint64_t>(m.config.n_layers));
    w.u64(static_cast<uint64_t>(m.config.d_ff));
    w.u64(static_cast<uint64_t>(m.config.max_seq));
    w.u64(m.config.seed);
    w.u32(static_cast<uint32_t>(m.vocab.size()));
    w.raw(m.vocab.data(), m.vocab.size());

    const int64_t d = m.config.d_model, v = m.config.vocab_size;
    const uint32_t n_records = static_cast<uint32_t>(3 + m.blocks.size() * 9);
    w.u32(n_records);

    write_raw_record(w, "embedding", {v, d}, m.embedding);
    for (size_t l = 0; l < m.blocks.size(); ++l) {
        const QuantizedBlock& b = m.blocks[l];
        const std::string prefix = "block" + std::to_string(l) + ".";
        write_raw_record(w, prefix + "norm1_gain", {d}, b.norm1_gain);
        write_raw_record(w, prefix + "norm2_gain", {d}, b.norm2_gain);
        for (int i = 0; i < 7; ++i)
            write_quant_record(w, prefix + linear_names()[static_cast<size_t>(i)],
                               b.linears[static_cast<size_t>(i)]);
    }
    write_raw_record(w, "final_norm_gain", {d}, m.final_norm_gain);
    write_raw_record(w, "lm_head", {d, v}, m.lm_head);

    w.u32(crc32_ieee(w.bytes));
    return std::move(w.bytes);
}

QuantizedModel unpack(std::span<const uint8_t> bytes) {
    if (bytes.size() < 12) throw PackError(PackErrc::truncated, "artifact too small");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw PackError(PackErrc::bad_magic, "not an SLQ1 artifact");

    Reader head{bytes, 4};
    const uint32_t version = head.u32();
    if (version != kVersion)
        throw PackError(PackErrc::bad_version,
                        "artifact version " + std::to_string(version) + ", expected " +
                            std::to_string(kVersion));

    const std::span<const uint8_t> body = bytes.subspan(0, bytes.size() - 4);
    Reader crc_r{bytes, bytes.size() - 4};
    const uint32_t declared = crc_r.u32();
    if (crc32_ieee(body) != declared) throw PackError(PackErrc::bad_crc, "checksum mismatch");

    Reader r{body, 8};
    QuantizedModel m;
    m.weight_bits = static_cast<int>(r.u32());
    m.act_bits = static_cast<int>(r.u32());
    const uint32_t gran = r.u32();
    if (gran > 3) throw PackError(PackErrc::malformed, "unknown granularity code");
    m.weight_granularity = static_cast<Granularity>(gran);
    m.group_size = static_cast<int64_t>(r.u64());
    m.config.vocab_size = static_cast<int64_t>(r.u64());
    m.config.d_model = static_cast<int64_t>(r.u64());
    m.config.n_heads = static_cast<int64_t>(r.u64());
    m.config.n_layers = static_cast<int64_t>(r.u64());
    m.config.d_ff = static_cast<int64_t>(r.u64());
    m.config.max_seq = static_cast<int64_t>(r.u64());
    m.config.seed = r.u64();
    try {
        m.config.validate();
    } catch (const ConfigError& e) {
        throw PackError(PackErrc::malformed, e.what());
    }

    const uint32_t vocab_len = r.u32();
    if (vocab_len != m.config.vocab_size)
        throw PackError(PackErrc::malformed, "vocab table does not match vocab_size");
    auto vb = r.raw(vocab_len);
    m.vocab.assign(vb.begin(), vb.end());

    const int64_t d = m.config.d_model, v = m.config.vocab_size;
    const uint32_t n_records = r.u32();
    if (n_records != static_cast<uint32_t>(3 + m.config.n_layers * 9))
        throw PackError(PackErrc::malformed, "record count mismatch");

    auto expect_raw = [&r](const std::string& name, const Shape& shape) {
        RecordHead h = read_record_head(r);
        if (h.name != name || h.kind != 0 || h.shape != shape)
            throw PackError(PackErrc::malformed, "expected raw record " + name);
        return read_raw_record(r, shape_numel(shape), name);
    };
    auto expect_quant = [&r, &m](const std::string& name, const Shape& shape) {
        RecordHead h = read_record_head(r);
        if (h.name != name || h.kind != 1 || h.shape != shape)
            throw PackError(PackErrc::malformed, "expected quantized record " + name);
        QuantizedTensor q = read_quant_record(r, shape);
        if (q.bits != m.weight_bits) throw PackError(PackErrc::malformed, "record bits mismatch");
        return q;
    };

    m.embedding = expect_raw("embedding", {v, d});
    m.blocks.resize(static_cast<size_t>(m.config.n_layers));
    const int64_t ff = m.config.d_ff;
    const Shape linear_shapes[7] = {{d, d}, {d, d}, {d, d}, {d, d}, {d, ff}, {d, ff}, {ff, d}};
    for (size_t l = 0; l < m.blocks.size(); ++l) {
        QuantizedBlock& b = m.blocks[l];
        const std::string prefix = "block" + std::to_string(l) + ".";
        b.norm1_gain = expect_raw(prefix + "norm1_gain", {d});
        b.norm2_gain = expect_raw(prefix + "norm2_gain", {d});
        for (int i = 0; i < 7; ++i)
            b.linears[static_cast<size_t>(i)] =
                expect_quant(prefix + linear_names()[static_cast<size_t>(i)],
                             linear_shapes[i]);
    }
    m.final_norm_gain = expect_raw("final_norm_gain", {d});
    m.lm_head = expect_raw("lm_head", {d, v});

    if (r.pos != body.size()) throw PackError(PackErrc::malformed, "trailing bytes in artifact");
    return m;
}

void save_artifact(const QuantizedModel& model, const std::string& path) {
    const std::vector<uint8_t> bytes = pack(model);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ConfigError("artifact: cannot write " + path);
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
    if (!os) throw ConfigError("artifact: write failed for " + path);
}

QuantizedModel load_artifact(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("artifact: cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                               std::istreambuf_iterator<char>());
    return unpack(bytes);
}

// ---------------------------------------------------------------------------
// storage accounting
// ---------------------------------------------------------------------------

StorageReport storage_report(const QuantizedModel& m) {
    if (m.blocks.empty()) throw ContractError("storage report: model has no blocks");
    StorageReport rep;
    auto add_raw = [&rep](const std::string& name, int64_t numel) {
        StorageRow row;
        row.name = name;
        row.fp32_bytes = numel * 4;
        row.packed_bytes = numel * 4;
        row.quantized = false;
        rep.rows.push_back(row);
    };
    auto add_quant = [&rep](const std::string& name, const QuantizedTensor& q) {
        StorageRow row;
        row.name = name;
        row.fp32_bytes = q.numel() * 4;
        row.packed_bytes =
            packed_code_bytes(q.numel(), q.bits) + q.params.slice_count() * (4 + 4);
        row.quantized = true;
        rep.rows.push_back(row);
    };

    add_raw("embedding", static_cast<int64_t>(m.embedding.size()));
    for (size_t l = 0; l < m.blocks.size(); ++l) {
        const std::string prefix = "block" + std::to_string(l) + ".";
        add_raw(prefix + "norm1_gain", static_cast<int64_t>(m.blocks[l].norm1_gain.size()));
        add_raw(prefix + "norm2_gain", static_cast<int64_t>(m.blocks[l].norm2_gain.size()));
        for (int i = 0; i < 7; ++i)
            add_quant(prefix + kLinearNames[static_cast<size_t>(i)],
                      m.blocks[l].linears[static_cast<size_t>(i)]);
    }
    add_raw("final_norm_gain", static_cast<int64_t>(m.final_norm_gain.size()));
    add_raw("lm_head", static_cast<int64_t>(m.lm_head.size()));

    for (const StorageRow& r : rep.rows) {
        rep.total_fp32 += r.fp32_bytes;
        rep.total_packed += r.packed_bytes;
    }
    return rep;
}

std::string storage_report_text(const StorageReport& rep) {
    std::ostringstream os;
    os << "tensor,fp32_bytes,packed_bytes,ratio,quantized\n";
    for (const StorageRow& r : rep.rows)
        os << r.name << "," << r.fp32_bytes << "," << r.packed_bytes << "," << r.ratio() << ","
           << (r.quantized ? 1 : 0) << "\n";
    os << "total," << rep.total_fp32 << "," << rep.total_packed << "," << rep.total_ratio()
       << ",\n";
    return os.str();
}

} // namespace slq

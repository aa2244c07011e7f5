#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "grow/config.hpp"
#include "grow/dit.hpp"
#include "grow/optim.hpp"

namespace grow {

// Checkpoint container:
//   "MGRW" | u64 version | u64 config_len, config text | u64 header_len,
//   header text | u64 payload_len, f32 LE payload | u64 opt_len, optimizer
//   section (u64 step, then m and v payloads mirroring the tensor table).
// The header is one line per tensor: `name shape_csv offset`, offsets are
// ascending byte positions into the payload. All integers little-endian.

inline constexpr char kCkptMagic[4] = {'M', 'G', 'R', 'W'};
inline constexpr uint64_t kCkptVersion = 1;

namespace detail {

inline void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int i = 0; i < 4; ++i) out.push_back(char((bits >> (8 * i)) & 0xff));
}

struct ByteReader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) fail(ErrorKind::truncated, "checkpoint: truncated payload");
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(buf[pos + size_t(i)])) << (8 * i);
        pos += 8;
        return v;
    }
    float f32() {
        need(4);
        uint32_t bits = 0;
        for (int i = 0; i < 4; ++i) bits |= uint32_t(uint8_t(buf[pos + size_t(i)])) << (8 * i);
        pos += 4;
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

template <typename S>
void append_tensor_payload(std::string& payload, const Tensor<S>& t) {
    for (int64_t i = 0; i < t.numel(); ++i) put_f32(payload, float(t.data()[i]));
}

template <typename S>
void append_values_payload(std::string& payload, const std::vector<S>& v) {
    for (S x : v) put_f32(payload, float(x));
}

}  // namespace detail

namespace detail {

// The embedded snapshot describes the model and run parameters; it never
// carries this run's file locations.
inline Config strip_paths(Config cfg) {
    cfg.ckpt.clear();
    cfg.out.clear();
    cfg.metrics.clear();
    cfg.prompts.clear();
    return cfg;
}

}  // namespace detail

template <typename S>
void save_checkpoint(const DitModel<S>& model, const AdamState<S>* opt, const Config& cfg,
                     const std::string& path) {
    auto params = model.named_params();

    std::string header;
    std::string payload;
    for (const auto& p : params) {
        header += p.name + " ";
        const Shape& sh = p.tensor.shape();
        for (size_t i = 0; i < sh.size(); ++i) {
            if (i) header += ",";
            header += std::to_string(sh[i]);
        }
        header += " " + std::to_string(payload.size()) + "\n";
        detail::append_tensor_payload(payload, p.tensor);
    }

    std::string opt_section;
    if (opt) {
        if (!opt->matches(params))
            fail(ErrorKind::state, "save_checkpoint: optimizer state does not match model parameters");
        detail::put_u64(opt_section, uint64_t(opt->step));
        for (const auto& m : opt->m) detail::append_values_payload(opt_section, m);
        for (const auto& v : opt->v) detail::append_values_payload(opt_section, v);
    }

    std::string cfg_text = detail::strip_paths(cfg).serialize();
    std::string out;
    out.append(kCkptMagic, 4);
    detail::put_u64(out, kCkptVersion);
    detail::put_u64(out, cfg_text.size());
    out += cfg_text;
    detail::put_u64(out, header.size());
    out += header;
    detail::put_u64(out, payload.size());
    out += payload;
    detail::put_u64(out, opt_section.size());
    out += opt_section;

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorKind::io, "cannot open '" + path + "' for writing");
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) fail(ErrorKind::io, "short write to '" + path + "'");
}

template <typename S>
struct LoadedCheckpoint {
    Config cfg;
    DitModel<S> model;
    std::optional<AdamState<S>> opt;
};

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::io, "cannot open checkpoint '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    std::string buf = ss.str();

    if (buf.size() < 4 || std::memcmp(buf.data(), kCkptMagic, 4) != 0)
        fail(ErrorKind::bad_magic, "checkpoint: bad magic bytes");
    detail::ByteReader r{buf, 4};
    uint64_t version = r.u64();
    if (version != kCkptVersion)
        fail(ErrorKind::bad_version,
             "checkpoint: unsupported version " + std::to_string(version));

    std::string cfg_text = r.bytes(size_t(r.u64()));
    std::string header = r.bytes(size_t(r.u64()));
    uint64_t payload_len = r.u64();
    size_t payload_pos = r.pos;
    r.need(size_t(payload_len));
    r.pos += size_t(payload_len);
    uint64_t opt_len = r.u64();
    size_t opt_pos = r.pos;
    r.need(size_t(opt_len));

    LoadedCheckpoint<S> loaded{Config::parse_text(cfg_text), DitModel<S>{}, std::nullopt};
    Rng scratch(0);
    loaded.model = init_model<S>(loaded.cfg.model, scratch);
    auto params = loaded.model.named_params();

    std::istringstream hs(header);
    std::string line;
    size_t idx = 0;
    uint64_t prev_end = 0;
    while (std::getline(hs, line)) {
        if (line.empty()) continue;
        if (idx >= params.size())
            fail(ErrorKind::shape, "checkpoint: more tensors than the config implies");
        std::istringstream ls(line);
        std::string name, shape_csv, offset_str;
        ls >> name >> shape_csv >> offset_str;
        if (name != params[idx].name)
            fail(ErrorKind::shape, "checkpoint: tensor '" + name + "' where '" + params[idx].name +
                                       "' was expected");
        Shape sh;
        std::string num;
        for (char c : shape_csv + ",") {
            if (c == ',') {
                sh.push_back(std::stoll(num));
                num.clear();
            } else {
                num.push_back(c);
            }
        }
        if (sh != params[idx].tensor.shape())
            fail(ErrorKind::shape, "checkpoint: tensor '" + name + "' has shape " + shape_str(sh) +
                                       ", expected " + shape_str(params[idx].tensor.shape()));
        uint64_t offset = std::stoull(offset_str);
        if (offset < prev_end)
            fail(ErrorKind::shape, "checkpoint: overlapping or non-ascending offsets at '" + name + "'");
        uint64_t nbytes = uint64_t(params[idx].tensor.numel()) * 4;
        if (offset + nbytes > payload_len)
            fail(ErrorKind::truncated, "checkpoint: truncated payload");
        detail::ByteReader pr{buf, payload_pos + size_t(offset)};
        for (int64_t i = 0; i < params[idx].tensor.numel(); ++i)
            params[idx].tensor.data()[i] = S(pr.f32());
        prev_end = offset + nbytes;
        ++idx;
    }
    if (idx != params.size())
        fail(ErrorKind::shape, "checkpoint: fewer tensors than the config implies");

    if (opt_len > 0) {
        detail::ByteReader orr{buf, opt_pos};
        AdamState<S> st;
        st.step = int64_t(orr.u64());
        uint64_t want = 8;
        for (const auto& p : params) want += uint64_t(p.tensor.numel()) * 8;  // m and v
        if (opt_len != want) fail(ErrorKind::truncated, "checkpoint: truncated optimizer section");
        for (const auto& p : params) {
            std::vector<S> m(size_t(p.tensor.numel()));
            for (auto& x : m) x = S(orr.f32());
            st.m.push_back(std::move(m));
        }
        for (const auto& p : params) {
            std::vector<S> v(size_t(p.tensor.numel()));
            for (auto& x : v) x = S(orr.f32());
            st.v.push_back(std::move(v));
        }
        loaded.opt = std::move(st);
    }
    return loaded;
}

// Single-tensor container reusing the checkpoint layout; used for sampled
// latents.
template <typename S>
void save_tensor_file(const Tensor<S>& t, const std::string& name, const Config& cfg,
                      const std::string& path) {
    std::string header = name + " ";
    for (size_t i = 0; i < t.shape().size(); ++i) {
        if (i) header += ",";
        header += std::to_string(t.shape()[i]);
    }
    header += " 0\n";
    std::string payload;
    detail::append_tensor_payload(payload, t);
    std::string cfg_text = detail::strip_paths(cfg).serialize();
    std::string out;
    out.append(kCkptMagic, 4);
    detail::put_u64(out, kCkptVersion);
    detail::put_u64(out, cfg_text.size());
    out += cfg_text;
    detail::put_u64(out, header.size());
    out += header;
    detail::put_u64(out, payload.size());
    out += payload;
    detail::put_u64(out, 0);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorKind::io, "cannot open '" + path + "' for writing");
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) fail(ErrorKind::io, "short write to '" + path + "'");
}

}  // namespace grow

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "moeroute/attention_expert.hpp"
#include "moeroute/router.hpp"
#include "moeroute/ssm_expert.hpp"

namespace moeroute {

// Layout: "MOEROUTE", u32 version, u32 kind, kind-specific header, u64 tensor
// count, then per tensor u64 numel followed by raw little-endian f64 values.

inline constexpr char kCheckpointMagic[8] = {'M', 'O', 'E', 'R', 'O', 'U', 'T', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kRouterKind = 3;

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

namespace detail {

class Writer {
public:
    explicit Writer(std::ostream& os) : os_(os) {}
    template <typename T>
    void put(T v) {
        os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    void tensors(const std::vector<Tensor>& ts) {
        put<std::uint64_t>(ts.size());
        for (const auto& t : ts) {
            put<std::uint64_t>(t.numel());
            const auto d = t.data();
            os_.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(double)));
        }
    }

private:
    std::ostream& os_;
};

class Reader {
public:
    Reader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}
    template <typename T>
    T get() {
        T v{};
        is_.read(reinterpret_cast<char*>(&v), sizeof(T));
        if (!is_) throw IoError(what_ + ": truncated checkpoint");
        return v;
    }
    void tensors(const std::vector<Tensor>& ts) {
        const auto n = get<std::uint64_t>();
        if (n != ts.size()) {
            throw IoError(what_ + ": checkpoint holds " + std::to_string(n) + " tensors, model has " +
                          std::to_string(ts.size()));
        }
        for (std::size_t k = 0; k < ts.size(); ++k) {
            const auto numel = get<std::uint64_t>();
            if (numel != ts[k].numel()) throw IoError(what_ + ": tensor " + std::to_string(k) + " has the wrong size");
            Tensor t = ts[k];
            auto d = t.mutable_data();
            is_.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(double)));
            if (!is_) throw IoError(what_ + ": truncated checkpoint");
        }
    }
    void expect_end() {
        if (is_.peek() != std::char_traits<char>::eof()) throw IoError(what_ + ": trailing bytes in checkpoint");
    }

private:
    std::istream& is_;
    std::string what_;
};

inline void write_header(Writer& w, std::uint32_t kind) {
    for (char c : kCheckpointMagic) w.put(c);
    w.put(kCheckpointVersion);
    w.put(kind);
}

inline std::uint32_t read_header(Reader& r) {
    for (char c : kCheckpointMagic)
        if (r.get<char>() != c) throw IoError("not a moeroute checkpoint (bad magic)");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
    return r.get<std::uint32_t>();
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path);
    return os;
}

inline std::ifstream open_in(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read " + path);
    return is;
}

}  // namespace detail

inline void write_expert(std::ostream& os, const Expert& e) {
    detail::Writer w(os);
    detail::write_header(w, static_cast<std::uint32_t>(e.kind()));
    const auto& d = e.dims();
    for (std::size_t v : {d.vocab, d.d_model, d.max_len, d.n_domains, d.num_layers, d.num_heads, d.d_ff, d.d_state,
                          d.lora_rank})
        w.put<std::uint64_t>(v);
    w.put<double>(d.lora_alpha);
    w.tensors(e.parameters());
}

/// The restored expert is frozen.
inline std::unique_ptr<Expert> read_expert(std::istream& is, const std::string& what = "checkpoint") {
    detail::Reader r(is, what);
    const auto kind = detail::read_header(r);
    if (kind != static_cast<std::uint32_t>(ExpertKind::Attention) && kind != static_cast<std::uint32_t>(ExpertKind::SSM))
        throw IoError(what + ": checkpoint kind " + std::to_string(kind) + " is not an expert");
    ExpertDims d;
    for (std::size_t* v : {&d.vocab, &d.d_model, &d.max_len, &d.n_domains, &d.num_layers, &d.num_heads, &d.d_ff,
                           &d.d_state, &d.lora_rank})
        *v = static_cast<std::size_t>(r.get<std::uint64_t>());
    d.lora_alpha = r.get<double>();
    SeededRng rng(0);
    std::unique_ptr<Expert> e;
    if (kind == static_cast<std::uint32_t>(ExpertKind::Attention))
        e = std::make_unique<AttentionExpert>(d, rng);
    else
        e = std::make_unique<SSMExpert>(d, rng);
    r.tensors(e->parameters());
    r.expect_end();
    e->freeze();
    return e;
}

inline void save_expert(const Expert& e, const std::string& path) {
    auto os = detail::open_out(path);
    write_expert(os, e);
    if (!os) throw IoError("failed writing " + path);
}

inline std::unique_ptr<Expert> load_expert(const std::string& path) {
    auto is = detail::open_in(path);
    return read_expert(is, path);
}

inline void write_router(std::ostream& os, const RouterMLP& mlp) {
    detail::Writer w(os);
    detail::write_header(w, kRouterKind);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(mlp.input));
    w.put<std::uint64_t>(mlp.input_width());
    w.put<std::uint64_t>(mlp.hidden());
    w.tensors(mlp.parameters());
}

inline RouterMLP read_router(std::istream& is, const std::string& what = "checkpoint") {
    detail::Reader r(is, what);
    if (detail::read_header(r) != kRouterKind) throw IoError(what + ": not a router checkpoint");
    const auto mode = r.get<std::uint32_t>();
    if (mode > static_cast<std::uint32_t>(RouterInput::Length)) throw IoError(what + ": unknown router input mode");
    const auto in = static_cast<std::size_t>(r.get<std::uint64_t>());
    const auto hidden = static_cast<std::size_t>(r.get<std::uint64_t>());
    if (hidden == 0 || in == 0) throw IoError(what + ": degenerate router shape");
    RouterMLP m{Tensor::zeros({in, hidden}), Tensor::zeros({hidden}), Tensor::zeros({hidden, 2}), Tensor::zeros({2}),
                static_cast<RouterInput>(mode)};
    r.tensors(m.parameters());
    r.expect_end();
    return m;
}

inline void save_router(const RouterMLP& mlp, const std::string& path) {
    auto os = detail::open_out(path);
    write_router(os, mlp);
    if (!os) throw IoError("failed writing " + path);
}

inline RouterMLP load_router(const std::string& path) {
    auto is = detail::open_in(path);
    return read_router(is, path);
}

}  // namespace moeroute

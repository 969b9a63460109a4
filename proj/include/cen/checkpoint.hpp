#pragma once

// Binary checkpoint bundle, little-endian throughout:
//
//   "CEN1"  u32 version  u64 iteration  u32 count  record*count
//   u8 has_optimizer  [u64 adam_step  u32 count  record*count]
//   u32 crc32 of every preceding byte
//
//   record = u32 name_len, name bytes, u8 ndim, u64 dims[ndim], f32 values
//
// Optimizer records are named "<parameter>.adam_m" / "<parameter>.adam_v".

#include <bit>
#include <cstring>
#include <optional>

#include "cen/blocks.hpp"
#include "cen/image.hpp"
#include "cen/optim.hpp"

namespace cen {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CorruptionError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

class IncompatibleCheckpointError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<float> values;

    friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct OptimizerState {
    std::uint64_t steps = 0;
    std::vector<NamedTensor> moments;

    friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

struct Checkpoint {
    std::uint64_t iteration = 0;
    std::vector<NamedTensor> tensors;
    std::optional<OptimizerState> optimizer;

    [[nodiscard]] std::map<std::string, Shape> shapes() const {
        std::map<std::string, Shape> out;
        for (const auto& t : tensors) out.emplace(t.name, t.shape);
        return out;
    }

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
    std::uint8_t b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    out.insert(out.end(), b, b + sizeof(U));
}

inline void put_record(std::vector<std::uint8_t>& out, const NamedTensor& t) {
    if (t.values.size() != t.shape.numel()) throw ContractError("record '" + t.name + "' size does not match shape");
    put_le(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    out.push_back(4);
    for (auto d : t.shape.dims()) put_le(out, static_cast<std::uint64_t>(d));
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.values.data());
    out.insert(out.end(), p, p + t.values.size() * sizeof(float));
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    template <typename U>
    U get(const char* what) {
        need(sizeof(U), what);
        U v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
        pos_ += sizeof(U);
        return v;
    }

    std::string string(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    void floats(std::span<float> out, const char* what) {
        need(out.size_bytes(), what);
        std::memcpy(out.data(), bytes_.data() + pos_, out.size_bytes());
        pos_ += out.size_bytes();
    }

    [[nodiscard]] std::size_t pos() const noexcept { return pos_; }
    [[nodiscard]] std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

private:
    void need(std::size_t n, const char* what) const {
        if (remaining() < n) throw ParseError(pos_, std::string("checkpoint truncated reading ") + what);
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

inline NamedTensor get_record(Reader& r) {
    NamedTensor t;
    const auto name_len = r.get<std::uint32_t>("name length");
    if (name_len > r.remaining()) throw ParseError(r.pos(), "checkpoint record name length exceeds file");
    t.name = r.string(name_len, "name");
    const auto ndim = r.get<std::uint8_t>("ndim");
    if (ndim > 4) throw ParseError(r.pos() - 1, "record '" + t.name + "' has " + std::to_string(ndim) + " dimensions");
    // Fewer than four dimensions are right-aligned into NCHW.
    std::array<std::size_t, 4> dims{1, 1, 1, 1};
    for (std::size_t i = 0; i < ndim; ++i) dims[4 - ndim + i] = r.get<std::uint64_t>("dims");
    t.shape = Shape::from(dims);
    const std::size_t n = t.shape.numel();
    if (n > r.remaining() / sizeof(float)) throw ParseError(r.pos(), "record '" + t.name + "' values exceed file");
    t.values.resize(n);
    r.floats(t.values, "values");
    return t;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    std::vector<std::uint8_t> out{'C', 'E', 'N', '1'};
    detail::put_le(out, kCheckpointVersion);
    detail::put_le(out, ckpt.iteration);
    detail::put_le(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) detail::put_record(out, t);
    out.push_back(ckpt.optimizer ? 1 : 0);
    if (ckpt.optimizer) {
        detail::put_le(out, ckpt.optimizer->steps);
        detail::put_le(out, static_cast<std::uint32_t>(ckpt.optimizer->moments.size()));
        for (const auto& t : ckpt.optimizer->moments) detail::put_record(out, t);
    }
    detail::put_le(out, detail::crc32_of(out));
    return out;
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 + 4 + 8 + 4 + 1 + 4) throw ParseError(bytes.size(), "checkpoint too short");
    const std::size_t body = bytes.size() - 4;
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + body, 4);
    if (std::memcmp(bytes.data(), "CEN1", 4) != 0) throw ParseError(0, "bad checkpoint magic");
    if (detail::crc32_of(bytes.first(body)) != stored) throw CorruptionError("checkpoint CRC32 mismatch");

    detail::Reader r(bytes.first(body));
    r.string(4, "magic");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion) throw UnsupportedFormatError("checkpoint version " + std::to_string(version));
    Checkpoint ckpt;
    ckpt.iteration = r.get<std::uint64_t>("iteration");
    const auto count = r.get<std::uint32_t>("record count");
    for (std::uint32_t i = 0; i < count; ++i) ckpt.tensors.push_back(detail::get_record(r));
    const auto has_opt = r.get<std::uint8_t>("optimizer flag");
    if (has_opt > 1) throw ParseError(r.pos() - 1, "bad optimizer flag");
    if (has_opt) {
        OptimizerState st;
        st.steps = r.get<std::uint64_t>("adam step");
        const auto n = r.get<std::uint32_t>("optimizer record count");
        for (std::uint32_t i = 0; i < n; ++i) st.moments.push_back(detail::get_record(r));
        ckpt.optimizer = std::move(st);
    }
    if (r.remaining() != 0) throw ParseError(r.pos(), "trailing bytes before checkpoint CRC");
    return ckpt;
}

/// Writes through a temporary file and renames, so a crash never leaves a
/// half-written checkpoint under the final name.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    auto tmp = path;
    tmp += ".tmp";
    write_file(tmp, encode_checkpoint(ckpt));
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    try {
        return decode_checkpoint(bytes);
    } catch (const ParseError& e) {
        throw ParseError(e.offset(), path.string() + ": " + e.reason());
    } catch (const CorruptionError& e) {
        throw CorruptionError(path.string() + ": " + e.what());
    }
}

inline Checkpoint make_checkpoint(const Network<float>& net, std::uint64_t iteration,
                                  const Adam<float>* optimizer = nullptr) {
    Checkpoint ckpt;
    ckpt.iteration = iteration;
    for (const auto& p : net.parameters()) {
        const auto d = p.value.data();
        ckpt.tensors.push_back({p.name, p.value.shape(), {d.begin(), d.end()}});
    }
    if (optimizer) {
        OptimizerState st;
        st.steps = optimizer->steps();
        for (const auto& [name, s] : optimizer->slots()) {
            const auto m = s.m.data();
            const auto v = s.v.data();
            st.moments.push_back({name + ".adam_m", s.m.shape(), {m.begin(), m.end()}});
            st.moments.push_back({name + ".adam_v", s.v.shape(), {v.begin(), v.end()}});
        }
        ckpt.optimizer = std::move(st);
    }
    return ckpt;
}

/// Copies checkpoint values into `net`. The parameter census (names and
/// shapes) must match exactly.
inline void apply_checkpoint(const Checkpoint& ckpt, Network<float>& net) {
    std::map<std::string, const NamedTensor*> by_name;
    for (const auto& t : ckpt.tensors) by_name.emplace(t.name, &t);
    for (auto& p : net.parameters()) {
        auto it = by_name.find(p.name);
        if (it == by_name.end())
            throw IncompatibleCheckpointError("checkpoint has no tensor for parameter '" + p.name + "'");
        if (it->second->shape != p.value.shape())
            throw IncompatibleCheckpointError("parameter '" + p.name + "' has shape " + p.value.shape().str() +
                                              ", checkpoint has " + it->second->shape.str());
        std::copy(it->second->values.begin(), it->second->values.end(), p.value.data().begin());
        by_name.erase(it);
    }
    if (!by_name.empty())
        throw IncompatibleCheckpointError("checkpoint tensor '" + by_name.begin()->first +
                                          "' has no matching network parameter");
}

inline void apply_optimizer_state(const Checkpoint& ckpt, Adam<float>& adam) {
    if (!ckpt.optimizer) throw CheckpointError("checkpoint carries no optimizer state");
    std::map<std::string, Adam<float>::Slots> slots;
    for (const auto& t : ckpt.optimizer->moments) {
        const bool is_m = t.name.ends_with(".adam_m");
        if (!is_m && !t.name.ends_with(".adam_v"))
            throw CheckpointError("unexpected optimizer record '" + t.name + "'");
        const std::string param = t.name.substr(0, t.name.size() - 7);
        auto& s = slots[param];
        (is_m ? s.m : s.v) = Tensor<float>(t.shape, t.values);
    }
    for (const auto& [name, s] : slots)
        if (!s.m.defined() || !s.v.defined()) throw CheckpointError("incomplete optimizer state for '" + name + "'");
    adam.restore(ckpt.optimizer->steps, std::move(slots));
}

/// Builds a network whose architecture is read off the checkpoint itself.
inline Network<float> network_from_checkpoint(const Checkpoint& ckpt, UpsampleMode upsample = UpsampleMode::nearest) {
    Network<float> net(infer_network_config(ckpt.shapes(), upsample));
    apply_checkpoint(ckpt, net);
    return net;
}

}  // namespace cen

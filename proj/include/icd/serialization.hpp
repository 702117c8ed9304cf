#pragma once

// Binary containers for subjects, stimuli, responses, estimated weights and
// decoder checkpoints. Layouts are documented in docs/formats.md; all
// integers and doubles are little-endian and doubles are copied bit for bit.

#include "icd/decoder.hpp"
#include "icd/synthetic_cortex.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

namespace icd {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class ContainerKind : std::uint32_t { subject = 1, stimuli = 2, responses = 3, estimated_weights = 4 };

/// Fixed 64-byte header shared by every data container.
struct ContainerHeader {
    ContainerKind kind = ContainerKind::subject;
    std::uint32_t flags = 0;  // bit 0: responses are z-scored
    std::uint64_t rows = 0;   // K (or n for stimuli)
    std::uint64_t cols = 0;   // d (or n for responses)
    std::uint64_t seed = 0;
    std::uint64_t roi_count = 0;
    double ridge = 0.0;             // estimated weights only
    std::uint64_t context_size = 0; // estimated weights only

    friend bool operator==(const ContainerHeader&, const ContainerHeader&) = default;
};

/// Estimated K x d weights plus the stage-1 settings that produced them.
struct EstimatedWeights {
    Matrix values;
    std::uint64_t seed = 0;
    std::uint64_t roi_count = 0;
    double ridge = 0.0;
    std::uint64_t context_size = 0;

    friend bool operator==(const EstimatedWeights&, const EstimatedWeights&) = default;
};

enum class CheckpointStage : std::uint32_t { init = 0, pretrain = 1, context_extension = 2, finetune = 3 };

inline std::string_view to_string(CheckpointStage s) {
    switch (s) {
        case CheckpointStage::init: return "init";
        case CheckpointStage::pretrain: return "pretrain";
        case CheckpointStage::context_extension: return "context_extension";
        case CheckpointStage::finetune: return "finetune";
    }
    return "unknown";
}

struct Checkpoint {
    Decoder params;
    CheckpointStage stage = CheckpointStage::init;
    std::uint64_t config_hash = 0;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace io {

inline constexpr char kDataMagic[4] = {'I', 'C', 'D', 'C'};
inline constexpr char kCheckpointMagic[4] = {'I', 'C', 'D', 'K'};
inline constexpr std::uint32_t kFormatVersion = 1;

class Writer {
public:
    template <typename T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        const auto* p = reinterpret_cast<const char*>(&v);
        buf_.insert(buf_.end(), p, p + sizeof(T));
    }
    void bytes(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
    void matrix_row_major(const Matrix& m) {
        for (Index i = 0; i < m.rows(); ++i)
            for (Index j = 0; j < m.cols(); ++j) put<double>(m(i, j));
    }
    const std::vector<char>& data() const { return buf_; }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot open " + path + " for writing");
        out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
        if (!out) throw FormatError("failed writing " + path);
    }

private:
    std::vector<char> buf_;
};

class Reader {
public:
    explicit Reader(std::vector<char> buf) : buf_(std::move(buf)) {}

    static Reader open(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw FormatError("cannot open " + path);
        return Reader(std::vector<char>(std::istreambuf_iterator<char>(in), {}));
    }

    template <typename T>
    T get() {
        if (pos_ + sizeof(T) > buf_.size()) throw FormatError("container truncated");
        T v;
        std::memcpy(&v, buf_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    void expect_magic(const char (&magic)[4]) {
        for (char c : magic)
            if (get<char>() != c) throw FormatError("bad magic");
    }
    Matrix matrix_row_major(std::uint64_t rows, std::uint64_t cols) {
        if (rows * cols * sizeof(double) > buf_.size() - pos_) throw FormatError("container truncated");
        Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
        for (Index i = 0; i < m.rows(); ++i)
            for (Index j = 0; j < m.cols(); ++j) m(i, j) = get<double>();
        return m;
    }
    void expect_end() const {
        if (pos_ != buf_.size()) throw FormatError("trailing bytes in container");
    }

private:
    std::vector<char> buf_;
    std::size_t pos_ = 0;
};

inline void put_header(Writer& w, const ContainerHeader& h) {
    w.bytes(kDataMagic, 4);
    w.put<std::uint32_t>(kFormatVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(h.kind));
    w.put<std::uint32_t>(h.flags);
    w.put<std::uint64_t>(h.rows);
    w.put<std::uint64_t>(h.cols);
    w.put<std::uint64_t>(h.seed);
    w.put<std::uint64_t>(h.roi_count);
    w.put<double>(h.ridge);
    w.put<std::uint64_t>(h.context_size);
}

inline ContainerHeader get_header(Reader& r, ContainerKind expected) {
    r.expect_magic(kDataMagic);
    if (r.get<std::uint32_t>() != kFormatVersion) throw FormatError("unsupported container version");
    ContainerHeader h;
    h.kind = static_cast<ContainerKind>(r.get<std::uint32_t>());
    if (h.kind != expected) throw FormatError("unexpected container kind");
    h.flags = r.get<std::uint32_t>();
    h.rows = r.get<std::uint64_t>();
    h.cols = r.get<std::uint64_t>();
    h.seed = r.get<std::uint64_t>();
    h.roi_count = r.get<std::uint64_t>();
    h.ridge = r.get<double>();
    h.context_size = r.get<std::uint64_t>();
    return h;
}

}  // namespace io

inline std::vector<char> encode_subject(const SubjectModel& s) {
    io::Writer w;
    io::put_header(w, {ContainerKind::subject, 0, static_cast<std::uint64_t>(s.voxels()),
                       static_cast<std::uint64_t>(s.dim()), s.seed, static_cast<std::uint64_t>(s.roi_count), 0.0, 0});
    w.matrix_row_major(s.weights);
    for (Index k = 0; k < s.voxels(); ++k) w.put<double>(s.noise_std(k));
    for (int label : s.roi_labels) w.put<std::int32_t>(label);
    return w.data();
}

inline SubjectModel decode_subject(io::Reader r) {
    const auto h = io::get_header(r, ContainerKind::subject);
    SubjectModel s;
    s.seed = h.seed;
    s.roi_count = static_cast<int>(h.roi_count);
    s.weights = r.matrix_row_major(h.rows, h.cols);
    s.noise_std.resize(static_cast<Index>(h.rows));
    for (Index k = 0; k < s.noise_std.size(); ++k) s.noise_std(k) = r.get<double>();
    s.roi_labels.resize(h.rows);
    for (auto& label : s.roi_labels) label = r.get<std::int32_t>();
    r.expect_end();
    return s;
}

inline void save_subject(const std::string& path, const SubjectModel& s) {
    io::Writer w;
    const auto bytes = encode_subject(s);
    w.bytes(bytes.data(), bytes.size());
    w.save(path);
}

inline SubjectModel load_subject(const std::string& path) { return decode_subject(io::Reader::open(path)); }

/// Stimuli are rows of an n x d matrix; `seed` is the sampling seed.
inline void save_stimuli(const std::string& path, const Matrix& stimuli, std::uint64_t seed) {
    io::Writer w;
    io::put_header(w, {ContainerKind::stimuli, 0, static_cast<std::uint64_t>(stimuli.rows()),
                       static_cast<std::uint64_t>(stimuli.cols()), seed, 0, 0.0, 0});
    w.matrix_row_major(stimuli);
    w.save(path);
}

inline Matrix load_stimuli(const std::string& path) {
    auto r = io::Reader::open(path);
    const auto h = io::get_header(r, ContainerKind::stimuli);
    Matrix m = r.matrix_row_major(h.rows, h.cols);
    r.expect_end();
    return m;
}

inline void save_responses(const std::string& path, const ResponseMatrix& m, std::uint64_t seed,
                           std::uint64_t roi_count) {
    io::Writer w;
    io::put_header(w, {ContainerKind::responses, m.is_zscored ? 1u : 0u, static_cast<std::uint64_t>(m.values.rows()),
                       static_cast<std::uint64_t>(m.values.cols()), seed, roi_count, 0.0, 0});
    w.matrix_row_major(m.values);
    w.save(path);
}

inline ResponseMatrix load_responses(const std::string& path) {
    auto r = io::Reader::open(path);
    const auto h = io::get_header(r, ContainerKind::responses);
    ResponseMatrix m;
    m.is_zscored = (h.flags & 1u) != 0;
    m.values = r.matrix_row_major(h.rows, h.cols);
    r.expect_end();
    return m;
}

inline void save_estimated_weights(const std::string& path, const EstimatedWeights& e) {
    io::Writer w;
    io::put_header(w, {ContainerKind::estimated_weights, 0, static_cast<std::uint64_t>(e.values.rows()),
                       static_cast<std::uint64_t>(e.values.cols()), e.seed, e.roi_count, e.ridge, e.context_size});
    w.matrix_row_major(e.values);
    w.save(path);
}

inline EstimatedWeights load_estimated_weights(const std::string& path) {
    auto r = io::Reader::open(path);
    const auto h = io::get_header(r, ContainerKind::estimated_weights);
    EstimatedWeights e;
    e.seed = h.seed;
    e.roi_count = h.roi_count;
    e.ridge = h.ridge;
    e.context_size = h.context_size;
    e.values = r.matrix_row_major(h.rows, h.cols);
    r.expect_end();
    return e;
}

inline std::vector<char> encode_checkpoint(const Checkpoint& ck) {
    const DecoderConfig& c = ck.params.config;
    io::Writer w;
    w.bytes(io::kCheckpointMagic, 4);
    w.put<std::uint32_t>(io::kFormatVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.stage));
    w.put<std::uint32_t>(0);
    for (Index v : {c.d, c.width, c.layers, c.heads, c.registers, c.ffn_hidden})
        w.put<std::uint64_t>(static_cast<std::uint64_t>(v));
    w.put<double>(c.dropout);
    w.put<std::uint64_t>(ck.config_hash);
    std::uint64_t count = 0;
    ck.params.visit([&](std::string_view, const Matrix&, bool) { ++count; });
    w.put<std::uint64_t>(count);
    ck.params.visit([&](std::string_view, const Matrix& m, bool) {
        w.put<std::uint64_t>(static_cast<std::uint64_t>(m.rows()));
        w.put<std::uint64_t>(static_cast<std::uint64_t>(m.cols()));
        w.bytes(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
    });
    return w.data();
}

/// Reads only the fixed header of a checkpoint (config, stage, hash).
struct CheckpointHeader {
    DecoderConfig config;
    CheckpointStage stage = CheckpointStage::init;
    std::uint64_t config_hash = 0;
};

inline CheckpointHeader read_checkpoint_header(io::Reader& r) {
    r.expect_magic(io::kCheckpointMagic);
    if (r.get<std::uint32_t>() != io::kFormatVersion) throw FormatError("unsupported checkpoint version");
    CheckpointHeader h;
    h.stage = static_cast<CheckpointStage>(r.get<std::uint32_t>());
    r.get<std::uint32_t>();
    h.config.d = static_cast<Index>(r.get<std::uint64_t>());
    h.config.width = static_cast<Index>(r.get<std::uint64_t>());
    h.config.layers = static_cast<Index>(r.get<std::uint64_t>());
    h.config.heads = static_cast<Index>(r.get<std::uint64_t>());
    h.config.registers = static_cast<Index>(r.get<std::uint64_t>());
    h.config.ffn_hidden = static_cast<Index>(r.get<std::uint64_t>());
    h.config.dropout = r.get<double>();
    h.config_hash = r.get<std::uint64_t>();
    return h;
}

inline Checkpoint decode_checkpoint(io::Reader r) {
    const CheckpointHeader h = read_checkpoint_header(r);
    try {
        h.config.validate();
    } catch (const ParameterError& e) {
        throw FormatError(std::string("checkpoint header invalid: ") + e.what());
    }
    Checkpoint ck;
    ck.stage = h.stage;
    ck.config_hash = h.config_hash;
    ck.params = init_params<double>(0, h.config);
    const auto count = r.get<std::uint64_t>();
    std::uint64_t expected = 0;
    ck.params.visit([&](std::string_view, const Matrix&, bool) { ++expected; });
    if (count != expected) throw FormatError("checkpoint tensor count does not match its header");
    ck.params.visit([&](std::string_view name, Matrix& m, bool) {
        const auto rows = r.get<std::uint64_t>();
        const auto cols = r.get<std::uint64_t>();
        if (rows != static_cast<std::uint64_t>(m.rows()) || cols != static_cast<std::uint64_t>(m.cols()))
            throw FormatError("checkpoint tensor " + std::string(name) + " has unexpected shape");
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = r.get<double>();
    });
    r.expect_end();
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    io::Writer w;
    const auto bytes = encode_checkpoint(ck);
    w.bytes(bytes.data(), bytes.size());
    w.save(path);
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(io::Reader::open(path)); }

inline CheckpointHeader load_checkpoint_header(const std::string& path) {
    auto r = io::Reader::open(path);
    return read_checkpoint_header(r);
}

}  // namespace icd

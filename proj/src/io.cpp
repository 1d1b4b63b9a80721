#include "dice/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <string>

namespace dice {

namespace {

constexpr char kCheckpointMagic[8] = {'D', 'I', 'C', 'E', 'C', 'K', 'P', 'T'};
constexpr char kDatasetMagic[8] = {'D', 'I', 'C', 'E', 'D', 'A', 'T', 'A'};
constexpr std::uint32_t kVersion = 1;

class Writer {
public:
    explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
        if (!out_)
            throw FormatError("cannot open " + path.string() + " for writing");
    }

    void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

    template <typename T>
    void le(T v) {
        std::array<unsigned char, sizeof(T)> b;
        std::memcpy(b.data(), &v, sizeof(T));
        if constexpr (std::endian::native == std::endian::big)
            std::reverse(b.begin(), b.end());
        bytes(b.data(), b.size());
    }

    void u64(std::uint64_t v) { le(v); }
    void f64(double v) { le(v); }
    void str(const std::string& s) {
        u64(s.size());
        bytes(s.data(), s.size());
    }
    void tensor(const Tensor& t) {
        for (double v : t.values())
            f64(v);
    }
    void finish(const std::filesystem::path& path) {
        out_.flush();
        if (!out_)
            throw FormatError("write failed for " + path.string());
    }

private:
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
        if (!in_)
            throw FormatError("cannot open " + path.string());
    }

    void bytes(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw FormatError("truncated file " + path_.string());
    }

    template <typename T>
    T le() {
        std::array<unsigned char, sizeof(T)> b;
        bytes(b.data(), b.size());
        if constexpr (std::endian::native == std::endian::big)
            std::reverse(b.begin(), b.end());
        T v;
        std::memcpy(&v, b.data(), sizeof(T));
        return v;
    }

    std::uint64_t u64() { return le<std::uint64_t>(); }
    double f64() { return le<double>(); }
    std::string str() {
        auto n = u64();
        if (n > (1u << 20))
            throw FormatError("implausible string length in " + path_.string());
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    Tensor tensor(std::size_t rows, std::size_t cols) {
        Tensor t(rows, cols);
        for (double& v : t.values())
            v = f64();
        return t;
    }
    void magic(const char (&expected)[8]) {
        char m[8];
        bytes(m, 8);
        if (std::memcmp(m, expected, 8) != 0)
            throw FormatError(path_.string() + " has the wrong file type");
        auto version = le<std::uint32_t>();
        if (version != kVersion)
            throw FormatError(path_.string() + ": unsupported version " + std::to_string(version));
    }
    void expect_end() {
        if (in_.peek() != std::char_traits<char>::eof())
            throw FormatError("trailing bytes in " + path_.string());
    }

private:
    std::ifstream in_;
    std::filesystem::path path_;
};

void write_set(Writer& w, const ParamSet& ps) {
    w.u64(ps.size());
    for (const auto& p : ps) {
        w.str(p.name);
        w.u64(p.value.rows());
        w.u64(p.value.cols());
        w.tensor(p.value);
        w.tensor(p.velocity);
        w.tensor(p.sq_avg);
    }
}

void read_set(Reader& r, ParamSet& ps) {
    auto n = r.u64();
    if (n != ps.size())
        throw FormatError("checkpoint parameter count does not match the model");
    for (auto& p : ps) {
        auto name = r.str();
        auto rows = r.u64(), cols = r.u64();
        if (name != p.name || rows != p.value.rows() || cols != p.value.cols())
            throw FormatError("checkpoint entry '" + name + "' does not match parameter '" + p.name + "'");
        p.value = r.tensor(rows, cols);
        p.velocity = r.tensor(rows, cols);
        p.sq_avg = r.tensor(rows, cols);
    }
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const EnsembleModel& model) {
    Writer w(path);
    w.bytes(kCheckpointMagic, 8);
    w.le(kVersion);
    write_set(w, model.member_params());
    write_set(w, model.disc_params());
    w.finish(path);
}

void load_checkpoint(const std::filesystem::path& path, EnsembleModel& model) {
    Reader r(path);
    r.magic(kCheckpointMagic);
    ParamSet members = model.member_params(), disc = model.disc_params();
    read_set(r, members);
    read_set(r, disc);
    r.expect_end();
    model.member_params() = std::move(members);
    model.disc_params() = std::move(disc);
}

void save_dataset(const std::filesystem::path& path, const DatasetFile& file) {
    const auto& d = file.data;
    if (d.inputs.rows() != d.labels.size())
        throw std::invalid_argument("one label per input row required");
    if (!file.nuisance_mask.empty() && file.nuisance_mask.size() != d.inputs.cols())
        throw std::invalid_argument("nuisance mask must cover every input coordinate");
    Writer w(path);
    w.bytes(kDatasetMagic, 8);
    w.le(kVersion);
    w.u64(d.inputs.cols());
    w.u64(file.classes);
    w.u64(d.size());
    w.u64(file.seed);
    for (std::size_t j = 0; j < d.inputs.cols(); ++j)
        w.le<std::uint8_t>(!file.nuisance_mask.empty() && file.nuisance_mask[j] ? 1 : 0);
    w.tensor(d.inputs);
    for (int y : d.labels)
        w.le<std::int32_t>(y);
    w.finish(path);
}

DatasetFile load_dataset(const std::filesystem::path& path) {
    Reader r(path);
    r.magic(kDatasetMagic);
    DatasetFile f;
    auto dims = r.u64();
    f.classes = r.u64();
    auto count = r.u64();
    f.seed = r.u64();
    if (dims == 0 || dims > (1u << 20) || count > (1ull << 32))
        throw FormatError("implausible dataset header in " + path.string());
    for (std::size_t j = 0; j < dims; ++j)
        f.nuisance_mask.push_back(r.le<std::uint8_t>() != 0);
    f.data.inputs = r.tensor(count, dims);
    for (std::size_t n = 0; n < count; ++n) {
        int y = r.le<std::int32_t>();
        if (y < 0 || static_cast<std::size_t>(y) >= f.classes)
            throw FormatError("label out of range in " + path.string());
        f.data.labels.push_back(y);
    }
    r.expect_end();
    return f;
}

} // namespace dice

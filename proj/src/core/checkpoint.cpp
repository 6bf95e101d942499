// Checkpoint layout, all integers and floats little-endian:
//
//   magic "BDLMODEL" | u32 version
//   config: u64 x 8 (embed, hidden, max_decode, epochs, batch, in_cap, out_cap, max_input)
//           f64 learning_rate | f64 grad_clip | u64 seed
//   vocabularies: input then output, each u64 count + (u32 length, bytes) per regular token
//   u64 tensor count, then per tensor: u32 name length, name, u64 rows, u64 cols,
//   rows*cols f64 in row-major order

#include "core/error.hpp"
#include "core/model.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace bdl {

namespace {

constexpr std::array<char, 8> magic = {'B', 'D', 'L', 'M', 'O', 'D', 'E', 'L'};
constexpr std::uint32_t format_version = 1;

class Writer {
public:
    explicit Writer(std::ostream& out) : out_(out) {}

    void u32(std::uint32_t v) { le(v, 4); }
    void u64(std::uint64_t v) { le(v, 8); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        out_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }

private:
    void le(std::uint64_t v, int bytes) {
        char buf[8];
        for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
        out_.write(buf, bytes);
    }
    std::ostream& out_;
};

class Reader {
public:
    Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

    std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
    std::uint64_t u64() { return le(8); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const auto n = u32();
        if (n > (1u << 20)) corrupt("string length");
        std::string s(n, '\0');
        read(s.data(), n);
        return s;
    }
    void read(char* dst, std::size_t n) {
        in_.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) corrupt("unexpected end of file");
    }
    [[noreturn]] void corrupt(const std::string& what) const {
        fail(ErrorCode::parse, "corrupt checkpoint " + path_ + ": " + what);
    }

private:
    std::uint64_t le(int bytes) {
        unsigned char buf[8];
        read(reinterpret_cast<char*>(buf), static_cast<std::size_t>(bytes));
        std::uint64_t v = 0;
        for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
        return v;
    }
    std::istream& in_;
    std::string path_;
};

void write_vocab(Writer& w, const Vocabulary& v) {
    const auto tokens = v.regular_tokens();
    w.u64(tokens.size());
    for (const auto& t : tokens) w.str(t);
}

Vocabulary read_vocab(Reader& r) {
    const auto n = r.u64();
    if (n > (1u << 24)) r.corrupt("vocabulary size");
    std::vector<std::string> tokens;
    tokens.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) tokens.push_back(r.str());
    return Vocabulary::from_tokens(tokens);
}

} // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot write checkpoint " + path.string());
    Writer w(out);
    out.write(magic.data(), magic.size());
    w.u32(format_version);

    const ModelConfig& c = model.config();
    for (std::size_t v : {c.embed_dim, c.hidden_dim, c.max_decode_len, c.epochs, c.batch_size, c.input_vocab_cap,
                          c.output_vocab_cap, c.max_input_len})
        w.u64(v);
    w.f64(c.learning_rate);
    w.f64(c.grad_clip);
    w.u64(c.seed);

    write_vocab(w, model.vocabs().input);
    write_vocab(w, model.vocabs().output);

    const auto& params = model.params();
    w.u64(params.tensors().size());
    for (const auto& t : params.tensors()) {
        w.str(t.name);
        w.u64(t.rows);
        w.u64(t.cols);
        for (std::size_t i = 0; i < t.size(); ++i) w.f64(params.data()[t.offset + i]);
    }
    if (!out) fail(ErrorCode::io, "write failed for checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::io, "cannot open checkpoint " + path.string());
    Reader r(in, path.string());

    std::array<char, 8> head{};
    r.read(head.data(), head.size());
    if (head != magic) r.corrupt("bad magic");
    const auto version = r.u32();
    if (version != format_version) r.corrupt("unsupported version " + std::to_string(version));

    ModelConfig c;
    for (std::size_t* v : {&c.embed_dim, &c.hidden_dim, &c.max_decode_len, &c.epochs, &c.batch_size,
                           &c.input_vocab_cap, &c.output_vocab_cap, &c.max_input_len})
        *v = r.u64();
    c.learning_rate = r.f64();
    c.grad_clip = r.f64();
    c.seed = r.u64();

    Vocabularies vocabs;
    vocabs.input = read_vocab(r);
    vocabs.output = read_vocab(r);

    Model model(c, std::move(vocabs));
    auto& params = model.params();
    const auto count = r.u64();
    if (count != params.tensors().size()) r.corrupt("tensor count mismatch");
    for (const auto& t : params.tensors()) {
        const auto name = r.str();
        const auto rows = r.u64();
        const auto cols = r.u64();
        if (name != t.name || rows != t.rows || cols != t.cols) r.corrupt("unexpected tensor '" + name + "'");
        for (std::size_t i = 0; i < t.size(); ++i) params.data()[t.offset + i] = r.f64();
    }
    return model;
}

} // namespace bdl

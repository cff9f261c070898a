#include "duoattn/model.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "duoattn/rng.hpp"

namespace duoattn {

namespace {

constexpr std::array<char, 4> kMagic = {'D', 'U', 'O', 'W'};
constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const std::filesystem::path& path) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("truncated checkpoint " + path.string());
    return v;
}

void fill_normal(std::vector<double>& xs, Rng& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& x : xs) x = dist(rng);
}

}  // namespace

void ModelSpec::validate() const {
    if (n_layers == 0 || n_query_heads == 0 || n_kv_heads == 0 || head_dim == 0 || hidden_dim == 0 || ffn_dim == 0 ||
        vocab_size == 0 || max_seq_len == 0) {
        throw ConfigError("all model counts must be >= 1");
    }
    if (!(rope_theta > 0.0) || !std::isfinite(rope_theta)) throw ConfigError("rope_theta must be positive");
    if (n_query_heads % n_kv_heads != 0) {
        throw ConfigError("n_query_heads (" + std::to_string(n_query_heads) + ") is not a multiple of n_kv_heads (" +
                          std::to_string(n_kv_heads) + ")");
    }
    if (hidden_dim != n_query_heads * head_dim) {
        throw ConfigError("hidden_dim (" + std::to_string(hidden_dim) + ") != n_query_heads * head_dim (" +
                          std::to_string(n_query_heads * head_dim) + ")");
    }
    if (head_dim % 2 != 0) throw ConfigError("head_dim must be even for rotary embeddings");
}

ModelWeights ModelWeights::zeros(const ModelSpec& spec) {
    spec.validate();
    const auto d = spec.hidden_dim;
    ModelWeights w;
    w.spec = spec;
    w.embedding = MatrixD(spec.vocab_size, d);
    w.layers.resize(spec.n_layers);
    for (auto& l : w.layers) {
        l.wq = MatrixD(d, spec.q_width());
        l.wk = MatrixD(d, spec.kv_width());
        l.wv = MatrixD(d, spec.kv_width());
        l.wo = MatrixD(spec.q_width(), d);
        l.attn_norm.assign(d, 1.0);
        l.ffn_norm.assign(d, 1.0);
        l.w_gate = MatrixD(d, spec.ffn_dim);
        l.w_up = MatrixD(d, spec.ffn_dim);
        l.w_down = MatrixD(spec.ffn_dim, d);
    }
    w.final_norm.assign(d, 1.0);
    w.unembedding = MatrixD(d, spec.vocab_size);
    return w;
}

void ModelWeights::validate() const {
    spec.validate();
    const auto d = spec.hidden_dim;
    require_shape(embedding.rows(), embedding.cols(), spec.vocab_size, d, "embedding");
    if (layers.size() != spec.n_layers) throw ShapeError("layer count does not match spec");
    for (const auto& l : layers) {
        require_shape(l.wq.rows(), l.wq.cols(), d, spec.q_width(), "wq");
        require_shape(l.wk.rows(), l.wk.cols(), d, spec.kv_width(), "wk");
        require_shape(l.wv.rows(), l.wv.cols(), d, spec.kv_width(), "wv");
        require_shape(l.wo.rows(), l.wo.cols(), spec.q_width(), d, "wo");
        require_shape(l.w_gate.rows(), l.w_gate.cols(), d, spec.ffn_dim, "w_gate");
        require_shape(l.w_up.rows(), l.w_up.cols(), d, spec.ffn_dim, "w_up");
        require_shape(l.w_down.rows(), l.w_down.cols(), spec.ffn_dim, d, "w_down");
        if (l.attn_norm.size() != d || l.ffn_norm.size() != d) throw ShapeError("norm gain length != hidden_dim");
    }
    if (final_norm.size() != d) throw ShapeError("final norm gain length != hidden_dim");
    require_shape(unembedding.rows(), unembedding.cols(), d, spec.vocab_size, "unembedding");
    bool finite = true;
    for_each_tensor([&](const std::vector<double>& t) { finite = finite && all_finite<double>(t); });
    if (!finite) throw InvariantError("model weights contain non-finite values");
}

ModelWeights ModelWeights::gradient_buffer(const ModelSpec& spec) {
    ModelWeights w = zeros(spec);
    w.for_each_tensor([](std::vector<double>& t) { std::fill(t.begin(), t.end(), 0.0); });
    return w;
}

std::size_t ModelWeights::parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](const std::vector<double>& t) { n += t.size(); });
    return n;
}

ModelWeights init_model(const ModelSpec& spec, std::uint64_t seed) {
    ModelWeights w = ModelWeights::zeros(spec);
    Rng rng = make_rng(seed, "init_model");
    const double d = static_cast<double>(spec.hidden_dim);
    fill_normal(w.embedding.storage(), rng, 1.0);
    for (auto& l : w.layers) {
        fill_normal(l.wq.storage(), rng, 1.0 / std::sqrt(d));
        fill_normal(l.wk.storage(), rng, 1.0 / std::sqrt(d));
        fill_normal(l.wv.storage(), rng, 1.0 / std::sqrt(d));
        fill_normal(l.wo.storage(), rng, 1.0 / std::sqrt(static_cast<double>(spec.q_width() * 2 * spec.n_layers)));
        fill_normal(l.w_gate.storage(), rng, 1.0 / std::sqrt(d));
        fill_normal(l.w_up.storage(), rng, 1.0 / std::sqrt(d));
        fill_normal(l.w_down.storage(), rng,
                    1.0 / std::sqrt(static_cast<double>(spec.ffn_dim * 2 * spec.n_layers)));
    }
    fill_normal(w.unembedding.storage(), rng, 1.0 / std::sqrt(d));
    return w;
}

std::uint64_t checksum(const ModelWeights& w) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    w.for_each_tensor([&](const std::vector<double>& t) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
        for (std::size_t i = 0; i < t.size() * sizeof(double); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    });
    return h;
}

void save_checkpoint(const ModelWeights& w, const std::filesystem::path& path) {
    w.validate();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os.write(kMagic.data(), kMagic.size());
    write_pod<std::uint32_t>(os, kCheckpointVersion);
    const auto& s = w.spec;
    for (std::size_t v : {s.n_layers, s.n_query_heads, s.n_kv_heads, s.head_dim, s.hidden_dim, s.ffn_dim, s.vocab_size,
                          s.max_seq_len}) {
        write_pod<std::uint64_t>(os, v);
    }
    write_pod<double>(os, s.rope_theta);
    w.for_each_tensor([&](const std::vector<double>& t) {
        os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    });
    if (!os) throw IoError("failed writing " + path.string());
}

ModelWeights load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    std::array<char, 4> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kMagic) throw IoError(path.string() + " is not a DUOW checkpoint");
    const auto version = read_pod<std::uint32_t>(is, path);
    if (version != kCheckpointVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
    }
    ModelSpec s;
    s.n_layers = read_pod<std::uint64_t>(is, path);
    s.n_query_heads = read_pod<std::uint64_t>(is, path);
    s.n_kv_heads = read_pod<std::uint64_t>(is, path);
    s.head_dim = read_pod<std::uint64_t>(is, path);
    s.hidden_dim = read_pod<std::uint64_t>(is, path);
    s.ffn_dim = read_pod<std::uint64_t>(is, path);
    s.vocab_size = read_pod<std::uint64_t>(is, path);
    s.max_seq_len = read_pod<std::uint64_t>(is, path);
    s.rope_theta = read_pod<double>(is, path);
    ModelWeights w = ModelWeights::zeros(s);
    w.for_each_tensor([&](std::vector<double>& t) {
        is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!is) throw IoError("truncated checkpoint " + path.string());
    });
    if (is.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes in checkpoint " + path.string());
    w.validate();
    return w;
}

}  // namespace duoattn

#include "duoattn/gates.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "duoattn/textio.hpp"

namespace duoattn {

double GateMatrix::sum() const noexcept { return std::accumulate(values_.begin(), values_.end(), 0.0); }

void GateMatrix::validate() const {
    for (std::size_t l = 0; l < n_layers_; ++l)
        for (std::size_t h = 0; h < n_kv_heads_; ++h) {
            const double a = (*this)(l, h);
            if (!std::isfinite(a) || a < 0.0 || a > 1.0) {
                throw InvariantError("gate at layer " + std::to_string(l) + " head " + std::to_string(h) + " is " +
                                     format_real(a) + ", outside [0, 1]");
            }
        }
}

void GateMatrix::require_matches(const ModelSpec& spec) const {
    if (n_layers_ != spec.n_layers || n_kv_heads_ != spec.n_kv_heads) {
        throw ShapeError("gates are " + std::to_string(n_layers_) + "x" + std::to_string(n_kv_heads_) +
                         ", model needs " + std::to_string(spec.n_layers) + "x" + std::to_string(spec.n_kv_heads));
    }
}

void save_gates(const GateMatrix& gates, const std::filesystem::path& path) {
    std::ostringstream os;
    os << "duoattn-gates v1 L=" << gates.n_layers() << " H=" << gates.n_kv_heads() << "\n";
    for (std::size_t l = 0; l < gates.n_layers(); ++l) {
        for (std::size_t h = 0; h < gates.n_kv_heads(); ++h) {
            if (h != 0) os << '\t';
            os << format_real(gates(l, h));
        }
        os << "\n";
    }
    write_text_file(path, os.str());
}

GateMatrix load_gates(const std::filesystem::path& path) {
    const auto lines = read_text_lines(path);
    const std::string src = path.string();
    if (lines.empty()) throw ParseError(src, 1, "empty gate file");
    const auto header = parse_header(lines[0], "duoattn-gates", src);
    const std::size_t L = header_count(header, "L", src);
    const std::size_t H = header_count(header, "H", src);

    std::size_t body = lines.size() - 1;
    while (body > 0 && lines[body].empty()) --body;  // tolerate trailing blank lines
    if (body != L) {
        throw ParseError(src, lines.size(), "header declares " + std::to_string(L) + " layer rows, found " +
                                                std::to_string(body));
    }
    GateMatrix g(L, H, 0.0);
    for (std::size_t l = 0; l < L; ++l) {
        const auto fields = split(lines[l + 1], '\t');
        if (fields.size() != H) {
            throw ParseError(src, l + 2, "expected " + std::to_string(H) + " values, found " +
                                             std::to_string(fields.size()));
        }
        for (std::size_t h = 0; h < H; ++h) g(l, h) = parse_real(fields[h], src, l + 2);
    }
    g.validate();
    return g;
}

}  // namespace duoattn

#include "duoattn/deployment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "duoattn/errors.hpp"
#include "duoattn/kernels.hpp"
#include "duoattn/textio.hpp"

namespace duoattn {

namespace kn = kernels;

HeadPolicy::HeadPolicy(std::size_t layers, std::size_t kv_heads, bool all_retrieval)
    : n_layers(layers), n_kv_heads(kv_heads), retrieval(layers * kv_heads, all_retrieval ? 1 : 0),
      tau(all_retrieval ? -1.0 : 1.0), retrieval_ratio(all_retrieval ? 1.0 : 0.0) {}

std::size_t HeadPolicy::retrieval_count() const {
    return static_cast<std::size_t>(std::count(retrieval.begin(), retrieval.end(), std::uint8_t{1}));
}

std::size_t HeadPolicy::retrieval_count(std::size_t layer) const {
    std::size_t n = 0;
    for (std::size_t h = 0; h < n_kv_heads; ++h) n += is_retrieval(layer, h) ? 1 : 0;
    return n;
}

void HeadPolicy::require_matches(const ModelSpec& spec) const {
    if (n_layers != spec.n_layers || n_kv_heads != spec.n_kv_heads || retrieval.size() != n_layers * n_kv_heads) {
        throw ConfigError("policy is " + std::to_string(n_layers) + "x" + std::to_string(n_kv_heads) +
                          ", model needs " + std::to_string(spec.n_layers) + "x" + std::to_string(spec.n_kv_heads));
    }
}

HeadPolicy binarize(const GateMatrix& gates, double retrieval_ratio) {
    if (!(retrieval_ratio >= 0.0 && retrieval_ratio <= 1.0)) {
        throw ConfigError("retrieval ratio must lie in [0, 1], got " + format_real(retrieval_ratio));
    }
    gates.validate();
    const std::size_t N = gates.size();
    HeadPolicy p(gates.n_layers(), gates.n_kv_heads(), false);
    p.retrieval_ratio = retrieval_ratio;
    if (N == 0) return p;

    // The small slack keeps products like 0.3 * 10 from rounding up a head.
    const auto want = static_cast<std::size_t>(std::ceil(retrieval_ratio * static_cast<double>(N) - 1e-9));
    std::vector<double> sorted = gates.values();
    std::sort(sorted.begin(), sorted.end());
    if (want == N) {
        p.tau = -1.0;
    } else {
        p.tau = sorted[N - want - 1];
    }

    std::size_t above = 0;
    for (std::size_t i = 0; i < N; ++i)
        if (gates.values()[i] > p.tau) {
            p.retrieval[i] = 1;
            ++above;
        }
    // Ties at tau: the earliest heads stay streaming, the rest fill the count.
    std::size_t ties = 0;
    for (std::size_t i = 0; i < N; ++i) ties += gates.values()[i] == p.tau ? 1 : 0;
    std::size_t drop = above + ties > want ? above + ties - want : 0;
    for (std::size_t i = 0; i < N && above < want; ++i) {
        if (gates.values()[i] != p.tau) continue;
        if (drop > 0) {
            --drop;
            continue;
        }
        p.retrieval[i] = 1;
        ++above;
    }
    return p;
}

void save_policy(const HeadPolicy& policy, const std::filesystem::path& path) {
    std::ostringstream os;
    os << "duoattn-policy v1 L=" << policy.n_layers << " H=" << policy.n_kv_heads << " tau=" << format_real(policy.tau)
       << "\n";
    for (std::size_t l = 0; l < policy.n_layers; ++l) {
        for (std::size_t h = 0; h < policy.n_kv_heads; ++h) os << (policy.is_retrieval(l, h) ? 'R' : 'S');
        os << "\n";
    }
    write_text_file(path, os.str());
}

HeadPolicy load_policy(const std::filesystem::path& path) {
    const auto lines = read_text_lines(path);
    const std::string src = path.string();
    if (lines.empty()) throw ParseError(src, 1, "empty policy file");
    const auto header = parse_header(lines[0], "duoattn-policy", src);
    const std::size_t L = header_count(header, "L", src);
    const std::size_t H = header_count(header, "H", src);
    HeadPolicy p(L, H, false);
    p.tau = header_real(header, "tau", src);

    std::size_t body = lines.size() - 1;
    while (body > 0 && lines[body].empty()) --body;
    if (body != L) {
        throw ParseError(src, lines.size(), "header declares " + std::to_string(L) + " layer rows, found " +
                                                std::to_string(body));
    }
    for (std::size_t l = 0; l < L; ++l) {
        const std::string& row = lines[l + 1];
        if (row.size() != H) {
            throw ParseError(src, l + 2, "expected " + std::to_string(H) + " head flags, found " +
                                             std::to_string(row.size()));
        }
        for (std::size_t h = 0; h < H; ++h) {
            if (row[h] != 'R' && row[h] != 'S') {
                throw ParseError(src, l + 2, std::string("head flag must be R or S, got '") + row[h] + "'");
            }
            p.set(l, h, row[h] == 'R');
        }
    }
    p.retrieval_ratio = p.size() == 0 ? 0.0 : static_cast<double>(p.retrieval_count()) / static_cast<double>(p.size());
    return p;
}

ReorderResult reorder_heads(const ModelWeights& w, const HeadPolicy& policy) {
    const ModelSpec& s = w.spec;
    policy.require_matches(s);
    const std::size_t hd = s.head_dim, G = s.group_size();
    ReorderResult r{w, policy, {}};
    for (std::size_t l = 0; l < s.n_layers; ++l) {
        std::vector<std::size_t> order(s.n_kv_heads);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_partition(order.begin(), order.end(), [&](std::size_t h) { return policy.is_retrieval(l, h); });
        r.kv_order.push_back(order);
        if (std::is_sorted(order.begin(), order.end())) continue;

        const LayerWeights& src = w.layers[l];
        LayerWeights& dst = r.weights.layers[l];
        for (std::size_t nh = 0; nh < s.n_kv_heads; ++nh) {
            const std::size_t oh = order[nh];
            r.policy.set(l, nh, policy.is_retrieval(l, oh));
            for (std::size_t i = 0; i < s.hidden_dim; ++i)
                for (std::size_t c = 0; c < hd; ++c) {
                    dst.wk(i, nh * hd + c) = src.wk(i, oh * hd + c);
                    dst.wv(i, nh * hd + c) = src.wv(i, oh * hd + c);
                }
            for (std::size_t m = 0; m < G; ++m) {
                const std::size_t nq = nh * G + m, oq = oh * G + m;
                for (std::size_t i = 0; i < s.hidden_dim; ++i)
                    for (std::size_t c = 0; c < hd; ++c) dst.wq(i, nq * hd + c) = src.wq(i, oq * hd + c);
                for (std::size_t c = 0; c < hd; ++c)
                    for (std::size_t o = 0; o < s.hidden_dim; ++o) dst.wo(nq * hd + c, o) = src.wo(oq * hd + c, o);
            }
        }
    }
    return r;
}

void PrefillConfig::validate(const StreamingConfig& streaming, bool has_streaming_heads) const {
    if (chunk_size == 0) throw ConfigError("prefill chunk size must be at least 1");
    if (strict && has_streaming_heads && chunk_size < streaming.recent_size) {
        throw ConfigError("strict prefill needs chunk size >= recent size (" + std::to_string(chunk_size) + " < " +
                          std::to_string(streaming.recent_size) + ")");
    }
}

std::size_t CacheStats::total_bytes() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.retrieval_bytes + l.streaming_bytes;
    return n;
}

template <class T>
CacheStats BasicDualKVCache<T>::stats() const {
    CacheStats s;
    s.tokens = tokens;
    s.peak_streaming_scores = peak_streaming_scores;
    for (const auto& l : layers) {
        CacheLayerStats c;
        c.retrieval_len = l.retrieval.size();
        c.streaming_len = l.streaming.size();
        c.retrieval_bytes = 2 * c.retrieval_len * l.retrieval.width * sizeof(T);
        c.streaming_bytes = 2 * c.streaming_len * l.streaming.width() * sizeof(T);
        s.layers.push_back(c);
    }
    return s;
}

namespace {

template <class T>
std::vector<T> cast_vec(const std::vector<double>& v) {
    return std::vector<T>(v.begin(), v.end());
}

template <class T>
Token argmax_impl(std::span<const T> logits) {
    if (logits.empty()) throw ContractError("argmax of empty logits");
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[best]) best = i;
    return static_cast<Token>(best);
}

// softmax(q . k_i * scale) weighted sum of v_i over `n` candidate rows.
template <class T>
void attend_rows(const T* q, std::size_t hd, T scale, std::size_t n, const T* const* keys, const T* const* values,
                 std::vector<T>& scores, T* out) {
    scores.resize(std::max(scores.size(), n));
    for (std::size_t i = 0; i < n; ++i) scores[i] = kn::dot(q, keys[i], hd) * scale;
    std::fill(out, out + hd, T{});
    if (!kn::softmax_inplace(scores.data(), n)) throw ContractError("attention row with no visible keys");
    for (std::size_t i = 0; i < n; ++i) kn::axpy(out, scores[i], values[i], hd);
}

template <class T>
void ffn_block(const Matrix<T>& w_gate, const Matrix<T>& w_up, const Matrix<T>& w_down, const std::vector<T>& norm,
               T* x, std::size_t D, std::size_t F, std::vector<T>& b, std::vector<T>& g, std::vector<T>& u,
               std::vector<T>& d) {
    b.resize(D);
    g.resize(F);
    u.resize(F);
    d.resize(D);
    kn::rmsnorm_row(x, norm.data(), D, static_cast<T>(kNormEps), b.data());
    kn::vec_mat(b.data(), w_gate.data(), D, F, g.data());
    kn::vec_mat(b.data(), w_up.data(), D, F, u.data());
    for (std::size_t f = 0; f < F; ++f) g[f] = kn::silu(g[f]) * u[f];
    kn::vec_mat(g.data(), w_down.data(), F, D, d.data());
    for (std::size_t c = 0; c < D; ++c) x[c] += d[c];
}

void check_token_range(const ModelSpec& s, Token t, std::size_t pos) {
    if (t < 0 || static_cast<std::size_t>(t) >= s.vocab_size) {
        throw ContractError("token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(s.vocab_size));
    }
    if (pos >= s.max_seq_len) {
        throw LengthError("position " + std::to_string(pos) + " exceeds max_seq_len " + std::to_string(s.max_seq_len));
    }
}

}  // namespace

template <class T>
Token argmax_token(std::span<const T> logits) {
    return argmax_impl(logits);
}

template <class T>
BasicDuoEngine<T>::BasicDuoEngine(const ModelWeights& w, const HeadPolicy& policy, const StreamingConfig& streaming)
    : spec_(w.spec), policy_(policy), streaming_(streaming) {
    w.validate();
    policy.require_matches(spec_);
    streaming.validate();
    auto r = reorder_heads(w, policy);
    ordered_policy_ = std::move(r.policy);
    kv_order_ = std::move(r.kv_order);
    embedding_ = cast_matrix<T>(r.weights.embedding);
    unembedding_ = cast_matrix<T>(r.weights.unembedding);
    final_norm_ = cast_vec<T>(r.weights.final_norm);
    for (const auto& lw : r.weights.layers) {
        layers_.push_back(Layer{cast_matrix<T>(lw.wq), cast_matrix<T>(lw.wk), cast_matrix<T>(lw.wv),
                                cast_matrix<T>(lw.wo), cast_matrix<T>(lw.w_gate), cast_matrix<T>(lw.w_up),
                                cast_matrix<T>(lw.w_down), cast_vec<T>(lw.attn_norm), cast_vec<T>(lw.ffn_norm)});
    }
    inv_freq_ = kn::rope_inv_freq(spec_.head_dim, spec_.rope_theta);
}

template <class T>
bool BasicDuoEngine<T>::has_streaming_heads() const noexcept {
    return ordered_policy_.retrieval_count() < ordered_policy_.size();
}

template <class T>
typename BasicDuoEngine<T>::Cache BasicDuoEngine<T>::new_cache() const {
    Cache c;
    c.streaming_cfg = streaming_;
    c.head_dim = spec_.head_dim;
    for (std::size_t l = 0; l < spec_.n_layers; ++l) {
        typename Cache::Layer layer;
        layer.n_retrieval = ordered_policy_.retrieval_count(l);
        layer.n_streaming = spec_.n_kv_heads - layer.n_retrieval;
        layer.retrieval.width = layer.n_retrieval * spec_.head_dim;
        layer.streaming = StreamingKV<T>(layer.n_streaming * spec_.head_dim, streaming_);
        c.layers.push_back(std::move(layer));
    }
    return c;
}

template <class T>
void BasicDuoEngine<T>::check_cache(const Cache& cache) const {
    bool ok = cache.layers.size() == spec_.n_layers && cache.head_dim == spec_.head_dim &&
              cache.streaming_cfg == streaming_;
    for (std::size_t l = 0; ok && l < cache.layers.size(); ++l) {
        ok = cache.layers[l].n_retrieval == ordered_policy_.retrieval_count(l) &&
             cache.layers[l].n_streaming + cache.layers[l].n_retrieval == spec_.n_kv_heads;
    }
    if (!ok) throw ConfigError("KV cache does not match the engine's head policy or streaming window");
}

template <class T>
void BasicDuoEngine<T>::check_token(Token t, std::size_t pos) const {
    check_token_range(spec_, t, pos);
}

template <class T>
void BasicDuoEngine<T>::run_chunk(Cache& cache, std::span<const Token> chunk, bool want_logits,
                                  std::vector<T>& logits) const {
    const std::size_t n = chunk.size(), start = cache.tokens;
    const std::size_t D = spec_.hidden_dim, hd = spec_.head_dim, F = spec_.ffn_dim;
    const std::size_t qw = spec_.q_width(), kvw = spec_.kv_width(), G = spec_.group_size();
    const std::size_t pairs = hd / 2;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    for (std::size_t t = 0; t < n; ++t) check_token(chunk[t], start + t);

    std::vector<T> cs(n * pairs), sn(n * pairs);
    for (std::size_t t = 0; t < n; ++t)
        kn::rope_angles(static_cast<double>(start + t), inv_freq_, cs.data() + t * pairs, sn.data() + t * pairs);

    Matrix<T> x(n, D);
    for (std::size_t t = 0; t < n; ++t) {
        const auto e = embedding_.row(static_cast<std::size_t>(chunk[t]));
        std::copy(e.begin(), e.end(), x.row(t).begin());
    }
    std::vector<T> a(D), q(n * qw), k(n * kvw), v(n * kvw), o(n * qw), proj(D), scores;
    std::vector<T> fb, fg, fu, fd;
    std::vector<const T*> kp, vp;

    for (std::size_t l = 0; l < spec_.n_layers; ++l) {
        const Layer& L = layers_[l];
        auto& cl = cache.layers[l];
        const std::size_t nr = cl.n_retrieval;
        const std::size_t rw = nr * hd;
        for (std::size_t t = 0; t < n; ++t) {
            kn::rmsnorm_row(x.row(t).data(), L.attn_norm.data(), D, static_cast<T>(kNormEps), a.data());
            T* qt = q.data() + t * qw;
            T* kt = k.data() + t * kvw;
            kn::vec_mat(a.data(), L.wq.data(), D, qw, qt);
            kn::vec_mat(a.data(), L.wk.data(), D, kvw, kt);
            kn::vec_mat(a.data(), L.wv.data(), D, kvw, v.data() + t * kvw);
            for (std::size_t h = 0; h < spec_.n_query_heads; ++h)
                kn::rope_rotate(qt + h * hd, cs.data() + t * pairs, sn.data() + t * pairs, pairs);
            for (std::size_t h = 0; h < spec_.n_kv_heads; ++h)
                kn::rope_rotate(kt + h * hd, cs.data() + t * pairs, sn.data() + t * pairs, pairs);
            cl.retrieval.append(kt, v.data() + t * kvw, start + t);
        }

        for (std::size_t t = 0; t < n; ++t) {
            const std::size_t pos = start + t;
            for (std::size_t g = 0; g < spec_.n_kv_heads; ++g) {
                kp.clear();
                vp.clear();
                if (g < nr) {
                    for (std::size_t i = 0; i <= pos; ++i) {
                        kp.push_back(cl.retrieval.key(i) + g * hd);
                        vp.push_back(cl.retrieval.value(i) + g * hd);
                    }
                } else {
                    const std::size_t off = (g - nr) * hd;
                    cl.streaming.for_each([&](std::size_t p, const T* kk, const T* vv) {
                        if (streaming_.allows(pos, p)) {
                            kp.push_back(kk + off);
                            vp.push_back(vv + off);
                        }
                    });
                    for (std::size_t j = 0; j <= t; ++j) {
                        if (!streaming_.allows(pos, start + j)) continue;
                        kp.push_back(k.data() + j * kvw + g * hd);
                        vp.push_back(v.data() + j * kvw + g * hd);
                    }
                    cache.peak_streaming_scores = std::max(cache.peak_streaming_scores, kp.size());
                }
                for (std::size_t m = 0; m < G; ++m) {
                    const std::size_t h = g * G + m;
                    attend_rows(q.data() + t * qw + h * hd, hd, scale, kp.size(), kp.data(), vp.data(), scores,
                                o.data() + t * qw + h * hd);
                }
            }
        }
        // Prune: only the sink and the newest `recent` rows of the chunk survive.
        for (std::size_t t = 0; t < n; ++t)
            cl.streaming.append(k.data() + t * kvw + rw, v.data() + t * kvw + rw, start + t);
        for (std::size_t t = 0; t < n; ++t) {
            T* xt = x.row(t).data();
            kn::vec_mat(o.data() + t * qw, L.wo.data(), qw, D, proj.data());
            for (std::size_t c = 0; c < D; ++c) xt[c] += proj[c];
            ffn_block(L.w_gate, L.w_up, L.w_down, L.ffn_norm, xt, D, F, fb, fg, fu, fd);
        }
    }
    cache.tokens += n;

    if (want_logits) {
        std::vector<T> hn(D);
        kn::rmsnorm_row(x.row(n - 1).data(), final_norm_.data(), D, static_cast<T>(kNormEps), hn.data());
        logits.assign(spec_.vocab_size, T{});
        kn::vec_mat(hn.data(), unembedding_.data(), D, spec_.vocab_size, logits.data());
    }
}

template <class T>
std::vector<T> BasicDuoEngine<T>::decode_step(Cache& cache, Token token) const {
    check_cache(cache);
    std::vector<T> logits;
    const Token one[1] = {token};
    run_chunk(cache, one, true, logits);
    return logits;
}

template <class T>
std::vector<T> BasicDuoEngine<T>::prefill(Cache& cache, std::span<const Token> tokens, const PrefillConfig& cfg) const {
    if (tokens.empty()) throw LengthError("prefill prompt is empty");
    cfg.validate(streaming_, has_streaming_heads());
    check_cache(cache);
    std::vector<T> logits;
    for (std::size_t s = 0; s < tokens.size(); s += cfg.chunk_size) {
        const std::size_t len = std::min(cfg.chunk_size, tokens.size() - s);
        run_chunk(cache, tokens.subspan(s, len), s + len == tokens.size(), logits);
    }
    return logits;
}

template <class T>
typename BasicDuoEngine<T>::Cache BasicDuoEngine<T>::chunked_prefill(std::span<const Token> tokens,
                                                                     const PrefillConfig& cfg) const {
    Cache c = new_cache();
    prefill(c, tokens, cfg);
    return c;
}

template <class T>
std::vector<Token> BasicDuoEngine<T>::greedy_generate(std::span<const Token> prompt, std::size_t n_new,
                                                      const PrefillConfig& cfg) const {
    Cache c = new_cache();
    auto logits = prefill(c, prompt, cfg);
    std::vector<Token> out;
    out.reserve(n_new);
    for (std::size_t i = 0; i < n_new; ++i) {
        const Token t = argmax_impl(std::span<const T>(logits));
        out.push_back(t);
        if (i + 1 < n_new) logits = decode_step(c, t);
    }
    return out;
}

template <class T>
HeadCacheView<T> BasicDuoEngine<T>::head_cache(const Cache& cache, std::size_t layer, std::size_t kv_head) const {
    check_cache(cache);
    if (layer >= spec_.n_layers || kv_head >= spec_.n_kv_heads) {
        throw ContractError("no kv head " + std::to_string(kv_head) + " at layer " + std::to_string(layer));
    }
    const auto& order = kv_order_[layer];
    const auto slot = static_cast<std::size_t>(std::find(order.begin(), order.end(), kv_head) - order.begin());
    const auto& cl = cache.layers[layer];
    const std::size_t hd = spec_.head_dim;
    HeadCacheView<T> view;
    view.retrieval = slot < cl.n_retrieval;
    std::vector<T> kb, vb;
    auto take = [&](std::size_t p, const T* kk, const T* vv) {
        view.positions.push_back(p);
        kb.insert(kb.end(), kk, kk + hd);
        vb.insert(vb.end(), vv, vv + hd);
    };
    if (view.retrieval) {
        for (std::size_t i = 0; i < cl.retrieval.size(); ++i)
            take(cl.retrieval.positions[i], cl.retrieval.key(i) + slot * hd, cl.retrieval.value(i) + slot * hd);
    } else {
        const std::size_t off = (slot - cl.n_retrieval) * hd;
        cl.streaming.for_each([&](std::size_t p, const T* kk, const T* vv) { take(p, kk + off, vv + off); });
    }
    view.keys = Matrix<T>(view.positions.size(), hd);
    view.values = Matrix<T>(view.positions.size(), hd);
    std::copy(kb.begin(), kb.end(), view.keys.data());
    std::copy(vb.begin(), vb.end(), view.values.data());
    return view;
}

template <class T>
BasicReferenceDecoder<T>::BasicReferenceDecoder(const ModelWeights& w)
    : spec_(w.spec), k_(w.spec.n_layers), v_(w.spec.n_layers),
      inv_freq_(kn::rope_inv_freq(w.spec.head_dim, w.spec.rope_theta)) {
    w.validate();
    embedding_ = cast_matrix<T>(w.embedding);
    unembedding_ = cast_matrix<T>(w.unembedding);
    final_norm_ = cast_vec<T>(w.final_norm);
    for (const auto& lw : w.layers) {
        layers_.push_back(Layer{cast_matrix<T>(lw.wq), cast_matrix<T>(lw.wk), cast_matrix<T>(lw.wv),
                                cast_matrix<T>(lw.wo), cast_matrix<T>(lw.w_gate), cast_matrix<T>(lw.w_up),
                                cast_matrix<T>(lw.w_down), cast_vec<T>(lw.attn_norm), cast_vec<T>(lw.ffn_norm)});
    }
}

template <class T>
void BasicReferenceDecoder<T>::reset() {
    for (auto& k : k_) k.clear();
    for (auto& v : v_) v.clear();
    pos_ = 0;
}

template <class T>
std::vector<T> BasicReferenceDecoder<T>::step(Token token) {
    const ModelSpec& s = spec_;
    check_token_range(s, token, pos_);
    const std::size_t D = s.hidden_dim, hd = s.head_dim, qw = s.q_width(), kvw = s.kv_width(), pairs = hd / 2;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    std::vector<T> cs(pairs), sn(pairs);
    kn::rope_angles(static_cast<double>(pos_), inv_freq_, cs.data(), sn.data());

    std::vector<T> x(D), a(D), q(qw), k(kvw), v(kvw), o(qw), proj(D), scores, fb, fg, fu, fd;
    const auto e = embedding_.row(static_cast<std::size_t>(token));
    std::copy(e.begin(), e.end(), x.begin());
    std::vector<const T*> kp, vp;
    for (std::size_t l = 0; l < s.n_layers; ++l) {
        const Layer& L = layers_[l];
        kn::rmsnorm_row(x.data(), L.attn_norm.data(), D, static_cast<T>(kNormEps), a.data());
        kn::vec_mat(a.data(), L.wq.data(), D, qw, q.data());
        kn::vec_mat(a.data(), L.wk.data(), D, kvw, k.data());
        kn::vec_mat(a.data(), L.wv.data(), D, kvw, v.data());
        for (std::size_t h = 0; h < s.n_query_heads; ++h) kn::rope_rotate(q.data() + h * hd, cs.data(), sn.data(), pairs);
        for (std::size_t h = 0; h < s.n_kv_heads; ++h) kn::rope_rotate(k.data() + h * hd, cs.data(), sn.data(), pairs);
        k_[l].insert(k_[l].end(), k.begin(), k.end());
        v_[l].insert(v_[l].end(), v.begin(), v.end());
        for (std::size_t h = 0; h < s.n_query_heads; ++h) {
            const std::size_t g = h / s.group_size();
            kp.clear();
            vp.clear();
            for (std::size_t i = 0; i <= pos_; ++i) {
                kp.push_back(k_[l].data() + i * kvw + g * hd);
                vp.push_back(v_[l].data() + i * kvw + g * hd);
            }
            attend_rows(q.data() + h * hd, hd, scale, kp.size(), kp.data(), vp.data(), scores, o.data() + h * hd);
        }
        kn::vec_mat(o.data(), L.wo.data(), qw, D, proj.data());
        for (std::size_t c = 0; c < D; ++c) x[c] += proj[c];
        ffn_block(L.w_gate, L.w_up, L.w_down, L.ffn_norm, x.data(), D, s.ffn_dim, fb, fg, fu, fd);
    }
    ++pos_;
    std::vector<T> hn(D), logits(s.vocab_size);
    kn::rmsnorm_row(x.data(), final_norm_.data(), D, static_cast<T>(kNormEps), hn.data());
    kn::vec_mat(hn.data(), unembedding_.data(), D, s.vocab_size, logits.data());
    return logits;
}

template <class T>
std::vector<Token> BasicReferenceDecoder<T>::greedy_generate(std::span<const Token> prompt, std::size_t n_new) {
    if (prompt.empty()) throw LengthError("prompt is empty");
    reset();
    std::vector<T> logits;
    for (Token t : prompt) logits = step(t);
    std::vector<Token> out;
    for (std::size_t i = 0; i < n_new; ++i) {
        const Token t = argmax_impl(std::span<const T>(logits));
        out.push_back(t);
        if (i + 1 < n_new) logits = step(t);
    }
    return out;
}

template <class T>
Matrix<T> BasicReferenceDecoder<T>::keys(std::size_t layer, std::size_t kv_head) const {
    const std::size_t hd = spec_.head_dim, kvw = spec_.kv_width();
    Matrix<T> m(pos_, hd);
    for (std::size_t i = 0; i < pos_; ++i)
        for (std::size_t c = 0; c < hd; ++c) m(i, c) = k_[layer][i * kvw + kv_head * hd + c];
    return m;
}

template <class T>
Matrix<T> BasicReferenceDecoder<T>::values(std::size_t layer, std::size_t kv_head) const {
    const std::size_t hd = spec_.head_dim, kvw = spec_.kv_width();
    Matrix<T> m(pos_, hd);
    for (std::size_t i = 0; i < pos_; ++i)
        for (std::size_t c = 0; c < hd; ++c) m(i, c) = v_[layer][i * kvw + kv_head * hd + c];
    return m;
}

template struct BasicDualKVCache<float>;
template struct BasicDualKVCache<double>;
template class BasicDuoEngine<float>;
template class BasicDuoEngine<double>;
template class BasicReferenceDecoder<float>;
template class BasicReferenceDecoder<double>;
template Token argmax_token<float>(std::span<const float>);
template Token argmax_token<double>(std::span<const double>);

}  // namespace duoattn

#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "doctest.h"
#include "duoattn/deployment.hpp"
#include "duoattn/errors.hpp"
#include "duoattn/forward.hpp"
#include "duoattn/textio.hpp"
#include "helpers.hpp"
#include "oracle.hpp"

using namespace duoattn;

namespace {

GateMatrix gates_of(std::size_t L, std::size_t H, std::vector<double> v) {
    GateMatrix g(L, H);
    g.values() = std::move(v);
    return g;
}

GateMatrix policy_gates(const HeadPolicy& p) {
    GateMatrix g(p.n_layers, p.n_kv_heads, 0.0);
    for (std::size_t l = 0; l < p.n_layers; ++l)
        for (std::size_t h = 0; h < p.n_kv_heads; ++h) g(l, h) = p.is_retrieval(l, h) ? 1.0 : 0.0;
    return g;
}

// Positions a streaming cache must hold after n tokens.
std::vector<std::size_t> expected_positions(std::size_t n, const StreamingConfig& c) {
    std::set<std::size_t> s;
    for (std::size_t p = 0; p < std::min(c.sink_size, n); ++p) s.insert(p);
    for (std::size_t p = n > c.recent_size ? n - c.recent_size : 0; p < n; ++p) s.insert(p);
    return {s.begin(), s.end()};
}

template <class T>
double rel_diff(const std::vector<T>& a, const std::vector<T>& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num = std::max(num, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
        den = std::max(den, std::abs(static_cast<double>(a[i])));
    }
    return num / std::max(den, 1e-300);
}

// Largest relative gap between an engine head cache and the dense tape rows.
double cache_vs_tape(const HeadCacheView<double>& view, const LayerTape& lt, std::size_t kv_head, std::size_t hd) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < view.positions.size(); ++i) {
        const std::size_t p = view.positions[i];
        for (std::size_t c = 0; c < hd; ++c) {
            num = std::max(num, std::abs(view.keys(i, c) - lt.k(p, kv_head * hd + c)));
            num = std::max(num, std::abs(view.values(i, c) - lt.v(p, kv_head * hd + c)));
            den = std::max({den, std::abs(lt.k(p, kv_head * hd + c)), std::abs(lt.v(p, kv_head * hd + c))});
        }
    }
    return num / std::max(den, 1e-300);
}

HeadPolicy mixed_policy(const ModelSpec& s) {
    HeadPolicy p = HeadPolicy::uniform(s, false);
    // streaming first in layer 0 so reordering is exercised
    for (std::size_t l = 0; l < s.n_layers; ++l) p.set(l, (l + 1) % s.n_kv_heads, true);
    return p;
}

}  // namespace

TEST_CASE("binarize") {
    SUBCASE("quantile cut") {
        const auto p = binarize(gates_of(1, 4, {0.9, 0.1, 0.5, 0.3}), 0.25);
        CHECK(p.retrieval == std::vector<std::uint8_t>{1, 0, 0, 0});
        CHECK(p.tau == 0.5);
        CHECK(p.retrieval_ratio == 0.25);
    }
    SUBCASE("extremes") {
        const auto g = gates_of(2, 2, {0.0, 0.0, 1.0, 0.2});
        CHECK(binarize(g, 1.0).retrieval_count() == 4);
        CHECK(binarize(g, 0.0).retrieval_count() == 0);
    }
    SUBCASE("ties drop to streaming in ascending index order") {
        const auto p = binarize(gates_of(2, 2, {0.5, 0.5, 0.5, 0.2}), 0.5);
        CHECK(p.retrieval == std::vector<std::uint8_t>{0, 1, 1, 0});
    }
    SUBCASE("exact count and threshold property on random gates") {
        std::mt19937_64 rng(4);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (int trial = 0; trial < 200; ++trial) {
            GateMatrix g(3, 5);
            for (auto& a : g.values()) a = std::round(u(rng) * 8.0) / 8.0;  // coarse grid forces ties
            const double ratio = u(rng);
            const auto p = binarize(g, ratio);
            const auto want = static_cast<std::size_t>(std::ceil(ratio * 15.0 - 1e-9));
            CHECK(p.retrieval_count() == want);
            for (std::size_t i = 0; i < 15; ++i) {
                if (g.values()[i] > p.tau) CHECK(p.retrieval[i] == 1);
                if (g.values()[i] < p.tau) CHECK(p.retrieval[i] == 0);
            }
        }
    }
    SUBCASE("ratio outside [0, 1]") {
        CHECK_THROWS_AS(binarize(GateMatrix(1, 2), 1.5), ConfigError);
        CHECK_THROWS_AS(binarize(GateMatrix(1, 2), -0.1), ConfigError);
    }
}

TEST_CASE("policy file") {
    const auto path = testutil::temp_path("policy.txt");
    auto p = binarize(gates_of(2, 3, {0.9, 0.1, 0.5, 0.3, 0.7, 0.2}), 0.5);
    save_policy(p, path);
    const auto back = load_policy(path);
    CHECK(back.retrieval == p.retrieval);
    CHECK(back.tau == p.tau);
    CHECK(back.retrieval_ratio == 0.5);
    {
        std::ifstream in(path);
        std::string header, row;
        std::getline(in, header);
        std::getline(in, row);
        CHECK(header == "duoattn-policy v1 L=2 H=3 tau=0.3");
        CHECK(row == "RSR");
    }
    SUBCASE("malformed") {
        write_text_file(path, "duoattn-policy v1 L=2 H=2 tau=0.5\nRS\n");
        CHECK_THROWS_AS(load_policy(path), ParseError);
        write_text_file(path, "duoattn-policy v1 L=1 H=2 tau=0.5\nRX\n");
        try {
            load_policy(path);
            FAIL("expected parse error");
        } catch (const ParseError& e) {
            CHECK(e.line() == 2);
        }
    }
}

TEST_CASE("reorder_heads") {
    const auto spec = testutil::small_spec(2, 4, 2, 8);
    const auto w = init_model(spec, 11);
    const auto tokens = testutil::random_tokens(20, spec.vocab_size, 3);
    HeadPolicy p = HeadPolicy::uniform(spec, false);
    p.set(0, 1, true);  // layer 0 must swap
    p.set(1, 0, true);  // layer 1 already ordered
    const auto r = reorder_heads(w, p);
    CHECK(r.kv_order[0] == std::vector<std::size_t>{1, 0});
    CHECK(r.kv_order[1] == std::vector<std::size_t>{0, 1});
    CHECK(r.policy.is_retrieval(0, 0));
    CHECK_FALSE(r.policy.is_retrieval(0, 1));
    CHECK(r.weights.layers[1] == w.layers[1]);
    CHECK_FALSE(r.weights.layers[0].wq == w.layers[0].wq);

    const auto a = full_forward(w, tokens), b = full_forward(r.weights, tokens);
    CHECK(oracle::max_rel_diff(a.logits, b.logits) <= 1e-6);

    const auto again = reorder_heads(r.weights, r.policy);
    CHECK(again.weights == r.weights);
    CHECK(reorder_heads(w, HeadPolicy::uniform(spec, true)).weights == w);
}

TEST_CASE("streaming cache positions") {
    for (std::size_t sink : {0u, 1u, 4u}) {
        for (std::size_t recent : {1u, 3u, 8u}) {
            const StreamingConfig cfg{sink, recent};
            StreamingKV<float> kv(2, cfg);
            const float row[2] = {0.f, 0.f};
            for (std::size_t n = 1; n <= 40; ++n) {
                kv.append(row, row, n - 1);
                CHECK(kv.size() <= cfg.capacity());
                CHECK(kv.positions() == expected_positions(n, cfg));
            }
        }
    }
}

TEST_CASE("engine degenerates to full attention with an all-retrieval policy") {
    const auto spec = testutil::small_spec(2, 4, 2, 8);
    const auto w = init_model(spec, 21);
    const DuoEngine engine(w, HeadPolicy::uniform(spec, true), {2, 4});
    ReferenceDecoder ref(w);
    const auto tokens = testutil::random_tokens(40, spec.vocab_size, 9);
    auto cache = engine.new_cache();
    for (Token t : tokens) {
        const auto a = engine.decode_step(cache, t);
        const auto b = ref.step(t);
        CHECK(rel_diff(b, a) <= 1e-5);
    }
    // float engine against the 64-bit dense forward
    const auto full = full_forward(w, tokens);
    auto c2 = engine.new_cache();
    std::vector<float> last;
    for (Token t : tokens) last = engine.decode_step(c2, t);
    std::vector<double> want(full.logits.row(tokens.size() - 1).begin(), full.logits.row(tokens.size() - 1).end());
    CHECK(rel_diff(want, std::vector<double>(last.begin(), last.end())) <= 1e-4);

    SUBCASE("greedy continuation matches the reference decoder") {
        for (std::uint64_t s = 0; s < 5; ++s) {
            const auto prompt = testutil::random_tokens(10 + s, spec.vocab_size, 100 + s);
            const auto a = engine.greedy_generate(prompt, 16, {4, true});
            CHECK(a == ref.greedy_generate(prompt, 16));
            CHECK(a == engine.greedy_generate(prompt, 16, {4, true}));
        }
        CHECK(engine.greedy_generate(tokens, 0, {}).empty());
    }
}

TEST_CASE("short sequences fit the window, so streaming heads change nothing") {
    const auto spec = testutil::small_spec(2, 4, 2, 8);
    const auto w = init_model(spec, 8);
    const StreamingConfig win{2, 6};
    const DuoEngine all(w, HeadPolicy::uniform(spec, true), win);
    const DuoEngine mixed(w, mixed_policy(spec), win);
    const DuoEngine none(w, HeadPolicy::uniform(spec, false), win);
    auto ca = all.new_cache(), cm = mixed.new_cache(), cn = none.new_cache();
    for (Token t : testutil::random_tokens(win.capacity(), spec.vocab_size, 2)) {
        const auto a = all.decode_step(ca, t);
        CHECK(rel_diff(a, mixed.decode_step(cm, t)) <= 1e-5);
        CHECK(rel_diff(a, none.decode_step(cn, t)) <= 1e-5);
    }
}

TEST_CASE("streaming cache stays bounded over a long decode") {
    auto spec = testutil::small_spec(2, 4, 2, 8);
    spec.max_seq_len = 10000;
    const auto w = init_model(spec, 5);
    const StreamingConfig win{16, 64};
    const DuoEngine engine(w, mixed_policy(spec), win);
    auto cache = engine.chunked_prefill(testutil::random_tokens(1000, spec.vocab_size, 1), {64, true});
    std::mt19937_64 rng(3);
    for (std::size_t i = 1000; i < 10000; ++i) {
        engine.decode_step(cache, static_cast<Token>(rng() % spec.vocab_size));
        if (i % 997 == 0)
            for (const auto& l : cache.stats().layers) CHECK(l.streaming_len <= win.capacity());
    }
    const auto st = cache.stats();
    CHECK(st.tokens == 10000);
    for (std::size_t l = 0; l < spec.n_layers; ++l) {
        CHECK(st.layers[l].streaming_len == 80);
        CHECK(st.layers[l].retrieval_len == 10000);
        CHECK(st.layers[l].streaming_bytes == 2 * 80 * 8 * sizeof(float));
        CHECK(engine.head_cache(cache, l, l % 2).positions == expected_positions(10000, win));
    }
    CHECK(st.peak_streaming_scores <= win.capacity());
    CHECK(st.total_bytes() == 2 * (80 + 10000) * 8 * sizeof(float) * 2);
    // past the model's position limit
    auto c2 = engine.new_cache();
    c2.tokens = 10000;
    CHECK_THROWS_AS(engine.decode_step(c2, 0), LengthError);
}

TEST_CASE("chunked prefill") {
    const auto spec = testutil::small_spec(2, 4, 2, 8);
    const auto w = init_model(spec, 31);
    const auto tokens = testutil::random_tokens(150, spec.vocab_size, 12);

    SUBCASE("retrieval caches match a single dense pass for every chunk size") {
        ForwardTape tape;
        forward_hidden(w, tokens, nullptr, {}, &tape);
        const BasicDuoEngine<double> engine(w, HeadPolicy::uniform(spec, true), {4, 16});
        for (std::size_t K : {1u, 7u, 16u, 64u, 256u}) {
            const auto cache = engine.chunked_prefill(tokens, {K, true});
            for (std::size_t l = 0; l < spec.n_layers; ++l)
                for (std::size_t h = 0; h < spec.n_kv_heads; ++h) {
                    const auto view = engine.head_cache(cache, l, h);
                    CHECK(view.retrieval);
                    CHECK(view.positions.size() == tokens.size());
                    CHECK(cache_vs_tape(view, tape.layers[l], h, spec.head_dim) <= 1e-6);
                }
        }
    }

    SUBCASE("mixed policy reproduces the dense Lambda-masked pass") {
        const StreamingConfig win{3, 16};
        const auto policy = mixed_policy(spec);
        const auto gates = policy_gates(policy);
        ForwardTape tape;
        const auto hidden = forward_hidden(w, tokens, &gates, {win, false, 64}, &tape);
        const std::size_t last = tokens.size() - 1;
        const auto want = logits_for_rows(w, hidden.values, std::span<const std::size_t>(&last, 1));

        const BasicDuoEngine<double> engine(w, policy, win);
        std::vector<std::vector<double>> per_k;
        for (std::size_t K : {16u, 64u, 256u}) {
            auto cache = engine.new_cache();
            const auto logits = engine.prefill(cache, tokens, {K, true});
            CHECK(rel_diff(std::vector<double>(want.row(0).begin(), want.row(0).end()), logits) <= 1e-9);
            for (std::size_t l = 0; l < spec.n_layers; ++l)
                for (std::size_t h = 0; h < spec.n_kv_heads; ++h) {
                    const auto view = engine.head_cache(cache, l, h);
                    CHECK(view.retrieval == policy.is_retrieval(l, h));
                    if (!view.retrieval) CHECK(view.positions == expected_positions(tokens.size(), win));
                    CHECK(cache_vs_tape(view, tape.layers[l], h, spec.head_dim) <= 1e-9);
                }
            CHECK(cache.peak_streaming_scores <= K + win.capacity());
            CHECK(cache.peak_streaming_scores <= win.capacity());
            per_k.push_back(logits);
        }

        // Float engine: chunking does not change a single bit.
        const DuoEngine fe(w, policy, win);
        auto c0 = fe.new_cache();
        const auto a = fe.prefill(c0, tokens, {16, true});
        for (std::size_t K : {64u, 256u}) {
            auto c = fe.new_cache();
            CHECK(fe.prefill(c, tokens, {K, true}) == a);
        }
        auto c1 = fe.new_cache();
        std::vector<float> one;
        for (Token t : tokens) one = fe.decode_step(c1, t);
        CHECK(one == a);
    }

    SUBCASE("chunks shorter than the recent window") {
        const StreamingConfig win{2, 32};
        const DuoEngine engine(w, mixed_policy(spec), win);
        CHECK_THROWS_AS(engine.chunked_prefill(tokens, {16, true}), ConfigError);
        // permissive mode keeps the exact window because the cache retains the last `recent` rows
        auto c = engine.new_cache();
        const auto relaxed = engine.prefill(c, tokens, {16, false});
        auto ref = engine.new_cache();
        CHECK(engine.prefill(ref, tokens, {64, true}) == relaxed);
        // all-retrieval policy has no streaming heads, so small chunks are fine
        const DuoEngine full(w, HeadPolicy::uniform(spec, true), win);
        CHECK_NOTHROW(full.chunked_prefill(tokens, {3, true}));
    }

    SUBCASE("errors") {
        const DuoEngine engine(w, HeadPolicy::uniform(spec, true), {2, 4});
        CHECK_THROWS_AS(engine.chunked_prefill({}, {4, true}), LengthError);
        CHECK_THROWS_AS(engine.chunked_prefill(tokens, {0, true}), ConfigError);
        const DuoEngine other(w, mixed_policy(spec), {2, 4});
        auto cache = other.new_cache();
        CHECK_THROWS_AS(engine.decode_step(cache, 1), ConfigError);
        const Token bad[1] = {static_cast<Token>(spec.vocab_size)};
        CHECK_THROWS_AS(engine.chunked_prefill(bad, {4, true}), ContractError);
        CHECK_THROWS_AS(DuoEngine(w, HeadPolicy(1, 2, true), {2, 4}), ConfigError);
    }
}

TEST_CASE("four-chunk micro case: one sink, two recent, chunk size 4") {
    auto spec = testutil::small_spec(1, 2, 2, 4);
    const auto w = init_model(spec, 2);
    const DuoEngine engine(w, HeadPolicy::uniform(spec, false), {1, 2});
    const auto cache = engine.chunked_prefill(testutil::random_tokens(16, spec.vocab_size, 1), {4, true});
    CHECK(engine.head_cache(cache, 0, 0).positions == std::vector<std::size_t>{0, 14, 15});
    CHECK(cache.stats().layers[0].streaming_len == 3);
    CHECK(cache.stats().layers[0].retrieval_bytes == 0);
}

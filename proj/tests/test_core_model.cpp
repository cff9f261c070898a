#include <fstream>
#include <cmath>
#include <random>

#include "doctest.h"
#include "duoattn/forward.hpp"
#include "duoattn/ops.hpp"
#include "helpers.hpp"
#include "oracle.hpp"

using namespace duoattn;

TEST_CASE("init_model is deterministic per seed") {
    const auto spec = testutil::small_spec();
    CHECK(checksum(init_model(spec, 7)) == checksum(init_model(spec, 7)));
    CHECK(init_model(spec, 7) == init_model(spec, 7));
    CHECK(checksum(init_model(spec, 7)) != checksum(init_model(spec, 8)));
}

TEST_CASE("model spec validation") {
    auto spec = testutil::small_spec();
    spec.n_query_heads = 8;
    spec.n_kv_heads = 3;
    spec.hidden_dim = 64;
    CHECK_THROWS_AS(init_model(spec, 1), ConfigError);

    spec = testutil::small_spec();
    spec.hidden_dim += 1;
    CHECK_THROWS_AS(init_model(spec, 1), ConfigError);

    spec = testutil::small_spec();
    spec.rope_theta = 0.0;
    CHECK_THROWS_AS(spec.validate(), ConfigError);

    spec = testutil::small_spec(2, 4, 2, 7);
    CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("checkpoint round trip and corruption") {
    const auto w = init_model(testutil::small_spec(), 3);
    const auto path = testutil::temp_path("model.duow");
    save_checkpoint(w, path);
    CHECK(load_checkpoint(path) == w);

    {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        os << "NOPE";
    }
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
    CHECK_THROWS_AS(load_checkpoint(testutil::temp_path("missing.duow")), IoError);
}

TEST_CASE("rmsnorm") {
    SUBCASE("zeros stay zero") {
        const std::vector<double> x(5, 0.0), g(5, 2.0);
        for (double v : rmsnorm(x, g, 1e-6)) CHECK(v == 0.0);
    }
    SUBCASE("unit rms is identity") {
        const std::vector<double> x(4, 1.0), g(4, 1.0);
        for (double v : rmsnorm(x, g, 1e-300)) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
    }
    SUBCASE("matches scalar loop oracle") {
        std::mt19937_64 rng(11);
        std::normal_distribution<double> n(0.0, 3.0);
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<double> x(17), g(17);
            for (auto& v : x) v = n(rng);
            for (auto& v : g) v = n(rng);
            const auto got = rmsnorm(x, g, 1e-6);
            const auto want = oracle::rmsnorm(x, g, 1e-6);
            for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-12 * (1 + std::abs(want[i])));
        }
    }
    SUBCASE("length mismatch") {
        const std::vector<double> x(4, 1.0), g(3, 1.0);
        CHECK_THROWS_AS(rmsnorm(x, g, 1e-6), ShapeError);
    }
}

TEST_CASE("rope") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.0, 1.0);
    MatrixD v(6, 16);
    for (auto& x : v.storage()) x = n(rng);

    SUBCASE("position zero is identity") {
        const std::vector<std::size_t> zeros(6, 0);
        CHECK(rope_apply(v, zeros, 10000.0) == v);
    }
    SUBCASE("inverse rotation restores input") {
        const std::vector<std::size_t> pos = {0, 3, 17, 250, 1023, 99999};
        const auto back = rope_apply(rope_apply(v, pos, 10000.0), pos, 10000.0, true);
        for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::abs(back.data()[i] - v.data()[i]) <= 1e-12);
    }
    SUBCASE("scores depend on relative position only") {
        for (std::size_t shift : {1u, 7u, 300u}) {
            MatrixD q(1, 16), k(1, 16);
            std::copy(v.row(0).begin(), v.row(0).end(), q.row(0).begin());
            std::copy(v.row(1).begin(), v.row(1).end(), k.row(0).begin());
            const std::size_t m = 9, nn = 4;
            const std::vector<std::size_t> pm{m}, pn{nn}, pms{m + shift}, pns{nn + shift};
            const auto a = rope_apply(q, pm, 10000.0), b = rope_apply(k, pn, 10000.0);
            const auto c = rope_apply(q, pms, 10000.0), d = rope_apply(k, pns, 10000.0);
            double s1 = 0, s2 = 0;
            for (std::size_t i = 0; i < 16; ++i) {
                s1 += a(0, i) * b(0, i);
                s2 += c(0, i) * d(0, i);
            }
            CHECK(std::abs(s1 - s2) <= 1e-10);
        }
    }
    SUBCASE("odd head dim rejected") {
        MatrixD odd(1, 5, 1.0);
        const std::vector<std::size_t> p{1};
        CHECK_THROWS_AS(rope_apply(odd, p, 10000.0), ConfigError);
    }
}

TEST_CASE("attention_head_forward") {
    SUBCASE("single key returns its value") {
        MatrixD q(1, 4, 0.3), k(1, 4, -1.0), v(1, 4);
        v(0, 0) = 1.5;
        v(0, 3) = -2.0;
        CHECK(attention_head_forward(q, k, v, causal_mask(1), 0.5) == v);
    }
    SUBCASE("identical keys average unmasked values") {
        MatrixD q(3, 2, 1.0), k(3, 2, 0.7), v(3, 2);
        for (std::size_t j = 0; j < 3; ++j) v(j, 0) = static_cast<double>(j + 1), v(j, 1) = 10.0 * (j + 1);
        const auto out = attention_head_forward(q, k, v, causal_mask(3), 1.0);
        CHECK(out(2, 0) == doctest::Approx(2.0));
        CHECK(out(1, 1) == doctest::Approx(15.0));
    }
    SUBCASE("4x4 causal matches brute-force oracle") {
        std::mt19937_64 rng(9);
        std::normal_distribution<double> n(0.0, 1.0);
        MatrixD q(4, 6), k(4, 6), v(4, 6);
        for (auto* m : {&q, &k, &v})
            for (auto& x : m->storage()) x = n(rng);
        const auto got = attention_head_forward(q, k, v, causal_mask(4), 1.0 / std::sqrt(6.0));
        oracle::Table tq(4), tk(4), tv(4);
        for (std::size_t i = 0; i < 4; ++i) {
            tq[i].assign(q.row(i).begin(), q.row(i).end());
            tk[i].assign(k.row(i).begin(), k.row(i).end());
            tv[i].assign(v.row(i).begin(), v.row(i).end());
        }
        const auto want = oracle::attention(tq, tk, tv, [](std::size_t i, std::size_t j) { return j <= i; });
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t c = 0; c < 6; ++c) CHECK(std::abs(got(i, c) - want[i][c]) <= 1e-12);
    }
    SUBCASE("empty row is a contract violation") {
        AttentionMask m({0, 1}, {0, 1});
        m.set(0, 0, true);
        MatrixD q(2, 2, 1.0), k(2, 2, 1.0), v(2, 2, 1.0);
        CHECK_THROWS_AS(attention_head_forward(q, k, v, m, 1.0), ContractError);
    }
}

TEST_CASE("full_forward") {
    const auto w = init_model(testutil::small_spec(), 21);
    const auto tokens = testutil::random_tokens(40, w.spec.vocab_size, 4);

    SUBCASE("deterministic") {
        const auto a = full_forward(w, tokens);
        const auto b = full_forward(w, tokens);
        CHECK(a.logits == b.logits);
        CHECK(a.hidden.values == b.hidden.values);
    }
    SUBCASE("prefix property") {
        const auto a = full_forward(w, std::span(tokens).first(30));
        const auto b = full_forward(w, std::span(tokens).first(31));
        for (std::size_t t = 0; t < 30; ++t)
            for (std::size_t c = 0; c < w.spec.vocab_size; ++c) CHECK(a.logits(t, c) == b.logits(t, c));
    }
    SUBCASE("single token is finite") {
        const auto r = full_forward(w, std::span(tokens).first(1));
        CHECK(all_finite<double>(r.logits.storage()));
    }
    SUBCASE("matches scalar oracle") {
        const auto got = full_forward(w, tokens);
        const auto want = oracle::forward(w, tokens, nullptr);
        CHECK(oracle::max_rel_diff(want, got.hidden.values) <= 1e-12);
    }
    SUBCASE("length errors") {
        std::vector<Token> too_long(w.spec.max_seq_len + 1, 0);
        CHECK_THROWS_AS(full_forward(w, too_long), LengthError);
        CHECK_THROWS_AS(full_forward(w, std::vector<Token>{}), LengthError);
    }
}

TEST_CASE("mixed_attention_forward") {
    const auto w = init_model(testutil::small_spec(), 33);
    const auto tokens = testutil::random_tokens(48, w.spec.vocab_size, 8);
    const StreamingConfig cfg{2, 6};

    SUBCASE("all gates one equals full attention") {
        const auto mixed = mixed_attention_forward(w, GateMatrix::for_model(w.spec, 1.0), tokens, cfg);
        CHECK(oracle::max_rel_diff(full_forward(w, tokens).hidden.values, mixed.values) <= 1e-12);
    }
    SUBCASE("all gates zero equals streaming-only forward") {
        const auto mixed = mixed_attention_forward(w, GateMatrix::for_model(w.spec, 0.0), tokens, cfg);
        oracle::Mixing mix{[](std::size_t, std::size_t) { return 0.0; },
                           [&](std::size_t i, std::size_t j) { return cfg.allows(i, j); }};
        CHECK(oracle::max_rel_diff(oracle::forward(w, tokens, &mix), mixed.values) <= 1e-12);
    }
    SUBCASE("single half gate matches two-pass oracle") {
        auto gates = GateMatrix::for_model(w.spec, 1.0);
        gates(1, 0) = 0.5;
        const auto mixed = mixed_attention_forward(w, gates, tokens, cfg);
        oracle::Mixing mix{[&](std::size_t l, std::size_t h) { return gates(l, h); },
                           [&](std::size_t i, std::size_t j) { return cfg.allows(i, j); }};
        CHECK(oracle::max_rel_diff(oracle::forward(w, tokens, &mix), mixed.values) <= 1e-12);
    }
    SUBCASE("gate shape mismatch") {
        CHECK_THROWS_AS(mixed_attention_forward(w, GateMatrix(3, 2), tokens, cfg), ShapeError);
    }
}

TEST_CASE("gate linearity and group locality at the attention output") {
    const auto w = init_model(testutil::small_spec(2, 4, 2, 8), 44);
    const auto tokens = testutil::random_tokens(32, w.spec.vocab_size, 2);
    MixOptions opts;
    opts.streaming = {1, 4};
    auto attn_out = [&](double a, std::size_t layer, std::size_t head) {
        auto g = GateMatrix::for_model(w.spec, 0.7);
        g(layer, head) = a;
        ForwardTape tape;
        forward_hidden(w, tokens, &g, opts, &tape);
        return tape.layers[layer].o_mixed;
    };
    for (std::size_t layer : {0u, 1u}) {
        const auto o0 = attn_out(0.0, layer, 1), o1 = attn_out(1.0, layer, 1), oh = attn_out(0.5, layer, 1);
        double worst = 0.0;
        for (std::size_t i = 0; i < oh.size(); ++i)
            worst = std::max(worst, std::abs(oh.data()[i] - 0.5 * (o0.data()[i] + o1.data()[i])));
        CHECK(worst <= 1e-10);

        // Only query heads 2,3 (group of kv head 1) may change.
        const auto base = attn_out(0.7, layer, 1), moved = attn_out(0.2, layer, 1);
        bool other_same = true, own_changed = false;
        for (std::size_t t = 0; t < base.rows(); ++t)
            for (std::size_t c = 0; c < base.cols(); ++c) {
                const bool own = c >= 2 * w.spec.head_dim;
                if (own && base(t, c) != moved(t, c)) own_changed = true;
                if (!own && base(t, c) != moved(t, c)) other_same = false;
            }
        CHECK(other_same);
        CHECK(own_changed);
    }
}

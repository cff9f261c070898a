#include <clocale>
#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "duoattn/eval_bench.hpp"
#include "duoattn/errors.hpp"
#include "duoattn/textio.hpp"
#include "helpers.hpp"

using namespace duoattn;

namespace {

NiahTask small_task(std::size_t vocab = 24) {
    NiahTask t;
    t.vocab_size = vocab;
    t.filler_tokens = 8;
    t.passkey_len = 4;
    return t;
}

Token last_prediction(const ModelWeights& w, const std::vector<Token>& seq, const GateMatrix* gates,
                      const StreamingConfig& win) {
    const auto hidden = gates == nullptr ? full_forward(w, seq).hidden : mixed_attention_forward(w, *gates, seq, win);
    const std::size_t last = seq.size() - 1;
    const auto logits = logits_for_rows(w, hidden.values, std::span<const std::size_t>(&last, 1));
    return argmax_token<double>(logits.row(0));
}

// "... x y ... x" with x absent elsewhere and not at position 0; the answer is y.
struct CopyCase {
    std::vector<Token> seq;
    Token answer;
};

CopyCase copy_case(std::size_t vocab, std::size_t first, std::size_t gap, Rng& rng) {
    const auto x = static_cast<Token>(uniform_int(rng, 0, vocab - 1));
    Token y;
    do y = static_cast<Token>(uniform_int(rng, 0, vocab - 1));
    while (y == x);
    CopyCase c;
    c.answer = y;
    c.seq.resize(first + 2 + gap + 1);
    for (auto& t : c.seq) {
        do t = static_cast<Token>(uniform_int(rng, 0, vocab - 1));
        while (t == x);
    }
    c.seq[first] = x;
    c.seq[first + 1] = y;
    c.seq.back() = x;
    return c;
}

}  // namespace

TEST_CASE("induction model") {
    const auto im = build_induction_model(20);
    const auto& w = im.weights;
    CHECK(w.spec.n_layers == 2);
    CHECK(checksum(w) == checksum(build_induction_model(20).weights));
    CHECK_THROWS_AS(build_induction_model(3), ConfigError);

    SUBCASE("copies the token that followed the earlier occurrence") {
        Rng rng = make_rng(1, "copy");
        std::size_t hits = 0;
        for (int i = 0; i < 100; ++i) {
            const auto c = copy_case(20, uniform_int(rng, 1, 40), uniform_int(rng, 1, 150), rng);
            hits += last_prediction(w, c.seq, nullptr, {}) == c.answer ? 1 : 0;
        }
        CHECK(hits == 100);
    }
    SUBCASE("planted structure: only the induction head needs the far context") {
        const StreamingConfig win{16, 64};
        GateMatrix b_stream = GateMatrix::for_model(w.spec, 1.0), a_stream = b_stream;
        b_stream(im.induction_layer, im.induction_head) = 0.0;
        a_stream(im.prev_token_layer, im.prev_token_head) = 0.0;
        Rng rng = make_rng(2, "planted");
        std::size_t b_hits = 0, a_hits = 0;
        for (int i = 0; i < 100; ++i) {
            const auto c = copy_case(20, uniform_int(rng, 20, 40), uniform_int(rng, 70, 150), rng);
            b_hits += last_prediction(w, c.seq, &b_stream, win) == c.answer ? 1 : 0;
            a_hits += last_prediction(w, c.seq, &a_stream, win) == c.answer ? 1 : 0;
        }
        CHECK(a_hits == 100);
        CHECK(b_hits <= 10);
    }
    SUBCASE("larger vocabularies add heads") {
        const auto big = build_induction_model(64, 256);
        CHECK(big.weights.spec.hidden_dim >= 3 * 64 + 1);
        Rng rng = make_rng(3, "big");
        for (int i = 0; i < 10; ++i) {
            const auto c = copy_case(64, 5, 100, rng);
            CHECK(last_prediction(big.weights, c.seq, nullptr, {}) == c.answer);
        }
    }
}

TEST_CASE("gate training recovers the planted heads") {
    const auto im = build_induction_model(24);
    const auto task = small_task();
    const auto data = gen_passkey_dataset(identification_data(task, {64, 96}, 2, 2, 7));
    TrainConfig tc;
    tc.streaming = {8, 16};
    tc.steps = 600;
    tc.warmup_steps = 100;
    tc.decay_steps = 100;
    const auto r = train_gates(im.weights, data, tc);
    const double b = r.gates(im.induction_layer, im.induction_head);
    const double a = r.gates(im.prev_token_layer, im.prev_token_head);
    CHECK(b - a >= 0.5);
    const auto p = binarize(r.gates, 1.0 / static_cast<double>(r.gates.size()));
    CHECK(p.retrieval_count() == 1);
    CHECK(p.is_retrieval(im.induction_layer, im.induction_head));
}

TEST_CASE("NIAH prompts and grids") {
    const auto task = small_task();
    SUBCASE("prompt layout") {
        Rng rng = make_rng(0, "layout");
        for (double depth : {0.0, 0.5, 1.0}) {
            const auto p = make_niah_prompt(task, 40, depth, rng);
            const std::size_t usable = 40 - 2 - task.needle_len();
            CHECK(p.needle_start == 1 + static_cast<std::size_t>(std::floor(depth * usable)));
            CHECK(p.prompt.size() == 40);
            CHECK(p.prompt[0] == task.bos);
            CHECK(p.prompt.back() == p.prompt[p.needle_start]);
            CHECK(p.answer.size() == task.passkey_len);
            for (std::size_t k = 0; k < task.passkey_len; ++k) CHECK(p.prompt[p.needle_start + 1 + k] == p.answer[k]);
            for (std::size_t i = 1; i + 1 < 40; ++i) {
                const bool in_needle = i >= p.needle_start && i < p.needle_start + task.needle_len();
                const bool is_filler = p.prompt[i] >= task.filler().lo && p.prompt[i] < task.filler().hi;
                CHECK(in_needle != is_filler);
            }
        }
        CHECK(make_niah_prompt(task, 40, 1.0, rng).needle_start + task.needle_len() == 39);
        CHECK_THROWS_AS(make_niah_prompt(task, 6, 0.5, rng), LengthError);
        NiahTask bad = task;
        bad.vocab_size = 12;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    }

    const auto im = build_induction_model(24, 512);
    NiahAxes axes;
    axes.context_lengths = {96, 200};
    axes.trials = 3;
    const StreamingConfig win{16, 64};
    const auto full = niah_eval_full(im.weights, axes, task, 5);
    full.validate();
    CHECK(full.mean() == 1.0);

    SUBCASE("all-retrieval grid equals the full-attention grid") {
        const auto g = niah_eval(im.weights, HeadPolicy::uniform(im.weights.spec, true), win, axes, task, 5, {64, true});
        CHECK(g.accuracy == full.accuracy);
    }
    SUBCASE("all-streaming loses needles outside the window") {
        const auto g =
            niah_eval(im.weights, HeadPolicy::uniform(im.weights.spec, false), win, axes, task, 5, {64, true});
        for (std::size_t i = 0; i < axes.context_lengths.size(); ++i)
            for (std::size_t j = 0; j < axes.depths.size(); ++j) {
                Rng rng = make_rng(5, "niah/" + std::to_string(axes.context_lengths[i]) + "/" + std::to_string(j));
                const auto p = make_niah_prompt(task, axes.context_lengths[i], axes.depths[j], rng);
                const std::size_t L = axes.context_lengths[i];
                const bool outside = p.needle_start >= win.sink_size && p.needle_start + task.needle_len() + win.recent_size <= L;
                if (outside) CHECK(g.accuracy(i, j) <= 0.1);
            }
        CHECK(g.length_mean(1) <= full.length_mean(1) - 0.4);
    }
    SUBCASE("csv round trip") {
        const auto path = testutil::temp_path("niah.csv");
        write_niah_csv(full, path);
        const auto back = read_niah_csv(path);
        CHECK(back.context_lengths == full.context_lengths);
        CHECK(back.depths == full.depths);
        CHECK(back.accuracy == full.accuracy);
        CHECK(back.trials == full.trials);
        std::ifstream in(path);
        std::string header;
        std::getline(in, header);
        CHECK(header == "context_len,depth,accuracy,trials");
    }
}

TEST_CASE("NIAH csv edge cases") {
    const auto path = testutil::temp_path("niah-empty.csv");
    NIAHGrid empty;
    write_niah_csv(empty, path);
    CHECK(read_text_lines(path) == std::vector<std::string>{"context_len,depth,accuracy,trials"});
    CHECK(read_niah_csv(path).accuracy.empty());

    NIAHGrid g;
    g.context_lengths = {10};
    g.depths = {0.1, 0.3};
    g.trials = 3;
    g.accuracy = MatrixD(1, 2);
    g.accuracy(0, 0) = 1.0 / 3.0;
    g.accuracy(0, 1) = 2.0 / 3.0;
    // Decimal separator stays '.' whatever the C locale says.
    const char* old = std::setlocale(LC_NUMERIC, nullptr);
    const std::string saved = old != nullptr ? old : "C";
    std::setlocale(LC_NUMERIC, "de_DE.UTF-8");
    write_niah_csv(g, path);
    const auto back = read_niah_csv(path);
    std::setlocale(LC_NUMERIC, saved.c_str());
    CHECK(back.accuracy == g.accuracy);
    CHECK(read_text_lines(path)[1] == "10,0.1,0.3333333333333333,3");

    write_text_file(path, "context_len,depth,accuracy,trials\n10,0.5,1.5,2\n");
    CHECK_THROWS_AS(read_niah_csv(path), InvariantError);
    write_text_file(path, "len,depth\n");
    CHECK_THROWS_AS(read_niah_csv(path), ParseError);
    CHECK_THROWS_AS(write_niah_csv(g, "/nonexistent-dir/x.csv"), IoError);
}

TEST_CASE("KV memory report") {
    ModelSpec llama;
    llama.n_layers = 32;
    llama.n_query_heads = 32;
    llama.n_kv_heads = 8;
    llama.head_dim = 128;
    llama.hidden_dim = 4096;
    const std::size_t ctx = std::size_t{1} << 20;

    const auto full = kv_memory_report(llama, HeadPolicy::uniform(llama, true), ctx, {128, 256}, 2);
    CHECK(full.total == 131072ULL * ctx);
    CHECK(static_cast<double>(full.total) / 1e9 == doctest::Approx(137.44).epsilon(1e-4));
    CHECK(full.reduction == 1.0);

    GateMatrix g = GateMatrix::for_model(llama, 0.0);
    for (std::size_t l = 0; l < 32; ++l) g(l, l % 8) = 1.0, g(l, (l + 3) % 8) = 1.0;
    const auto p = binarize(g, 0.25);
    CHECK(p.retrieval_count() == 64);
    const StreamingConfig win{64, 256};
    const auto r = kv_memory_report(llama, p, ctx, win, 2);
    CHECK(r.reduction > 3.9);
    CHECK(r.reduction < 4.0);
    CHECK(r.reduction == doctest::Approx(1.0 / (0.25 + 0.75 * 320.0 / static_cast<double>(ctx))));
    double prev = 0.0;
    for (std::size_t c : {std::size_t{1} << 16, ctx, std::size_t{1} << 24, std::size_t{1} << 28}) {
        const double red = kv_memory_report(llama, p, c, win, 2).reduction;
        CHECK(red > prev);
        prev = red;
    }
    CHECK(4.0 - prev < 1e-4);

    SUBCASE("additivity and independence of the streaming part") {
        CHECK(r.total == r.retrieval_total + r.streaming_total);
        std::uint64_t sum = 0;
        for (const auto& l : r.layers) sum += l.retrieval_bytes + l.streaming_bytes;
        CHECK(sum == r.total);
        const auto s1 = kv_memory_report(llama, p, 1000, win, 2).streaming_total;
        CHECK(kv_memory_report(llama, p, 5000, win, 2).streaming_total == s1);
        CHECK(kv_memory_report(llama, p, ctx, win, 2).streaming_total == s1);
        CHECK(kv_memory_report(llama, p, 100, win, 2).streaming_total < s1);
        CHECK(kv_memory_report(llama, p, 0, win, 2).total == 0);
    }
    SUBCASE("raising the ratio never lowers the total") {
        std::mt19937_64 rng(1);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        GateMatrix rg = GateMatrix::for_model(llama);
        for (auto& a : rg.values()) a = u(rng);
        std::uint64_t last = 0;
        for (int k = 0; k <= 20; ++k) {
            const auto t = kv_memory_report(llama, binarize(rg, k / 20.0), 4096, win, 2).total;
            CHECK(t >= last);
            last = t;
        }
    }
    SUBCASE("csv rows") {
        const auto path = testutil::temp_path("mem.csv");
        write_memory_csv(r, path);
        const auto rows = read_memory_csv(path);
        CHECK(rows == memory_csv_rows(r));
        CHECK(rows.back().component == "baseline_total");
        CHECK(rows.back().bytes == full.total);
    }
}

TEST_CASE("latency bench") {
    ModelSpec s = testutil::small_spec(2, 4, 2, 32);
    s.vocab_size = 64;
    s.max_seq_len = 4200;
    const auto w = init_model(s, 1);
    LatencyConfig cfg;
    cfg.context_lengths = {256, 1024, 2048, 4096};
    cfg.decode_steps = 64;
    cfg.warmup_steps = 4;
    cfg.prefill = {256, true};
    const StreamingConfig win{16, 64};
    const auto policy = HeadPolicy::uniform(s, false);
    latency_bench(w, policy, win, cfg, 1);  // settles clocks and caches; discarded
    const auto r = latency_bench(w, policy, win, cfg, 1);
    CHECK(r.rows.size() == 16);
    for (const auto& row : r.rows) {
        CHECK(row.median_us >= 0.0);
        CHECK(row.p90_us >= row.median_us);
        CHECK(row.samples > 0);
    }
    CHECK(r.row("decode", 256).samples == 64);
    CHECK(r.row("prefill", 1024).samples == 4);

    // Trends only: streaming decode is flat, full-cache decode grows.
    const double span = 4096.0 - 256.0;
    double mean_stream = 0.0;
    for (std::size_t c : cfg.context_lengths) mean_stream += r.row("decode", c).median_us / 4.0;
    CHECK(std::abs(decode_slope(r, "decode")) * span <= 0.25 * mean_stream);
    CHECK(r.row("decode_baseline", 4096).median_us > 3.0 * r.row("decode_baseline", 256).median_us);
    CHECK(decode_slope(r, "decode_baseline") > 0.0);
    CHECK(r.decode_speedup(4096) > 1.0);

    auto quick = cfg;
    quick.decode_steps = 2;
    CHECK(latency_bench(w, policy, win, quick, 1).config_echo == latency_bench(w, policy, win, quick, 1).config_echo);

    const auto path = testutil::temp_path("latency.csv");
    write_latency_csv(r, path);
    CHECK(read_latency_csv(path) == r.rows);
}

TEST_CASE("recall pretraining") {
    ModelSpec s = testutil::small_spec(2, 2, 2, 8);
    s.vocab_size = 32;
    PretrainConfig cfg;
    cfg.task = small_task(32);
    cfg.n_needles = 2;
    cfg.train_lengths = {24, 30};
    cfg.batch_size = 2;
    cfg.max_steps = 3;
    cfg.eval_every = 2;
    cfg.eval_samples = 4;
    cfg.eval_lengths = {24};

    SUBCASE("sample layout") {
        Rng rng = make_rng(0, "sample");
        const auto smp = make_recall_sample(cfg, 30, rng);
        CHECK(smp.tokens.size() == 30);
        CHECK(smp.rows.size() == cfg.n_needles * cfg.task.passkey_len);
        for (std::size_t i = 0; i < smp.rows.size(); ++i) CHECK(smp.tokens[smp.rows[i] + 1] == smp.targets[i]);
        CHECK(smp.rows.back() + 2 == smp.tokens.size());
    }
    SUBCASE("gradient against central finite differences") {
        const auto w = init_model(s, 4);
        Rng rng = make_rng(1, "fd");
        std::vector<RecallSample> batch{make_recall_sample(cfg, 24, rng), make_recall_sample(cfg, 26, rng)};
        ModelWeights grad = ModelWeights::gradient_buffer(s);
        recall_loss(w, batch, &grad);
        std::vector<const std::vector<double>*> gts;
        grad.for_each_tensor([&](const std::vector<double>& t) { gts.push_back(&t); });
        std::mt19937_64 pick(2);
        std::size_t ti = 0, checked = 0;
        auto wp = w;
        wp.for_each_tensor([&](std::vector<double>& t) {
            for (int k = 0; k < 3; ++k) {
                const std::size_t i = pick() % t.size();
                const double orig = t[i], h = 1e-5;
                t[i] = orig + h;
                const double lp = recall_loss(wp, batch);
                t[i] = orig - h;
                const double lm = recall_loss(wp, batch);
                t[i] = orig;
                const double fd = (lp - lm) / (2 * h);
                const double g = (*gts[ti])[i];
                INFO("tensor ", ti, " index ", i);
                CHECK(std::abs(g - fd) <= 1e-3 * std::max(std::abs(fd), std::abs(g)) + 1e-8);
                ++checked;
            }
            ++ti;
        });
        CHECK(checked == 3 * (3 + 9 * s.n_layers));
    }
    SUBCASE("deterministic, and hitting the cap is a warning") {
        const auto a = pretrain_toy_model(s, cfg, 9);
        const auto b = pretrain_toy_model(s, cfg, 9);
        CHECK(checksum(a.weights) == checksum(b.weights));
        CHECK(a.steps == 3);
        CHECK_FALSE(a.reached_target);
        CHECK(a.log.size() == 3);
        CHECK(a.log[1].heldout_accuracy >= 0.0);
        CHECK(a.log[0].heldout_accuracy < 0.0);
        const auto path = testutil::temp_path("pretrain.csv");
        write_pretrain_log(a.log, path);
        CHECK(read_text_lines(path)[0] == "step,lr,loss,heldout_accuracy");
    }
    SUBCASE("config errors") {
        auto bad = cfg;
        bad.train_lengths = {10};
        CHECK_THROWS_AS(pretrain_toy_model(s, bad, 1), ConfigError);
        ModelSpec deep = s;
        deep.n_layers = 5;
        CHECK_THROWS_AS(pretrain_toy_model(deep, cfg, 1), ConfigError);
    }
}

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>

#include "grow/conditioning.hpp"
#include "grow/diffusion.hpp"
#include "grow/expansion.hpp"
#include "oracles.hpp"

using namespace grow;

namespace {

ModelConfig tiny_config(bool llm = false, int64_t d_llm = 5) {
    ModelConfig cfg;
    cfg.channels = 2;
    cfg.frames = 2;
    cfg.height = 2;
    cfg.width = 2;
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.blocks = 2;
    cfg.ffn_mult = 2;
    cfg.d_t5 = 6;
    cfg.d_llm = d_llm;
    cfg.llm_branch = llm;
    return cfg;
}

EncoderConfig tiny_encoders(const ModelConfig& cfg) {
    EncoderConfig enc;
    enc.t5 = StubSpec{8, cfg.d_t5, 97, 5};
    enc.llm = StubSpec{10, cfg.d_llm, 101, 7};
    return enc;
}

}  // namespace

TEST_CASE("merge_prompts_sl") {
    CHECK(merge_prompts_sl("a cat", "") == "a cat");
    CHECK(merge_prompts_sl("a cat", "The tabby cat sits on a mat.") ==
          "a cat. The tabby cat sits on a mat.");
    SECTION("merging twice double-appends by design") {
        std::string once = merge_prompts_sl("a cat", "details");
        CHECK(merge_prompts_sl(once, "details") == "a cat. details. details");
    }
    CHECK_THROWS_WITH(merge_prompts_sl("", "x"), Catch::Matchers::ContainsSubstring("short prompt required"));
}

TEST_CASE("apply_llm_template") {
    TemplateSpec tmpl = default_llm_template();
    SECTION("empty template is a no-op") {
        CHECK(apply_llm_template("hello", TemplateSpec{"", ""}) == "hello");
    }
    SECTION("default template golden") {
        CHECK(apply_llm_template("a cat. details", tmpl) ==
              "[INST] Describe and generate: a cat. details [/INST]");
    }
    SECTION("strip recovers the merged prompt") {
        std::string p_sl = "a dog running. The dog runs fast.";
        CHECK(strip_llm_template(apply_llm_template(p_sl, tmpl), tmpl) == p_sl);
    }
}

TEST_CASE("encode_stub") {
    StubSpec spec{8, 6, 97, 5};
    SECTION("same text twice is bitwise equal") {
        EncodedText<float> a = encode_stub<float>("a cat on a mat", spec);
        EncodedText<float> b = encode_stub<float>("a cat on a mat", spec);
        CHECK(bits_equal(a.tokens, b.tokens));
        CHECK(bits_equal(a.mask, b.mask));
    }
    SECTION("different encoder seeds give different embeddings") {
        StubSpec other{8, 6, 97, 9};
        EncodedText<float> a = encode_stub<float>("a cat", spec);
        EncodedText<float> b = encode_stub<float>("a cat", other);
        CHECK(max_abs_diff(a.tokens, b.tokens) > 1e-3);
    }
    SECTION("three tokens against L=8 yield exactly three valid positions") {
        EncodedText<float> e = encode_stub<float>("one two three", spec);
        CHECK(e.n_valid == 3);
        double sum = 0;
        for (int64_t i = 0; i < 8; ++i) sum += e.mask.data()[i];
        CHECK(sum == 3.0);
        for (int64_t i = 3; i < 8; ++i)
            for (int64_t j = 0; j < 6; ++j) CHECK(e.tokens.data()[i * 6 + j] == 0.0f);
    }
    SECTION("empty text is all padding") {
        EncodedText<float> e = encode_stub<float>("", spec);
        CHECK(e.n_valid == 0);
        for (int64_t i = 0; i < e.mask.numel(); ++i) CHECK(e.mask.data()[i] == 0.0f);
    }
    SECTION("overlong text truncates to L") {
        EncodedText<float> e = encode_stub<float>("a b c d e f g h i j k", spec);
        CHECK(e.n_valid == 8);
    }
}

TEST_CASE("condition_embedder_forward") {
    Rng rng(50);
    SECTION("identity-initialized square pair is a passthrough") {
        Mlp<float> mlp;
        mlp.act = MlpAct::none;
        mlp.w1 = Tensor<float>::zeros({6, 6});
        mlp.w2 = Tensor<float>::zeros({6, 6});
        mlp.b1 = Tensor<float>::zeros({6});
        mlp.b2 = Tensor<float>::zeros({6});
        for (int64_t i = 0; i < 6; ++i) {
            mlp.w1.data()[i * 6 + i] = 1.0f;
            mlp.w2.data()[i * 6 + i] = 1.0f;
        }
        Tensor<float> raw = tensor_randn<float>({4, 6}, rng);
        CHECK(bits_equal(condition_embedder_forward(raw, mlp), raw));
    }
    SECTION("gradient flows through the embedder weights") {
        ModelConfig cfg = tiny_config();
        Rng r2(51);
        DitModel<double> m = init_model<double>(cfg, r2);
        Tensor<double> raw = tensor_randn<double>({3, cfg.d_t5}, r2);
        auto loss_of = [&]() {
            Tensor<double> y = condition_embedder_forward(raw, m.t5_embedder);
            return mean_all(mul(y, y));
        };
        backward(loss_of());
        autograd::NoGradGuard ng;
        Tensor<double>& w = m.t5_embedder.w1;
        Tensor<double> fd = finite_diff_grad(
            [&](const Tensor<double>& v) {
                std::vector<double> saved = w.values();
                w.values() = v.values();
                double out = loss_of().item();
                w.values() = saved;
                return out;
            },
            w, 1e-4);
        for (int64_t i = 0; i < w.numel(); ++i) {
            double a = w.grad()[size_t(i)], f = fd.data()[i];
            if (std::max(std::abs(a), std::abs(f)) > 1e-6) CHECK(oracle::rel_err(a, f) < 1e-4);
        }
    }
    SECTION("masked positions stay zero when biases are zero") {
        ModelConfig cfg = tiny_config();
        Rng r2(52);
        DitModel<float> m = init_model<float>(cfg, r2);  // biases init to zero
        EncodedText<float> e = encode_stub<float>("two words", StubSpec{8, cfg.d_t5, 97, 5});
        Tensor<float> y = condition_embedder_forward(e.tokens, m.t5_embedder);
        for (int64_t i = 2; i < 8; ++i)
            for (int64_t j = 0; j < cfg.d_t5; ++j) CHECK(y.data()[i * cfg.d_t5 + j] == 0.0f);
    }
    SECTION("width mismatch errors") {
        ModelConfig cfg = tiny_config();
        Rng r2(53);
        DitModel<float> m = init_model<float>(cfg, r2);
        CHECK_THROWS_AS(condition_embedder_forward(Tensor<float>::zeros({3, cfg.d_t5 + 1}), m.t5_embedder),
                        Error);
    }
}

TEST_CASE("inject_llm_branch") {
    SECTION("injection preserves outputs exactly") {
        ModelConfig cfg = tiny_config(false);
        Rng rng(54);
        DitModel<float> m = init_model<float>(cfg, rng);
        Rng inj(55);
        DitModel<float> injected = inject_llm_branch(m, inj);
        CHECK(injected.has_llm());
        CHECK(verify_identity(m, injected, 4, Rng(95)) == 0.0);
    }
    SECTION("matching widths copy the K/V weights bit-for-bit") {
        ModelConfig cfg = tiny_config(false, /*d_llm=*/6);  // d_llm == d_t5
        Rng rng(56);
        DitModel<float> m = init_model<float>(cfg, rng);
        Rng inj(57);
        DitModel<float> injected = inject_llm_branch(m, inj);
        for (size_t i = 0; i < injected.blocks.size(); ++i) {
            const auto& t5 = injected.blocks[i].cross_t5;
            const auto& llm = *injected.blocks[i].cross_llm;
            CHECK(bits_equal(t5.wk, llm.wk));
            CHECK(bits_equal(t5.bk, llm.bk));
            CHECK(bits_equal(t5.wv, llm.wv));
            CHECK(bits_equal(t5.bv, llm.bv));
            CHECK(bits_equal(t5.wq, llm.wq));
            CHECK(bits_equal(t5.wo, llm.wo));
        }
    }
    SECTION("width mismatch falls back to fresh K/V and stays an identity") {
        ModelConfig cfg = tiny_config(false, /*d_llm=*/5);
        Rng rng(58);
        DitModel<float> m = init_model<float>(cfg, rng);
        Rng inj(59);
        DitModel<float> injected = inject_llm_branch(m, inj);
        CHECK(injected.blocks[0].cross_llm->wk.shape() == Shape{5, cfg.hidden});
        CHECK(verify_identity(m, injected, 3, Rng(94)) == 0.0);
    }
    SECTION("inject-then-expand and expand-then-inject both hold identity with equal counts") {
        ModelConfig cfg = tiny_config(false);
        Rng rng(60);
        DitModel<float> m = init_model<float>(cfg, rng);
        ExpansionSpec k1 = ExpansionSpec::parse("insert:k=1");

        Rng inj_a(61);
        DitModel<float> a = inject_llm_branch(m, inj_a);
        a = expand_model(a, plan_expansion(a.cfg.blocks, k1, true));

        DitModel<float> b = expand_model(m, plan_expansion(m.cfg.blocks, k1, false));
        Rng inj_b(62);
        b = inject_llm_branch(b, inj_b);

        CHECK(verify_identity(m, a, 3, Rng(93)) == 0.0);
        CHECK(verify_identity(m, b, 3, Rng(93)) == 0.0);
        CHECK(count_parameters(a) == count_parameters(b));
    }
    SECTION("double injection errors") {
        ModelConfig cfg = tiny_config(true);
        Rng rng(63);
        DitModel<float> m = init_model<float>(cfg, rng);
        Rng inj(64);
        CHECK_THROWS_WITH(inject_llm_branch(m, inj), Catch::Matchers::ContainsSubstring("already present"));
    }
    SECTION("modulation linear grows by the llm chunk and copies the t5 columns") {
        ModelConfig cfg = tiny_config(false);
        Rng rng(65);
        DitModel<float> m = init_model<float>(cfg, rng);
        Rng inj(66);
        DitModel<float> injected = inject_llm_branch(m, inj);
        int64_t d = cfg.hidden;
        const auto& w_old = m.blocks[0].mod_w;
        const auto& w_new = injected.blocks[0].mod_w;
        CHECK(w_new.shape() == Shape{d, 14 * d});
        for (int64_t i = 0; i < d; ++i) {
            for (int64_t j = 0; j < 12 * d; ++j)
                CHECK(w_new.data()[i * 14 * d + j] == w_old.data()[i * 12 * d + j]);
            for (int64_t j = 0; j < 2 * d; ++j)
                CHECK(w_new.data()[i * 14 * d + 12 * d + j] == w_old.data()[i * 12 * d + 6 * d + j]);
        }
    }
}

TEST_CASE("build_condition_batch") {
    ModelConfig cfg = tiny_config(true);
    EncoderConfig enc = tiny_encoders(cfg);
    Rng rng(67);
    DitModel<float> m = init_model<float>(cfg, rng);
    TemplateSpec tmpl = enc.tmpl;
    PromptSet a = make_prompt_set("square moving right", "A square drifts right.", tmpl);
    PromptSet b = make_prompt_set("circle moving up", "A circle floats upward.", tmpl);

    SECTION("a batch of one equals the unbatched path") {
        CondBatch<float> cond = build_condition_batch<float>({a}, m, enc);
        EncodedText<float> raw = encode_stub<float>(a.p_sl, enc.t5);
        Tensor<float> expect = mul_mask_rows(
            reshape(condition_embedder_forward(raw.tokens, m.t5_embedder), {1, enc.t5.length, cfg.d_t5}),
            reshape(raw.mask, {1, enc.t5.length}));
        CHECK(bits_equal(cond.c_t5, expect));
    }
    SECTION("permuting the batch permutes the outputs") {
        CondBatch<float> ab = build_condition_batch<float>({a, b}, m, enc);
        CondBatch<float> ba = build_condition_batch<float>({b, a}, m, enc);
        int64_t row = enc.t5.length * cfg.d_t5;
        for (int64_t i = 0; i < row; ++i) {
            CHECK(ab.c_t5.data()[i] == ba.c_t5.data()[row + i]);
            CHECK(ab.c_t5.data()[row + i] == ba.c_t5.data()[i]);
        }
    }
    SECTION("distinct prompts produce distinct rows") {
        CondBatch<float> cond = build_condition_batch<float>({a, b}, m, enc);
        int64_t row = enc.t5.length * cfg.d_t5;
        double diff = 0;
        for (int64_t i = 0; i < row; ++i)
            diff = std::max(diff, std::abs(double(cond.c_t5.data()[i]) - double(cond.c_t5.data()[row + i])));
        CHECK(diff > 1e-4);
    }
    SECTION("llm path encodes the templated prompt") {
        CondBatch<float> cond = build_condition_batch<float>({a}, m, enc);
        REQUIRE(cond.c_llm.has_value());
        EncodedText<float> raw_star = encode_stub<float>(a.p_star, enc.llm);
        Tensor<float> expect = mul_mask_rows(
            reshape(condition_embedder_forward(raw_star.tokens, *m.llm_embedder), {1, enc.llm.length, cfg.d_llm}),
            reshape(raw_star.mask, {1, enc.llm.length}));
        CHECK(bits_equal(*cond.c_llm, expect));
    }
}

TEST_CASE("injection invariance for model_forward") {
    ModelConfig cfg = tiny_config(false);
    Rng rng(68);
    DitModel<float> m = init_model<float>(cfg, rng);
    Rng inj(69);
    DitModel<float> injected = inject_llm_branch(m, inj);
    autograd::NoGradGuard ng;
    for (int probe = 0; probe < 4; ++probe) {
        Rng prng(100 + uint64_t(probe));
        Tensor<float> z = tensor_randn<float>({2, cfg.channels, cfg.frames, cfg.height, cfg.width}, prng);
        CondBatch<float> c1;
        c1.c_t5 = tensor_randn<float>({2, 5, cfg.d_t5}, prng);
        c1.mask_t5 = Tensor<float>::full({2, 5}, 1.0f);
        CondBatch<float> c2 = c1;
        c2.c_llm = tensor_randn<float>({2, 5, injected.cfg.d_llm}, prng);
        c2.mask_llm = Tensor<float>::full({2, 5}, 1.0f);
        std::vector<int64_t> ts{int64_t(prng.uniform_int(1000)), int64_t(prng.uniform_int(1000))};
        CHECK(bits_equal(model_forward(m, z, ts, c1), model_forward(injected, z, ts, c2)));
    }
}

TEST_CASE("encoder stubs are frozen: no gradient reaches the raw embeddings") {
    ModelConfig cfg = tiny_config(true);
    EncoderConfig enc = tiny_encoders(cfg);
    Rng rng(70);
    DitModel<double> m = init_model<double>(cfg, rng);
    PromptSet a = make_prompt_set("spark moving left", "A spark darts left.", enc.tmpl);
    EncodedText<double> raw = encode_stub<double>(a.p_sl, enc.t5);
    CHECK_FALSE(raw.tokens.requires_grad());
    Tensor<double> emb = condition_embedder_forward(raw.tokens, m.t5_embedder);
    backward(mean_all(mul(emb, emb)));
    CHECK(raw.tokens.grad().empty());        // leaf without requires_grad collects nothing
    CHECK_FALSE(m.t5_embedder.w1.grad().empty());
}

TEST_CASE("prompt construction is losslessly invertible") {
    TemplateSpec tmpl = default_llm_template();
    std::string p = "anchor holding still";
    std::string p_l = "An anchor blob sits fixed at the center.";
    PromptSet ps = make_prompt_set(p, p_l, tmpl);
    CHECK(strip_llm_template(ps.p_star, tmpl) == ps.p_sl);
    std::string sep = ". ";
    size_t cut = ps.p_sl.find(sep);
    CHECK(ps.p_sl.substr(0, cut) == p);
    CHECK(ps.p_sl.substr(cut + sep.size()) == p_l);
}

TEST_CASE("prompt file loading") {
    std::string path = "test_prompts.tsv";
    {
        std::ofstream f(path, std::ios::binary);
        f << "a cat\tThe cat naps in the sun.\n";
        f << "a dog\n";
        f << "\n";
        f << "a bird\tThe bird sings.\textra\n";
    }
    auto rows = load_prompt_file(path);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].first == "a cat");
    CHECK(rows[0].second == "The cat naps in the sun.");
    CHECK(rows[1].first == "a dog");
    CHECK(rows[1].second == "");
    CHECK(rows[2].second == "The bird sings.\textra");
    std::remove(path.c_str());
    CHECK_THROWS_AS(load_prompt_file("does_not_exist.tsv"), Error);
}

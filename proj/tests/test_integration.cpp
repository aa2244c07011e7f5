#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "grow/dataset.hpp"
#include "grow/diffusion.hpp"
#include "grow/expansion.hpp"

using namespace grow;

namespace {

ModelConfig train_config() {
    ModelConfig cfg;
    cfg.channels = 4;
    cfg.frames = 4;
    cfg.height = 5;
    cfg.width = 5;
    cfg.hidden = 16;
    cfg.heads = 4;
    cfg.blocks = 2;
    cfg.ffn_mult = 2;
    cfg.d_t5 = 16;
    cfg.d_llm = 16;
    cfg.llm_branch = false;
    return cfg;
}

EncoderConfig encoders(const ModelConfig& cfg) {
    EncoderConfig enc;
    enc.t5 = StubSpec{16, cfg.d_t5, 1024, 17};
    enc.llm = StubSpec{20, cfg.d_llm, 2048, 23};
    return enc;
}

}  // namespace

TEST_CASE("a trained model keeps learning across the expansion boundary") {
    ModelConfig cfg = train_config();
    EncoderConfig enc = encoders(cfg);
    NoiseSchedule sched = NoiseSchedule::linear();
    SyntheticDataset<float> data = gen_synthetic_dataset<float>(64, cfg, 31337, enc);

    Rng init(1, 0xA11);
    DitModel<float> model = init_model<float>(cfg, init);

    TrainOptions opt;
    opt.steps = 400;
    opt.batch = 4;
    opt.adam.lr = 1e-3;
    AdamState<float> st;
    Rng train_rng(1, 0x7EA1);
    auto metrics = train_loop(model, data.examples, enc, sched, opt, st, train_rng);

    double lead = 0, trail = 0;
    for (int i = 0; i < 50; ++i) {
        lead += metrics[size_t(i)].loss;
        trail += metrics[metrics.size() - 50 + size_t(i)].loss;
    }
    lead /= 50;
    trail /= 50;
    INFO("lead50=" << lead << " trail50=" << trail);
    CHECK(trail < lead);

    // fixed probe for the continuity check
    Rng probe(2);
    Tensor<float> z0 = Tensor<float>::zeros({2, cfg.channels, cfg.frames, cfg.height, cfg.width});
    std::copy(data.examples[0].latent.begin(), data.examples[0].latent.end(), z0.data());
    std::copy(data.examples[1].latent.begin(), data.examples[1].latent.end(),
              z0.data() + data.examples[0].latent.size());
    Tensor<float> eps = tensor_randn<float>(z0.shape(), probe);
    std::vector<int64_t> ts{123, 789};
    std::vector<CondFlags> flags{{true, true}, {true, true}};
    std::vector<PromptSet> prompts{data.examples[0].prompts, data.examples[1].prompts};
    auto probe_loss = [&](const DitModel<float>& m) {
        autograd::NoGradGuard ng;
        CondBatch<float> cond = build_condition_batch(prompts, m, enc);
        return training_loss_fixed(m, z0, cond, sched, ts, eps, flags).item();
    };

    float before = probe_loss(model);
    ExpansionPlan plan = plan_expansion(model.cfg.blocks, ExpansionSpec::parse("insert:k=1"));
    DitModel<float> grown = expand_model(model, plan);

    SECTION("the boundary is seamless and training then moves the expanded model") {
        CHECK(verify_identity(model, grown, 4, Rng(3)) == 0.0);
        float after = probe_loss(grown);
        CHECK(std::memcmp(&before, &after, sizeof(float)) == 0);

        TrainOptions cont = opt;
        cont.steps = 50;
        AdamState<float> st2;  // fresh moments for the grown stack
        Rng cont_rng(1, 0xC047);
        auto more = train_loop(grown, data.examples, enc, sched, cont, st2, cont_rng);
        for (const auto& m : more) CHECK(std::isfinite(m.loss));
        double resumed = 0;
        for (const auto& m : more) resumed += m.loss;
        resumed /= double(more.size());
        INFO("trail50=" << trail << " resumed50=" << resumed);
        CHECK(resumed < 1.5 * trail + 0.05);        // no post-growth blow-up
        CHECK(verify_identity(model, grown, 4, Rng(3)) > 0.0);  // training separated the copies
    }

    SECTION("DDIM samples land nearer the data statistics than N(0,1)") {
        // finish training the grown stack a little so sampling is meaningful
        TrainOptions cont = opt;
        cont.steps = 200;
        AdamState<float> st2;
        Rng cont_rng(1, 0xC048);
        train_loop(grown, data.examples, enc, sched, cont, st2, cont_rng);

        // class-conditional reference statistics: "square moving right"
        int64_t plane = cfg.frames * cfg.height * cfg.width;
        std::vector<double> data_mean(size_t(cfg.channels), 0.0);
        Rng starts(91);
        const int refs = 50;
        for (int r = 0; r < refs; ++r) {
            std::vector<float> z = blob_latent<float>(cfg, 0, 0, starts.uniform() * cfg.height,
                                                      starts.uniform() * cfg.width);
            for (int64_t c = 0; c < cfg.channels; ++c)
                for (int64_t i = 0; i < plane; ++i)
                    data_mean[size_t(c)] += double(z[size_t(c * plane + i)]) / double(plane * refs);
        }

        PromptSet ps = make_prompt_set(blob_short_prompt(0, 0), blob_long_prompt(0, 0, cfg.frames),
                                       enc.tmpl, enc.separator);
        std::vector<PromptSet> batch_prompts(8, ps);
        CondBatch<float> cond = build_condition_batch(batch_prompts, grown, enc);
        Rng sample_rng(17);
        Tensor<float> samples =
            ddim_sample(grown, 8, cond, GuidanceScales{1.0, 0.0}, 40, sample_rng, sched);

        std::vector<double> sample_mean(size_t(cfg.channels), 0.0);
        for (int64_t b = 0; b < 8; ++b)
            for (int64_t c = 0; c < cfg.channels; ++c)
                for (int64_t i = 0; i < plane; ++i)
                    sample_mean[size_t(c)] +=
                        double(samples.data()[(b * cfg.channels + c) * plane + i]) / double(plane * 8);

        double to_data = 0, to_noise = 0;
        for (int64_t c = 0; c < cfg.channels; ++c) {
            to_data += (sample_mean[size_t(c)] - data_mean[size_t(c)]) *
                       (sample_mean[size_t(c)] - data_mean[size_t(c)]);
            to_noise += sample_mean[size_t(c)] * sample_mean[size_t(c)];  // N(0,1) has zero mean
        }
        to_data = std::sqrt(to_data);
        to_noise = std::sqrt(to_noise);
        INFO("dist to data=" << to_data << " dist to N(0,1)=" << to_noise);
        CHECK(2.0 * to_data <= to_noise);
    }
}

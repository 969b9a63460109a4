#include <gtest/gtest.h>

#include "cen/blocks.hpp"
#include "cen/gradcheck.hpp"

using namespace cen;

namespace {

using TF = Tensor<float>;
using TD = Tensor<double>;

template <typename Block>
void fill_params(Block& b, Rng& rng, double scale = 0.5) {
    visit_parameters(b, "x", [&](const std::string&, auto& t) {
        for (auto& v : t.data()) v = static_cast<typename std::decay_t<decltype(t)>::value_type>(rng.uniform(-scale, scale));
    });
}

template <typename Block>
void zero_params(Block& b) {
    visit_parameters(b, "x", [&](const std::string& name, auto& t) {
        if (!name.ends_with(".slope")) std::fill(t.data().begin(), t.data().end(), 0);
    });
}

TD random_d(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) { return detail::random_tensor(rng, s, lo, hi); }

bool same_values(const TD& a, const TD& b) {
    return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

double max_abs_diff(const TD& a, const TD& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

NetworkConfig tiny(bool gc, bool lc, int m = 2, int width = 4) {
    NetworkConfig cfg;
    cfg.num_stages = m;
    cfg.base_channels = width;
    cfg.use_global_context = gc;
    cfg.use_local_context = lc;
    return cfg;
}

// Spatial permutation of (n, c, h, w) positions, applied per channel.
TD permute_positions(const TD& z, const std::vector<std::size_t>& perm) {
    const Shape s = z.shape();
    TD out(s);
    const std::size_t np = s.h * s.w;
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t p = 0; p < np; ++p) out.data()[(n * s.c + c) * np + p] = z.data()[(n * s.c + c) * np + perm[p]];
    return out;
}

}  // namespace

// --- BasicBlock ---------------------------------------------------------------

TEST(BasicBlock, ZeroWeightsGiveZero) {
    BasicBlock<double> b(3, 5);
    Rng rng(1);
    const TD y = basic_block_forward(b, random_d(rng, {1, 3, 8, 8}));
    EXPECT_EQ(y.shape(), (Shape{1, 5, 8, 8}));
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(BasicBlock, MatchesOpComposition) {
    BasicBlock<double> b(3, 4);
    Rng rng(2);
    fill_params(b, rng);
    const TD x = random_d(rng, {2, 3, 6, 6});
    const TD ref = prelu(conv2d(prelu(conv2d(x, b.conv1.weight, b.conv1.bias, 1, 1), b.act1), b.conv2.weight,
                                b.conv2.bias, 1, 1),
                         b.act2);
    EXPECT_TRUE(same_values(basic_block_forward(b, x), ref));
}

TEST(BasicBlock, ChannelMismatch) {
    BasicBlock<float> b(3, 4);
    EXPECT_THROW(basic_block_forward(b, TF(Shape{1, 2, 4, 4})), DimensionError);
}

// --- DenseResidualBlock -------------------------------------------------------

TEST(DenseResidualBlock, ZeroWeightsIsIdentity) {
    DenseResidualBlock<double> b(6);
    Rng rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        const TD x = random_d(rng, {2, 6, 5, 7}, -10.0, 10.0);
        EXPECT_TRUE(same_values(drb_forward(b, x), x));
    }
}

TEST(DenseResidualBlock, ConcatenationArithmetic) {
    DenseResidualBlock<float> b(16);
    EXPECT_EQ(b.layers[0].in_channels(), 16u);
    EXPECT_EQ(b.layers[1].in_channels(), 32u);
    EXPECT_EQ(b.layers[2].in_channels(), 48u);
    for (const auto& l : b.layers) EXPECT_EQ(l.out_channels(), 16u);
    Tape<float> tape;
    const TF y = drb_forward(b, TF(Shape{1, 16, 8, 8}, 0.5f));
    EXPECT_EQ(y.shape(), (Shape{1, 16, 8, 8}));
    EXPECT_EQ(tape.count("drb/concat_channels"), 2u);
    EXPECT_EQ(tape.count("drb/conv2d"), 3u);
}

TEST(DenseResidualBlock, MatchesOpComposition) {
    DenseResidualBlock<double> b(3);
    Rng rng(4);
    fill_params(b, rng);
    const TD f = random_d(rng, {1, 3, 6, 6});
    const auto conv = [&](std::size_t l, const TD& x) { return conv2d(x, b.layers[l].weight, b.layers[l].bias, 1, 1); };
    const TD y1 = prelu(conv(0, f), b.acts[0]);
    const TD y2 = prelu(conv(1, concat_channels({f, y1})), b.acts[1]);
    const TD y3 = conv(2, concat_channels({f, y1, y2}));
    EXPECT_TRUE(same_values(drb_forward(b, f), add(f, y3)));
}

TEST(DenseResidualBlock, ChannelMismatch) {
    DenseResidualBlock<float> b(4);
    EXPECT_THROW(drb_forward(b, TF(Shape{1, 3, 4, 4})), DimensionError);
}

// --- NonLocalBlock ------------------------------------------------------------

TEST(NonLocal, InnerWidthIsHalfRoundedUp) {
    EXPECT_EQ(NonLocalBlock<float>(8).query.out_channels(), 4u);
    EXPECT_EQ(NonLocalBlock<float>(5).query.out_channels(), 3u);
    EXPECT_EQ(NonLocalBlock<float>(1).query.out_channels(), 1u);
}

TEST(NonLocal, ZeroOutputProjectionIsIdentity) {
    NonLocalBlock<double> b(6);
    Rng rng(5);
    fill_params(b, rng);
    std::fill(b.out.weight.data().begin(), b.out.weight.data().end(), 0.0);
    std::fill(b.out.bias.data().begin(), b.out.bias.data().end(), 0.0);
    const TD z = random_d(rng, {2, 6, 4, 3});
    EXPECT_TRUE(same_values(nonlocal_forward(b, z), z));
}

TEST(NonLocal, SinglePositionHandEvaluation) {
    NonLocalBlock<double> b(1);
    Rng rng(6);
    fill_params(b, rng);  // query/key arbitrary
    b.value.weight.data()[0] = 3.0;
    b.value.bias.data()[0] = 0.0;
    b.out.weight.data()[0] = 0.5;
    b.out.bias.data()[0] = 0.0;
    const TD y = nonlocal_forward(b, TD(Shape{1, 1, 1, 1}, 2.0));
    EXPECT_EQ(nonlocal_attention(b, TD(Shape{1, 1, 1, 1}, 2.0)).item(), 1.0);
    EXPECT_DOUBLE_EQ(y.item(), 5.0);
}

TEST(NonLocal, SpatiallyConstantInput) {
    NonLocalBlock<double> b(4);
    Rng rng(7);
    fill_params(b, rng);
    TD z(Shape{1, 4, 3, 5});
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t i = 0; i < 15; ++i) z.data()[c * 15 + i] = 0.1 * static_cast<double>(c) - 0.2;
    const TD a = nonlocal_attention(b, z);
    for (double v : a.data()) EXPECT_NEAR(v, 1.0 / 15.0, 1e-15);
    const TD y = nonlocal_forward(b, z);
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t i = 1; i < 15; ++i) EXPECT_NEAR(y.data()[c * 15 + i], y.data()[c * 15], 1e-14);
}

TEST(NonLocal, AttentionRowsStochasticProperty) {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        NonLocalBlock<float> b(8);
        fill_params(b, rng, 1.0);
        const TF z = random_d(rng, {2, 8, 4, 4}, -2.0, 2.0).cast<float>();
        const TF a = nonlocal_attention(b, z);
        const std::size_t np = 16;
        ASSERT_EQ(a.shape(), (Shape{2, 1, np, np}));
        for (std::size_t r = 0; r < 2 * np; ++r) {
            double s = 0.0;
            for (std::size_t j = 0; j < np; ++j) {
                EXPECT_GE(a.data()[r * np + j], 0.0f);
                s += a.data()[r * np + j];
            }
            EXPECT_NEAR(s, 1.0, 1e-5);
        }
    }
}

TEST(NonLocal, PermutationEquivarianceProperty) {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        NonLocalBlock<float> b(6);
        fill_params(b, rng, 0.8);
        const TD zd = random_d(rng, {1, 6, 3, 4});
        std::vector<std::size_t> perm(12);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
        std::vector<std::size_t> inverse(12);
        for (std::size_t i = 0; i < 12; ++i) inverse[perm[i]] = i;
        const TF z = zd.cast<float>();
        const TD direct = nonlocal_forward(b, z).cast<double>();
        const TD permuted = nonlocal_forward(b, permute_positions(zd, perm).cast<float>()).cast<double>();
        EXPECT_LT(max_abs_diff(permute_positions(permuted, inverse), direct), 1e-5);
    }
}

// --- stages -------------------------------------------------------------------

TEST(Stages, EncoderShapesAndSkipIdentity) {
    auto net = make_network<float>(tiny(false, false, 2, 8), 1);
    const TF x(Shape{1, 3, 64, 64}, 0.5f);
    const auto out = net.encoder_stage(0, x);
    EXPECT_EQ(out.skip.shape(), (Shape{1, 8, 64, 64}));
    EXPECT_EQ(out.pooled.shape(), (Shape{1, 8, 32, 32}));
    const TF direct = feature_block_forward(net.encoder_block(0), x);
    EXPECT_TRUE(std::equal(direct.data().begin(), direct.data().end(), out.skip.data().begin()));
    EXPECT_THROW(net.encoder_stage(0, TF(Shape{1, 3, 63, 64})), DimensionError);
}

TEST(Stages, EncoderChainHalvesPerStage) {
    for (int m : {1, 2, 3}) {
        auto net = make_network<float>(tiny(false, false, m, 2), 2);
        const std::size_t s = 3;
        TF f(Shape{1, 3, (std::size_t{1} << m) * s, (std::size_t{1} << m) * s}, 0.1f);
        for (int i = 0; i < m; ++i) f = net.encoder_stage(i, f).pooled;
        EXPECT_EQ(f.shape().h, s);
        EXPECT_EQ(f.shape().w, s);
    }
}

TEST(Stages, DecoderConcatenatesUpsampleAndSkip) {
    auto net = make_network<float>(tiny(false, false, 2, 4), 3);
    // Level-1 decoder: z has width(2)=16 at 16x16, skip width(1)=8 at 32x32.
    const auto& blk = std::get<BasicBlock<float>>(net.decoder_block(1));
    EXPECT_EQ(blk.conv1.in_channels(), 16u + 8u);
    const TF y = net.decoder_stage(1, TF(Shape{1, 16, 16, 16}, 0.1f), TF(Shape{1, 8, 32, 32}, 0.2f));
    EXPECT_EQ(y.shape(), (Shape{1, 8, 32, 32}));
    EXPECT_THROW(net.decoder_stage(1, TF(Shape{1, 16, 8, 8}), TF(Shape{1, 8, 32, 32})), DimensionError);
}

TEST(Stages, DecoderZeroWeightsGiveZero) {
    auto net = make_network<float>(tiny(false, false, 2, 4), 4);
    for (auto& p : net.parameters())
        if (p.name.starts_with("dec0.") && !p.name.ends_with(".slope")) std::fill(p.value.data().begin(), p.value.data().end(), 0.f);
    const TF y = net.decoder_stage(0, TF(Shape{1, 8, 4, 4}, 0.3f), TF(Shape{1, 4, 8, 8}, 0.7f));
    for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

// --- network ------------------------------------------------------------------

TEST(Network, ShapeContractAllVariants) {
    for (bool gc : {false, true})
        for (bool lc : {false, true}) {
            auto net = make_network<float>(tiny(gc, lc, 2, 8), 5);
            const TF y = net.forward(TF(Shape{1, 3, 64, 64}, 0.4f));
            EXPECT_EQ(y.shape(), (Shape{1, 3, 64, 64}));
            const TF y2 = net.forward(TF(Shape{2, 3, 12, 20}, 0.4f));
            EXPECT_EQ(y2.shape(), (Shape{2, 3, 12, 20}));
        }
}

TEST(Network, IndivisibleExtentNamesDivisor) {
    auto net = make_network<float>(tiny(true, true, 3, 2), 6);
    try {
        (void)net.forward(TF(Shape{1, 3, 20, 16}));
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("8"), std::string::npos) << e.what();
    }
    EXPECT_THROW((void)net.forward(TF(Shape{1, 4, 16, 16})), DimensionError);
}

TEST(Network, StructuralCensus) {
    const auto baseline = Network<float>(tiny(false, false)).census();
    const auto gc = Network<float>(tiny(true, false)).census();
    const auto lc = Network<float>(tiny(false, true)).census();
    const auto full = Network<float>(tiny(true, true)).census();
    const std::size_t blocks = 2 * 2 + 1;
    EXPECT_EQ(baseline.nonlocal_blocks, 0u);
    EXPECT_EQ(baseline.dense_blocks, 0u);
    EXPECT_EQ(baseline.basic_blocks, blocks);
    EXPECT_EQ(gc.nonlocal_blocks, 1u);
    EXPECT_EQ(gc.basic_blocks, blocks);
    EXPECT_EQ(lc.dense_blocks, blocks);
    EXPECT_EQ(lc.basic_blocks, 0u);
    EXPECT_EQ(full.nonlocal_blocks, 1u);
    EXPECT_EQ(full.dense_blocks, blocks);
    EXPECT_GT(full.parameter_count, baseline.parameter_count);
    EXPECT_GT(gc.parameter_count, baseline.parameter_count);
    EXPECT_GT(lc.parameter_count, baseline.parameter_count);
}

TEST(Network, OperationCensusFollowsFlags) {
    for (bool gc : {false, true})
        for (bool lc : {false, true}) {
            auto net = make_network<float>(tiny(gc, lc), 7);
            Tape<float> tape;
            (void)net.forward(TF(Shape{1, 3, 16, 16}, 0.5f));
            EXPECT_EQ(tape.count("softmax_rows") > 0, gc);
            EXPECT_EQ(tape.count("nonlocal/matmul") > 0, gc);
            EXPECT_EQ(tape.count("drb/concat_channels") > 0, lc);
            EXPECT_EQ(tape.count("basic_block/conv2d") > 0, !lc);
        }
}

TEST(Network, ExtraContextLevels) {
    NetworkConfig cfg = tiny(true, false, 2, 4);
    cfg.global_context_levels = {1, 2};
    auto net = make_network<float>(cfg, 8);
    EXPECT_EQ(net.census().nonlocal_blocks, 2u);
    EXPECT_NE(net.context_block(1), nullptr);
    EXPECT_EQ(net.context_block(0), nullptr);
    EXPECT_EQ(net.forward(TF(Shape{1, 3, 8, 8}, 0.2f)).shape(), (Shape{1, 3, 8, 8}));
}

TEST(Network, BilinearUpsamplingVariant) {
    NetworkConfig cfg = tiny(true, true);
    cfg.upsample = UpsampleMode::bilinear;
    auto net = make_network<float>(cfg, 9);
    Tape<float> tape;
    EXPECT_EQ(net.forward(TF(Shape{1, 3, 8, 8}, 0.2f)).shape(), (Shape{1, 3, 8, 8}));
    EXPECT_EQ(tape.count("upsample_nearest2x"), 0u);
    EXPECT_EQ(tape.count("upsample_bilinear2x"), 2u);
}

// --- initialization -----------------------------------------------------------

TEST(Init, SameSeedBitIdentical) {
    const auto a = make_network<float>(tiny(true, true), 42);
    const auto b = make_network<float>(tiny(true, true), 42);
    const auto c = make_network<float>(tiny(true, true), 43);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
        const auto x = a.parameters()[i].value.data();
        const auto y = b.parameters()[i].value.data();
        const auto z = c.parameters()[i].value.data();
        EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin())) << a.parameters()[i].name;
        any_diff |= !std::equal(x.begin(), x.end(), z.begin());
    }
    EXPECT_TRUE(any_diff);
}

TEST(Init, ContractsPerParameterKind) {
    const auto net = make_network<float>(tiny(true, true, 2, 8), 10);
    for (const auto& p : net.parameters()) {
        const auto d = p.value.data();
        if (p.name.ends_with(".slope")) {
            for (float v : d) EXPECT_EQ(v, 0.25f) << p.name;
        } else if (p.name.ends_with(".bias") || is_context_output_weight(p.name)) {
            for (float v : d) EXPECT_EQ(v, 0.0f) << p.name;
        } else {
            const Shape& s = p.value.shape();
            const double bound = std::sqrt(6.0 / ((1.0 + 0.0625) * static_cast<double>(s.c * s.h * s.w)));
            for (float v : d) EXPECT_LE(std::abs(v), bound) << p.name;
        }
    }
}

TEST(Init, FreshContextBlockChangesNothing) {
    const auto full = make_network<float>(tiny(true, true, 2, 8), 11);
    Network<float> no_gc(tiny(false, true, 2, 8));
    for (auto& p : no_gc.parameters()) {
        const Tensor<float>* src = const_cast<Network<float>&>(full).find(p.name);
        ASSERT_NE(src, nullptr) << p.name;
        std::copy(src->data().begin(), src->data().end(), p.value.data().begin());
    }
    Rng rng(12);
    const TF x = random_d(rng, {1, 3, 16, 16}, 0.0, 1.0).cast<float>();
    const TF a = full.forward(x);
    const TF b = no_gc.forward(x);
    EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(Init, InferConfigRoundTrip) {
    for (bool gc : {false, true})
        for (bool lc : {false, true}) {
            NetworkConfig cfg = tiny(gc, lc, 3, 6);
            const Network<float> net(cfg);
            std::map<std::string, Shape> shapes;
            for (const auto& p : net.parameters()) shapes.emplace(p.name, p.value.shape());
            EXPECT_TRUE(infer_network_config(shapes) == cfg);
        }
}

// --- gradients ----------------------------------------------------------------

TEST(BlockGradients, AllBlocksAndTinyNetwork) {
    GradcheckSuiteOptions opts;
    opts.op_trials = 1;
    const auto report = run_gradcheck_suite(opts);
    for (const char* name : {"basic_block", "dense_residual_block", "nonlocal_block", "network_full", "network_baseline"}) {
        const auto* r = report.find(name);
        ASSERT_NE(r, nullptr) << name;
        EXPECT_LT(r->max_rel_error(), 1e-3) << name;
    }
}

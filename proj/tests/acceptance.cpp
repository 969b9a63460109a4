// Acceptance checks, one per criterion. Usage: acceptance [N ...]
// Prints one "criterion N: PASS|FAIL ..." line per criterion and exits
// nonzero if any selected criterion fails.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

#include "cen/gradcheck.hpp"
#include "cen/pipeline.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace cen;
using cen::test::TempDir;

namespace {

// Pinned tolerances and budgets.
constexpr double kOpGradTol = 1e-4;
constexpr double kNetGradTol = 1e-3;
constexpr std::size_t kMinOpTrials = 20;
constexpr double kGradBudgetS = 60;
constexpr double kAttentionRowTol = 1e-5;
constexpr double kEquivarianceTol = 1e-5;
constexpr double kBlockBudgetS = 5;
constexpr double kShapeBudgetS = 10;
constexpr double kOverfitPsnrDb = 30;
constexpr std::uint64_t kOverfitMaxIters = 2000;
constexpr double kOverfitBudgetS = 600;
constexpr double kAdamRelTol = 1e-6;
constexpr double kAdamMinGrad = 1e-3;
constexpr double kPsnrTol = 1e-3;
constexpr double kSsimOracleTol = 1e-4;
constexpr int kSsimPairs = 10;
constexpr int kCodecImages = 100;

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            if (!detail.empty()) detail += "; ";
            detail += what;
        }
    }
    void note(const std::string& what) {
        if (!detail.empty()) detail += "; ";
        detail += what;
    }
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

using TD = Tensor<double>;
using TF = Tensor<float>;

template <typename Block>
void randomize(Block& b, Rng& rng, double scale) {
    visit_parameters(b, "x", [&](const std::string&, auto& t) {
        using V = typename std::decay_t<decltype(t)>::value_type;
        for (auto& v : t.data()) v = static_cast<V>(rng.uniform(-scale, scale));
    });
}

template <typename Block>
void zero_weights(Block& b) {
    visit_parameters(b, "x", [&](const std::string& name, auto& t) {
        if (!name.ends_with(".slope")) std::fill(t.data().begin(), t.data().end(), 0);
    });
}

bool identical(const TD& a, const TD& b) {
    return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

// --- 1 --------------------------------------------------------------------------

Outcome gradients() {
    Outcome o;
    GradcheckSuiteOptions opts;
    opts.op_trials = kMinOpTrials;
    opts.op_tolerance = kOpGradTol;
    opts.block_tolerance = kNetGradTol;
    const GradcheckReport report = run_gradcheck_suite(opts);
    const std::set<std::string> composite{"basic_block", "dense_residual_block", "nonlocal_block", "network_baseline",
                                          "network_full"};
    double worst_op = 0, worst_net = 0;
    std::size_t ops = 0;
    for (const auto& r : report.results) {
        if (composite.count(r.op)) {
            o.require(r.tolerance <= kNetGradTol, r.op + " tolerance above " + fmt("%g", kNetGradTol));
            worst_net = std::max(worst_net, r.max_rel_error());
        } else {
            ++ops;
            o.require(r.tolerance <= kOpGradTol, r.op + " tolerance above " + fmt("%g", kOpGradTol));
            o.require(r.trials >= kMinOpTrials, r.op + " ran " + std::to_string(r.trials) + " trials");
            worst_op = std::max(worst_op, r.max_rel_error());
        }
        o.require(r.passed(), r.op + " max_rel_err " + fmt("%.3g", r.max_rel_error()));
    }
    o.require(report.find("network_full") != nullptr, "network_full missing");
    o.note(std::to_string(ops) + " ops max_rel_err " + fmt("%.2e", worst_op) + ", blocks/network " +
           fmt("%.2e", worst_net));
    return o;
}

// --- 2 --------------------------------------------------------------------------

Outcome nonlocal_invariants() {
    Outcome o;
    Rng rng(2);
    double worst_row = 0, worst_perm = 0;
    bool exact_identity = true;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t c = 2 + rng.below(7), h = 1 + rng.below(5), w = 1 + rng.below(5);
        NonLocalBlock<float> b(c);
        randomize(b, rng, 1.0);
        const TD zd = detail::random_tensor(rng, Shape{2, c, h, w}, -2.0, 2.0);
        const TF z = zd.cast<float>();

        const TF a = nonlocal_attention(b, z);
        const std::size_t np = h * w;
        for (std::size_t r = 0; r < 2 * np; ++r) {
            double s = 0;
            for (std::size_t j = 0; j < np; ++j) s += a.data()[r * np + j];
            worst_row = std::max(worst_row, std::abs(s - 1.0));
        }

        std::vector<std::size_t> perm(np);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        for (std::size_t i = np; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
        auto apply = [&](const TF& t, bool inverse) {
            TF out(t.shape());
            for (std::size_t n = 0; n < 2; ++n)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t p = 0; p < np; ++p) {
                        const std::size_t base = (n * c + ch) * np;
                        if (inverse)
                            out.data()[base + perm[p]] = t.data()[base + p];
                        else
                            out.data()[base + p] = t.data()[base + perm[p]];
                    }
            return out;
        };
        const TF direct = nonlocal_forward(b, z);
        const TF back = apply(nonlocal_forward(b, apply(z, false)), true);
        for (std::size_t i = 0; i < direct.numel(); ++i)
            worst_perm = std::max(worst_perm, std::abs(double(direct.data()[i]) - back.data()[i]));

        NonLocalBlock<double> bd(c);
        randomize(bd, rng, 1.0);
        std::fill(bd.out.weight.data().begin(), bd.out.weight.data().end(), 0.0);
        std::fill(bd.out.bias.data().begin(), bd.out.bias.data().end(), 0.0);
        exact_identity = exact_identity && identical(nonlocal_forward(bd, zd), zd);
    }
    o.require(worst_row < kAttentionRowTol, "row sum error " + fmt("%.2e", worst_row));
    o.require(exact_identity, "zero output projection is not an exact identity");
    o.require(worst_perm < kEquivarianceTol, "permutation error " + fmt("%.2e", worst_perm));
    o.note("row sum err " + fmt("%.1e", worst_row) + ", permutation err " + fmt("%.1e", worst_perm));
    return o;
}

// --- 3 --------------------------------------------------------------------------

Outcome drb_invariants() {
    Outcome o;
    Rng rng(3);
    for (std::size_t cin : {1u, 3u, 8u, 16u}) {
        DenseResidualBlock<double> b(cin);
        for (std::size_t l = 0; l < b.layers.size(); ++l)
            o.require(b.layers[l].in_channels() == cin * (l + 1),
                      "layer " + std::to_string(l + 1) + " input width " + std::to_string(b.layers[l].in_channels()));
        const TD x = detail::random_tensor(rng, Shape{2, cin, 5, 6}, -3.0, 3.0);
        zero_weights(b);
        o.require(identical(drb_forward(b, x), x), "zero weights not identity at Cin=" + std::to_string(cin));
        randomize(b, rng, 0.5);
        o.require(drb_forward(b, x).shape() == x.shape(), "shape changed at Cin=" + std::to_string(cin));
    }
    return o;
}

// --- 4 --------------------------------------------------------------------------

Outcome architecture() {
    Outcome o;
    std::size_t checked = 0;
    for (int m : {1, 2, 3})
        for (std::size_t s : {1u, 2u, 3u})
            for (const auto& v : ablation_variants()) {
                NetworkConfig nc;
                nc.num_stages = m;
                nc.base_channels = 4;
                nc.use_global_context = v.global_context;
                nc.use_local_context = v.local_context;
                const auto net = make_network<float>(nc, 4);
                const std::size_t side = (std::size_t{1} << m) * s;
                const Shape in{1, 3, side, side};
                const TF y = net.forward(TF(in, 0.5f));
                o.require(y.shape() == in, v.name + " m=" + std::to_string(m) + " maps to " + y.shape().str());
                const StructureCensus c = net.census();
                const std::size_t blocks = 2 * static_cast<std::size_t>(m) + 1;
                o.require(c.nonlocal_blocks == (v.global_context ? 1u : 0u), v.name + " nonlocal count");
                o.require(c.dense_blocks == (v.local_context ? blocks : 0u), v.name + " dense count");
                o.require(c.basic_blocks == (v.local_context ? 0u : blocks), v.name + " basic count");
                ++checked;
            }
    o.note(std::to_string(checked) + " variant/shape combinations");
    return o;
}

// --- 5 --------------------------------------------------------------------------

Outcome overfit() {
    Outcome o;
    TempDir dir("cen_overfit");
    const auto [input, target] = cen::test::synthetic_pair(64, 64);
    cen::test::write_pair(dir / "data", "pair", input, target);
    RunConfig cfg;
    cfg.network.num_stages = 2;
    cfg.network.base_channels = 8;
    cfg.network.use_global_context = true;
    cfg.network.use_local_context = true;
    cfg.schedule.initial_lr = 1e-3;
    cfg.schedule.decay_factor = 2;
    cfg.schedule.decay_every = 500;
    cfg.schedule.total_iters = kOverfitMaxIters;
    cfg.augment = {64, false, false, 1};
    cfg.seed = 1;
    cfg.data_root = dir / "data";
    cfg.output_dir = dir / "run";
    cfg.checkpoint_every = kOverfitMaxIters;
    cfg.log_every = 250;
    const TrainResult r = train(cfg);
    const double p = psnr(enhance(r.network, input), target);
    o.require(r.losses.size() <= kOverfitMaxIters, "ran " + std::to_string(r.losses.size()) + " iterations");
    o.require(p > kOverfitPsnrDb, "psnr " + fmt("%.2f", p) + " dB");
    o.note("psnr " + fmt("%.2f", p) + " dB after " + std::to_string(r.losses.size()) + " iterations");
    return o;
}

// --- 6 --------------------------------------------------------------------------

Outcome optimizer() {
    Outcome o;
    const double lr = 1e-4;
    double worst = 0, worst_g = 0;
    for (double mag : {kAdamMinGrad, 2e-3, 5e-3, 1e-2, 0.1, 1.0, 3.0, 100.0, 1e4})
        for (double sign : {1.0, -1.0}) {
            const double g = sign * mag;
            Adam<float> adam;
            std::vector<Parameter<float>> ps{{"p", TF::scalar(0.0f)}};
            ps[0].value.set_requires_grad();
            ps[0].value.ensure_grad()[0] = static_cast<float>(g);
            adam.step(ps, lr);
            const double expected = -lr * sign;
            const double rel = std::abs(double(ps[0].value.item()) - expected) / lr;
            if (rel > worst) {
                worst = rel;
                worst_g = mag;
            }
        }
    o.require(worst <= kAdamRelTol, "first step off by " + fmt("%.2e", worst) + " relative at |g|=" + fmt("%g", worst_g));
    const StepDecaySchedule s;
    o.require(s.lr_at(0) == 1e-4, "lr_at(0) = " + fmt("%.17g", s.lr_at(0)));
    o.require(s.lr_at(128000) == 5e-5, "lr_at(128000) = " + fmt("%.17g", s.lr_at(128000)));
    o.note("worst first-step deviation " + fmt("%.2e", worst) + " at |g|=" + fmt("%g", worst_g));
    return o;
}

// --- 7 --------------------------------------------------------------------------

Image filled(std::size_t w, std::size_t h, float v) {
    Image img(w, h);
    std::fill(img.pixels.begin(), img.pixels.end(), v);
    return img;
}

Outcome metric_checks() {
    Outcome o;
    const double p05 = psnr(filled(16, 16, 0.25f), filled(16, 16, 0.75f));
    const double p01 = psnr(filled(16, 16, 0.5f), filled(16, 16, 0.6f));
    o.require(std::abs(p05 - 6.0206) < kPsnrTol, "psnr(0.5) = " + fmt("%.6f", p05));
    o.require(std::abs(p01 - 20.0) < kPsnrTol, "psnr(0.1) = " + fmt("%.6f", p01));
    Rng rng(7);
    double worst = 0;
    for (int i = 0; i < kSsimPairs; ++i) {
        const std::size_t w = 11 + rng.below(30), h = 11 + rng.below(30);
        Image a(w, h), b(w, h);
        for (auto& v : a.pixels) v = static_cast<float>(rng.uniform(0, 1));
        const double amp = rng.uniform(0, 0.6);
        for (std::size_t k = 0; k < a.pixels.size(); ++k)
            b.pixels[k] = std::clamp(a.pixels[k] + static_cast<float>(amp * rng.uniform(-1, 1)), 0.0f, 1.0f);
        o.require(ssim(a, a) == 1.0, "ssim(a,a) != 1 for pair " + std::to_string(i));
        worst = std::max(worst, std::abs(ssim(a, b) - cen::test::ssim_reference(a, b)));
    }
    o.require(worst < kSsimOracleTol, "ssim oracle gap " + fmt("%.2e", worst));
    o.note("ssim oracle gap " + fmt("%.1e", worst));
    return o;
}

// --- 8 --------------------------------------------------------------------------

std::string slurp(const std::filesystem::path& p) {
    const auto b = read_file(p);
    return {b.begin(), b.end()};
}

Outcome persistence() {
    Outcome o;
    TempDir dir("cen_persist");
    for (int i = 0; i < 3; ++i) {
        const auto [in, tg] = cen::test::synthetic_pair(48, 40, 0.9 * i);
        cen::test::write_pair(dir / "data", "p" + std::to_string(i), in, tg);
    }
    RunConfig base;
    base.network.num_stages = 2;
    base.network.base_channels = 4;
    base.schedule.initial_lr = 1e-3;
    base.schedule.decay_every = 10;
    base.schedule.total_iters = 30;
    base.augment = {32, true, true, 8};
    base.seed = 8;
    base.data_root = dir / "data";
    base.checkpoint_every = 12;
    base.log_every = 1;

    auto run = [&](const std::string& name, std::size_t workers, std::uint64_t total,
                   const std::filesystem::path& resume = {}) {
        RunConfig cfg = base;
        cfg.output_dir = dir / name;
        cfg.prefetch_workers = workers;
        cfg.schedule.total_iters = total;
        return train(cfg, {resume});
    };
    const TrainResult a = run("a", 1, 30);
    run("b", 1, 30);
    run("c", 4, 30);
    const std::string log_a = slurp(dir / "a" / "loss.csv");
    o.require(log_a == slurp(dir / "b" / "loss.csv"), "two runs differ");
    o.require(log_a == slurp(dir / "c" / "loss.csv"), "1 vs 4 workers differ");

    run("r", 2, 12);
    run("r", 2, 30, dir / "r" / "final.cen");
    o.require(log_a == slurp(dir / "r" / "loss.csv"), "resumed loss log differs");
    o.require(read_file(dir / "a" / "final.cen") == read_file(dir / "r" / "final.cen"), "resumed final weights differ");

    const Checkpoint mid = load_checkpoint(checkpoint_path(dir / "a", 24));
    const auto bytes = encode_checkpoint(mid);
    const Checkpoint back = decode_checkpoint(bytes);
    o.require(back == mid && encode_checkpoint(back) == bytes, "checkpoint round trip not bit-exact");
    o.require(back.iteration == 24 && back.optimizer && back.optimizer->steps == 24, "iteration or optimizer state lost");
    Network<float> restored = network_from_checkpoint(back);
    Adam<float> adam;
    apply_optimizer_state(back, adam);
    o.require(make_checkpoint(restored, 24, &adam) == mid, "restored network/optimizer do not reproduce checkpoint");
    o.note(std::to_string(a.losses.size()) + " iterations, resume at 12");
    return o;
}

// --- 9 --------------------------------------------------------------------------

Outcome codec() {
    Outcome o;
    Rng rng(9);
    int lossless = 0;
    for (int i = 0; i < kCodecImages; ++i) {
        const Image img = cen::test::random_image(rng, 1 + rng.below(64), 1 + rng.below(64));
        const bool png = decode_image(encode_image(img, ImageFormat::png)) == img;
        const bool ppm = decode_image(encode_image(img, ImageFormat::ppm)) == img;
        lossless += png && ppm;
    }
    o.require(lossless == kCodecImages, std::to_string(kCodecImages - lossless) + " images not lossless");

    std::size_t rejected = 0, positioned = 0, malformed = 0;
    auto probe = [&](const std::vector<std::uint8_t>& bytes) {
        ++malformed;
        try {
            static_cast<void>(decode_image(bytes));
        } catch (const ParseError& e) {
            ++rejected;
            positioned += e.offset() <= bytes.size();
        } catch (const std::exception&) {
            ++rejected;
        }
    };
    const Image img = cen::test::random_image(rng, 12, 9);
    for (auto format : {ImageFormat::png, ImageFormat::ppm}) {
        const auto good = encode_image(img, format);
        for (std::size_t cut = 0; cut < good.size(); ++cut)
            probe(std::vector<std::uint8_t>(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut)));
        auto bad_magic = good;
        bad_magic[1] ^= 0x40;
        probe(bad_magic);
    }
    auto bad_crc = encode_image(img, ImageFormat::png);
    bad_crc[bad_crc.size() - 20] ^= 0x01;
    probe(bad_crc);
    o.require(rejected == malformed, std::to_string(malformed - rejected) + " malformed inputs accepted");
    o.require(positioned == malformed, std::to_string(malformed - positioned) + " rejections without a byte offset");
    o.note(std::to_string(kCodecImages) + " round trips, " + std::to_string(malformed) + " malformed inputs");
    return o;
}

struct Criterion {
    int id;
    double budget_s;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    log::set_sink([](std::string_view, std::string_view) {});
    const std::vector<Criterion> all{
        {1, kGradBudgetS, gradients},   {2, kBlockBudgetS, nonlocal_invariants},
        {3, kBlockBudgetS, drb_invariants}, {4, kShapeBudgetS, architecture},
        {5, kOverfitBudgetS, overfit},  {6, 0, optimizer},
        {7, 0, metric_checks},          {8, 0, persistence},
        {9, 0, codec},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
    bool ok = true;
    for (const auto& c : all) {
        if (!selected.empty() && !selected.count(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = c.run();
        } catch (const std::exception& e) {
            out.require(false, std::string("exception: ") + e.what());
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (c.budget_s > 0) out.require(secs < c.budget_s, "over budget " + fmt("%.0f", c.budget_s) + " s");
        std::cout << "criterion " << c.id << ": " << (out.pass ? "PASS" : "FAIL") << " (" << fmt("%.1f", secs)
                  << " s) " << out.detail << std::endl;
        ok = ok && out.pass;
    }
    return ok ? 0 : 1;
}

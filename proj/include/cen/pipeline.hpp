#pragma once

// Training loop, inference with optional tiling, evaluation and the
// four-variant ablation harness.

#include <cstdio>
#include <fstream>
#include <iomanip>

#include "cen/checkpoint.hpp"
#include "cen/config.hpp"
#include "cen/metrics.hpp"

namespace cen {

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct LossRow {
    std::uint64_t iteration = 0;
    double lr = 0.0;
    float loss = 0.0f;
};

inline std::string format_loss_row(const LossRow& r) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%llu,%.9g,%.9g", static_cast<unsigned long long>(r.iteration), r.lr,
                  static_cast<double>(r.loss));
    return buf;
}

struct TrainOptions {
    /// Checkpoint to continue from; empty starts fresh.
    std::filesystem::path resume_from;
};

struct TrainResult {
    Network<float> network;
    std::uint64_t start_iteration = 0;
    std::uint64_t end_iteration = 0;
    /// Every iteration run by this call, logged or not.
    std::vector<LossRow> losses;
    std::filesystem::path final_checkpoint;
};

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::uint64_t iteration) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt_%08llu.cen", static_cast<unsigned long long>(iteration));
    return dir / buf;
}

/// Saves the checkpoint plus a "<file>.cfg" copy of the run configuration.
inline void save_run_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt, const RunConfig& cfg) {
    save_checkpoint(path, ckpt);
    auto cfg_path = path;
    cfg_path += ".cfg";
    std::ofstream(cfg_path) << to_text(cfg);
}

namespace detail {

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::vector<std::string> lines;
    std::ifstream in(path);
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    return lines;
}

/// Rewrites the loss log keeping the header and rows before `iteration`.
inline void truncate_loss_log(const std::filesystem::path& path, std::uint64_t iteration) {
    std::vector<std::string> kept{"iteration,lr,loss"};
    if (std::filesystem::exists(path)) {
        const auto lines = read_lines(path);
        for (std::size_t i = 1; i < lines.size(); ++i) {
            const auto comma = lines[i].find(',');
            if (comma == std::string::npos) continue;
            if (std::stoull(lines[i].substr(0, comma)) < iteration) kept.push_back(lines[i]);
        }
    }
    std::ofstream out(path, std::ios::trunc);
    for (const auto& l : kept) out << l << '\n';
}

}  // namespace detail

/// Runs iterations [start, total_iters) of sample, forward, L1, backward and
/// Adam. Writes output_dir/loss.csv, periodic checkpoints and final.cen.
inline TrainResult train(const RunConfig& cfg, const TrainOptions& options = {}) {
    cfg.validate(true);
    const auto& dir = cfg.output_dir;
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "config.cfg") << to_text(cfg);

    const ScanResult scan = scan_dataset(cfg.data_root);
    log::info("training on " + std::to_string(scan.pairs.size()) + " pairs from " + cfg.data_root.string());

    TrainResult result{make_network<float>(cfg.network, cfg.seed), 0, 0, {}, {}};
    Network<float>& net = result.network;
    Adam<float> adam;
    std::uint64_t start = 0;
    if (!options.resume_from.empty()) {
        const Checkpoint ckpt = load_checkpoint(options.resume_from);
        apply_checkpoint(ckpt, net);
        apply_optimizer_state(ckpt, adam);
        start = ckpt.iteration;
        log::info("resuming from " + options.resume_from.string() + " at iteration " + std::to_string(start));
    }
    const std::uint64_t total = cfg.schedule.total_iters;
    if (start > total)
        throw TrainingError("checkpoint iteration " + std::to_string(start) + " is past total_iters " +
                            std::to_string(total));
    result.start_iteration = start;

    const auto log_path = dir / "loss.csv";
    detail::truncate_loss_log(log_path, start);
    std::ofstream loss_log(log_path, std::ios::app);

    BatchSampler sampler(scan.pairs, cfg.augment, cfg.batch_size);
    PrefetchQueue queue(sampler, start, total, cfg.prefetch_workers);
    for (std::uint64_t it = start; it < total; ++it) {
        const Batch batch = queue.next();
        const double lr = cfg.schedule.lr_at(it);
        float loss_value;
        {
            Tape<float> tape;
            const Tensor<float> pred = net.forward(batch.input);
            Tensor<float> loss;
            try {
                loss = l1_loss(pred, batch.target);
            } catch (const NumericError&) {
                throw TrainingError("non-finite loss at iteration " + std::to_string(it));
            }
            loss_value = loss.item();
            tape.backward(loss);
        }
        adam.step(net.parameters(), lr);
        const LossRow row{it, lr, loss_value};
        result.losses.push_back(row);
        if (it % cfg.log_every == 0 || it + 1 == total) {
            loss_log << format_loss_row(row) << '\n' << std::flush;
            log::info("iter " + std::to_string(it) + " lr " + std::to_string(lr) + " loss " + std::to_string(loss_value));
        }
        if ((it + 1) % cfg.checkpoint_every == 0 && it + 1 < total)
            save_run_checkpoint(checkpoint_path(dir, it + 1), make_checkpoint(net, it + 1, &adam), cfg);
    }
    result.end_iteration = total;
    result.final_checkpoint = dir / "final.cen";
    save_run_checkpoint(result.final_checkpoint, make_checkpoint(net, total, &adam), cfg);
    return result;
}

// ---------------------------------------------------------------------------
// Inference

/// Rounds through 8-bit so in-memory results match what export writes.
inline Image quantize(const Image& img) {
    Image out = img;
    for (auto& v : out.pixels) v = from_byte(to_byte(v));
    return out;
}

struct TileOptions {
    /// Tile edge in pixels; 0 runs the whole image at once.
    std::size_t tile = 0;
    /// Overlap between neighbouring tiles; 0 picks max(2^m, tile / 4).
    std::size_t overlap = 0;
    /// Context margin fed to the network around each tile and discarded
    /// afterwards; 0 picks the network's receptive radius.
    std::size_t halo = 0;
};

/// Upper bound on how far (in input pixels) one input pixel can influence
/// the output through the convolutional path.
inline std::size_t receptive_radius(const NetworkConfig& cfg) {
    const std::size_t convs = cfg.use_local_context ? 4 : 2;
    std::size_t r = 1;
    for (int l = 0; l < cfg.num_stages; ++l) {
        const std::size_t step = std::size_t{1} << static_cast<unsigned>(l);
        r += 2 * convs * step + step + 2 * step;
    }
    return r + convs * cfg.spatial_divisor();
}

namespace detail {

inline std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

inline std::vector<std::size_t> tile_starts(std::size_t extent, std::size_t tile, std::size_t stride) {
    std::vector<std::size_t> starts;
    if (extent <= tile) return {0};
    for (std::size_t s = 0; s + tile < extent; s += stride) starts.push_back(s);
    starts.push_back(extent - tile);
    return starts;
}

// Linear ramp over `overlap` pixels on each interior edge of a tile.
inline std::vector<float> feather(std::size_t tile, std::size_t overlap, bool ramp_lo, bool ramp_hi) {
    std::vector<float> w(tile, 1.0f);
    for (std::size_t k = 0; k < tile; ++k) {
        if (ramp_lo) w[k] = std::min(w[k], (static_cast<float>(k) + 0.5f) / static_cast<float>(overlap));
        if (ramp_hi) w[k] = std::min(w[k], (static_cast<float>(tile - k) - 0.5f) / static_cast<float>(overlap));
    }
    return w;
}

inline Tensor<float> slice_spatial(const Tensor<float>& t, std::size_t y0, std::size_t x0, std::size_t h,
                                   std::size_t w) {
    const Shape& s = t.shape();
    Tensor<float> out(Shape{s.n, s.c, h, w});
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) out.at(n, c, y, x) = t.at(n, c, y0 + y, x0 + x);
    return out;
}

inline Tensor<float> run_tiled(const Network<float>& net, const Tensor<float>& x, const TileOptions& opt) {
    const std::size_t div = net.config().spatial_divisor();
    const Shape s = x.shape();
    if (opt.tile == 0) return net.forward(x);
    const std::size_t tile = round_up(std::max(opt.tile, div), div);
    if (tile >= s.h && tile >= s.w) return net.forward(x);
    std::size_t overlap = opt.overlap ? opt.overlap : std::max(div, tile / 4);
    overlap = round_up(std::max(overlap, div), div);
    if (overlap >= tile) throw std::invalid_argument("tile overlap must be smaller than the tile");
    const std::size_t halo = round_up(opt.halo ? opt.halo : receptive_radius(net.config()), div);
    const std::size_t th = std::min(tile, s.h);
    const std::size_t tw = std::min(tile, s.w);
    Tensor<float> acc(Shape{s.n, 3, s.h, s.w});
    std::vector<float> weight(s.h * s.w, 0.0f);
    const auto ys = tile_starts(s.h, th, th - std::min(overlap, th - div));
    const auto xs = tile_starts(s.w, tw, tw - std::min(overlap, tw - div));
    for (std::size_t y0 : ys) {
        const auto wy = feather(th, overlap, y0 > 0, y0 + th < s.h);
        const std::size_t cy0 = y0 > halo ? y0 - halo : 0;
        const std::size_t cy1 = std::min(s.h, y0 + th + halo);
        for (std::size_t x0 : xs) {
            const auto wx = feather(tw, overlap, x0 > 0, x0 + tw < s.w);
            const std::size_t cx0 = x0 > halo ? x0 - halo : 0;
            const std::size_t cx1 = std::min(s.w, x0 + tw + halo);
            const Tensor<float> out = net.forward(slice_spatial(x, cy0, cx0, cy1 - cy0, cx1 - cx0));
            for (std::size_t y = 0; y < th; ++y)
                for (std::size_t xx = 0; xx < tw; ++xx) {
                    const float w = wy[y] * wx[xx];
                    weight[(y0 + y) * s.w + x0 + xx] += w;
                    for (std::size_t n = 0; n < s.n; ++n)
                        for (std::size_t c = 0; c < 3; ++c)
                            acc.at(n, c, y0 + y, x0 + xx) += w * out.at(n, c, y0 - cy0 + y, x0 - cx0 + xx);
                }
        }
    }
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < s.h; ++y)
                for (std::size_t xx = 0; xx < s.w; ++xx) acc.at(n, c, y, xx) /= weight[y * s.w + xx];
    return acc;
}

}  // namespace detail

/// Full-image enhancement: reflect-pads to a multiple of 2^m, runs the
/// network (tiled if requested), crops back and quantizes to 8 bits.
inline Image enhance(const Network<float>& net, const Image& img, const TileOptions& tiling = {}) {
    const std::size_t div = net.config().spatial_divisor();
    const std::size_t pw = detail::round_up(img.width, div);
    const std::size_t ph = detail::round_up(img.height, div);
    const Image padded = reflect_pad_to(img, pw, ph);
    const Tensor<float> out = detail::run_tiled(net, image_to_tensor<float>(padded), tiling);
    Image full = tensor_to_image(out);
    return quantize(crop(full, (pw - img.width) / 2, (ph - img.height) / 2, img.width, img.height));
}

/// Loads a checkpoint for inference. When `expected` is given, the
/// architecture read off the checkpoint must match it.
inline Network<float> load_network(const std::filesystem::path& checkpoint, const NetworkConfig* expected = nullptr) {
    const Checkpoint ckpt = load_checkpoint(checkpoint);
    const NetworkConfig found = infer_network_config(ckpt.shapes(), expected ? expected->upsample : UpsampleMode::nearest);
    if (expected && !(found == *expected)) {
        std::ostringstream os;
        os << checkpoint.string() << " holds a network with num_stages=" << found.num_stages
           << " base_channels=" << found.base_channels << " gc=" << found.use_global_context
           << " lc=" << found.use_local_context << ", config expects num_stages=" << expected->num_stages
           << " base_channels=" << expected->base_channels << " gc=" << expected->use_global_context
           << " lc=" << expected->use_local_context;
        throw IncompatibleCheckpointError(os.str());
    }
    Network<float> net(found);
    apply_checkpoint(ckpt, net);
    return net;
}

// ---------------------------------------------------------------------------
// Evaluation

enum class CompareMode { model, input, target };

/// Metrics per pair of `data_root` against the target image. `net` is
/// required only for CompareMode::model.
inline MetricReport evaluate(const std::filesystem::path& data_root, CompareMode mode, const Network<float>* net,
                             const TileOptions& tiling = {}) {
    if (mode == CompareMode::model && !net) throw std::invalid_argument("model evaluation needs a network");
    const ScanResult scan = scan_dataset(data_root);
    MetricReport report;
    for (const auto& d : scan.pairs) {
        const ImagePair pair = load_pair(d);
        Image candidate;
        switch (mode) {
            case CompareMode::model: candidate = enhance(*net, pair.input, tiling); break;
            case CompareMode::input: candidate = pair.input; break;
            case CompareMode::target: candidate = pair.target; break;
        }
        report.add({d.id, psnr(candidate, pair.target), ssim(candidate, pair.target)});
    }
    return report;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationVariant {
    std::string name;
    bool global_context = false;
    bool local_context = false;
};

inline const std::array<AblationVariant, 4>& ablation_variants() {
    static const std::array<AblationVariant, 4> variants{
        {{"baseline", false, false}, {"gc", true, false}, {"lc", false, true}, {"full", true, true}}};
    return variants;
}

struct AblationRow {
    AblationVariant variant;
    StructureCensus census;
    double psnr_db = 0.0;
    double ssim = 0.0;
};

inline void write_ablation_table(std::ostream& os, const std::vector<AblationRow>& rows) {
    os << std::left << std::setw(10) << "Variant" << std::setw(4) << "GC" << std::setw(4) << "LC" << std::right
       << std::setw(12) << "Params" << std::setw(11) << "PSNR (dB)" << std::setw(8) << "SSIM" << '\n';
    for (const auto& r : rows) {
        os << std::left << std::setw(10) << r.variant.name << std::setw(4) << (r.variant.global_context ? "x" : "-")
           << std::setw(4) << (r.variant.local_context ? "x" : "-") << std::right << std::setw(12)
           << r.census.parameter_count << std::setw(11) << std::fixed << std::setprecision(2) << r.psnr_db
           << std::setw(8) << std::setprecision(4) << r.ssim << std::defaultfloat << '\n';
    }
}

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
    os << "variant,gc,lc,params,psnr,ssim\n";
    for (const auto& r : rows)
        os << r.variant.name << ',' << r.variant.global_context << ',' << r.variant.local_context << ','
           << r.census.parameter_count << ',' << MetricReport::format(r.psnr_db) << ','
           << MetricReport::format(r.ssim) << '\n';
}

/// Trains every variant with the same seed and schedule under
/// output_dir/<variant>, then evaluates on eval_root (data_root if unset).
inline std::vector<AblationRow> ablate(const RunConfig& base) {
    base.validate(true);
    const auto eval_root = base.eval_root.empty() ? base.data_root : base.eval_root;
    if (base.eval_root.empty()) log::warn("eval_root not set; evaluating ablation on the training pairs");
    std::vector<AblationRow> rows;
    for (const auto& v : ablation_variants()) {
        RunConfig cfg = base;
        cfg.network.use_global_context = v.global_context;
        cfg.network.use_local_context = v.local_context;
        cfg.output_dir = base.output_dir / v.name;
        log::info("ablation: training variant " + v.name);
        const TrainResult trained = train(cfg);
        const MetricReport report = evaluate(eval_root, CompareMode::model, &trained.network);
        std::ofstream csv(cfg.output_dir / "eval.csv");
        report.write_csv(csv);
        rows.push_back({v, trained.network.census(), report.mean_psnr(), report.mean_ssim()});
    }
    std::filesystem::create_directories(base.output_dir);
    std::ofstream csv(base.output_dir / "ablation.csv");
    write_ablation_csv(csv, rows);
    return rows;
}

}  // namespace cen

#pragma once

// PSNR and single-scale SSIM on RGB images.
//
// SSIM uses an 11x11 Gaussian window (sigma 1.5) evaluated only where the
// window fits inside the image, K1 = 0.01, K2 = 0.03 and dynamic range 1,
// computed per channel and averaged over R, G and B.

#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>

#include "cen/image.hpp"

namespace cen {

namespace detail {
inline void require_same_size(const Image& a, const Image& b, const char* metric) {
    if (a.width != b.width || a.height != b.height) {
        throw DimensionError(std::string(metric) + ": image sizes differ (" + std::to_string(a.width) + "x" +
                             std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                             std::to_string(b.height) + ")");
    }
}
}  // namespace detail

/// Mean squared error over every sample of every channel.
inline double mse(const Image& a, const Image& b) {
    detail::require_same_size(a, b, "mse");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = static_cast<double>(a.pixels[i]) - static_cast<double>(b.pixels[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(a.pixels.size());
}

/// Peak signal-to-noise ratio in dB; +infinity for identical images.
inline double psnr(const Image& a, const Image& b, double max_value = 1.0) {
    const double e = mse(a, b);
    if (e == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(max_value * max_value / e);
}

struct SsimParams {
    std::size_t window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 1.0;
};

inline std::vector<double> gaussian_window(std::size_t size, double sigma) {
    std::vector<double> w(size);
    const double centre = static_cast<double>(size - 1) / 2.0;
    double total = 0.0;
    for (std::size_t i = 0; i < size; ++i) {
        const double d = static_cast<double>(i) - centre;
        w[i] = std::exp(-d * d / (2.0 * sigma * sigma));
        total += w[i];
    }
    for (auto& v : w) v /= total;
    return w;
}

namespace detail {
// Separable "valid" filtering of a single plane.
inline std::vector<double> filter_valid(const std::vector<double>& plane, std::size_t w, std::size_t h,
                                        const std::vector<double>& taps) {
    const std::size_t k = taps.size();
    const std::size_t ow = w - k + 1;
    const std::size_t oh = h - k + 1;
    std::vector<double> tmp(ow * h);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (std::size_t i = 0; i < k; ++i) acc += taps[i] * plane[y * w + x + i];
            tmp[y * ow + x] = acc;
        }
    std::vector<double> out(ow * oh);
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (std::size_t i = 0; i < k; ++i) acc += taps[i] * tmp[(y + i) * ow + x];
            out[y * ow + x] = acc;
        }
    return out;
}
}  // namespace detail

inline double ssim(const Image& a, const Image& b, const SsimParams& params = {}) {
    detail::require_same_size(a, b, "ssim");
    if (a.width < params.window || a.height < params.window) {
        throw DimensionError("ssim: images must be at least " + std::to_string(params.window) + " pixels on each side");
    }
    const auto taps = gaussian_window(params.window, params.sigma);
    const double c1 = (params.k1 * params.dynamic_range) * (params.k1 * params.dynamic_range);
    const double c2 = (params.k2 * params.dynamic_range) * (params.k2 * params.dynamic_range);
    const std::size_t n = a.width * a.height;
    double total = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
        std::vector<double> pa(n), pb(n), aa(n), bb(n), ab(n);
        for (std::size_t i = 0; i < n; ++i) {
            pa[i] = a.pixels[i * 3 + c];
            pb[i] = b.pixels[i * 3 + c];
            aa[i] = pa[i] * pa[i];
            bb[i] = pb[i] * pb[i];
            ab[i] = pa[i] * pb[i];
        }
        const auto mu_a = detail::filter_valid(pa, a.width, a.height, taps);
        const auto mu_b = detail::filter_valid(pb, a.width, a.height, taps);
        const auto e_aa = detail::filter_valid(aa, a.width, a.height, taps);
        const auto e_bb = detail::filter_valid(bb, a.width, a.height, taps);
        const auto e_ab = detail::filter_valid(ab, a.width, a.height, taps);
        double acc = 0.0;
        for (std::size_t i = 0; i < mu_a.size(); ++i) {
            const double var_a = e_aa[i] - mu_a[i] * mu_a[i];
            const double var_b = e_bb[i] - mu_b[i] * mu_b[i];
            const double cov = e_ab[i] - mu_a[i] * mu_b[i];
            const double num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
            const double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (var_a + var_b + c2);
            acc += num / den;
        }
        total += acc / static_cast<double>(mu_a.size());
    }
    return total / 3.0;
}

struct MetricRow {
    std::string id;
    double psnr_db = 0.0;
    double ssim = 0.0;
};

/// Per-image metrics with dataset means accumulated in row order.
class MetricReport {
public:
    void add(MetricRow row) { rows_.push_back(std::move(row)); }

    [[nodiscard]] const std::vector<MetricRow>& rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t size() const noexcept { return rows_.size(); }

    [[nodiscard]] double mean_psnr() const { return mean(&MetricRow::psnr_db); }
    [[nodiscard]] double mean_ssim() const { return mean(&MetricRow::ssim); }

    /// "id,psnr,ssim" header, one row per image, then a "mean" row.
    void write_csv(std::ostream& os) const {
        os << "id,psnr,ssim\n";
        for (const auto& r : rows_) os << r.id << ',' << format(r.psnr_db) << ',' << format(r.ssim) << '\n';
        os << "mean," << format(mean_psnr()) << ',' << format(mean_ssim()) << '\n';
    }

    void write_table(std::ostream& os) const {
        std::size_t width = 4;
        for (const auto& r : rows_) width = std::max(width, r.id.size());
        os << std::left << std::setw(static_cast<int>(width)) << "id" << "  " << std::right << std::setw(10)
           << "PSNR (dB)" << "  " << std::setw(8) << "SSIM" << '\n';
        auto line = [&](const std::string& id, double p, double s) {
            os << std::left << std::setw(static_cast<int>(width)) << id << "  " << std::right << std::setw(10)
               << fixed(p, 2) << "  " << std::setw(8) << fixed(s, 4) << '\n';
        };
        for (const auto& r : rows_) line(r.id, r.psnr_db, r.ssim);
        line("mean", mean_psnr(), mean_ssim());
    }

    static std::string format(double v) {
        if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
        std::ostringstream os;
        os << std::setprecision(10) << v;
        return os.str();
    }

private:
    double mean(double MetricRow::*field) const {
        if (rows_.empty()) return std::numeric_limits<double>::quiet_NaN();
        double acc = 0.0;
        for (const auto& r : rows_) acc += r.*field;
        return acc / static_cast<double>(rows_.size());
    }

    static std::string fixed(double v, int digits) {
        if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
        std::ostringstream os;
        os << std::fixed << std::setprecision(digits) << v;
        return os.str();
    }

    std::vector<MetricRow> rows_;
};

}  // namespace cen

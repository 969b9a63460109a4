#pragma once

// Paired-image datasets, patch augmentation and an ordered prefetch queue.
//
// Every training sample is a pure function of (seed, iteration, batch slot),
// so the sample sequence does not depend on how many workers produce it or
// on where a resumed run starts.

#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <thread>

#include "cen/image.hpp"
#include "cen/random.hpp"

namespace cen {

class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class PairError : public DatasetError {
public:
    using DatasetError::DatasetError;
};

struct PairDescriptor {
    std::string id;
    std::filesystem::path input;
    std::filesystem::path target;
    std::size_t width = 0;
    std::size_t height = 0;
};

struct ScanResult {
    std::vector<PairDescriptor> pairs;
    /// Files under input/ or target/ with no counterpart, relative to root.
    std::vector<std::string> unmatched;
};

struct ImagePair {
    Image input;
    Image target;
    std::string id;
};

namespace detail {
inline std::map<std::string, std::filesystem::path> list_images(const std::filesystem::path& dir) {
    std::map<std::string, std::filesystem::path> out;
    if (!std::filesystem::is_directory(dir)) throw DatasetError("missing directory " + dir.string());
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        auto ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
        if (ext != ".png" && ext != ".ppm") continue;
        const std::string stem = entry.path().stem().string();
        if (auto [it, inserted] = out.emplace(stem, entry.path()); !inserted) {
            // Two files share a stem; keep the lexicographically smaller name.
            if (entry.path().filename() < it->second.filename()) it->second = entry.path();
        }
    }
    return out;
}
}  // namespace detail

/// Matches root/input/<stem>.{png,ppm} with root/target/<stem>.{png,ppm}.
/// Pairs come back sorted by stem; unmatched files are logged and excluded.
inline ScanResult scan_dataset(const std::filesystem::path& root, std::string_view layout = "paired-dirs") {
    if (layout != "paired-dirs") throw DatasetError("unknown dataset layout '" + std::string(layout) + "'");
    const auto inputs = detail::list_images(root / "input");
    const auto targets = detail::list_images(root / "target");
    ScanResult result;
    for (const auto& [stem, path] : inputs) {
        auto it = targets.find(stem);
        if (it == targets.end()) {
            result.unmatched.push_back("input/" + path.filename().string());
            continue;
        }
        const ImageSize a = probe_image(path);
        const ImageSize b = probe_image(it->second);
        if (a.width != b.width || a.height != b.height) {
            throw PairError("pair '" + path.filename().string() + "': input is " + std::to_string(a.width) + "x" +
                            std::to_string(a.height) + ", target is " + std::to_string(b.width) + "x" +
                            std::to_string(b.height));
        }
        result.pairs.push_back({stem, path, it->second, a.width, a.height});
    }
    for (const auto& [stem, path] : targets)
        if (!inputs.count(stem)) result.unmatched.push_back("target/" + path.filename().string());
    std::sort(result.unmatched.begin(), result.unmatched.end());
    for (const auto& u : result.unmatched) log::warn("dataset " + root.string() + ": no counterpart for " + u + ", excluded");
    if (result.pairs.empty()) throw DatasetError("dataset " + root.string() + " contains no matched image pairs");
    return result;
}

inline ImagePair load_pair(const PairDescriptor& d) {
    ImagePair p{read_image(d.input), read_image(d.target), d.id};
    if (p.input.width != p.target.width || p.input.height != p.target.height) {
        throw PairError("pair '" + d.input.filename().string() + "' has mismatched dimensions");
    }
    return p;
}

struct AugmentSpec {
    std::size_t crop_size = 512;
    bool enable_flip = true;
    bool enable_rotation = true;
    std::uint64_t rng_seed = 0;
};

/// Applied in order: horizontal flip, vertical flip, counter-clockwise
/// quarter turns.
struct Geometry {
    bool flip_h = false;
    bool flip_v = false;
    int quarter_turns = 0;
};

inline Image apply_geometry(const Image& img, const Geometry& g) {
    Image out = g.flip_h ? flip_horizontal(img) : img;
    if (g.flip_v) out = flip_vertical(out);
    return rotate90(out, g.quarter_turns);
}

struct Patch {
    Image input;
    Image target;
};

/// Random crop plus flip/rotation, applied identically to both images.
/// Pairs smaller than the crop are reflect-padded first, with a log line
/// unless `log_padding` is false.
template <typename Urbg>
Patch sample_patch(const ImagePair& pair, const AugmentSpec& spec, Urbg& rng, bool log_padding = true) {
    const std::size_t crop_size = spec.crop_size;
    const Image* in = &pair.input;
    const Image* tg = &pair.target;
    Image padded_in, padded_tg;
    if (in->width < crop_size || in->height < crop_size) {
        if (log_padding)
            log::warn("pair '" + pair.id + "' (" + std::to_string(in->width) + "x" + std::to_string(in->height) +
                  ") smaller than crop " + std::to_string(crop_size) + ", reflect-padding");
        padded_in = reflect_pad_to(*in, crop_size, crop_size);
        padded_tg = reflect_pad_to(*tg, crop_size, crop_size);
        in = &padded_in;
        tg = &padded_tg;
    }
    const std::size_t x0 = rng.below(in->width - crop_size + 1);
    const std::size_t y0 = rng.below(in->height - crop_size + 1);
    Geometry g;
    if (spec.enable_flip) {
        g.flip_h = rng.coin();
        g.flip_v = rng.coin();
    }
    if (spec.enable_rotation) g.quarter_turns = static_cast<int>(rng.below(4));
    return {apply_geometry(crop(*in, x0, y0, crop_size, crop_size), g),
            apply_geometry(crop(*tg, x0, y0, crop_size, crop_size), g)};
}

struct Batch {
    std::uint64_t iteration = 0;
    Tensor<float> input;
    Tensor<float> target;
};

/// Builds the batch for one iteration from (seed, iteration, slot) streams.
class BatchSampler {
public:
    BatchSampler(std::vector<PairDescriptor> pairs, AugmentSpec spec, std::size_t batch_size,
                 std::size_t cache_capacity = 256)
        : pairs_(std::move(pairs)), spec_(spec), batch_size_(batch_size), cache_capacity_(cache_capacity) {
        if (pairs_.empty()) throw DatasetError("no pairs to sample from");
        if (batch_size_ == 0) throw std::invalid_argument("batch size must be positive");
        if (spec_.crop_size == 0) throw std::invalid_argument("crop size must be positive");
    }

    /// Thread-safe.
    Batch make(std::uint64_t iteration) const {
        std::vector<Image> inputs, targets;
        for (std::size_t slot = 0; slot < batch_size_; ++slot) {
            Rng rng{spec_.rng_seed, iteration, slot};
            const auto& d = pairs_[rng.below(pairs_.size())];
            const auto pair = fetch(d);
            bool first_use = false;
            {
                std::lock_guard lock(mutex_);
                first_use = padded_logged_.insert(d.id).second;
            }
            auto patch = sample_patch(*pair, spec_, rng, first_use);
            inputs.push_back(std::move(patch.input));
            targets.push_back(std::move(patch.target));
        }
        return {iteration, images_to_tensor<float>(inputs), images_to_tensor<float>(targets)};
    }

private:
    std::shared_ptr<const ImagePair> fetch(const PairDescriptor& d) const {
        {
            std::lock_guard lock(mutex_);
            if (auto it = cache_.find(d.id); it != cache_.end()) return it->second;
        }
        auto pair = std::make_shared<const ImagePair>(load_pair(d));
        std::lock_guard lock(mutex_);
        if (cache_.size() < cache_capacity_) cache_.emplace(d.id, pair);
        return pair;
    }

    std::vector<PairDescriptor> pairs_;
    AugmentSpec spec_;
    std::size_t batch_size_;
    std::size_t cache_capacity_;
    mutable std::mutex mutex_;
    mutable std::map<std::string, std::shared_ptr<const ImagePair>> cache_;
    mutable std::set<std::string> padded_logged_;
};

/// Worker threads produce batches for consecutive iterations; next()
/// hands them out strictly in iteration order. Worker errors resurface
/// from next().
class PrefetchQueue {
public:
    PrefetchQueue(const BatchSampler& sampler, std::uint64_t first, std::uint64_t end, std::size_t workers,
                  std::size_t depth = 4)
        : sampler_(sampler), next_claim_(first), next_out_(first), end_(end), depth_(std::max<std::size_t>(depth, 1)) {
        const std::size_t n = std::max<std::size_t>(workers, 1);
        for (std::size_t i = 0; i < n; ++i) threads_.emplace_back([this] { run(); });
    }

    ~PrefetchQueue() {
        {
            std::lock_guard lock(mutex_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    PrefetchQueue(const PrefetchQueue&) = delete;
    PrefetchQueue& operator=(const PrefetchQueue&) = delete;

    Batch next() {
        std::unique_lock lock(mutex_);
        if (next_out_ >= end_) throw std::out_of_range("prefetch queue exhausted");
        cv_.wait(lock, [&] { return ready_.count(next_out_) || errors_.count(next_out_); });
        if (auto it = errors_.find(next_out_); it != errors_.end()) std::rethrow_exception(it->second);
        Batch b = std::move(ready_.at(next_out_));
        ready_.erase(next_out_);
        ++next_out_;
        cv_.notify_all();
        return b;
    }

private:
    void run() {
        while (true) {
            std::uint64_t it;
            {
                std::unique_lock lock(mutex_);
                cv_.wait(lock, [&] { return stop_ || next_claim_ >= end_ || next_claim_ < next_out_ + depth_; });
                if (stop_ || next_claim_ >= end_) return;
                it = next_claim_++;
            }
            try {
                Batch b = sampler_.make(it);
                std::lock_guard lock(mutex_);
                ready_.emplace(it, std::move(b));
            } catch (...) {
                std::lock_guard lock(mutex_);
                errors_.emplace(it, std::current_exception());
            }
            cv_.notify_all();
        }
    }

    const BatchSampler& sampler_;
    std::uint64_t next_claim_;
    std::uint64_t next_out_;
    std::uint64_t end_;
    std::size_t depth_;
    bool stop_ = false;
    std::map<std::uint64_t, Batch> ready_;
    std::map<std::uint64_t, std::exception_ptr> errors_;
    std::mutex mutex_;
    std::condition_variable cv_;
    std::vector<std::thread> threads_;
};

}  // namespace cen

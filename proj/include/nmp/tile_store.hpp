#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nmp/geometry.hpp"
#include "nmp/tensor.hpp"

namespace nmp {

inline uint32_t crc32c(const uint8_t* data, size_t n, uint32_t seed = 0) {
    static const std::array<uint32_t, 256> table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k)
                c = (c & 1) ? 0x82F63B78u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t crc = ~seed;
    for (size_t i = 0; i < n; ++i)
        crc = table[(crc ^ data[i]) & 0xff] ^ (crc >> 8);
    return ~crc;
}

// The tile payload marks zero-weight runs with a 0x00 escape byte, so a
// stored nonzero weight must never serialize with 0x00 as its first
// little-endian byte. Setting the lowest mantissa bit costs at most 2^-23
// relative and keeps the byte stream unambiguous.
inline float canonical_weight(float w) {
    if (w == 0.0f) return 0.0f;
    uint32_t bits;
    std::memcpy(&bits, &w, 4);
    if ((bits & 0xffu) == 0) bits |= 1u;
    float out;
    std::memcpy(&out, &bits, 4);
    return out;
}

// One square piece of the global prior. weight 0 means the cell was never
// written and its features are zero; weight doubles as the coverage signal.
struct MapTile {
    TileKey key;
    int tile_edge = 0;
    int channels = 0;
    std::vector<float> features;  // edge*edge*C, row = x cell, col = y cell
    std::vector<float> weight;    // edge*edge
    uint64_t version = 0;
    uint32_t traversal_count = 0;
    int64_t last_updated = 0;

    MapTile() = default;
    MapTile(TileKey k, int edge, int ch)
        : key(k), tile_edge(edge), channels(ch),
          features(static_cast<size_t>(edge) * edge * ch, 0.0f),
          weight(static_cast<size_t>(edge) * edge, 0.0f) {}

    size_t cell(int r, int c) const {
        return static_cast<size_t>(r) * tile_edge + c;
    }
    float* cell_features(int r, int c) {
        return features.data() + cell(r, c) * channels;
    }
    const float* cell_features(int r, int c) const {
        return features.data() + cell(r, c) * channels;
    }
    float weight_at(int r, int c) const { return weight[cell(r, c)]; }

    size_t covered_cells() const {
        size_t n = 0;
        for (float w : weight) n += w > 0.0f;
        return n;
    }
};

inline std::string tile_filename(TileKey key) {
    return "tile_" + std::to_string(key.ix) + "_" + std::to_string(key.iy) +
           ".nmpt";
}

[[noreturn]] inline void tile_parse_error(size_t offset,
                                          const std::string& what) {
    throw std::runtime_error("tile parse error at offset " +
                             std::to_string(offset) + ": " + what);
}

namespace detail {

inline void put_bytes(std::vector<uint8_t>& b, const void* p, size_t n) {
    const uint8_t* s = static_cast<const uint8_t*>(p);
    b.insert(b.end(), s, s + n);
}
template <typename T>
void put_scalar(std::vector<uint8_t>& b, T v) {
    put_bytes(b, &v, sizeof(T));
}

struct TileReader {
    const uint8_t* data;
    size_t size;
    size_t off = 0;

    void need(size_t n, const char* what) {
        if (off + n > size) tile_parse_error(off, std::string(what) +
                                                      ": truncated");
    }
    template <typename T>
    T get(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, data + off, sizeof(T));
        off += sizeof(T);
        return v;
    }
};

}  // namespace detail

// Tile file format, little-endian: magic "NMPT", format version u16,
// tile_edge u16, channels u16, ix i32, iy i32, version u64, traversal_count
// u32, last_updated i64, payload, CRC32C(payload) u32. The payload walks
// cells in row-major order; a zero-weight run is (0x00, run length u16),
// any other cell is (weight f32, C feature f32s).
inline std::vector<uint8_t> save_tile(const MapTile& t) {
    std::vector<uint8_t> out;
    out.reserve(64 + t.weight.size());
    detail::put_bytes(out, "NMPT", 4);
    detail::put_scalar<uint16_t>(out, 1);
    detail::put_scalar<uint16_t>(out, static_cast<uint16_t>(t.tile_edge));
    detail::put_scalar<uint16_t>(out, static_cast<uint16_t>(t.channels));
    detail::put_scalar<int32_t>(out, t.key.ix);
    detail::put_scalar<int32_t>(out, t.key.iy);
    detail::put_scalar<uint64_t>(out, t.version);
    detail::put_scalar<uint32_t>(out, t.traversal_count);
    detail::put_scalar<int64_t>(out, t.last_updated);

    const size_t payload_start = out.size();
    const size_t cells = t.weight.size();
    size_t i = 0;
    while (i < cells) {
        if (t.weight[i] == 0.0f) {
            size_t run = 1;
            while (i + run < cells && run < 0xffff &&
                   t.weight[i + run] == 0.0f)
                ++run;
            out.push_back(0x00);
            detail::put_scalar<uint16_t>(out, static_cast<uint16_t>(run));
            i += run;
        } else {
            const float w = t.weight[i];
            uint32_t bits;
            std::memcpy(&bits, &w, 4);
            if ((bits & 0xffu) == 0)
                throw std::runtime_error(
                    "save_tile: non-canonical weight, first byte collides "
                    "with the zero-run escape");
            detail::put_scalar<float>(out, w);
            detail::put_bytes(out, t.features.data() + i * t.channels,
                              sizeof(float) * t.channels);
            ++i;
        }
    }
    const uint32_t crc =
        crc32c(out.data() + payload_start, out.size() - payload_start);
    detail::put_scalar<uint32_t>(out, crc);
    return out;
}

inline MapTile load_tile(const uint8_t* data, size_t size) {
    detail::TileReader r{data, size};
    r.need(4, "magic");
    if (std::memcmp(data, "NMPT", 4) != 0) tile_parse_error(0, "bad magic");
    r.off = 4;
    const uint16_t version = r.get<uint16_t>("format version");
    if (version != 1)
        tile_parse_error(4, "unsupported format version " +
                                std::to_string(version));
    const uint16_t edge = r.get<uint16_t>("tile_edge");
    const uint16_t channels = r.get<uint16_t>("channels");
    if (edge == 0 || channels == 0)
        tile_parse_error(6, "zero tile_edge or channels");
    MapTile t(TileKey{r.get<int32_t>("ix"), r.get<int32_t>("iy")}, edge,
              channels);
    t.version = r.get<uint64_t>("version");
    t.traversal_count = r.get<uint32_t>("traversal_count");
    t.last_updated = r.get<int64_t>("last_updated");

    const size_t payload_start = r.off;
    const size_t cells = t.weight.size();
    size_t i = 0;
    while (i < cells) {
        r.need(1, "cell");
        if (data[r.off] == 0x00) {
            ++r.off;
            const uint16_t run = r.get<uint16_t>("zero-run length");
            if (run == 0 || i + run > cells)
                tile_parse_error(r.off - 2, "zero-run overflows tile");
            i += run;
        } else {
            const float w = r.get<float>("cell weight");
            r.need(sizeof(float) * channels, "cell features");
            std::memcpy(t.features.data() + i * channels, data + r.off,
                        sizeof(float) * channels);
            r.off += sizeof(float) * channels;
            t.weight[i] = w;
            ++i;
        }
    }
    const size_t crc_off = r.off;
    const uint32_t stored = r.get<uint32_t>("checksum");
    const uint32_t computed =
        crc32c(data + payload_start, crc_off - payload_start);
    if (stored != computed) tile_parse_error(crc_off, "checksum mismatch");
    if (r.off != size) tile_parse_error(r.off, "trailing bytes");
    return t;
}

inline MapTile load_tile(const std::vector<uint8_t>& bytes) {
    return load_tile(bytes.data(), bytes.size());
}

struct MemoryStats {
    uint64_t resident_bytes = 0;
    uint64_t dense_equivalent_bytes = 0;
    double ratio = 0.0;
};

enum class PutStatus : uint8_t { ok = 0x00, stale_merged = 0x02 };

// What a fleet worker needs from a prior store; implemented by the local
// TileStore and by the networked client adapter.
struct PriorStore {
    virtual ~PriorStore() = default;
    virtual FeatureMap query_region(const EgoPose& pose) = 0;
    virtual std::vector<TileKey> write_back(const EgoPose& pose,
                                            const FeatureMap& new_prior) = 0;
    virtual MemoryStats memory_stats() = 0;
    virtual void clear() = 0;
};

// Sparse, persistent global prior. Tiles are resident up to a capacity and
// spill to one file per tile under the backing directory. Locking is
// tile-granular: a short table mutex guards the resident map and LRU
// bookkeeping, a per-tile shared_mutex guards tile content, and tiles are
// always locked in sorted key order so disjoint operations never deadlock
// or serialize against each other.
class TileStore : public PriorStore {
  public:
    TileStore(GridSpec bev, std::string dir, size_t capacity = 4096,
              double store_resolution = 0.0)
        : bev_(bev), dir_(std::move(dir)), capacity_(capacity) {
        bev_.validate();
        store_spec_ = bev_;
        if (store_resolution > 0.0) store_spec_.resolution = store_resolution;
        if (capacity_ == 0)
            throw std::invalid_argument("TileStore: capacity must be > 0");
        if (!dir_.empty()) std::filesystem::create_directories(dir_);
    }

    const GridSpec& bev_spec() const { return bev_; }
    const GridSpec& store_spec() const { return store_spec_; }
    const std::string& dir() const { return dir_; }

    // Tests pin this to a constant so tile files compare bitwise.
    void set_clock(std::function<int64_t()> clock) {
        clock_ = std::move(clock);
    }

    // Assembles every overlapping tile into a mosaic and bilinear-samples it
    // at the BEV cell centers. Missing tiles read as empty; cells without
    // weight support come back uncovered.
    FeatureMap query_region(const EgoPose& pose) override {
        const GridCoords coords = local_grid_coords(bev_, pose);
        const std::vector<TileKey> keys = overlapping_tiles(store_spec_, coords);
        std::vector<std::shared_ptr<Entry>> entries = resolve(keys, false);

        const int edge = store_spec_.tile_edge;
        const int64_t tx0 = keys.front().ix, ty0 = keys.front().iy;
        const int64_t tx1 = keys.back().ix, ty1 = keys.back().iy;
        FeatureMap mosaic(static_cast<int>((tx1 - tx0 + 1) * edge),
                          static_cast<int>((ty1 - ty0 + 1) * edge),
                          bev_.channels, 0.0f, false);
        for (size_t i = 0; i < keys.size(); ++i) {
            if (!entries[i]) continue;
            std::shared_lock lk(entries[i]->m);
            const MapTile& t = entries[i]->tile;
            const int r0 = static_cast<int>((keys[i].ix - tx0) * edge);
            const int c0 = static_cast<int>((keys[i].iy - ty0) * edge);
            for (int r = 0; r < edge; ++r)
                for (int c = 0; c < edge; ++c) {
                    if (t.weight_at(r, c) <= 0.0f) continue;
                    std::memcpy(mosaic.cell(r0 + r, c0 + c),
                                t.cell_features(r, c),
                                sizeof(float) * bev_.channels);
                    mosaic.set_covered(r0 + r, c0 + c, true);
                }
        }
        FeatureMap prior = bilinear_sample(mosaic, tx0 * edge, ty0 * edge,
                                           store_spec_.resolution, coords);
        entries.clear();
        trim();
        return prior;
    }

    // Forward bilinear splat with replacement semantics: per global cell the
    // new feature overwrites the old, weight ratchets up to max(old, splat
    // weight), and splats below 0.05 are dropped. Every tile overlapping the
    // BEV bounding box is version-bumped, including ones no cell reached.
    std::vector<TileKey> write_back(const EgoPose& pose,
                                    const FeatureMap& new_prior) override {
        if (new_prior.rows != bev_.bev_rows || new_prior.cols != bev_.bev_cols ||
            new_prior.channels != bev_.channels)
            throw_shape_error("write_back: new_prior is not BEV-shaped");
        const GridCoords coords = local_grid_coords(bev_, pose);
        const std::vector<TileKey> keys = overlapping_tiles(store_spec_, coords);
        // Resolve (and possibly create) every touched tile before the first
        // mutation; all I/O failures happen here, leaving the store intact.
        std::vector<std::shared_ptr<Entry>> entries = resolve(keys, true);

        const int edge = store_spec_.tile_edge;
        const int64_t tx0 = keys.front().ix, ty0 = keys.front().iy;
        const int64_t tx1 = keys.back().ix, ty1 = keys.back().iy;
        const int mrows = static_cast<int>((tx1 - tx0 + 1) * edge);
        const int mcols = static_cast<int>((ty1 - ty0 + 1) * edge);
        const int C = bev_.channels;
        const double res = store_spec_.resolution;

        std::vector<double> sum_w(static_cast<size_t>(mrows) * mcols, 0.0);
        std::vector<double> sum_wf(static_cast<size_t>(mrows) * mcols * C, 0.0);
        for (int i = 0; i < new_prior.rows; ++i)
            for (int j = 0; j < new_prior.cols; ++j) {
                if (!new_prior.covered_at(i, j)) continue;
                const size_t n = coords.idx(i, j);
                const double u = coords.xs[n] / res - 0.5 - tx0 * edge;
                const double v = coords.ys[n] / res - 0.5 - ty0 * edge;
                const int a0 = static_cast<int>(std::floor(u));
                const int b0 = static_cast<int>(std::floor(v));
                const double du = u - a0, dv = v - b0;
                const double wq[4] = {(1 - du) * (1 - dv), (1 - du) * dv,
                                      du * (1 - dv), du * dv};
                const int ra[4] = {a0, a0, a0 + 1, a0 + 1};
                const int cb[4] = {b0, b0 + 1, b0, b0 + 1};
                const float* f = new_prior.cell(i, j);
                for (int q = 0; q < 4; ++q) {
                    if (wq[q] <= 0.0) continue;
                    if (ra[q] < 0 || ra[q] >= mrows || cb[q] < 0 ||
                        cb[q] >= mcols)
                        continue;  // outside the overlapping tile set
                    const size_t cell =
                        static_cast<size_t>(ra[q]) * mcols + cb[q];
                    sum_w[cell] += wq[q];
                    for (int ch = 0; ch < C; ++ch)
                        sum_wf[cell * C + ch] += wq[q] * f[ch];
                }
            }

        // A coarse store cell absorbs several BEV cells; normalize so full
        // coverage lands near weight 1 regardless of the resolution ratio.
        const double area_ratio =
            (bev_.resolution * bev_.resolution) / (res * res);
        const int64_t now = now_seconds();
        for (size_t i = 0; i < keys.size(); ++i) {
            std::unique_lock lk(entries[i]->m);
            MapTile& t = entries[i]->tile;
            const int r0 = static_cast<int>((keys[i].ix - tx0) * edge);
            const int c0 = static_cast<int>((keys[i].iy - ty0) * edge);
            for (int r = 0; r < edge; ++r)
                for (int c = 0; c < edge; ++c) {
                    const size_t cell =
                        static_cast<size_t>(r0 + r) * mcols + (c0 + c);
                    const double s = sum_w[cell] * area_ratio;
                    if (s < 0.05) continue;
                    float* dst = t.cell_features(r, c);
                    for (int ch = 0; ch < C; ++ch)
                        dst[ch] = static_cast<float>(sum_wf[cell * C + ch] /
                                                     sum_w[cell]);
                    t.weight[t.cell(r, c)] = canonical_weight(
                        std::max(t.weight_at(r, c), static_cast<float>(s)));
                }
            t.version += 1;
            t.traversal_count += 1;
            t.last_updated = now;
            entries[i]->dirty = true;
        }
        entries.clear();
        trim();
        return keys;
    }

    // Server-side PUT: replace on a current version, per-cell max-weight
    // merge (ties favor the incoming cell) on a stale one.
    std::pair<PutStatus, uint64_t> apply_put(const MapTile& incoming,
                                             uint64_t known_version) {
        if (incoming.tile_edge != store_spec_.tile_edge ||
            incoming.channels != bev_.channels)
            throw_shape_error("apply_put: tile dimensions mismatch");
        std::pair<PutStatus, uint64_t> result;
        {
            std::shared_ptr<Entry> e = resolve({incoming.key}, true)[0];
            std::unique_lock lk(e->m);
            MapTile& t = e->tile;
            PutStatus status;
            if (known_version == t.version) {
                t.features = incoming.features;
                t.weight = incoming.weight;
                for (auto& w : t.weight) w = canonical_weight(w);
                status = PutStatus::ok;
            } else {
                for (size_t i = 0; i < t.weight.size(); ++i) {
                    const float wi = canonical_weight(incoming.weight[i]);
                    if (wi >= t.weight[i] && wi > 0.0f) {
                        t.weight[i] = wi;
                        std::memcpy(t.features.data() + i * t.channels,
                                    incoming.features.data() + i * t.channels,
                                    sizeof(float) * t.channels);
                    }
                }
                status = PutStatus::stale_merged;
            }
            t.version += 1;
            t.traversal_count =
                std::max(t.traversal_count, incoming.traversal_count);
            t.last_updated = now_seconds();
            e->dirty = true;
            result = {status, t.version};
        }
        trim();
        return result;
    }

    std::optional<MapTile> get_tile_copy(TileKey key) {
        std::optional<MapTile> out;
        {
            std::shared_ptr<Entry> e = resolve({key}, false)[0];
            if (e) {
                std::shared_lock lk(e->m);
                out = e->tile;
            }
        }
        trim();
        return out;
    }

    // resident_bytes counts feature payload of written cells; the dense
    // equivalent is the tile-aligned bounding box stored without sparsity.
    MemoryStats memory_stats() override {
        return static_cast<const TileStore*>(this)->memory_stats();
    }
    MemoryStats memory_stats() const {
        std::lock_guard lk(table_m_);
        MemoryStats s;
        if (table_.empty()) return s;
        int32_t tx0 = 0, tx1 = 0, ty0 = 0, ty1 = 0;
        bool first = true;
        for (const auto& [key, e] : table_) {
            std::shared_lock el(e->m);
            s.resident_bytes += static_cast<uint64_t>(e->tile.covered_cells()) *
                                bev_.channels * sizeof(float);
            if (first) {
                tx0 = tx1 = key.ix;
                ty0 = ty1 = key.iy;
                first = false;
            } else {
                tx0 = std::min(tx0, key.ix);
                tx1 = std::max(tx1, key.ix);
                ty0 = std::min(ty0, key.iy);
                ty1 = std::max(ty1, key.iy);
            }
        }
        const uint64_t edge = store_spec_.tile_edge;
        const uint64_t cells = (static_cast<uint64_t>(tx1 - tx0 + 1) * edge) *
                               (static_cast<uint64_t>(ty1 - ty0 + 1) * edge);
        s.dense_equivalent_bytes = cells * bev_.channels * sizeof(float);
        s.ratio = s.dense_equivalent_bytes
                      ? static_cast<double>(s.resident_bytes) /
                            static_cast<double>(s.dense_equivalent_bytes)
                      : 0.0;
        return s;
    }

    size_t resident_count() const {
        std::lock_guard lk(table_m_);
        return table_.size();
    }

    std::vector<TileKey> known_tiles() const {
        std::vector<TileKey> keys;
        {
            std::lock_guard lk(table_m_);
            keys.reserve(table_.size());
            for (const auto& [key, e] : table_) keys.push_back(key);
        }
        if (!dir_.empty())
            for (const auto& de : std::filesystem::directory_iterator(dir_)) {
                TileKey k;
                if (parse_tile_filename(de.path().filename().string(), k))
                    keys.push_back(k);
            }
        std::sort(keys.begin(), keys.end());
        keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
        return keys;
    }

    void flush() {
        std::lock_guard lk(table_m_);
        for (auto& [key, e] : table_) {
            std::unique_lock el(e->m);
            if (e->dirty) {
                persist(e->tile);
                e->dirty = false;
            }
        }
    }

    // Drops all state, memory and disk. Used for the per-trip reset of
    // intra-trip fusion.
    void clear() override {
        std::lock_guard lk(table_m_);
        table_.clear();
        if (dir_.empty()) return;
        for (const auto& de : std::filesystem::directory_iterator(dir_)) {
            TileKey k;
            if (parse_tile_filename(de.path().filename().string(), k))
                std::filesystem::remove(de.path());
        }
    }

    static bool parse_tile_filename(const std::string& name, TileKey& out) {
        if (name.size() < 12 || name.compare(0, 5, "tile_") != 0 ||
            name.compare(name.size() - 5, 5, ".nmpt") != 0)
            return false;
        const std::string body = name.substr(5, name.size() - 10);
        const size_t us = body.find('_');
        if (us == std::string::npos) return false;
        try {
            size_t a = 0, b = 0;
            const int64_t ix = std::stoll(body.substr(0, us), &a);
            const int64_t iy = std::stoll(body.substr(us + 1), &b);
            if (a != us || b != body.size() - us - 1) return false;
            out = TileKey{static_cast<int32_t>(ix), static_cast<int32_t>(iy)};
            return true;
        } catch (const std::exception&) {
            return false;
        }
    }

  private:
    struct Entry {
        MapTile tile;
        bool dirty = false;
        uint64_t last_use = 0;
        mutable std::shared_mutex m;
    };

    int64_t now_seconds() const {
        if (clock_) return clock_();
        return std::chrono::duration_cast<std::chrono::seconds>(
                   std::chrono::system_clock::now().time_since_epoch())
            .count();
    }

    // A single operation can pin more tiles than the capacity allows; once
    // it releases them this brings the resident count back under the cap.
    void trim() {
        std::lock_guard lk(table_m_);
        evict_down_to(capacity_);
    }

    std::string path_for(TileKey key) const {
        return (std::filesystem::path(dir_) / tile_filename(key)).string();
    }

    void persist(const MapTile& t) const {
        if (dir_.empty())
            throw std::runtime_error("tile store has no backing directory");
        const std::vector<uint8_t> bytes = save_tile(t);
        const std::string tmp = path_for(t.key) + ".tmp";
        {
            std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
            if (!f) throw std::runtime_error("cannot write " + tmp);
            f.write(reinterpret_cast<const char*>(bytes.data()),
                    static_cast<std::streamsize>(bytes.size()));
            if (!f) throw std::runtime_error("short write to " + tmp);
        }
        std::filesystem::rename(tmp, path_for(t.key));
    }

    // Looks up (or loads, or creates) entries for the given sorted key list.
    // With create = false, missing tiles come back null. Holding the
    // returned shared_ptrs pins the entries against eviction.
    std::vector<std::shared_ptr<Entry>> resolve(
        const std::vector<TileKey>& keys, bool create) {
        std::vector<std::shared_ptr<Entry>> out(keys.size());
        std::lock_guard lk(table_m_);
        for (size_t i = 0; i < keys.size(); ++i) {
            auto it = table_.find(keys[i]);
            if (it != table_.end()) {
                it->second->last_use = ++use_counter_;
                out[i] = it->second;
                continue;
            }
            std::optional<MapTile> loaded = load_from_disk(keys[i]);
            if (!loaded && !create) continue;
            auto e = std::make_shared<Entry>();
            e->tile = loaded ? std::move(*loaded)
                             : MapTile(keys[i], store_spec_.tile_edge,
                                       bev_.channels);
            e->last_use = ++use_counter_;
            evict_down_to(capacity_ - 1);
            table_.emplace(keys[i], e);
            out[i] = std::move(e);
        }
        return out;
    }

    std::optional<MapTile> load_from_disk(TileKey key) const {
        if (dir_.empty()) return std::nullopt;
        std::ifstream f(path_for(key), std::ios::binary);
        if (!f) return std::nullopt;
        std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
        MapTile t = load_tile(bytes);
        if (t.key != key)
            throw std::runtime_error("tile file " + path_for(key) +
                                     " holds key " + tile_filename(t.key));
        return t;
    }

    // Caller holds table_m_. Evicts least-recently-used entries nobody else
    // references, persisting dirty ones first.
    void evict_down_to(size_t target) {
        while (table_.size() > target) {
            auto victim = table_.end();
            for (auto it = table_.begin(); it != table_.end(); ++it) {
                if (it->second.use_count() > 1) continue;
                if (victim == table_.end() ||
                    it->second->last_use < victim->second->last_use)
                    victim = it;
            }
            if (victim == table_.end()) return;  // everything pinned
            if (victim->second->dirty) persist(victim->second->tile);
            table_.erase(victim);
        }
    }

    GridSpec bev_;
    GridSpec store_spec_;
    std::string dir_;
    size_t capacity_;
    std::function<int64_t()> clock_;
    mutable std::mutex table_m_;
    std::unordered_map<TileKey, std::shared_ptr<Entry>, TileKeyHash> table_;
    uint64_t use_counter_ = 0;
};

}  // namespace nmp

#pragma once
// Desk-scale synthetic data side of the neural map prior: a procedural city
// with painted road semantics, a noisy BEV sensor that lifts class labels
// into feature space, the matching linear-probe decoder, trip planning, and
// the fleet loop that runs query / fuse / decode / write-back against a
// prior store and aggregates IoU plus gate statistics into a report.

#include <nmp/fusion.hpp>
#include <nmp/geometry.hpp>
#include <nmp/random.hpp>
#include <nmp/tensor.hpp>
#include <nmp/tile_store.hpp>

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace nmp {

enum class RoadClass : uint8_t {
    background = 0,
    divider = 1,
    crossing = 2,
    boundary = 3,
};

inline constexpr int kNumClasses = 4;

inline const char* road_class_name(RoadClass c) {
    switch (c) {
        case RoadClass::background: return "background";
        case RoadClass::divider: return "divider";
        case RoadClass::crossing: return "crossing";
        case RoadClass::boundary: return "boundary";
    }
    return "?";
}

// Hard per-cell labels, row-major. Doubles as ground truth raster and as
// decoder output.
struct SemanticMap {
    int rows = 0;
    int cols = 0;
    std::vector<uint8_t> labels;

    SemanticMap() = default;
    SemanticMap(int r, int c)
        : rows(r), cols(c), labels(static_cast<size_t>(r) * c, 0) {}

    uint8_t& at(int r, int c) {
        return labels[static_cast<size_t>(r) * cols + c];
    }
    uint8_t at(int r, int c) const {
        return labels[static_cast<size_t>(r) * cols + c];
    }
};

// Road centerline segment with a physical width. The painted semantics
// derived from it are two boundary lines at +-width/2 and a divider line on
// the centerline itself.
struct RoadSegment {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    double width = 0;
};

// Axis-aligned filled rectangle, used for pedestrian crossings at junctions.
struct CrossingRect {
    double cx = 0, cy = 0;
    double half_x = 0, half_y = 0;
};

struct CityParams {
    double road_pitch = 90.0;   // nominal spacing of the road grid
    double road_width = 12.0;
    double jitter_frac = 0.15;  // per-road position jitter, fraction of pitch
    double line_width = 0.5;    // painted divider/boundary line width
    double crossing_apron = 3.0;
    double edge_margin = 45.0;  // keeps roads far enough in for BEV footprints
};

struct CityMap {
    uint64_t seed = 0;
    double extent_m = 0;
    double resolution = 0;
    CityParams params;
    std::vector<RoadSegment> roads;
    std::vector<CrossingRect> crossings;
    SemanticMap gt;
};

namespace detail {

inline double point_segment_distance(double px, double py, double x0,
                                     double y0, double x1, double y1) {
    const double dx = x1 - x0, dy = y1 - y0;
    const double len2 = dx * dx + dy * dy;
    double t = 0.0;
    if (len2 > 0.0) {
        t = ((px - x0) * dx + (py - y0) * dy) / len2;
        t = std::clamp(t, 0.0, 1.0);
    }
    const double qx = x0 + t * dx, qy = y0 + t * dy;
    return std::hypot(px - qx, py - qy);
}

// Paints every cell whose center lies within half the line width of the
// segment. Painting respects precedence: crossing beats boundary beats
// divider beats background, independent of paint order.
inline void paint_line(SemanticMap& m, double res, double x0, double y0,
                       double x1, double y1, double half_width,
                       RoadClass cls) {
    const double pad = half_width + res;
    const int r_lo = std::max(0, static_cast<int>((std::min(x0, x1) - pad) / res));
    const int r_hi = std::min(m.rows - 1,
                              static_cast<int>((std::max(x0, x1) + pad) / res));
    const int c_lo = std::max(0, static_cast<int>((std::min(y0, y1) - pad) / res));
    const int c_hi = std::min(m.cols - 1,
                              static_cast<int>((std::max(y0, y1) + pad) / res));
    for (int r = r_lo; r <= r_hi; ++r) {
        const double x = (r + 0.5) * res;
        for (int c = c_lo; c <= c_hi; ++c) {
            const double y = (c + 0.5) * res;
            if (point_segment_distance(x, y, x0, y0, x1, y1) > half_width)
                continue;
            uint8_t& cell = m.at(r, c);
            if (static_cast<uint8_t>(cls) == 0) continue;
            const RoadClass cur = static_cast<RoadClass>(cell);
            // divider < boundary < crossing in override strength
            auto rank = [](RoadClass v) {
                switch (v) {
                    case RoadClass::background: return 0;
                    case RoadClass::divider: return 1;
                    case RoadClass::boundary: return 2;
                    case RoadClass::crossing: return 3;
                }
                return 0;
            };
            if (rank(cls) > rank(cur)) cell = static_cast<uint8_t>(cls);
        }
    }
}

}  // namespace detail

// Rasterizes painted road semantics onto a square raster covering
// [0, extent_m)^2 at the given resolution. Cell (r, c) samples the world
// point ((r + 0.5) res, (c + 0.5) res); a cell takes a line's class when
// that point lies within half the painted line width of the line.
inline SemanticMap rasterize(const std::vector<RoadSegment>& roads,
                             const std::vector<CrossingRect>& crossings,
                             double extent_m, double resolution,
                             double line_width = 0.5) {
    if (extent_m <= 0 || resolution <= 0)
        throw std::invalid_argument("rasterize: bad extent or resolution");
    const int n = static_cast<int>(std::lround(extent_m / resolution));
    SemanticMap m(n, n);
    const double hw = line_width / 2.0;

    for (const RoadSegment& r : roads) {
        const double dx = r.x1 - r.x0, dy = r.y1 - r.y0;
        const double len = std::hypot(dx, dy);
        if (len <= 0.0) throw std::invalid_argument("rasterize: empty road");
        const double px = -dy / len, py = dx / len;  // unit perpendicular
        detail::paint_line(m, resolution, r.x0, r.y0, r.x1, r.y1, hw,
                           RoadClass::divider);
        for (double side : {-1.0, 1.0}) {
            const double off = side * r.width / 2.0;
            detail::paint_line(m, resolution, r.x0 + px * off, r.y0 + py * off,
                               r.x1 + px * off, r.y1 + py * off, hw,
                               RoadClass::boundary);
        }
    }
    for (const CrossingRect& cr : crossings) {
        const int r_lo = std::max(
            0, static_cast<int>((cr.cx - cr.half_x) / resolution));
        const int r_hi = std::min(
            n - 1, static_cast<int>((cr.cx + cr.half_x) / resolution));
        for (int r = r_lo; r <= r_hi; ++r) {
            const double x = (r + 0.5) * resolution;
            if (std::abs(x - cr.cx) > cr.half_x) continue;
            const int c_lo = std::max(
                0, static_cast<int>((cr.cy - cr.half_y) / resolution));
            const int c_hi = std::min(
                n - 1, static_cast<int>((cr.cy + cr.half_y) / resolution));
            for (int c = c_lo; c <= c_hi; ++c) {
                const double y = (c + 0.5) * resolution;
                if (std::abs(y - cr.cy) > cr.half_y) continue;
                m.at(r, c) = static_cast<uint8_t>(RoadClass::crossing);
            }
        }
    }
    return m;
}

// Jittered grid of axis-aligned roads with junction crossings. Road
// positions snap to the raster lattice so a vehicle driving a lane center
// hits cell centers exactly; that keeps the zero-noise pipeline an exact
// fixed point through splat and sample.
inline CityMap generate_city(uint64_t seed, double extent_m = 600.0,
                             double resolution = 0.3,
                             const CityParams& params = {}) {
    if (extent_m < 200.0)
        throw std::invalid_argument(
            "generate_city: extent must be at least 200 m");
    if (resolution <= 0)
        throw std::invalid_argument("generate_city: bad resolution");

    CityMap city;
    city.seed = seed;
    city.extent_m = extent_m;
    city.resolution = resolution;
    city.params = params;

    Rng rng(derive_seed(seed, 0xC171));
    const int k = std::max(
        2, static_cast<int>(std::lround(extent_m / params.road_pitch)));
    const double pitch = extent_m / k;
    auto snap = [&](double v) {
        return std::round(v / resolution) * resolution;
    };
    const double lo = params.edge_margin;
    const double hi = extent_m - params.edge_margin;

    std::vector<double> xs, ys;
    for (int i = 0; i < k; ++i) {
        const double raw = (i + 0.5) * pitch +
                           rng.uniform(-params.jitter_frac,
                                       params.jitter_frac) * pitch;
        xs.push_back(snap(std::clamp(raw, lo, hi)));
    }
    for (int i = 0; i < k; ++i) {
        const double raw = (i + 0.5) * pitch +
                           rng.uniform(-params.jitter_frac,
                                       params.jitter_frac) * pitch;
        ys.push_back(snap(std::clamp(raw, lo, hi)));
    }
    for (double x : xs)
        city.roads.push_back({x, 0.0, x, extent_m, params.road_width});
    for (double y : ys)
        city.roads.push_back({0.0, y, extent_m, y, params.road_width});

    const double half = params.road_width / 2.0 + params.crossing_apron;
    for (double x : xs)
        for (double y : ys) city.crossings.push_back({x, y, half, half});

    city.gt = rasterize(city.roads, city.crossings, extent_m, resolution,
                        params.line_width);
    return city;
}

// Nearest-cell ground-truth lookup in world coordinates.
inline RoadClass label_at(const CityMap& city, double x, double y) {
    if (!(x >= 0.0 && y >= 0.0 && x < city.extent_m && y < city.extent_m))
        throw std::out_of_range("label_at: point outside the city extent");
    const int r = std::min(city.gt.rows - 1,
                           static_cast<int>(x / city.resolution));
    const int c = std::min(city.gt.cols - 1,
                           static_cast<int>(y / city.resolution));
    return static_cast<RoadClass>(city.gt.at(r, c));
}

// ---- observation conditions ----

struct Condition {
    std::string name = "normal";
    double noise_sigma = 0.25;
    double occlusion_rate = 0.02;
    double range_decay = 0.01;

    void validate() const {
        if (name != "normal" && name != "rain" && name != "night" &&
            name != "night_rain")
            throw std::invalid_argument("unknown condition name: " + name);
        if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma))
            throw std::invalid_argument("condition: noise_sigma must be >= 0");
        if (!(occlusion_rate >= 0.0 && occlusion_rate <= 1.0))
            throw std::invalid_argument(
                "condition: occlusion_rate must lie in [0, 1]");
        if (!(range_decay >= 0.0) || !std::isfinite(range_decay))
            throw std::invalid_argument("condition: range_decay must be >= 0");
    }
};

inline Condition condition_preset(const std::string& name) {
    Condition c;
    c.name = name;
    if (name == "normal") {
        c.noise_sigma = 0.25;
        c.occlusion_rate = 0.02;
        c.range_decay = 0.01;
    } else if (name == "rain") {
        c.noise_sigma = 0.50;
        c.occlusion_rate = 0.06;
        c.range_decay = 0.015;
    } else if (name == "night") {
        c.noise_sigma = 0.65;
        c.occlusion_rate = 0.10;
        c.range_decay = 0.02;
    } else if (name == "night_rain") {
        c.noise_sigma = 0.85;
        c.occlusion_rate = 0.15;
        c.range_decay = 0.025;
    } else {
        throw std::invalid_argument("unknown condition preset: " + name);
    }
    return c;
}

// BEV extents used by the experiments. Cell counts snap down to multiples
// of ten so the attention patching divides them evenly.
inline GridSpec bev_preset(const std::string& name, double resolution = 0.3,
                           int channels = 8) {
    double length = 0, width = 0;
    if (name == "near") {
        length = 60.0;
        width = 30.0;
    } else if (name == "mid") {
        length = 100.0;
        width = 100.0;
    } else if (name == "far") {
        length = 160.0;
        width = 100.0;
    } else {
        throw std::invalid_argument("unknown BEV preset: " + name);
    }
    auto cells = [&](double len) {
        const int n = static_cast<int>(std::lround(len / resolution));
        return std::max(10, n - n % 10);
    };
    GridSpec spec;
    spec.resolution = resolution;
    spec.channels = channels;
    spec.bev_rows = cells(length);
    spec.bev_cols = cells(width);
    spec.validate();
    return spec;
}

// ---- sensor model ----

// Simulated BEV feature observation at a pose: the ground-truth class of
// each cell lifted through the class embedding, plus range-scaled Gaussian
// noise and angular occlusion sectors emanating from the ego position.
// Deterministic in (pose, condition, seed).
inline FeatureMap observe(const CityMap& city, const GridSpec& spec,
                          const Matrix<float>& embedding, const EgoPose& pose,
                          const Condition& cond, uint64_t seed) {
    cond.validate();
    spec.validate();
    if (embedding.rows != kNumClasses || embedding.cols != spec.channels)
        throw std::invalid_argument(
            "observe: embedding shape does not match the grid channels");

    const GridCoords coords = local_grid_coords(spec, pose);
    FeatureMap out(spec.bev_rows, spec.bev_cols, spec.channels);
    Rng noise(derive_seed(seed, 1));

    for (int r = 0; r < spec.bev_rows; ++r) {
        for (int c = 0; c < spec.bev_cols; ++c) {
            const size_t idx = coords.idx(r, c);
            const RoadClass cls =
                label_at(city, coords.xs[idx], coords.ys[idx]);
            float* f = out.cell(r, c);
            const float* e = &embedding.at(static_cast<int>(cls), 0);
            for (int ch = 0; ch < spec.channels; ++ch) f[ch] = e[ch];
            if (cond.noise_sigma > 0.0) {
                double ex = 0.0, ey = 0.0;
                bev_cell_center(spec, r, c, ex, ey);
                const float scale = static_cast<float>(
                    cond.noise_sigma *
                    (1.0 + cond.range_decay * std::hypot(ex, ey)));
                for (int ch = 0; ch < spec.channels; ++ch)
                    f[ch] += noise.gaussianf() * scale;
            }
        }
    }

    if (cond.occlusion_rate > 0.0) {
        Rng occ(derive_seed(seed, 2));
        if (cond.occlusion_rate >= 1.0) {
            std::fill(out.data.begin(), out.data.end(), 0.0f);
            return out;
        }
        // Two angular sectors whose spans sum to the requested fraction of
        // the full circle. The grid is rectangular, so the zeroed cell
        // fraction only approximates the rate; rate 1 blanks everything.
        const double total = cond.occlusion_rate * 2.0 * M_PI;
        const double split = occ.uniform(0.25, 0.75);
        const double spans[2] = {total * split, total * (1.0 - split)};
        const double starts[2] = {occ.uniform(-M_PI, M_PI),
                                  occ.uniform(-M_PI, M_PI)};
        for (int r = 0; r < spec.bev_rows; ++r)
            for (int c = 0; c < spec.bev_cols; ++c) {
                double ex = 0.0, ey = 0.0;
                bev_cell_center(spec, r, c, ex, ey);
                const double theta = std::atan2(ey, ex);
                bool hit = false;
                for (int s = 0; s < 2 && !hit; ++s) {
                    const double rel = std::fmod(
                        theta - starts[s] + 4.0 * M_PI, 2.0 * M_PI);
                    hit = rel < spans[s];
                }
                if (hit) {
                    float* f = out.cell(r, c);
                    std::fill(f, f + spec.channels, 0.0f);
                }
            }
    }
    return out;
}

// Ground-truth labels over the same BEV footprint an observation covers,
// using the same nearest-cell rule.
inline SemanticMap gt_crop(const CityMap& city, const GridSpec& spec,
                           const EgoPose& pose) {
    const GridCoords coords = local_grid_coords(spec, pose);
    SemanticMap m(spec.bev_rows, spec.bev_cols);
    for (int r = 0; r < spec.bev_rows; ++r)
        for (int c = 0; c < spec.bev_cols; ++c) {
            const size_t idx = coords.idx(r, c);
            m.at(r, c) = static_cast<uint8_t>(
                label_at(city, coords.xs[idx], coords.ys[idx]));
        }
    return m;
}

// Linear probe back to classes. The embedding has orthonormal rows, so its
// transpose is the pseudo-inverse; a small background bias breaks the
// all-zero tie in favor of background before the argmax.
inline SemanticMap decode(const FeatureMap& f, const Matrix<float>& embedding,
                          float bias_eps = 1e-3f) {
    if (embedding.rows != kNumClasses || f.channels != embedding.cols)
        throw std::invalid_argument(
            "decode: feature channels do not match the embedding");
    SemanticMap m(f.rows, f.cols);
    for (int r = 0; r < f.rows; ++r)
        for (int c = 0; c < f.cols; ++c) {
            const float* v = f.cell(r, c);
            float best = -1e30f;
            int best_k = 0;
            for (int k = 0; k < kNumClasses; ++k) {
                float s = 0.0f;
                const float* e = &embedding.at(k, 0);
                for (int ch = 0; ch < f.channels; ++ch) s += v[ch] * e[ch];
                if (k == 0) s += bias_eps;
                if (s > best) {
                    best = s;
                    best_k = k;
                }
            }
            m.at(r, c) = static_cast<uint8_t>(best_k);
        }
    return m;
}

// ---- evaluation ----

struct ClassIou {
    std::array<double, kNumClasses> iou{};
    std::array<bool, kNumClasses> defined{};
    std::optional<double> miou;  // mean over road classes present somewhere
};

namespace detail {

struct IouCounts {
    std::array<int64_t, kNumClasses> inter{};
    std::array<int64_t, kNumClasses> uni{};

    void add(const SemanticMap& pred, const SemanticMap& gt) {
        if (pred.rows != gt.rows || pred.cols != gt.cols)
            throw std::invalid_argument("IoU: shape mismatch");
        for (size_t i = 0; i < gt.labels.size(); ++i) {
            const uint8_t p = pred.labels[i], g = gt.labels[i];
            if (p == g) {
                ++inter[p];
                ++uni[p];
            } else {
                ++uni[p];
                ++uni[g];
            }
        }
    }

    ClassIou finish() const {
        ClassIou out;
        double sum = 0.0;
        int n = 0;
        for (int k = 0; k < kNumClasses; ++k) {
            out.defined[k] = uni[k] > 0;
            out.iou[k] = out.defined[k] ? static_cast<double>(inter[k]) /
                                              static_cast<double>(uni[k])
                                        : 0.0;
            if (k > 0 && out.defined[k]) {
                sum += out.iou[k];
                ++n;
            }
        }
        if (n > 0) out.miou = sum / n;
        return out;
    }
};

}  // namespace detail

// Per-class intersection over union. A class absent from both maps is
// undefined and excluded; the mean runs over the three road classes.
inline ClassIou evaluate_miou(const SemanticMap& pred, const SemanticMap& gt) {
    detail::IouCounts counts;
    counts.add(pred, gt);
    return counts.finish();
}

// ---- trips ----

struct TripPlan {
    int vehicle_id = 0;
    std::vector<EgoPose> poses;
    Condition condition;
    uint64_t obs_seed = 0;  // frame k draws with derive_seed(obs_seed, k)
};

// Plans a straight drive along one road: picks a road with enough lateral
// clearance for the BEV footprint, a direction and a lane side, then lays
// poses at fixed spacing. All coordinates land on the raster lattice.
// Clamps the frame count if the road is too short for the request.
inline TripPlan make_trip(const CityMap& city, const GridSpec& spec,
                          int vehicle_id, uint64_t route_seed, int frames,
                          double spacing_m, const Condition& cond,
                          uint64_t obs_seed) {
    cond.validate();
    spec.validate();
    if (frames < 1) throw std::invalid_argument("make_trip: frames < 1");
    const double res = spec.resolution;
    const double long_half = spec.bev_rows * res / 2.0;
    const double lat_half = spec.bev_cols * res / 2.0;
    if (!(spacing_m > 0.0) || spacing_m >= 2.0 * long_half)
        throw std::invalid_argument(
            "make_trip: spacing must be positive and below the BEV length");

    Rng rng(derive_seed(route_seed, 0x7219));
    auto snap = [&](double v) { return std::round(v / res) * res; };

    struct Candidate {
        bool vertical;
        double road_pos;    // constant coordinate of the centerline
        double along_lo, along_hi;
    };
    std::vector<Candidate> cands;
    for (const RoadSegment& r : city.roads) {
        const bool vertical = r.x0 == r.x1;
        if (!vertical && r.y0 != r.y1) continue;  // only axis-aligned roads
        const double pos = vertical ? r.x0 : r.y0;
        const double lane_off = snap(r.width / 4.0);
        if (pos - lane_off - lat_half < res ||
            pos + lane_off + lat_half > city.extent_m - res)
            continue;
        const double lo = std::ceil((long_half + res) / res) * res;
        const double hi = city.extent_m - long_half - res;
        if (hi - lo < (frames > 1 ? spacing_m : 0.0)) continue;
        cands.push_back({vertical, pos, lo, hi});
    }
    if (cands.empty())
        throw std::runtime_error(
            "make_trip: no road admits this BEV footprint");

    const Candidate& road = cands[static_cast<size_t>(
        rng.uniform_int(0, static_cast<int>(cands.size()) - 1))];
    const int dir = rng.uniform_int(0, 1) ? 1 : -1;
    const int side = rng.uniform_int(0, 1) ? 1 : -1;
    const double lane_off =
        side * snap(city.params.road_width / 4.0);

    const double usable = road.along_hi - road.along_lo;
    int n = frames;
    if ((n - 1) * spacing_m > usable)
        n = std::max(1, static_cast<int>(usable / spacing_m) + 1);
    const double slack = usable - (n - 1) * spacing_m;
    const double extra =
        std::floor(rng.uniform(0.0, slack) / res) * res;

    TripPlan trip;
    trip.vehicle_id = vehicle_id;
    trip.condition = cond;
    trip.obs_seed = obs_seed;
    for (int k = 0; k < n; ++k) {
        const double along = dir > 0
                                 ? road.along_lo + extra + k * spacing_m
                                 : road.along_hi - extra - k * spacing_m;
        EgoPose p;
        if (road.vertical) {
            p.x = road.road_pos + lane_off;
            p.y = along;
            p.yaw = dir > 0 ? M_PI / 2.0 : -M_PI / 2.0;
        } else {
            p.x = along;
            p.y = road.road_pos + lane_off;
            p.yaw = dir > 0 ? 0.0 : M_PI;
        }
        trip.poses.push_back(p);
    }
    return trip;
}

// A fleet of trips. With same_route every trip drives the same poses (the
// repeated-traversal scenarios); otherwise each trip draws its own route.
// Observation seeds always differ per trip.
inline std::vector<TripPlan> plan_trips(const CityMap& city,
                                        const GridSpec& spec, int count,
                                        int frames, double spacing_m,
                                        const Condition& cond,
                                        uint64_t route_seed, bool same_route,
                                        uint64_t run_seed) {
    if (count < 1) throw std::invalid_argument("plan_trips: count < 1");
    std::vector<TripPlan> trips;
    trips.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        const uint64_t rs =
            same_route ? route_seed : derive_seed(route_seed, 17 + i);
        trips.push_back(make_trip(city, spec, i, rs, frames, spacing_m, cond,
                                  derive_seed(run_seed, 1000 + i)));
    }
    return trips;
}

// ---- fleet loop ----

enum class FusionMode { intra, inter };

inline const char* mode_name(FusionMode m) {
    return m == FusionMode::intra ? "intra" : "inter";
}

inline FusionMode parse_mode(const std::string& s) {
    if (s == "intra") return FusionMode::intra;
    if (s == "inter") return FusionMode::inter;
    throw std::invalid_argument("unknown fusion mode: " + s);
}

struct RunOptions {
    FuseStrategy strategy = FuseStrategy::ma;
    double alpha = 0.5;
    FusionMode mode = FusionMode::inter;
    bool freeze_store = false;  // evaluate only, never clear or write back
};

struct FrameStats {
    int trip = 0;
    int frame = 0;
    EgoPose pose;
    std::array<double, kNumClasses> iou{};
    std::array<bool, kNumClasses> iou_defined{};
    std::optional<double> miou;
    std::optional<double> gate_mean;
    std::optional<double> gate_mean_covered;
    std::optional<double> gate_mean_uncovered;
    double prior_coverage = 0.0;
};

struct TripStats {
    int trip = 0;
    int vehicle_id = 0;
    std::string condition;
    int frames = 0;
    std::array<double, kNumClasses> iou{};
    std::array<bool, kNumClasses> iou_defined{};
    std::optional<double> miou;
    std::optional<double> frame_miou_mean;
    std::optional<double> gate_mean;
    double prior_coverage_mean = 0.0;
};

struct RunReport {
    uint64_t city_seed = 0;
    double city_extent_m = 0;
    double city_resolution = 0;
    int bev_rows = 0, bev_cols = 0, channels = 0;
    double bev_resolution = 0;
    std::string strategy;
    std::string mode;
    double alpha = 0;
    bool freeze_store = false;

    std::vector<TripStats> trips;
    std::vector<FrameStats> frames;

    std::array<double, kNumClasses> iou{};
    std::array<bool, kNumClasses> iou_defined{};
    std::optional<double> miou;
    std::optional<double> frame_miou_mean;
    std::optional<double> gate_mean;
    MemoryStats memory;

    bool aborted = false;
    std::string error;

    nlohmann::json to_json() const;
};

// Runs every trip through the query / fuse / decode / write-back loop
// against the given prior store. Intra-trip mode clears the store before
// each trip so fusion only sees the current traversal; inter-trip mode lets
// the prior accumulate. A failing frame aborts the run and returns the
// partial report with the error recorded.
inline RunReport run_fleet(const CityMap& city, const GridSpec& spec,
                           const std::vector<TripPlan>& trips,
                           const RunOptions& opt, const WeightSet& weights,
                           PriorStore& store) {
    spec.validate();
    RunReport rep;
    rep.city_seed = city.seed;
    rep.city_extent_m = city.extent_m;
    rep.city_resolution = city.resolution;
    rep.bev_rows = spec.bev_rows;
    rep.bev_cols = spec.bev_cols;
    rep.channels = spec.channels;
    rep.bev_resolution = spec.resolution;
    rep.strategy = strategy_name(opt.strategy);
    rep.mode = mode_name(opt.mode);
    rep.alpha = opt.alpha;
    rep.freeze_store = opt.freeze_store;

    detail::IouCounts overall;
    double overall_miou_sum = 0.0;
    int overall_miou_n = 0;
    double overall_gate_sum = 0.0;
    int64_t overall_gate_n = 0;

    try {
        for (size_t t = 0; t < trips.size(); ++t) {
            const TripPlan& trip = trips[t];
            if (opt.mode == FusionMode::intra && !opt.freeze_store)
                store.clear();

            detail::IouCounts trip_counts;
            double miou_sum = 0.0;
            int miou_n = 0;
            double gate_sum = 0.0;
            int64_t gate_n = 0;
            double coverage_sum = 0.0;
            int frames_done = 0;

            for (size_t k = 0; k < trip.poses.size(); ++k) {
                const EgoPose& pose = trip.poses[k];
                FeatureMap obs =
                    observe(city, spec, weights.embedding, pose,
                            trip.condition, derive_seed(trip.obs_seed, k));
                FeatureMap prior = store.query_region(pose);

                size_t covered = 0;
                for (size_t i = 0; i < prior.cell_count(); ++i)
                    if (prior.coverage[i]) ++covered;

                FuseResult fused =
                    fuse(opt.strategy, obs, prior, weights, opt.alpha);
                SemanticMap pred = decode(fused.refined, weights.embedding);
                SemanticMap gt = gt_crop(city, spec, pose);
                ClassIou ci = evaluate_miou(pred, gt);

                FrameStats fs;
                fs.trip = static_cast<int>(t);
                fs.frame = static_cast<int>(k);
                fs.pose = pose;
                fs.iou = ci.iou;
                fs.iou_defined = ci.defined;
                fs.miou = ci.miou;
                fs.prior_coverage =
                    static_cast<double>(covered) /
                    static_cast<double>(prior.cell_count());

                if (fused.gate.has_value()) {
                    const FeatureMap& z = *fused.gate;
                    double sum_all = 0.0, sum_cov = 0.0, sum_unc = 0.0;
                    int64_t n_cov = 0, n_unc = 0;
                    for (int r = 0; r < z.rows; ++r)
                        for (int c = 0; c < z.cols; ++c) {
                            const float* zp = z.cell(r, c);
                            double s = 0.0;
                            for (int ch = 0; ch < z.channels; ++ch)
                                s += zp[ch];
                            sum_all += s;
                            if (prior.covered_at(r, c)) {
                                sum_cov += s;
                                n_cov += z.channels;
                            } else {
                                sum_unc += s;
                                n_unc += z.channels;
                            }
                        }
                    const int64_t n_all = n_cov + n_unc;
                    fs.gate_mean = sum_all / static_cast<double>(n_all);
                    if (n_cov > 0)
                        fs.gate_mean_covered =
                            sum_cov / static_cast<double>(n_cov);
                    if (n_unc > 0)
                        fs.gate_mean_uncovered =
                            sum_unc / static_cast<double>(n_unc);
                    gate_sum += sum_all;
                    gate_n += n_all;
                    overall_gate_sum += sum_all;
                    overall_gate_n += n_all;
                }

                if (!opt.freeze_store)
                    store.write_back(pose, fused.new_prior);

                trip_counts.add(pred, gt);
                overall.add(pred, gt);
                if (ci.miou) {
                    miou_sum += *ci.miou;
                    ++miou_n;
                    overall_miou_sum += *ci.miou;
                    ++overall_miou_n;
                }
                coverage_sum += fs.prior_coverage;
                rep.frames.push_back(std::move(fs));
                ++frames_done;
            }

            TripStats ts;
            ts.trip = static_cast<int>(t);
            ts.vehicle_id = trip.vehicle_id;
            ts.condition = trip.condition.name;
            ts.frames = frames_done;
            ClassIou agg = trip_counts.finish();
            ts.iou = agg.iou;
            ts.iou_defined = agg.defined;
            ts.miou = agg.miou;
            if (miou_n > 0) ts.frame_miou_mean = miou_sum / miou_n;
            if (gate_n > 0)
                ts.gate_mean = gate_sum / static_cast<double>(gate_n);
            if (frames_done > 0)
                ts.prior_coverage_mean = coverage_sum / frames_done;
            rep.trips.push_back(std::move(ts));
        }
    } catch (const std::exception& e) {
        rep.aborted = true;
        rep.error = e.what();
    }

    ClassIou agg = overall.finish();
    rep.iou = agg.iou;
    rep.iou_defined = agg.defined;
    rep.miou = agg.miou;
    if (overall_miou_n > 0)
        rep.frame_miou_mean = overall_miou_sum / overall_miou_n;
    if (overall_gate_n > 0)
        rep.gate_mean = overall_gate_sum / static_cast<double>(overall_gate_n);
    rep.memory = store.memory_stats();
    return rep;
}

inline nlohmann::json RunReport::to_json() const {
    using nlohmann::json;
    auto opt_num = [](const std::optional<double>& v) {
        return v ? json(*v) : json(nullptr);
    };
    auto iou_block = [](const std::array<double, kNumClasses>& iou,
                        const std::array<bool, kNumClasses>& defined) {
        json j;
        for (int k = 0; k < kNumClasses; ++k)
            j[road_class_name(static_cast<RoadClass>(k))] =
                defined[k] ? json(iou[k]) : json(nullptr);
        return j;
    };

    json j;
    j["config"] = {{"city_seed", city_seed},
                   {"city_extent_m", city_extent_m},
                   {"city_resolution_m", city_resolution},
                   {"bev_rows", bev_rows},
                   {"bev_cols", bev_cols},
                   {"channels", channels},
                   {"bev_resolution_m", bev_resolution},
                   {"strategy", strategy},
                   {"alpha", alpha},
                   {"mode", mode},
                   {"freeze_store", freeze_store},
                   {"trips", trips.size()}};
    j["overall"] = {{"miou", opt_num(miou)},
                    {"iou", iou_block(iou, iou_defined)},
                    {"frame_miou_mean", opt_num(frame_miou_mean)},
                    {"gate_mean", opt_num(gate_mean)}};

    json jtrips = json::array();
    for (const TripStats& t : trips) {
        json jt = {{"trip", t.trip},
                   {"vehicle_id", t.vehicle_id},
                   {"condition", t.condition},
                   {"frames", t.frames},
                   {"miou", opt_num(t.miou)},
                   {"iou", iou_block(t.iou, t.iou_defined)},
                   {"frame_miou_mean", opt_num(t.frame_miou_mean)},
                   {"gate_mean", opt_num(t.gate_mean)},
                   {"prior_coverage_mean", t.prior_coverage_mean}};
        json jframes = json::array();
        for (const FrameStats& f : frames) {
            if (f.trip != t.trip) continue;
            jframes.push_back(
                {{"frame", f.frame},
                 {"pose", {{"x", f.pose.x}, {"y", f.pose.y}, {"yaw", f.pose.yaw}}},
                 {"miou", opt_num(f.miou)},
                 {"iou", iou_block(f.iou, f.iou_defined)},
                 {"gate_mean", opt_num(f.gate_mean)},
                 {"gate_mean_covered", opt_num(f.gate_mean_covered)},
                 {"gate_mean_uncovered", opt_num(f.gate_mean_uncovered)},
                 {"prior_coverage", f.prior_coverage}});
        }
        jt["frames"] = std::move(jframes);
        jtrips.push_back(std::move(jt));
    }
    j["trips"] = std::move(jtrips);
    j["memory"] = {{"resident_bytes", memory.resident_bytes},
                   {"dense_equivalent_bytes", memory.dense_equivalent_bytes},
                   {"ratio", memory.ratio}};
    j["aborted"] = aborted;
    j["error"] = error;
    return j;
}

}  // namespace nmp

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "nmp/tensor.hpp"

namespace nmp {

// Normalize to (-pi, pi].
inline double normalize_angle(double a) {
    a = std::fmod(a, 2.0 * M_PI);
    if (a <= -M_PI) a += 2.0 * M_PI;
    if (a > M_PI) a -= 2.0 * M_PI;
    return a;
}

// Planar SE(2) ego pose. Poses coming from a 4x4 homogeneous matrix are
// projected onto the ground plane: z, roll and pitch are discarded.
struct EgoPose {
    double x = 0.0;
    double y = 0.0;
    double yaw = 0.0;

    EgoPose() = default;
    EgoPose(double px, double py, double pyaw)
        : x(px), y(py), yaw(normalize_angle(pyaw)) {}

    // Row-major 4x4 [R | t; 0 1].
    static EgoPose from_matrix(const std::array<double, 16>& m) {
        return EgoPose(m[3], m[7], std::atan2(m[4], m[0]));
    }
};

// Raster geometry shared by the local BEV and the global tile grid.
// rows run along ego +x (forward), cols along ego +y (left); row 0 is the
// front edge and col 0 the left edge of the BEV rectangle.
struct GridSpec {
    double resolution = 0.3;  // meters per cell
    int bev_rows = 200;       // 60 m at 0.3 m
    int bev_cols = 100;       // 30 m at 0.3 m
    int channels = 32;
    int tile_edge = 64;

    void validate() const {
        if (!(resolution > 0.0)) throw_shape_error("GridSpec: resolution <= 0");
        if (bev_rows <= 0 || bev_cols <= 0)
            throw_shape_error("GridSpec: empty BEV");
        if (channels <= 0) throw_shape_error("GridSpec: channels <= 0");
        if (tile_edge <= 0) throw_shape_error("GridSpec: tile_edge <= 0");
    }

    double bev_length_m() const { return bev_rows * resolution; }
    double bev_width_m() const { return bev_cols * resolution; }
};

// Continuous global (x, y) of every BEV cell center.
struct GridCoords {
    int rows = 0;
    int cols = 0;
    std::vector<double> xs;
    std::vector<double> ys;

    GridCoords() = default;
    GridCoords(int r, int c)
        : rows(r), cols(c),
          xs(static_cast<size_t>(r) * c), ys(static_cast<size_t>(r) * c) {}

    size_t idx(int r, int c) const { return static_cast<size_t>(r) * cols + c; }
    double x(int r, int c) const { return xs[idx(r, c)]; }
    double y(int r, int c) const { return ys[idx(r, c)]; }
};

struct TileKey {
    int32_t ix = 0;
    int32_t iy = 0;

    friend bool operator==(const TileKey&, const TileKey&) = default;
    friend auto operator<=>(const TileKey&, const TileKey&) = default;
};

struct TileKeyHash {
    size_t operator()(const TileKey& k) const {
        return std::hash<uint64_t>{}(
            (static_cast<uint64_t>(static_cast<uint32_t>(k.ix)) << 32) |
            static_cast<uint32_t>(k.iy));
    }
};

inline int64_t floor_div(int64_t a, int64_t b) {
    int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

// Global integer cell containing coordinate v; cell g spans [g*res, (g+1)*res).
inline int64_t cell_index(double v, double resolution) {
    return static_cast<int64_t>(std::floor(v / resolution));
}

inline TileKey tile_of_cell(int64_t gx, int64_t gy, int tile_edge) {
    return TileKey{static_cast<int32_t>(floor_div(gx, tile_edge)),
                   static_cast<int32_t>(floor_div(gy, tile_edge))};
}

// Ego-frame center of BEV cell (i, j): +x forward, +y left, origin at the
// rectangle center.
inline void bev_cell_center(const GridSpec& spec, int i, int j, double& ex,
                            double& ey) {
    ex = (0.5 * (spec.bev_rows - 1) - i) * spec.resolution;
    ey = (0.5 * (spec.bev_cols - 1) - j) * spec.resolution;
}

// Rigid transform of every BEV cell center into the global frame.
inline GridCoords local_grid_coords(const GridSpec& spec, const EgoPose& pose) {
    spec.validate();
    GridCoords out(spec.bev_rows, spec.bev_cols);
    const double c = std::cos(pose.yaw);
    const double s = std::sin(pose.yaw);
    for (int i = 0; i < spec.bev_rows; ++i) {
        for (int j = 0; j < spec.bev_cols; ++j) {
            double ex, ey;
            bev_cell_center(spec, i, j, ex, ey);
            const size_t n = out.idx(i, j);
            out.xs[n] = c * ex - s * ey + pose.x;
            out.ys[n] = s * ex + c * ey + pose.y;
        }
    }
    return out;
}

// Tile keys whose cell range intersects the axis-aligned bounding box of the
// coordinates. Keys may be negative. Sorted lexicographically.
inline std::vector<TileKey> overlapping_tiles(const GridSpec& spec,
                                              const GridCoords& coords) {
    double min_x = coords.xs[0], max_x = coords.xs[0];
    double min_y = coords.ys[0], max_y = coords.ys[0];
    for (size_t i = 1; i < coords.xs.size(); ++i) {
        min_x = std::min(min_x, coords.xs[i]);
        max_x = std::max(max_x, coords.xs[i]);
        min_y = std::min(min_y, coords.ys[i]);
        max_y = std::max(max_y, coords.ys[i]);
    }
    const int64_t cx0 = cell_index(min_x, spec.resolution);
    const int64_t cx1 = cell_index(max_x, spec.resolution);
    const int64_t cy0 = cell_index(min_y, spec.resolution);
    const int64_t cy1 = cell_index(max_y, spec.resolution);
    const int64_t tx0 = floor_div(cx0, spec.tile_edge);
    const int64_t tx1 = floor_div(cx1, spec.tile_edge);
    const int64_t ty0 = floor_div(cy0, spec.tile_edge);
    const int64_t ty1 = floor_div(cy1, spec.tile_edge);

    std::vector<TileKey> keys;
    keys.reserve(static_cast<size_t>(tx1 - tx0 + 1) * (ty1 - ty0 + 1));
    for (int64_t ix = tx0; ix <= tx1; ++ix)
        for (int64_t iy = ty0; iy <= ty1; ++iy)
            keys.push_back(TileKey{static_cast<int32_t>(ix),
                                   static_cast<int32_t>(iy)});
    return keys;
}

// Bilinear sample of an axis-aligned source raster at each coordinate.
// Source rows run along global x cells starting at gx0, cols along global y
// cells starting at gy0; cell (r, c) is centered at ((gx0+r+0.5)*res,
// (gy0+c+0.5)*res). A sample is masked out (value 0, coverage false) when any
// corner that carries nonzero bilinear weight is uncovered or out of bounds,
// so sampling exactly at a covered cell center stays exact even on the raster
// edge.
inline FeatureMap bilinear_sample(const FeatureMap& src, int64_t gx0,
                                  int64_t gy0, double resolution,
                                  const GridCoords& coords) {
    FeatureMap out(coords.rows, coords.cols, src.channels, 0.0f, false);
    const int C = src.channels;
    for (int i = 0; i < coords.rows; ++i) {
        for (int j = 0; j < coords.cols; ++j) {
            const size_t n = coords.idx(i, j);
            const double u = coords.xs[n] / resolution - 0.5 - gx0;
            const double v = coords.ys[n] / resolution - 0.5 - gy0;
            const int a0 = static_cast<int>(std::floor(u));
            const int b0 = static_cast<int>(std::floor(v));
            const double du = u - a0;
            const double dv = v - b0;
            const double wgt[4] = {(1.0 - du) * (1.0 - dv), (1.0 - du) * dv,
                                   du * (1.0 - dv), du * dv};
            const int ra[4] = {a0, a0, a0 + 1, a0 + 1};
            const int cb[4] = {b0, b0 + 1, b0, b0 + 1};

            bool ok = true;
            for (int q = 0; q < 4 && ok; ++q) {
                if (wgt[q] <= 0.0) continue;
                if (ra[q] < 0 || ra[q] >= src.rows || cb[q] < 0 ||
                    cb[q] >= src.cols || !src.covered_at(ra[q], cb[q]))
                    ok = false;
            }
            if (!ok) continue;

            float* dst = out.cell(i, j);
            for (int q = 0; q < 4; ++q) {
                if (wgt[q] <= 0.0) continue;
                const float* sp = src.cell(ra[q], cb[q]);
                const float wq = static_cast<float>(wgt[q]);
                for (int ch = 0; ch < C; ++ch) dst[ch] += wq * sp[ch];
            }
            out.set_covered(i, j, true);
        }
    }
    return out;
}

}  // namespace nmp

#pragma once
// Raster views of the simulator's maps: class colors for semantic maps,
// grayscale for gate maps. Row r of a map becomes pixel row r, so the ego
// forward axis points up in the saved image only after the viewer flips it;
// we keep the raw row order to stay unsurprising in tests.

#include <nmp/png.hpp>
#include <nmp/simulator.hpp>

#include <array>
#include <cmath>

namespace nmp {

// One fixed color per class, dark asphalt background.
inline constexpr std::array<std::array<uint8_t, 3>, kNumClasses>
    kClassPalette = {{
        {30, 30, 34},     // background
        {240, 180, 40},   // divider
        {70, 130, 220},   // crossing
        {90, 200, 120},   // boundary
    }};

inline Image render_semantic(const SemanticMap& m) {
    Image img(m.cols, m.rows);
    for (int r = 0; r < m.rows; ++r)
        for (int c = 0; c < m.cols; ++c) {
            const auto& col = kClassPalette[m.at(r, c) % kNumClasses];
            img.set(c, r, col[0], col[1], col[2]);
        }
    return img;
}

// Per-cell channel mean of a gate map, clamped to [0, 1], as grayscale.
inline Image render_gate(const FeatureMap& z) {
    Image img(z.cols, z.rows);
    for (int r = 0; r < z.rows; ++r)
        for (int c = 0; c < z.cols; ++c) {
            const float* v = z.cell(r, c);
            double mean = 0.0;
            for (int ch = 0; ch < z.channels; ++ch) mean += v[ch];
            mean /= z.channels;
            const double clamped = std::min(1.0, std::max(0.0, mean));
            const uint8_t g =
                static_cast<uint8_t>(std::lround(clamped * 255.0));
            img.set(c, r, g, g, g);
        }
    return img;
}

// Features through the linear probe, then the class palette.
inline Image render_features(const FeatureMap& f,
                             const Matrix<float>& embedding) {
    return render_semantic(decode(f, embedding));
}

}  // namespace nmp

#include "jsmtk/field.hpp"

#include <algorithm>
#include <cmath>

namespace jsmtk {

DisplacementField::DisplacementField(Dims dims, Spacing spacing)
    : comp{Volume3D(dims, spacing), Volume3D(dims, spacing), Volume3D(dims, spacing)} {}

bool DisplacementField::all_finite() const {
    for (const auto &c : comp)
        for (double v : c.values())
            if (!std::isfinite(v)) return false;
    return true;
}

double DisplacementField::max_norm() const {
    double best = 0.0;
    for (std::size_t i = 0; i < size(); ++i) {
        const double x = comp[0].values()[i], y = comp[1].values()[i], z = comp[2].values()[i];
        best = std::max(best, std::sqrt(x * x + y * y + z * z));
    }
    return best;
}

DisplacementField upsample_field(const DisplacementField &coarse, const Dims &fine_dims) {
    const Spacing cs = coarse.spacing();
    DisplacementField fine(fine_dims, Spacing{cs.x / 2.0, cs.y / 2.0, cs.z / 2.0});
    for (std::int64_t z = 0; z < fine_dims.d; ++z)
        for (std::int64_t y = 0; y < fine_dims.h; ++y)
            for (std::int64_t x = 0; x < fine_dims.w; ++x) {
                // Coarse voxel j covers fine voxels 2j and 2j+1 (center 2j + 0.5).
                const double cx = (static_cast<double>(x) - 0.5) / 2.0;
                const double cy = (static_cast<double>(y) - 0.5) / 2.0;
                const double cz = (static_cast<double>(z) - 0.5) / 2.0;
                for (int c = 0; c < 3; ++c)
                    fine.comp[c](x, y, z) = 2.0 * trilinear_sample(coarse.comp[c], cx, cy, cz, BoundaryPolicy::clamp);
            }
    return fine;
}

} // namespace jsmtk

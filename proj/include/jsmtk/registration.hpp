#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "jsmtk/field.hpp"
#include "jsmtk/volume.hpp"

namespace jsmtk {

struct RegistrationConfig {
    double alpha = 0.1;       // bending-energy weight
    int bins = 32;            // MI histogram bins per axis
    int levels = 3;           // pyramid levels, coarsest first when optimizing
    double step = 0.5;        // initial max per-voxel update, voxels
    int max_iters = 100;      // per level
    double smooth_sigma = 1.0;
    double tol = 1e-5;        // relative cost decrease below which a level stops
    BoundaryPolicy policy = BoundaryPolicy::clamp;

    void validate() const;
};

// Intensity interval mapped onto bin space [0, bins-1].
struct IntensityRange {
    double lo = 0.0;
    double hi = 0.0;

    static IntensityRange of(const Volume3D &vol);
};

class JointHistogram {
public:
    JointHistogram(int bins);

    // Linear (tent) Parzen spreading over the two nearest bins on each axis; rows index
    // the moving image, columns the fixed image. Normalized to unit mass.
    static JointHistogram build(const Volume3D &moving, const Volume3D &fixed, int bins, IntensityRange moving_range,
                                IntensityRange fixed_range);

    int bins() const { return bins_; }
    double joint(int m, int f) const { return p_[static_cast<std::size_t>(m * bins_ + f)]; }
    double moving_marginal(int m) const { return q_moving_[static_cast<std::size_t>(m)]; }
    double fixed_marginal(int f) const { return q_fixed_[static_cast<std::size_t>(f)]; }

    double mutual_information() const;
    double moving_entropy() const;
    double fixed_entropy() const;

private:
    int bins_;
    std::vector<double> p_;
    std::vector<double> q_moving_;
    std::vector<double> q_fixed_;

    friend struct HistogramAccess;
};

// Maps an intensity to bin space: t in [0, bins-1]. Constant ranges map to 0.
double to_bin_space(double value, IntensityRange range, int bins);

// output(x) = moving(x + v(x)).
Volume3D warp(const Volume3D &moving, const DisplacementField &field, BoundaryPolicy policy = BoundaryPolicy::clamp);

// Mattes MI using each image's own min/max for binning.
double mattes_mi(const Volume3D &warped, const Volume3D &fixed, int bins);
double mattes_mi(const Volume3D &warped, const Volume3D &fixed, int bins, IntensityRange warped_range,
                 IntensityRange fixed_range);

double bending_energy(const DisplacementField &field);
// Adds d(bending_energy)/dv into grad.
void bending_energy_gradient(const DisplacementField &field, DisplacementField &grad);

// -MI(warp(moving, field), fixed) + alpha * bending_energy(field). The warped image is
// binned with the moving image's intensity range, which does not depend on the field.
double registration_cost(const DisplacementField &field, const Volume3D &moving, const Volume3D &fixed,
                         const RegistrationConfig &config);

// Cost and its exact gradient with respect to every field component.
double registration_cost_gradient(const DisplacementField &field, const Volume3D &moving, const Volume3D &fixed,
                                  const RegistrationConfig &config, DisplacementField &grad);

struct CostLogEntry {
    int level = 0;   // 0 = coarsest
    int iter = 0;
    double cost = 0.0;
    double step = 0.0;
};

struct RegistrationResult {
    DisplacementField field;
    std::vector<CostLogEntry> log;   // accepted iterations (iter 0 is the starting cost of a level)
    bool converged = false;          // every level stopped on tol/step exhaustion rather than max_iters
    double final_cost = 0.0;         // full-resolution cost of the returned field

    // Plain-text cost log: "level iter cost step" per line.
    std::string log_text() const;
};

// Dense deformable registration: finds v such that moving(x + v(x)) matches fixed(x).
RegistrationResult register_volumes(const Volume3D &moving, const Volume3D &fixed, const RegistrationConfig &config);

} // namespace jsmtk

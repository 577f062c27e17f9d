#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "jsmtk/field.hpp"
#include "jsmtk/jal.hpp"
#include "jsmtk/jsm.hpp"
#include "jsmtk/registration.hpp"
#include "jsmtk/volume.hpp"

namespace jsmtk {

inline constexpr int kNumClasses = 4;
const char *class_name(int label); // CN, MCI, MLD, SEV

enum class JsmSource { analytic, registered };

struct PhantomSpec {
    int dim = 16;
    int blobs = 6;
    double blob_sigma = 0.12;     // fraction of dim
    double noise_sigma = 0.03;
    std::array<double, kNumClasses> atrophy = {0.0, 0.12, 0.24, 0.36};
    std::array<double, 3> atrophy_center = {0.5, 0.5, 0.5}; // fraction of dim
    double atrophy_radius = 0.2;  // fraction of dim
    double ventricle_radius = 0.12; // fraction of dim
    int random_bumps = 3;
    double random_amplitude = 0.4; // voxels, per component std
    double random_sigma = 0.15;    // fraction of dim
    double mod2_gamma = 2.0;       // modality-2 remap exponent
    double mod2_noise_sigma = 0.03;
    int marker_size = 2;           // corner cube edge in voxels
    double marker_intensity = 0.3; // class k gets marker_intensity * k / 3
    JsmSource jsm_source = JsmSource::analytic;
    RegistrationConfig registration;
    std::uint64_t seed = 1;

    void validate() const;
};

struct Subject {
    std::string id;
    int label = 0;
    std::uint64_t seed = 0;
    Volume3D mod1;
    Volume3D mod2;
    DisplacementField true_field;   // subject -> template displacement used to render the subject
    JacobianSaliencyMap true_jsm;   // closed-form det(I + du/dy)
    DisplacementField field1, field2;
    JacobianSaliencyMap jsm1, jsm2;
    Volume3D mask;                  // 1 inside the atrophy region
    int marker_class = -1;          // -1: no confounder stamped
};

// Closed-form template intensity at a continuous voxel coordinate.
class Template {
public:
    explicit Template(const PhantomSpec &spec);
    double operator()(double x, double y, double z) const;
    Volume3D render() const;
    // CT-like rendition used as the modality-2 registration target.
    Volume3D render_mod2() const;
    double mod2_remap(double v) const;

private:
    struct Blob {
        double x, y, z, sigma, height;
    };
    PhantomSpec spec_;
    std::vector<Blob> blobs_;
};

Volume3D make_template(const PhantomSpec &spec);

// Subject with class-scaled contracting atrophy, a random smooth deformation and noise.
Subject make_subject(const Template &tmpl, int label, const PhantomSpec &spec, std::uint64_t subject_seed,
                     const std::string &id = "");

// Stamps the corner marker. correlated: the subject's class; otherwise a uniform random
// class drawn from `rng_seed`.
void inject_confounder(Subject &s, bool correlated, const PhantomSpec &spec, std::uint64_t rng_seed);

// Marker voxels (the corner cube) as a mask volume.
Volume3D marker_mask(const PhantomSpec &spec);

struct AdasynProvenance {
    std::size_t i = 0;  // base sample (index into the input set)
    std::size_t z = 0;  // neighbor
    double u = 0.0;     // s = x_i + u (x_z - x_i)
};

struct AdasynResult {
    std::vector<MultiSample> samples;          // originals first, then synthetics
    std::vector<AdasynProvenance> provenance;  // one per synthetic, in order
    std::vector<std::size_t> generated_per_class;
    std::vector<std::string> warnings;
};

// ADASYN in raw modality-1 voxel space; synthetics interpolate both modalities and
// both JSMs with the same u.
AdasynResult adasyn_oversample(const std::vector<MultiSample> &train, int k, double beta, std::uint64_t seed);

enum class Split { train, test };

// Stratified, subject-disjoint split. Returns one tag per subject.
std::vector<Split> split_by_subject(const std::vector<int> &labels, const std::vector<std::string> &ids,
                                    double test_fraction, std::uint64_t seed);

struct Dataset {
    PhantomSpec spec;
    std::vector<Subject> subjects;
    std::vector<Split> split;
};

// n_per_class subjects per class, split, confounder correlated in train and random in test.
Dataset make_benchmark(const PhantomSpec &spec, int n_per_class, double test_fraction, bool confounder = true);

MultiSample to_training_sample(const Subject &s);
std::vector<MultiSample> samples_of(const Dataset &d, Split which);

void write_dataset(const Dataset &d, const std::filesystem::path &dir);
Dataset read_dataset(const std::filesystem::path &dir);

PhantomSpec phantom_spec_from(const ConfigMap &cfg, PhantomSpec base = {});

} // namespace jsmtk

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sda/nets.hpp"
#include "sda/tensor.hpp"

namespace sda {

// Layered phantom: K horizontal bands with smooth random boundary curves,
// per-band intensities plus pixel texture noise. Stands in for layered
// anatomy at desk scale.
struct PhantomConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t classes = 5;
  double boundary_amplitude = 0.05;  // fraction of height
  std::vector<double> band_means;    // K entries; evenly spread when empty
  std::vector<double> band_stds;     // K entries; texture_std when empty
  double texture_std = 0.04;
  std::uint64_t seed = 1;

  std::vector<double> effective_means() const;
  std::vector<double> effective_stds() const;
};

// Intensity-space domain shift: y = clip(gain * x^gamma + offset + noise).
// With speckle the noise is scaled by the local intensity.
struct ShiftConfig {
  double gamma = 1.0;
  double gain = 1.0;
  double offset = 0.0;
  double noise_std = 0.0;
  bool speckle = false;

  bool is_identity() const {
    return gamma == 1.0 && gain == 1.0 && offset == 0.0 && noise_std == 0.0;
  }
};

enum class Domain { source, target };

// Ordered slice stack for one subject, with ground truth and provenance.
struct SubjectRecord {
  std::string id;
  Tensor slices;    // [S,1,H,W], intensities in [0,1]
  IntTensor labels;  // [S,H,W] band indices (segmentation)
  Tensor targets;   // [S,1,H,W] paired synthesis targets (synthesis)
  Domain domain = Domain::source;
  std::string provenance;

  std::size_t slice_count() const { return slices.dim(0); }
  Tensor slice(std::size_t s) const;
};

// Fixed monotone nonlinear intensity remap defining the synthesis target
// contrast (dark bands map bright and vice versa).
double synthesis_remap(double v);

std::vector<SubjectRecord> gen_phantom_dataset(const PhantomConfig& cfg, TaskKind kind,
                                               std::size_t n_subjects,
                                               std::size_t slices_per_subject,
                                               const std::string& id_prefix = "subj",
                                               std::size_t first_index = 0);

Tensor apply_shift(const Tensor& x, const ShiftConfig& shift, std::uint64_t seed);

// Shifted copy of a subject: slices transformed, labels/targets untouched.
SubjectRecord apply_shift_subject(const SubjectRecord& subject, const ShiftConfig& shift,
                                  std::uint64_t seed);

}  // namespace sda

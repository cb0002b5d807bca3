#include "sda/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace sda {

std::vector<double> PhantomConfig::effective_means() const {
  if (!band_means.empty()) {
    if (band_means.size() != classes)
      throw std::invalid_argument("phantom: need one band mean per class");
    return band_means;
  }
  std::vector<double> m(classes);
  for (std::size_t k = 0; k < classes; ++k)
    m[k] = 0.12 + 0.8 * static_cast<double>(k) / static_cast<double>(classes - 1);
  return m;
}

std::vector<double> PhantomConfig::effective_stds() const {
  if (!band_stds.empty()) {
    if (band_stds.size() != classes)
      throw std::invalid_argument("phantom: need one band std per class");
    return band_stds;
  }
  return std::vector<double>(classes, texture_std);
}

Tensor SubjectRecord::slice(std::size_t s) const {
  const std::size_t h = slices.dim(2), w = slices.dim(3);
  Tensor out({1, 1, h, w});
  std::copy_n(slices.values().begin() + s * h * w, h * w, out.values().begin());
  return out;
}

double synthesis_remap(double v) {
  return 0.9 - 0.75 * std::pow(std::max(0.0, v), 1.4);
}

namespace {

struct BoundaryWave {
  double amp[3];
  double freq[3];
  double phase[3];

  double eval(double t) const {  // t in [0,1)
    double v = 0.0;
    for (int j = 0; j < 3; ++j) v += amp[j] * std::sin(2.0 * M_PI * (freq[j] * t + phase[j]));
    return v;
  }
};

}  // namespace

std::vector<SubjectRecord> gen_phantom_dataset(const PhantomConfig& cfg, TaskKind kind,
                                               std::size_t n_subjects,
                                               std::size_t slices_per_subject,
                                               const std::string& id_prefix,
                                               std::size_t first_index) {
  if (cfg.classes < 2) throw std::invalid_argument("phantom: need at least 2 classes");
  if (cfg.height % 8 != 0 || cfg.width % 8 != 0)
    throw std::invalid_argument("phantom: H and W must be divisible by 8");
  if (cfg.height < 2 * cfg.classes)
    throw std::invalid_argument("phantom: too many bands for the image height");
  const std::size_t height = cfg.height, width = cfg.width, classes = cfg.classes;
  const std::vector<double> means = cfg.effective_means();
  const std::vector<double> stds = cfg.effective_stds();

  std::vector<SubjectRecord> out;
  out.reserve(n_subjects);
  for (std::size_t s = 0; s < n_subjects; ++s) {
    const std::size_t index = first_index + s;
    Rng rng = Rng(cfg.seed).derive(0x50b0ull + index);

    // subject anatomy: one wave set per boundary, drifted slightly per slice
    std::vector<BoundaryWave> waves(classes - 1);
    const double amp_total = cfg.boundary_amplitude * static_cast<double>(height);
    for (auto& wv : waves)
      for (int j = 0; j < 3; ++j) {
        wv.amp[j] = rng.uniform(0.0, amp_total / 3.0);
        wv.freq[j] = 1.0 + static_cast<double>(j);
        wv.phase[j] = rng.uniform(0.0, 1.0);
      }
    std::vector<double> sub_means(classes);
    for (std::size_t k = 0; k < classes; ++k) sub_means[k] = means[k] + rng.normal(0.0, 0.01);

    SubjectRecord rec;
    std::ostringstream id;
    id << id_prefix << '_' << index;
    rec.id = id.str();
    rec.slices = Tensor({slices_per_subject, 1, height, width});
    rec.labels = IntTensor({slices_per_subject, height, width});
    if (kind == TaskKind::synthesis) rec.targets = Tensor({slices_per_subject, 1, height, width});

    for (std::size_t sl = 0; sl < slices_per_subject; ++sl) {
      const double slice_shift = rng.normal(0.0, 0.01 * static_cast<double>(height));
      std::vector<std::size_t> bounds(classes - 1);
      for (std::size_t w = 0; w < width; ++w) {
        const double t = static_cast<double>(w) / static_cast<double>(width);
        double prev = 0.0;
        for (std::size_t k = 0; k + 1 < classes; ++k) {
          const double nominal =
              static_cast<double>((k + 1) * height) / static_cast<double>(classes);
          double b = nominal + waves[k].eval(t) + slice_shift;
          b = std::clamp(b, prev + 1.0,
                         static_cast<double>(height) - static_cast<double>(classes - 1 - k));
          bounds[k] = static_cast<std::size_t>(std::lround(b));
          bounds[k] = std::max<std::size_t>(bounds[k], static_cast<std::size_t>(prev) + 1);
          prev = static_cast<double>(bounds[k]);
        }
        for (std::size_t h = 0; h < height; ++h) {
          std::size_t band = 0;
          while (band + 1 < classes && h >= bounds[band]) ++band;
          rec.labels.values[(sl * height + h) * width + w] = static_cast<std::int32_t>(band);
          const double v = sub_means[band] + stds[band] * rng.normal();
          rec.slices.at4(sl, 0, h, w) = static_cast<float>(std::clamp(v, 0.0, 1.0));
          if (kind == TaskKind::synthesis) {
            const double tv = synthesis_remap(sub_means[band]) + cfg.texture_std * rng.normal();
            rec.targets.at4(sl, 0, h, w) = static_cast<float>(std::clamp(tv, 0.0, 1.0));
          }
        }
      }
    }
    std::ostringstream prov;
    prov << "subject=" << rec.id << "\nseed=" << cfg.seed << "\nsubject_index=" << index
         << "\nheight=" << height << "\nwidth=" << width << "\nclasses=" << classes
         << "\ntask=" << task_kind_name(kind) << "\ndomain=source\n";
    rec.provenance = prov.str();
    out.push_back(std::move(rec));
  }
  return out;
}

Tensor apply_shift(const Tensor& x, const ShiftConfig& shift, std::uint64_t seed) {
  if (shift.gamma <= 0.0) throw std::invalid_argument("apply_shift: gamma must be > 0");
  Tensor out(x.shape());
  Rng rng(splitmix64(seed ^ 0x5417ull));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = static_cast<double>(x.values()[i]);
    double y = shift.gain * std::pow(std::max(0.0, v), shift.gamma) + shift.offset;
    if (shift.noise_std > 0.0) {
      const double n = rng.normal(0.0, shift.noise_std);
      y += shift.speckle ? n * y : n;
    }
    out.values()[i] = static_cast<float>(std::clamp(y, 0.0, 1.0));
  }
  return out;
}

SubjectRecord apply_shift_subject(const SubjectRecord& subject, const ShiftConfig& shift,
                                  std::uint64_t seed) {
  SubjectRecord out = subject;
  out.slices = apply_shift(subject.slices, shift, splitmix64(seed) ^ splitmix64(std::hash<std::string>{}(subject.id)));
  out.domain = Domain::target;
  std::ostringstream prov;
  prov << subject.provenance << "shift_gamma=" << shift.gamma << "\nshift_gain=" << shift.gain
       << "\nshift_offset=" << shift.offset << "\nshift_noise=" << shift.noise_std
       << "\nshift_speckle=" << (shift.speckle ? 1 : 0) << "\ndomain=target\n";
  out.provenance = prov.str();
  return out;
}

}  // namespace sda

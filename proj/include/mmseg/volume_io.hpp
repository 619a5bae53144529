#ifndef MMSEG_VOLUME_IO_HPP
#define MMSEG_VOLUME_IO_HPP

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mmseg/volume.hpp"

namespace mmseg {

// Raw fixture format: "MMSV", u32 D, u32 H, u32 W (little-endian), then the
// D-major payload as little-endian f32 (intensities) or u8 (labels).
inline constexpr char kRawMagic[4] = {'M', 'M', 'S', 'V'};

void write_raw_volume(const std::filesystem::path& path, const ModalityVolume& v);
void write_raw_labels(const std::filesystem::path& path, const LabelVolume& l);
ModalityVolume read_raw_volume(const std::filesystem::path& path,
                               const std::string& tag = "");
/// Reads raw label values and maps them to class indices (BAD_LABEL on an
/// illegal value).
LabelVolume read_raw_labels(const std::filesystem::path& path);

// NIfTI-1 single-file volumes, optionally gzip-compressed (.nii / .nii.gz).
ModalityVolume read_nifti_volume(const std::filesystem::path& path,
                                 const std::string& tag = "");
LabelVolume read_nifti_labels(const std::filesystem::path& path);
void write_nifti_volume(const std::filesystem::path& path, const ModalityVolume& v);
void write_nifti_labels(const std::filesystem::path& path, const LabelVolume& l);

/// Dispatch on extension: .nii/.nii.gz are NIfTI, anything else raw.
ModalityVolume read_volume(const std::filesystem::path& path,
                           const std::string& tag = "");
LabelVolume read_labels(const std::filesystem::path& path);
void write_volume(const std::filesystem::path& path, const ModalityVolume& v);
void write_labels(const std::filesystem::path& path, const LabelVolume& l);

struct ManifestEntry {
  std::string case_id;
  std::vector<std::filesystem::path> modalities; // canonical order
  std::optional<std::filesystem::path> labels;
};

/// One line per case: case_id, modality paths..., [label path]. Relative
/// paths resolve against the manifest's directory; '#' starts a comment.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path,
                                         std::size_t modalities = 4);
void write_manifest(const std::filesystem::path& path,
                    const std::vector<ManifestEntry>& entries);

MultiModalCase load_case(const std::string& case_id,
                         const std::vector<std::filesystem::path>& modalities,
                         const std::optional<std::filesystem::path>& labels = {});
MultiModalCase load_case(const ManifestEntry& entry);

} // namespace mmseg

#endif

#ifndef VOLNET_DATA_HPP
#define VOLNET_DATA_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "volnet/tensor.hpp"

namespace volnet {

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct BadMagicError : IoError {
    explicit BadMagicError(const std::string& msg) : IoError(msg) {}
};

struct UnsupportedDatatypeError : IoError {
    explicit UnsupportedDatatypeError(const std::string& msg) : IoError(msg) {}
};

struct TruncatedFileError : IoError {
    explicit TruncatedFileError(const std::string& msg) : IoError(msg) {}
};

struct PairedFileError : IoError {
    explicit PairedFileError(const std::string& msg) : IoError(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct VolumeSample {
    Tensor volume;  // [D,H,W]
    int label = 0;
    std::string subject_id;
    std::string path;
    std::string modality = "synthetic";  // smri | pet | synthetic
};

// Minimal NIfTI-1: 348-byte header, embedded data ("n+1"), datatypes uint8 /
// int16 / float32 / float64, scl_slope/scl_inter applied, endianness detected
// via sizeof_hdr. Tensor axes are [D,H,W] = [dim3, dim2, dim1], matching the
// file's x-fastest voxel order.
Tensor read_nifti(const std::string& path);
void write_nifti(const Tensor& volume, const std::string& path);

// Native container: "VRAW", u32 version, u32 ndim, u32 dims[], float32
// payload, everything little-endian.
Tensor read_raw(const std::string& path);
void write_raw(const Tensor& volume, const std::string& path);

// dispatches on extension: .nii -> NIfTI, anything else -> raw container
Tensor load_volume(const std::string& path);

// per-volume z-score
Tensor normalize_volume(const Tensor& volume);

struct ManifestRow {
    std::string path;
    int label = 0;
    std::string subject_id;
    std::string split;  // train | val | test
};

struct Manifest {
    std::vector<ManifestRow> rows;
};

struct SplitFractions {
    double train = 0.70, val = 0.15, test = 0.15;
};

// Subject-level stratified split: every subject lands in exactly one split.
Manifest make_manifest(const std::vector<VolumeSample>& samples, SplitFractions fractions,
                       uint64_t seed);
Manifest swap_val_test(const Manifest& m);
void save_manifest(const Manifest& m, const std::string& path);
Manifest load_manifest(const std::string& path);

struct SynthBlob {
    std::array<double, 3> center_frac{0.5, 0.5, 0.5};  // fractional position in the volume
    double radius = 5.0;                               // voxels
};

struct SynthSpec {
    size_t size = 32;          // cubic volume edge
    size_t per_class = 100;
    std::vector<SynthBlob> blobs{
        {{0.35, 0.35, 0.35}, 5.0}, {{0.65, 0.60, 0.40}, 5.0}, {{0.50, 0.55, 0.68}, 5.0}};
    double amplitude = 1.0;    // blob peak intensity, class 0
    double delta = 0.6;        // class-1 attenuation of blob intensity
    double noise_sigma = 0.05;
    double base_amplitude = 0.2;  // smooth low-frequency background
    double jitter = 1.5;          // per-axis center jitter in voxels
    uint64_t seed = 1;
};

struct SynthDataset {
    std::vector<VolumeSample> samples;
    std::vector<Tensor> masks;  // union of blob interiors, 0/1, per sample
    Manifest manifest;
};

SynthDataset synth_generate(const SynthSpec& spec);

// materializes a generated dataset: vol_*.vraw, mask_*.vraw, manifest.csv
void write_synth_dataset(const SynthDataset& ds, const std::string& dir);

}  // namespace volnet

#endif

#include "volnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "volnet/rng.hpp"

namespace volnet {

namespace {

template <class T>
T read_le(const unsigned char* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

template <class T>
T byteswap_val(T v) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
    return v;
}

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    f.seekg(0, std::ios::end);
    const auto len = f.tellg();
    f.seekg(0, std::ios::beg);
    std::vector<unsigned char> buf(static_cast<size_t>(len));
    f.read(reinterpret_cast<char*>(buf.data()), len);
    if (!f) throw IoError("failed reading " + path);
    return buf;
}

void write_file(const std::string& path, const std::vector<unsigned char>& buf) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("failed writing " + path);
}

template <class T>
void append_le(std::vector<unsigned char>& buf, T v) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    buf.insert(buf.end(), b, b + sizeof(T));
}

// NIfTI-1 field offsets (total header size 348)
constexpr size_t kNiiSizeofHdr = 0;
constexpr size_t kNiiDim = 40;        // short dim[8]
constexpr size_t kNiiDatatype = 70;   // short
constexpr size_t kNiiBitpix = 72;     // short
constexpr size_t kNiiPixdim = 76;     // float pixdim[8]
constexpr size_t kNiiVoxOffset = 108; // float
constexpr size_t kNiiSclSlope = 112;  // float
constexpr size_t kNiiSclInter = 116;  // float
constexpr size_t kNiiMagic = 344;     // char[4]

constexpr int16_t kDtUint8 = 2;
constexpr int16_t kDtInt16 = 4;
constexpr int16_t kDtFloat32 = 16;
constexpr int16_t kDtFloat64 = 64;

}  // namespace

Tensor read_nifti(const std::string& path) {
    auto buf = read_file(path);
    if (buf.size() < 348) throw TruncatedFileError(path + ": file shorter than NIfTI-1 header");

    int32_t sizeof_hdr = read_le<int32_t>(&buf[kNiiSizeofHdr]);
    bool swapped = false;
    if (sizeof_hdr != 348) {
        sizeof_hdr = byteswap_val(sizeof_hdr);
        swapped = true;
        if (sizeof_hdr != 348) throw BadMagicError(path + ": sizeof_hdr is not 348 in either byte order");
    }
    const char* magic = reinterpret_cast<const char*>(&buf[kNiiMagic]);
    if (std::memcmp(magic, "ni1", 4) == 0) {
        throw PairedFileError(path + ": paired .hdr/.img NIfTI files are not supported");
    }
    if (std::memcmp(magic, "n+1", 4) != 0) {
        throw BadMagicError(path + ": bad NIfTI magic");
    }

    auto get_i16 = [&](size_t off) {
        int16_t v = read_le<int16_t>(&buf[off]);
        return swapped ? byteswap_val(v) : v;
    };
    auto get_f32 = [&](size_t off) {
        float v = read_le<float>(&buf[off]);
        return swapped ? byteswap_val(v) : v;
    };

    const int16_t ndim = get_i16(kNiiDim);
    if (ndim < 3) throw UnsupportedDatatypeError(path + ": fewer than 3 dimensions");
    const size_t nx = static_cast<size_t>(get_i16(kNiiDim + 2));
    const size_t ny = static_cast<size_t>(get_i16(kNiiDim + 4));
    const size_t nz = static_cast<size_t>(get_i16(kNiiDim + 6));
    for (int16_t d = 4; d <= ndim; ++d) {
        if (get_i16(kNiiDim + 2 * static_cast<size_t>(d)) > 1) {
            throw UnsupportedDatatypeError(path + ": volumes with more than 3 non-trivial dimensions");
        }
    }
    const int16_t datatype = get_i16(kNiiDatatype);
    const float vox_offset = get_f32(kNiiVoxOffset);
    const float scl_slope = get_f32(kNiiSclSlope);
    const float scl_inter = get_f32(kNiiSclInter);

    size_t elem_size;
    switch (datatype) {
        case kDtUint8: elem_size = 1; break;
        case kDtInt16: elem_size = 2; break;
        case kDtFloat32: elem_size = 4; break;
        case kDtFloat64: elem_size = 8; break;
        default:
            throw UnsupportedDatatypeError(path + ": NIfTI datatype " + std::to_string(datatype));
    }

    const size_t n = nx * ny * nz;
    const size_t off = static_cast<size_t>(vox_offset);
    if (buf.size() < off + n * elem_size) {
        throw TruncatedFileError(path + ": voxel data truncated");
    }

    std::vector<float> data(n);
    const unsigned char* p = buf.data() + off;
    for (size_t i = 0; i < n; ++i) {
        double v;
        switch (datatype) {
            case kDtUint8: v = static_cast<double>(p[i]); break;
            case kDtInt16: {
                int16_t x = read_le<int16_t>(p + 2 * i);
                if (swapped) x = byteswap_val(x);
                v = static_cast<double>(x);
                break;
            }
            case kDtFloat32: {
                float x = read_le<float>(p + 4 * i);
                if (swapped) x = byteswap_val(x);
                v = static_cast<double>(x);
                break;
            }
            default: {
                double x = read_le<double>(p + 8 * i);
                if (swapped) x = byteswap_val(x);
                v = x;
                break;
            }
        }
        if (scl_slope != 0.0f) v = v * static_cast<double>(scl_slope) + static_cast<double>(scl_inter);
        data[i] = static_cast<float>(v);
    }
    return Tensor::from_data({nz, ny, nx}, std::move(data));
}

void write_nifti(const Tensor& volume, const std::string& path) {
    if (volume.ndim() != 3) throw ShapeError("write_nifti expects a 3-D volume, got " + volume.shape_str());
    const size_t D = volume.dim(0), H = volume.dim(1), W = volume.dim(2);

    std::vector<unsigned char> buf(352, 0);  // header + 4-byte extension pad
    auto put_i32 = [&](size_t off, int32_t v) { std::memcpy(&buf[off], &v, 4); };
    auto put_i16 = [&](size_t off, int16_t v) { std::memcpy(&buf[off], &v, 2); };
    auto put_f32 = [&](size_t off, float v) { std::memcpy(&buf[off], &v, 4); };

    put_i32(kNiiSizeofHdr, 348);
    put_i16(kNiiDim, 3);
    put_i16(kNiiDim + 2, static_cast<int16_t>(W));
    put_i16(kNiiDim + 4, static_cast<int16_t>(H));
    put_i16(kNiiDim + 6, static_cast<int16_t>(D));
    for (size_t d = 4; d < 8; ++d) put_i16(kNiiDim + 2 * d, 1);
    put_i16(kNiiDatatype, kDtFloat32);
    put_i16(kNiiBitpix, 32);
    for (size_t d = 0; d < 8; ++d) put_f32(kNiiPixdim + 4 * d, 1.0f);
    put_f32(kNiiVoxOffset, 352.0f);
    put_f32(kNiiSclSlope, 1.0f);
    put_f32(kNiiSclInter, 0.0f);
    std::memcpy(&buf[kNiiMagic], "n+1", 4);

    buf.reserve(352 + volume.size() * 4);
    for (size_t i = 0; i < volume.size(); ++i) append_le(buf, volume[i]);
    write_file(path, buf);
}

Tensor read_raw(const std::string& path) {
    auto buf = read_file(path);
    if (buf.size() < 12) throw TruncatedFileError(path + ": raw container header truncated");
    if (std::memcmp(buf.data(), "VRAW", 4) != 0) {
        throw BadMagicError(path + ": bad raw container magic");
    }
    const uint32_t version = read_le<uint32_t>(&buf[4]);
    if (version != 1) {
        throw UnsupportedDatatypeError(path + ": raw container version " + std::to_string(version));
    }
    const uint32_t ndim = read_le<uint32_t>(&buf[8]);
    if (buf.size() < 12 + 4 * static_cast<size_t>(ndim)) {
        throw TruncatedFileError(path + ": raw container dims truncated");
    }
    std::vector<size_t> shape(ndim);
    size_t n = 1;
    for (uint32_t i = 0; i < ndim; ++i) {
        shape[i] = read_le<uint32_t>(&buf[12 + 4 * i]);
        n *= shape[i];
    }
    const size_t off = 12 + 4 * ndim;
    if (buf.size() < off + 4 * n) throw TruncatedFileError(path + ": raw container payload truncated");
    std::vector<float> data(n);
    std::memcpy(data.data(), buf.data() + off, 4 * n);
    return Tensor::from_data(std::move(shape), std::move(data));
}

void write_raw(const Tensor& volume, const std::string& path) {
    std::vector<unsigned char> buf;
    buf.reserve(12 + 4 * volume.ndim() + 4 * volume.size());
    buf.insert(buf.end(), {'V', 'R', 'A', 'W'});
    append_le<uint32_t>(buf, 1);
    append_le<uint32_t>(buf, static_cast<uint32_t>(volume.ndim()));
    for (size_t i = 0; i < volume.ndim(); ++i) {
        append_le<uint32_t>(buf, static_cast<uint32_t>(volume.dim(i)));
    }
    for (size_t i = 0; i < volume.size(); ++i) append_le(buf, volume[i]);
    write_file(path, buf);
}

Tensor load_volume(const std::string& path) {
    if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".nii") == 0) {
        return read_nifti(path);
    }
    return read_raw(path);
}

Tensor normalize_volume(const Tensor& volume) {
    const size_t n = volume.size();
    double mean = 0;
    for (size_t i = 0; i < n; ++i) mean += volume[i];
    mean /= static_cast<double>(n);
    double var = 0;
    for (size_t i = 0; i < n; ++i) {
        const double d = volume[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    if (var == 0.0) throw DataError("cannot normalize a constant volume");
    const double inv = 1.0 / std::sqrt(var);
    Tensor out(volume.shape());
    for (size_t i = 0; i < n; ++i) {
        out[i] = static_cast<float>((volume[i] - mean) * inv);
    }
    return out;
}

Manifest make_manifest(const std::vector<VolumeSample>& samples, SplitFractions fractions,
                       uint64_t seed) {
    // group samples by subject; a subject's label comes from its samples
    std::map<std::string, std::vector<size_t>> by_subject;
    for (size_t i = 0; i < samples.size(); ++i) {
        by_subject[samples[i].subject_id].push_back(i);
    }
    std::vector<std::vector<std::string>> subjects_by_label(2);
    for (const auto& [sid, idxs] : by_subject) {
        subjects_by_label[samples[idxs[0]].label != 0].push_back(sid);
    }

    std::map<std::string, std::string> split_of;
    const char* split_names[3] = {"train", "val", "test"};
    const double fracs[3] = {fractions.train, fractions.val, fractions.test};

    for (size_t label = 0; label < 2; ++label) {
        auto& subs = subjects_by_label[label];
        if (subs.empty()) continue;
        CounterRng rng(CounterRng::mix(seed, label));
        for (size_t i = subs.size(); i > 1; --i) {  // Fisher-Yates
            const size_t j = rng.next_u64() % i;
            std::swap(subs[i - 1], subs[j]);
        }
        const size_t g = subs.size();
        size_t counts[3];
        double rema[3];
        size_t assigned = 0;
        for (int s = 0; s < 3; ++s) {
            const double exact = fracs[s] * static_cast<double>(g);
            counts[s] = static_cast<size_t>(exact);
            rema[s] = exact - static_cast<double>(counts[s]);
            assigned += counts[s];
        }
        // leftovers go to the largest remainders; ties alternate by label so
        // a 50/50 cohort comes out balanced across both splits
        size_t order[3] = {0, 1, 2};
        std::sort(order, order + 3, [&](size_t a, size_t b) {
            if (rema[a] != rema[b]) return rema[a] > rema[b];
            return label % 2 == 0 ? a < b : a > b;
        });
        for (size_t left = g - assigned, k = 0; k < left; ++k) ++counts[order[k % 3]];

        size_t pos = 0;
        for (int s = 0; s < 3; ++s) {
            for (size_t k = 0; k < counts[s]; ++k) split_of[subs[pos++]] = split_names[s];
        }
    }

    // every class must be represented in every split
    for (size_t label = 0; label < 2; ++label) {
        if (subjects_by_label[label].empty()) continue;
        for (const char* s : split_names) {
            size_t cnt = 0;
            for (const auto& sid : subjects_by_label[label]) {
                if (split_of[sid] == s) ++cnt;
            }
            if (cnt == 0) {
                throw DataError("too few subjects: class " + std::to_string(label) +
                                " has no subject in split " + s);
            }
        }
    }

    Manifest m;
    for (const auto& s : samples) {
        m.rows.push_back({s.path, s.label, s.subject_id, split_of.at(s.subject_id)});
    }
    return m;
}

Manifest swap_val_test(const Manifest& m) {
    Manifest out = m;
    for (auto& r : out.rows) {
        if (r.split == "val") {
            r.split = "test";
        } else if (r.split == "test") {
            r.split = "val";
        }
    }
    return out;
}

void save_manifest(const Manifest& m, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "path,label,subject_id,split\n";
    for (const auto& r : m.rows) {
        f << r.path << "," << r.label << "," << r.subject_id << "," << r.split << "\n";
    }
    if (!f) throw IoError("failed writing " + path);
}

Manifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    Manifest m;
    std::string line;
    if (!std::getline(f, line)) throw DataError(path + ": empty manifest");
    if (line != "path,label,subject_id,split") {
        throw DataError(path + ": unexpected manifest header: " + line);
    }
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        ManifestRow r;
        std::string label;
        if (!std::getline(is, r.path, ',') || !std::getline(is, label, ',') ||
            !std::getline(is, r.subject_id, ',') || !std::getline(is, r.split)) {
            throw DataError(path + ": malformed manifest row: " + line);
        }
        r.label = std::stoi(label);
        m.rows.push_back(std::move(r));
    }
    return m;
}

namespace {

// trilinear interpolation of a coarse seeded grid, used as the smooth
// background field for synthetic volumes
float sample_coarse(const std::vector<float>& grid, size_t g, double z, double y, double x) {
    const auto clamp = [g](double v) { return std::min(std::max(v, 0.0), static_cast<double>(g - 1)); };
    z = clamp(z); y = clamp(y); x = clamp(x);
    const size_t z0 = static_cast<size_t>(z), y0 = static_cast<size_t>(y), x0 = static_cast<size_t>(x);
    const size_t z1 = std::min(z0 + 1, g - 1), y1 = std::min(y0 + 1, g - 1), x1 = std::min(x0 + 1, g - 1);
    const double fz = z - static_cast<double>(z0), fy = y - static_cast<double>(y0),
                 fx = x - static_cast<double>(x0);
    auto at = [&](size_t a, size_t b, size_t c) {
        return static_cast<double>(grid[(a * g + b) * g + c]);
    };
    const double c00 = at(z0, y0, x0) * (1 - fx) + at(z0, y0, x1) * fx;
    const double c01 = at(z0, y1, x0) * (1 - fx) + at(z0, y1, x1) * fx;
    const double c10 = at(z1, y0, x0) * (1 - fx) + at(z1, y0, x1) * fx;
    const double c11 = at(z1, y1, x0) * (1 - fx) + at(z1, y1, x1) * fx;
    const double c0 = c00 * (1 - fy) + c01 * fy;
    const double c1 = c10 * (1 - fy) + c11 * fy;
    return static_cast<float>(c0 * (1 - fz) + c1 * fz);
}

}  // namespace

SynthDataset synth_generate(const SynthSpec& spec) {
    if (spec.delta < 0) throw DataError("synth delta must be >= 0");
    if (spec.noise_sigma < 0) throw DataError("synth noise sigma must be >= 0");
    const size_t sz = spec.size;
    for (const auto& b : spec.blobs) {
        for (int a = 0; a < 3; ++a) {
            const double c = b.center_frac[a] * static_cast<double>(sz);
            if (c - b.radius - spec.jitter < 0 || c + b.radius + spec.jitter > static_cast<double>(sz)) {
                throw DataError("synthetic blob does not fit inside the volume");
            }
        }
    }

    SynthDataset ds;
    const size_t total = 2 * spec.per_class;
    constexpr size_t kCoarse = 5;

    for (size_t i = 0; i < total; ++i) {
        const int label = i < spec.per_class ? 0 : 1;
        CounterRng rng(CounterRng::mix(spec.seed, i));

        std::vector<float> coarse(kCoarse * kCoarse * kCoarse);
        for (auto& v : coarse) {
            v = static_cast<float>(rng.next_normal() * spec.base_amplitude);
        }

        std::vector<std::array<double, 3>> centers;
        for (const auto& b : spec.blobs) {
            std::array<double, 3> c;
            for (int a = 0; a < 3; ++a) {
                c[a] = b.center_frac[a] * static_cast<double>(sz) +
                       spec.jitter * (2.0 * rng.next_unit() - 1.0);
            }
            centers.push_back(c);
        }

        Tensor vol({sz, sz, sz});
        Tensor mask({sz, sz, sz});
        const double blob_amp = spec.amplitude - (label == 1 ? spec.delta : 0.0);
        const double scale = static_cast<double>(kCoarse - 1) / static_cast<double>(sz - 1);
        size_t vi = 0;
        for (size_t z = 0; z < sz; ++z) {
            for (size_t y = 0; y < sz; ++y) {
                for (size_t x = 0; x < sz; ++x, ++vi) {
                    double v = sample_coarse(coarse, kCoarse, z * scale, y * scale, x * scale);
                    for (size_t bi = 0; bi < centers.size(); ++bi) {
                        const double dz = static_cast<double>(z) - centers[bi][0];
                        const double dy = static_cast<double>(y) - centers[bi][1];
                        const double dx = static_cast<double>(x) - centers[bi][2];
                        const double d2 = dz * dz + dy * dy + dx * dx;
                        const double r = spec.blobs[bi].radius;
                        v += blob_amp * std::exp(-d2 / (2.0 * r * r));
                        if (d2 <= r * r) mask[vi] = 1.0f;
                    }
                    vol[vi] = static_cast<float>(v);
                }
            }
        }
        if (spec.noise_sigma > 0) {
            for (size_t k = 0; k < vol.size(); ++k) {
                vol[k] += static_cast<float>(rng.next_normal() * spec.noise_sigma);
            }
        }

        char sid[32];
        std::snprintf(sid, sizeof(sid), "synth%04zu", i);
        VolumeSample s;
        s.volume = std::move(vol);
        s.label = label;
        s.subject_id = sid;
        s.modality = "synthetic";
        ds.samples.push_back(std::move(s));
        ds.masks.push_back(std::move(mask));
    }

    ds.manifest = make_manifest(ds.samples, SplitFractions{}, spec.seed);
    return ds;
}

void write_synth_dataset(const SynthDataset& ds, const std::string& dir) {
    std::filesystem::create_directories(dir);
    Manifest m = ds.manifest;
    for (size_t i = 0; i < ds.samples.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "vol_%04zu.vraw", i);
        const std::string vol_path = dir + "/" + name;
        write_raw(ds.samples[i].volume, vol_path);
        std::snprintf(name, sizeof(name), "mask_%04zu.vraw", i);
        write_raw(ds.masks[i], dir + "/" + name);
        m.rows[i].path = vol_path;
    }
    save_manifest(m, dir + "/manifest.csv");
}

}  // namespace volnet

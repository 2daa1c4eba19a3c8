/******************************************************************************
 * Copyright 2026 The incepreg Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * 	http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 *****************************************************************************/

// NIfTI-1 single-file volumes (.nii / .nii.gz) and landmark CSV files.

#pragma once

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "incepreg/volume.hpp"

namespace incepreg {

namespace nifti {

#pragma pack(push, 1)
struct Header {
  std::int32_t sizeof_hdr;   // 0
  char data_type[10];        // 4
  char db_name[18];          // 14
  std::int32_t extents;      // 32
  std::int16_t session_error;// 36
  char regular;              // 38
  char dim_info;             // 39
  std::int16_t dim[8];       // 40
  float intent_p1;           // 56
  float intent_p2;           // 60
  float intent_p3;           // 64
  std::int16_t intent_code;  // 68
  std::int16_t datatype;     // 70
  std::int16_t bitpix;       // 72
  std::int16_t slice_start;  // 74
  float pixdim[8];           // 76
  float vox_offset;          // 108
  float scl_slope;           // 112
  float scl_inter;           // 116
  std::int16_t slice_end;    // 120
  char slice_code;           // 122
  char xyzt_units;           // 123
  float cal_max;             // 124
  float cal_min;             // 128
  float slice_duration;      // 132
  float toffset;             // 136
  std::int32_t glmax;        // 140
  std::int32_t glmin;        // 144
  char descrip[80];          // 148
  char aux_file[24];         // 228
  std::int16_t qform_code;   // 252
  std::int16_t sform_code;   // 254
  float quatern_b;           // 256
  float quatern_c;
  float quatern_d;
  float qoffset_x;           // 268
  float qoffset_y;
  float qoffset_z;
  float srow_x[4];           // 280
  float srow_y[4];           // 296
  float srow_z[4];           // 312
  char intent_name[16];      // 328
  char magic[4];             // 344
};
#pragma pack(pop)
static_assert(sizeof(Header) == 348, "NIfTI-1 header must be 348 bytes");

enum DataType : std::int16_t {
  kUInt8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
};

inline constexpr std::int16_t kIntentVector = 1007;

template <class V>
V byteswap_value(V v) {
  unsigned char b[sizeof(V)];
  std::memcpy(b, &v, sizeof(V));
  std::reverse(b, b + sizeof(V));
  std::memcpy(&v, b, sizeof(V));
  return v;
}

inline void swap_header(Header& h) {
  auto sw = [](auto& f) { f = byteswap_value(f); };
  sw(h.sizeof_hdr);
  sw(h.extents);
  sw(h.session_error);
  for (auto& d : h.dim) sw(d);
  sw(h.intent_p1); sw(h.intent_p2); sw(h.intent_p3);
  sw(h.intent_code); sw(h.datatype); sw(h.bitpix); sw(h.slice_start);
  for (auto& p : h.pixdim) sw(p);
  sw(h.vox_offset); sw(h.scl_slope); sw(h.scl_inter); sw(h.slice_end);
  sw(h.cal_max); sw(h.cal_min); sw(h.slice_duration); sw(h.toffset);
  sw(h.glmax); sw(h.glmin); sw(h.qform_code); sw(h.sform_code);
  sw(h.quatern_b); sw(h.quatern_c); sw(h.quatern_d);
  sw(h.qoffset_x); sw(h.qoffset_y); sw(h.qoffset_z);
  for (auto& v : h.srow_x) sw(v);
  for (auto& v : h.srow_y) sw(v);
  for (auto& v : h.srow_z) sw(v);
}

struct Image {
  Header header{};
  std::size_t dims[4] = {1, 1, 1, 1};  // nx, ny, nz, nt
  std::vector<double> values;          // scaled, x fastest
};

// gzopen reads uncompressed files transparently.
inline Image read(const std::filesystem::path& path) {
  const std::string p = path.string();
  gzFile f = gzopen(p.c_str(), "rb");
  if (!f) throw Error("unreadable volume: cannot open " + p);
  struct Closer {
    gzFile f;
    ~Closer() { gzclose(f); }
  } closer{f};
  Image img;
  Header& h = img.header;
  if (gzread(f, &h, sizeof(Header)) != static_cast<int>(sizeof(Header))) throw Error("unreadable volume: short header in " + p);
  bool swapped = false;
  if (h.sizeof_hdr != 348) {
    swap_header(h);
    swapped = true;
    if (h.sizeof_hdr != 348) throw Error("unreadable volume: bad header size in " + p);
  }
  if (std::memcmp(h.magic, "n+1", 4) != 0) throw Error("unreadable volume: not a single-file NIfTI-1 image: " + p);
  const int ndim = h.dim[0];
  if (ndim < 1 || ndim > 7) throw Error("unreadable volume: bad dim[0] in " + p);
  std::size_t total = 1;
  for (int i = 1; i <= ndim; ++i) {
    if (h.dim[i] < 1) throw Error("unreadable volume: bad dim in " + p);
    if (i <= 3) img.dims[i - 1] = static_cast<std::size_t>(h.dim[i]);
    else img.dims[3] *= static_cast<std::size_t>(h.dim[i]);
    total *= static_cast<std::size_t>(h.dim[i]);
  }
  std::size_t bytes_per = 0;
  switch (h.datatype) {
    case kUInt8: bytes_per = 1; break;
    case kInt16: bytes_per = 2; break;
    case kInt32: case kFloat32: bytes_per = 4; break;
    case kFloat64: bytes_per = 8; break;
    default: throw Error("unreadable volume: unsupported datatype " + std::to_string(h.datatype) + " in " + p);
  }
  const long offset = static_cast<long>(h.vox_offset);
  if (offset < 348) throw Error("unreadable volume: bad vox_offset in " + p);
  if (gzseek(f, offset, SEEK_SET) != offset) throw Error("unreadable volume: truncated " + p);
  std::vector<unsigned char> raw(total * bytes_per);
  std::size_t got = 0;
  while (got < raw.size()) {
    const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(raw.size() - got, 1u << 30));
    const int r = gzread(f, raw.data() + got, chunk);
    if (r <= 0) throw Error("unreadable volume: truncated data in " + p);
    got += static_cast<std::size_t>(r);
  }
  img.values.resize(total);
  auto decode = [&](auto tag) {
    using V = decltype(tag);
    for (std::size_t i = 0; i < total; ++i) {
      V v;
      std::memcpy(&v, raw.data() + i * sizeof(V), sizeof(V));
      if (swapped) v = byteswap_value(v);
      img.values[i] = static_cast<double>(v);
    }
  };
  switch (h.datatype) {
    case kUInt8: decode(std::uint8_t{}); break;
    case kInt16: decode(std::int16_t{}); break;
    case kInt32: decode(std::int32_t{}); break;
    case kFloat32: decode(float{}); break;
    case kFloat64: decode(double{}); break;
    default: break;
  }
  if (h.scl_slope != 0.0f && !(h.scl_slope == 1.0f && h.scl_inter == 0.0f))
    for (auto& v : img.values) v = v * h.scl_slope + h.scl_inter;
  return img;
}

inline Vec3 spacing_of(const Header& h) {
  Vec3 s{std::fabs(h.pixdim[1]), std::fabs(h.pixdim[2]), std::fabs(h.pixdim[3])};
  for (auto& v : s)
    if (!(v > 0)) v = 1.0;
  return s;
}

inline Vec3 origin_of(const Header& h) {
  if (h.sform_code > 0) return {h.srow_x[3], h.srow_y[3], h.srow_z[3]};
  if (h.qform_code > 0) return {h.qoffset_x, h.qoffset_y, h.qoffset_z};
  return {0, 0, 0};
}

inline Header make_header(std::size_t nx, std::size_t ny, std::size_t nz, std::size_t nvec, const Vec3& spacing,
                          const Vec3& origin) {
  Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = nvec > 1 ? 4 : 3;
  h.dim[1] = static_cast<std::int16_t>(nx);
  h.dim[2] = static_cast<std::int16_t>(ny);
  h.dim[3] = static_cast<std::int16_t>(nz);
  h.dim[4] = static_cast<std::int16_t>(nvec);
  for (int i = 5; i < 8; ++i) h.dim[i] = 1;
  if (nvec > 1) h.intent_code = kIntentVector;
  h.datatype = kFloat32;
  h.bitpix = 32;
  h.pixdim[0] = 1.0f;
  for (int i = 0; i < 3; ++i) h.pixdim[i + 1] = static_cast<float>(spacing[i]);
  for (int i = 4; i < 8; ++i) h.pixdim[i] = 1.0f;
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2;  // mm
  h.qform_code = 1;
  h.sform_code = 1;
  h.qoffset_x = static_cast<float>(origin[0]);
  h.qoffset_y = static_cast<float>(origin[1]);
  h.qoffset_z = static_cast<float>(origin[2]);
  h.srow_x[0] = static_cast<float>(spacing[0]);
  h.srow_y[1] = static_cast<float>(spacing[1]);
  h.srow_z[2] = static_cast<float>(spacing[2]);
  h.srow_x[3] = static_cast<float>(origin[0]);
  h.srow_y[3] = static_cast<float>(origin[1]);
  h.srow_z[3] = static_cast<float>(origin[2]);
  std::memcpy(h.magic, "n+1", 4);
  return h;
}

inline bool is_gz(const std::filesystem::path& p) { return p.extension() == ".gz"; }

inline void write(const std::filesystem::path& path, const Header& h, const std::vector<float>& data) {
  if (std::endian::native != std::endian::little) throw Error("write: big-endian hosts are not supported");
  std::string bytes(352, '\0');
  std::memcpy(bytes.data(), &h, sizeof(Header));
  bytes.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
  const std::string p = path.string();
  if (is_gz(path)) {
    gzFile f = gzopen(p.c_str(), "wb6");
    if (!f) throw Error("cannot write " + p);
    const int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    const int rc = gzclose(f);
    if (n != static_cast<int>(bytes.size()) || rc != Z_OK) throw Error("cannot write " + p);
  } else {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("cannot write " + p);
  }
}

}  // namespace nifti

inline Volume3D load_volume(const std::filesystem::path& path) {
  auto img = nifti::read(path);
  if (img.dims[3] != 1) throw Error("unreadable volume: expected a scalar volume in " + path.string());
  std::vector<float> data(img.values.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = static_cast<float>(img.values[i]);
    if (!std::isfinite(data[i])) throw Error("unreadable volume: non-finite voxel in " + path.string());
  }
  return Volume3D({img.dims[0], img.dims[1], img.dims[2]}, std::move(data), nifti::spacing_of(img.header),
                  nifti::origin_of(img.header));
}

inline void save_volume(const Volume3D& vol, const std::filesystem::path& path) {
  const auto& s = vol.shape();
  nifti::write(path, nifti::make_header(s.nx, s.ny, s.nz, 1, vol.spacing(), vol.origin()), vol.data());
}

// Fields are 4D NIfTI with the vector component as the slowest axis, in
// voxel units. A JSON sidecar (<stem>.json) records the convention.
inline void save_field(const DisplacementField& field, const Vec3& spacing, const Vec3& origin,
                       const std::filesystem::path& path) {
  const auto& s = field.shape();
  std::vector<float> data(field.data().begin(), field.data().end());
  nifti::write(path, nifti::make_header(s.nx, s.ny, s.nz, 3, spacing, origin), data);
  auto sidecar = path;
  std::string stem = sidecar.filename().string();
  for (const char* ext : {".gz", ".nii"})
    if (stem.size() > std::strlen(ext) && stem.ends_with(ext)) stem.resize(stem.size() - std::strlen(ext));
  sidecar.replace_filename(stem + ".json");
  std::ofstream js(sidecar);
  js << "{\n  \"kind\": \"displacement_field\",\n  \"units\": \"voxel\",\n"
     << "  \"mapping\": \"backward\",\n  \"convention\": \"warped(p) = moving(p + u(p)), u defined on the fixed grid\",\n"
     << "  \"vector_axis\": 4,\n  \"component_order\": [\"x\", \"y\", \"z\"]\n}\n";
}

inline DisplacementField load_field(const std::filesystem::path& path) {
  auto img = nifti::read(path);
  if (img.dims[3] != 3) throw Error("unreadable volume: expected a 3-vector field in " + path.string());
  return DisplacementField({img.dims[0], img.dims[1], img.dims[2]}, std::move(img.values));
}

// ---------------------------------------------------------------------------
// Landmarks: CSV "Landmark,X,Y,Z", world millimetres.

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

template <class V>
V parse_number(const std::string& tok, const std::string& where) {
  V v{};
  const auto* end = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(tok.data(), end, v);
  if (ec != std::errc() || ptr != end) throw Error("malformed landmark file: bad number '" + tok + "' at " + where);
  return v;
}

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace detail

inline LandmarkSet parse_landmarks(std::istream& in, const std::string& source = "<stream>") {
  LandmarkSet set;
  std::set<int> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(t);
    for (std::string c; std::getline(ss, c, ',');) cols.push_back(detail::trim(c));
    if (lineno == 1 && !cols.empty() && !cols[0].empty() && !(std::isdigit(static_cast<unsigned char>(cols[0][0])) || cols[0][0] == '-'))
      continue;  // header row
    const std::string where = source + ":" + std::to_string(lineno);
    if (cols.size() != 4) throw Error("malformed landmark file: expected 4 columns at " + where);
    Landmark lm;
    lm.id = detail::parse_number<int>(cols[0], where);
    for (int k = 0; k < 3; ++k) {
      lm.position[k] = detail::parse_number<double>(cols[k + 1], where);
      if (!std::isfinite(lm.position[k])) throw Error("malformed landmark file: non-finite coordinate at " + where);
    }
    if (!ids.insert(lm.id).second) throw Error("duplicate landmark " + std::to_string(lm.id) + " at " + where);
    set.entries.push_back(lm);
  }
  return set;
}

inline LandmarkSet load_landmarks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read landmark file " + path.string());
  return parse_landmarks(in, path.string());
}

inline void write_landmarks(const LandmarkSet& set, std::ostream& out) {
  std::set<int> ids;
  out << "Landmark,X,Y,Z\n";
  for (const auto& lm : set.entries) {
    if (!ids.insert(lm.id).second) throw Error("duplicate landmark " + std::to_string(lm.id));
    out << lm.id << ',' << detail::format_double(lm.position[0]) << ',' << detail::format_double(lm.position[1])
        << ',' << detail::format_double(lm.position[2]) << '\n';
  }
}

inline void save_landmarks(const LandmarkSet& set, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write landmark file " + path.string());
  write_landmarks(set, out);
}

}  // namespace incepreg

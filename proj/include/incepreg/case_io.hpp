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

// On-disk case layout:
//
//   DIR/pre_{t1,t1ce,t2,flair}.nii.gz    moving study
//   DIR/post_{t1,t1ce,t2,flair}.nii.gz   fixed study
//   DIR/pre_landmarks.csv, DIR/post_landmarks.csv
//   DIR/gt_field.nii.gz (+ gt_field.json)  synthetic cases only
//   DIR/*_pp.nii.gz                        written by `preprocess`

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "incepreg/io.hpp"
#include "incepreg/synthetic.hpp"
#include "incepreg/train.hpp"

namespace incepreg {

namespace fs = std::filesystem;

inline fs::path study_file(const fs::path& dir, const std::string& prefix, Contrast c, bool pp) {
  return dir / (prefix + "_" + contrast_name(c) + (pp ? "_pp" : "") + ".nii.gz");
}

inline void save_study(const MultiContrastStudy& s, const fs::path& dir, const std::string& prefix, bool pp = false) {
  fs::create_directories(dir);
  for (Contrast c : kFusionOrder) save_volume(s.get(c), study_file(dir, prefix, c, pp));
}

inline MultiContrastStudy load_study(const fs::path& dir, const std::string& prefix, bool pp = false) {
  MultiContrastStudy s;
  for (Contrast c : kFusionOrder) s.get(c) = load_volume(study_file(dir, prefix, c, pp));
  s.landmarks = load_landmarks(dir / (prefix + "_landmarks.csv"));
  s.study_id = dir.filename().string() + "_" + prefix;
  s.validate();
  return s;
}

inline void save_synthetic_case(const SyntheticCase& sc, const fs::path& dir) {
  save_study(sc.pre, dir, "pre");
  save_study(sc.post, dir, "post");
  save_landmarks(sc.pre.landmarks, dir / "pre_landmarks.csv");
  save_landmarks(sc.post.landmarks, dir / "post_landmarks.csv");
  save_field(sc.gt_field, sc.post.t1.spacing(), sc.post.t1.origin(), dir / "gt_field.nii.gz");
}

inline bool is_case_dir(const fs::path& dir) {
  return fs::exists(study_file(dir, "pre", Contrast::T1, false)) && fs::exists(dir / "pre_landmarks.csv");
}

inline bool has_preprocessed(const fs::path& dir) {
  for (Contrast c : kFusionOrder)
    if (!fs::exists(study_file(dir, "pre", c, true)) || !fs::exists(study_file(dir, "post", c, true))) return false;
  return true;
}

// Writes the *_pp volumes for a raw case directory and returns the pair.
inline CasePair preprocess_case_dir(const fs::path& dir) {
  const auto pre = load_study(dir, "pre"), post = load_study(dir, "post");
  CasePair c = preprocess_pair(dir.filename().string(), pre, post);
  save_study(c.moving, dir, "pre", true);
  save_study(c.fixed, dir, "post", true);
  return c;
}

// Loads the preprocessed pair, preprocessing in memory when *_pp is absent.
inline CasePair load_case(const fs::path& dir) {
  if (!is_case_dir(dir)) throw Error("not a case directory: " + dir.string());
  const std::string id = fs::absolute(dir).lexically_normal().filename().string();
  if (has_preprocessed(dir)) return {id, load_study(dir, "pre", true), load_study(dir, "post", true)};
  return preprocess_pair(id, load_study(dir, "pre"), load_study(dir, "post"));
}

// DIR itself when it is a case, otherwise its case subdirectories sorted by
// name.
inline std::vector<fs::path> case_dirs(const fs::path& data) {
  if (is_case_dir(data)) return {data};
  std::vector<fs::path> out;
  if (fs::is_directory(data))
    for (const auto& e : fs::directory_iterator(data))
      if (e.is_directory() && is_case_dir(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw Error("no case directories under " + data.string());
  return out;
}

inline Json affine_to_json(const AffineTransform& a) {
  const auto m = a.matrix3x4();
  Json rows = Json::array();
  for (int r = 0; r < 3; ++r) rows.push_back({m[r * 4], m[r * 4 + 1], m[r * 4 + 2], m[r * 4 + 3]});
  return rows;
}

inline AffineTransform affine_from_json(const Json& j) {
  std::array<double, 12> m{};
  if (!j.is_array() || j.size() != 3) throw Error("affine: expected a 3x4 row-major matrix");
  for (int r = 0; r < 3; ++r) {
    if (!j[r].is_array() || j[r].size() != 4) throw Error("affine: expected a 3x4 row-major matrix");
    for (int c = 0; c < 4; ++c) m[r * 4 + c] = j[r][c].get<double>();
  }
  return AffineTransform::from_matrix3x4(m);
}

}  // namespace incepreg

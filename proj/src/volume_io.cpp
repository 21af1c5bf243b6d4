// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "contseg/volume_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "contseg/error.hpp"
#include "contseg/serialize.hpp"
#include "json.hpp"

namespace contseg {

static_assert(std::endian::native == std::endian::little, "raw volume I/O assumes a little-endian host");

namespace {

template <class T>
void write_raw(const std::filesystem::path& path, const char (&magic)[8], const Volume<T>& v) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(magic, 8);
  const std::uint32_t dims[3] = {static_cast<std::uint32_t>(v.dims.w), static_cast<std::uint32_t>(v.dims.h),
                                 static_cast<std::uint32_t>(v.dims.d)};
  f.write(reinterpret_cast<const char*>(dims), sizeof dims);
  f.write(reinterpret_cast<const char*>(v.data.data()), static_cast<std::streamsize>(v.data.size() * sizeof(T)));
  if (!f) throw IoError("write failed: " + path.string());
}

template <class T>
Volume<T> read_raw(const std::filesystem::path& path, const char (&magic)[8]) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  char m[8];
  std::uint32_t dims[3];
  f.read(m, 8);
  f.read(reinterpret_cast<char*>(dims), sizeof dims);
  if (!f || std::memcmp(m, magic, 8) != 0) throw IoError(path.string() + ": bad volume header");
  Volume<T> v(Dims3{static_cast<int>(dims[2]), static_cast<int>(dims[1]), static_cast<int>(dims[0])});
  f.read(reinterpret_cast<char*>(v.data.data()), static_cast<std::streamsize>(v.data.size() * sizeof(T)));
  if (!f) throw IoError(path.string() + ": truncated payload");
  if (f.peek() != std::char_traits<char>::eof()) throw IoError(path.string() + ": trailing bytes");
  return v;
}

}  // namespace

void write_image(const std::filesystem::path& path, const Image& image) { write_raw(path, kImageMagic, image); }
void write_labels(const std::filesystem::path& path, const LabelMap& labels) { write_raw(path, kLabelMagic, labels); }
Image read_image(const std::filesystem::path& path) { return read_raw<float>(path, kImageMagic); }
LabelMap read_labels(const std::filesystem::path& path) { return read_raw<std::int32_t>(path, kLabelMagic); }

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_dataset(const std::filesystem::path& dir, const DatasetDescriptor& descriptor, const TaskRegistry& registry,
                   const std::vector<Sample>& samples) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j = to_json(descriptor);
  nlohmann::ordered_json anat = nlohmann::ordered_json::array();
  for (const auto& a : registry.anatomies) anat.push_back(to_json(a));
  j["anatomies"] = anat;
  nlohmann::ordered_json files = nlohmann::ordered_json::array();
  for (const auto& s : samples) {
    const std::string img = s.case_id + "_image.raw";
    const std::string lab = s.case_id + "_labels.raw";
    write_image(dir / img, s.image);
    write_labels(dir / lab, s.labels);
    files.push_back({{"case_id", s.case_id},
                     {"split", to_string(s.split)},
                     {"image", img},
                     {"labels", lab},
                     {"bpr_scores", s.bpr_scores}});
  }
  j["files"] = files;
  write_text(dir / "manifest.json", j.dump(2) + "\n");
}

LoadedDataset read_dataset(const std::filesystem::path& dir) {
  const auto j = nlohmann::json::parse(read_text(dir / "manifest.json"));
  LoadedDataset out;
  out.descriptor = descriptor_from_json(j);
  for (const auto& a : j.at("anatomies")) out.anatomies.push_back(anatomy_from_json(a));
  for (const auto& f : j.at("files")) {
    Sample s;
    s.case_id = f.at("case_id").get<std::string>();
    s.dataset_id = out.descriptor.dataset_id;
    const auto split = f.at("split").get<std::string>();
    s.split = split == "train" ? Split::train : split == "val" ? Split::val : Split::test;
    s.image = read_image(dir / f.at("image").get<std::string>());
    s.labels = read_labels(dir / f.at("labels").get<std::string>());
    s.bpr_scores = f.at("bpr_scores").get<std::vector<double>>();
    out.samples.push_back(std::move(s));
  }
  return out;
}

}  // namespace contseg

#include "pianet/data/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pianet/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "volume I/O assumes a little-endian host");

namespace pianet {

namespace {

std::string fmt_double(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

double parse_double(const std::string& s, const std::string& where) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = b + s.size();
  while (b < e && *b == ' ') ++b;
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e)
    throw DataError(where + ": not a number: '" + s + "'");
  return v;
}

long parse_long(const std::string& s, const std::string& where) {
  long v = 0;
  const char* b = s.data();
  const char* e = b + s.size();
  while (b < e && *b == ' ') ++b;
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e)
    throw DataError(where + ": not an integer: '" + s + "'");
  return v;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

std::ofstream open_out(const std::string& path, bool binary) {
  std::ofstream f(path, binary ? std::ios::binary : std::ios::out);
  if (!f) throw IoError("cannot open for writing: " + path);
  return f;
}

std::ifstream open_in(const std::string& path, bool binary) {
  std::ifstream f(path, binary ? std::ios::binary : std::ios::in);
  if (!f) throw IoError("cannot open for reading: " + path);
  return f;
}

const char* type_name(ElementType t) {
  switch (t) {
    case ElementType::kShort: return "MET_SHORT";
    case ElementType::kUchar: return "MET_UCHAR";
    case ElementType::kDouble: return "MET_DOUBLE";
  }
  throw ConfigError("unknown element type");
}

std::size_t type_size(ElementType t) {
  switch (t) {
    case ElementType::kShort: return 2;
    case ElementType::kUchar: return 1;
    case ElementType::kDouble: return 8;
  }
  throw ConfigError("unknown element type");
}

void write_raw(const std::string& path, const std::vector<double>& data,
               ElementType type) {
  auto f = open_out(path, true);
  if (type == ElementType::kDouble) {
    f.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * 8));
  } else if (type == ElementType::kShort) {
    std::vector<std::int16_t> buf(data.size());
    for (std::size_t i = 0; i < data.size(); ++i)
      buf[i] = static_cast<std::int16_t>(
          std::clamp<long>(std::llround(data[i]), -32768, 32767));
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * 2));
  } else {
    std::vector<std::uint8_t> buf(data.size());
    for (std::size_t i = 0; i < data.size(); ++i)
      buf[i] = static_cast<std::uint8_t>(
          std::clamp<long>(std::llround(data[i]), 0, 255));
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  }
  if (!f) throw IoError("short write: " + path);
}

}  // namespace

void write_metaimage(const std::string& mhd_path, const Volume& v,
                     ElementType type) {
  v.validate("write_metaimage");
  const std::filesystem::path mhd(mhd_path);
  std::filesystem::path raw = mhd;
  raw.replace_extension(".raw");
  auto h = open_out(mhd_path, false);
  h << "ObjectType = Image\n";
  h << "NDims = 3\n";
  h << "BinaryData = True\n";
  h << "BinaryDataByteOrderMSB = False\n";
  h << "DimSize = " << v.extents[2] << " " << v.extents[1] << " "
    << v.extents[0] << "\n";
  h << "ElementSpacing = " << fmt_double(v.spacing[2]) << " "
    << fmt_double(v.spacing[1]) << " " << fmt_double(v.spacing[0]) << "\n";
  h << "ElementType = " << type_name(type) << "\n";
  h << "ElementDataFile = " << raw.filename().string() << "\n";
  if (!h) throw IoError("short write: " + mhd_path);
  write_raw(raw.string(), v.data, type);
}

Volume read_metaimage(const std::string& mhd_path) {
  auto h = open_in(mhd_path, false);
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(h, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError(mhd_path + ":" + std::to_string(line_no) +
                      ": header line without '='");
    std::string key = line.substr(0, eq);
    std::string val = line.substr(eq + 1);
    auto trim = [](std::string& s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      s = b == std::string::npos ? "" : s.substr(b, e - b + 1);
    };
    trim(key);
    trim(val);
    kv[key] = val;
  }
  auto need = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end())
      throw DataError(mhd_path + ": missing header key " + key);
    return it->second;
  };
  if (parse_long(need("NDims"), mhd_path) != 3)
    throw DataError(mhd_path + ": only NDims = 3 is supported");
  if (kv.count("BinaryDataByteOrderMSB") &&
      kv["BinaryDataByteOrderMSB"] == "True")
    throw DataError(mhd_path + ": big-endian payloads are not supported");

  Volume v;
  {
    const auto dims = split(need("DimSize"), ' ');
    std::vector<long> d;
    for (const auto& t : dims)
      if (!t.empty()) d.push_back(parse_long(t, mhd_path + ": DimSize"));
    if (d.size() != 3 || d[0] <= 0 || d[1] <= 0 || d[2] <= 0)
      throw DataError(mhd_path + ": DimSize must be three positive integers");
    v.extents = {static_cast<std::size_t>(d[2]), static_cast<std::size_t>(d[1]),
                 static_cast<std::size_t>(d[0])};
  }
  {
    const auto sp = split(need("ElementSpacing"), ' ');
    std::vector<double> s;
    for (const auto& t : sp)
      if (!t.empty()) s.push_back(parse_double(t, mhd_path + ": ElementSpacing"));
    if (s.size() != 3 || s[0] <= 0 || s[1] <= 0 || s[2] <= 0)
      throw DataError(mhd_path + ": ElementSpacing must be three positive numbers");
    v.spacing = {s[2], s[1], s[0]};
  }
  ElementType type;
  const std::string tname = need("ElementType");
  if (tname == "MET_SHORT")
    type = ElementType::kShort;
  else if (tname == "MET_UCHAR")
    type = ElementType::kUchar;
  else if (tname == "MET_DOUBLE")
    type = ElementType::kDouble;
  else
    throw DataError(mhd_path + ": unsupported ElementType " + tname);

  std::filesystem::path raw =
      std::filesystem::path(mhd_path).parent_path() / need("ElementDataFile");
  auto f = open_in(raw.string(), true);
  f.seekg(0, std::ios::end);
  const std::size_t actual = static_cast<std::size_t>(f.tellg());
  const std::size_t expected = v.voxel_count() * type_size(type);
  if (actual != expected)
    throw DataError(raw.string() + ": payload has " + std::to_string(actual) +
                    " bytes, expected " + std::to_string(expected));
  f.seekg(0);
  v.data.resize(v.voxel_count());
  if (type == ElementType::kDouble) {
    f.read(reinterpret_cast<char*>(v.data.data()),
           static_cast<std::streamsize>(expected));
  } else if (type == ElementType::kShort) {
    std::vector<std::int16_t> buf(v.voxel_count());
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(expected));
    for (std::size_t i = 0; i < buf.size(); ++i) v.data[i] = buf[i];
  } else {
    std::vector<std::uint8_t> buf(v.voxel_count());
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(expected));
    for (std::size_t i = 0; i < buf.size(); ++i) v.data[i] = buf[i];
  }
  if (!f) throw IoError("short read: " + raw.string());
  return v;
}

void write_mask_metaimage(const std::string& mhd_path, const Volume& v) {
  if (!v.has_mask()) throw ConfigError("write_mask_metaimage: no mask present");
  Volume m;
  m.extents = v.extents;
  m.spacing = v.spacing;
  m.data.resize(v.voxel_count());
  for (std::size_t i = 0; i < m.data.size(); ++i)
    m.data[i] = v.mask[i] ? 1.0 : 0.0;
  write_metaimage(mhd_path, m, ElementType::kUchar);
}

void read_mask_metaimage(const std::string& mhd_path, Volume& v) {
  const Volume m = read_metaimage(mhd_path);
  if (m.extents != v.extents)
    throw DataError(mhd_path + ": mask extents do not match the volume");
  v.mask.resize(v.voxel_count());
  for (std::size_t i = 0; i < v.mask.size(); ++i)
    v.mask[i] = m.data[i] != 0.0 ? 1 : 0;
}

void write_flat_volume(const std::string& path, const Volume& v) {
  v.validate("write_flat_volume");
  auto f = open_out(path, true);
  f.write("PIAVOL1\n", 8);
  std::uint64_t e[3] = {v.extents[0], v.extents[1], v.extents[2]};
  f.write(reinterpret_cast<const char*>(e), 24);
  f.write(reinterpret_cast<const char*>(v.spacing.data()), 24);
  const std::uint8_t has_mask = v.has_mask() ? 1 : 0;
  f.write(reinterpret_cast<const char*>(&has_mask), 1);
  f.write(reinterpret_cast<const char*>(v.data.data()),
          static_cast<std::streamsize>(v.data.size() * 8));
  if (has_mask)
    f.write(reinterpret_cast<const char*>(v.mask.data()),
            static_cast<std::streamsize>(v.mask.size()));
  if (!f) throw IoError("short write: " + path);
}

Volume read_flat_volume(const std::string& path) {
  auto f = open_in(path, true);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, "PIAVOL1\n", 8) != 0)
    throw DataError(path + ": bad magic at byte 0");
  Volume v;
  std::uint64_t e[3];
  f.read(reinterpret_cast<char*>(e), 24);
  f.read(reinterpret_cast<char*>(v.spacing.data()), 24);
  std::uint8_t has_mask = 0;
  f.read(reinterpret_cast<char*>(&has_mask), 1);
  if (!f) throw DataError(path + ": truncated header");
  v.extents = {e[0], e[1], e[2]};
  v.data.resize(v.voxel_count());
  f.read(reinterpret_cast<char*>(v.data.data()),
         static_cast<std::streamsize>(v.data.size() * 8));
  if (has_mask) {
    v.mask.resize(v.voxel_count());
    f.read(reinterpret_cast<char*>(v.mask.data()),
           static_cast<std::streamsize>(v.mask.size()));
  }
  if (!f) throw DataError(path + ": truncated payload");
  v.validate(path);
  return v;
}

void write_annotations(const std::string& path,
                       const std::vector<ScanAnnotation>& scans) {
  auto f = open_out(path, false);
  f << "scan_id,x_mm,y_mm,z_mm,diameter_mm,agreement,relevant\n";
  for (const auto& s : scans)
    for (const auto& n : s.nodules)
      f << s.scan_id << "," << fmt_double(n.x_mm) << "," << fmt_double(n.y_mm)
        << "," << fmt_double(n.z_mm) << "," << fmt_double(n.diameter_mm) << ","
        << n.agreement << "," << (n.relevant ? 1 : 0) << "\n";
  if (!f) throw IoError("short write: " + path);
}

std::vector<ScanAnnotation> read_annotations(const std::string& path) {
  auto f = open_in(path, false);
  std::string line;
  if (!std::getline(f, line)) throw DataError(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "scan_id,x_mm,y_mm,z_mm,diameter_mm,agreement,relevant")
    throw DataError(path + ":1: unexpected header row");
  std::vector<ScanAnnotation> scans;
  std::map<std::string, std::size_t> by_id;
  std::size_t line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    const auto fields = split(line, ',');
    if (fields.size() != 7)
      throw DataError(where + ": expected 7 fields, got " +
                      std::to_string(fields.size()));
    Nodule n;
    n.x_mm = parse_double(fields[1], where);
    n.y_mm = parse_double(fields[2], where);
    n.z_mm = parse_double(fields[3], where);
    n.diameter_mm = parse_double(fields[4], where);
    const long agree = parse_long(fields[5], where);
    const long rel = parse_long(fields[6], where);
    if (!(n.diameter_mm > 0.0))
      throw DataError(where + ": diameter must be positive");
    if (agree < 0 || agree > 4)
      throw DataError(where + ": agreement must be in 0..4");
    if (rel != 0 && rel != 1)
      throw DataError(where + ": relevant must be 0 or 1");
    n.agreement = static_cast<int>(agree);
    n.relevant = rel == 1;
    auto [it, fresh] = by_id.try_emplace(fields[0], scans.size());
    if (fresh) scans.push_back({fields[0], {}});
    scans[it->second].nodules.push_back(n);
  }
  return scans;
}

void write_detections(const std::string& path,
                      const std::vector<ScanDetections>& scans) {
  auto f = open_out(path, false);
  f << "scan_id,x_mm,y_mm,z_mm,r_mm,score\n";
  for (const auto& s : scans)
    for (const auto& d : s.detections)
      f << s.scan_id << "," << fmt_double(d.box.x) << "," << fmt_double(d.box.y)
        << "," << fmt_double(d.box.z) << "," << fmt_double(d.box.r) << ","
        << fmt_double(d.score) << "\n";
  if (!f) throw IoError("short write: " + path);
}

std::vector<ScanDetections> read_detections(const std::string& path) {
  auto f = open_in(path, false);
  std::string line;
  if (!std::getline(f, line)) throw DataError(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "scan_id,x_mm,y_mm,z_mm,r_mm,score")
    throw DataError(path + ":1: unexpected header row");
  std::vector<ScanDetections> scans;
  std::map<std::string, std::size_t> by_id;
  std::size_t line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    const auto fields = split(line, ',');
    if (fields.size() != 6)
      throw DataError(where + ": expected 6 fields, got " +
                      std::to_string(fields.size()));
    Detection d;
    d.box.x = parse_double(fields[1], where);
    d.box.y = parse_double(fields[2], where);
    d.box.z = parse_double(fields[3], where);
    d.box.r = parse_double(fields[4], where);
    d.score = parse_double(fields[5], where);
    if (!(d.box.r > 0.0)) throw DataError(where + ": r_mm must be positive");
    auto [it, fresh] = by_id.try_emplace(fields[0], scans.size());
    if (fresh) scans.push_back({fields[0], {}});
    scans[it->second].detections.push_back(d);
  }
  return scans;
}

}  // namespace pianet

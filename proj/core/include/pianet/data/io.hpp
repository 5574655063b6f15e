#pragma once

#include <map>
#include <string>
#include <vector>

#include "pianet/boxes/box.hpp"
#include "pianet/data/volume.hpp"

namespace pianet {

enum class ElementType { kShort, kUchar, kDouble };

// MetaImage: ASCII .mhd header (NDims, DimSize, ElementSpacing, ElementType,
// ElementDataFile) plus a little-endian .raw payload. DimSize/ElementSpacing
// follow the format's x y z order; the in-memory Volume is z-major.
void write_metaimage(const std::string& mhd_path, const Volume& v,
                     ElementType type = ElementType::kDouble);
Volume read_metaimage(const std::string& mhd_path);

// Mask helpers: a MET_UCHAR companion image with the same extents.
void write_mask_metaimage(const std::string& mhd_path, const Volume& v);
void read_mask_metaimage(const std::string& mhd_path, Volume& v);

// Flat binary: magic "PIAVOL1\n", extents and spacing, f64 payload.
void write_flat_volume(const std::string& path, const Volume& v);
Volume read_flat_volume(const std::string& path);

// Annotation CSV, header row required:
//   scan_id,x_mm,y_mm,z_mm,diameter_mm,agreement,relevant
void write_annotations(const std::string& path,
                       const std::vector<ScanAnnotation>& scans);
std::vector<ScanAnnotation> read_annotations(const std::string& path);

// Detections CSV, header row required:
//   scan_id,x_mm,y_mm,z_mm,r_mm,score
struct ScanDetections {
  std::string scan_id;
  std::vector<Detection> detections;
};
void write_detections(const std::string& path,
                      const std::vector<ScanDetections>& scans);
std::vector<ScanDetections> read_detections(const std::string& path);

}  // namespace pianet

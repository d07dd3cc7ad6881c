#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace nlte {

// Malformed input (bad XML/JSON syntax); message carries line/column.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Well-formed input missing or violating a required field; message names it.
struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct VocObject {
  std::string name;
  int xmin = 0, ymin = 0, xmax = 0, ymax = 0;
  bool difficult = false;

  bool operator==(const VocObject&) const = default;
};

struct VocDoc {
  std::string filename;
  int width = 0;
  int height = 0;
  std::vector<VocObject> objects;

  bool operator==(const VocDoc&) const = default;
};

// Restricted VOC grammar: no attributes, entities limited to the five XML
// built-ins. Unknown elements are skipped, so real-world files parse; only
// filename, size, and object entries are captured.
VocDoc parse_voc(const std::string& xml_text);
// Canonical element order: filename, size (width, height), then objects
// (name, difficult, bndbox). Byte-stable for a given doc.
std::string write_voc(const VocDoc& doc);

struct CocoImage {
  std::int64_t id = 0;
  std::string file_name;
  int width = 0;
  int height = 0;

  bool operator==(const CocoImage&) const = default;
};

struct CocoAnnotation {
  std::int64_t id = 0;
  std::int64_t image_id = 0;
  std::int64_t category_id = 0;
  double x = 0.0, y = 0.0, w = 0.0, h = 0.0;

  bool operator==(const CocoAnnotation&) const = default;
};

struct CocoCategory {
  std::int64_t id = 0;
  std::string name;

  bool operator==(const CocoCategory&) const = default;
};

struct CocoLikeDoc {
  std::vector<CocoImage> images;
  std::vector<CocoAnnotation> annotations;
  std::vector<CocoCategory> categories;

  bool operator==(const CocoLikeDoc&) const = default;
};

CocoLikeDoc parse_coco(const std::string& json_text);
std::string write_coco(const CocoLikeDoc& doc);

// The 20 PASCAL VOC category names.
const std::vector<std::string>& voc_categories();

struct AnnotCorruptionRecord {
  std::string file;
  int object_index = 0;  // position in the file's original object order; -1 flags an emptied file
  std::string old_label;
  std::string new_label;  // "REMOVED" for deletions, "EMPTY" on flag rows
  bool removed = false;

  bool operator==(const AnnotCorruptionRecord&) const = default;
};
using AnnotCorruptionLog = std::vector<AnnotCorruptionRecord>;

// Label-noise protocol over a dataset: exactly floor(rho * total objects)
// objects change, counted globally across files; substitution is uniform over
// the other universe names plus removal. Files whose last object is removed
// are kept and flagged with an object_index -1 row.
AnnotCorruptionLog corrupt_annotations(std::vector<VocDoc>& docs,
                                       const std::vector<std::string>& file_names,
                                       const std::vector<std::string>& category_universe,
                                       double rho, std::uint64_t seed,
                                       bool background_in_noise = true);
AnnotCorruptionLog corrupt_annotations(std::vector<CocoLikeDoc>& docs,
                                       const std::vector<std::string>& file_names,
                                       const std::vector<std::string>& category_universe,
                                       double rho, std::uint64_t seed,
                                       bool background_in_noise = true);

// CSV with header file,object_index,old_label,new_label_or_REMOVED.
std::string annot_corruption_log_csv(const AnnotCorruptionLog& log);

}  // namespace nlte

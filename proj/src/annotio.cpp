#include "nlte/annotio.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <set>
#include <sstream>

#include <json.hpp>

#include "nlte/rng.hpp"

namespace nlte {
namespace {

// Minimal element tree for the restricted VOC grammar.
struct XmlElement {
  std::string name;
  std::string text;
  std::vector<XmlElement> children;
  int line = 0;
  int col = 0;

  const XmlElement* child(const std::string& n) const {
    for (const auto& c : children)
      if (c.name == n) return &c;
    return nullptr;
  }
};

class XmlParser {
 public:
  explicit XmlParser(const std::string& text) : text_(text) {}

  XmlElement parse_document() {
    skip_prolog();
    XmlElement root = parse_element();
    skip_ws_and_comments();
    if (pos_ != text_.size()) fail("trailing content after root element");
    return root;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError("xml parse error at line " + std::to_string(line_) + ", col " +
                     std::to_string(col_) + ": " + msg);
  }

  char peek() const { return pos_ < text_.size() ? text_[pos_] : '\0'; }
  bool starts_with(const char* s) const { return text_.compare(pos_, std::strlen(s), s) == 0; }

  char advance() {
    if (pos_ >= text_.size()) fail("unexpected end of input");
    const char c = text_[pos_++];
    if (c == '\n') {
      ++line_;
      col_ = 1;
    } else {
      ++col_;
    }
    return c;
  }

  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'");
    advance();
  }

  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) advance();
  }

  void skip_ws_and_comments() {
    for (;;) {
      skip_ws();
      if (starts_with("<!--")) {
        while (pos_ < text_.size() && !starts_with("-->")) advance();
        if (pos_ >= text_.size()) fail("unterminated comment");
        advance();
        advance();
        advance();
        continue;
      }
      return;
    }
  }

  void skip_prolog() {
    skip_ws();
    if (starts_with("<?")) {
      while (pos_ < text_.size() && !starts_with("?>")) advance();
      if (pos_ >= text_.size()) fail("unterminated xml declaration");
      advance();
      advance();
    }
    skip_ws_and_comments();
  }

  std::string parse_name() {
    std::string name;
    while (pos_ < text_.size()) {
      const char c = peek();
      if (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.') {
        name.push_back(c);
        advance();
      } else {
        break;
      }
    }
    if (name.empty()) fail("expected element name");
    return name;
  }

  std::string decode_entity() {
    // Called on '&'.
    std::string ent;
    advance();
    while (pos_ < text_.size() && peek() != ';') ent.push_back(advance());
    expect(';');
    if (ent == "amp") return "&";
    if (ent == "lt") return "<";
    if (ent == "gt") return ">";
    if (ent == "quot") return "\"";
    if (ent == "apos") return "'";
    fail("unknown entity &" + ent + ";");
  }

  XmlElement parse_element() {
    skip_ws_and_comments();
    XmlElement el;
    el.line = line_;
    el.col = col_;
    expect('<');
    el.name = parse_name();
    skip_ws();
    if (peek() == '/') {
      advance();
      expect('>');
      return el;  // self-closing
    }
    if (peek() != '>') fail("attributes are not part of the annotation grammar");
    advance();

    for (;;) {
      if (starts_with("<!--")) {
        skip_ws_and_comments();
        continue;
      }
      if (starts_with("</")) {
        advance();
        advance();
        const int cline = line_, ccol = col_;
        const std::string close = parse_name();
        if (close != el.name)
          throw ParseError("xml parse error at line " + std::to_string(cline) + ", col " +
                           std::to_string(ccol) + ": closing </" + close +
                           "> does not match <" + el.name + ">");
        skip_ws();
        expect('>');
        return el;
      }
      if (peek() == '<') {
        el.children.push_back(parse_element());
        continue;
      }
      if (pos_ >= text_.size()) fail("unterminated element <" + el.name + ">");
      if (peek() == '&') {
        el.text += decode_entity();
      } else {
        el.text.push_back(advance());
      }
    }
  }

  const std::string& text_;
  std::size_t pos_ = 0;
  int line_ = 1;
  int col_ = 1;
};

std::string trimmed(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

const XmlElement& require_child(const XmlElement& parent, const std::string& name) {
  const XmlElement* c = parent.child(name);
  if (!c)
    throw SchemaError("annotation schema: <" + parent.name + "> is missing required element <" +
                      name + ">");
  return *c;
}

int parse_int_text(const XmlElement& el) {
  const std::string t = trimmed(el.text);
  try {
    std::size_t used = 0;
    const int v = std::stoi(t, &used);
    if (used != t.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw SchemaError("annotation schema: element <" + el.name + "> must hold an integer, got \"" +
                      t + "\"");
  }
}

std::string xml_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

}  // namespace

VocDoc parse_voc(const std::string& xml_text) {
  XmlParser parser(xml_text);
  const XmlElement root = parser.parse_document();
  if (root.name != "annotation")
    throw SchemaError("annotation schema: root element must be <annotation>, got <" + root.name +
                      ">");

  VocDoc doc;
  doc.filename = trimmed(require_child(root, "filename").text);
  if (doc.filename.empty())
    throw SchemaError("annotation schema: <filename> must be non-empty");
  const XmlElement& size = require_child(root, "size");
  doc.width = parse_int_text(require_child(size, "width"));
  doc.height = parse_int_text(require_child(size, "height"));
  if (doc.width <= 0 || doc.height <= 0)
    throw SchemaError("annotation schema: <size> must be positive");

  for (const auto& el : root.children) {
    if (el.name != "object") continue;
    VocObject obj;
    obj.name = trimmed(require_child(el, "name").text);
    if (obj.name.empty()) throw SchemaError("annotation schema: <name> must be non-empty");
    if (const XmlElement* diff = el.child("difficult"))
      obj.difficult = parse_int_text(*diff) != 0;
    const XmlElement& bb = require_child(el, "bndbox");
    obj.xmin = parse_int_text(require_child(bb, "xmin"));
    obj.ymin = parse_int_text(require_child(bb, "ymin"));
    obj.xmax = parse_int_text(require_child(bb, "xmax"));
    obj.ymax = parse_int_text(require_child(bb, "ymax"));
    if (!(obj.xmin < obj.xmax) || !(obj.ymin < obj.ymax) || obj.xmin < 0 || obj.ymin < 0 ||
        obj.xmax > doc.width || obj.ymax > doc.height)
      throw SchemaError("annotation schema: <bndbox> out of image bounds in \"" + doc.filename +
                        "\"");
    doc.objects.push_back(std::move(obj));
  }
  return doc;
}

std::string write_voc(const VocDoc& doc) {
  std::ostringstream out;
  out << "<annotation>\n";
  out << "  <filename>" << xml_escape(doc.filename) << "</filename>\n";
  out << "  <size>\n";
  out << "    <width>" << doc.width << "</width>\n";
  out << "    <height>" << doc.height << "</height>\n";
  out << "  </size>\n";
  for (const auto& obj : doc.objects) {
    out << "  <object>\n";
    out << "    <name>" << xml_escape(obj.name) << "</name>\n";
    out << "    <difficult>" << (obj.difficult ? 1 : 0) << "</difficult>\n";
    out << "    <bndbox>\n";
    out << "      <xmin>" << obj.xmin << "</xmin>\n";
    out << "      <ymin>" << obj.ymin << "</ymin>\n";
    out << "      <xmax>" << obj.xmax << "</xmax>\n";
    out << "      <ymax>" << obj.ymax << "</ymax>\n";
    out << "    </bndbox>\n";
    out << "  </object>\n";
  }
  out << "</annotation>\n";
  return out.str();
}

CocoLikeDoc parse_coco(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("json parse error: ") + e.what());
  }
  if (!j.is_object()) throw SchemaError("coco schema: top level must be an object");
  for (const char* key : {"images", "annotations", "categories"})
    if (!j.contains(key) || !j[key].is_array())
      throw SchemaError(std::string("coco schema: missing required array \"") + key + "\"");

  CocoLikeDoc doc;
  std::set<std::int64_t> image_ids, ann_ids, cat_ids;
  for (const auto& ji : j["images"]) {
    CocoImage img;
    if (!ji.contains("id") || !ji["id"].is_number_integer())
      throw SchemaError("coco schema: image entry needs integer \"id\"");
    img.id = ji["id"].get<std::int64_t>();
    img.file_name = ji.value("file_name", "");
    if (img.file_name.empty())
      throw SchemaError("coco schema: image entry needs non-empty \"file_name\"");
    img.width = ji.value("width", 0);
    img.height = ji.value("height", 0);
    if (!image_ids.insert(img.id).second)
      throw SchemaError("coco schema: duplicate image id " + std::to_string(img.id));
    doc.images.push_back(std::move(img));
  }
  for (const auto& jc : j["categories"]) {
    CocoCategory cat;
    if (!jc.contains("id") || !jc["id"].is_number_integer())
      throw SchemaError("coco schema: category entry needs integer \"id\"");
    cat.id = jc["id"].get<std::int64_t>();
    cat.name = jc.value("name", "");
    if (cat.name.empty()) throw SchemaError("coco schema: category entry needs non-empty \"name\"");
    if (!cat_ids.insert(cat.id).second)
      throw SchemaError("coco schema: duplicate category id " + std::to_string(cat.id));
    doc.categories.push_back(std::move(cat));
  }
  for (const auto& ja : j["annotations"]) {
    CocoAnnotation ann;
    for (const char* key : {"id", "image_id", "category_id"})
      if (!ja.contains(key) || !ja[key].is_number_integer())
        throw SchemaError(std::string("coco schema: annotation entry needs integer \"") + key + "\"");
    ann.id = ja["id"].get<std::int64_t>();
    ann.image_id = ja["image_id"].get<std::int64_t>();
    ann.category_id = ja["category_id"].get<std::int64_t>();
    if (!ja.contains("bbox") || !ja["bbox"].is_array() || ja["bbox"].size() != 4)
      throw SchemaError("coco schema: annotation bbox must be [x,y,w,h]");
    for (const auto& v : ja["bbox"])
      if (!v.is_number()) throw SchemaError("coco schema: bbox entries must be numbers");
    ann.x = ja["bbox"][0].get<double>();
    ann.y = ja["bbox"][1].get<double>();
    ann.w = ja["bbox"][2].get<double>();
    ann.h = ja["bbox"][3].get<double>();
    if (!ann_ids.insert(ann.id).second)
      throw SchemaError("coco schema: duplicate annotation id " + std::to_string(ann.id));
    if (!image_ids.count(ann.image_id))
      throw SchemaError("coco schema: annotation " + std::to_string(ann.id) +
                        " references missing image " + std::to_string(ann.image_id));
    if (!cat_ids.count(ann.category_id))
      throw SchemaError("coco schema: annotation " + std::to_string(ann.id) +
                        " references missing category " + std::to_string(ann.category_id));
    doc.annotations.push_back(ann);
  }
  return doc;
}

std::string write_coco(const CocoLikeDoc& doc) {
  nlohmann::json j;
  j["images"] = nlohmann::json::array();
  for (const auto& img : doc.images)
    j["images"].push_back({{"id", img.id},
                           {"file_name", img.file_name},
                           {"width", img.width},
                           {"height", img.height}});
  j["annotations"] = nlohmann::json::array();
  for (const auto& ann : doc.annotations)
    j["annotations"].push_back({{"id", ann.id},
                                {"image_id", ann.image_id},
                                {"category_id", ann.category_id},
                                {"bbox", {ann.x, ann.y, ann.w, ann.h}}});
  j["categories"] = nlohmann::json::array();
  for (const auto& cat : doc.categories)
    j["categories"].push_back({{"id", cat.id}, {"name", cat.name}});
  return j.dump(2) + "\n";
}

const std::vector<std::string>& voc_categories() {
  static const std::vector<std::string> names = {
      "aeroplane", "bicycle", "bird",   "boat",        "bottle",
      "bus",       "car",     "cat",    "chair",       "cow",
      "diningtable", "dog",   "horse",  "motorbike",   "person",
      "pottedplant", "sheep", "sofa",   "train",       "tvmonitor"};
  return names;
}

namespace {

// Shared selection pass: returns the sorted (doc, object) pairs to corrupt
// plus the substitution draw for each (index into the outcome list).
struct SelectionPlan {
  std::vector<std::pair<int, int>> picks;
  std::vector<int> draws;
  int outcomes = 0;
};

SelectionPlan plan_corruption(const std::vector<int>& objects_per_doc, int universe_size,
                              double rho, std::uint64_t seed, bool background_in_noise) {
  if (!(rho >= 0.0 && rho <= 1.0))
    throw std::invalid_argument("corrupt_annotations: rho must lie in [0,1]");
  if (universe_size < 2)
    throw std::invalid_argument("corrupt_annotations: category universe needs at least 2 names");

  std::vector<std::pair<int, int>> instances;
  for (int d = 0; d < static_cast<int>(objects_per_doc.size()); ++d)
    for (int o = 0; o < objects_per_doc[d]; ++o) instances.emplace_back(d, o);

  const std::size_t n = instances.size();
  // Same epsilon rationale as the scene-level protocol: keep exact decimal
  // products from dropping a unit to representation error.
  const std::size_t k = static_cast<std::size_t>(std::floor(rho * static_cast<double>(n) + 1e-9));

  Rng rng = Rng(seed).stream("label-noise");
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(static_cast<int>(n - i)));
    std::swap(instances[i], instances[j]);
  }
  SelectionPlan plan;
  plan.picks.assign(instances.begin(), instances.begin() + k);
  std::sort(plan.picks.begin(), plan.picks.end());
  plan.outcomes = background_in_noise ? universe_size : universe_size - 1;
  plan.draws.reserve(k);
  for (std::size_t i = 0; i < k; ++i) plan.draws.push_back(rng.uniform_int(plan.outcomes));
  return plan;
}

// Maps a draw over the outcome list (other names in universe order, then
// removal) to the replacement label; empty string means removal.
std::string outcome_label(const std::vector<std::string>& universe, const std::string& old_label,
                          int draw, bool background_in_noise) {
  const int c = static_cast<int>(universe.size());
  if (background_in_noise && draw == c - 1) return std::string();
  int idx = 0;
  for (const auto& name : universe) {
    if (name == old_label) continue;
    if (idx == draw) return name;
    ++idx;
  }
  throw std::logic_error("outcome_label: draw out of range");
}

}  // namespace

AnnotCorruptionLog corrupt_annotations(std::vector<VocDoc>& docs,
                                       const std::vector<std::string>& file_names,
                                       const std::vector<std::string>& category_universe,
                                       double rho, std::uint64_t seed, bool background_in_noise) {
  if (file_names.size() != docs.size())
    throw std::invalid_argument("corrupt_annotations: one file name per doc required");
  std::set<std::string> universe(category_universe.begin(), category_universe.end());
  std::string offenders;
  for (const auto& doc : docs)
    for (const auto& obj : doc.objects)
      if (!universe.count(obj.name)) offenders += (offenders.empty() ? "" : ", ") + obj.name;
  if (!offenders.empty())
    throw std::invalid_argument("corrupt_annotations: names outside the category universe: " +
                                offenders);

  std::vector<int> sizes;
  sizes.reserve(docs.size());
  for (const auto& doc : docs) sizes.push_back(static_cast<int>(doc.objects.size()));
  SelectionPlan plan = plan_corruption(sizes, static_cast<int>(category_universe.size()), rho,
                                       seed, background_in_noise);

  AnnotCorruptionLog log;
  std::vector<std::vector<int>> to_remove(docs.size());
  for (std::size_t i = 0; i < plan.picks.size(); ++i) {
    const auto [d, o] = plan.picks[i];
    VocObject& obj = docs[d].objects[o];
    AnnotCorruptionRecord rec;
    rec.file = file_names[d];
    rec.object_index = o;
    rec.old_label = obj.name;
    const std::string repl = outcome_label(category_universe, obj.name, plan.draws[i],
                                           background_in_noise);
    if (repl.empty()) {
      rec.removed = true;
      rec.new_label = "REMOVED";
      to_remove[d].push_back(o);
    } else {
      rec.new_label = repl;
      obj.name = repl;
    }
    log.push_back(std::move(rec));
  }
  for (int d = 0; d < static_cast<int>(docs.size()); ++d) {
    if (to_remove[d].empty()) continue;
    for (auto it = to_remove[d].rbegin(); it != to_remove[d].rend(); ++it)
      docs[d].objects.erase(docs[d].objects.begin() + *it);
    if (docs[d].objects.empty())
      log.push_back({file_names[d], -1, "", "EMPTY", false});
  }
  return log;
}

AnnotCorruptionLog corrupt_annotations(std::vector<CocoLikeDoc>& docs,
                                       const std::vector<std::string>& file_names,
                                       const std::vector<std::string>& category_universe,
                                       double rho, std::uint64_t seed, bool background_in_noise) {
  if (file_names.size() != docs.size())
    throw std::invalid_argument("corrupt_annotations: one file name per doc required");

  // Per doc: category id <-> name maps, and universe coverage.
  std::vector<std::vector<std::string>> ann_names(docs.size());
  std::set<std::string> universe(category_universe.begin(), category_universe.end());
  std::string offenders;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    std::set<std::string> doc_names;
    for (const auto& cat : docs[d].categories) doc_names.insert(cat.name);
    for (const auto& name : category_universe)
      if (!doc_names.count(name))
        throw std::invalid_argument(
            "corrupt_annotations: doc \"" + file_names[d] +
            "\" does not define universe category \"" + name + "\"");
    for (const auto& ann : docs[d].annotations) {
      std::string name;
      for (const auto& cat : docs[d].categories)
        if (cat.id == ann.category_id) name = cat.name;
      if (!universe.count(name)) offenders += (offenders.empty() ? "" : ", ") + name;
      ann_names[d].push_back(std::move(name));
    }
  }
  if (!offenders.empty())
    throw std::invalid_argument("corrupt_annotations: names outside the category universe: " +
                                offenders);

  std::vector<int> sizes;
  sizes.reserve(docs.size());
  for (const auto& doc : docs) sizes.push_back(static_cast<int>(doc.annotations.size()));
  SelectionPlan plan = plan_corruption(sizes, static_cast<int>(category_universe.size()), rho,
                                       seed, background_in_noise);

  AnnotCorruptionLog log;
  std::vector<std::vector<int>> to_remove(docs.size());
  for (std::size_t i = 0; i < plan.picks.size(); ++i) {
    const auto [d, o] = plan.picks[i];
    AnnotCorruptionRecord rec;
    rec.file = file_names[d];
    rec.object_index = o;
    rec.old_label = ann_names[d][o];
    const std::string repl = outcome_label(category_universe, rec.old_label, plan.draws[i],
                                           background_in_noise);
    if (repl.empty()) {
      rec.removed = true;
      rec.new_label = "REMOVED";
      to_remove[d].push_back(o);
    } else {
      rec.new_label = repl;
      for (const auto& cat : docs[d].categories)
        if (cat.name == repl) docs[d].annotations[o].category_id = cat.id;
    }
    log.push_back(std::move(rec));
  }
  for (int d = 0; d < static_cast<int>(docs.size()); ++d) {
    if (to_remove[d].empty()) continue;
    for (auto it = to_remove[d].rbegin(); it != to_remove[d].rend(); ++it)
      docs[d].annotations.erase(docs[d].annotations.begin() + *it);
    if (docs[d].annotations.empty())
      log.push_back({file_names[d], -1, "", "EMPTY", false});
  }
  return log;
}

std::string annot_corruption_log_csv(const AnnotCorruptionLog& log) {
  std::ostringstream out;
  out << "file,object_index,old_label,new_label_or_REMOVED\n";
  for (const auto& rec : log)
    out << rec.file << ',' << rec.object_index << ',' << rec.old_label << ',' << rec.new_label
        << '\n';
  return out.str();
}

}  // namespace nlte

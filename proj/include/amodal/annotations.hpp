#pragma once

#include "amodal/synth.hpp"

#include "json.hpp"

#include <fstream>
#include <string>
#include <vector>

// JSON Lines annotation container. Masks travel as uncompressed run-length
// encodings: [value, start, length] triples over the row-major flat index,
// contiguous and covering the full grid.
namespace amodal::annot {

using json = nlohmann::json;

struct Rle {
  int h = 0, w = 0;
  std::vector<std::array<std::int64_t, 3>> runs;  // value, start, length
};

inline Rle rle_encode(const BinaryMask& m) {
  Rle out;
  out.h = m.height();
  out.w = m.width();
  const std::int64_t total = static_cast<std::int64_t>(out.h) * out.w;
  std::int64_t start = 0;
  while (start < total) {
    const std::uint8_t value = m.v(start / out.w, start % out.w);
    std::int64_t end = start + 1;
    while (end < total && m.v(end / out.w, end % out.w) == value) ++end;
    out.runs.push_back({value, start, end - start});
    start = end;
  }
  return out;
}

inline BinaryMask rle_decode(const Rle& rle) {
  if (rle.h <= 0 || rle.w <= 0) throw ValidationError("rle: non-positive dims");
  BinaryMask out(rle.h, rle.w);
  const std::int64_t total = static_cast<std::int64_t>(rle.h) * rle.w;
  std::int64_t cursor = 0;
  for (const auto& [value, start, length] : rle.runs) {
    if (value != 0 && value != 1) throw ValidationError("rle: value must be 0/1");
    if (start != cursor) throw ValidationError("rle: runs not contiguous");
    if (length <= 0 || start + length > total) throw ValidationError("rle: bad run extent");
    for (std::int64_t i = start; i < start + length; ++i)
      out.v(i / rle.w, i % rle.w) = static_cast<std::uint8_t>(value);
    cursor = start + length;
  }
  if (cursor != total) throw ValidationError("rle: runs do not cover the grid");
  return out;
}

inline json mask_to_json(const BinaryMask& m) {
  const Rle rle = rle_encode(m);
  json runs = json::array();
  for (const auto& [v, s, l] : rle.runs) runs.push_back({v, s, l});
  return json{{"h", rle.h}, {"w", rle.w}, {"rle", runs}};
}

inline BinaryMask mask_from_json(const json& j) {
  Rle rle;
  rle.h = j.at("h").get<int>();
  rle.w = j.at("w").get<int>();
  for (const auto& run : j.at("rle")) {
    if (!run.is_array() || run.size() != 3)
      throw ValidationError("rle: each run must be a [value,start,length] triple");
    rle.runs.push_back({run[0].get<std::int64_t>(), run[1].get<std::int64_t>(),
                        run[2].get<std::int64_t>()});
  }
  return rle_decode(rle);
}

inline json instance_to_json(const synth::AmodalInstance& inst) {
  json j{{"image_id", inst.image_id},
         {"category", inst.category},
         {"bbox", inst.bbox},
         {"occlusion_rate", inst.occlusion_rate},
         {"fully_occluded", inst.fully_occluded},
         {"visible_mask", mask_to_json(inst.visible)},
         {"amodal_mask", mask_to_json(inst.amodal)}};
  if (!inst.video_id.empty()) {
    j["video_id"] = inst.video_id;
    j["frame_index"] = inst.frame_index;
  }
  if (inst.object_id >= 0) j["object_id"] = inst.object_id;
  return j;
}

inline synth::AmodalInstance instance_from_json(const json& j) {
  synth::AmodalInstance inst;
  inst.image_id = j.at("image_id").get<std::string>();
  inst.category = j.at("category").get<std::string>();
  const auto& bbox = j.at("bbox");
  if (!bbox.is_array() || bbox.size() != 4)
    throw ValidationError("bbox must be [x,y,w,h]");
  for (int i = 0; i < 4; ++i) inst.bbox[i] = bbox[i].get<int>();
  inst.occlusion_rate = j.at("occlusion_rate").get<double>();
  inst.fully_occluded = j.value("fully_occluded", false);
  inst.visible = mask_from_json(j.at("visible_mask"));
  inst.amodal = mask_from_json(j.at("amodal_mask"));
  inst.video_id = j.value("video_id", std::string());
  inst.frame_index = j.value("frame_index", -1);
  inst.object_id = j.value("object_id", -1);
  inst.validate();
  return inst;
}

inline void export_annotations(const std::vector<synth::AmodalInstance>& instances,
                               const std::string& path) {
  for (const auto& inst : instances) inst.validate();
  std::ofstream out(path);
  if (!out) throw ValidationError("export_annotations: cannot open " + path);
  for (const auto& inst : instances) out << instance_to_json(inst).dump() << "\n";
}

inline std::vector<synth::AmodalInstance> import_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("import_annotations: cannot open " + path);
  std::vector<synth::AmodalInstance> out;
  std::string line;
  int record = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(instance_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw ValidationError("record " + std::to_string(record) + ": " + e.what());
    }
    ++record;
  }
  return out;
}

}  // namespace amodal::annot

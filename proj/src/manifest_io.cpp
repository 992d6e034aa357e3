#include "trackletmr/manifest_io.hpp"

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "trackletmr/errors.hpp"

namespace tmr {

namespace {

using nlohmann::json;

void append_le32(const std::vector<float>& src, std::string& out) {
  for (const float f : src) {
    const auto u = std::bit_cast<std::uint32_t>(f);
    out.push_back(static_cast<char>(u & 0xff));
    out.push_back(static_cast<char>((u >> 8) & 0xff));
    out.push_back(static_cast<char>((u >> 16) & 0xff));
    out.push_back(static_cast<char>((u >> 24) & 0xff));
  }
}

std::vector<float> decode_le32(const std::string& bytes) {
  if (bytes.size() % 4 != 0) throw FormatError("tensor file size is not a multiple of 4");
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto b = [&](std::size_t k) {
      return static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[4 * i + k]));
    };
    out[i] = std::bit_cast<float>(b(0) | (b(1) << 8) | (b(2) << 16) | (b(3) << 24));
  }
  return out;
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path);
  return bytes;
}

std::vector<float> slice_feats(const std::vector<float>& blob, std::int64_t off, int dim,
                               const char* what) {
  if (off < 0 || static_cast<std::size_t>(off + dim) > blob.size())
    throw FormatError(std::string(what) + " feature slice out of range");
  return std::vector<float>(blob.begin() + off, blob.begin() + off + dim);
}

}  // namespace

void save_detections(const DetectionSequence& seq, const std::string& manifest_path) {
  if (!seq.timebase.valid()) throw FormatError("invalid timebase");
  if (static_cast<std::int64_t>(seq.frames.size()) != seq.timebase.num_frames)
    throw FormatError("frame count disagrees with timebase");

  const std::filesystem::path mpath(manifest_path);
  std::filesystem::path bin = mpath;
  bin.replace_extension(".bin");

  std::string blob;
  json frames = json::array();
  std::int64_t off = 0;
  auto push_feats = [&](const std::vector<float>& v, const std::vector<float>& s,
                        const char* what) {
    if (static_cast<int>(v.size()) != seq.d_v || static_cast<int>(s.size()) != seq.d_s)
      throw FormatError(std::string(what) + " feature dims disagree with header");
    const std::int64_t voff = off;
    append_le32(v, blob);
    off += seq.d_v;
    const std::int64_t soff = off;
    append_le32(s, blob);
    off += seq.d_s;
    return std::pair<std::int64_t, std::int64_t>{voff, soff};
  };

  for (const auto& frame : seq.frames) {
    json jf;
    json objs = json::array();
    for (const auto& o : frame.objects) {
      if (!(o.box[2] > o.box[0] && o.box[3] > o.box[1]))
        throw FormatError("degenerate box for object '" + o.cls + "'");
      const auto [voff, soff] = push_feats(o.visual, o.semantic, "object");
      json jo{{"class", o.cls},
              {"box", {o.box[0], o.box[1], o.box[2], o.box[3]}},
              {"conf", o.conf},
              {"vfeat_off", voff},
              {"sfeat_off", soff}};
      if (o.track_hint >= 0) jo["track"] = o.track_hint;
      objs.push_back(std::move(jo));
    }
    json rels = json::array();
    for (const auto& r : frame.relations) {
      const int n = static_cast<int>(frame.objects.size());
      if (r.subject_idx < 0 || r.subject_idx >= n || r.object_idx < 0 || r.object_idx >= n ||
          r.subject_idx == r.object_idx)
        throw FormatError("relation endpoints invalid");
      const auto [voff, soff] = push_feats(r.visual, r.semantic, "relation");
      rels.push_back(json{{"sub", r.subject_idx},
                          {"obj", r.object_idx},
                          {"pred", r.predicate},
                          {"conf", r.conf},
                          {"vfeat_off", voff},
                          {"sfeat_off", soff}});
    }
    jf["objects"] = std::move(objs);
    jf["relations"] = std::move(rels);
    frames.push_back(std::move(jf));
  }

  json manifest{{"version", 1},
                {"fps", seq.timebase.fps},
                {"num_frames", seq.timebase.num_frames},
                {"d_v", seq.d_v},
                {"d_s", seq.d_s},
                {"frames", std::move(frames)},
                {"tensor_file", bin.filename().string()},
                {"endianness", "LE32"}};

  write_file(bin.string(), blob);
  write_file(manifest_path, manifest.dump(1) + "\n");
}

DetectionSequence load_detections(const std::string& manifest_path) {
  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
  }

  try {
    if (manifest.at("version").get<int>() != 1) throw FormatError("unsupported manifest version");
    if (manifest.at("endianness").get<std::string>() != "LE32")
      throw FormatError("unsupported endianness marker");

    DetectionSequence seq;
    seq.timebase.fps = manifest.at("fps").get<double>();
    seq.timebase.num_frames = manifest.at("num_frames").get<std::int64_t>();
    seq.d_v = manifest.at("d_v").get<int>();
    seq.d_s = manifest.at("d_s").get<int>();
    if (!seq.timebase.valid() || seq.d_v < 0 || seq.d_s < 0)
      throw FormatError("invalid manifest header fields");

    const std::filesystem::path dir = std::filesystem::path(manifest_path).parent_path();
    const std::string tensor_file =
        (dir / manifest.at("tensor_file").get<std::string>()).string();
    const std::vector<float> blob = decode_le32(read_file(tensor_file));

    const auto& frames = manifest.at("frames");
    if (static_cast<std::int64_t>(frames.size()) != seq.timebase.num_frames)
      throw FormatError("frames array length disagrees with num_frames");

    for (const auto& jf : frames) {
      FrameDetections frame;
      for (const auto& jo : jf.at("objects")) {
        ObjectDetection o;
        o.cls = jo.at("class").get<std::string>();
        const auto& box = jo.at("box");
        if (box.size() != 4) throw FormatError("box must have 4 entries");
        for (int i = 0; i < 4; ++i) o.box[static_cast<std::size_t>(i)] = box[static_cast<std::size_t>(i)].get<float>();
        if (!(o.box[2] > o.box[0] && o.box[3] > o.box[1]))
          throw FormatError("degenerate box for object '" + o.cls + "'");
        o.conf = jo.at("conf").get<float>();
        o.visual = slice_feats(blob, jo.at("vfeat_off").get<std::int64_t>(), seq.d_v, "object");
        o.semantic = slice_feats(blob, jo.at("sfeat_off").get<std::int64_t>(), seq.d_s, "object");
        if (jo.contains("track")) o.track_hint = jo.at("track").get<int>();
        frame.objects.push_back(std::move(o));
      }
      for (const auto& jr : jf.at("relations")) {
        RelationshipDetection r;
        r.subject_idx = jr.at("sub").get<int>();
        r.object_idx = jr.at("obj").get<int>();
        const int n = static_cast<int>(frame.objects.size());
        if (r.subject_idx < 0 || r.subject_idx >= n || r.object_idx < 0 || r.object_idx >= n ||
            r.subject_idx == r.object_idx)
          throw FormatError("relation endpoints invalid");
        r.predicate = jr.at("pred").get<std::string>();
        r.conf = jr.at("conf").get<float>();
        r.visual = slice_feats(blob, jr.at("vfeat_off").get<std::int64_t>(), seq.d_v, "relation");
        r.semantic = slice_feats(blob, jr.at("sfeat_off").get<std::int64_t>(), seq.d_s, "relation");
        frame.relations.push_back(std::move(r));
      }
      seq.frames.push_back(std::move(frame));
    }
    return seq;
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest field error: ") + e.what());
  }
}

void save_floats_le32(const std::vector<float>& data, const std::string& path) {
  std::string blob;
  blob.reserve(data.size() * 4);
  append_le32(data, blob);
  write_file(path, blob);
}

std::vector<float> load_floats_le32(const std::string& path) {
  return decode_le32(read_file(path));
}

}  // namespace tmr

#include "differ/data.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "differ/archive.hpp"
#include "differ/error.hpp"
#include "differ/rng.hpp"

namespace differ {

std::string aspect_name(Aspect aspect) {
  switch (aspect) {
    case Aspect::kBiometric:
      return "biometric";
    case Aspect::kHair:
      return "hair";
    case Aspect::kClothing:
      return "clothing";
    case Aspect::kPose:
      return "pose";
    case Aspect::kBackground:
      return "background";
    case Aspect::kBiometricSummary:
      return "biometric_summary";
    case Aspect::kClothingSummary:
      return "clothing_summary";
  }
  throw ValidationError("unknown aspect");
}

Aspect aspect_from_name(const std::string& name) {
  if (name == "biometric") return Aspect::kBiometric;
  if (name == "hair") return Aspect::kHair;
  if (name == "clothing") return Aspect::kClothing;
  if (name == "pose") return Aspect::kPose;
  if (name == "background") return Aspect::kBackground;
  if (name == "biometric_summary") return Aspect::kBiometricSummary;
  if (name == "clothing_summary") return Aspect::kClothingSummary;
  throw ValidationError("unknown aspect '" + name + "'");
}

bool aspect_is_summary(Aspect aspect) {
  return aspect == Aspect::kBiometricSummary || aspect == Aspect::kClothingSummary;
}

void SynthConfig::validate() const {
  if (num_ids <= 0 || outfits_per_id <= 0 || images_per_outfit <= 0 || num_cameras <= 0) {
    throw ValidationError("synth: counts must be positive");
  }
  if (eval_outfits_per_id < 0) throw ValidationError("synth: eval_outfits_per_id must be >= 0");
  if (d_b <= 0 || d_c <= 0 || d_h <= 0 || d_p <= 0 || input_dim <= 0) {
    throw ValidationError("synth: dimensions must be positive");
  }
  if (noise_sigma < 0.0) throw ValidationError("synth: noise_sigma must be >= 0");
  if (camera_sigma < 0.0) throw ValidationError("synth: camera_sigma must be >= 0");
}

Matrix Dataset::inputs_for(const std::vector<Index>& rows) const {
  if (rows.empty()) throw ValidationError("dataset: empty batch");
  const Index dim = samples.at(static_cast<std::size_t>(rows.front())).input.size();
  Matrix out(static_cast<Index>(rows.size()), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Sample& s = samples.at(static_cast<std::size_t>(rows[i]));
    if (s.input.size() != dim) throw ValidationError("dataset: inconsistent input dims");
    if (s.input.size() == 0) {
      throw IoError("dataset: sample '" + s.image_id +
                    "' has no loaded input (real-image decoding is not supported)");
    }
    out.row(static_cast<Index>(i)) = s.input.cast<double>().transpose();
  }
  return out;
}

std::vector<int> Dataset::pids_for(const std::vector<Index>& rows) const {
  std::vector<int> out;
  out.reserve(rows.size());
  for (Index r : rows) out.push_back(samples.at(static_cast<std::size_t>(r)).pid);
  return out;
}

std::vector<int> Dataset::camids_for(const std::vector<Index>& rows) const {
  std::vector<int> out;
  out.reserve(rows.size());
  for (Index r : rows) out.push_back(samples.at(static_cast<std::size_t>(r)).camid);
  return out;
}

Vector Dataset::oracle_text_feature(Index sample, Aspect aspect, Index dim) const {
  const Sample& s = samples.at(static_cast<std::size_t>(sample));
  if (!s.factors) {
    throw ValidationError("dataset: sample '" + s.image_id + "' has no factor ground truth");
  }
  const VectorF* factor = nullptr;
  switch (aspect) {
    case Aspect::kBiometric:
    case Aspect::kBiometricSummary:
      factor = &s.factors->b;
      break;
    case Aspect::kHair:
      factor = &s.factors->h;
      break;
    case Aspect::kClothing:
    case Aspect::kClothingSummary:
      factor = &s.factors->c;
      break;
    case Aspect::kPose:
      factor = &s.factors->p;
      break;
    case Aspect::kBackground:
      throw ValidationError("dataset: no background factor in synthetic data");
  }
  if (factor->size() > dim) {
    throw ValidationError("dataset: factor dim " + std::to_string(factor->size()) +
                          " exceeds requested feature dim " + std::to_string(dim));
  }
  Vector out = Vector::Zero(dim);
  out.head(factor->size()) = factor->cast<double>();
  const double norm = out.norm();
  if (!(norm > 0.0)) throw ValidationError("dataset: zero factor vector");
  return out / norm;
}

namespace {

constexpr Index kNumHairStyles = 8;
constexpr Index kExtraGalleryImages = 2;  // per training outfit
constexpr Index kEvalOutfitImages = 4;    // per eval outfit: 2 query + 2 gallery

std::string image_id_for(Index index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%06lld", static_cast<long long>(index));
  return buf;
}

MatrixF draw_normal_f32(Rng& rng, Index rows, Index cols, double scale = 1.0) {
  MatrixF m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = static_cast<float>(scale * rng.normal());
  }
  return m;
}

Matrix draw_mixing(Rng& rng, Index rows, Index cols) {
  Matrix m(rows, cols);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = scale * rng.normal();
  }
  return m;
}

}  // namespace

Dataset generate_dataset(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);

  Dataset ds;
  ds.synthetic = true;
  ds.synth = cfg;
  ds.mix_b = draw_mixing(rng, cfg.input_dim, cfg.d_b);
  ds.mix_c = draw_mixing(rng, cfg.input_dim, cfg.d_c);
  ds.mix_h = draw_mixing(rng, cfg.input_dim, cfg.d_h);
  ds.mix_p = draw_mixing(rng, cfg.input_dim, cfg.d_p);
  ds.cam_offsets = draw_normal_f32(rng, cfg.num_cameras, cfg.input_dim, cfg.camera_sigma);

  const Index outfits_total = cfg.outfits_per_id + cfg.eval_outfits_per_id;
  const MatrixF id_vectors = draw_normal_f32(rng, cfg.num_ids, cfg.d_b);
  const MatrixF cloth_vectors = draw_normal_f32(rng, cfg.num_ids * outfits_total, cfg.d_c);
  // Hair styles come from a shared pool and vary per image, so they carry
  // neither identity nor outfit information.
  const MatrixF hair_styles = draw_normal_f32(rng, kNumHairStyles, cfg.d_h);

  std::uint64_t noise_key = cfg.seed;
  Index index = 0;
  auto emit = [&](Index pid, Index clothid, Index j) {
    Sample s;
    s.image_id = image_id_for(index);
    s.path = "synth://" + s.image_id;
    s.pid = static_cast<int>(pid);
    s.camid = static_cast<int>((pid + j) % cfg.num_cameras);
    s.clothid = static_cast<int>(clothid);

    LatentFactors f;
    f.b = id_vectors.row(pid);
    f.c = cloth_vectors.row(clothid);
    f.h = hair_styles.row(static_cast<Index>(rng.below(kNumHairStyles)));
    f.p = draw_normal_f32(rng, 1, cfg.d_p).row(0);
    f.noise_seed = Rng::splitmix64(noise_key);

    Vector x = ds.mix_b * f.b.cast<double>() + ds.mix_c * f.c.cast<double>() +
               ds.mix_h * f.h.cast<double>() + ds.mix_p * f.p.cast<double>() +
               ds.cam_offsets.row(s.camid).cast<double>().transpose();
    for (Index i = 0; i < cfg.input_dim; ++i) x[i] += cfg.noise_sigma * rng.normal();
    s.input = x.cast<float>();
    s.factors = std::move(f);
    ds.samples.push_back(std::move(s));
    ++index;
  };

  for (Index pid = 0; pid < cfg.num_ids; ++pid) {
    for (Index outfit = 0; outfit < cfg.outfits_per_id; ++outfit) {
      const Index clothid = pid * outfits_total + outfit;
      for (Index j = 0; j < cfg.images_per_outfit + kExtraGalleryImages; ++j) {
        emit(pid, clothid, j);
      }
    }
    for (Index e = 0; e < cfg.eval_outfits_per_id; ++e) {
      const Index clothid = pid * outfits_total + cfg.outfits_per_id + e;
      for (Index j = 0; j < kEvalOutfitImages; ++j) emit(pid, clothid, j);
    }
  }
  return ds;
}

DatasetSplit split_dataset(const Dataset& dataset) {
  if (!dataset.synthetic) throw ValidationError("split: dataset is not synthetic");
  const SynthConfig& cfg = dataset.synth;
  DatasetSplit split;
  Index index = 0;
  for (Index pid = 0; pid < cfg.num_ids; ++pid) {
    for (Index outfit = 0; outfit < cfg.outfits_per_id; ++outfit) {
      for (Index j = 0; j < cfg.images_per_outfit + kExtraGalleryImages; ++j, ++index) {
        (j < cfg.images_per_outfit ? split.train : split.gallery).push_back(index);
      }
    }
    // Eval-only outfits: clothing the model never trained on, half queries
    // and half cross-camera gallery mates.
    for (Index e = 0; e < cfg.eval_outfits_per_id; ++e) {
      for (Index j = 0; j < kEvalOutfitImages; ++j, ++index) {
        (j < kEvalOutfitImages / 2 ? split.query : split.gallery).push_back(index);
      }
    }
  }
  if (index != dataset.size()) throw ValidationError("split: dataset layout mismatch");
  return split;
}

Dataset subset(const Dataset& dataset, const std::vector<Index>& rows) {
  Dataset out;
  out.synthetic = dataset.synthetic;
  out.synth = dataset.synth;
  out.mix_b = dataset.mix_b;
  out.mix_c = dataset.mix_c;
  out.mix_h = dataset.mix_h;
  out.mix_p = dataset.mix_p;
  out.cam_offsets = dataset.cam_offsets;
  out.samples.reserve(rows.size());
  for (Index r : rows) out.samples.push_back(dataset.samples.at(static_cast<std::size_t>(r)));
  return out;
}

// --- Manifests ---------------------------------------------------------

namespace {

constexpr const char* kManifestHeader = "image_id,path,pid,camid,clothid";

int parse_int(const std::string& field, const char* what, std::size_t line) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(field, &pos);
    if (pos != field.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ValidationError("manifest line " + std::to_string(line) + ": cannot parse " + what +
                          " from '" + field + "'");
  }
}

}  // namespace

void write_manifest(const std::filesystem::path& path,
                    const std::vector<ManifestRecord>& records) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw IoError("manifest: cannot open '" + path.string() + "' for writing");
  out << kManifestHeader << "\n";
  for (const auto& r : records) {
    if (r.image_id.find(',') != std::string::npos || r.path.find(',') != std::string::npos) {
      throw ValidationError("manifest: ids and paths must not contain commas");
    }
    out << r.image_id << ',' << r.path << ',' << r.pid << ',' << r.camid << ',' << r.clothid
        << "\n";
  }
  if (!out) throw IoError("manifest: write failed for '" + path.string() + "'");
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("manifest: cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("manifest: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader) {
    throw ValidationError("manifest line 1: expected header '" + std::string(kManifestHeader) +
                          "', got '" + line + "'");
  }
  std::vector<ManifestRecord> records;
  std::set<std::string> seen_ids;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const std::size_t comma = line.find(',', start);
      if (comma == std::string::npos) {
        fields.push_back(line.substr(start));
        break;
      }
      fields.push_back(line.substr(start, comma - start));
      start = comma + 1;
    }
    if (fields.size() != 5) {
      throw ValidationError("manifest line " + std::to_string(line_no) + ": expected 5 columns, got " +
                            std::to_string(fields.size()));
    }
    ManifestRecord r;
    r.image_id = fields[0];
    r.path = fields[1];
    r.pid = parse_int(fields[2], "pid", line_no);
    r.camid = parse_int(fields[3], "camid", line_no);
    r.clothid = parse_int(fields[4], "clothid", line_no);
    if (r.image_id.empty()) {
      throw ValidationError("manifest line " + std::to_string(line_no) + ": empty image_id");
    }
    if (r.pid < 0) {
      throw ValidationError("manifest line " + std::to_string(line_no) + ": negative pid " +
                            std::to_string(r.pid));
    }
    if (r.camid < 0) {
      throw ValidationError("manifest line " + std::to_string(line_no) + ": negative camid");
    }
    if (!seen_ids.insert(r.image_id).second) {
      throw ValidationError("manifest line " + std::to_string(line_no) + ": duplicate image_id '" +
                            r.image_id + "'");
    }
    records.push_back(std::move(r));
  }
  return records;
}

Dataset load_manifest(const std::filesystem::path& path) {
  const auto records = read_manifest(path);
  Dataset ds;
  bool any_synth = false;
  for (const auto& r : records) {
    if (r.path.rfind("synth://", 0) == 0) any_synth = true;
  }
  std::map<std::string, Index> row_of_id;
  ArrayArchive arrays;
  if (any_synth) {
    const auto container = path.parent_path() / "arrays.bin";
    if (!std::filesystem::exists(container)) {
      throw IoError("manifest: synthetic rows but no arrays container at '" + container.string() +
                    "'");
    }
    arrays = ArrayArchive::load(container);
    const auto ids = arrays.meta("image_ids").get<std::vector<std::string>>();
    for (std::size_t i = 0; i < ids.size(); ++i) row_of_id[ids[i]] = static_cast<Index>(i);
    ds.synthetic = true;
    const auto& sj = arrays.meta("synth_config");
    ds.synth.num_ids = sj.at("num_ids").get<Index>();
    ds.synth.outfits_per_id = sj.at("outfits_per_id").get<Index>();
    ds.synth.eval_outfits_per_id = sj.at("eval_outfits_per_id").get<Index>();
    ds.synth.images_per_outfit = sj.at("images_per_outfit").get<Index>();
    ds.synth.num_cameras = sj.at("num_cameras").get<Index>();
    ds.synth.d_b = sj.at("d_b").get<Index>();
    ds.synth.d_c = sj.at("d_c").get<Index>();
    ds.synth.d_h = sj.at("d_h").get<Index>();
    ds.synth.d_p = sj.at("d_p").get<Index>();
    ds.synth.input_dim = sj.at("input_dim").get<Index>();
    ds.synth.noise_sigma = sj.at("noise_sigma").get<double>();
    ds.synth.camera_sigma = sj.at("camera_sigma").get<double>();
    ds.synth.seed = sj.at("seed").get<std::uint64_t>();
    ds.cam_offsets = arrays.array("cam_offsets");
  }

  for (const auto& r : records) {
    Sample s;
    s.image_id = r.image_id;
    s.path = r.path;
    s.pid = r.pid;
    s.camid = r.camid;
    s.clothid = r.clothid;
    if (r.path.rfind("synth://", 0) == 0) {
      const auto it = row_of_id.find(r.image_id);
      if (it == row_of_id.end()) {
        throw IoError("manifest: image '" + r.image_id + "' not present in arrays container");
      }
      const Index row = it->second;
      s.input = arrays.array("inputs").row(row);
      LatentFactors f;
      f.b = arrays.array("factor_b").row(row);
      f.c = arrays.array("factor_c").row(row);
      f.h = arrays.array("factor_h").row(row);
      f.p = arrays.array("factor_p").row(row);
      s.factors = std::move(f);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  if (!dataset.synthetic) throw ValidationError("save_dataset: dataset is not synthetic");
  std::filesystem::create_directories(dir);

  const Index n = dataset.size();
  const SynthConfig& cfg = dataset.synth;
  MatrixF inputs(n, cfg.input_dim);
  MatrixF fb(n, cfg.d_b), fc(n, cfg.d_c), fh(n, cfg.d_h), fp(n, cfg.d_p);
  std::vector<std::string> ids;
  ids.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const Sample& s = dataset.samples[static_cast<std::size_t>(i)];
    inputs.row(i) = s.input.transpose();
    fb.row(i) = s.factors->b.transpose();
    fc.row(i) = s.factors->c.transpose();
    fh.row(i) = s.factors->h.transpose();
    fp.row(i) = s.factors->p.transpose();
    ids.push_back(s.image_id);
  }

  ArrayArchive arrays;
  arrays.put("inputs", inputs);
  arrays.put("factor_b", fb);
  arrays.put("factor_c", fc);
  arrays.put("factor_h", fh);
  arrays.put("factor_p", fp);
  arrays.put("cam_offsets", dataset.cam_offsets);
  arrays.set_meta("kind", "dataset");
  arrays.set_meta("image_ids", ids);
  nlohmann::json sj;
  sj["num_ids"] = cfg.num_ids;
  sj["outfits_per_id"] = cfg.outfits_per_id;
  sj["eval_outfits_per_id"] = cfg.eval_outfits_per_id;
  sj["images_per_outfit"] = cfg.images_per_outfit;
  sj["num_cameras"] = cfg.num_cameras;
  sj["d_b"] = cfg.d_b;
  sj["d_c"] = cfg.d_c;
  sj["d_h"] = cfg.d_h;
  sj["d_p"] = cfg.d_p;
  sj["input_dim"] = cfg.input_dim;
  sj["noise_sigma"] = cfg.noise_sigma;
  sj["camera_sigma"] = cfg.camera_sigma;
  sj["seed"] = cfg.seed;
  arrays.set_meta("synth_config", sj);
  arrays.save(dir / "arrays.bin");

  const DatasetSplit split = split_dataset(dataset);
  auto records_for = [&](const std::vector<Index>& rows) {
    std::vector<ManifestRecord> records;
    records.reserve(rows.size());
    for (Index r : rows) {
      const Sample& s = dataset.samples[static_cast<std::size_t>(r)];
      records.push_back({s.image_id, s.path, s.pid, s.camid, s.clothid});
    }
    return records;
  };
  std::vector<Index> all(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
  write_manifest(dir / "all.csv", records_for(all));
  write_manifest(dir / "train.csv", records_for(split.train));
  write_manifest(dir / "query.csv", records_for(split.query));
  write_manifest(dir / "gallery.csv", records_for(split.gallery));
}

// --- PK sampling -------------------------------------------------------

PkSampler::PkSampler(std::vector<int> labels, Index p, Index k, std::uint64_t seed)
    : p_(p), k_(k), seed_(seed) {
  if (p < 2) throw ValidationError("pk_sample: P must be >= 2 so batches contain negatives");
  if (k < 2) throw ValidationError("pk_sample: K must be >= 2 so batches contain positives");
  std::map<int, std::vector<Index>> by_label;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int label = labels[i];
    if (label < 0) throw ValidationError("pk_sample: negative label");
    by_label[label].push_back(static_cast<Index>(i));
  }
  if (static_cast<Index>(by_label.size()) < p) {
    throw ValidationError("pk_sample: " + std::to_string(by_label.size()) +
                          " eligible ids but P=" + std::to_string(p));
  }
  for (auto& [label, indices] : by_label) {
    if (static_cast<Index>(indices.size()) < k) uses_replacement_ = true;
    groups_.push_back({label, std::move(indices)});
  }
}

std::vector<std::vector<Index>> PkSampler::epoch(Index epoch_index) const {
  Rng rng(seed_, 1000 + static_cast<std::uint64_t>(epoch_index));

  // Chunk every id into K-sized pieces, padding the remainder by
  // resampling from the same id.
  std::vector<std::vector<std::vector<Index>>> chunks(groups_.size());
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    std::vector<Index> pool = groups_[g].indices;
    rng.shuffle(pool);
    const std::size_t n = pool.size();
    while (pool.size() % static_cast<std::size_t>(k_) != 0) {
      pool.push_back(groups_[g].indices[static_cast<std::size_t>(rng.below(n))]);
    }
    for (std::size_t start = 0; start < pool.size(); start += static_cast<std::size_t>(k_)) {
      chunks[g].emplace_back(pool.begin() + static_cast<std::ptrdiff_t>(start),
                             pool.begin() + static_cast<std::ptrdiff_t>(start + k_));
    }
  }

  // Rounds over a shuffled permutation of ids that still have chunks; each
  // round serves every active id at most once, so every id appears within
  // the first round of the epoch.
  std::vector<std::vector<Index>> batches;
  for (;;) {
    std::vector<std::size_t> active;
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      if (!chunks[g].empty()) active.push_back(g);
    }
    if (static_cast<Index>(active.size()) < p_) break;
    rng.shuffle(active);
    const std::size_t full_groups = (active.size() / static_cast<std::size_t>(p_)) *
                                    static_cast<std::size_t>(p_);
    for (std::size_t i = 0; i < full_groups; i += static_cast<std::size_t>(p_)) {
      std::vector<Index> batch;
      batch.reserve(static_cast<std::size_t>(p_ * k_));
      for (Index j = 0; j < p_; ++j) {
        auto& queue = chunks[active[i + static_cast<std::size_t>(j)]];
        batch.insert(batch.end(), queue.back().begin(), queue.back().end());
        queue.pop_back();
      }
      batches.push_back(std::move(batch));
    }
  }
  return batches;
}

std::vector<Index> pk_sample(const std::vector<int>& labels, Index p, Index k,
                             std::uint64_t seed) {
  const PkSampler sampler(labels, p, k, seed);
  const auto batches = sampler.epoch(0);
  if (batches.empty()) throw ValidationError("pk_sample: no batches available");
  return batches.front();
}

}  // namespace differ

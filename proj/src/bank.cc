#include "pfnl/bank.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "pfnl/binary_io.h"
#include "pfnl/error.h"
#include "pfnl/rng.h"

namespace pfnl {

namespace {

constexpr char kBankMagic[] = "EBNK";
constexpr std::uint32_t kBankVersion = 1;

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Shuffles the first `count` positions of `items` (partial Fisher-Yates).
template <class T>
void partial_shuffle(std::vector<T>& items, std::size_t count, Rng& rng) {
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + rng.below(items.size() - i);
    std::swap(items[i], items[j]);
  }
}

}  // namespace

std::vector<std::vector<std::size_t>> EmbeddingBank::records_by_class() const {
  std::vector<std::vector<std::size_t>> groups(classes.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    groups.at(records[i].label).push_back(i);
  }
  return groups;
}

void EmbeddingBank::validate() const {
  if (dim == 0) throw DataError("bank dimension must be positive");
  for (std::size_t i = 0; i < records.size(); ++i) {
    const BankRecord& r = records[i];
    if (r.label >= classes.size()) {
      throw DataError("record " + std::to_string(i) + " has class index " +
                      std::to_string(r.label) + " >= class count " +
                      std::to_string(classes.size()));
    }
    if (r.features.size() != dim) {
      throw DataError("record " + std::to_string(i) + " has dimension " +
                      std::to_string(r.features.size()) + ", bank dimension is " +
                      std::to_string(dim));
    }
    if (!all_finite(r.features)) {
      throw DataError("record " + std::to_string(i) + " has a non-finite entry");
    }
  }
  if (modality == Modality::kTextual) {
    std::vector<int> seen(classes.size(), 0);
    for (const BankRecord& r : records) ++seen[r.label];
    for (std::size_t c = 0; c < seen.size(); ++c) {
      if (seen[c] != 1) {
        throw DataError("textual bank must have exactly one record per class; class " +
                        classes[c] + " has " + std::to_string(seen[c]));
      }
    }
  }
}

std::vector<std::uint8_t> encode_bank(const EmbeddingBank& bank) {
  bank.validate();
  ByteWriter w;
  w.bytes(std::string_view(kBankMagic, 4));
  w.u32(kBankVersion);
  w.u8(static_cast<std::uint8_t>(bank.modality));
  w.u32(bank.dim);
  w.u32(static_cast<std::uint32_t>(bank.classes.size()));
  w.u32(static_cast<std::uint32_t>(bank.records.size()));
  for (const std::string& name : bank.classes) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw DataError("class name too long: " + name.substr(0, 32) + "...");
    }
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
  }
  for (const BankRecord& r : bank.records) {
    w.u32(r.label);
    for (double v : r.features) w.f32(static_cast<float>(v));
  }
  w.finish_with_crc();
  return w.buffer();
}

EmbeddingBank decode_bank(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  if (r.bytes(std::min<std::size_t>(4, r.remaining()), "magic") != kBankMagic) {
    throw FormatError("bad magic, expected EBNK", 0);
  }
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kBankVersion) {
    throw FormatError("unsupported EBNK version " + std::to_string(version), version_at);
  }
  EmbeddingBank bank;
  bank.source = "file";
  const std::size_t modality_at = r.offset();
  const std::uint8_t modality = r.u8("modality");
  if (modality > 1) {
    throw FormatError("unknown modality " + std::to_string(modality), modality_at);
  }
  bank.modality = static_cast<Modality>(modality);
  bank.dim = r.u32("dim");
  const std::uint32_t class_count = r.u32("class count");
  const std::uint32_t record_count = r.u32("record count");
  if (bank.dim == 0) throw FormatError("zero dimension", modality_at + 1);

  bank.classes.reserve(class_count);
  for (std::uint32_t c = 0; c < class_count; ++c) {
    const std::uint16_t len = r.u16("class name length");
    bank.classes.push_back(r.bytes(len, "class name"));
  }
  // Each record needs 4 + 4*dim bytes; reject impossible counts before
  // allocating.
  const std::uint64_t record_bytes = 4 + 4ull * bank.dim;
  if (record_count * record_bytes > r.remaining()) {
    throw FormatError("truncated file: " + std::to_string(record_count) +
                          " records do not fit",
                      r.offset());
  }
  bank.records.reserve(record_count);
  for (std::uint32_t i = 0; i < record_count; ++i) {
    const std::size_t at = r.offset();
    BankRecord rec;
    rec.label = r.u32("record class index");
    if (rec.label >= class_count) {
      throw FormatError("record " + std::to_string(i) + " class index " +
                            std::to_string(rec.label) + " out of range",
                        at);
    }
    rec.features.resize(bank.dim);
    for (double& v : rec.features) v = r.f32("record values");
    if (!all_finite(rec.features)) {
      throw DataError("record " + std::to_string(i) + " has a non-finite entry");
    }
    bank.records.push_back(std::move(rec));
  }
  r.verify_crc();
  bank.validate();
  return bank;
}

void save_bank(const EmbeddingBank& bank, const std::string& path) {
  write_file_bytes(path, encode_bank(bank));
}

EmbeddingBank parse_bank_csv(const std::string& text, Modality modality) {
  EmbeddingBank bank;
  bank.modality = modality;
  bank.source = "csv";
  std::map<std::string, ClassId> index;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::size_t offset = 0;
  while (std::getline(in, line)) {
    const std::size_t line_at = offset;
    offset += line.size() + 1;
    ++line_no;
    if (trim(line).empty()) continue;
    std::vector<std::string> fields;
    std::stringstream row(line);
    std::string field;
    while (std::getline(row, field, ',')) fields.push_back(trim(field));
    if (fields.size() < 2) {
      throw FormatError("CSV line " + std::to_string(line_no) + " has no values", line_at);
    }
    if (line_no == 1 && fields[0] == "class_name") continue;  // header
    BankRecord rec;
    for (std::size_t i = 1; i < fields.size(); ++i) {
      const std::string& f = fields[i];
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (ec != std::errc() || ptr != f.data() + f.size()) {
        throw FormatError("CSV line " + std::to_string(line_no) + ": bad number '" + f +
                              "'",
                          line_at);
      }
      rec.features.push_back(static_cast<double>(static_cast<float>(v)));
    }
    if (bank.dim == 0) bank.dim = static_cast<std::uint32_t>(rec.features.size());
    if (rec.features.size() != bank.dim) {
      throw FormatError("CSV line " + std::to_string(line_no) + " has " +
                            std::to_string(rec.features.size()) + " values, expected " +
                            std::to_string(bank.dim),
                        line_at);
    }
    auto [it, inserted] = index.emplace(fields[0], static_cast<ClassId>(bank.classes.size()));
    if (inserted) bank.classes.push_back(fields[0]);
    rec.label = it->second;
    bank.records.push_back(std::move(rec));
  }
  bank.validate();
  return bank;
}

EmbeddingBank load_bank(const std::string& path, Modality csv_modality) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  if (ends_with(path, ".csv")) {
    return parse_bank_csv(std::string(bytes.begin(), bytes.end()), csv_modality);
  }
  return decode_bank(bytes);
}

BankPair generate_synthetic(const SyntheticOptions& o) {
  if (o.n_classes < 2) throw ConfigError("need >= 2 classes");
  if (o.per_class < 1) throw ConfigError("need >= 1 record per class");
  if (o.dim < 2) throw ConfigError("need dimension >= 2");
  if (!(o.separation >= 0.0)) throw ConfigError("separation must be >= 0");
  if (!(o.text_noise >= 0.0)) throw ConfigError("text noise must be >= 0");
  if (!(o.outlier_fraction >= 0.0 && o.outlier_fraction <= 1.0)) {
    throw ConfigError("outlier fraction must lie in [0, 1]");
  }
  if (!(o.outlier_scale > 0.0)) throw ConfigError("outlier scale must be positive");

  Rng rng(o.seed);
  const auto d = static_cast<std::size_t>(o.dim);
  auto unit = [&](Vector v) {
    Vector u = normalized(v);
    for (double& x : u) x = static_cast<double>(static_cast<float>(x));
    return u;
  };

  BankPair out;
  out.visual.modality = Modality::kVisual;
  out.textual.modality = Modality::kTextual;
  out.visual.dim = out.textual.dim = static_cast<std::uint32_t>(d);
  for (int c = 0; c < o.n_classes; ++c) {
    char name[32];
    std::snprintf(name, sizeof(name), "class_%02d", c);
    out.visual.classes.emplace_back(name);
  }
  out.textual.classes = out.visual.classes;

  std::vector<Vector> means;
  for (int c = 0; c < o.n_classes; ++c) {
    Vector g(d);
    for (double& x : g) x = rng.normal();
    means.push_back(normalized(g));
  }
  for (int c = 0; c < o.n_classes; ++c) {
    Vector t = means[c];
    for (double& x : t) x += o.text_noise * rng.normal();
    out.textual.records.push_back({static_cast<ClassId>(c), unit(t)});
  }
  const bool noiseless = std::isinf(o.separation);
  for (int c = 0; c < o.n_classes; ++c) {
    for (int i = 0; i < o.per_class; ++i) {
      Vector x(d);
      const bool atypical = o.outlier_fraction > 0.0 && rng.uniform() < o.outlier_fraction;
      const double spread = atypical ? o.outlier_scale : 1.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double noise = spread * rng.normal();
        if (noiseless) {
          x[j] = means[c][j];
        } else if (o.separation == 0.0) {
          x[j] = noise;
        } else {
          x[j] = means[c][j] + noise / o.separation;
        }
      }
      out.visual.records.push_back({static_cast<ClassId>(c), unit(x)});
    }
  }
  out.visual.validate();
  out.textual.validate();
  return out;
}

ClassGallery ClassGallery::from_textual(const EmbeddingBank& textual) {
  if (textual.modality != Modality::kTextual) {
    throw DataError("class gallery requires a textual bank");
  }
  textual.validate();
  ClassGallery g;
  g.prototypes.resize(textual.class_count());
  for (const BankRecord& r : textual.records) g.prototypes[r.label] = normalized(r.features);
  return g;
}

std::size_t Episode::slot_of(ClassId label) const {
  const auto it = std::find(classes.begin(), classes.end(), label);
  if (it == classes.end()) {
    throw DataError("label " + std::to_string(label) + " is not an episode class");
  }
  return static_cast<std::size_t>(it - classes.begin());
}

Episode sample_episode(const EmbeddingBank& visual, const EmbeddingBank& textual,
                       int way, int shot, int query_count, std::uint64_t seed) {
  if (way < 1 || shot < 1 || query_count < 0) {
    throw ConfigError("episode needs way >= 1, shot >= 1, query >= 0");
  }
  if (visual.classes != textual.classes) {
    throw DataError("visual and textual banks have different class tables");
  }
  if (static_cast<std::size_t>(way) > visual.class_count()) {
    throw SamplingError("bank has " + std::to_string(visual.class_count()) +
                        " classes, episode needs " + std::to_string(way));
  }
  Rng rng(seed);
  const auto groups = visual.records_by_class();
  std::vector<ClassId> all(visual.class_count());
  std::iota(all.begin(), all.end(), ClassId{0});
  partial_shuffle(all, static_cast<std::size_t>(way), rng);

  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.query_count = query_count;
  ep.classes.assign(all.begin(), all.begin() + way);
  const auto needed = static_cast<std::size_t>(shot + query_count);
  for (ClassId c : ep.classes) {
    std::vector<std::size_t> pool = groups[c];
    if (pool.size() < needed) {
      throw SamplingError("class " + visual.classes[c] + " has " +
                          std::to_string(pool.size()) + " records, episode needs " +
                          std::to_string(needed));
    }
    partial_shuffle(pool, needed, rng);
    for (std::size_t i = 0; i < needed; ++i) {
      LabeledVector lv{visual.records[pool[i]].features, c, c, pool[i]};
      (i < static_cast<std::size_t>(shot) ? ep.support : ep.query).push_back(std::move(lv));
    }
  }
  ep.noise_mask.assign(ep.support.size(), false);
  return ep;
}

std::size_t noisy_count(double rate, std::size_t support_size) {
  return static_cast<std::size_t>(std::floor(rate * static_cast<double>(support_size) + 0.5));
}

Episode inject_label_noise(const Episode& episode, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("noise rate must lie in [0, 1]");
  Episode out = episode;
  const std::size_t count = noisy_count(rate, out.support.size());
  if (count == 0) return out;
  if (out.classes.size() < 2) throw ConfigError("label noise needs at least 2 classes");
  Rng rng(seed);
  std::vector<std::size_t> order(out.support.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  partial_shuffle(order, count, rng);
  for (std::size_t i = 0; i < count; ++i) {
    LabeledVector& s = out.support[order[i]];
    const std::size_t own = out.slot_of(s.clean_label);
    std::size_t pick = rng.below(out.classes.size() - 1);
    if (pick >= own) ++pick;
    s.label = out.classes[pick];
    out.noise_mask[order[i]] = true;
  }
  return out;
}

}  // namespace pfnl

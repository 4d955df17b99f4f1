#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pfnl/numerics.h"

namespace pfnl {

using ClassId = std::uint32_t;

enum class Modality : std::uint8_t { kVisual = 0, kTextual = 1 };

struct BankRecord {
  ClassId label = 0;
  Vector features;

  bool operator==(const BankRecord&) const = default;
};

// Labeled feature vectors of one modality plus the class vocabulary. Values
// are held as doubles but are always representable as float, so a bank
// round-trips through the on-disk f32 encoding unchanged.
struct EmbeddingBank {
  Modality modality = Modality::kVisual;
  std::uint32_t dim = 0;
  std::vector<std::string> classes;
  std::vector<BankRecord> records;
  std::string source = "synthetic";

  std::size_t class_count() const { return classes.size(); }
  // Record indices grouped by class.
  std::vector<std::vector<std::size_t>> records_by_class() const;
  // Throws DataError when an invariant is broken.
  void validate() const;

  bool operator==(const EmbeddingBank&) const = default;
};

// EBNK binary encoding.
std::vector<std::uint8_t> encode_bank(const EmbeddingBank& bank);
// Throws FormatError(offset) on malformed bytes and DataError on non-finite
// entries or bad class indices.
EmbeddingBank decode_bank(const std::vector<std::uint8_t>& bytes);

void save_bank(const EmbeddingBank& bank, const std::string& path);
// Reads EBNK, or CSV rows `class_name,v0,v1,...` when the path ends in .csv.
// CSV files carry no modality, so `csv_modality` supplies it.
EmbeddingBank load_bank(const std::string& path,
                        Modality csv_modality = Modality::kVisual);
EmbeddingBank parse_bank_csv(const std::string& text, Modality modality);

struct SyntheticOptions {
  int n_classes = 5;
  int per_class = 20;
  int dim = 16;
  double separation = 4.0;
  std::uint64_t seed = 0;
  // Stddev of the per-coordinate perturbation applied to class means to form
  // the text embedding.
  double text_noise = 0.35;
  // Fraction of visual records that are atypical: their noise is scaled by
  // outlier_scale. Zero leaves the generator stream unchanged.
  double outlier_fraction = 0.0;
  double outlier_scale = 3.0;
};

struct BankPair {
  EmbeddingBank visual;
  EmbeddingBank textual;
};

// Class means on the unit sphere; visual records are mean + N(0, 1/sep^2)
// noise, renormalized; one text record per class, the mean perturbed and
// renormalized. separation == +inf gives noiseless visual records.
BankPair generate_synthetic(const SyntheticOptions& options);

// L2-normalized text embeddings for the whole vocabulary, by class index.
struct ClassGallery {
  std::vector<Vector> prototypes;

  static ClassGallery from_textual(const EmbeddingBank& textual);
  std::size_t size() const { return prototypes.size(); }
};

struct LabeledVector {
  Vector features;
  ClassId label = 0;        // observed label (possibly flipped)
  ClassId clean_label = 0;  // label before noise injection
  std::size_t record = 0;   // index into the visual bank

  bool operator==(const LabeledVector&) const = default;
};

// One N-way K-shot task. Labels are bank class ids; `classes[slot]` maps an
// episode slot to its class.
struct Episode {
  int way = 0;
  int shot = 0;
  int query_count = 0;
  std::vector<ClassId> classes;
  std::vector<LabeledVector> support;
  std::vector<LabeledVector> query;
  std::vector<bool> noise_mask;

  // Position of `label` in `classes`; throws if absent.
  std::size_t slot_of(ClassId label) const;

  bool operator==(const Episode&) const = default;
};

// Samples N classes without replacement, then K support and Q query records
// per class without replacement. Pure in `seed`.
Episode sample_episode(const EmbeddingBank& visual, const EmbeddingBank& textual,
                       int way, int shot, int query_count, std::uint64_t seed);

// Flips round_half_up(rate * N * K) support labels, chosen uniformly, to a
// uniformly drawn different episode class.
Episode inject_label_noise(const Episode& episode, double rate, std::uint64_t seed);

// Count of flipped support entries for a given rate and support size.
std::size_t noisy_count(double rate, std::size_t support_size);

}  // namespace pfnl

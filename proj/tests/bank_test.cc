#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <set>

#include <unistd.h>

#include "pfnl/bank.h"
#include "pfnl/binary_io.h"
#include "pfnl/error.h"
#include "test_support.h"

namespace pfnl {
namespace {

using testing::synthetic;

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() /
         ("pfnl_bank_test_" + std::to_string(::getpid()) + "_" + name);
}

void reseal(std::vector<std::uint8_t>& bytes) {
  const std::uint32_t crc = crc32_of(bytes.data(), bytes.size() - 4);
  for (int i = 0; i < 4; ++i) bytes[bytes.size() - 4 + i] = static_cast<std::uint8_t>(crc >> (8 * i));
}

EmbeddingBank small_bank() {
  EmbeddingBank b;
  b.modality = Modality::kVisual;
  b.dim = 2;
  b.classes = {"cat", "dog"};
  b.records = {{0, {0.5, -1.0}}, {1, {2.0, 0.25}}, {1, {-3.0, 4.0}}};
  return b;
}

TEST(BankFormat, HeaderLayout) {
  const auto bytes = encode_bank(small_bank());
  ASSERT_GE(bytes.size(), 21u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "EBNK");
  ByteReader r(bytes);
  r.bytes(4, "magic");
  EXPECT_EQ(r.u32("version"), 1u);
  EXPECT_EQ(r.u8("modality"), 0u);
  EXPECT_EQ(r.u32("dim"), 2u);
  EXPECT_EQ(r.u32("classes"), 2u);
  EXPECT_EQ(r.u32("records"), 3u);
  // 21 header bytes, two names (2 + 3 bytes each), 3 records of 4 + 2*4 bytes, CRC.
  EXPECT_EQ(bytes.size(), 21u + 2 * 5 + 3 * 12 + 4);
}

TEST(BankFormat, RoundTripIsByteIdentical) {
  const EmbeddingBank b = small_bank();
  const auto bytes = encode_bank(b);
  const EmbeddingBank back = decode_bank(bytes);
  EXPECT_EQ(back.records, b.records);
  EXPECT_EQ(back.classes, b.classes);
  EXPECT_EQ(encode_bank(back), bytes);

  const auto path = temp_path("rt.ebnk");
  save_bank(b, path.string());
  EXPECT_EQ(read_file_bytes(path.string()), bytes);
  EXPECT_EQ(encode_bank(load_bank(path.string())), bytes);
  std::filesystem::remove(path);
}

TEST(BankFormat, SyntheticFileReloads) {
  SyntheticOptions o = synthetic(3, 2, 4, 4.0, 1);
  const BankPair pair = generate_synthetic(o);
  const auto path = temp_path("syn.ebnk");
  save_bank(pair.visual, path.string());
  const EmbeddingBank back = load_bank(path.string());
  EXPECT_EQ(back.records.size(), 6u);
  EXPECT_EQ(back.class_count(), 3u);
  EXPECT_EQ(back.modality, pair.visual.modality);
  EXPECT_EQ(back.dim, pair.visual.dim);
  EXPECT_EQ(back.classes, pair.visual.classes);
  EXPECT_EQ(back.records, pair.visual.records);
  std::filesystem::remove(path);
}

TEST(BankFormat, BadMagicIsAFormatError) {
  auto bytes = encode_bank(small_bank());
  bytes[0] = bytes[1] = bytes[2] = bytes[3] = 'X';
  reseal(bytes);
  try {
    decode_bank(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(BankFormat, BadVersionReportsItsOffset) {
  auto bytes = encode_bank(small_bank());
  bytes[4] = 9;
  reseal(bytes);
  try {
    decode_bank(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
}

TEST(BankFormat, TruncationIsAFormatError) {
  const auto bytes = encode_bank(small_bank());
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, bytes.size() - 9, bytes.size() - 1}) {
    std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + cut);
    EXPECT_THROW(decode_bank(part), FormatError) << cut;
  }
}

TEST(BankFormat, CorruptedPayloadFailsTheCrc) {
  auto bytes = encode_bank(small_bank());
  bytes[30] ^= 0x40;
  try {
    decode_bank(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("CRC mismatch"), std::string::npos);
  }
}

TEST(BankFormat, NonFiniteEntryNamesTheRecord) {
  auto bytes = encode_bank(small_bank());
  // Record 2 starts after 21 header + 10 name bytes + 2 * 12 record bytes; its
  // first value follows the 4-byte class index.
  const std::size_t at = 21 + 10 + 24 + 4;
  const auto nan_bits = std::bit_cast<std::uint32_t>(std::numeric_limits<float>::quiet_NaN());
  for (int i = 0; i < 4; ++i) bytes[at + i] = static_cast<std::uint8_t>(nan_bits >> (8 * i));
  reseal(bytes);
  try {
    decode_bank(bytes);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("record 2"), std::string::npos) << e.what();
  }
}

TEST(BankFormat, ClassIndexOutOfRangeIsRejected) {
  auto bytes = encode_bank(small_bank());
  bytes[21 + 10] = 7;  // first record's class index
  reseal(bytes);
  EXPECT_THROW(decode_bank(bytes), FormatError);
}

TEST(BankCsv, ParsesRowsWithOptionalHeader) {
  const EmbeddingBank b =
      parse_bank_csv("class_name,v0,v1\ncat,1,2\ndog,3,4\ncat,5,6\n", Modality::kVisual);
  EXPECT_EQ(b.dim, 2u);
  EXPECT_EQ(b.classes, (std::vector<std::string>{"cat", "dog"}));
  ASSERT_EQ(b.records.size(), 3u);
  EXPECT_EQ(b.records[2].label, 0u);
  EXPECT_EQ(b.records[1].features, (Vector{3, 4}));
  EXPECT_EQ(b.source, "csv");
}

TEST(BankCsv, RaggedRowIsAFormatError) {
  EXPECT_THROW(parse_bank_csv("a,1,2\nb,1\n", Modality::kVisual), FormatError);
  EXPECT_THROW(parse_bank_csv("a,1,x\n", Modality::kVisual), FormatError);
}

TEST(BankCsv, TextualBankNeedsOneRowPerClass) {
  EXPECT_THROW(parse_bank_csv("a,1,2\na,2,3\n", Modality::kTextual), DataError);
  EXPECT_NO_THROW(parse_bank_csv("a,1,2\nb,2,3\n", Modality::kTextual));
}

TEST(BankCsv, LoadBankPicksCsvByExtension) {
  const auto path = temp_path("fixture.csv");
  const std::string text = "x,1,0\ny,0,1\n";
  write_file_bytes(path.string(), std::vector<std::uint8_t>(text.begin(), text.end()));
  const EmbeddingBank b = load_bank(path.string(), Modality::kTextual);
  EXPECT_EQ(b.modality, Modality::kTextual);
  EXPECT_EQ(b.records.size(), 2u);
  std::filesystem::remove(path);
}

TEST(BankIo, MissingFileIsAnIoError) {
  EXPECT_THROW(load_bank("/nonexistent/dir/none.ebnk"), IoError);
}

TEST(Synthetic, InfiniteSeparationGivesClassMeans) {
  SyntheticOptions o = synthetic(4, 5, 8, std::numeric_limits<double>::infinity(), 3);
  const BankPair p = generate_synthetic(o);
  const auto groups = p.visual.records_by_class();
  for (const auto& g : groups) {
    for (std::size_t i : g) EXPECT_EQ(p.visual.records[i].features, p.visual.records[g[0]].features);
  }
  EXPECT_NE(p.visual.records[groups[0][0]].features, p.visual.records[groups[1][0]].features);
}

TEST(Synthetic, DeterministicInSeed) {
  const SyntheticOptions o = synthetic(5, 10, 16, 2.0, 9);
  EXPECT_EQ(generate_synthetic(o).visual, generate_synthetic(o).visual);
  EXPECT_EQ(generate_synthetic(o).textual, generate_synthetic(o).textual);
  SyntheticOptions other = o;
  other.seed = 10;
  EXPECT_NE(generate_synthetic(o).visual, generate_synthetic(other).visual);
}

TEST(Synthetic, WellSeparatedBankIsNearestMeanClassifiable) {
  const BankPair p = generate_synthetic(synthetic(5, 20, 16, 4.0, 7));
  const auto groups = p.visual.records_by_class();
  std::vector<Vector> means;
  for (const auto& g : groups) {
    Vector m(16, 0.0);
    for (std::size_t i : g) {
      for (std::size_t j = 0; j < 16; ++j) m[j] += p.visual.records[i].features[j];
    }
    means.push_back(m);
  }
  int hits = 0;
  for (const BankRecord& r : p.visual.records) {
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t c = 0; c < means.size(); ++c) {
      const double scale = 1.0 / static_cast<double>(groups[c].size());
      double d2 = 0.0;
      for (std::size_t j = 0; j < 16; ++j) {
        const double diff = r.features[j] - means[c][j] * scale;
        d2 += diff * diff;
      }
      if (d2 < best_d) {
        best_d = d2;
        best = c;
      }
    }
    hits += best == r.label ? 1 : 0;
  }
  EXPECT_GT(static_cast<double>(hits) / 100.0, 0.95);
}

TEST(Synthetic, ValuesAreFloatRepresentableUnitVectors) {
  const BankPair p = generate_synthetic(synthetic(3, 4, 6, 1.0, 2));
  for (const BankRecord& r : p.visual.records) {
    EXPECT_NEAR(norm(r.features), 1.0, 1e-6);
    for (double x : r.features) EXPECT_EQ(x, static_cast<double>(static_cast<float>(x)));
  }
  EXPECT_EQ(p.textual.records.size(), 3u);
}

TEST(Synthetic, InvalidSizesAreRejected) {
  EXPECT_THROW(generate_synthetic(synthetic(1, 4, 6, 1.0, 2)), ConfigError);
  EXPECT_THROW(generate_synthetic(synthetic(3, 0, 6, 1.0, 2)), ConfigError);
  EXPECT_THROW(generate_synthetic(synthetic(3, 4, 1, 1.0, 2)), ConfigError);
  EXPECT_THROW(generate_synthetic(synthetic(3, 4, 6, -1.0, 2)), ConfigError);
}

TEST(Synthetic, ZeroOutlierFractionLeavesTheStreamUnchanged) {
  SyntheticOptions o = synthetic(4, 10, 8, 2.0, 5);
  SyntheticOptions with = o;
  with.outlier_scale = 10.0;
  EXPECT_EQ(generate_synthetic(o).visual, generate_synthetic(with).visual);
}

TEST(Synthetic, OutliersSitFartherFromTheirClassMean) {
  SyntheticOptions clean = synthetic(4, 200, 16, 2.0, 5);
  SyntheticOptions noisy = clean;
  noisy.outlier_fraction = 0.5;
  noisy.outlier_scale = 4.0;
  auto spread = [](const BankPair& p) {
    double total = 0.0;
    for (const BankRecord& r : p.visual.records) {
      total += cosine(r.features, p.textual.records[r.label].features);
    }
    return total / static_cast<double>(p.visual.records.size());
  };
  EXPECT_LT(spread(generate_synthetic(noisy)), spread(generate_synthetic(clean)));
}

TEST(Episode, FullDrawPartitionsTheBank) {
  const BankPair p = generate_synthetic(synthetic(3, 5, 4, 2.0, 1));
  const Episode ep = sample_episode(p.visual, p.textual, 3, 2, 3, 11);
  std::set<std::size_t> seen;
  for (const auto& s : ep.support) seen.insert(s.record);
  for (const auto& q : ep.query) seen.insert(q.record);
  EXPECT_EQ(seen.size(), 15u);
  std::set<ClassId> classes(ep.classes.begin(), ep.classes.end());
  EXPECT_EQ(classes.size(), 3u);
}

TEST(Episode, DeterministicInSeed) {
  const BankPair p = generate_synthetic(synthetic(6, 10, 4, 2.0, 1));
  EXPECT_EQ(sample_episode(p.visual, p.textual, 3, 2, 2, 5),
            sample_episode(p.visual, p.textual, 3, 2, 2, 5));
  EXPECT_NE(sample_episode(p.visual, p.textual, 3, 2, 2, 5),
            sample_episode(p.visual, p.textual, 3, 2, 2, 6));
}

TEST(Episode, ClassFrequencyIsUniform) {
  const BankPair p = generate_synthetic(synthetic(3, 4, 4, 2.0, 1));
  std::vector<int> count(3, 0);
  for (std::uint64_t s = 0; s < 1000; ++s) {
    for (ClassId c : sample_episode(p.visual, p.textual, 2, 1, 1, s).classes) ++count[c];
  }
  for (int c : count) EXPECT_NEAR(c / 1000.0, 2.0 / 3.0, 0.05);
}

TEST(Episode, StructureAndNoDuplicates) {
  const BankPair p = generate_synthetic(synthetic(8, 12, 4, 2.0, 4));
  for (std::uint64_t s = 0; s < 50; ++s) {
    const Episode ep = sample_episode(p.visual, p.textual, 5, 3, 4, s);
    ASSERT_EQ(ep.support.size(), 15u);
    ASSERT_EQ(ep.query.size(), 20u);
    std::set<std::size_t> records;
    for (const auto& x : ep.support) records.insert(x.record);
    for (const auto& x : ep.query) records.insert(x.record);
    EXPECT_EQ(records.size(), 35u);
    for (std::size_t slot = 0; slot < 5; ++slot) {
      int k = 0;
      for (const auto& x : ep.support) k += x.label == ep.classes[slot] ? 1 : 0;
      EXPECT_EQ(k, 3);
    }
    for (const auto& x : ep.support) {
      EXPECT_EQ(x.features, p.visual.records[x.record].features);
      EXPECT_EQ(p.visual.records[x.record].label, x.label);
    }
  }
}

TEST(Episode, InsufficientRecordsNameTheClass) {
  const BankPair p = generate_synthetic(synthetic(3, 3, 4, 2.0, 1));
  try {
    sample_episode(p.visual, p.textual, 2, 2, 2, 1);
    FAIL() << "expected SamplingError";
  } catch (const SamplingError& e) {
    EXPECT_NE(std::string(e.what()).find("class_0"), std::string::npos);
  }
  EXPECT_THROW(sample_episode(p.visual, p.textual, 4, 1, 1, 1), SamplingError);
}

TEST(LabelNoise, ZeroRateIsIdentity) {
  const BankPair p = generate_synthetic(synthetic(5, 10, 4, 2.0, 1));
  const Episode ep = sample_episode(p.visual, p.textual, 4, 4, 2, 3);
  const Episode noisy = inject_label_noise(ep, 0.0, 1);
  EXPECT_EQ(noisy, ep);
  for (bool b : noisy.noise_mask) EXPECT_FALSE(b);
}

TEST(LabelNoise, FullRateFlipsEveryLabel) {
  const BankPair p = generate_synthetic(synthetic(5, 10, 4, 2.0, 1));
  const Episode ep = sample_episode(p.visual, p.textual, 2, 4, 2, 3);
  const Episode noisy = inject_label_noise(ep, 1.0, 7);
  for (std::size_t i = 0; i < noisy.support.size(); ++i) {
    EXPECT_NE(noisy.support[i].label, noisy.support[i].clean_label);
    EXPECT_TRUE(noisy.noise_mask[i]);
  }
}

TEST(LabelNoise, HalfOfSixteenFlipsEight) {
  EXPECT_EQ(noisy_count(0.5, 16), 8u);
  EXPECT_EQ(noisy_count(0.25, 10), 3u);  // 2.5 rounds half up
  const BankPair p = generate_synthetic(synthetic(5, 10, 4, 2.0, 1));
  const Episode ep = sample_episode(p.visual, p.textual, 4, 4, 1, 3);
  const Episode noisy = inject_label_noise(ep, 0.5, 2);
  int flipped = 0;
  for (bool b : noisy.noise_mask) flipped += b ? 1 : 0;
  EXPECT_EQ(flipped, 8);
}

TEST(LabelNoise, PreservesSizeQueriesAndNeverSelfFlips) {
  const BankPair p = generate_synthetic(synthetic(6, 10, 4, 2.0, 8));
  for (std::uint64_t s = 0; s < 100; ++s) {
    const Episode ep = sample_episode(p.visual, p.textual, 5, 2, 2, s);
    const double rate = static_cast<double>(s % 5) / 4.0;
    const Episode noisy = inject_label_noise(ep, rate, s + 1);
    ASSERT_EQ(noisy.support.size(), ep.support.size());
    EXPECT_EQ(noisy.query, ep.query);
    for (std::size_t i = 0; i < noisy.support.size(); ++i) {
      const auto& x = noisy.support[i];
      EXPECT_EQ(noisy.noise_mask[i], x.label != x.clean_label);
      EXPECT_NE(std::find(ep.classes.begin(), ep.classes.end(), x.label), ep.classes.end());
      EXPECT_EQ(x.features, ep.support[i].features);
    }
  }
}

TEST(LabelNoise, RateOutsideUnitIntervalIsRejected) {
  const BankPair p = generate_synthetic(synthetic(3, 4, 4, 2.0, 1));
  const Episode ep = sample_episode(p.visual, p.textual, 2, 1, 1, 3);
  EXPECT_THROW(inject_label_noise(ep, 1.5, 1), ConfigError);
  EXPECT_THROW(inject_label_noise(ep, -0.1, 1), ConfigError);
}

TEST(Gallery, NormalizesEveryClass) {
  const BankPair p = generate_synthetic(synthetic(4, 2, 6, 2.0, 1));
  const ClassGallery g = ClassGallery::from_textual(p.textual);
  ASSERT_EQ(g.size(), 4u);
  for (const Vector& v : g.prototypes) EXPECT_NEAR(norm(v), 1.0, 1e-12);
  EXPECT_THROW(ClassGallery::from_textual(p.visual), DataError);
}

}  // namespace
}  // namespace pfnl

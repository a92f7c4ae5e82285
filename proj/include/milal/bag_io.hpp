#pragma once

// Bag files and dataset manifests.
//
// Bag file, version 1. Integers are little-endian, reals are IEEE-754
// binary64 little-endian:
//
//   offset  size        field
//   0       8           magic "MILBAG\r\n"
//   8       2           u16 format version (1)
//   10      2           u16 flags: bit0 annotation section present,
//                                  bit1 oracle section present,
//                                  bit2 negative-confirmed
//   12      4           u32 id length L
//   16      L           id bytes (UTF-8)
//   16+L    4           u32 label code (0 negative, 1 itc, 2 micro, 3 macro)
//   20+L    8           u64 instance count M
//   28+L    8           u64 feature dim D
//   36+L    8*M*D       instance features, row-major
//   ...     4+8+4*n     optional annotation section: tag "ANNO", u64 n, n x u32
//   ...     4+8+4*n     optional oracle section:     tag "ORCL", u64 n, n x u32
//   end-8   8           u64 FNV-1a 64 of every preceding byte
//
// Manifest, version 1: a comma-separated text file. Lines starting with '#'
// carry metadata ("# key=value"); the first other line is the header
// `bag_id,label,path,center` and each following line names one bag file,
// relative to the manifest's directory.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "milal/data.hpp"
#include "milal/error.hpp"
#include "milal/random.hpp"

namespace milal {

inline constexpr char kBagMagic[8] = {'M', 'I', 'L', 'B', 'A', 'G', '\r', '\n'};
inline constexpr std::uint16_t kBagFormatVersion = 1;
inline constexpr std::uint32_t kAnnotationTag = 0x4f4e4e41;  // "ANNO"
inline constexpr std::uint32_t kOracleTag = 0x4c43524f;      // "ORCL"

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
    const U u = std::bit_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
  }
  void put_bytes(std::string_view s) { bytes_.append(s); }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::size_t limit) : bytes_(bytes), limit_(limit) {}

  template <typename T>
  T get(const char* what) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
    need(sizeof(U), what);
    U u = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      u |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return std::bit_cast<T>(u);
  }

  std::string_view get_bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return limit_ - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (n > limit_ - pos_) throw FormatError(std::string("truncated ") + what, pos_);
  }

  std::string_view bytes_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

inline void put_index_section(ByteWriter& w, std::uint32_t tag, const IndexSet& idx) {
  w.put(tag);
  w.put(static_cast<std::uint64_t>(idx.size()));
  for (auto i : idx) w.put(i);
}

inline IndexSet get_index_section(ByteReader& r, std::uint32_t tag, std::uint64_t m,
                                  const char* what) {
  const auto at = r.pos();
  if (r.get<std::uint32_t>(what) != tag) throw FormatError(std::string("bad tag for ") + what, at);
  const auto n = r.get<std::uint64_t>(what);
  if (n > r.remaining() / 4) throw FormatError(std::string("truncated ") + what, r.pos());
  IndexSet out(n);
  for (auto& i : out) {
    const auto p = r.pos();
    i = r.get<std::uint32_t>(what);
    if (i >= m) throw FormatError(std::string(what) + " index out of range", p);
  }
  return out;
}

}  // namespace detail

inline std::string encode_bag(const FeatureBag& bag) {
  detail::ByteWriter w;
  w.put_bytes(std::string_view(kBagMagic, sizeof(kBagMagic)));
  w.put(kBagFormatVersion);
  std::uint16_t flags = 0;
  if (bag.annotation) flags |= 1;
  if (bag.tumor_indices) flags |= 2;
  if (bag.negative_confirmed) flags |= 4;
  w.put(flags);
  w.put(static_cast<std::uint32_t>(bag.id.size()));
  w.put_bytes(bag.id);
  w.put(static_cast<std::uint32_t>(bag.label));
  w.put(static_cast<std::uint64_t>(bag.instances.rows()));
  w.put(static_cast<std::uint64_t>(bag.instances.cols()));
  for (Eigen::Index i = 0; i < bag.instances.size(); ++i) w.put(bag.instances.data()[i]);
  if (bag.annotation) detail::put_index_section(w, kAnnotationTag, *bag.annotation);
  if (bag.tumor_indices) detail::put_index_section(w, kOracleTag, *bag.tumor_indices);
  std::string out = w.bytes();
  detail::ByteWriter tail;
  tail.put(fnv1a(out));
  out += tail.bytes();
  return out;
}

/// Parses a bag; the whole buffer is validated before anything is returned.
inline FeatureBag decode_bag(std::string_view bytes, bool strip_oracle_section = false) {
  constexpr std::size_t kMinSize = 8 + 2 + 2 + 4 + 4 + 8 + 8 + 8;
  if (bytes.size() < kMinSize) throw FormatError("file too short for a bag", bytes.size());
  const std::size_t body = bytes.size() - 8;
  {
    detail::ByteReader tail(bytes.substr(body), 8);
    const auto stored = tail.get<std::uint64_t>("checksum");
    if (stored != fnv1a(bytes.substr(0, body))) throw FormatError("checksum mismatch", body);
  }
  detail::ByteReader r(bytes, body);
  if (r.get_bytes(8, "magic") != std::string_view(kBagMagic, 8)) throw FormatError("bad magic", 0);
  const auto version = r.get<std::uint16_t>("version");
  if (version != kBagFormatVersion) {
    throw FormatError("unsupported bag format version " + std::to_string(version), 8);
  }
  const auto flags = r.get<std::uint16_t>("flags");
  if (flags & ~std::uint16_t{7}) throw FormatError("unknown flag bits", 10);
  FeatureBag bag;
  const auto id_len = r.get<std::uint32_t>("id length");
  bag.id = std::string(r.get_bytes(id_len, "id"));
  const auto label_at = r.pos();
  const auto label = r.get<std::uint32_t>("label");
  if (label >= kNumClasses) throw FormatError("invalid label code " + std::to_string(label), label_at);
  bag.label = static_cast<int>(label);
  const auto dims_at = r.pos();
  const auto m = r.get<std::uint64_t>("instance count");
  const auto d = r.get<std::uint64_t>("feature dim");
  if (m == 0 || d == 0) throw FormatError("empty instance matrix", dims_at);
  if (d > r.remaining() / 8 || m > r.remaining() / 8 / d) {
    throw FormatError("truncated feature payload", r.pos());
  }
  bag.instances.resize(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < bag.instances.size(); ++i) {
    const auto at = r.pos();
    const double v = r.get<double>("features");
    if (!std::isfinite(v)) throw FormatError("non-finite feature value", at);
    bag.instances.data()[i] = v;
  }
  if (flags & 1) bag.annotation = detail::get_index_section(r, kAnnotationTag, m, "annotation");
  if (flags & 2) {
    auto truth = detail::get_index_section(r, kOracleTag, m, "oracle section");
    if (!strip_oracle_section) bag.tumor_indices = std::move(truth);
  }
  bag.negative_confirmed = (flags & 4) != 0;
  if (r.remaining() != 0) throw FormatError("trailing bytes before checksum", r.pos());
  return bag;
}

inline void write_bag(const FeatureBag& bag, const std::filesystem::path& path) {
  const std::string bytes = encode_bag(bag);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IntegrityError("cannot open '" + path.string() + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IntegrityError("write failed for '" + path.string() + "'");
}

inline FeatureBag read_bag(const std::filesystem::path& path, bool strip_oracle_section = false) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IntegrityError("cannot open bag file '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_bag(ss.str(), strip_oracle_section);
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
  std::string bag_id;
  int label = kNegativeClass;
  std::string path;
  std::string center;
};

struct Manifest {
  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<ManifestEntry> entries;

  std::string meta(const std::string& key, const std::string& fallback = "") const {
    for (const auto& [k, v] : metadata) {
      if (k == key) return v;
    }
    return fallback;
  }
};

inline constexpr std::string_view kManifestSchema = "milal.manifest/1";

inline std::string format_manifest(const Manifest& m) {
  std::ostringstream os;
  os << "# schema=" << kManifestSchema << "\n";
  for (const auto& [k, v] : m.metadata) os << "# " << k << "=" << v << "\n";
  os << "bag_id,label,path,center\n";
  for (const auto& e : m.entries) {
    os << e.bag_id << "," << label_name(e.label) << "," << e.path << "," << e.center << "\n";
  }
  return os.str();
}

inline Manifest parse_manifest(std::istream& in) {
  Manifest m;
  std::string line;
  bool header_seen = false;
  bool schema_ok = false;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      auto body = line.substr(1);
      while (!body.empty() && body.front() == ' ') body.erase(body.begin());
      const auto eq = body.find('=');
      if (eq == std::string::npos) continue;
      auto key = body.substr(0, eq), value = body.substr(eq + 1);
      if (key == "schema") {
        if (value != kManifestSchema) throw IntegrityError("unsupported manifest schema '" + value + "'");
        schema_ok = true;
      } else {
        m.metadata.emplace_back(key, value);
      }
      continue;
    }
    std::vector<std::string> cols;
    std::stringstream ls(line);
    std::string col;
    while (std::getline(ls, col, ',')) cols.push_back(col);
    if (!header_seen) {
      if (cols.size() < 3 || cols[0] != "bag_id" || cols[1] != "label" || cols[2] != "path") {
        throw IntegrityError("manifest line " + std::to_string(line_no) + ": missing header");
      }
      header_seen = true;
      continue;
    }
    if (cols.size() < 3) {
      throw IntegrityError("manifest line " + std::to_string(line_no) + ": expected at least 3 columns");
    }
    ManifestEntry e;
    e.bag_id = cols[0];
    try {
      e.label = parse_label(cols[1]);
    } catch (const InputError&) {
      throw IntegrityError("bag '" + e.bag_id + "': unknown label '" + cols[1] + "' in manifest");
    }
    e.path = cols[2];
    if (cols.size() > 3) e.center = cols[3];
    m.entries.push_back(std::move(e));
  }
  if (!schema_ok) throw IntegrityError("manifest has no schema line");
  if (!header_seen) throw IntegrityError("manifest has no header line");
  return m;
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IntegrityError("cannot open manifest '" + path.string() + "'");
  return parse_manifest(f);
}

/// Ground-truth tumor indices per bag id; held by the simulated expert only.
using GroundTruth = std::map<std::string, IndexSet>;

struct LoadedDataset {
  Manifest manifest;
  std::vector<FeatureBag> bags;
  GroundTruth truth;  // populated only when the oracle data was stripped
};

/// Loads every bag listed in the manifest. With `strip_oracle` the bags come
/// back without tumor indices and the indices are handed out separately in
/// `truth`.
inline LoadedDataset load_dataset(const std::filesystem::path& manifest_path, bool strip_oracle) {
  LoadedDataset out;
  out.manifest = read_manifest(manifest_path);
  const auto root = manifest_path.parent_path();
  std::set<std::string> seen;
  for (const auto& e : out.manifest.entries) {
    if (!seen.insert(e.bag_id).second) throw IntegrityError("bag '" + e.bag_id + "': duplicate id in manifest");
    const auto file = root / e.path;
    if (!std::filesystem::exists(file)) {
      throw IntegrityError("bag '" + e.bag_id + "': missing file '" + file.string() + "'");
    }
    FeatureBag bag;
    try {
      bag = read_bag(file);
    } catch (const FormatError& err) {
      throw IntegrityError("bag '" + e.bag_id + "': " + err.what());
    }
    if (bag.id != e.bag_id) {
      throw IntegrityError("bag '" + e.bag_id + "': file carries id '" + bag.id + "'");
    }
    if (bag.label != e.label) {
      throw IntegrityError("bag '" + e.bag_id + "': label mismatch (manifest " +
                           std::string(label_name(e.label)) + ", file " +
                           std::string(label_name(bag.label)) + ")");
    }
    if (strip_oracle && bag.tumor_indices) {
      out.truth.emplace(bag.id, std::move(*bag.tumor_indices));
      bag.tumor_indices.reset();
    }
    out.bags.push_back(std::move(bag));
  }
  if (!out.bags.empty()) {
    const auto d = out.bags.front().dim();
    for (const auto& b : out.bags) {
      if (b.dim() != d) throw IntegrityError("bag '" + b.id + "': feature dim differs from the rest of the dataset");
    }
  }
  return out;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

/// Writes a generated dataset: one bag file per bag under `dir/bags` plus
/// `dir/manifest.csv`. Returns the manifest path.
inline std::filesystem::path write_dataset(const SyntheticDataset& ds, const GeneratorConfig& cfg,
                                           const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "bags", ec);
  if (ec) throw IntegrityError("cannot create '" + (dir / "bags").string() + "': " + ec.message());
  Manifest m;
  m.metadata.emplace_back("generator_hash", hex64(fnv1a(cfg.canonical())));
  std::ostringstream acc;
  acc << std::setprecision(17) << ds.oracle_accuracy;
  m.metadata.emplace_back("oracle_accuracy", acc.str());
  m.metadata.emplace_back("generator", cfg.canonical());
  for (std::size_t i = 0; i < ds.bags.size(); ++i) {
    const auto& bag = ds.bags[i];
    const std::string rel = "bags/" + bag.id + ".milb";
    write_bag(bag, dir / rel);
    m.entries.push_back({bag.id, bag.label, rel, "center_" + std::to_string(i % 5)});
  }
  const auto path = dir / "manifest.csv";
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IntegrityError("cannot write '" + path.string() + "'");
  f << format_manifest(m);
  return path;
}

}  // namespace milal

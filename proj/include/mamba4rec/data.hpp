#pragma once

// Interaction-log ingestion, k-core filtering, chronological sequences,
// leave-one-out splits and left-padded batching.

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mamba4rec/container.hpp"
#include "mamba4rec/errors.hpp"
#include "mamba4rec/model.hpp"
#include "mamba4rec/rng.hpp"

namespace m4r {

struct InteractionRecord {
  std::string user;
  std::string item;
  std::int64_t timestamp = 0;

  friend bool operator==(const InteractionRecord&, const InteractionRecord&) = default;
};

enum class LogFormat {
  ml1m,        // user::item::rating::timestamp
  amazon_csv,  // user,item,rating,timestamp
  tsv,         // user<TAB>item<TAB>timestamp
};

inline LogFormat parse_log_format(std::string_view name) {
  if (name == "ml-1m") return LogFormat::ml1m;
  if (name == "amazon-csv") return LogFormat::amazon_csv;
  if (name == "tsv") return LogFormat::tsv;
  throw ConfigError("unknown format '" + std::string(name) +
                    "' (expected ml-1m, amazon-csv or tsv)");
}

inline std::string_view log_format_name(LogFormat f) {
  switch (f) {
    case LogFormat::ml1m: return "ml-1m";
    case LogFormat::amazon_csv: return "amazon-csv";
    case LogFormat::tsv: return "tsv";
  }
  return "?";
}

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line, std::string_view sep) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    const auto next = line.find(sep, pos);
    if (next == std::string_view::npos) {
      out.push_back(line.substr(pos));
      return out;
    }
    out.push_back(line.substr(pos, next - pos));
    pos = next + sep.size();
  }
}

}  // namespace detail

// Ratings, when present, are read past and dropped (implicit feedback).
inline std::vector<InteractionRecord> parse_interactions(std::istream& in, LogFormat format,
                                                         const std::string& source = "<stream>") {
  std::string_view sep = format == LogFormat::ml1m ? "::" : format == LogFormat::amazon_csv ? "," : "\t";
  const std::size_t expected = format == LogFormat::tsv ? 3 : 4;
  const std::size_t ts_field = expected - 1;
  std::vector<InteractionRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = detail::split_fields(line, sep);
    auto where = [&] { return source + ":" + std::to_string(lineno) + ": "; };
    if (fields.size() != expected) {
      throw IoError(where() + "expected " + std::to_string(expected) + " fields for " +
                    std::string(log_format_name(format)) + ", found " +
                    std::to_string(fields.size()));
    }
    std::int64_t ts = 0;
    const auto f = fields[ts_field];
    // Amazon dumps sometimes write integral timestamps as "1234.0"
    std::string_view digits = f.substr(0, f.find('.'));
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), ts);
    const bool frac_ok = digits.size() == f.size() ||
                         f.find_first_not_of('0', digits.size() + 1) == std::string_view::npos;
    if (ec != std::errc{} || ptr != digits.data() + digits.size() || digits.empty() || !frac_ok) {
      throw IoError(where() + "non-numeric timestamp '" + std::string(f) + "'");
    }
    if (fields[0].empty() || fields[1].empty()) throw IoError(where() + "empty user or item id");
    out.push_back({std::string(fields[0]), std::string(fields[1]), ts});
  }
  return out;
}

inline std::vector<InteractionRecord> parse_interactions(const std::string& path, LogFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  return parse_interactions(in, format, path);
}

// Alternately drops users and items with fewer than k interactions until
// nothing changes. Input order is preserved among retained records.
inline std::vector<InteractionRecord> k_core_filter(std::vector<InteractionRecord> records,
                                                    std::size_t k = 5) {
  if (k < 1) throw ConfigError("k must be >= 1");
  while (true) {
    std::unordered_map<std::string_view, std::size_t> users, items;
    for (const auto& r : records) {
      ++users[r.user];
      ++items[r.item];
    }
    std::vector<InteractionRecord> kept;
    kept.reserve(records.size());
    for (auto& r : records) {
      if (users[r.user] >= k && items[r.item] >= k) kept.push_back(r);
    }
    const bool stable = kept.size() == records.size();
    records = std::move(kept);
    if (stable) break;
  }
  if (records.empty()) throw IoError("dataset is empty after filtering");
  return records;
}

// Chronological per-user item sequences. Items are numbered 1..|V| in order
// of first appearance; 0 is the pad index.
struct InteractionDataset {
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;  // item_ids[0] is the pad placeholder
  std::vector<std::vector<std::size_t>> sequences;

  std::size_t num_users() const { return sequences.size(); }
  std::size_t num_items() const { return item_ids.empty() ? 0 : item_ids.size() - 1; }
  std::size_t num_interactions() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.size();
    return n;
  }
  double average_length() const {
    return num_users() ? static_cast<double>(num_interactions()) / num_users() : 0.0;
  }
};

inline InteractionDataset build_dataset(const std::vector<InteractionRecord>& records) {
  InteractionDataset ds;
  ds.item_ids.emplace_back("<pad>");
  std::unordered_map<std::string, std::size_t> user_index, item_index;
  // (timestamp, file position, item)
  std::vector<std::vector<std::tuple<std::int64_t, std::size_t, std::size_t>>> events;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    auto [uit, unew] = user_index.try_emplace(r.user, ds.user_ids.size());
    if (unew) {
      ds.user_ids.push_back(r.user);
      events.emplace_back();
    }
    auto [iit, inew] = item_index.try_emplace(r.item, ds.item_ids.size());
    if (inew) ds.item_ids.push_back(r.item);
    events[uit->second].emplace_back(r.timestamp, i, iit->second);
  }
  ds.sequences.resize(events.size());
  for (std::size_t u = 0; u < events.size(); ++u) {
    auto& ev = events[u];
    std::sort(ev.begin(), ev.end());  // ties fall back to file position
    ds.sequences[u].reserve(ev.size());
    for (const auto& e : ev) ds.sequences[u].push_back(std::get<2>(e));
  }
  return ds;
}

// One prediction example: the first `context_length` items of a user's
// sequence predict `target`.
struct Instance {
  std::size_t user = 0;
  std::size_t context_length = 0;
  std::size_t target = 0;

  friend bool operator==(const Instance&, const Instance&) = default;
};

struct SplitViews {
  std::vector<Instance> train;  // prefix augmentation over v_1..v_{n-2}
  std::vector<Instance> valid;  // v_1..v_{n-2} -> v_{n-1}
  std::vector<Instance> test;   // v_1..v_{n-1} -> v_n
};

enum class Split { train, valid, test };

inline Split parse_split(std::string_view s) {
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  if (s == "train") return Split::train;
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

inline std::string_view split_name(Split s) {
  return s == Split::train ? "train" : s == Split::valid ? "valid" : "test";
}

inline SplitViews build_splits(const InteractionDataset& ds) {
  SplitViews v;
  for (std::size_t u = 0; u < ds.num_users(); ++u) {
    const auto& seq = ds.sequences[u];
    const std::size_t n = seq.size();
    if (n < 3) {
      throw ContractError("user " + ds.user_ids[u] + " has " + std::to_string(n) +
                          " interactions; leave-one-out needs at least 3");
    }
    for (std::size_t t = 2; t + 2 <= n; ++t) v.train.push_back({u, t - 1, seq[t - 1]});
    v.valid.push_back({u, n - 2, seq[n - 2]});
    v.test.push_back({u, n - 1, seq[n - 1]});
  }
  return v;
}

inline const std::vector<Instance>& split_view(const SplitViews& v, Split s) {
  return s == Split::train ? v.train : s == Split::valid ? v.valid : v.test;
}

// Keeps a uniform random subset of users (sequences unchanged).
inline InteractionDataset subsample_users(const InteractionDataset& ds, std::size_t count,
                                          std::uint64_t seed) {
  if (count == 0 || count >= ds.num_users()) return ds;
  std::vector<std::size_t> order(ds.num_users());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  order.resize(count);
  std::sort(order.begin(), order.end());
  InteractionDataset out;
  out.item_ids = ds.item_ids;
  for (auto u : order) {
    out.user_ids.push_back(ds.user_ids[u]);
    out.sequences.push_back(ds.sequences[u]);
  }
  return out;
}

// --------------------------------------------------------------- batching

struct Batch {
  ItemBatch items;                   // [B, L], left-padded
  std::vector<std::size_t> targets;  // [B]
  std::vector<std::size_t> lengths;  // real items per row, <= L
  std::vector<std::size_t> users;
};

// Left-pads (or keeps the most recent `max_len` items of) one context into
// row `row` of `out`.
inline std::size_t fill_row(std::span<const std::size_t> context, std::size_t max_len,
                            std::size_t* out) {
  const std::size_t len = std::min(context.size(), max_len);
  std::fill(out, out + max_len, kPadItem);
  std::copy(context.end() - static_cast<std::ptrdiff_t>(len), context.end(),
            out + (max_len - len));
  return len;
}

// Streams fixed-size batches over a list of instances. The visiting order
// is shuffled with `rng` when requested, so a given seed reproduces the
// same sequence of batches.
class BatchStream {
 public:
  BatchStream(const InteractionDataset& ds, const std::vector<Instance>& instances,
              std::size_t max_len, std::size_t batch_size, Rng* rng, bool shuffle)
      : ds_(ds), instances_(instances), max_len_(max_len), batch_size_(batch_size) {
    if (max_len < 1) throw ConfigError("max_len must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    order_.resize(instances.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    if (shuffle) {
      if (!rng) throw ContractError("shuffling requires an Rng");
      rng->shuffle(order_.begin(), order_.end());
    }
  }

  std::size_t num_batches() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

  bool next(Batch& b) {
    if (pos_ >= order_.size()) return false;
    const std::size_t n = std::min(batch_size_, order_.size() - pos_);
    b.items.batch = n;
    b.items.length = max_len_;
    b.items.items.assign(n * max_len_, kPadItem);
    b.targets.resize(n);
    b.lengths.resize(n);
    b.users.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
      const Instance& in = instances_[order_[pos_ + r]];
      const auto& seq = ds_.sequences.at(in.user);
      if (in.context_length == 0 || in.context_length > seq.size()) {
        throw ContractError("instance context outside the user's sequence");
      }
      b.lengths[r] = fill_row(std::span(seq).first(in.context_length), max_len_,
                              b.items.items.data() + r * max_len_);
      b.targets[r] = in.target;
      b.users[r] = in.user;
    }
    pos_ += n;
    return true;
  }

 private:
  const InteractionDataset& ds_;
  const std::vector<Instance>& instances_;
  std::size_t max_len_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

// -------------------------------------------------------------- caching

// Identity of a prepared dataset: input bytes plus every filter parameter.
inline std::string dataset_cache_key(const std::string& path, LogFormat format, std::size_t k) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  Fnv1a h;
  std::vector<char> buf(1 << 16);
  while (in.read(buf.data(), static_cast<std::streamsize>(buf.size())) || in.gcount() > 0) {
    h.update(std::string_view(buf.data(), static_cast<std::size_t>(in.gcount())));
  }
  h.update("|format=");
  h.update(log_format_name(format));
  h.update("|k=" + std::to_string(k));
  return h.hex();
}

namespace detail {

inline float exact_f32(std::size_t v) {
  if (v > (std::size_t{1} << 24)) {
    throw IoError("value " + std::to_string(v) + " is not exactly representable in the cache");
  }
  return static_cast<float>(v);
}

inline std::string join_lines(const std::vector<std::string>& v, std::size_t from) {
  std::string s;
  for (std::size_t i = from; i < v.size(); ++i) {
    s += v[i];
    s.push_back('\n');
  }
  return s;
}

inline std::vector<std::string> split_lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string line;
  while (std::getline(is, line)) out.push_back(line);
  return out;
}

}  // namespace detail

inline void save_dataset(const std::string& path, const InteractionDataset& ds) {
  std::vector<TensorRecord> recs;
  TensorRecord offsets{"sequence_offsets", {ds.num_users() + 1}, {0.0f}};
  TensorRecord items{"sequence_items", {std::max<std::size_t>(1, ds.num_interactions())}, {}};
  std::size_t total = 0;
  for (const auto& s : ds.sequences) {
    total += s.size();
    offsets.values.push_back(detail::exact_f32(total));
    for (auto i : s) items.values.push_back(detail::exact_f32(i));
  }
  if (items.values.empty()) items.values.push_back(0.0f);
  recs.push_back(std::move(offsets));
  recs.push_back(std::move(items));
  recs.push_back(bytes_record("user_ids", detail::join_lines(ds.user_ids, 0)));
  recs.push_back(bytes_record("item_ids", detail::join_lines(ds.item_ids, 1)));
  write_container(path, recs);
}

inline InteractionDataset load_dataset(const std::string& path) {
  const auto recs = read_container(path);
  const auto* offsets = find_record(recs, "sequence_offsets");
  const auto* items = find_record(recs, "sequence_items");
  const auto* users = find_record(recs, "user_ids");
  const auto* names = find_record(recs, "item_ids");
  if (!offsets || !items || !users || !names) throw IoError(path + ": not a dataset cache");
  InteractionDataset ds;
  ds.user_ids = detail::split_lines(record_bytes(*users));
  ds.item_ids = {"<pad>"};
  for (auto& n : detail::split_lines(record_bytes(*names))) ds.item_ids.push_back(std::move(n));
  const std::size_t U = offsets->values.size() - 1;
  if (ds.user_ids.size() != U) throw IoError(path + ": user table does not match sequences");
  ds.sequences.resize(U);
  for (std::size_t u = 0; u < U; ++u) {
    const auto lo = static_cast<std::size_t>(offsets->values[u]);
    const auto hi = static_cast<std::size_t>(offsets->values[u + 1]);
    if (hi < lo || hi > items->values.size()) throw IoError(path + ": corrupt offsets");
    for (std::size_t i = lo; i < hi; ++i) {
      const auto item = static_cast<std::size_t>(items->values[i]);
      if (item == kPadItem || item > ds.num_items()) throw IoError(path + ": item out of range");
      ds.sequences[u].push_back(item);
    }
  }
  return ds;
}

}  // namespace m4r

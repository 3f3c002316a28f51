#include "kla/tasks.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

#include "kla/rng.hpp"

namespace kla::tasks {

static_assert(std::endian::native == std::endian::little, "dataset IO assumes a little-endian host");

namespace {

// Stream families. In-context and noisy recall share one so that a zero
// noise fraction reproduces the in-context stream exactly.
enum Family : std::uint64_t { kKv = 1, kFuzzy, kCopy, kCompression, kMemorization, kMqar, kA5 };

Family family(TaskKind kind) {
  switch (kind) {
    case TaskKind::in_context_recall:
    case TaskKind::noisy_recall: return kKv;
    case TaskKind::fuzzy_recall: return kFuzzy;
    case TaskKind::selective_copy: return kCopy;
    case TaskKind::compression: return kCompression;
    case TaskKind::memorization: return kMemorization;
    case TaskKind::mqar: return kMqar;
    case TaskKind::a5: return kA5;
  }
  return kKv;
}

std::mt19937_64 stream(const TaskConfig& c, Split split, std::size_t index, std::uint64_t sub) {
  return rng::engine({c.seed, family(c.kind), static_cast<std::uint64_t>(split), index, sub});
}

std::size_t uniform_index(std::mt19937_64& gen, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(gen);
}

std::int32_t id(std::size_t v) { return static_cast<std::int32_t>(v); }

struct Builder {
  Sequence seq;
  void push(std::int32_t token, std::int32_t target = model::kIgnore) {
    seq.tokens.push_back(token);
    seq.targets.push_back(target);
    seq.mask.push_back(target != model::kIgnore ? 1 : 0);
  }
};

bool is_recall_kind(TaskKind k) {
  return k == TaskKind::in_context_recall || k == TaskKind::noisy_recall || k == TaskKind::mqar;
}

std::size_t noise_count(const TaskConfig& c) {
  if (c.kind != TaskKind::noisy_recall || c.noise_fraction <= 0) return 0;
  return static_cast<std::size_t>(std::llround(c.noise_fraction * static_cast<double>(c.seq_len)));
}

// Key-value prefix followed by queries; noise tokens (noisy variant) are
// inserted only at pair boundaries so every query key is followed by its value.
Sequence gen_kv(const TaskConfig& c, Split split, std::size_t index) {
  auto gen = stream(c, split, index, 0);
  const std::size_t keys = c.key_vocab, values = c.value_vocab(), pairs = c.pairs();
  const std::size_t noise = noise_count(c);
  const std::size_t length = c.seq_len - noise;
  const std::int32_t filler = filler_token(c);

  std::vector<std::int32_t> bound(keys);
  for (auto& v : bound) v = id(keys + uniform_index(gen, values));
  std::vector<std::int32_t> order(keys);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), gen);
  order.resize(pairs);

  const std::size_t slots = (length - 2 * pairs) / 2;
  const std::size_t queries = c.num_queries ? c.num_queries : slots;
  std::vector<std::size_t> slot_ids(slots);
  std::iota(slot_ids.begin(), slot_ids.end(), 0);
  std::shuffle(slot_ids.begin(), slot_ids.end(), gen);
  std::vector<std::uint8_t> is_query(slots, 0);
  for (std::size_t i = 0; i < queries; ++i) is_query[slot_ids[i]] = 1;

  // Units are pairs or single filler tokens; noise goes between units.
  Builder b;
  std::vector<std::size_t> unit_starts;
  for (const auto k : order) {
    unit_starts.push_back(b.seq.tokens.size());
    b.push(k);
    b.push(bound[static_cast<std::size_t>(k)]);
  }
  for (std::size_t s = 0; s < slots; ++s) {
    unit_starts.push_back(b.seq.tokens.size());
    if (is_query[s]) {
      const auto k = order[uniform_index(gen, pairs)];
      b.push(k, bound[static_cast<std::size_t>(k)]);
      b.push(bound[static_cast<std::size_t>(k)]);
    } else {
      b.push(filler);
      unit_starts.push_back(b.seq.tokens.size());
      b.push(filler);
    }
  }
  while (b.seq.tokens.size() < length) {
    unit_starts.push_back(b.seq.tokens.size());
    b.push(filler);
  }
  if (noise == 0) return std::move(b.seq);

  auto noise_gen = stream(c, split, index, 1);
  unit_starts.push_back(length);
  std::vector<std::size_t> at(noise);
  for (auto& a : at) a = unit_starts[uniform_index(noise_gen, unit_starts.size())];
  std::sort(at.begin(), at.end());
  Builder out;
  std::size_t next = 0;
  for (std::size_t pos = 0; pos <= length; ++pos) {
    while (next < at.size() && at[next] == pos) {
      out.push(id(c.vocab_size + 1 + uniform_index(noise_gen, c.noise_vocab)));
      ++next;
    }
    if (pos < length) out.push(b.seq.tokens[pos], b.seq.targets[pos]);
  }
  return std::move(out.seq);
}

bool is_prefix(const std::vector<std::int32_t>& a, const std::vector<std::int32_t>& b) {
  return a.size() <= b.size() && std::equal(a.begin(), a.end(), b.begin());
}

Sequence gen_fuzzy(const TaskConfig& c, Split split, std::size_t index) {
  auto gen = stream(c, split, index, 0);
  const std::size_t keys = c.key_vocab, values = c.value_vocab(), pairs = c.pairs();
  const auto span = [&](std::size_t offset, std::size_t range) {
    std::vector<std::int32_t> s(1 + uniform_index(gen, c.max_motif));
    for (auto& t : s) t = id(offset + uniform_index(gen, range));
    return s;
  };
  // Prefix-free key spans: no key is a prefix of another, so the end of a
  // key is determined by its tokens.
  std::vector<std::vector<std::int32_t>> key_spans, value_spans;
  for (std::size_t attempts = 0; key_spans.size() < pairs; ++attempts) {
    if (attempts > 100000) throw std::runtime_error("fuzzy recall: could not draw prefix-free keys");
    auto k = span(0, keys);
    const bool clash = std::any_of(key_spans.begin(), key_spans.end(),
                                   [&](const auto& other) { return is_prefix(k, other) || is_prefix(other, k); });
    if (!clash) key_spans.push_back(std::move(k));
  }
  for (std::size_t i = 0; i < pairs; ++i) value_spans.push_back(span(keys, values));

  Builder b;
  const std::int32_t sep = separator_token(c);
  const auto emit = [&](std::size_t pair, bool query) {
    const auto& k = key_spans[pair];
    const auto& v = value_spans[pair];
    for (std::size_t j = 0; j < k.size(); ++j) b.push(k[j], query && j + 1 == k.size() ? v[0] : model::kIgnore);
    for (std::size_t j = 0; j < v.size(); ++j) b.push(v[j], query && j + 1 < v.size() ? v[j + 1] : model::kIgnore);
    b.push(sep);
  };
  for (std::size_t i = 0; i < pairs; ++i) emit(i, false);
  for (std::size_t q = 0; c.num_queries == 0 || q < c.num_queries; ++q) {
    const std::size_t pair = uniform_index(gen, pairs);
    const std::size_t need = key_spans[pair].size() + value_spans[pair].size() + 1;
    if (b.seq.tokens.size() + need > c.seq_len) break;
    emit(pair, true);
  }
  while (b.seq.tokens.size() < c.seq_len) b.push(filler_token(c));
  return std::move(b.seq);
}

Sequence gen_selective_copy(const TaskConfig& c, Split split, std::size_t index) {
  auto gen = stream(c, split, index, 0);
  const std::size_t region = c.seq_len - c.num_copy;
  std::vector<std::size_t> pos(region);
  std::iota(pos.begin(), pos.end(), 0);
  std::shuffle(pos.begin(), pos.end(), gen);
  pos.resize(c.num_copy);
  std::sort(pos.begin(), pos.end());
  std::vector<std::int32_t> content(c.num_copy);
  for (auto& t : content) t = id(uniform_index(gen, c.vocab_size));
  Builder b;
  std::size_t next = 0;
  for (std::size_t t = 0; t < region; ++t) {
    if (next < pos.size() && pos[next] == t) {
      b.push(content[next++]);
    } else {
      b.push(blank_token(c));
    }
  }
  for (std::size_t i = 0; i < c.num_copy; ++i) b.push(insert_token(c), content[i]);
  return std::move(b.seq);
}

Sequence gen_compression(const TaskConfig& c, Split split, std::size_t index) {
  auto gen = stream(c, split, index, 0);
  Builder b;
  for (std::size_t t = 0; t + 1 < c.seq_len; ++t) {
    const auto tok = id(uniform_index(gen, c.vocab_size));
    b.push(tok, tok);
  }
  b.push(compress_token(c));
  return std::move(b.seq);
}

Sequence gen_memorization(const TaskConfig& c, Split split, std::size_t index) {
  auto gen = stream(c, split, index, 0);
  const auto dict = memorization_dictionary(c);
  Builder b;
  for (std::size_t i = 0; i < c.seq_len / 2; ++i) {
    const auto k = uniform_index(gen, c.key_vocab);
    b.push(id(k));
    b.push(insert_token(c), dict[k]);
  }
  return std::move(b.seq);
}

Sequence gen_a5(const TaskConfig& c, Split split, std::size_t index) {
  auto gen = stream(c, split, index, 0);
  const auto& elems = a5_elements();
  Builder b;
  Permutation prefix;
  for (std::size_t t = 0; t < c.seq_len; ++t) {
    const auto tok = id(uniform_index(gen, elems.size()));
    prefix = a5_compose(prefix, elems[static_cast<std::size_t>(tok)]);
    b.push(tok, a5_token(prefix));
  }
  return std::move(b.seq);
}

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

void fnv(std::uint64_t& h, const void* data, std::size_t bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) h = (h ^ p[i]) * kFnvPrime;
}

}  // namespace

const std::vector<std::string>& task_names() {
  static const std::vector<std::string> names{"in_context_recall", "noisy_recall", "fuzzy_recall", "selective_copy",
                                              "compression",       "memorization", "mqar",         "a5"};
  return names;
}

TaskKind parse_task(const std::string& name) {
  const auto& names = task_names();
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) {
    std::string valid;
    for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
    throw std::invalid_argument("unknown task '" + name + "' (valid: " + valid + ")");
  }
  return static_cast<TaskKind>(it - names.begin());
}

std::string to_string(TaskKind kind) { return task_names()[static_cast<std::size_t>(kind)]; }

std::size_t TaskConfig::model_vocab() const {
  switch (kind) {
    case TaskKind::in_context_recall:
    case TaskKind::mqar: return vocab_size + 1;
    case TaskKind::noisy_recall: return vocab_size + 1 + noise_vocab;
    case TaskKind::fuzzy_recall: return vocab_size + 2;
    case TaskKind::selective_copy: return vocab_size + 2;
    case TaskKind::compression: return vocab_size + 1;
    case TaskKind::memorization: return vocab_size + 1;
    case TaskKind::a5: return 60;
  }
  return vocab_size;
}

std::size_t TaskConfig::pairs() const {
  if (num_pairs) return num_pairs;
  // At most half the sequence goes to the prefix.
  const std::size_t length = seq_len - std::min(seq_len, noise_count(*this));
  return std::max<std::size_t>(1, std::min(key_vocab, length / 4));
}

void TaskConfig::validate() const {
  const auto fail = [&](const std::string& why) {
    throw std::invalid_argument(to_string(kind) + " config: " + why);
  };
  if (seq_len < 1) fail("seq_len must be >= 1");
  if (train_seqs < 1 || eval_seqs < 1) fail("train_seqs and eval_seqs must be >= 1");
  const bool keyed = is_recall_kind(kind) || kind == TaskKind::fuzzy_recall || kind == TaskKind::memorization;
  if (keyed) {
    if (key_vocab < 1 || key_vocab >= vocab_size) fail("key/value split needs key_vocab in [1, vocab_size)");
    if (kind != TaskKind::memorization && (pairs() < 1 || pairs() > key_vocab)) fail("num_pairs must be in [1, key_vocab]");
  }
  if (is_recall_kind(kind)) {
    if (!(noise_fraction >= 0.0 && noise_fraction < 1.0)) fail("noise_fraction must be in [0, 1)");
    if (kind == TaskKind::noisy_recall && noise_vocab < 1) fail("noise_vocab must be >= 1");
    const std::size_t noise = noise_count(*this);
    if (noise >= seq_len) fail("noise leaves no room for pairs");
    const std::size_t length = seq_len - noise;
    if (2 * pairs() + 2 > length) fail("seq_len too short for the prefix and one query");
    if (num_queries > (length - 2 * pairs()) / 2) fail("num_queries does not fit after the prefix");
  }
  switch (kind) {
    case TaskKind::fuzzy_recall:
      if (max_motif < 1) fail("max_motif must be >= 1");
      if (pairs() * (2 * max_motif + 1) + 2 * max_motif + 1 > seq_len) {
        fail("seq_len too short for the worst-case prefix and one query");
      }
      break;
    case TaskKind::selective_copy:
      if (num_copy < 1 || vocab_size < 1) fail("num_copy and vocab_size must be >= 1");
      if (seq_len < 2 * num_copy) fail("seq_len must be >= 2 * num_copy");
      break;
    case TaskKind::compression:
      if (seq_len < 2 || vocab_size < 1) fail("needs seq_len >= 2 and vocab_size >= 1");
      break;
    case TaskKind::memorization:
      if (seq_len < 2 || seq_len % 2) fail("seq_len must be even and >= 2");
      break;
    default: break;
  }
}

TaskConfig default_config(TaskKind kind) {
  TaskConfig c;
  c.kind = kind;
  switch (kind) {
    case TaskKind::in_context_recall:
    case TaskKind::noisy_recall:
    case TaskKind::fuzzy_recall: break;
    case TaskKind::selective_copy: c.seq_len = 256; break;
    case TaskKind::compression: c.seq_len = 32; break;
    case TaskKind::memorization:
      c.vocab_size = 256;
      c.key_vocab = 128;
      c.seq_len = 32;
      c.train_seqs = 256;
      break;
    case TaskKind::mqar:
      c.vocab_size = 256;
      c.key_vocab = 128;
      c.seq_len = 2048;
      break;
    case TaskKind::a5:
      c.vocab_size = 60;
      c.seq_len = 16;
      break;
  }
  return c;
}

std::int32_t filler_token(const TaskConfig& c) {
  if (c.kind == TaskKind::fuzzy_recall) return id(c.vocab_size + 1);
  if (!is_recall_kind(c.kind)) throw std::invalid_argument(to_string(c.kind) + " has no filler token");
  return id(c.vocab_size);
}

std::int32_t separator_token(const TaskConfig& c) {
  if (c.kind != TaskKind::fuzzy_recall) throw std::invalid_argument(to_string(c.kind) + " has no separator token");
  return id(c.vocab_size);
}

std::int32_t blank_token(const TaskConfig& c) {
  if (c.kind != TaskKind::selective_copy) throw std::invalid_argument(to_string(c.kind) + " has no blank token");
  return id(c.vocab_size);
}

std::int32_t insert_token(const TaskConfig& c) {
  if (c.kind == TaskKind::selective_copy) return id(c.vocab_size + 1);
  if (c.kind == TaskKind::memorization) return id(c.vocab_size);
  throw std::invalid_argument(to_string(c.kind) + " has no insert token");
}

std::int32_t compress_token(const TaskConfig& c) {
  if (c.kind != TaskKind::compression) throw std::invalid_argument(to_string(c.kind) + " has no compression token");
  return id(c.vocab_size);
}

std::vector<std::int32_t> memorization_dictionary(const TaskConfig& c) {
  auto gen = rng::engine({c.seed, kMemorization, 0xd1c7ULL});
  std::vector<std::int32_t> dict(c.key_vocab);
  for (auto& v : dict) v = id(c.key_vocab + uniform_index(gen, c.value_vocab()));
  return dict;
}

Sequence generate(const TaskConfig& config, Split split, std::size_t index) {
  config.validate();
  switch (config.kind) {
    case TaskKind::in_context_recall:
    case TaskKind::noisy_recall:
    case TaskKind::mqar: return gen_kv(config, split, index);
    case TaskKind::fuzzy_recall: return gen_fuzzy(config, split, index);
    case TaskKind::selective_copy: return gen_selective_copy(config, split, index);
    case TaskKind::compression: return gen_compression(config, split, index);
    case TaskKind::memorization: return gen_memorization(config, split, index);
    case TaskKind::a5: return gen_a5(config, split, index);
  }
  throw std::logic_error("unreachable task kind");
}

model::Batch make_batch(const TaskConfig& config, Split split, std::span<const std::size_t> indices) {
  model::Batch b;
  b.batch = indices.size();
  b.steps = config.seq_len;
  b.tokens.reserve(b.batch * b.steps);
  b.targets.reserve(b.batch * b.steps);
  b.mask.reserve(b.batch * b.steps);
  for (const auto i : indices) {
    const auto s = generate(config, split, i);
    b.tokens.insert(b.tokens.end(), s.tokens.begin(), s.tokens.end());
    b.targets.insert(b.targets.end(), s.targets.begin(), s.targets.end());
    b.mask.insert(b.mask.end(), s.mask.begin(), s.mask.end());
  }
  return b;
}

model::Batch make_batch(const TaskConfig& config, Split split, std::size_t first, std::size_t count) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), first);
  return make_batch(config, split, idx);
}

std::uint64_t dataset_hash(const TaskConfig& config, Split split, std::size_t count) {
  std::uint64_t h = kFnvOffset;
  for (std::size_t i = 0; i < count; ++i) {
    const auto s = generate(config, split, i);
    fnv(h, s.tokens.data(), s.tokens.size() * sizeof(std::int32_t));
    fnv(h, s.targets.data(), s.targets.size() * sizeof(std::int32_t));
    fnv(h, s.mask.data(), s.mask.size());
  }
  return h;
}

bool is_even(const Permutation& p) {
  std::size_t inversions = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = i + 1; j < 5; ++j) inversions += p.image[i] > p.image[j];
  }
  return inversions % 2 == 0;
}

void check_bijection(const Permutation& p) {
  std::array<bool, 5> seen{};
  for (const auto x : p.image) {
    if (x >= 5 || seen[x]) throw std::invalid_argument("permutation image is not a bijection on {0..4}");
    seen[x] = true;
  }
}

Permutation a5_compose(const Permutation& g, const Permutation& h) {
  check_bijection(g);
  check_bijection(h);
  if (!is_even(g) || !is_even(h)) throw std::invalid_argument("a5_compose: odd permutation is not in A5");
  Permutation out;
  for (std::size_t x = 0; x < 5; ++x) out.image[x] = g.image[h.image[x]];
  return out;
}

Permutation a5_inverse(const Permutation& g) {
  check_bijection(g);
  Permutation out;
  for (std::uint8_t x = 0; x < 5; ++x) out.image[g.image[x]] = x;
  return out;
}

const std::vector<Permutation>& a5_elements() {
  static const std::vector<Permutation> elems = [] {
    std::vector<Permutation> out;
    Permutation p;
    do {
      if (is_even(p)) out.push_back(p);
    } while (std::next_permutation(p.image.begin(), p.image.end()));
    return out;
  }();
  return elems;
}

std::int32_t a5_token(const Permutation& p) {
  const auto& elems = a5_elements();
  const auto it = std::lower_bound(elems.begin(), elems.end(), p);
  if (it == elems.end() || *it != p) throw std::invalid_argument("a5_token: permutation is not in A5");
  return id(static_cast<std::size_t>(it - elems.begin()));
}

const Permutation& a5_element(std::int32_t token) {
  const auto& elems = a5_elements();
  if (token < 0 || static_cast<std::size_t>(token) >= elems.size()) {
    throw std::invalid_argument("a5_element: token out of range [0, 60)");
  }
  return elems[static_cast<std::size_t>(token)];
}

void write_dataset(const std::filesystem::path& path, std::span<const Sequence> records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  const auto put = [&](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
  out.write(kDatasetMagic, sizeof(kDatasetMagic));
  put(kDatasetVersion);
  put(static_cast<std::uint64_t>(records.size()));
  for (const auto& r : records) {
    const std::size_t n = r.tokens.size();
    if (r.targets.size() != n || r.mask.size() != n) throw std::invalid_argument("write_dataset: ragged record");
    put(static_cast<std::uint32_t>(n));
    out.write(reinterpret_cast<const char*>(r.tokens.data()), static_cast<std::streamsize>(n * sizeof(std::int32_t)));
    out.write(reinterpret_cast<const char*>(r.targets.data()), static_cast<std::streamsize>(n * sizeof(std::int32_t)));
    std::vector<std::uint8_t> bits((n + 7) / 8, 0);
    for (std::size_t i = 0; i < n; ++i) {
      if (r.mask[i]) bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    }
    out.write(reinterpret_cast<const char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
  }
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

std::vector<Sequence> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  const auto get = [&](void* dst, std::size_t bytes) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(bytes));
    if (!in) throw std::runtime_error("truncated dataset file '" + path.string() + "'");
  };
  char magic[sizeof(kDatasetMagic)];
  get(magic, sizeof(magic));
  if (!std::equal(std::begin(magic), std::end(magic), std::begin(kDatasetMagic))) {
    throw std::runtime_error("'" + path.string() + "' is not a dataset file (bad magic)");
  }
  std::uint32_t version = 0;
  get(&version, sizeof(version));
  if (version != kDatasetVersion) throw std::runtime_error("unsupported dataset version " + std::to_string(version));
  std::uint64_t count = 0;
  get(&count, sizeof(count));
  std::vector<Sequence> out;
  for (std::uint64_t r = 0; r < count; ++r) {
    std::uint32_t n = 0;
    get(&n, sizeof(n));
    Sequence s;
    s.tokens.resize(n);
    s.targets.resize(n);
    get(s.tokens.data(), n * sizeof(std::int32_t));
    get(s.targets.data(), n * sizeof(std::int32_t));
    std::vector<std::uint8_t> bits((n + 7) / 8);
    get(bits.data(), bits.size());
    s.mask.resize(n);
    for (std::size_t i = 0; i < n; ++i) s.mask[i] = (bits[i / 8] >> (i % 8)) & 1u;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace kla::tasks

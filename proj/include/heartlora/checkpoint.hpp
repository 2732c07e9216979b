// SPDX-License-Identifier: Apache-2.0
#pragma once

// "HLRA" checkpoints: a flat table of named, typed arrays.
//
//   "HLRA" | version u16 | entry count u32 |
//   entries: name_len u16 | name | dtype u8 (0 f32, 1 i8, 2 u8) | ndim u8 | dims u64[ndim] | payload |
//   CRC-32 (IEEE) u32 over every entry byte
//
// Entries keep insertion order, so decode followed by encode is byte-identical.

#include <zlib.h>

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "heartlora/binary.hpp"
#include "heartlora/error.hpp"
#include "heartlora/lora.hpp"
#include "heartlora/model.hpp"
#include "heartlora/training.hpp"
#include "heartlora/types.hpp"

namespace heartlora {

inline constexpr std::uint16_t kHlraVersion = 1;
inline constexpr std::size_t kHlraHeaderBytes = 10;

enum class DType : std::uint8_t { f32 = 0, i8 = 1, u8 = 2 };

inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 1; }

inline std::uint32_t crc32_ieee(const std::uint8_t* data, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

struct Entry {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> payload;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : dims) n *= static_cast<std::size_t>(d);
    return n;
  }
};

class Checkpoint {
 public:
  void add(Entry e) {
    if (e.name.empty() || e.name.size() > 0xFFFF) throw ContractError("checkpoint entry name must be 1..65535 bytes");
    if (e.dims.size() > 0xFF) throw ContractError("checkpoint entry '" + e.name + "' has too many dims");
    if (e.payload.size() != e.numel() * dtype_size(e.dtype))
      throw DimensionError("checkpoint entry '" + e.name + "' payload does not match its dims");
    if (!names_.insert(e.name).second) throw ContractError("duplicate checkpoint entry name '" + e.name + "'");
    entries_.push_back(std::move(e));
  }

  template <typename T>
  void put_f32(const std::string& name, const Shape& shape, std::span<const T> values) {
    std::vector<float> f(values.begin(), values.end());
    add(make(name, DType::f32, shape, f.data(), f.size() * 4));
  }

  template <typename T>
  void put_tensor(const std::string& name, const Tensor<T>& t) {
    put_f32<T>(name, t.shape, t.values);
  }

  void put_i8(const std::string& name, const Shape& shape, std::span<const std::int8_t> v) {
    add(make(name, DType::i8, shape, v.data(), v.size()));
  }

  void put_u8(const std::string& name, const Shape& shape, std::span<const std::uint8_t> v) {
    add(make(name, DType::u8, shape, v.data(), v.size()));
  }

  void put_text(const std::string& name, const std::string& text) {
    add(make(name, DType::u8, {text.size()}, text.data(), text.size()));
  }

  // Bit-exact scalars, stored as 8 raw bytes.
  void put_u64(const std::string& name, std::uint64_t v) { add(make(name, DType::u8, {8}, &v, 8)); }
  void put_f64(const std::string& name, double v) { add(make(name, DType::u8, {8}, &v, 8)); }

  bool contains(const std::string& name) const { return names_.count(name) != 0; }

  const Entry& get(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return e;
    throw IndexError("checkpoint has no entry '" + name + "'");
  }

  template <typename T>
  std::vector<T> get_f32(const std::string& name, const Shape& expected) const {
    const auto& e = expect(name, DType::f32);
    Shape got(e.dims.begin(), e.dims.end());
    if (got != expected)
      throw DimensionError("checkpoint entry '" + name + "' has shape " + shape_str(got) + ", expected " +
                           shape_str(expected));
    std::vector<float> f(e.numel());
    std::memcpy(f.data(), e.payload.data(), e.payload.size());
    return std::vector<T>(f.begin(), f.end());
  }

  template <typename T>
  void load_into(const std::string& name, Tensor<T>& t) const {
    t.values = get_f32<T>(name, t.shape);
  }

  std::string get_text(const std::string& name) const {
    const auto& e = expect(name, DType::u8);
    return std::string(e.payload.begin(), e.payload.end());
  }

  std::uint64_t get_u64(const std::string& name) const { return scalar<std::uint64_t>(name); }
  double get_f64(const std::string& name) const { return scalar<double>(name); }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::vector<std::uint8_t> encode() const {
    ByteWriter w;
    w.put_bytes("HLRA");
    w.put(kHlraVersion);
    w.put(static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
      w.put(static_cast<std::uint16_t>(e.name.size()));
      w.put_bytes(e.name);
      w.put(static_cast<std::uint8_t>(e.dtype));
      w.put(static_cast<std::uint8_t>(e.dims.size()));
      for (auto d : e.dims) w.put(d);
      w.put_array(e.payload.data(), e.payload.size());
    }
    auto& bytes = w.bytes();
    const auto crc = crc32_ieee(bytes.data() + kHlraHeaderBytes, bytes.size() - kHlraHeaderBytes);
    w.put(crc);
    return std::move(w.bytes());
  }

  static Checkpoint decode(const std::vector<std::uint8_t>& bytes) {
    ByteReader header(bytes, 0, kHlraHeaderBytes);
    if (header.get_string(4, "magic") != "HLRA") throw ParseError("bad HLRA magic", 0);
    const auto version = header.get<std::uint16_t>("version");
    if (version != kHlraVersion) throw ParseError("unsupported HLRA version " + std::to_string(version), 4);
    const auto count = header.get<std::uint32_t>("entry count");
    if (bytes.size() < kHlraHeaderBytes + 4) throw ParseError("truncated CRC", bytes.size());
    const auto body_end = bytes.size() - 4;
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + body_end, 4);
    const auto actual = crc32_ieee(bytes.data() + kHlraHeaderBytes, body_end - kHlraHeaderBytes);
    if (stored != actual) {
      char msg[96];
      std::snprintf(msg, sizeof msg, "CRC mismatch: stored %08x, computed %08x", stored, actual);
      throw CrcError(msg);
    }
    ByteReader r(bytes, kHlraHeaderBytes, body_end);
    Checkpoint ck;
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto entry_offset = r.offset();
      Entry e;
      e.name = r.get_string(r.get<std::uint16_t>("name length"), "name");
      const auto dtype_offset = r.offset();
      const auto dt = r.get<std::uint8_t>("dtype");
      if (dt > 2) throw ParseError("unknown dtype " + std::to_string(dt) + " in entry '" + e.name + "'", dtype_offset);
      e.dtype = static_cast<DType>(dt);
      e.dims.resize(r.get<std::uint8_t>("ndim"));
      for (auto& d : e.dims) d = r.get<std::uint64_t>("dims");
      std::uint64_t bytes_needed = dtype_size(e.dtype);
      for (auto d : e.dims) {
        if (d != 0 && bytes_needed > r.remaining() / d) throw ParseError("truncated payload of '" + e.name + "'", body_end);
        bytes_needed *= d;
      }
      e.payload.resize(static_cast<std::size_t>(bytes_needed));
      r.get_array(e.payload.data(), e.payload.size(), "payload");
      if (ck.contains(e.name)) throw ParseError("duplicate entry name '" + e.name + "'", entry_offset);
      ck.add(std::move(e));
    }
    if (r.remaining() != 0) throw ParseError("unexpected bytes after last entry", r.offset());
    return ck;
  }

  void save(const std::string& path) const { write_file(path, encode()); }
  static Checkpoint load(const std::string& path) { return decode(read_file(path)); }

 private:
  static Entry make(const std::string& name, DType dt, const Shape& shape, const void* data, std::size_t nbytes) {
    Entry e{name, dt, std::vector<std::uint64_t>(shape.begin(), shape.end()), std::vector<std::uint8_t>(nbytes)};
    if (nbytes) std::memcpy(e.payload.data(), data, nbytes);
    return e;
  }

  const Entry& expect(const std::string& name, DType dt) const {
    const auto& e = get(name);
    if (e.dtype != dt) throw ParseError("checkpoint entry '" + name + "' has an unexpected dtype", 0);
    return e;
  }

  template <typename U>
  U scalar(const std::string& name) const {
    const auto& e = expect(name, DType::u8);
    if (e.payload.size() != sizeof(U)) throw DimensionError("checkpoint scalar '" + name + "' has the wrong size");
    U v;
    std::memcpy(&v, e.payload.data(), sizeof(U));
    return v;
  }

  std::vector<Entry> entries_;
  std::unordered_set<std::string> names_;
};

inline void put_model_config(Checkpoint& ck, const ModelConfig& cfg) { ck.put_text("meta/model_config", cfg.to_string()); }

inline ModelConfig read_model_config(const Checkpoint& ck) {
  return ModelConfig::from_string(ck.get_text("meta/model_config"));
}

// Rejects a checkpoint written for a different architecture.
inline void check_model_config(const Checkpoint& ck, const ModelConfig& expected) {
  const auto got = read_model_config(ck);
  if (!(got == expected))
    throw ConfigError("checkpoint model config '" + got.to_string() + "' does not match '" + expected.to_string() + "'");
}

template <typename T>
void put_backbone(Checkpoint& ck, const BackboneWeights<T>& w) {
  for (const auto& [name, t] : w.named_tensors()) ck.put_tensor("backbone/" + name, *t);
}

// Every tensor comes back frozen.
template <typename T>
BackboneWeights<T> get_backbone(const Checkpoint& ck, const ModelConfig& cfg) {
  check_model_config(ck, cfg);
  auto w = init_backbone<T>(cfg, 0);
  for (auto& [name, t] : w.named_tensors()) {
    ck.load_into("backbone/" + name, *t);
    t->requires_grad = false;
  }
  return w;
}

inline void put_pattern(Checkpoint& ck, const HeadPattern& p) {
  std::vector<std::uint8_t> flat;
  for (const auto& row : p.layers) flat.insert(flat.end(), row.begin(), row.end());
  const std::size_t heads = p.layers.empty() ? 0 : p.layers[0].size();
  ck.put_u8("pattern", {p.layers.size(), heads}, flat);
}

inline HeadPattern get_pattern(const Checkpoint& ck, const ModelConfig& cfg) {
  const auto& e = ck.get("pattern");
  if (e.dtype != DType::u8 || e.dims.size() != 2 || e.dims[0] != cfg.num_layers || e.dims[1] != cfg.num_heads)
    throw DimensionError("stored head pattern does not match the model");
  HeadPattern p;
  for (std::size_t l = 0; l < cfg.num_layers; ++l)
    p.layers.emplace_back(e.payload.begin() + static_cast<std::ptrdiff_t>(l * cfg.num_heads),
                          e.payload.begin() + static_cast<std::ptrdiff_t>((l + 1) * cfg.num_heads));
  p.check(cfg.num_layers, cfg.num_heads);
  return p;
}

template <typename T>
void put_adapters(Checkpoint& ck, const AdapterSet<T>& set) {
  ck.put_u64("adapters/count", set.pairs.size());
  ck.put_u64("adapters/quantized", set.quantized ? 1 : 0);
  for (std::size_t i = 0; i < set.pairs.size(); ++i) {
    const auto& p = set.pairs[i];
    const auto base = "adapters/" + std::to_string(i) + "/";
    ck.put_text(base + "name", p.name());
    ck.put_f64(base + "scale", static_cast<double>(p.scale));
    ck.put_tensor(base + "a", *p.a);
    ck.put_tensor(base + "b", *p.b);
  }
}

template <typename T>
AdapterSet<T> get_adapters(const Checkpoint& ck, const ModelConfig& cfg) {
  check_model_config(ck, cfg);
  AdapterSet<T> set;
  set.quantized = ck.get_u64("adapters/quantized") != 0;
  const auto n = ck.get_u64("adapters/count");
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto base = "adapters/" + std::to_string(i) + "/";
    const auto name = ck.get_text(base + "name");
    const auto dot = name.find('.');
    if (name.size() < 4 || name[0] != 'L' || dot == std::string::npos || dot + 2 != name.size())
      throw ParseError("malformed adapter name '" + name + "'", 0);
    AdapterPair<T> p;
    p.layer = std::stoul(name.substr(1, dot - 1));
    p.target = parse_target(name[dot + 1]);
    p.scale = static_cast<T>(ck.get_f64(base + "scale"));
    const auto& ae = ck.get(base + "a");
    if (ae.dims.size() != 2) throw DimensionError("adapter factor must be 2-D");
    p.rank = static_cast<std::size_t>(ae.dims[1]);
    if (p.layer >= cfg.num_layers) throw ConfigError("adapter layer outside model");
    p.a = zeros<T>({cfg.embed_dim, p.rank}, true);
    p.b = zeros<T>({p.rank, cfg.embed_dim}, true);
    ck.load_into(base + "a", *p.a);
    ck.load_into(base + "b", *p.b);
    set.pairs.push_back(std::move(p));
  }
  return set;
}

template <typename T>
void put_float_buffers(Checkpoint& ck, const std::string& prefix, const std::vector<std::vector<T>>& bufs) {
  ck.put_u64(prefix + "/count", bufs.size());
  for (std::size_t i = 0; i < bufs.size(); ++i)
    ck.put_f32<T>(prefix + "/" + std::to_string(i), {bufs[i].size()}, bufs[i]);
}

template <typename T>
std::vector<std::vector<T>> get_float_buffers(const Checkpoint& ck, const std::string& prefix) {
  std::vector<std::vector<T>> out(ck.get_u64(prefix + "/count"));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto name = prefix + "/" + std::to_string(i);
    out[i] = ck.get_f32<T>(name, {ck.get(name).numel()});
  }
  return out;
}

// Complete resumable adaptation state: backbone (with the adapted classifier),
// adapters, optimizer moments, counters and the scoring-gradient buffer.
template <typename T>
void put_trainer_state(Checkpoint& ck, const TrainerState<T>& st) {
  put_backbone(ck, st.model);
  put_adapters(ck, st.adapters);
  put_float_buffers(ck, "opt/m", st.opt.m);
  put_float_buffers(ck, "opt/v", st.opt.v);
  ck.put_u64("opt/t", st.opt.t);
  ck.put_u64("state/step", st.step);
  ck.put_u64("state/next_epoch", st.next_epoch);
  ck.put_f64("state/warmup_loss", st.warmup_loss);
  ck.put_f64("state/boundary_val_accuracy", st.boundary_val_accuracy);
  put_float_buffers(ck, "scoring/a", st.scoring.a);
  put_float_buffers(ck, "scoring/b", st.scoring.b);
}

template <typename T>
TrainerState<T> get_trainer_state(const Checkpoint& ck, const ModelConfig& cfg) {
  TrainerState<T> st;
  st.model = get_backbone<T>(ck, cfg);
  st.model.head_w->requires_grad = st.model.head_b->requires_grad = true;
  st.adapters = get_adapters<T>(ck, cfg);
  st.opt.m = get_float_buffers<T>(ck, "opt/m");
  st.opt.v = get_float_buffers<T>(ck, "opt/v");
  st.opt.t = ck.get_u64("opt/t");
  st.step = ck.get_u64("state/step");
  st.next_epoch = ck.get_u64("state/next_epoch");
  st.warmup_loss = ck.get_f64("state/warmup_loss");
  st.boundary_val_accuracy = ck.get_f64("state/boundary_val_accuracy");
  st.scoring.a = get_float_buffers<T>(ck, "scoring/a");
  st.scoring.b = get_float_buffers<T>(ck, "scoring/b");
  return st;
}

// Deployment form of the adapters: dropped head slices are simply absent.
inline void put_stored_adapters(Checkpoint& ck, const StoredAdapterSet& s) {
  ck.put_u64("merged/num_heads", s.num_heads);
  ck.put_u64("merged/count", s.adapters.size());
  for (std::size_t i = 0; i < s.adapters.size(); ++i) {
    const auto& a = s.adapters[i];
    const auto base = "merged/" + std::to_string(i) + "/";
    ck.put_u64(base + "layer", a.layer);
    ck.put_u64(base + "target", static_cast<std::uint64_t>(a.target));
    ck.put_u64(base + "rank", a.rank);
    ck.put_u64(base + "width", a.width);
    ck.put_f64(base + "scale", a.scale);
    std::vector<std::uint8_t> heads(a.kept_heads.begin(), a.kept_heads.end());
    ck.put_u8(base + "heads", {heads.size()}, heads);
    const auto dh = a.width / s.num_heads;
    const auto kept = a.kept_heads.size() * dh;
    const bool rows = heads_on_a_rows(a.target);
    const Shape as = rows ? Shape{kept, a.rank} : Shape{a.width, a.rank};
    const Shape bs = rows ? Shape{a.rank, a.width} : Shape{a.rank, kept};
    if (a.int8) {
      ck.put_i8(base + "a", as, a.a_i8);
      ck.put_i8(base + "b", bs, a.b_i8);
      const std::vector<float> qs{a.a_qscale, a.b_qscale};
      ck.put_f32<float>(base + "qscale", {2}, qs);
    } else {
      ck.put_f32<float>(base + "a", as, a.a_f32);
      ck.put_f32<float>(base + "b", bs, a.b_f32);
    }
  }
}

inline StoredAdapterSet get_stored_adapters(const Checkpoint& ck) {
  StoredAdapterSet s;
  s.num_heads = ck.get_u64("merged/num_heads");
  if (s.num_heads == 0) throw ParseError("merged adapters with zero heads", 0);
  const auto n = ck.get_u64("merged/count");
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto base = "merged/" + std::to_string(i) + "/";
    StoredAdapter a;
    a.layer = ck.get_u64(base + "layer");
    const auto t = ck.get_u64(base + "target");
    if (t > 3) throw ParseError("unknown adapter target code", 0);
    a.target = static_cast<Target>(t);
    a.rank = ck.get_u64(base + "rank");
    a.width = ck.get_u64(base + "width");
    a.scale = ck.get_f64(base + "scale");
    const auto& he = ck.get(base + "heads");
    a.kept_heads.assign(he.payload.begin(), he.payload.end());
    for (auto h : a.kept_heads)
      if (h >= s.num_heads) throw ParseError("kept head index out of range", 0);
    const auto& ae = ck.get(base + "a");
    const auto& be = ck.get(base + "b");
    if (ae.dims.size() != 2 || be.dims.size() != 2) throw DimensionError("merged adapter factors must be 2-D");
    const auto dh = a.width / s.num_heads;
    const auto kept = a.kept_heads.size() * dh;
    const bool rows = heads_on_a_rows(a.target);
    const Shape as = rows ? Shape{kept, a.rank} : Shape{a.width, a.rank};
    const Shape bs = rows ? Shape{a.rank, a.width} : Shape{a.rank, kept};
    if (Shape(ae.dims.begin(), ae.dims.end()) != as || Shape(be.dims.begin(), be.dims.end()) != bs)
      throw DimensionError("merged adapter '" + base + "' has inconsistent shapes");
    a.int8 = ae.dtype == DType::i8;
    if (a.int8) {
      a.a_i8.resize(ae.payload.size());
      a.b_i8.resize(be.payload.size());
      std::memcpy(a.a_i8.data(), ae.payload.data(), ae.payload.size());
      std::memcpy(a.b_i8.data(), be.payload.data(), be.payload.size());
      const auto qs = ck.get_f32<float>(base + "qscale", {2});
      a.a_qscale = qs[0];
      a.b_qscale = qs[1];
    } else {
      a.a_f32 = ck.get_f32<float>(base + "a", as);
      a.b_f32 = ck.get_f32<float>(base + "b", bs);
    }
    s.adapters.push_back(std::move(a));
  }
  return s;
}

}  // namespace heartlora

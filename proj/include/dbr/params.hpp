#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dbr/tape.hpp"

namespace dbr {

// Named trainable tensors in a fixed creation order. The order drives
// optimizer iteration and the snapshot layout, so runs stay reproducible.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
  };

  int add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_[name] = static_cast<int>(entries_.size());
    entries_.push_back({name, std::move(t)});
    return static_cast<int>(entries_.size()) - 1;
  }

  Tensor& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return entries_[it->second].tensor;
  }
  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return entries_[it->second].tensor;
  }
  bool has(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return entries_.size(); }
  Entry& entry(std::size_t i) { return entries_[i]; }
  const Entry& entry(std::size_t i) const { return entries_[i]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  // Register every parameter as a leaf on a fresh tape.
  void bind(Tape* tape) {
    for (auto& e : entries_) {
      e.tensor.node = -1;
      if (tape) tape->leaf(e.tensor);
    }
  }

  // Deep copy of all values (snapshot for early stopping).
  std::vector<std::vector<double>> values() const {
    std::vector<std::vector<double>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(*e.tensor.buf);
    return out;
  }
  void restore(const std::vector<std::vector<double>>& vals) {
    if (vals.size() != entries_.size())
      throw std::invalid_argument("parameter snapshot size mismatch");
    for (std::size_t i = 0; i < vals.size(); ++i) {
      if (vals[i].size() != entries_[i].tensor.numel())
        throw std::invalid_argument("parameter snapshot shape mismatch at " + entries_[i].name);
      *entries_[i].tensor.buf = vals[i];
    }
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> index_;
};

// Flat little-endian snapshot:
//   magic "DBR1" | u32 version | u64 count |
//   per parameter: u32 name_len | name bytes | u32 rank | u64 dims[rank] | f64 data[numel]
namespace snapshot {

inline void save(const ParamStore& store, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open snapshot file for writing: " + path);
  f.write("DBR1", 4);
  std::uint32_t version = 1;
  f.write(reinterpret_cast<const char*>(&version), 4);
  std::uint64_t count = store.size();
  f.write(reinterpret_cast<const char*>(&count), 8);
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& e = store.entry(i);
    std::uint32_t nlen = static_cast<std::uint32_t>(e.name.size());
    f.write(reinterpret_cast<const char*>(&nlen), 4);
    f.write(e.name.data(), nlen);
    std::uint32_t rank = static_cast<std::uint32_t>(e.tensor.rank());
    f.write(reinterpret_cast<const char*>(&rank), 4);
    for (int d : e.tensor.shape) {
      std::uint64_t ext = static_cast<std::uint64_t>(d);
      f.write(reinterpret_cast<const char*>(&ext), 8);
    }
    f.write(reinterpret_cast<const char*>(e.tensor.data()),
            static_cast<std::streamsize>(e.tensor.numel() * sizeof(double)));
  }
  if (!f) throw std::runtime_error("short write to snapshot file: " + path);
}

struct Loaded {
  std::vector<std::string> names;
  std::vector<Tensor> tensors;
};

inline Loaded load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open snapshot file: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "DBR1", 4) != 0)
    throw std::runtime_error("not a DBR1 snapshot: " + path);
  std::uint32_t version = 0;
  f.read(reinterpret_cast<char*>(&version), 4);
  if (version != 1) throw std::runtime_error("unsupported snapshot version");
  std::uint64_t count = 0;
  f.read(reinterpret_cast<char*>(&count), 8);
  Loaded out;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t nlen = 0;
    f.read(reinterpret_cast<char*>(&nlen), 4);
    std::string name(nlen, '\0');
    f.read(name.data(), nlen);
    std::uint32_t rank = 0;
    f.read(reinterpret_cast<char*>(&rank), 4);
    Shape shape(rank);
    for (std::uint32_t d = 0; d < rank; ++d) {
      std::uint64_t ext = 0;
      f.read(reinterpret_cast<char*>(&ext), 8);
      shape[d] = static_cast<int>(ext);
    }
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!f) throw std::runtime_error("truncated snapshot: " + path);
    out.names.push_back(std::move(name));
    out.tensors.push_back(std::move(t));
  }
  return out;
}

inline void load_into(ParamStore& store, const std::string& path) {
  Loaded got = load(path);
  if (got.names.size() != store.size())
    throw std::runtime_error("snapshot holds " + std::to_string(got.names.size()) +
                             " parameters, model expects " + std::to_string(store.size()));
  for (std::size_t i = 0; i < got.names.size(); ++i) {
    Tensor& dst = store.get(got.names[i]);
    if (dst.shape != got.tensors[i].shape)
      throw std::runtime_error("snapshot shape mismatch for " + got.names[i] + ": file " +
                               shape_str(got.tensors[i].shape) + ", model " + shape_str(dst.shape));
    *dst.buf = *got.tensors[i].buf;
  }
}

}  // namespace snapshot
}  // namespace dbr

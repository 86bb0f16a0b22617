// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "tsdet/error.hpp"
#include "tsdet/tensor.hpp"

namespace tsdet {

// Named, ordered collection of tensors. Teacher and student are two instances.
template <typename Real>
class BasicParameterSet {
 public:
  using TensorT = BasicTensor<Real>;

  TensorT& add(std::string name, TensorT t) {
    for (const auto& e : entries_)
      if (e.first == name) throw Error("parameter '" + name + "' already defined");
    t.requires_grad = true;
    entries_.emplace_back(std::move(name), std::move(t));
    return entries_.back().second;
  }

  std::size_t size() const { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_.at(i).first; }
  TensorT& at(std::size_t i) { return entries_.at(i).second; }
  const TensorT& at(std::size_t i) const { return entries_.at(i).second; }

  TensorT& get(const std::string& name) { return entries_.at(index_of(name)).second; }
  const TensorT& get(const std::string& name) const { return entries_.at(index_of(name)).second; }
  bool contains(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.first == name) return true;
    return false;
  }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].first == name) return i;
    throw Error("unknown parameter '" + name + "'");
  }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }
  void clear_grad() {
    for (auto& e : entries_) e.second.grad.clear();
  }

  // Same names in the same order with the same shapes; throws naming the
  // first offending parameter, or returns silently.
  void require_congruent(const BasicParameterSet& other) const {
    if (other.size() != size())
      throw ShapeError("parameter sets differ in size: " + std::to_string(size()) + " vs " + std::to_string(other.size()));
    for (std::size_t i = 0; i < size(); ++i) {
      if (name(i) != other.name(i)) throw ShapeError("parameter " + std::to_string(i) + " named '" + name(i) + "' vs '" + other.name(i) + "'");
      if (at(i).shape != other.at(i).shape)
        throw ShapeError("parameter '" + name(i) + "' has shape " + shape_str(at(i).shape) + " vs " + shape_str(other.at(i).shape));
    }
  }

  bool values_equal(const BasicParameterSet& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (name(i) != other.name(i) || at(i).shape != other.at(i).shape || at(i).data != other.at(i).data) return false;
    return true;
  }

  template <typename Other>
  BasicParameterSet<Other> cast() const {
    BasicParameterSet<Other> out;
    for (const auto& e : entries_) out.add(e.first, e.second.template cast<Other>());
    return out;
  }

  // Values only; grads are not carried over.
  BasicParameterSet clone() const {
    BasicParameterSet out;
    for (const auto& e : entries_) out.add(e.first, TensorT(e.second.shape, e.second.data));
    return out;
  }

 private:
  std::vector<std::pair<std::string, TensorT>> entries_;
};

using ParameterSet = BasicParameterSet<float>;

// Checkpoint layout (all integers little-endian):
//   "TSDT1" | u32 count | per parameter: u16 name_len, name bytes (UTF-8),
//   u8 rank, u32 dims[rank], f32 values[numel]
namespace checkpoint {

namespace detail {

inline void put_u(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& data) : data_(data) {}
  std::uint64_t u(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw IoError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::string& data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline constexpr char kMagic[] = "TSDT1";

inline std::string serialize(const ParameterSet& params) {
  std::string out(kMagic, 5);
  detail::put_u(out, params.size(), 4);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.name(i);
    const auto& t = params.at(i);
    if (name.size() > 0xFFFF) throw IoError("parameter name too long: " + name.substr(0, 32));
    detail::put_u(out, name.size(), 2);
    out += name;
    detail::put_u(out, static_cast<std::uint64_t>(t.rank()), 1);
    for (int d : t.shape) detail::put_u(out, static_cast<std::uint32_t>(d), 4);
    for (float v : t.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      detail::put_u(out, bits, 4);
    }
  }
  return out;
}

inline ParameterSet deserialize(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.bytes(5) != std::string(kMagic, 5)) throw IoError("not a checkpoint: bad magic");
  const auto count = r.u(4);
  ParameterSet params;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = r.u(2);
    std::string name = r.bytes(len);
    const auto rank = r.u(1);
    Shape shape;
    for (std::uint64_t k = 0; k < rank; ++k) shape.push_back(static_cast<int>(r.u(4)));
    std::vector<float> values(shape_numel(shape));
    for (auto& v : values) {
      const auto bits = static_cast<std::uint32_t>(r.u(4));
      std::memcpy(&v, &bits, 4);
    }
    params.add(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw IoError("checkpoint has trailing bytes at offset " + std::to_string(r.pos()));
  return params;
}

inline void save(const ParameterSet& params, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint for writing: " + path);
  const std::string bytes = serialize(params);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing checkpoint: " + path);
}

inline ParameterSet load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return deserialize(bytes);
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

}  // namespace checkpoint

}  // namespace tsdet

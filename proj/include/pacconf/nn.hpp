#pragma once

// Dense feed-forward networks over a flat parameter vector.

#include <json.hpp>

#include <random>
#include <string>
#include <vector>

#include "pacconf/error.hpp"
#include "pacconf/params.hpp"
#include "pacconf/tape.hpp"

namespace pacconf {

enum class Activation { relu, tanh, sigmoid, softplus, identity };
enum class Head { identity, log_softmax };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
    case Activation::softplus: return "softplus";
    case Activation::identity: return "identity";
  }
  return "identity";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "softplus") return Activation::softplus;
  if (s == "identity") return Activation::identity;
  throw ParseError("unknown activation '" + s + "'");
}

/// Architecture descriptor: layer widths (input first, output last), the
/// activation shared by hidden layers, the output activation and head.
struct Arch {
  std::vector<long> sizes;
  Activation hidden = Activation::relu;
  Activation output = Activation::identity;
  Head head = Head::identity;

  long inputs() const { return sizes.front(); }
  long outputs() const { return sizes.back(); }
  std::size_t layers() const { return sizes.size() - 1; }

  void validate() const {
    if (sizes.size() < 2) throw ShapeError("Arch: need at least input and output sizes");
    for (long s : sizes) {
      if (s <= 0) throw ShapeError("Arch: layer sizes must be positive");
    }
  }

  /// W{l} is (in x out), b{l} is (1 x out).
  LayoutPtr layout() const {
    validate();
    Layout::Builder b;
    for (std::size_t l = 0; l < layers(); ++l) {
      b.add("W" + std::to_string(l), sizes[l], sizes[l + 1], sizes[l]);
      b.add("b" + std::to_string(l), 1, sizes[l + 1], sizes[l]);
    }
    return b.build();
  }

  bool operator==(const Arch&) const = default;
};

inline void to_json(nlohmann::json& j, const Arch& a) {
  j = nlohmann::json{{"sizes", a.sizes},
                     {"hidden", to_string(a.hidden)},
                     {"output", to_string(a.output)},
                     {"head", a.head == Head::log_softmax ? "log_softmax" : "identity"}};
}

inline void from_json(const nlohmann::json& j, Arch& a) {
  a.sizes = j.at("sizes").get<std::vector<long>>();
  a.hidden = activation_from_string(j.value("hidden", std::string("relu")));
  a.output = activation_from_string(j.value("output", std::string("identity")));
  const auto head = j.value("head", std::string("identity"));
  if (head == "log_softmax") {
    a.head = Head::log_softmax;
  } else if (head == "identity") {
    a.head = Head::identity;
  } else {
    throw ParseError("unknown head '" + head + "'");
  }
  a.validate();
}

inline Var apply_activation(Var x, Activation a) {
  switch (a) {
    case Activation::relu: return ad::relu(x);
    case Activation::tanh: return ad::tanh(x);
    case Activation::sigmoid: return ad::sigmoid(x);
    case Activation::softplus: return ad::softplus(x);
    case Activation::identity: return x;
  }
  return x;
}

/// Batched forward pass: `input` is (batch x inputs), `params` a column
/// vector laid out as arch.layout(). Returns (batch x outputs).
inline Var forward_mlp(Var params, const Arch& arch, Var input) {
  arch.validate();
  if (params.cols() != 1) throw ShapeError("forward_mlp: params must be a column vector");
  if (input.cols() != arch.inputs()) {
    throw ShapeError("forward_mlp: input width " + std::to_string(input.cols()) + " != " + std::to_string(arch.inputs()));
  }
  long offset = 0;
  long expected = 0;
  for (std::size_t l = 0; l < arch.layers(); ++l) expected += (arch.sizes[l] + 1) * arch.sizes[l + 1];
  if (params.rows() != expected) throw ShapeError("forward_mlp: parameter count does not match architecture");

  Var h = input;
  for (std::size_t l = 0; l < arch.layers(); ++l) {
    const long in = arch.sizes[l];
    const long out = arch.sizes[l + 1];
    Var w = ad::slice(params, offset, in, out);
    offset += in * out;
    Var b = ad::slice(params, offset, 1, out);
    offset += out;
    h = ad::add_row(ad::matmul(h, w), b);
    h = apply_activation(h, l + 1 == arch.layers() ? arch.output : arch.hidden);
  }
  if (arch.head == Head::log_softmax) h = ad::log_softmax_rows(h);
  return h;
}

/// Non-differentiable convenience wrapper.
inline Mat forward_mlp(const ParamVector& params, const Arch& arch, const Mat& input) {
  Tape tape;
  return forward_mlp(tape.constant(params.values), arch, tape.constant(input)).value();
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation for every block.
template <class Rng>
ParamVector init_mlp(const Arch& arch, Rng& rng) {
  auto layout = arch.layout();
  Vec v(layout->size());
  for (const auto& s : layout->segments()) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (long i = 0; i < s.size(); ++i) v(s.offset + i) = u(rng);
  }
  return ParamVector(std::move(layout), std::move(v));
}

}  // namespace pacconf

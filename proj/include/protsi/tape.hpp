#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "protsi/tensor.hpp"

namespace protsi {

class Tape;

// Handle to a node on a Tape.
struct Var {
  Tape* tape = nullptr;
  int index = -1;
  bool valid() const { return tape != nullptr && index >= 0; }
};

struct Parameter {
  std::string id;
  Tensor tensor;
  bool trainable = true;
};

// Ordered, uniquely-named parameter collection.
class ParameterSet {
 public:
  Parameter& add(std::string id, Tensor tensor, bool trainable = true);
  Parameter& at(const std::string& id);
  const Parameter& at(const std::string& id) const;
  bool contains(const std::string& id) const { return index_.count(id) > 0; }
  std::vector<Parameter>& items() { return params_; }
  const std::vector<Parameter>& items() const { return params_; }
  std::size_t size() const { return params_.size(); }
  bool operator==(const ParameterSet& o) const;

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

using GradientMap = std::map<std::string, Tensor>;

// Accumulates contributions into parent adjoints. Receives the adjoint of
// the node's own output.
using BackwardFn = std::function<void(Tape&, const Tensor& gout)>;

// The computation record: an append-only list of executed primitives with
// enough captured state to replay backward accumulation. Single-threaded;
// distinct tapes may run concurrently.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  int node_count() const { return static_cast<int>(nodes_.size()); }

  // Leaf holding a constant: no gradient flows into it.
  Var constant(Tensor value);

  // Leaf bound to a parameter. Trainable leaves are reported by gradients().
  Var leaf(const Parameter& p);

  const Tensor& value(Var v) const;

  // Reverse accumulation from a scalar node. Returns one gradient per
  // registered trainable parameter; parameters the scalar does not reach
  // get zero tensors.
  GradientMap gradients(Var scalar);

  // Number of times log_floor clamped its argument on this tape.
  long clamp_events() const { return clamp_events_; }

  // --- internals used by the primitive free functions ---
  int push(Tensor value, const char* kind, BackwardFn backward);
  Tensor& adjoint(int index);
  void note_clamp() { ++clamp_events_; }

 private:
  struct Node {
    Tensor value;
    const char* kind;
    BackwardFn backward;  // empty for leaves
  };

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, int>> trainable_leaves_;  // (param id, node)
  std::vector<Tensor> adjoints_;  // live only inside gradients()
  long clamp_events_ = 0;
  bool recording_ = true;
};

enum class Distance { euclidean, squared_euclidean };

Distance distance_from_string(const std::string& s);
std::string to_string(Distance d);

// --- forward primitives -------------------------------------------------
// Shape rules are checked on entry; violations throw UsageError naming the
// primitive and the offending shapes. Outputs are checked finite and throw
// NumericError otherwise.

Var matmul(Var a, Var b);           // [m,k]x[k,n] -> [m,n]; [m,k]x[k] -> [m]
Var add(Var a, Var b);              // same shape
Var mul(Var a, Var b);              // elementwise, same shape
Var concat(std::span<const Var> parts);  // rank-1 parts -> rank-1
Var relu(Var x);
Var sigmoid(Var x);
Var tanh(Var x);
Var mean_rows(Var m);               // [r,c] -> [c]
Var euclidean_distance(Var a, Var b);          // rank-1, same length -> scalar
Var squared_euclidean_distance(Var a, Var b);  // rank-1, same length -> scalar
Var distance(Distance kind, Var a, Var b);
Var softmax(Var x);                 // rank-1; max-subtracted
Var log(Var x);                     // elementwise; x <= 0 is a domain error
Var log_floor(Var x, double floor); // log(max(x, floor)); clamps are counted
Var exp(Var x);
Var scale(Var x, double c);
Var dot(Var a, Var b);              // rank-1, same length -> scalar
Var slice(Var x, int offset, int len);  // rank-1 subrange
Var row(Var m, int r);              // [r,c] -> [c]
Var stack_rows(std::span<const Var> rows_in);  // b rank-1 of length c -> [b,c]

enum class BatchNormMode { train, infer };

struct BatchStats {
  Tensor mean;
  Tensor variance;  // biased (divide by batch size)
};

// Batch normalization over a batch of same-length vectors with learnable
// scale/shift. Train mode normalizes by batch statistics (epsilon below) and
// differentiates through them; infer mode uses the supplied running
// statistics. Train mode requires batch size >= 2. The computed batch
// statistics are written to *stats_out when given, so callers can maintain
// running averages between passes.
inline constexpr double kBatchNormEpsilon = 1e-5;

Var batchnorm(std::span<const Var> batch, Var gamma, Var beta, BatchNormMode mode,
              const Tensor* running_mean = nullptr, const Tensor* running_var = nullptr,
              BatchStats* stats_out = nullptr);

}  // namespace protsi

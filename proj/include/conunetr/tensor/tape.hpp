#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "conunetr/tensor/tensor.hpp"

namespace conunetr {

// Append-only record of the executed forward ops. Entries are stored in
// execution order, so the reverse walk is a valid reverse-topological order:
// every input of an entry was produced by an earlier entry or is a leaf.
template <typename Scalar>
class Tape {
 public:
  struct Entry {
    const char* op;
    std::shared_ptr<TensorNode<Scalar>> output;
    std::function<void()> accumulate;  // adds into the input nodes' grads
  };

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

  void record(const char* op, std::shared_ptr<TensorNode<Scalar>> output,
              std::function<void()> accumulate) {
    entries_.push_back(Entry{op, std::move(output), std::move(accumulate)});
  }

  // Seeds d(loss)/d(loss) = 1 and replays the record backward once,
  // accumulating (summing) gradients into every requires_grad node reached.
  void backward(const Tensor<Scalar>& loss) {
    if (loss.numel() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                  loss.shape().str());
    }
    if (loss.node()->producer != this) {
      throw std::invalid_argument(
          "backward: tensor was not produced by an op recorded on this tape");
    }
    loss.node()->grad.assign(1, Scalar(1));
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output->grad.empty()) continue;  // no gradient flowed here
      it->accumulate();
    }
  }

  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<Entry> entries_;
};

// RAII activation of a tape for the current thread.
template <typename Scalar>
class RecordScope {
 public:
  explicit RecordScope(Tape<Scalar>& tape) : previous_(Tape<Scalar>::active()) {
    Tape<Scalar>::active() = &tape;
  }
  ~RecordScope() { Tape<Scalar>::active() = previous_; }

  RecordScope(const RecordScope&) = delete;
  RecordScope& operator=(const RecordScope&) = delete;

 private:
  Tape<Scalar>* previous_;
};

// The tape an op should record onto, or nullptr when not recording
// (no active tape, or no differentiable input).
template <typename Scalar>
inline Tape<Scalar>* recording_tape(std::initializer_list<const Tensor<Scalar>*> inputs) {
  Tape<Scalar>* tape = Tape<Scalar>::active();
  if (tape == nullptr) return nullptr;
  for (const Tensor<Scalar>* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

// Marks `out` as produced on `tape` so backward() can verify provenance.
template <typename Scalar>
inline void mark_output(Tensor<Scalar>& out, Tape<Scalar>* tape) {
  if (tape != nullptr) {
    out.node()->requires_grad = true;
    out.node()->producer = tape;
  }
}

}  // namespace conunetr

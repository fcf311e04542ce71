#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "mam/tensor.hpp"

namespace mam {

// Flat view over a parameter struct produced by its visit_params overload.
// Enumeration order is the declaration order of the visitor, which fixes the
// parameter ids used by tapes, the optimizer, and checkpoints.
struct ParamIndex {
  std::vector<std::string> names;
  std::vector<Tensor*> tensors;
  std::unordered_map<const void*, int> pid_of;

  long long total_size() const {
    long long n = 0;
    for (const Tensor* t : tensors) n += t->numel();
    return n;
  }
};

template <class P>
ParamIndex index_params(P& p) {
  ParamIndex ix;
  visit_params(p, [&](const std::string& name, Tensor& t) {
    ix.pid_of.emplace(&t, static_cast<int>(ix.names.size()));
    ix.names.push_back(name);
    ix.tensors.push_back(&t);
  });
  return ix;
}

}  // namespace mam

#pragma once

#include <span>
#include <vector>

#include "ddae/tensor.hpp"

namespace ddae {

// Images in NCHW scaled to [-1, 1] with optional integer class labels.
struct ImageBatch {
  Tensor data;
  std::vector<int> labels;  // empty when unlabeled
  int num_classes = 0;

  int size() const { return data.empty() ? 0 : data.dim(0); }
  int channels() const { return data.dim(1); }
  int image_size() const { return data.dim(2); }
  bool labeled() const { return !labels.empty(); }

  // Throws DataError on non-square images, non-finite pixels or bad labels.
  void validate() const;
  ImageBatch subset(std::span<const int> idx) const;
};

// Train split plus an optional designated held-out split.
struct Dataset {
  ImageBatch train;
  ImageBatch test;  // empty when the source has no designated test split
  bool has_test() const { return test.size() > 0; }
};

}  // namespace ddae

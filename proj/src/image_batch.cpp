#include "ddae/image_batch.hpp"

#include <string>

#include "ddae/error.hpp"

namespace ddae {

void ImageBatch::validate() const {
  if (data.empty()) return;
  if (data.ndim() != 4) throw DataError("image batch must be NCHW, got " + shape_str(data.shape()));
  if (data.dim(2) != data.dim(3)) throw DataError("images must be square, got " + shape_str(data.shape()));
  if (!data.all_finite()) throw DataError("image batch contains non-finite pixels");
  if (!labels.empty()) {
    if (static_cast<int>(labels.size()) != data.dim(0))
      throw DataError("label count " + std::to_string(labels.size()) + " does not match image count " +
                      std::to_string(data.dim(0)));
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] < 0 || labels[i] >= num_classes)
        throw DataError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                        " outside [0, " + std::to_string(num_classes) + ")");
  }
}

ImageBatch ImageBatch::subset(std::span<const int> idx) const {
  ImageBatch out;
  out.data = data.gather_rows(idx);
  out.num_classes = num_classes;
  if (!labels.empty())
    for (int i : idx) out.labels.push_back(labels.at(static_cast<std::size_t>(i)));
  return out;
}

}  // namespace ddae

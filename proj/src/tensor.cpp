#include "mmseg/tensor.hpp"

namespace mmseg {

std::string to_string(const Shape5& s) {
  return "(" + std::to_string(s.batch) + "," + std::to_string(s.channels) + "," +
         std::to_string(s.depth) + "," + std::to_string(s.height) + "," +
         std::to_string(s.width) + ")";
}

} // namespace mmseg

#include "broadcam/image.hpp"

#include <algorithm>
#include <cmath>

#include "broadcam/errors.hpp"

namespace broadcam {
namespace {

struct Tap {
  int lo;
  int hi;
  double frac;
};

std::vector<Tap> axis_taps(int src, int dst) {
  std::vector<Tap> taps(dst);
  const double scale = dst > 1 ? static_cast<double>(src - 1) / (dst - 1) : 0.0;
  for (int i = 0; i < dst; ++i) {
    const double pos = i * scale;
    int lo = static_cast<int>(std::floor(pos));
    lo = std::clamp(lo, 0, src - 1);
    const int hi = std::min(lo + 1, src - 1);
    taps[i] = {lo, hi, pos - lo};
  }
  return taps;
}

}  // namespace

std::vector<double> resize_bilinear(std::span<const double> src, int src_h, int src_w,
                                    int dst_h, int dst_w) {
  if (src_h < 1 || src_w < 1 || dst_h < 1 || dst_w < 1) {
    throw Error(ErrorCode::kInvalidArgument, "resize_bilinear: empty grid");
  }
  if (src.size() != static_cast<std::size_t>(src_h) * src_w) {
    throw Error(ErrorCode::kShapeMismatch, "resize_bilinear: source size mismatch");
  }
  if (src_h == dst_h && src_w == dst_w) return {src.begin(), src.end()};

  const auto ys = axis_taps(src_h, dst_h);
  const auto xs = axis_taps(src_w, dst_w);
  std::vector<double> out(static_cast<std::size_t>(dst_h) * dst_w);
  for (int y = 0; y < dst_h; ++y) {
    const auto& ty = ys[y];
    const double* r0 = src.data() + static_cast<std::size_t>(ty.lo) * src_w;
    const double* r1 = src.data() + static_cast<std::size_t>(ty.hi) * src_w;
    for (int x = 0; x < dst_w; ++x) {
      const auto& tx = xs[x];
      const double top = r0[tx.lo] + (r0[tx.hi] - r0[tx.lo]) * tx.frac;
      const double bottom = r1[tx.lo] + (r1[tx.hi] - r1[tx.lo]) * tx.frac;
      out[static_cast<std::size_t>(y) * dst_w + x] = top + (bottom - top) * ty.frac;
    }
  }
  return out;
}

}  // namespace broadcam

#pragma once

#include <span>
#include <vector>

namespace broadcam {

// Bilinear resampling with corner-aligned sampling: output pixel (0,0) and
// (H-1,W-1) land exactly on the source corners. A size-1 output axis samples
// source row/column 0.
std::vector<double> resize_bilinear(std::span<const double> src, int src_h, int src_w,
                                    int dst_h, int dst_w);

}  // namespace broadcam

#pragma once

#include "unicon/tensor.hpp"

namespace unicon {

// Corner-aligned trilinear resampling of a [D x H x W] volume. Target dims
// must be >= 2; equal source and target shapes return an exact copy.
Tensor resample_volume(const Tensor& volume, const Shape& target);

// Same interpolation applied to every column of a [D*H*W x c] grid-major table
// (e.g. a positional embedding laid out over the patch grid).
Tensor resample_grid_table(const Tensor& table, const Shape& grid, const Shape& target_grid);

}  // namespace unicon

#pragma once

#include <random>
#include <span>

#include "bld/autograd.hpp"
#include "bld/corpus.hpp"
#include "bld/image.hpp"
#include "bld/nn.hpp"

namespace bld {

/// image * m, zero (mid grey) outside the mask.
Image masked(const Image& img, const Mask& m);
Mask rect_mask(const Rect& r, int height, int width);

/// Fraction of the shape's bounding box that falls inside r.
double bbox_coverage(const Rect& bbox, const Rect& r);

/// A masked training view of a scene and the label it should be read as.
struct MaskedView {
  Image image;
  int label;
};

/// Full frame, a box around the shape, or a random box labelled by how much of the shape it keeps.
MaskedView sample_masked_view(const Scene& s, std::mt19937_64& rng);

/// Four-stage strided conv trunk with global pooling and one hidden layer: [N,3,H,W] -> [N,hidden].
namespace trunk {

void add_params(nn::ParamSet& ps, int hidden, std::mt19937_64& rng);
ag::Var features(const nn::ParamSet& ps, const ag::Var& x);

}  // namespace trunk

}  // namespace bld

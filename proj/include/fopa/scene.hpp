// SPDX-License-Identifier: Apache-2.0
//
// Synthetic placement scenes: backgrounds with a sky band, a ground band and
// box obstacles; silhouette foregrounds; a rule-based placement oracle;
// compositing; and the network input encodings.

#ifndef FOPA_SCENE_HPP
#define FOPA_SCENE_HPP

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fopa/image.hpp"

namespace fopa {

/// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct Box {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int area() const { return std::max(0, x1 - x0) * std::max(0, y1 - y0); }
  bool operator==(const Box &) const = default;
};

Box intersect(const Box &a, const Box &b);

struct Background {
  int id = 0;
  Image pixels;          // RGB
  int floor_top_row = 0; // first row of the ground band
  std::vector<Box> obstacles;
};

struct ForegroundObject {
  int id = 0;
  Image pixels;  // RGB, native size
  Image mask;    // gray, values in {0,1}
  int base_height() const { return pixels.height; }
};

struct Placement {
  double scale = 1.0;
  int x = 0;  // column of the object centre
  int y = 0;  // row of the object centre
};

struct PixelAnnotation {
  int x = 0;
  int y = 0;
  int label = 0;
  bool operator==(const PixelAnnotation &) const = default;
};

struct AnnotatedPair {
  int pair_id = 0;
  int fg_id = 0;
  int bg_id = 0;
  double scale = 1.0;
  std::vector<PixelAnnotation> annotations;
};

/// One image-level judgement: a foreground at a scale and location.
struct ImageLevelRecord {
  int fg_id = 0;
  int bg_id = 0;
  double scale = 1.0;
  int x = 0;
  int y = 0;
  int label = 0;
  bool operator==(const ImageLevelRecord &) const = default;
};

struct OracleConfig {
  double nominal_height_fraction = 0.5;  // h0 = fraction * image height
  double depth_low = 0.5;
  double depth_high = 1.5;
  double crop_limit = 0.1;
};

struct CorpusConfig {
  std::uint64_t seed = 7;
  int n_backgrounds = 10;
  int n_foregrounds = 10;
  int scales_per_pair = 3;
  int image_size = 64;
  int positives_per_pair = 2;
  int negatives_per_pair = 2;
  OracleConfig oracle;
};

struct Corpus {
  CorpusConfig config;
  std::vector<Background> backgrounds;
  std::vector<ForegroundObject> foregrounds;
  std::vector<AnnotatedPair> train;
  std::vector<AnnotatedPair> test;
  int pairs_before_split = 0;

  const Background &background(int id) const;
  const ForegroundObject &foreground(int id) const;
  const std::vector<AnnotatedPair> &split(const std::string &name) const;
};

struct ScaledSize {
  int width = 0;
  int height = 0;
};

/// Rounded native size times scale; InputError when either side is 0.
ScaledSize scaled_size(const ForegroundObject &fg, double scale);
/// Box covered by an object of `size` centred at (x, y).
Box placement_box(ScaledSize size, int x, int y);

/// 1 iff the placement is supported by the ground band, avoids obstacles,
/// has a depth-consistent height and is cropped by less than the limit.
int oracle_label(const Background &bg, const ForegroundObject &fg,
                 const Placement &p, const OracleConfig &config = {});

struct Composite {
  Image rgb;
  Image mask;  // gray {0,1}, marks pasted object pixels
};

/// Nearest-neighbour scaled paste of fg centred at (p.x, p.y), cropped at the
/// borders and blended through the binary mask.
Composite compose(const Background &bg, const ForegroundObject &fg,
                  const Placement &p);

Image scale_nearest(const Image &image, ScaledSize size);

/// Groups records by (fg_id, bg_id, scale) in order of first appearance.
/// Each group becomes one pair; pair ids count from `first_pair_id`.
std::vector<AnnotatedPair> convert_annotations(
    const std::vector<ImageLevelRecord> &records, int first_pair_id = 0);
std::vector<ImageLevelRecord> flatten_annotations(
    const std::vector<AnnotatedPair> &pairs);

struct FopaInput {
  Image fg_canvas;    // RGB, object centred on black
  Image mask_canvas;  // gray {0,1}
  Image bg_canvas;    // RGB
  Image zero_mask;    // gray, all zero
};

struct OneHotScaleInput {
  Image fg_full;     // object stretched over the whole canvas
  Image mask_full;   // gray {0,1}
  Image bg_canvas;
  Image zero_mask;
  std::vector<double> scale_onehot;
  int bin = 0;
};

FopaInput prepare_fopa_input(const Background &bg, const ForegroundObject &fg,
                             double scale, int height, int width);
OneHotScaleInput prepare_onehot_input(const Background &bg,
                                      const ForegroundObject &fg, double scale,
                                      int bins, int height, int width);
/// floor(fraction * bins) clamped to [0, bins - 1].
int scale_bin(double fraction, int bins);

/// Every grid centre with its oracle label, row-major.
std::vector<int> oracle_sweep(const Background &bg, const ForegroundObject &fg,
                              double scale, const OracleConfig &config);

Corpus generate_corpus(const CorpusConfig &config);

// On-disk layout: backgrounds/, foregrounds/, masks/, scenes.csv,
// train.csv, test.csv and corpus.cfg.
void save_corpus(const Corpus &corpus, const std::filesystem::path &dir);
Corpus load_corpus(const std::filesystem::path &dir);

std::string format_manifest(const std::vector<AnnotatedPair> &pairs);
std::vector<AnnotatedPair> parse_manifest(const std::string &text);

std::string format_double(double v);

}  // namespace fopa

#endif  // FOPA_SCENE_HPP

// SPDX-License-Identifier: Apache-2.0
#include "fopa/scene.hpp"

#include <charconv>
#include <cmath>
#include <random>
#include <set>
#include <sstream>
#include <tuple>

#include "fopa/error.hpp"
#include "fopa/key_values.hpp"

namespace fopa {

namespace fs = std::filesystem;

Box intersect(const Box &a, const Box &b) {
  Box r{std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1),
        std::min(a.y1, b.y1)};
  if (r.x1 < r.x0) r.x1 = r.x0;
  if (r.y1 < r.y0) r.y1 = r.y0;
  return r;
}

const Background &Corpus::background(int id) const {
  for (const auto &bg : backgrounds) {
    if (bg.id == id) return bg;
  }
  throw DataError("unknown background id " + std::to_string(id));
}

const ForegroundObject &Corpus::foreground(int id) const {
  for (const auto &fg : foregrounds) {
    if (fg.id == id) return fg;
  }
  throw DataError("unknown foreground id " + std::to_string(id));
}

const std::vector<AnnotatedPair> &Corpus::split(const std::string &name) const {
  if (name == "train") return train;
  if (name == "test") return test;
  throw ConfigError("unknown split '" + name + "' (expected train or test)");
}

ScaledSize scaled_size(const ForegroundObject &fg, double scale) {
  if (!(scale > 0.0)) {
    throw InputError("placement scale must be positive, got " + format_double(scale));
  }
  ScaledSize s{static_cast<int>(std::lround(fg.pixels.width * scale)),
               static_cast<int>(std::lround(fg.pixels.height * scale))};
  if (s.width < 1 || s.height < 1) {
    throw InputError("scale " + format_double(scale) + " shrinks a " +
                     std::to_string(fg.pixels.width) + "x" +
                     std::to_string(fg.pixels.height) + " object to nothing");
  }
  return s;
}

Box placement_box(ScaledSize size, int x, int y) {
  const int x0 = x - size.width / 2;
  const int y0 = y - size.height / 2;
  return {x0, y0, x0 + size.width, y0 + size.height};
}

int oracle_label(const Background &bg, const ForegroundObject &fg,
                 const Placement &p, const OracleConfig &config) {
  const int h_img = bg.pixels.height;
  const int w_img = bg.pixels.width;
  if (p.x < 0 || p.x >= w_img || p.y < 0 || p.y >= h_img) {
    throw ContractError("placement centre (" + std::to_string(p.x) + ", " +
                        std::to_string(p.y) + ") outside the image");
  }
  const ScaledSize size = scaled_size(fg, p.scale);
  const Box box = placement_box(size, p.x, p.y);

  const int bottom = box.y1 - 1;
  if (bottom < bg.floor_top_row || bottom >= h_img) return 0;

  for (const Box &ob : bg.obstacles) {
    if (intersect(box, ob).area() > 0) return 0;
  }

  const double h0 = config.nominal_height_fraction * h_img;
  const double depth = static_cast<double>(p.y) / h_img;
  const double h = size.height;
  if (h < config.depth_low * h0 * depth || h > config.depth_high * h0 * depth) {
    return 0;
  }

  const int visible = intersect(box, Box{0, 0, w_img, h_img}).area();
  const int cropped = box.area() - visible;
  if (cropped >= config.crop_limit * box.area()) return 0;
  return 1;
}

Image scale_nearest(const Image &image, ScaledSize size) {
  Image out(size.width, size.height, image.channels);
  for (int y = 0; y < size.height; ++y) {
    const int sy = std::min(image.height - 1,
                            static_cast<int>((y + 0.5) * image.height / size.height));
    for (int x = 0; x < size.width; ++x) {
      const int sx = std::min(image.width - 1,
                              static_cast<int>((x + 0.5) * image.width / size.width));
      for (int c = 0; c < image.channels; ++c) out.at(x, y, c) = image.at(sx, sy, c);
    }
  }
  return out;
}

namespace {

// Pastes the scaled object with its top-left corner at (x0, y0), clipping to
// the destination. Only mask pixels are written.
void paste(const Image &obj, const Image &obj_mask, int x0, int y0, Image &dst,
           Image *dst_mask) {
  for (int y = 0; y < obj.height; ++y) {
    const int ty = y0 + y;
    if (ty < 0 || ty >= dst.height) continue;
    for (int x = 0; x < obj.width; ++x) {
      const int tx = x0 + x;
      if (tx < 0 || tx >= dst.width || obj_mask.at(x, y) == 0) continue;
      for (int c = 0; c < dst.channels; ++c) dst.at(tx, ty, c) = obj.at(x, y, c);
      if (dst_mask) dst_mask->at(tx, ty) = 1;
    }
  }
}

}  // namespace

Composite compose(const Background &bg, const ForegroundObject &fg,
                  const Placement &p) {
  const ScaledSize size = scaled_size(fg, p.scale);
  const Box box = placement_box(size, p.x, p.y);
  Composite out{bg.pixels, Image(bg.pixels.width, bg.pixels.height, 1)};
  paste(scale_nearest(fg.pixels, size), scale_nearest(fg.mask, size), box.x0,
        box.y0, out.rgb, &out.mask);
  return out;
}

std::vector<AnnotatedPair> convert_annotations(
    const std::vector<ImageLevelRecord> &records, int first_pair_id) {
  using Key = std::tuple<int, int, double>;
  std::map<Key, std::size_t> group_of;
  std::vector<AnnotatedPair> pairs;
  std::vector<std::map<std::pair<int, int>, int>> seen;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const ImageLevelRecord &r = records[i];
    if (r.label != 0 && r.label != 1) {
      throw DataError("record " + std::to_string(i) + " has label " +
                      std::to_string(r.label) + " (expected 0 or 1)");
    }
    const Key key{r.fg_id, r.bg_id, r.scale};
    auto [it, inserted] = group_of.emplace(key, pairs.size());
    if (inserted) {
      AnnotatedPair pair;
      pair.pair_id = first_pair_id + static_cast<int>(pairs.size());
      pair.fg_id = r.fg_id;
      pair.bg_id = r.bg_id;
      pair.scale = r.scale;
      pairs.push_back(std::move(pair));
      seen.emplace_back();
    }
    const std::size_t g = it->second;
    auto [prev, fresh] = seen[g].emplace(std::make_pair(r.x, r.y), r.label);
    if (!fresh) {
      const std::string where = "fg " + std::to_string(r.fg_id) + ", bg " +
                                std::to_string(r.bg_id) + ", scale " +
                                format_double(r.scale) + ", pixel (" +
                                std::to_string(r.x) + ", " + std::to_string(r.y) + ")";
      if (prev->second != r.label) {
        throw DataError("conflicting labels " + std::to_string(prev->second) +
                        " and " + std::to_string(r.label) + " at " + where);
      }
      throw DataError("duplicate record at " + where);
    }
    pairs[g].annotations.push_back({r.x, r.y, r.label});
  }
  return pairs;
}

std::vector<ImageLevelRecord> flatten_annotations(
    const std::vector<AnnotatedPair> &pairs) {
  std::vector<ImageLevelRecord> out;
  for (const auto &p : pairs) {
    for (const auto &a : p.annotations) {
      out.push_back({p.fg_id, p.bg_id, p.scale, a.x, a.y, a.label});
    }
  }
  return out;
}

FopaInput prepare_fopa_input(const Background &bg, const ForegroundObject &fg,
                             double scale, int height, int width) {
  const ScaledSize size = scaled_size(fg, scale);
  const int cw = bg.pixels.width;
  const int ch = bg.pixels.height;
  if (size.width > cw || size.height > ch) {
    throw InputError("scaled object " + std::to_string(size.width) + "x" +
                     std::to_string(size.height) + " does not fit the " +
                     std::to_string(cw) + "x" + std::to_string(ch) + " canvas");
  }
  Image canvas(cw, ch, 3);
  Image mask(cw, ch, 1);
  const Box box = placement_box(size, cw / 2, ch / 2);
  paste(scale_nearest(fg.pixels, size), scale_nearest(fg.mask, size), box.x0,
        box.y0, canvas, &mask);
  return {resize_nearest(canvas, width, height), resize_nearest(mask, width, height),
          resize_nearest(bg.pixels, width, height), Image(width, height, 1)};
}

int scale_bin(double fraction, int bins) {
  if (bins < 2) throw ContractError("one-hot scale encoding needs at least 2 bins");
  const double raw = std::floor(fraction * bins);
  if (raw < 0.0) return 0;
  return raw >= bins - 1 ? bins - 1 : static_cast<int>(raw);
}

OneHotScaleInput prepare_onehot_input(const Background &bg,
                                      const ForegroundObject &fg, double scale,
                                      int bins, int height, int width) {
  const ScaledSize size = scaled_size(fg, scale);
  OneHotScaleInput out;
  Image obj = resize_nearest(fg.pixels, width, height);
  out.mask_full = resize_nearest(fg.mask, width, height);
  out.fg_full = Image(width, height, 3);
  paste(obj, out.mask_full, 0, 0, out.fg_full, nullptr);
  out.bg_canvas = resize_nearest(bg.pixels, width, height);
  out.zero_mask = Image(width, height, 1);
  out.bin = scale_bin(static_cast<double>(size.height) / bg.pixels.height, bins);
  out.scale_onehot.assign(bins, 0.0);
  out.scale_onehot[out.bin] = 1.0;
  return out;
}

std::vector<int> oracle_sweep(const Background &bg, const ForegroundObject &fg,
                              double scale, const OracleConfig &config) {
  const int h = bg.pixels.height;
  const int w = bg.pixels.width;
  std::vector<int> labels(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      labels[y * w + x] = oracle_label(bg, fg, {scale, x, y}, config);
    }
  }
  return labels;
}

namespace {

using Rng = std::mt19937_64;

int uniform_int(Rng &rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

std::uint8_t clamp_byte(int v) {
  return static_cast<std::uint8_t>(std::clamp(v, 0, 255));
}

Background make_background(int id, int size, Rng &rng) {
  Background bg;
  bg.id = id;
  bg.pixels = Image(size, size, 3);
  bg.floor_top_row = uniform_int(rng, size * 2 / 5, size * 3 / 5);
  const int sky[3] = {uniform_int(rng, 90, 150), uniform_int(rng, 140, 200),
                      uniform_int(rng, 200, 255)};
  const int ground[3] = {uniform_int(rng, 70, 140), uniform_int(rng, 100, 160),
                         uniform_int(rng, 40, 90)};
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      if (y < bg.floor_top_row) {
        const int fade = 30 * y / std::max(1, bg.floor_top_row);
        for (int c = 0; c < 3; ++c) bg.pixels.at(x, y, c) = clamp_byte(sky[c] + fade);
      } else {
        const int noise = uniform_int(rng, -10, 10);
        for (int c = 0; c < 3; ++c) {
          bg.pixels.at(x, y, c) = clamp_byte(ground[c] + noise);
        }
      }
    }
  }
  const int n_obstacles = uniform_int(rng, 0, 3);
  for (int i = 0; i < n_obstacles; ++i) {
    const int w = uniform_int(rng, std::max(1, size / 10), std::max(1, size / 4));
    const int h = uniform_int(rng, std::max(1, size / 8), std::max(1, size / 3));
    const int y1 = uniform_int(rng, std::min(size, bg.floor_top_row + size / 16), size);
    const int x0 = uniform_int(rng, 0, size - w);
    Box box{x0, std::max(0, y1 - h), x0 + w, y1};
    const int shade = uniform_int(rng, 40, 110);
    const int tint = uniform_int(rng, 0, 40);
    for (int y = box.y0; y < box.y1; ++y) {
      for (int x = box.x0; x < box.x1; ++x) {
        bg.pixels.at(x, y, 0) = clamp_byte(shade + tint);
        bg.pixels.at(x, y, 1) = clamp_byte(shade);
        bg.pixels.at(x, y, 2) = clamp_byte(shade - tint / 2);
      }
    }
    bg.obstacles.push_back(box);
  }
  return bg;
}

ForegroundObject make_foreground(int id, int size, Rng &rng) {
  ForegroundObject fg;
  fg.id = id;
  const int w = uniform_int(rng, std::max(2, size * 10 / 64), std::max(2, size * 20 / 64));
  const int h = uniform_int(rng, std::max(2, size * 12 / 64), std::max(2, size * 24 / 64));
  const int shape = uniform_int(rng, 0, 2);
  const int color[3] = {uniform_int(rng, 0, 255), uniform_int(rng, 0, 255),
                        uniform_int(rng, 0, 255)};
  fg.pixels = Image(w, h, 3);
  fg.mask = Image(w, h, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double u = (x + 0.5) / w;
      const double v = (y + 0.5) / h;
      bool inside = false;
      switch (shape) {
        case 0:  // ellipse
          inside = (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25;
          break;
        case 1:  // box
          inside = true;
          break;
        default:  // triangle, apex at the top
          inside = std::abs(u - 0.5) <= 0.5 * v;
          break;
      }
      if (!inside) continue;
      fg.mask.at(x, y) = 1;
      const int shade = static_cast<int>(40.0 * (v - 0.5));
      for (int c = 0; c < 3; ++c) fg.pixels.at(x, y, c) = clamp_byte(color[c] - shade);
    }
  }
  return fg;
}

std::vector<int> sample_without_replacement(std::vector<int> pool, int count,
                                            Rng &rng) {
  const int take = std::min<int>(count, static_cast<int>(pool.size()));
  for (int i = 0; i < take; ++i) {
    const int j = uniform_int(rng, i, static_cast<int>(pool.size()) - 1);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(take);
  return pool;
}

int test_share(int n) { return n >= 2 ? std::max(1, (3 * n + 9) / 10) : 0; }

}  // namespace

Corpus generate_corpus(const CorpusConfig &config) {
  if (config.n_backgrounds < 1 || config.n_foregrounds < 1 ||
      config.scales_per_pair < 1 || config.image_size < 8) {
    throw ConfigError("corpus counts must be >= 1 and image size >= 8");
  }
  Corpus corpus;
  corpus.config = config;
  Rng rng(config.seed);
  const int size = config.image_size;
  for (int i = 0; i < config.n_backgrounds; ++i) {
    corpus.backgrounds.push_back(make_background(i, size, rng));
  }
  for (int i = 0; i < config.n_foregrounds; ++i) {
    corpus.foregrounds.push_back(make_foreground(i, size, rng));
  }
  const int bg_train = config.n_backgrounds - test_share(config.n_backgrounds);
  const int fg_train = config.n_foregrounds - test_share(config.n_foregrounds);

  int pair_id = 0;
  for (const Background &bg : corpus.backgrounds) {
    for (const ForegroundObject &fg : corpus.foregrounds) {
      const bool bg_test = bg.id >= bg_train;
      const bool fg_test = fg.id >= fg_train;
      if (bg_test != fg_test) {
        pair_id += config.scales_per_pair;
        continue;
      }
      std::set<int> used_heights;
      for (int s = 0; s < config.scales_per_pair; ++s, ++pair_id) {
        double scale = 0.0;
        std::vector<int> positives, negatives;
        for (int attempt = 0; attempt < 64; ++attempt) {
          const int target = uniform_int(rng, std::max(1, size * 12 / 100),
                                         std::max(1, size * 45 / 100));
          double steps = std::max(1.0, std::round(64.0 * target / fg.base_height()));
          while (std::lround(fg.pixels.width * (steps / 64.0)) < 1 ||
                 std::lround(fg.pixels.height * (steps / 64.0)) < 1) {
            steps += 1.0;
          }
          const double candidate = steps / 64.0;
          const int h = scaled_size(fg, candidate).height;
          if (used_heights.count(h) && attempt < 63) continue;
          positives.clear();
          negatives.clear();
          const auto labels = oracle_sweep(bg, fg, candidate, config.oracle);
          for (int i = 0; i < static_cast<int>(labels.size()); ++i) {
            (labels[i] ? positives : negatives).push_back(i);
          }
          scale = candidate;
          if (!positives.empty() && !negatives.empty()) break;
        }
        used_heights.insert(scaled_size(fg, scale).height);
        AnnotatedPair pair;
        pair.pair_id = pair_id;
        pair.fg_id = fg.id;
        pair.bg_id = bg.id;
        pair.scale = scale;
        for (int idx : sample_without_replacement(positives, config.positives_per_pair, rng)) {
          pair.annotations.push_back({idx % size, idx / size, 1});
        }
        for (int idx : sample_without_replacement(negatives, config.negatives_per_pair, rng)) {
          pair.annotations.push_back({idx % size, idx / size, 0});
        }
        (bg_test ? corpus.test : corpus.train).push_back(std::move(pair));
      }
    }
  }
  corpus.pairs_before_split =
      config.n_backgrounds * config.n_foregrounds * config.scales_per_pair;
  return corpus;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string format_manifest(const std::vector<AnnotatedPair> &pairs) {
  std::string out = "# pair_id,fg_id,bg_id,scale,x,y,label\n";
  for (const auto &p : pairs) {
    for (const auto &a : p.annotations) {
      out += std::to_string(p.pair_id) + "," + std::to_string(p.fg_id) + "," +
             std::to_string(p.bg_id) + "," + format_double(p.scale) + "," +
             std::to_string(a.x) + "," + std::to_string(a.y) + "," +
             std::to_string(a.label) + "\n";
    }
  }
  return out;
}

namespace {

template <typename T>
T parse_field(const std::string &field, int line_no, const char *name) {
  T value{};
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    throw DataError("manifest line " + std::to_string(line_no) + ": bad " + name +
                    " '" + field + "'");
  }
  return value;
}

std::vector<std::string> split_csv(const std::string &line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::vector<AnnotatedPair> parse_manifest(const std::string &text) {
  std::vector<ImageLevelRecord> records;
  std::vector<int> ids;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto f = split_csv(line);
    if (f.size() != 7) {
      throw DataError("manifest line " + std::to_string(line_no) + ": expected 7 fields, got " +
                      std::to_string(f.size()));
    }
    ids.push_back(parse_field<int>(f[0], line_no, "pair_id"));
    records.push_back({parse_field<int>(f[1], line_no, "fg_id"),
                       parse_field<int>(f[2], line_no, "bg_id"),
                       parse_field<double>(f[3], line_no, "scale"),
                       parse_field<int>(f[4], line_no, "x"),
                       parse_field<int>(f[5], line_no, "y"),
                       parse_field<int>(f[6], line_no, "label")});
  }
  auto pairs = convert_annotations(records);
  // Recover file pair ids; each group must carry exactly one.
  std::map<std::tuple<int, int, double>, std::size_t> index;
  for (std::size_t g = 0; g < pairs.size(); ++g) {
    index[{pairs[g].fg_id, pairs[g].bg_id, pairs[g].scale}] = g;
    pairs[g].pair_id = -1;
  }
  std::set<int> taken;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto &pair = pairs[index.at({records[i].fg_id, records[i].bg_id, records[i].scale})];
    if (pair.pair_id == -1) {
      if (!taken.insert(ids[i]).second) {
        throw DataError("pair_id " + std::to_string(ids[i]) +
                        " names more than one (fg, bg, scale) group");
      }
      pair.pair_id = ids[i];
    } else if (pair.pair_id != ids[i]) {
      throw DataError("records of one (fg, bg, scale) group carry pair ids " +
                      std::to_string(pair.pair_id) + " and " + std::to_string(ids[i]));
    }
  }
  return pairs;
}

namespace {

std::string id_name(const char *prefix, int id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%04d", prefix, id);
  return buf;
}

Image mask_to_pgm(const Image &mask) {
  Image out = mask;
  for (auto &v : out.pixels) v = v ? 255 : 0;
  return out;
}

Image pgm_to_mask(const Image &gray) {
  Image out = gray;
  for (auto &v : out.pixels) v = v >= 128 ? 1 : 0;
  return out;
}

}  // namespace

void save_corpus(const Corpus &corpus, const fs::path &dir) {
  fs::create_directories(dir / "backgrounds");
  fs::create_directories(dir / "foregrounds");
  fs::create_directories(dir / "masks");
  std::string scenes = "# bg_id,floor_top_row,obstacles (x0 y0 x1 y1 separated by ';')\n";
  for (const auto &bg : corpus.backgrounds) {
    write_pnm(dir / "backgrounds" / (id_name("bg", bg.id) + ".ppm"), bg.pixels);
    scenes += std::to_string(bg.id) + "," + std::to_string(bg.floor_top_row) + ",";
    for (std::size_t i = 0; i < bg.obstacles.size(); ++i) {
      const Box &b = bg.obstacles[i];
      if (i) scenes += ";";
      scenes += std::to_string(b.x0) + " " + std::to_string(b.y0) + " " +
                std::to_string(b.x1) + " " + std::to_string(b.y1);
    }
    scenes += "\n";
  }
  write_text_file(dir / "scenes.csv", scenes);
  for (const auto &fg : corpus.foregrounds) {
    write_pnm(dir / "foregrounds" / (id_name("fg", fg.id) + ".ppm"), fg.pixels);
    write_pnm(dir / "masks" / (id_name("fg", fg.id) + ".pgm"), mask_to_pgm(fg.mask));
  }
  write_text_file(dir / "train.csv", format_manifest(corpus.train));
  write_text_file(dir / "test.csv", format_manifest(corpus.test));

  const CorpusConfig &c = corpus.config;
  KeyValues kv;
  kv.set("seed", static_cast<long long>(c.seed));
  kv.set("n_backgrounds", c.n_backgrounds);
  kv.set("n_foregrounds", c.n_foregrounds);
  kv.set("scales_per_pair", c.scales_per_pair);
  kv.set("image_size", c.image_size);
  kv.set("positives_per_pair", c.positives_per_pair);
  kv.set("negatives_per_pair", c.negatives_per_pair);
  kv.set("oracle.nominal_height_fraction", c.oracle.nominal_height_fraction);
  kv.set("oracle.depth_low", c.oracle.depth_low);
  kv.set("oracle.depth_high", c.oracle.depth_high);
  kv.set("oracle.crop_limit", c.oracle.crop_limit);
  kv.set("pairs_before_split", corpus.pairs_before_split);
  kv.write(dir / "corpus.cfg");
}

Corpus load_corpus(const fs::path &dir) {
  if (!fs::is_directory(dir)) throw IoError("corpus directory " + dir.string() + " not found");
  Corpus corpus;
  const KeyValues kv = KeyValues::read(dir / "corpus.cfg");
  CorpusConfig &c = corpus.config;
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed"));
  c.n_backgrounds = static_cast<int>(kv.get_int("n_backgrounds"));
  c.n_foregrounds = static_cast<int>(kv.get_int("n_foregrounds"));
  c.scales_per_pair = static_cast<int>(kv.get_int("scales_per_pair"));
  c.image_size = static_cast<int>(kv.get_int("image_size"));
  c.positives_per_pair = static_cast<int>(kv.get_int("positives_per_pair"));
  c.negatives_per_pair = static_cast<int>(kv.get_int("negatives_per_pair"));
  c.oracle.nominal_height_fraction = kv.get_double("oracle.nominal_height_fraction");
  c.oracle.depth_low = kv.get_double("oracle.depth_low");
  c.oracle.depth_high = kv.get_double("oracle.depth_high");
  c.oracle.crop_limit = kv.get_double("oracle.crop_limit");
  corpus.pairs_before_split = static_cast<int>(kv.get_int("pairs_before_split"));

  std::istringstream scenes(read_text_file(dir / "scenes.csv"));
  std::string line;
  int line_no = 0;
  while (std::getline(scenes, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto f = split_csv(line);
    if (f.size() != 3) {
      throw DataError("scenes.csv line " + std::to_string(line_no) + ": expected 3 fields");
    }
    Background bg;
    bg.id = parse_field<int>(f[0], line_no, "bg_id");
    bg.floor_top_row = parse_field<int>(f[1], line_no, "floor_top_row");
    std::istringstream obs(f[2]);
    std::string item;
    while (std::getline(obs, item, ';')) {
      Box b;
      std::istringstream nums(item);
      if (!(nums >> b.x0 >> b.y0 >> b.x1 >> b.y1)) {
        throw DataError("scenes.csv line " + std::to_string(line_no) + ": bad obstacle '" +
                        item + "'");
      }
      bg.obstacles.push_back(b);
    }
    bg.pixels = read_pnm(dir / "backgrounds" / (id_name("bg", bg.id) + ".ppm"));
    if (bg.pixels.channels != 3) throw DataError("background " + std::to_string(bg.id) + " is not RGB");
    if (bg.floor_top_row < 0 || bg.floor_top_row >= bg.pixels.height) {
      throw DataError("background " + std::to_string(bg.id) + " floor row out of range");
    }
    corpus.backgrounds.push_back(std::move(bg));
  }
  for (int id = 0; id < c.n_foregrounds; ++id) {
    ForegroundObject fg;
    fg.id = id;
    fg.pixels = read_pnm(dir / "foregrounds" / (id_name("fg", id) + ".ppm"));
    fg.mask = pgm_to_mask(read_pnm(dir / "masks" / (id_name("fg", id) + ".pgm")));
    if (fg.mask.width != fg.pixels.width || fg.mask.height != fg.pixels.height ||
        fg.mask.channels != 1) {
      throw DataError("mask of foreground " + std::to_string(id) + " does not match its image");
    }
    if (std::find(fg.mask.pixels.begin(), fg.mask.pixels.end(), 1) == fg.mask.pixels.end()) {
      throw DataError("mask of foreground " + std::to_string(id) + " is empty");
    }
    corpus.foregrounds.push_back(std::move(fg));
  }
  corpus.train = parse_manifest(read_text_file(dir / "train.csv"));
  corpus.test = parse_manifest(read_text_file(dir / "test.csv"));
  for (const auto *split : {&corpus.train, &corpus.test}) {
    for (const auto &p : *split) {
      const Background &bg = corpus.background(p.bg_id);
      corpus.foreground(p.fg_id);
      for (const auto &a : p.annotations) {
        if (a.x < 0 || a.y < 0 || a.x >= bg.pixels.width || a.y >= bg.pixels.height) {
          throw DataError("pair " + std::to_string(p.pair_id) + " annotates pixel (" +
                          std::to_string(a.x) + ", " + std::to_string(a.y) +
                          ") outside the grid");
        }
      }
    }
  }
  return corpus;
}

}  // namespace fopa

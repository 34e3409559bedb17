#pragma once

// Sequence tasks: copy, associative recall and multi-digit pen strokes.
//
// Layouts (one row per timestep):
//   copy      in  [bits(n) | delim]          out bits(n), Bernoulli
//             len bit rows, one delimiter row, then len zero rows scored
//             against the original bits.  T = 2 len + 1.
//   recall    in  [bits(n) | item | query]   out bits(n), Bernoulli
//             per item: one item-delimiter row then item_len bit rows;
//             then query-delimiter, the query item, query-delimiter, and
//             item_len zero rows scored against the item after the query.
//   strokes   in  [dx | dy | eos | eod | digit one-hot(10) | bos]
//             out digit class (10), categorical
//             all quadruples of all digits, one <bos> row, then one row per
//             remaining digit carrying the previous digit one-hot.  The
//             n_digits rows from <bos> on are scored.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tardis/controller.hpp"
#include "tardis/errors.hpp"
#include "tardis/rng.hpp"

namespace tardis {

struct Example {
  std::vector<std::vector<double>> inputs;   // T x d_x
  std::vector<std::vector<double>> targets;  // T x d_out (zeros where unscored)
  std::vector<double> mask;                  // T, 1 on scored steps
  std::vector<std::size_t> labels;           // digits (strokes) or empty
  std::size_t length = 0;                    // copy/recall sequence length
  [[nodiscard]] std::size_t steps() const { return inputs.size(); }
  [[nodiscard]] std::size_t scored() const {
    std::size_t n = 0;
    for (double m : mask) n += m != 0.0 ? 1 : 0;
    return n;
  }
};

struct TaskBatch {
  std::string task;
  std::size_t input_size = 0;
  std::size_t output_size = 0;
  OutputKind kind = OutputKind::bernoulli;
  /// First input channel of the fed-back prediction (strokes only).
  std::optional<std::size_t> feedback_offset;
  std::vector<Example> examples;
};

namespace detail {

inline std::vector<double> random_bits(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& b : v) b = rng.bernoulli(0.5) ? 1.0 : 0.0;
  return v;
}

}  // namespace detail

inline Example copy_example(const std::vector<std::vector<double>>& bits) {
  const std::size_t len = bits.size();
  const std::size_t n = bits.front().size();
  Example ex;
  ex.length = len;
  for (const auto& row : bits) {
    auto in = row;
    in.push_back(0.0);
    ex.inputs.push_back(std::move(in));
    ex.targets.emplace_back(n, 0.0);
    ex.mask.push_back(0.0);
  }
  std::vector<double> delim(n + 1, 0.0);
  delim[n] = 1.0;
  ex.inputs.push_back(delim);
  ex.targets.emplace_back(n, 0.0);
  ex.mask.push_back(0.0);
  for (const auto& row : bits) {
    ex.inputs.emplace_back(n + 1, 0.0);
    ex.targets.push_back(row);
    ex.mask.push_back(1.0);
  }
  return ex;
}

/// Sequence lengths uniform over [min_len, max_len].
inline TaskBatch gen_copy(std::size_t max_len, std::size_t n_bits, std::size_t batch, Rng& rng,
                          std::size_t min_len = 1) {
  if (max_len == 0 || n_bits == 0 || min_len == 0 || min_len > max_len) {
    throw ValueError("copy: need 1 <= min_len <= max_len and n_bits >= 1");
  }
  TaskBatch b;
  b.task = "copy";
  b.input_size = n_bits + 1;
  b.output_size = n_bits;
  b.kind = OutputKind::bernoulli;
  for (std::size_t e = 0; e < batch; ++e) {
    const std::size_t len = min_len + rng.below(max_len - min_len + 1);
    std::vector<std::vector<double>> bits;
    for (std::size_t t = 0; t < len; ++t) bits.push_back(detail::random_bits(n_bits, rng));
    b.examples.push_back(copy_example(bits));
  }
  return b;
}

inline TaskBatch gen_assoc_recall(std::size_t n_items, std::size_t item_len, std::size_t n_bits,
                                  std::size_t batch, Rng& rng) {
  if (n_items < 2 || item_len == 0 || n_bits == 0) {
    throw ValueError("recall: need n_items >= 2, item_len >= 1, n_bits >= 1");
  }
  TaskBatch b;
  b.task = "recall";
  b.input_size = n_bits + 2;
  b.output_size = n_bits;
  b.kind = OutputKind::bernoulli;
  const std::size_t w = n_bits + 2;
  for (std::size_t e = 0; e < batch; ++e) {
    std::vector<std::vector<std::vector<double>>> items(n_items);
    for (auto& item : items) {
      for (std::size_t r = 0; r < item_len; ++r) item.push_back(detail::random_bits(n_bits, rng));
    }
    const std::size_t q = rng.below(n_items - 1);
    Example ex;
    ex.length = n_items;
    ex.labels = {q};
    auto push = [&](std::vector<double> in, std::vector<double> target, double m) {
      ex.inputs.push_back(std::move(in));
      ex.targets.push_back(std::move(target));
      ex.mask.push_back(m);
    };
    auto marker = [&](std::size_t channel) {
      std::vector<double> v(w, 0.0);
      v[channel] = 1.0;
      return v;
    };
    auto bit_row = [&](const std::vector<double>& bits) {
      auto v = bits;
      v.resize(w, 0.0);
      return v;
    };
    const std::vector<double> none(n_bits, 0.0);
    for (const auto& item : items) {
      push(marker(n_bits), none, 0.0);
      for (const auto& row : item) push(bit_row(row), none, 0.0);
    }
    push(marker(n_bits + 1), none, 0.0);
    for (const auto& row : items[q]) push(bit_row(row), none, 0.0);
    push(marker(n_bits + 1), none, 0.0);
    for (const auto& row : items[q + 1]) push(std::vector<double>(w, 0.0), row, 1.0);
    b.examples.push_back(std::move(ex));
  }
  return b;
}

// ---------------------------------------------------------------- strokes

struct StrokeQuad {
  int dx = 0;
  int dy = 0;
  bool eos = false;
  bool eod = false;
  bool operator==(const StrokeQuad&) const = default;
};

struct StrokeDigit {
  std::size_t digit = 0;
  std::vector<StrokeQuad> quads;
  bool operator==(const StrokeDigit&) const = default;
};

inline constexpr std::size_t kStrokeChannels = 4;
inline constexpr std::size_t kDigits = 10;
inline constexpr std::size_t kStrokeInputSize = kStrokeChannels + kDigits + 1;
inline constexpr std::size_t kBosChannel = kStrokeChannels + kDigits;

/// Digit samples grouped by class. Built-in templates are jittered per draw.
struct GlyphSet {
  std::array<std::vector<StrokeDigit>, kDigits> by_digit;
  bool jitter = false;

  [[nodiscard]] std::size_t size() const {
    std::size_t n = 0;
    for (const auto& v : by_digit) n += v.size();
    return n;
  }
  void add(StrokeDigit d) {
    if (d.digit >= kDigits) throw ValueError("glyphs: digit out of range");
    by_digit[d.digit].push_back(std::move(d));
  }
};

namespace detail {

struct Point {
  int x, y;
};

/// King-move walk through the waypoints of each stroke. The first quadruple
/// is (0,0); eos closes every stroke, eod the last one.
inline StrokeDigit rasterize(std::size_t digit, const std::vector<std::vector<Point>>& strokes) {
  StrokeDigit d;
  d.digit = digit;
  d.quads.push_back({0, 0, false, false});
  Point pos{0, 0};
  for (const auto& stroke : strokes) {
    for (const Point& w : stroke) {
      // rounded linear interpolation: every step moves at most one unit per axis
      const int n = std::max(std::abs(w.x - pos.x), std::abs(w.y - pos.y));
      const Point from = pos;
      for (int i = 1; i <= n; ++i) {
        const int x = from.x + static_cast<int>(std::lround(double(i) * (w.x - from.x) / n));
        const int y = from.y + static_cast<int>(std::lround(double(i) * (w.y - from.y) / n));
        d.quads.push_back({x - pos.x, y - pos.y, false, false});
        pos = {x, y};
      }
    }
    d.quads.back().eos = true;
  }
  d.quads.back().eod = true;
  return d;
}

}  // namespace detail

/// Ten synthetic polyline glyphs of roughly 40 quadruples each.
inline GlyphSet builtin_glyphs() {
  using P = detail::Point;
  const std::vector<std::vector<std::vector<P>>> shapes = {
      {{{-6, -5}, {-6, -12}, {0, -17}, {6, -12}, {6, -5}, {0, 0}}},
      {{{4, 4}, {4, -24}}, {{0, -24}, {8, -24}}},
      {{{4, 4}, {8, 0}, {8, -6}, {0, -16}}, {{10, -16}}},
      {{{8, 0}, {10, -4}, {4, -9}, {10, -14}, {8, -18}, {0, -18}}},
      {{{-6, -10}, {4, -10}}, {{2, -4}, {2, -18}}},
      {{{-8, 0}, {-8, -7}, {0, -7}, {3, -11}, {0, -16}, {-8, -16}}},
      {{{-6, -6}, {-6, -14}, {0, -17}, {5, -14}, {5, -10}, {0, -8}, {-6, -10}}},
      {{{10, 0}, {3, -18}}, {{2, -9}, {8, -9}}},
      {{{-5, -4}, {5, -12}, {0, -16}, {-5, -12}, {5, -4}, {0, 0}}},
      {{{-5, -2}, {-5, -6}, {0, -8}, {5, -6}, {5, -2}, {0, 0}}, {{5, -2}, {5, -14}}},
  };
  GlyphSet g;
  g.jitter = true;
  for (std::size_t d = 0; d < kDigits; ++d) g.add(detail::rasterize(d, shapes[d]));
  return g;
}

/// Deletes up to 10% of the quadruples, never the first one nor any quadruple
/// carrying eos or eod. Order is preserved.
inline StrokeDigit jitter_glyph(const StrokeDigit& g, Rng& rng) {
  std::vector<std::size_t> deletable;
  for (std::size_t i = 1; i < g.quads.size(); ++i) {
    if (!g.quads[i].eos && !g.quads[i].eod) deletable.push_back(i);
  }
  const std::size_t max_del = std::min(deletable.size(), g.quads.size() / 10);
  const std::size_t n_del = rng.below(max_del + 1);
  for (std::size_t j = 0; j < n_del; ++j) {
    std::swap(deletable[j], deletable[j + rng.below(deletable.size() - j)]);
  }
  std::vector<bool> drop(g.quads.size(), false);
  for (std::size_t j = 0; j < n_del; ++j) drop[deletable[j]] = true;
  StrokeDigit out;
  out.digit = g.digit;
  for (std::size_t i = 0; i < g.quads.size(); ++i) {
    if (!drop[i]) out.quads.push_back(g.quads[i]);
  }
  return out;
}

/// Concatenates the stroke sequences of the given digits, then the prediction
/// phase. Teacher forcing: the row after <bos> carries the true previous digit.
inline Example stroke_example(const std::vector<StrokeDigit>& digits) {
  Example ex;
  auto push = [&](std::vector<double> in, std::optional<std::size_t> label) {
    ex.inputs.push_back(std::move(in));
    std::vector<double> target(kDigits, 0.0);
    if (label) target[*label] = 1.0;
    ex.targets.push_back(std::move(target));
    ex.mask.push_back(label ? 1.0 : 0.0);
  };
  for (const auto& d : digits) {
    ex.labels.push_back(d.digit);
    for (const auto& q : d.quads) {
      std::vector<double> in(kStrokeInputSize, 0.0);
      in[0] = q.dx;
      in[1] = q.dy;
      in[2] = q.eos ? 1.0 : 0.0;
      in[3] = q.eod ? 1.0 : 0.0;
      push(std::move(in), std::nullopt);
    }
  }
  for (std::size_t j = 0; j < digits.size(); ++j) {
    std::vector<double> in(kStrokeInputSize, 0.0);
    if (j == 0) {
      in[kBosChannel] = 1.0;
    } else {
      in[kStrokeChannels + digits[j - 1].digit] = 1.0;
    }
    push(std::move(in), digits[j].digit);
  }
  ex.length = digits.size();
  return ex;
}

inline TaskBatch gen_stroke_digits(std::size_t n_digits, const GlyphSet& glyphs,
                                   std::size_t batch, Rng& rng) {
  std::vector<std::size_t> available;
  for (std::size_t d = 0; d < kDigits; ++d) {
    if (!glyphs.by_digit[d].empty()) available.push_back(d);
  }
  if (available.empty()) {
    throw ValueError("strokes: glyph set has no digits");
  }
  if (n_digits == 0) {
    throw ValueError("strokes: n_digits must be positive");
  }
  TaskBatch b;
  b.task = "strokes";
  b.input_size = kStrokeInputSize;
  b.output_size = kDigits;
  b.kind = OutputKind::categorical;
  b.feedback_offset = kStrokeChannels;
  for (std::size_t e = 0; e < batch; ++e) {
    std::vector<StrokeDigit> digits;
    for (std::size_t j = 0; j < n_digits; ++j) {
      const std::size_t d = available[rng.below(available.size())];
      const auto& pool = glyphs.by_digit[d];
      const StrokeDigit& g = pool[rng.below(pool.size())];
      digits.push_back(glyphs.jitter ? jitter_glyph(g, rng) : g);
    }
    b.examples.push_back(stroke_example(digits));
  }
  return b;
}

/// Stroke CSV: a `digit=<d>` line, then one `dx,dy,eos,eod` line per
/// quadruple; a blank line ends a digit; `#` starts a comment line.
inline GlyphSet parse_stroke_csv(std::istream& in, const std::string& source = "<stream>") {
  GlyphSet set;
  std::optional<StrokeDigit> cur;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& why) {
    throw ParseError(source + ":" + std::to_string(lineno) + ": " + why);
  };
  auto finish = [&] {
    if (cur) {
      if (cur->quads.empty()) fail("digit has no quadruples");
      set.add(std::move(*cur));
      cur.reset();
    }
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty() && line[0] == '#') continue;
    if (line.find_first_not_of(" \t") == std::string::npos) {
      finish();
      continue;
    }
    if (line.rfind("digit=", 0) == 0) {
      finish();
      std::size_t used = 0;
      int d = -1;
      try {
        d = std::stoi(line.substr(6), &used);
      } catch (const std::exception&) {
        fail("bad digit label '" + line + "'");
      }
      if (used != line.size() - 6 || d < 0 || d > 9) fail("bad digit label '" + line + "'");
      cur = StrokeDigit{static_cast<std::size_t>(d), {}};
      continue;
    }
    if (!cur) fail("quadruple before any digit= line");
    std::array<int, 4> v{};
    std::stringstream ss(line);
    std::string field;
    std::size_t n = 0;
    while (std::getline(ss, field, ',')) {
      if (n >= 4) fail("expected 4 fields");
      std::size_t used = 0;
      try {
        v[n] = std::stoi(field, &used);
      } catch (const std::exception&) {
        fail("non-integer field '" + field + "'");
      }
      if (used != field.size()) fail("non-integer field '" + field + "'");
      ++n;
    }
    if (n != 4) fail("expected 4 fields");
    if (std::abs(v[0]) > 1 || std::abs(v[1]) > 1) fail("dx/dy must be -1, 0 or 1");
    if ((v[2] != 0 && v[2] != 1) || (v[3] != 0 && v[3] != 1)) fail("eos/eod must be 0 or 1");
    cur->quads.push_back({v[0], v[1], v[2] == 1, v[3] == 1});
  }
  finish();
  return set;
}

inline GlyphSet load_stroke_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ParseError("cannot open stroke file '" + path + "'");
  }
  return parse_stroke_csv(in, path);
}

inline void write_stroke_csv(std::ostream& out, const std::vector<StrokeDigit>& digits) {
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i > 0) out << '\n';
    out << "digit=" << digits[i].digit << '\n';
    for (const auto& q : digits[i].quads) {
      out << q.dx << ',' << q.dy << ',' << (q.eos ? 1 : 0) << ',' << (q.eod ? 1 : 0) << '\n';
    }
  }
}

/// Fraction of positions whose predicted class differs from the target.
inline double per_digit_error(const std::vector<std::size_t>& predicted,
                              const std::vector<std::size_t>& target) {
  if (predicted.size() != target.size()) {
    throw ShapeError("per_digit_error: " + std::to_string(predicted.size()) + " predictions vs " +
                     std::to_string(target.size()) + " targets");
  }
  if (target.empty()) return 0.0;
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < target.size(); ++i) wrong += predicted[i] != target[i] ? 1 : 0;
  return static_cast<double>(wrong) / static_cast<double>(target.size());
}

}  // namespace tardis

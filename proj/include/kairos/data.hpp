#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kairos/errors.hpp"
#include "kairos/preprocess.hpp"

namespace kairos::data {

/// One parsed label-first delimited file. Missing cells are NaN.
struct RawTable {
  std::vector<double> labels;
  std::vector<std::vector<double>> rows;

  /// Number of leading non-missing values of row i.
  std::size_t native_length(std::size_t i) const {
    const auto& r = rows[i];
    std::size_t n = r.size();
    while (n > 0 && std::isnan(r[n - 1])) --n;
    return n;
  }
};

struct DatasetMeta {
  std::string name;
  std::size_t num_classes = 0;
  std::size_t series_length = 0;  // longest native length over both splits
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  std::optional<std::string> type_tag;
};

struct Split {
  SeriesBatch train;
  SeriesBatch test;
};

struct Dataset {
  DatasetMeta meta;
  Split split;
  std::vector<double> label_values;  // contiguous index -> original label
};

namespace detail {

inline double parse_cell(std::string_view cell, std::size_t lineno) {
  while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\r')) cell.remove_prefix(1);
  while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\r')) cell.remove_suffix(1);
  if (cell == "NaN" || cell == "nan" || cell == "NAN" || cell == "?") return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (res.ec != std::errc() || res.ptr != cell.data() + cell.size() || std::isinf(v))
    throw DataError("line " + std::to_string(lineno) + ": non-numeric cell '" + std::string(cell) + "'");
  return v;
}

inline std::vector<std::string_view> split_cells(std::string_view line) {
  std::vector<std::string_view> out;
  const bool structured = line.find_first_of("\t,") != std::string_view::npos;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    const bool sep = i == line.size() || (structured ? (line[i] == '\t' || line[i] == ',') : line[i] == ' ');
    if (!sep) continue;
    auto cell = line.substr(start, i - start);
    if (structured || !cell.empty()) out.push_back(cell);
    start = i + 1;
  }
  return out;
}

}  // namespace detail

/// Parses a UCR-style file: one series per line, label first, tab-, comma-
/// or space-separated. Rows must be rectangular; NaN marks missing timesteps,
/// which may only trail the observed values.
inline RawTable parse_table(std::istream& in) {
  RawTable table;
  std::string line;
  std::size_t lineno = 0, width = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto cells = detail::split_cells(line);
    if (cells.size() < 3) throw DataError("line " + std::to_string(lineno) + ": need a label and at least 2 values");
    if (width == 0) width = cells.size();
    if (cells.size() != width)
      throw DataError("line " + std::to_string(lineno) + ": ragged row with " + std::to_string(cells.size()) +
                      " cells, expected " + std::to_string(width));
    const double label = detail::parse_cell(cells[0], lineno);
    if (std::isnan(label) || std::abs(label - std::round(label)) > 1e-9)
      throw DataError("line " + std::to_string(lineno) + ": label must be an integer");
    std::vector<double> row;
    row.reserve(width - 1);
    for (std::size_t i = 1; i < cells.size(); ++i) row.push_back(detail::parse_cell(cells[i], lineno));
    std::size_t n = row.size();
    while (n > 0 && std::isnan(row[n - 1])) --n;
    for (std::size_t i = 0; i < n; ++i)
      if (std::isnan(row[i])) throw DataError("line " + std::to_string(lineno) + ": missing value inside the series");
    if (n < 2) throw DataError("line " + std::to_string(lineno) + ": fewer than 2 observed values");
    table.labels.push_back(std::round(label));
    table.rows.push_back(std::move(row));
  }
  if (table.rows.empty()) throw DataError("no series found (empty file)");
  return table;
}

inline RawTable load_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  try {
    return parse_table(in);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

/// Right-pads (native <= L) or linearly resamples (native > L) to L values.
/// Returns the aligned values and the valid-prefix length.
inline std::pair<std::vector<double>, std::size_t> align_length(std::span<const double> series, std::size_t L) {
  const std::size_t n = series.size();
  if (n < 2) throw DataError("align_length: series needs at least 2 values");
  std::vector<double> out(L, 0.0);
  if (n <= L) {
    std::copy(series.begin(), series.end(), out.begin());
    return {out, n};
  }
  const double step = static_cast<double>(n - 1) / static_cast<double>(L - 1);
  for (std::size_t i = 0; i < L; ++i) {
    if (i == L - 1) {
      out[i] = series[n - 1];
      break;
    }
    const double pos = static_cast<double>(i) * step;
    const auto lo = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    out[i] = frac == 0.0 ? series[lo] : series[lo] + frac * (series[lo + 1] - series[lo]);
  }
  return {out, L};
}

/// Sorted distinct labels -> 0..C-1.
inline std::vector<double> label_values_of(const RawTable& t) {
  std::vector<double> v = t.labels;
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

/// Aligned, label-remapped batch. Labels missing from `label_values` are a data error.
inline SeriesBatch to_batch(const RawTable& t, std::size_t L, const std::vector<double>& label_values) {
  const std::size_t B = t.rows.size();
  std::vector<double> values(B * L);
  std::vector<std::uint8_t> valid(B * L, 0);
  std::vector<int> labels(B);
  for (std::size_t b = 0; b < B; ++b) {
    const std::span<const double> row(t.rows[b].data(), t.native_length(b));
    auto [aligned, n] = align_length(row, L);
    std::copy(aligned.begin(), aligned.end(), values.begin() + static_cast<std::ptrdiff_t>(b * L));
    std::fill_n(valid.begin() + static_cast<std::ptrdiff_t>(b * L), n, std::uint8_t{1});
    const auto it = std::lower_bound(label_values.begin(), label_values.end(), t.labels[b]);
    if (it == label_values.end() || *it != t.labels[b])
      throw DataError("label " + std::to_string(t.labels[b]) + " does not occur in the training split");
    labels[b] = static_cast<int>(it - label_values.begin());
  }
  return {Tensor({B, L}, std::move(values)), std::move(valid), std::move(labels)};
}

inline std::size_t longest(const RawTable& t) {
  std::size_t m = 0;
  for (std::size_t i = 0; i < t.rows.size(); ++i) m = std::max(m, t.native_length(i));
  return m;
}

/// Builds both halves of a dataset with the training split's label mapping.
inline Dataset make_dataset(const std::string& name, const RawTable& train, const RawTable& test, std::size_t L) {
  Dataset ds;
  ds.label_values = label_values_of(train);
  if (ds.label_values.size() < 2) throw DataError(name + ": training split needs at least 2 classes");
  ds.split.train = to_batch(train, L, ds.label_values);
  ds.split.test = to_batch(test, L, ds.label_values);
  ds.meta = {name, ds.label_values.size(), std::max(longest(train), longest(test)), train.rows.size(),
             test.rows.size(), std::nullopt};
  return ds;
}

/// Benchmark subset: fewer than 8 classes and fewer than 400 timesteps.
inline bool bakeoff_filter(const DatasetMeta& meta) { return meta.num_classes < 8 && meta.series_length < 400; }

/// `name,num_classes,series_length,train_size,test_size,bakeoff` row.
inline std::string manifest_row(const DatasetMeta& m) {
  std::ostringstream os;
  os << m.name << ',' << m.num_classes << ',' << m.series_length << ',' << m.train_size << ',' << m.test_size << ','
     << (bakeoff_filter(m) ? "true" : "false");
  return os.str();
}

inline constexpr std::string_view kManifestHeader = "name,num_classes,series_length,train_size,test_size,bakeoff";

/// Batches of indices into [0, n). With `shuffle` the order is a pure function
/// of (rng seed, epoch); the last partial batch is kept.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, const Rng& rng,
                                                          std::size_t epoch, bool shuffle) {
  if (batch_size == 0) throw ContractError("make_batches: batch size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    Rng stream = rng.split(epoch);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[stream.below(i)]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + batch_size)));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpora

enum class SynthKind { Sine, Ar1, Square, TrendMix };

inline SynthKind parse_kind(std::string_view s) {
  if (s == "sine") return SynthKind::Sine;
  if (s == "ar1") return SynthKind::Ar1;
  if (s == "square") return SynthKind::Square;
  if (s == "trend-mix") return SynthKind::TrendMix;
  throw ConfigError("unknown synthetic kind '" + std::string(s) + "' (sine|ar1|square|trend-mix)");
}

/// One synthetic series of the given kind.
///
///  sine:      A sin(2 pi f t / n + phi) + c + N(0, (0.1 A)^2), A ~ U(0.5, 2), f ~ U(2, 8) cycles,
///             c ~ U(-1, 1)
///  ar1:       x_t = 0.9 x_{t-1} + N(0, A^2), stationary start, A ~ U(0.5, 2)
///  square:    +-A square wave, period ~ U{8..32}, + N(0, (0.05 A)^2)
///  trend-mix: slope ramp (total rise +-U(2, 6)) + 0.3 sin(2 pi t / 16) + N(0, 0.2^2)
inline std::vector<double> synth_series(SynthKind kind, std::size_t n, Rng& rng) {
  std::vector<double> x(n);
  const double two_pi = 2.0 * std::numbers::pi;
  switch (kind) {
    case SynthKind::Sine: {
      const double amp = rng.uniform(0.5, 2.0), freq = rng.uniform(2.0, 8.0), phase = rng.uniform(0.0, two_pi);
      const double offset = rng.uniform(-1.0, 1.0);
      for (std::size_t t = 0; t < n; ++t)
        x[t] = amp * std::sin(two_pi * freq * static_cast<double>(t) / static_cast<double>(n) + phase) + offset +
               0.1 * amp * rng.normal();
      break;
    }
    case SynthKind::Ar1: {
      const double amp = rng.uniform(0.5, 2.0), phi = 0.9;
      double prev = amp / std::sqrt(1.0 - phi * phi) * rng.normal();
      for (std::size_t t = 0; t < n; ++t) x[t] = prev = phi * prev + amp * rng.normal();
      break;
    }
    case SynthKind::Square: {
      const double amp = rng.uniform(0.5, 2.0);
      const std::size_t period = 8 + rng.below(25);
      const std::size_t shift = rng.below(period);
      for (std::size_t t = 0; t < n; ++t)
        x[t] = ((t + shift) % period < period / 2 ? amp : -amp) + 0.05 * amp * rng.normal();
      break;
    }
    case SynthKind::TrendMix: {
      const double rise = rng.uniform(2.0, 6.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
      for (std::size_t t = 0; t < n; ++t)
        x[t] = rise * static_cast<double>(t) / static_cast<double>(n) +
               0.3 * std::sin(two_pi * static_cast<double>(t) / 16.0) + 0.2 * rng.normal();
      break;
    }
  }
  return x;
}

/// n fully observed series of `length`; instance i has kind kinds[i % kinds.size()]
/// and label i % kinds.size().
inline SeriesBatch synth_corpus(const std::vector<SynthKind>& kinds, std::size_t n, std::size_t length,
                                const Rng& rng) {
  if (kinds.empty() || n == 0 || length < 2) throw ConfigError("synth_corpus: need kinds, n > 0 and length >= 2");
  std::vector<double> values;
  values.reserve(n * length);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng stream = rng.split(i);
    const auto kind = kinds[i % kinds.size()];
    const auto x = synth_series(kind, length, stream);
    values.insert(values.end(), x.begin(), x.end());
    labels[i] = static_cast<int>(i % kinds.size());
  }
  return {Tensor({n, length}, std::move(values)), std::vector<std::uint8_t>(n * length, 1), std::move(labels)};
}

/// Writes a batch back out as label-first tab-separated rows (valid prefix only,
/// NaN padding).
inline void write_table(std::ostream& os, const SeriesBatch& batch, const std::vector<double>& label_values = {}) {
  os.precision(17);
  const std::size_t L = batch.length();
  for (std::size_t b = 0; b < batch.batch_size(); ++b) {
    const int lab = batch.labels ? (*batch.labels)[b] : 0;
    os << (label_values.empty() ? static_cast<double>(lab) : label_values[static_cast<std::size_t>(lab)]);
    for (std::size_t t = 0; t < L; ++t) {
      os << '\t';
      if (batch.valid[b * L + t]) {
        os << batch.values[b * L + t];
      } else {
        os << "NaN";
      }
    }
    os << '\n';
  }
}

}  // namespace kairos::data

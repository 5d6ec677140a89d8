#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "duet/common.hpp"
#include "duet/tensor.hpp"

namespace duet {

// Rotary embedding parameters for one modality. `scale` multiplies token
// positions (equivalently, all frequencies): 1.0 for video, L_v/L_a for
// audio so both modalities share a wall-clock phase axis.
struct RopeConfig {
  int64_t head_dim = 128;
  double base = 10000.0;
  double scale = 1.0;

  void validate() const {
    if (head_dim <= 0 || head_dim % 2 != 0)
      throw ConfigError("RopeConfig: head_dim must be even and positive, got " +
                        std::to_string(head_dim));
    if (!(scale > 0.0))
      throw ConfigError("RopeConfig: scale must be > 0");
    if (!(base > 0.0))
      throw ConfigError("RopeConfig: base must be > 0");
  }

  // theta_k = base^(-2k / head_dim), k in [0, head_dim/2)
  double freq(int64_t k) const {
    return std::pow(base, -2.0 * static_cast<double>(k) /
                              static_cast<double>(head_dim));
  }
};

// Rotates each (2k, 2k+1) component pair of x[..., seq, head_dim] by
// theta_k * scale * position. Pure rotation, so pair norms are preserved
// and the backward pass is the inverse rotation.
inline Tensor apply_rope(const Tensor& x, const RopeConfig& cfg) {
  cfg.validate();
  if (x.ndim() < 2) throw ShapeError("apply_rope: rank must be >= 2");
  if (x.shape().back() != cfg.head_dim)
    throw ConfigError("apply_rope: last extent " +
                      std::to_string(x.shape().back()) +
                      " != head_dim " + std::to_string(cfg.head_dim));
  const int64_t hd = cfg.head_dim;
  const int64_t half = hd / 2;
  const int64_t seq = x.extent(-2);
  const int64_t batch = x.numel() / (seq * hd);

  // Angle table, shared by forward and backward.
  std::vector<double> cos_t(static_cast<std::size_t>(seq * half));
  std::vector<double> sin_t(static_cast<std::size_t>(seq * half));
  for (int64_t p = 0; p < seq; ++p) {
    const double pos = cfg.scale * static_cast<double>(p);
    for (int64_t k = 0; k < half; ++k) {
      const double angle = cfg.freq(k) * pos;
      cos_t[p * half + k] = std::cos(angle);
      sin_t[p * half + k] = std::sin(angle);
    }
  }

  const auto& xd = x.data();
  std::vector<double> out(xd.size());
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t p = 0; p < seq; ++p) {
      const std::size_t row = static_cast<std::size_t>((b * seq + p) * hd);
      for (int64_t k = 0; k < half; ++k) {
        const double c = cos_t[p * half + k];
        const double s = sin_t[p * half + k];
        const double x0 = xd[row + 2 * k];
        const double x1 = xd[row + 2 * k + 1];
        out[row + 2 * k] = x0 * c - x1 * s;
        out[row + 2 * k + 1] = x0 * s + x1 * c;
      }
    }

  auto x_impl = x.impl_ptr();
  return detail::make_op_result(
      x.shape(), std::move(out), {x_impl},
      [x_impl, cos_t = std::move(cos_t), sin_t = std::move(sin_t), batch, seq,
       hd, half](TensorImpl& self) {
        if (!x_impl->requires_grad) return;
        auto& gx = x_impl->ensure_grad();
        const auto& g = self.grad;
        for (int64_t b = 0; b < batch; ++b)
          for (int64_t p = 0; p < seq; ++p) {
            const std::size_t row =
                static_cast<std::size_t>((b * seq + p) * hd);
            for (int64_t k = 0; k < half; ++k) {
              const double c = cos_t[p * half + k];
              const double s = sin_t[p * half + k];
              const double g0 = g[row + 2 * k];
              const double g1 = g[row + 2 * k + 1];
              gx[row + 2 * k] += g0 * c + g1 * s;
              gx[row + 2 * k + 1] += -g0 * s + g1 * c;
            }
          }
      });
}

// Cross-modal phase-alignment grid: entry (i, j) is the dot product of a
// fixed probe rotated to audio position i against the same probe rotated
// to video position j. With unit pairs this reduces to
// sum_k cos(theta_k * (scale_a * i - scale_v * j)).
struct AffinityMatrix {
  int64_t rows = 0;  // audio positions
  int64_t cols = 0;  // video positions
  std::vector<double> values;

  double at(int64_t i, int64_t j) const {
    return values[static_cast<std::size_t>(i * cols + j)];
  }

  // Ties go to the larger index, matching round-half-away-from-zero on the
  // scaled diagonal (exact ties occur when scale*i lands halfway between
  // two video positions).
  int64_t argmax_row(int64_t i) const {
    int64_t best = 0;
    for (int64_t j = 1; j < cols; ++j)
      if (at(i, j) >= at(i, best)) best = j;
    return best;
  }
};

inline AffinityMatrix affinity_matrix(int64_t audio_len, int64_t video_len,
                                      const RopeConfig& cfg_a,
                                      const RopeConfig& cfg_v) {
  cfg_a.validate();
  cfg_v.validate();
  if (cfg_a.head_dim != cfg_v.head_dim)
    throw ConfigError("affinity_matrix: head_dim mismatch");
  if (audio_len < 1 || video_len < 1)
    throw ConfigError("affinity_matrix: lengths must be >= 1");
  const int64_t half = cfg_a.head_dim / 2;
  AffinityMatrix m;
  m.rows = audio_len;
  m.cols = video_len;
  m.values.resize(static_cast<std::size_t>(audio_len * video_len));
  for (int64_t i = 0; i < audio_len; ++i)
    for (int64_t j = 0; j < video_len; ++j) {
      double acc = 0.0;
      const double pa = cfg_a.scale * static_cast<double>(i);
      const double pv = cfg_v.scale * static_cast<double>(j);
      for (int64_t k = 0; k < half; ++k)
        acc += std::cos(cfg_a.freq(k) * pa - cfg_v.freq(k) * pv);
      m.values[static_cast<std::size_t>(i * video_len + j)] = acc;
    }
  return m;
}

// Long-form CSV: header then one row per (audio_pos, video_pos) entry.
inline void export_affinity_csv(const AffinityMatrix& m,
                                const std::filesystem::path& path) {
  std::string out = "audio_pos,video_pos,affinity\n";
  char buf[96];
  for (int64_t i = 0; i < m.rows; ++i)
    for (int64_t j = 0; j < m.cols; ++j) {
      std::snprintf(buf, sizeof(buf), "%lld,%lld,%.17g\n",
                    static_cast<long long>(i), static_cast<long long>(j),
                    m.at(i, j));
      out += buf;
    }
  atomic_write_file(path, out);
}

inline AffinityMatrix parse_affinity_csv(const std::string& text) {
  AffinityMatrix m;
  std::size_t pos = text.find('\n');
  if (pos == std::string::npos ||
      text.substr(0, pos) != "audio_pos,video_pos,affinity")
    throw ParseError("affinity csv: bad header", 0);
  std::vector<double> vals;
  int64_t max_i = -1, max_j = -1;
  std::size_t line_no = 1;
  ++pos;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    const std::string line = text.substr(pos, eol - pos);
    if (!line.empty()) {
      long long i, j;
      double v;
      if (std::sscanf(line.c_str(), "%lld,%lld,%lf", &i, &j, &v) != 3)
        throw ParseError("affinity csv: bad row", line_no);
      vals.push_back(v);
      max_i = std::max<int64_t>(max_i, i);
      max_j = std::max<int64_t>(max_j, j);
    }
    pos = eol + 1;
    ++line_no;
  }
  m.rows = max_i + 1;
  m.cols = max_j + 1;
  if (static_cast<int64_t>(vals.size()) != m.rows * m.cols)
    throw ParseError("affinity csv: incomplete grid", line_no);
  m.values = std::move(vals);
  return m;
}

inline AffinityMatrix load_affinity_csv(const std::filesystem::path& path) {
  return parse_affinity_csv(read_file(path));
}

// 8-bit binary PGM (P5, maxval 255), min-max normalized. A constant matrix
// maps to all-zero pixels.
inline void export_affinity_pgm(const AffinityMatrix& m,
                                const std::filesystem::path& path) {
  double lo = m.values[0], hi = m.values[0];
  for (double v : m.values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi - lo;
  std::string out = "P5\n" + std::to_string(m.cols) + " " +
                    std::to_string(m.rows) + "\n255\n";
  out.reserve(out.size() + m.values.size());
  for (double v : m.values) {
    int pixel = 0;
    if (span > 0.0)
      pixel = static_cast<int>(std::lround((v - lo) / span * 255.0));
    out.push_back(static_cast<char>(static_cast<unsigned char>(pixel)));
  }
  atomic_write_file(path, out);
}

inline void export_affinity(const AffinityMatrix& m,
                            const std::filesystem::path& csv_path,
                            const std::filesystem::path& pgm_path) {
  export_affinity_csv(m, csv_path);
  export_affinity_pgm(m, pgm_path);
}

}  // namespace duet

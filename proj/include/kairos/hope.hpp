#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kairos/numerics/ops.hpp"
#include "kairos/preprocess.hpp"

namespace kairos {

/// Which positions of a [B x T] token grid write to memory, and whether slot
/// 0 is a summary query.
///
/// Positions are grouped into consecutive chunks of `chunk_size` (summary slot
/// excluded). A summary slot never writes; it reads the memory as it stands
/// after the whole sequence, so it is the only position allowed to see the
/// future.
struct SequenceLayout {
  bool summary_slot = false;
  std::vector<std::uint8_t> writes;  // [B x T]; empty = every position writes

  bool writes_at(std::size_t b, std::size_t T, std::size_t t) const {
    if (summary_slot && t == 0) return false;
    return writes.empty() || writes[b * T + t] != 0;
  }
};

namespace detail {

struct Chunk {
  std::size_t begin, end;
};

inline std::vector<Chunk> chunks_of(std::size_t T, std::size_t chunk_size, bool summary_slot) {
  if (chunk_size == 0) throw ConfigError("chunk size must be positive");
  std::vector<Chunk> out;
  for (std::size_t s = summary_slot ? 1 : 0; s < T; s += chunk_size) out.push_back({s, std::min(T, s + chunk_size)});
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Titans short-term memory

/// Associative memory M and its momentum S for one series.
struct TitansState {
  std::vector<double> M;  // D x D, row-major
  std::vector<double> S;  // D x D
};

struct TitansParams {
  Tensor w_q, w_k, w_v;                    // [D x D]
  Tensor alpha_raw, eta_raw, theta_raw;    // [1]; sigmoid -> forget / momentum / write rates
  std::size_t chunk_size = 8;

  static TitansParams init(std::size_t d, std::size_t chunk_size, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    return {randn({d, d}, rng, s, true), randn({d, d}, rng, s, true), randn({d, d}, rng, s, true),
            Tensor::scalar(-2.0, true), Tensor::scalar(0.0, true), Tensor::scalar(-1.0, true), chunk_size};
  }

  std::vector<std::pair<std::string, Tensor>> named(const std::string& prefix) const {
    return {{prefix + "w_q", w_q},           {prefix + "w_k", w_k},         {prefix + "w_v", w_v},
            {prefix + "alpha_raw", alpha_raw}, {prefix + "eta_raw", eta_raw}, {prefix + "theta_raw", theta_raw}};
  }
};

/// Momentum delta-rule recurrence over already-projected q, k (unit norm), v.
///
/// For every writing position, in order: s = v - M k; S <- eta S + s k^T;
/// M <- (1 - alpha) M + theta S. Every position then reads y = M q (update
/// precedes read). Backward recomputes states from per-chunk checkpoints.
inline Tensor titans_memory(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& alpha,
                            const Tensor& eta, const Tensor& theta, const SequenceLayout& layout,
                            std::size_t chunk_size, std::vector<TitansState>* final_states = nullptr,
                            const std::vector<TitansState>* init = nullptr) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape())
    throw DimensionError("titans_memory: q/k/v must share a [B x T x D] shape");
  const std::size_t B = q.dim(0), T = q.dim(1), D = q.dim(2), DD = D * D;
  if (!layout.writes.empty() && layout.writes.size() != B * T)
    throw DimensionError("titans_memory: write mask is not [B x T]");
  if (init && init->size() != B) throw DimensionError("titans_memory: one initial state per series");
  const auto chunks = detail::chunks_of(T, chunk_size, layout.summary_slot);
  const double a = alpha.item(), e = eta.item(), th = theta.item();

  // checkpoints[b][c] = (M, S) at the start of chunk c; index chunks.size() = final.
  auto checkpoints = std::make_shared<std::vector<std::vector<TitansState>>>(B);
  std::vector<double> out(B * T * D, 0.0);
  const double* Q = q.values().data();
  const double* K = k.values().data();
  const double* V = v.values().data();
  std::vector<double> s(D);
  std::uint64_t flops = 0;
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> M(DD, 0.0), S(DD, 0.0);
    if (init) {
      M = (*init)[b].M;
      S = (*init)[b].S;
    }
    auto& cps = (*checkpoints)[b];
    for (const auto& ch : chunks) {
      cps.push_back({M, S});
      for (std::size_t t = ch.begin; t < ch.end; ++t) {
        const double* kt = K + (b * T + t) * D;
        if (layout.writes_at(b, T, t)) {
          const double* vt = V + (b * T + t) * D;
          for (std::size_t i = 0; i < D; ++i) {
            double mk = 0.0;
            for (std::size_t j = 0; j < D; ++j) mk += M[i * D + j] * kt[j];
            s[i] = vt[i] - mk;
          }
          for (std::size_t i = 0; i < D; ++i)
            for (std::size_t j = 0; j < D; ++j) {
              double& sij = S[i * D + j];
              sij = e * sij + s[i] * kt[j];
              M[i * D + j] = (1.0 - a) * M[i * D + j] + th * sij;
            }
          flops += 8ULL * DD;
        }
        const double* qt = Q + (b * T + t) * D;
        double* yt = out.data() + (b * T + t) * D;
        for (std::size_t i = 0; i < D; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < D; ++j) acc += M[i * D + j] * qt[j];
          yt[i] = acc;
        }
        flops += 2ULL * DD;
      }
    }
    if (layout.summary_slot) {
      const double* q0 = Q + b * T * D;
      double* y0 = out.data() + b * T * D;
      for (std::size_t i = 0; i < D; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < D; ++j) acc += M[i * D + j] * q0[j];
        y0[i] = acc;
      }
      flops += 2ULL * DD;
    }
    if (final_states) final_states->push_back({M, S});
    cps.push_back({std::move(M), std::move(S)});
  }
  detail::add_flops(flops);

  return detail::make_result(
      q.shape(), std::move(out), {q, k, v, alpha, eta, theta},
      [q, k, v, alpha, eta, theta, layout, chunks, checkpoints, B, T, D, a, e, th](detail::Node& self) {
        const std::size_t DD = D * D;
        const double* Q = q.values().data();
        const double* K = k.values().data();
        const double* V = v.values().data();
        double* gq = detail::grad_of(q);
        double* gk = detail::grad_of(k);
        double* gv = detail::grad_of(v);
        double d_alpha = 0.0, d_eta = 0.0, d_theta = 0.0;
        std::vector<double> GM(DD), GS(DD), GSt(DD), ds(D), s(D);
        for (std::size_t b = 0; b < B; ++b) {
          std::fill(GM.begin(), GM.end(), 0.0);
          std::fill(GS.begin(), GS.end(), 0.0);
          const auto& cps = (*checkpoints)[b];
          auto read_back = [&](const std::vector<double>& M, std::size_t t) {
            const double* dy = self.grad.data() + (b * T + t) * D;
            const double* qt = Q + (b * T + t) * D;
            if (gq)
              for (std::size_t j = 0; j < D; ++j) {
                double acc = 0.0;
                for (std::size_t i = 0; i < D; ++i) acc += M[i * D + j] * dy[i];
                gq[(b * T + t) * D + j] += acc;
              }
            for (std::size_t i = 0; i < D; ++i)
              for (std::size_t j = 0; j < D; ++j) GM[i * D + j] += dy[i] * qt[j];
          };
          if (layout.summary_slot) read_back(cps.back().M, 0);

          for (std::size_t c = chunks.size(); c-- > 0;) {
            const auto& ch = chunks[c];
            const std::size_t len = ch.end - ch.begin;
            // states[i] = state before token ch.begin + i; states[len] = after the chunk.
            std::vector<TitansState> states;
            states.reserve(len + 1);
            states.push_back(cps[c]);
            for (std::size_t t = ch.begin; t < ch.end; ++t) {
              TitansState next = states.back();
              if (layout.writes_at(b, T, t)) {
                const double* kt = K + (b * T + t) * D;
                const double* vt = V + (b * T + t) * D;
                for (std::size_t i = 0; i < D; ++i) {
                  double mk = 0.0;
                  for (std::size_t j = 0; j < D; ++j) mk += next.M[i * D + j] * kt[j];
                  s[i] = vt[i] - mk;
                }
                for (std::size_t i = 0; i < D; ++i)
                  for (std::size_t j = 0; j < D; ++j) {
                    double& sij = next.S[i * D + j];
                    sij = e * sij + s[i] * kt[j];
                    next.M[i * D + j] = (1.0 - a) * next.M[i * D + j] + th * sij;
                  }
              }
              states.push_back(std::move(next));
            }
            for (std::size_t li = len; li-- > 0;) {
              const std::size_t t = ch.begin + li;
              const auto& prev = states[li];
              const auto& cur = states[li + 1];
              read_back(cur.M, t);
              if (!layout.writes_at(b, T, t)) continue;
              const double* kt = K + (b * T + t) * D;
              const double* vt = V + (b * T + t) * D;
              for (std::size_t i = 0; i < D; ++i) {
                double mk = 0.0;
                for (std::size_t j = 0; j < D; ++j) mk += prev.M[i * D + j] * kt[j];
                s[i] = vt[i] - mk;
              }
              for (std::size_t x = 0; x < DD; ++x) {
                d_alpha -= GM[x] * prev.M[x];
                d_theta += GM[x] * cur.S[x];
                GSt[x] = GS[x] + th * GM[x];
                d_eta += GSt[x] * prev.S[x];
              }
              for (std::size_t i = 0; i < D; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < D; ++j) acc += GSt[i * D + j] * kt[j];
                ds[i] = acc;
              }
              if (gk)
                for (std::size_t j = 0; j < D; ++j) {
                  double acc = 0.0;
                  for (std::size_t i = 0; i < D; ++i) acc += GSt[i * D + j] * s[i] - prev.M[i * D + j] * ds[i];
                  gk[(b * T + t) * D + j] += acc;
                }
              if (gv)
                for (std::size_t i = 0; i < D; ++i) gv[(b * T + t) * D + i] += ds[i];
              for (std::size_t i = 0; i < D; ++i)
                for (std::size_t j = 0; j < D; ++j) {
                  GM[i * D + j] = (1.0 - a) * GM[i * D + j] - ds[i] * kt[j];
                  GS[i * D + j] = e * GSt[i * D + j];
                }
            }
          }
        }
        if (double* g = detail::grad_of(alpha)) g[0] += d_alpha;
        if (double* g = detail::grad_of(eta)) g[0] += d_eta;
        if (double* g = detail::grad_of(theta)) g[0] += d_theta;
      });
}

/// Projects x into queries, unit-norm keys and values, then runs the memory.
inline Tensor titans_forward(const Tensor& x, const TitansParams& p, const SequenceLayout& layout,
                             std::vector<TitansState>* final_states = nullptr,
                             const std::vector<TitansState>* init = nullptr) {
  Tensor q = matmul(x, p.w_q);
  Tensor k = l2_normalize(matmul(x, p.w_k));
  Tensor v = matmul(x, p.w_v);
  return titans_memory(q, k, v, sigmoid(p.alpha_raw), sigmoid(p.eta_raw), sigmoid(p.theta_raw), layout,
                       p.chunk_size, final_states, init);
}

// ---------------------------------------------------------------------------
// Continuum memory system (long-term, multi-rate)

struct CmsParams {
  std::vector<Tensor> read;    // R_l [D x D]
  std::vector<Tensor> write;   // W_l [D x D]
  std::vector<Tensor> gate;    // [D]
  std::vector<double> decay;   // gamma_l, strictly increasing in l
  std::size_t chunk_size = 8;

  std::size_t levels() const { return read.size(); }

  /// gamma_l = 1 - 2^-l for l = 1..levels.
  static std::vector<double> geometric_decay(std::size_t levels) {
    std::vector<double> g(levels);
    for (std::size_t l = 0; l < levels; ++l) g[l] = 1.0 - std::ldexp(1.0, -static_cast<int>(l + 1));
    return g;
  }

  static CmsParams init(std::size_t d, std::size_t levels, std::size_t chunk_size, Rng& rng) {
    CmsParams p;
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t l = 0; l < levels; ++l) {
      p.read.push_back(randn({d, d}, rng, s, true));
      p.write.push_back(randn({d, d}, rng, s, true));
      p.gate.push_back(randn({d}, rng, 0.02, true));
    }
    p.decay = geometric_decay(levels);
    p.chunk_size = chunk_size;
    return p;
  }

  std::vector<std::pair<std::string, Tensor>> named(const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t l = 0; l < levels(); ++l) {
      const auto lvl = prefix + "level" + std::to_string(l) + ".";
      out.emplace_back(lvl + "read", read[l]);
      out.emplace_back(lvl + "write", write[l]);
      out.emplace_back(lvl + "gate", gate[l]);
    }
    return out;
  }
};

/// Per-series CMS level states m_l, [levels][D].
using CmsState = std::vector<std::vector<double>>;

/// Chunked multi-level EMA memory.
///
/// Tokens of chunk c read r_l = m_l R_l from the state as it stood before the
/// chunk: y_t = sum_l sigmoid(gate_l * x_t) * r_l. After the chunk, with u the
/// mean of its writing tokens, m_l <- gamma_l m_l + (1 - gamma_l) u W_l.
/// Chunks without writing tokens leave the state untouched.
inline Tensor cms_forward(const Tensor& x, const CmsParams& p, const SequenceLayout& layout,
                          std::vector<CmsState>* final_states = nullptr,
                          const std::vector<CmsState>* init = nullptr) {
  if (x.rank() != 3) throw DimensionError("cms_forward: input must be [B x T x D]");
  const std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2), Lv = p.levels();
  if (p.write.size() != Lv || p.gate.size() != Lv || p.decay.size() != Lv)
    throw ConfigError("cms_forward: inconsistent level count");
  for (std::size_t l = 0; l < Lv; ++l)
    if (p.read[l].shape() != Shape{D, D} || p.write[l].shape() != Shape{D, D} || p.gate[l].size() != D)
      throw DimensionError("cms_forward: level " + std::to_string(l) + " parameters do not match width " +
                           std::to_string(D));
  if (!layout.writes.empty() && layout.writes.size() != B * T)
    throw DimensionError("cms_forward: write mask is not [B x T]");
  if (init && init->size() != B) throw DimensionError("cms_forward: one initial state per series");
  const auto chunks = detail::chunks_of(T, p.chunk_size, layout.summary_slot);
  const std::size_t C = chunks.size();
  const double* X = x.values().data();

  // history[b][c][l] = state before chunk c; c = C is the final state.
  auto history = std::make_shared<std::vector<std::vector<CmsState>>>(B);
  std::vector<double> out(B * T * D, 0.0), r(D), u(D);
  std::uint64_t flops = 0;

  auto read_into = [&](const CmsState& m, std::size_t b, std::size_t t_begin, std::size_t t_end) {
    for (std::size_t l = 0; l < Lv; ++l) {
      const double* R = p.read[l].values().data();
      const double* g = p.gate[l].values().data();
      std::fill(r.begin(), r.end(), 0.0);
      for (std::size_t i = 0; i < D; ++i)
        for (std::size_t j = 0; j < D; ++j) r[j] += m[l][i] * R[i * D + j];
      for (std::size_t t = t_begin; t < t_end; ++t) {
        const double* xt = X + (b * T + t) * D;
        double* yt = out.data() + (b * T + t) * D;
        for (std::size_t j = 0; j < D; ++j) yt[j] += r[j] / (1.0 + std::exp(-g[j] * xt[j]));
      }
      flops += 2ULL * D * D + 5ULL * D * (t_end - t_begin);
    }
  };

  for (std::size_t b = 0; b < B; ++b) {
    CmsState m = init ? (*init)[b] : CmsState(Lv, std::vector<double>(D, 0.0));
    auto& hist = (*history)[b];
    for (const auto& ch : chunks) {
      hist.push_back(m);
      read_into(m, b, ch.begin, ch.end);
      std::fill(u.begin(), u.end(), 0.0);
      std::size_t n = 0;
      for (std::size_t t = ch.begin; t < ch.end; ++t) {
        if (!layout.writes_at(b, T, t)) continue;
        ++n;
        for (std::size_t j = 0; j < D; ++j) u[j] += X[(b * T + t) * D + j];
      }
      if (n == 0) continue;
      for (auto& uj : u) uj /= static_cast<double>(n);
      for (std::size_t l = 0; l < Lv; ++l) {
        const double* W = p.write[l].values().data();
        const double gm = p.decay[l];
        std::fill(r.begin(), r.end(), 0.0);
        for (std::size_t i = 0; i < D; ++i)
          for (std::size_t j = 0; j < D; ++j) r[j] += u[i] * W[i * D + j];
        for (std::size_t j = 0; j < D; ++j) m[l][j] = gm * m[l][j] + (1.0 - gm) * r[j];
        flops += 2ULL * D * D + 3ULL * D;
      }
    }
    if (layout.summary_slot) read_into(m, b, 0, 1);
    if (final_states) final_states->push_back(m);
    hist.push_back(std::move(m));
  }
  detail::add_flops(flops);

  std::vector<Tensor> parents{x};
  for (std::size_t l = 0; l < Lv; ++l) {
    parents.push_back(p.read[l]);
    parents.push_back(p.write[l]);
    parents.push_back(p.gate[l]);
  }
  return detail::make_result(
      x.shape(), std::move(out), parents, [x, p, layout, chunks, history, B, T, D, Lv, C](detail::Node& self) {
        const double* X = x.values().data();
        double* gx = detail::grad_of(x);
        std::vector<double*> gR(Lv), gW(Lv), gG(Lv);
        for (std::size_t l = 0; l < Lv; ++l) {
          gR[l] = detail::grad_of(p.read[l]);
          gW[l] = detail::grad_of(p.write[l]);
          gG[l] = detail::grad_of(p.gate[l]);
        }
        std::vector<double> r(D), dr(D), u(D), du(D);
        CmsState dm(Lv, std::vector<double>(D));

        // Gradient of the reads of tokens [t_begin, t_end) against state m.
        auto read_back = [&](const CmsState& m, std::size_t b, std::size_t t_begin, std::size_t t_end) {
          for (std::size_t l = 0; l < Lv; ++l) {
            const double* R = p.read[l].values().data();
            const double* gate = p.gate[l].values().data();
            std::fill(r.begin(), r.end(), 0.0);
            for (std::size_t i = 0; i < D; ++i)
              for (std::size_t j = 0; j < D; ++j) r[j] += m[l][i] * R[i * D + j];
            std::fill(dr.begin(), dr.end(), 0.0);
            for (std::size_t t = t_begin; t < t_end; ++t) {
              const double* xt = X + (b * T + t) * D;
              const double* dy = self.grad.data() + (b * T + t) * D;
              for (std::size_t j = 0; j < D; ++j) {
                const double g = 1.0 / (1.0 + std::exp(-gate[j] * xt[j]));
                dr[j] += dy[j] * g;
                const double dpre = dy[j] * r[j] * g * (1.0 - g);
                if (gG[l]) gG[l][j] += dpre * xt[j];
                if (gx) gx[(b * T + t) * D + j] += dpre * gate[j];
              }
            }
            for (std::size_t i = 0; i < D; ++i) {
              double acc = 0.0;
              for (std::size_t j = 0; j < D; ++j) {
                if (gR[l]) gR[l][i * D + j] += m[l][i] * dr[j];
                acc += R[i * D + j] * dr[j];
              }
              dm[l][i] += acc;
            }
          }
        };

        for (std::size_t b = 0; b < B; ++b) {
          const auto& hist = (*history)[b];
          for (auto& lvl : dm) std::fill(lvl.begin(), lvl.end(), 0.0);
          if (layout.summary_slot) read_back(hist[C], b, 0, 1);
          for (std::size_t c = C; c-- > 0;) {
            const auto& ch = chunks[c];
            std::size_t n = 0;
            std::fill(u.begin(), u.end(), 0.0);
            for (std::size_t t = ch.begin; t < ch.end; ++t) {
              if (!layout.writes_at(b, T, t)) continue;
              ++n;
              for (std::size_t j = 0; j < D; ++j) u[j] += X[(b * T + t) * D + j];
            }
            if (n > 0) {
              for (auto& uj : u) uj /= static_cast<double>(n);
              std::fill(du.begin(), du.end(), 0.0);
              for (std::size_t l = 0; l < Lv; ++l) {
                const double* W = p.write[l].values().data();
                const double w = 1.0 - p.decay[l];
                for (std::size_t i = 0; i < D; ++i) {
                  double acc = 0.0;
                  for (std::size_t j = 0; j < D; ++j) {
                    if (gW[l]) gW[l][i * D + j] += w * u[i] * dm[l][j];
                    acc += W[i * D + j] * dm[l][j];
                  }
                  du[i] += w * acc;
                }
                for (auto& v : dm[l]) v *= p.decay[l];
              }
              if (gx)
                for (std::size_t t = ch.begin; t < ch.end; ++t) {
                  if (!layout.writes_at(b, T, t)) continue;
                  for (std::size_t j = 0; j < D; ++j) gx[(b * T + t) * D + j] += du[j] / static_cast<double>(n);
                }
            }
            read_back(hist[c], b, ch.begin, ch.end);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// HOPE block and encoder

struct HopeBlockParams {
  Tensor ln1_g, ln1_b;
  TitansParams titans;
  Tensor ln2_g, ln2_b;
  CmsParams cms;
  Tensor ln3_g, ln3_b;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  double dropout = 0.1;

  static HopeBlockParams init(std::size_t d, std::size_t levels, std::size_t chunk_size, std::size_t ffn_mult,
                              double dropout, Rng& rng) {
    HopeBlockParams p;
    p.ln1_g = Tensor::full({d}, 1.0, true);
    p.ln1_b = Tensor::zeros({d}, true);
    p.titans = TitansParams::init(d, chunk_size, rng);
    p.ln2_g = Tensor::full({d}, 1.0, true);
    p.ln2_b = Tensor::zeros({d}, true);
    p.cms = CmsParams::init(d, levels, chunk_size, rng);
    p.ln3_g = Tensor::full({d}, 1.0, true);
    p.ln3_b = Tensor::zeros({d}, true);
    const std::size_t h = d * ffn_mult;
    p.ffn_w1 = randn({d, h}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
    p.ffn_b1 = Tensor::zeros({h}, true);
    p.ffn_w2 = randn({h, d}, rng, 1.0 / std::sqrt(static_cast<double>(h)), true);
    p.ffn_b2 = Tensor::zeros({d}, true);
    p.dropout = dropout;
    return p;
  }

  std::vector<std::pair<std::string, Tensor>> named(const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out{{prefix + "ln1.gamma", ln1_g}, {prefix + "ln1.beta", ln1_b}};
    for (auto& e : titans.named(prefix + "titans.")) out.push_back(e);
    out.emplace_back(prefix + "ln2.gamma", ln2_g);
    out.emplace_back(prefix + "ln2.beta", ln2_b);
    for (auto& e : cms.named(prefix + "cms.")) out.push_back(e);
    out.emplace_back(prefix + "ln3.gamma", ln3_g);
    out.emplace_back(prefix + "ln3.beta", ln3_b);
    out.emplace_back(prefix + "ffn.w1", ffn_w1);
    out.emplace_back(prefix + "ffn.b1", ffn_b1);
    out.emplace_back(prefix + "ffn.w2", ffn_w2);
    out.emplace_back(prefix + "ffn.b2", ffn_b2);
    return out;
  }
};

/// Train mode enables dropout, which draws from `rng`.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;

  Rng& stream() const {
    if (!rng) throw ContractError("training-mode forward needs an Rng");
    return *rng;
  }
};

inline Tensor feed_forward(const Tensor& x, const HopeBlockParams& p) {
  return add(matmul(gelu(add(matmul(x, p.ffn_w1), p.ffn_b1)), p.ffn_w2), p.ffn_b2);
}

struct HopeBlockOutput {
  Tensor y;
  std::vector<TitansState> titans;
  std::vector<CmsState> cms;
};

/// Pre-norm residual block: Titans, then CMS, then a GELU feed-forward.
inline HopeBlockOutput hope_block(const Tensor& x, const HopeBlockParams& p, const SequenceLayout& layout,
                                  const ForwardContext& ctx = {}) {
  auto drop = [&](const Tensor& t) {
    return ctx.training && p.dropout > 0.0 ? dropout(t, p.dropout, ctx.stream(), true) : t;
  };
  HopeBlockOutput out;
  Tensor x1 = add(x, drop(titans_forward(layer_norm(x, p.ln1_g, p.ln1_b), p.titans, layout, &out.titans)));
  Tensor x2 = add(x1, drop(cms_forward(layer_norm(x1, p.ln2_g, p.ln2_b), p.cms, layout, &out.cms)));
  out.y = add(x2, drop(feed_forward(layer_norm(x2, p.ln3_g, p.ln3_b), p)));
  return out;
}

struct EncoderOutput {
  Tensor H;      // [B x (N+1) x D]
  Tensor h_cls;  // [B x D]
};

/// Layout of a tokenized batch: CLS is the summary slot, padding never writes.
inline SequenceLayout layout_for(const PatchedBatch& batch) {
  const std::size_t B = batch.tokens.dim(0), N = batch.num_patches;
  SequenceLayout layout{true, std::vector<std::uint8_t>(B * (N + 1), 0)};
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < N; ++i) layout.writes[b * (N + 1) + i + 1] = batch.padding_mask[b * N + i];
  return layout;
}

/// Runs the block stack over tokens with fresh (zero) memory per series.
inline Tensor encode_tokens(const Tensor& tokens, const std::vector<HopeBlockParams>& blocks,
                            const SequenceLayout& layout, const ForwardContext& ctx = {}) {
  Tensor h = tokens;
  for (const auto& blk : blocks) h = hope_block(h, blk, layout, ctx).y;
  return h;
}

inline EncoderOutput encode(const PatchedBatch& batch, const std::vector<HopeBlockParams>& blocks,
                            const ForwardContext& ctx = {}) {
  Tensor H = encode_tokens(batch.tokens, blocks, layout_for(batch), ctx);
  return {H, select(H, 1, 0)};
}

}  // namespace kairos

#include "clmr/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>

#include "clmr/error.hpp"

namespace clmr {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

void require_rank4(const Tensor& t, const char* what) {
  if (t.rank() != 4) {
    throw ShapeError(std::string(what) + " must be N x C x H x W, got " + shape_string(t.shape()));
  }
}

struct ConvGeometry {
  std::size_t n, cin, h, w;
  std::size_t cout, k, pad;
  std::size_t ho, wo;
  std::size_t rows() const { return cin * k * k; }
  std::size_t taps() const { return k * k; }
  std::size_t pixels() const { return ho * wo; }
  std::size_t hp() const { return h + 2 * pad; }
  std::size_t wp() const { return w + 2 * pad; }
};

// ---- Direct convolution ----------------------------------------------------
//
// The batch is copied into a zero-padded strip per channel: sample s occupies
// positions [s*S, (s+1)*S) with S = hp*wp and row pitch wp. Output is computed
// on the same strip: point q reads input q + ky*wp + kx for tap (ky, kx), and
// only points with row < ho and column < wo of their sample are kept. Kernels
// are register blocked over output channels and strip vectors.

typedef double Vec __attribute__((vector_size(64)));
constexpr std::size_t kLanes = 8;
constexpr std::size_t kCoutBlock = 4;
constexpr std::size_t kVecBlock = 6;
constexpr std::size_t kStrip = kLanes * kVecBlock;
constexpr std::size_t kDwCoutBlock = 8;
constexpr std::size_t kDwChunk = 2048;
// Narrower maps waste too much of the strip on padding.
constexpr std::size_t kDirectMinWidth = 8;

bool use_direct(const ConvGeometry& g) { return g.k > 1 && g.wo >= kDirectMinWidth; }

std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

Vec load_vec(const double* p) {
  Vec v;
  std::memcpy(&v, p, sizeof(Vec));
  return v;
}

void store_vec(double* p, Vec v) { std::memcpy(p, &v, sizeof(Vec)); }

// out[c][q] = sum over i, t of wpk[i][t][c] * in[i * in_stride + offs[t] + q]
// for kCoutBlock channels c and q in [0, round_up(len, kStrip)).
void direct_block(const double* in, std::size_t in_stride, std::size_t cin, const std::size_t* offs,
                  std::size_t taps, const double* wpk, double* out, std::size_t out_stride, std::size_t len) {
  for (std::size_t q0 = 0; q0 < len; q0 += kStrip) {
    Vec acc[kCoutBlock][kVecBlock];
#pragma GCC unroll 8
    for (std::size_t c = 0; c < kCoutBlock; ++c) {
#pragma GCC unroll 8
      for (std::size_t j = 0; j < kVecBlock; ++j) acc[c][j] = Vec{};
    }
    for (std::size_t i = 0; i < cin; ++i) {
      const double* xi = in + i * in_stride + q0;
      const double* wi = wpk + i * taps * kCoutBlock;
      for (std::size_t t = 0; t < taps; ++t) {
        Vec xv[kVecBlock];
#pragma GCC unroll 8
        for (std::size_t j = 0; j < kVecBlock; ++j) xv[j] = load_vec(xi + offs[t] + j * kLanes);
#pragma GCC unroll 8
        for (std::size_t c = 0; c < kCoutBlock; ++c) {
          const double wv = wi[t * kCoutBlock + c];
#pragma GCC unroll 8
          for (std::size_t j = 0; j < kVecBlock; ++j) acc[c][j] += wv * xv[j];
        }
      }
    }
#pragma GCC unroll 8
    for (std::size_t c = 0; c < kCoutBlock; ++c) {
#pragma GCC unroll 8
      for (std::size_t j = 0; j < kVecBlock; ++j) store_vec(out + c * out_stride + q0 + j * kLanes, acc[c][j]);
    }
  }
}

// sums[c][j] = sum_q dy[c][q] * x[q + j] for kDwCoutBlock channels c, j < NK
// and q < len (a multiple of kLanes).
template <std::size_t NK>
void dw_row(const double* dy, std::size_t dy_stride, const double* x, std::size_t len, double* sums) {
  Vec acc[kDwCoutBlock][NK];
#pragma GCC unroll 8
  for (std::size_t c = 0; c < kDwCoutBlock; ++c) {
#pragma GCC unroll 4
    for (std::size_t j = 0; j < NK; ++j) acc[c][j] = Vec{};
  }
  for (std::size_t q = 0; q < len; q += kLanes) {
    Vec xv[NK];
#pragma GCC unroll 4
    for (std::size_t j = 0; j < NK; ++j) xv[j] = load_vec(x + q + j);
#pragma GCC unroll 8
    for (std::size_t c = 0; c < kDwCoutBlock; ++c) {
      const Vec d = load_vec(dy + c * dy_stride + q);
#pragma GCC unroll 4
      for (std::size_t j = 0; j < NK; ++j) acc[c][j] += d * xv[j];
    }
  }
  double lanes[kLanes];
#pragma GCC unroll 8
  for (std::size_t c = 0; c < kDwCoutBlock; ++c) {
#pragma GCC unroll 4
    for (std::size_t j = 0; j < NK; ++j) {
      store_vec(lanes, acc[c][j]);
      double s = 0.0;
      for (std::size_t l = 0; l < kLanes; ++l) s += lanes[l];
      sums[c * NK + j] = s;
    }
  }
}

// Packs w (outer x inner x taps, outer-major) into blocks of kCoutBlock outer
// channels laid out [block][inner][tap][lane]. Missing channels are zero.
// With transpose, the roles of the first two kernel axes swap and taps flip.
std::vector<double> pack_weights(const double* w, const ConvGeometry& g, bool transpose) {
  const std::size_t outer = transpose ? g.cin : g.cout;
  const std::size_t inner = transpose ? g.cout : g.cin;
  const std::size_t taps = g.taps();
  const std::size_t blocks = round_up(outer, kCoutBlock) / kCoutBlock;
  std::vector<double> out(blocks * inner * taps * kCoutBlock, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t blk = o / kCoutBlock, lane = o % kCoutBlock;
    for (std::size_t i = 0; i < inner; ++i) {
      for (std::size_t t = 0; t < taps; ++t) {
        const double v = transpose ? w[(i * g.cin + o) * taps + (taps - 1 - t)] : w[(o * g.cin + i) * taps + t];
        out[((blk * inner + i) * taps + t) * kCoutBlock + lane] = v;
      }
    }
  }
  return out;
}

struct StripLayout {
  std::size_t sample;   // hp * wp
  std::size_t len;      // rounded strip length covering the batch
  std::size_t reach;    // largest tap offset
  std::size_t lead;     // zero lead of gradient strips, reach rounded up to a vector
  std::size_t stride;   // per channel, with slack for the largest tap past len
  std::vector<std::size_t> offs;
};

StripLayout strip_layout(const ConvGeometry& g) {
  StripLayout L;
  L.sample = g.hp() * g.wp();
  L.len = round_up(g.n * L.sample, kStrip);
  L.reach = (g.k - 1) * g.wp() + (g.k - 1);
  L.lead = round_up(L.reach, kLanes);
  L.stride = round_up(L.lead + L.len + L.reach + kLanes, kLanes);
  L.offs.resize(g.taps());
  for (std::size_t ky = 0; ky < g.k; ++ky) {
    for (std::size_t kx = 0; kx < g.k; ++kx) L.offs[ky * g.k + kx] = ky * g.wp() + kx;
  }
  return L;
}

using AlignedBuffer = std::vector<double, Eigen::aligned_allocator<double>>;

// Grow-only per-thread buffers; contents are not preserved between uses.
enum ScratchSlot { kInputStrip, kOutputGrid, kGradStrip, kSlotCount };

double* scratch(ScratchSlot slot, std::size_t size) {
  thread_local std::array<AlignedBuffer, kSlotCount> pool;
  auto& buf = pool[slot];
  if (buf.size() < size) buf.resize(size);
  return buf.data();
}

// Writes every element of the input strips: padding, samples and tail.
void fill_input_strip(const double* x, const ConvGeometry& g, const StripLayout& L, double* xs) {
  const std::size_t wp = g.wp(), pad = g.pad;
  for (std::size_t c = 0; c < g.cin; ++c) {
    double* d = xs + c * L.stride;
    for (std::size_t n = 0; n < g.n; ++n) {
      const double* src = x + (n * g.cin + c) * g.h * g.w;
      std::fill(d, d + pad * wp + pad, 0.0);
      d += pad * wp + pad;
      for (std::size_t y = 0; y < g.h; ++y) {
        std::memcpy(d, src + y * g.w, sizeof(double) * g.w);
        d += g.w;
        const std::size_t gap = y + 1 < g.h ? 2 * pad : pad;
        std::fill(d, d + gap, 0.0);
        d += gap;
      }
      std::fill(d, d + pad * wp, 0.0);
      d += pad * wp;
    }
    std::fill(d, xs + (c + 1) * L.stride, 0.0);
  }
}

// Writes the output gradient strips: zero lead, kept outputs, zeros elsewhere.
void fill_grad_strip(const double* dy, const ConvGeometry& g, const StripLayout& L, std::size_t channels,
                     double* dys) {
  const std::size_t wp = g.wp();
  for (std::size_t c = 0; c < channels; ++c) {
    double* base = dys + c * L.stride;
    if (c >= g.cout) {
      std::fill(base, base + L.stride, 0.0);
      continue;
    }
    double* d = base;
    std::fill(d, d + L.lead, 0.0);
    d += L.lead;
    for (std::size_t n = 0; n < g.n; ++n) {
      const double* src = dy + (n * g.cout + c) * g.pixels();
      for (std::size_t oy = 0; oy < g.ho; ++oy) {
        std::memcpy(d, src + oy * g.wo, sizeof(double) * g.wo);
        std::fill(d + g.wo, d + wp, 0.0);
        d += wp;
      }
      std::fill(d, d + (L.sample - g.ho * wp), 0.0);
      d += L.sample - g.ho * wp;
    }
    std::fill(d, base + L.stride, 0.0);
  }
}

void direct_forward(const double* x, const double* w, const ConvGeometry& g, double* out) {
  const auto L = strip_layout(g);
  const auto wpk = pack_weights(w, g, false);
  const std::size_t cout_pad = round_up(g.cout, kCoutBlock);
  double* xs = scratch(kInputStrip, g.cin * L.stride);
  double* grid = scratch(kOutputGrid, cout_pad * L.len);
  fill_input_strip(x, g, L, xs);
  for (std::size_t cb = 0; cb < cout_pad; cb += kCoutBlock) {
    direct_block(xs, L.stride, g.cin, L.offs.data(), g.taps(), wpk.data() + cb * g.cin * g.taps(), grid + cb * L.len,
                 L.len, g.n * L.sample);
  }
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t c = 0; c < g.cout; ++c) {
      for (std::size_t oy = 0; oy < g.ho; ++oy) {
        std::memcpy(out + ((n * g.cout + c) * g.ho + oy) * g.wo, grid + c * L.len + n * L.sample + oy * g.wp(),
                    sizeof(double) * g.wo);
      }
    }
  }
}

void direct_backward(const double* x, const double* w, const double* dy, const ConvGeometry& g, double* dx,
                     double* dw) {
  const auto L = strip_layout(g);
  const std::size_t taps = g.taps();
  const std::size_t wp = g.wp();
  const std::size_t grad_channels = round_up(g.cout, kDwCoutBlock);
  double* dys = scratch(kGradStrip, grad_channels * L.stride);
  fill_grad_strip(dy, g, L, grad_channels, dys);
  if (dx) {
    // The input gradient correlates the gradient strip with the flipped,
    // transposed kernel. A tap reaching before its sample lands on zeros.
    const auto wpk = pack_weights(w, g, true);
    const std::size_t cin_pad = round_up(g.cin, kCoutBlock);
    double* grid = scratch(kOutputGrid, cin_pad * L.len);
    for (std::size_t cb = 0; cb < cin_pad; cb += kCoutBlock) {
      direct_block(dys + (L.lead - L.reach), L.stride, g.cout, L.offs.data(), taps, wpk.data() + cb * g.cout * taps,
                   grid + cb * L.len, L.len, g.n * L.sample);
    }
    for (std::size_t n = 0; n < g.n; ++n) {
      for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t y = 0; y < g.h; ++y) {
          const double* src = grid + c * L.len + n * L.sample + (y + g.pad) * wp + g.pad;
          double* d = dx + ((n * g.cin + c) * g.h + y) * g.w;
          for (std::size_t i = 0; i < g.w; ++i) d[i] += src[i];
        }
      }
    }
  }
  if (dw) {
    double* xs = scratch(kInputStrip, g.cin * L.stride);
    fill_input_strip(x, g, L, xs);
    const std::size_t len = round_up(g.n * L.sample, kLanes);
    double sums[kDwCoutBlock * 3];
    for (std::size_t cb = 0; cb < g.cout; cb += kDwCoutBlock) {
      const std::size_t nc = std::min(kDwCoutBlock, g.cout - cb);
      // Chunks keep the gradient rows of this block cache-resident across input channels.
      for (std::size_t q0 = 0; q0 < len; q0 += kDwChunk) {
        const std::size_t qlen = std::min(kDwChunk, len - q0);
        const double* dyb = dys + cb * L.stride + L.lead + q0;
        for (std::size_t i = 0; i < g.cin; ++i) {
          for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx0 = 0; kx0 < g.k; kx0 += 3) {
              const std::size_t nk = std::min<std::size_t>(3, g.k - kx0);
              const double* xr = xs + i * L.stride + ky * wp + kx0 + q0;
              if (nk == 3) {
                dw_row<3>(dyb, L.stride, xr, qlen, sums);
              } else if (nk == 2) {
                dw_row<2>(dyb, L.stride, xr, qlen, sums);
              } else {
                dw_row<1>(dyb, L.stride, xr, qlen, sums);
              }
              for (std::size_t c = 0; c < nc; ++c) {
                for (std::size_t j = 0; j < nk; ++j) {
                  dw[((cb + c) * g.cin + i) * taps + ky * g.k + kx0 + j] += sums[c * nk + j];
                }
              }
            }
          }
        }
      }
    }
  }
}

// ---- GEMM convolution -------------------------------------------------------
//
// Used for 1x1 kernels and very small feature maps. Output rows are unfolded
// (im2col) in tiles; small maps pack several samples per tile.

constexpr std::size_t kTilePixels = 1024;

// Samples [n0, n1), output rows [oy0, oy1) of each.
struct ConvTile {
  std::size_t n0, n1, oy0, oy1;
  std::size_t seg(const ConvGeometry& g) const { return (oy1 - oy0) * g.wo; }
  std::size_t cols(const ConvGeometry& g) const { return (n1 - n0) * seg(g); }
};

std::vector<ConvTile> plan_tiles(const ConvGeometry& g) {
  std::vector<ConvTile> tiles;
  const std::size_t per_sample = g.pixels();
  if (per_sample >= kTilePixels) {
    const std::size_t tr = std::max<std::size_t>(1, kTilePixels / g.wo);
    for (std::size_t n = 0; n < g.n; ++n) {
      for (std::size_t oy0 = 0; oy0 < g.ho; oy0 += tr) tiles.push_back({n, n + 1, oy0, std::min(g.ho, oy0 + tr)});
    }
  } else {
    const std::size_t spt = kTilePixels / per_sample;
    for (std::size_t n0 = 0; n0 < g.n; n0 += spt) tiles.push_back({n0, std::min(g.n, n0 + spt), 0, g.ho});
  }
  return tiles;
}

std::size_t max_tile_cols(const ConvGeometry& g, const std::vector<ConvTile>& tiles) {
  std::size_t m = 0;
  for (const auto& t : tiles) m = std::max(m, t.cols(g));
  return m;
}

// Unfolds output rows [oy0, oy1) of one sample into (cin*k*k) rows of pitch ld.
void im2col(const double* x, const ConvGeometry& g, std::size_t oy0, std::size_t oy1, double* cols, std::size_t ld) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* dst = cols + ((c * g.k + ky) * g.k + kx) * ld;
        const std::ptrdiff_t ox_lo = std::max<std::ptrdiff_t>(0, std::ptrdiff_t(g.pad) - std::ptrdiff_t(kx));
        const std::ptrdiff_t ox_hi =
            std::min<std::ptrdiff_t>(std::ptrdiff_t(g.wo), std::ptrdiff_t(g.w + g.pad) - std::ptrdiff_t(kx));
        const std::ptrdiff_t shift = std::ptrdiff_t(kx) - std::ptrdiff_t(g.pad);
        for (std::size_t oy = oy0; oy < oy1; ++oy) {
          double* d = dst + (oy - oy0) * g.wo;
          const std::ptrdiff_t iy = std::ptrdiff_t(oy + ky) - std::ptrdiff_t(g.pad);
          if (iy < 0 || iy >= std::ptrdiff_t(g.h) || ox_lo >= ox_hi) {
            std::fill(d, d + g.wo, 0.0);
            continue;
          }
          const double* row = x + (c * g.h + std::size_t(iy)) * g.w;
          std::fill(d, d + ox_lo, 0.0);
          std::memcpy(d + ox_lo, row + (ox_lo + shift), sizeof(double) * std::size_t(ox_hi - ox_lo));
          std::fill(d + ox_hi, d + g.wo, 0.0);
        }
      }
    }
  }
}

// Adjoint of im2col: scatters column gradients back into one sample.
void col2im_add(const double* cols, std::size_t ld, const ConvGeometry& g, std::size_t oy0, std::size_t oy1,
                double* dx) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* src = cols + ((c * g.k + ky) * g.k + kx) * ld;
        const std::ptrdiff_t ox_lo = std::max<std::ptrdiff_t>(0, std::ptrdiff_t(g.pad) - std::ptrdiff_t(kx));
        const std::ptrdiff_t ox_hi =
            std::min<std::ptrdiff_t>(std::ptrdiff_t(g.wo), std::ptrdiff_t(g.w + g.pad) - std::ptrdiff_t(kx));
        const std::ptrdiff_t shift = std::ptrdiff_t(kx) - std::ptrdiff_t(g.pad);
        for (std::size_t oy = oy0; oy < oy1; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy + ky) - std::ptrdiff_t(g.pad);
          if (iy < 0 || iy >= std::ptrdiff_t(g.h)) continue;
          const double* s = src + (oy - oy0) * g.wo;
          double* d = dx + (c * g.h + std::size_t(iy)) * g.w;
          for (std::ptrdiff_t ox = ox_lo; ox < ox_hi; ++ox) d[ox + shift] += s[ox];
        }
      }
    }
  }
}

void gemm_forward(const double* x, const double* w, const ConvGeometry& g, double* out) {
  const std::size_t rows = g.rows();
  const std::size_t in_stride = g.cin * g.h * g.w;
  const std::size_t out_stride = g.cout * g.pixels();
  const auto tiles = plan_tiles(g);
  const std::size_t max_cols = max_tile_cols(g, tiles);
  std::vector<double> cols(rows * max_cols);
  std::vector<double> ytile(g.cout * max_cols);
  const ConstMatMap wmat(w, Eigen::Index(g.cout), Eigen::Index(rows));
  for (const auto& t : tiles) {
    const std::size_t ncols = t.cols(g), seg = t.seg(g);
    for (std::size_t s = t.n0; s < t.n1; ++s) {
      im2col(x + s * in_stride, g, t.oy0, t.oy1, cols.data() + (s - t.n0) * seg, ncols);
    }
    MatMap(ytile.data(), Eigen::Index(g.cout), Eigen::Index(ncols)).noalias() =
        wmat * ConstMatMap(cols.data(), Eigen::Index(rows), Eigen::Index(ncols));
    for (std::size_t s = t.n0; s < t.n1; ++s) {
      for (std::size_t c = 0; c < g.cout; ++c) {
        std::memcpy(out + s * out_stride + c * g.pixels() + t.oy0 * g.wo, ytile.data() + c * ncols + (s - t.n0) * seg,
                    sizeof(double) * seg);
      }
    }
  }
}

void gemm_backward(const double* x, const double* w, const double* dy, const ConvGeometry& g, double* dx,
                   double* dw) {
  const std::size_t rows = g.rows();
  const std::size_t p = g.pixels();
  const std::size_t in_stride = g.cin * g.h * g.w;
  const std::size_t out_stride = g.cout * p;
  const auto tiles = plan_tiles(g);
  const std::size_t max_cols = max_tile_cols(g, tiles);
  std::vector<double> cols(dw ? rows * max_cols : 0);
  std::vector<double> dcols(dx ? rows * max_cols : 0);
  std::vector<double> dtile(g.cout * max_cols);
  const ConstMatMap wmat(w, Eigen::Index(g.cout), Eigen::Index(rows));
  for (const auto& t : tiles) {
    const std::size_t ncols = t.cols(g), seg = t.seg(g);
    for (std::size_t s = t.n0; s < t.n1; ++s) {
      for (std::size_t c = 0; c < g.cout; ++c) {
        std::memcpy(dtile.data() + c * ncols + (s - t.n0) * seg, dy + s * out_stride + c * p + t.oy0 * g.wo,
                    sizeof(double) * seg);
      }
    }
    const ConstMatMap dmat(dtile.data(), Eigen::Index(g.cout), Eigen::Index(ncols));
    if (dw) {
      for (std::size_t s = t.n0; s < t.n1; ++s) {
        im2col(x + s * in_stride, g, t.oy0, t.oy1, cols.data() + (s - t.n0) * seg, ncols);
      }
      MatMap(dw, Eigen::Index(g.cout), Eigen::Index(rows)).noalias() +=
          dmat * ConstMatMap(cols.data(), Eigen::Index(rows), Eigen::Index(ncols)).transpose();
    }
    if (dx) {
      MatMap(dcols.data(), Eigen::Index(rows), Eigen::Index(ncols)).noalias() = wmat.transpose() * dmat;
      for (std::size_t s = t.n0; s < t.n1; ++s) {
        col2im_add(dcols.data() + (s - t.n0) * seg, ncols, g, t.oy0, t.oy1, dx + s * in_stride);
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Padding padding) {
  require_rank4(input, "conv2d input");
  require_rank4(kernel, "conv2d kernel");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = kernel.dim(0);
  g.k = kernel.dim(2);
  if (kernel.dim(1) != g.cin) {
    throw ShapeError("conv2d kernel expects " + std::to_string(kernel.dim(1)) + " input channels, input has " +
                     std::to_string(g.cin));
  }
  if (kernel.dim(3) != g.k || g.k % 2 == 0) {
    throw ShapeError("conv2d kernel must be square with odd size, got " + shape_string(kernel.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.cout)) {
    throw ShapeError("conv2d bias must have " + std::to_string(g.cout) + " elements");
  }
  g.pad = padding == Padding::Same ? g.k / 2 : 0;
  if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k) throw ShapeError("conv2d kernel larger than input");
  g.ho = g.h + 2 * g.pad - g.k + 1;
  g.wo = g.w + 2 * g.pad - g.k + 1;

  const std::size_t p = g.pixels();
  std::vector<double> out(g.n * g.cout * p);
  if (use_direct(g)) {
    direct_forward(input.values().data(), kernel.values().data(), g, out.data());
  } else {
    gemm_forward(input.values().data(), kernel.values().data(), g, out.data());
  }
  if (bias.defined()) {
    const auto b = bias.values();
    for (std::size_t n = 0; n < g.n; ++n) {
      for (std::size_t c = 0; c < g.cout; ++c) {
        double* y = out.data() + (n * g.cout + c) * p;
        for (std::size_t i = 0; i < p; ++i) y[i] += b[c];
      }
    }
  }

  auto in_impl = input.impl();
  auto k_impl = kernel.impl();
  auto b_impl = bias.defined() ? bias.impl() : nullptr;
  std::vector<Tensor> inputs{input, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor::make_result(
      {g.n, g.cout, g.ho, g.wo}, std::move(out), std::move(inputs),
      [g, in_impl, k_impl, b_impl](const detail::TensorImpl& result) {
        const std::size_t p = g.pixels();
        const double* dy = result.grad.data();
        if (b_impl && b_impl->requires_grad) {
          double* db = b_impl->grad_buffer().data();
          for (std::size_t n = 0; n < g.n; ++n) {
            for (std::size_t c = 0; c < g.cout; ++c) {
              const double* d = dy + (n * g.cout + c) * p;
              double s = 0.0;
              for (std::size_t i = 0; i < p; ++i) s += d[i];
              db[c] += s;
            }
          }
        }
        double* dx = in_impl->requires_grad ? in_impl->grad_buffer().data() : nullptr;
        double* dw = k_impl->requires_grad ? k_impl->grad_buffer().data() : nullptr;
        if (!dx && !dw) return;
        if (use_direct(g)) {
          direct_backward(in_impl->values.data(), k_impl->values.data(), dy, g, dx, dw);
        } else {
          gemm_backward(in_impl->values.data(), k_impl->values.data(), dy, g, dx, dw);
        }
      });
}

BatchNormStats BatchNormStats::init(std::size_t channels) {
  BatchNormStats s;
  s.running_mean.assign(channels, 0.0);
  s.running_var.assign(channels, 1.0);
  return s;
}

namespace {

// Sum of term(i) over [0, len) with eight interleaved partial sums. The
// order is fixed, so results do not depend on where the buffers live.
template <typename Term>
double lane_sum(std::size_t len, Term term) {
  double acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= len; i += 8) {
#pragma GCC unroll 8
    for (std::size_t l = 0; l < 8; ++l) acc[l] += term(i + l);
  }
  for (std::size_t l = 0; i < len; ++i, ++l) acc[l] += term(i);
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

}  // namespace

Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& shift, BatchNormStats& stats, Mode mode) {
  require_rank4(input, "batch_norm input");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  if (gamma.numel() != c || shift.numel() != c || stats.running_mean.size() != c || stats.running_var.size() != c) {
    throw ShapeError("batch_norm parameters must have " + std::to_string(c) + " channels");
  }
  const std::size_t count = n * hw;
  if (mode == Mode::Train && count < 2) {
    throw DomainError("batch_norm in train mode needs at least 2 values per channel, got " + std::to_string(count));
  }
  const auto x = input.values();
  const auto gm = gamma.values();
  const auto sh = shift.values();
  std::vector<double> mean(c), invstd(c);
  if (mode == Mode::Train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* px = x.data() + (b * c + ch) * hw;
        s += lane_sum(hw, [px](std::size_t i) { return px[i]; });
      }
      const double mu = s / double(count);
      double ss = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* px = x.data() + (b * c + ch) * hw;
        ss += lane_sum(hw, [px, mu](std::size_t i) { return (px[i] - mu) * (px[i] - mu); });
      }
      const double var = ss / double(count);
      mean[ch] = mu;
      invstd[ch] = 1.0 / std::sqrt(var + stats.eps);
      stats.running_mean[ch] = stats.momentum * stats.running_mean[ch] + (1.0 - stats.momentum) * mu;
      stats.running_var[ch] =
          stats.momentum * stats.running_var[ch] + (1.0 - stats.momentum) * var * double(count) / double(count - 1);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = stats.running_mean[ch];
      invstd[ch] = 1.0 / std::sqrt(stats.running_var[ch] + stats.eps);
    }
  }
  std::vector<double> xhat(x.size()), out(x.size());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double v = (x[off + i] - mean[ch]) * invstd[ch];
        xhat[off + i] = v;
        out[off + i] = gm[ch] * v + sh[ch];
      }
    }
  }
  auto in_impl = input.impl();
  auto g_impl = gamma.impl();
  auto s_impl = shift.impl();
  return Tensor::make_result(
      input.shape(), std::move(out), {input, gamma, shift},
      [n, c, hw, mode, in_impl, g_impl, s_impl, xhat = std::move(xhat),
       invstd = std::move(invstd)](const detail::TensorImpl& result) {
        const auto& dy = result.grad;
        const double count = double(n * hw);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * hw;
            const double* g = dy.data() + off;
            const double* xh = xhat.data() + off;
            sum_dy += lane_sum(hw, [g](std::size_t i) { return g[i]; });
            sum_dy_xhat += lane_sum(hw, [g, xh](std::size_t i) { return g[i] * xh[i]; });
          }
          if (g_impl->requires_grad) g_impl->grad_buffer()[ch] += sum_dy_xhat;
          if (s_impl->requires_grad) s_impl->grad_buffer()[ch] += sum_dy;
          if (!in_impl->requires_grad) continue;
          auto& dx = in_impl->grad_buffer();
          const double gmv = g_impl->values[ch];
          if (mode == Mode::Train) {
            const double k = gmv * invstd[ch] / count;
            for (std::size_t b = 0; b < n; ++b) {
              const std::size_t off = (b * c + ch) * hw;
              for (std::size_t i = 0; i < hw; ++i) {
                dx[off + i] += k * (count * dy[off + i] - sum_dy - xhat[off + i] * sum_dy_xhat);
              }
            }
          } else {
            const double k = gmv * invstd[ch];
            for (std::size_t b = 0; b < n; ++b) {
              const std::size_t off = (b * c + ch) * hw;
              for (std::size_t i = 0; i < hw; ++i) dx[off + i] += k * dy[off + i];
            }
          }
        }
      });
}

Tensor relu(const Tensor& input) {
  const auto x = input.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] < 0.0 ? 0.0 : x[i];  // NaN passes through
  auto in_impl = input.impl();
  return Tensor::make_result(input.shape(), std::move(out), {input}, [in_impl](const detail::TensorImpl& result) {
    auto& dx = in_impl->grad_buffer();
    const auto& x = in_impl->values;
    const auto& dy = result.grad;
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] += x[i] > 0.0 ? dy[i] : 0.0;
  });
}

Tensor max_pool2x2(const Tensor& input) {
  require_rank4(input, "max_pool2x2 input");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("max_pool2x2 needs even spatial dimensions, got " + shape_string(input.shape()));
  }
  const std::size_t ho = h / 2, wo = w / 2;
  const auto x = input.values();
  std::vector<double> out(n * c * ho * wo);
  std::vector<std::uint32_t> argmax(out.size());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* px = x.data() + plane * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = (2 * oy) * w + 2 * ox;
        for (std::size_t cand : {best + 1, best + w, best + w + 1}) {
          if (px[cand] > px[best]) best = cand;
        }
        const std::size_t o = plane * ho * wo + oy * wo + ox;
        out[o] = px[best];
        argmax[o] = std::uint32_t(plane * h * w + best);
      }
    }
  }
  auto in_impl = input.impl();
  return Tensor::make_result({n, c, ho, wo}, std::move(out), {input},
                             [in_impl, argmax = std::move(argmax)](const detail::TensorImpl& result) {
                               auto& dx = in_impl->grad_buffer();
                               for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += result.grad[o];
                             });
}

Tensor upsample2x(const Tensor& input) {
  require_rank4(input, "upsample2x input");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t ho = 2 * h, wo = 2 * w;
  const auto x = input.values();
  std::vector<double> out(n * c * ho * wo);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* px = x.data() + plane * h * w;
    double* po = out.data() + plane * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) po[oy * wo + ox] = px[(oy / 2) * w + ox / 2];
    }
  }
  auto in_impl = input.impl();
  return Tensor::make_result({n, c, ho, wo}, std::move(out), {input},
                             [n, c, h, w, in_impl](const detail::TensorImpl& result) {
                               auto& dx = in_impl->grad_buffer();
                               const std::size_t ho = 2 * h, wo = 2 * w;
                               for (std::size_t plane = 0; plane < n * c; ++plane) {
                                 const double* g = result.grad.data() + plane * ho * wo;
                                 double* d = dx.data() + plane * h * w;
                                 for (std::size_t oy = 0; oy < ho; ++oy) {
                                   for (std::size_t ox = 0; ox < wo; ++ox) d[(oy / 2) * w + ox / 2] += g[oy * wo + ox];
                                 }
                               }
                             });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank4(a, "concat_channels lhs");
  require_rank4(b, "concat_channels rhs");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels needs equal N, H, W; got " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  std::vector<double> out(n * (ca + cb) * hw);
  const auto xa = a.values();
  const auto xb = b.values();
  for (std::size_t s = 0; s < n; ++s) {
    std::copy_n(xa.data() + s * ca * hw, ca * hw, out.data() + s * (ca + cb) * hw);
    std::copy_n(xb.data() + s * cb * hw, cb * hw, out.data() + s * (ca + cb) * hw + ca * hw);
  }
  auto a_impl = a.impl();
  auto b_impl = b.impl();
  return Tensor::make_result({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                             [n, ca, cb, hw, a_impl, b_impl](const detail::TensorImpl& result) {
                               const double* g = result.grad.data();
                               for (std::size_t s = 0; s < n; ++s) {
                                 const double* gs = g + s * (ca + cb) * hw;
                                 if (a_impl->requires_grad) {
                                   double* d = a_impl->grad_buffer().data() + s * ca * hw;
                                   for (std::size_t i = 0; i < ca * hw; ++i) d[i] += gs[i];
                                 }
                                 if (b_impl->requires_grad) {
                                   double* d = b_impl->grad_buffer().data() + s * cb * hw;
                                   for (std::size_t i = 0; i < cb * hw; ++i) d[i] += gs[ca * hw + i];
                                 }
                               }
                             });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels) {
  require_rank4(logits, "softmax_cross_entropy logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  if (labels.size() != n * hw) {
    throw ShapeError("label map has " + std::to_string(labels.size()) + " entries, logits cover " +
                     std::to_string(n * hw) + " pixels");
  }
  const auto z = logits.values();
  std::vector<double> prob(z.size());
  double total = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < hw; ++i) {
      const std::int32_t label = labels[s * hw + i];
      if (label < 0 || std::size_t(label) >= c) {
        throw DomainError("label " + std::to_string(label) + " outside [0, " + std::to_string(c) + ")");
      }
      const double* zp = z.data() + s * c * hw + i;
      double zmax = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < c; ++k) zmax = std::max(zmax, zp[k * hw]);
      double denom = 0.0;
      for (std::size_t k = 0; k < c; ++k) denom += std::exp(zp[k * hw] - zmax);
      const double log_denom = std::log(denom);
      for (std::size_t k = 0; k < c; ++k) prob[s * c * hw + k * hw + i] = std::exp(zp[k * hw] - zmax - log_denom);
      total -= zp[std::size_t(label) * hw] - zmax - log_denom;
    }
  }
  const double pixels = double(n * hw);
  auto l_impl = logits.impl();
  std::vector<std::int32_t> label_copy(labels.begin(), labels.end());
  return Tensor::make_result(
      {1}, {total / pixels}, {logits},
      [n, c, hw, pixels, l_impl, prob = std::move(prob), label_copy = std::move(label_copy)](
          const detail::TensorImpl& result) {
        auto& dz = l_impl->grad_buffer();
        const double g = result.grad[0] / pixels;
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t k = 0; k < c; ++k) {
            const std::size_t off = s * c * hw + k * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              const double onehot = label_copy[s * hw + i] == std::int32_t(k) ? 1.0 : 0.0;
              dz[off + i] += g * (prob[off + i] - onehot);
            }
          }
        }
      });
}

Tensor sum(const Tensor& input) {
  double s = 0.0;
  for (double v : input.values()) s += v;
  auto in_impl = input.impl();
  return Tensor::make_result({1}, {s}, {input}, [in_impl](const detail::TensorImpl& result) {
    for (auto& d : in_impl->grad_buffer()) d += result.grad[0];
  });
}

Tensor scale(const Tensor& input, double factor) {
  const auto x = input.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = factor * x[i];
  auto in_impl = input.impl();
  return Tensor::make_result(input.shape(), std::move(out), {input},
                             [in_impl, factor](const detail::TensorImpl& result) {
                               auto& d = in_impl->grad_buffer();
                               for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * result.grad[i];
                             });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("add of " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  const auto xa = a.values();
  const auto xb = b.values();
  std::vector<double> out(xa.size());
  for (std::size_t i = 0; i < xa.size(); ++i) out[i] = xa[i] + xb[i];
  auto a_impl = a.impl();
  auto b_impl = b.impl();
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [a_impl, b_impl](const detail::TensorImpl& result) {
    for (auto* impl : {a_impl.get(), b_impl.get()}) {
      if (!impl->requires_grad) continue;
      auto& d = impl->grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += result.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul of " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  const auto xa = a.values();
  const auto xb = b.values();
  std::vector<double> out(xa.size());
  for (std::size_t i = 0; i < xa.size(); ++i) out[i] = xa[i] * xb[i];
  auto a_impl = a.impl();
  auto b_impl = b.impl();
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [a_impl, b_impl](const detail::TensorImpl& result) {
    if (a_impl->requires_grad) {
      auto& d = a_impl->grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += result.grad[i] * b_impl->values[i];
    }
    if (b_impl->requires_grad) {
      auto& d = b_impl->grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += result.grad[i] * a_impl->values[i];
    }
  });
}

}  // namespace clmr

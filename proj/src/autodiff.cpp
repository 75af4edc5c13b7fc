#include "barl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace barl::ad {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ArrX = Eigen::Array<Real, Eigen::Dynamic, 1>;

namespace {
void require(bool cond, const std::string& msg) {
  if (!cond) throw shape_error(msg);
}
}  // namespace

// ---------------------------------------------------------------------------
// Tape / Var
// ---------------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->node(id_).value; }
const Tensor& Var::grad() const { return tape_->node(id_).grad; }
bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

Real Var::item() const {
  const Tensor& v = value();
  require(v.size() == 1, "Var::item: node is not a scalar, shape " + shape_str(v.shape()));
  return v[0];
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor{}, false, false, nullptr});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor{}, grad_enabled_, false, nullptr});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor& Tape::grad_buffer(int id) {
  Node& n = node(id);
  if (!n.grad_live) {
    n.grad = Tensor::zeros(n.value.shape());
    n.grad_live = true;
  }
  return n.grad;
}

void Tape::backward(Var root) {
  if (backward_done_)
    throw std::logic_error("Tape::backward called twice; gradients would accumulate across calls");
  require(root.tape() == this, "backward: root belongs to a different tape");
  const Node& r = node(root.id());
  require(r.value.size() == 1, "backward: root must be scalar, shape " + shape_str(r.value.shape()));
  backward_done_ = true;
  if (!r.requires_grad) return;
  grad_buffer(root.id())[0] = 1.0;
  for (int i = root.id(); i >= 0; --i) {
    Node& n = node(i);
    if (n.grad_live && n.backprop) n.backprop(*this);
  }
}

void Tape::check_finite(Var v, const char* opname) const {
  if (!node(v.id()).value.all_finite())
    throw numeric_error(std::string(opname) + ": non-finite values produced");
}

void backward(Var root) { root.tape()->backward(root); }

// ---------------------------------------------------------------------------
// Op plumbing (friend of Tape)
// ---------------------------------------------------------------------------

struct OpBuilder {
  static Var emit(Tape& t, Tensor value, std::initializer_list<Var> ins) {
    bool rg = false;
    if (t.grad_enabled())
      for (Var v : ins) rg = rg || v.requires_grad();
    t.nodes_.push_back(Tape::Node{std::move(value), Tensor{}, rg, false, nullptr});
    return Var(&t, static_cast<int>(t.nodes_.size()) - 1);
  }

  static void set_backprop(Var y, std::function<void(Tape&)> fn) {
    y.tape()->node(y.id()).backprop = std::move(fn);
  }

  static Tensor& grad(Tape& t, int id) { return t.grad_buffer(id); }
  static const Tensor& val(const Tape& t, int id) { return t.node(id).value; }
  static bool needs_grad(const Tape& t, int id) { return t.node(id).requires_grad; }
};

namespace {

using OB = OpBuilder;

/// Unary elementwise op: forward maps the flat array, dfn(x, y, g) returns
/// the flat-array gradient contribution for the input.
template <typename FwdF, typename BwdF>
Var unary_elementwise(Var x, FwdF fwd, BwdF dfn) {
  Tape& t = *x.tape();
  Tensor out(x.value().shape());
  fwd(x.value().flat(), out.flat());
  Var y = OB::emit(t, std::move(out), {x});
  if (y.requires_grad()) {
    int ix = x.id(), iy = y.id();
    OB::set_backprop(y, [ix, iy, dfn](Tape& tp) {
      const ArrX& g = OB::grad(tp, iy).flat();
      OB::grad(tp, ix).flat() += dfn(OB::val(tp, ix).flat(), OB::val(tp, iy).flat(), g);
    });
  }
  return y;
}

void require_same_shape(Var a, Var b, const char* op) {
  if (!a.value().same_shape(b.value()))
    throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.value().shape()) +
                      " vs " + shape_str(b.value().shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise suite
// ---------------------------------------------------------------------------

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tape& t = *a.tape();
  Tensor out(a.value().shape(), a.value().flat() + b.value().flat());
  Var y = OB::emit(t, std::move(out), {a, b});
  if (y.requires_grad()) {
    int ia = a.id(), ib = b.id(), iy = y.id();
    OB::set_backprop(y, [ia, ib, iy](Tape& tp) {
      const ArrX& g = OB::grad(tp, iy).flat();
      if (OB::needs_grad(tp, ia)) OB::grad(tp, ia).flat() += g;
      if (OB::needs_grad(tp, ib)) OB::grad(tp, ib).flat() += g;
    });
  }
  return y;
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tape& t = *a.tape();
  Tensor out(a.value().shape(), a.value().flat() - b.value().flat());
  Var y = OB::emit(t, std::move(out), {a, b});
  if (y.requires_grad()) {
    int ia = a.id(), ib = b.id(), iy = y.id();
    OB::set_backprop(y, [ia, ib, iy](Tape& tp) {
      const ArrX& g = OB::grad(tp, iy).flat();
      if (OB::needs_grad(tp, ia)) OB::grad(tp, ia).flat() += g;
      if (OB::needs_grad(tp, ib)) OB::grad(tp, ib).flat() -= g;
    });
  }
  return y;
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tape& t = *a.tape();
  Tensor out(a.value().shape(), a.value().flat() * b.value().flat());
  Var y = OB::emit(t, std::move(out), {a, b});
  if (y.requires_grad()) {
    int ia = a.id(), ib = b.id(), iy = y.id();
    OB::set_backprop(y, [ia, ib, iy](Tape& tp) {
      const ArrX& g = OB::grad(tp, iy).flat();
      if (OB::needs_grad(tp, ia)) OB::grad(tp, ia).flat() += g * OB::val(tp, ib).flat();
      if (OB::needs_grad(tp, ib)) OB::grad(tp, ib).flat() += g * OB::val(tp, ia).flat();
    });
  }
  return y;
}

Var div(Var a, Var b) {
  require_same_shape(a, b, "div");
  Tape& t = *a.tape();
  Tensor out(a.value().shape(), a.value().flat() / b.value().flat());
  Var y = OB::emit(t, std::move(out), {a, b});
  t.check_finite(y, "div");
  if (y.requires_grad()) {
    int ia = a.id(), ib = b.id(), iy = y.id();
    OB::set_backprop(y, [ia, ib, iy](Tape& tp) {
      const ArrX& g = OB::grad(tp, iy).flat();
      const ArrX& bv = OB::val(tp, ib).flat();
      if (OB::needs_grad(tp, ia)) OB::grad(tp, ia).flat() += g / bv;
      if (OB::needs_grad(tp, ib))
        OB::grad(tp, ib).flat() -= g * OB::val(tp, iy).flat() / bv;
    });
  }
  return y;
}

Var scalar_mul(Var x, Real s) {
  return unary_elementwise(
      x, [s](const ArrX& xv, ArrX& yv) { yv = s * xv; },
      [s](const ArrX&, const ArrX&, const ArrX& g) -> ArrX { return s * g; });
}

Var add_scalar(Var x, Real s) {
  return unary_elementwise(
      x, [s](const ArrX& xv, ArrX& yv) { yv = xv + s; },
      [](const ArrX&, const ArrX&, const ArrX& g) -> ArrX { return g; });
}

Var relu(Var x) {
  return unary_elementwise(
      x, [](const ArrX& xv, ArrX& yv) { yv = xv.max(0.0); },
      [](const ArrX& xv, const ArrX&, const ArrX& g) -> ArrX {
        // subgradient 0 at x == 0
        return (xv > 0.0).select(g, 0.0);
      });
}

Var sigmoid(Var x) {
  return unary_elementwise(
      x,
      [](const ArrX& xv, ArrX& yv) {
        yv = (xv >= 0.0).select(1.0 / (1.0 + (-xv).exp()), xv.exp() / (1.0 + xv.exp()));
      },
      [](const ArrX&, const ArrX& yv, const ArrX& g) -> ArrX { return g * yv * (1.0 - yv); });
}

Var square(Var x) {
  return unary_elementwise(
      x, [](const ArrX& xv, ArrX& yv) { yv = xv.square(); },
      [](const ArrX& xv, const ArrX&, const ArrX& g) -> ArrX { return 2.0 * g * xv; });
}

Var abs(Var x) {
  return unary_elementwise(
      x, [](const ArrX& xv, ArrX& yv) { yv = xv.abs(); },
      [](const ArrX& xv, const ArrX&, const ArrX& g) -> ArrX { return g * xv.sign(); });
}

Var sqrt(Var x) {
  if ((x.value().flat() < 0.0).any()) throw numeric_error("sqrt: negative input");
  return unary_elementwise(
      x, [](const ArrX& xv, ArrX& yv) { yv = xv.sqrt(); },
      [](const ArrX&, const ArrX& yv, const ArrX& g) -> ArrX { return 0.5 * g / yv; });
}

Var recip(Var x) {
  Var y = unary_elementwise(
      x, [](const ArrX& xv, ArrX& yv) { yv = 1.0 / xv; },
      [](const ArrX&, const ArrX& yv, const ArrX& g) -> ArrX { return -g * yv.square(); });
  x.tape()->check_finite(y, "recip");
  return y;
}

Var log_safe(Var x, Real eps) {
  if (eps <= 0.0) throw std::invalid_argument("log_safe: eps must be > 0");
  return unary_elementwise(
      x, [eps](const ArrX& xv, ArrX& yv) { yv = xv.max(eps).log(); },
      [eps](const ArrX& xv, const ArrX&, const ArrX& g) -> ArrX {
        return (xv > eps).select(g / xv, 0.0);
      });
}

Var pow_scalar(Var x, Real e) {
  const Real floor_v = 1e-300;
  return unary_elementwise(
      x, [e, floor_v](const ArrX& xv, ArrX& yv) { yv = xv.max(floor_v).pow(e); },
      [e, floor_v](const ArrX& xv, const ArrX&, const ArrX& g) -> ArrX {
        return g * e * xv.max(floor_v).pow(e - 1.0);
      });
}

// ---------------------------------------------------------------------------
// Group normalization
// ---------------------------------------------------------------------------

Var group_norm(Var x, int groups, Var gamma, Var beta, Real eps) {
  if (eps <= 0.0) throw std::invalid_argument("group_norm: eps must be > 0");
  const Tensor& xv = x.value();
  require(xv.rank() >= 2, "group_norm: expected [N,C,...], got " + shape_str(xv.shape()));
  const Index n_batch = xv.extent(0), channels = xv.extent(1);
  require(channels % groups == 0, "group_norm: groups must divide channel count");
  require(gamma.value().size() == channels && beta.value().size() == channels,
          "group_norm: gamma/beta must have one entry per channel");
  const Index sp = xv.size() / (n_batch * channels);
  const Index cg = channels / groups;   // channels per group
  const Index m = cg * sp;              // elements per (sample, group) block

  Tensor xhat(xv.shape());
  Tensor inv_s({n_batch * groups});
  // (n, group) blocks are contiguous in row-major [N,C,spatial] layout.
  for (Index n = 0; n < n_batch; ++n) {
    for (Index g = 0; g < groups; ++g) {
      const Index off = (n * channels + g * cg) * sp;
      Eigen::Map<const ArrX> blk(xv.data() + off, m);
      const Real mu = blk.mean();
      const Real var = (blk - mu).square().mean();
      const Real is = 1.0 / std::sqrt(var + eps);
      inv_s[n * groups + g] = is;
      Eigen::Map<ArrX>(xhat.data() + off, m) = (blk - mu) * is;
    }
  }
  Tensor out(xv.shape());
  for (Index n = 0; n < n_batch; ++n)
    for (Index c = 0; c < channels; ++c) {
      const Index off = (n * channels + c) * sp;
      Eigen::Map<ArrX>(out.data() + off, sp) =
          gamma.value()[c] * Eigen::Map<const ArrX>(xhat.data() + off, sp) + beta.value()[c];
    }

  Tape& t = *x.tape();
  Var y = OB::emit(t, std::move(out), {x, gamma, beta});
  if (y.requires_grad()) {
    int ix = x.id(), ig = gamma.id(), ib = beta.id(), iy = y.id();
    OB::set_backprop(y, [ix, ig, ib, iy, xhat = std::move(xhat), inv_s = std::move(inv_s),
                         n_batch, channels, groups, cg, sp, m](Tape& tp) {
      const Tensor& g = OB::grad(tp, iy);
      const ArrX& gamma_v = OB::val(tp, ig).flat();
      if (OB::needs_grad(tp, ib)) {
        ArrX& gb = OB::grad(tp, ib).flat();
        for (Index n = 0; n < n_batch; ++n)
          for (Index c = 0; c < channels; ++c)
            gb[c] += Eigen::Map<const ArrX>(g.data() + (n * channels + c) * sp, sp).sum();
      }
      if (OB::needs_grad(tp, ig)) {
        ArrX& gg = OB::grad(tp, ig).flat();
        for (Index n = 0; n < n_batch; ++n)
          for (Index c = 0; c < channels; ++c) {
            const Index off = (n * channels + c) * sp;
            gg[c] += (Eigen::Map<const ArrX>(g.data() + off, sp) *
                      Eigen::Map<const ArrX>(xhat.data() + off, sp))
                         .sum();
          }
      }
      if (OB::needs_grad(tp, ix)) {
        Tensor& gx = OB::grad(tp, ix);
        ArrX ghat(m);
        for (Index n = 0; n < n_batch; ++n)
          for (Index gr = 0; gr < groups; ++gr) {
            const Index off = (n * channels + gr * cg) * sp;
            for (Index c = 0; c < cg; ++c)
              ghat.segment(c * sp, sp) =
                  gamma_v[gr * cg + c] *
                  Eigen::Map<const ArrX>(g.data() + off + c * sp, sp);
            Eigen::Map<const ArrX> xh(xhat.data() + off, m);
            const Real m1 = ghat.mean();
            const Real m2 = (ghat * xh).mean();
            Eigen::Map<ArrX>(gx.data() + off, m) += (ghat - m1 - xh * m2) * inv_s[n * groups + gr];
          }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Softmax over channels
// ---------------------------------------------------------------------------

Var softmax_channels(Var x) {
  const Tensor& xv = x.value();
  require(xv.rank() >= 2, "softmax_channels: expected [N,C,...], got " + shape_str(xv.shape()));
  const Index n_batch = xv.extent(0), channels = xv.extent(1);
  require(channels >= 2, "softmax_channels: needs at least 2 channels");
  if (!xv.all_finite()) throw numeric_error("softmax_channels: non-finite input");
  const Index sp = xv.size() / (n_batch * channels);

  Tensor out(xv.shape());
  for (Index n = 0; n < n_batch; ++n)
    for (Index p = 0; p < sp; ++p) {
      const Index base = n * channels * sp + p;
      Real mx = xv[base];
      for (Index c = 1; c < channels; ++c) mx = std::max(mx, xv[base + c * sp]);
      Real z = 0.0;
      for (Index c = 0; c < channels; ++c) {
        const Real e = std::exp(xv[base + c * sp] - mx);
        out[base + c * sp] = e;
        z += e;
      }
      for (Index c = 0; c < channels; ++c) out[base + c * sp] /= z;
    }

  Tape& t = *x.tape();
  Var y = OB::emit(t, std::move(out), {x});
  if (y.requires_grad()) {
    int ix = x.id(), iy = y.id();
    OB::set_backprop(y, [ix, iy, n_batch, channels, sp](Tape& tp) {
      const Tensor& g = OB::grad(tp, iy);
      const Tensor& yv = OB::val(tp, iy);
      Tensor& gx = OB::grad(tp, ix);
      for (Index n = 0; n < n_batch; ++n)
        for (Index p = 0; p < sp; ++p) {
          const Index base = n * channels * sp + p;
          Real dot = 0.0;
          for (Index c = 0; c < channels; ++c) dot += g[base + c * sp] * yv[base + c * sp];
          for (Index c = 0; c < channels; ++c)
            gx[base + c * sp] += yv[base + c * sp] * (g[base + c * sp] - dot);
        }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// 3D convolution (cross-correlation), im2col + GEMM
// ---------------------------------------------------------------------------

namespace {

struct ConvGeom {
  Index n, ci, d, h, w;      // input
  Index co, k;               // kernel
  Index pad, stride;
  Index od, oh, ow;          // output spatial
  Index rows() const { return n * od * oh * ow; }
  Index cols() const { return ci * k * k * k; }
};

ConvGeom conv_geometry(const Shape& xs, const Shape& ws, int stride, Padding pad) {
  require(xs.size() == 5, "conv3d: input must be [N,Cin,D,H,W], got " + shape_str(xs));
  require(ws.size() == 5, "conv3d: kernel must be [Cout,Cin,k,k,k], got " + shape_str(ws));
  require(ws[2] == ws[3] && ws[3] == ws[4], "conv3d: kernel must be cubic, got " + shape_str(ws));
  require(ws[2] % 2 == 1, "conv3d: kernel size must be odd");
  require(xs[1] == ws[1], "conv3d: input channel axis (" + std::to_string(xs[1]) +
                              ") does not match kernel channel axis (" + std::to_string(ws[1]) + ")");
  require(stride == 1 || stride == 2, "conv3d: stride must be 1 or 2");
  ConvGeom geo;
  geo.n = xs[0]; geo.ci = xs[1]; geo.d = xs[2]; geo.h = xs[3]; geo.w = xs[4];
  geo.co = ws[0]; geo.k = ws[2];
  geo.stride = stride;
  geo.pad = (pad == Padding::Same) ? (geo.k - 1) / 2 : 0;
  auto out_extent = [&](Index e, const char* axis) {
    const Index o = (e + 2 * geo.pad - geo.k) / geo.stride + 1;
    require(e + 2 * geo.pad >= geo.k,
            std::string("conv3d: spatial axis ") + axis + " too small for kernel");
    return o;
  };
  geo.od = out_extent(geo.d, "D");
  geo.oh = out_extent(geo.h, "H");
  geo.ow = out_extent(geo.w, "W");
  return geo;
}

RowMat im2col(const Tensor& x, const ConvGeom& g) {
  RowMat col(g.rows(), g.cols());
  const Real* xd = x.data();
  Index row = 0;
  for (Index n = 0; n < g.n; ++n)
    for (Index od = 0; od < g.od; ++od)
      for (Index oh = 0; oh < g.oh; ++oh)
        for (Index ow = 0; ow < g.ow; ++ow, ++row) {
          Real* dst = col.data() + row * g.cols();
          const Index z0 = od * g.stride - g.pad;
          const Index y0 = oh * g.stride - g.pad;
          const Index x0 = ow * g.stride - g.pad;
          for (Index ci = 0; ci < g.ci; ++ci)
            for (Index kz = 0; kz < g.k; ++kz) {
              const Index iz = z0 + kz;
              for (Index ky = 0; ky < g.k; ++ky) {
                const Index iy = y0 + ky;
                const bool plane_ok = iz >= 0 && iz < g.d && iy >= 0 && iy < g.h;
                const Real* src =
                    xd + (((n * g.ci + ci) * g.d + iz) * g.h + iy) * g.w;
                for (Index kx = 0; kx < g.k; ++kx, ++dst) {
                  const Index ix = x0 + kx;
                  *dst = (plane_ok && ix >= 0 && ix < g.w) ? src[ix] : 0.0;
                }
              }
            }
        }
  return col;
}

/// Scatter-add of a column matrix back onto the input gradient.
void col2im_add(const RowMat& col, const ConvGeom& g, Tensor& gx) {
  Real* xd = gx.data();
  Index row = 0;
  for (Index n = 0; n < g.n; ++n)
    for (Index od = 0; od < g.od; ++od)
      for (Index oh = 0; oh < g.oh; ++oh)
        for (Index ow = 0; ow < g.ow; ++ow, ++row) {
          const Real* src = col.data() + row * g.cols();
          const Index z0 = od * g.stride - g.pad;
          const Index y0 = oh * g.stride - g.pad;
          const Index x0 = ow * g.stride - g.pad;
          for (Index ci = 0; ci < g.ci; ++ci)
            for (Index kz = 0; kz < g.k; ++kz) {
              const Index iz = z0 + kz;
              for (Index ky = 0; ky < g.k; ++ky) {
                const Index iy = y0 + ky;
                const bool plane_ok = iz >= 0 && iz < g.d && iy >= 0 && iy < g.h;
                Real* dst = xd + (((n * g.ci + ci) * g.d + iz) * g.h + iy) * g.w;
                for (Index kx = 0; kx < g.k; ++kx, ++src) {
                  const Index ix = x0 + kx;
                  if (plane_ok && ix >= 0 && ix < g.w) dst[ix] += *src;
                }
              }
            }
        }
}

/// [N,Co,od,oh,ow] <-> row-major (rows = N*od*oh*ow, cols = Co).
void scatter_rows_to_volume(const RowMat& m, const ConvGeom& g, Tensor& out) {
  const Index sp = g.od * g.oh * g.ow;
  for (Index n = 0; n < g.n; ++n)
    for (Index co = 0; co < g.co; ++co) {
      Real* dst = out.data() + (n * g.co + co) * sp;
      for (Index p = 0; p < sp; ++p) dst[p] = m(n * sp + p, co);
    }
}

RowMat gather_volume_to_rows(const Tensor& v, const ConvGeom& g) {
  const Index sp = g.od * g.oh * g.ow;
  RowMat m(g.rows(), g.co);
  for (Index n = 0; n < g.n; ++n)
    for (Index co = 0; co < g.co; ++co) {
      const Real* src = v.data() + (n * g.co + co) * sp;
      for (Index p = 0; p < sp; ++p) m(n * sp + p, co) = src[p];
    }
  return m;
}

}  // namespace

Var conv3d(Var x, Var w, Var b, int stride, Padding pad) {
  const ConvGeom g = conv_geometry(x.value().shape(), w.value().shape(), stride, pad);
  require(b.value().size() == g.co, "conv3d: bias must have one entry per output channel");

  const RowMat col = im2col(x.value(), g);
  Eigen::Map<const RowMat> wmat(w.value().data(), g.co, g.cols());
  RowMat ymat = col * wmat.transpose();
  ymat.rowwise() += Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>>(b.value().data(), g.co);

  Tensor out({g.n, g.co, g.od, g.oh, g.ow});
  scatter_rows_to_volume(ymat, g, out);

  Tape& t = *x.tape();
  Var y = OB::emit(t, std::move(out), {x, w, b});
  if (y.requires_grad()) {
    int ix = x.id(), iw = w.id(), ib = b.id(), iy = y.id();
    // im2col is recomputed in the backward pass so the tape does not retain
    // the column matrix across the whole step.
    OB::set_backprop(y, [ix, iw, ib, iy, g](Tape& tp) {
      const RowMat gy = gather_volume_to_rows(OB::grad(tp, iy), g);
      if (OB::needs_grad(tp, ib)) {
        ArrX& gb = OB::grad(tp, ib).flat();
        gb += gy.colwise().sum().array().transpose();
      }
      if (OB::needs_grad(tp, iw)) {
        const RowMat col = im2col(OB::val(tp, ix), g);
        Eigen::Map<RowMat> gw(OB::grad(tp, iw).data(), g.co, g.cols());
        gw.noalias() += gy.transpose() * col;
      }
      if (OB::needs_grad(tp, ix)) {
        Eigen::Map<const RowMat> wmat(OB::val(tp, iw).data(), g.co, g.cols());
        const RowMat gcol = gy * wmat;
        col2im_add(gcol, g, OB::grad(tp, ix));
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Upsampling
// ---------------------------------------------------------------------------

Var upsample_nearest2(Var x) {
  const Tensor& xv = x.value();
  require(xv.rank() == 5, "upsample_nearest2: expected [N,C,D,H,W], got " + shape_str(xv.shape()));
  const Index n = xv.extent(0), c = xv.extent(1), d = xv.extent(2), h = xv.extent(3), w = xv.extent(4);
  Tensor out({n, c, 2 * d, 2 * h, 2 * w});
  for (Index nc = 0; nc < n * c; ++nc) {
    const Real* src = xv.data() + nc * d * h * w;
    Real* dst = out.data() + nc * 8 * d * h * w;
    for (Index z = 0; z < 2 * d; ++z)
      for (Index y = 0; y < 2 * h; ++y)
        for (Index xx = 0; xx < 2 * w; ++xx)
          dst[(z * 2 * h + y) * 2 * w + xx] = src[((z / 2) * h + y / 2) * w + xx / 2];
  }
  Tape& t = *x.tape();
  Var y = OB::emit(t, std::move(out), {x});
  if (y.requires_grad()) {
    int ix = x.id(), iy = y.id();
    OB::set_backprop(y, [ix, iy, n, c, d, h, w](Tape& tp) {
      const Tensor& g = OB::grad(tp, iy);
      Tensor& gx = OB::grad(tp, ix);
      for (Index nc = 0; nc < n * c; ++nc) {
        const Real* src = g.data() + nc * 8 * d * h * w;
        Real* dst = gx.data() + nc * d * h * w;
        for (Index z = 0; z < 2 * d; ++z)
          for (Index y2 = 0; y2 < 2 * h; ++y2)
            for (Index xx = 0; xx < 2 * w; ++xx)
              dst[((z / 2) * h + y2 / 2) * w + xx / 2] += src[(z * 2 * h + y2) * 2 * w + xx];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Var reduce(Var x, Reduce kind, const std::vector<int>& axes) {
  const Tensor& xv = x.value();
  require(!axes.empty(), "reduce: axis set must be nonempty (use reduce_all for full reduction)");
  std::vector<bool> drop(static_cast<size_t>(xv.rank()), false);
  for (int a : axes) {
    require(a >= 0 && a < xv.rank(), "reduce: axis out of range");
    drop[static_cast<size_t>(a)] = true;
  }
  Shape out_shape;
  Index count = 1;
  for (Index i = 0; i < xv.rank(); ++i) {
    if (drop[static_cast<size_t>(i)])
      count *= xv.extent(i);
    else
      out_shape.push_back(xv.extent(i));
  }
  if (out_shape.empty()) out_shape.push_back(1);

  // Slot of every input element in the output (materialized so the backward
  // closure owns it).
  const Shape& is = xv.shape();
  std::vector<Index> out_stride(is.size(), 0);
  {
    Index s = 1;
    for (Index i = xv.rank() - 1; i >= 0; --i) {
      if (!drop[static_cast<size_t>(i)]) {
        out_stride[static_cast<size_t>(i)] = s;
        s *= is[static_cast<size_t>(i)];
      }
    }
  }
  std::vector<Index> slot(static_cast<size_t>(xv.size()));
  for (Index lin = 0; lin < xv.size(); ++lin) {
    Index rem = lin, oi = 0;
    for (Index i = xv.rank() - 1; i >= 0; --i) {
      const Index e = is[static_cast<size_t>(i)];
      oi += (rem % e) * out_stride[static_cast<size_t>(i)];
      rem /= e;
    }
    slot[static_cast<size_t>(lin)] = oi;
  }

  const Real scale = (kind == Reduce::Mean) ? 1.0 / static_cast<Real>(count) : 1.0;
  Tensor out = Tensor::zeros(out_shape);
  for (Index i = 0; i < xv.size(); ++i) out[slot[static_cast<size_t>(i)]] += xv[i] * scale;

  Tape& t = *x.tape();
  Var y = OB::emit(t, std::move(out), {x});
  if (y.requires_grad()) {
    int ix = x.id(), iy = y.id();
    OB::set_backprop(y, [ix, iy, slot = std::move(slot), scale](Tape& tp) {
      const Tensor& g = OB::grad(tp, iy);
      Tensor& gx = OB::grad(tp, ix);
      for (Index i = 0; i < gx.size(); ++i) gx[i] += g[slot[static_cast<size_t>(i)]] * scale;
    });
  }
  return y;
}

Var reduce_all(Var x, Reduce kind) {
  const Tensor& xv = x.value();
  const Real scale = (kind == Reduce::Mean) ? 1.0 / static_cast<Real>(xv.size()) : 1.0;
  Tensor out = Tensor::scalar(xv.flat().sum() * scale);
  Tape& t = *x.tape();
  Var y = OB::emit(t, std::move(out), {x});
  if (y.requires_grad()) {
    int ix = x.id(), iy = y.id();
    OB::set_backprop(y, [ix, iy, scale](Tape& tp) {
      OB::grad(tp, ix).flat() += OB::grad(tp, iy)[0] * scale;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Masked mean, concat, channel map ops, reshape, detach
// ---------------------------------------------------------------------------

Var masked_mean(Var f, const ByteMask& mask) {
  const Tensor& fv = f.value();
  require(fv.rank() == 4, "masked_mean: features must be [C,D,H,W], got " + shape_str(fv.shape()));
  const Index c = fv.extent(0);
  const Index sp = fv.size() / c;
  require(mask.size() == sp, "masked_mean: mask does not match the feature grid");

  std::vector<Index> sel;
  for (Index p = 0; p < mask.size(); ++p)
    if (mask[p]) sel.push_back(p);
  require(!sel.empty(), "masked_mean: empty mask");
  const Real inv = 1.0 / static_cast<Real>(sel.size());

  Tensor out({c});
  for (Index ch = 0; ch < c; ++ch) {
    Real acc = 0.0;
    const Real* src = fv.data() + ch * sp;
    for (Index p : sel) acc += src[p];
    out[ch] = acc * inv;
  }
  Tape& t = *f.tape();
  Var y = OB::emit(t, std::move(out), {f});
  if (y.requires_grad()) {
    int ifv = f.id(), iy = y.id();
    OB::set_backprop(y, [ifv, iy, sel = std::move(sel), inv, c, sp](Tape& tp) {
      const Tensor& g = OB::grad(tp, iy);
      Tensor& gf = OB::grad(tp, ifv);
      for (Index ch = 0; ch < c; ++ch) {
        const Real gv = g[ch] * inv;
        Real* dst = gf.data() + ch * sp;
        for (Index p : sel) dst[p] += gv;
      }
    });
  }
  return y;
}

Var concat_channels(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() == bv.rank() && av.rank() >= 2, "concat_channels: rank mismatch");
  for (Index i = 0; i < av.rank(); ++i)
    if (i != 1)
      require(av.extent(i) == bv.extent(i), "concat_channels: non-channel extents differ at axis " +
                                                std::to_string(i));
  const Index n = av.extent(0), ca = av.extent(1), cb = bv.extent(1);
  const Index sp = av.size() / (n * ca);
  Shape os = av.shape();
  os[1] = ca + cb;
  Tensor out(os);
  for (Index i = 0; i < n; ++i) {
    std::copy_n(av.data() + i * ca * sp, ca * sp, out.data() + i * (ca + cb) * sp);
    std::copy_n(bv.data() + i * cb * sp, cb * sp, out.data() + i * (ca + cb) * sp + ca * sp);
  }
  Tape& t = *a.tape();
  Var y = OB::emit(t, std::move(out), {a, b});
  if (y.requires_grad()) {
    int ia = a.id(), ib = b.id(), iy = y.id();
    OB::set_backprop(y, [ia, ib, iy, n, ca, cb, sp](Tape& tp) {
      const Tensor& g = OB::grad(tp, iy);
      if (OB::needs_grad(tp, ia)) {
        Tensor& ga = OB::grad(tp, ia);
        for (Index i = 0; i < n; ++i)
          Eigen::Map<ArrX>(ga.data() + i * ca * sp, ca * sp) +=
              Eigen::Map<const ArrX>(g.data() + i * (ca + cb) * sp, ca * sp);
      }
      if (OB::needs_grad(tp, ib)) {
        Tensor& gb = OB::grad(tp, ib);
        for (Index i = 0; i < n; ++i)
          Eigen::Map<ArrX>(gb.data() + i * cb * sp, cb * sp) +=
              Eigen::Map<const ArrX>(g.data() + i * (ca + cb) * sp + ca * sp, cb * sp);
      }
    });
  }
  return y;
}

Var mul_channelmap(Var x, Var m) {
  const Tensor& xv = x.value();
  const Tensor& mv = m.value();
  require(xv.rank() == mv.rank() && xv.rank() >= 2, "mul_channelmap: rank mismatch");
  require(mv.extent(1) == 1, "mul_channelmap: map must have a single channel");
  for (Index i = 0; i < xv.rank(); ++i)
    if (i != 1) require(xv.extent(i) == mv.extent(i), "mul_channelmap: extent mismatch");
  const Index n = xv.extent(0), c = xv.extent(1);
  const Index sp = xv.size() / (n * c);

  Tensor out(xv.shape());
  for (Index i = 0; i < n; ++i) {
    Eigen::Map<const ArrX> mm(mv.data() + i * sp, sp);
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (i * c + ch) * sp;
      Eigen::Map<ArrX>(out.data() + off, sp) = Eigen::Map<const ArrX>(xv.data() + off, sp) * mm;
    }
  }
  Tape& t = *x.tape();
  Var y = OB::emit(t, std::move(out), {x, m});
  if (y.requires_grad()) {
    int ix = x.id(), im = m.id(), iy = y.id();
    OB::set_backprop(y, [ix, im, iy, n, c, sp](Tape& tp) {
      const Tensor& g = OB::grad(tp, iy);
      const Tensor& xvv = OB::val(tp, ix);
      const Tensor& mvv = OB::val(tp, im);
      if (OB::needs_grad(tp, ix)) {
        Tensor& gx = OB::grad(tp, ix);
        for (Index i = 0; i < n; ++i) {
          Eigen::Map<const ArrX> mm(mvv.data() + i * sp, sp);
          for (Index ch = 0; ch < c; ++ch) {
            const Index off = (i * c + ch) * sp;
            Eigen::Map<ArrX>(gx.data() + off, sp) +=
                Eigen::Map<const ArrX>(g.data() + off, sp) * mm;
          }
        }
      }
      if (OB::needs_grad(tp, im)) {
        Tensor& gm = OB::grad(tp, im);
        for (Index i = 0; i < n; ++i) {
          Eigen::Map<ArrX> dst(gm.data() + i * sp, sp);
          for (Index ch = 0; ch < c; ++ch) {
            const Index off = (i * c + ch) * sp;
            dst += Eigen::Map<const ArrX>(g.data() + off, sp) *
                   Eigen::Map<const ArrX>(xvv.data() + off, sp);
          }
        }
      }
    });
  }
  return y;
}

Var channel_sum(Var x) {
  const Tensor& xv = x.value();
  require(xv.rank() >= 2, "channel_sum: expected [N,C,...]");
  const Index n = xv.extent(0), c = xv.extent(1);
  const Index sp = xv.size() / (n * c);
  Shape os = xv.shape();
  os[1] = 1;
  Tensor out = Tensor::zeros(os);
  for (Index i = 0; i < n; ++i) {
    Eigen::Map<ArrX> dst(out.data() + i * sp, sp);
    for (Index ch = 0; ch < c; ++ch)
      dst += Eigen::Map<const ArrX>(xv.data() + (i * c + ch) * sp, sp);
  }
  Tape& t = *x.tape();
  Var y = OB::emit(t, std::move(out), {x});
  if (y.requires_grad()) {
    int ix = x.id(), iy = y.id();
    OB::set_backprop(y, [ix, iy, n, c, sp](Tape& tp) {
      const Tensor& g = OB::grad(tp, iy);
      Tensor& gx = OB::grad(tp, ix);
      for (Index i = 0; i < n; ++i) {
        Eigen::Map<const ArrX> src(g.data() + i * sp, sp);
        for (Index ch = 0; ch < c; ++ch)
          Eigen::Map<ArrX>(gx.data() + (i * c + ch) * sp, sp) += src;
      }
    });
  }
  return y;
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  Tape& t = *x.tape();
  Var y = OB::emit(t, std::move(out), {x});
  if (y.requires_grad()) {
    int ix = x.id(), iy = y.id();
    OB::set_backprop(y, [ix, iy](Tape& tp) {
      OB::grad(tp, ix).flat() += OB::grad(tp, iy).flat();
    });
  }
  return y;
}

Var detach(Var x) { return x.tape()->constant(x.value()); }

// ---------------------------------------------------------------------------
// Non-differentiable helpers
// ---------------------------------------------------------------------------

IntVolume argmax_channels(const Tensor& p) {
  require(p.rank() == 4, "argmax_channels: expected [C,D,H,W], got " + shape_str(p.shape()));
  const Index c = p.extent(0);
  const Index sp = p.size() / c;
  IntVolume out({p.extent(1), p.extent(2), p.extent(3)});
  for (Index v = 0; v < sp; ++v) {
    Real best = p[v];
    int32_t arg = 0;
    for (Index ch = 1; ch < c; ++ch)
      if (p[ch * sp + v] > best) {
        best = p[ch * sp + v];
        arg = static_cast<int32_t>(ch);
      }
    out[v] = arg;
  }
  return out;
}

Tensor one_hot(const IntVolume& labels, int classes) {
  Shape os = labels.shape();
  os.insert(os.begin(), classes);
  Tensor out = Tensor::zeros(os);
  const Index sp = labels.size();
  for (Index v = 0; v < sp; ++v) {
    const int32_t c = labels[v];
    require(c >= 0 && c < classes, "one_hot: label out of range");
    out[c * sp + v] = 1.0;
  }
  return out;
}

}  // namespace barl::ad

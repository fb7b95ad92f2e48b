//! Minimal neural-network layer zoo with hand-written backward passes.
//!
//! Everything is built from three convolution primitives ([`conv_fwd`],
//! [`conv_dx`], [`conv_dw`]); a transposed convolution is the adjoint of a
//! strided convolution, so the same three kernels serve both layer types
//! with their roles exchanged. All layers are pure functions of
//! `(parameters, input)`; batch-norm statistics updates are recorded in the
//! forward cache and applied only via an explicit [`BatchNorm::commit`].

use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array4, ArrayD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::{scalar, to_f64, Real};

/// Batch-norm evaluation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics (used while the owning network trains).
    Train,
    /// Normalize with running statistics (frozen / evaluation use).
    Eval,
}

/// Whether a parameter receives weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    /// Biases and batch-norm affine terms: never decayed.
    Bias,
}

/// Uniform access to a network's parameters and persistent state.
///
/// `param` visitors cover trainable parameters only; `state` visitors
/// additionally cover batch-norm running statistics so that checkpoints
/// and fingerprints capture everything that affects evaluation outputs.
pub trait ParamSet<S: Real> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, ParamKind, &[S]));
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut [S]));
    fn for_each_state(&self, f: &mut dyn FnMut(&str, &[S]));
    fn for_each_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut [S]));
}

/// SHA-256 over a network's state (names and values), hex-encoded.
///
/// Values are hashed through their `f64` bit patterns so the digest is
/// stable for a given value sequence regardless of scalar type.
pub fn fingerprint<S: Real>(net: &dyn ParamSet<S>) -> String {
    let mut h = Sha256::new();
    net.for_each_state(&mut |name, vals| {
        h.update(name.as_bytes());
        h.update([0u8]);
        for v in vals {
            h.update(to_f64(*v).to_bits().to_le_bytes());
        }
    });
    hex_digest(h)
}

fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// True iff every state value of the network is finite.
pub fn all_finite<S: Real>(net: &dyn ParamSet<S>) -> bool {
    let mut ok = true;
    net.for_each_state(&mut |_, vals| {
        if vals.iter().any(|v| !v.is_finite()) {
            ok = false;
        }
    });
    ok
}

// ── Convolution primitives ──────────────────────────────────────────────

fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

/// Unfold `x` (B,C,H,W) into rows of receptive-field patches.
/// Row r = ((b*Ho + oy)*Wo + ox), column c = (ci*k + ky)*k + kx.
fn im2col<S: Real>(x: &Array4<S>, k: usize, stride: usize, pad: usize) -> Array2<S> {
    let (b, c, h, w) = x.dim();
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let row_len = c * k * k;
    let mut cols = Array2::<S>::zeros((b * ho * wo, row_len));
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");
    for bi in 0..b {
        for oy in 0..ho {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..wo {
                let ix0 = (ox * stride) as isize - pad as isize;
                let row = ((bi * ho + oy) * wo + ox) * row_len;
                for ci in 0..c {
                    let xc = (bi * c + ci) * h;
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (xc + iy as usize) * w;
                        let crow = row + (ci * k + ky) * k;
                        for kx in 0..k {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[crow + kx] = xs[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of patch rows back into an image tensor (adjoint of im2col).
fn col2im_add<S: Real>(
    cols: &Array2<S>,
    shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<S> {
    let (b, c, h, w) = shape;
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let row_len = c * k * k;
    let mut x = Array4::<S>::zeros(shape);
    let xs = x.as_slice_mut().expect("standard layout");
    let cs = cols.as_slice().expect("standard layout");
    for bi in 0..b {
        for oy in 0..ho {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..wo {
                let ix0 = (ox * stride) as isize - pad as isize;
                let row = ((bi * ho + oy) * wo + ox) * row_len;
                for ci in 0..c {
                    let xc = (bi * c + ci) * h;
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (xc + iy as usize) * w;
                        let crow = row + (ci * k + ky) * k;
                        for kx in 0..k {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            xs[xrow + ix as usize] += cs[crow + kx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(B,Co,Ho,Wo)` output-grad tensor flattened to `(B*Ho*Wo, Co)` rows.
fn to_rows<S: Real>(y: &Array4<S>) -> Array2<S> {
    let (b, co, ho, wo) = y.dim();
    let perm = y.view().permuted_axes([0, 2, 3, 1]);
    let std = perm.as_standard_layout().into_owned();
    std.into_shape_with_order((b * ho * wo, co))
        .expect("contiguous")
}

fn from_rows<S: Real>(rows: Array2<S>, b: usize, co: usize, ho: usize, wo: usize) -> Array4<S> {
    let y = rows
        .into_shape_with_order((b, ho, wo, co))
        .expect("contiguous");
    let perm = y.view().permuted_axes([0, 3, 1, 2]);
    perm.as_standard_layout().into_owned()
}

/// Strided cross-correlation: `x (B,Ci,H,W) * w (Co,Ci,k,k) -> (B,Co,Ho,Wo)`.
pub fn conv_fwd<S: Real>(
    x: &Array4<S>,
    w: &Array4<S>,
    b: Option<&Array1<S>>,
    stride: usize,
    pad: usize,
) -> Array4<S> {
    let (bs, _, h, wd) = x.dim();
    let (co, _, k, _) = w.dim();
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(wd, k, stride, pad);
    let cols = im2col(x, k, stride, pad);
    let wf = w
        .view()
        .into_shape_with_order((co, w.len() / co))
        .expect("contiguous");
    let mut rows = cols.dot(&wf.t());
    if let Some(bias) = b {
        rows += &bias.view().insert_axis(Axis(0));
    }
    from_rows(rows, bs, co, ho, wo)
}

/// Gradient of [`conv_fwd`] w.r.t. its input (also the transposed-conv forward).
pub fn conv_dx<S: Real>(
    gy: &Array4<S>,
    w: &Array4<S>,
    stride: usize,
    pad: usize,
    input_hw: (usize, usize),
) -> Array4<S> {
    let (bs, _, _, _) = gy.dim();
    let (co, ci, k, _) = w.dim();
    let rows = to_rows(gy);
    let wf = w
        .view()
        .into_shape_with_order((co, ci * k * k))
        .expect("contiguous");
    let gcols = rows.dot(&wf);
    col2im_add(&gcols, (bs, ci, input_hw.0, input_hw.1), k, stride, pad)
}

/// Gradient of [`conv_fwd`] w.r.t. the weights.
pub fn conv_dw<S: Real>(
    x: &Array4<S>,
    gy: &Array4<S>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<S> {
    let (_, ci, _, _) = x.dim();
    let (_, co, _, _) = gy.dim();
    let cols = im2col(x, k, stride, pad);
    let rows = to_rows(gy);
    let gwf = rows.t().dot(&cols);
    gwf.into_shape_with_order((co, ci, k, k)).expect("shape")
}

fn sum_spatial<S: Real>(gy: &Array4<S>) -> Array1<S> {
    gy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0))
}

fn fan_in_uniform<S: Real>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n)
        .map(|_| scalar(rng.gen_range(-bound..bound)))
        .collect()
}

// ── Layers ──────────────────────────────────────────────────────────────

/// Strided 2-D convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d<S: Real> {
    pub name: String,
    pub w: Array4<S>,
    pub b: Array1<S>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Real> Conv2d<S> {
    pub fn init(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = Array4::from_shape_vec(
            (c_out, c_in, k, k),
            fan_in_uniform(rng, c_out * c_in * k * k, c_in * k * k),
        )
        .expect("shape");
        Self {
            name: name.into(),
            w,
            b: Array1::zeros(c_out),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Array4<S>) -> Array4<S> {
        conv_fwd(x, &self.w, Some(&self.b), self.stride, self.pad)
    }

    /// Returns the input gradient; accumulates parameter gradients when
    /// `gs` is provided (omitted when the layer is frozen for this pass).
    pub fn backward(
        &self,
        x: &Array4<S>,
        gy: &Array4<S>,
        gs: Option<&mut GradStore<S>>,
    ) -> Array4<S> {
        if let Some(gs) = gs {
            let k = self.w.dim().2;
            gs.add(
                &format!("{}.w", self.name),
                conv_dw(x, gy, k, self.stride, self.pad).into_dyn(),
            );
            gs.add(&format!("{}.b", self.name), sum_spatial(gy).into_dyn());
        }
        let (_, _, h, w) = x.dim();
        conv_dx(gy, &self.w, self.stride, self.pad, (h, w))
    }

    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &[S])) {
        f(
            &format!("{}.w", self.name),
            ParamKind::Weight,
            self.w.as_slice().unwrap(),
        );
        f(
            &format!("{}.b", self.name),
            ParamKind::Bias,
            self.b.as_slice().unwrap(),
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut [S])) {
        f(
            &format!("{}.w", self.name),
            ParamKind::Weight,
            self.w.as_slice_mut().unwrap(),
        );
        f(
            &format!("{}.b", self.name),
            ParamKind::Bias,
            self.b.as_slice_mut().unwrap(),
        );
    }
}

/// Strided 2-D transposed convolution (upsampling) layer.
///
/// Weights are stored as `(C_in, C_out, k, k)`; the forward pass is the
/// adjoint of a stride-`s` convolution, so spatial extent doubles for
/// `k=5, stride=2, pad=2`.
#[derive(Debug, Clone)]
pub struct ConvT2d<S: Real> {
    pub name: String,
    pub w: Array4<S>,
    pub b: Array1<S>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Real> ConvT2d<S> {
    pub fn init(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = Array4::from_shape_vec(
            (c_in, c_out, k, k),
            fan_in_uniform(rng, c_in * c_out * k * k, c_out * k * k),
        )
        .expect("shape");
        Self {
            name: name.into(),
            w,
            b: Array1::zeros(c_out),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Array4<S>) -> Array4<S> {
        let (_, _, h, w) = x.dim();
        let mut y = conv_dx(x, &self.w, self.stride, self.pad, (h * self.stride, w * self.stride));
        let bias = self
            .b
            .view()
            .insert_axis(Axis(0))
            .insert_axis(Axis(2))
            .insert_axis(Axis(3));
        y += &bias;
        y
    }

    pub fn backward(
        &self,
        x: &Array4<S>,
        gy: &Array4<S>,
        gs: Option<&mut GradStore<S>>,
    ) -> Array4<S> {
        if let Some(gs) = gs {
            let k = self.w.dim().2;
            // The adjoint relationship swaps the roles of input and
            // output-grad relative to Conv2d.
            gs.add(
                &format!("{}.w", self.name),
                conv_dw(gy, x, k, self.stride, self.pad).into_dyn(),
            );
            gs.add(&format!("{}.b", self.name), sum_spatial(gy).into_dyn());
        }
        conv_fwd(gy, &self.w, None, self.stride, self.pad)
    }

    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &[S])) {
        f(
            &format!("{}.w", self.name),
            ParamKind::Weight,
            self.w.as_slice().unwrap(),
        );
        f(
            &format!("{}.b", self.name),
            ParamKind::Bias,
            self.b.as_slice().unwrap(),
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut [S])) {
        f(
            &format!("{}.w", self.name),
            ParamKind::Weight,
            self.w.as_slice_mut().unwrap(),
        );
        f(
            &format!("{}.b", self.name),
            ParamKind::Bias,
            self.b.as_slice_mut().unwrap(),
        );
    }
}

/// Fully-connected layer, weights `(out, in)`.
#[derive(Debug, Clone)]
pub struct Dense<S: Real> {
    pub name: String,
    pub w: Array2<S>,
    pub b: Array1<S>,
}

impl<S: Real> Dense<S> {
    pub fn init(
        name: impl Into<String>,
        n_in: usize,
        n_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = Array2::from_shape_vec((n_out, n_in), fan_in_uniform(rng, n_out * n_in, n_in))
            .expect("shape");
        Self {
            name: name.into(),
            w,
            b: Array1::zeros(n_out),
        }
    }

    pub fn forward(&self, x: &Array2<S>) -> Array2<S> {
        let mut y = x.dot(&self.w.t());
        y += &self.b.view().insert_axis(Axis(0));
        y
    }

    pub fn backward(
        &self,
        x: &Array2<S>,
        gy: &Array2<S>,
        gs: Option<&mut GradStore<S>>,
    ) -> Array2<S> {
        if let Some(gs) = gs {
            gs.add(&format!("{}.w", self.name), gy.t().dot(x).into_dyn());
            gs.add(&format!("{}.b", self.name), gy.sum_axis(Axis(0)).into_dyn());
        }
        gy.dot(&self.w)
    }

    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &[S])) {
        f(
            &format!("{}.w", self.name),
            ParamKind::Weight,
            self.w.as_slice().unwrap(),
        );
        f(
            &format!("{}.b", self.name),
            ParamKind::Bias,
            self.b.as_slice().unwrap(),
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut [S])) {
        f(
            &format!("{}.w", self.name),
            ParamKind::Weight,
            self.w.as_slice_mut().unwrap(),
        );
        f(
            &format!("{}.b", self.name),
            ParamKind::Bias,
            self.b.as_slice_mut().unwrap(),
        );
    }
}

/// Per-channel batch normalization over `(B, H, W)`.
///
/// Normalization uses the biased batch variance; running statistics follow
/// the same convention. Forward never mutates the layer — batch statistics
/// are returned in the cache and folded in via [`BatchNorm::commit`].
#[derive(Debug, Clone)]
pub struct BatchNorm<S: Real> {
    pub name: String,
    pub gamma: Array1<S>,
    pub beta: Array1<S>,
    pub run_mean: Array1<S>,
    pub run_var: Array1<S>,
    pub momentum: S,
    pub eps: S,
}

#[derive(Debug, Clone)]
pub struct BnCache<S: Real> {
    mode: BnMode,
    xhat: Array4<S>,
    inv_std: Array1<S>,
    batch_mean: Array1<S>,
    batch_var: Array1<S>,
}

impl<S: Real> BatchNorm<S> {
    pub fn init(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            run_mean: Array1::zeros(channels),
            run_var: Array1::ones(channels),
            momentum: scalar(0.1),
            eps: scalar(1e-5),
        }
    }

    pub fn forward(&self, x: &Array4<S>, mode: BnMode) -> (Array4<S>, BnCache<S>) {
        let (b, c, h, w) = x.dim();
        let n = scalar::<S>((b * h * w) as f64);
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = Array1::<S>::zeros(c);
                let mut var = Array1::<S>::zeros(c);
                for ci in 0..c {
                    let xc = x.index_axis(Axis(1), ci);
                    let m = xc.sum() / n;
                    let v = xc.mapv(|u| (u - m) * (u - m)).sum() / n;
                    mean[ci] = m;
                    var[ci] = v;
                }
                (mean, var)
            }
            BnMode::Eval => (self.run_mean.clone(), self.run_var.clone()),
        };
        let inv_std = var.mapv(|v| S::one() / (v + self.eps).sqrt());
        let mut xhat = x.clone();
        let mut y = Array4::<S>::zeros((b, c, h, w));
        for ci in 0..c {
            let m = mean[ci];
            let inv = inv_std[ci];
            let g = self.gamma[ci];
            let bta = self.beta[ci];
            let mut xh = xhat.index_axis_mut(Axis(1), ci);
            xh.mapv_inplace(|u| (u - m) * inv);
            y.index_axis_mut(Axis(1), ci).assign(&xh.mapv(|u| g * u + bta));
        }
        (
            y,
            BnCache {
                mode,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            },
        )
    }

    /// Fold the cached batch statistics into the running averages.
    pub fn commit(&mut self, cache: &BnCache<S>) {
        debug_assert_eq!(cache.mode, BnMode::Train);
        let m = self.momentum;
        let one = S::one();
        for ci in 0..self.run_mean.len() {
            self.run_mean[ci] = (one - m) * self.run_mean[ci] + m * cache.batch_mean[ci];
            self.run_var[ci] = (one - m) * self.run_var[ci] + m * cache.batch_var[ci];
        }
    }

    pub fn backward(
        &self,
        cache: &BnCache<S>,
        gy: &Array4<S>,
        gs: Option<&mut GradStore<S>>,
    ) -> Array4<S> {
        let (b, c, h, w) = gy.dim();
        let n = scalar::<S>((b * h * w) as f64);
        let mut gx = Array4::<S>::zeros((b, c, h, w));
        let mut ggamma = Array1::<S>::zeros(c);
        let mut gbeta = Array1::<S>::zeros(c);
        for ci in 0..c {
            let g = self.gamma[ci];
            let inv = cache.inv_std[ci];
            let gyc = gy.index_axis(Axis(1), ci);
            let xhc = cache.xhat.index_axis(Axis(1), ci);
            let sum_gy = gyc.sum();
            let sum_gy_xhat = (&gyc * &xhc).sum();
            ggamma[ci] = sum_gy_xhat;
            gbeta[ci] = sum_gy;
            let mut gxc = gx.index_axis_mut(Axis(1), ci);
            match cache.mode {
                BnMode::Train => {
                    // gx = γ·inv/N · (N·gy − Σgy − x̂·Σ(gy·x̂))
                    let coef = g * inv / n;
                    gxc.assign(
                        &(&gyc.mapv(|u| u * n) - &xhc.mapv(|u| u * sum_gy_xhat) - sum_gy)
                            .mapv(|u| u * coef),
                    );
                }
                BnMode::Eval => {
                    gxc.assign(&gyc.mapv(|u| u * g * inv));
                }
            }
        }
        if let Some(gs) = gs {
            gs.add(&format!("{}.gamma", self.name), ggamma.into_dyn());
            gs.add(&format!("{}.beta", self.name), gbeta.into_dyn());
        }
        gx
    }

    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &[S])) {
        f(
            &format!("{}.gamma", self.name),
            ParamKind::Bias,
            self.gamma.as_slice().unwrap(),
        );
        f(
            &format!("{}.beta", self.name),
            ParamKind::Bias,
            self.beta.as_slice().unwrap(),
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut [S])) {
        f(
            &format!("{}.gamma", self.name),
            ParamKind::Bias,
            self.gamma.as_slice_mut().unwrap(),
        );
        f(
            &format!("{}.beta", self.name),
            ParamKind::Bias,
            self.beta.as_slice_mut().unwrap(),
        );
    }

    fn visit_stats(&self, f: &mut dyn FnMut(&str, &[S])) {
        f(
            &format!("{}.run_mean", self.name),
            self.run_mean.as_slice().unwrap(),
        );
        f(
            &format!("{}.run_var", self.name),
            self.run_var.as_slice().unwrap(),
        );
    }

    fn visit_stats_mut(&mut self, f: &mut dyn FnMut(&str, &mut [S])) {
        f(
            &format!("{}.run_mean", self.name),
            self.run_mean.as_slice_mut().unwrap(),
        );
        f(
            &format!("{}.run_var", self.name),
            self.run_var.as_slice_mut().unwrap(),
        );
    }
}

// Layer-kind dispatch so networks can expose their stacks generically.
pub(crate) enum LayerRef<'a, S: Real> {
    Conv(&'a Conv2d<S>),
    ConvT(&'a ConvT2d<S>),
    Dense(&'a Dense<S>),
    Bn(&'a BatchNorm<S>),
}

pub(crate) enum LayerMut<'a, S: Real> {
    Conv(&'a mut Conv2d<S>),
    ConvT(&'a mut ConvT2d<S>),
    Dense(&'a mut Dense<S>),
    Bn(&'a mut BatchNorm<S>),
}

/// Walk a layer stack's entries in a fixed order. Parameter entries come
/// with `Some(kind)`; batch-norm running statistics (visited only when
/// `include_stats`) come with `None`.
pub(crate) fn visit_layers<S: Real>(
    layers: &[LayerRef<'_, S>],
    include_stats: bool,
    f: &mut dyn FnMut(&str, Option<ParamKind>, &[S]),
) {
    for l in layers {
        match l {
            LayerRef::Conv(c) => c.visit(&mut |n, k, v| f(n, Some(k), v)),
            LayerRef::ConvT(c) => c.visit(&mut |n, k, v| f(n, Some(k), v)),
            LayerRef::Dense(d) => d.visit(&mut |n, k, v| f(n, Some(k), v)),
            LayerRef::Bn(b) => b.visit(&mut |n, k, v| f(n, Some(k), v)),
        }
    }
    if include_stats {
        for l in layers {
            if let LayerRef::Bn(b) = l {
                b.visit_stats(&mut |n, v| f(n, None, v));
            }
        }
    }
}

pub(crate) fn visit_layers_mut<S: Real>(
    layers: &mut [LayerMut<'_, S>],
    include_stats: bool,
    f: &mut dyn FnMut(&str, Option<ParamKind>, &mut [S]),
) {
    for l in layers.iter_mut() {
        match l {
            LayerMut::Conv(c) => c.visit_mut(&mut |n, k, v| f(n, Some(k), v)),
            LayerMut::ConvT(c) => c.visit_mut(&mut |n, k, v| f(n, Some(k), v)),
            LayerMut::Dense(d) => d.visit_mut(&mut |n, k, v| f(n, Some(k), v)),
            LayerMut::Bn(b) => b.visit_mut(&mut |n, k, v| f(n, Some(k), v)),
        }
    }
    if include_stats {
        for l in layers.iter_mut() {
            if let LayerMut::Bn(b) = l {
                b.visit_stats_mut(&mut |n, v| f(n, None, v));
            }
        }
    }
}

// ── Activations ─────────────────────────────────────────────────────────

pub fn relu<S: Real, D: ndarray::Dimension>(
    x: &ndarray::Array<S, D>,
) -> ndarray::Array<S, D> {
    x.mapv(|v| if v > S::zero() { v } else { S::zero() })
}

/// ReLU input-gradient from the layer output (mask y > 0).
pub fn relu_bwd<S: Real, D: ndarray::Dimension>(
    y: &ndarray::Array<S, D>,
    gy: &ndarray::Array<S, D>,
) -> ndarray::Array<S, D> {
    let mut g = gy.clone();
    ndarray::Zip::from(&mut g).and(y).for_each(|gv, &yv| {
        if yv <= S::zero() {
            *gv = S::zero();
        }
    });
    g
}

pub fn sigmoid<S: Real, D: ndarray::Dimension>(
    x: &ndarray::Array<S, D>,
) -> ndarray::Array<S, D> {
    x.mapv(|v| S::one() / (S::one() + (-v).exp()))
}

/// Sigmoid input-gradient from the layer output: gy · y(1−y).
pub fn sigmoid_bwd<S: Real, D: ndarray::Dimension>(
    y: &ndarray::Array<S, D>,
    gy: &ndarray::Array<S, D>,
) -> ndarray::Array<S, D> {
    let mut g = gy.clone();
    ndarray::Zip::from(&mut g).and(y).for_each(|gv, &yv| {
        *gv = *gv * yv * (S::one() - yv);
    });
    g
}

// ── Gradient accumulation and Adam ──────────────────────────────────────

/// Accumulates named parameter gradients for one network.
#[derive(Debug, Clone, Default)]
pub struct GradStore<S: Real> {
    map: IndexMap<String, ArrayD<S>>,
}

impl<S: Real> GradStore<S> {
    pub fn new() -> Self {
        Self {
            map: IndexMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, g: ArrayD<S>) {
        match self.map.get_mut(name) {
            Some(acc) => *acc += &g,
            None => {
                self.map.insert(name.to_string(), g);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<S>> {
        self.map.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<S>)> {
        self.map.iter()
    }

    /// Largest absolute gradient entry, for diagnostics.
    pub fn max_abs(&self) -> f64 {
        self.map
            .values()
            .flat_map(|a| a.iter())
            .fold(0.0_f64, |m, v| m.max(to_f64(*v).abs()))
    }
}

/// Adam with decoupled weight decay (decay applied to `Weight` params only,
/// scaled by the learning rate so `lr = 0` leaves parameters untouched).
#[derive(Debug, Clone)]
pub struct Adam<S: Real> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub weight_decay: S,
    pub t: u64,
    m: IndexMap<String, Vec<S>>,
    v: IndexMap<String, Vec<S>>,
}

impl<S: Real> Adam<S> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr: scalar(lr),
            beta1: scalar(0.9),
            beta2: scalar(0.999),
            eps: scalar(1e-8),
            weight_decay: scalar(weight_decay),
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn step(&mut self, net: &mut dyn ParamSet<S>, grads: &GradStore<S>) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = S::one() - b1.powi(t);
        let bc2 = S::one() - b2.powi(t);
        let lr = self.lr;
        let eps = self.eps;
        let wd = self.weight_decay;
        let m_map = &mut self.m;
        let v_map = &mut self.v;
        net.for_each_param_mut(&mut |name, kind, p| {
            let Some(g) = grads.get(name) else { return };
            let g = g.as_slice().expect("standard layout");
            let m = m_map
                .entry(name.to_string())
                .or_insert_with(|| vec![S::zero(); p.len()]);
            let v = v_map
                .entry(name.to_string())
                .or_insert_with(|| vec![S::zero(); p.len()]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (S::one() - b1) * g[i];
                v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut upd = mhat / (vhat.sqrt() + eps);
                if kind == ParamKind::Weight {
                    upd = upd + wd * p[i];
                }
                p[i] = p[i] - lr * upd;
            }
        });
    }

    /// Moment vectors for checkpointing, keyed `<param>.m` / `<param>.v`.
    pub fn export_moments(&self) -> IndexMap<String, Vec<S>> {
        let mut out = IndexMap::new();
        for (k, v) in &self.m {
            out.insert(format!("{k}.m"), v.clone());
        }
        for (k, v) in &self.v {
            out.insert(format!("{k}.v"), v.clone());
        }
        out
    }

    pub fn import_moments(&mut self, map: IndexMap<String, Vec<S>>, t: u64) {
        self.m.clear();
        self.v.clear();
        for (k, v) in map {
            if let Some(base) = k.strip_suffix(".m") {
                self.m.insert(base.to_string(), v);
            } else if let Some(base) = k.strip_suffix(".v") {
                self.v.insert(base.to_string(), v);
            }
        }
        self.t = t;
    }
}

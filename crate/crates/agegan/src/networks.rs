//! The four networks: encoder E, generator G, discriminator D, and the
//! ordinal-regression backbone R.
//!
//! Structural rules shared by all of them: 5x5 kernels, stride-2
//! convolutions instead of pooling, same-size padding, channel counts
//! doubling (E/D/R) or halving (G) per stage, ReLU between layers, and a
//! 4x4 spatial bottleneck. E and G carry no batch normalization; D and R
//! normalize after every convolution. E bounds its latent code and G its
//! pixels with a final sigmoid; D emits a clamped probability; R emits
//! unbounded rank logits.

use ndarray::{concatenate, Array1, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::{
    relu, relu_bwd, sigmoid, sigmoid_bwd, visit_layers, visit_layers_mut, BatchNorm, BnCache,
    BnMode, Conv2d, ConvT2d, Dense, GradStore, LayerMut, LayerRef, ParamKind, ParamSet,
};
use crate::{mix_seed, scalar, Error, Real, Result};

const KERNEL: usize = 5;
const STRIDE: usize = 2;
const PAD: usize = 2;
/// Spatial extent at the bottleneck between conv stacks and dense heads.
const BOTTLENECK: usize = 4;

/// Probability clamp keeping the adversarial log-losses finite.
pub const PROB_EPS: f64 = 1e-6;

/// Architecture hyperparameters shared by all four networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub image_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub base_filters: usize,
    /// Number of ordinal rank tasks (K-1) emitted by the regressor head.
    pub rank_count: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            latent_dim: 64,
            base_filters: 32,
            rank_count: 60,
        }
    }
}

impl NetworkSpec {
    /// Number of stride-2 stages: log2(image_size) - 2, so the conv stack
    /// bottoms out at 4x4.
    pub fn n_down(&self) -> usize {
        (self.image_size.trailing_zeros() as usize).saturating_sub(2)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() || self.image_size < 16 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} must be a power of two >= 16",
                self.image_size
            )));
        }
        if self.n_down() < 2 || (1usize << (self.n_down() + 2)) != self.image_size {
            return Err(Error::InvalidConfig("inconsistent n_down".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidConfig("channels must be 1 or 3".into()));
        }
        if self.latent_dim == 0 || self.rank_count == 0 || self.base_filters == 0 {
            return Err(Error::InvalidConfig(
                "latent_dim, rank_count, base_filters must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Channels at the end of a doubling conv stack (E/D/R): the stack
    /// starts at base_filters, so the 4x4 bottleneck carries
    /// base_filters * 2^(n_down - 1) channels.
    pub fn conv_bottleneck_channels(&self) -> usize {
        self.base_filters << (self.n_down() - 1)
    }

    /// Channels of the generator's dense stem: base_filters * 2^n_down,
    /// halving through the transposed-conv stack.
    pub fn stem_channels(&self) -> usize {
        self.base_filters << self.n_down()
    }

    /// Digest of the architecture; stored in checkpoints and compared on
    /// load so parameter blobs can never be applied to the wrong shapes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("spec serializes"));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn layer_rng(seed: u64, net_tag: u64, layer: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, net_tag, layer]))
}

fn check_images<S: Real>(x: &Array4<S>, channels: usize, size: usize) -> Result<()> {
    let (_, c, h, w) = x.dim();
    if c != channels || h != size || w != size {
        return Err(Error::ShapeMismatch(format!(
            "expected (B,{channels},{size},{size}), got {:?}",
            x.dim()
        )));
    }
    Ok(())
}

fn check_ages(ell: &[f64], batch: usize) -> Result<()> {
    if ell.len() != batch {
        return Err(Error::ShapeMismatch(format!(
            "{} conditioning ages for batch of {batch}",
            ell.len()
        )));
    }
    if ell.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::InvalidInput(
            "normalized age outside [0,1]".into(),
        ));
    }
    Ok(())
}

// ── Encoder ─────────────────────────────────────────────────────────────

/// Maps images to latent identity codes in `[0,1]^latent_dim`.
#[derive(Debug, Clone)]
pub struct Encoder<S: Real> {
    pub spec: NetworkSpec,
    convs: Vec<Conv2d<S>>,
    fc: Dense<S>,
}

pub struct EncoderCache<S: Real> {
    x: Array4<S>,
    relu_outs: Vec<Array4<S>>,
    z: Array2<S>,
}

impl<S: Real> Encoder<S> {
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let n = spec.n_down();
        let mut convs = Vec::with_capacity(n);
        let mut c_in = spec.channels;
        for i in 0..n {
            let c_out = spec.base_filters << i;
            convs.push(Conv2d::init(
                format!("conv{i}"),
                c_in,
                c_out,
                KERNEL,
                STRIDE,
                PAD,
                &mut layer_rng(seed, 0xE, i as u64),
            ));
            c_in = c_out;
        }
        let flat = spec.conv_bottleneck_channels() * BOTTLENECK * BOTTLENECK;
        let fc = Dense::init(
            "fc",
            flat,
            spec.latent_dim,
            &mut layer_rng(seed, 0xE, n as u64),
        );
        Self {
            spec: spec.clone(),
            convs,
            fc,
        }
    }

    pub fn forward(&self, x: &Array4<S>) -> Result<(Array2<S>, EncoderCache<S>)> {
        check_images(x, self.spec.channels, self.spec.image_size)?;
        let b = x.dim().0;
        let mut relu_outs = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for conv in &self.convs {
            cur = relu(&conv.forward(&cur));
            relu_outs.push(cur.clone());
        }
        let flat = cur
            .into_shape_with_order((b, self.fc.w.dim().1))
            .expect("bottleneck flatten");
        let z = sigmoid(&self.fc.forward(&flat));
        Ok((
            z.clone(),
            EncoderCache {
                x: x.clone(),
                relu_outs,
                z,
            },
        ))
    }

    /// Backpropagate a latent gradient; returns the image gradient.
    pub fn backward(
        &self,
        cache: &EncoderCache<S>,
        gz: &Array2<S>,
        mut gs: Option<&mut GradStore<S>>,
    ) -> Array4<S> {
        let b = gz.dim().0;
        let glogit = sigmoid_bwd(&cache.z, gz);
        let last = cache.relu_outs.last().expect("at least one conv");
        let flat = last
            .clone()
            .into_shape_with_order((b, self.fc.w.dim().1))
            .expect("flatten");
        let gflat = self.fc.backward(&flat, &glogit, gs.as_deref_mut());
        let mut g = gflat
            .into_shape_with_order(last.raw_dim())
            .expect("unflatten");
        for i in (0..self.convs.len()).rev() {
            g = relu_bwd(&cache.relu_outs[i], &g);
            let input = if i == 0 { &cache.x } else { &cache.relu_outs[i - 1] };
            g = self.convs[i].backward(input, &g, gs.as_deref_mut());
        }
        g
    }

    fn layers(&self) -> Vec<LayerRef<'_, S>> {
        let mut v: Vec<LayerRef<'_, S>> = self.convs.iter().map(LayerRef::Conv).collect();
        v.push(LayerRef::Dense(&self.fc));
        v
    }

    fn layers_mut(&mut self) -> Vec<LayerMut<'_, S>> {
        let mut v: Vec<LayerMut<'_, S>> = self.convs.iter_mut().map(LayerMut::Conv).collect();
        v.push(LayerMut::Dense(&mut self.fc));
        v
    }
}

impl<S: Real> ParamSet<S> for Encoder<S> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, ParamKind, &[S])) {
        visit_layers(&self.layers(), false, &mut |n, k, v| f(n, k.unwrap(), v));
    }
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut [S])) {
        visit_layers_mut(&mut self.layers_mut(), false, &mut |n, k, v| {
            f(n, k.unwrap(), v)
        });
    }
    fn for_each_state(&self, f: &mut dyn FnMut(&str, &[S])) {
        visit_layers(&self.layers(), true, &mut |n, _, v| f(n, v));
    }
    fn for_each_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut [S])) {
        visit_layers_mut(&mut self.layers_mut(), true, &mut |n, _, v| f(n, v));
    }
}

// ── Generator ───────────────────────────────────────────────────────────

/// Projects a latent code (optionally concatenated with a normalized age)
/// back onto image space through stride-2 transposed convolutions.
#[derive(Debug, Clone)]
pub struct Generator<S: Real> {
    pub spec: NetworkSpec,
    /// When false the age input is omitted (the throwaway decoder used
    /// for encoder pre-training).
    pub conditioned: bool,
    fc: Dense<S>,
    deconvs: Vec<ConvT2d<S>>,
}

pub struct GeneratorCache<S: Real> {
    input: Array2<S>,
    stem_relu: Array4<S>,
    relu_outs: Vec<Array4<S>>,
    y: Array4<S>,
}

impl<S: Real> Generator<S> {
    pub fn init(spec: &NetworkSpec, seed: u64, conditioned: bool) -> Self {
        let n = spec.n_down();
        let c_bot = spec.stem_channels();
        let in_dim = spec.latent_dim + usize::from(conditioned);
        let fc = Dense::init(
            "fc",
            in_dim,
            c_bot * BOTTLENECK * BOTTLENECK,
            &mut layer_rng(seed, 0x6, 0),
        );
        let mut deconvs = Vec::with_capacity(n);
        let mut c_in = c_bot;
        for i in 0..n {
            let c_out = if i + 1 == n {
                spec.channels
            } else {
                c_in / 2
            };
            deconvs.push(ConvT2d::init(
                format!("deconv{i}"),
                c_in,
                c_out,
                KERNEL,
                STRIDE,
                PAD,
                &mut layer_rng(seed, 0x6, (i + 1) as u64),
            ));
            c_in = c_out;
        }
        Self {
            spec: spec.clone(),
            conditioned,
            fc,
            deconvs,
        }
    }

    /// Assemble the dense-stem input: `z ++ [l]` when conditioned.
    fn stem_input(&self, z: &Array2<S>, ell: Option<&[f64]>) -> Result<Array2<S>> {
        let b = z.dim().0;
        if z.dim().1 != self.spec.latent_dim {
            return Err(Error::ShapeMismatch(format!(
                "latent dim {} != {}",
                z.dim().1,
                self.spec.latent_dim
            )));
        }
        match (self.conditioned, ell) {
            (true, Some(ell)) => {
                check_ages(ell, b)?;
                let col = Array2::from_shape_vec(
                    (b, 1),
                    ell.iter().map(|&l| scalar(l)).collect(),
                )
                .expect("column");
                // concatenate yields F-order; downstream reshapes assume C.
                let joined = concatenate![Axis(1), z.view(), col.view()];
                Ok(joined.as_standard_layout().into_owned())
            }
            (false, None) => Ok(z.clone()),
            (true, None) => Err(Error::InvalidInput(
                "conditioned generator needs ages".into(),
            )),
            (false, Some(_)) => Err(Error::InvalidInput(
                "unconditioned decoder takes no ages".into(),
            )),
        }
    }

    pub fn forward(
        &self,
        z: &Array2<S>,
        ell: Option<&[f64]>,
    ) -> Result<(Array4<S>, GeneratorCache<S>)> {
        let input = self.stem_input(z, ell)?;
        let b = input.dim().0;
        let c_bot = self.spec.stem_channels();
        let stem = self
            .fc
            .forward(&input)
            .into_shape_with_order((b, c_bot, BOTTLENECK, BOTTLENECK))
            .expect("stem reshape");
        let stem_relu = relu(&stem);
        let mut relu_outs = Vec::with_capacity(self.deconvs.len().saturating_sub(1));
        let mut cur = stem_relu.clone();
        for (i, deconv) in self.deconvs.iter().enumerate() {
            let out = deconv.forward(&cur);
            if i + 1 == self.deconvs.len() {
                cur = sigmoid(&out);
            } else {
                cur = relu(&out);
                relu_outs.push(cur.clone());
            }
        }
        Ok((
            cur.clone(),
            GeneratorCache {
                input,
                stem_relu,
                relu_outs,
                y: cur,
            },
        ))
    }

    /// Backpropagate an image gradient; returns the latent gradient (the
    /// age column's gradient is discarded — ages are sampled inputs).
    pub fn backward(
        &self,
        cache: &GeneratorCache<S>,
        gy: &Array4<S>,
        mut gs: Option<&mut GradStore<S>>,
    ) -> Array2<S> {
        let b = gy.dim().0;
        let mut g = sigmoid_bwd(&cache.y, gy);
        for i in (0..self.deconvs.len()).rev() {
            let input = if i == 0 {
                &cache.stem_relu
            } else {
                &cache.relu_outs[i - 1]
            };
            g = self.deconvs[i].backward(input, &g, gs.as_deref_mut());
            if i > 0 {
                g = relu_bwd(&cache.relu_outs[i - 1], &g);
            }
        }
        let g = relu_bwd(&cache.stem_relu, &g);
        let gflat = g
            .into_shape_with_order((b, self.fc.w.dim().0))
            .expect("stem flatten");
        let ginput = self.fc.backward(&cache.input, &gflat, gs.as_deref_mut());
        ginput
            .slice(ndarray::s![.., ..self.spec.latent_dim])
            .to_owned()
    }

    fn layers(&self) -> Vec<LayerRef<'_, S>> {
        let mut v = vec![LayerRef::Dense(&self.fc)];
        v.extend(self.deconvs.iter().map(LayerRef::ConvT));
        v
    }

    fn layers_mut(&mut self) -> Vec<LayerMut<'_, S>> {
        let mut v = vec![LayerMut::Dense(&mut self.fc)];
        v.extend(self.deconvs.iter_mut().map(LayerMut::ConvT));
        v
    }
}

impl<S: Real> ParamSet<S> for Generator<S> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, ParamKind, &[S])) {
        visit_layers(&self.layers(), false, &mut |n, k, v| f(n, k.unwrap(), v));
    }
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut [S])) {
        visit_layers_mut(&mut self.layers_mut(), false, &mut |n, k, v| {
            f(n, k.unwrap(), v)
        });
    }
    fn for_each_state(&self, f: &mut dyn FnMut(&str, &[S])) {
        visit_layers(&self.layers(), true, &mut |n, _, v| f(n, v));
    }
    fn for_each_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut [S])) {
        visit_layers_mut(&mut self.layers_mut(), true, &mut |n, _, v| f(n, v));
    }
}

// ── Conv backbone shared by D and R ─────────────────────────────────────

/// Stride-2 conv stack with batch norm and ReLU, flattened into a dense
/// head; D puts a clamped sigmoid on top, R emits raw logits.
#[derive(Debug, Clone)]
struct ConvBackbone<S: Real> {
    convs: Vec<Conv2d<S>>,
    bns: Vec<BatchNorm<S>>,
    fc: Dense<S>,
}

struct BackboneCache<S: Real> {
    xin: Array4<S>,
    bn_caches: Vec<BnCache<S>>,
    relu_outs: Vec<Array4<S>>,
}

impl<S: Real> ConvBackbone<S> {
    fn init(spec: &NetworkSpec, in_channels: usize, out_dim: usize, seed: u64, tag: u64) -> Self {
        let n = spec.n_down();
        let mut convs = Vec::with_capacity(n);
        let mut bns = Vec::with_capacity(n);
        let mut c_in = in_channels;
        for i in 0..n {
            let c_out = spec.base_filters << i;
            convs.push(Conv2d::init(
                format!("conv{i}"),
                c_in,
                c_out,
                KERNEL,
                STRIDE,
                PAD,
                &mut layer_rng(seed, tag, i as u64),
            ));
            bns.push(BatchNorm::init(format!("bn{i}"), c_out));
            c_in = c_out;
        }
        let flat = spec.conv_bottleneck_channels() * BOTTLENECK * BOTTLENECK;
        let fc = Dense::init("fc", flat, out_dim, &mut layer_rng(seed, tag, n as u64));
        Self { convs, bns, fc }
    }

    fn forward(&self, xin: &Array4<S>, mode: BnMode) -> (Array2<S>, BackboneCache<S>) {
        let b = xin.dim().0;
        let mut bn_caches = Vec::with_capacity(self.convs.len());
        let mut relu_outs = Vec::with_capacity(self.convs.len());
        let mut cur = xin.clone();
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            let (normed, cache) = bn.forward(&conv.forward(&cur), mode);
            bn_caches.push(cache);
            cur = relu(&normed);
            relu_outs.push(cur.clone());
        }
        let flat = cur
            .into_shape_with_order((b, self.fc.w.dim().1))
            .expect("flatten");
        let logits = self.fc.forward(&flat);
        (
            logits,
            BackboneCache {
                xin: xin.clone(),
                bn_caches,
                relu_outs,
            },
        )
    }

    fn backward(
        &self,
        cache: &BackboneCache<S>,
        glogits: &Array2<S>,
        mut gs: Option<&mut GradStore<S>>,
    ) -> Array4<S> {
        let b = glogits.dim().0;
        let last = cache.relu_outs.last().expect("stack");
        let flat = last
            .clone()
            .into_shape_with_order((b, self.fc.w.dim().1))
            .expect("flatten");
        let gflat = self.fc.backward(&flat, glogits, gs.as_deref_mut());
        let mut g = gflat
            .into_shape_with_order(last.raw_dim())
            .expect("unflatten");
        for i in (0..self.convs.len()).rev() {
            g = relu_bwd(&cache.relu_outs[i], &g);
            g = self.bns[i].backward(&cache.bn_caches[i], &g, gs.as_deref_mut());
            let input = if i == 0 { &cache.xin } else { &cache.relu_outs[i - 1] };
            g = self.convs[i].backward(input, &g, gs.as_deref_mut());
        }
        g
    }

    fn commit_bn(&mut self, cache: &BackboneCache<S>) {
        for (bn, c) in self.bns.iter_mut().zip(&cache.bn_caches) {
            bn.commit(c);
        }
    }

    fn layers(&self) -> Vec<LayerRef<'_, S>> {
        let mut v = Vec::new();
        for (c, b) in self.convs.iter().zip(&self.bns) {
            v.push(LayerRef::Conv(c));
            v.push(LayerRef::Bn(b));
        }
        v.push(LayerRef::Dense(&self.fc));
        v
    }

    fn layers_mut(&mut self) -> Vec<LayerMut<'_, S>> {
        let mut v = Vec::new();
        for (c, b) in self.convs.iter_mut().zip(self.bns.iter_mut()) {
            v.push(LayerMut::Conv(c));
            v.push(LayerMut::Bn(b));
        }
        v.push(LayerMut::Dense(&mut self.fc));
        v
    }
}

// ── Discriminator ───────────────────────────────────────────────────────

/// Conditional discriminator: the normalized age enters as one constant
/// extra input channel; output is a per-item probability clamped into
/// `(PROB_EPS, 1 - PROB_EPS)`.
#[derive(Debug, Clone)]
pub struct Discriminator<S: Real> {
    pub spec: NetworkSpec,
    backbone: ConvBackbone<S>,
}

pub struct DiscriminatorCache<S: Real> {
    inner: BackboneCache<S>,
    p_raw: Array1<S>,
    p: Array1<S>,
}

impl<S: Real> Discriminator<S> {
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        Self {
            spec: spec.clone(),
            backbone: ConvBackbone::init(spec, spec.channels + 1, 1, seed, 0xD),
        }
    }

    fn with_age_channel(&self, x: &Array4<S>, ell: &[f64]) -> Array4<S> {
        let (b, _, h, w) = x.dim();
        let mut chan = Array4::<S>::zeros((b, 1, h, w));
        for (bi, &l) in ell.iter().enumerate() {
            chan.index_axis_mut(Axis(0), bi).fill(scalar(l));
        }
        let joined = concatenate![Axis(1), x.view(), chan.view()];
        joined.as_standard_layout().into_owned()
    }

    pub fn forward(
        &self,
        x: &Array4<S>,
        ell: &[f64],
        mode: BnMode,
    ) -> Result<(Array1<S>, DiscriminatorCache<S>)> {
        check_images(x, self.spec.channels, self.spec.image_size)?;
        check_ages(ell, x.dim().0)?;
        let xin = self.with_age_channel(x, ell);
        let (logits, inner) = self.backbone.forward(&xin, mode);
        let p_raw = sigmoid(&logits).index_axis(Axis(1), 0).to_owned();
        let lo = scalar::<S>(PROB_EPS);
        let hi = S::one() - lo;
        let p = p_raw.mapv(|v| v.min(hi).max(lo));
        Ok((p.clone(), DiscriminatorCache { inner, p_raw, p }))
    }

    /// Backpropagate a probability gradient; returns the gradient w.r.t.
    /// the image (the age channel's gradient is discarded).
    pub fn backward(
        &self,
        cache: &DiscriminatorCache<S>,
        gp: &Array1<S>,
        gs: Option<&mut GradStore<S>>,
    ) -> Array4<S> {
        // Clamped outputs have zero derivative.
        let mut glogit = Array1::<S>::zeros(gp.len());
        for i in 0..gp.len() {
            let raw = cache.p_raw[i];
            if raw == cache.p[i] {
                glogit[i] = gp[i] * raw * (S::one() - raw);
            }
        }
        let glogits = glogit.insert_axis(Axis(1));
        let gxin = self.backbone.backward(&cache.inner, &glogits, gs);
        gxin.slice(ndarray::s![.., ..self.spec.channels, .., ..])
            .to_owned()
    }

    pub fn commit_bn(&mut self, cache: &DiscriminatorCache<S>) {
        self.backbone.commit_bn(&cache.inner);
    }
}

impl<S: Real> ParamSet<S> for Discriminator<S> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, ParamKind, &[S])) {
        visit_layers(&self.backbone.layers(), false, &mut |n, k, v| {
            f(n, k.unwrap(), v)
        });
    }
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut [S])) {
        visit_layers_mut(&mut self.backbone.layers_mut(), false, &mut |n, k, v| {
            f(n, k.unwrap(), v)
        });
    }
    fn for_each_state(&self, f: &mut dyn FnMut(&str, &[S])) {
        visit_layers(&self.backbone.layers(), true, &mut |n, _, v| f(n, v));
    }
    fn for_each_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut [S])) {
        visit_layers_mut(&mut self.backbone.layers_mut(), true, &mut |n, _, v| {
            f(n, v)
        });
    }
}

// ── Regressor ───────────────────────────────────────────────────────────

/// Ordinal-regression backbone: emits K-1 unbounded rank logits.
#[derive(Debug, Clone)]
pub struct Regressor<S: Real> {
    pub spec: NetworkSpec,
    backbone: ConvBackbone<S>,
}

pub struct RegressorCache<S: Real> {
    inner: BackboneCache<S>,
}

impl<S: Real> Regressor<S> {
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        Self {
            spec: spec.clone(),
            backbone: ConvBackbone::init(spec, spec.channels, spec.rank_count, seed, 0xA),
        }
    }

    pub fn forward(
        &self,
        x: &Array4<S>,
        mode: BnMode,
    ) -> Result<(Array2<S>, RegressorCache<S>)> {
        check_images(x, self.spec.channels, self.spec.image_size)?;
        let (logits, inner) = self.backbone.forward(x, mode);
        Ok((logits, RegressorCache { inner }))
    }

    pub fn backward(
        &self,
        cache: &RegressorCache<S>,
        glogits: &Array2<S>,
        gs: Option<&mut GradStore<S>>,
    ) -> Array4<S> {
        self.backbone.backward(&cache.inner, glogits, gs)
    }

    pub fn commit_bn(&mut self, cache: &RegressorCache<S>) {
        self.backbone.commit_bn(&cache.inner);
    }
}

impl<S: Real> ParamSet<S> for Regressor<S> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, ParamKind, &[S])) {
        visit_layers(&self.backbone.layers(), false, &mut |n, k, v| {
            f(n, k.unwrap(), v)
        });
    }
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut [S])) {
        visit_layers_mut(&mut self.backbone.layers_mut(), false, &mut |n, k, v| {
            f(n, k.unwrap(), v)
        });
    }
    fn for_each_state(&self, f: &mut dyn FnMut(&str, &[S])) {
        visit_layers(&self.backbone.layers(), true, &mut |n, _, v| f(n, v));
    }
    fn for_each_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut [S])) {
        visit_layers_mut(&mut self.backbone.layers_mut(), true, &mut |n, _, v| {
            f(n, v)
        });
    }
}

//! Composite layers around the OLIF kernel.

use rand::{Rng, RngCore};

use crate::model::params::{filled, trunc_normal, zeros, Bound, ParamGroup, ParamId, ParamStore};
use crate::olif::{BranchMode, OlifBlock, ScanInit};
use crate::tensor::{Graph, Result, Scalar, TensorError, Var};

pub const NORM_EPS: f64 = 1e-6;
/// Bottleneck reduction of the fusion perceptron.
pub const SK_REDUCTION: usize = 8;
const SK_MIN_HIDDEN: usize = 4;

/// `k x k` convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{prefix}.weight"), trunc_normal(rng, [cout, cin, k, k], std), ParamGroup::Main);
        let bias = store.add(format!("{prefix}.bias"), zeros([cout, 1, 1, 1]), ParamGroup::Main);
        Self { weight, bias, stride, padding: (k - 1) / 2 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.padding)
    }
}

/// 1x1 channel projection, optionally with bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        std: Option<f64>,
        rng: &mut R,
    ) -> Self {
        let w = match std {
            Some(std) => trunc_normal(rng, [cout, cin, 1, 1], std),
            None => zeros([cout, cin, 1, 1]),
        };
        let weight = store.add(format!("{prefix}.weight"), w, ParamGroup::Main);
        let bias = bias.then(|| store.add(format!("{prefix}.bias"), zeros([cout, 1, 1, 1]), ParamGroup::Main));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        g.pointwise(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

/// Per-pixel standardization across channels with a learned affine map.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl ChannelNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Self {
        let scale = store.add(format!("{prefix}.scale"), filled([1, dim, 1, 1], 1.0), ParamGroup::Main);
        let shift = store.add(format!("{prefix}.shift"), zeros([1, dim, 1, 1]), ParamGroup::Main);
        Self { scale, shift }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        g.channel_norm(x, p.var(self.scale), p.var(self.shift), T::lit(NORM_EPS))
    }
}

/// Expand, GELU, contract.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        ratio: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let hidden = dim * ratio;
        let fc1 = Linear::new(store, &format!("{prefix}.fc1"), dim, hidden, true, Some(std), rng);
        let fc2 = Linear::new(store, &format!("{prefix}.fc2"), hidden, dim, true, Some(std), rng);
        Self { fc1, fc2 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(&h);
        self.fc2.forward(g, p, &h)
    }
}

/// Stochastic depth: zeroes the whole residual branch of a sample with
/// probability `rate` and rescales survivors by `1 / (1 - rate)`.
/// Identity when `rng` is `None` (evaluation).
pub fn drop_path<T: Scalar>(g: &mut Graph<T>, x: &Var<T>, rate: f64, rng: Option<&mut dyn RngCore>) -> Result<Var<T>> {
    let Some(rng) = rng else { return Ok(x.clone()) };
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    let n = x.shape().n();
    let factors = if rate >= 1.0 {
        vec![T::zero(); n]
    } else {
        let keep = T::lit(1.0 / (1.0 - rate));
        (0..n).map(|_| if rng.random::<f64>() >= rate { keep } else { T::zero() }).collect()
    };
    g.scale_samples(x, factors)
}

pub(crate) fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Residual pair: OLIF token mixing, then MLP channel mixing.
#[derive(Clone, Debug)]
pub struct SnnBlock {
    pub norm1: Option<ChannelNorm>,
    pub olif: OlifBlock,
    pub norm2: Option<ChannelNorm>,
    pub mlp: Mlp,
    pub drop_path_rate: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct SnnBlockSpec {
    pub dim: usize,
    pub mlp_ratio: usize,
    pub drop_path_rate: f64,
    pub channel_norm: bool,
    pub branch_mode: BranchMode,
    pub init_std: f64,
    pub scan_init: ScanInit,
}

impl SnnBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: SnnBlockSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let norm1 = spec.channel_norm.then(|| ChannelNorm::new(store, &format!("{prefix}.norm1"), spec.dim));
        let olif = OlifBlock::new(store, &format!("{prefix}.olif"), spec.dim, spec.branch_mode, spec.init_std, spec.scan_init, rng)?;
        let norm2 = spec.channel_norm.then(|| ChannelNorm::new(store, &format!("{prefix}.norm2"), spec.dim));
        let mlp = Mlp::new(store, &format!("{prefix}.mlp"), spec.dim, spec.mlp_ratio, spec.init_std, rng);
        Ok(Self { norm1, olif, norm2, mlp, drop_path_rate: spec.drop_path_rate })
    }

    /// `x1 = x + drop(olif(norm1(x)))`, `out = x1 + drop(mlp(norm2(x1)))`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound<T>,
        x: &Var<T>,
        groups: usize,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var<T>> {
        let h = match &self.norm1 {
            Some(n) => n.forward(g, p, x)?,
            None => x.clone(),
        };
        let h = self.olif.forward(g, p, &h, groups)?;
        let h = drop_path(g, &h, self.drop_path_rate, reborrow(&mut rng))?;
        let x1 = g.add(x, &h)?;

        let h = match &self.norm2 {
            Some(n) => n.forward(g, p, &x1)?,
            None => x1.clone(),
        };
        let h = self.mlp.forward(g, p, &h)?;
        let h = drop_path(g, &h, self.drop_path_rate, reborrow(&mut rng))?;
        g.add(&x1, &h)
    }
}

/// Selective-kernel fusion of two same-shape feature maps.
///
/// Pools `a + b` to one vector per sample, maps it through a small
/// perceptron to two logits per channel, and mixes the branches with the
/// softmax of those logits. The last projection starts at zero, so a fresh
/// fusion is the plain average.
#[derive(Clone, Debug)]
pub struct SkFusion {
    pub dim: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SkFusion {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, dim: usize, std: f64, rng: &mut R) -> Self {
        let hidden = (dim / SK_REDUCTION).max(SK_MIN_HIDDEN);
        let fc1 = Linear::new(store, &format!("{prefix}.fc1"), dim, hidden, false, Some(std), rng);
        let fc2 = Linear::new(store, &format!("{prefix}.fc2"), hidden, 2 * dim, false, None, rng);
        Self { dim, fc1, fc2 }
    }

    /// Per-channel branch weights `(w_a, w_b)`, each `(N, C, 1, 1)`.
    pub fn weights<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound<T>, a: &Var<T>, b: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch { op: "sk_fusion", lhs: a.shape(), rhs: b.shape() });
        }
        let (n, c) = (a.shape().n(), a.shape().c());
        if c != self.dim {
            return Err(TensorError::ChannelMismatch { op: "sk_fusion", expected: self.dim, got: c });
        }
        let sum = g.add(a, b)?;
        let pooled = g.global_avg_pool(&sum);
        let h = self.fc1.forward(g, p, &pooled)?;
        let h = g.relu(&h);
        let logits = self.fc2.forward(g, p, &h)?;
        let logits = g.reshape(&logits, [n, 2, c, 1])?;
        let w = g.softmax(&logits, 1)?;
        let wa = g.narrow(&w, 1, 0, 1)?;
        let wb = g.narrow(&w, 1, 1, 1)?;
        Ok((g.reshape(&wa, [n, c, 1, 1])?, g.reshape(&wb, [n, c, 1, 1])?))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound<T>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (wa, wb) = self.weights(g, p, a, b)?;
        let ya = g.scale_channels(a, &wa)?;
        let yb = g.scale_channels(b, &wb)?;
        g.add(&ya, &yb)
    }
}

/// Sets every parameter in the store to zero except norm scales.
#[cfg(test)]
pub(crate) fn zero_all<T: Scalar>(store: &mut ParamStore<T>) {
    for p in store.iter_mut() {
        let keep = p.name.ends_with(".scale");
        if !keep {
            p.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

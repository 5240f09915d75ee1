//! Orthogonal leaky-integrate-and-fire block.
//!
//! A feature map is first filtered by a depthwise 3x3 convolution, then
//! scanned by two LIF neuron layers: one walks the width axis, the other the
//! height axis. Each axis is cut into `g` contiguous slabs ("group steps").
//! At step `k` the slab is mixed across channels by a learned projection and
//! fed to the neurons, whose membrane potential carries over to step `k + 1`:
//!
//! ```text
//! y[k]   = W x[k] + b
//! u[k]   = tau * u[k-1] * (1 - o[k-1]) + y[k]
//! o[k]   = u[k] > v_th
//! r[k]   = max(u[k], v_th)
//! ```
//!
//! The block emits the continuous `r` rather than the binary spike `o`. The
//! spike only gates the reset of the next step and carries no gradient.
//! Both scans are merged by a pointwise projection back to `C` channels.

use serde::{Deserialize, Serialize};

use crate::model::params::{filled, trunc_normal, zeros, Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Graph, Result, Scalar, Shape, Tensor, TensorError, Var};

/// Initial decay coefficient.
pub const TAU_INIT: f64 = 0.25;
/// Initial firing threshold.
pub const V_TH_INIT: f64 = 0.25;
/// Potential after a spike. Fixed: the `(1 - o)` gate zeroes it.
pub const U_RESET: f64 = 0.0;

/// How the two directional scans share the input channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    /// Both scans see all `C` channels; the merge maps `2C -> C`.
    #[default]
    Duplicate,
    /// The first `C/2` channels go to the horizontal scan, the rest to the
    /// vertical one; the merge maps `C -> C`.
    Split,
}

/// Initial spread of the weights that drive the neurons (depthwise filter
/// and scan projections).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScanInit {
    /// Truncated normal with std `1 / sqrt(fan_in)`, so potentials start
    /// on the scale of the threshold and a share of neurons fire.
    #[default]
    FanIn,
    /// The model-wide `init_std`. Potentials then start far below the
    /// threshold, every output sits at the floor and no gradient reaches
    /// these weights.
    Small,
}

/// Scan direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanAxis {
    /// Slabs along the width axis.
    Horizontal,
    /// Slabs along the height axis.
    Vertical,
}

impl ScanAxis {
    pub fn tensor_axis(self) -> usize {
        match self {
            ScanAxis::Horizontal => 3,
            ScanAxis::Vertical => 2,
        }
    }
}

/// Learnable decay and threshold of one neuron layer, bound into a graph.
#[derive(Clone, Debug)]
pub struct LifParams<T> {
    pub tau: Var<T>,
    pub v_th: Var<T>,
}

impl<T: Scalar> LifParams<T> {
    /// Untracked constants, mainly for tests.
    pub fn constant(tau: f64, v_th: f64) -> Self {
        Self {
            tau: Graph::constant(Tensor::scalar(T::lit(tau))),
            v_th: Graph::constant(Tensor::scalar(T::lit(v_th))),
        }
    }

    fn threshold(&self) -> T {
        self.v_th.value().data()[0]
    }
}

/// Neuron state between group steps.
#[derive(Clone, Debug)]
pub struct LifState<T> {
    /// Membrane potential.
    pub u: Var<T>,
    /// Spikes of the step that produced `u`, each 0 or 1.
    pub o: Tensor<T>,
}

impl<T: Scalar> LifState<T> {
    /// Resting state, `u = 0` and no spikes.
    pub fn rest(shape: Shape) -> Self {
        let zeros = Tensor::from_parts(shape, vec![T::zero(); shape.numel()]);
        Self { u: Graph::constant(zeros.clone()), o: zeros }
    }
}

/// One group step: integrate `y`, fire, and emit the floored potential `r`.
pub fn lif_group_step<T: Scalar>(
    g: &mut Graph<T>,
    state: &LifState<T>,
    y: &Var<T>,
    params: &LifParams<T>,
) -> Result<(LifState<T>, Var<T>)> {
    if state.u.shape() != y.shape() || state.o.shape() != y.shape() {
        return Err(TensorError::ShapeMismatch { op: "lif_group_step", lhs: state.u.shape(), rhs: y.shape() });
    }
    let gate = Graph::constant(state.o.map(|o| T::one() - o));
    let kept = g.mul(&state.u, &gate)?;
    let leaked = g.mul_scalar(&kept, &params.tau)?;
    let u = g.add(&leaked, y)?;
    let v_th = params.threshold();
    let o = u.value().map(|v| if v > v_th { T::one() } else { T::zero() });
    let r = g.max_scalar(&u, &params.v_th)?;
    Ok((LifState { u, o }, r))
}

/// Channel-mixing projection applied to every slab of one scan.
#[derive(Clone, Debug)]
pub struct ScanProjection<T> {
    pub weight: Var<T>,
    pub bias: Option<Var<T>>,
}

/// Scans `x` along `axis` in `groups` equal slabs. Output shape equals input shape.
pub fn directional_scan<T: Scalar>(
    g: &mut Graph<T>,
    x: &Var<T>,
    axis: ScanAxis,
    groups: usize,
    proj: &ScanProjection<T>,
    params: &LifParams<T>,
) -> Result<Var<T>> {
    let ax = axis.tensor_axis();
    let extent = x.shape().0[ax];
    if groups == 0 || !extent.is_multiple_of(groups) {
        return Err(TensorError::Invalid {
            op: "directional_scan",
            msg: format!("scanned extent {extent} is not divisible by {groups} groups"),
        });
    }
    let slab = extent / groups;
    let mut state: Option<LifState<T>> = None;
    let mut outputs = Vec::with_capacity(groups);
    for k in 0..groups {
        let part = g.narrow(x, ax, k * slab, slab)?;
        let y = g.pointwise(&part, &proj.weight, proj.bias.as_ref())?;
        let prev = state.take().unwrap_or_else(|| LifState::rest(y.shape()));
        let (next, r) = lif_group_step(g, &prev, &y, params)?;
        state = Some(next);
        outputs.push(r);
    }
    if outputs.len() == 1 {
        return Ok(outputs.pop().expect("one group"));
    }
    g.concat(&outputs, ax)
}

/// Parameter handles of one OLIF block.
#[derive(Clone, Debug)]
pub struct OlifBlock {
    pub dim: usize,
    pub mode: BranchMode,
    pub dw_kernel: ParamId,
    pub dw_bias: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub merge_w: ParamId,
    pub merge_b: ParamId,
    pub tau_h: ParamId,
    pub v_th_h: ParamId,
    pub tau_v: ParamId,
    pub v_th_v: ParamId,
}

impl OlifBlock {
    pub fn new<T: Scalar, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        mode: BranchMode,
        std: f64,
        scan_init: ScanInit,
        rng: &mut R,
    ) -> Result<Self> {
        if mode == BranchMode::Split && !dim.is_multiple_of(2) {
            return Err(TensorError::Invalid { op: "olif", msg: format!("split branches need an even channel count, got {dim}") });
        }
        let (branch, merge_in) = match mode {
            BranchMode::Duplicate => (dim, 2 * dim),
            BranchMode::Split => (dim / 2, dim),
        };
        let drive_std = |fan_in: usize| match scan_init {
            ScanInit::FanIn => 1.0 / (fan_in as f64).sqrt(),
            ScanInit::Small => std,
        };
        let main = ParamGroup::Main;
        let mut add = |name: &str, t: Tensor<T>, group| store.add(format!("{prefix}.{name}"), t, group);
        let dw_kernel = add("dw.weight", trunc_normal(rng, [dim, 1, 3, 3], drive_std(9)), main);
        let dw_bias = add("dw.bias", zeros([dim, 1, 1, 1]), main);
        let w_h = add("scan_h.weight", trunc_normal(rng, [branch, branch, 1, 1], drive_std(branch)), main);
        let b_h = add("scan_h.bias", zeros([branch, 1, 1, 1]), main);
        let w_v = add("scan_v.weight", trunc_normal(rng, [branch, branch, 1, 1], drive_std(branch)), main);
        let b_v = add("scan_v.bias", zeros([branch, 1, 1, 1]), main);
        let merge_w = add("merge.weight", trunc_normal(rng, [dim, merge_in, 1, 1], std), main);
        let merge_b = add("merge.bias", zeros([dim, 1, 1, 1]), main);
        let tau_h = add("lif_h.tau", filled([1, 1, 1, 1], TAU_INIT), ParamGroup::Lif);
        let v_th_h = add("lif_h.v_th", filled([1, 1, 1, 1], V_TH_INIT), ParamGroup::Lif);
        let tau_v = add("lif_v.tau", filled([1, 1, 1, 1], TAU_INIT), ParamGroup::Lif);
        let v_th_v = add("lif_v.v_th", filled([1, 1, 1, 1], V_TH_INIT), ParamGroup::Lif);
        Ok(Self { dim, mode, dw_kernel, dw_bias, w_h, b_h, w_v, b_v, merge_w, merge_b, tau_h, v_th_h, tau_v, v_th_v })
    }

    pub fn lif_h<T: Scalar>(&self, p: &Bound<T>) -> LifParams<T> {
        LifParams { tau: p.var(self.tau_h).clone(), v_th: p.var(self.v_th_h).clone() }
    }

    pub fn lif_v<T: Scalar>(&self, p: &Bound<T>) -> LifParams<T> {
        LifParams { tau: p.var(self.tau_v).clone(), v_th: p.var(self.v_th_v).clone() }
    }

    /// Depthwise filter, two directional scans, merge. Shape preserving.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound<T>, x: &Var<T>, groups: usize) -> Result<Var<T>> {
        let s = x.shape();
        if s.c() != self.dim {
            return Err(TensorError::ChannelMismatch { op: "olif", expected: self.dim, got: s.c() });
        }
        for (axis, extent) in [("width", s.w()), ("height", s.h())] {
            if groups == 0 || extent % groups != 0 {
                return Err(TensorError::Invalid {
                    op: "olif",
                    msg: format!("{axis} {extent} is not divisible by {groups} groups"),
                });
            }
        }
        let z = g.dwconv2d(x, p.var(self.dw_kernel), Some(p.var(self.dw_bias)))?;
        let (z_h, z_v) = match self.mode {
            BranchMode::Duplicate => (z.clone(), z),
            BranchMode::Split => {
                let half = self.dim / 2;
                (g.narrow(&z, 1, 0, half)?, g.narrow(&z, 1, half, half)?)
            }
        };
        let proj_h = ScanProjection { weight: p.var(self.w_h).clone(), bias: Some(p.var(self.b_h).clone()) };
        let proj_v = ScanProjection { weight: p.var(self.w_v).clone(), bias: Some(p.var(self.b_v).clone()) };
        let h = directional_scan(g, &z_h, ScanAxis::Horizontal, groups, &proj_h, &self.lif_h(p))?;
        let v = directional_scan(g, &z_v, ScanAxis::Vertical, groups, &proj_v, &self.lif_v(p))?;
        let hv = g.concat(&[h, v], 1)?;
        g.pointwise(&hv, p.var(self.merge_w), Some(p.var(self.merge_b)))
    }
}

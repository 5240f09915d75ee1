//! Finite-difference verification of the reverse rules.
//!
//! Every case maps some input tensors to an output `f(x)` and is probed with
//! the scalar `sum(w * f(x))` for a fixed random `w`. The analytic gradient
//! of each input comes from one reverse pass; the numeric one from central
//! differences with step [`EPS`] on a sample of elements.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{ChannelNorm, Mlp, SkFusion, SnnBlock, SnnBlockSpec};
use crate::loss::{l1_loss, Loss, LossConfig, PerceptualProxy};
use crate::model::params::{Bound, ParamStore};
use crate::model::{DehazeSnn, ModelConfig};
use crate::olif::{directional_scan, lif_group_step, BranchMode, LifParams, LifState, OlifBlock, ScanAxis, ScanInit, ScanProjection};
use crate::tensor::{Graph, OpKind, Result, Tensor, Var};

pub const EPS: f64 = 1e-5;
/// Worst relative error allowed for a single operation.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Worst relative error allowed for a composite block.
pub const COMPOSITE_TOL: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const ABS_FLOOR: f64 = 1e-3;
/// One-sided differences farther apart than this mark a jump.
pub const JUMP_TOL: f64 = 0.1;
/// Step shrink factor applied at a detected jump.
pub const REFINE: f64 = 1e-2;
/// Elements perturbed per input tensor, at most.
const SAMPLES: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseKind {
    Primitive,
    Composite,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub kind: CaseKind,
    pub worst: f64,
    pub threshold: f64,
    pub checked: usize,
    /// Elements whose stencil straddled a spike and were re-measured.
    pub refined: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst < self.threshold
    }
}

#[derive(Clone, Debug)]
pub struct Report {
    pub cases: Vec<CaseResult>,
    pub elapsed: Duration,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed())
    }

    pub fn case(&self, name: &str) -> Option<&CaseResult> {
        self.cases.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:<10} {:>12} {:>10} {:>8} {:>7}  result", "case", "kind", "worst rel", "limit", "samples", "refined")?;
        for c in &self.cases {
            let kind = match c.kind {
                CaseKind::Primitive => "primitive",
                CaseKind::Composite => "composite",
            };
            let verdict = if c.passed() { "ok" } else { "FAIL" };
            writeln!(f, "{:<24} {:<10} {:>12.3e} {:>10.0e} {:>8} {:>7}  {verdict}", c.name, kind, c.worst, c.threshold, c.checked, c.refined)?;
        }
        let failed = self.cases.iter().filter(|c| !c.passed()).count();
        write!(f, "{} cases, {} failed, {:.1}s", self.cases.len(), failed, self.elapsed.as_secs_f64())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Measured {
    pub worst: f64,
    pub checked: usize,
    pub refined: usize,
}

type Eval<'a> = dyn Fn(&mut Graph<f64>, &[Var<f64>]) -> Result<Var<f64>> + 'a;

/// Worst relative error and number of compared elements for one function.
pub fn check_function(
    inputs: &[Tensor<f64>],
    f: &Eval<'_>,
    corrupt: Option<OpKind>,
    seed: u64,
) -> Result<Measured> {
    check_function_sampled(inputs, f, corrupt, seed, SAMPLES)
}

fn check_function_sampled(
    inputs: &[Tensor<f64>],
    f: &Eval<'_>,
    corrupt: Option<OpKind>,
    seed: u64,
    samples: usize,
) -> Result<Measured> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    if let Some(k) = corrupt {
        g.corrupt_backward(k);
    }
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let probe = Tensor::from_fn(out.shape().dims(), |_| rng.random_range(-1.0..1.0))?;
    if out.is_tracked() {
        g.backward_with(&out, probe.clone())?;
    }

    let objective = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var<f64>> = xs.iter().map(|t| Graph::constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(out.value().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
    };

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut refined = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let picks: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            (0..samples).map(|_| rng.random_range(0..n)).collect()
        };
        let analytic = g.grad(v).cloned();
        for j in picks {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + EPS;
            let plus = objective(&work)?;
            work[i].data_mut()[j] = orig - EPS;
            let minus = objective(&work)?;
            work[i].data_mut()[j] = orig;
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[j]);
            let mut numeric = (plus - minus) / (2.0 * EPS);
            let mut err = rel_err(a, numeric);
            if err >= PRIMITIVE_TOL {
                // A spike flipping inside the stencil shows up as one-sided
                // differences that disagree; shrink the step past it.
                let centre = objective(&work)?;
                let (fwd, bwd) = ((plus - centre) / EPS, (centre - minus) / EPS);
                if rel_err(fwd, bwd) > JUMP_TOL {
                    let h = EPS * REFINE;
                    work[i].data_mut()[j] = orig + h;
                    let plus = objective(&work)?;
                    work[i].data_mut()[j] = orig - h;
                    let minus = objective(&work)?;
                    work[i].data_mut()[j] = orig;
                    numeric = (plus - minus) / (2.0 * h);
                    err = rel_err(a, numeric);
                    refined += 1;
                }
            }
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
            checked += 1;
        }
    }
    Ok(Measured { worst, checked, refined })
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(ABS_FLOOR)
}

fn uniform(rng: &mut ChaCha8Rng, dims: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(lo..hi)).expect("positive extents")
}

/// Samples bounded away from `kink` by at least `gap`.
fn away_from(rng: &mut ChaCha8Rng, dims: [usize; 4], kink: f64, gap: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random::<bool>() { kink + m } else { kink - m }
    })
    .expect("positive extents")
}

struct Suite {
    corrupt: Option<OpKind>,
    cases: Vec<CaseResult>,
    rng: ChaCha8Rng,
}

impl Suite {
    fn run(&mut self, name: &str, kind: CaseKind, inputs: Vec<Tensor<f64>>, f: &Eval<'_>) {
        self.run_sampled(name, kind, inputs, f, SAMPLES)
    }

    fn run_sampled(&mut self, name: &str, kind: CaseKind, inputs: Vec<Tensor<f64>>, f: &Eval<'_>, samples: usize) {
        let threshold = match kind {
            CaseKind::Primitive => PRIMITIVE_TOL,
            CaseKind::Composite => COMPOSITE_TOL,
        };
        let seed = self.rng.random();
        let m = check_function_sampled(&inputs, f, self.corrupt, seed, samples)
            .unwrap_or(Measured { worst: f64::INFINITY, checked: 0, refined: 0 });
        self.cases.push(CaseResult { name: name.into(), kind, worst: m.worst, threshold, checked: m.checked, refined: m.refined });
    }

    fn params_case(&mut self, name: &str, store: &ParamStore<f64>, x: Vec<Tensor<f64>>, f: &dyn Fn(&mut Graph<f64>, &Bound<f64>, &[Var<f64>]) -> Result<Var<f64>>) {
        let nx = x.len();
        let mut inputs = x;
        inputs.extend(store.iter().map(|p| p.value.clone()));
        let eval = move |g: &mut Graph<f64>, v: &[Var<f64>]| -> Result<Var<f64>> {
            let bound = Bound::from_vars(v[nx..].to_vec());
            f(g, &bound, &v[..nx])
        };
        self.run(name, CaseKind::Composite, inputs, &eval);
    }
}

/// Runs every case. With `corrupt`, that operation's reverse rule is
/// perturbed so the affected cases must fail.
pub fn run_suite(corrupt: Option<OpKind>) -> Report {
    let start = Instant::now();
    let mut s = Suite { corrupt, cases: Vec::new(), rng: ChaCha8Rng::seed_from_u64(0xc0ffee) };
    primitives(&mut s);
    composites(&mut s);
    Report { cases: s.cases, elapsed: start.elapsed() }
}

fn primitives(s: &mut Suite) {
    use CaseKind::Primitive as P;
    let r = &mut ChaCha8Rng::seed_from_u64(1);
    let x = uniform(r, [2, 3, 5, 6], -1.0, 1.0);

    s.run("conv2d", P, vec![x.clone(), uniform(r, [4, 3, 3, 3], -1.0, 1.0), uniform(r, [4, 1, 1, 1], -1.0, 1.0)], &|g, v| {
        g.conv2d(&v[0], &v[1], Some(&v[2]), 1, 1)
    });
    s.run("conv2d_stride2", P, vec![x.clone(), uniform(r, [4, 3, 3, 3], -1.0, 1.0)], &|g, v| {
        g.conv2d(&v[0], &v[1], None, 2, 1)
    });
    s.run("dwconv2d", P, vec![x.clone(), uniform(r, [3, 1, 3, 3], -1.0, 1.0), uniform(r, [3, 1, 1, 1], -1.0, 1.0)], &|g, v| {
        g.dwconv2d(&v[0], &v[1], Some(&v[2]))
    });
    s.run("pointwise", P, vec![x.clone(), uniform(r, [5, 3, 1, 1], -1.0, 1.0), uniform(r, [5, 1, 1, 1], -1.0, 1.0)], &|g, v| {
        g.pointwise(&v[0], &v[1], Some(&v[2]))
    });
    let y = uniform(r, [2, 3, 5, 6], -1.0, 1.0);
    s.run("add", P, vec![x.clone(), y.clone()], &|g, v| g.add(&v[0], &v[1]));
    s.run("sub", P, vec![x.clone(), y.clone()], &|g, v| g.sub(&v[0], &v[1]));
    s.run("mul", P, vec![x.clone(), y.clone()], &|g, v| g.mul(&v[0], &v[1]));
    s.run("scale", P, vec![x.clone()], &|g, v| Ok(g.scale(&v[0], -1.75)));
    s.run("mul_scalar", P, vec![x.clone(), Tensor::scalar(0.6)], &|g, v| g.mul_scalar(&v[0], &v[1]));
    s.run("gelu", P, vec![uniform(r, [2, 3, 4, 4], -3.0, 3.0)], &|g, v| Ok(g.gelu(&v[0])));
    s.run("relu", P, vec![away_from(r, [2, 3, 4, 4], 0.0, 0.05)], &|g, v| Ok(g.relu(&v[0])));
    s.run("abs", P, vec![away_from(r, [2, 3, 4, 4], 0.0, 0.05)], &|g, v| Ok(g.abs(&v[0])));
    s.run("softmax", P, vec![uniform(r, [2, 3, 4, 2], -2.0, 2.0)], &|g, v| g.softmax(&v[0], 1));
    s.run("softmax_w", P, vec![uniform(r, [2, 3, 2, 5], -2.0, 2.0)], &|g, v| g.softmax(&v[0], 3));
    s.run("max_scalar", P, vec![away_from(r, [2, 3, 4, 4], 0.25, 0.05), Tensor::scalar(0.25)], &|g, v| {
        g.max_scalar(&v[0], &v[1])
    });
    s.run("global_avg_pool", P, vec![x.clone()], &|g, v| Ok(g.global_avg_pool(&v[0])));
    s.run(
        "channel_norm",
        P,
        vec![uniform(r, [2, 4, 3, 3], -1.0, 1.0), uniform(r, [1, 4, 1, 1], 0.5, 1.5), uniform(r, [1, 4, 1, 1], -0.5, 0.5)],
        &|g, v| g.channel_norm(&v[0], &v[1], &v[2], 1e-6),
    );
    s.run("l2_normalize", P, vec![uniform(r, [2, 4, 3, 3], -1.0, 1.0)], &|g, v| Ok(g.l2_normalize_channels(&v[0], 1e-10)));
    s.run("scale_channels", P, vec![x.clone(), uniform(r, [2, 3, 1, 1], -1.0, 1.0)], &|g, v| g.scale_channels(&v[0], &v[1]));
    s.run("scale_samples", P, vec![x.clone()], &|g, v| g.scale_samples(&v[0], vec![2.0, 0.0]));
    s.run("narrow", P, vec![x.clone()], &|g, v| g.narrow(&v[0], 3, 1, 4));
    s.run("concat", P, vec![x.clone(), uniform(r, [2, 3, 5, 2], -1.0, 1.0)], &|g, v| g.concat(&[v[0].clone(), v[1].clone()], 3));
    s.run("reshape", P, vec![x.clone()], &|g, v| g.reshape(&v[0], [2, 3, 6, 5]));
    s.run("depth_to_space", P, vec![uniform(r, [2, 8, 2, 3], -1.0, 1.0)], &|g, v| g.depth_to_space(&v[0]));
    s.run("pad_reflect", P, vec![uniform(r, [1, 2, 3, 4], -1.0, 1.0)], &|g, v| Ok(g.pad_reflect(&v[0], 4, 5)));
    s.run("sum", P, vec![x.clone()], &|g, v| Ok(g.sum(&v[0])));
    s.run("mean", P, vec![x], &|g, v| Ok(g.mean(&v[0])));
}

fn composites(s: &mut Suite) {
    use CaseKind::Composite as C;
    let r = &mut ChaCha8Rng::seed_from_u64(2);

    // Previous potential and input chosen so the new potential stays clear
    // of the threshold.
    let prev_o = Tensor::from_fn([1, 3, 4, 2], |[_, c, h, w]| ((c + h + w) % 2) as f64).unwrap();
    let u_prev = uniform(r, [1, 3, 4, 2], -0.5, 0.5);
    let y = Tensor::from_fn([1, 3, 4, 2], |[_, c, h, w]| {
        let kept = 0.3 * u_prev.get(0, c, h, w) * (1.0 - prev_o.get(0, c, h, w));
        let target = if (c + h * 2 + w) % 3 == 0 { 0.25 - r.random_range(0.05..0.6) } else { 0.25 + r.random_range(0.05..0.6) };
        target - kept
    })
    .unwrap();
    s.run("lif_step", C, vec![u_prev, y, Tensor::scalar(0.3), Tensor::scalar(0.25)], &|g, v| {
        let state = LifState { u: v[0].clone(), o: prev_o.clone() };
        let params = LifParams { tau: v[2].clone(), v_th: v[3].clone() };
        Ok(lif_group_step(g, &state, &v[1], &params)?.1)
    });

    for (name, axis) in [("scan_horizontal", ScanAxis::Horizontal), ("scan_vertical", ScanAxis::Vertical)] {
        let inputs = vec![
            uniform(r, [2, 3, 4, 8], -1.0, 1.0),
            uniform(r, [3, 3, 1, 1], -1.0, 1.0),
            uniform(r, [3, 1, 1, 1], -0.2, 0.2),
            Tensor::scalar(0.3),
            Tensor::scalar(0.2),
        ];
        s.run(name, C, inputs, &move |g, v| {
            let proj = ScanProjection { weight: v[1].clone(), bias: Some(v[2].clone()) };
            let lif = LifParams { tau: v[3].clone(), v_th: v[4].clone() };
            directional_scan(g, &v[0], axis, 4, &proj, &lif)
        });
    }

    for (name, mode) in [("olif_block", BranchMode::Duplicate), ("olif_block_split", BranchMode::Split)] {
        let mut store = ParamStore::<f64>::new();
        let blk = OlifBlock::new(&mut store, "olif", 4, mode, 0.3, ScanInit::FanIn, r).expect("even width");
        s.params_case(name, &store, vec![uniform(r, [1, 4, 4, 4], -1.0, 1.0)], &|g, p, x| blk.forward(g, p, &x[0], 2));
    }

    let mut store = ParamStore::<f64>::new();
    let mlp = Mlp::new(&mut store, "mlp", 3, 2, 0.5, r);
    s.params_case("mlp", &store, vec![uniform(r, [2, 3, 3, 3], -1.0, 1.0)], &|g, p, x| mlp.forward(g, p, &x[0]));

    let mut store = ParamStore::<f64>::new();
    let norm = ChannelNorm::new(&mut store, "norm", 4);
    s.params_case("channel_norm_layer", &store, vec![uniform(r, [2, 4, 3, 3], -1.0, 1.0)], &|g, p, x| norm.forward(g, p, &x[0]));

    let mut store = ParamStore::<f64>::new();
    let spec = SnnBlockSpec {
        dim: 4,
        mlp_ratio: 2,
        drop_path_rate: 0.0,
        channel_norm: true,
        branch_mode: BranchMode::Duplicate,
        init_std: 0.3,
        scan_init: ScanInit::FanIn,
    };
    let blk = SnnBlock::new(&mut store, "blk", spec, r).expect("valid spec");
    s.params_case("snn_block", &store, vec![uniform(r, [1, 4, 4, 4], -1.0, 1.0)], &|g, p, x| blk.forward(g, p, &x[0], 2, None));

    let mut store = ParamStore::<f64>::new();
    let sk = SkFusion::new(&mut store, "sk", 8, 0.5, r);
    // exercise the softmax away from its zero-initialized uniform point
    let w2 = sk.fc2.weight;
    *store.value_mut(w2) = uniform(r, store.value(w2).shape().dims(), -0.5, 0.5);
    s.params_case(
        "sk_fusion",
        &store,
        vec![uniform(r, [2, 8, 3, 3], -1.0, 1.0), uniform(r, [2, 8, 3, 3], -1.0, 1.0)],
        &|g, p, x| sk.forward(g, p, &x[0], &x[1]),
    );

    s.run(
        "downsample2x",
        C,
        vec![uniform(r, [1, 3, 4, 6], -1.0, 1.0), uniform(r, [6, 3, 3, 3], -1.0, 1.0), uniform(r, [6, 1, 1, 1], -1.0, 1.0)],
        &|g, v| g.downsample2x(&v[0], &v[1], Some(&v[2])),
    );
    s.run(
        "upsample2x",
        C,
        vec![uniform(r, [1, 4, 2, 3], -1.0, 1.0), uniform(r, [8, 4, 1, 1], -1.0, 1.0), uniform(r, [8, 1, 1, 1], -1.0, 1.0)],
        &|g, v| g.upsample2x(&v[0], &v[1], Some(&v[2])),
    );

    let target = uniform(r, [1, 3, 16, 16], 0.0, 1.0);
    let offsets = away_from(r, [1, 3, 16, 16], 0.0, 0.02);
    let pred = Tensor::from_fn([1, 3, 16, 16], |[n, c, h, w]| target.get(n, c, h, w) + 0.1 * offsets.get(n, c, h, w)).unwrap();
    {
        let tg = target.clone();
        s.run("l1_loss", C, vec![pred.clone()], &move |g, v| l1_loss(g, &v[0], &Graph::constant(tg.clone())));
    }
    {
        let proxy = PerceptualProxy::<f64>::new(3);
        let tg = target.clone();
        s.run("perceptual_proxy", C, vec![pred.clone()], &move |g, v| proxy.distance(g, &v[0], &Graph::constant(tg.clone())));
    }
    {
        let loss = Loss::<f64>::new(LossConfig::default()).expect("default loss");
        let tg = target.clone();
        s.run("combined_loss", C, vec![pred], &move |g, v| loss.compute(g, &v[0], &Graph::constant(tg.clone())));
    }

    let cfg = ModelConfig { dims: [4, 8, 16, 8, 4], init_std: 0.2, ..ModelConfig::tiny() };
    let model = DehazeSnn::<f64>::build(cfg, r).expect("valid config");
    let mut inputs = vec![uniform(r, [1, 3, 16, 16], 0.0, 1.0)];
    inputs.extend(model.params.iter().map(|p| p.value.clone()));
    let eval = |g: &mut Graph<f64>, v: &[Var<f64>]| -> Result<Var<f64>> {
        let bound = Bound::from_vars(v[1..].to_vec());
        model.forward_aligned(g, &bound, &v[0], None).map_err(|e| match e {
            crate::model::ModelError::Tensor(t) => t,
            other => crate::tensor::TensorError::Invalid { op: "model", msg: other.to_string() },
        })
    };
    s.run_sampled("model_tiny", C, inputs, &eval, 3);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let m = check_function(&[x], &|g, v| Ok(g.scale(&v[0], 3.0)), None, 0).unwrap();
        assert_eq!((m.checked, m.refined), (3, 0));
        assert!(m.worst < 1e-9);
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let m = check_function(&[x], &|g, v| Ok(g.gelu(&v[0])), Some(OpKind::Gelu), 0).unwrap();
        assert!(m.worst > 1e-3);
        assert_eq!(m.refined, 0);
    }

    #[test]
    fn single_precision_composite_agrees_with_double_differences() {
        let r = &mut ChaCha8Rng::seed_from_u64(9);
        let x = uniform(r, [1, 2, 5, 5], -1.0, 1.0);
        let k = uniform(r, [3, 2, 3, 3], -0.5, 0.5);
        let f64_eval = |g: &mut Graph<f64>, v: &[Var<f64>]| -> Result<Var<f64>> {
            let c = g.conv2d(&v[0], &v[1], None, 1, 1)?;
            let a = g.gelu(&c);
            let p = g.global_avg_pool(&a);
            Ok(g.sum(&p))
        };
        let mut g = Graph::<f32>::new();
        let xv = g.leaf(x.cast(), true);
        let kv = g.leaf(k.cast(), true);
        let c = g.conv2d(&xv, &kv, None, 1, 1).unwrap();
        let a = g.gelu(&c);
        let p = g.global_avg_pool(&a);
        let l = g.sum(&p);
        g.backward(&l).unwrap();
        let analytic = g.grad(&kv).unwrap().clone();
        let mut work = vec![x.clone(), k.clone()];
        let value = |xs: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let v: Vec<_> = xs.iter().map(|t| Graph::constant(t.clone())).collect();
            f64_eval(&mut g, &v).unwrap().value().item().unwrap()
        };
        for j in 0..k.numel() {
            let o = k.data()[j];
            work[1].data_mut()[j] = o + EPS;
            let plus = value(&work);
            work[1].data_mut()[j] = o - EPS;
            let minus = value(&work);
            work[1].data_mut()[j] = o;
            let n = (plus - minus) / (2.0 * EPS);
            let a = analytic.data()[j] as f64;
            assert!((a - n).abs() / a.abs().max(n.abs()).max(ABS_FLOOR) < 1e-4);
        }
    }
}

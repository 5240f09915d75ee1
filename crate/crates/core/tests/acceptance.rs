//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use dehazesnn::config::RunConfig;
use dehazesnn::gradcheck;
use dehazesnn::metrics::{psnr, ssim};
use dehazesnn::model::cost::CostReport;
use dehazesnn::model::params::{ParamGroup, ParamStore};
use dehazesnn::model::{checkpoint, DehazeSnn, ModelConfig};
use dehazesnn::olif::{directional_scan, lif_group_step, LifParams, LifState, ScanAxis, ScanProjection};
use dehazesnn::tensor::{Graph, Tensor};
use dehazesnn::train::adamw::{adamw_step, AdamWConfig, GroupLr, OptimState};
use dehazesnn::train::{evaluate, PairedDataset, TrainOptions, Trainer, LOG_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const SCAN_SHAPES: usize = 120;
const SCAN_TOL: f64 = 1e-6;
const FLOOR_INPUTS: usize = 1000;
const COST_TOL: f64 = 0.20;
const OVERFIT_STEPS: u64 = 2000;
const OVERFIT_PSNR: f64 = 30.0;
const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);
const METRIC_TOL: f64 = 1e-6;
const ADAMW_TOL: f64 = 1e-9;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn gradient_fidelity() -> Outcome {
    let report = gradcheck::run_suite(None);
    println!("{report}");
    let bad: Vec<_> = report.failures().map(|c| format!("{} ({:.2e})", c.name, c.worst)).collect();
    ensure(bad.is_empty(), || format!("failing cases: {}", bad.join(", ")))?;
    for name in ["olif_block", "snn_block", "sk_fusion"] {
        ensure(report.case(name).is_some(), || format!("missing case {name}"))?;
    }
    ensure(report.elapsed < GRADCHECK_BUDGET, || format!("took {:.1}s", report.elapsed.as_secs_f64()))?;
    let worst = |kind| report.cases.iter().filter(|c| c.kind == kind).map(|c| c.worst).fold(0.0, f64::max);
    Ok(format!(
        "{} cases, worst primitive {:.2e}, worst composite {:.2e}, {:.1}s",
        report.cases.len(),
        worst(gradcheck::CaseKind::Primitive),
        worst(gradcheck::CaseKind::Composite),
        report.elapsed.as_secs_f64()
    ))
}

fn scan_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut per_g = [0usize; 3];
    for case in 0..SCAN_SHAPES {
        let gi = case % 3;
        let groups = [1, 2, 4][gi];
        let axis = if case % 2 == 0 { ScanAxis::Horizontal } else { ScanAxis::Vertical };
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=4);
        let scanned = groups * rng.random_range(1..=8 / groups);
        let cross = rng.random_range(1..=8);
        let (h, w) = match axis {
            ScanAxis::Horizontal => (cross, scanned),
            ScanAxis::Vertical => (scanned, cross),
        };
        let x = Tensor::from_fn([n, c, h, w], |_| rng.random_range(-1.0..1.0)).unwrap();
        let weight: Vec<Vec<f64>> = (0..c).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let bias: Vec<f64> = (0..c).map(|_| rng.random_range(-0.3..0.3)).collect();
        let tau = rng.random_range(0.05..0.95);
        let v_th = rng.random_range(0.05..0.5);

        let mut g = Graph::new();
        let wt = Tensor::from_fn([c, c, 1, 1], |[o, i, _, _]| weight[o][i]).unwrap();
        let bt = Tensor::from_fn([c, 1, 1, 1], |[o, _, _, _]| bias[o]).unwrap();
        let proj = ScanProjection { weight: Graph::constant(wt), bias: Some(Graph::constant(bt)) };
        let out = directional_scan(&mut g, &Graph::constant(x.clone()), axis, groups, &proj, &LifParams::constant(tau, v_th))
            .map_err(|e| e.to_string())?;
        let expect = common::naive_scan(&x, axis, groups, &weight, &bias, tau, v_th);
        let d = out.value().max_abs_diff(&expect).map_err(|e| e.to_string())?;
        worst = worst.max(d);
        per_g[gi] += 1;
    }
    ensure(worst < SCAN_TOL, || format!("max abs diff {worst:.3e}"))?;
    Ok(format!("{SCAN_SHAPES} shapes (g=1/2/4: {:?}), max abs diff {worst:.2e}", per_g))
}

fn spike_floor() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut below = 0usize;
    let mut elems = 0usize;
    for i in 0..FLOOR_INPUTS {
        let groups = [1, 2, 4][i % 3];
        let axis = if i % 2 == 0 { ScanAxis::Horizontal } else { ScanAxis::Vertical };
        let scale = rng.random_range(0.1..5.0f32);
        let x = Tensor::<f32>::from_fn([1, 3, 8, 8], |_| rng.random_range(-scale..scale)).unwrap();
        let wt = Tensor::<f32>::from_fn([3, 3, 1, 1], |_| rng.random_range(-1.0..1.0)).unwrap();
        let v_th = rng.random_range(0.01..1.0);
        let lif = LifParams::constant(rng.random_range(0.0..1.0), v_th);
        let threshold = lif.v_th.value().data()[0];
        let mut g = Graph::new();
        let proj = ScanProjection { weight: Graph::constant(wt), bias: None };
        let out = directional_scan(&mut g, &Graph::constant(x), axis, groups, &proj, &lif).map_err(|e| e.to_string())?;
        below += out.value().data().iter().filter(|&&v| v < threshold).count();
        elems += out.value().numel();
    }
    ensure(below == 0, || format!("{below} of {elems} elements below threshold"))?;

    // Positions that fired forget the previous potential entirely.
    let dims = [1, 2, 4, 4];
    let fired = Tensor::<f64>::from_fn(dims, |[_, c, h, w]| ((c + h + w) % 2) as f64).unwrap();
    let u = Tensor::<f64>::from_fn(dims, |[_, _, h, w]| 0.3 + 0.1 * (h * 4 + w) as f64).unwrap();
    let y = Tensor::<f64>::from_fn(dims, |[_, _, h, w]| 0.05 * (h as f64 - w as f64)).unwrap();
    let params = LifParams::constant(0.25, 0.25);
    let next = |u: Tensor<f64>| {
        let mut g = Graph::new();
        let s = LifState { u: Graph::constant(u), o: fired.clone() };
        lif_group_step(&mut g, &s, &Graph::constant(y.clone()), &params).unwrap().0.u.value().clone()
    };
    let base = next(u.clone());
    let bumped = next(u.map(|v| v + 0.37));
    let mut changed_fired = 0;
    let mut changed_quiet = 0;
    for i in 0..u.numel() {
        let differs = base.data()[i] != bumped.data()[i];
        if fired.data()[i] == 1.0 {
            changed_fired += differs as usize;
        } else {
            changed_quiet += (!differs) as usize;
        }
    }
    ensure(changed_fired == 0, || format!("{changed_fired} fired positions depend on the previous potential"))?;
    ensure(changed_quiet == 0, || format!("{changed_quiet} quiet positions ignore the previous potential"))?;
    Ok(format!("{FLOOR_INPUTS} inputs, {elems} elements all >= V_th; reset verified on {} positions", u.numel()))
}

fn cost_reproduction() -> Outcome {
    let mut lines = Vec::new();
    for (cfg, params, macs) in [(ModelConfig::medium(), 2.70e6, 26.28e9), (ModelConfig::large(), 4.75e6, 37.27e9)] {
        let model = DehazeSnn::<f32>::from_seed(cfg, 0).map_err(|e| e.to_string())?;
        let r = CostReport::new(&model, 256, 256).map_err(|e| e.to_string())?;
        let dp = r.params as f64 / params - 1.0;
        let dm = r.macs.total() as f64 / macs - 1.0;
        println!("{r}");
        ensure(dp.abs() <= COST_TOL && dm.abs() <= COST_TOL, || {
            format!("{}: params {} ({:+.1}%), MACs {} ({:+.1}%)", r.variant, r.params, dp * 100.0, r.macs.total(), dm * 100.0)
        })?;
        lines.push(format!("{} params {} ({:+.1}%) MACs {} ({:+.1}%)", r.variant, r.params, dp * 100.0, r.macs.total(), dm * 100.0));
    }
    Ok(lines.join("; "))
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let pairs = common::hazy_pairs(4, 64, 64);
    let ds = PairedDataset::from_memory(pairs.clone(), 64, false).map_err(|e| e.to_string())?;
    let model = DehazeSnn::<f32>::from_seed(ModelConfig::tiny(), 0).map_err(|e| e.to_string())?;
    let hazy_psnr = {
        let s: f64 = pairs.iter().map(|(h, c)| psnr(h, c).unwrap()).sum();
        s / pairs.len() as f64
    };
    let opts = TrainOptions { steps: OVERFIT_STEPS, batch_size: 4, ..TrainOptions::default() };
    let mut trainer = Trainer::new(model, opts).map_err(|e| e.to_string())?;
    let (all_hazy, all_gt) = stack(&pairs);
    let loss0 = trainer.loss_on(&all_hazy, &all_gt).map_err(|e| e.to_string())?;
    trainer.run(&ds, None, None).map_err(|e| e.to_string())?;
    let loss_end = trainer.loss_on(&all_hazy, &all_gt).map_err(|e| e.to_string())?;
    let report = evaluate(&trainer.model, &ds).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let detail = format!(
        "PSNR {:.2} dB (hazy input {:.2} dB), loss {:.5} -> {:.5}, {:.0}s",
        report.mean_psnr,
        hazy_psnr,
        loss0,
        loss_end,
        elapsed.as_secs_f64()
    );
    ensure(report.mean_psnr > OVERFIT_PSNR, || detail.clone())?;
    ensure(loss_end < loss0, || detail.clone())?;
    ensure(elapsed < OVERFIT_BUDGET, || detail.clone())?;
    Ok(detail)
}

fn stack(pairs: &[(Tensor<f32>, Tensor<f32>)]) -> (Tensor<f32>, Tensor<f32>) {
    let [_, c, h, w] = pairs[0].0.shape().dims();
    let n = pairs.len();
    let pick = |second: bool| {
        Tensor::from_fn([n, c, h, w], |[i, ch, y, x]| {
            let t = if second { &pairs[i].1 } else { &pairs[i].0 };
            t.get(0, ch, y, x)
        })
        .unwrap()
    };
    (pick(false), pick(true))
}

fn metric_correctness() -> Outcome {
    let a = Tensor::<f64>::full([1, 3, 16, 16], 0.4).unwrap();
    let b = a.map(|v| v + 0.1);
    let p = psnr(&b, &a).map_err(|e| e.to_string())?;
    ensure((p - 20.0).abs() < METRIC_TOL, || format!("psnr {p}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for dims in [[1, 3, 16, 16], [2, 3, 13, 21], [1, 1, 11, 11]] {
        let x = Tensor::<f64>::from_fn(dims, |_| rng.random()).unwrap();
        let y = x.map(|v| (v + 0.2 * (v * 17.0).sin()).clamp(0.0, 1.0));
        let s = ssim(&x, &y).map_err(|e| e.to_string())?;
        worst = worst.max((s - common::naive_ssim(&x, &y)).abs());
    }
    ensure(worst < METRIC_TOL, || format!("ssim oracle diff {worst:.3e}"))?;

    let c1 = Tensor::<f64>::full([1, 3, 16, 16], 0.2).unwrap();
    let c2 = Tensor::<f64>::full([1, 3, 16, 16], 0.8).unwrap();
    let s = ssim(&c1, &c2).map_err(|e| e.to_string())?;
    let expect = (2.0 * 0.2 * 0.8 + 1e-4) / (0.04 + 0.64 + 1e-4);
    ensure((s - expect).abs() < METRIC_TOL && (s - 0.4706).abs() < 1e-4, || format!("constant ssim {s}"))?;
    Ok(format!("psnr {p:.9}, ssim oracle diff {worst:.1e}, constant ssim {s:.6}"))
}

fn determinism_and_persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = PairedDataset::from_memory(common::hazy_pairs(3, 40, 40), 32, true).map_err(|e| e.to_string())?;
    let config = ModelConfig { drop_path_rate: 0.1, ..ModelConfig::tiny() };
    let opts = |sub: &str| TrainOptions {
        steps: 12,
        batch_size: 2,
        seed: 5,
        checkpoint_dir: Some(dir.path().join(sub)),
        ..TrainOptions::default()
    };
    let run = |sub: &str| -> Result<Trainer, String> {
        let model = DehazeSnn::<f32>::from_seed(config.clone(), 3).map_err(|e| e.to_string())?;
        let mut t = Trainer::new(model, opts(sub)).map_err(|e| e.to_string())?;
        t.run(&ds, None, None).map_err(|e| e.to_string())?;
        Ok(t)
    };
    let a = run("a")?;
    let _b = run("b")?;
    let log_a = std::fs::read(dir.path().join("a").join(LOG_FILE)).map_err(|e| e.to_string())?;
    let log_b = std::fs::read(dir.path().join("b").join(LOG_FILE)).map_err(|e| e.to_string())?;
    ensure(!log_a.is_empty() && log_a == log_b, || "metric logs differ".into())?;

    let bytes = checkpoint::encode(&a.model, Some(&a.state));
    let (m, s) = checkpoint::decode::<f32>(&bytes).map_err(|e| e.to_string())?;
    ensure(checkpoint::encode(&m, s.as_ref()) == bytes, || "checkpoint round trip changed bytes".into())?;
    let probe = common::scene(7, 20, 36);
    let (y0, y1) = (a.model.infer(&probe).map_err(|e| e.to_string())?, m.infer(&probe).map_err(|e| e.to_string())?);
    ensure(common::bits(&y0) == common::bits(&y1), || "reloaded model forward differs".into())?;

    let model = DehazeSnn::<f32>::from_seed(config.clone(), 3).map_err(|e| e.to_string())?;
    let mut first = Trainer::new(model, opts("c")).map_err(|e| e.to_string())?;
    first.run(&ds, None, Some(5)).map_err(|e| e.to_string())?;
    let ck = dir.path().join("c").join("at5.dsnn");
    first.save(&ck).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::resume(&ck, opts("d")).map_err(|e| e.to_string())?;
    resumed.run(&ds, None, None).map_err(|e| e.to_string())?;
    let joined: Vec<_> = first.log.iter().chain(&resumed.log).cloned().collect();
    ensure(joined == a.log, || "resumed trajectory differs from uninterrupted run".into())?;
    ensure(checkpoint::encode(&resumed.model, Some(&resumed.state)) == bytes, || "resumed final state differs".into())?;
    Ok(format!("{} logged steps identical, {} checkpoint bytes round-trip, resume at step 5 matches", a.log.len(), bytes.len()))
}

fn shape_contract() -> Outcome {
    let model = DehazeSnn::<f32>::from_seed(ModelConfig::tiny(), 1).map_err(|e| e.to_string())?;
    let mut seen = Vec::new();
    for (h, w) in [(100, 80), (16, 16), (17, 33), (31, 16)] {
        let x = common::scene(0, h, w);
        let y = model.infer(&x).map_err(|e| e.to_string())?;
        let d = y.shape().dims();
        ensure(d == [1, 3, h, w], || format!("{h}x{w} in -> {}x{} out", d[2], d[3]))?;
        seen.push(format!("{h}x{w}"));
    }
    Ok(format!("output shape equals input for {}", seen.join(", ")))
}

fn schedule_and_optimizer() -> Outcome {
    let cfg = RunConfig::from_toml_str("[data]\ntrain_dir = \"d\"\n").map_err(|e| e.to_string())?;
    let opts = cfg.train_options();
    let total = opts.steps;
    let model = DehazeSnn::<f32>::from_seed(ModelConfig::tiny(), 0).map_err(|e| e.to_string())?;
    let t = Trainer::new(model, opts).map_err(|e| e.to_string())?;
    let (l0, lt) = (t.lr_at(0).map_err(|e| e.to_string())?, t.lr_at(total).map_err(|e| e.to_string())?);
    ensure(l0 == GroupLr { main: 1e-4, lif: 5e-5 }, || format!("lr(0) = {l0:?}"))?;
    ensure(lt == GroupLr { main: 1e-6, lif: 1e-6 }, || format!("lr(total) = {lt:?}"))?;

    let mut store = ParamStore::<f64>::new();
    let w = Tensor::from_vec([1, 1, 1, 3], vec![0.5, -1.25, 2.0]).unwrap();
    let tau = Tensor::scalar(0.25);
    store.add("w", w.clone(), ParamGroup::Main);
    store.add("tau", tau.clone(), ParamGroup::Lif);
    let gw = Tensor::from_vec([1, 1, 1, 3], vec![0.3, 0.0, -2.0]).unwrap();
    let gt = Tensor::scalar(-0.7);
    let mut state = OptimState::new(&store);
    let cfg = AdamWConfig::default();
    let lr = GroupLr { main: 1e-3, lif: 5e-4 };
    adamw_step(&mut store, &[Some(&gw), Some(&gt)], &mut state, lr, &cfg).map_err(|e| e.to_string())?;
    // after one step the bias-corrected moments are g and g^2
    let hand = |theta: f64, g: f64, lr: f64, wd: f64| theta * (1.0 - lr * wd) - lr * g / (g.abs() + cfg.eps);
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        let e = hand(w.data()[i], gw.data()[i], lr.main, cfg.weight_decay);
        worst = worst.max((store.iter().next().unwrap().value.data()[i] - e).abs());
    }
    let e = hand(0.25, -0.7, lr.lif, 0.0);
    worst = worst.max((store.iter().nth(1).unwrap().value.data()[0] - e).abs());
    ensure(worst < ADAMW_TOL, || format!("first AdamW step off by {worst:.3e}"))?;
    Ok(format!("lr(0) = {:e}/{:e}, lr({total}) = {:e}, first AdamW step within {worst:.1e}", l0.main, l0.lif, lt.main))
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("scan oracle equivalence", scan_oracle),
        ("spike floor and reset", spike_floor),
        ("cost reproduction", cost_reproduction),
        ("overfit smoke test", overfit),
        ("metric correctness", metric_correctness),
        ("determinism and persistence", determinism_and_persistence),
        ("shape and padding contract", shape_contract),
        ("schedule and optimizer exactness", schedule_and_optimizer),
    ];
    let mut failed = 0;
    let mut lines = Vec::new();
    for (i, (name, check)) in checks.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let line = match outcome {
            Ok(detail) => format!("PASS [{}] {name}: {detail} ({:.1}s)", i + 1, t.elapsed().as_secs_f64()),
            Err(detail) => {
                failed += 1;
                format!("FAIL [{}] {name}: {detail} ({:.1}s)", i + 1, t.elapsed().as_secs_f64())
            }
        };
        println!("{line}");
        lines.push(line);
    }
    println!("\nacceptance summary");
    for l in &lines {
        println!("{l}");
    }
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

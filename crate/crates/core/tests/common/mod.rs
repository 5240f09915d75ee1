#![allow(dead_code)]

use dehazesnn::olif::ScanAxis;
use dehazesnn::tensor::{Scalar, Tensor};
use dehazesnn::train::haze::synthesize_haze;
use rand_chacha::ChaCha8Rng;

/// Per-pixel scalar loop of the group-step neuron scan.
///
/// `weight[co][ci]`, `bias[co]`. State lives per (sample, channel, cross
/// position, offset inside the slab) and is carried from one slab to the next.
pub fn naive_scan(
    x: &Tensor<f64>,
    axis: ScanAxis,
    groups: usize,
    weight: &[Vec<f64>],
    bias: &[f64],
    tau: f64,
    v_th: f64,
) -> Tensor<f64> {
    let [n, c, h, w] = x.shape().dims();
    let (along, across) = match axis {
        ScanAxis::Horizontal => (w, h),
        ScanAxis::Vertical => (h, w),
    };
    let slab = along / groups;
    let mut out = Tensor::zeros([n, c, h, w]).unwrap();
    for b in 0..n {
        for co in 0..c {
            for a in 0..across {
                for j in 0..slab {
                    let mut u = 0.0;
                    let mut o = 0.0;
                    for k in 0..groups {
                        let pos = k * slab + j;
                        let (hh, ww) = match axis {
                            ScanAxis::Horizontal => (a, pos),
                            ScanAxis::Vertical => (pos, a),
                        };
                        let mut y = bias[co];
                        for ci in 0..c {
                            y += weight[co][ci] * x.get(b, ci, hh, ww);
                        }
                        u = tau * u * (1.0 - o) + y;
                        o = if u > v_th { 1.0 } else { 0.0 };
                        out.set(b, co, hh, ww, if u > v_th { u } else { v_th });
                    }
                }
            }
        }
    }
    out
}

/// SSIM by explicit window loops on the channel-mean gray image.
pub fn naive_ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let [n, c, h, w] = a.shape().dims();
    let k = 11usize;
    let sigma = 1.5f64;
    let mut g = [[0.0f64; 11]; 11];
    let mut total_w = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total_w += *v;
        }
    }
    let gray = |t: &Tensor<f64>, s: usize, y: usize, x: usize| {
        (0..c).map(|ch| t.get(s, ch, y, x).clamp(0.0, 1.0)).sum::<f64>() / c as f64
    };
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    for s in 0..n {
        let mut sum = 0.0;
        let mut count = 0;
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = g[i][j] / total_w;
                        let va = gray(a, s, y0 + i, x0 + j);
                        let vb = gray(b, s, y0 + i, x0 + j);
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        acc += sum / count as f64;
    }
    acc / n as f64
}

/// Smooth coloured test scene number `k`.
pub fn scene(k: usize, h: usize, w: usize) -> Tensor<f32> {
    let f = (k + 1) as f32;
    Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
        let cf = c as f32;
        0.5 + 0.3 * (6.0 * u * f + 1.7 * cf).sin() * (4.0 * v + 0.9 * f).cos() + 0.1 * (u - v) * (cf - 1.0)
    })
    .unwrap()
}

/// `count` (hazy, clean) pairs under uniform mild haze.
pub fn hazy_pairs(count: usize, h: usize, w: usize) -> Vec<(Tensor<f32>, Tensor<f32>)> {
    (0..count)
        .map(|k| {
            let clean = scene(k, h, w);
            let hazy = synthesize_haze(&clean, 0.9, 0.8, None::<&mut ChaCha8Rng>).unwrap();
            (hazy, clean)
        })
        .collect()
}

pub fn bits<T: Scalar>(t: &Tensor<T>) -> Vec<u64> {
    t.data().iter().map(|v| v.as_f64().to_bits()).collect()
}

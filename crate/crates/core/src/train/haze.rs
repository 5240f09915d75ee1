//! Synthetic haze from the atmospheric scattering model `I = J t + A (1 - t)`.

use rand::Rng;

use crate::tensor::{Result, Tensor, TensorError};

/// Coarse grid of the random transmission field.
const FIELD_CELLS: usize = 4;

/// Applies haze with transmission `t` and airlight `airlight`.
///
/// Without `rng` the transmission is constant. With `rng` it varies smoothly:
/// `t(x) = t^(0.5 + f(x))` where `f` is a bilinear upsampling of a 4x4 grid of
/// uniform samples, so the field stays in `(0, 1]` and averages near `t`.
pub fn synthesize_haze<R: Rng + ?Sized>(clean: &Tensor<f32>, t: f64, airlight: f64, rng: Option<&mut R>) -> Result<Tensor<f32>> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(TensorError::Invalid { op: "synthesize_haze", msg: format!("transmission {t} outside (0, 1]") });
    }
    if !(0.0..=1.0).contains(&airlight) {
        return Err(TensorError::Invalid { op: "synthesize_haze", msg: format!("airlight {airlight} outside [0, 1]") });
    }
    let s = clean.shape();
    let field = match rng {
        None => vec![t; s.plane()],
        Some(rng) => {
            let grid: Vec<f64> = (0..FIELD_CELLS * FIELD_CELLS).map(|_| rng.random::<f64>()).collect();
            (0..s.plane())
                .map(|i| t.powf(0.5 + bilinear(&grid, i / s.w(), i % s.w(), s.h(), s.w())))
                .collect()
        }
    };
    let mut out = clean.clone();
    let plane = s.plane();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let tx = field[k % plane];
        *v = (*v as f64 * tx + airlight * (1.0 - tx)) as f32;
    }
    Ok(out)
}

fn bilinear(grid: &[f64], y: usize, x: usize, h: usize, w: usize) -> f64 {
    let coord = |p: usize, len: usize| {
        if len <= 1 {
            0.0
        } else {
            p as f64 / (len - 1) as f64 * (FIELD_CELLS - 1) as f64
        }
    };
    let (gy, gx) = (coord(y, h), coord(x, w));
    let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(FIELD_CELLS - 1), (x0 + 1).min(FIELD_CELLS - 1));
    let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
    let at = |r: usize, c: usize| grid[r * FIELD_CELLS + c];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

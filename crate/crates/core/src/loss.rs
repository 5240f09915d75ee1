//! Training objective: weighted L1 plus a perceptual distance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Result, Scalar, Tensor, TensorError, Var};

/// Which perceptual term accompanies L1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Perceptual {
    /// Fixed random-feature network, see [`PerceptualProxy`].
    #[default]
    Proxy,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the L1 term; the perceptual term gets `1 - alpha1`.
    pub alpha1: f64,
    pub perceptual: Perceptual,
    pub proxy_seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha1: 0.5, perceptual: Perceptual::Proxy, proxy_seed: 0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(0.0..=1.0).contains(&self.alpha1) {
            return Err(format!("loss.alpha1 must lie in [0, 1], got {}", self.alpha1));
        }
        Ok(())
    }
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(g: &mut Graph<T>, pred: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
    let d = g.sub(pred, target)?;
    let a = g.abs(&d);
    Ok(g.mean(&a))
}

/// Channel widths of the proxy feature stack.
pub const PROXY_WIDTHS: [usize; 4] = [3, 16, 32, 64];
const PROXY_EPS: f64 = 1e-10;

/// Stand-in for a learned perceptual metric: three frozen random 3x3
/// stride-2 convolutions with ReLU. Each layer's features are normalized to
/// unit length across channels; the distance is the mean squared difference
/// per layer, averaged over layers.
#[derive(Clone, Debug)]
pub struct PerceptualProxy<T> {
    pub weights: Vec<Tensor<T>>,
}

impl<T: Scalar> PerceptualProxy<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = PROXY_WIDTHS
            .windows(2)
            .map(|w| {
                let (cin, cout) = (w[0], w[1]);
                let std = (2.0 / (9 * cin) as f64).sqrt();
                Tensor::from_fn([cout, cin, 3, 3], |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::lit(z * std)
                })
                .expect("positive extents")
            })
            .collect();
        Self { weights }
    }

    fn features(&self, g: &mut Graph<T>, x: &Var<T>) -> Result<Vec<Var<T>>> {
        // [0, 1] -> [-1, 1]
        let shift = Graph::constant(Tensor::full(x.shape().dims(), T::lit(-1.0))?);
        let x2 = g.scale(x, T::lit(2.0));
        let mut h = g.add(&x2, &shift)?;
        let mut out = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            let w = Graph::constant(w.clone());
            let c = g.conv2d(&h, &w, None, 2, 1)?;
            h = g.relu(&c);
            out.push(g.l2_normalize_channels(&h, T::lit(PROXY_EPS)));
        }
        Ok(out)
    }

    pub fn distance(&self, g: &mut Graph<T>, pred: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
        if pred.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch { op: "perceptual", lhs: pred.shape(), rhs: target.shape() });
        }
        let fp = self.features(g, pred)?;
        let ft = self.features(g, target)?;
        let mut total: Option<Var<T>> = None;
        for (a, b) in fp.iter().zip(&ft) {
            let d = g.sub(a, b)?;
            let sq = g.mul(&d, &d)?;
            let m = g.mean(&sq);
            total = Some(match total {
                Some(t) => g.add(&t, &m)?,
                None => m,
            });
        }
        Ok(g.scale(&total.expect("three layers"), T::lit(1.0 / self.weights.len() as f64)))
    }
}

/// `alpha1 * l1 + (1 - alpha1) * perceptual`.
#[derive(Clone, Debug)]
pub struct Loss<T> {
    pub config: LossConfig,
    pub proxy: Option<PerceptualProxy<T>>,
}

impl<T: Scalar> Loss<T> {
    pub fn new(config: LossConfig) -> std::result::Result<Self, String> {
        config.validate()?;
        let proxy = (config.perceptual == Perceptual::Proxy).then(|| PerceptualProxy::new(config.proxy_seed));
        Ok(Self { config, proxy })
    }

    pub fn compute(&self, g: &mut Graph<T>, pred: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
        let a = self.config.alpha1;
        let l1 = l1_loss(g, pred, target)?;
        let weighted = g.scale(&l1, T::lit(a));
        match &self.proxy {
            Some(proxy) if a < 1.0 => {
                let p = proxy.distance(g, pred, target)?;
                let p = g.scale(&p, T::lit(1.0 - a));
                g.add(&weighted, &p)
            }
            _ => Ok(weighted),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn img(seed: u64, dims: [usize; 4]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_| rng.random_range(0.0..1.0)).unwrap()
    }

    #[test]
    fn l1_examples() {
        let mut g = Graph::<f64>::new();
        let t = img(1, [1, 3, 8, 8]);
        let a = Graph::constant(t.clone());
        assert_eq!(l1_loss(&mut g, &a, &a).unwrap().value().item().unwrap(), 0.0);
        let b = Graph::constant(t.map(|v| v + 0.1));
        let l = l1_loss(&mut g, &b, &a).unwrap().value().item().unwrap();
        assert!((l - 0.1).abs() < 1e-12);
        let c = Graph::constant(img(1, [1, 3, 8, 4]));
        assert!(l1_loss(&mut g, &a, &c).is_err());
    }

    #[test]
    fn alpha_one_equals_l1_and_identity_is_zero() {
        let mut g = Graph::<f64>::new();
        let a = Graph::constant(img(2, [1, 3, 16, 16]));
        let b = Graph::constant(img(3, [1, 3, 16, 16]));
        let l1 = l1_loss(&mut g, &a, &b).unwrap().value().item().unwrap();
        let loss = Loss::new(LossConfig { alpha1: 1.0, ..Default::default() }).unwrap();
        assert_eq!(loss.compute(&mut g, &a, &b).unwrap().value().item().unwrap(), l1);
        for alpha1 in [0.0, 0.3, 0.5, 1.0] {
            let loss = Loss::new(LossConfig { alpha1, ..Default::default() }).unwrap();
            assert_eq!(loss.compute(&mut g, &a, &a).unwrap().value().item().unwrap(), 0.0);
        }
        let none = Loss::new(LossConfig { alpha1: 0.5, perceptual: Perceptual::None, proxy_seed: 0 }).unwrap();
        assert_eq!(none.compute(&mut g, &a, &b).unwrap().value().item().unwrap(), 0.5 * l1);
    }

    #[test]
    fn alpha_out_of_range_names_the_key() {
        let e = Loss::<f32>::new(LossConfig { alpha1: 1.5, ..Default::default() }).unwrap_err();
        assert!(e.contains("loss.alpha1"));
    }

    #[test]
    fn proxy_is_seeded_symmetric_and_nonnegative() {
        let p1 = PerceptualProxy::<f64>::new(4);
        let p2 = PerceptualProxy::<f64>::new(4);
        assert_eq!(p1.weights, p2.weights);
        let mut g = Graph::new();
        let a = Graph::constant(img(5, [1, 3, 16, 16]));
        let b = Graph::constant(img(6, [1, 3, 16, 16]));
        let ab = p1.distance(&mut g, &a, &b).unwrap().value().item().unwrap();
        let ba = p1.distance(&mut g, &b, &a).unwrap().value().item().unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-15);
        assert_eq!(p1.distance(&mut g, &a, &a).unwrap().value().item().unwrap(), 0.0);
    }

    #[test]
    fn perceptual_gradient_vanishes_at_identity() {
        let p = PerceptualProxy::<f64>::new(7);
        let mut g = Graph::new();
        let t = img(8, [1, 3, 16, 16]);
        let x = g.leaf(t.clone(), true);
        let y = Graph::constant(t);
        let d = p.distance(&mut g, &x, &y).unwrap();
        g.backward(&d).unwrap();
        assert!(g.grad(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }
}

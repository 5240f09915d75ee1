//! The five-stage encoder-decoder.
//!
//! ```text
//! in_proj -> stage1 ----------------------------------> fusion1 -> stage5 -> out_proj -> + image
//!              \-> down -> stage2 ------> fusion0 -> stage4 -/ up
//!                           \-> down -> stage3 -/ up
//! ```

pub mod checkpoint;
pub mod cost;
pub mod params;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{reborrow, Conv, Linear, SkFusion, SnnBlock, SnnBlockSpec};
use crate::olif::{BranchMode, ScanInit};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};
use params::{trunc_normal, zeros, Bound, ParamGroup, ParamId, ParamStore};

pub use cost::CostReport;

pub const STAGES: usize = 5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: String,
    /// Blocks per stage.
    pub depths: [usize; STAGES],
    /// Channel width per stage.
    pub dims: [usize; STAGES],
    pub mlp_ratio: usize,
    /// LIF group steps per scan direction.
    pub groups: usize,
    /// Drop-path rate, the same for every block.
    pub drop_path_rate: f64,
    /// Normalize before each residual sub-block.
    pub channel_norm: bool,
    pub branch_mode: BranchMode,
    /// Std of every weight except the neuron drive, see [`ScanInit`].
    pub init_std: f64,
    pub scan_init: ScanInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::medium()
    }
}

impl ModelConfig {
    pub fn medium() -> Self {
        Self {
            variant: "M".into(),
            depths: [8, 12, 16, 12, 8],
            dims: [24, 48, 96, 48, 24],
            mlp_ratio: 4,
            groups: 4,
            drop_path_rate: 0.0,
            channel_norm: true,
            branch_mode: BranchMode::Duplicate,
            init_std: INIT_STD,
            scan_init: ScanInit::FanIn,
        }
    }

    pub fn large() -> Self {
        Self { variant: "L".into(), depths: [8, 16, 32, 16, 8], ..Self::medium() }
    }

    pub fn tiny() -> Self {
        Self { variant: "tiny".into(), depths: [1; STAGES], dims: [8, 16, 32, 16, 8], ..Self::medium() }
    }

    /// `"M"`, `"L"` or `"tiny"` (case-insensitive).
    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "m" => Ok(Self::medium()),
            "l" => Ok(Self::large()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(ModelError::Config(format!("unknown variant {name:?} (expected M, L or tiny)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.depths.contains(&0) {
            return bad(format!("depths must be positive, got {:?}", self.depths));
        }
        let d = self.dims;
        if d.contains(&0) {
            return bad(format!("dims must be positive, got {d:?}"));
        }
        if d[0] != d[4] || d[1] != d[3] || d[1] != 2 * d[0] || d[2] != 2 * d[1] {
            return bad(format!("dims {d:?} must have the form (c, 2c, 4c, 2c, c)"));
        }
        if self.branch_mode == BranchMode::Split && !d[0].is_multiple_of(2) {
            return bad(format!("split branches need even dims, got {d:?}"));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.groups == 0 {
            return bad("groups must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return bad(format!("drop_path_rate must lie in [0, 1), got {}", self.drop_path_rate));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }

    /// Spatial extents fed to the network are padded to a multiple of this:
    /// two halvings, then `groups` slabs at the coarsest scale.
    pub fn pad_multiple(&self) -> usize {
        4 * self.groups
    }

    fn block_spec(&self, stage: usize) -> SnnBlockSpec {
        SnnBlockSpec {
            dim: self.dims[stage],
            mlp_ratio: self.mlp_ratio,
            drop_path_rate: self.drop_path_rate,
            channel_norm: self.channel_norm,
            branch_mode: self.branch_mode,
            init_std: self.init_std,
            scan_init: self.scan_init,
        }
    }
}

/// Strided 3x3 convolution `C -> 2C`.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Pointwise `C -> 2C` followed by depth-to-space, giving `C / 2` channels.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub struct DehazeSnn<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub in_proj: Conv,
    pub stages: Vec<Vec<SnnBlock>>,
    pub down: [Downsample; 2],
    pub up: [Upsample; 2],
    pub fusion: [SkFusion; 2],
    pub out_proj: Conv,
}

impl<T: Scalar> DehazeSnn<T> {
    /// Builds a model with weights drawn from `rng`.
    pub fn build<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let std = config.init_std;
        let d = config.dims;
        let mut store = ParamStore::new();
        let st = &mut store;

        let in_proj = Conv::new(st, "in_proj", 3, d[0], 3, 1, std, rng);
        let mut stages = Vec::with_capacity(STAGES);
        let mut down = Vec::new();
        let mut up = Vec::new();
        let mut fusion = Vec::new();
        for (i, &depth) in config.depths.iter().enumerate() {
            if i == 3 || i == 4 {
                let k = i - 3;
                let cin = d[i - 1];
                up.push(Upsample { proj: Linear::new(st, &format!("up.{k}"), cin, 2 * cin, true, Some(std), rng) });
                fusion.push(SkFusion::new(st, &format!("fusion.{k}"), d[i], std, rng));
            }
            let blocks = (0..depth)
                .map(|j| SnnBlock::new(st, &format!("stages.{i}.blocks.{j}"), config.block_spec(i), rng))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            stages.push(blocks);
            if i < 2 {
                let (cin, cout) = (d[i], d[i + 1]);
                let weight = st.add(format!("down.{i}.weight"), trunc_normal(rng, [cout, cin, 3, 3], std), ParamGroup::Main);
                let bias = st.add(format!("down.{i}.bias"), zeros([cout, 1, 1, 1]), ParamGroup::Main);
                down.push(Downsample { weight, bias });
            }
        }
        let out_proj = Conv::new(st, "out_proj", d[4], 3, 3, 1, std, rng);

        Ok(Self {
            config,
            params: store,
            in_proj,
            stages,
            down: pair(down),
            up: pair(up),
            fusion: pair(fusion),
            out_proj,
        })
    }

    pub fn from_seed(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> DehazeSnn<U> {
        DehazeSnn {
            config: self.config.clone(),
            params: self.params.cast(),
            in_proj: self.in_proj.clone(),
            stages: self.stages.clone(),
            down: self.down.clone(),
            up: self.up.clone(),
            fusion: self.fusion.clone(),
            out_proj: self.out_proj.clone(),
        }
    }

    /// Network body on an input whose height and width are multiples of
    /// [`ModelConfig::pad_multiple`]. Passing `rng` enables drop path.
    pub fn forward_aligned(
        &self,
        g: &mut Graph<T>,
        p: &Bound<T>,
        image: &Var<T>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var<T>> {
        let s = image.shape();
        let m = self.config.pad_multiple();
        if s.c() != 3 {
            return Err(TensorError::ChannelMismatch { op: "model", expected: 3, got: s.c() }.into());
        }
        if !s.h().is_multiple_of(m) || !s.w().is_multiple_of(m) {
            return Err(ModelError::Tensor(TensorError::Invalid {
                op: "model",
                msg: format!("spatial extent {}x{} is not a multiple of {m}", s.h(), s.w()),
            }));
        }
        let groups = self.config.groups;
        let run_stage = |g: &mut Graph<T>, i: usize, x: Var<T>, rng: &mut Option<&mut dyn RngCore>| -> Result<Var<T>> {
            let mut x = x;
            for blk in &self.stages[i] {
                x = blk.forward(g, p, &x, groups, reborrow(rng))?;
            }
            Ok(x)
        };

        let x = self.in_proj.forward(g, p, image)?;
        let s1 = run_stage(g, 0, x, &mut rng)?;
        let x = g.downsample2x(&s1, p.var(self.down[0].weight), Some(p.var(self.down[0].bias)))?;
        let s2 = run_stage(g, 1, x, &mut rng)?;
        let x = g.downsample2x(&s2, p.var(self.down[1].weight), Some(p.var(self.down[1].bias)))?;
        let x = run_stage(g, 2, x, &mut rng)?;

        let x = self.upsample(g, p, 0, &x)?;
        let x = self.fusion[0].forward(g, p, &x, &s2)?;
        let x = run_stage(g, 3, x, &mut rng)?;
        let x = self.upsample(g, p, 1, &x)?;
        let x = self.fusion[1].forward(g, p, &x, &s1)?;
        let x = run_stage(g, 4, x, &mut rng)?;

        let x = self.out_proj.forward(g, p, &x)?;
        Ok(g.add(&x, image)?)
    }

    fn upsample(&self, g: &mut Graph<T>, p: &Bound<T>, k: usize, x: &Var<T>) -> Result<Var<T>> {
        let proj = &self.up[k].proj;
        Ok(g.upsample2x(x, p.var(proj.weight), proj.bias.map(|b| p.var(b)))?)
    }

    /// Reflect-pads bottom and right to the next aligned size, runs the
    /// network and crops back. Output shape equals input shape.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound<T>, image: &Var<T>, rng: Option<&mut dyn RngCore>) -> Result<Var<T>> {
        let s = image.shape();
        let m = self.config.pad_multiple();
        let (ph, pw) = (s.h().next_multiple_of(m) - s.h(), s.w().next_multiple_of(m) - s.w());
        let padded = g.pad_reflect(image, ph, pw);
        let y = self.forward_aligned(g, p, &padded, rng)?;
        if ph == 0 && pw == 0 {
            return Ok(y);
        }
        let y = g.narrow(&y, 2, 0, s.h())?;
        Ok(g.narrow(&y, 3, 0, s.w())?)
    }

    /// Evaluation-mode forward without gradient tracking.
    pub fn infer(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = Graph::constant(image.clone());
        let y = self.forward(&mut g, &p, &x, None)?;
        drop(p);
        Ok(std::rc::Rc::try_unwrap(y.value).unwrap_or_else(|rc| (*rc).clone()))
    }
}

fn pair<X>(v: Vec<X>) -> [X; 2] {
    v.try_into().unwrap_or_else(|_| unreachable!("two resampling levels"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_tables() {
        let m = ModelConfig::preset("M").unwrap();
        assert_eq!(m.depths, [8, 12, 16, 12, 8]);
        assert_eq!(m.dims, [24, 48, 96, 48, 24]);
        assert_eq!((m.mlp_ratio, m.groups), (4, 4));
        assert_eq!(ModelConfig::preset("l").unwrap().depths, [8, 16, 32, 16, 8]);
        assert_eq!(ModelConfig::preset("tiny").unwrap().dims, [8, 16, 32, 16, 8]);
        assert!(ModelConfig::preset("xl").is_err());
        assert_eq!(m.pad_multiple(), 16);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = ModelConfig::tiny();
        c.dims = [8, 16, 32, 16, 16];
        assert!(DehazeSnn::<f32>::from_seed(c, 0).is_err());
        let mut c = ModelConfig::tiny();
        c.depths[2] = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.drop_path_rate = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = DehazeSnn::<f32>::from_seed(ModelConfig::tiny(), 11).unwrap();
        let b = DehazeSnn::<f32>::from_seed(ModelConfig::tiny(), 11).unwrap();
        let c = DehazeSnn::<f32>::from_seed(ModelConfig::tiny(), 12).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn initial_values() {
        let m = DehazeSnn::<f32>::from_seed(ModelConfig::tiny(), 3).unwrap();
        for p in m.params.iter() {
            let d = p.value.data();
            if p.name.ends_with("lif_h.tau") || p.name.ends_with("v_th") || p.name.ends_with("lif_v.tau") {
                assert_eq!(d, &[0.25]);
                assert_eq!(p.group, ParamGroup::Lif);
            } else if p.name.ends_with(".bias") || p.name.ends_with("fc2.weight") && p.name.starts_with("fusion") {
                assert!(d.iter().all(|&v| v == 0.0), "{}", p.name);
            } else if p.name.ends_with(".weight") {
                let fan_in = p.value.shape().c() * p.value.shape().plane();
                let std = if p.name.contains(".dw.") || p.name.contains(".scan_") { 1.0 / (fan_in as f32).sqrt() } else { 0.02 };
                assert!(d.iter().all(|&v| v.abs() <= 2.0 * std + 1e-7), "{}", p.name);
                assert!(d.iter().any(|&v| v != 0.0), "{}", p.name);
            }
        }
    }

    #[test]
    fn shape_round_trip_with_padding() {
        let m = DehazeSnn::<f32>::from_seed(ModelConfig::tiny(), 5).unwrap();
        let x = Tensor::full([1, 3, 20, 36], 0.5).unwrap();
        assert_eq!(m.infer(&x).unwrap().shape().dims(), [1, 3, 20, 36]);
        let x = Tensor::full([2, 3, 16, 16], 0.5).unwrap();
        assert_eq!(m.infer(&x).unwrap().shape().dims(), [2, 3, 16, 16]);
        let gray = Tensor::full([1, 1, 16, 16], 0.5).unwrap();
        assert!(m.infer(&gray).is_err());
    }

    #[test]
    fn zeroed_head_is_identity() {
        let mut m = DehazeSnn::<f32>::from_seed(ModelConfig::tiny(), 6).unwrap();
        let w = m.out_proj.weight;
        m.params.value_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let x = Tensor::from_fn([1, 3, 32, 48], |[_, c, h, w]| ((c * 7 + h * 3 + w) % 11) as f32 / 11.0).unwrap();
        assert_eq!(m.infer(&x).unwrap(), x);
    }
}

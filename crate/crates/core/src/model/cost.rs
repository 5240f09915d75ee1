//! Parameter and multiply-accumulate accounting.

use std::fmt;

use super::{DehazeSnn, ModelConfig, Result, ModelError};
use crate::blocks::SK_REDUCTION;
use crate::olif::BranchMode;
use crate::tensor::Scalar;

/// Printed with every MAC figure.
pub const MAC_CONVENTION: &str = "MACs count dense, depthwise and pointwise convolutions (k*k*Cin*Cout per output pixel, \
fusion perceptrons at 1x1) plus 2 multiplies per LIF element per group step; \
normalization, activations, pooling, comparisons and elementwise adds are excluded";

/// MACs split by operator family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacBreakdown {
    pub conv: u64,
    pub depthwise: u64,
    pub pointwise: u64,
    pub lif: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.conv + self.depthwise + self.pointwise + self.lif
    }
}

/// Dense `k x k` convolution producing `cout x hw_out` values.
pub fn conv_macs(k: u64, cin: u64, cout: u64, hw_out: u64) -> u64 {
    k * k * cin * cout * hw_out
}

pub fn depthwise_macs(k: u64, c: u64, hw: u64) -> u64 {
    k * k * c * hw
}

pub fn pointwise_macs(cin: u64, cout: u64, hw: u64) -> u64 {
    cin * cout * hw
}

/// Analytic MAC count for one image of `height x width` (both multiples of
/// [`ModelConfig::pad_multiple`]).
pub fn count_macs(config: &ModelConfig, height: usize, width: usize) -> Result<MacBreakdown> {
    config.validate()?;
    let m = config.pad_multiple();
    if height == 0 || width == 0 || !height.is_multiple_of(m) || !width.is_multiple_of(m) {
        return Err(ModelError::Config(format!("MAC input {height}x{width} must be a positive multiple of {m}")));
    }
    let hw0 = (height * width) as u64;
    let hw = [hw0, hw0 / 4, hw0 / 16, hw0 / 4, hw0];
    let dims = config.dims.map(|d| d as u64);
    let ratio = config.mlp_ratio as u64;
    let mut b = MacBreakdown::default();

    b.conv += conv_macs(3, 3, dims[0], hw0);
    for stage in 0..5 {
        let c = dims[stage];
        let a = hw[stage];
        let (branch, merge_in) = match config.branch_mode {
            BranchMode::Duplicate => (c, 2 * c),
            BranchMode::Split => (c / 2, c),
        };
        let per_block = MacBreakdown {
            conv: 0,
            depthwise: depthwise_macs(3, c, a),
            pointwise: 2 * pointwise_macs(branch, branch, a)
                + pointwise_macs(merge_in, c, a)
                + 2 * pointwise_macs(c, ratio * c, a),
            lif: 2 * (2 * branch * a),
        };
        let depth = config.depths[stage] as u64;
        b.depthwise += depth * per_block.depthwise;
        b.pointwise += depth * per_block.pointwise;
        b.lif += depth * per_block.lif;
    }
    for k in 0..2 {
        b.conv += conv_macs(3, dims[k], dims[k + 1], hw[k + 1]);
        let c = dims[2 - k];
        b.pointwise += pointwise_macs(c, 2 * c, hw[2 - k]);
        let fused = dims[3 + k];
        let hidden = (fused / SK_REDUCTION as u64).max(4);
        b.pointwise += pointwise_macs(fused, hidden, 1) + pointwise_macs(hidden, 2 * fused, 1);
    }
    b.conv += conv_macs(3, dims[4], 3, hw0);
    Ok(b)
}

/// Parameter and MAC summary of a model at one input size.
#[derive(Clone, Debug)]
pub struct CostReport {
    pub variant: String,
    pub params: usize,
    pub height: usize,
    pub width: usize,
    pub macs: MacBreakdown,
}

impl CostReport {
    pub fn new<T: Scalar>(model: &DehazeSnn<T>, height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            variant: model.config.variant.clone(),
            params: model.count_params(),
            height,
            width,
            macs: count_macs(&model.config, height, width)?,
        })
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = |v: u64| v as f64 / 1e9;
        writeln!(f, "variant      {}", self.variant)?;
        writeln!(f, "params       {} ({:.2}M)", self.params, self.params as f64 / 1e6)?;
        writeln!(f, "input        {}x{}", self.height, self.width)?;
        writeln!(f, "MACs         {} ({:.2}G)", self.macs.total(), g(self.macs.total()))?;
        writeln!(f, "  conv       {:.3}G", g(self.macs.conv))?;
        writeln!(f, "  depthwise  {:.3}G", g(self.macs.depthwise))?;
        writeln!(f, "  pointwise  {:.3}G", g(self.macs.pointwise))?;
        writeln!(f, "  lif        {:.3}G", g(self.macs.lif))?;
        write!(f, "convention   {MAC_CONVENTION}")
    }
}

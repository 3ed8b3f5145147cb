//! Asymmetric multi-scale block: a 1×1 branch and two branches that each sum
//! a dilated 1×k and k×1 convolution, concatenated and fused by a 1×1
//! convolution.

use num_integer::Integer;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, Module, ParamSpec, Session};
use crate::tensor::Element;

pub const DILATION: usize = 2;
pub const ASYMMETRIC_KERNELS: [usize; 2] = [3, 5];

/// A 1×k plus k×1 pair, zero-padded so that spatial extent is preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymmetricPair {
    pub k: usize,
    pub row: Conv2dLayer,
    pub col: Conv2dLayer,
}

impl AsymmetricPair {
    fn new(name: &str, k: usize, cin: usize, cout: usize) -> Self {
        // (k-1)·d/2 keeps a dilated, odd-length kernel centred: (0,2) for
        // 1×3 and (0,4) for 1×5 at dilation 2.
        let pad = (k - 1) * DILATION / 2;
        Self {
            k,
            row: Conv2dLayer::new(format!("{name}.1x{k}"), cin, cout, (1, k))
                .padding((0, pad))
                .dilation((1, DILATION)),
            col: Conv2dLayer::new(format!("{name}.{k}x1"), cin, cout, (k, 1))
                .padding((pad, 0))
                .dilation((DILATION, 1)),
        }
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let a = self.row.forward(s, x)?;
        let b = self.col.forward(s, x)?;
        s.tape.add(a, b)
    }

    fn weight_count(&self) -> u64 {
        (self.row.weight_shape().iter().product::<usize>() + self.col.weight_shape().iter().product::<usize>()) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmmBlock {
    pub in_channels: usize,
    pub branch_width: usize,
    pub out_channels: usize,
    pub point: Conv2dLayer,
    pub pairs: Vec<AsymmetricPair>,
    pub fuse: Conv2dLayer,
}

impl AmmBlock {
    /// Branch width equals `out_channels`.
    pub fn new(name: &str, in_channels: usize, out_channels: usize) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(format!(
                "{name}: channel counts must be positive ({in_channels} -> {out_channels})"
            )));
        }
        let width = out_channels;
        let pairs: Vec<_> = ASYMMETRIC_KERNELS
            .iter()
            .map(|&k| AsymmetricPair::new(&format!("{name}.branch{k}"), k, in_channels, width))
            .collect();
        Ok(Self {
            in_channels,
            branch_width: width,
            out_channels,
            point: Conv2dLayer::new(format!("{name}.branch1"), in_channels, width, (1, 1)),
            fuse: Conv2dLayer::new(
                format!("{name}.fuse"),
                width * (pairs.len() + 1),
                out_channels,
                (1, 1),
            ),
            pairs,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x);
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "amm",
                lhs: shape.to_vec(),
                rhs: vec![shape.first().copied().unwrap_or(0), self.in_channels],
            });
        }
        let mut branches = vec![self.point.forward(s, x)?];
        for pair in &self.pairs {
            branches.push(pair.forward(s, x)?);
        }
        let cat = s.tape.concat(&branches, 1)?;
        self.fuse.forward(s, cat)
    }

    /// Weight counts of the asymmetric branches against square k×k
    /// convolutions of the same width. Biases are excluded on both sides.
    pub fn cost_report(&self) -> CostReport {
        let branches: Vec<BranchCost> = self
            .pairs
            .iter()
            .map(|p| {
                let square = Conv2dLayer::new("square", self.in_channels, self.branch_width, (p.k, p.k))
                    .without_bias()
                    .param_count() as u64;
                BranchCost {
                    k: p.k,
                    params_asymmetric: p.weight_count(),
                    params_square_equivalent: square,
                }
            })
            .collect();
        let params_asymmetric = branches.iter().map(|b| b.params_asymmetric).sum();
        let params_square_equivalent = branches.iter().map(|b| b.params_square_equivalent).sum();
        CostReport {
            branches,
            params_asymmetric,
            params_square_equivalent,
        }
    }
}

impl Module for AmmBlock {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.point.param_specs();
        for p in &self.pairs {
            specs.extend(p.row.param_specs());
            specs.extend(p.col.param_specs());
        }
        specs.extend(self.fuse.param_specs());
        specs
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchCost {
    pub k: usize,
    pub params_asymmetric: u64,
    pub params_square_equivalent: u64,
}

impl BranchCost {
    /// Reduced fraction `asymmetric / square`.
    pub fn ratio(&self) -> (u64, u64) {
        reduce(self.params_asymmetric, self.params_square_equivalent)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub branches: Vec<BranchCost>,
    pub params_asymmetric: u64,
    pub params_square_equivalent: u64,
}

impl CostReport {
    pub fn ratio(&self) -> (u64, u64) {
        reduce(self.params_asymmetric, self.params_square_equivalent)
    }

    pub fn ratio_f64(&self) -> f64 {
        self.params_asymmetric as f64 / self.params_square_equivalent as f64
    }
}

fn reduce(num: u64, den: u64) -> (u64, u64) {
    let g = num.gcd(&den).max(1);
    (num / g, den / g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paddings_follow_dilation() {
        let amm = AmmBlock::new("amm", 4, 6).unwrap();
        assert_eq!(amm.pairs[0].row.geometry.padding, (0, 2));
        assert_eq!(amm.pairs[0].col.geometry.padding, (2, 0));
        assert_eq!(amm.pairs[1].row.geometry.padding, (0, 4));
        assert_eq!(amm.pairs[1].col.geometry.padding, (4, 0));
        assert_eq!(amm.pairs[1].row.geometry.dilation, (1, 2));
        assert_eq!(amm.pairs[1].col.geometry.dilation, (2, 1));
        assert_eq!(amm.fuse.in_channels, 18);
    }

    #[test]
    fn cost_report_examples() {
        let amm = AmmBlock::new("amm", 8, 8).unwrap();
        let r = amm.cost_report();
        assert_eq!(r.branches[0].params_asymmetric, 384);
        assert_eq!(r.branches[0].params_square_equivalent, 576);
        assert_eq!(r.branches[0].ratio(), (2, 3));
        assert_eq!(r.branches[1].params_asymmetric, 640);
        assert_eq!(r.branches[1].params_square_equivalent, 1600);
        assert_eq!(r.branches[1].ratio(), (2, 5));
        assert_eq!(r.params_asymmetric, 1024);
        assert_eq!(r.params_square_equivalent, 2176);
        assert_eq!(r.ratio(), (8, 17));
    }
}

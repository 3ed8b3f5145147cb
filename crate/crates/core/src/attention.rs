//! Regional attention (channel gate followed by spatial gate) for shallow
//! features, and semantic attention (spatial and channel self-attention,
//! summed and fused) for the deepest encoder map.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, LinearLayer, Module, ParamSpec, Session};
use crate::tensor::Element;

/// Default channel reduction inside the regional attention MLP.
pub const DEFAULT_RAM_REDUCTION: usize = 4;
/// Default query/key width divisor for spatial self-attention.
pub const DEFAULT_SSA_REDUCTION: usize = 8;

fn dims4(shape: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match shape {
        &[n, c, h, w] if h > 0 && w > 0 => Ok([n, c, h, w]),
        _ => Err(Error::invalid(
            op,
            format!("expects N×C×H×W with H,W >= 1, got {shape:?}"),
        )),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RamBlock {
    pub channels: usize,
    pub reduction: usize,
    /// Shared by the average- and max-pooled paths.
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
    pub spatial: Conv2dLayer,
}

/// Output of a regional attention block together with its two gates.
#[derive(Debug, Clone, Copy)]
pub struct RamOutput {
    pub output: Var,
    /// N×C×1×1, strictly inside (0, 1).
    pub channel_gate: Var,
    /// Input after the channel gate.
    pub channel_refined: Var,
    /// N×1×H×W, strictly inside (0, 1).
    pub spatial_gate: Var,
}

impl RamBlock {
    pub fn new(name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(Error::Config(format!(
                "{name}: channels ({channels}) and reduction ({reduction}) must be positive"
            )));
        }
        let hidden = (channels / reduction).max(1);
        Ok(Self {
            channels,
            reduction,
            fc1: LinearLayer::new(format!("{name}.fc1"), channels, hidden),
            fc2: LinearLayer::new(format!("{name}.fc2"), hidden, channels),
            spatial: Conv2dLayer::new(format!("{name}.spatial"), 2, 1, (3, 3)).padding((1, 1)),
        })
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_features
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_gates(s, x)?.output)
    }

    pub fn forward_with_gates<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<RamOutput> {
        let [n, c, _, _] = dims4(s.tape.shape(x), "ram")?;
        if c != self.channels {
            return Err(Error::ShapeMismatch {
                op: "ram",
                lhs: s.tape.shape(x).to_vec(),
                rhs: vec![n, self.channels],
            });
        }

        // Channel gate from globally pooled descriptors.
        let avg = s.tape.mean(x, &[2, 3])?;
        let max = s.tape.max(x, &[2, 3])?;
        let avg = s.tape.reshape(avg, &[n, c])?;
        let max = s.tape.reshape(max, &[n, c])?;
        let f_avg = self.mlp(s, avg)?;
        let f_max = self.mlp(s, max)?;
        let logits = s.tape.add(f_avg, f_max)?;
        let gate = s.tape.sigmoid(logits)?;
        let channel_gate = s.tape.reshape(gate, &[n, c, 1, 1])?;
        let channel_refined = s.tape.mul(x, channel_gate)?;

        // Spatial gate from channel-pooled maps of the refined features.
        let c_avg = s.tape.mean(channel_refined, &[1])?;
        let c_max = s.tape.max(channel_refined, &[1])?;
        let pooled = s.tape.concat(&[c_avg, c_max], 1)?;
        let logits = self.spatial.forward(s, pooled)?;
        let spatial_gate = s.tape.sigmoid(logits)?;
        let output = s.tape.mul(channel_refined, spatial_gate)?;
        Ok(RamOutput {
            output,
            channel_gate,
            channel_refined,
            spatial_gate,
        })
    }

    fn mlp<T: Element>(&self, s: &mut Session<'_, T>, v: Var) -> Result<Var> {
        let h = self.fc1.forward(s, v)?;
        let h = s.tape.relu(h)?;
        self.fc2.forward(s, h)
    }
}

impl Module for RamBlock {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.fc1.param_specs();
        specs.extend(self.fc2.param_specs());
        specs.extend(self.spatial.param_specs());
        specs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamBlock {
    pub channels: usize,
    pub query: Conv2dLayer,
    pub key: Conv2dLayer,
    pub value: Conv2dLayer,
    pub fusion: Conv2dLayer,
}

#[derive(Debug, Clone, Copy)]
pub struct SelfAttentionOutput {
    pub output: Var,
    /// Spatial: N×HW×HW whose columns sum to one (each output position mixes
    /// source positions). Channel: N×C×C whose rows sum to one.
    pub attention: Var,
}

impl SamBlock {
    /// `ssa_reduction` divides the channel count to get the query/key width,
    /// floored at one.
    pub fn new(name: &str, channels: usize, ssa_reduction: usize) -> Result<Self> {
        if channels == 0 || ssa_reduction == 0 {
            return Err(Error::Config(format!(
                "{name}: channels ({channels}) and ssa reduction ({ssa_reduction}) must be positive"
            )));
        }
        let qk = (channels / ssa_reduction).max(1);
        Ok(Self {
            channels,
            query: Conv2dLayer::new(format!("{name}.query"), channels, qk, (1, 1)),
            key: Conv2dLayer::new(format!("{name}.key"), channels, qk, (1, 1)),
            value: Conv2dLayer::new(format!("{name}.value"), channels, channels, (1, 1)),
            fusion: Conv2dLayer::new(format!("{name}.fusion"), channels, channels, (1, 1)),
        })
    }

    /// Spatial self-attention with a residual connection.
    pub fn ssa<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<SelfAttentionOutput> {
        let [n, c, h, w] = dims4(s.tape.shape(x), "ssa")?;
        let hw = h * w;
        let qk = self.query.out_channels;
        let q = self.query.forward(s, x)?;
        let q = s.tape.reshape(q, &[n, qk, hw])?;
        let queries = s.tape.transpose2d(q)?; // N×HW×C1
        let k = self.key.forward(s, x)?;
        let keys = s.tape.reshape(k, &[n, qk, hw])?; // N×C1×HW
        let energy = s.tape.matmul(queries, keys)?; // [i, j] = q_i · k_j
        let attention = s.tape.softmax(energy, 1)?; // normalise over sources i
        let v = self.value.forward(s, x)?;
        let values = s.tape.reshape(v, &[n, c, hw])?;
        let mixed = s.tape.matmul(values, attention)?;
        let mixed = s.tape.reshape(mixed, &[n, c, h, w])?;
        let output = s.tape.add(x, mixed)?;
        Ok(SelfAttentionOutput { output, attention })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let spatial = self.ssa(s, x)?.output;
        let channel = csa(s, x)?.output;
        let both = s.tape.add(spatial, channel)?;
        self.fusion.forward(s, both)
    }
}

impl Module for SamBlock {
    fn param_specs(&self) -> Vec<ParamSpec> {
        [&self.query, &self.key, &self.value, &self.fusion]
            .into_iter()
            .flat_map(|l| l.param_specs())
            .collect()
    }
}

/// Channel self-attention with a residual connection. Parameter-free.
pub fn csa<T: Element>(s: &mut Session<'_, T>, x: Var) -> Result<SelfAttentionOutput> {
    let [n, c, h, w] = dims4(s.tape.shape(x), "csa")?;
    let flat = s.tape.reshape(x, &[n, c, h * w])?;
    let flat_t = s.tape.transpose2d(flat)?;
    let energy = s.tape.matmul(flat, flat_t)?; // N×C×C
    let attention = s.tape.softmax(energy, 2)?;
    let mixed = s.tape.matmul(attention, flat)?;
    let mixed = s.tape.reshape(mixed, &[n, c, h, w])?;
    let output = s.tape.add(x, mixed)?;
    Ok(SelfAttentionOutput { output, attention })
}

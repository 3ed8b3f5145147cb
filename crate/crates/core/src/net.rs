//! The full encoder-decoder counting network.
//!
//! Encoder: a VGG16-style stack (2, 2, 3, 3, 3 convolutions per stage with
//! 2× max-pooling between stages). Dense paths feed regional-attention
//! refined Conv2_2 and Conv3_3 features, max-pooled to the right
//! resolution, into the inputs of later stages.
//!
//! Decoder: the deepest map goes through regional then semantic attention
//! and is upsampled. Each shallower level fuses its regional-attention skip
//! feature with the upsampled decoder feature, runs the asymmetric
//! multi-scale block, concatenates with the decoder feature, fuses with a
//! 1×1 convolution and upsamples. A 1×1 head with ReLU yields the density
//! map at input resolution.

use crate::amm::AmmBlock;
use crate::attention::{RamBlock, SamBlock, DEFAULT_RAM_REDUCTION, DEFAULT_SSA_REDUCTION};
use crate::autograd::{PoolKind, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, Module, ParamSet, ParamSpec, Session};
use crate::tensor::{Element, Tensor};

/// Convolutions per encoder stage.
pub const STAGE_DEPTHS: [usize; 5] = [2, 2, 3, 3, 3];
/// Stage width multipliers of the base width.
pub const STAGE_MULTIPLIERS: [usize; 5] = [1, 2, 4, 8, 8];
/// Input extents must be divisible by this (four 2× poolings).
pub const SPATIAL_DIVISOR: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Width of the first stage; 64 reproduces VGG16.
    pub base_width: usize,
    pub input_channels: usize,
    pub ram_reduction: usize,
    pub ssa_reduction: usize,
    /// The head predicts density multiplied by this; training targets are
    /// scaled to match.
    pub density_scale: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_width: 8,
            input_channels: 1,
            ram_reduction: DEFAULT_RAM_REDUCTION,
            ssa_reduction: DEFAULT_SSA_REDUCTION,
            density_scale: 2000.0,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn widths(&self) -> [usize; 5] {
        STAGE_MULTIPLIERS.map(|m| m * self.base_width)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive")));
        if self.base_width == 0 {
            return bad("base_width");
        }
        if self.input_channels == 0 {
            return bad("input_channels");
        }
        if self.ram_reduction == 0 {
            return bad("ram_reduction");
        }
        if self.ssa_reduction == 0 {
            return bad("ssa_reduction");
        }
        if !(self.density_scale.is_finite() && self.density_scale > 0.0) {
            return bad("density_scale");
        }
        Ok(())
    }

    /// Flat `key=value` pairs in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("base_width".into(), self.base_width.to_string()),
            ("input_channels".into(), self.input_channels.to_string()),
            ("ram_reduction".into(), self.ram_reduction.to_string()),
            ("ssa_reduction".into(), self.ssa_reduction.to_string()),
            ("density_scale".into(), self.density_scale.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    /// Apply one `key=value` setting. Returns `Ok(false)` for keys this
    /// config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "base_width" => self.base_width = parse(key, value)?,
            "input_channels" => self.input_channels = parse(key, value)?,
            "ram_reduction" => self.ram_reduction = parse(key, value)?,
            "ssa_reduction" => self.ssa_reduction = parse(key, value)?,
            "density_scale" => self.density_scale = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Layer structure derived from a [`NetConfig`]; holds no weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Saccn {
    pub config: NetConfig,
    pub encoder: Vec<Vec<Conv2dLayer>>,
    pub dense_ram2: RamBlock,
    pub dense_ram3: RamBlock,
    pub dense_proj_2_4: Conv2dLayer,
    pub dense_proj_2_5: Conv2dLayer,
    pub dense_proj_3_5: Conv2dLayer,
    /// Skip-path attention for levels 2, 3, 4, 5.
    pub skip_ram: Vec<RamBlock>,
    pub sam: SamBlock,
    /// Decoder levels 4, 3, 2.
    pub decoder: Vec<DecoderLevel>,
    pub head: Conv2dLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLevel {
    pub level: usize,
    /// Maps the upsampled deeper decoder feature onto this level's width
    /// when they differ.
    pub skip_proj: Option<Conv2dLayer>,
    pub amm: AmmBlock,
    pub fuse: Conv2dLayer,
}

/// Encoder feature maps handed to the decoder.
#[derive(Debug, Clone, Copy)]
pub struct EncoderMaps {
    pub conv2_2: Var,
    pub conv3_3: Var,
    pub conv4_3: Var,
    pub conv5_3: Var,
}

fn conv1x1(name: &str, cin: usize, cout: usize) -> Conv2dLayer {
    Conv2dLayer::new(name, cin, cout, (1, 1))
}

impl Saccn {
    pub fn new(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let mut encoder = Vec::new();
        let mut cin = config.input_channels;
        for (stage, (&depth, &width)) in STAGE_DEPTHS.iter().zip(&widths).enumerate() {
            let layers = (0..depth)
                .map(|i| {
                    let layer = Conv2dLayer::new(format!("enc.conv{}_{}", stage + 1, i + 1), cin, width, (3, 3))
                        .padding((1, 1));
                    cin = width;
                    layer
                })
                .collect();
            encoder.push(layers);
        }
        let [_, w2, w3, w4, w5] = widths;
        let skip_ram = [2, 3, 4, 5]
            .into_iter()
            .map(|k| RamBlock::new(&format!("skip{k}.ram"), widths[k - 1], config.ram_reduction))
            .collect::<Result<Vec<_>>>()?;
        let decoder = [4usize, 3, 2]
            .into_iter()
            .map(|k| {
                let width = widths[k - 1];
                let deeper = widths[k];
                Ok(DecoderLevel {
                    level: k,
                    skip_proj: (deeper != width).then(|| conv1x1(&format!("dec{k}.skip_proj"), deeper, width)),
                    amm: AmmBlock::new(&format!("dec{k}.amm"), width, width)?,
                    fuse: conv1x1(&format!("dec{k}.fuse"), width + deeper, width),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            encoder,
            dense_ram2: RamBlock::new("dense2.ram", w2, config.ram_reduction)?,
            dense_ram3: RamBlock::new("dense3.ram", w3, config.ram_reduction)?,
            // Dense paths land on the inputs of stages 4 and 5, whose widths
            // are those of stages 3 and 4.
            dense_proj_2_4: conv1x1("dense2.proj4", w2, w3),
            dense_proj_2_5: conv1x1("dense2.proj5", w2, w4),
            dense_proj_3_5: conv1x1("dense3.proj5", w3, w4),
            skip_ram,
            sam: SamBlock::new("sam", w5, config.ssa_reduction)?,
            decoder,
            head: conv1x1("head", widths[1], 1),
        })
    }

    fn stage<T: Element>(&self, s: &mut Session<'_, T>, index: usize, mut x: Var) -> Result<Var> {
        for layer in &self.encoder[index] {
            let y = layer.forward(s, x)?;
            x = s.tape.relu(y)?;
        }
        Ok(x)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = matches!(shape, &[_, c, h, w]
            if c == self.config.input_channels
                && h > 0 && w > 0
                && h % SPATIAL_DIVISOR == 0
                && w % SPATIAL_DIVISOR == 0);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "saccn",
                format!(
                    "input must be N×{}×H×W with H, W positive multiples of {SPATIAL_DIVISOR}, got {shape:?}",
                    self.config.input_channels
                ),
            ))
        }
    }

    pub fn encoder_forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<EncoderMaps> {
        self.check_input(s.tape.shape(x))?;
        let down = |s: &mut Session<'_, T>, v: Var, m: usize| s.tape.pool2d(PoolKind::Max, v, (m, m), (m, m));

        let c1 = self.stage(s, 0, x)?;
        let i2 = down(s, c1, 2)?;
        let c2 = self.stage(s, 1, i2)?;

        let i3 = down(s, c2, 2)?;
        let c3 = self.stage(s, 2, i3)?;

        let r2 = self.dense_ram2.forward(s, c2)?;
        let r2_4 = down(s, r2, 4)?;
        let r2_4 = self.dense_proj_2_4.forward(s, r2_4)?;
        let c3_d = down(s, c3, 2)?;
        let i4 = s.tape.add(r2_4, c3_d)?;
        let c4 = self.stage(s, 3, i4)?;

        let r2_8 = down(s, r2, 8)?;
        let r2_8 = self.dense_proj_2_5.forward(s, r2_8)?;
        let r3 = self.dense_ram3.forward(s, c3)?;
        let r3_4 = down(s, r3, 4)?;
        let r3_4 = self.dense_proj_3_5.forward(s, r3_4)?;
        let c4_d = down(s, c4, 2)?;
        let i5 = s.tape.add(r2_8, r3_4)?;
        let i5 = s.tape.add(i5, c4_d)?;
        let c5 = self.stage(s, 4, i5)?;

        Ok(EncoderMaps {
            conv2_2: c2,
            conv3_3: c3,
            conv4_3: c4,
            conv5_3: c5,
        })
    }

    /// Scaled density map: `relu(head(D2))`, equal to density times
    /// `density_scale`.
    pub fn decoder_forward<T: Element>(&self, s: &mut Session<'_, T>, maps: &EncoderMaps) -> Result<Var> {
        let sources = [maps.conv2_2, maps.conv3_3, maps.conv4_3, maps.conv5_3];
        let e5 = self.skip_ram[3].forward(s, maps.conv5_3)?;
        let attended = self.sam.forward(s, e5)?;
        let mut deeper = s.tape.upsample2x(attended)?;
        for level in &self.decoder {
            let k = level.level;
            let skip = self.skip_ram[k - 2].forward(s, sources[k - 2])?;
            let carried = match &level.skip_proj {
                Some(proj) => proj.forward(s, deeper)?,
                None => deeper,
            };
            if s.tape.shape(skip) != s.tape.shape(carried) {
                return Err(Error::ShapeMismatch {
                    op: "decoder skip",
                    lhs: s.tape.shape(skip).to_vec(),
                    rhs: s.tape.shape(carried).to_vec(),
                });
            }
            let fused = s.tape.add(skip, carried)?;
            let multi = level.amm.forward(s, fused)?;
            let cat = s.tape.concat(&[multi, deeper], 1)?;
            let d = level.fuse.forward(s, cat)?;
            deeper = s.tape.upsample2x(d)?;
        }
        let raw = self.head.forward(s, deeper)?;
        s.tape.relu(raw)
    }

    /// Density times `density_scale`, the quantity the loss is taken on.
    pub fn forward_scaled<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let maps = self.encoder_forward(s, x)?;
        self.decoder_forward(s, &maps)
    }

    /// Density map `N×1×H×W` for an image batch `N×C×H×W`.
    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let scaled = self.forward_scaled(s, x)?;
        s.tape.scale(scaled, T::from_f64(1.0 / self.config.density_scale))
    }
}

impl Module for Saccn {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for stage in &self.encoder {
            for layer in stage {
                specs.extend(layer.param_specs());
            }
        }
        specs.extend(self.dense_ram2.param_specs());
        specs.extend(self.dense_ram3.param_specs());
        for proj in [&self.dense_proj_2_4, &self.dense_proj_2_5, &self.dense_proj_3_5] {
            specs.extend(proj.param_specs());
        }
        for ram in &self.skip_ram {
            specs.extend(ram.param_specs());
        }
        specs.extend(self.sam.param_specs());
        for level in &self.decoder {
            if let Some(p) = &level.skip_proj {
                specs.extend(p.param_specs());
            }
            specs.extend(level.amm.param_specs());
            specs.extend(level.fuse.param_specs());
        }
        specs.extend(self.head.param_specs());
        specs
    }
}

/// Architecture plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SaccnModel<T> {
    pub net: Saccn,
    pub params: ParamSet<T>,
}

impl<T: Element> SaccnModel<T> {
    /// Build and initialise deterministically from `config.seed`.
    pub fn build(config: &NetConfig) -> Result<Self> {
        let net = Saccn::new(config)?;
        let mut params = ParamSet::new();
        net.init_params(config.seed, &mut params);
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.net.config
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Inference on an image batch; returns the `N×1×H×W` density.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::new(&self.params, false);
        let x = s.input(images.clone())?;
        let y = self.net.forward(&mut s, x)?;
        Ok(s.value(y).clone())
    }

    pub fn cast<U: Element>(&self) -> SaccnModel<U> {
        SaccnModel {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    /// Check that `params` holds exactly the tensors the architecture needs.
    pub fn from_parts(net: Saccn, params: ParamSet<T>) -> Result<Self> {
        let specs = net.param_specs();
        for spec in &specs {
            let t = params
                .get(&spec.name)
                .ok_or_else(|| Error::MissingParam(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::TensorShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if params.len() != specs.len() {
            let extra = params
                .names()
                .find(|n| !specs.iter().any(|s| &s.name == *n))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self { net, params })
    }
}

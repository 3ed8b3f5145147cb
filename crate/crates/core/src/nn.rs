//! Layers on top of the tape: parameter storage, convolution, fully
//! connected layers and deterministic initialisation.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::autograd::{ConvGeometry, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{numel, Element, Tensor};

/// Named learnable tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// One forward pass: a fresh tape plus the parameters it reads. Parameters
/// are placed on the tape the first time a layer asks for them, so a tensor
/// shared by two call sites is a single leaf.
pub struct Session<'p, T> {
    pub tape: Tape<T>,
    params: &'p ParamSet<T>,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'p, T: Element> Session<'p, T> {
    /// `trainable` controls whether bound parameters record gradients.
    pub fn new(params: &'p ParamSet<T>, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            trainable,
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self
            .params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?
            .clone();
        let v = self.tape.leaf(value, self.trainable)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Substitute an existing tape variable for a named parameter.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.tape.constant(value)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        self.tape.value(var)
    }

    /// Run backward from `loss` and collect gradients for every parameter
    /// this session bound.
    pub fn backward(&mut self, loss: Var) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut grads: Gradients<T> = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on ±sqrt(6 / fan_in).
    HeUniform { fan_in: usize },
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Anything that owns learnable tensors.
pub trait Module {
    fn param_specs(&self) -> Vec<ParamSpec>;

    fn param_count(&self) -> usize {
        self.param_specs().iter().map(|p| numel(&p.shape)).sum()
    }

    /// Initialise every tensor from `(seed, tensor name)`.
    fn init_params<T: Element>(&self, seed: u64, params: &mut ParamSet<T>) {
        for spec in self.param_specs() {
            params.insert(spec.name.clone(), init_tensor(seed, &spec));
        }
    }
}

pub fn init_tensor<T: Element>(seed: u64, spec: &ParamSpec) -> Tensor<T> {
    match spec.init {
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::HeUniform { fan_in } => {
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = rng::stream(seed, &spec.name, 0);
            let data = (0..numel(&spec.shape))
                .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                .collect();
            Tensor::from_vec(&spec.shape, data).expect("spec shape")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub geometry: ConvGeometry,
    pub bias: bool,
}

impl Conv2dLayer {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            geometry: ConvGeometry::default(),
            bias: true,
        }
    }

    pub fn padding(mut self, padding: (usize, usize)) -> Self {
        self.geometry.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: (usize, usize)) -> Self {
        self.geometry.dilation = dilation;
        self
    }

    pub fn stride(mut self, stride: (usize, usize)) -> Self {
        self.geometry.stride = stride;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    pub fn output_extent(&self, input: (usize, usize)) -> Option<(usize, usize)> {
        self.geometry.output_extent(input, self.kernel)
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(&self.weight_name())?;
        let b = if self.bias {
            Some(s.param(&self.bias_name())?)
        } else {
            None
        };
        s.tape.conv2d(x, w, b, self.geometry)
    }
}

impl Module for Conv2dLayer {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = vec![ParamSpec {
            name: self.weight_name(),
            shape: self.weight_shape().to_vec(),
            init: Init::HeUniform {
                fan_in: self.in_channels * self.kernel.0 * self.kernel.1,
            },
        }];
        if self.bias {
            specs.push(ParamSpec {
                name: self.bias_name(),
                shape: vec![self.out_channels],
                init: Init::Zeros,
            });
        }
        specs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl LinearLayer {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Self {
            name: name.into(),
            in_features,
            out_features,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// `x · Wᵀ + b` for `x: N×in`.
    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_features {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: shape.to_vec(),
                rhs: vec![self.out_features, self.in_features],
            });
        }
        let w = s.param(&self.weight_name())?;
        let b = s.param(&self.bias_name())?;
        let wt = s.tape.transpose2d(w)?;
        let y = s.tape.matmul(x, wt)?;
        s.tape.add(y, b)
    }
}

impl Module for LinearLayer {
    fn param_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: self.weight_name(),
                shape: vec![self.out_features, self.in_features],
                init: Init::HeUniform {
                    fan_in: self.in_features,
                },
            },
            ParamSpec {
                name: self.bias_name(),
                shape: vec![self.out_features],
                init: Init::Zeros,
            },
        ]
    }
}

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{Conv, Dense};
use super::scalar::Scalar;
use super::NetError;
use crate::seeding::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    pub n_orb: usize,
    pub n_cab: usize,
    /// Channel reduction of the attention bottleneck.
    pub reduction: usize,
    pub nle_hidden: usize,
    pub kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            n_orb: 2,
            n_cab: 2,
            reduction: 4,
            nle_hidden: 32,
            kernel: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let c = self;
        if c.channels == 0 || c.n_orb == 0 || c.n_cab == 0 || c.reduction == 0 || c.nle_hidden == 0
        {
            return Err(NetError::Config(
                "all block counts and widths must be >= 1".into(),
            ));
        }
        if c.channels < c.reduction || c.channels % c.reduction != 0 {
            return Err(NetError::Config(format!(
                "channels {} must be a multiple of reduction {}",
                c.channels, c.reduction
            )));
        }
        if c.kernel % 2 == 0 {
            return Err(NetError::Config("kernel must be odd".into()));
        }
        Ok(())
    }

    pub fn squeezed(&self) -> usize {
        self.channels / self.reduction
    }
}

/// Channel attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct Cab<T> {
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
    pub reduce: Dense<T>,
    pub expand: Dense<T>,
}

/// Original-resolution block: a chain of CABs, a tail conv and a skip connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Orb<T> {
    pub cabs: Vec<Cab<T>>,
    pub tail: Conv<T>,
}

/// Noise-level embedding: scalar → hidden → `[scale | shift]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Nle<T> {
    pub affine1: Dense<T>,
    pub affine2: Dense<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub head: Conv<T>,
    pub orbs: Vec<Orb<T>>,
    pub tail: Conv<T>,
    pub nle: Nle<T>,
}

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameters of the right shapes (also used as gradient accumulators).
    pub fn zeros(config: ModelConfig) -> Result<Self, NetError> {
        config.validate()?;
        let (c, k) = (config.channels, config.kernel);
        let cab = || Cab {
            conv1: Conv::zeros(c, c, k),
            conv2: Conv::zeros(c, c, k),
            reduce: Dense::zeros(c, config.squeezed()),
            expand: Dense::zeros(config.squeezed(), c),
        };
        Ok(Self {
            config,
            head: Conv::zeros(1, c, k),
            orbs: (0..config.n_orb)
                .map(|_| Orb {
                    cabs: (0..config.n_cab).map(|_| cab()).collect(),
                    tail: Conv::zeros(c, c, k),
                })
                .collect(),
            tail: Conv::zeros(c, 1, k),
            nle: Nle {
                affine1: Dense::zeros(1, config.nle_hidden),
                affine2: Dense::zeros(config.nle_hidden, 2 * c),
            },
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("config already validated")
    }

    /// Tensor names and shapes in canonical order (matches [`Self::tensors`]).
    pub fn layout(&self) -> Vec<TensorInfo> {
        let conv = |name: String, cv: &Conv<T>| {
            let k = cv.k;
            [
                TensorInfo {
                    name: format!("{name}.weight"),
                    shape: vec![cv.cout, cv.cin, k, k, k],
                },
                TensorInfo {
                    name: format!("{name}.bias"),
                    shape: vec![cv.cout],
                },
            ]
        };
        let dense = |name: String, d: &Dense<T>| {
            [
                TensorInfo {
                    name: format!("{name}.weight"),
                    shape: vec![d.out, d.inp],
                },
                TensorInfo {
                    name: format!("{name}.bias"),
                    shape: vec![d.out],
                },
            ]
        };
        let mut out = Vec::new();
        out.extend(conv("head".into(), &self.head));
        for (i, orb) in self.orbs.iter().enumerate() {
            for (j, cab) in orb.cabs.iter().enumerate() {
                let p = format!("orb{i}.cab{j}");
                out.extend(conv(format!("{p}.conv1"), &cab.conv1));
                out.extend(conv(format!("{p}.conv2"), &cab.conv2));
                out.extend(dense(format!("{p}.attn_reduce"), &cab.reduce));
                out.extend(dense(format!("{p}.attn_expand"), &cab.expand));
            }
            out.extend(conv(format!("orb{i}.tail"), &orb.tail));
        }
        out.extend(conv("tail".into(), &self.tail));
        out.extend(dense("nle.affine1".into(), &self.nle.affine1));
        out.extend(dense("nle.affine2".into(), &self.nle.affine2));
        out
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![&self.head.weight, &self.head.bias];
        for orb in &self.orbs {
            for cab in &orb.cabs {
                out.extend([
                    &cab.conv1.weight[..],
                    &cab.conv1.bias,
                    &cab.conv2.weight,
                    &cab.conv2.bias,
                    &cab.reduce.weight,
                    &cab.reduce.bias,
                    &cab.expand.weight,
                    &cab.expand.bias,
                ]);
            }
            out.extend([&orb.tail.weight[..], &orb.tail.bias]);
        }
        out.extend([
            &self.tail.weight[..],
            &self.tail.bias,
            &self.nle.affine1.weight,
            &self.nle.affine1.bias,
            &self.nle.affine2.weight,
            &self.nle.affine2.bias,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = vec![&mut self.head.weight, &mut self.head.bias];
        for orb in &mut self.orbs {
            for cab in &mut orb.cabs {
                out.extend([
                    &mut cab.conv1.weight,
                    &mut cab.conv1.bias,
                    &mut cab.conv2.weight,
                    &mut cab.conv2.bias,
                    &mut cab.reduce.weight,
                    &mut cab.reduce.bias,
                    &mut cab.expand.weight,
                    &mut cab.expand.bias,
                ]);
            }
            out.extend([&mut orb.tail.weight, &mut orb.tail.bias]);
        }
        out.extend([
            &mut self.tail.weight,
            &mut self.tail.bias,
            &mut self.nle.affine1.weight,
            &mut self.nle.affine1.bias,
            &mut self.nle.affine2.weight,
            &mut self.nle.affine2.bias,
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Concatenation of all tensors in canonical order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors().concat()
    }

    pub fn load_flat(&mut self, flat: &[T]) -> Result<(), NetError> {
        if flat.len() != self.num_params() {
            return Err(NetError::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(self.config).expect("config already validated");
        let flat: Vec<U> = self.flatten().into_iter().map(|v| U::of(v.f64())).collect();
        out.load_flat(&flat).expect("same layout");
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += other` elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = *x * s;
            }
        }
    }

    /// Sets the embedding output layer to the identity modulation (scale 1, shift 0).
    pub fn reset_nle_identity(&mut self) {
        let c = self.config.channels;
        let a2 = &mut self.nle.affine2;
        a2.weight.fill(T::zero());
        for (i, b) in a2.bias.iter_mut().enumerate() {
            *b = if i < c { T::one() } else { T::zero() };
        }
    }
}

/// He-normal convolution and attention weights (variance `2 / fan_in`), zero
/// biases, a zero global tail conv, and an embedding whose output layer starts
/// at the identity modulation.
pub fn init_params<T: Scalar>(config: ModelConfig, seed: u64) -> Result<ModelParams<T>, NetError> {
    let mut p = ModelParams::<T>::zeros(config)?;
    let mut r = rng(seed);
    let mut fill = |w: &mut Vec<T>, fan_in: usize| {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        for x in w.iter_mut() {
            *x = T::of(normal.sample(&mut r));
        }
    };
    let fan = p.head.fan_in();
    fill(&mut p.head.weight, fan);
    for orb in &mut p.orbs {
        for cab in &mut orb.cabs {
            let f1 = cab.conv1.fan_in();
            fill(&mut cab.conv1.weight, f1);
            let f2 = cab.conv2.fan_in();
            fill(&mut cab.conv2.weight, f2);
            let fr = cab.reduce.inp;
            fill(&mut cab.reduce.weight, fr);
            let fe = cab.expand.inp;
            fill(&mut cab.expand.weight, fe);
        }
        let ft = orb.tail.fan_in();
        fill(&mut orb.tail.weight, ft);
    }
    // the global tail stays zero so the untrained network is the identity
    fill(&mut p.nle.affine1.weight, 1);
    p.reset_nle_identity();
    Ok(p)
}

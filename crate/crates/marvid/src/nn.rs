//! Layers shared by the planner and the generator: linear maps, norms and
//! the SwiGLU MLP, plus deterministic parameter initialization and a named
//! parameter registry used by the optimizer and the checkpoint format.

use crate::error::Result;
use crate::rng::{Rng, StreamId};
use crate::tensor::{Scalar, Tensor};

/// Named handle to a trainable tensor. Cloning aliases the same storage, so
/// the optimizer and the model see the same values.
#[derive(Clone)]
pub struct NamedParam<S: Scalar = f32> {
    pub name: String,
    pub tensor: Tensor<S>,
}

/// Deterministic initializer: each parameter draws from its own RNG stream,
/// so adding or reordering layers does not shift other layers' init values
/// as long as their creation index stays the same.
pub struct ParamFactory {
    seed: u64,
    counter: u64,
}

impl ParamFactory {
    pub fn new(seed: u64) -> Self {
        ParamFactory { seed, counter: 0 }
    }

    fn next_rng(&mut self) -> Rng {
        let r = Rng::new(self.seed, StreamId::Init(self.counter));
        self.counter += 1;
        r
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal<S: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<S> {
        let mut rng = self.next_rng();
        let n: usize = shape.iter().product();
        let data: Vec<S> = (0..n).map(|_| S::from_f64(rng.gaussian() * std)).collect();
        Tensor::param(shape, data).expect("shape/len consistent by construction")
    }

    pub fn zeros<S: Scalar>(&mut self, shape: &[usize]) -> Tensor<S> {
        self.counter += 1; // keep stream numbering stable across init kinds
        let n: usize = shape.iter().product();
        Tensor::param(shape, vec![S::zero(); n]).expect("shape/len consistent")
    }

    pub fn ones<S: Scalar>(&mut self, shape: &[usize]) -> Tensor<S> {
        self.counter += 1;
        let n: usize = shape.iter().product();
        Tensor::param(shape, vec![S::one(); n]).expect("shape/len consistent")
    }
}

/// Dense layer y = x W + b with W stored [in, out].
pub struct Linear<S: Scalar = f32> {
    pub w: Tensor<S>,
    pub b: Option<Tensor<S>>,
}

impl<S: Scalar> Linear<S> {
    /// Fan-in scaled Gaussian init.
    pub fn new(f: &mut ParamFactory, d_in: usize, d_out: usize, bias: bool) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        Linear {
            w: f.normal(&[d_in, d_out], std),
            b: bias.then(|| f.zeros(&[d_out])),
        }
    }

    /// Zero-initialized projection: the layer starts as the zero map, which
    /// makes the enclosing residual block an identity at initialization.
    pub fn new_zeroed(f: &mut ParamFactory, d_in: usize, d_out: usize, bias: bool) -> Self {
        Linear {
            w: f.zeros(&[d_in, d_out]),
            b: bias.then(|| f.zeros(&[d_out])),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let y = x.matmul(&self.w)?;
        match &self.b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        out.push(NamedParam {
            name: format!("{prefix}.w"),
            tensor: self.w.clone(),
        });
        if let Some(b) = &self.b {
            out.push(NamedParam {
                name: format!("{prefix}.b"),
                tensor: b.clone(),
            });
        }
    }
}

/// RMS norm with learned gain.
pub struct RmsNorm<S: Scalar = f32> {
    pub weight: Tensor<S>,
    pub eps: S,
}

impl<S: Scalar> RmsNorm<S> {
    pub fn new(f: &mut ParamFactory, d: usize, eps: f64) -> Self {
        RmsNorm {
            weight: f.ones(&[d]),
            eps: S::from_f64(eps),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.rms_norm(&self.weight, self.eps)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        out.push(NamedParam {
            name: format!("{prefix}.weight"),
            tensor: self.weight.clone(),
        });
    }
}

/// Layer norm with learned gain and bias.
pub struct LayerNorm<S: Scalar = f32> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub eps: S,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(f: &mut ParamFactory, d: usize, eps: f64) -> Self {
        LayerNorm {
            weight: f.ones(&[d]),
            bias: f.zeros(&[d]),
            eps: S::from_f64(eps),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.layer_norm(&self.weight, &self.bias, self.eps)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        out.push(NamedParam {
            name: format!("{prefix}.weight"),
            tensor: self.weight.clone(),
        });
        out.push(NamedParam {
            name: format!("{prefix}.bias"),
            tensor: self.bias.clone(),
        });
    }
}

/// Normalization without learned affine, used inside adaptive modulation
/// where shift and scale come from conditioning instead.
pub fn plain_layer_norm<S: Scalar>(x: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
    let d = *x.shape().last().unwrap();
    let w = Tensor::full(&[d], S::one());
    let b = Tensor::zeros(&[d]);
    x.layer_norm(&w, &b, eps)
}

/// SwiGLU feed-forward: (silu(x W_g) * x W_u) W_d.
pub struct SwiGlu<S: Scalar = f32> {
    pub gate: Linear<S>,
    pub up: Linear<S>,
    pub down: Linear<S>,
}

impl<S: Scalar> SwiGlu<S> {
    pub fn new(f: &mut ParamFactory, d: usize, hidden: usize) -> Self {
        SwiGlu {
            gate: Linear::new(f, d, hidden, false),
            up: Linear::new(f, d, hidden, false),
            down: Linear::new(f, hidden, d, false),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let g = self.gate.forward(x)?.silu();
        let u = self.up.forward(x)?;
        self.down.forward(&g.mul(&u)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        self.gate.collect(&format!("{prefix}.gate"), out);
        self.up.collect(&format!("{prefix}.up"), out);
        self.down.collect(&format!("{prefix}.down"), out);
    }
}

/// Sinusoidal position features for a scalar index, dimension `d` (even).
/// Layout is [sin(t w_0), cos(t w_0), sin(t w_1), ...] with geometrically
/// spaced frequencies.
pub fn sinusoidal_features<S: Scalar>(t: f64, d: usize) -> Vec<S> {
    assert!(d % 2 == 0, "sinusoidal dim must be even");
    let half = d / 2;
    let mut out = Vec::with_capacity(d);
    for j in 0..half {
        let freq = (10_000f64).powf(-(j as f64) / half as f64);
        out.push(S::from_f64((t * freq).sin()));
        out.push(S::from_f64((t * freq).cos()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_shapes_and_bias() {
        let mut f = ParamFactory::new(1);
        let l: Linear<f64> = Linear::new(&mut f, 3, 2, true);
        let x = Tensor::<f64>::from_vec(&[4, 3], vec![0.5; 12]).unwrap();
        let y = l.forward(&x).unwrap();
        assert_eq!(y.shape(), &[4, 2]);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let mut f1 = ParamFactory::new(9);
        let mut f2 = ParamFactory::new(9);
        let a: Tensor<f32> = f1.normal(&[8, 8], 0.1);
        let b: Tensor<f32> = f2.normal(&[8, 8], 0.1);
        assert_eq!(a.to_vec(), b.to_vec());
        let mut f3 = ParamFactory::new(10);
        let c: Tensor<f32> = f3.normal(&[8, 8], 0.1);
        assert_ne!(a.to_vec(), c.to_vec());
    }

    #[test]
    fn zeroed_linear_is_zero_map() {
        let mut f = ParamFactory::new(1);
        let l: Linear<f64> = Linear::new_zeroed(&mut f, 4, 4, true);
        let x = Tensor::<f64>::from_vec(&[2, 4], vec![3.0; 8]).unwrap();
        let y = l.forward(&x).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swiglu_grads_flow() {
        let mut f = ParamFactory::new(2);
        let m: SwiGlu<f64> = SwiGlu::new(&mut f, 4, 8);
        let x = Tensor::<f64>::param(&[2, 4], vec![0.3; 8]).unwrap();
        let y = m.forward(&x).unwrap().sum_all();
        y.backward().unwrap();
        assert!(x.grad().is_some());
        assert!(m.down.w.grad().is_some());
    }

    #[test]
    fn sinusoidal_features_are_bounded_and_even_dim() {
        let v: Vec<f64> = sinusoidal_features(123.0, 16);
        assert_eq!(v.len(), 16);
        assert!(v.iter().all(|&x| (-1.0..=1.0).contains(&x)));
    }
}

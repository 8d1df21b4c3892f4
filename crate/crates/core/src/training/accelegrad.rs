//! AcceleGrad as a three-step optimizer.
//!
//! Each parameter keeps two sequences `y` and `z`. Before inference the
//! network is fed the interpolation `tau·z + (1−tau)·y`; after backprop the
//! gradient at that point advances both sequences and the returned value
//! is an AdaGrad-style step from the fed point.

use std::collections::{BTreeMap, BTreeSet};

use super::optim::{AcceleGradConfig, ThreeStepOptimizer};
use crate::tensor::{reduce_norm, same_dtype, same_shape, Element, NormKind};
use crate::{DType, Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// Before the first `new_input`, or after all updates of a step.
    Idle,
    Prepared,
}

#[derive(Debug, Clone)]
pub struct AcceleGrad {
    pub lr: f64,
    pub d: f64,
    pub g: f64,
    pub eps: f64,
    t: u64,
    alpha: f64,
    tau: f64,
    y: BTreeMap<String, Tensor>,
    z: BTreeMap<String, Tensor>,
    squares: BTreeMap<String, f64>,
    phase: Phase,
    /// Parameters prepared in the current step and not yet updated.
    prepared: BTreeSet<String>,
}

impl AcceleGrad {
    pub fn new(lr: f64, cfg: AcceleGradConfig) -> Result<Self> {
        if !(lr > 0.0 && cfg.d > 0.0 && cfg.g > 0.0 && cfg.eps > 0.0) {
            return Err(Error::InvalidArgument(format!("accelegrad needs positive lr, D, G and eps: lr={lr}, {cfg:?}")));
        }
        Ok(AcceleGrad {
            lr,
            d: cfg.d,
            g: cfg.g,
            eps: cfg.eps,
            t: 0,
            alpha: 1.0,
            tau: 1.0,
            y: BTreeMap::new(),
            z: BTreeMap::new(),
            squares: BTreeMap::new(),
            phase: Phase::Idle,
            prepared: BTreeSet::new(),
        })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn squares(&self, name: &str) -> Option<f64> {
        self.squares.get(name).copied()
    }

    pub fn y(&self, name: &str) -> Option<&Tensor> {
        self.y.get(name)
    }

    pub fn z(&self, name: &str) -> Option<&Tensor> {
        self.z.get(name)
    }
}

/// `a·x + b·y` elementwise, computed in the tensors' precision.
fn axpby(a: f64, x: &Tensor, b: f64, y: &Tensor) -> Result<Tensor> {
    same_dtype(x, y)?;
    same_shape(x, y)?;
    fn go<T: Element>(a: f64, x: &[T], b: f64, y: &[T]) -> Vec<T> {
        let (a, b) = (T::from_f64(a), T::from_f64(b));
        x.iter().zip(y).map(|(&x, &y)| a * x + b * y).collect()
    }
    Ok(match x.dtype() {
        DType::F32 => Tensor::from_vec(x.shape().to_vec(), go(a, x.data::<f32>()?, b, y.data::<f32>()?))?,
        DType::F64 => Tensor::from_vec(x.shape().to_vec(), go(a, x.data::<f64>()?, b, y.data::<f64>()?))?,
    })
}

/// `x − c·g` elementwise.
fn minus_scaled(x: &Tensor, c: f64, g: &Tensor) -> Result<Tensor> {
    same_dtype(x, g)?;
    same_shape(x, g)?;
    fn go<T: Element>(x: &[T], c: f64, g: &[T]) -> Vec<T> {
        let c = T::from_f64(c);
        x.iter().zip(g).map(|(&x, &g)| x - c * g).collect()
    }
    Ok(match x.dtype() {
        DType::F32 => Tensor::from_vec(x.shape().to_vec(), go(x.data::<f32>()?, c, g.data::<f32>()?))?,
        DType::F64 => Tensor::from_vec(x.shape().to_vec(), go(x.data::<f64>()?, c, g.data::<f64>()?))?,
    })
}

fn squared_l2(g: &Tensor) -> Result<f64> {
    let zero = Tensor::zeros(g.dtype(), g.shape().to_vec());
    let n = reduce_norm(g, &zero, NormKind::L2)?;
    Ok(n * n)
}

impl ThreeStepOptimizer for AcceleGrad {
    fn name(&self) -> String {
        "accelegrad".into()
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn new_input(&mut self) -> Result<()> {
        self.t += 1;
        self.alpha = if self.t <= 2 { 1.0 } else { (self.t + 1) as f64 / 4.0 };
        self.tau = 1.0 / self.alpha;
        self.phase = Phase::Prepared;
        self.prepared.clear();
        Ok(())
    }

    fn prepare_param(&mut self, name: &str, param: &Tensor) -> Result<Option<Tensor>> {
        if self.phase != Phase::Prepared {
            return Err(Error::PhaseOrder { expected: "new_input", got: "prepare_param" });
        }
        if !self.y.contains_key(name) {
            self.y.insert(name.to_string(), param.clone());
            self.z.insert(name.to_string(), param.clone());
            self.squares.insert(name.to_string(), 0.0);
        }
        self.prepared.insert(name.to_string());
        let fed = axpby(self.tau, &self.z[name], 1.0 - self.tau, &self.y[name])?;
        Ok(Some(fed))
    }

    fn update_rule(&mut self, name: &str, grad: &Tensor, old_param: &Tensor) -> Result<Tensor> {
        if self.phase != Phase::Prepared {
            return Err(Error::PhaseOrder { expected: "new_input", got: "update_rule" });
        }
        if !self.prepared.remove(name) {
            return Err(Error::PhaseOrder { expected: "prepare_param", got: "update_rule" });
        }
        let prev = self.squares[name];
        let squares = prev + self.alpha * self.alpha * squared_l2(grad)?;
        let eta = 2.0 * self.d / (self.g * self.g + squares).sqrt();
        let z = minus_scaled(&self.z[name], self.alpha * eta, grad)?;
        let y = minus_scaled(old_param, eta, grad)?;
        self.z.insert(name.to_string(), z);
        self.y.insert(name.to_string(), y);
        self.squares.insert(name.to_string(), squares);
        let adjusted = self.lr / (self.eps + squares.sqrt());
        minus_scaled(old_param, adjusted, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec([1], vec![v]).unwrap()
    }

    #[test]
    fn alpha_and_tau_sequence() {
        let mut o = AcceleGrad::new(0.1, AcceleGradConfig::default()).unwrap();
        let mut alphas = Vec::new();
        for _ in 0..4 {
            o.new_input().unwrap();
            alphas.push(o.alpha());
        }
        assert_eq!(alphas, vec![1.0, 1.0, 1.0, 1.25]);
        assert_eq!(o.tau(), 0.8);
    }

    #[test]
    fn out_of_order_phases_fail() {
        let mut o = AcceleGrad::new(0.1, AcceleGradConfig::default()).unwrap();
        let w = scalar(1.0);
        assert!(matches!(o.prepare_param("w", &w), Err(Error::PhaseOrder { .. })));
        o.new_input().unwrap();
        assert!(matches!(o.update_rule("w", &w, &w), Err(Error::PhaseOrder { .. })));
    }

    #[test]
    fn zero_gradient_is_stationary() {
        let mut o = AcceleGrad::new(0.1, AcceleGradConfig::default()).unwrap();
        let mut w = Tensor::from_vec([3], vec![0.5f64, -1.0, 2.0]).unwrap();
        let zero = Tensor::zeros(DType::F64, [3]);
        for _ in 0..10 {
            o.new_input().unwrap();
            let fed = o.prepare_param("w", &w).unwrap().unwrap();
            w = o.update_rule("w", &zero, &fed).unwrap();
            assert_eq!(o.y("w"), Some(&w));
            assert_eq!(o.z("w"), Some(&w));
        }
        assert_eq!(w.to_f64_vec(), vec![0.5, -1.0, 2.0]);
    }

    /// Line-by-line transcription of the reference Python on scalars.
    struct Transcribed {
        t: f64,
        alpha_t: f64,
        tau_t: f64,
        y: f64,
        z: f64,
        squares: f64,
        init: bool,
        d: f64,
        g: f64,
        eps: f64,
        lr: f64,
        network: f64,
    }

    impl Transcribed {
        fn new_input(&mut self) {
            self.t += 1.0;
            self.alpha_t = if 0.0 <= self.t && self.t <= 2.0 { 1.0 } else { 1.0 / 4.0 * (self.t + 1.0) };
            self.tau_t = 1.0 / self.alpha_t;
        }
        fn prepare_param(&mut self) {
            let param = self.network;
            if !self.init {
                self.y = param;
                self.z = param;
                self.squares = 0.0;
                self.init = true;
            }
            let new_param = self.tau_t * self.z + (1.0 - self.tau_t) * self.y;
            self.network = new_param;
        }
        fn update_rule(&mut self, grad: f64, old_param: f64) -> f64 {
            let mut squared_grad = self.squares;
            squared_grad += self.alpha_t.powi(2) * grad.abs().powi(2);
            let eta_t = 2.0 * self.d / (self.g.powi(2) + squared_grad).sqrt();
            let z_t2 = self.z - self.alpha_t * eta_t * grad;
            let y_t2 = old_param - eta_t * grad;
            self.z = z_t2;
            self.y = y_t2;
            self.squares = squared_grad;
            let adjusted_lr = self.lr / (self.eps + squared_grad.sqrt());
            old_param - adjusted_lr * grad
        }
    }

    #[test]
    fn matches_transcription_on_quadratic() {
        // f(w) = 0.5·a·(w − c)², gradient a·(w − c), perturbed by seeded noise.
        let (a, c) = (1.7, -0.4);
        let cfg = AcceleGradConfig { d: 1.5, g: 0.8, eps: 1e-8 };
        let lr = 0.3;
        let mut o = AcceleGrad::new(lr, cfg).unwrap();
        let mut r = Transcribed {
            t: 0.0,
            alpha_t: 0.0,
            tau_t: 0.0,
            y: 0.0,
            z: 0.0,
            squares: 0.0,
            init: false,
            d: cfg.d,
            g: cfg.g,
            eps: cfg.eps,
            lr,
            network: 2.0,
        };
        let mut w = scalar(2.0);
        let mut rng = Rng::new(11, 0);
        let mut prev_sq = 0.0;
        for _ in 0..20 {
            let noise = rng.uniform_range(-0.1, 0.1);
            o.new_input().unwrap();
            let fed = o.prepare_param("w", &w).unwrap().unwrap();
            let g = scalar(a * (fed.get_f64(0) - c) + noise);
            w = o.update_rule("w", &g, &fed).unwrap();

            r.new_input();
            r.prepare_param();
            let old = r.network;
            r.network = r.update_rule(a * (old - c) + noise, old);

            assert!((w.get_f64(0) - r.network).abs() <= 1e-12);
            assert!((o.y("w").unwrap().get_f64(0) - r.y).abs() <= 1e-12);
            assert!((o.z("w").unwrap().get_f64(0) - r.z).abs() <= 1e-12);
            let sq = o.squares("w").unwrap();
            assert!(sq >= prev_sq);
            prev_sq = sq;
        }
    }
}

//! Update rules and the three-step optimizer protocol.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::accelegrad::AcceleGrad;
use crate::tensor::{same_dtype, same_shape, Element};
use crate::{Error, Result, Tensor};

/// Stateless description of a gradient-descent variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum UpdateRule {
    Sgd,
    Momentum {
        #[serde(default = "default_mu")]
        mu: f64,
    },
    Adagrad {
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_mu() -> f64 {
    0.9
}
fn default_eps() -> f64 {
    1e-8
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}

impl UpdateRule {
    pub fn adam() -> Self {
        UpdateRule::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            UpdateRule::Sgd => "sgd",
            UpdateRule::Momentum { .. } => "momentum",
            UpdateRule::Adagrad { .. } => "adagrad",
            UpdateRule::Adam { .. } => "adam",
        }
    }

    fn buffers(&self) -> usize {
        match self {
            UpdateRule::Sgd => 0,
            UpdateRule::Momentum { .. } | UpdateRule::Adagrad { .. } => 1,
            UpdateRule::Adam { .. } => 2,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            UpdateRule::Sgd => true,
            UpdateRule::Momentum { mu } => (0.0..1.0).contains(&mu),
            UpdateRule::Adagrad { eps } => eps > 0.0,
            UpdateRule::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad hyperparameters for {self:?}")))
        }
    }
}

/// Step counter plus per-parameter auxiliary buffers (momentum, AdaGrad
/// accumulator, Adam `m` and `v`), each shaped like its parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    /// Completed or in-progress step, 1-based once stepping has begun.
    pub t: u64,
    pub buffers: BTreeMap<String, Vec<Tensor>>,
}

/// Applies one update to `param`. `state.t` must already count the current
/// step (Adam's bias correction uses it). With `checked`, a non-finite
/// gradient is an error.
pub fn apply_update_rule(
    rule: &UpdateRule,
    lr: f64,
    state: &mut OptimizerState,
    name: &str,
    param: &Tensor,
    grad: &Tensor,
    checked: bool,
) -> Result<Tensor> {
    same_dtype(param, grad)?;
    same_shape(param, grad)?;
    if checked && !grad.is_finite() {
        return Err(Error::NonFinite(format!("gradient of `{name}`")));
    }
    if matches!(rule, UpdateRule::Adam { .. }) && state.t == 0 {
        return Err(Error::InvalidArgument("adam needs t >= 1".into()));
    }
    let t = state.t;
    let bufs = state.buffers.entry(name.to_string()).or_insert_with(|| {
        (0..rule.buffers()).map(|_| Tensor::zeros(param.dtype(), param.shape().to_vec())).collect()
    });
    if bufs.iter().any(|b| b.shape() != param.shape() || b.dtype() != param.dtype()) {
        return Err(Error::ShapeMismatch(format!("optimizer buffers of `{name}` do not match the parameter")));
    }
    match param.dtype() {
        crate::DType::F32 => update_t::<f32>(rule, lr, t, bufs, param, grad),
        crate::DType::F64 => update_t::<f64>(rule, lr, t, bufs, param, grad),
    }
}

fn update_t<T: Element>(rule: &UpdateRule, lr: f64, t: u64, bufs: &mut [Tensor], param: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let w = param.data::<T>()?;
    let g = grad.data::<T>()?;
    let eta = T::from_f64(lr);
    let out: Vec<T> = match *rule {
        UpdateRule::Sgd => w.iter().zip(g).map(|(&w, &g)| w - eta * g).collect(),
        UpdateRule::Momentum { mu } => {
            let mu = T::from_f64(mu);
            let v = bufs[0].data_mut::<T>()?;
            w.iter()
                .zip(g)
                .zip(v.iter_mut())
                .map(|((&w, &g), v)| {
                    *v = mu * *v + g;
                    w - eta * *v
                })
                .collect()
        }
        UpdateRule::Adagrad { eps } => {
            let eps = T::from_f64(eps);
            let a = bufs[0].data_mut::<T>()?;
            w.iter()
                .zip(g)
                .zip(a.iter_mut())
                .map(|((&w, &g), a)| {
                    *a += g * g;
                    w - eta * g / (a.sqrt() + eps)
                })
                .collect()
        }
        UpdateRule::Adam { beta1, beta2, eps } => {
            let c1 = T::from_f64(1.0 - beta1.powi(t as i32));
            let c2 = T::from_f64(1.0 - beta2.powi(t as i32));
            let (b1, b2, eps) = (T::from_f64(beta1), T::from_f64(beta2), T::from_f64(eps));
            let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
            let (mb, vb) = bufs.split_at_mut(1);
            let m = mb[0].data_mut::<T>()?;
            let v = vb[0].data_mut::<T>()?;
            w.iter()
                .zip(g)
                .zip(m.iter_mut().zip(v.iter_mut()))
                .map(|((&w, &g), (m, v))| {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    w - eta * mhat / (vhat.sqrt() + eps)
                })
                .collect()
        }
    };
    Tensor::from_vec(param.shape().to_vec(), out)
}

/// Optimizer split into the three phases of a step: once per minibatch
/// (`new_input`), once per parameter before inference (`prepare_param`,
/// which may return a value to feed), and once per parameter after
/// backprop (`update_rule`, returning the new value).
pub trait ThreeStepOptimizer: Send {
    fn name(&self) -> String;
    fn set_lr(&mut self, lr: f64);
    fn new_input(&mut self) -> Result<()>;
    fn prepare_param(&mut self, name: &str, param: &Tensor) -> Result<Option<Tensor>>;
    fn update_rule(&mut self, name: &str, grad: &Tensor, old_param: &Tensor) -> Result<Tensor>;
}

/// An update rule wrapped in the three-step protocol with trivial
/// `new_input` and `prepare_param`.
#[derive(Debug, Clone)]
pub struct UpdateRuleOptimizer {
    pub rule: UpdateRule,
    pub lr: f64,
    pub state: OptimizerState,
    pub checked: bool,
}

impl UpdateRuleOptimizer {
    pub fn new(rule: UpdateRule, lr: f64) -> Result<Self> {
        rule.validate()?;
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
        }
        Ok(UpdateRuleOptimizer { rule, lr, state: OptimizerState::default(), checked: false })
    }

    pub fn checked(mut self, on: bool) -> Self {
        self.checked = on;
        self
    }

    /// The direct path: one full step over every parameter at once.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.state.t += 1;
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("no gradient for `{name}`")))?;
            *p = apply_update_rule(&self.rule, self.lr, &mut self.state, name, p, g, self.checked)?;
        }
        Ok(())
    }
}

impl ThreeStepOptimizer for UpdateRuleOptimizer {
    fn name(&self) -> String {
        self.rule.name().to_string()
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn new_input(&mut self) -> Result<()> {
        self.state.t += 1;
        Ok(())
    }

    fn prepare_param(&mut self, _name: &str, _param: &Tensor) -> Result<Option<Tensor>> {
        Ok(None)
    }

    fn update_rule(&mut self, name: &str, grad: &Tensor, old_param: &Tensor) -> Result<Tensor> {
        apply_update_rule(&self.rule, self.lr, &mut self.state, name, old_param, grad, self.checked)
    }
}

/// Optimizer choice for training configs.
///
/// In JSON both forms are objects tagged by `kind`, e.g.
/// `{"kind": "adam", "beta1": 0.9}` or `{"kind": "accelegrad", "d": 2.0}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Rule(UpdateRule),
    AcceleGrad(AcceleGradConfig),
}

impl Serialize for OptimizerKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            OptimizerKind::Rule(r) => r.serialize(s),
            OptimizerKind::AcceleGrad(c) => {
                let mut v = serde_json::to_value(c).map_err(serde::ser::Error::custom)?;
                v["kind"] = "accelegrad".into();
                v.serialize(s)
            }
        }
    }
}

impl<'de> Deserialize<'de> for OptimizerKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let mut v = serde_json::Value::deserialize(d)?;
        if v.get("kind").and_then(|k| k.as_str()) == Some("accelegrad") {
            v.as_object_mut().expect("has a kind field").remove("kind");
            serde_json::from_value(v).map(OptimizerKind::AcceleGrad).map_err(D::Error::custom)
        } else {
            serde_json::from_value(v).map(OptimizerKind::Rule).map_err(D::Error::custom)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceleGradConfig {
    #[serde(default = "one")]
    pub d: f64,
    #[serde(default = "one")]
    pub g: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for AcceleGradConfig {
    fn default() -> Self {
        AcceleGradConfig { d: 1.0, g: 1.0, eps: 1e-8 }
    }
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Rule(r) => r.name(),
            OptimizerKind::AcceleGrad(_) => "accelegrad",
        }
    }

    pub fn build(&self, lr: f64, checked: bool) -> Result<Box<dyn ThreeStepOptimizer>> {
        Ok(match *self {
            OptimizerKind::Rule(r) => Box::new(UpdateRuleOptimizer::new(r, lr)?.checked(checked)),
            OptimizerKind::AcceleGrad(c) => Box::new(AcceleGrad::new(lr, c)?),
        })
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    /// Bare names with default hyperparameters.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sgd" => OptimizerKind::Rule(UpdateRule::Sgd),
            "momentum" => OptimizerKind::Rule(UpdateRule::Momentum { mu: default_mu() }),
            "adagrad" => OptimizerKind::Rule(UpdateRule::Adagrad { eps: default_eps() }),
            "adam" => OptimizerKind::Rule(UpdateRule::adam()),
            "accelegrad" => OptimizerKind::AcceleGrad(AcceleGradConfig::default()),
            other => return Err(Error::InvalidArgument(format!("unknown optimizer `{other}`"))),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: f64) -> Tensor {
        Tensor::from_vec([1], vec![v]).unwrap()
    }

    fn step(rule: UpdateRule, lr: f64, w: f64, g: f64) -> f64 {
        let mut st = OptimizerState { t: 1, ..Default::default() };
        apply_update_rule(&rule, lr, &mut st, "w", &t1(w), &t1(g), true).unwrap().get_f64(0)
    }

    #[test]
    fn sgd_example() {
        assert!((step(UpdateRule::Sgd, 0.1, 1.0, 2.0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        for rule in [
            UpdateRule::Sgd,
            UpdateRule::Momentum { mu: 0.9 },
            UpdateRule::Adagrad { eps: 1e-8 },
            UpdateRule::adam(),
        ] {
            assert_eq!(step(rule, 0.5, 1.5, 0.0), 1.5, "{rule:?}");
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        for g in [3.0, -0.02] {
            let w = step(UpdateRule::adam(), 1e-3, 0.0, g);
            assert!((w + 1e-3 * f64::signum(g)).abs() < 1e-9, "{w}");
        }
    }

    #[test]
    fn checked_mode_rejects_nan() {
        let mut st = OptimizerState { t: 1, ..Default::default() };
        let err = apply_update_rule(&UpdateRule::Sgd, 0.1, &mut st, "w", &t1(1.0), &t1(f64::NAN), true);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn optimizer_names_parse() {
        for n in ["sgd", "momentum", "adagrad", "adam", "accelegrad"] {
            assert_eq!(n.parse::<OptimizerKind>().unwrap().name(), n);
        }
        let k: OptimizerKind = serde_json::from_str(r#"{"kind": "momentum", "mu": 0.5}"#).unwrap();
        assert_eq!(k, OptimizerKind::Rule(UpdateRule::Momentum { mu: 0.5 }));
        let k: OptimizerKind = serde_json::from_str(r#"{"kind": "accelegrad", "d": 2.0}"#).unwrap();
        assert_eq!(k, OptimizerKind::AcceleGrad(AcceleGradConfig { d: 2.0, ..Default::default() }));
        let back: OptimizerKind = serde_json::from_value(serde_json::to_value(k).unwrap()).unwrap();
        assert_eq!(back, k);
        assert!(serde_json::from_str::<OptimizerKind>(r#"{"kind": "adam", "lr": 1}"#).is_err());
    }
}

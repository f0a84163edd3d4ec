use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `w -= lr · wd · w`.
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adamw(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adamw(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state, keyed by parameter name. Only parameters that have
/// been stepped (the trainable ones) ever get an entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    /// Names of parameters holding optimizer state.
    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// Applies one update to `ids` from their accumulated gradients, then
    /// clears those gradients. Parameters without a gradient count as zero
    /// gradient. Any non-finite gradient aborts before anything changes.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            let p = store.get(id);
            if !p.tensor.requires_grad() {
                return Err(Error::Contract(format!("parameter `{}` is frozen", p.name)));
            }
            if let Some(g) = p.tensor.grad() {
                let bad = g.iter().filter(|x| !x.is_finite()).count();
                if bad > 0 {
                    return Err(Error::NonFinite {
                        param: p.name.clone(),
                        count: bad,
                    });
                }
            }
        }
        self.step += 1;
        let c = self.config.clone();
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for &id in ids {
            let name = store.get(id).name.clone();
            let tensor = store.tensor_mut(id);
            let n = tensor.numel();
            let grad = tensor
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; n]);
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in tensor.data_mut().iter_mut().zip(&grad) {
                        *w -= c.learning_rate * (g + c.weight_decay * *w);
                    }
                }
                OptimizerKind::AdamW => {
                    let mo = self.moments.entry(name).or_insert_with(|| Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    });
                    for (i, w) in tensor.data_mut().iter_mut().enumerate() {
                        let g = grad[i];
                        mo.m[i] = c.beta1 * mo.m[i] + (1.0 - c.beta1) * g;
                        mo.v[i] = c.beta2 * mo.v[i] + (1.0 - c.beta2) * g * g;
                        let mhat = mo.m[i] / bc1;
                        let vhat = mo.v[i] / bc2;
                        *w -=
                            c.learning_rate * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
                    }
                }
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::model::ParamGroup;

    fn quadratic_store(x0: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert(
            "x",
            ParamGroup::Adapter,
            Tensor::scalar(x0).with_requires_grad(true),
        );
        (s, id)
    }

    fn grad_step(s: &mut ParamStore, id: ParamId, target: f64) {
        // loss = (x - target)^2
        let mut tape = Tape::new();
        let x = s.bind(&mut tape, id);
        let c = tape.constant(Tensor::scalar(target));
        let d = tape.sub(x, c).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        s.accumulate(&g);
    }

    #[test]
    fn zero_gradient_leaves_parameters_alone() {
        for cfg in [OptimizerConfig::adamw(0.1), OptimizerConfig::sgd(0.1)] {
            let (mut s, id) = quadratic_store(1.5);
            let mut opt = Optimizer::new(cfg).unwrap();
            opt.step(&mut s, &[id]).unwrap();
            assert_eq!(s.tensor(id).item(), 1.5);
        }
    }

    #[test]
    fn scalar_quadratic_converges() {
        for cfg in [OptimizerConfig::adamw(0.05), OptimizerConfig::sgd(0.1)] {
            let (mut s, id) = quadratic_store(-2.0);
            let mut opt = Optimizer::new(cfg.clone()).unwrap();
            for _ in 0..500 {
                grad_step(&mut s, id, 3.0);
                opt.step(&mut s, &[id]).unwrap();
            }
            let x = s.tensor(id).item();
            assert!((x - 3.0).abs() < 1e-6, "{cfg:?}: {x}");
        }
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let (mut s, id) = quadratic_store(0.3);
            let mut opt = Optimizer::new(OptimizerConfig::adamw(0.01)).unwrap();
            let mut path = Vec::new();
            for _ in 0..50 {
                grad_step(&mut s, id, -1.0);
                opt.step(&mut s, &[id]).unwrap();
                path.push(s.tensor(id).item().to_bits());
            }
            path
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let (mut s, id) = quadratic_store(f64::NAN);
        grad_step(&mut s, id, 0.0);
        let mut opt = Optimizer::new(OptimizerConfig::adamw(0.1)).unwrap();
        match opt.step(&mut s, &[id]) {
            Err(Error::NonFinite { param, count }) => {
                assert_eq!(param, "x");
                assert_eq!(count, 1);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn state_only_for_stepped_parameters() {
        let mut s = ParamStore::new();
        let a = s.insert(
            "a",
            ParamGroup::Adapter,
            Tensor::scalar(1.0).with_requires_grad(true),
        );
        s.insert("frozen", ParamGroup::Llm, Tensor::scalar(1.0));
        let mut opt = Optimizer::new(OptimizerConfig::adamw(0.1)).unwrap();
        opt.step(&mut s, &[a]).unwrap();
        assert_eq!(opt.state_names().collect::<Vec<_>>(), ["a"]);
    }
}

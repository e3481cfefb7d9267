use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Matrix, Tape, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "ccgl-ckpt-1";

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// A learnable tensor with its Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    first_moment: Matrix,
    second_moment: Matrix,
    step: u64,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            first_moment: Matrix::zeros(r, c),
            second_moment: Matrix::zeros(r, c),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Named parameters, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// Named gradients matching a [`ParamStore`].
pub type Grads = BTreeMap<String, Matrix>;

/// Tape variables bound to each parameter for one forward pass.
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    /// Gradient per bound parameter, zero where the loss did not reach it.
    pub fn collect(&self, params: &ParamStore, g: &Gradients) -> Grads {
        params
            .params
            .iter()
            .map(|(name, p)| {
                let grad = g
                    .get(self.vars[name])
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(p.value.nrows(), p.value.ncols()));
                (name.clone(), grad)
            })
            .collect()
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Records every parameter on `tape` as a gradient-receiving leaf.
    pub fn bind(&self, tape: &Tape) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.param(p.value.clone())))
            .collect();
        Bindings { vars }
    }

    fn coordinate_mut(&mut self, mut flat: usize) -> &mut f64 {
        for p in self.params.values_mut() {
            if flat < p.value.len() {
                return &mut p.value.as_mut_slice()[flat];
            }
            flat -= p.value.len();
        }
        panic!("coordinate out of range");
    }

    fn coordinate_name(&self, mut flat: usize) -> (&str, usize) {
        for (name, p) in &self.params {
            if flat < p.value.len() {
                return (name, flat);
            }
            flat -= p.value.len();
        }
        panic!("coordinate out of range");
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION.to_string(),
            params: self
                .params
                .iter()
                .map(|(name, p)| {
                    let (r, c) = p.value.shape();
                    let values = (0..r)
                        .flat_map(|i| (0..c).map(move |j| (i, j)))
                        .map(|ij| p.value[ij])
                        .collect();
                    (
                        name.clone(),
                        StoredTensor {
                            shape: [r, c],
                            values,
                        },
                    )
                })
                .collect(),
        };
        let text = serde_json::to_string(&ckpt).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version `{}`", ckpt.version)));
        }
        let mut store = ParamStore::new();
        for (name, t) in ckpt.params {
            let [r, c] = t.shape;
            if t.values.len() != r * c {
                return Err(bad(format!(
                    "`{name}` declares {r}x{c} but has {} values",
                    t.values.len()
                )));
            }
            store.insert(name, Matrix::from_row_slice(r, c, &t.values))?;
        }
        Ok(store)
    }
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: String,
    params: BTreeMap<String, StoredTensor>,
}

/// Runs `f` on a fresh tape and returns the loss with gradients for every
/// parameter. Parameters `f` never touches get zero gradients.
pub fn forward_backward<F>(params: &ParamStore, f: F) -> Result<(f64, Grads)>
where
    F: FnOnce(&Tape, &Bindings) -> Result<Var>,
{
    let tape = Tape::new();
    let bindings = params.bind(&tape);
    let loss = f(&tape, &bindings)?;
    let value = tape.scalar(loss)?;
    let g = tape.backward(loss)?;
    Ok((value, bindings.collect(params, &g)))
}

/// Compares reverse-mode gradients with central differences on `samples`
/// randomly chosen coordinates. Returns the max relative error
/// `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
pub fn grad_check<F>(params: &ParamStore, f: F, eps: f64, samples: usize, seed: u64) -> Result<f64>
where
    F: Fn(&Tape, &Bindings) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let (_, grads) = forward_backward(params, &f)?;
    let total = params.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, total, samples.min(total));

    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let b = store.bind(&tape);
        let loss = f(&tape, &b)?;
        tape.scalar(loss)
    };

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for flat in picks.iter() {
        let original = *probe.coordinate_mut(flat);
        *probe.coordinate_mut(flat) = original + eps;
        let up = eval(&probe)?;
        *probe.coordinate_mut(flat) = original - eps;
        let down = eval(&probe)?;
        *probe.coordinate_mut(flat) = original;
        if !up.is_finite() || !down.is_finite() {
            let (name, at) = params.coordinate_name(flat);
            return Err(Error::NonFinite(format!(
                "loss at perturbed coordinate {at} of `{name}`"
            )));
        }
        let numeric = (up - down) / (2.0 * eps);
        let (name, at) = params.coordinate_name(flat);
        let analytic = grads[name].as_slice()[at];
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// One Adam update with beta1 = 0.9, beta2 = 0.999, eps = 1e-8 and bias
/// correction. Every parameter's step count advances by one.
pub fn adam_step(params: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate {lr} must be >= 0")));
    }
    for (name, p) in &params.params {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.clone()))?;
        if g.shape() != p.value.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.value.shape(),
                rhs: g.shape(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    for (name, p) in params.params.iter_mut() {
        let g = &grads[name];
        p.step += 1;
        let t = p.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for k in 0..g.len() {
            let gk = g.as_slice()[k];
            let m = &mut p.first_moment.as_mut_slice()[k];
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gk;
            let v = &mut p.second_moment.as_mut_slice()[k];
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gk * gk;
            let m_hat = p.first_moment.as_slice()[k] / bc1;
            let v_hat = p.second_moment.as_slice()[k] / bc2;
            p.value.as_mut_slice()[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Matrix::from_row_slice(2, 2, &[0.5, -1.0, 2.0, 0.25]))
            .unwrap();
        s.insert("unused", Matrix::from_element(1, 3, 1.0)).unwrap();
        s
    }

    fn quadratic(tape: &Tape, b: &Bindings) -> Result<Var> {
        let w = b.get("w")?;
        Ok(tape.sum(tape.mul(w, w)?))
    }

    #[test]
    fn untouched_parameter_gets_zero_gradient() {
        let (value, grads) = forward_backward(&store(), quadratic).unwrap();
        assert!((value - (0.25 + 1.0 + 4.0 + 0.0625)).abs() < 1e-15);
        assert_eq!(grads["unused"], Matrix::zeros(1, 3));
        assert_eq!(grads["w"], store().get("w").unwrap() * 2.0);
    }

    #[test]
    fn quadratic_passes_grad_check() {
        let err = grad_check(&store(), quadratic, 1e-5, 7, 3).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        assert!(grad_check(&store(), quadratic, 1e-2, 3, 0).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut s = store();
        let before = s.clone();
        let grads: Grads = s
            .params
            .iter()
            .map(|(n, p)| (n.clone(), Matrix::zeros(p.value.nrows(), p.value.ncols())))
            .collect();
        adam_step(&mut s, &grads, 0.1).unwrap();
        for name in before.names() {
            assert_eq!(s.get(name).unwrap(), before.get(name).unwrap());
            assert_eq!(s.param(name).unwrap().step(), 1);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        let mut s = store();
        let before = s.get("w").unwrap().clone();
        let (_, grads) = forward_backward(&s, quadratic).unwrap();
        adam_step(&mut s, &grads, 0.01).unwrap();
        let delta = s.get("w").unwrap() - &before;
        for (d, g) in delta.iter().zip(grads["w"].iter()) {
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((d - expected).abs() < 1e-15);
            assert!((d.abs() - 0.01).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_zero_lr_and_nonfinite_gradient() {
        let mut s = store();
        let before = s.clone();
        let (_, mut grads) = forward_backward(&s, quadratic).unwrap();
        adam_step(&mut s, &grads, 0.0).unwrap();
        assert_eq!(s.get("w").unwrap(), before.get("w").unwrap());
        grads.get_mut("w").unwrap()[(0, 0)] = f64::NAN;
        match adam_step(&mut s, &grads, 0.1) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let s = store();
        s.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"version\":\"ccgl-ckpt-1\""));
        // row-major storage
        assert!(text.contains("[0.5,-1.0,2.0,0.25]"));
        let back = ParamStore::load(&path).unwrap();
        assert_eq!(back.get("w").unwrap(), s.get("w").unwrap());
    }
}

//! Named parameter storage, deterministic initialization, and Adam.
//!
//! Models are geometry structs; their weights live in a [`ParamVec`] whose
//! entry order is fixed by the forward code itself: a [`ParamCursor`] hands
//! out tape leaves in declaration order and asserts the stored names match,
//! so checkpoints, optimizer state, and gradients all align positionally.

use crate::rng::Rng;
use crate::tensor::{Arr, Tape, Var};
use ndarray::IxDyn;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arr,
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct ParamVec {
    pub entries: Vec<ParamEntry>,
}

impl ParamVec {
    pub fn new() -> Self {
        ParamVec { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Arr) {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Uniform(-b, b) with b = sqrt(1 / fan_in); the standard conv default.
pub fn init_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Arr {
    assert!(fan_in > 0);
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Hands out tape leaves for consecutive parameters of a forward pass.
pub struct ParamCursor<'t, 'p> {
    tape: &'t Tape,
    params: &'p ParamVec,
    next: usize,
    vars: Vec<Var<'t>>,
}

impl<'t, 'p> ParamCursor<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p ParamVec) -> Self {
        ParamCursor { tape, params, next: 0, vars: Vec::with_capacity(params.len()) }
    }

    /// Leaf for the next parameter; `name` must match the stored entry.
    pub fn take(&mut self, name: &str) -> Var<'t> {
        let entry = self
            .params
            .entries
            .get(self.next)
            .unwrap_or_else(|| panic!("parameter cursor ran past end at {name}"));
        assert_eq!(entry.name, name, "parameter order diverged");
        self.next += 1;
        let v = self.tape.leaf(entry.value.clone());
        self.vars.push(v);
        v
    }

    /// Must be called after the forward pass consumed every parameter.
    pub fn finish(self) -> Vec<Var<'t>> {
        assert_eq!(self.next, self.params.len(), "forward pass skipped parameters");
        self.vars
    }
}

/// Global L2 norm across a gradient set.
pub fn global_norm(grads: &[Arr]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|&x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients by min(1, max_norm / global_norm) in place.
pub fn clip_global_norm(grads: &mut [Arr], max_norm: f64) {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
}

/// Adam with bias correction. State rows align with the ParamVec.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Arr>,
    pub v: Vec<Arr>,
}

impl Adam {
    pub fn new(params: &ParamVec) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.entries.iter().map(|e| Arr::zeros(e.value.raw_dim())).collect(),
            v: params.entries.iter().map(|e| Arr::zeros(e.value.raw_dim())).collect(),
        }
    }

    /// One update. `grads` align with `params`; `lr` is the step size for
    /// this call (schedules are applied by the caller).
    pub fn update(&mut self, params: &mut ParamVec, grads: &[Arr], lr: f64) {
        assert_eq!(grads.len(), params.len(), "gradient/parameter count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, entry) in params.entries.iter_mut().enumerate() {
            let g = &grads[i];
            assert_eq!(g.shape(), entry.value.shape(), "gradient shape mismatch at {}", entry.name);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            ndarray::Zip::from(&mut entry.value).and(&*m).and(&*v).for_each(|p, &mi, &vi| {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }
}

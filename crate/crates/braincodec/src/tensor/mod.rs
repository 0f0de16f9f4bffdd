//! Reverse-mode automatic differentiation over `ndarray` in f64.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in reverse creation order, accumulating gradients. Evaluation
//! without gradients uses [`Tape::no_grad`], which runs the same forward code
//! but records no backward closures. All kernels are single-threaded and the
//! accumulation order is fixed, so results are bitwise reproducible.

pub mod ops;
pub mod stft;

use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

/// Dynamic-rank f64 array, the only element type the engine supports.
pub type Arr = ArrayD<f64>;

type BackFn = Box<dyn Fn(&Arr) -> Vec<(usize, Arr)>>;

struct Node {
    value: Rc<Arr>,
    back: Option<BackFn>,
}

/// Operation tape. One tape per forward pass; dropped afterwards.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

/// Handle to a value on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by a backward pass, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Arr> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Arr> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// Tape that computes values only. Backward closures are not recorded.
    pub fn no_grad() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&self, value: Arr, back: Option<BackFn>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let back = if self.grad_enabled { back } else { None };
        nodes.push(Node { value: Rc::new(value), back });
        id
    }

    /// Records an input node. Leaves have no parents; their gradients are
    /// read from the [`Gradients`] result after backward.
    pub fn leaf(&self, value: Arr) -> Var<'_> {
        Var { tape: self, id: self.push(value, None) }
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Arr::from_elem(IxDyn(&[]), value))
    }

    fn value(&self, id: usize) -> Rc<Arr> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Backward from a scalar root with seed gradient 1.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let seed = Arr::from_elem(self.value(root.id).raw_dim(), 1.0);
        self.backward_seeded(&[(root, seed)])
    }

    /// Backward from explicit seed gradients. Seeds for the same node add.
    pub fn backward_seeded(&self, seeds: &[(Var<'_>, Arr)]) -> Gradients {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Arr>> = (0..nodes.len()).map(|_| None).collect();
        let mut top = 0usize;
        for (v, seed) in seeds {
            assert!(std::ptr::eq(v.tape, self), "seed from another tape");
            assert_eq!(
                seed.shape(),
                nodes[v.id].value.shape(),
                "seed gradient shape mismatch"
            );
            accumulate(&mut grads[v.id], seed.clone());
            top = top.max(v.id + 1);
        }
        for id in (0..top).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &nodes[id].back {
                for (pid, contrib) in back(&g) {
                    debug_assert!(pid < id, "backward edge must point to an earlier node");
                    accumulate(&mut grads[pid], contrib);
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(slot: &mut Option<Arr>, contrib: Arr) {
    match slot {
        Some(g) => *g += &contrib,
        None => *slot = Some(contrib),
    }
}

/// Saved-value handle used inside backward closures.
fn saved(v: &Rc<Arr>) -> Rc<Arr> {
    Rc::clone(v)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Snapshot of the node's value (cheap; reference-counted).
    pub fn value(&self) -> Rc<Arr> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value of a rank-0 or single-element node.
    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        *v.iter().next().unwrap()
    }

    fn unary(self, value: Arr, back: impl Fn(&Arr) -> Arr + 'static) -> Var<'t> {
        let pid = self.id;
        let id = self
            .tape
            .push(value, Some(Box::new(move |g| vec![(pid, back(g))])));
        self.tape.var(id)
    }

    fn binary(
        self,
        other: Var<'t>,
        value: Arr,
        back: impl Fn(&Arr) -> (Arr, Arr) + 'static,
    ) -> Var<'t> {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let (a, b) = (self.id, other.id);
        let id = self.tape.push(
            value,
            Some(Box::new(move |g| {
                let (ga, gb) = back(g);
                vec![(a, ga), (b, gb)]
            })),
        );
        self.tape.var(id)
    }

    /// Cuts the graph: same value, no gradient flow.
    pub fn detach(self) -> Var<'t> {
        self.tape.leaf(self.value().as_ref().clone())
    }

    pub fn add(self, o: Var<'t>) -> Var<'t> {
        let v = self.value().as_ref() + o.value().as_ref();
        self.binary(o, v, |g| (g.clone(), g.clone()))
    }

    pub fn sub(self, o: Var<'t>) -> Var<'t> {
        let v = self.value().as_ref() - o.value().as_ref();
        self.binary(o, v, |g| (g.clone(), -g))
    }

    pub fn mul(self, o: Var<'t>) -> Var<'t> {
        let av = self.value();
        let bv = o.value();
        let v = av.as_ref() * bv.as_ref();
        let (ac, bc) = (saved(&av), saved(&bv));
        self.binary(o, v, move |g| (g * bc.as_ref(), g * ac.as_ref()))
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(-self.value().as_ref(), |g| -g)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(self.value().as_ref() * c, move |g| g * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(self.value().as_ref() + c, |g| g.clone())
    }

    pub fn relu(self) -> Var<'t> {
        let xv = self.value();
        let v = xv.mapv(|x| x.max(0.0));
        let x = saved(&xv);
        self.unary(v, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(x.as_ref(), |gi, &xi| {
                if xi <= 0.0 {
                    *gi = 0.0;
                }
            });
            out
        })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let xv = self.value();
        let v = xv.mapv(|x| if x > 0.0 { x } else { slope * x });
        let x = saved(&xv);
        self.unary(v, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(x.as_ref(), |gi, &xi| {
                if xi <= 0.0 {
                    *gi *= slope;
                }
            });
            out
        })
    }

    /// ELU with alpha 1: x for x > 0, exp(x) - 1 otherwise.
    pub fn elu(self) -> Var<'t> {
        let xv = self.value();
        let v = xv.mapv(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        let out_saved = Rc::new(v.clone());
        self.unary(v, move |g| {
            let mut gx = g.clone();
            gx.zip_mut_with(out_saved.as_ref(), |gi, &yi| {
                if yi <= 0.0 {
                    // d/dx (exp(x) - 1) = exp(x) = y + 1 on the negative branch.
                    *gi *= yi + 1.0;
                }
            });
            gx
        })
    }

    /// |x|, with subgradient 0 at exactly 0.
    pub fn abs(self) -> Var<'t> {
        let xv = self.value();
        let v = xv.mapv(f64::abs);
        let x = saved(&xv);
        self.unary(v, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(x.as_ref(), |gi, &xi| {
                *gi *= if xi > 0.0 {
                    1.0
                } else if xi < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            });
            out
        })
    }

    /// Elementwise square root with a guarded gradient at 0.
    pub fn sqrt_guarded(self) -> Var<'t> {
        let v = self.value().mapv(f64::sqrt);
        let out_saved = Rc::new(v.clone());
        self.unary(v, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(out_saved.as_ref(), |gi, &si| {
                *gi = if si > 1e-300 { *gi / (2.0 * si) } else { 0.0 };
            });
            out
        })
    }

    pub fn sum(self) -> Var<'t> {
        let xv = self.value();
        let shape = xv.raw_dim();
        let v = Arr::from_elem(IxDyn(&[]), xv.sum());
        self.unary(v, move |g| {
            let gs = *g.iter().next().unwrap();
            Arr::from_elem(shape.clone(), gs)
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len();
        assert!(n > 0, "mean of empty array");
        self.sum().scale(1.0 / n as f64)
    }

    /// Elementwise multiplication by a constant array of the same shape.
    pub fn mul_const(self, c: &Arr) -> Var<'t> {
        assert_eq!(self.value().shape(), c.shape(), "mul_const shape mismatch");
        let v = self.value().as_ref() * c;
        let c = c.clone();
        self.unary(v, move |g| g * &c)
    }

    /// Sum of squares reduced to a scalar.
    pub fn sq_sum(self) -> Var<'t> {
        let xv = self.value();
        let v = Arr::from_elem(IxDyn(&[]), xv.iter().map(|&x| x * x).sum::<f64>());
        let x = saved(&xv);
        self.unary(v, move |g| {
            let gs = *g.iter().next().unwrap();
            x.mapv(|xi| 2.0 * gs * xi)
        })
    }

    /// Euclidean norm, gradient guarded at 0.
    pub fn l2_norm(self) -> Var<'t> {
        self.sq_sum().sqrt_guarded()
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let xv = self.value();
        let old: Vec<usize> = xv.shape().to_vec();
        let v = xv
            .to_shape(IxDyn(shape))
            .expect("reshape element count mismatch")
            .to_owned();
        self.unary(v, move |g| {
            g.to_shape(IxDyn(&old)).unwrap().to_owned()
        })
    }

    /// Straight-through node: forward takes `replacement`, backward passes the
    /// incoming gradient to `self` unchanged.
    pub fn straight_through(self, replacement: Arr) -> Var<'t> {
        assert_eq!(
            self.value().shape(),
            replacement.shape(),
            "straight-through shape mismatch"
        );
        self.unary(replacement, |g| g.clone())
    }

    /// Node with an externally supplied constant gradient contribution:
    /// forward emits `value` (a scalar); backward adds `grad * upstream`.
    pub fn injected_scalar(self, value: f64, grad_wrt_self: Arr) -> Var<'t> {
        assert_eq!(
            self.value().shape(),
            grad_wrt_self.shape(),
            "injected gradient shape mismatch"
        );
        let v = Arr::from_elem(IxDyn(&[]), value);
        self.unary(v, move |g| {
            let gs = *g.iter().next().unwrap();
            &grad_wrt_self * gs
        })
    }
}

/// Sums a non-empty list of same-shape vars.
pub fn add_n<'t>(vars: &[Var<'t>]) -> Var<'t> {
    assert!(!vars.is_empty(), "add_n of empty list");
    let mut acc = vars[0];
    for v in &vars[1..] {
        acc = acc.add(*v);
    }
    acc
}

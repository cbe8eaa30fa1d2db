//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! Every differentiable quantity is a node holding a dense `f64` array.
//! Forward computation records, per node, a closure that evaluates the
//! vector-Jacobian product against the node's parents; [`Tape::backward`]
//! replays those closures in reverse order and accumulates gradients for
//! every node marked as requiring them. Tapes are cheap and scoped to a
//! single forward/backward pass; parameters live outside the tape (see
//! [`crate::params::ParamStore`]) and are mounted as leaves each step.
//!
//! All values are double precision. Reduction orders are fixed, so identical
//! inputs produce bit-identical outputs in the same build.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use ndarray::{concatenate, Array2, ArrayD, Axis, Ix2, IxDyn};

use crate::error::{Error, Result};

/// Dense value carried by one tape node.
pub type Arr = ArrayD<f64>;

/// Backward closure: reads forward values through [`BackCtx`], receives the
/// gradient flowing into its node, and deposits parent contributions.
type BackFn = Box<dyn Fn(&BackCtx, &Arr, &mut GradSink)>;

struct Inner {
    values: Vec<Arr>,
    backs: Vec<Option<BackFn>>,
    wants: Vec<bool>,
}

/// Records the forward pass and replays it backward.
pub struct Tape {
    inner: RefCell<Inner>,
    bytes_now: Cell<usize>,
    bytes_peak: Cell<usize>,
}

/// Read-only view of forward values, handed to backward closures.
pub struct BackCtx<'a> {
    values: &'a [Arr],
}

impl<'a> BackCtx<'a> {
    pub(crate) fn v(&self, id: usize) -> &Arr {
        &self.values[id]
    }
}

/// Accumulates gradient contributions during the backward sweep.
pub struct GradSink<'a> {
    slots: &'a mut Vec<Option<Arr>>,
    wants: &'a [bool],
}

impl<'a> GradSink<'a> {
    pub fn wants(&self, id: usize) -> bool {
        self.wants[id]
    }

    /// Add a whole-array contribution to node `id`.
    pub fn add(&mut self, id: usize, g: Arr) {
        if !self.wants[id] {
            return;
        }
        match &mut self.slots[id] {
            Some(slot) => *slot += &g,
            none => *none = Some(g),
        }
    }

    /// In-place accumulation for scatter-style VJPs.
    pub fn with(&mut self, id: usize, shape: &[usize], f: impl FnOnce(&mut Arr)) {
        if !self.wants[id] {
            return;
        }
        let slot = self.slots[id].get_or_insert_with(|| Arr::zeros(IxDyn(shape)));
        f(slot);
    }
}

/// Gradients produced by one backward sweep, indexed by node id.
pub struct Gradients {
    slots: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.slots.get(v.id).and_then(|s| s.as_ref())
    }

    pub fn by_id(&self, id: usize) -> Option<&Arr> {
        self.slots.get(id).and_then(|s| s.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                values: Vec::new(),
                backs: Vec::new(),
                wants: Vec::new(),
            }),
            bytes_now: Cell::new(0),
            bytes_peak: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// High-water mark of value bytes held by the tape.
    pub fn peak_bytes(&self) -> usize {
        self.bytes_peak.get()
    }

    pub(crate) fn next_id(&self) -> usize {
        self.len()
    }

    pub(crate) fn wants_any(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.wants[i])
    }

    pub(crate) fn push_raw(&self, value: Arr, wants: bool, back: Option<BackFn>) -> usize {
        let bytes = value.len() * std::mem::size_of::<f64>();
        self.bytes_now.set(self.bytes_now.get() + bytes);
        if self.bytes_now.get() > self.bytes_peak.get() {
            self.bytes_peak.set(self.bytes_now.get());
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.values.len();
        inner.values.push(value);
        inner.backs.push(back);
        inner.wants.push(wants);
        id
    }

    /// Differentiable leaf (parameter or input marked differentiable).
    pub fn leaf(&self, value: Arr) -> Var<'_> {
        let id = self.push_raw(value, true, None);
        Var { tape: self, id }
    }

    /// Non-differentiable constant.
    pub fn constant(&self, value: Arr) -> Var<'_> {
        let id = self.push_raw(value, false, None);
        Var { tape: self, id }
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.constant(Arr::from_elem(IxDyn(&[]), x))
    }

    pub(crate) fn value_clone(&self, id: usize) -> Arr {
        self.inner.borrow().values[id].clone()
    }

    pub(crate) fn with_value<R>(&self, id: usize, f: impl FnOnce(&Arr) -> R) -> R {
        f(&self.inner.borrow().values[id])
    }

    /// Run the backward sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let inner = self.inner.borrow();
        let Inner {
            values,
            backs,
            wants,
        } = &*inner;
        let root_val = &values[root.id];
        if root_val.len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut slots: Vec<Option<Arr>> = vec![None; values.len()];
        slots[root.id] = Some(Arr::from_elem(root_val.raw_dim(), 1.0));
        let ctx = BackCtx { values };
        for id in (0..=root.id).rev() {
            let Some(g) = slots[id].take() else { continue };
            if let Some(back) = &backs[id] {
                let mut sink = GradSink {
                    slots: &mut slots,
                    wants,
                };
                back(&ctx, &g, &mut sink);
            }
            if wants[id] && backs[id].is_none() {
                // leaf: keep its gradient
                slots[id] = Some(g);
            }
        }
        Ok(Gradients { slots })
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_f(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-D value")
}

impl<'t> Var<'t> {
    pub(crate) fn from_raw(tape: &'t Tape, id: usize) -> Var<'t> {
        Var { tape, id }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arr {
        self.tape.value_clone(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |v| v.shape().to_vec())
    }

    pub fn scalar_value(&self) -> f64 {
        self.tape.with_value(self.id, |v| {
            debug_assert_eq!(v.len(), 1);
            *v.iter().next().expect("scalar value")
        })
    }

    /// Identity in value, blocks gradient flow.
    pub fn detach(self) -> Var<'t> {
        let v = self.value();
        self.tape.constant(v)
    }

    fn unary(self, value: Arr, back: impl Fn(&BackCtx, &Arr, &mut GradSink) + 'static) -> Var<'t> {
        let wants = self.tape.wants_any(&[self.id]);
        let id = self
            .tape
            .push_raw(value, wants, if wants { Some(Box::new(back)) } else { None });
        Var {
            tape: self.tape,
            id,
        }
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        let v = self
            .tape
            .with_value(self.id, |a| self.tape.with_value(rhs.id, |b| a + b));
        let (a, b) = (self.id, rhs.id);
        let wants = self.tape.wants_any(&[a, b]);
        let id = self.tape.push_raw(
            v,
            wants,
            wants.then(|| -> BackFn {
                Box::new(move |_ctx, g, sink| {
                    sink.add(a, g.clone());
                    sink.add(b, g.clone());
                })
            }),
        );
        Var {
            tape: self.tape,
            id,
        }
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let v = self
            .tape
            .with_value(self.id, |a| self.tape.with_value(rhs.id, |b| a - b));
        let (a, b) = (self.id, rhs.id);
        let wants = self.tape.wants_any(&[a, b]);
        let id = self.tape.push_raw(
            v,
            wants,
            wants.then(|| -> BackFn {
                Box::new(move |_ctx, g, sink| {
                    sink.add(a, g.clone());
                    sink.add(b, -g.clone());
                })
            }),
        );
        Var {
            tape: self.tape,
            id,
        }
    }

    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let v = self
            .tape
            .with_value(self.id, |a| self.tape.with_value(rhs.id, |b| a * b));
        let (a, b) = (self.id, rhs.id);
        let wants = self.tape.wants_any(&[a, b]);
        let id = self.tape.push_raw(
            v,
            wants,
            wants.then(|| -> BackFn {
                Box::new(move |ctx, g, sink| {
                    sink.add(a, g * ctx.v(b));
                    sink.add(b, g * ctx.v(a));
                })
            }),
        );
        Var {
            tape: self.tape,
            id,
        }
    }

    pub fn div(self, rhs: Var<'t>) -> Var<'t> {
        let v = self
            .tape
            .with_value(self.id, |a| self.tape.with_value(rhs.id, |b| a / b));
        let (a, b) = (self.id, rhs.id);
        let wants = self.tape.wants_any(&[a, b]);
        let id = self.tape.push_raw(
            v,
            wants,
            wants.then(|| -> BackFn {
                Box::new(move |ctx, g, sink| {
                    let vb = ctx.v(b);
                    sink.add(a, g / vb);
                    let va = ctx.v(a);
                    sink.add(b, -(g * va) / (vb * vb));
                })
            }),
        );
        Var {
            tape: self.tape,
            id,
        }
    }

    pub fn neg(self) -> Var<'t> {
        let v = self.tape.with_value(self.id, |a| -a);
        let a = self.id;
        self.unary(v, move |_ctx, g, sink| sink.add(a, -g.clone()))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.tape.with_value(self.id, |a| a + c);
        let a = self.id;
        self.unary(v, move |_ctx, g, sink| sink.add(a, g.clone()))
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        let v = self.tape.with_value(self.id, |a| a * c);
        let a = self.id;
        self.unary(v, move |_ctx, g, sink| sink.add(a, g * c))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.tape.with_value(self.id, |a| a.mapv(|x| x.max(0.0)));
        let a = self.id;
        self.unary(v, move |ctx, g, sink| {
            let mask = ctx.v(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
            sink.add(a, g * &mask);
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.tape.with_value(self.id, |x| x.mapv(sigmoid_f));
        let a = self.id;
        let out_id = self.tape.next_id();
        self.unary(v, move |ctx, g, sink| {
            let s = ctx.v(out_id);
            sink.add(a, g * &s.mapv(|x| x * (1.0 - x)));
        })
    }

    pub fn softplus(self) -> Var<'t> {
        let v = self.tape.with_value(self.id, |x| x.mapv(softplus_f));
        let a = self.id;
        self.unary(v, move |ctx, g, sink| {
            let s = ctx.v(a).mapv(sigmoid_f);
            sink.add(a, g * &s);
        })
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.tape.with_value(self.id, |x| x.mapv(f64::exp));
        let a = self.id;
        let out_id = self.tape.next_id();
        self.unary(v, move |ctx, g, sink| {
            sink.add(a, g * ctx.v(out_id));
        })
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.tape.with_value(self.id, |x| x.mapv(f64::ln));
        let a = self.id;
        self.unary(v, move |ctx, g, sink| {
            sink.add(a, g / ctx.v(a));
        })
    }

    pub fn abs(self) -> Var<'t> {
        let v = self.tape.with_value(self.id, |x| x.mapv(f64::abs));
        let a = self.id;
        self.unary(v, move |ctx, g, sink| {
            let s = ctx.v(a).mapv(|x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            sink.add(a, g * &s);
        })
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        let v = self.tape.with_value(self.id, |x| x.mapv(|e| e.powf(p)));
        let a = self.id;
        self.unary(v, move |ctx, g, sink| {
            let d = ctx.v(a).mapv(|e| p * e.powf(p - 1.0));
            sink.add(a, g * &d);
        })
    }

    /// min(x, c); gradient passes only where x < c.
    pub fn min_const(self, c: f64) -> Var<'t> {
        let v = self.tape.with_value(self.id, |x| x.mapv(|e| e.min(c)));
        let a = self.id;
        self.unary(v, move |ctx, g, sink| {
            let mask = ctx.v(a).mapv(|e| if e < c { 1.0 } else { 0.0 });
            sink.add(a, g * &mask);
        })
    }

    /// 2-D matrix product: (n,k) x (k,m) -> (n,m).
    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.tape.with_value(self.id, |a| {
            self.tape
                .with_value(rhs.id, |b| as2(a).dot(&as2(b)).into_dyn())
        });
        let (a, b) = (self.id, rhs.id);
        let wants = self.tape.wants_any(&[a, b]);
        let id = self.tape.push_raw(
            v,
            wants,
            wants.then(|| -> BackFn {
                Box::new(move |ctx, g, sink| {
                    let g2 = as2(g);
                    if sink.wants(a) {
                        let vb = ctx.v(b);
                        sink.add(a, g2.dot(&as2(vb).t()).into_dyn());
                    }
                    if sink.wants(b) {
                        let va = ctx.v(a);
                        sink.add(b, as2(va).t().dot(&g2).into_dyn());
                    }
                })
            }),
        );
        Var {
            tape: self.tape,
            id,
        }
    }

    /// Sum of all elements -> 0-d scalar.
    pub fn sum(self) -> Var<'t> {
        let (v, shape) = self
            .tape
            .with_value(self.id, |x| (x.sum(), x.shape().to_vec()));
        let a = self.id;
        self.unary(
            Arr::from_elem(IxDyn(&[]), v),
            move |_ctx, g, sink| {
                let gv = g[[]];
                sink.add(a, Arr::from_elem(IxDyn(&shape), gv));
            },
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.tape.with_value(self.id, |x| x.len().max(1));
        self.sum().mul_scalar(1.0 / n as f64)
    }

    /// Column sums of an (n,d) matrix -> (1,d).
    pub fn sum_rows(self) -> Var<'t> {
        let v = self.tape.with_value(self.id, |x| {
            let x2 = as2(x);
            x2.sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn()
        });
        let a = self.id;
        let n = self.tape.with_value(self.id, |x| x.shape()[0]);
        self.unary(v, move |_ctx, g, sink| {
            let g2 = as2(g);
            let row = g2.row(0);
            let d = row.len();
            sink.with(a, &[n, d], |slot| {
                let mut s2 = slot.view_mut().into_dimensionality::<Ix2>().unwrap();
                for mut r in s2.rows_mut() {
                    for (j, val) in row.iter().enumerate() {
                        r[j] += *val;
                    }
                }
            });
        })
    }

    pub fn mean_rows(self) -> Var<'t> {
        let n = self.tape.with_value(self.id, |x| x.shape()[0].max(1));
        self.sum_rows().mul_scalar(1.0 / n as f64)
    }

    /// Repeat a (1,d) row n times -> (n,d).
    pub fn broadcast_rows(self, n: usize) -> Var<'t> {
        let v = self.tape.with_value(self.id, |x| {
            let x2 = as2(x);
            let d = x2.shape()[1];
            let mut out = Array2::<f64>::zeros((n, d));
            for mut r in out.rows_mut() {
                r.assign(&x2.row(0));
            }
            out.into_dyn()
        });
        let a = self.id;
        self.unary(v, move |_ctx, g, sink| {
            let g2 = as2(g);
            let summed = g2.sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn();
            sink.add(a, summed);
        })
    }

    /// Row gather: out[i] = x[idx[i]].
    pub fn gather_rows(self, idx: Rc<Vec<u32>>) -> Var<'t> {
        let v = self.tape.with_value(self.id, |x| {
            let x2 = as2(x);
            let d = x2.shape()[1];
            let mut out = Array2::<f64>::zeros((idx.len(), d));
            for (i, &r) in idx.iter().enumerate() {
                out.row_mut(i).assign(&x2.row(r as usize));
            }
            out.into_dyn()
        });
        let a = self.id;
        let n = self.tape.with_value(self.id, |x| x.shape()[0]);
        let d = self.tape.with_value(self.id, |x| x.shape()[1]);
        let idx_b = idx.clone();
        self.unary(v, move |_ctx, g, sink| {
            let g2 = as2(g);
            sink.with(a, &[n, d], |slot| {
                let mut s2 = slot.view_mut().into_dimensionality::<Ix2>().unwrap();
                for (i, &r) in idx_b.iter().enumerate() {
                    let gr = g2.row(i);
                    let mut sr = s2.row_mut(r as usize);
                    for j in 0..d {
                        sr[j] += gr[j];
                    }
                }
            });
        })
    }

    /// Row scatter-add: out has `out_rows` rows, out[idx[i]] += x[i].
    pub fn scatter_add_rows(self, idx: Rc<Vec<u32>>, out_rows: usize) -> Var<'t> {
        let v = self.tape.with_value(self.id, |x| {
            let x2 = as2(x);
            let d = x2.shape()[1];
            let mut out = Array2::<f64>::zeros((out_rows, d));
            for (i, &r) in idx.iter().enumerate() {
                let xr = x2.row(i);
                let mut or = out.row_mut(r as usize);
                for j in 0..d {
                    or[j] += xr[j];
                }
            }
            out.into_dyn()
        });
        let a = self.id;
        let idx_b = idx.clone();
        self.unary(v, move |_ctx, g, sink| {
            let g2 = as2(g);
            let d = g2.shape()[1];
            let mut out = Array2::<f64>::zeros((idx_b.len(), d));
            for (i, &r) in idx_b.iter().enumerate() {
                out.row_mut(i).assign(&g2.row(r as usize));
            }
            sink.add(a, out.into_dyn());
        })
    }

    /// Scale each row of (n,d) by the matching scalar of (n,1).
    pub fn scale_rows(self, s: Var<'t>) -> Var<'t> {
        let v = self.tape.with_value(self.id, |x| {
            self.tape.with_value(s.id, |sv| {
                let x2 = as2(x);
                let s2 = as2(sv);
                let mut out = x2.to_owned();
                for (i, mut r) in out.rows_mut().into_iter().enumerate() {
                    let f = s2[[i, 0]];
                    r.mapv_inplace(|e| e * f);
                }
                out.into_dyn()
            })
        });
        let (a, b) = (self.id, s.id);
        let wants = self.tape.wants_any(&[a, b]);
        let id = self.tape.push_raw(
            v,
            wants,
            wants.then(|| -> BackFn {
                Box::new(move |ctx, g, sink| {
                    let g2 = as2(g);
                    if sink.wants(a) {
                        let s2v = ctx.v(b);
                        let s2 = as2(s2v);
                        let mut out = g2.to_owned();
                        for (i, mut r) in out.rows_mut().into_iter().enumerate() {
                            let f = s2[[i, 0]];
                            r.mapv_inplace(|e| e * f);
                        }
                        sink.add(a, out.into_dyn());
                    }
                    if sink.wants(b) {
                        let xv = ctx.v(a);
                        let x2 = as2(xv);
                        let n = x2.shape()[0];
                        let mut out = Array2::<f64>::zeros((n, 1));
                        for i in 0..n {
                            out[[i, 0]] = x2.row(i).dot(&g2.row(i));
                        }
                        sink.add(b, out.into_dyn());
                    }
                })
            }),
        );
        Var {
            tape: self.tape,
            id,
        }
    }

    /// Gather arbitrary flat elements -> (m,1).
    pub fn select_flat(self, idx: Rc<Vec<usize>>) -> Var<'t> {
        let v = self.tape.with_value(self.id, |x| {
            let flat = x.as_slice().expect("contiguous");
            let mut out = Array2::<f64>::zeros((idx.len(), 1));
            for (i, &k) in idx.iter().enumerate() {
                out[[i, 0]] = flat[k];
            }
            out.into_dyn()
        });
        let a = self.id;
        let shape = self.shape();
        let idx_b = idx.clone();
        self.unary(v, move |_ctx, g, sink| {
            let g2 = as2(g);
            sink.with(a, &shape, |slot| {
                let flat = slot.as_slice_mut().expect("contiguous");
                for (i, &k) in idx_b.iter().enumerate() {
                    flat[k] += g2[[i, 0]];
                }
            });
        })
    }

    /// Same data, new shape (element count preserved).
    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let new_shape = shape.to_vec();
        let v = self.tape.with_value(self.id, |x| {
            x.clone()
                .into_shape_with_order(IxDyn(&new_shape))
                .expect("reshape element count")
        });
        let a = self.id;
        let old_shape = self.shape();
        self.unary(v, move |_ctx, g, sink| {
            let back = g
                .clone()
                .into_shape_with_order(IxDyn(&old_shape))
                .expect("reshape gradient");
            sink.add(a, back);
        })
    }

    /// Extract column j of (n,m) -> (n,1).
    pub fn col(self, j: usize) -> Var<'t> {
        let v = self.tape.with_value(self.id, |x| {
            let x2 = as2(x);
            x2.column(j).to_owned().insert_axis(Axis(1)).into_dyn()
        });
        let a = self.id;
        let shape = self.shape();
        self.unary(v, move |_ctx, g, sink| {
            let g2 = as2(g);
            sink.with(a, &shape, |slot| {
                let mut s2 = slot.view_mut().into_dimensionality::<Ix2>().unwrap();
                for i in 0..g2.shape()[0] {
                    s2[[i, j]] += g2[[i, 0]];
                }
            });
        })
    }

    /// Row-wise log-softmax of (n,c).
    pub fn log_softmax_rows(self) -> Var<'t> {
        let v = self.tape.with_value(self.id, |x| {
            let x2 = as2(x);
            let mut out = x2.to_owned();
            for mut r in out.rows_mut() {
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + r.iter().map(|&e| (e - m).exp()).sum::<f64>().ln();
                r.mapv_inplace(|e| e - lse);
            }
            out.into_dyn()
        });
        let a = self.id;
        let out_id = self.tape.next_id();
        self.unary(v, move |ctx, g, sink| {
            let out = as2(ctx.v(out_id));
            let g2 = as2(g);
            let mut dx = g2.to_owned();
            for (i, mut r) in dx.rows_mut().into_iter().enumerate() {
                let gsum: f64 = g2.row(i).sum();
                for (j, e) in r.iter_mut().enumerate() {
                    *e -= out[[i, j]].exp() * gsum;
                }
            }
            sink.add(a, dx.into_dyn());
        })
    }

    /// Row-wise masked softmax of (n,m); masked-out entries get probability 0,
    /// fully masked rows become all-zero.
    pub fn masked_softmax_rows(self, mask: Rc<Vec<bool>>) -> Var<'t> {
        let v = self.tape.with_value(self.id, |x| {
            let x2 = as2(x);
            let (n, m) = (x2.shape()[0], x2.shape()[1]);
            let mut out = Array2::<f64>::zeros((n, m));
            for i in 0..n {
                let mut mx = f64::NEG_INFINITY;
                for j in 0..m {
                    if mask[i * m + j] {
                        mx = mx.max(x2[[i, j]]);
                    }
                }
                if mx == f64::NEG_INFINITY {
                    continue;
                }
                let mut z = 0.0;
                for j in 0..m {
                    if mask[i * m + j] {
                        z += (x2[[i, j]] - mx).exp();
                    }
                }
                for j in 0..m {
                    if mask[i * m + j] {
                        out[[i, j]] = (x2[[i, j]] - mx).exp() / z;
                    }
                }
            }
            out.into_dyn()
        });
        let a = self.id;
        let out_id = self.tape.next_id();
        self.unary(v, move |ctx, g, sink| {
            let p = as2(ctx.v(out_id));
            let g2 = as2(g);
            let (n, m) = (p.shape()[0], p.shape()[1]);
            let mut dx = Array2::<f64>::zeros((n, m));
            for i in 0..n {
                let dot: f64 = (0..m).map(|j| p[[i, j]] * g2[[i, j]]).sum();
                for j in 0..m {
                    dx[[i, j]] = p[[i, j]] * (g2[[i, j]] - dot);
                }
            }
            sink.add(a, dx.into_dyn());
        })
    }

    /// Per-row binary cross-entropy with logits against constant targets (n,1).
    pub fn bce_with_logits(self, targets: Rc<Vec<f64>>) -> Var<'t> {
        let v = self.tape.with_value(self.id, |x| {
            let x2 = as2(x);
            let mut out = Array2::<f64>::zeros((x2.shape()[0], 1));
            for i in 0..x2.shape()[0] {
                let z = x2[[i, 0]];
                let t = targets[i];
                out[[i, 0]] = z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
            }
            out.into_dyn()
        });
        let a = self.id;
        let t_b = targets.clone();
        self.unary(v, move |ctx, g, sink| {
            let x2 = as2(ctx.v(a));
            let g2 = as2(g);
            let mut dx = Array2::<f64>::zeros((x2.shape()[0], 1));
            for i in 0..x2.shape()[0] {
                dx[[i, 0]] = g2[[i, 0]] * (sigmoid_f(x2[[i, 0]]) - t_b[i]);
            }
            sink.add(a, dx.into_dyn());
        })
    }
}

/// Concatenate along axis 0 (rows).
pub fn concat_rows<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let views: Vec<Arr> = parts.iter().map(|p| p.value()).collect();
    let v = concatenate(
        Axis(0),
        &views.iter().map(|a| a.view()).collect::<Vec<_>>(),
    )
    .expect("concat_rows shape");
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let sizes: Vec<usize> = views.iter().map(|a| a.shape()[0]).collect();
    let wants = tape.wants_any(&ids);
    let id = tape.push_raw(
        v,
        wants,
        wants.then(|| -> BackFn {
            let ids = ids.clone();
            let sizes = sizes.clone();
            Box::new(move |_ctx, g, sink| {
                let mut off = 0;
                for (pid, &n) in ids.iter().zip(&sizes) {
                    let part = g
                        .slice_axis(Axis(0), ndarray::Slice::from(off..off + n))
                        .to_owned();
                    sink.add(*pid, part);
                    off += n;
                }
            })
        }),
    );
    Var { tape, id }
}

/// Concatenate along axis 1 (columns) of 2-D values.
pub fn concat_cols<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let views: Vec<Arr> = parts.iter().map(|p| p.value()).collect();
    let v = concatenate(
        Axis(1),
        &views.iter().map(|a| a.view()).collect::<Vec<_>>(),
    )
    .expect("concat_cols shape");
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let sizes: Vec<usize> = views.iter().map(|a| a.shape()[1]).collect();
    let wants = tape.wants_any(&ids);
    let id = tape.push_raw(
        v,
        wants,
        wants.then(|| -> BackFn {
            let ids = ids.clone();
            let sizes = sizes.clone();
            Box::new(move |_ctx, g, sink| {
                let mut off = 0;
                for (pid, &n) in ids.iter().zip(&sizes) {
                    let part = g
                        .slice_axis(Axis(1), ndarray::Slice::from(off..off + n))
                        .to_owned();
                    sink.add(*pid, part);
                    off += n;
                }
            })
        }),
    );
    Var { tape, id }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn scalar_grad<'t>(tape: &'t Tape, loss: Var<'t>, x: Var<'t>) -> Arr {
        tape.backward(loss).unwrap().get(x).unwrap().clone()
    }

    #[test]
    fn add_mul_chain() {
        let tape = Tape::new();
        let x = tape.leaf(arr2(&[[2.0, 3.0]]).into_dyn());
        let y = x.mul(x).add(x.mul_scalar(4.0)); // x^2 + 4x
        let loss = y.sum();
        let g = scalar_grad(&tape, loss, x);
        // d/dx = 2x + 4
        assert_eq!(g[[0, 0]], 8.0);
        assert_eq!(g[[0, 1]], 10.0);
    }

    #[test]
    fn matmul_grad_matches_manual() {
        let tape = Tape::new();
        let a = tape.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = tape.leaf(arr2(&[[5.0], [6.0]]).into_dyn());
        let loss = a.matmul(b).sum();
        let grads = tape.backward(loss).unwrap();
        let ga = grads.get(a).unwrap();
        let gb = grads.get(b).unwrap();
        assert_eq!(ga[[0, 0]], 5.0);
        assert_eq!(ga[[1, 1]], 6.0);
        assert_eq!(gb[[0, 0]], 4.0); // 1 + 3
        assert_eq!(gb[[1, 0]], 6.0); // 2 + 4
    }

    #[test]
    fn gather_scatter_roundtrip_grads() {
        let tape = Tape::new();
        let x = tape.leaf(arr2(&[[1.0], [2.0], [3.0]]).into_dyn());
        let idx = Rc::new(vec![2u32, 0, 2]);
        let g = x.gather_rows(idx.clone());
        let loss = g.sum();
        let gx = scalar_grad(&tape, loss, x);
        assert_eq!(gx[[0, 0]], 1.0);
        assert_eq!(gx[[1, 0]], 0.0);
        assert_eq!(gx[[2, 0]], 2.0);

        let tape2 = Tape::new();
        let y = tape2.leaf(arr2(&[[1.0], [2.0], [3.0]]).into_dyn());
        let s = y.scatter_add_rows(Rc::new(vec![1u32, 1, 0]), 2);
        let sv = s.value();
        assert_eq!(sv[[0, 0]], 3.0);
        assert_eq!(sv[[1, 0]], 3.0);
        let gy = scalar_grad(&tape2, s.sum(), y);
        assert!(gy.iter().all(|&e| e == 1.0));
    }

    #[test]
    fn log_softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.leaf(arr2(&[[0.3, -1.2, 2.0]]).into_dyn());
        let ls = x.log_softmax_rows();
        let p: f64 = ls.value().iter().map(|&e| e.exp()).sum();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_ignores_masked() {
        let tape = Tape::new();
        let x = tape.leaf(arr2(&[[1.0, 100.0, 2.0]]).into_dyn());
        let p = x.masked_softmax_rows(Rc::new(vec![true, false, true]));
        let v = p.value();
        assert_eq!(v[[0, 1]], 0.0);
        assert!((v[[0, 0]] + v[[0, 2]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_rows_pass_through() {
        let tape = Tape::new();
        let x = tape.leaf(Array2::<f64>::zeros((0, 3)).into_dyn());
        let g = x.gather_rows(Rc::new(vec![]));
        assert_eq!(g.shape(), vec![0, 3]);
        let s = g.scatter_add_rows(Rc::new(vec![]), 4);
        assert_eq!(s.shape(), vec![4, 3]);
        assert!(s.value().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf(arr2(&[[1.0, 2.0]]).into_dyn());
        assert!(tape.backward(x).is_err());
    }
}

//! Minimal reverse-mode autodiff over `ndarray` in f64.
//!
//! A [`Tape`] is a per-forward-pass arena of nodes; every op allocates a
//! fresh standard-layout array, so values can always be viewed as 2-D blocks
//! for matrix products. Backward functions are closures capturing cheap
//! `ArcArray` clones of whatever context they need. Evaluation order is
//! fixed (node ids are topological), which makes gradients bit-reproducible
//! across runs.

use std::cell::RefCell;

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, ArcArray, Array2, ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};

pub type Array = ArrayD<f64>;
pub type SharedArray = ArcArray<f64, IxDyn>;

type BackFn = Box<dyn Fn(&Array) -> Vec<Array>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackFn>,
}

/// Arena of one forward pass. Dropping the tape frees all intermediates.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tape node and its value.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    value: SharedArray,
}

/// Gradients by node id after a backward pass. Only leaves keep theirs;
/// interior gradients are dropped as soon as they are consumed.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Array> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn by_id(&self, id: usize) -> Option<&Array> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, value: Array, parents: Vec<usize>, backward: Option<BackFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { parents, backward });
        Var {
            tape: self,
            id,
            value: value.into_shared(),
        }
    }

    /// Introduces a leaf (parameter or input). Leaves accumulate gradients.
    pub fn leaf(&self, value: SharedArray) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            tape: self,
            id,
            value,
        }
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: &Var<'_>) -> Gradients {
        assert_eq!(loss.value.len(), 1, "backward needs a scalar loss");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Array::ones(loss.value.raw_dim()));
        for id in (0..=loss.id).rev() {
            if grads[id].is_none() {
                continue;
            }
            let node = &nodes[id];
            let Some(back) = node.backward.as_ref() else {
                continue; // leaf: keep its gradient
            };
            let g = grads[id].take().unwrap();
            let contributions = back(&g);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (&pid, c) in node.parents.iter().zip(contributions) {
                match &mut grads[pid] {
                    Some(acc) => *acc += &c,
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Gradients { grads }
    }
}

fn as2(a: &SharedArray) -> ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality()
        .expect("expected a 2-D value")
}

fn as2_arr(a: &Array) -> ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality()
        .expect("expected a 2-D value")
}

fn as1(a: &SharedArray) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality().expect("expected 1-D value")
}

fn to_standard(a: &SharedArray) -> Array {
    if a.is_standard_layout() {
        a.to_owned()
    } else {
        Array::from_shape_vec(a.raw_dim(), a.iter().copied().collect()).unwrap()
    }
}

/// Sums `g` down to `shape` following numpy-style trailing alignment.
fn reduce_to_shape(g: &Array, shape: &[usize]) -> Array {
    let mut out = g.to_owned();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    let dims = out.shape().to_vec();
    for (ax, (&od, &sd)) in dims.iter().zip(shape).enumerate() {
        if sd == 1 && od != 1 {
            let collapsed = out.sum_axis(Axis(ax));
            out = collapsed.insert_axis(Axis(ax));
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> &SharedArray {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.value.len(), 1);
        *self.value.iter().next().unwrap()
    }

    /// Re-introduces this value as a fresh leaf: same data, no gradient flow
    /// back to the original node.
    pub fn detach(&self) -> Var<'t> {
        self.tape.leaf(self.value.clone())
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&self, rhs: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value.clone(), rhs.value.clone());
        let (av, bv) = (as2(&a), as2(&b));
        let mut out = Array2::<f64>::zeros((av.nrows(), bv.ncols()));
        general_mat_mul(1.0, &av, &bv, 0.0, &mut out);
        self.tape.push(
            out.into_dyn(),
            vec![self.id, rhs.id],
            Some(Box::new(move |g| {
                let gv = as2_arr(g);
                let (av, bv) = (as2(&a), as2(&b));
                let mut ga = Array2::<f64>::zeros((av.nrows(), av.ncols()));
                general_mat_mul(1.0, &gv, &bv.t(), 0.0, &mut ga);
                let mut gb = Array2::<f64>::zeros((bv.nrows(), bv.ncols()));
                general_mat_mul(1.0, &av.t(), &gv, 0.0, &mut gb);
                vec![ga.into_dyn(), gb.into_dyn()]
            })),
        )
    }

    /// Batched matmul over identical leading axes: `[.., m, k] x [.., k, n]`.
    pub fn bmm(&self, rhs: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value.clone(), rhs.value.clone());
        let rank = a.ndim();
        assert!(rank >= 2 && rank == b.ndim(), "bmm rank mismatch");
        assert_eq!(&a.shape()[..rank - 2], &b.shape()[..rank - 2]);
        let lead: usize = a.shape()[..rank - 2].iter().product();
        let (m, k) = (a.shape()[rank - 2], a.shape()[rank - 1]);
        let n = b.shape()[b.ndim() - 1];
        assert_eq!(k, b.shape()[rank - 2], "bmm inner dimension mismatch");

        let out_shape: Vec<usize> = a.shape()[..rank - 2].iter().copied().chain([m, n]).collect();
        let mut out = Array::zeros(IxDyn(&out_shape));
        {
            let a3 = a.view().into_shape_with_order((lead, m, k)).unwrap();
            let b3 = b.view().into_shape_with_order((lead, k, n)).unwrap();
            let mut o3 = out.view_mut().into_shape_with_order((lead, m, n)).unwrap();
            for l in 0..lead {
                let mut ov: ArrayViewMut2<f64> = o3.index_axis_mut(Axis(0), l);
                general_mat_mul(
                    1.0,
                    &a3.index_axis(Axis(0), l),
                    &b3.index_axis(Axis(0), l),
                    0.0,
                    &mut ov,
                );
            }
        }
        self.tape.push(
            out,
            vec![self.id, rhs.id],
            Some(Box::new(move |g| {
                let a3 = a.view().into_shape_with_order((lead, m, k)).unwrap();
                let b3 = b.view().into_shape_with_order((lead, k, n)).unwrap();
                let g3 = g.view().into_shape_with_order((lead, m, n)).unwrap();
                let mut ga = Array::zeros(a.raw_dim());
                let mut gb = Array::zeros(b.raw_dim());
                {
                    let mut ga3 = ga.view_mut().into_shape_with_order((lead, m, k)).unwrap();
                    let mut gb3 = gb.view_mut().into_shape_with_order((lead, k, n)).unwrap();
                    for l in 0..lead {
                        let gl = g3.index_axis(Axis(0), l);
                        let mut gav = ga3.index_axis_mut(Axis(0), l);
                        general_mat_mul(1.0, &gl, &b3.index_axis(Axis(0), l).t(), 0.0, &mut gav);
                        let mut gbv = gb3.index_axis_mut(Axis(0), l);
                        general_mat_mul(1.0, &a3.index_axis(Axis(0), l).t(), &gl, 0.0, &mut gbv);
                    }
                }
                vec![ga, gb]
            })),
        )
    }

    pub fn add(&self, rhs: &Var<'t>) -> Var<'t> {
        assert_eq!(self.shape(), rhs.shape());
        let out = &self.value.to_owned() + &rhs.value;
        self.tape.push(
            out,
            vec![self.id, rhs.id],
            Some(Box::new(move |g| vec![g.clone(), g.clone()])),
        )
    }

    /// `self + rhs` where `rhs` broadcasts over leading/size-1 axes.
    pub fn add_broadcast(&self, rhs: &Var<'t>) -> Var<'t> {
        let rhs_shape: Vec<usize> = rhs.shape().to_vec();
        let b = rhs
            .value
            .broadcast(self.value.raw_dim())
            .expect("broadcast shape mismatch");
        let out = &self.value.view() + &b;
        self.tape.push(
            out,
            vec![self.id, rhs.id],
            Some(Box::new(move |g| {
                vec![g.clone(), reduce_to_shape(g, &rhs_shape)]
            })),
        )
    }

    /// Element-wise product with broadcasting on the right operand.
    pub fn mul_broadcast(&self, rhs: &Var<'t>) -> Var<'t> {
        let rhs_shape: Vec<usize> = rhs.shape().to_vec();
        let (a, b) = (self.value.clone(), rhs.value.clone());
        let bb = b.broadcast(a.raw_dim()).expect("broadcast shape mismatch");
        let out = &a.view() * &bb;
        self.tape.push(
            out,
            vec![self.id, rhs.id],
            Some(Box::new(move |g| {
                let bb = b.broadcast(a.raw_dim()).unwrap();
                let ga = g * &bb;
                let gb_full = g * &a.view();
                vec![ga, reduce_to_shape(&gb_full, &rhs_shape)]
            })),
        )
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = self.value.to_owned() * c;
        self.tape
            .push(out, vec![self.id], Some(Box::new(move |g| vec![g * c])))
    }

    /// Adds a constant array (no gradient through the constant).
    pub fn add_const(&self, c: &Array) -> Var<'t> {
        let b = c.broadcast(self.value.raw_dim()).expect("mask shape");
        let out = &self.value.view() + &b;
        self.tape
            .push(out, vec![self.id], Some(Box::new(move |g| vec![g.clone()])))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let std = to_standard(&self.value);
        let in_shape: Vec<usize> = self.shape().to_vec();
        let out = std
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |g| {
                vec![g
                    .to_owned()
                    .into_shape_with_order(IxDyn(&in_shape))
                    .unwrap()]
            })),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'t> {
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        let permuted = self.value.view().permuted_axes(IxDyn(axes));
        let out = Array::from_shape_vec(permuted.raw_dim(), permuted.iter().copied().collect())
            .unwrap();
        self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |g| {
                let gp = g.view().permuted_axes(IxDyn(&inverse));
                vec![Array::from_shape_vec(gp.raw_dim(), gp.iter().copied().collect()).unwrap()]
            })),
        )
    }

    /// Cyclic shift along `axis`; element `i` moves to `(i + shift) % n`.
    pub fn roll(&self, axis: usize, shift: usize) -> Var<'t> {
        let n = self.shape()[axis];
        let s = shift % n;
        if s == 0 {
            return self.reshape(&self.shape().to_vec());
        }
        let v = self.value.view();
        let front = v.slice_axis(Axis(axis), ndarray::Slice::from((n - s) as isize..));
        let back = v.slice_axis(Axis(axis), ndarray::Slice::from(..(n - s) as isize));
        let out = concatenate(Axis(axis), &[front, back]).unwrap();
        self.tape.push(
            out.as_standard_layout().to_owned(),
            vec![self.id],
            Some(Box::new(move |g| {
                let gv = g.view();
                let front = gv.slice_axis(Axis(axis), ndarray::Slice::from(s as isize..));
                let back = gv.slice_axis(Axis(axis), ndarray::Slice::from(..s as isize));
                vec![concatenate(Axis(axis), &[front, back])
                    .unwrap()
                    .as_standard_layout()
                    .to_owned()]
            })),
        )
    }

    pub fn sum_axis(&self, axis: usize) -> Var<'t> {
        let in_shape: Vec<usize> = self.shape().to_vec();
        let out = self.value.sum_axis(Axis(axis));
        self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |g| {
                let expanded = g.view().insert_axis(Axis(axis));
                vec![expanded.broadcast(IxDyn(&in_shape)).unwrap().to_owned()]
            })),
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Var<'t> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    pub fn sum_all(&self) -> Var<'t> {
        let in_shape: Vec<usize> = self.shape().to_vec();
        let out = ndarray::arr0(self.value.sum()).into_dyn();
        self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |g| {
                let s = *g.iter().next().unwrap();
                vec![Array::from_elem(IxDyn(&in_shape), s)]
            })),
        )
    }

    pub fn mean_all(&self) -> Var<'t> {
        let n = self.value.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&self) -> Var<'t> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let x = self.value.clone();
        let out = x.mapv(|v| 0.5 * v * (1.0 + (C * (v + A * v * v * v)).tanh()));
        self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |g| {
                let dx = x.mapv(|v| {
                    let t = (C * (v + A * v * v * v)).tanh();
                    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * C * (1.0 + 3.0 * A * v * v)
                });
                vec![g * &dx]
            })),
        )
    }

    /// Numerically stable softplus, `ln(1 + e^x)`.
    pub fn softplus(&self) -> Var<'t> {
        let x = self.value.clone();
        let out = x.mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |g| {
                let dx = x.mapv(|v| 1.0 / (1.0 + (-v).exp()));
                vec![g * &dx]
            })),
        )
    }

    /// Softmax over the last axis; `-inf` scores yield exact zero weights.
    pub fn softmax_last(&self) -> Var<'t> {
        let last = self.value.ndim() - 1;
        let mut out = to_standard(&self.value);
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let y = out.to_shared();
        self.tape.push(
            y.to_owned(),
            vec![self.id],
            Some(Box::new(move |g| {
                let gy = g * &y.view();
                let dot = gy.sum_axis(Axis(last)).insert_axis(Axis(last));
                let dotb = dot.broadcast(y.raw_dim()).unwrap().to_owned();
                let gx = &gy - &(&dotb * &y.view());
                vec![gx]
            })),
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Var<'t> {
        let d = *self.shape().last().unwrap();
        assert_eq!(gamma.shape(), [d]);
        assert_eq!(beta.shape(), [d]);
        let x = to_standard(&self.value);
        let rows = x.len() / d;
        let x2 = x.view().into_shape_with_order((rows, d)).unwrap();
        let mut xhat = Array2::<f64>::zeros((rows, d));
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = x2.row(r);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let gamma_v = gamma.value.clone();
        let gam = as1(&gamma_v);
        let bet = as1(&beta.value);
        let mut out = Array2::<f64>::zeros((rows, d));
        for r in 0..rows {
            for c in 0..d {
                out[[r, c]] = xhat[[r, c]] * gam[c] + bet[c];
            }
        }
        let out = out.into_shape_with_order(self.value.raw_dim()).unwrap();
        let xhat_s = xhat.to_shared();
        let shape = self.value.raw_dim();
        self.tape.push(
            out,
            vec![self.id, gamma.id, beta.id],
            Some(Box::new(move |g| {
                let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
                let gam = as1(&gamma_v);
                let mut gx = Array2::<f64>::zeros((rows, d));
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for r in 0..rows {
                    let is = inv_std[r];
                    let mut mean_gg = 0.0;
                    let mut mean_ggx = 0.0;
                    for c in 0..d {
                        let gg = g2[[r, c]] * gam[c];
                        mean_gg += gg;
                        mean_ggx += gg * xhat_s[[r, c]];
                        ggamma[c] += g2[[r, c]] * xhat_s[[r, c]];
                        gbeta[c] += g2[[r, c]];
                    }
                    mean_gg /= d as f64;
                    mean_ggx /= d as f64;
                    for c in 0..d {
                        let gg = g2[[r, c]] * gam[c];
                        gx[[r, c]] = (gg - mean_gg - xhat_s[[r, c]] * mean_ggx) * is;
                    }
                }
                vec![
                    gx.into_shape_with_order(shape.clone()).unwrap(),
                    Array::from_shape_vec(IxDyn(&[d]), ggamma).unwrap(),
                    Array::from_shape_vec(IxDyn(&[d]), gbeta).unwrap(),
                ]
            })),
        )
    }

    /// Row gather: `table[ids[i], :]` stacked into `[ids.len(), d]`.
    pub fn embedding(&self, ids: &[usize]) -> Var<'t> {
        let table = self.value.clone();
        let t2 = as2(&table);
        let (v, d) = (t2.nrows(), t2.ncols());
        let mut out = Array2::<f64>::zeros((ids.len(), d));
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < v, "token id {id} out of embedding range {v}");
            out.row_mut(r).assign(&t2.row(id));
        }
        let ids_v: Vec<usize> = ids.to_vec();
        self.tape.push(
            out.into_dyn(),
            vec![self.id],
            Some(Box::new(move |g| {
                let g2 = as2_arr(g);
                let mut gt = Array2::<f64>::zeros((v, d));
                for (r, &id) in ids_v.iter().enumerate() {
                    let mut dst = gt.row_mut(id);
                    dst += &g2.row(r);
                }
                vec![gt.into_dyn()]
            })),
        )
    }

    /// Mean cross-entropy over rows where `mask` is true. Logits are
    /// `[n, c]`; targets are class indices. An all-masked batch yields 0.
    pub fn cross_entropy_mean(&self, targets: &[usize], mask: &[bool]) -> Var<'t> {
        let logits = self.value.clone();
        let l2 = as2(&logits);
        let (n, c) = (l2.nrows(), l2.ncols());
        assert_eq!(targets.len(), n);
        assert_eq!(mask.len(), n);
        let m = mask.iter().filter(|&&b| b).count();
        if m == 0 {
            log::warn!("cross entropy over an all-padded batch is defined as 0");
            return self.sum_all().scale(0.0);
        }
        let mut loss = 0.0;
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            let row = l2.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[targets[r]];
        }
        loss /= m as f64;
        let targets_v = targets.to_vec();
        let mask_v = mask.to_vec();
        self.tape.push(
            ndarray::arr0(loss).into_dyn(),
            vec![self.id],
            Some(Box::new(move |g| {
                let gs = *g.iter().next().unwrap() / m as f64;
                let l2 = as2(&logits);
                let mut gx = Array2::<f64>::zeros((n, c));
                for r in 0..n {
                    if !mask_v[r] {
                        continue;
                    }
                    let row = l2.row(r);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter() {
                        sum += (v - max).exp();
                    }
                    for (j, v) in row.iter().enumerate() {
                        let p = (v - max).exp() / sum;
                        gx[[r, j]] = gs * (p - f64::from(targets_v[r] == j));
                    }
                }
                vec![gx.into_dyn()]
            })),
        )
    }

    /// Mean smooth-L1 against a constant target: quadratic inside the unit
    /// residual, linear outside.
    pub fn smooth_l1_mean(&self, target: &Array) -> Var<'t> {
        assert_eq!(self.shape(), target.shape());
        let pred = self.value.clone();
        let numel = pred.len() as f64;
        let mut loss = 0.0;
        for (p, t) in pred.iter().zip(target.iter()) {
            let r = (p - t).abs();
            loss += if r < 1.0 { 0.5 * r * r } else { r - 0.5 };
        }
        loss /= numel;
        let target_v = target.to_shared();
        self.tape.push(
            ndarray::arr0(loss).into_dyn(),
            vec![self.id],
            Some(Box::new(move |g| {
                let gs = *g.iter().next().unwrap() / numel;
                let mut gx = Array::zeros(pred.raw_dim());
                for ((o, p), t) in gx.iter_mut().zip(pred.iter()).zip(target_v.iter()) {
                    *o = gs * (p - t).clamp(-1.0, 1.0);
                }
                vec![gx]
            })),
        )
    }
}

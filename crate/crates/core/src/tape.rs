//! Reverse-mode automatic differentiation on dynamic-dimension `f64` arrays.
//!
//! A [`Tape`] records every operation as a node holding its forward value and
//! a closure that maps the output gradient to per-parent gradient
//! contributions. [`Tape::backward`] walks the nodes in reverse creation
//! order, so gradient accumulation order is fixed and runs are deterministic.
//!
//! Forward values are computed by the same kernels in [`crate::tensor`] that
//! the plain inference path uses, which keeps the two paths numerically
//! aligned.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use crate::parallel;
use crate::tensor;

type Value = Rc<ArrayD<f64>>;
type BackFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<(usize, ArrayD<f64>)>>;

struct Node {
    value: Value,
    back: Option<BackFn>,
}

#[derive(Clone)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct GradStore {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradStore {
    /// Gradient of the backward root with respect to `v`, if any path exists.
    pub fn wrt(&self, v: &Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Rc::new(RefCell::new(Vec::new())) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f64>, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), back });
        Var { tape: self.clone(), id: nodes.len() - 1 }
    }

    /// Register an input. Leaves have no parents; gradients can still be
    /// queried for them after `backward`.
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Reverse pass from a scalar root. Returns gradients for every node that
    /// influences the root.
    pub fn backward(&self, root: &Var) -> GradStore {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::new();
        grads.resize_with(root.id + 1, || None);
        grads[root.id] = Some(ArrayD::from_elem(nodes[root.id].value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &nodes[id].back {
                for (pid, contrib) in back(&g) {
                    match &mut grads[pid] {
                        Some(acc) => *acc += &contrib,
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[id] = Some(g);
        }
        GradStore { grads }
    }
}

fn same_tape(a: &Var, b: &Var) {
    assert!(Rc::ptr_eq(&a.tape.nodes, &b.tape.nodes), "vars from different tapes");
}

impl Var {
    pub fn value(&self) -> Value {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a 1-element node.
    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar_value on non-scalar");
        *v.iter().next().unwrap()
    }

    // ---- elementwise binary ----------------------------------------------

    pub fn add(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a + b, |g, _, _| g.clone(), |g, _, _| g.clone())
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a - b, |g, _, _| g.clone(), |g, _, _| -g)
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.binary(
            other,
            |a, b| a * b,
            |g, _, b| g * b,
            |g, a, _| g * a,
        )
    }

    pub fn div(&self, other: &Var) -> Var {
        self.binary(
            other,
            |a, b| a / b,
            |g, _, b| g / b,
            |g, a, b| -(g * a) / (b * b),
        )
    }

    /// Elementwise binary op; `other` must broadcast (right-aligned) to
    /// `self`'s shape. Gradients are reduced back to each operand's shape.
    fn binary(
        &self,
        other: &Var,
        fwd: fn(&ArrayD<f64>, &ndarray::ArrayViewD<f64>) -> ArrayD<f64>,
        back_a: fn(&ArrayD<f64>, &ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>,
        back_b: fn(&ArrayD<f64>, &ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>,
    ) -> Var {
        same_tape(self, other);
        let av = self.value();
        let bv = other.value();
        let bb = bv
            .broadcast(av.dim())
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", bv.shape(), av.shape()));
        let out = fwd(&av, &bb);
        let (ida, idb) = (self.id, other.id);
        let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
        let bb_owned = bb.to_owned();
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let ga = back_a(g, &av, &bb_owned);
                let gb_full = back_b(g, &av, &bb_owned);
                let gb = tensor::reduce_to_shape(&gb_full.view(), &bsh);
                debug_assert_eq!(ga.shape(), &ash[..]);
                vec![(ida, ga), (idb, gb)]
            })),
        )
    }

    // ---- elementwise unary / scalar --------------------------------------

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var {
        let v = self.value();
        let id = self.id;
        self.tape.push(
            v.as_ref() * c,
            Some(Box::new(move |g| vec![(id, g * c)])),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let v = self.value();
        let id = self.id;
        self.tape
            .push(v.as_ref() + c, Some(Box::new(move |g| vec![(id, g.clone())])))
    }

    fn unary(
        &self,
        fwd: impl Fn(f64) -> f64,
        dfdx: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let v = self.value();
        let out = v.mapv(&fwd);
        let out_rc = Rc::new(out.clone());
        let id = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx)
                    .and(v.as_ref())
                    .and(out_rc.as_ref())
                    .for_each(|gi, &xi, &yi| *gi *= dfdx(xi, yi));
                vec![(id, gx)]
            })),
        )
    }

    pub fn exp(&self) -> Var {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn sqr(&self) -> Var {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(&self) -> Var {
        // Subgradient 0 at ties.
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn gelu(&self) -> Var {
        self.unary(tensor::gelu_scalar, |x, _| tensor::gelu_grad_scalar(x))
    }

    pub fn clamp_min(&self, c: f64) -> Var {
        self.unary(move |x| x.max(c), move |x, _| if x > c { 1.0 } else { 0.0 })
    }

    /// `p * ln(p)` with the integrand defined as 0 below `floor`.
    pub fn plogp(&self, floor: f64) -> Var {
        self.unary(
            move |p| if p >= floor { p * p.ln() } else { 0.0 },
            move |p, _| if p >= floor { p.ln() + 1.0 } else { 0.0 },
        )
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_all(&self) -> Var {
        let v = self.value();
        let id = self.id;
        let shape = v.shape().to_vec();
        self.tape.push(
            ArrayD::from_elem(IxDyn(&[]), v.sum()),
            Some(Box::new(move |g| {
                let gv = *g.iter().next().unwrap();
                vec![(id, ArrayD::from_elem(IxDyn(&shape), gv))]
            })),
        )
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over one axis (axis removed from the output).
    pub fn sum_axis(&self, axis: usize) -> Var {
        let v = self.value();
        let id = self.id;
        let in_shape = v.shape().to_vec();
        let out = v.sum_axis(Axis(axis));
        self.tape.push(
            out.into_dyn(),
            Some(Box::new(move |g| {
                let expanded = g.clone().insert_axis(Axis(axis));
                let gb = expanded
                    .broadcast(IxDyn(&in_shape))
                    .expect("sum_axis backward broadcast")
                    .to_owned();
                vec![(id, gb)]
            })),
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Var {
        let n = self.value().shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    // ---- shape ops ---------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let v = self.value();
        let id = self.id;
        let in_shape = v.shape().to_vec();
        let out = v
            .to_shape(IxDyn(shape))
            .expect("reshape: incompatible shape")
            .into_owned();
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let gr = g
                    .to_shape(IxDyn(&in_shape))
                    .expect("reshape backward")
                    .into_owned();
                vec![(id, gr)]
            })),
        )
    }

    pub fn permute(&self, perm: &[usize]) -> Var {
        let v = self.value();
        let id = self.id;
        let perm_owned = perm.to_vec();
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let out = v.view().permuted_axes(IxDyn(&perm_owned)).to_owned();
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let gp = g.view().permuted_axes(IxDyn(&inv)).to_owned();
                vec![(id, gp)]
            })),
        )
    }

    pub fn transpose_last2(&self) -> Var {
        let nd = self.value().ndim();
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(&perm)
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Var {
        let v = self.value();
        let id = self.id;
        let in_shape = v.shape().to_vec();
        let out = v
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let mut gz = ArrayD::zeros(IxDyn(&in_shape));
                gz.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                vec![(id, gz)]
            })),
        )
    }

    pub fn concat(axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        for p in &parts[1..] {
            same_tape(&parts[0], p);
        }
        let values: Vec<Value> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        parts[0].tape.push(
            out,
            Some(Box::new(move |g| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(ids.len());
                for (i, &len) in lens.iter().enumerate() {
                    let part = g
                        .slice_axis(Axis(axis), Slice::from(offset..offset + len))
                        .to_owned();
                    grads.push((ids[i], part));
                    offset += len;
                }
                grads
            })),
        )
    }

    /// Select elements of the flattened input: `out[i] = flat(self)[idx[i]]`.
    pub fn gather_flat(&self, indices: &[usize]) -> Var {
        let v = self.value();
        let id = self.id;
        let in_shape = v.shape().to_vec();
        let flat: Vec<f64> = {
            let std = v
                .as_standard_layout();
            let sl = std.as_slice().expect("gather_flat: layout");
            indices.iter().map(|&i| sl[i]).collect()
        };
        let idx = indices.to_vec();
        let out = ArrayD::from_shape_vec(IxDyn(&[idx.len()]), flat).unwrap();
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let n: usize = in_shape.iter().product();
                let mut acc = vec![0.0; n];
                for (k, &i) in idx.iter().enumerate() {
                    acc[i] += g[[k]];
                }
                let ga = ArrayD::from_shape_vec(IxDyn(&in_shape), acc).unwrap();
                vec![(id, ga)]
            })),
        )
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[.., m, k] x ([k, n] | [.., k, n]) -> [.., m, n]`; see [`tensor::matmul`].
    pub fn matmul(&self, other: &Var) -> Var {
        same_tape(self, other);
        let av = self.value();
        let bv = other.value();
        let out = tensor::matmul(&av.view(), &bv.view());
        let (ida, idb) = (self.id, other.id);
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let bt = tensor::transpose_last2(&bv.view());
                let ga = tensor::matmul(&g.view(), &bt.view());
                let gb = if bv.ndim() == 2 && av.ndim() > 2 {
                    // Weight shared across leading dims: accumulate in fixed order.
                    let k = av.shape()[av.ndim() - 1];
                    let m = av.shape()[av.ndim() - 2];
                    let n = g.shape()[g.ndim() - 1];
                    let batch: usize = av.shape()[..av.ndim() - 2].iter().product();
                    let a_flat = av.to_shape((batch, m, k)).unwrap();
                    let g_flat = g.to_shape((batch, m, n)).unwrap();
                    let mut acc = ndarray::Array2::<f64>::zeros((k, n));
                    for p in 0..batch {
                        acc += &a_flat
                            .index_axis(Axis(0), p)
                            .t()
                            .dot(&g_flat.index_axis(Axis(0), p));
                    }
                    acc.into_dyn()
                } else {
                    let at = tensor::transpose_last2(&av.view());
                    tensor::matmul(&at.view(), &g.view())
                };
                vec![(ida, ga), (idb, gb)]
            })),
        )
    }

    // ---- fused network ops --------------------------------------------------

    pub fn softmax_last(&self) -> Var {
        let v = self.value();
        let y = tensor::softmax_last(&v.view());
        let y_rc = Rc::new(y.clone());
        let id = self.id;
        self.tape.push(
            y,
            Some(Box::new(move |g| {
                // dx = y .* (g - sum(g .* y, last))
                let mut gx = g * y_rc.as_ref();
                for (mut gr, yr) in gx.rows_mut().into_iter().zip(y_rc.rows()) {
                    let s: f64 = gr.sum();
                    ndarray::Zip::from(&mut gr).and(&yr).for_each(|gi, &yi| {
                        *gi -= s * yi;
                    });
                }
                vec![(id, gx)]
            })),
        )
    }

    pub fn log_softmax_last(&self) -> Var {
        let v = self.value();
        let y = tensor::log_softmax_last(&v.view());
        let y_rc = Rc::new(y.clone());
        let id = self.id;
        self.tape.push(
            y,
            Some(Box::new(move |g| {
                // dx = g - softmax(x) * rowsum(g)
                let mut gx = g.clone();
                for (mut gr, yr) in gx.rows_mut().into_iter().zip(y_rc.rows()) {
                    let s: f64 = gr.sum();
                    ndarray::Zip::from(&mut gr).and(&yr).for_each(|gi, &yi| {
                        *gi -= s * yi.exp();
                    });
                }
                vec![(id, gx)]
            })),
        )
    }

    /// Layer normalization over the last axis with learned scale and offset.
    pub fn layer_norm(&self, weight: &Var, bias: &Var, eps: f64) -> Var {
        same_tape(self, weight);
        same_tape(self, bias);
        let xv = self.value();
        let wv = weight.value();
        let bv = bias.value();
        let w_slice: Vec<f64> = wv.iter().cloned().collect();
        let b_slice: Vec<f64> = bv.iter().cloned().collect();
        let out = tensor::layer_norm(&xv.view(), &w_slice, &b_slice, eps);
        let (idx, idw, idb) = (self.id, weight.id, bias.id);
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let d = *xv.shape().last().unwrap();
                let df = d as f64;
                let mut gx = ArrayD::zeros(xv.dim());
                let mut gw = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for ((xr, gr), mut gxr) in xv
                    .rows()
                    .into_iter()
                    .zip(g.rows())
                    .zip(gx.rows_mut())
                {
                    let mean = xr.sum() / df;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                    let inv = 1.0 / (var + eps).sqrt();
                    // xhat_j = (x_j - mean) * inv; dxhat_j = g_j * w_j
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * inv;
                        let dxhat = gr[j] * w_slice[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                        gw[j] += gr[j] * xhat;
                        gb[j] += gr[j];
                    }
                    mean_dxhat /= df;
                    mean_dxhat_xhat /= df;
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * inv;
                        let dxhat = gr[j] * w_slice[j];
                        gxr[j] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                vec![
                    (idx, gx),
                    (idw, ArrayD::from_shape_vec(IxDyn(&[d]), gw).unwrap()),
                    (idb, ArrayD::from_shape_vec(IxDyn(&[d]), gb).unwrap()),
                ]
            })),
        )
    }
}

/// Normal-kernel density values on a fixed grid.
///
/// `points` is the 1-d sample vector, `bandwidth` a positive scalar var and
/// `grid` the fixed evaluation abscissas. Returns the KDE value at every grid
/// point; gradients flow to `points` and `bandwidth` (the grid is a
/// constant). This is the hot kernel of entropy-driven image synthesis, so
/// forward and backward are fused and data-parallel over disjoint slices.
pub fn kde_grid_eval(points: &Var, bandwidth: &Var, grid: &ndarray::Array1<f64>) -> Var {
    same_tape(points, bandwidth);
    let xm = points.value();
    assert_eq!(xm.ndim(), 1, "kde points must be 1-d");
    let h = bandwidth.scalar_value();
    assert!(h > 0.0, "bandwidth must be positive");
    let m = xm.len();
    let g_len = grid.len();
    let xm_slice: Rc<Vec<f64>> = Rc::new(xm.iter().cloned().collect());
    let grid_slice: Rc<Vec<f64>> = Rc::new(grid.to_vec());

    let mut density = vec![0.0; g_len];
    {
        let xs: &[f64] = &xm_slice;
        let gs: &[f64] = &grid_slice;
        let norm = 1.0 / (m as f64 * h);
        parallel::for_each_chunk(&mut density, 64, |start, chunk| {
            for (o, f) in chunk.iter_mut().enumerate() {
                let x = gs[start + o];
                let mut acc = 0.0;
                for &p in xs {
                    acc += tensor::normal_kernel((x - p) / h);
                }
                *f = acc * norm;
            }
        });
    }

    let (idp, idh) = (points.id, bandwidth.id);
    let out = ArrayD::from_shape_vec(IxDyn(&[g_len]), density).unwrap();
    points.tape.push(
        out,
        Some(Box::new(move |go| {
            let norm = 1.0 / (m as f64 * h * h);
            // d f_g / d x_m = t * phi(t) / (M h^2), t = (x_g - x_m)/h
            // d f_g / d h   = -phi(t) (1 - t^2) / (M h^2)
            let mut cells = vec![(0.0f64, 0.0f64); m];
            {
                let xs: &[f64] = &xm_slice;
                let gs: &[f64] = &grid_slice;
                let go_slice: Vec<f64> = go.iter().cloned().collect();
                let go_ref: &[f64] = &go_slice;
                parallel::for_each_indexed(&mut cells, |mi, cell| {
                    let p = xs[mi];
                    let mut acc_p = 0.0;
                    let mut acc_h = 0.0;
                    for (gi, &x) in gs.iter().enumerate() {
                        let t = (x - p) / h;
                        let phi = tensor::normal_kernel(t);
                        acc_p += go_ref[gi] * t * phi;
                        acc_h -= go_ref[gi] * phi * (1.0 - t * t);
                    }
                    cell.0 = acc_p * norm;
                    cell.1 = acc_h * norm;
                });
            }
            let gp: Vec<f64> = cells.iter().map(|c| c.0).collect();
            let gh: f64 = cells.iter().map(|c| c.1).sum();
            vec![
                (idp, ArrayD::from_shape_vec(IxDyn(&[m]), gp).unwrap()),
                (idh, ArrayD::from_elem(IxDyn(&[]), gh)),
            ]
        })),
    )
}

/// Central finite differences of `f` at `x`; the independent oracle used by
/// gradient tests throughout the crate.
pub fn central_difference<F>(f: F, x: &ArrayD<f64>, step: f64) -> ArrayD<f64>
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x.dim());
    let mut work = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let orig = work[&idx];
        work[&idx] = orig + step;
        let up = f(&work);
        work[&idx] = orig - step;
        let down = f(&work);
        work[&idx] = orig;
        grad[&idx] = (up - down) / (2.0 * step);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, Array1};

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-10)
    }

    /// FD-check the gradient of `build` (a scalar function of one leaf).
    fn check_grad<F>(build: F, x0: ArrayD<f64>, tol: f64)
    where
        F: Fn(&Tape, &Var) -> Var,
    {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&tape, &x);
        let grads = tape.backward(&y);
        let analytic = grads.wrt(&x).expect("no gradient").clone();
        let numeric = central_difference(
            |xv| {
                let t = Tape::new();
                let v = t.leaf(xv.clone());
                build(&t, &v).scalar_value()
            },
            &x0,
            1e-5,
        );
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!(
                rel_err(*a, *n) < tol || (a.abs() < 1e-9 && n.abs() < 1e-7),
                "gradient mismatch: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn elementwise_grads() {
        let x0 = arr1(&[0.5, -1.2, 2.0, 0.3]).into_dyn();
        check_grad(|_, x| x.exp().sum_all(), x0.clone(), 1e-6);
        check_grad(|_, x| x.sqr().sum_all(), x0.clone(), 1e-6);
        check_grad(|_, x| x.abs().sum_all(), x0.clone(), 1e-6);
        check_grad(|_, x| x.gelu().sum_all(), x0.clone(), 1e-6);
        check_grad(|_, x| x.add_scalar(5.0).ln().sum_all(), x0.clone(), 1e-6);
        check_grad(|_, x| x.add_scalar(5.0).sqrt().sum_all(), x0.clone(), 1e-6);
        check_grad(|_, x| x.softmax_last().sqr().sum_all(), x0.clone(), 1e-5);
        check_grad(|_, x| x.log_softmax_last().sqr().sum_all(), x0, 1e-5);
    }

    #[test]
    fn binary_and_broadcast_grads() {
        let x0 = arr2(&[[0.5, -1.2], [2.0, 0.3]]).into_dyn();
        check_grad(
            |t, x| {
                let w = t.leaf(arr1(&[1.5, -0.7]).into_dyn());
                x.mul(&w).sum_all()
            },
            x0.clone(),
            1e-6,
        );
        check_grad(
            |t, x| {
                let w = t.leaf(arr1(&[1.5, 0.7]).into_dyn());
                x.div(&w).sqr().sum_all()
            },
            x0.clone(),
            1e-5,
        );
        // gradient w.r.t. the broadcast operand
        let w0 = arr1(&[1.5, -0.7]).into_dyn();
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let w = tape.leaf(w0.clone());
        let y = x.mul(&w).sum_all();
        let grads = tape.backward(&y);
        let gw = grads.wrt(&w).unwrap().clone();
        let num = central_difference(
            |wv| {
                let t = Tape::new();
                let xx = t.leaf(x0.clone());
                let ww = t.leaf(wv.clone());
                xx.mul(&ww).sum_all().scalar_value()
            },
            &w0,
            1e-5,
        );
        for (a, n) in gw.iter().zip(num.iter()) {
            assert!(rel_err(*a, *n) < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn matmul_grads_weight_and_batched() {
        let a0 = ndarray::Array::from_shape_vec((2, 2, 3), vec![0.1, -0.4, 0.3, 1.0, 0.2, -0.7, 0.5, 0.9, -0.2, 0.4, -1.1, 0.6])
            .unwrap()
            .into_dyn();
        check_grad(
            |t, a| {
                let w = t.leaf(arr2(&[[0.2, -0.5], [1.0, 0.3], [-0.4, 0.8]]).into_dyn());
                a.matmul(&w).sqr().sum_all()
            },
            a0.clone(),
            1e-5,
        );
        check_grad(
            |t, a| {
                let b = t.leaf(
                    ndarray::Array::from_shape_vec((2, 3, 2), vec![0.3; 12]).unwrap().into_dyn(),
                );
                a.matmul(&b).sqr().sum_all()
            },
            a0,
            1e-5,
        );
    }

    #[test]
    fn shape_op_grads() {
        let x0 = ndarray::Array::from_shape_vec((2, 3), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
            .unwrap()
            .into_dyn();
        check_grad(|_, x| x.reshape(&[3, 2]).sqr().sum_all(), x0.clone(), 1e-6);
        check_grad(|_, x| x.permute(&[1, 0]).sqr().sum_all(), x0.clone(), 1e-6);
        check_grad(|_, x| x.slice_axis(1, 1, 2).sqr().sum_all(), x0.clone(), 1e-6);
        check_grad(|_, x| x.gather_flat(&[0, 5, 3]).sqr().sum_all(), x0.clone(), 1e-6);
        check_grad(
            |_, x| {
                let a = x.slice_axis(0, 0, 1);
                let b = x.slice_axis(0, 1, 1);
                Var::concat(1, &[a, b]).sqr().sum_all()
            },
            x0.clone(),
            1e-6,
        );
        check_grad(|_, x| x.sum_axis(0).sqr().sum_all(), x0.clone(), 1e-6);
        check_grad(|_, x| x.mean_axis(1).sqr().sum_all(), x0, 1e-6);
    }

    #[test]
    fn layer_norm_grads() {
        let x0 = arr2(&[[0.5, -1.2, 2.0, 0.3], [1.0, 0.1, -0.4, 0.8]]).into_dyn();
        let w0 = arr1(&[1.2, 0.8, 1.0, -0.5]).into_dyn();
        let b0 = arr1(&[0.1, -0.2, 0.0, 0.3]).into_dyn();
        // wrt x
        check_grad(
            |t, x| {
                let w = t.leaf(w0.clone());
                let b = t.leaf(b0.clone());
                x.layer_norm(&w, &b, 1e-6).sqr().sum_all()
            },
            x0.clone(),
            1e-4,
        );
        // wrt w and b
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let w = tape.leaf(w0.clone());
        let b = tape.leaf(b0.clone());
        let y = x.layer_norm(&w, &b, 1e-6).sqr().sum_all();
        let grads = tape.backward(&y);
        for (var, v0) in [(&w, &w0), (&b, &b0)] {
            let analytic = grads.wrt(var).unwrap().clone();
            let numeric = central_difference(
                |vv| {
                    let t = Tape::new();
                    let xx = t.leaf(x0.clone());
                    let (wv, bv) = if std::ptr::eq(v0, &w0) {
                        (t.leaf(vv.clone()), t.leaf(b0.clone()))
                    } else {
                        (t.leaf(w0.clone()), t.leaf(vv.clone()))
                    };
                    xx.layer_norm(&wv, &bv, 1e-6).sqr().sum_all().scalar_value()
                },
                v0,
                1e-5,
            );
            for (a, n) in analytic.iter().zip(numeric.iter()) {
                assert!(rel_err(*a, *n) < 1e-5, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn kde_grid_eval_matches_direct_sum_and_grads() {
        let points0 = arr1(&[-0.5, 0.2, 0.9]).into_dyn();
        let grid = Array1::linspace(-2.0, 2.0, 101);

        // value oracle: direct double loop
        let tape = Tape::new();
        let p = tape.leaf(points0.clone());
        let h = tape.scalar(0.3);
        let f = kde_grid_eval(&p, &h, &grid);
        let fv = f.value();
        for (gi, &x) in grid.iter().enumerate() {
            let mut acc = 0.0;
            for &pm in points0.iter() {
                acc += tensor::normal_kernel((x - pm) / 0.3);
            }
            acc /= 3.0 * 0.3;
            assert_abs_diff_eq!(fv[[gi]], acc, epsilon = 1e-14);
        }

        // gradient wrt points and bandwidth
        let y = f.sqr().sum_all();
        let grads = tape.backward(&y);
        let gp = grads.wrt(&p).unwrap().clone();
        let gh = grads.wrt(&h).unwrap().clone();
        let eval = |pts: &ArrayD<f64>, hv: f64| {
            let t = Tape::new();
            let pv = t.leaf(pts.clone());
            let hh = t.scalar(hv);
            kde_grid_eval(&pv, &hh, &grid).sqr().sum_all().scalar_value()
        };
        let num_p = central_difference(|pts| eval(pts, 0.3), &points0, 1e-6);
        for (a, n) in gp.iter().zip(num_p.iter()) {
            assert!(
                rel_err(*a, *n) < 1e-5 || (a.abs() < 1e-9 && n.abs() < 1e-7),
                "points grad {a} vs {n}"
            );
        }
        let num_h = (eval(&points0, 0.3 + 1e-6) - eval(&points0, 0.3 - 1e-6)) / 2e-6;
        assert!(rel_err(gh[[]], num_h) < 1e-5, "bandwidth grad {} vs {num_h}", gh[[]]);
    }

    #[test]
    fn plogp_floor_and_grad() {
        let x0 = arr1(&[0.5, 1e-13, 0.0, 2.0]).into_dyn();
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = x.plogp(1e-12);
        let v = y.value();
        assert_abs_diff_eq!(v[[0]], 0.5 * 0.5f64.ln(), epsilon = 1e-15);
        assert_eq!(v[[1]], 0.0);
        assert_eq!(v[[2]], 0.0);
        let s = y.sum_all();
        let grads = tape.backward(&s);
        let g = grads.wrt(&x).unwrap();
        assert_abs_diff_eq!(g[[0]], 0.5f64.ln() + 1.0, epsilon = 1e-15);
        assert_eq!(g[[1]], 0.0);
        assert_eq!(g[[3]], 2.0f64.ln() + 1.0);
    }

    #[test]
    fn clamp_min_grad_regions() {
        let x0 = arr1(&[-1.0, 0.5]).into_dyn();
        let tape = Tape::new();
        let x = tape.leaf(x0);
        let y = x.clamp_min(0.0).sum_all();
        let grads = tape.backward(&y);
        let g = grads.wrt(&x).unwrap();
        assert_eq!(g[[0]], 0.0);
        assert_eq!(g[[1]], 1.0);
    }

    #[test]
    fn diamond_graph_accumulates() {
        // y = x*x + x  => dy/dx = 2x + 1
        let tape = Tape::new();
        let x = tape.leaf(arr1(&[3.0]).into_dyn());
        let y = x.sqr().add(&x).sum_all();
        let grads = tape.backward(&y);
        assert_eq!(grads.wrt(&x).unwrap()[[0]], 7.0);
    }
}

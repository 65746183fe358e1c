//! The differentiable operation set.
//!
//! Every op follows the same pattern: validate shapes, compute the output
//! with plain loops (fanned out over independent output regions where that
//! pays), record analytical MAC/aux counts, then push a backward closure.
//! Backward math is written out per op; the gradient-check suite verifies
//! each against central finite differences.

use rand::Rng;

use super::{BackwardArgs, NodeId, Tape};
use crate::error::{Error, Result};
use crate::par;
use crate::redapt::{reduced_length, ReductionSpec};
use crate::seeding;
use crate::tensor::Tensor;

/// Coefficient of the tanh-form GELU, pinned to this exact literal (a
/// truncation of sqrt(2/pi)) so results are reproducible down to the bit.
pub const GELU_COEFF: f64 = 0.7978845608;
/// Cubic term coefficient of the tanh-form GELU.
pub const GELU_CUBIC: f64 = 0.044715;
/// Default epsilon inside the layer-norm variance square root.
pub const LAYERNORM_DEFAULT_EPS: f64 = 1e-5;

/// Identifies one dropout call site across runs: same key, same mask.
///
/// `layer` tags the owning module, `step` the optimisation step, and `slot`
/// distinguishes multiple dropout sites inside one module (attention output
/// vs. feed-forward output). Masks are drawn from a ChaCha8 stream keyed by
/// the mixed tuple, so they depend on nothing but these values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub layer: u64,
    pub step: u64,
    pub slot: u64,
}

impl DropoutKey {
    pub fn new(seed: u64, layer: u64, step: u64, slot: u64) -> Self {
        DropoutKey { seed, layer, step, slot }
    }
}

/// Inner matrix-multiply kernel: `out[batch, m, n] += a[batch, m, k] * B`,
/// where `B` is either shared (`[k, n]`) or per-batch (`[batch, k, n]`).
/// `out` must start zeroed. Parallel over output rows; each row is written
/// by exactly one task with a fixed-order inner loop, so the result is
/// identical on the sequential path.
#[allow(clippy::too_many_arguments)]
fn mm_kernel(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    batches: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) {
    debug_assert_eq!(out.len(), batches * m * n);
    par::for_each_chunk_mut(out, n, |row, out_row| {
        let batch = row / m;
        let i = row % m;
        let a_row = &a[(batch * m + i) * k..][..k];
        let b_mat = if b_batched {
            &b[batch * k * n..][..k * n]
        } else {
            &b[..k * n]
        };
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b_mat[kk * n..][..n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    });
}

/// Transpose of the last two axes (identity on leading batch dims).
fn swap_last_two(t: &Tensor) -> Tensor {
    let r = t.rank();
    t.swap_axes(r - 2, r - 1)
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Tape {
    /// Element-wise sum; shapes must match exactly.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = Tensor::from_vec(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect(),
        )
        .unwrap();
        Ok(self.push_op(
            &[a, b],
            out,
            Box::new(|args: &BackwardArgs<'_>| {
                vec![Some(args.upstream.clone()), Some(args.upstream.clone())]
            }),
        ))
    }

    /// Element-wise (Hadamard) product; shapes must match exactly.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = Tensor::from_vec(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
        )
        .unwrap();
        Ok(self.push_op(
            &[a, b],
            out,
            Box::new(|args: &BackwardArgs<'_>| {
                let da = Tensor::from_vec(
                    args.inputs[1].shape().to_vec(),
                    args.upstream
                        .data()
                        .iter()
                        .zip(args.inputs[1].data())
                        .map(|(u, y)| u * y)
                        .collect(),
                )
                .unwrap();
                let db = Tensor::from_vec(
                    args.inputs[0].shape().to_vec(),
                    args.upstream
                        .data()
                        .iter()
                        .zip(args.inputs[0].data())
                        .map(|(u, x)| u * x)
                        .collect(),
                )
                .unwrap();
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// Multiply every element by a compile-time-known constant.
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).map(|v| v * c);
        self.push_op(
            &[x],
            out,
            Box::new(move |args: &BackwardArgs<'_>| vec![Some(args.upstream.map(|u| u * c))]),
        )
    }

    /// Add a `[d]` bias vector to every trailing row of `x [..., d]`.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = *xv.shape().last().unwrap_or(&0);
        if bv.rank() != 1 || bv.shape()[0] != d || d == 0 {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push_op(
            &[x, bias],
            out,
            Box::new(move |args: &BackwardArgs<'_>| {
                let dx = args.needs[0].then(|| args.upstream.clone());
                let db = args.needs[1].then(|| {
                    let mut acc = vec![0.0; d];
                    for row in args.upstream.data().chunks(d) {
                        for (a, u) in acc.iter_mut().zip(row) {
                            *a += u;
                        }
                    }
                    Tensor::from_vec(vec![d], acc).unwrap()
                });
                vec![dx, db]
            }),
        ))
    }

    /// Matrix product. Two layouts are supported:
    ///
    /// * `a [..., m, k] × b [k, n]`: shared right-hand matrix applied to
    ///   every leading batch (projections);
    /// * `a [..., m, k] × b [..., k, n]` with identical leading dims:
    ///   batched product (attention scores / context).
    ///
    /// Counts `batches * m * k * n` MACs.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        if av.rank() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (av.shape()[av.rank() - 2], av.shape()[av.rank() - 1]);
        let b_batched = if bv.rank() == 2 {
            false
        } else if bv.rank() == av.rank()
            && bv.shape()[..bv.rank() - 2] == av.shape()[..av.rank() - 2]
        {
            true
        } else {
            return Err(mismatch());
        };
        if bv.shape()[bv.rank() - 2] != k {
            return Err(mismatch());
        }
        let n = bv.shape()[bv.rank() - 1];
        let batches: usize = av.shape()[..av.rank() - 2].iter().product();

        let mut out_shape = av.shape()[..av.rank() - 2].to_vec();
        out_shape.extend_from_slice(&[m, n]);
        let mut out = Tensor::zeros(out_shape);
        mm_kernel(av.data(), bv.data(), out.data_mut(), batches, m, k, n, b_batched);
        self.count_macs("matmul", (batches * m * k * n) as u64);

        Ok(self.push_op(
            &[a, b],
            out,
            Box::new(move |args: &BackwardArgs<'_>| {
                let (av, bv) = (args.inputs[0], args.inputs[1]);
                let up = args.upstream;
                let da = args.needs[0].then(|| {
                    // dA = dOut × Bᵀ, batched the same way as the forward.
                    let bt = swap_last_two(bv);
                    let mut da = Tensor::zeros(av.shape().to_vec());
                    mm_kernel(up.data(), bt.data(), da.data_mut(), batches, m, n, k, b_batched);
                    da
                });
                let db = args.needs[1].then(|| {
                    let mut db = Tensor::zeros(bv.shape().to_vec());
                    if b_batched {
                        // dB = Aᵀ × dOut per batch.
                        let at = swap_last_two(av);
                        mm_kernel(at.data(), up.data(), db.data_mut(), batches, k, m, n, true);
                    } else {
                        // Shared B: sum over all leading batches, expressed as
                        // (A flattened to [batches*m, k])ᵀ × (dOut flattened).
                        let a_flat = av.reshaped(vec![batches * m, k]).unwrap();
                        let at = a_flat.swap_axes(0, 1);
                        mm_kernel(at.data(), up.data(), db.data_mut(), 1, k, batches * m, n, false);
                    }
                    db
                });
                vec![da, db]
            }),
        ))
    }

    /// Exchange two axes (materialised copy).
    pub fn transpose(&mut self, x: NodeId, a0: usize, a1: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if a0 >= xv.rank() || a1 >= xv.rank() {
            return Err(Error::InvalidConfig(format!(
                "transpose axes ({a0}, {a1}) out of range for rank {}",
                xv.rank()
            )));
        }
        let out = xv.swap_axes(a0, a1);
        Ok(self.push_op(
            &[x],
            out,
            // Swapping the same pair is its own inverse.
            Box::new(move |args: &BackwardArgs<'_>| vec![Some(args.upstream.swap_axes(a0, a1))]),
        ))
    }

    /// Reinterpret the data under a new shape with the same element count.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let xv = self.value(x);
        let old_shape = xv.shape().to_vec();
        let out = xv.reshaped(shape)?;
        Ok(self.push_op(
            &[x],
            out,
            Box::new(move |args: &BackwardArgs<'_>| {
                vec![Some(args.upstream.reshaped(old_shape.clone()).unwrap())]
            }),
        ))
    }

    /// 1-D convolution over time, channels last.
    ///
    /// `x [batch, t, c_in]`, `w [kernel, c_in, c_out]`, `bias [c_out]`;
    /// output `[batch, t', c_out]` with `t'` given by the reduction formula
    /// of `spec`. Zero padding; every output position is charged the full
    /// `kernel * c_in * c_out` MAC window, padding included, to match the
    /// closed-form cost model.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        spec: &ReductionSpec,
    ) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(bias));
        if xv.rank() != 3 || wv.rank() != 3 || bv.rank() != 1 {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let (batch, t, c_in) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (kernel, stride, padding) = (spec.kernel, spec.stride, spec.padding);
        if wv.shape()[0] != kernel || wv.shape()[1] != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let c_out = wv.shape()[2];
        if bv.shape()[0] != c_out {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: wv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let t_out = reduced_length(t, spec)?;

        let mut out = Tensor::zeros(vec![batch, t_out, c_out]);
        {
            let (x_data, w_data, b_data) = (xv.data(), wv.data(), bv.data());
            par::for_each_chunk_mut(out.data_mut(), c_out, |row, out_row| {
                let bi = row / t_out;
                let i = row % t_out;
                out_row.copy_from_slice(b_data);
                for j in 0..kernel {
                    let tau = (i * stride + j) as isize - padding as isize;
                    if tau < 0 || tau >= t as isize {
                        continue;
                    }
                    let x_row = &x_data[(bi * t + tau as usize) * c_in..][..c_in];
                    for (ci, &xval) in x_row.iter().enumerate() {
                        let w_row = &w_data[(j * c_in + ci) * c_out..][..c_out];
                        for (o, &wval) in out_row.iter_mut().zip(w_row) {
                            *o += xval * wval;
                        }
                    }
                }
            });
        }
        self.count_macs("conv1d", (batch * t_out * kernel * c_in * c_out) as u64);

        let spec = spec.clone();
        Ok(self.push_op(
            &[x, w, bias],
            out,
            Box::new(move |args: &BackwardArgs<'_>| {
                let (xv, wv) = (args.inputs[0], args.inputs[1]);
                let up = args.upstream.data();
                let (kernel, stride, padding) = (spec.kernel, spec.stride, spec.padding);

                let dx = args.needs[0].then(|| {
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    let w_data = wv.data();
                    // Scatter into the input: parallel over batch items only,
                    // since output windows overlap within one item.
                    par::for_each_chunk_mut(dx.data_mut(), t * c_in, |bi, dx_b| {
                        for i in 0..t_out {
                            let up_row = &up[(bi * t_out + i) * c_out..][..c_out];
                            for j in 0..kernel {
                                let tau = (i * stride + j) as isize - padding as isize;
                                if tau < 0 || tau >= t as isize {
                                    continue;
                                }
                                let dx_row = &mut dx_b[tau as usize * c_in..][..c_in];
                                for (ci, d) in dx_row.iter_mut().enumerate() {
                                    let w_row = &w_data[(j * c_in + ci) * c_out..][..c_out];
                                    let mut acc = 0.0;
                                    for (u, wv) in up_row.iter().zip(w_row) {
                                        acc += u * wv;
                                    }
                                    *d += acc;
                                }
                            }
                        }
                    });
                    dx
                });

                let dw = args.needs[1].then(|| {
                    let mut dw = Tensor::zeros(wv.shape().to_vec());
                    let x_data = xv.data();
                    // Each (kernel offset, input channel) row of dW is
                    // independent; accumulate over batch and time within it.
                    par::for_each_chunk_mut(dw.data_mut(), c_out, |row, dw_row| {
                        let j = row / c_in;
                        let ci = row % c_in;
                        for bi in 0..batch {
                            for i in 0..t_out {
                                let tau = (i * stride + j) as isize - padding as isize;
                                if tau < 0 || tau >= t as isize {
                                    continue;
                                }
                                let xval = x_data[(bi * t + tau as usize) * c_in + ci];
                                let up_row = &up[(bi * t_out + i) * c_out..][..c_out];
                                for (o, &u) in dw_row.iter_mut().zip(up_row) {
                                    *o += xval * u;
                                }
                            }
                        }
                    });
                    dw
                });

                let db = args.needs[2].then(|| {
                    let mut acc = vec![0.0; c_out];
                    for row in up.chunks(c_out) {
                        for (a, u) in acc.iter_mut().zip(row) {
                            *a += u;
                        }
                    }
                    Tensor::from_vec(vec![c_out], acc).unwrap()
                });

                vec![dx, dw, db]
            }),
        ))
    }

    /// Layer normalisation over the last axis, with learned gain and bias.
    /// Population variance (divide by `d`), `eps` inside the square root.
    /// Counts one aux flop per normalised element.
    pub fn layernorm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = *xv.shape().last().unwrap_or(&0);
        if d == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }

        let mut out = xv.clone();
        {
            let (g_data, b_data) = (gv.data(), bv.data());
            par::for_each_chunk_mut(out.data_mut(), d, |_, row| {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for ((v, g), b) in row.iter_mut().zip(g_data).zip(b_data) {
                    *v = (*v - mean) * inv * g + b;
                }
            });
        }
        self.count_aux("layernorm", xv.numel() as u64);

        Ok(self.push_op(
            &[x, gain, bias],
            out,
            Box::new(move |args: &BackwardArgs<'_>| {
                let (xv, gv) = (args.inputs[0], args.inputs[1]);
                let up = args.upstream.data();
                let x_data = xv.data();
                let g_data = gv.data();
                let rows = xv.numel() / d;

                // Per-row statistics are recomputed here instead of being
                // saved at forward time; it keeps the tape lean and the
                // arithmetic is cheap next to the surrounding matmuls.
                let row_stats = |r: usize| -> (f64, f64) {
                    let row = &x_data[r * d..][..d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    (mean, 1.0 / (var + eps).sqrt())
                };

                let dx = args.needs[0].then(|| {
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    par::for_each_chunk_mut(dx.data_mut(), d, |r, dx_row| {
                        let (mean, inv) = row_stats(r);
                        let x_row = &x_data[r * d..][..d];
                        let up_row = &up[r * d..][..d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for ((&u, &g), &x) in up_row.iter().zip(g_data).zip(x_row) {
                            let dy = u * g;
                            s1 += dy;
                            s2 += dy * (x - mean) * inv;
                        }
                        s1 /= d as f64;
                        s2 /= d as f64;
                        for (((o, &u), &g), &x) in
                            dx_row.iter_mut().zip(up_row).zip(g_data).zip(x_row)
                        {
                            let xhat = (x - mean) * inv;
                            *o = inv * (u * g - s1 - xhat * s2);
                        }
                    });
                    dx
                });

                let mut dgain = args.needs[1].then(|| vec![0.0; d]);
                let mut dbias = args.needs[2].then(|| vec![0.0; d]);
                if dgain.is_some() || dbias.is_some() {
                    for r in 0..rows {
                        let (mean, inv) = row_stats(r);
                        let x_row = &x_data[r * d..][..d];
                        let up_row = &up[r * d..][..d];
                        if let Some(dg) = dgain.as_mut() {
                            for ((a, &u), &x) in dg.iter_mut().zip(up_row).zip(x_row) {
                                *a += u * (x - mean) * inv;
                            }
                        }
                        if let Some(db) = dbias.as_mut() {
                            for (a, &u) in db.iter_mut().zip(up_row) {
                                *a += u;
                            }
                        }
                    }
                }

                vec![
                    dx,
                    dgain.map(|v| Tensor::from_vec(vec![d], v).unwrap()),
                    dbias.map(|v| Tensor::from_vec(vec![d], v).unwrap()),
                ]
            }),
        ))
    }

    /// GELU activation, tanh approximation:
    /// `0.5 x (1 + tanh(C (x + 0.044715 x³)))` with `C` = [`GELU_COEFF`].
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(gelu_scalar);
        self.push_op(
            &[x],
            out,
            Box::new(|args: &BackwardArgs<'_>| {
                let dx = Tensor::from_vec(
                    args.inputs[0].shape().to_vec(),
                    args.inputs[0]
                        .data()
                        .iter()
                        .zip(args.upstream.data())
                        .map(|(&x, &u)| u * gelu_derivative(x))
                        .collect(),
                )
                .unwrap();
                vec![Some(dx)]
            }),
        )
    }

    /// Row-wise softmax over the last axis (max-subtracted for stability).
    /// Counts one aux flop per output element.
    pub fn softmax_lastaxis(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut out = xv.clone();
        par::for_each_chunk_mut(out.data_mut(), d, |_, row| softmax_row(row));
        self.count_aux("softmax", xv.numel() as u64);

        Ok(self.push_op(
            &[x],
            out,
            Box::new(move |args: &BackwardArgs<'_>| {
                let y = args.output.data();
                let up = args.upstream.data();
                let mut dx = Tensor::zeros(args.inputs[0].shape().to_vec());
                par::for_each_chunk_mut(dx.data_mut(), d, |r, dx_row| {
                    let y_row = &y[r * d..][..d];
                    let up_row = &up[r * d..][..d];
                    let dot: f64 = y_row.iter().zip(up_row).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &uv) in dx_row.iter_mut().zip(y_row).zip(up_row) {
                        *o = yv * (uv - dot);
                    }
                });
                vec![Some(dx)]
            }),
        ))
    }

    /// Mean over one axis; the axis disappears from the output shape.
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if axis >= xv.rank() || xv.shape()[axis] == 0 {
            return Err(Error::InvalidConfig(format!(
                "mean over axis {axis} of shape {:?}",
                xv.shape()
            )));
        }
        let n = xv.shape()[axis];
        let outer: usize = xv.shape()[..axis].iter().product();
        let inner: usize = xv.shape()[axis + 1..].iter().product();
        let mut out_shape = xv.shape().to_vec();
        out_shape.remove(axis);
        let mut out = Tensor::zeros(out_shape);
        {
            let data = xv.data();
            let out_data = out.data_mut();
            for o in 0..outer {
                for i in 0..n {
                    let src = &data[(o * n + i) * inner..][..inner];
                    let dst = &mut out_data[o * inner..][..inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s / n as f64;
                    }
                }
            }
        }
        Ok(self.push_op(
            &[x],
            out,
            Box::new(move |args: &BackwardArgs<'_>| {
                let up = args.upstream.data();
                let mut dx = Tensor::zeros(args.inputs[0].shape().to_vec());
                let dx_data = dx.data_mut();
                for o in 0..outer {
                    for i in 0..n {
                        let dst = &mut dx_data[(o * n + i) * inner..][..inner];
                        let src = &up[o * inner..][..inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s / n as f64;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        self.push_op(
            &[x],
            Tensor::scalar(total),
            Box::new(|args: &BackwardArgs<'_>| {
                let u = args.upstream.item();
                vec![Some(Tensor::filled(args.inputs[0].shape().to_vec(), u))]
            }),
        )
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel();
        let total: f64 = self.value(x).data().iter().sum();
        self.push_op(
            &[x],
            Tensor::scalar(total / n as f64),
            Box::new(move |args: &BackwardArgs<'_>| {
                let u = args.upstream.item() / n as f64;
                vec![Some(Tensor::filled(args.inputs[0].shape().to_vec(), u))]
            }),
        )
    }

    /// Inverted dropout. In inference mode (or at `p == 0`) this is a true
    /// identity: the input node is returned untouched and nothing is
    /// recorded. In training mode each element is zeroed with probability
    /// `p` and survivors are scaled by `1/(1-p)`; the mask depends only on
    /// `key`, never on call order.
    pub fn dropout(&mut self, x: NodeId, p: f64, train: bool, key: DropoutKey) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let keep_scale = 1.0 / (1.0 - p);
        let mut rng = seeding::rng_from(&[key.seed, key.layer, key.step, key.slot]);
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let out = Tensor::from_vec(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )
        .unwrap();
        Ok(self.push_op(
            &[x],
            out,
            Box::new(move |args: &BackwardArgs<'_>| {
                let dx = Tensor::from_vec(
                    args.inputs[0].shape().to_vec(),
                    args.upstream.data().iter().zip(&mask).map(|(u, m)| u * m).collect(),
                )
                .unwrap();
                vec![Some(dx)]
            }),
        ))
    }

    /// Mean cross-entropy between `logits [batch, classes]` and integer
    /// targets, against label-smoothed targets
    /// `q = (1 - smoothing) * onehot + smoothing / classes`.
    pub fn cross_entropy_label_smoothed(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        smoothing: f64,
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (batch, classes) = (lv.shape()[0], lv.shape()[1]);
        if targets.len() != batch {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidConfig(format!(
                "label smoothing {smoothing} outside [0, 1)"
            )));
        }
        for &t in targets {
            if t >= classes {
                return Err(Error::TargetOutOfRange {
                    index: t,
                    classes,
                });
            }
        }

        let data = lv.data();
        let mut loss = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            let row = &data[r * classes..][..classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (c, &v) in row.iter().enumerate() {
                let q = smoothing / classes as f64
                    + if c == target { 1.0 - smoothing } else { 0.0 };
                loss -= q * (v - lse);
            }
        }
        loss /= batch as f64;

        let targets = targets.to_vec();
        Ok(self.push_op(
            &[logits],
            Tensor::scalar(loss),
            Box::new(move |args: &BackwardArgs<'_>| {
                let data = args.inputs[0].data();
                let u = args.upstream.item() / batch as f64;
                let mut dx = Tensor::zeros(args.inputs[0].shape().to_vec());
                let dx_data = dx.data_mut();
                for (r, &target) in targets.iter().enumerate() {
                    let row = &data[r * classes..][..classes];
                    let mut probs = row.to_vec();
                    softmax_row(&mut probs);
                    let dx_row = &mut dx_data[r * classes..][..classes];
                    for (c, (o, p)) in dx_row.iter_mut().zip(probs).enumerate() {
                        let q = smoothing / classes as f64
                            + if c == target { 1.0 - smoothing } else { 0.0 };
                        *o = u * (p - q);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_COEFF * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_COEFF * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_COEFF * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

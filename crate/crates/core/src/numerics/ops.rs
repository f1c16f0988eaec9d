//! The fixed differentiable operator set: matmul, row softmax, GELU,
//! layer norm, 3x3 reflect-padded convolution, index gathers, and the
//! small glue ops (add, scale, reshape, reductions, L1).
//!
//! Every public operation validates its output for NaN/Inf and fails fast.

use std::sync::Arc;

use crate::error::{KgtError, Result};
use crate::numerics::tensor::{Real, Tensor};
use crate::numerics::var::Var;

// ---------------------------------------------------------------------------
// Raw kernels (plain slices, no graph)
// ---------------------------------------------------------------------------

/// Row-major `[m,p] x [p,n] -> [m,n]`.
pub(crate) fn matmul_raw<R: Real>(a: &[R], m: usize, p: usize, b: &[R], n: usize) -> Vec<R> {
    let mut c = vec![R::ZERO; m * n];
    if m == 0 || n == 0 || p == 0 {
        return c;
    }
    unsafe {
        R::gemm(
            m,
            p,
            n,
            R::ONE,
            a.as_ptr(),
            p as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            R::ZERO,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// In-place numerically stable row softmax with an optional additive mask.
/// Masked entries carry the most-negative finite sentinel; a row where every
/// entry is masked is a contract violation (empty neighbor set).
pub(crate) fn softmax_rows_raw<R: Real>(
    x: &mut [R],
    rows: usize,
    cols: usize,
    mask: Option<&[R]>,
) -> Result<()> {
    debug_assert_eq!(x.len(), rows * cols);
    let degenerate_below = R::NEG_SENTINEL * R::from_f64(0.5);
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        if let Some(m) = mask {
            for (v, &mv) in row.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
                *v += mv;
            }
        }
        let mut max = R::NEG_SENTINEL;
        for &v in row.iter() {
            max = max.maximum(v);
        }
        if max <= degenerate_below {
            return Err(KgtError::DegenerateRow { row: r });
        }
        let mut sum = R::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(())
}

/// Gaussian CDF via the error function.
pub(crate) fn gauss_cdf<R: Real>(x: R) -> R {
    let half = R::from_f64(0.5);
    let inv_sqrt2 = R::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * (R::ONE + (x * inv_sqrt2).erf())
}

/// Gaussian PDF, used by the GELU backward rule.
fn gauss_pdf<R: Real>(x: R) -> R {
    let inv_sqrt_2pi = R::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    (-(x * x) * R::from_f64(0.5)).exp() * inv_sqrt_2pi
}

/// Mirror-fold an out-of-range index into `[0, n)` (reflect padding without
/// edge repetition). Handles arbitrarily deep padding via the triangular wave
/// of period `2(n-1)`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Flat gather map for the 3x3 im2col layout `[cin*9, h*w]` (memoized;
/// shapes repeat every training step).
fn im2col_map(cin: usize, h: usize, w: usize) -> std::sync::Arc<Vec<u32>> {
    crate::mapcache::memoized(
        crate::mapcache::MapKey::Im2col { cin, h, w },
        || im2col_map_build(cin, h, w),
    )
}

fn im2col_map_build(cin: usize, h: usize, w: usize) -> Vec<u32> {
    let hw = h * w;
    let mut map = vec![0u32; cin * 9 * hw];
    let mut out = 0;
    for ci in 0..cin {
        for ky in 0..3isize {
            for kx in 0..3isize {
                for y in 0..h as isize {
                    let sy = reflect_index(y + ky - 1, h);
                    for x in 0..w as isize {
                        let sx = reflect_index(x + kx - 1, w);
                        map[out] = ((ci * h + sy) * w + sx) as u32;
                        out += 1;
                    }
                }
            }
        }
    }
    map
}

fn gather_by_map<R: Real>(src: &[R], map: &[u32]) -> Vec<R> {
    map.iter().map(|&i| src[i as usize]).collect()
}

fn scatter_add_by_map<R: Real>(grad_out: &[R], map: &[u32], dst_len: usize) -> Vec<R> {
    let mut dst = vec![R::ZERO; dst_len];
    for (&i, &g) in map.iter().zip(grad_out) {
        dst[i as usize] += g;
    }
    dst
}

// ---------------------------------------------------------------------------
// Graph operations
// ---------------------------------------------------------------------------

impl<R: Real> Var<R> {
    pub fn add(&self, other: &Var<R>) -> Result<Var<R>> {
        let value = self.value().add_tensor(other.value())?;
        value.check_finite("add")?;
        Ok(Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|dy| vec![Some(dy.clone()), Some(dy.clone())]),
        ))
    }

    pub fn sub(&self, other: &Var<R>) -> Result<Var<R>> {
        let value = self.value().sub_tensor(other.value())?;
        value.check_finite("sub")?;
        Ok(Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|dy| vec![Some(dy.clone()), Some(dy.scale_by(-R::ONE))]),
        ))
    }

    pub fn scale(&self, c: R) -> Result<Var<R>> {
        let value = self.value().scale_by(c);
        value.check_finite("scale")?;
        Ok(Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |dy| vec![Some(dy.scale_by(c))]),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<R>> {
        let value = self.value().reshaped(shape)?;
        let back_shape = self.shape().to_vec();
        Ok(Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |dy| vec![Some(dy.reshaped(&back_shape).expect("reshape backward"))]),
        ))
    }

    pub fn sum_all(&self) -> Var<R> {
        let s: R = self.value().data().iter().copied().sum();
        let shape = self.shape().to_vec();
        Var::from_op(
            Tensor::scalar(s),
            vec![self.clone()],
            Box::new(move |dy| vec![Some(Tensor::full(&shape, dy.data()[0]))]),
        )
    }

    /// `[m,p] x [p,n] -> [m,n]` with reverse rules `dA = dY Bᵀ`, `dB = Aᵀ dY`.
    pub fn matmul(&self, other: &Var<R>) -> Result<Var<R>> {
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(KgtError::Dim {
                context: "matmul",
                detail: format!("{:?} x {:?}", a.shape(), b.shape()),
            });
        }
        let (m, p) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let value = Tensor::new(&[m, n], matmul_raw(a.data(), m, p, b.data(), n))?;
        value.check_finite("matmul")?;

        let a_val = a.clone();
        let b_val = b.clone();
        let needs_a = self.requires_grad();
        let needs_b = other.requires_grad();
        Ok(Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |dy| {
                let dyd = dy.data();
                let da = needs_a.then(|| {
                    // dA = dY * Bᵀ
                    let mut da = vec![R::ZERO; m * p];
                    if m * p > 0 && n > 0 {
                        unsafe {
                            R::gemm(
                                m,
                                n,
                                p,
                                R::ONE,
                                dyd.as_ptr(),
                                n as isize,
                                1,
                                b_val.data().as_ptr(),
                                1,
                                n as isize,
                                R::ZERO,
                                da.as_mut_ptr(),
                                p as isize,
                                1,
                            );
                        }
                    }
                    Tensor::new(&[m, p], da).expect("matmul da")
                });
                let db = needs_b.then(|| {
                    // dB = Aᵀ * dY
                    let mut db = vec![R::ZERO; p * n];
                    if p * n > 0 && m > 0 {
                        unsafe {
                            R::gemm(
                                p,
                                m,
                                n,
                                R::ONE,
                                a_val.data().as_ptr(),
                                1,
                                p as isize,
                                dyd.as_ptr(),
                                n as isize,
                                1,
                                R::ZERO,
                                db.as_mut_ptr(),
                                n as isize,
                                1,
                            );
                        }
                    }
                    Tensor::new(&[p, n], db).expect("matmul db")
                });
                vec![da, db]
            }),
        ))
    }

    /// Elementwise `x * Φ(x)` with the exact Gaussian CDF.
    pub fn gelu(&self) -> Result<Var<R>> {
        let x = self.value();
        let cdf: Vec<R> = x.data().iter().map(|&v| gauss_cdf(v)).collect();
        let value = Tensor::new(
            x.shape(),
            x.data().iter().zip(&cdf).map(|(&v, &c)| v * c).collect(),
        )?;
        value.check_finite("gelu")?;
        let x_val = x.clone();
        let shape = x.shape().to_vec();
        Ok(Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |dy| {
                let g: Vec<R> = x_val
                    .data()
                    .iter()
                    .zip(&cdf)
                    .zip(dy.data())
                    .map(|((&v, &c), &d)| d * (c + v * gauss_pdf(v)))
                    .collect();
                vec![Some(Tensor::new(&shape, g).expect("gelu grad"))]
            }),
        ))
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(&self, gamma: &Var<R>, beta: &Var<R>, eps: R) -> Result<Var<R>> {
        if eps <= R::ZERO {
            return Err(KgtError::Config("layer_norm eps must be > 0".into()));
        }
        let x = self.value();
        if x.shape().len() != 2 {
            return Err(KgtError::Dim {
                context: "layer_norm",
                detail: format!("expected rank-2 input, got {:?}", x.shape()),
            });
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(KgtError::Dim {
                context: "layer_norm",
                detail: format!(
                    "gamma {:?} / beta {:?} do not match row width {}",
                    gamma.shape(),
                    beta.shape(),
                    n
                ),
            });
        }

        let xd = x.data();
        let gd = gamma.value().data().to_vec();
        let bd = beta.value().data();
        let inv_n = R::ONE / R::from_f64(n as f64);
        let mut y = vec![R::ZERO; m * n];
        let mut xhat = vec![R::ZERO; m * n];
        let mut istd = vec![R::ZERO; m];
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let mut mean = R::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_n;
            let mut var = R::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let is = R::ONE / (var + eps).sqrt();
            istd[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                y[r * n + j] = gd[j] * h + bd[j];
            }
        }
        let value = Tensor::new(&[m, n], y)?;
        value.check_finite("layer_norm")?;

        let needs_x = self.requires_grad();
        let needs_g = gamma.requires_grad();
        let needs_b = beta.requires_grad();
        Ok(Var::from_op(
            value,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |dy| {
                let dyd = dy.data();
                let dgamma = needs_g.then(|| {
                    let mut dg = vec![R::ZERO; n];
                    for r in 0..m {
                        for j in 0..n {
                            dg[j] += dyd[r * n + j] * xhat[r * n + j];
                        }
                    }
                    Tensor::new(&[n], dg).expect("ln dgamma")
                });
                let dbeta = needs_b.then(|| {
                    let mut db = vec![R::ZERO; n];
                    for r in 0..m {
                        for j in 0..n {
                            db[j] += dyd[r * n + j];
                        }
                    }
                    Tensor::new(&[n], db).expect("ln dbeta")
                });
                let dx = needs_x.then(|| {
                    let mut dx = vec![R::ZERO; m * n];
                    for r in 0..m {
                        let mut m1 = R::ZERO;
                        let mut m2 = R::ZERO;
                        for j in 0..n {
                            let dh = dyd[r * n + j] * gd[j];
                            m1 += dh;
                            m2 += dh * xhat[r * n + j];
                        }
                        m1 *= inv_n;
                        m2 *= inv_n;
                        for j in 0..n {
                            let dh = dyd[r * n + j] * gd[j];
                            dx[r * n + j] = istd[r] * (dh - m1 - xhat[r * n + j] * m2);
                        }
                    }
                    Tensor::new(&[m, n], dx).expect("ln dx")
                });
                vec![dx, dgamma, dbeta]
            }),
        ))
    }

    /// Numerically stable row softmax. `mask`, when given, is added to the
    /// logits first and must contain only `0` or the negative sentinel.
    pub fn softmax_rows(&self, mask: Option<&Tensor<R>>) -> Result<Var<R>> {
        let x = self.value();
        if x.shape().len() != 2 {
            return Err(KgtError::Dim {
                context: "softmax_rows",
                detail: format!("expected rank-2 input, got {:?}", x.shape()),
            });
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        if let Some(mk) = mask {
            if mk.shape() != x.shape() {
                return Err(KgtError::Dim {
                    context: "softmax_rows",
                    detail: format!("mask {:?} vs input {:?}", mk.shape(), x.shape()),
                });
            }
        }
        let mut y = x.data().to_vec();
        softmax_rows_raw(&mut y, m, n, mask.map(|t| t.data()))?;
        let value = Tensor::new(&[m, n], y.clone())?;
        value.check_finite("softmax_rows")?;

        Ok(Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |dy| {
                let dyd = dy.data();
                let mut dx = vec![R::ZERO; m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let dr = &dyd[r * n..(r + 1) * n];
                    let mut dot = R::ZERO;
                    for j in 0..n {
                        dot += yr[j] * dr[j];
                    }
                    for j in 0..n {
                        dx[r * n + j] = yr[j] * (dr[j] - dot);
                    }
                }
                vec![Some(Tensor::new(&[m, n], dx).expect("softmax grad"))]
            }),
        ))
    }

    /// 3x3 convolution with reflect padding of 1, spatial extents preserved.
    pub fn conv2d_3x3(&self, w: &Var<R>, b: &Var<R>) -> Result<Var<R>> {
        let x = self.value();
        let ws = w.shape().to_vec();
        if x.shape().len() != 3 {
            return Err(KgtError::Dim {
                context: "conv2d_3x3",
                detail: format!("expected [C,H,W] input, got {:?}", x.shape()),
            });
        }
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(KgtError::Dim {
                context: "conv2d_3x3",
                detail: format!("kernel must be [Cout,Cin,3,3], got {:?}", ws),
            });
        }
        let (cin, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let cout = ws[0];
        if ws[1] != cin {
            return Err(KgtError::Dim {
                context: "conv2d_3x3",
                detail: format!("kernel expects {} input channels, input has {}", ws[1], cin),
            });
        }
        if b.shape() != [cout] {
            return Err(KgtError::Dim {
                context: "conv2d_3x3",
                detail: format!("bias {:?} vs {} output channels", b.shape(), cout),
            });
        }

        let hw = h * wid;
        let map = im2col_map(cin, h, wid);
        let col = gather_by_map(x.data(), &map);
        let mut out = matmul_raw(w.value().data(), cout, cin * 9, &col, hw);
        for (co, &bias) in b.value().data().iter().enumerate() {
            for v in &mut out[co * hw..(co + 1) * hw] {
                *v += bias;
            }
        }
        let value = Tensor::new(&[cout, h, wid], out)?;
        value.check_finite("conv2d_3x3")?;

        let x_val = x.clone();
        let w_val = w.value().clone();
        let needs_x = self.requires_grad();
        let needs_w = w.requires_grad();
        let needs_b = b.requires_grad();
        let in_len = x.numel();
        Ok(Var::from_op(
            value,
            vec![self.clone(), w.clone(), b.clone()],
            Box::new(move |dy| {
                let dyd = dy.data();
                let kdim = cin * 9;
                let db = needs_b.then(|| {
                    let mut db = vec![R::ZERO; cout];
                    for co in 0..cout {
                        for &v in &dyd[co * hw..(co + 1) * hw] {
                            db[co] += v;
                        }
                    }
                    Tensor::new(&[cout], db).expect("conv db")
                });
                // The im2col buffer is recomputed here instead of saved;
                // rebuilding it costs one gather, keeping it would pin
                // 9x the input per conv node.
                let col = (needs_w || needs_x).then(|| gather_by_map(x_val.data(), &map));
                let dw = needs_w.then(|| {
                    let col = col.as_ref().expect("col present");
                    let mut dw = vec![R::ZERO; cout * kdim];
                    unsafe {
                        R::gemm(
                            cout,
                            hw,
                            kdim,
                            R::ONE,
                            dyd.as_ptr(),
                            hw as isize,
                            1,
                            col.as_ptr(),
                            1,
                            hw as isize,
                            R::ZERO,
                            dw.as_mut_ptr(),
                            kdim as isize,
                            1,
                        );
                    }
                    Tensor::new(&[cout, cin, 3, 3], dw).expect("conv dw")
                });
                let dx = needs_x.then(|| {
                    let mut dcol = vec![R::ZERO; kdim * hw];
                    unsafe {
                        R::gemm(
                            kdim,
                            cout,
                            hw,
                            R::ONE,
                            w_val.data().as_ptr(),
                            1,
                            kdim as isize,
                            dyd.as_ptr(),
                            hw as isize,
                            1,
                            R::ZERO,
                            dcol.as_mut_ptr(),
                            hw as isize,
                            1,
                        );
                    }
                    let dx = scatter_add_by_map(&dcol, &map, in_len);
                    Tensor::new(&[cin, h, wid], dx).expect("conv dx")
                });
                vec![dx, dw, db]
            }),
        ))
    }

    /// Pure index gather: `out[i] = x[map[i]]`. Backward scatter-adds.
    /// All window partitioning, merging, and head permutations reduce to this.
    pub fn gather(&self, map: Arc<Vec<u32>>, out_shape: &[usize]) -> Result<Var<R>> {
        let in_len = self.value().numel();
        if let Some(&bad) = map.iter().find(|&&i| i as usize >= in_len) {
            return Err(KgtError::Integrity(format!(
                "gather index {} out of range for {} elements",
                bad, in_len
            )));
        }
        self.gather_prevalidated(map, out_shape)
    }

    /// Gather with a map whose indices are known in-range by construction
    /// (the memoized layout maps); skips the per-call validation scan.
    pub(crate) fn gather_prevalidated(
        &self,
        map: Arc<Vec<u32>>,
        out_shape: &[usize],
    ) -> Result<Var<R>> {
        let n: usize = out_shape.iter().product();
        if n != map.len() {
            return Err(KgtError::Dim {
                context: "gather",
                detail: format!("map has {} entries, out shape {:?}", map.len(), out_shape),
            });
        }
        let in_len = self.value().numel();
        let value = Tensor::new(out_shape, gather_by_map(self.value().data(), &map))?;
        let in_shape = self.shape().to_vec();
        Ok(Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |dy| {
                let dx = scatter_add_by_map(dy.data(), &map, in_len);
                vec![Some(Tensor::new(&in_shape, dx).expect("gather grad"))]
            }),
        ))
    }

    /// Mean absolute difference against a fixed target; the subgradient at
    /// exact ties is 0.
    pub fn l1_loss(&self, target: &Tensor<R>) -> Result<Var<R>> {
        let p = self.value();
        if p.shape() != target.shape() {
            return Err(KgtError::Dim {
                context: "l1_loss",
                detail: format!("{:?} vs {:?}", p.shape(), target.shape()),
            });
        }
        let n = p.numel();
        let inv_n = R::ONE / R::from_f64(n as f64);
        let mut acc = R::ZERO;
        for (&a, &b) in p.data().iter().zip(target.data()) {
            acc += (a - b).abs();
        }
        let value = Tensor::scalar(acc * inv_n);
        value.check_finite("l1_loss")?;
        let p_val = p.clone();
        let t_val = target.clone();
        let shape = p.shape().to_vec();
        Ok(Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |dy| {
                let s = dy.data()[0] * inv_n;
                let g: Vec<R> = p_val
                    .data()
                    .iter()
                    .zip(t_val.data())
                    .map(|(&a, &b)| {
                        if a > b {
                            s
                        } else if a < b {
                            -s
                        } else {
                            R::ZERO
                        }
                    })
                    .collect();
                vec![Some(Tensor::new(&shape, g).expect("l1 grad"))]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f32]]) -> Tensor<f32> {
        let n = rows[0].len();
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(&[rows.len(), n], data).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let i2 = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = t2(&[&[3.0, 4.0], &[5.0, 6.0]]);
        let y = Var::constant(i2).matmul(&Var::constant(b.clone())).unwrap();
        assert_eq!(y.value().data(), b.data());

        let z = Var::constant(Tensor::zeros(&[2, 3]))
            .matmul(&Var::constant(Tensor::<f32>::full(&[3, 2], 7.0)))
            .unwrap();
        assert_eq!(z.value().data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_hand_oracle() {
        // nested-loop oracle for [[1,2],[3,4]] x [[5,6],[7,8]]
        let a = [[1.0f32, 2.0], [3.0, 4.0]];
        let b = [[5.0f32, 6.0], [7.0, 8.0]];
        let mut expect = [[0.0f32; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    expect[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        assert_eq!(expect, [[19.0, 22.0], [43.0, 50.0]]);
        let y = Var::constant(t2(&[&a[0], &a[1]]))
            .matmul(&Var::constant(t2(&[&b[0], &b[1]])))
            .unwrap();
        assert_eq!(y.value().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Var::constant(Tensor::<f32>::zeros(&[2, 3]));
        let b = Var::constant(Tensor::<f32>::zeros(&[4, 2]));
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let y = Var::constant(t2(&[&[0.7, 0.7, 0.7]]))
            .softmax_rows(None)
            .unwrap();
        for &v in y.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }

        // row [0, ln2, ln4] -> [1/7, 2/7, 4/7]
        let y = Var::constant(t2(&[&[0.0, 2.0f32.ln(), 4.0f32.ln()]]))
            .softmax_rows(None)
            .unwrap();
        let d = y.value().data();
        assert!((d[0] - 1.0 / 7.0).abs() < 1e-6);
        assert!((d[1] - 2.0 / 7.0).abs() < 1e-6);
        assert!((d[2] - 4.0 / 7.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = t2(&[&[0.3, -1.2, 2.5, 0.0]]);
        let shifted = x.map(|v| v + 123.0);
        let a = Var::constant(x).softmax_rows(None).unwrap();
        let b = Var::constant(shifted).softmax_rows(None).unwrap();
        assert!(a.value().max_abs_diff(b.value()) < 1e-6);
    }

    #[test]
    fn softmax_masked_and_degenerate() {
        let x = t2(&[&[1.0, 2.0, 3.0]]);
        let mask = t2(&[&[0.0, f32::MIN, 0.0]]);
        let y = Var::constant(x.clone()).softmax_rows(Some(&mask)).unwrap();
        assert!(y.value().data()[1] <= 1e-12);
        let sum: f32 = y.value().data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);

        let all = t2(&[&[f32::MIN, f32::MIN, f32::MIN]]);
        let err = Var::constant(x).softmax_rows(Some(&all)).unwrap_err();
        assert!(matches!(err, KgtError::DegenerateRow { row: 0 }));
    }

    #[test]
    fn gelu_known_points() {
        let y = Var::constant(Tensor::new(&[3], vec![0.0f32, 10.0, 1.0]).unwrap())
            .gelu()
            .unwrap();
        let d = y.value().data();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 10.0).abs() < 1e-6);
        // Phi(1) from an independent erf series oracle:
        // erf(z) = 2/sqrt(pi) * sum_{n>=0} (-1)^n z^(2n+1) / (n! (2n+1))
        let z = 1.0f64 / 2.0f64.sqrt();
        let mut term = z;
        let mut series = z;
        for n in 1..30 {
            term *= -z * z / n as f64;
            series += term / (2 * n + 1) as f64;
        }
        let erf_oracle = 2.0 / std::f64::consts::PI.sqrt() * series;
        let phi1 = 0.5 * (1.0 + erf_oracle);
        let expect = 1.0 * phi1;
        assert!((expect - 0.841345).abs() < 1e-6);
        assert!((d[2] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_contract_cases() {
        let g = Var::constant(Tensor::<f32>::full(&[4], 1.0));
        let b = Var::constant(Tensor::<f32>::zeros(&[4]));
        // constant row -> zero row (eps absorbs zero variance)
        let y = Var::constant(t2(&[&[5.0, 5.0, 5.0, 5.0]]))
            .layer_norm(&g, &b, 1e-5)
            .unwrap();
        for &v in y.value().data() {
            assert!(v.abs() < 1e-3);
        }
        // gamma=0, beta=b -> every row equals b
        let g0 = Var::constant(Tensor::<f32>::zeros(&[2]));
        let bb = Var::constant(Tensor::<f32>::full(&[2], 0.25));
        let y = Var::constant(t2(&[&[1.0, 9.0], &[-3.0, 2.0]]))
            .layer_norm(&g0, &bb, 1e-5)
            .unwrap();
        for &v in y.value().data() {
            assert_eq!(v, 0.25);
        }
        // row [1,3], eps -> 0: mean 2, std 1 -> [-1, 1]
        let g1 = Var::constant(Tensor::<f32>::full(&[2], 1.0));
        let b0 = Var::constant(Tensor::<f32>::zeros(&[2]));
        let y = Var::constant(t2(&[&[1.0, 3.0]]))
            .layer_norm(&g1, &b0, 1e-12)
            .unwrap();
        assert!((y.value().data()[0] + 1.0).abs() < 1e-4);
        assert!((y.value().data()[1] - 1.0).abs() < 1e-4);

        assert!(Var::constant(t2(&[&[1.0, 3.0]]))
            .layer_norm(&g1, &b0, 0.0)
            .is_err());
    }

    #[test]
    fn conv_identity_kernel_and_constant_input() {
        // center-one identity kernel
        let x = Tensor::new(&[1, 4, 4], (0..16).map(|i| i as f32).collect()).unwrap();
        let mut wk = vec![0.0f32; 9];
        wk[4] = 1.0;
        let w = Var::constant(Tensor::new(&[1, 1, 3, 3], wk).unwrap());
        let b = Var::constant(Tensor::<f32>::zeros(&[1]));
        let y = Var::constant(x.clone()).conv2d_3x3(&w, &b).unwrap();
        assert_eq!(y.value().data(), x.data());

        // constant input, all-ones kernel -> 9c everywhere (reflect padding)
        let c = 0.37f32;
        let x = Tensor::full(&[1, 5, 6], c);
        let w = Var::constant(Tensor::<f32>::full(&[1, 1, 3, 3], 1.0));
        let y = Var::constant(x).conv2d_3x3(&w, &b).unwrap();
        for &v in y.value().data() {
            assert!((v - 9.0 * c).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(cin, cout, h, w) in &[(1usize, 1usize, 4usize, 4usize), (2, 3, 5, 7), (3, 2, 8, 8)] {
            let x = Tensor::from_fn(&[cin, h, w], |_| rng.gen_range(-1.0f32..1.0));
            let wk = Tensor::from_fn(&[cout, cin, 3, 3], |_| rng.gen_range(-1.0f32..1.0));
            let bias = Tensor::from_fn(&[cout], |_| rng.gen_range(-1.0f32..1.0));
            let y = Var::constant(x.clone())
                .conv2d_3x3(&Var::constant(wk.clone()), &Var::constant(bias.clone()))
                .unwrap();
            // independent nested-loop oracle with explicit reflect indexing
            let refl = |i: isize, n: usize| -> usize {
                if i < 0 {
                    (-i) as usize
                } else if i as usize >= n {
                    2 * n - 2 - i as usize
                } else {
                    i as usize
                }
            };
            for co in 0..cout {
                for y0 in 0..h {
                    for x0 in 0..w {
                        let mut acc = bias.data()[co];
                        for ci in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = refl(y0 as isize + ky as isize - 1, h);
                                    let sx = refl(x0 as isize + kx as isize - 1, w);
                                    acc += wk.data()[((co * cin + ci) * 3 + ky) * 3 + kx]
                                        * x.data()[(ci * h + sy) * w + sx];
                                }
                            }
                        }
                        let got = y.value().data()[(co * h + y0) * w + x0];
                        assert!(
                            (got - acc).abs() <= 1e-5,
                            "mismatch at ({co},{y0},{x0}): {got} vs {acc}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let x = Var::constant(Tensor::<f32>::zeros(&[2, 4, 4]));
        let w = Var::constant(Tensor::<f32>::zeros(&[1, 3, 3, 3]));
        let b = Var::constant(Tensor::<f32>::zeros(&[1]));
        assert!(matches!(x.conv2d_3x3(&w, &b), Err(KgtError::Dim { .. })));
    }

    #[test]
    fn gather_and_scatter_roundtrip() {
        let x = Var::param(Tensor::new(&[4], vec![10.0f32, 20.0, 30.0, 40.0]).unwrap());
        let map = Arc::new(vec![3u32, 0, 3]);
        let y = x.gather(map, &[3]).unwrap();
        assert_eq!(y.value().data(), &[40.0, 10.0, 40.0]);
        let s = y.sum_all();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn l1_loss_cases() {
        let x = Var::constant(Tensor::<f32>::full(&[4], 0.5));
        assert_eq!(
            x.l1_loss(&Tensor::full(&[4], 0.5)).unwrap().value().data()[0],
            0.0
        );
        let z = Var::constant(Tensor::<f32>::zeros(&[5]));
        let c = -0.3f32;
        let l = z.l1_loss(&Tensor::full(&[5], c)).unwrap();
        assert!((l.value().data()[0] - c.abs()).abs() < 1e-7);
        // elementwise oracle on a random pair
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f32> = (0..17).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..17).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expect = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f32>() / 17.0;
        let l = Var::constant(Tensor::new(&[17], a).unwrap())
            .l1_loss(&Tensor::new(&[17], b).unwrap())
            .unwrap();
        assert!((l.value().data()[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn reflect_index_folds() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        // deep padding folds repeatedly
        assert_eq!(reflect_index(9, 4), 3);
        assert_eq!(reflect_index(-5, 3), 1);
        assert_eq!(reflect_index(7, 1), 0);
    }
}

//! Operation constructors for [`Tensor`].
//!
//! Every op computes its forward value eagerly and, when any input needs a
//! gradient, records a closure that maps the output gradient to parent
//! gradient contributions. Shape errors panic naming both shapes.

use super::Tensor;

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "shape mismatch in {op}: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

fn dims2(t: &Tensor, op: &str) -> (usize, usize) {
    match t.shape() {
        [r, c] => (*r, *c),
        s => panic!("{op} expects a 2-d tensor, got shape {s:?}"),
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        same_shape(self, other, "add");
        let value: Vec<f64> = self
            .value()
            .iter()
            .zip(other.value().iter())
            .map(|(a, b)| a + b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(g);
                pb.accumulate_grad(g);
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        same_shape(self, other, "sub");
        let value: Vec<f64> = self
            .value()
            .iter()
            .zip(other.value().iter())
            .map(|(a, b)| a - b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                pb.accumulate_grad(&neg);
            }),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Tensor {
        same_shape(self, other, "mul");
        let value: Vec<f64> = self
            .value()
            .iter()
            .zip(other.value().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let bv = pb.to_vec();
                let av = pa.to_vec();
                let ga: Vec<f64> = g.iter().zip(&bv).map(|(gi, b)| gi * b).collect();
                let gb: Vec<f64> = g.iter().zip(&av).map(|(gi, a)| gi * a).collect();
                pa.accumulate_grad(&ga);
                pb.accumulate_grad(&gb);
            }),
        )
    }

    pub fn scale(&self, k: f64) -> Tensor {
        let value: Vec<f64> = self.value().iter().map(|a| k * a).collect();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let gp: Vec<f64> = g.iter().map(|gi| k * gi).collect();
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// Adds a bias row vector to every row of a matrix.
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        let (n, c) = dims2(self, "add_bias");
        assert_eq!(
            bias.shape(),
            &[c],
            "shape mismatch in add_bias: {:?} vs bias {:?}",
            self.shape(),
            bias.shape()
        );
        let bv = bias.to_vec();
        let value: Vec<f64> = self
            .value()
            .iter()
            .enumerate()
            .map(|(i, a)| a + bv[i % c])
            .collect();
        let (pm, pb) = (self.clone(), bias.clone());
        Tensor::from_op(
            vec![n, c],
            value,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                pm.accumulate_grad(g);
                let mut gb = vec![0.0; c];
                for (i, gi) in g.iter().enumerate() {
                    gb[i % c] += gi;
                }
                pb.accumulate_grad(&gb);
            }),
        )
    }

    /// [n,k] x [k,m] -> [n,m].
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (n, k) = dims2(self, "matmul");
        let (k2, m) = dims2(other, "matmul");
        assert_eq!(
            k, k2,
            "shape mismatch in matmul: {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let av = self.to_vec();
        let bv = other.to_vec();
        let mut value = vec![0.0; n * m];
        for i in 0..n {
            for l in 0..k {
                let a = av[i * k + l];
                if a == 0.0 {
                    continue;
                }
                for j in 0..m {
                    value[i * m + j] += a * bv[l * m + j];
                }
            }
        }
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            vec![n, m],
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let av = pa.to_vec();
                let bv = pb.to_vec();
                // gA = G . B^T
                let mut ga = vec![0.0; n * k];
                for i in 0..n {
                    for j in 0..m {
                        let gi = g[i * m + j];
                        if gi == 0.0 {
                            continue;
                        }
                        for l in 0..k {
                            ga[i * k + l] += gi * bv[l * m + j];
                        }
                    }
                }
                // gB = A^T . G
                let mut gb = vec![0.0; k * m];
                for i in 0..n {
                    for l in 0..k {
                        let a = av[i * k + l];
                        if a == 0.0 {
                            continue;
                        }
                        for j in 0..m {
                            gb[l * m + j] += a * g[i * m + j];
                        }
                    }
                }
                pa.accumulate_grad(&ga);
                pb.accumulate_grad(&gb);
            }),
        )
    }

    /// [n,k] x [m,k]^T -> [n,m]; attention scores without materializing a
    /// transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        let (n, k) = dims2(self, "matmul_nt");
        let (m, k2) = dims2(other, "matmul_nt");
        assert_eq!(
            k, k2,
            "shape mismatch in matmul_nt: {:?} x {:?}^T",
            self.shape(),
            other.shape()
        );
        let av = self.to_vec();
        let bv = other.to_vec();
        let mut value = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += av[i * k + l] * bv[j * k + l];
                }
                value[i * m + j] = acc;
            }
        }
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            vec![n, m],
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let av = pa.to_vec();
                let bv = pb.to_vec();
                let mut ga = vec![0.0; n * k];
                let mut gb = vec![0.0; m * k];
                for i in 0..n {
                    for j in 0..m {
                        let gi = g[i * m + j];
                        if gi == 0.0 {
                            continue;
                        }
                        for l in 0..k {
                            ga[i * k + l] += gi * bv[j * k + l];
                            gb[j * k + l] += gi * av[i * k + l];
                        }
                    }
                }
                pa.accumulate_grad(&ga);
                pb.accumulate_grad(&gb);
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let xv = self.to_vec();
        let value: Vec<f64> = xv.iter().map(|a| a.max(0.0)).collect();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let xv = p.to_vec();
                let gp: Vec<f64> = g
                    .iter()
                    .zip(&xv)
                    .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                    .collect();
                p.accumulate_grad(&gp);
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let value: Vec<f64> = self
            .value()
            .iter()
            .map(|a| 1.0 / (1.0 + (-a).exp()))
            .collect();
        let y = value.clone();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let gp: Vec<f64> = g.iter().zip(&y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                p.accumulate_grad(&gp);
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        let value: Vec<f64> = self.value().iter().map(|a| a.exp()).collect();
        let y = value.clone();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let gp: Vec<f64> = g.iter().zip(&y).map(|(gi, yi)| gi * yi).collect();
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// Inverse sigmoid; inputs are clamped into (0,1) by 1e-12 before the
    /// logarithms, so callers should clamp meaningfully themselves.
    pub fn logit(&self) -> Tensor {
        let xv: Vec<f64> = self
            .value()
            .iter()
            .map(|a| a.clamp(1e-12, 1.0 - 1e-12))
            .collect();
        let value: Vec<f64> = xv.iter().map(|x| (x / (1.0 - x)).ln()).collect();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let gp: Vec<f64> = g
                    .iter()
                    .zip(&xv)
                    .map(|(gi, x)| gi / (x * (1.0 - x)))
                    .collect();
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// Clamp into [eps, 1-eps]; gradient passes through strictly inside the
    /// interval and is zero on the clamped boundary.
    pub fn clamp_unit(&self, eps: f64) -> Tensor {
        let xv = self.to_vec();
        let value: Vec<f64> = xv.iter().map(|a| a.clamp(eps, 1.0 - eps)).collect();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let xv = p.to_vec();
                let gp: Vec<f64> = g
                    .iter()
                    .zip(&xv)
                    .map(|(gi, x)| if *x > eps && *x < 1.0 - eps { *gi } else { 0.0 })
                    .collect();
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// Row-wise softmax; a 1-d tensor is treated as a single row.
    pub fn softmax(&self) -> Tensor {
        let (rows, cols) = match self.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => panic!("softmax expects a 1-d or 2-d tensor, got shape {s:?}"),
        };
        let xv = self.to_vec();
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                value[r * cols + c] = e;
                denom += e;
            }
            for c in 0..cols {
                value[r * cols + c] /= denom;
            }
        }
        let y = value.clone();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![0.0; y.len()];
                for r in 0..rows {
                    let o = r * cols;
                    let dot: f64 = (0..cols).map(|c| g[o + c] * y[o + c]).sum();
                    for c in 0..cols {
                        gp[o + c] = y[o + c] * (g[o + c] - dot);
                    }
                }
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.value().iter().sum();
        let n = self.numel();
        let p = self.clone();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g| {
                p.accumulate_grad(&vec![g[0]; n]);
            }),
        )
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&self, i: usize) -> Tensor {
        let (n, c) = dims2(self, "row");
        assert!(i < n, "row {i} out of bounds for shape {:?}", self.shape());
        let value = self.value()[i * c..(i + 1) * c].to_vec();
        let p = self.clone();
        Tensor::from_op(
            vec![c],
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![0.0; n * c];
                gp[i * c..(i + 1) * c].copy_from_slice(g);
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// Single element of a 1-d tensor as a scalar.
    pub fn index(&self, i: usize) -> Tensor {
        assert_eq!(self.shape().len(), 1, "index expects a 1-d tensor, got {:?}", self.shape());
        let n = self.numel();
        assert!(i < n, "index {i} out of bounds for shape {:?}", self.shape());
        let value = vec![self.value()[i]];
        let p = self.clone();
        Tensor::from_op(
            vec![1],
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![0.0; n];
                gp[i] = g[0];
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// Contiguous slice [a, b) of a 1-d tensor.
    pub fn slice(&self, a: usize, b: usize) -> Tensor {
        assert_eq!(self.shape().len(), 1, "slice expects a 1-d tensor, got {:?}", self.shape());
        let n = self.numel();
        assert!(a < b && b <= n, "slice {a}..{b} out of bounds for shape {:?}", self.shape());
        let value = self.value()[a..b].to_vec();
        let p = self.clone();
        Tensor::from_op(
            vec![b - a],
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![0.0; n];
                gp[a..b].copy_from_slice(g);
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// Column range [a, b) of a matrix.
    pub fn slice_cols(&self, a: usize, b: usize) -> Tensor {
        let (n, c) = dims2(self, "slice_cols");
        assert!(a < b && b <= c, "slice_cols {a}..{b} out of bounds for shape {:?}", self.shape());
        let w = b - a;
        let xv = self.value();
        let mut value = vec![0.0; n * w];
        for r in 0..n {
            value[r * w..(r + 1) * w].copy_from_slice(&xv[r * c + a..r * c + b]);
        }
        drop(xv);
        let p = self.clone();
        Tensor::from_op(
            vec![n, w],
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![0.0; n * c];
                for r in 0..n {
                    gp[r * c + a..r * c + b].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// Gathers elements of a 1-d tensor; duplicate indices accumulate in the
    /// gradient.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        assert_eq!(self.shape().len(), 1, "gather expects a 1-d tensor, got {:?}", self.shape());
        let n = self.numel();
        for &i in idx {
            assert!(i < n, "gather index {i} out of bounds for shape {:?}", self.shape());
        }
        let xv = self.value();
        let value: Vec<f64> = idx.iter().map(|&i| xv[i]).collect();
        drop(xv);
        let p = self.clone();
        let idx = idx.to_vec();
        Tensor::from_op(
            vec![idx.len()],
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![0.0; n];
                for (j, &i) in idx.iter().enumerate() {
                    gp[i] += g[j];
                }
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.numel(),
            "reshape to {shape:?} does not preserve element count of {:?}",
            self.shape()
        );
        let p = self.clone();
        Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |g| p.accumulate_grad(g)),
        )
    }

    /// Stacks 1-d tensors of equal length into a matrix, one per row.
    pub fn stack_rows(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "stack_rows needs at least one row");
        let c = parts[0].numel();
        let mut value = Vec::with_capacity(parts.len() * c);
        for p in parts {
            assert_eq!(
                p.shape(),
                &[c],
                "shape mismatch in stack_rows: {:?} vs {:?}",
                parts[0].shape(),
                p.shape()
            );
            value.extend_from_slice(&p.value());
        }
        let owned: Vec<Tensor> = parts.to_vec();
        let n = parts.len();
        Tensor::from_op(
            vec![n, c],
            value,
            parts.to_vec(),
            Box::new(move |g| {
                for (i, p) in owned.iter().enumerate() {
                    p.accumulate_grad(&g[i * c..(i + 1) * c]);
                }
            }),
        )
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let (n, _) = dims2(&parts[0], "concat_cols");
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (rn, rc) = dims2(p, "concat_cols");
                assert_eq!(
                    rn, n,
                    "shape mismatch in concat_cols: {:?} vs {:?}",
                    parts[0].shape(),
                    p.shape()
                );
                rc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut value = vec![0.0; n * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pv = p.value();
            for r in 0..n {
                value[r * total + off..r * total + off + w]
                    .copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let owned: Vec<Tensor> = parts.to_vec();
        Tensor::from_op(
            vec![n, total],
            value,
            parts.to_vec(),
            Box::new(move |g| {
                let mut off = 0;
                for (p, &w) in owned.iter().zip(&widths) {
                    let mut gp = vec![0.0; n * w];
                    for r in 0..n {
                        gp[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    p.accumulate_grad(&gp);
                    off += w;
                }
            }),
        )
    }

    /// Affine map by a constant matrix and offset: y = M x + b.
    pub fn linear_map(&self, mat: &[f64], rows: usize, offset: &[f64]) -> Tensor {
        let n = self.numel();
        assert_eq!(self.shape().len(), 1, "linear_map expects a 1-d input, got {:?}", self.shape());
        assert_eq!(mat.len(), rows * n, "linear_map matrix {}x{n} has {} entries", rows, mat.len());
        assert_eq!(offset.len(), rows, "linear_map offset length {} != {rows}", offset.len());
        let xv = self.value();
        let mut value = offset.to_vec();
        for i in 0..rows {
            for j in 0..n {
                value[i] += mat[i * n + j] * xv[j];
            }
        }
        drop(xv);
        let p = self.clone();
        let mat = mat.to_vec();
        Tensor::from_op(
            vec![rows],
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![0.0; n];
                for i in 0..rows {
                    let gi = g[i];
                    if gi == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        gp[j] += mat[i * n + j] * gi;
                    }
                }
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// Homogeneous 3-vector -> (x/z, y/z). The caller guarantees z is bounded
    /// away from zero (visibility filtering).
    pub fn perspective_div(&self) -> Tensor {
        assert_eq!(self.shape(), &[3], "perspective_div expects shape [3], got {:?}", self.shape());
        let xv = self.to_vec();
        let (x, y, z) = (xv[0], xv[1], xv[2]);
        let p = self.clone();
        Tensor::from_op(
            vec![2],
            vec![x / z, y / z],
            vec![self.clone()],
            Box::new(move |g| {
                let gp = vec![
                    g[0] / z,
                    g[1] / z,
                    -(g[0] * x + g[1] * y) / (z * z),
                ];
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// x / sqrt(|x|^2 + 1e-24); unit norm for any non-vanishing input.
    pub fn l2_normalize(&self) -> Tensor {
        assert_eq!(self.shape().len(), 1, "l2_normalize expects a 1-d tensor, got {:?}", self.shape());
        let xv = self.to_vec();
        let r = (xv.iter().map(|a| a * a).sum::<f64>() + 1e-24).sqrt();
        let value: Vec<f64> = xv.iter().map(|a| a / r).collect();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let dot: f64 = g.iter().zip(&xv).map(|(gi, x)| gi * x).sum();
                let r3 = r * r * r;
                let gp: Vec<f64> = g
                    .iter()
                    .zip(&xv)
                    .map(|(gi, x)| gi / r - x * dot / r3)
                    .collect();
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// Rescales a vector onto the L2 ball of radius `limit` when it lies
    /// outside; vectors inside pass through unchanged (identity gradient).
    /// Piecewise smooth like relu: the two branches meet at ‖x‖ = limit.
    pub fn clamp_norm(&self, limit: f64) -> Tensor {
        assert_eq!(self.shape().len(), 1, "clamp_norm expects a 1-d tensor, got {:?}", self.shape());
        assert!(limit > 0.0, "clamp_norm limit must be positive, got {limit}");
        let xv = self.to_vec();
        let r = (xv.iter().map(|a| a * a).sum::<f64>() + 1e-24).sqrt();
        if r <= limit {
            return self.clone();
        }
        let s = limit / r;
        let value: Vec<f64> = xv.iter().map(|a| a * s).collect();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let dot: f64 = g.iter().zip(&xv).map(|(gi, x)| gi * x).sum();
                let r2 = r * r;
                let gp: Vec<f64> = g
                    .iter()
                    .zip(&xv)
                    .map(|(gi, x)| s * (gi - x * dot / r2))
                    .collect();
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// Weighted row sum: out = sum_p w[p] * rows[p, :].
    pub fn scale_rows_sum(rows: &Tensor, w: &Tensor) -> Tensor {
        let (n, c) = dims2(rows, "scale_rows_sum");
        assert_eq!(
            w.shape(),
            &[n],
            "shape mismatch in scale_rows_sum: rows {:?} vs weights {:?}",
            rows.shape(),
            w.shape()
        );
        let rv = rows.value();
        let wv = w.value();
        let mut value = vec![0.0; c];
        for p in 0..n {
            let wp = wv[p];
            for j in 0..c {
                value[j] += wp * rv[p * c + j];
            }
        }
        drop(rv);
        drop(wv);
        let (pr, pw) = (rows.clone(), w.clone());
        Tensor::from_op(
            vec![c],
            value,
            vec![rows.clone(), w.clone()],
            Box::new(move |g| {
                let rv = pr.to_vec();
                let wv = pw.to_vec();
                let mut gr = vec![0.0; n * c];
                let mut gw = vec![0.0; n];
                for p in 0..n {
                    for j in 0..c {
                        gr[p * c + j] = wv[p] * g[j];
                        gw[p] += rv[p * c + j] * g[j];
                    }
                }
                pr.accumulate_grad(&gr);
                pw.accumulate_grad(&gw);
            }),
        )
    }

    /// Bilinear interpolation of an H x W x C (or H x W) map at pixel
    /// coordinates uv = (u, v), differentiable w.r.t. both the map and uv.
    ///
    /// Coordinates outside [0, W-1] x [0, H-1] yield the zero vector.
    pub fn bilinear_sample(map: &Tensor, uv: &Tensor) -> Tensor {
        Tensor::bilinear_sample_scaled(map, uv, 1.0, 1.0)
    }

    /// [`Tensor::bilinear_sample`] after scaling uv by (sx, sy); folds
    /// pyramid-level coordinate conversion into the op.
    pub fn bilinear_sample_scaled(map: &Tensor, uv: &Tensor, sx: f64, sy: f64) -> Tensor {
        let (h, w, c) = match map.shape() {
            [h, w] => (*h, *w, 1usize),
            [h, w, c] => (*h, *w, *c),
            s => panic!("bilinear_sample expects an HxW or HxWxC map, got shape {s:?}"),
        };
        assert_eq!(uv.shape(), &[2], "bilinear_sample expects uv of shape [2], got {:?}", uv.shape());
        assert!(h >= 2 && w >= 2, "bilinear_sample map {h}x{w} must be at least 2x2");
        let uvv = uv.to_vec();
        let (su, sv) = (uvv[0] * sx, uvv[1] * sy);
        if !(0.0..=(w - 1) as f64).contains(&su) || !(0.0..=(h - 1) as f64).contains(&sv) {
            return Tensor::zeros(&[c]);
        }
        let x0 = (su.floor() as usize).min(w - 2);
        let y0 = (sv.floor() as usize).min(h - 2);
        let fx = su - x0 as f64;
        let fy = sv - y0 as f64;
        let mv = map.value();
        let at = |y: usize, x: usize, ch: usize| mv[(y * w + x) * c + ch];
        let mut value = vec![0.0; c];
        for ch in 0..c {
            value[ch] = (1.0 - fx) * (1.0 - fy) * at(y0, x0, ch)
                + fx * (1.0 - fy) * at(y0, x0 + 1, ch)
                + (1.0 - fx) * fy * at(y0 + 1, x0, ch)
                + fx * fy * at(y0 + 1, x0 + 1, ch);
        }
        drop(mv);
        let (pm, puv) = (map.clone(), uv.clone());
        Tensor::from_op(
            vec![c],
            value,
            vec![map.clone(), uv.clone()],
            Box::new(move |g| {
                let mv = pm.to_vec();
                let at = |y: usize, x: usize, ch: usize| mv[(y * w + x) * c + ch];
                let mut du = 0.0;
                let mut dv = 0.0;
                for ch in 0..c {
                    let f00 = at(y0, x0, ch);
                    let f10 = at(y0, x0 + 1, ch);
                    let f01 = at(y0 + 1, x0, ch);
                    let f11 = at(y0 + 1, x0 + 1, ch);
                    du += g[ch] * ((1.0 - fy) * (f10 - f00) + fy * (f11 - f01));
                    dv += g[ch] * ((1.0 - fx) * (f01 - f00) + fx * (f11 - f10));
                }
                puv.accumulate_grad(&[du * sx, dv * sy]);
                if pm.needs_grad() {
                    let mut gm = vec![0.0; mv.len()];
                    for ch in 0..c {
                        gm[(y0 * w + x0) * c + ch] += g[ch] * (1.0 - fx) * (1.0 - fy);
                        gm[(y0 * w + x0 + 1) * c + ch] += g[ch] * fx * (1.0 - fy);
                        gm[((y0 + 1) * w + x0) * c + ch] += g[ch] * (1.0 - fx) * fy;
                        gm[((y0 + 1) * w + x0 + 1) * c + ch] += g[ch] * fx * fy;
                    }
                    pm.accumulate_grad(&gm);
                }
            }),
        )
    }

    /// Mean absolute difference over all elements.
    pub fn l1_loss(&self, target: &Tensor) -> Tensor {
        same_shape(self, target, "l1_loss");
        let n = self.numel() as f64;
        let diffs: Vec<f64> = self
            .value()
            .iter()
            .zip(target.value().iter())
            .map(|(a, b)| a - b)
            .collect();
        let value = diffs.iter().map(|d| d.abs()).sum::<f64>() / n;
        let (pa, pb) = (self.clone(), target.clone());
        Tensor::from_op(
            vec![1],
            vec![value],
            vec![self.clone(), target.clone()],
            Box::new(move |g| {
                let gp: Vec<f64> = diffs.iter().map(|d| g[0] * d.signum() / n).collect();
                pa.accumulate_grad(&gp);
                let gn: Vec<f64> = gp.iter().map(|x| -x).collect();
                pb.accumulate_grad(&gn);
            }),
        )
    }
}

/// Per-class sigmoid focal loss over one logit vector.
///
/// The target class contributes -alpha (1-p)^gamma log p; every other class
/// (and every class when the target is absent) contributes the background
/// term -(1-alpha) p^gamma log(1-p). Probabilities are clamped to
/// [1e-12, 1-1e-12] so saturated logits stay finite.
pub fn focal_loss(logits: &Tensor, target: Option<usize>, gamma: f64, alpha: f64) -> Tensor {
    assert_eq!(
        logits.shape().len(),
        1,
        "focal_loss expects a 1-d logit vector, got {:?}",
        logits.shape()
    );
    let k = logits.numel();
    if let Some(c) = target {
        assert!(c < k, "focal_loss target class {c} out of range for {k} logits");
    }
    let probs: Vec<f64> = logits
        .value()
        .iter()
        .map(|l| (1.0 / (1.0 + (-l).exp())).clamp(1e-12, 1.0 - 1e-12))
        .collect();
    let mut value = 0.0;
    for (j, &p) in probs.iter().enumerate() {
        if target == Some(j) {
            value += -alpha * (1.0 - p).powf(gamma) * p.ln();
        } else {
            value += -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln();
        }
    }
    let parent = logits.clone();
    Tensor::from_op(
        vec![1],
        vec![value],
        vec![logits.clone()],
        Box::new(move |g| {
            let mut gp = vec![0.0; k];
            for (j, &p) in probs.iter().enumerate() {
                let d = if target == Some(j) {
                    alpha * gamma * (1.0 - p).powf(gamma) * p * p.ln()
                        - alpha * (1.0 - p).powf(gamma + 1.0)
                } else {
                    -(1.0 - alpha) * gamma * p.powf(gamma) * (1.0 - p) * (1.0 - p).ln()
                        + (1.0 - alpha) * p.powf(gamma + 1.0)
                };
                gp[j] = g[0] * d;
            }
            parent.accumulate_grad(&gp);
        }),
    )
}

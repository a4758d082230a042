use rand::Rng;

use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

// ── dense kernels ───────────────────────────────────────────────────────

/// c[m,n] += a[m,k] · b[k,n]
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, &b)| *c += av * b);
        }
    }
}

/// c[m,n] += a[k,m]ᵀ · b[k,n]
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, &b)| *c += av * b);
        }
    }
}

/// c[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let bt = transpose2(b, n, k);
    gemm_nn(m, k, n, a, &bt, c);
}

fn transpose2<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// ── elementwise ─────────────────────────────────────────────────────────

fn binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Vec<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    Ok(ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let data = binary("add", a, b, |x, y| x + y)?;
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        "add",
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
    ))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let data = binary("sub", a, b, |x, y| x - y)?;
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        "sub",
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]),
    ))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let data = binary("mul", a, b, |x, y| x * y)?;
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        "mul",
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let ga = ac.requires_grad().then(|| {
                let bd = bc.data();
                g.iter().zip(bd.iter()).map(|(&g, &b)| g * b).collect()
            });
            let gb = bc.requires_grad().then(|| {
                let ad = ac.data();
                g.iter().zip(ad.iter()).map(|(&g, &a)| g * a).collect()
            });
            vec![ga, gb]
        }),
    ))
}

pub fn scale<T: Scalar>(x: &Tensor<T>, s: T) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v * s).collect();
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        "scale",
        vec![x.clone()],
        Box::new(move |g| vec![Some(g.iter().map(|&v| v * s).collect())]),
    )
}

/// Adds a constant (non-differentiable) array of the same length.
pub fn add_const<T: Scalar>(x: &Tensor<T>, c: &[T]) -> Result<Tensor<T>> {
    if c.len() != x.numel() {
        return Err(shape_err("add_const", x.shape(), &[c.len()]));
    }
    let data = x.data().iter().zip(c).map(|(&v, &c)| v + c).collect();
    Ok(Tensor::from_op(
        data,
        x.shape().to_vec(),
        "add_const",
        vec![x.clone()],
        Box::new(|g| vec![Some(g.to_vec())]),
    ))
}

/// Multiplies elementwise by a constant (non-differentiable) array.
pub fn mul_const<T: Scalar>(x: &Tensor<T>, c: &[T]) -> Result<Tensor<T>> {
    if c.len() != x.numel() {
        return Err(shape_err("mul_const", x.shape(), &[c.len()]));
    }
    let data = x.data().iter().zip(c).map(|(&v, &c)| v * c).collect();
    let c = c.to_vec();
    Ok(Tensor::from_op(
        data,
        x.shape().to_vec(),
        "mul_const",
        vec![x.clone()],
        Box::new(move |g| vec![Some(g.iter().zip(&c).map(|(&g, &c)| g * c).collect())]),
    ))
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let out: Vec<T> = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let saved = out.clone();
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        "sigmoid",
        vec![x.clone()],
        Box::new(move |g| {
            vec![Some(
                g.iter()
                    .zip(&saved)
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect(),
            )]
        }),
    )
}

pub fn sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let total = x.data().iter().copied().sum();
    let n = x.numel();
    Tensor::from_op(
        vec![total],
        Vec::new(),
        "sum",
        vec![x.clone()],
        Box::new(move |g| vec![Some(vec![g[0]; n])]),
    )
}

/// Σ xᵢ·wᵢ with constant weights; a convenient scalar objective for tests.
pub fn weighted_sum<T: Scalar>(x: &Tensor<T>, w: &[T]) -> Result<Tensor<T>> {
    if w.len() != x.numel() {
        return Err(shape_err("weighted_sum", x.shape(), &[w.len()]));
    }
    let total = x.data().iter().zip(w).map(|(&a, &b)| a * b).sum();
    let w = w.to_vec();
    Ok(Tensor::from_op(
        vec![total],
        Vec::new(),
        "weighted_sum",
        vec![x.clone()],
        Box::new(move |g| vec![Some(w.iter().map(|&w| w * g[0]).collect())]),
    ))
}

// ── shape ───────────────────────────────────────────────────────────────

pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if numel(shape) != x.numel() || shape.contains(&0) {
        return Err(shape_err("reshape", x.shape(), shape));
    }
    Ok(Tensor::from_op(
        x.to_vec(),
        shape.to_vec(),
        "reshape",
        vec![x.clone()],
        Box::new(|g| vec![Some(g.to_vec())]),
    ))
}

/// Swaps the last two axes: `[.., a, b] -> [.., b, a]`.
pub fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(shape_err("transpose_last2", shape, &[]));
    }
    let r = shape.len();
    let (a, b) = (shape[r - 2], shape[r - 1]);
    let batch = numel(&shape[..r - 2]);
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for m in 0..batch {
        out.extend(transpose2(&src[m * a * b..(m + 1) * a * b], a, b));
    }
    drop(src);
    let mut new_shape = shape.to_vec();
    new_shape.swap(r - 2, r - 1);
    Ok(Tensor::from_op(
        out,
        new_shape,
        "transpose",
        vec![x.clone()],
        Box::new(move |g| {
            let mut gi = Vec::with_capacity(g.len());
            for m in 0..batch {
                gi.extend(transpose2(&g[m * a * b..(m + 1) * a * b], b, a));
            }
            vec![Some(gi)]
        }),
    ))
}

/// Stacks two matrices with the same column count vertically.
pub fn concat_rows<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(shape_err("concat_rows", sa, sb));
    }
    let split = a.numel();
    let mut data = a.to_vec();
    data.extend_from_slice(&b.data());
    Ok(Tensor::from_op(
        data,
        vec![sa[0] + sb[0], sa[1]],
        "concat_rows",
        vec![a.clone(), b.clone()],
        Box::new(move |g| vec![Some(g[..split].to_vec()), Some(g[split..].to_vec())]),
    ))
}

/// Builds a `[indices.len(), D]` matrix from rows of `src: [N, D]`; `None`
/// produces a zero row.
pub fn gather_rows<T: Scalar>(src: &Tensor<T>, indices: &[Option<usize>]) -> Result<Tensor<T>> {
    let s = src.shape();
    if s.len() != 2 {
        return Err(shape_err("gather_rows", s, &[]));
    }
    let (n, d) = (s[0], s[1]);
    if let Some(&bad) = indices.iter().flatten().find(|&&i| i >= n) {
        return Err(Error::Index {
            index: bad,
            bound: n,
        });
    }
    let sd = src.data();
    let mut out = vec![T::zero(); indices.len() * d];
    for (r, idx) in indices.iter().enumerate() {
        if let Some(i) = idx {
            out[r * d..(r + 1) * d].copy_from_slice(&sd[i * d..(i + 1) * d]);
        }
    }
    drop(sd);
    let indices = indices.to_vec();
    Ok(Tensor::from_op(
        out,
        vec![indices.len(), d],
        "gather_rows",
        vec![src.clone()],
        Box::new(move |g| {
            let mut gs = vec![T::zero(); n * d];
            for (r, idx) in indices.iter().enumerate() {
                if let Some(i) = idx {
                    gs[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, &b)| *a += b);
                }
            }
            vec![Some(gs)]
        }),
    ))
}

/// Looks up rows of `table: [vocab, dim]` for every id; the output has shape
/// `ids_shape ++ [dim]`.
pub fn embedding<T: Scalar>(
    table: &Tensor<T>,
    ids: &[usize],
    ids_shape: &[usize],
) -> Result<Tensor<T>> {
    let s = table.shape();
    if s.len() != 2 || numel(ids_shape) != ids.len() {
        return Err(shape_err("embedding", s, ids_shape));
    }
    let vocab = s[0];
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::Index {
            index: bad,
            bound: vocab,
        });
    }
    let idx: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
    let rows = gather_rows(table, &idx)?;
    let mut shape = ids_shape.to_vec();
    shape.push(s[1]);
    reshape(&rows, &shape)
}

// ── products ────────────────────────────────────────────────────────────

/// `[m,k] · [k,n] -> [m,n]`
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(shape_err("matmul", sa, sb));
    }
    let a3 = reshape(a, &[1, sa[0], sa[1]])?;
    let b3 = reshape(b, &[1, sb[0], sb[1]])?;
    let out = batched_matmul(&a3, &b3, false)?;
    reshape(&out, &[sa[0], sb[1]])
}

/// Batched product of `a: [B,m,k]` with `b: [B,k,n]`, or with `b: [B,n,k]`
/// transposed when `transpose_b` is set.
pub fn batched_matmul<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    transpose_b: bool,
) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
        return Err(shape_err("batched_matmul", sa, sb));
    }
    let (bs, m, k) = (sa[0], sa[1], sa[2]);
    let n = if transpose_b { sb[1] } else { sb[2] };
    let kb = if transpose_b { sb[2] } else { sb[1] };
    if kb != k {
        return Err(shape_err("batched_matmul", sa, sb));
    }
    let mut out = vec![T::zero(); bs * m * n];
    {
        let (ad, bd) = (a.data(), b.data());
        for i in 0..bs {
            let ai = &ad[i * m * k..(i + 1) * m * k];
            let bi = &bd[i * k * n..(i + 1) * k * n];
            let ci = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                gemm_nt(m, k, n, ai, bi, ci);
            } else {
                gemm_nn(m, k, n, ai, bi, ci);
            }
        }
    }
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        out,
        vec![bs, m, n],
        "batched_matmul",
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let ga = ac.requires_grad().then(|| {
                let bd = bc.data();
                let mut ga = vec![T::zero(); bs * m * k];
                for i in 0..bs {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &bd[i * k * n..(i + 1) * k * n];
                    let dst = &mut ga[i * m * k..(i + 1) * m * k];
                    if transpose_b {
                        // dA = G · B  with B stored [n,k]
                        gemm_nn(m, n, k, gi, bi, dst);
                    } else {
                        // dA = G · Bᵀ with B stored [k,n]
                        gemm_nt(m, n, k, gi, bi, dst);
                    }
                }
                ga
            });
            let gb = bc.requires_grad().then(|| {
                let ad = ac.data();
                let mut gb = vec![T::zero(); bs * k * n];
                for i in 0..bs {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &ad[i * m * k..(i + 1) * m * k];
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if transpose_b {
                        // dB[n,k] = Gᵀ · A
                        gemm_tn(n, m, k, gi, ai, dst);
                    } else {
                        // dB[k,n] = Aᵀ · G
                        gemm_tn(k, m, n, ai, gi, dst);
                    }
                }
                gb
            });
            vec![ga, gb]
        }),
    ))
}

/// Affine map over the last axis: `x: [.., in]`, `weight: [out, in]`,
/// `bias: [out]`.
pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (sx, sw) = (x.shape(), weight.shape());
    if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[1] {
        return Err(shape_err("linear", sx, sw));
    }
    let (out_f, in_f) = (sw[0], sw[1]);
    if let Some(b) = bias {
        if b.shape() != [out_f] {
            return Err(shape_err("linear", sw, b.shape()));
        }
    }
    let rows = x.numel() / in_f;
    let mut out = vec![T::zero(); rows * out_f];
    if let Some(b) = bias {
        let bd = b.data();
        for r in 0..rows {
            out[r * out_f..(r + 1) * out_f].copy_from_slice(&bd);
        }
    }
    gemm_nt(rows, in_f, out_f, &x.data(), &weight.data(), &mut out);

    let mut shape = sx.to_vec();
    *shape.last_mut().unwrap() = out_f;
    let mut inputs = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    let (xc, wc) = (x.clone(), weight.clone());
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        out,
        shape,
        "linear",
        inputs,
        Box::new(move |g| {
            let gx = xc.requires_grad().then(|| {
                let mut gx = vec![T::zero(); rows * in_f];
                gemm_nn(rows, out_f, in_f, g, &wc.data(), &mut gx);
                gx
            });
            let gw = wc.requires_grad().then(|| {
                let mut gw = vec![T::zero(); out_f * in_f];
                gemm_tn(out_f, rows, in_f, g, &xc.data(), &mut gw);
                gw
            });
            let mut res = vec![gx, gw];
            if has_bias {
                let mut gb = vec![T::zero(); out_f];
                for r in 0..rows {
                    gb.iter_mut()
                        .zip(&g[r * out_f..(r + 1) * out_f])
                        .for_each(|(a, &b)| *a += b);
                }
                res.push(Some(gb));
            }
            res
        }),
    ))
}

// ── convolution ─────────────────────────────────────────────────────────

/// 1-D cross-correlation over `input: [batch, in_ch, len]` with
/// `kernel: [out_ch, in_ch, k]`, zero padding on each side. Returns
/// `[batch, out_ch, len + pad_left + pad_right - k + 1]`.
pub fn conv1d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    pad_left: usize,
    pad_right: usize,
) -> Result<Tensor<T>> {
    if input.shape().len() != 3 {
        return Err(shape_err("conv1d", input.shape(), kernel.shape()));
    }
    let x = transpose_last2(input)?;
    let y = conv1d_channels_last(&x, kernel, bias, pad_left, pad_right)?;
    transpose_last2(&y)
}

/// Same as [`conv1d`] on channels-last data: `input: [batch, len, in_ch]`
/// gives `[batch, out_len, out_ch]`. The kernel layout is unchanged.
pub fn conv1d_channels_last<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    pad_left: usize,
    pad_right: usize,
) -> Result<Tensor<T>> {
    let (sx, sk) = (input.shape(), kernel.shape());
    if sx.len() != 3 || sk.len() != 3 || sx[2] != sk[1] {
        return Err(shape_err("conv1d", sx, sk));
    }
    let (batch, len, cin) = (sx[0], sx[1], sx[2]);
    let (cout, k) = (sk[0], sk[2]);
    if bias.shape() != [cout] {
        return Err(shape_err("conv1d", sk, bias.shape()));
    }
    let padded = len + pad_left + pad_right;
    if k == 0 || padded < k {
        return Err(shape_err("conv1d", sx, sk));
    }
    let lout = padded - k + 1;
    let width = k * cin;

    // cols[(b, t), j*cin + i] = xpad[b, t + j, i]
    let mut cols = vec![T::zero(); batch * lout * width];
    {
        let xd = input.data();
        for b in 0..batch {
            for t in 0..lout {
                let row = &mut cols[(b * lout + t) * width..(b * lout + t + 1) * width];
                for j in 0..k {
                    let src = t + j;
                    if src < pad_left || src - pad_left >= len {
                        continue;
                    }
                    let s = b * len + src - pad_left;
                    row[j * cin..(j + 1) * cin].copy_from_slice(&xd[s * cin..(s + 1) * cin]);
                }
            }
        }
    }
    // wflat[o, j*cin + i] = kernel[o, i, j]
    let wflat = {
        let kd = kernel.data();
        let mut w = vec![T::zero(); cout * width];
        for o in 0..cout {
            for i in 0..cin {
                for j in 0..k {
                    w[o * width + j * cin + i] = kd[(o * cin + i) * k + j];
                }
            }
        }
        w
    };
    let rows = batch * lout;
    let mut out = vec![T::zero(); rows * cout];
    {
        let bd = bias.data();
        for r in 0..rows {
            out[r * cout..(r + 1) * cout].copy_from_slice(&bd);
        }
    }
    gemm_nt(rows, width, cout, &cols, &wflat, &mut out);

    let (xc, kc, bc) = (input.clone(), kernel.clone(), bias.clone());
    Ok(Tensor::from_op(
        out,
        vec![batch, lout, cout],
        "conv1d",
        vec![input.clone(), kernel.clone(), bias.clone()],
        Box::new(move |g| {
            let gx = xc.requires_grad().then(|| {
                let mut gcols = vec![T::zero(); rows * width];
                gemm_nn(rows, cout, width, g, &wflat, &mut gcols);
                let mut gx = vec![T::zero(); batch * len * cin];
                for b in 0..batch {
                    for t in 0..lout {
                        let row = &gcols[(b * lout + t) * width..(b * lout + t + 1) * width];
                        for j in 0..k {
                            let src = t + j;
                            if src < pad_left || src - pad_left >= len {
                                continue;
                            }
                            let s = b * len + src - pad_left;
                            gx[s * cin..(s + 1) * cin]
                                .iter_mut()
                                .zip(&row[j * cin..(j + 1) * cin])
                                .for_each(|(a, &b)| *a += b);
                        }
                    }
                }
                gx
            });
            let gk = kc.requires_grad().then(|| {
                let mut gw = vec![T::zero(); cout * width];
                gemm_tn(cout, rows, width, g, &cols, &mut gw);
                let mut gk = vec![T::zero(); cout * cin * k];
                for o in 0..cout {
                    for i in 0..cin {
                        for j in 0..k {
                            gk[(o * cin + i) * k + j] = gw[o * width + j * cin + i];
                        }
                    }
                }
                gk
            });
            let gb = bc.requires_grad().then(|| {
                let mut gb = vec![T::zero(); cout];
                for r in 0..rows {
                    gb.iter_mut()
                        .zip(&g[r * cout..(r + 1) * cout])
                        .for_each(|(a, &b)| *a += b);
                }
                gb
            });
            vec![gx, gk, gb]
        }),
    ))
}

// ── activations ─────────────────────────────────────────────────────────

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// Gated linear unit along `axis`: the first half of the channels is the
/// content `a`, the second half the gate `b`; output `a ⊙ σ(b)`.
pub fn glu<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() || !shape[axis].is_multiple_of(2) {
        return Err(Error::Validation(format!(
            "glu needs an even extent on axis {axis}, got shape {shape:?}"
        )));
    }
    let (outer, n, inner) = axis_split(shape, axis);
    let c = n / 2;
    let xd = x.data();
    let mut out = Vec::with_capacity(outer * c * inner);
    let mut gate = Vec::with_capacity(outer * c * inner);
    for o in 0..outer {
        let base = o * n * inner;
        for j in 0..c {
            for i in 0..inner {
                let a = xd[base + j * inner + i];
                let s = sigmoid_scalar(xd[base + (j + c) * inner + i]);
                out.push(a * s);
                gate.push(s);
            }
        }
    }
    drop(xd);
    let mut out_shape = shape.to_vec();
    out_shape[axis] = c;
    let xc = x.clone();
    Ok(Tensor::from_op(
        out,
        out_shape,
        "glu",
        vec![x.clone()],
        Box::new(move |g| {
            let xd = xc.data();
            let mut gx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                let base = o * n * inner;
                for j in 0..c {
                    for i in 0..inner {
                        let oi = (o * c + j) * inner + i;
                        let s = gate[oi];
                        let a = xd[base + j * inner + i];
                        gx[base + j * inner + i] = g[oi] * s;
                        gx[base + (j + c) * inner + i] = g[oi] * a * s * (T::one() - s);
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(shape_err("softmax", shape, &[axis]));
    }
    let (outer, n, inner) = axis_split(shape, axis);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(xd[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (xd[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[at(j)] /= total;
            }
        }
    }
    drop(xd);
    let saved = out.clone();
    Ok(Tensor::from_op(
        out,
        shape.to_vec(),
        "softmax",
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    let mut dot = T::zero();
                    for j in 0..n {
                        dot += g[at(j)] * saved[at(j)];
                    }
                    for j in 0..n {
                        gx[at(j)] = saved[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Inverted dropout: in training each element survives with probability
/// `keep_prob` and is scaled by `1/keep_prob`; otherwise the identity.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    keep_prob: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Config(format!(
            "dropout keep probability must be in (0, 1], got {keep_prob}"
        )));
    }
    if !training || keep_prob == 1.0 {
        return Ok(x.clone());
    }
    let inv = T::lit(1.0 / keep_prob);
    let mask: Vec<T> = (0..x.numel())
        .map(|_| {
            if rng.gen::<f64>() < keep_prob {
                inv
            } else {
                T::zero()
            }
        })
        .collect();
    mul_const(x, &mask)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits: [n, vocab]`, skipping positions equal to `ignore_index`.
///
/// When every position is ignored the loss is defined as 0 with a zero
/// gradient.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    ignore_index: usize,
) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(shape_err("cross_entropy", s, &[targets.len()]));
    }
    let (n, vocab) = (s[0], s[1]);
    if let Some(&bad) = targets.iter().find(|&&t| t != ignore_index && t >= vocab) {
        return Err(Error::Index {
            index: bad,
            bound: vocab,
        });
    }
    let count = targets.iter().filter(|&&t| t != ignore_index).count();
    let ld = logits.data();
    let mut probs = vec![T::zero(); n * vocab];
    let mut loss = T::zero();
    for r in 0..n {
        if targets[r] == ignore_index {
            continue;
        }
        let row = &ld[r * vocab..(r + 1) * vocab];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (p, &v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
            *p = (v - max).exp();
            total += *p;
        }
        probs[r * vocab..(r + 1) * vocab]
            .iter_mut()
            .for_each(|p| *p /= total);
        loss += max + total.ln() - row[targets[r]];
    }
    drop(ld);
    let denom = T::from_usize(count.max(1)).unwrap();
    let value = if count == 0 { T::zero() } else { loss / denom };
    let targets = targets.to_vec();
    Ok(Tensor::from_op(
        vec![value],
        Vec::new(),
        "cross_entropy",
        vec![logits.clone()],
        Box::new(move |g| {
            let mut gl = vec![T::zero(); n * vocab];
            if count > 0 {
                let f = g[0] / denom;
                for r in 0..n {
                    let t = targets[r];
                    if t == ignore_index {
                        continue;
                    }
                    for v in 0..vocab {
                        gl[r * vocab + v] = probs[r * vocab + v] * f;
                    }
                    gl[r * vocab + t] -= f;
                }
            }
            vec![Some(gl)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1.0, 1.0, 1.0, 1.0], &[1, 1, 4]);
        let k = t(&[0.0, 1.0, 0.0], &[1, 1, 3]);
        let b = t(&[0.0], &[1]);
        let y = conv1d(&x, &k, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4]);
        assert_eq!(y.to_vec(), vec![1.0; 4]);
    }

    #[test]
    fn conv_causal_shift() {
        let x = t(&[1.0, 2.0, 3.0], &[1, 1, 3]);
        let k = t(&[0.0, 1.0, 0.0], &[1, 1, 3]);
        let b = t(&[0.0], &[1]);
        let y = conv1d(&x, &k, &b, 2, 0).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn conv_box_filter() {
        let x = t(&[1.0, 2.0, 3.0], &[1, 1, 3]);
        let k = t(&[1.0, 1.0, 1.0], &[1, 1, 3]);
        let b = t(&[0.0], &[1]);
        let y = conv1d(&x, &k, &b, 1, 1).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv_channel_mismatch_names_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4]);
        let k = Tensor::<f32>::zeros(&[1, 3, 3]);
        let b = Tensor::<f32>::zeros(&[1]);
        let err = conv1d(&x, &k, &b, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("[1, 4, 2]") || msg.contains("[1, 2, 4]"),
            "{msg}"
        );
        assert!(msg.contains("[1, 3, 3]"), "{msg}");
    }

    #[test]
    fn conv_rejects_short_input() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1]);
        let k = Tensor::<f32>::zeros(&[1, 1, 3]);
        let b = Tensor::<f32>::zeros(&[1]);
        assert!(conv1d(&x, &k, &b, 0, 0).is_err());
    }

    #[test]
    fn glu_zero_gate_halves() {
        let x = t(&[1.0, -2.0, 4.0, 0.0, 0.0, 0.0], &[1, 2, 3]);
        let y = glu(&x, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3]);
        assert_eq!(y.to_vec(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn glu_saturated_gate_passes_content() {
        let x = t(&[1.5, -3.0, 40.0, 40.0], &[1, 4, 1]);
        let y = glu(&x, 1).unwrap();
        for (a, b) in y.to_vec().iter().zip([1.5, -3.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn glu_odd_channels_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 3, 2]);
        assert!(glu(&x, 1).is_err());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let y = softmax(&t(&[0.0; 4], &[4]), 0).unwrap();
        assert_eq!(y.to_vec(), vec![0.25; 4]);
        let y = softmax(&t(&[1000.0, 0.0], &[2]), 0).unwrap().to_vec();
        assert_abs_diff_eq!(y[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let x = [0.3f64, -1.2, 2.5, 0.0, 1.1];
        let total: f64 = x.iter().map(|v| v.exp()).sum();
        let y = softmax(&t(&x, &[5]), 0).unwrap().to_vec();
        for (yi, xi) in y.iter().zip(x) {
            assert_abs_diff_eq!(*yi, xi.exp() / total, epsilon = 1e-14);
        }
    }

    #[test]
    fn softmax_inner_axis() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 2, 3]);
        let y = softmax(&x, 1).unwrap().to_vec();
        for i in 0..3 {
            assert_abs_diff_eq!(y[i] + y[3 + i], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn embedding_identity_and_scatter() {
        let table = Tensor::<f64>::param(vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5], &[3, 2]).unwrap();
        let y = embedding(&table, &[1, 0, 1], &[1, 3]).unwrap();
        assert_eq!(y.shape(), &[1, 3, 2]);
        assert_eq!(y.to_vec(), vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        sum(&y).backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn embedding_out_of_range() {
        let table = Tensor::<f32>::zeros(&[3, 2]);
        match embedding(&table, &[0, 7], &[2]) {
            Err(Error::Index { index: 7, bound: 3 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dropout_identity_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = t(&[1.0, 2.0, 3.0], &[3]);
        assert_eq!(
            dropout(&x, 1.0, true, &mut rng).unwrap().to_vec(),
            x.to_vec()
        );
        assert_eq!(
            dropout(&x, 0.5, false, &mut rng).unwrap().to_vec(),
            x.to_vec()
        );
        assert!(dropout(&x, 0.0, true, &mut rng).is_err());
        assert!(dropout(&x, 1.5, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_keep_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f32>::new(vec![1.0; 100_000], &[100_000]).unwrap();
        let y = dropout(&x, 0.5, true, &mut rng).unwrap().to_vec();
        let kept = y.iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        assert!((kept - 0.5).abs() <= 0.01, "kept {kept}");
        assert!(y.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dropout_is_seed_deterministic() {
        let x = Tensor::<f32>::new(vec![1.0; 64], &[64]).unwrap();
        let a = dropout(&x, 0.5, true, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = dropout(&x, 0.5, true, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn cross_entropy_reference_values() {
        let uniform = t(&[0.0; 8], &[1, 8]);
        let l = cross_entropy(&uniform, &[3], 99).unwrap().item();
        assert_abs_diff_eq!(l, 8f64.ln(), epsilon = 1e-12);

        let mut row = vec![0.0; 8];
        row[2] = 40.0;
        let l = cross_entropy(&t(&row, &[1, 8]), &[2], 99).unwrap().item();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero() {
        let x = Tensor::<f64>::param(vec![0.3, 0.1, -0.2, 0.9], &[2, 2]).unwrap();
        let l = cross_entropy(&x, &[0, 0], 0).unwrap();
        assert_eq!(l.item(), 0.0);
        l.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn cross_entropy_ignores_positions() {
        let x = t(&[1.0, 2.0, 0.5, 0.5], &[2, 2]);
        let both = cross_entropy(&x, &[1, 0], 9).unwrap().item();
        let first = cross_entropy(&x, &[1, 9], 9).unwrap().item();
        let only = cross_entropy(&t(&[1.0, 2.0], &[1, 2]), &[1], 9)
            .unwrap()
            .item();
        assert_abs_diff_eq!(first, only, epsilon = 1e-15);
        assert!(both != first);
    }

    #[test]
    fn batched_matmul_transposed_agrees() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 2, 3]);
        let b = t(&[1.0, 0.0, -1.0, 2.0, 1.0, 0.0], &[1, 2, 3]);
        let bt = transpose_last2(&b).unwrap();
        let y1 = batched_matmul(&a, &b, true).unwrap().to_vec();
        let y2 = batched_matmul(&a, &bt, false).unwrap().to_vec();
        assert_eq!(y1, y2);
        assert_eq!(y1, vec![-2.0, 4.0, -2.0, 13.0]);
    }
}

//! Differentiable primitives.
//!
//! Rank-2 tensors are `[rows, cols]` row-major; biases and gains are rank 1.
//! Every op validates shapes and returns a descriptive [`FtmError::Shape`] on
//! mismatch.

use rand::Rng;

use super::graph::Var;
use super::kernels;
use super::tensor::{lit, Real, Tensor};
use crate::error::{FtmError, Result};

fn dims2<T: Real>(op: &'static str, v: &Var<T>) -> Result<(usize, usize)> {
    let s = v.shape();
    if s.len() != 2 {
        return Err(FtmError::shape(op, &s, &[0, 0]));
    }
    Ok((s[0], s[1]))
}

fn same_shape<T: Real>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(FtmError::shape(op, &sa, &sb));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Linear algebra

/// `a[m,k] · b[k,n]`.
pub fn matmul<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let (m, k) = dims2("matmul", a)?;
    let (k2, n) = dims2("matmul", b)?;
    if k != k2 {
        return Err(FtmError::shape("matmul", &a.shape(), &b.shape()));
    }
    let out = kernels::mm(a.value().data(), b.value().data(), m, k, n);
    Ok(Var::from_op(
        "matmul",
        Tensor::raw(vec![m, n], out),
        vec![a.clone(), b.clone()],
        move |g, p, _| {
            let (av, bv) = (p[0].value(), p[1].value());
            let ga = p[0]
                .requires_grad()
                .then(|| Tensor::raw(vec![m, k], kernels::mm_nt(g.data(), bv.data(), m, n, k)));
            let gb = p[1]
                .requires_grad()
                .then(|| Tensor::raw(vec![k, n], kernels::mm_tn(av.data(), g.data(), m, k, n)));
            vec![ga, gb]
        },
    ))
}

/// `a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let (m, k) = dims2("matmul_nt", a)?;
    let (n, k2) = dims2("matmul_nt", b)?;
    if k != k2 {
        return Err(FtmError::shape("matmul_nt", &a.shape(), &b.shape()));
    }
    let out = kernels::mm_nt(a.value().data(), b.value().data(), m, k, n);
    Ok(Var::from_op(
        "matmul_nt",
        Tensor::raw(vec![m, n], out),
        vec![a.clone(), b.clone()],
        move |g, p, _| {
            let (av, bv) = (p[0].value(), p[1].value());
            let ga = p[0]
                .requires_grad()
                .then(|| Tensor::raw(vec![m, k], kernels::mm(g.data(), bv.data(), m, n, k)));
            let gb = p[1]
                .requires_grad()
                .then(|| Tensor::raw(vec![n, k], kernels::mm_tn(g.data(), av.data(), m, n, k)));
            vec![ga, gb]
        },
    ))
}

/// `x[m,k] · w[k,n] + b[n]`.
pub fn linear<T: Real>(x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let (m, k) = dims2("linear", x)?;
    let (k2, n) = dims2("linear", w)?;
    if k != k2 || b.shape() != [n] {
        return Err(FtmError::shape("linear", &x.shape(), &w.shape()));
    }
    let mut out = kernels::mm(x.value().data(), w.value().data(), m, k, n);
    {
        let bv = b.value();
        for row in out.chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
    }
    Ok(Var::from_op(
        "linear",
        Tensor::raw(vec![m, n], out),
        vec![x.clone(), w.clone(), b.clone()],
        move |g, p, _| {
            let gx = p[0].requires_grad().then(|| {
                Tensor::raw(vec![m, k], kernels::mm_nt(g.data(), p[1].value().data(), m, n, k))
            });
            let gw = p[1].requires_grad().then(|| {
                Tensor::raw(vec![k, n], kernels::mm_tn(p[0].value().data(), g.data(), m, k, n))
            });
            let gb = p[2]
                .requires_grad()
                .then(|| Tensor::raw(vec![n], kernels::col_sum(g.data(), m, n)));
            vec![gx, gw, gb]
        },
    ))
}

pub fn transpose<T: Real>(a: &Var<T>) -> Result<Var<T>> {
    let (m, n) = dims2("transpose", a)?;
    let out = kernels::transpose(a.value().data(), m, n);
    Ok(Var::from_op(
        "transpose",
        Tensor::raw(vec![n, m], out),
        vec![a.clone()],
        move |g, _, _| vec![Some(Tensor::raw(vec![m, n], kernels::transpose(g.data(), n, m)))],
    ))
}

// ---------------------------------------------------------------------------
// Elementwise

pub fn add<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    same_shape("add", a, b)?;
    let out = a.value().zip_map(&b.value(), |x, y| x + y);
    Ok(Var::from_op("add", out, vec![a.clone(), b.clone()], |g, p, _| {
        vec![
            p[0].requires_grad().then(|| g.clone()),
            p[1].requires_grad().then(|| g.clone()),
        ]
    }))
}

pub fn sub<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    same_shape("sub", a, b)?;
    let out = a.value().zip_map(&b.value(), |x, y| x - y);
    Ok(Var::from_op("sub", out, vec![a.clone(), b.clone()], |g, p, _| {
        vec![
            p[0].requires_grad().then(|| g.clone()),
            p[1].requires_grad().then(|| g.map(|x| -x)),
        ]
    }))
}

pub fn mul<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    same_shape("mul", a, b)?;
    let out = a.value().zip_map(&b.value(), |x, y| x * y);
    Ok(Var::from_op("mul", out, vec![a.clone(), b.clone()], |g, p, _| {
        let (av, bv) = (p[0].value(), p[1].value());
        vec![
            p[0].requires_grad().then(|| g.zip_map(&bv, |gg, y| gg * y)),
            p[1].requires_grad().then(|| g.zip_map(&av, |gg, x| gg * x)),
        ]
    }))
}

pub fn scale<T: Real>(a: &Var<T>, s: T) -> Var<T> {
    let out = a.value().map(|x| x * s);
    Var::from_op("scale", out, vec![a.clone()], move |g, _, _| {
        vec![Some(g.map(|x| x * s))]
    })
}

/// `a[m,n] + b[n]` broadcast over rows.
pub fn add_row<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let (m, n) = dims2("add_row", a)?;
    if b.shape() != [n] {
        return Err(FtmError::shape("add_row", &a.shape(), &b.shape()));
    }
    let mut out = a.value().to_vec();
    {
        let bv = b.value();
        for row in out.chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
    }
    Ok(Var::from_op(
        "add_row",
        Tensor::raw(vec![m, n], out),
        vec![a.clone(), b.clone()],
        move |g, p, _| {
            vec![
                p[0].requires_grad().then(|| g.clone()),
                p[1]
                    .requires_grad()
                    .then(|| Tensor::raw(vec![n], kernels::col_sum(g.data(), m, n))),
            ]
        },
    ))
}

pub fn relu<T: Real>(a: &Var<T>) -> Var<T> {
    let out = a.value().map(|x| if x > T::zero() { x } else { T::zero() });
    Var::from_op("relu", out, vec![a.clone()], |g, _, y| {
        vec![Some(g.zip_map(y, |gg, yy| if yy > T::zero() { gg } else { T::zero() }))]
    })
}

pub fn sigmoid<T: Real>(a: &Var<T>) -> Var<T> {
    let out = a.value().map(kernels::sigmoid);
    Var::from_op("sigmoid", out, vec![a.clone()], |g, _, y| {
        vec![Some(g.zip_map(y, |gg, s| gg * s * (T::one() - s)))]
    })
}

pub fn tanh<T: Real>(a: &Var<T>) -> Var<T> {
    let out = a.value().map(T::tanh);
    Var::from_op("tanh", out, vec![a.clone()], |g, _, y| {
        vec![Some(g.zip_map(y, |gg, t| gg * (T::one() - t * t)))]
    })
}

/// Inverted dropout: surviving entries are scaled by `1/(1-rate)` at train
/// time; identity when `train` is false or `rate` is zero.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    a: &Var<T>,
    rate: f64,
    train: bool,
    rng: &mut R,
) -> Result<Var<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(FtmError::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !train || rate == 0.0 {
        return Ok(a.clone());
    }
    let keep = lit::<T>(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..a.value().len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let shape = a.shape();
    let out = {
        let av = a.value();
        Tensor::raw(shape.clone(), av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect())
    };
    Ok(Var::from_op("dropout", out, vec![a.clone()], move |g, _, _| {
        vec![Some(Tensor::raw(
            shape.clone(),
            g.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
        ))]
    }))
}

// ---------------------------------------------------------------------------
// Structural

pub fn concat_rows<T: Real>(parts: &[Var<T>]) -> Result<Var<T>> {
    let first = parts.first().ok_or_else(|| FtmError::Empty("concat_rows of nothing".into()))?;
    let (_, c) = dims2("concat_rows", first)?;
    let mut sizes = Vec::with_capacity(parts.len());
    let mut data = Vec::new();
    for p in parts {
        let (r, c2) = dims2("concat_rows", p)?;
        if c2 != c {
            return Err(FtmError::shape("concat_rows", &first.shape(), &p.shape()));
        }
        sizes.push(r);
        data.extend_from_slice(p.value().data());
    }
    let total: usize = sizes.iter().sum();
    Ok(Var::from_op(
        "concat_rows",
        Tensor::raw(vec![total, c], data),
        parts.to_vec(),
        move |g, p, _| {
            let mut off = 0;
            sizes
                .iter()
                .zip(p)
                .map(|(&r, v)| {
                    let out = v.requires_grad().then(|| g.slice_rows(off, off + r));
                    off += r;
                    out
                })
                .collect()
        },
    ))
}

pub fn concat_cols<T: Real>(parts: &[Var<T>]) -> Result<Var<T>> {
    let first = parts.first().ok_or_else(|| FtmError::Empty("concat_cols of nothing".into()))?;
    let (r, _) = dims2("concat_cols", first)?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r2, c) = dims2("concat_cols", p)?;
        if r2 != r {
            return Err(FtmError::shape("concat_cols", &first.shape(), &p.shape()));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut data = vec![T::zero(); r * total];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let v = p.value();
        for i in 0..r {
            data[i * total + off..i * total + off + w].copy_from_slice(v.row(i));
        }
        off += w;
    }
    Ok(Var::from_op(
        "concat_cols",
        Tensor::raw(vec![r, total], data),
        parts.to_vec(),
        move |g, p, _| {
            let mut off = 0;
            widths
                .iter()
                .zip(p)
                .map(|(&w, v)| {
                    let out = v.requires_grad().then(|| {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&g.data()[i * total + off..i * total + off + w]);
                        }
                        Tensor::raw(vec![r, w], d)
                    });
                    off += w;
                    out
                })
                .collect()
        },
    ))
}

pub fn slice_rows<T: Real>(a: &Var<T>, start: usize, end: usize) -> Result<Var<T>> {
    let (m, n) = dims2("slice_rows", a)?;
    if start >= end || end > m {
        return Err(FtmError::shape("slice_rows", &a.shape(), &[start, end]));
    }
    let out = a.value().slice_rows(start, end);
    Ok(Var::from_op("slice_rows", out, vec![a.clone()], move |g, _, _| {
        let mut d = vec![T::zero(); m * n];
        d[start * n..end * n].copy_from_slice(g.data());
        vec![Some(Tensor::raw(vec![m, n], d))]
    }))
}

pub fn slice_cols<T: Real>(a: &Var<T>, start: usize, end: usize) -> Result<Var<T>> {
    let (m, n) = dims2("slice_cols", a)?;
    if start >= end || end > n {
        return Err(FtmError::shape("slice_cols", &a.shape(), &[start, end]));
    }
    let w = end - start;
    let mut d = Vec::with_capacity(m * w);
    {
        let v = a.value();
        for i in 0..m {
            d.extend_from_slice(&v.row(i)[start..end]);
        }
    }
    Ok(Var::from_op(
        "slice_cols",
        Tensor::raw(vec![m, w], d),
        vec![a.clone()],
        move |g, _, _| {
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                out[i * n + start..i * n + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
            }
            vec![Some(Tensor::raw(vec![m, n], out))]
        },
    ))
}

/// Output row `r` is input row `index[r]`; rows may repeat (replication
/// padding) and gradients scatter-add back.
pub fn gather_rows<T: Real>(a: &Var<T>, index: &[usize]) -> Result<Var<T>> {
    let (m, n) = dims2("gather_rows", a)?;
    if index.is_empty() {
        return Err(FtmError::Empty("gather_rows with empty index".into()));
    }
    if let Some(&bad) = index.iter().find(|&&i| i >= m) {
        return Err(FtmError::shape("gather_rows", &a.shape(), &[bad]));
    }
    let mut d = Vec::with_capacity(index.len() * n);
    {
        let v = a.value();
        for &i in index {
            d.extend_from_slice(v.row(i));
        }
    }
    let index = index.to_vec();
    Ok(Var::from_op(
        "gather_rows",
        Tensor::raw(vec![index.len(), n], d),
        vec![a.clone()],
        move |g, _, _| {
            let mut out = vec![T::zero(); m * n];
            for (r, &i) in index.iter().enumerate() {
                for (o, &gg) in out[i * n..(i + 1) * n].iter_mut().zip(g.row(r)) {
                    *o += gg;
                }
            }
            vec![Some(Tensor::raw(vec![m, n], out))]
        },
    ))
}

/// Replication padding along rows.
pub fn pad_rows<T: Real>(a: &Var<T>, before: usize, after: usize) -> Result<Var<T>> {
    let (m, _) = dims2("pad_rows", a)?;
    if before == 0 && after == 0 {
        return Ok(a.clone());
    }
    let index: Vec<usize> = std::iter::repeat_n(0, before)
        .chain(0..m)
        .chain(std::iter::repeat_n(m - 1, after))
        .collect();
    gather_rows(a, &index)
}

// ---------------------------------------------------------------------------
// Reductions

pub fn sum_all<T: Real>(a: &Var<T>) -> Var<T> {
    let shape = a.shape();
    let out = Tensor::scalar(a.value().sum());
    Var::from_op("sum_all", out, vec![a.clone()], move |g, _, _| {
        vec![Some(Tensor::full(&shape, g.item()))]
    })
}

pub fn mean_all<T: Real>(a: &Var<T>) -> Var<T> {
    let n = lit::<T>(a.value().len() as f64);
    scale(&sum_all(a), T::one() / n)
}

/// Mean over `axis` of a rank-2 tensor: axis 0 gives `[cols]`, axis 1 gives
/// `[rows]`.
pub fn mean<T: Real>(a: &Var<T>, axis: usize) -> Result<Var<T>> {
    let (m, n) = dims2("mean", a)?;
    match axis {
        0 => {
            let inv = lit::<T>(1.0 / m as f64);
            let mut s = kernels::col_sum(a.value().data(), m, n);
            s.iter_mut().for_each(|x| *x *= inv);
            Ok(Var::from_op("mean", Tensor::raw(vec![n], s), vec![a.clone()], move |g, _, _| {
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend(g.data().iter().map(|&x| x * inv));
                }
                vec![Some(Tensor::raw(vec![m, n], d))]
            }))
        }
        1 => {
            let inv = lit::<T>(1.0 / n as f64);
            let s: Vec<T> = a.value().data().chunks(n).map(|r| r.iter().copied().sum::<T>() * inv).collect();
            Ok(Var::from_op("mean", Tensor::raw(vec![m], s), vec![a.clone()], move |g, _, _| {
                let mut d = Vec::with_capacity(m * n);
                for &x in g.data() {
                    d.extend(std::iter::repeat_n(x * inv, n));
                }
                vec![Some(Tensor::raw(vec![m, n], d))]
            }))
        }
        _ => Err(FtmError::shape("mean", &a.shape(), &[axis])),
    }
}

// ---------------------------------------------------------------------------
// Normalization and distributions

pub fn softmax<T: Real>(a: &Var<T>) -> Result<Var<T>> {
    masked_softmax(a, None)
}

/// Row-wise softmax where entries with `mask[i*n+j] == false` get probability
/// zero. Every row must keep at least one entry.
pub fn masked_softmax<T: Real>(a: &Var<T>, mask: Option<&[bool]>) -> Result<Var<T>> {
    let (m, n) = dims2("masked_softmax", a)?;
    if let Some(mk) = mask {
        if mk.len() != m * n {
            return Err(FtmError::shape("masked_softmax", &a.shape(), &[mk.len()]));
        }
        if mk.chunks(n).any(|r| !r.iter().any(|&b| b)) {
            return Err(FtmError::Data("masked_softmax row with every entry masked".into()));
        }
    }
    let out = kernels::softmax_rows(a.value().data(), m, n, mask);
    Ok(Var::from_op(
        "softmax",
        Tensor::raw(vec![m, n], out),
        vec![a.clone()],
        move |g, _, y| {
            let mut d = vec![T::zero(); m * n];
            for i in 0..m {
                let (yr, gr) = (y.row(i), g.row(i));
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    d[i * n + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(Tensor::raw(vec![m, n], d))]
        },
    ))
}

pub fn log_softmax<T: Real>(a: &Var<T>) -> Result<Var<T>> {
    let (m, n) = dims2("log_softmax", a)?;
    let out = kernels::log_softmax_rows(a.value().data(), m, n);
    Ok(Var::from_op(
        "log_softmax",
        Tensor::raw(vec![m, n], out),
        vec![a.clone()],
        move |g, _, y| {
            let mut d = vec![T::zero(); m * n];
            for i in 0..m {
                let (yr, gr) = (y.row(i), g.row(i));
                let gs: T = gr.iter().copied().sum();
                for j in 0..n {
                    d[i * n + j] = gr[j] - yr[j].exp() * gs;
                }
            }
            vec![Some(Tensor::raw(vec![m, n], d))]
        },
    ))
}

/// Layer normalization over the last axis with learned gain and shift.
pub fn layer_norm<T: Real>(x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
    let (m, n) = dims2("layer_norm", x)?;
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(FtmError::shape("layer_norm", &x.shape(), &gamma.shape()));
    }
    let eps = lit::<T>(eps);
    let nn = lit::<T>(n as f64);
    let mut xhat = vec![T::zero(); m * n];
    let mut inv_std = vec![T::zero(); m];
    let mut out = vec![T::zero(); m * n];
    {
        let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
        for i in 0..m {
            let r = xv.row(i);
            let mu = r.iter().copied().sum::<T>() / nn;
            let var = r.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (r[j] - mu) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
    }
    Ok(Var::from_op(
        "layer_norm",
        Tensor::raw(vec![m, n], out),
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g, p, _| {
            let gv = p[1].value();
            let mut gx = vec![T::zero(); m * n];
            let mut gg = vec![T::zero(); n];
            let mut gb = vec![T::zero(); n];
            for i in 0..m {
                let gr = g.row(i);
                let hr = &xhat[i * n..(i + 1) * n];
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for j in 0..n {
                    let dh = gr[j] * gv.data()[j];
                    s1 += dh;
                    s2 += dh * hr[j];
                    gg[j] += gr[j] * hr[j];
                    gb[j] += gr[j];
                }
                for j in 0..n {
                    let dh = gr[j] * gv.data()[j];
                    gx[i * n + j] = inv_std[i] * (dh - s1 / nn - hr[j] * s2 / nn);
                }
            }
            vec![
                p[0].requires_grad().then(|| Tensor::raw(vec![m, n], gx)),
                p[1].requires_grad().then(|| Tensor::raw(vec![n], gg)),
                p[2].requires_grad().then(|| Tensor::raw(vec![n], gb)),
            ]
        },
    ))
}

/// Weight normalization: row `o` of the result is `g[o] · v[o] / ‖v[o]‖`.
pub fn weight_norm<T: Real>(v: &Var<T>, g: &Var<T>) -> Result<Var<T>> {
    let (o, r) = dims2("weight_norm", v)?;
    if g.shape() != [o] {
        return Err(FtmError::shape("weight_norm", &v.shape(), &g.shape()));
    }
    let mut norms = vec![T::zero(); o];
    let mut out = vec![T::zero(); o * r];
    {
        let (vv, gv) = (v.value(), g.value());
        for i in 0..o {
            let row = vv.row(i);
            let nrm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            norms[i] = nrm;
            for j in 0..r {
                out[i * r + j] = gv.data()[i] * row[j] / nrm;
            }
        }
    }
    Ok(Var::from_op(
        "weight_norm",
        Tensor::raw(vec![o, r], out),
        vec![v.clone(), g.clone()],
        move |gr, p, _| {
            let (vv, gv) = (p[0].value(), p[1].value());
            let mut gvv = vec![T::zero(); o * r];
            let mut ggg = vec![T::zero(); o];
            for i in 0..o {
                let row = vv.row(i);
                let grow = gr.row(i);
                let nrm = norms[i];
                let dot: T = row.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                ggg[i] = dot / nrm;
                let coef = gv.data()[i] / nrm;
                for j in 0..r {
                    gvv[i * r + j] = coef * (grow[j] - row[j] * dot / (nrm * nrm));
                }
            }
            vec![
                p[0].requires_grad().then(|| Tensor::raw(vec![o, r], gvv)),
                p[1].requires_grad().then(|| Tensor::raw(vec![o], ggg)),
            ]
        },
    ))
}

// ---------------------------------------------------------------------------
// Convolution

/// Strided 1-D convolution over rows.
///
/// `x` is `[T, c_in]`, `w` is `[c_out, k·c_in]` with the kernel laid out tap
/// by tap (`w[o, j·c_in + c]` multiplies `x[t + j, c]`), `b` is `[c_out]`.
/// `left_pad` copies of the first frame are prepended. Output row `i` reads
/// padded rows `i·stride .. i·stride + k`, so it never depends on later input.
pub fn conv1d_strided<T: Real>(
    x: &Var<T>,
    w: &Var<T>,
    b: &Var<T>,
    k: usize,
    stride: usize,
    left_pad: usize,
) -> Result<Var<T>> {
    let (t, c_in) = dims2("conv1d_strided", x)?;
    let (c_out, kc) = dims2("conv1d_strided", w)?;
    if k == 0 || stride == 0 || kc != k * c_in || b.shape() != [c_out] {
        return Err(FtmError::shape("conv1d_strided", &x.shape(), &w.shape()));
    }
    let padded = t + left_pad;
    if padded < k {
        return Err(FtmError::shape("conv1d_strided", &x.shape(), &[k]));
    }
    let len = (padded - k) / stride + 1;
    // Row i of the unfolded matrix is the contiguous window of k padded rows.
    let src_row = move |p: usize| p.saturating_sub(left_pad);
    let mut unfolded = Vec::with_capacity(len * kc);
    {
        let xv = x.value();
        for i in 0..len {
            for j in 0..k {
                unfolded.extend_from_slice(xv.row(src_row(i * stride + j)));
            }
        }
    }
    let mut out = kernels::mm_nt(&unfolded, w.value().data(), len, kc, c_out);
    {
        let bv = b.value();
        for row in out.chunks_mut(c_out) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
    }
    Ok(Var::from_op(
        "conv1d_strided",
        Tensor::raw(vec![len, c_out], out),
        vec![x.clone(), w.clone(), b.clone()],
        move |g, p, _| {
            let gx = p[0].requires_grad().then(|| {
                let gu = kernels::mm(g.data(), p[1].value().data(), len, c_out, kc);
                let mut d = vec![T::zero(); t * c_in];
                for i in 0..len {
                    for j in 0..k {
                        let r = src_row(i * stride + j);
                        let src = &gu[i * kc + j * c_in..i * kc + (j + 1) * c_in];
                        for (o, &v) in d[r * c_in..(r + 1) * c_in].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                Tensor::raw(vec![t, c_in], d)
            });
            let gw = p[1]
                .requires_grad()
                .then(|| Tensor::raw(vec![c_out, kc], kernels::mm_tn(g.data(), &unfolded, len, c_out, kc)));
            let gb = p[2]
                .requires_grad()
                .then(|| Tensor::raw(vec![c_out], kernels::col_sum(g.data(), len, c_out)));
            vec![gx, gw, gb]
        },
    ))
}

/// Unidirectional LSTM over rows from a zero initial state.
///
/// `xw` is `[T, 4h]`: input projections plus bias, gates ordered (input,
/// forget, cell, output). `w_hh` is `[h, 4h]`. Returns the hidden states
/// `[T, h]`.
pub fn lstm<T: Real>(xw: &Var<T>, w_hh: &Var<T>) -> Result<Var<T>> {
    let (t, h4) = dims2("lstm", xw)?;
    let (h, h4w) = dims2("lstm", w_hh)?;
    if h4 != 4 * h || h4w != h4 {
        return Err(FtmError::shape("lstm", &xw.shape(), &w_hh.shape()));
    }
    let mut gates = vec![T::zero(); t * h4];
    let mut cells = vec![T::zero(); t * h];
    let mut hidden = vec![T::zero(); t * h];
    {
        let (xv, wv) = (xw.value(), w_hh.value());
        let (mut hs, mut cs) = (vec![T::zero(); h], vec![T::zero(); h]);
        for step in 0..t {
            let mut a = kernels::mm(&hs, wv.data(), 1, h, h4);
            for (o, &x) in a.iter_mut().zip(xv.row(step)) {
                *o += x;
            }
            kernels::lstm_cell(&mut a, &mut cs, &mut hs);
            gates[step * h4..(step + 1) * h4].copy_from_slice(&a);
            cells[step * h..(step + 1) * h].copy_from_slice(&cs);
            hidden[step * h..(step + 1) * h].copy_from_slice(&hs);
        }
    }
    let gates = Tensor::raw(vec![t, h4], gates);
    let cells = Tensor::raw(vec![t, h], cells);
    Ok(Var::from_op(
        "lstm",
        Tensor::raw(vec![t, h], hidden),
        vec![xw.clone(), w_hh.clone()],
        move |g, p, y| {
            let wv = p[1].value();
            let (ga, cv, hv) = (gates.data(), cells.data(), y.data());
            let mut dxw = vec![T::zero(); t * h4];
            let mut dw = vec![T::zero(); h * h4];
            let (mut dh_next, mut dc_next) = (vec![T::zero(); h], vec![T::zero(); h]);
            for step in (0..t).rev() {
                let a = &ga[step * h4..(step + 1) * h4];
                let da = &mut dxw[step * h4..(step + 1) * h4];
                for j in 0..h {
                    let (i, f, gg, o) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
                    let c = cv[step * h + j];
                    let c_prev = if step > 0 { cv[(step - 1) * h + j] } else { T::zero() };
                    let tc = c.tanh();
                    let dh = g.data()[step * h + j] + dh_next[j];
                    let dc = dh * o * (T::one() - tc * tc) + dc_next[j];
                    da[j] = dc * gg * i * (T::one() - i);
                    da[h + j] = dc * c_prev * f * (T::one() - f);
                    da[2 * h + j] = dc * i * (T::one() - gg * gg);
                    da[3 * h + j] = dh * tc * o * (T::one() - o);
                    dc_next[j] = dc * f;
                }
                if step > 0 {
                    let h_prev = &hv[(step - 1) * h..step * h];
                    for (r, &hp) in h_prev.iter().enumerate() {
                        for (o, &d) in dw[r * h4..(r + 1) * h4].iter_mut().zip(da.iter()) {
                            *o += hp * d;
                        }
                    }
                }
                dh_next = kernels::mm_nt(da, wv.data(), 1, h4, h);
            }
            vec![Some(Tensor::raw(vec![t, h4], dxw)), Some(Tensor::raw(vec![h, h4], dw))]
        },
    ))
}

// ---------------------------------------------------------------------------
// Attention

/// Relative-position bias for one head.
///
/// `table` is `[heads, 2·max_dist + 1]`; entry `(q, k)` of the result reads
/// `table[head, clamp(q_pos[q] − k_pos[k], −max_dist, max_dist) + max_dist]`.
pub fn relative_bias<T: Real>(
    table: &Var<T>,
    head: usize,
    q_pos: &[i64],
    k_pos: &[i64],
    max_dist: usize,
) -> Result<Var<T>> {
    let (h, l) = dims2("relative_bias", table)?;
    if head >= h || l != 2 * max_dist + 1 {
        return Err(FtmError::shape("relative_bias", &table.shape(), &[head, 2 * max_dist + 1]));
    }
    let md = max_dist as i64;
    let (tq, tk) = (q_pos.len(), k_pos.len());
    let idx: Vec<usize> = q_pos
        .iter()
        .flat_map(|&q| k_pos.iter().map(move |&k| ((q - k).clamp(-md, md) + md) as usize))
        .collect();
    let out = {
        let tv = table.value();
        let row = tv.row(head);
        idx.iter().map(|&i| row[i]).collect()
    };
    Ok(Var::from_op(
        "relative_bias",
        Tensor::raw(vec![tq, tk], out),
        vec![table.clone()],
        move |g, _, _| {
            let mut d = vec![T::zero(); h * l];
            for (&i, &gg) in idx.iter().zip(g.data()) {
                d[head * l + i] += gg;
            }
            vec![Some(Tensor::raw(vec![h, l], d))]
        },
    ))
}

/// Attention probabilities `softmax(q·kᵀ·scale + bias)` with disallowed
/// entries (mask false) given zero probability.
pub fn masked_attention_scores<T: Real>(
    q: &Var<T>,
    k: &Var<T>,
    bias: Option<&Var<T>>,
    mask: Option<&[bool]>,
    scale_by: T,
) -> Result<Var<T>> {
    let logits = scale(&matmul_nt(q, k)?, scale_by);
    let logits = match bias {
        Some(b) => add(&logits, b)?,
        None => logits,
    };
    masked_softmax(&logits, mask)
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over rows of `−w_r · log softmax(logits)[r, label_r]`, normalised by
/// the number of rows.
pub fn cross_entropy<T: Real>(logits: &Var<T>, labels: &[usize], weights: Option<&[T]>) -> Result<Var<T>> {
    let (m, n) = dims2("cross_entropy", logits)?;
    if labels.len() != m {
        return Err(FtmError::shape("cross_entropy", &logits.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(FtmError::Data(format!("cross_entropy label {bad} out of range 0..{n}")));
    }
    if let Some(w) = weights {
        if w.len() != m {
            return Err(FtmError::shape("cross_entropy", &logits.shape(), &[w.len()]));
        }
    }
    let w: Vec<T> = weights.map_or_else(|| vec![T::one(); m], <[T]>::to_vec);
    let logp = kernels::log_softmax_rows(logits.value().data(), m, n);
    let inv_m = lit::<T>(1.0 / m as f64);
    let loss = (0..m).map(|i| -logp[i * n + labels[i]] * w[i]).sum::<T>() * inv_m;
    let labels = labels.to_vec();
    Ok(Var::from_op(
        "cross_entropy",
        Tensor::scalar(loss),
        vec![logits.clone()],
        move |g, _, _| {
            let gs = g.item() * inv_m;
            let mut d = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    let p = logp[i * n + j].exp();
                    let y = if j == labels[i] { T::one() } else { T::zero() };
                    d[i * n + j] = gs * w[i] * (p - y);
                }
            }
            vec![Some(Tensor::raw(vec![m, n], d))]
        },
    ))
}

// Plain-slice numeric kernels. Scratch buffers here are not ledger-tracked.

use super::tensor::Real;

/// `a[m,k] · b[k,n]`.
pub(crate) fn mm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m,k] · b[n,k]ᵀ`.
pub(crate) fn mm_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    if m == 1 {
        return b
            .chunks(k)
            .map(|brow| brow.iter().zip(a).map(|(&x, &y)| x * y).sum())
            .collect();
    }
    let bt = transpose(b, n, k);
    mm(a, &bt, m, k, n)
}

/// `a[m,k]ᵀ · b[m,n]`.
pub(crate) fn mm_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) fn col_sum<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for row in a.chunks(n).take(m) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_rows<T: Real>(a: &[T], m: usize, n: usize, mask: Option<&[bool]>) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &a[i * n..(i + 1) * n];
        let allowed = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
        let mut mx = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) && v > mx {
                mx = v;
            }
        }
        let mut s = T::zero();
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) {
                let e = (v - mx).exp();
                out[i * n + j] = e;
                s += e;
            }
        }
        for o in &mut out[i * n..(i + 1) * n] {
            *o /= s;
        }
    }
    out
}

pub(crate) fn log_softmax_rows<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &a[i * n..(i + 1) * n];
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

/// `log(exp(a) + exp(b))` without overflow; `-inf` is the additive identity.
#[inline]
pub(crate) fn log_add<T: Real>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// One LSTM step. `a` holds the `4h` gate pre-activations ordered
/// (input, forget, cell, output) and is overwritten with the activated gates;
/// `c` and `h` advance in place.
pub(crate) fn lstm_cell<T: Real>(a: &mut [T], c: &mut [T], h: &mut [T]) {
    let n = c.len();
    for j in 0..n {
        let i = sigmoid(a[j]);
        let f = sigmoid(a[n + j]);
        let g = a[2 * n + j].tanh();
        let o = sigmoid(a[3 * n + j]);
        a[j] = i;
        a[n + j] = f;
        a[2 * n + j] = g;
        a[3 * n + j] = o;
        c[j] = f * c[j] + i * g;
        h[j] = o * c[j].tanh();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64).sin()).collect(); // 3x4
        let c = mm(&a, &b, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        assert_eq!(mm_nt(&a, &bt, 2, 3, 4), c);
        let at = transpose(&a, 2, 3);
        let c2 = mm_tn(&at, &b, 3, 2, 4);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
        // single-row fast path
        let r = mm_nt(&a[..3], &bt, 1, 3, 4);
        for (x, y) in r.iter().zip(&c[..4]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn log_add_identity() {
        assert_eq!(log_add(f64::NEG_INFINITY, 0.5), 0.5);
        assert!((log_add(0.0f64, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}

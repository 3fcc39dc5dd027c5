//! Dense matrix kernels. f32 storage, f64 accumulation, sequential order.

/// c[m,n] = a[m,k] . b[k,n]
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut acc = vec![0.0f64; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut acc[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let av = av as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv as f64;
            }
        }
    }
    acc.iter().map(|&v| v as f32).collect()
}

/// c[m,k] = a[m,n] . b[k,n]^T   (row-by-row dot products)
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0f64;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av as f64 * bv as f64;
            }
            out[i * k + p] = s as f32;
        }
    }
    out
}

/// c[k,n] = a[m,k]^T . b[m,n]
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p] as f64;
            let crow = &mut acc[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv as f64;
            }
        }
    }
    acc.iter().map(|&v| v as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
                c[i * n + j] = s as f32;
            }
        }
        c
    }

    fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn transposed_variants_agree_with_naive() {
        let mut rng = crate::rng::SeededRng::new(5);
        let (m, k, n) = (4, 3, 5);
        let a: Vec<f32> = (0..m * k).map(|_| rng.normal_f32(0.0, 1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.normal_f32(0.0, 1.0)).collect();
        let expected = naive(&a, &b, m, k, n);

        assert_eq!(matmul(&a, &b, m, k, n), expected);
        // a . (b^T)^T routed through the nt kernel
        assert_eq!(matmul_nt(&a, &transpose(&b, k, n), m, k, n), expected);
        // (a^T)^T . b routed through the tn kernel
        assert_eq!(matmul_tn(&transpose(&a, m, k), &b, k, m, n), expected);
    }
}

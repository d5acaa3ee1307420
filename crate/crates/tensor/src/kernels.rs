//! Dense kernels shared by the forward and backward passes.
//!
//! Every kernel accumulates in a fixed order, so results are bit-identical
//! from run to run on one machine.

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                c_row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        while p < k {
            let ap = a_row[p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += ap * bj;
            }
            p += 1;
        }
    }
}

/// `c += aᵀ · b` with `a: m×k`, `b: m×n`, `c: k×n`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let at = transpose2(m, k, a);
    gemm_nn(k, m, n, &at, b, c);
}

/// `c += a · bᵀ` with `a: m×n`, `b: k×n`, `c: m×k`.
pub fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    let bt = transpose2(k, n, b);
    gemm_nn(m, n, k, a, &bt, c);
}

pub fn transpose2(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How an operand's elements map onto a broadcast output.
#[derive(Debug, Clone)]
pub enum Bcast {
    Same,
    /// Operand is a trailing block repeated `out.len() / n` times.
    Repeat(usize),
    Map(Vec<usize>),
}

impl Bcast {
    pub fn plan(in_shape: &[usize], out_shape: &[usize]) -> Self {
        let n_in: usize = in_shape.iter().product();
        let n_out: usize = out_shape.iter().product();
        if n_in == n_out {
            return Bcast::Same;
        }
        let stripped: &[usize] = {
            let lead = in_shape.iter().take_while(|&&d| d == 1).count();
            &in_shape[lead..]
        };
        if stripped.len() <= out_shape.len()
            && out_shape[out_shape.len() - stripped.len()..] == *stripped
        {
            return Bcast::Repeat(n_in);
        }
        let rank = out_shape.len();
        let offset = rank - in_shape.len();
        let in_strides = strides(in_shape);
        let mut eff = vec![0usize; rank];
        for i in 0..in_shape.len() {
            if in_shape[i] != 1 {
                eff[offset + i] = in_strides[i];
            }
        }
        let mut map = Vec::with_capacity(n_out);
        let mut idx = vec![0usize; rank];
        let mut pos = 0usize;
        for _ in 0..n_out {
            map.push(pos);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                pos += eff[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                pos -= eff[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Bcast::Map(map)
    }

    #[inline]
    pub fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Repeat(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }

    /// Sums an output-shaped gradient back onto an operand of `n_in` elements.
    pub fn reduce(&self, grad: &[f64], n_in: usize) -> Vec<f64> {
        match self {
            Bcast::Same => grad.to_vec(),
            Bcast::Repeat(n) => {
                let mut out = vec![0.0; *n];
                for chunk in grad.chunks(*n) {
                    for (o, g) in out.iter_mut().zip(chunk) {
                        *o += g;
                    }
                }
                out
            }
            Bcast::Map(m) => {
                let mut out = vec![0.0; n_in];
                for (g, &j) in grad.iter().zip(m) {
                    out[j] += g;
                }
                out
            }
        }
    }
}

/// Index map for a general axis permutation: `out[i] = in[map[i]]`.
pub fn permute_map(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n: usize = in_shape.iter().product();
    let rank = axes.len();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..n {
        map.push(pos);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            pos += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            pos -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::strategy::Strategy;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = transpose2(m, k, &a);
        let mut c2 = vec![0.0; m * n];
        gemm_tn(k, m, n, &at, &b, &mut c2);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        let bt = transpose2(k, n, &b);
        let mut c3 = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut c3);
        for (x, y) in c3.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_plans() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 1], &[1, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
        let p = Bcast::plan(&[2, 1], &[2, 3]);
        let idx: Vec<usize> = (0..6).map(|i| p.index(i)).collect();
        assert_eq!(idx, vec![0, 0, 0, 1, 1, 1]);
        assert!(matches!(Bcast::plan(&[1, 3], &[2, 3]), Bcast::Repeat(3)));
    }

    #[test]
    fn permute_map_transposes() {
        let map = permute_map(&[2, 3], &[1, 0]);
        assert_eq!(map, vec![0, 3, 1, 4, 2, 5]);
    }

    proptest::proptest! {
        #[test]
        fn gemm_nn_matches_naive_for_any_shape(
            (m, k, n, a, b) in (1usize..7, 1usize..11, 1usize..7).prop_flat_map(|(m, k, n)| (
                proptest::strategy::Just(m),
                proptest::strategy::Just(k),
                proptest::strategy::Just(n),
                proptest::collection::vec(-2.0f64..2.0, m * k),
                proptest::collection::vec(-2.0f64..2.0, k * n),
            ))
        ) {
            let mut c = vec![0.0; m * n];
            gemm_nn(m, k, n, &a, &b, &mut c);
            for (x, y) in c.iter().zip(naive(m, k, n, &a, &b)) {
                proptest::prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn transpose_is_an_involution(rows in 1usize..9, cols in 1usize..9, seed in 0u64..1000) {
            let a: Vec<f64> = (0..rows * cols).map(|i| ((i as u64 * 31 + seed) % 97) as f64).collect();
            proptest::prop_assert_eq!(transpose2(cols, rows, &transpose2(rows, cols, &a)), a);
        }

        #[test]
        fn broadcast_is_symmetric(a in proptest::collection::vec(1usize..4, 0..4), b in proptest::collection::vec(1usize..4, 0..4)) {
            proptest::prop_assert_eq!(broadcast_shape(&a, &b), broadcast_shape(&b, &a));
        }
    }
}

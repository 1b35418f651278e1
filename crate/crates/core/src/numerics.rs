//! Dense-vector math shared by the cache, the scorers and the attention
//! engine.
//!
//! Storage is `f32`; every reduction (dot products, norms, softmax sums,
//! online-softmax statistics) runs in `f64`.

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// A vector with unit Euclidean norm, or the all-zero sentinel produced by
/// [`normalize`] on degenerate input.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVec(Vec<f32>);

impl UnitVec {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True for the zero sentinel.
    pub fn is_zero(&self) -> bool {
        is_zero(&self.0)
    }
}

impl AsRef<[f32]> for UnitVec {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

#[inline]
pub fn is_zero(v: &[f32]) -> bool {
    v.iter().all(|&x| x == 0.0)
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[inline]
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

pub fn ensure_finite(v: &[f32]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// Scales `v` to unit length. Vectors with norm below [`NORM_EPS`] map to
/// the zero sentinel.
pub fn normalize(v: &[f32]) -> Result<UnitVec> {
    ensure_finite(v)?;
    let n = norm(v);
    if n < NORM_EPS {
        return Ok(UnitVec(vec![0.0; v.len()]));
    }
    Ok(UnitVec(v.iter().map(|&x| (x as f64 / n) as f32).collect()))
}

/// Cosine similarity clamped to `[-1, 1]`; zero if either side is
/// (numerically) the zero vector.
pub fn cos_sim(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_EPS || nb < NORM_EPS {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Same as [`cos_sim`] with a 64-bit left operand, used for mean keys.
pub fn cos_sim_f64(a: &[f64], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = norm(b);
    if na < NORM_EPS || nb < NORM_EPS {
        return Ok(0.0);
    }
    let d: f64 = a.iter().zip(b).map(|(&x, &y)| x * y as f64).sum();
    Ok((d / (na * nb)).clamp(-1.0, 1.0))
}

/// Temperature softmax, stabilised by subtracting the maximum.
pub fn softmax(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::BadTemperature(temperature));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite);
    }
    let max = scores.iter().map(|s| s / temperature).fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s / temperature - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} elements for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn frobenius(&self) -> f64 {
        norm(&self.data)
    }
}

/// Random-access view over a key/value context.
pub trait KvRows {
    fn len(&self) -> usize;
    fn key(&self, j: usize) -> &[f32];
    fn value(&self, j: usize) -> &[f32];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A key matrix paired with a value matrix of the same row count.
#[derive(Debug, Clone, Copy)]
pub struct KvPair<'a> {
    pub keys: &'a Matrix,
    pub values: &'a Matrix,
}

impl<'a> KvPair<'a> {
    pub fn new(keys: &'a Matrix, values: &'a Matrix) -> Result<Self> {
        if keys.rows() != values.rows() {
            return Err(Error::Shape(format!(
                "{} keys but {} values",
                keys.rows(),
                values.rows()
            )));
        }
        Ok(Self { keys, values })
    }
}

impl KvRows for KvPair<'_> {
    fn len(&self) -> usize {
        self.keys.rows()
    }
    fn key(&self, j: usize) -> &[f32] {
        self.keys.row(j)
    }
    fn value(&self, j: usize) -> &[f32] {
        self.values.row(j)
    }
}

fn check_shapes<K: KvRows + ?Sized>(queries: &Matrix, kv: &K) -> Result<usize> {
    if kv.is_empty() {
        return Err(Error::EmptyContext);
    }
    let d_k = queries.cols();
    if kv.key(0).len() != d_k {
        return Err(Error::Shape(format!(
            "query width {d_k} vs key width {}",
            kv.key(0).len()
        )));
    }
    ensure_finite(queries.as_slice())?;
    Ok(kv.value(0).len())
}

/// Reference attention: materializes the full `Q x N` weight matrix.
pub fn attend_naive<K: KvRows + ?Sized>(queries: &Matrix, kv: &K, scale: f32) -> Result<Matrix> {
    let d_v = check_shapes(queries, kv)?;
    let n = kv.len();
    let q_rows = queries.rows();
    let scale = scale as f64;

    let mut weights = vec![0.0f64; q_rows * n];
    for i in 0..q_rows {
        let q = queries.row(i);
        let row = &mut weights[i * n..(i + 1) * n];
        for (j, w) in row.iter_mut().enumerate() {
            *w = scale * dot(q, kv.key(j));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for w in row.iter_mut() {
            *w = (*w - max).exp();
        }
    }

    let mut out = Matrix::zeros(q_rows, d_v);
    let mut acc = vec![0.0f64; d_v];
    for i in 0..q_rows {
        let row = &weights[i * n..(i + 1) * n];
        acc.fill(0.0);
        let mut sum = 0.0f64;
        for (j, &w) in row.iter().enumerate() {
            sum += w;
            for (a, &v) in acc.iter_mut().zip(kv.value(j)) {
                *a += w * v as f64;
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = (a / sum) as f32;
        }
    }
    Ok(out)
}

/// Transient-buffer accounting for [`attend_streaming_with_stats`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StreamingStats {
    /// Largest number of scratch elements alive at once (logit tile, running
    /// max/sum, accumulator). The returned output is not counted.
    pub peak_transient: usize,
    pub tiles: usize,
}

/// Tiled online-softmax attention. Never holds more than `Q x block` logits.
pub fn attend_streaming<K: KvRows + ?Sized>(
    queries: &Matrix,
    kv: &K,
    block: usize,
    scale: f32,
) -> Result<Matrix> {
    attend_streaming_with_stats(queries, kv, block, scale).map(|(m, _)| m)
}

pub fn attend_streaming_with_stats<K: KvRows + ?Sized>(
    queries: &Matrix,
    kv: &K,
    block: usize,
    scale: f32,
) -> Result<(Matrix, StreamingStats)> {
    if block == 0 {
        return Err(Error::Config("tile size must be at least 1".into()));
    }
    let d_v = check_shapes(queries, kv)?;
    let n = kv.len();
    let q_rows = queries.rows();
    let tile = block.min(n);
    let scale = scale as f64;

    let mut running_max = vec![f64::NEG_INFINITY; q_rows];
    let mut running_sum = vec![0.0f64; q_rows];
    let mut acc = vec![0.0f64; q_rows * d_v];
    let mut logits = vec![0.0f64; q_rows * tile];
    let mut stats = StreamingStats {
        peak_transient: running_max.len() + running_sum.len() + acc.len() + logits.len(),
        tiles: 0,
    };

    let mut start = 0;
    while start < n {
        let end = (start + tile).min(n);
        let width = end - start;
        stats.tiles += 1;
        for i in 0..q_rows {
            let q = queries.row(i);
            let lrow = &mut logits[i * tile..i * tile + width];
            let mut tile_max = f64::NEG_INFINITY;
            for (t, l) in lrow.iter_mut().enumerate() {
                *l = scale * dot(q, kv.key(start + t));
                tile_max = tile_max.max(*l);
            }
            let new_max = running_max[i].max(tile_max);
            let correction = (running_max[i] - new_max).exp();
            let arow = &mut acc[i * d_v..(i + 1) * d_v];
            if correction != 1.0 {
                for a in arow.iter_mut() {
                    *a *= correction;
                }
            }
            let mut sum = running_sum[i] * correction;
            for (t, l) in lrow.iter().enumerate() {
                let w = (l - new_max).exp();
                sum += w;
                for (a, &v) in arow.iter_mut().zip(kv.value(start + t)) {
                    *a += w * v as f64;
                }
            }
            running_sum[i] = sum;
            running_max[i] = new_max;
        }
        start = end;
    }

    let mut out = Matrix::zeros(q_rows, d_v);
    for i in 0..q_rows {
        let arow = &acc[i * d_v..(i + 1) * d_v];
        for (o, a) in out.row_mut(i).iter_mut().zip(arow) {
            *o = (a / running_sum[i]) as f32;
        }
    }
    Ok((out, stats))
}

/// `||a - b||_F / max(||b||_F, 1e-12)`, in 64-bit.
pub fn relative_frobenius(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let diff: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(diff.sqrt() / b.frobenius().max(NORM_EPS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[3.0, 4.0]).unwrap().as_slice(), &[0.6, 0.8]);
        let z = normalize(&[0.0, 0.0]).unwrap();
        assert!(z.is_zero());
        assert_eq!(normalize(&[1.0; 4]).unwrap().as_slice(), &[0.5; 4]);
    }

    #[test]
    fn normalize_rejects_non_finite() {
        let err = normalize(&[1.0, f32::NAN]).unwrap_err();
        assert_eq!(err.to_string(), "non-finite vector");
        assert!(normalize(&[f32::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn cos_sim_examples() {
        assert_eq!(cos_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cos_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 1/sqrt(2) evaluated in f64
        let expected = 1.0f64 / 2.0f64.sqrt();
        assert!((cos_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - expected).abs() < 1e-4);
        assert_eq!(cos_sim(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            cos_sim(&[1.0], &[1.0, 0.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[2.5, 2.5, 2.5], 0.3).unwrap();
        for x in &p {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        let e = std::f64::consts::E;
        let p = softmax(&[1.0, 0.0], 1.0).unwrap();
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-4);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-4);
        assert!((p[0] - 0.7311).abs() < 1e-4);
        let p = softmax(&[1.0, 0.0], 1e6).unwrap();
        assert!(p.iter().all(|x| (x - 0.5).abs() < 1e-5));
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(softmax(&[], 1.0), Err(Error::EmptyInput)));
        assert!(matches!(softmax(&[1.0], 0.0), Err(Error::BadTemperature(_))));
        assert!(matches!(softmax(&[1.0], -2.0), Err(Error::BadTemperature(_))));
        assert!(matches!(softmax(&[f64::NAN], 1.0), Err(Error::NonFinite)));
    }

    #[test]
    fn attend_single_token_returns_value() {
        let k = Matrix::from_vec(1, 2, vec![0.3, -0.7]).unwrap();
        let v = Matrix::from_vec(1, 3, vec![1.5, -2.0, 0.25]).unwrap();
        let q = Matrix::from_vec(2, 2, vec![10.0, 3.0, -4.0, 0.5]).unwrap();
        let kv = KvPair::new(&k, &v).unwrap();
        let naive = attend_naive(&q, &kv, 0.7).unwrap();
        let streamed = attend_streaming(&q, &kv, 1, 0.7).unwrap();
        for i in 0..2 {
            assert_eq!(naive.row(i), v.row(0));
            assert_eq!(streamed.row(i), v.row(0));
        }
    }

    #[test]
    fn attend_identical_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random_matrix(&mut rng, 5, 4);
        let v = Matrix::from_vec(5, 2, [0.5f32, -1.25].repeat(5)).unwrap();
        let q = random_matrix(&mut rng, 3, 4);
        let out = attend_naive(&q, &KvPair::new(&k, &v).unwrap(), 0.5).unwrap();
        for i in 0..3 {
            assert!((out.row(i)[0] - 0.5).abs() < 1e-6);
            assert!((out.row(i)[1] + 1.25).abs() < 1e-6);
        }
    }

    #[test]
    fn attend_empty_context() {
        let k = Matrix::zeros(0, 4);
        let v = Matrix::zeros(0, 4);
        let q = Matrix::zeros(1, 4);
        let kv = KvPair::new(&k, &v).unwrap();
        assert_eq!(attend_naive(&q, &kv, 1.0).unwrap_err().to_string(), "empty context");
        assert!(matches!(attend_streaming(&q, &kv, 4, 1.0), Err(Error::EmptyContext)));
    }

    #[test]
    fn one_tile_matches_naive_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (k, v, q) = (
            random_matrix(&mut rng, 7, 4),
            random_matrix(&mut rng, 7, 5),
            random_matrix(&mut rng, 3, 4),
        );
        let kv = KvPair::new(&k, &v).unwrap();
        let naive = attend_naive(&q, &kv, 0.5).unwrap();
        let streamed = attend_streaming(&q, &kv, 7, 0.5).unwrap();
        assert_eq!(naive, streamed);
    }

    #[test]
    fn streaming_matches_naive_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let n = rng.random_range(1..40);
            let (q_rows, d_k, d_v) = (rng.random_range(1..5), rng.random_range(1..9), rng.random_range(1..9));
            let (k, v, q) = (
                random_matrix(&mut rng, n, d_k),
                random_matrix(&mut rng, n, d_v),
                random_matrix(&mut rng, q_rows, d_k),
            );
            let kv = KvPair::new(&k, &v).unwrap();
            let scale = 1.0 / (d_k as f32).sqrt();
            let naive = attend_naive(&q, &kv, scale).unwrap();
            for block in [1, 2, 5, n] {
                let streamed = attend_streaming(&q, &kv, block, scale).unwrap();
                worst = worst.max(relative_frobenius(&streamed, &naive).unwrap());
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn streaming_buffers_scale_with_tile_not_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (k, v, q) = (
            random_matrix(&mut rng, 1000, 8),
            random_matrix(&mut rng, 1000, 6),
            random_matrix(&mut rng, 4, 8),
        );
        let kv = KvPair::new(&k, &v).unwrap();
        let (_, stats) = attend_streaming_with_stats(&q, &kv, 16, 0.3).unwrap();
        assert_eq!(stats.tiles, 63);
        // logits + max + sum + accumulator
        assert_eq!(stats.peak_transient, 4 * 16 + 4 + 4 + 4 * 6);
    }

    #[test]
    fn relative_frobenius_examples() {
        let full = Matrix::from_vec(1, 2, vec![1.0, -2.0]).unwrap();
        assert_eq!(relative_frobenius(&full, &full).unwrap(), 0.0);
        let doubled = Matrix::from_vec(1, 2, vec![2.0, -4.0]).unwrap();
        assert!((relative_frobenius(&doubled, &full).unwrap() - 1.0).abs() < 1e-12);
        let wrong = Matrix::zeros(2, 1);
        assert!(relative_frobenius(&wrong, &full).is_err());
    }

    fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-100.0f32..100.0, len)
    }

    proptest! {
        #[test]
        fn prop_normalize_unit_and_idempotent(v in finite_vec(6)) {
            let u = normalize(&v).unwrap();
            if !u.is_zero() {
                prop_assert!((norm(u.as_slice()) - 1.0).abs() <= 1e-5);
            }
            let uu = normalize(u.as_slice()).unwrap();
            for (a, b) in u.as_slice().iter().zip(uu.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn prop_cos_sim_symmetric_and_scale_invariant(a in finite_vec(5), b in finite_vec(5)) {
            let ab = cos_sim(&a, &b).unwrap();
            prop_assert_eq!(ab, cos_sim(&b, &a).unwrap());
            prop_assert!((-1.0..=1.0).contains(&ab));
            for alpha in [0.01f32, 1.0, 100.0] {
                let scaled: Vec<f32> = a.iter().map(|x| x * alpha).collect();
                if norm(&scaled) >= NORM_EPS && norm(&a) >= NORM_EPS {
                    prop_assert!((cos_sim(&scaled, &b).unwrap() - ab).abs() <= 1e-6);
                }
            }
        }

        #[test]
        fn prop_softmax_sums_to_one_and_shift_invariant(
            s in prop::collection::vec(-50.0f64..50.0, 1..40),
            c in -1000.0f64..1000.0,
            tau in 0.05f64..20.0,
        ) {
            let p = softmax(&s, tau).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
            let q = softmax(&shifted, tau).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if s[i] > s[j] {
                        prop_assert!(p[i] >= p[j]);
                    }
                }
            }
        }

        #[test]
        fn prop_streaming_equals_naive(
            seed in any::<u64>(),
            n in 1usize..64,
            block in 1usize..80,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (k, v, q) = (
                random_matrix(&mut rng, n, 4),
                random_matrix(&mut rng, n, 3),
                random_matrix(&mut rng, 3, 4),
            );
            let kv = KvPair::new(&k, &v).unwrap();
            let naive = attend_naive(&q, &kv, 0.5).unwrap();
            let streamed = attend_streaming(&q, &kv, block, 0.5).unwrap();
            prop_assert!(relative_frobenius(&streamed, &naive).unwrap() < 1e-5);
        }
    }
}

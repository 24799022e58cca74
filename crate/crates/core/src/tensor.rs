//! Dense row-major `f64` tensors and the deterministic random source.

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Tensor of `shape` with every element equal to `fill`.
    pub fn new(shape: &[usize], fill: f64) -> Result<Self> {
        check_shape(shape)?;
        Ok(Self { shape: shape.to_vec(), data: vec![fill; shape.iter().product()] })
    }

    /// Zero tensor. Panics on an invalid shape; for shapes derived from existing tensors.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, 0.0).expect("zeros: invalid shape")
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                len
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(n, c, h, w)` for a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!("expected rank-4 tensor, got shape {:?}", self.shape))),
        }
    }

    /// Flat offset of a coordinate.
    pub fn offset(&self, idx: &[usize]) -> Result<usize> {
        if idx.len() != self.shape.len() || idx.iter().zip(&self.shape).any(|(&i, &d)| i >= d) {
            return Err(Error::Index { index: idx.to_vec(), shape: self.shape.clone() });
        }
        Ok(idx.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| acc * d + i))
    }

    pub fn get(&self, idx: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(idx)?])
    }

    pub fn set(&mut self, idx: &[usize], v: f64) -> Result<()> {
        let off = self.offset(idx)?;
        self.data[off] = v;
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Copy of sample range `start..start + count` along the leading axis.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Tensor> {
        let n = *self.shape.first().ok_or_else(|| Error::shape("scalar tensor has no batch axis"))?;
        if count == 0 || start + count > n {
            return Err(Error::shape(format!("batch slice {start}..{} outside 0..{n}", start + count)));
        }
        let stride = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Tensor { shape, data: self.data[start * stride..(start + count) * stride].to_vec() })
    }

    /// Concatenate tensors of equal trailing shape along the leading axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut n = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape(format!("stack: shape {:?} vs {:?}", p.shape, first.shape)));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Tensor { shape, data })
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

/// Deterministic 64-bit generator.
///
/// Algorithm, fixed so that streams can be reproduced by other implementations:
///
/// * seeding: `state = splitmix64(seed)`; a zero result is replaced by
///   `0x9E3779B97F4A7C15`.
/// * `next_u64` (xorshift64*): `s ^= s >> 12; s ^= s << 25; s ^= s >> 27;`
///   output `s * 0x2545F4914F6CDD1D` (wrapping).
/// * `next_f64`: `((next_u64 >> 11) + 0.5) / 2^53`, always in the open interval (0, 1).
/// * `next_normal(mean, std)`: Box–Muller from two consecutive uniforms `u1, u2`,
///   `mean + std * sqrt(-2 ln u1) * cos(2π u2)`; the sine partner is discarded.
///   `std == 0` returns `mean` without consuming the stream.
/// * `next_below(n)`: high 64 bits of the 128-bit product `next_u64 * n`.
/// * `shuffle(n)`: Fisher–Yates from the top, `for i in (1..n).rev() { j = next_below(i + 1); swap(i, j) }`.
#[derive(Debug, Clone)]
pub struct Prng {
    state: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        Self { state: if z == 0 { 0x9E37_79B9_7F4A_7C15 } else { z } }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut s = self.state;
        s ^= s >> 12;
        s ^= s << 25;
        s ^= s >> 27;
        self.state = s;
        s.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    pub fn next_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    /// Uniform integer in `0..n`. `n` must be nonzero.
    pub fn next_below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn next_normal(&mut self, mean: f64, std: f64) -> f64 {
        if std == 0.0 {
            return mean;
        }
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        mean + std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Seeded Fisher–Yates permutation of `0..n`.
    pub fn shuffle(&mut self, n: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.next_below(i + 1);
            perm.swap(i, j);
        }
        perm
    }

    pub fn normal_tensor(&mut self, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
        let mut t = Tensor::new(shape, 0.0)?;
        for x in t.data_mut() {
            *x = self.next_normal(mean, std);
        }
        Ok(t)
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
        let mut t = Tensor::new(shape, 0.0)?;
        for x in t.data_mut() {
            *x = self.uniform(lo, hi);
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_fills() {
        let t = Tensor::new(&[2, 3], 0.0).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.data(), &[0.0; 6]);
        assert_eq!(Tensor::new(&[1], 7.5).unwrap().data(), &[7.5]);
    }

    #[test]
    fn degenerate_dim_rejected() {
        assert!(matches!(Tensor::new(&[2, 0], 1.0), Err(Error::InvalidShape(_))));
        assert!(matches!(Tensor::new(&[], 1.0), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn get_set() {
        let ones = Tensor::new(&[2, 2], 1.0).unwrap();
        assert_eq!(ones.get(&[1, 1]).unwrap(), 1.0);
        let mut t = Tensor::zeros(&[2, 2]);
        t.set(&[0, 1], 3.25).unwrap();
        assert_eq!(t.get(&[0, 1]).unwrap(), 3.25);
        assert!(matches!(t.get(&[2, 0]), Err(Error::Index { .. })));
        assert!(matches!(t.get(&[0]), Err(Error::Index { .. })));
    }

    #[test]
    fn row_major_exhaustive() {
        for a in 1..=4 {
            for b in 1..=4 {
                for c in 1..=4 {
                    for d in 1..=4 {
                        let t = Tensor::zeros(&[a, b, c, d]);
                        let mut expect = 0;
                        for i in 0..a {
                            for j in 0..b {
                                for k in 0..c {
                                    for l in 0..d {
                                        assert_eq!(t.offset(&[i, j, k, l]).unwrap(), ((i * b + j) * c + k) * d + l);
                                        assert_eq!(t.offset(&[i, j, k, l]).unwrap(), expect);
                                        expect += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::zeros(&[3, 5]);
        assert_eq!(t.offset(&[2, 4]).unwrap(), 2 * 5 + 4);
    }

    #[test]
    fn normal_with_zero_std_is_mean() {
        let mut p = Prng::new(3);
        assert_eq!(p.next_normal(2.0, 0.0), 2.0);
    }

    #[test]
    fn deterministic_streams() {
        let mut a = Prng::new(99);
        let mut b = Prng::new(99);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut a = Prng::new(5);
        let mut b = Prng::new(5);
        let xs: Vec<f64> = (0..100).map(|_| a.next_normal(0.0, 1.0)).collect();
        let ys: Vec<f64> = (0..100).map(|_| b.next_normal(0.0, 1.0)).collect();
        assert_eq!(xs, ys);
        assert_ne!(Prng::new(5).next_u64(), Prng::new(6).next_u64());
    }

    #[test]
    fn seed_zero_is_usable() {
        let mut p = Prng::new(0);
        let x = p.next_u64();
        assert_ne!(x, p.next_u64());
    }

    #[test]
    fn normal_sample_mean_seed_42() {
        let mut p = Prng::new(42);
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let z = p.next_normal(0.0, 1.0);
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        let var = sq / n as f64 - mean * mean;
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn uniforms_open_interval() {
        let mut p = Prng::new(1);
        for _ in 0..10_000 {
            let u = p.next_f64();
            assert!(u > 0.0 && u < 1.0);
        }
    }

    #[test]
    fn shuffle_small_cases() {
        let mut p = Prng::new(1);
        assert!(p.shuffle(0).is_empty());
        assert_eq!(p.shuffle(1), vec![0]);
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut p = Prng::new(17);
        for _ in 0..100 {
            let n = p.next_below(200);
            let mut perm = p.shuffle(n);
            perm.sort_unstable();
            assert_eq!(perm, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn slice_and_stack_inverse() {
        let t = Tensor::from_vec(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let a = t.slice_batch(0, 1).unwrap();
        let b = t.slice_batch(1, 2).unwrap();
        assert_eq!(b.data(), &[3., 4., 5., 6.]);
        assert_eq!(Tensor::stack(&[&a, &b]).unwrap(), t);
        assert!(t.slice_batch(2, 2).is_err());
    }
}

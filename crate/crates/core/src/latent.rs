//! Latent codes on the unit sphere and the per-training-sample table of
//! learned codes.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::TensorError;
use crate::tensor::Tensor;

pub const UNIT_NORM_TOL: f64 = 1e-9;

/// A latent vector constrained to the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(Vec<f64>);

impl LatentCode {
    /// Wraps a vector that must already be unit-norm (within 1e-9).
    pub fn from_unit(v: Vec<f64>) -> Result<Self, TensorError> {
        let norm = l2(&v);
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(TensorError::Degenerate {
                op: "latent_code",
                detail: format!("norm {} is not 1 within {}", norm, UNIT_NORM_TOL),
            });
        }
        Ok(LatentCode(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.0.clone()).expect("unit vectors are finite")
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Isotropic draw from the unit sphere: a Gaussian sample, normalized.
pub fn sample_sphere<R: Rng>(dim: usize, rng: &mut R) -> Result<LatentCode, TensorError> {
    if dim == 0 {
        return Err(TensorError::Degenerate { op: "sample_sphere", detail: "dim = 0".into() });
    }
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(code) = project_sphere(&v) {
            return Ok(code);
        }
        // astronomically unlikely near-zero draw: resample
    }
}

/// Radial projection onto the unit sphere; near-zero input is degenerate.
pub fn project_sphere(v: &[f64]) -> Result<LatentCode, TensorError> {
    let norm = l2(v);
    if !norm.is_finite() || norm <= 1e-12 {
        return Err(TensorError::Degenerate {
            op: "project_sphere",
            detail: format!("norm {}", norm),
        });
    }
    Ok(LatentCode(v.iter().map(|x| x / norm).collect()))
}

/// Key of a latent-table entry: sample index plus an optional explicit
/// mode index (used when the dataset labels its modes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SampleKey {
    pub sample: u32,
    pub mode: Option<u8>,
}

impl SampleKey {
    pub fn plain(sample: u32) -> Self {
        SampleKey { sample, mode: None }
    }

    pub fn with_mode(sample: u32, mode: u8) -> Self {
        SampleKey { sample, mode: Some(mode) }
    }

    /// Checkpoint tensor name under the "latent/" prefix.
    pub fn name(&self) -> String {
        match self.mode {
            Some(m) => format!("latent/{}/{}", self.sample, m),
            None => format!("latent/{}", self.sample),
        }
    }

    pub fn parse_name(name: &str) -> Option<Self> {
        let rest = name.strip_prefix("latent/")?;
        match rest.split_once('/') {
            Some((s, m)) => Some(SampleKey::with_mode(s.parse().ok()?, m.parse().ok()?)),
            None => Some(SampleKey::plain(rest.parse().ok()?)),
        }
    }
}

/// Per-training-sample store of learned latent codes. Keys remain stable
/// across epochs; every stored code is unit-norm.
#[derive(Debug, Clone, Default)]
pub struct LatentTable {
    codes: BTreeMap<SampleKey, LatentCode>,
}

impl LatentTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn get(&self, key: SampleKey) -> Option<&LatentCode> {
        self.codes.get(&key)
    }

    /// Fetches the code for `key`, initializing missing entries with a
    /// fresh sphere sample.
    pub fn get_or_init<R: Rng>(
        &mut self,
        key: SampleKey,
        dim: usize,
        rng: &mut R,
    ) -> Result<LatentCode, TensorError> {
        if let Some(code) = self.codes.get(&key) {
            return Ok(code.clone());
        }
        let code = sample_sphere(dim, rng)?;
        self.codes.insert(key, code.clone());
        Ok(code)
    }

    /// Replaces the code for `key`; the caller must have projected it.
    pub fn update(&mut self, key: SampleKey, code: LatentCode) {
        self.codes.insert(key, code);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SampleKey, &LatentCode)> {
        self.codes.iter()
    }

    /// Serializes every code as a named tensor for the checkpoint.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        self.codes.iter().map(|(k, c)| (k.name(), c.to_tensor())).collect()
    }

    pub fn from_tensors<'a, I>(entries: I) -> Result<Self, TensorError>
    where
        I: IntoIterator<Item = (&'a String, &'a Tensor)>,
    {
        let mut table = LatentTable::new();
        for (name, t) in entries {
            if let Some(key) = SampleKey::parse_name(name) {
                table.codes.insert(key, LatentCode::from_unit(t.data().to_vec())?);
            }
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_dimensional_samples_are_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let z = sample_sphere(1, &mut rng).unwrap();
            let v = z.as_slice()[0];
            assert!(v == 1.0 || v == -1.0, "got {}", v);
        }
    }

    #[test]
    fn samples_are_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for dim in [2usize, 3, 10, 64] {
            let z = sample_sphere(dim, &mut rng).unwrap();
            let norm: f64 = z.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= UNIT_NORM_TOL);
        }
    }

    #[test]
    fn coordinate_means_vanish_isotropically() {
        // 1e4 draws in dim 32: per-coordinate mean within 3/sqrt(1e4) of 0.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 32;
        let n = 10_000;
        let mut sums = vec![0.0; dim];
        for _ in 0..n {
            let z = sample_sphere(dim, &mut rng).unwrap();
            for (s, v) in sums.iter_mut().zip(z.as_slice()) {
                *s += v;
            }
        }
        // coordinates of a unit vector have variance 1/dim, so the bound
        // 3/sqrt(n) is ~17 sigma; this guards isotropy, not tightness.
        let bound = 3.0 / (n as f64).sqrt();
        for s in sums {
            assert!((s / n as f64).abs() < bound);
        }
    }

    #[test]
    fn projection_cases() {
        let z = project_sphere(&[3.0, 4.0]).unwrap();
        assert!((z.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((z.as_slice()[1] - 0.8).abs() < 1e-15);
        let unit = project_sphere(&[0.0, 1.0]).unwrap();
        assert_eq!(unit.as_slice(), &[0.0, 1.0]);
        assert!(project_sphere(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn table_get_is_stable_and_update_replaces() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut table = LatentTable::new();
        let key = SampleKey::plain(7);
        let a = table.get_or_init(key, 3, &mut rng).unwrap();
        let b = table.get_or_init(key, 3, &mut rng).unwrap();
        assert_eq!(a, b);
        let fresh = sample_sphere(3, &mut rng).unwrap();
        table.update(key, fresh.clone());
        assert_eq!(table.get(key).unwrap(), &fresh);
    }

    #[test]
    fn mode_keys_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut table = LatentTable::new();
        let a = table.get_or_init(SampleKey::with_mode(0, 0), 3, &mut rng).unwrap();
        let b = table.get_or_init(SampleKey::with_mode(0, 1), 3, &mut rng).unwrap();
        assert_ne!(a, b);
        assert_eq!(table.len(), 2);
    }

    #[test]
    fn key_names_round_trip() {
        for key in [SampleKey::plain(12), SampleKey::with_mode(3, 1)] {
            assert_eq!(SampleKey::parse_name(&key.name()), Some(key));
        }
        assert_eq!(SampleKey::parse_name("H/0/w"), None);
    }

    #[test]
    fn non_unit_code_rejected() {
        assert!(LatentCode::from_unit(vec![0.5, 0.5]).is_err());
    }
}

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scene_graph::TrackId;

/// Per-object latent codes, one row per track, all of equal dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTable {
    index: BTreeMap<TrackId, usize>,
    codes: Array2<f64>,
}

impl LatentTable {
    pub fn zeros(tracks: &[TrackId], dim: usize) -> Self {
        let mut index = BTreeMap::new();
        for &t in tracks {
            let next = index.len();
            index.entry(t).or_insert(next);
        }
        let rows = index.len();
        Self {
            index,
            codes: Array2::zeros((rows, dim)),
        }
    }

    /// Zero-mean Gaussian initialization with standard deviation `std`.
    pub fn random(tracks: &[TrackId], dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut table = Self::zeros(tracks, dim);
        let normal = Normal::new(0.0, std).expect("finite std");
        table.codes.mapv_inplace(|_| normal.sample(rng));
        table
    }

    pub fn from_rows(tracks: &[TrackId], codes: Array2<f64>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (row, &t) in tracks.iter().enumerate() {
            if index.insert(t, row).is_some() {
                return Err(Error::DuplicateTrack(t));
            }
        }
        if codes.nrows() != tracks.len() {
            return Err(Error::Shape("latent rows do not match track list".into()));
        }
        if !codes.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("latent codes".into()));
        }
        Ok(Self { index, codes })
    }

    pub fn dim(&self) -> usize {
        self.codes.ncols()
    }

    pub fn len(&self) -> usize {
        self.codes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, t: TrackId) -> bool {
        self.index.contains_key(&t)
    }

    pub fn row_of(&self, t: TrackId) -> Result<usize> {
        self.index.get(&t).copied().ok_or(Error::MissingLatent(t))
    }

    pub fn get(&self, t: TrackId) -> Result<ArrayView1<'_, f64>> {
        Ok(self.codes.row(self.row_of(t)?))
    }

    /// Tracks in row order.
    pub fn tracks(&self) -> Vec<TrackId> {
        let mut v: Vec<(usize, TrackId)> = self.index.iter().map(|(&t, &r)| (r, t)).collect();
        v.sort();
        v.into_iter().map(|(_, t)| t).collect()
    }

    pub fn codes(&self) -> ArrayView2<'_, f64> {
        self.codes.view()
    }

    pub fn codes_mut(&mut self) -> &mut Array2<f64> {
        &mut self.codes
    }

    pub fn as_slice(&self) -> &[f64] {
        self.codes.as_slice().expect("standard layout")
    }

    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        self.codes.as_slice_mut().expect("standard layout")
    }

    /// Component-wise mean of all codes (zeros for an empty table).
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        if self.is_empty() {
            return m;
        }
        for row in self.codes.outer_iter() {
            for (a, b) in m.iter_mut().zip(row.iter()) {
                *a += b;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn lookup_and_mean() {
        let tracks = [TrackId(5), TrackId(2)];
        let codes = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let t = LatentTable::from_rows(&tracks, codes).unwrap();
        assert_eq!(t.get(TrackId(2)).unwrap().to_vec(), vec![3.0, 6.0]);
        assert!(matches!(t.get(TrackId(7)), Err(Error::MissingLatent(_))));
        assert_eq!(t.mean(), vec![2.0, 4.0]);
        assert_eq!(t.tracks(), tracks.to_vec());
    }

    #[test]
    fn random_init_is_small_and_seeded() {
        let tracks: Vec<TrackId> = (0..4).map(TrackId).collect();
        let a = LatentTable::random(&tracks, 64, 0.01, &mut ChaCha8Rng::seed_from_u64(1));
        let b = LatentTable::random(&tracks, 64, 0.01, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert!(a.codes().iter().all(|v| v.abs() < 0.06));
    }
}

//! Assignment of parameter coordinates to fragments.
//!
//! Fragment indices are zero-based: a map with `k` fragments assigns every
//! coordinate a value in `0..k`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FragmentScheme {
    /// Consecutive runs of `d/k` coordinates.
    #[default]
    Contiguous,
    /// Coordinate `i` goes to fragment `i mod k`.
    RoundRobin,
    /// A seeded permutation of the contiguous map.
    Shuffled { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FragmentMap {
    assign: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl FragmentMap {
    pub fn new(d: usize, k: usize, scheme: FragmentScheme) -> Result<Self> {
        if k == 0 || k > d {
            return Err(Error::InvalidArgument(format!(
                "fragment count must satisfy 1 <= K <= d (got K={k}, d={d})"
            )));
        }
        if d % k != 0 {
            return Err(Error::InvalidArgument(format!(
                "equal-size fragments need K to divide d (got K={k}, d={d})"
            )));
        }
        let size = d / k;
        let contiguous: Vec<usize> = (0..d).map(|i| i / size).collect();
        let assign = match scheme {
            FragmentScheme::Contiguous => contiguous,
            FragmentScheme::RoundRobin => (0..d).map(|i| i % k).collect(),
            FragmentScheme::Shuffled { seed } => {
                let mut perm: Vec<usize> = (0..d).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                perm.iter().map(|&p| contiguous[p]).collect()
            }
        };
        Self::from_assignment(assign, k)
    }

    /// Builds a map from an explicit assignment; every fragment must be used.
    pub fn from_assignment(assign: Vec<usize>, k: usize) -> Result<Self> {
        let mut members = vec![Vec::new(); k];
        for (i, &f) in assign.iter().enumerate() {
            if f >= k {
                return Err(Error::InvalidArgument(format!(
                    "coordinate {i} assigned to fragment {f}, but only {k} fragments exist"
                )));
            }
            members[f].push(i);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(Error::InvalidArgument(format!("fragment {empty} is empty")));
        }
        Ok(Self { assign, members })
    }

    pub fn dim(&self) -> usize {
        self.assign.len()
    }

    pub fn fragments(&self) -> usize {
        self.members.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assign
    }

    pub fn fragment_of(&self, coord: usize) -> usize {
        self.assign[coord]
    }

    /// Coordinates belonging to fragment `k`, in increasing order.
    pub fn indices(&self, k: usize) -> Result<&[usize]> {
        self.members
            .get(k)
            .map(Vec::as_slice)
            .ok_or_else(|| self.bad_fragment(k))
    }

    /// The diagonal 0/1 projector onto fragment `k`.
    pub fn projector(&self, k: usize) -> Result<DenseMatrix> {
        let mut diag = vec![0.0; self.dim()];
        for &i in self.indices(k)? {
            diag[i] = 1.0;
        }
        Ok(DenseMatrix::from_diag(&diag))
    }

    /// `x` with every coordinate outside fragment `k` zeroed.
    pub fn slice(&self, x: &[f64], k: usize) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "vector of length {} for a fragment map over {} coordinates",
                x.len(),
                self.dim()
            )));
        }
        let mut out = vec![0.0; x.len()];
        for &i in self.indices(k)? {
            out[i] = x[i];
        }
        Ok(out)
    }

    fn bad_fragment(&self, k: usize) -> Error {
        Error::InvalidArgument(format!(
            "fragment index {k} out of range (map has {} fragments)",
            self.fragments()
        ))
    }
}

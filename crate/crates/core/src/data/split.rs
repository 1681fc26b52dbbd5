//! Class-aware sampling of low-data labeled/unlabeled splits.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SegDataset;
use crate::error::{Error, Result};

pub const DEFAULT_MIN_CLASS_PIXELS: u64 = 64;
pub const DEFAULT_MAX_RETRIES: usize = 100;

/// A rational fraction in (0, 1], written `a/b` or as an integer `1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(Error::config("fraction", format!("{num}/{den} is not in (0, 1]")));
        }
        Ok(Self { num, den })
    }

    /// ⌈fraction · n⌉.
    pub fn of(&self, n: usize) -> usize {
        ((n as u64 * self.num).div_ceil(self.den)) as usize
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.num == self.den {
            write!(f, "1")
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Fraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("fraction", format!("cannot parse `{s}`; expected `a/b`"));
        match s.trim().split_once('/') {
            Some((a, b)) => Fraction::new(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => {
                let a: u64 = s.trim().parse().map_err(|_| bad())?;
                Fraction::new(a, 1)
            }
        }
    }
}

impl Serialize for Fraction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Disjoint labeled / unlabeled id lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub seed: u64,
    pub fraction: Fraction,
}

/// Per-sample class pixel counts, in dataset order.
pub fn class_histogram(ds: &dyn SegDataset) -> Result<Vec<Vec<u64>>> {
    (0..ds.len()).map(|i| Ok(ds.get(i)?.mask.histogram(ds.num_classes()))).collect()
}

fn uncovered(chosen: &[usize], histograms: &[Vec<u64>], min_pixels: u64) -> Vec<usize> {
    let c = histograms.first().map_or(0, Vec::len);
    (0..c)
        .filter(|&k| chosen.iter().map(|&i| histograms[i][k]).sum::<u64>() < min_pixels)
        .collect()
}

/// Samples ⌈fraction·|ids|⌉ labeled ids such that every class has at least
/// `min_class_pixels` labeled pixels, retrying with derived seeds up to
/// `max_retries` times. The remaining ids become the unlabeled pool. Both
/// lists keep dataset order.
pub fn sample_low_data_split(
    ids: &[String],
    histograms: &[Vec<u64>],
    fraction: Fraction,
    seed: u64,
    min_class_pixels: u64,
    max_retries: usize,
) -> Result<DatasetSplit> {
    assert_eq!(ids.len(), histograms.len(), "one histogram per id");
    let k = fraction.of(ids.len());
    let all: Vec<usize> = (0..ids.len()).collect();
    let infeasible = uncovered(&all, histograms, min_class_pixels);
    if !infeasible.is_empty() {
        return Err(Error::Sampling { attempts: 0, uncovered: infeasible });
    }
    let mut last_uncovered = Vec::new();
    for attempt in 0..max_retries.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt as u64);
        let mut order = all.clone();
        order.shuffle(&mut rng);
        let mut chosen = order[..k].to_vec();
        last_uncovered = uncovered(&chosen, histograms, min_class_pixels);
        if last_uncovered.is_empty() {
            chosen.sort_unstable();
            let mut is_labeled = vec![false; ids.len()];
            chosen.iter().for_each(|&i| is_labeled[i] = true);
            let (labeled, unlabeled): (Vec<_>, Vec<_>) = (0..ids.len()).partition(|&i| is_labeled[i]);
            return Ok(DatasetSplit {
                labeled_ids: labeled.into_iter().map(|i| ids[i].clone()).collect(),
                unlabeled_ids: unlabeled.into_iter().map(|i| ids[i].clone()).collect(),
                seed,
                fraction,
            });
        }
    }
    Err(Error::Sampling { attempts: max_retries, uncovered: last_uncovered })
}

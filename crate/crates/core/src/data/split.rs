//! Deterministic test / labeled / unlabeled partition.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::rng;

/// A fraction `num / den`, written as `"1/8"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub const fn new(num: u64, den: u64) -> Self {
        Self { num, den }
    }

    /// `round(self * n)` with halves rounded up, in exact integer arithmetic.
    pub fn round_half_up_of(&self, n: usize) -> usize {
        ((2 * self.num * n as u64 + self.den) / (2 * self.den)) as usize
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Fraction {
    type Err = Error;

    /// Accepts `"a/b"` or a decimal such as `"0.125"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Precondition(format!("cannot parse fraction {s:?}"));
        let s = s.trim();
        if let Some((a, b)) = s.split_once('/') {
            let num = a.trim().parse().map_err(|_| bad())?;
            let den: u64 = b.trim().parse().map_err(|_| bad())?;
            if den == 0 {
                return Err(bad());
            }
            return Ok(Self { num, den });
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 9 || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) || s.is_empty() {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let num = format!("{int}{frac}").parse::<u64>().map_err(|_| bad())?;
        Ok(Self { num, den })
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

/// Share of all samples held out for testing (3:1 train/test).
pub const TEST_FRACTION: Fraction = Fraction::new(1, 4);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub labeled_fraction: Fraction,
    pub split_seed: u64,
}

impl SplitManifest {
    pub fn train_len(&self) -> usize {
        self.labeled_ids.len() + self.unlabeled_ids.len()
    }
}

/// Shuffle ids with `split_seed`, take the first quarter as test, then
/// `round_half_up(fraction * train)` as labeled and the rest unlabeled.
pub fn split_partition(manifest: &DatasetManifest, labeled_fraction: Fraction, split_seed: u64) -> Result<SplitManifest> {
    split_ids(&manifest.sample_ids(), labeled_fraction, split_seed)
}

pub fn split_ids(ids: &[String], labeled_fraction: Fraction, split_seed: u64) -> Result<SplitManifest> {
    if labeled_fraction.num == 0 || labeled_fraction.num >= labeled_fraction.den {
        return Err(Error::Precondition(format!("labeled fraction {labeled_fraction} must lie in (0, 1)")));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng::stream(split_seed, "split"));
    let n_test = TEST_FRACTION.round_half_up_of(shuffled.len());
    let train = shuffled.split_off(n_test);
    let n_labeled = labeled_fraction.round_half_up_of(train.len());
    if n_labeled == 0 {
        return Err(Error::Split(format!("fraction {labeled_fraction} of {} training samples is 0", train.len())));
    }
    let (labeled, unlabeled) = train.split_at(n_labeled);
    Ok(SplitManifest {
        labeled_ids: labeled.to_vec(),
        unlabeled_ids: unlabeled.to_vec(),
        test_ids: shuffled,
        labeled_fraction,
        split_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:05}")).collect()
    }

    #[test]
    fn reference_counts() {
        let s = split_ids(&ids(800), Fraction::new(1, 4), 3).unwrap();
        assert_eq!((s.test_ids.len(), s.labeled_ids.len(), s.unlabeled_ids.len()), (200, 150, 450));
        let s = split_ids(&ids(800), Fraction::new(1, 16), 3).unwrap();
        assert_eq!(s.train_len(), 600);
        assert_eq!(s.labeled_ids.len(), 38);
        let s = split_ids(&ids(400), Fraction::new(1, 8), 3).unwrap();
        assert_eq!((s.test_ids.len(), s.labeled_ids.len()), (100, 38));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = split_ids(&ids(100), Fraction::new(1, 8), 11).unwrap();
        assert_eq!(a, split_ids(&ids(100), Fraction::new(1, 8), 11).unwrap());
        assert_ne!(a, split_ids(&ids(100), Fraction::new(1, 8), 12).unwrap());
    }

    #[test]
    fn invalid_fractions() {
        assert!(matches!(split_ids(&ids(8), Fraction::new(0, 4), 0), Err(Error::Precondition(_))));
        assert!(split_ids(&ids(8), Fraction::new(1, 1), 0).is_err());
        assert!(matches!(split_ids(&ids(8), Fraction::new(1, 16), 0), Err(Error::Split(_))));
    }

    #[test]
    fn parse_and_display() {
        assert_eq!("1/8".parse::<Fraction>().unwrap(), Fraction::new(1, 8));
        assert_eq!("0.25".parse::<Fraction>().unwrap().value(), 0.25);
        assert_eq!(Fraction::new(1, 16).to_string(), "1/16");
        assert!("1/0".parse::<Fraction>().is_err());
        assert!("abc".parse::<Fraction>().is_err());
        assert_eq!(Fraction::new(1, 16).round_half_up_of(600), 38);
        assert_eq!(Fraction::new(1, 2).round_half_up_of(3), 2);
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_and_exhaustive(n in 8usize..300, den in 2u64..20, seed in any::<u64>()) {
            let all = ids(n);
            if let Ok(s) = split_ids(&all, Fraction::new(1, den), seed) {
                let mut seen = HashSet::new();
                for id in s.labeled_ids.iter().chain(&s.unlabeled_ids).chain(&s.test_ids) {
                    prop_assert!(seen.insert(id.clone()));
                }
                prop_assert_eq!(seen.len(), n);
                prop_assert_eq!(s.labeled_ids.len(), Fraction::new(1, den).round_half_up_of(s.train_len()));
                prop_assert_eq!(s.test_ids.len(), TEST_FRACTION.round_half_up_of(n));
            }
        }
    }
}

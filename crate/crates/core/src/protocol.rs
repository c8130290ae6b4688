//! Dataset partitioning and training-set construction for the experiment
//! protocols: random and unseen-project splits, external split files,
//! synthetic/real mixing and class-ratio downsampling.
//!
//! Everything works on sample indices so the caller keeps ownership of the
//! graphs.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::tensor::Rng;

pub const DEFAULT_UNSEEN_PROJECTS: usize = 95;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("need more than {needed} distinct projects, found {found}")]
    TooFewProjects { needed: usize, found: usize },
    #[error("fraction {0} outside [0, 1]")]
    BadFraction(f64),
    #[error("split file names unknown sample {0:?}")]
    UnknownSample(String),
    #[error("sample {0:?} appears in more than one partition")]
    Overlap(String),
    #[error("dataset is empty")]
    Empty,
    #[error("invalid ratio {0:?}")]
    BadRatio(String),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    #[serde(rename = "random_80_10_10")]
    Random,
    UnseenProjects,
    ExternalFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub n_unseen_projects: usize,
    pub seed: u64,
    /// Split file for `external_file` mode, relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            mode: SplitMode::Random,
            n_unseen_projects: DEFAULT_UNSEEN_PROJECTS,
            seed: 0,
            file: None,
        }
    }
}

/// Sample indices of the three partitions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn part(&self, name: &str) -> Option<&[usize]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Seeded shuffle of `0..n`, cut at `⌊0.8n⌋` and `⌊0.9n⌋`.
pub fn split_random(n: usize, seed: u64) -> Result<Split> {
    if n == 0 {
        return Err(ProtocolError::Empty);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Rng::new(seed));
    let (a, b) = (n * 8 / 10, n * 9 / 10);
    Ok(Split {
        train: order[..a].to_vec(),
        val: order[a..b].to_vec(),
        test: order[b..].to_vec(),
    })
}

/// Holds out every sample of `n_unseen` randomly chosen projects as the test
/// set; the rest is shuffled and cut 90/10 into train and validation.
pub fn split_unseen_projects<S: AsRef<str>>(projects: &[S], n_unseen: usize, seed: u64) -> Result<Split> {
    let distinct: BTreeSet<&str> = projects.iter().map(AsRef::as_ref).collect();
    if distinct.len() <= n_unseen {
        return Err(ProtocolError::TooFewProjects {
            needed: n_unseen,
            found: distinct.len(),
        });
    }
    let root = Rng::new(seed);
    let mut names: Vec<&str> = distinct.into_iter().collect();
    names.shuffle(&mut root.split(0));
    let unseen: HashSet<&str> = names[..n_unseen].iter().copied().collect();
    let (test, mut rest): (Vec<usize>, Vec<usize>) =
        (0..projects.len()).partition(|&i| unseen.contains(projects[i].as_ref()));
    rest.shuffle(&mut root.split(1));
    let cut = rest.len() * 9 / 10;
    Ok(Split {
        val: rest[cut..].to_vec(),
        train: {
            rest.truncate(cut);
            rest
        },
        test,
    })
}

/// Published partitions given by sample id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Resolves a split file against the dataset's sample ids, keeping the file's
/// order.
pub fn resolve_split_file<S: AsRef<str>>(file: &SplitFile, sample_ids: &[S]) -> Result<Split> {
    let index: HashMap<&str, usize> = sample_ids.iter().enumerate().map(|(i, s)| (s.as_ref(), i)).collect();
    let mut seen = HashSet::new();
    let mut resolve = |ids: &[String]| -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                let &i = index.get(id.as_str()).ok_or_else(|| ProtocolError::UnknownSample(id.clone()))?;
                if !seen.insert(i) {
                    return Err(ProtocolError::Overlap(id.clone()));
                }
                Ok(i)
            })
            .collect()
    };
    Ok(Split {
        train: resolve(&file.train)?,
        val: resolve(&file.val)?,
        test: resolve(&file.test)?,
    })
}

/// All synthetic samples plus a seeded sample of `⌊f·|real|⌋` real ones.
pub fn mix_synthetic_real(synthetic: &[usize], real: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(ProtocolError::BadFraction(fraction));
    }
    // The epsilon keeps fractions such as 0.29·100 from flooring to 28.
    let k = ((fraction * real.len() as f64) + 1e-9).floor() as usize;
    let mut out = synthetic.to_vec();
    out.extend(real.choose_multiple(&mut Rng::new(seed), k.min(real.len())));
    Ok(out)
}

/// Non-vulnerable to vulnerable ratio for downsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ratio {
    Finite(u32),
    All,
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::Finite(r) => write!(f, "{r}"),
            Ratio::All => f.write_str("all"),
        }
    }
}

impl std::str::FromStr for Ratio {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" | "inf" | "infinity" | "∞" => Ok(Ratio::All),
            t => t
                .trim_start_matches("1:")
                .parse::<u32>()
                .ok()
                .filter(|&r| r > 0)
                .map(Ratio::Finite)
                .ok_or_else(|| ProtocolError::BadRatio(s.to_string())),
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Ratio::Finite(r) => s.serialize_u32(*r),
            Ratio::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(0) => Err(serde::de::Error::custom("ratio must be at least 1")),
            Raw::Num(r) => Ok(Ratio::Finite(r)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Keeps every vulnerable sample and a seeded subset of at most
/// `r · n_vulnerable` non-vulnerable ones. Output follows input order.
pub fn downsample_ratio(train: &[usize], labels: &[u8], ratio: Ratio, seed: u64) -> Vec<usize> {
    let Ratio::Finite(r) = ratio else {
        return train.to_vec();
    };
    let n_vul = train.iter().filter(|&&i| labels[i] == 1).count();
    let negatives: Vec<usize> = train.iter().copied().filter(|&i| labels[i] != 1).collect();
    let keep = (r as usize).saturating_mul(n_vul).min(negatives.len());
    let kept: HashSet<usize> = negatives.choose_multiple(&mut Rng::new(seed), keep).copied().collect();
    train.iter().copied().filter(|i| labels[*i] == 1 || kept.contains(i)).collect()
}

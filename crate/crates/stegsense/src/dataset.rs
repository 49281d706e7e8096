//! Cover/stego pairing, train/val/test assignment, manifests, and per-epoch
//! batch schedules.

use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.4,
            val: 0.1,
            test: 0.5,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} ratio {v} outside [0, 1]")));
            }
        }
        if (self.train + self.val + self.test - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios sum to {}, need 1",
                self.train + self.val + self.test
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One cover image and the stego generated from it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPaths {
    pub cover: PathBuf,
    pub stego: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<PairPaths>,
    pub val: Vec<PairPaths>,
    pub test: Vec<PairPaths>,
}

impl DatasetSplit {
    pub fn part(&self, split: Split) -> &[PairPaths] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// All `.pgm` files in a directory, sorted by file name so every run sees
/// the same order regardless of directory enumeration.
pub fn list_pgms(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::io(dir.display().to_string(), e))?
            .path();
        if path.extension().is_some_and(|ext| ext == "pgm") {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "no .pgm files in {}",
            dir.display()
        )));
    }
    paths.sort();
    Ok(paths)
}

/// Index-level split assignment: shuffles 0..n with the seed and deals the
/// indices out by ratio. Counts are rounded for train and val; test takes
/// the remainder.
pub fn split_indices(
    n: usize,
    ratios: SplitRatios,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    ratios.validate()?;
    if n == 0 {
        return Err(Error::Config("no cover/stego pairs to split".into()));
    }
    if n < 10 {
        return Err(Error::Config(format!(
            "{n} pairs is too few to split (need at least 10)"
        )));
    }
    let n_train = (ratios.train * n as f64).round() as usize;
    let n_val = (ratios.val * n as f64).round() as usize;
    if n_train + n_val > n {
        return Err(Error::Config(format!(
            "rounded train {n_train} + val {n_val} exceeds {n} pairs"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed));
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok((order, val, test))
}

/// Shuffles the pairs with the seed and deals them out by ratio. Each cover
/// appears in exactly one split, so no cover identity is shared between
/// training, validation, and testing.
pub fn assign_splits(pairs: &[PairPaths], ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    let (train, val, test) = split_indices(pairs.len(), ratios, seed)?;
    let take = |idx: Vec<usize>| -> Vec<PairPaths> {
        idx.into_iter().map(|i| pairs[i].clone()).collect()
    };
    Ok(DatasetSplit {
        train: take(train),
        val: take(val),
        test: take(test),
    })
}

/// Writes `split<TAB>cover<TAB>stego` lines, train then val then test.
pub fn write_manifest(split: &DatasetSplit, path: &Path) -> Result<()> {
    let mut text = String::new();
    for (name, part) in [
        (Split::Train, &split.train),
        (Split::Val, &split.val),
        (Split::Test, &split.test),
    ] {
        for pair in part {
            text.push_str(&format!(
                "{name}\t{}\t{}\n",
                pair.cover.display(),
                pair.stego.display()
            ));
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = DatasetSplit::default();
    for (lineno, line) in text.lines().enumerate() {
        let mut fields = line.split('\t');
        let bad = |what: &str| {
            Error::Data(format!("{}:{}: {what} '{line}'", path.display(), lineno + 1))
        };
        let split = Split::parse(fields.next().unwrap_or_default())
            .map_err(|_| bad("unknown split in"))?;
        let cover = fields.next().filter(|s| !s.is_empty()).ok_or_else(|| bad("missing cover in"))?;
        let stego = fields.next().filter(|s| !s.is_empty()).ok_or_else(|| bad("missing stego in"))?;
        if fields.next().is_some() {
            return Err(bad("extra fields in"));
        }
        let pair = PairPaths {
            cover: PathBuf::from(cover),
            stego: PathBuf::from(stego),
        };
        match split {
            Split::Train => out.train.push(pair),
            Split::Val => out.val.push(pair),
            Split::Test => out.test.push(pair),
        }
    }
    Ok(out)
}

/// Per-epoch batch schedule over pair indices: a fresh seeded shuffle each
/// epoch, chunked into full batches; the leftover pairs are dropped for the
/// epoch and return after the next shuffle.
pub fn make_batches(
    n_pairs: usize,
    pairs_per_batch: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if pairs_per_batch == 0 {
        return Err(Error::Config("pairs_per_batch must be positive".into()));
    }
    if n_pairs == 0 {
        return Err(Error::Config("no training pairs".into()));
    }
    let mut order: Vec<usize> = (0..n_pairs).collect();
    order.shuffle(&mut rng::stream(rng::derive(seed, epoch as u64)));
    Ok(order
        .chunks_exact(pairs_per_batch)
        .map(<[usize]>::to_vec)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use tempfile::tempdir;

    fn pairs(n: usize) -> Vec<PairPaths> {
        (0..n)
            .map(|i| PairPaths {
                cover: PathBuf::from(format!("covers/c{i:03}.pgm")),
                stego: PathBuf::from(format!("stegos/s{i:03}.pgm")),
            })
            .collect()
    }

    #[test]
    fn default_ratios_split_ten_pairs_4_1_5() {
        let split = assign_splits(&pairs(10), SplitRatios::default(), 1).unwrap();
        assert_eq!(split.train.len(), 4);
        assert_eq!(split.val.len(), 1);
        assert_eq!(split.test.len(), 5);
    }

    #[test]
    fn covers_are_disjoint_across_splits() {
        let split = assign_splits(&pairs(37), SplitRatios::default(), 2).unwrap();
        let mut seen = HashSet::new();
        for pair in split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
        {
            assert!(seen.insert(pair.cover.clone()), "{:?} reused", pair.cover);
        }
        assert_eq!(seen.len(), 37);
    }

    #[test]
    fn split_is_seed_deterministic() {
        let a = assign_splits(&pairs(20), SplitRatios::default(), 3).unwrap();
        let b = assign_splits(&pairs(20), SplitRatios::default(), 3).unwrap();
        assert_eq!(a, b);
        let c = assign_splits(&pairs(20), SplitRatios::default(), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(assign_splits(&[], SplitRatios::default(), 0).is_err());
        assert!(assign_splits(&pairs(9), SplitRatios::default(), 0).is_err());
        let bad = SplitRatios {
            train: 0.5,
            val: 0.4,
            test: 0.3,
        };
        assert!(bad.validate().is_err());
        assert!(assign_splits(&pairs(10), bad, 0).is_err());
    }

    #[test]
    fn manifest_roundtrips_and_is_byte_deterministic() {
        let split = assign_splits(&pairs(12), SplitRatios::default(), 5).unwrap();
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("m1.tsv");
        let p2 = dir.path().join("m2.tsv");
        write_manifest(&split, &p1).unwrap();
        write_manifest(&split, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(read_manifest(&p1).unwrap(), split);
    }

    #[test]
    fn manifest_parser_rejects_malformed_lines() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        for bad in ["holdout\ta\tb\n", "train\ta\n", "train\ta\tb\tc\n", "train\t\tb\n"] {
            fs::write(&path, bad).unwrap();
            assert!(read_manifest(&path).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn batches_drop_the_short_tail_and_reshuffle_per_epoch() {
        let b0 = make_batches(40, 16, 7, 0).unwrap();
        assert_eq!(b0.len(), 2);
        assert!(b0.iter().all(|b| b.len() == 16));

        let b1 = make_batches(40, 16, 7, 1).unwrap();
        assert_ne!(b0, b1);
        let again = make_batches(40, 16, 7, 0).unwrap();
        assert_eq!(b0, again);

        let full: HashSet<usize> = make_batches(32, 16, 7, 3)
            .unwrap()
            .into_iter()
            .flatten()
            .collect();
        assert_eq!(full.len(), 32);
    }

    #[test]
    fn pgm_listing_is_sorted_and_filtered() {
        let dir = tempdir().unwrap();
        for name in ["b.pgm", "a.pgm", "notes.txt", "c.PGM"] {
            fs::write(dir.path().join(name), "x").unwrap();
        }
        let paths = list_pgms(dir.path()).unwrap();
        let names: Vec<_> = paths
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap())
            .collect();
        assert_eq!(names, ["a.pgm", "b.pgm"]);

        let empty = tempdir().unwrap();
        assert!(matches!(list_pgms(empty.path()), Err(Error::Data(_))));
        assert!(matches!(
            list_pgms(&empty.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}

//! Labelled samples and per-task splits.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// Global class identifier.
pub type ClassId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Unique within a dataset; train and test ids never overlap.
    pub id: usize,
    pub x: Vec<f64>,
    pub y: ClassId,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let ds = Self { samples };
        ds.feature_dim()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Common feature width, or an error if samples disagree.
    pub fn feature_dim(&self) -> Result<usize> {
        let Some(first) = self.samples.first() else {
            return Ok(0);
        };
        let dim = first.x.len();
        if let Some(s) = self.samples.iter().find(|s| s.x.len() != dim) {
            return Err(Error::dim(
                "dataset",
                format!("sample {} has width {}, expected {dim}", s.id, s.x.len()),
            ));
        }
        Ok(dim)
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.samples.iter().map(|s| s.y).collect()
    }

    pub fn by_class(&self) -> BTreeMap<ClassId, Vec<&Sample>> {
        let mut out: BTreeMap<ClassId, Vec<&Sample>> = BTreeMap::new();
        for s in &self.samples {
            out.entry(s.y).or_default().push(s);
        }
        out
    }

    pub fn filter_classes(&self, keep: &BTreeSet<ClassId>) -> Dataset {
        Dataset {
            samples: self.samples.iter().filter(|s| keep.contains(&s.y)).cloned().collect(),
        }
    }
}

/// Train and test halves of one labelled source.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}

impl SplitDataset {
    /// Split every class: its first `test_per_class` samples go to test, the
    /// rest to train.
    pub fn split(data: Dataset, test_per_class: usize) -> Result<Self> {
        let mut seen: BTreeMap<ClassId, usize> = BTreeMap::new();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for s in data.samples {
            let n = seen.entry(s.y).or_default();
            if *n < test_per_class {
                test.push(s);
            } else {
                train.push(s);
            }
            *n += 1;
        }
        let out = Self {
            train: Dataset::new(train)?,
            test: Dataset::new(test)?,
        };
        out.check_disjoint()?;
        Ok(out)
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        let mut c = self.train.classes();
        c.extend(self.test.classes());
        c
    }

    pub fn filter_classes(&self, keep: &BTreeSet<ClassId>) -> SplitDataset {
        SplitDataset {
            train: self.train.filter_classes(keep),
            test: self.test.filter_classes(keep),
        }
    }

    /// No sample id may appear in both halves.
    pub fn check_disjoint(&self) -> Result<()> {
        let train_ids: BTreeSet<usize> = self.train.samples.iter().map(|s| s.id).collect();
        if let Some(s) = self.test.samples.iter().find(|s| train_ids.contains(&s.id)) {
            return Err(Error::Protocol(format!("sample {} is in both train and test", s.id)));
        }
        Ok(())
    }
}

/// One step of a class-incremental stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: usize,
    pub classes: Vec<ClassId>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: usize, y: ClassId) -> Sample {
        Sample {
            id,
            x: vec![id as f64],
            y,
        }
    }

    #[test]
    fn split_takes_leading_samples_as_test() {
        let ds = Dataset::new((0..6).map(|i| sample(i, (i % 2) as ClassId)).collect()).unwrap();
        let split = SplitDataset::split(ds, 1).unwrap();
        let test_ids: Vec<usize> = split.test.samples.iter().map(|s| s.id).collect();
        assert_eq!(test_ids, vec![0, 1]);
        assert_eq!(split.train.len(), 4);
    }

    #[test]
    fn ragged_dataset_rejected() {
        let mut b = sample(1, 0);
        b.x.push(0.0);
        assert!(Dataset::new(vec![sample(0, 0), b]).is_err());
    }

    #[test]
    fn shared_ids_are_a_protocol_violation() {
        let split = SplitDataset {
            train: Dataset::new(vec![sample(3, 0)]).unwrap(),
            test: Dataset::new(vec![sample(3, 0)]).unwrap(),
        };
        assert!(matches!(split.check_disjoint(), Err(Error::Protocol(_))));
    }
}

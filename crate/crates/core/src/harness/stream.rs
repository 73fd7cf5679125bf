//! Class-incremental task streams: "Init i Inc j" partitions of a shuffled
//! class list.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ClassId, Sample, SplitDataset, Task};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    /// Classes that could not fill a whole increment.
    pub dropped: Vec<ClassId>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Task that owns `class`.
    pub fn task_of(&self, class: ClassId) -> Option<usize> {
        self.tasks.iter().position(|t| t.classes.contains(&class))
    }

    /// Disjoint class sets and no sample id shared between any train and
    /// test split.
    pub fn check(&self) -> Result<()> {
        let mut classes = BTreeSet::new();
        let mut train_ids = BTreeSet::new();
        for t in &self.tasks {
            for &c in &t.classes {
                if !classes.insert(c) {
                    return Err(Error::Protocol(format!("class {c} appears in two tasks")));
                }
            }
            train_ids.extend(t.train.iter().map(|s| s.id));
        }
        for t in &self.tasks {
            if let Some(s) = t.test.iter().find(|s| train_ids.contains(&s.id)) {
                return Err(Error::Protocol(format!("test sample {} is also a training sample", s.id)));
            }
        }
        Ok(())
    }
}

/// Shuffle the classes of `source` with `seed` and cut them into a first
/// task of `init` classes followed by tasks of `inc` classes.
pub fn make_task_stream(source: &SplitDataset, init: usize, inc: usize, seed: u64) -> Result<TaskStream> {
    if init == 0 || inc == 0 {
        return Err(Error::Config("init and inc must be positive".into()));
    }
    source.check_disjoint()?;
    let mut classes: Vec<ClassId> = source.classes().into_iter().collect();
    if init > classes.len() {
        return Err(Error::Config(format!(
            "init {init} exceeds the {} available classes",
            classes.len()
        )));
    }
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut groups = vec![classes[..init].to_vec()];
    let rest = &classes[init..];
    let full = rest.len() / inc * inc;
    groups.extend(rest[..full].chunks(inc).map(<[ClassId]>::to_vec));
    let mut dropped = rest[full..].to_vec();
    dropped.sort_unstable();
    if !dropped.is_empty() {
        log::warn!("dropping classes {dropped:?}: they do not fill an increment of {inc}");
    }

    let pick = |samples: &[Sample], keep: &[ClassId]| -> Vec<Sample> {
        samples.iter().filter(|s| keep.contains(&s.y)).cloned().collect()
    };
    let tasks = groups
        .into_iter()
        .enumerate()
        .map(|(id, mut cls)| {
            cls.sort_unstable();
            Task {
                id,
                train: pick(&source.train.samples, &cls),
                test: pick(&source.test.samples, &cls),
                classes: cls,
            }
        })
        .collect();
    let stream = TaskStream { tasks, dropped };
    stream.check()?;
    Ok(stream)
}

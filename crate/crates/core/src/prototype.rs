//! Class prototypes, feature fusion and the cosine prototype classifier.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the prompted and frozen features (or prototypes) are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, PartialOrd, Ord)]
pub enum FusionStrategy {
    #[default]
    Concatenate,
    Sum,
    Average,
    MaxPool,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::Concatenate,
        FusionStrategy::Sum,
        FusionStrategy::Average,
        FusionStrategy::MaxPool,
    ];

    pub fn fused_dim(self, d: usize) -> usize {
        match self {
            FusionStrategy::Concatenate => 2 * d,
            _ => d,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            FusionStrategy::Concatenate => 0,
            FusionStrategy::Sum => 1,
            FusionStrategy::Average => 2,
            FusionStrategy::MaxPool => 3,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.code() == code)
            .ok_or_else(|| Error::format("fusion strategy", format!("unknown code {code}")))
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "concatenate" | "concat" => Ok(FusionStrategy::Concatenate),
            "sum" => Ok(FusionStrategy::Sum),
            "average" | "avg" => Ok(FusionStrategy::Average),
            "maxpool" | "max" | "pooling" => Ok(FusionStrategy::MaxPool),
            other => Err(Error::Config(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionStrategy::Concatenate => "concatenate",
            FusionStrategy::Sum => "sum",
            FusionStrategy::Average => "average",
            FusionStrategy::MaxPool => "maxpool",
        })
    }
}

/// Mean of a class's feature vectors, summed in the given order.
pub fn class_prototype(class: ClassId, features: &[Tensor]) -> Result<Tensor> {
    let first = features.first().ok_or(Error::EmptyClass(class))?;
    let d = first.numel();
    let mut acc = vec![0.0; d];
    for f in features {
        if f.numel() != d {
            return Err(Error::dim("class_prototype", format!("width {} vs {d}", f.numel())));
        }
        for (a, &v) in acc.iter_mut().zip(f.data()) {
            *a += v;
        }
    }
    let n = features.len() as f64;
    Tensor::vector(acc.into_iter().map(|v| v / n).collect())
}

/// Combine a prompted vector `a` with a frozen-backbone vector `b`.
pub fn fuse(a: &Tensor, b: &Tensor, strategy: FusionStrategy) -> Result<Tensor> {
    if a.numel() != b.numel() {
        return Err(Error::dim("fuse", format!("{} vs {}", a.numel(), b.numel())));
    }
    let (x, y) = (a.data(), b.data());
    let data: Vec<f64> = match strategy {
        FusionStrategy::Concatenate => x.iter().chain(y).copied().collect(),
        FusionStrategy::Sum => x.iter().zip(y).map(|(p, q)| p + q).collect(),
        FusionStrategy::Average => x.iter().zip(y).map(|(p, q)| (p + q) / 2.0).collect(),
        FusionStrategy::MaxPool => x.iter().zip(y).map(|(p, q)| p.max(*q)).collect(),
    };
    Tensor::vector(data)
}

/// Cosine similarity of `h` against each prototype.
pub fn similarity_scores(h: &Tensor, prototypes: &[&Tensor]) -> Result<Vec<f64>> {
    let hn = h.norm();
    if hn == 0.0 {
        return Err(Error::ZeroNorm("feature"));
    }
    prototypes
        .iter()
        .map(|c| {
            if c.numel() != h.numel() {
                return Err(Error::dim(
                    "similarity_scores",
                    format!("feature width {} vs prototype width {}", h.numel(), c.numel()),
                ));
            }
            let cn = c.norm();
            if cn == 0.0 {
                return Err(Error::ZeroNorm("prototype"));
            }
            // Normalize first so the score is bounded by 1 up to rounding.
            let dot = h
                .data()
                .iter()
                .zip(c.data())
                .fold(0.0, |acc, (&x, &y)| acc + (x / hn) * (y / cn));
            Ok(dot.clamp(-1.0, 1.0))
        })
        .collect()
}

/// One stored class: both component prototypes and their fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeEntry {
    pub task_id: usize,
    /// Mean feature under the task's prompt.
    pub prompted: Tensor,
    /// Mean feature of the frozen backbone.
    pub frozen: Tensor,
    pub fused: Tensor,
}

impl PrototypeEntry {
    pub fn new(task_id: usize, prompted: Tensor, frozen: Tensor, fusion: FusionStrategy) -> Result<Self> {
        let fused = fuse(&prompted, &frozen, fusion)?;
        Ok(Self {
            task_id,
            prompted,
            frozen,
            fused,
        })
    }
}

/// Per-class prototypes keyed by global class id; doubles as the inference
/// classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    fusion: FusionStrategy,
    feature_dim: usize,
    entries: BTreeMap<ClassId, PrototypeEntry>,
}

impl PrototypeBank {
    pub fn new(fusion: FusionStrategy, feature_dim: usize) -> Self {
        Self {
            fusion,
            feature_dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn fusion(&self) -> FusionStrategy {
        self.fusion
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn fused_dim(&self) -> usize {
        self.fusion.fused_dim(self.feature_dim)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class: ClassId) -> Option<&PrototypeEntry> {
        self.entries.get(&class)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ClassId, &PrototypeEntry)> {
        self.entries.iter().map(|(&c, e)| (c, e))
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.entries.contains_key(&class)
    }

    pub fn tasks(&self) -> BTreeSet<usize> {
        self.entries.values().map(|e| e.task_id).collect()
    }

    /// Classes bound to `task`, ascending.
    pub fn classes_of(&self, task: usize) -> Vec<ClassId> {
        self.entries
            .iter()
            .filter(|(_, e)| e.task_id == task)
            .map(|(&c, _)| c)
            .collect()
    }

    /// Add a class. Existing classes are never overwritten and zero-norm
    /// prototypes are rejected.
    pub fn insert(&mut self, class: ClassId, entry: PrototypeEntry) -> Result<()> {
        if self.entries.contains_key(&class) {
            return Err(Error::Protocol(format!("class {class} already has a prototype")));
        }
        if entry.fused.numel() != self.fused_dim()
            || entry.prompted.numel() != self.feature_dim
            || entry.frozen.numel() != self.feature_dim
        {
            return Err(Error::dim(
                "prototype bank",
                format!("entry for class {class} does not match fused width {}", self.fused_dim()),
            ));
        }
        if entry.fused.norm() == 0.0 {
            return Err(Error::ZeroNorm("prototype"));
        }
        self.entries.insert(class, entry);
        Ok(())
    }

    /// The same component prototypes fused with another strategy.
    pub fn refused(&self, fusion: FusionStrategy) -> Result<Self> {
        let mut out = Self::new(fusion, self.feature_dim);
        for (&c, e) in &self.entries {
            out.insert(c, PrototypeEntry::new(e.task_id, e.prompted.clone(), e.frozen.clone(), fusion)?)?;
        }
        Ok(out)
    }
}

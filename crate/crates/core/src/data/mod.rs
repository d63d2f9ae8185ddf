//! Dataset loading, seeded splits, pair/triplet sampling, and the synthetic
//! road texture generator.

mod pairs;
mod synth;

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::read_image;

pub use pairs::{
    export_pairs, format_pairs, gen_diff_pairs, gen_same_pairs, pair_budget, sample_triplets,
    LabeledPair, PairBudget, Triplet,
};
pub use synth::{gen_synthetic_dataset, synth_image, SynthImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Pothole,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Normal, Label::Pothole];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Pothole => "pothole",
        }
    }

    /// Subdirectory holding this class in the dataset layout.
    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Pothole => "potholes",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "normal" => Some(Label::Normal),
            "pothole" | "potholes" => Some(Label::Pothole),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: String,
    pub label: Label,
    pub source: PathBuf,
}

/// Result of scanning a dataset directory; unreadable files are listed
/// rather than aborting the scan.
#[derive(Debug, Clone, Default)]
pub struct DatasetListing {
    pub samples: Vec<LabeledSample>,
    pub failures: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

/// Scans `root/normal/` and `root/potholes/`; ids are paths relative to
/// `root` with `/` separators, sorted.
pub fn load_dataset_directory(root: &Path) -> Result<DatasetListing> {
    let mut listing = DatasetListing::default();
    for label in Label::ALL {
        let dir = root.join(label.dir_name());
        if !dir.is_dir() {
            return Err(Error::Layout(format!(
                "missing `{}/` under {}",
                label.dir_name(),
                root.display()
            )));
        }
        let mut names = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with('.') || !entry.path().is_file() {
                continue;
            }
            names.push(name);
        }
        names.sort();
        let before = listing.samples.len();
        for name in names {
            let id = format!("{}/{name}", label.dir_name());
            let path = dir.join(&name);
            match read_image(&path) {
                Ok(_) => listing.samples.push(LabeledSample {
                    id,
                    label,
                    source: path,
                }),
                Err(e) => listing.failures.push((id, e.to_string())),
            }
        }
        if listing.samples.len() == before {
            listing
                .warnings
                .push(format!("class `{label}` has no usable images"));
        }
    }
    listing.samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(listing)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Per-class train+validation count.
    pub train_per_class: usize,
    /// Test count per class, indexed by [`Label::index`].
    pub test_counts: [usize; 2],
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_per_class: 280,
            test_counts: [72, 49],
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<LabeledSample>,
    pub validation: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub seed: u64,
}

/// Seeded per-class shuffle, then `[validation | train | test]` in that order;
/// unselected samples are left out.
pub fn split_dataset(samples: &[LabeledSample], config: &SplitConfig, seed: u64) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&config.val_fraction) {
        return Err(Error::Parameter(format!(
            "validation fraction {} outside [0,1]",
            config.val_fraction
        )));
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for label in Label::ALL {
        let mut class: Vec<&LabeledSample> = samples.iter().filter(|s| s.label == label).collect();
        class.sort_by(|a, b| a.id.cmp(&b.id));
        let needed = config.train_per_class + config.test_counts[label.index()];
        if class.len() < needed {
            return Err(Error::Count {
                class: label.to_string(),
                needed,
                available: class.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label.index() as u64);
        class.shuffle(&mut rng);
        let n_val = (config.val_fraction * config.train_per_class as f64).round() as usize;
        let (train_val, rest) = class.split_at(config.train_per_class);
        let (val, train) = train_val.split_at(n_val);
        split.validation.extend(val.iter().map(|s| (*s).clone()));
        split.train.extend(train.iter().map(|s| (*s).clone()));
        split
            .test
            .extend(rest[..config.test_counts[label.index()]].iter().map(|s| (*s).clone()));
    }
    Ok(split)
}

/// Ids per class, indexed by [`Label::index`], sorted.
pub fn group_by_class(samples: &[LabeledSample]) -> Vec<Vec<String>> {
    let mut groups = vec![Vec::new(); Label::ALL.len()];
    for s in samples {
        groups[s.label.index()].push(s.id.clone());
    }
    for g in &mut groups {
        g.sort();
    }
    groups
}

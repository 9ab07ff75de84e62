//! IQ task generation: image sources, task assembly and the dataset format.

mod format;
mod glyph;
mod idx;
mod task;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::transform::{Image, TransformError};

pub use format::{
    build_dataset, read_dataset, record_bytes, write_dataset, Dataset, DatasetConfig, DatasetManifest,
    RecordLayout, SourceConfig, SplitDescriptor, SplitSide, FORMAT_VERSION,
};
pub use glyph::gen_glyphs;
pub use idx::{load_idx, parse_idx};
pub use task::{assemble_task, IQTask, TaskSampler};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic number in {file}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { file: String, expected: u32, found: u32 },
    #[error("{file} is truncated: need {needed} bytes, have {actual}")]
    Truncated { file: String, needed: usize, actual: usize },
    #[error("count mismatch: {0}")]
    CountMismatch(String),
    #[error("need at least {needed} usable classes, source has {available}")]
    InsufficientClasses { needed: usize, available: usize },
    #[error("could not draw a distractor that differs from rule {0:?}")]
    DegenerateDistractor(crate::transform::TransformSpec),
    #[error("train and test class sets overlap on {0:?}")]
    SplitOverlap(Vec<u16>),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Images grouped by class id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageCollection {
    classes: BTreeMap<u16, Vec<Image>>,
}

impl ImageCollection {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, class: u16, img: Image) {
        self.classes.entry(class).or_default().push(img);
    }

    pub fn class_ids(&self) -> Vec<u16> {
        self.classes.keys().copied().collect()
    }

    pub fn class(&self, id: u16) -> Option<&[Image]> {
        self.classes.get(&id).map(|v| v.as_slice())
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn image_count(&self) -> usize {
        self.classes.values().map(|v| v.len()).sum()
    }

    pub fn side(&self) -> Option<usize> {
        self.classes.values().flatten().next().map(|i| i.side())
    }

    pub fn iter(&self) -> impl Iterator<Item = (u16, &[Image])> {
        self.classes.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Keeps only the listed classes.
    pub fn restrict(&self, ids: &[u16]) -> Self {
        Self {
            classes: self
                .classes
                .iter()
                .filter(|(k, _)| ids.contains(k))
                .map(|(k, v)| (*k, v.clone()))
                .collect(),
        }
    }
}

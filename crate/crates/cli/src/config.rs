//! Flags and config-file sections. Each section is one struct used both as
//! clap arguments and as the JSON shape of that section, so a flag and its
//! config key always agree. Every field is optional; `resolve` applies
//! flag > file > default.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use fine_core::model::BackboneKind;
use fine_core::transform::{Family, OodSide};
use serde::Deserialize;

fn parse_family(s: &str) -> Result<Family, String> {
    Family::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Family::ALL.iter().map(|f| f.name()).collect();
        format!("unknown family `{s}` (expected one of {})", names.join(", "))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    PaperGrid,
    Constrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SideArg {
    Train,
    Test,
}

impl From<SideArg> for OodSide {
    fn from(s: SideArg) -> Self {
        match s {
            SideArg::Train => OodSide::Train,
            SideArg::Test => OodSide::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceArg {
    Glyph,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneArg {
    Mlp,
    Nice,
}

impl From<BackboneArg> for BackboneKind {
    fn from(b: BackboneArg) -> Self {
        match b {
            BackboneArg::Mlp => BackboneKind::Mlp,
            BackboneArg::Nice => BackboneKind::Nice,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblateArg {
    QueryAsWeights,
}

/// Fills every `None` in `self` from `file`.
macro_rules! merge_fields {
    ($self:ident, $file:ident; $($f:ident),* $(,)?) => {
        Self { $($f: $self.$f.or($file.$f)),* }
    };
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateArgs {
    /// Manifest path to write; the payload goes next to it as `.bin` [required]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Transformation families, comma separated [default: translation]
    #[arg(long = "family", value_delimiter = ',', value_parser = parse_family)]
    pub families: Option<Vec<Family>>,
    /// Rule parameter sampling [default: paper-grid, or constrained when --constraint is given]
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Side of the out-of-distribution parameter split [default: none]
    #[arg(long, value_enum)]
    pub constraint: Option<SideArg>,
    /// Number of tasks [default: 1000]
    #[arg(long)]
    pub count: Option<usize>,
    /// Image side in pixels [default: 16]
    #[arg(long)]
    pub side: Option<usize>,
    /// Which object-class split the tasks use [default: train]
    #[arg(long, value_enum)]
    pub split: Option<SideArg>,
    /// Image source [default: glyph]
    #[arg(long, value_enum)]
    pub source: Option<SourceArg>,
    /// Procedural glyph classes [default: 40]
    #[arg(long)]
    pub glyph_classes: Option<usize>,
    /// Instances per glyph class [default: 4]
    #[arg(long)]
    pub glyph_per_class: Option<usize>,
    /// Seed of the glyph universe [default: the global seed]
    #[arg(long)]
    pub glyph_seed: Option<u64>,
    /// IDX image file, for --source idx [default: none]
    #[arg(long)]
    pub idx_images: Option<PathBuf>,
    /// IDX label file, for --source idx [default: none]
    #[arg(long)]
    pub idx_labels: Option<PathBuf>,
    /// Training classes, comma separated [default: lower half of the source's classes]
    #[arg(long, value_delimiter = ',')]
    pub train_classes: Option<Vec<u16>>,
    /// Test classes, comma separated [default: upper half of the source's classes]
    #[arg(long, value_delimiter = ',')]
    pub test_classes: Option<Vec<u16>>,
    /// Draw the probe from the hint's class [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub probe_same_class: Option<bool>,
}

impl GenerateArgs {
    pub fn merge(self, file: Self) -> Self {
        merge_fields!(self, file; out, families, mode, constraint, count, side, split, source,
            glyph_classes, glyph_per_class, glyph_seed, idx_images, idx_labels, train_classes,
            test_classes, probe_same_class)
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// Training dataset manifest [required]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint manifest to write [required]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-epoch loss curve CSV [default: checkpoint path with extension .loss.csv]
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Training epochs [default: 50]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training batch size [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Batch size of the final accuracy pass [default: 100]
    #[arg(long)]
    pub eval_batch_size: Option<usize>,
    /// Adam learning rate [default: 0.0003]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Global gradient-norm clipping threshold [default: 10]
    #[arg(long)]
    pub clip: Option<f64>,
    /// Backbone network [default: nice]
    #[arg(long, value_enum)]
    pub backbone: Option<BackboneArg>,
    /// NICE coupling layers [default: 4]
    #[arg(long)]
    pub layers: Option<usize>,
    /// Entries per functional memory [default: 16]
    #[arg(long)]
    pub memories: Option<usize>,
    /// Embedding size [default: 32]
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Ablation mode [default: none]
    #[arg(long, value_enum)]
    pub ablate: Option<AblateArg>,
    /// Save a checkpoint every N epochs, 0 disables [default: 0]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Directory for periodic checkpoints [default: none]
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainArgs {
    pub fn merge(self, file: Self) -> Self {
        merge_fields!(self, file; data, out, loss_csv, epochs, batch_size, eval_batch_size, lr,
            clip, backbone, layers, memories, embed_dim, ablate, checkpoint_every, checkpoint_dir)
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    /// Checkpoint manifest [required]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset manifest [required]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report CSV [default: standard output]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Evaluation batch size [default: 100]
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl EvalArgs {
    pub fn merge(self, file: Self) -> Self {
        merge_fields!(self, file; checkpoint, data, out, batch_size)
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateArgs {
    /// Training dataset manifest [required]
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    /// Test dataset manifest [required]
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Result CSV [required]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Memory sizes, 0 means query-as-weights [default: 1,16]
    #[arg(long, value_delimiter = ',')]
    pub memories: Option<Vec<usize>>,
    /// NICE coupling counts, 0 means the MLP backbone [default: 4]
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Training-set sizes [default: the whole training set]
    #[arg(long, value_delimiter = ',')]
    pub train_sizes: Option<Vec<usize>>,
    /// Seeds per cell [default: 3]
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Training epochs per cell [default: 50]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training batch size [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Evaluation batch size [default: 100]
    #[arg(long)]
    pub eval_batch_size: Option<usize>,
    /// Adam learning rate [default: 0.0003]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Global gradient-norm clipping threshold [default: 10]
    #[arg(long)]
    pub clip: Option<f64>,
    /// Embedding size [default: 32]
    #[arg(long)]
    pub embed_dim: Option<usize>,
}

impl AblateArgs {
    pub fn merge(self, file: Self) -> Self {
        merge_fields!(self, file; train_data, test_data, out, memories, layers, train_sizes,
            repeats, epochs, batch_size, eval_batch_size, lr, clip, embed_dim)
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpPhiArgs {
    /// Checkpoint manifest [required]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset manifest [required]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output file [required]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Batch size [default: 100]
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl DumpPhiArgs {
    pub fn merge(self, file: Self) -> Self {
        merge_fields!(self, file; checkpoint, data, out, batch_size)
    }
}

/// The JSON config file: a global seed plus one optional section per
/// subcommand. Unknown keys are rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub generate: GenerateArgs,
    pub train: TrainArgs,
    pub eval: EvalArgs,
    pub ablate: AblateArgs,
    pub dump_phi: DumpPhiArgs,
}

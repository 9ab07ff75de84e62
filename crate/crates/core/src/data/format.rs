//! Dataset generation and the on-disk format.
//!
//! A dataset is a JSON manifest plus a flat payload of fixed-size records:
//! seven `H×H` float32 little-endian row-major images (x, y, x′, choice0..3),
//! the answer index (u8), the rule family id (u8), six float32 rule
//! parameters (zero padded) and the hint and probe class ids (u16 LE).

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{assemble_task, gen_glyphs, load_idx, DataError, IQTask, ImageCollection, TaskSampler};
use crate::seed::{derive_seed, fnv1a64};
use crate::transform::{sample_spec, Family, Image, SampleMode, TransformSpec};

pub const FORMAT_VERSION: u32 = 1;
const IMAGES_PER_RECORD: usize = 7;
const RULE_RETRIES: usize = 16;

/// Bytes per record for images of the given side.
pub fn record_bytes(side: usize) -> usize {
    IMAGES_PER_RECORD * side * side * 4 + 1 + 1 + 6 * 4 + 2 * 2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SourceConfig {
    ProceduralGlyph {
        class_count: usize,
        per_class: usize,
        seed: u64,
    },
    MnistIdx {
        images: PathBuf,
        labels: PathBuf,
    },
}

impl SourceConfig {
    pub fn load(&self, side: usize) -> Result<ImageCollection, DataError> {
        match self {
            SourceConfig::ProceduralGlyph {
                class_count,
                per_class,
                seed,
            } => gen_glyphs(*class_count, *per_class, side, *seed),
            SourceConfig::MnistIdx { images, labels } => {
                let c = load_idx(images, labels)?;
                match c.side() {
                    Some(s) if s == side => Ok(c),
                    other => Err(DataError::Invalid(format!(
                        "idx images have side {other:?}, configured {side}"
                    ))),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSide {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub source: SourceConfig,
    pub image_side: usize,
    pub families: Vec<Family>,
    pub mode: SampleMode,
    pub task_count: usize,
    /// Which class set the tasks draw objects from.
    pub side: SplitSide,
    /// Empty lists select the lower / upper half of the source's classes.
    pub train_classes: Vec<u16>,
    pub test_classes: Vec<u16>,
    pub probe_same_class: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitDescriptor {
    pub side: SplitSide,
    pub train_classes: Vec<u16>,
    pub test_classes: Vec<u16>,
    pub rule_mode: SampleMode,
    pub probe_same_class: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordLayout {
    pub record_bytes: usize,
    pub images: Vec<String>,
    pub image_encoding: String,
    pub fields: Vec<String>,
}

impl RecordLayout {
    fn for_side(side: usize) -> Self {
        Self {
            record_bytes: record_bytes(side),
            images: ["x", "y", "x_prime", "choice0", "choice1", "choice2", "choice3"]
                .map(String::from)
                .to_vec(),
            image_encoding: format!("f32 little-endian row-major {side}x{side}"),
            fields: [
                "answer_index:u8",
                "family_id:u8",
                "params:f32le[6]",
                "hint_class:u16le",
                "probe_class:u16le",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub image_side: usize,
    pub task_count: usize,
    pub families: Vec<Family>,
    pub split: SplitDescriptor,
    pub base_seed: u64,
    pub source: SourceConfig,
    pub record_layout: RecordLayout,
    /// Payload file name, relative to the manifest.
    pub payload: String,
    /// FNV-1a 64 of the payload, hex.
    pub payload_fnv1a64: String,
}

impl DatasetManifest {
    pub fn digest(&self) -> u64 {
        u64::from_str_radix(&self.payload_fnv1a64, 16).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub tasks: Vec<IQTask>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// First `n` tasks, keeping the manifest's provenance.
    pub fn truncated(&self, n: usize) -> Dataset {
        let mut d = self.clone();
        d.tasks.truncate(n);
        d.manifest.task_count = d.tasks.len();
        d
    }
}

fn resolve_split(cfg: &DatasetConfig, ids: &[u16]) -> Result<(Vec<u16>, Vec<u16>), DataError> {
    let (train, test) = if cfg.train_classes.is_empty() && cfg.test_classes.is_empty() {
        let mid = ids.len() / 2;
        (ids[..mid].to_vec(), ids[mid..].to_vec())
    } else {
        (cfg.train_classes.clone(), cfg.test_classes.clone())
    };
    let overlap: Vec<u16> = train.iter().copied().filter(|c| test.contains(c)).collect();
    if !overlap.is_empty() {
        return Err(DataError::SplitOverlap(overlap));
    }
    if let Some(missing) = train.iter().chain(&test).find(|c| !ids.contains(c)) {
        return Err(DataError::Invalid(format!("class {missing} not present in source")));
    }
    Ok((train, test))
}

/// Generates task `index` of a split. Each index owns an independent
/// random stream, so tasks can be produced in any order.
fn generate_task(
    pool: &ImageCollection,
    cfg: &DatasetConfig,
    sampler: &TaskSampler,
    index: usize,
) -> Result<IQTask, DataError> {
    let side_tag = match cfg.side {
        SplitSide::Train => 0,
        SplitSide::Test => 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, side_tag), index as u64));
    let mut last = None;
    for _ in 0..RULE_RETRIES {
        let family = *cfg.families.choose(&mut rng).expect("checked non-empty");
        let rule = sample_spec(family, cfg.mode, cfg.image_side, &mut rng)?;
        match assemble_task(pool, &rule, sampler, &mut rng) {
            Err(e @ DataError::DegenerateDistractor(_)) => last = Some(e),
            other => return other,
        }
    }
    Err(last.expect("at least one attempt"))
}

fn encode_task(task: &IQTask, buf: &mut Vec<u8>) {
    for img in task.images() {
        for p in img.pixels() {
            buf.extend_from_slice(&p.to_le_bytes());
        }
    }
    buf.push(task.answer_index);
    buf.push(task.rule.family().id());
    for p in task.rule.encode_params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    buf.extend_from_slice(&task.hint_class.to_le_bytes());
    buf.extend_from_slice(&task.probe_class.to_le_bytes());
}

fn decode_task(rec: &[u8], side: usize) -> Result<IQTask, DataError> {
    let f32_at = |at: usize| f32::from_le_bytes([rec[at], rec[at + 1], rec[at + 2], rec[at + 3]]);
    let px = side * side;
    let mut imgs = Vec::with_capacity(IMAGES_PER_RECORD);
    for k in 0..IMAGES_PER_RECORD {
        let pixels = (0..px).map(|i| f32_at((k * px + i) * 4)).collect();
        imgs.push(Image::new(side, pixels)?);
    }
    let mut at = IMAGES_PER_RECORD * px * 4;
    let answer_index = rec[at];
    let family = Family::from_id(rec[at + 1])
        .ok_or_else(|| DataError::Invalid(format!("unknown family id {}", rec[at + 1])))?;
    at += 2;
    let mut params = [0f32; 6];
    for (k, p) in params.iter_mut().enumerate() {
        *p = f32_at(at + 4 * k);
    }
    at += 24;
    let hint_class = u16::from_le_bytes([rec[at], rec[at + 1]]);
    let probe_class = u16::from_le_bytes([rec[at + 2], rec[at + 3]]);
    if answer_index > 3 {
        return Err(DataError::Invalid(format!("answer index {answer_index}")));
    }
    let rule = TransformSpec::decode_params(family, &params)?;
    let mut it = imgs.into_iter();
    let mut next = || it.next().expect("seven images");
    let (x, y, x_prime) = (next(), next(), next());
    let choices = [next(), next(), next(), next()];
    Ok(IQTask {
        x,
        y,
        x_prime,
        choices,
        answer_index,
        rule,
        distractor_rule: None,
        hint_class,
        probe_class,
    })
}

fn payload_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Serialises tasks next to `manifest_path` and returns the final manifest.
/// The manifest's count, layout, payload name and digest are filled in here.
pub fn write_dataset(manifest_path: &Path, mut manifest: DatasetManifest, tasks: &[IQTask]) -> Result<DatasetManifest, DataError> {
    let side = manifest.image_side;
    let mut payload = Vec::with_capacity(tasks.len() * record_bytes(side));
    for t in tasks {
        if t.side() != side {
            return Err(DataError::Invalid(format!("task side {} != manifest side {side}", t.side())));
        }
        encode_task(t, &mut payload);
    }
    let bin = payload_path(manifest_path);
    manifest.format_version = FORMAT_VERSION;
    manifest.task_count = tasks.len();
    manifest.record_layout = RecordLayout::for_side(side);
    manifest.payload = bin
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    manifest.payload_fnv1a64 = format!("{:016x}", fnv1a64(&payload));
    std::fs::write(&bin, &payload).map_err(|e| DataError::io(&bin, e))?;
    let mut f = std::fs::File::create(manifest_path).map_err(|e| DataError::io(manifest_path, e))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    f.write_all(text.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| DataError::io(manifest_path, e))?;
    Ok(manifest)
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(manifest_path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| DataError::io(manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DataError::Invalid(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    let side = manifest.image_side;
    let rb = record_bytes(side);
    if manifest.record_layout.record_bytes != rb {
        return Err(DataError::Invalid(format!(
            "record_bytes {} does not match side {side}",
            manifest.record_layout.record_bytes
        )));
    }
    let bin = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.payload);
    let payload = std::fs::read(&bin).map_err(|e| DataError::io(&bin, e))?;
    if payload.len() != manifest.task_count * rb {
        return Err(DataError::CountMismatch(format!(
            "manifest declares {} records of {rb} bytes, payload has {} bytes",
            manifest.task_count,
            payload.len()
        )));
    }
    let digest = format!("{:016x}", fnv1a64(&payload));
    if digest != manifest.payload_fnv1a64 {
        return Err(DataError::Invalid(format!(
            "payload digest {digest} != manifest {}",
            manifest.payload_fnv1a64
        )));
    }
    let tasks = payload.chunks(rb).map(|rec| decode_task(rec, side)).collect::<Result<_, _>>()?;
    Ok(Dataset { manifest, tasks })
}

/// Generates a dataset split and writes it to `out_path` (manifest) plus
/// the sibling `.bin` payload.
pub fn build_dataset(cfg: &DatasetConfig, out_path: &Path) -> Result<Dataset, DataError> {
    if cfg.families.is_empty() {
        return Err(DataError::Invalid("no transformation families configured".into()));
    }
    let source = cfg.source.load(cfg.image_side)?;
    let (train, test) = resolve_split(cfg, &source.class_ids())?;
    let pool = source.restrict(match cfg.side {
        SplitSide::Train => &train,
        SplitSide::Test => &test,
    });
    let sampler = TaskSampler {
        universe: cfg.families.clone(),
        mode: cfg.mode,
        probe_same_class: cfg.probe_same_class,
    };
    let tasks = (0..cfg.task_count)
        .map(|i| generate_task(&pool, cfg, &sampler, i))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        image_side: cfg.image_side,
        task_count: tasks.len(),
        families: cfg.families.clone(),
        split: SplitDescriptor {
            side: cfg.side,
            train_classes: train,
            test_classes: test,
            rule_mode: cfg.mode,
            probe_same_class: cfg.probe_same_class,
        },
        base_seed: cfg.seed,
        source: cfg.source.clone(),
        record_layout: RecordLayout::for_side(cfg.image_side),
        payload: String::new(),
        payload_fnv1a64: String::new(),
    };
    let manifest = write_dataset(out_path, manifest, &tasks)?;
    Ok(Dataset { manifest, tasks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::OodSide;

    fn cfg(side: SplitSide) -> DatasetConfig {
        DatasetConfig {
            source: SourceConfig::ProceduralGlyph {
                class_count: 10,
                per_class: 2,
                seed: 3,
            },
            image_side: 12,
            families: vec![Family::Translation],
            mode: SampleMode::Constrained(OodSide::Train),
            task_count: 25,
            side,
            train_classes: (0..5).collect(),
            test_classes: (5..10).collect(),
            probe_same_class: false,
            seed: 17,
        }
    }

    #[test]
    fn record_size() {
        assert_eq!(record_bytes(16), 7 * 256 * 4 + 30);
    }

    #[test]
    fn split_disjointness_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let test = build_dataset(&cfg(SplitSide::Test), &dir.path().join("t.json")).unwrap();
        for t in &test.tasks {
            assert!(t.hint_class >= 5 && t.probe_class >= 5);
        }
        let mut bad = cfg(SplitSide::Train);
        bad.test_classes = vec![4, 5];
        assert!(matches!(
            build_dataset(&bad, &dir.path().join("b.json")),
            Err(DataError::SplitOverlap(v)) if v == vec![4]
        ));
    }

    #[test]
    fn constrained_translation_rules_stay_inside() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(&cfg(SplitSide::Train), &dir.path().join("d.json")).unwrap();
        let back = read_dataset(&dir.path().join("d.json")).unwrap();
        for t in &back.tasks {
            match t.rule {
                TransformSpec::Translation { dx, dy } => assert!(dx.abs() <= 3 && dy.abs() <= 3),
                ref other => panic!("{other:?}"),
            }
        }
        assert_eq!(back.manifest, ds.manifest);
    }

    #[test]
    fn payload_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        build_dataset(&cfg(SplitSide::Train), &p).unwrap();
        let bin = p.with_extension("bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes.pop();
        std::fs::write(&bin, &bytes).unwrap();
        assert!(matches!(read_dataset(&p), Err(DataError::CountMismatch(_))));
    }

    #[test]
    fn unknown_manifest_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        build_dataset(&cfg(SplitSide::Train), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, text.replacen("{", "{\"extra\": 1,", 1)).unwrap();
        assert!(matches!(read_dataset(&p), Err(DataError::Manifest(_))));
    }
}

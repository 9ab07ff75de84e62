use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::{DataError, ImageCollection};
use crate::transform::{apply_transform, sample_spec, Family, Image, SampleMode, TransformSpec};

/// Draws distractor rules at most this many times before giving up.
const DISTRACTOR_ATTEMPTS: usize = 64;

/// One four-choice task: hint pair `(x, y)`, probe `x_prime`, choices.
#[derive(Debug, Clone, PartialEq)]
pub struct IQTask {
    pub x: Image,
    pub y: Image,
    pub x_prime: Image,
    pub choices: [Image; 4],
    pub answer_index: u8,
    pub rule: TransformSpec,
    /// Not part of the on-disk record, so `None` for loaded tasks.
    pub distractor_rule: Option<TransformSpec>,
    pub hint_class: u16,
    pub probe_class: u16,
}

impl IQTask {
    pub fn side(&self) -> usize {
        self.x.side()
    }

    /// Images in record order: x, y, x′, choice0..3.
    pub fn images(&self) -> [&Image; 7] {
        [
            &self.x,
            &self.y,
            &self.x_prime,
            &self.choices[0],
            &self.choices[1],
            &self.choices[2],
            &self.choices[3],
        ]
    }

    /// Re-checks the construction contract against the stored rule.
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Invalid(m.to_string()));
        if self.answer_index > 3 {
            return bad("answer index outside 0..=3");
        }
        let side = self.side();
        if self.images().iter().any(|i| i.side() != side) {
            return bad("images differ in size");
        }
        if apply_transform(&self.x, &self.rule)? != self.y {
            return bad("y is not the rule applied to x");
        }
        let target = apply_transform(&self.x_prime, &self.rule)?;
        if self.choices[self.answer_index as usize] != target {
            return bad("answer choice is not the rule applied to x'");
        }
        if let Some(d) = &self.distractor_rule {
            if *d == self.rule {
                return bad("distractor equals rule");
            }
        }
        Ok(())
    }
}

/// Settings shared by every task drawn from one source.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSampler {
    /// Families that distractor rules are drawn from.
    pub universe: Vec<Family>,
    pub mode: SampleMode,
    /// Draw the probe from the hint's class (different instance) instead of
    /// a different class.
    pub probe_same_class: bool,
}

impl TaskSampler {
    pub fn new(universe: Vec<Family>, mode: SampleMode) -> Self {
        Self {
            universe,
            mode,
            probe_same_class: false,
        }
    }

    fn distractor_spec<R: Rng + ?Sized>(&self, side: usize, rng: &mut R) -> Result<TransformSpec, DataError> {
        let family = *self
            .universe
            .choose(rng)
            .ok_or_else(|| DataError::Invalid("empty family universe".into()))?;
        let mode = match (family, self.mode) {
            (Family::Translation | Family::Rotation | Family::Shear, m) => m,
            _ => SampleMode::PaperGrid,
        };
        Ok(sample_spec(family, mode, side, rng)?)
    }
}

fn pick_other<R: Rng + ?Sized>(ids: &[u16], avoid: &[u16], rng: &mut R) -> Option<u16> {
    let pool: Vec<u16> = ids.iter().copied().filter(|c| !avoid.contains(c)).collect();
    pool.choose(rng).copied()
}

fn pick_instance<R: Rng + ?Sized>(imgs: &[Image], avoid: Option<usize>, rng: &mut R) -> Option<usize> {
    let pool: Vec<usize> = (0..imgs.len()).filter(|&i| Some(i) != avoid).collect();
    pool.choose(rng).copied()
}

/// Assembles one task applying `rule`.
///
/// Choices cover the four categories (right object/right rule, right
/// object/wrong rule, wrong object/right rule, wrong object/wrong rule) in a
/// shuffled order.
pub fn assemble_task<R: Rng + ?Sized>(
    source: &ImageCollection,
    rule: &TransformSpec,
    sampler: &TaskSampler,
    rng: &mut R,
) -> Result<IQTask, DataError> {
    let ids: Vec<u16> = source.iter().filter(|(_, v)| !v.is_empty()).map(|(k, _)| k).collect();
    if ids.len() < 2 {
        return Err(DataError::InsufficientClasses {
            needed: 2,
            available: ids.len(),
        });
    }
    let side = source.side().expect("non-empty source");
    let insufficient = || DataError::InsufficientClasses {
        needed: 3,
        available: ids.len(),
    };

    let hint_class = *ids.choose(rng).expect("non-empty");
    let hint_imgs = source.class(hint_class).expect("listed class");
    let hint_idx = rng.random_range(0..hint_imgs.len());

    let (probe_class, probe_idx) = if sampler.probe_same_class && hint_imgs.len() > 1 {
        (hint_class, pick_instance(hint_imgs, Some(hint_idx), rng).expect("two instances"))
    } else {
        let c = pick_other(&ids, &[hint_class], rng).expect("two classes");
        (c, rng.random_range(0..source.class(c).expect("listed").len()))
    };

    // Wrong object: any class other than the probe's, never the hint image.
    let wrong_class = pick_other(&ids, &[probe_class, hint_class], rng)
        .or_else(|| pick_other(&ids, &[probe_class], rng))
        .ok_or_else(insufficient)?;
    let wrong_imgs = source.class(wrong_class).expect("listed");
    let avoid = (wrong_class == hint_class).then_some(hint_idx);
    let wrong_idx = pick_instance(wrong_imgs, avoid, rng).ok_or_else(insufficient)?;

    let x = hint_imgs[hint_idx].clone();
    let x_prime = source.class(probe_class).expect("listed")[probe_idx].clone();
    let z = wrong_imgs[wrong_idx].clone();

    let y = apply_transform(&x, rule)?;
    let right_probe = apply_transform(&x_prime, rule)?;
    let right_wrong_obj = apply_transform(&z, rule)?;

    let mut distractor = None;
    for _ in 0..DISTRACTOR_ATTEMPTS {
        let d = sampler.distractor_spec(side, rng)?;
        if d == *rule {
            continue;
        }
        let dp = apply_transform(&x_prime, &d)?;
        let dz = apply_transform(&z, &d)?;
        if dp != right_probe && dz != right_wrong_obj {
            distractor = Some((d, dp, dz));
            break;
        }
    }
    let (distractor_rule, wrong_probe, wrong_both) =
        distractor.ok_or_else(|| DataError::DegenerateDistractor(rule.clone()))?;

    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let mut categories = [Some(right_probe), Some(wrong_probe), Some(right_wrong_obj), Some(wrong_both)];
    let choices = order.map(|k| categories[k].take().expect("each category used once"));
    let answer_index = order.iter().position(|&k| k == 0).expect("category 0 present") as u8;

    Ok(IQTask {
        x,
        y,
        x_prime,
        choices,
        answer_index,
        rule: rule.clone(),
        distractor_rule: Some(distractor_rule),
        hint_class,
        probe_class,
    })
}

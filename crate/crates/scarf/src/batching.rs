//! Batch construction under modality-dropout policies.
//!
//! Three policies:
//! - `none`: every pair becomes one 6-channel paired item.
//! - `vanilla`: a dropped pair keeps one image, chosen uniformly; the other
//!   image is discarded. At ratio ρ this loses `round(ρ·n)` images.
//! - `pseudo`: a dropped pair is separated into two single-modality items
//!   that share the pair's labels, so no image is ever excluded.
//!
//! Selection is a seeded shuffle-then-prefix, reselected per epoch from a
//! derived seed, so batches replay bit-for-bit.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchmark::BBox;
use crate::error::{Result, ScarfError};
use crate::tensor::Tensor;

/// One of the two input modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "VIS")]
    Vis,
    #[serde(rename = "IR")]
    Ir,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Vis => write!(f, "VIS"),
            Modality::Ir => write!(f, "IR"),
        }
    }
}

/// A ground-truth object shared by both modality images of a pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxLabel {
    pub category: u32,
    pub bbox: BBox,
}

/// An aligned visible/infrared image pair with shared labels.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub pair_id: String,
    /// `[H, W, 3]`
    pub vis_image: Tensor,
    /// `[H, W, 3]`, same spatial size as `vis_image`
    pub ir_image: Tensor,
    pub labels: Vec<BoxLabel>,
}

impl SamplePair {
    pub fn validate(&self) -> Result<()> {
        if self.vis_image.shape() != self.ir_image.shape() {
            return Err(ScarfError::shape(
                "sample pair",
                self.vis_image.shape(),
                self.ir_image.shape(),
            ));
        }
        Ok(())
    }
}

/// Input of one training item.
#[derive(Clone, Debug)]
pub enum ItemInput {
    /// `[H, W, 6]`, visible channels first.
    Paired(Tensor),
    /// `[H, W, 3]` with its modality tag.
    Single(Modality, Tensor),
}

/// One training item; labels always equal the originating pair's labels.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub pair_id: String,
    pub input: ItemInput,
    pub labels: Vec<BoxLabel>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutMode {
    None,
    Vanilla,
    Pseudo,
}

impl std::fmt::Display for DropoutMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DropoutMode::None => write!(f, "none"),
            DropoutMode::Vanilla => write!(f, "vanilla"),
            DropoutMode::Pseudo => write!(f, "pseudo"),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DropoutPolicy {
    pub mode: DropoutMode,
    /// Fraction ρ of pairs dropped per epoch; ignored when mode is `none`.
    pub ratio: f64,
    pub seed: u64,
}

impl DropoutPolicy {
    pub fn none() -> Self {
        DropoutPolicy {
            mode: DropoutMode::None,
            ratio: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(ScarfError::Argument(format!(
                "dropout ratio {} outside [0, 1]",
                self.ratio
            )));
        }
        Ok(())
    }
}

/// Round-half-up, the rounding rule used for every dropped/kept count.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Picks exactly `round(ratio * n)` pair ids via seeded shuffle-then-prefix.
pub fn select_dropped(
    pair_ids: &[String],
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<HashSet<String>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(ScarfError::Argument(format!(
            "dropout ratio {ratio} outside [0, 1]"
        )));
    }
    let mut order: Vec<usize> = (0..pair_ids.len()).collect();
    order.shuffle(rng);
    let count = round_half_up(ratio * pair_ids.len() as f64);
    Ok(order[..count].iter().map(|&i| pair_ids[i].clone()).collect())
}

/// Concatenates the pair's images on the channel axis, visible first.
pub fn paired_input(pair: &SamplePair) -> Result<Tensor> {
    pair.validate()?;
    let shape = pair.vis_image.shape();
    let (h, w) = (shape[0], shape[1]);
    let mut data = Vec::with_capacity(h * w * 6);
    for p in 0..h * w {
        data.extend_from_slice(&pair.vis_image.data()[p * 3..(p + 1) * 3]);
        data.extend_from_slice(&pair.ir_image.data()[p * 3..(p + 1) * 3]);
    }
    Ok(Tensor::from_parts(vec![h, w, 6], data))
}

/// Builds one epoch's items from `pairs` under `policy`, consuming `rng` for
/// both the drop selection and the vanilla modality choices.
pub fn build_batch(
    pairs: &[SamplePair],
    policy: &DropoutPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BatchItem>> {
    if pairs.is_empty() {
        return Err(ScarfError::Argument("build_batch on empty pair list".into()));
    }
    policy.validate()?;
    let ids: Vec<String> = pairs.iter().map(|p| p.pair_id.clone()).collect();
    let dropped = match policy.mode {
        DropoutMode::None => HashSet::new(),
        _ => select_dropped(&ids, policy.ratio, rng)?,
    };
    let mut items = Vec::new();
    for pair in pairs {
        if !dropped.contains(&pair.pair_id) {
            items.push(BatchItem {
                pair_id: pair.pair_id.clone(),
                input: ItemInput::Paired(paired_input(pair)?),
                labels: pair.labels.clone(),
            });
            continue;
        }
        match policy.mode {
            DropoutMode::None => unreachable!("nothing dropped under none"),
            DropoutMode::Vanilla => {
                let keep = if rng.gen_bool(0.5) {
                    Modality::Vis
                } else {
                    Modality::Ir
                };
                let image = match keep {
                    Modality::Vis => pair.vis_image.clone(),
                    Modality::Ir => pair.ir_image.clone(),
                };
                items.push(BatchItem {
                    pair_id: pair.pair_id.clone(),
                    input: ItemInput::Single(keep, image),
                    labels: pair.labels.clone(),
                });
            }
            DropoutMode::Pseudo => {
                items.push(BatchItem {
                    pair_id: pair.pair_id.clone(),
                    input: ItemInput::Single(Modality::Vis, pair.vis_image.clone()),
                    labels: pair.labels.clone(),
                });
                items.push(BatchItem {
                    pair_id: pair.pair_id.clone(),
                    input: ItemInput::Single(Modality::Ir, pair.ir_image.clone()),
                    labels: pair.labels.clone(),
                });
            }
        }
    }
    Ok(items)
}

/// Per-epoch reselection: epoch `e` uses the rng seeded with
/// `policy.seed + e`.
pub fn batch_for_epoch(
    pairs: &[SamplePair],
    policy: &DropoutPolicy,
    epoch: u64,
) -> Result<Vec<BatchItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed.wrapping_add(epoch));
    build_batch(pairs, policy, &mut rng)
}

/// Exact image bookkeeping of a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ImageCounts {
    pub paired: usize,
    pub vis_single: usize,
    pub ir_single: usize,
    pub total_images: usize,
}

pub fn count_images(batch: &[BatchItem]) -> ImageCounts {
    let mut c = ImageCounts::default();
    for item in batch {
        match &item.input {
            ItemInput::Paired(_) => c.paired += 1,
            ItemInput::Single(Modality::Vis, _) => c.vis_single += 1,
            ItemInput::Single(Modality::Ir, _) => c.ir_single += 1,
        }
    }
    c.total_images = 2 * c.paired + c.vis_single + c.ir_single;
    c
}

//! Modality-incomplete test manifests and COCO-style detection evaluation.
//!
//! Manifests assign each test pair exactly one retained modality under a
//! seeded shuffle, giving the 0/30/50/70/100% visible splits. Evaluation is
//! greedy score-ordered matching with 101-point interpolated average
//! precision over IoU thresholds 0.50:0.05:0.95, averaged over categories
//! that carry ground truth. No detection cap and no area ranges.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batching::{round_half_up, Modality};
use crate::error::{Result, ScarfError};

/// Axis-aligned box `(x, y, w, h)` in pixels; serialized as a 4-array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox {
            x: v[0],
            y: v[1],
            w: v[2],
            h: v[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    pub fn validate(&self) -> Result<()> {
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(ScarfError::Validation(format!(
                "box needs positive extents, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Intersection over union; empty intersection gives 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let x1 = a.x.max(b.x);
    let y1 = a.y.max(b.y);
    let x2 = (a.x + a.w).min(b.x + b.w);
    let y2 = (a.y + a.h).min(b.y + b.h);
    if x2 <= x1 || y2 <= y1 {
        return 0.0;
    }
    let inter = (x2 - x1) * (y2 - y1);
    inter / (a.area() + b.area() - inter)
}

// ── manifests ────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub kept: Modality,
}

/// Seeded assignment of each test pair to exactly one retained modality.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MiManifest {
    pub vis_fraction: f64,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl MiManifest {
    pub fn kept_by_pair(&self) -> HashMap<&str, Modality> {
        self.entries
            .iter()
            .map(|e| (e.pair_id.as_str(), e.kept))
            .collect()
    }

    pub fn vis_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kept == Modality::Vis)
            .count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialization")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|source| ScarfError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ScarfError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ScarfError::Json {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Shuffles the pair ids with the seed, keeps VIS for the first
/// `round(vis_fraction * n)` of the shuffled order and IR for the rest, then
/// emits entries in the original id order.
pub fn generate_manifest(pair_ids: &[String], vis_fraction: f64, seed: u64) -> Result<MiManifest> {
    if !(0.0..=1.0).contains(&vis_fraction) {
        return Err(ScarfError::Argument(format!(
            "vis_fraction {vis_fraction} outside [0, 1]"
        )));
    }
    let unique: HashSet<&String> = pair_ids.iter().collect();
    if unique.len() != pair_ids.len() {
        return Err(ScarfError::Validation("duplicate pair ids".into()));
    }
    let mut order: Vec<usize> = (0..pair_ids.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let vis_count = round_half_up(vis_fraction * pair_ids.len() as f64);
    let vis_set: HashSet<usize> = order[..vis_count].iter().copied().collect();
    let entries = pair_ids
        .iter()
        .enumerate()
        .map(|(i, id)| ManifestEntry {
            pair_id: id.clone(),
            kept: if vis_set.contains(&i) {
                Modality::Vis
            } else {
                Modality::Ir
            },
        })
        .collect();
    Ok(MiManifest {
        vis_fraction,
        seed,
        entries,
    })
}

// ── detection records ────────────────────────────────────────────────

/// One scored detection. `modality` tags which input produced it; evaluation
/// against a manifest rejects detections from a discarded modality.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub category: u32,
    pub bbox: BBox,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: String,
    pub category: u32,
    pub bbox: BBox,
}

/// Ground-truth file contents: category ids, image ids, annotations.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub categories: Vec<u32>,
    pub images: Vec<String>,
    pub annotations: Vec<GroundTruthBox>,
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|source| ScarfError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ScarfError::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn save_detections(dets: &[Detection], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(dets).expect("detection serialization");
    std::fs::write(path, text).map_err(|source| ScarfError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    let text = std::fs::read_to_string(path).map_err(|source| ScarfError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ScarfError::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn save_ground_truth(gt: &GroundTruth, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(gt).expect("ground truth serialization");
    std::fs::write(path, text).map_err(|source| ScarfError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ── matching and average precision ───────────────────────────────────

/// The ten COCO IoU thresholds 0.50:0.05:0.95, built from integer percents.
pub fn iou_thresholds() -> Vec<f64> {
    (50..=95).step_by(5).map(|p| p as f64 / 100.0).collect()
}

/// Greedy one-image, one-category matching: detections must arrive sorted by
/// descending score (ties already resolved by input order); each detection
/// takes the unmatched ground truth of highest IoU if that IoU reaches the
/// threshold. Returns a TP flag per detection.
pub fn match_detections(dets: &[&Detection], gts: &[&GroundTruthBox], iou_thr: f64) -> Vec<bool> {
    debug_assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for det in dets {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let overlap = iou(&det.bbox, &gt.bbox);
            let better = match best {
                Some((_, b)) => overlap > b,
                None => true,
            };
            if better {
                best = Some((gi, overlap));
            }
        }
        match best {
            Some((gi, overlap)) if overlap >= iou_thr => {
                taken[gi] = true;
                flags.push(true);
            }
            _ => flags.push(false),
        }
    }
    flags
}

/// 101-point interpolated AP from pooled `(score, input order, tp)` records.
fn ap_101(records: &mut Vec<(f64, usize, bool)>, num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    records.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    let mut precisions = Vec::with_capacity(records.len());
    let mut recalls = Vec::with_capacity(records.len());
    let mut tp = 0usize;
    for (i, rec) in records.iter().enumerate() {
        if rec.2 {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / num_gt as f64);
    }
    // Monotone envelope from the right.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut total = 0.0;
    for j in 0..=100 {
        let r = j as f64 / 100.0;
        // First index whose recall reaches r; envelope precision there.
        let p = match recalls.iter().position(|&rec| rec >= r) {
            Some(i) => precisions[i],
            None => 0.0,
        };
        total += p;
    }
    total / 101.0
}

/// Evaluation output: mAP over IoU thresholds 0.50–0.95, AP at 0.50 / 0.75,
/// and per-category AP50.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalResult {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_category_ap50: BTreeMap<u32, f64>,
}

/// COCO-style evaluation over all images present in the ground truth.
pub fn evaluate(dets: &[Detection], gt: &GroundTruth) -> Result<EvalResult> {
    evaluate_on(dets, gt, None)
}

fn evaluate_on(
    dets: &[Detection],
    gt: &GroundTruth,
    image_filter: Option<&HashSet<&str>>,
) -> Result<EvalResult> {
    let categories: HashSet<u32> = gt.categories.iter().copied().collect();
    for det in dets {
        if !categories.contains(&det.category) {
            return Err(ScarfError::Validation(format!(
                "detection on image {} has unknown category {}",
                det.image_id, det.category
            )));
        }
        det.bbox.validate()?;
    }
    let keep_image =
        |id: &str| -> bool { image_filter.map(|f| f.contains(id)).unwrap_or(true) };

    // Group per (category, image); BTreeMap keeps merge order deterministic.
    let mut gts_by: BTreeMap<(u32, &str), Vec<&GroundTruthBox>> = BTreeMap::new();
    for ann in &gt.annotations {
        if keep_image(&ann.image_id) {
            gts_by
                .entry((ann.category, ann.image_id.as_str()))
                .or_default()
                .push(ann);
        }
    }
    let mut dets_by: BTreeMap<(u32, &str), Vec<(usize, &Detection)>> = BTreeMap::new();
    for (idx, det) in dets.iter().enumerate() {
        if keep_image(&det.image_id) {
            dets_by
                .entry((det.category, det.image_id.as_str()))
                .or_default()
                .push((idx, det));
        }
    }
    // Score-descending order with input-order tie break, per image.
    for group in dets_by.values_mut() {
        group.sort_by(|a, b| {
            b.1.score
                .partial_cmp(&a.1.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
    }

    let thresholds = iou_thresholds();
    let mut per_category_ap50 = BTreeMap::new();
    let mut maps = Vec::new();
    let mut ap50s = Vec::new();
    let mut ap75s = Vec::new();
    let mut sorted_categories = gt.categories.clone();
    sorted_categories.sort_unstable();
    sorted_categories.dedup();
    for &cat in &sorted_categories {
        let num_gt: usize = gts_by
            .iter()
            .filter(|((c, _), _)| *c == cat)
            .map(|(_, v)| v.len())
            .sum();
        if num_gt == 0 {
            // No ground truth for this category in the evaluated image set;
            // it contributes nothing to the mean (COCO convention).
            continue;
        }
        let mut aps = Vec::with_capacity(thresholds.len());
        for &thr in &thresholds {
            let mut pooled: Vec<(f64, usize, bool)> = Vec::new();
            for ((c, image), group) in &dets_by {
                if *c != cat {
                    continue;
                }
                let refs: Vec<&Detection> = group.iter().map(|(_, d)| *d).collect();
                let empty = Vec::new();
                let gts = gts_by.get(&(cat, *image)).unwrap_or(&empty);
                let flags = match_detections(&refs, gts, thr);
                for ((idx, det), tp) in group.iter().zip(flags) {
                    pooled.push((det.score, *idx, tp));
                }
            }
            aps.push(ap_101(&mut pooled, num_gt));
        }
        let cat_map = aps.iter().sum::<f64>() / aps.len() as f64;
        maps.push(cat_map);
        ap50s.push(aps[0]);
        ap75s.push(aps[5]);
        per_category_ap50.insert(cat, aps[0]);
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(EvalResult {
        map: mean(&maps),
        ap50: mean(&ap50s),
        ap75: mean(&ap75s),
        per_category_ap50,
    })
}

/// Evaluation restricted to a manifest's retained-modality image set. Each
/// detection must resolve to a manifest pair, and a detection tagged with a
/// modality the manifest discarded is a validation error (the model must not
/// have seen that image).
pub fn evaluate_split(
    dets: &[Detection],
    gt: &GroundTruth,
    manifest: &MiManifest,
) -> Result<EvalResult> {
    let kept = manifest.kept_by_pair();
    for det in dets {
        match kept.get(det.image_id.as_str()) {
            None => {
                return Err(ScarfError::Validation(format!(
                    "detection image {} not in manifest",
                    det.image_id
                )))
            }
            Some(&keep) => {
                if let Some(m) = det.modality {
                    if m != keep {
                        return Err(ScarfError::Validation(format!(
                            "detection on image {} comes from discarded modality {m} (manifest keeps {keep})",
                            det.image_id
                        )));
                    }
                }
            }
        }
    }
    let images: HashSet<&str> = kept.keys().copied().collect();
    evaluate_on(dets, gt, Some(&images))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(image: &str, score: f64, bbox: BBox) -> Detection {
        Detection {
            image_id: image.into(),
            category: 0,
            bbox,
            score,
            modality: None,
        }
    }

    fn gtb(image: &str, bbox: BBox) -> GroundTruthBox {
        GroundTruthBox {
            image_id: image.into(),
            category: 0,
            bbox,
        }
    }

    fn gt_of(annotations: Vec<GroundTruthBox>) -> GroundTruth {
        let mut images: Vec<String> = annotations.iter().map(|a| a.image_id.clone()).collect();
        images.sort();
        images.dedup();
        GroundTruth {
            categories: vec![0],
            images,
            annotations,
        }
    }

    #[test]
    fn iou_basic_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        let disjoint = BBox::new(5.0, 5.0, 2.0, 2.0);
        assert_eq!(iou(&a, &disjoint), 0.0);
        let b = BBox::new(1.0, 1.0, 2.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn manifest_split_sizes_and_boundaries() {
        let ids: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        let m = generate_manifest(&ids, 0.3, 7).unwrap();
        assert_eq!(m.vis_count(), 3);
        assert_eq!(m.entries.len(), 10);
        let all_ir = generate_manifest(&ids, 0.0, 7).unwrap();
        assert_eq!(all_ir.vis_count(), 0);
        let all_vis = generate_manifest(&ids, 1.0, 7).unwrap();
        assert_eq!(all_vis.vis_count(), 10);
    }

    #[test]
    fn manifest_rejects_duplicates() {
        let ids = vec!["a".to_string(), "a".to_string()];
        assert!(generate_manifest(&ids, 0.5, 0).is_err());
    }

    #[test]
    fn manifest_replay_is_byte_identical() {
        let ids: Vec<String> = (0..25).map(|i| format!("p{i}")).collect();
        let a = generate_manifest(&ids, 0.5, 3).unwrap().to_json();
        let b = generate_manifest(&ids, 0.5, 3).unwrap().to_json();
        assert_eq!(a, b);
        let c = generate_manifest(&ids, 0.5, 4).unwrap().to_json();
        assert_ne!(a, c);
    }

    #[test]
    fn matching_single_detection() {
        let d = det("i", 0.9, BBox::new(0.0, 0.0, 2.0, 2.0));
        let g = gtb("i", BBox::new(0.0, 0.0, 2.0, 2.0));
        assert_eq!(match_detections(&[&d], &[&g], 0.5), vec![true]);
    }

    #[test]
    fn matching_one_gt_two_detections() {
        let d1 = det("i", 0.9, BBox::new(0.0, 0.0, 2.0, 2.0));
        let d2 = det("i", 0.5, BBox::new(0.1, 0.0, 2.0, 2.0));
        let g = gtb("i", BBox::new(0.0, 0.0, 2.0, 2.0));
        assert_eq!(match_detections(&[&d1, &d2], &[&g], 0.5), vec![true, false]);
    }

    #[test]
    fn perfect_detections_score_one() {
        let gts = vec![
            gtb("a", BBox::new(0.0, 0.0, 4.0, 4.0)),
            gtb("a", BBox::new(10.0, 10.0, 4.0, 4.0)),
            gtb("b", BBox::new(2.0, 2.0, 6.0, 3.0)),
        ];
        let dets: Vec<Detection> = gts
            .iter()
            .map(|g| det(&g.image_id, 0.9, g.bbox))
            .collect();
        let result = evaluate(&dets, &gt_of(gts)).unwrap();
        assert_eq!(result.map, 1.0);
        assert_eq!(result.ap50, 1.0);
        assert_eq!(result.ap75, 1.0);
    }

    #[test]
    fn single_detection_at_iou_point_six_gives_map_030() {
        // (0,0,10,10) vs (2.5,0,10,10): intersection 75, union 125, IoU 0.6.
        let g = gtb("i", BBox::new(0.0, 0.0, 10.0, 10.0));
        let d = det("i", 0.8, BBox::new(2.5, 0.0, 10.0, 10.0));
        let result = evaluate(&[d], &gt_of(vec![g])).unwrap();
        assert!((result.map - 0.30).abs() < 1e-12, "mAP {}", result.map);
        assert_eq!(result.ap50, 1.0);
        assert_eq!(result.ap75, 0.0);
    }

    #[test]
    fn zero_detections_score_zero() {
        let g = gtb("i", BBox::new(0.0, 0.0, 2.0, 2.0));
        let result = evaluate(&[], &gt_of(vec![g])).unwrap();
        assert_eq!(result.map, 0.0);
    }

    #[test]
    fn unknown_category_is_rejected() {
        let g = gtb("i", BBox::new(0.0, 0.0, 2.0, 2.0));
        let mut d = det("i", 0.8, BBox::new(0.0, 0.0, 2.0, 2.0));
        d.category = 9;
        assert!(evaluate(&[d], &gt_of(vec![g])).is_err());
    }

    #[test]
    fn split_rejects_unknown_image_and_discarded_modality() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let manifest = generate_manifest(&ids, 1.0, 0).unwrap(); // all VIS
        let g = gtb("a", BBox::new(0.0, 0.0, 2.0, 2.0));
        let gt = gt_of(vec![g]);

        let stray = det("zz", 0.9, BBox::new(0.0, 0.0, 2.0, 2.0));
        assert!(evaluate_split(&[stray], &gt, &manifest).is_err());

        let mut wrong = det("a", 0.9, BBox::new(0.0, 0.0, 2.0, 2.0));
        wrong.modality = Some(Modality::Ir);
        assert!(evaluate_split(&[wrong], &gt, &manifest).is_err());

        let mut fine = det("a", 0.9, BBox::new(0.0, 0.0, 2.0, 2.0));
        fine.modality = Some(Modality::Vis);
        let result = evaluate_split(&[fine], &gt, &manifest).unwrap();
        assert_eq!(result.map, 1.0);
    }

    #[test]
    fn full_vis_split_equals_direct_evaluation() {
        let gts = vec![
            gtb("a", BBox::new(0.0, 0.0, 4.0, 4.0)),
            gtb("b", BBox::new(1.0, 1.0, 5.0, 5.0)),
        ];
        let dets = vec![
            det("a", 0.9, BBox::new(0.2, 0.0, 4.0, 4.0)),
            det("b", 0.7, BBox::new(1.0, 1.2, 5.0, 5.0)),
        ];
        let gt = gt_of(gts);
        let ids = vec!["a".to_string(), "b".to_string()];
        let manifest = generate_manifest(&ids, 1.0, 5).unwrap();
        let direct = evaluate(&dets, &gt).unwrap();
        let split = evaluate_split(&dets, &gt, &manifest).unwrap();
        assert_eq!(direct.map, split.map);
        assert_eq!(direct.ap50, split.ap50);
    }

    #[test]
    fn empty_detection_set_on_split_is_zero() {
        let ids = vec!["a".to_string()];
        let manifest = generate_manifest(&ids, 0.0, 1).unwrap();
        let gt = gt_of(vec![gtb("a", BBox::new(0.0, 0.0, 2.0, 2.0))]);
        let result = evaluate_split(&[], &gt, &manifest).unwrap();
        assert_eq!(result.map, 0.0);
    }
}

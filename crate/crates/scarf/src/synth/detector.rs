//! Toy two-modality detector: shared 1×1 stem, single-scale Scarf Neck,
//! dense per-cell head.
//!
//! The head emits, per cell and class, an objectness logit and four box
//! values `(dx, dy, w, h) / BOX_SCALE`, where `(dx, dy)` displace the cell
//! center `(col + 0.5, row + 0.5)` to the box center in pixels.
//!
//! Loss, exactly: mean binary cross-entropy over all cells on objectness
//! (a cell is positive iff its center lies inside a ground-truth box of the
//! class; with several containing boxes the smallest area wins, ties by
//! label order) plus `box_loss_weight` times the mean absolute error of the
//! four box values at positive cells.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batching::{BatchItem, BoxLabel, ItemInput, Modality, SamplePair};
use crate::benchmark::{BBox, Detection, GroundTruth, GroundTruthBox};
use crate::error::{Result, ScarfError};
use crate::neck::{neck_forward, FeatureBundle, ScarfNeckConfig, ScarfNeckParams};
use crate::params::{LinearParams, ParamGroup, Parameter};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Normalization constant for the head's box values.
pub const BOX_SCALE: f64 = 16.0;

/// Model and decoding configuration of the toy detector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyConfig {
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
    pub blocks: usize,
    pub ffn_ratio: usize,
    pub double_sampling: bool,
    pub num_classes: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub box_loss_weight: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            channels: 8,
            heads: 2,
            points: 2,
            blocks: 2,
            ffn_ratio: 2,
            double_sampling: true,
            num_classes: 1,
            score_threshold: 0.5,
            nms_iou: 0.5,
            box_loss_weight: 2.0,
        }
    }
}

impl ToyConfig {
    pub fn neck_config(&self) -> ScarfNeckConfig {
        let mut cfg =
            ScarfNeckConfig::single_scale(self.channels, self.heads, self.points, self.blocks);
        cfg.ffn_ratio = self.ffn_ratio;
        cfg.double_sampling = self.double_sampling;
        cfg
    }

    pub fn head_channels(&self) -> usize {
        5 * self.num_classes
    }
}

/// Stem (3 -> c, shared by both modalities), neck, head (c -> 5 per class).
#[derive(Debug)]
pub struct ToyDetectorParams {
    pub stem: LinearParams,
    pub neck: ScarfNeckParams,
    pub head: LinearParams,
}

impl ToyDetectorParams {
    pub fn init(cfg: &ToyConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(ToyDetectorParams {
            stem: LinearParams::init("stem", 3, cfg.channels, rng),
            neck: ScarfNeckParams::init("neck", &cfg.neck_config(), rng)?,
            head: LinearParams::init("head", cfg.channels, cfg.head_channels(), rng),
        })
    }
}

impl ParamGroup for ToyDetectorParams {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.stem.visit(f);
        self.neck.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.stem.visit_mut(f);
        self.neck.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Runs the full stack on one item. Paired items split their six channels
/// into the two modality images and take the complete path; single items
/// take the incomplete path.
pub fn forward_detector(
    tape: &mut Tape,
    item: &BatchItem,
    params: &ToyDetectorParams,
    cfg: &ToyConfig,
) -> Result<Var> {
    let neck_cfg = cfg.neck_config();
    let bundle = match &item.input {
        ItemInput::Paired(six) => {
            let input = tape.leaf(six.clone());
            let vis = tape.narrow(input, 2, 0, 3)?;
            let ir = tape.narrow(input, 2, 3, 3)?;
            let vis = params.stem.apply_conv1x1(tape, vis)?;
            let ir = params.stem.apply_conv1x1(tape, ir)?;
            FeatureBundle::new(Some(vis), Some(ir), 0)
        }
        ItemInput::Single(modality, image) => {
            let input = tape.leaf(image.clone());
            let feat = params.stem.apply_conv1x1(tape, input)?;
            match modality {
                Modality::Vis => FeatureBundle::new(Some(feat), None, 0),
                Modality::Ir => FeatureBundle::new(None, Some(feat), 0),
            }
        }
    };
    let fused = neck_forward(tape, &[bundle], &params.neck, &neck_cfg)?;
    params.head.apply_conv1x1(tape, fused[0])
}

/// Per-class positive mask and box targets for an `h x w` grid.
fn build_targets(
    h: usize,
    w: usize,
    labels: &[BoxLabel],
    class: u32,
) -> (Tensor, Tensor, Tensor) {
    let l = h * w;
    let mut mask = vec![0.0; l];
    let mut mask4 = vec![0.0; l * 4];
    let mut targets = vec![0.0; l * 4];
    for row in 0..h {
        for col in 0..w {
            let (cx, cy) = (col as f64 + 0.5, row as f64 + 0.5);
            let mut best: Option<&BoxLabel> = None;
            for label in labels.iter().filter(|b| b.category == class) {
                if label.bbox.contains(cx, cy) {
                    let smaller = match best {
                        Some(b) => label.bbox.area() < b.bbox.area(),
                        None => true,
                    };
                    if smaller {
                        best = Some(label);
                    }
                }
            }
            if let Some(label) = best {
                let q = row * w + col;
                mask[q] = 1.0;
                let b = label.bbox;
                let t = [
                    (b.x + b.w / 2.0 - cx) / BOX_SCALE,
                    (b.y + b.h / 2.0 - cy) / BOX_SCALE,
                    b.w / BOX_SCALE,
                    b.h / BOX_SCALE,
                ];
                for (i, v) in t.into_iter().enumerate() {
                    targets[q * 4 + i] = v;
                    mask4[q * 4 + i] = 1.0;
                }
            }
        }
    }
    (
        Tensor::from_parts(vec![l], mask),
        Tensor::from_parts(vec![l, 4], targets),
        Tensor::from_parts(vec![l, 4], mask4),
    )
}

/// Scalar training loss of one head map against the item labels.
pub fn detection_loss(
    tape: &mut Tape,
    head: Var,
    labels: &[BoxLabel],
    cfg: &ToyConfig,
) -> Result<Var> {
    let shape = tape.shape(head).to_vec();
    if shape.len() != 3 || shape[2] != cfg.head_channels() {
        return Err(ScarfError::shape(
            "detection_loss",
            &shape,
            &[0, 0, cfg.head_channels()],
        ));
    }
    let (h, w) = (shape[0], shape[1]);
    let l = h * w;
    let mut total: Option<Var> = None;
    for class in 0..cfg.num_classes {
        let (mask, targets, mask4) = build_targets(h, w, labels, class as u32);
        let base = class * 5;
        let logits = tape.narrow(head, 2, base, 1)?;
        let logits = tape.reshape(logits, vec![l])?;
        let boxes = tape.narrow(head, 2, base + 1, 4)?;
        let boxes = tape.reshape(boxes, vec![l, 4])?;
        let bce = tape.bce_with_logits(logits, &mask)?;
        let l1 = tape.l1_masked(boxes, &targets, &mask4)?;
        let weighted = tape.scale(l1, cfg.box_loss_weight)?;
        let class_loss = tape.add(bce, weighted)?;
        total = Some(match total {
            Some(t) => tape.add(t, class_loss)?,
            None => class_loss,
        });
    }
    total.ok_or_else(|| ScarfError::Argument("detector needs at least one class".into()))
}

/// Greedy non-maximum suppression by descending score; candidates already in
/// that order. Boxes overlapping a kept box with IoU strictly above the
/// threshold are suppressed.
fn nms(candidates: &[(f64, BBox)], nms_iou: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (i, (_, bbox)) in candidates.iter().enumerate() {
        if kept
            .iter()
            .all(|&k| crate::benchmark::iou(bbox, &candidates[k].1) <= nms_iou)
        {
            kept.push(i);
        }
    }
    kept
}

/// Decodes a head map into detections: sigmoid scores past the threshold,
/// boxes clipped to the image, greedy NMS per class.
pub fn decode(
    head: &Tensor,
    image_id: &str,
    modality: Option<Modality>,
    cfg: &ToyConfig,
) -> Result<Vec<Detection>> {
    if !(0.0 < cfg.score_threshold && cfg.score_threshold < 1.0) {
        return Err(ScarfError::Argument(format!(
            "score threshold {} outside (0, 1)",
            cfg.score_threshold
        )));
    }
    if !(0.0 < cfg.nms_iou && cfg.nms_iou < 1.0) {
        return Err(ScarfError::Argument(format!(
            "nms iou {} outside (0, 1)",
            cfg.nms_iou
        )));
    }
    let shape = head.shape();
    let (h, w) = (shape[0], shape[1]);
    let mut detections = Vec::new();
    for class in 0..cfg.num_classes {
        let base = class * 5;
        let mut candidates: Vec<(f64, BBox)> = Vec::new();
        for row in 0..h {
            for col in 0..w {
                let score = crate::tape::sigmoid(head.get(&[row, col, base]));
                if score < cfg.score_threshold {
                    continue;
                }
                let dx = head.get(&[row, col, base + 1]) * BOX_SCALE;
                let dy = head.get(&[row, col, base + 2]) * BOX_SCALE;
                let bw = head.get(&[row, col, base + 3]) * BOX_SCALE;
                let bh = head.get(&[row, col, base + 4]) * BOX_SCALE;
                let cx = col as f64 + 0.5 + dx;
                let cy = row as f64 + 0.5 + dy;
                let x0 = (cx - bw / 2.0).max(0.0);
                let y0 = (cy - bh / 2.0).max(0.0);
                let x1 = (cx + bw / 2.0).min(w as f64);
                let y1 = (cy + bh / 2.0).min(h as f64);
                if x1 - x0 <= 0.0 || y1 - y0 <= 0.0 {
                    continue;
                }
                candidates.push((score, BBox::new(x0, y0, x1 - x0, y1 - y0)));
            }
        }
        candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        for idx in nms(&candidates, cfg.nms_iou) {
            detections.push(Detection {
                image_id: image_id.to_string(),
                category: class as u32,
                bbox: candidates[idx].1,
                score: candidates[idx].0,
                modality,
            });
        }
    }
    Ok(detections)
}

/// Ground truth of a pair list, for the evaluator.
pub fn ground_truth_of(pairs: &[SamplePair], num_classes: usize) -> GroundTruth {
    GroundTruth {
        categories: (0..num_classes as u32).collect(),
        images: pairs.iter().map(|p| p.pair_id.clone()).collect(),
        annotations: pairs
            .iter()
            .flat_map(|p| {
                p.labels.iter().map(|l| GroundTruthBox {
                    image_id: p.pair_id.clone(),
                    category: l.category,
                    bbox: l.bbox,
                })
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ToyConfig {
        ToyConfig {
            channels: 4,
            heads: 1,
            points: 1,
            blocks: 1,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn forward_output_matches_grid_shape() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = ToyDetectorParams::init(&cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let item = BatchItem {
            pair_id: "p".into(),
            input: ItemInput::Single(Modality::Vis, Tensor::full(&[6, 5, 3], 0.2)),
            labels: vec![],
        };
        let head = forward_detector(&mut tape, &item, &params, &cfg).unwrap();
        assert_eq!(tape.shape(head), &[6, 5, 5]);
    }

    #[test]
    fn positive_cells_follow_box_centers() {
        let labels = vec![BoxLabel {
            category: 0,
            bbox: BBox::new(1.0, 1.0, 2.0, 2.0),
        }];
        let (mask, targets, _) = build_targets(4, 4, &labels, 0);
        // centers at (1.5,1.5), (2.5,1.5), (1.5,2.5), (2.5,2.5) are inside
        let expect = [(1usize, 1usize), (1, 2), (2, 1), (2, 2)];
        for row in 0..4 {
            for col in 0..4 {
                let positive = mask.data()[row * 4 + col] == 1.0;
                assert_eq!(positive, expect.contains(&(row, col)), "({row},{col})");
            }
        }
        // Target at (1,1): box center (2,2), cell center (1.5,1.5).
        let q = 4 + 1;
        assert!((targets.data()[q * 4] - 0.5 / BOX_SCALE).abs() < 1e-12);
        assert!((targets.data()[q * 4 + 2] - 2.0 / BOX_SCALE).abs() < 1e-12);
    }

    #[test]
    fn perfect_head_map_drives_loss_to_zero() {
        let cfg = small_cfg();
        let labels = vec![BoxLabel {
            category: 0,
            bbox: BBox::new(0.0, 0.0, 2.0, 2.0),
        }];
        let (mask, targets, _) = build_targets(3, 3, &labels, 0);
        // logits +-20 at the right cells, box values exactly on target
        let mut head = vec![0.0; 9 * 5];
        for q in 0..9 {
            head[q * 5] = if mask.data()[q] == 1.0 { 20.0 } else { -20.0 };
            for i in 0..4 {
                head[q * 5 + 1 + i] = targets.data()[q * 4 + i];
            }
        }
        let mut tape = Tape::new();
        let head = tape.leaf(Tensor::from_parts(vec![3, 3, 5], head));
        let loss = detection_loss(&mut tape, head, &labels, &cfg).unwrap();
        assert!(tape.value(loss).item() < 1e-6);
    }

    #[test]
    fn empty_ground_truth_leaves_pure_negative_bce() {
        let cfg = small_cfg();
        let mut tape = Tape::new();
        let head = tape.leaf(Tensor::zeros(&[3, 3, 5]));
        let loss = detection_loss(&mut tape, head, &[], &cfg).unwrap();
        // BCE of logit 0 against target 0 is ln 2; the L1 term is empty.
        assert!((tape.value(loss).item() - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_cell_by_cell_reference() {
        let cfg = small_cfg();
        let labels = vec![BoxLabel {
            category: 0,
            bbox: BBox::new(1.0, 0.0, 3.0, 4.0),
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head_t = crate::tensor::uniform(&[4, 4, 5], 1.0, &mut rng);
        let mut tape = Tape::new();
        let head = tape.leaf(head_t.clone());
        let loss = detection_loss(&mut tape, head, &labels, &cfg).unwrap();

        // Scalar reference computed cell by cell.
        let (mask, targets, _) = build_targets(4, 4, &labels, 0);
        let mut bce = 0.0;
        let mut l1 = 0.0;
        let mut positives: f64 = 0.0;
        for q in 0..16 {
            let z: f64 = head_t.data()[q * 5];
            let y = mask.data()[q];
            bce += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            if y == 1.0 {
                positives += 4.0;
                for i in 0..4 {
                    l1 += (head_t.data()[q * 5 + 1 + i] - targets.data()[q * 4 + i]).abs();
                }
            }
        }
        let expected = bce / 16.0 + cfg.box_loss_weight * l1 / positives.max(1.0);
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn decode_empty_on_low_logits() {
        let cfg = small_cfg();
        let head = Tensor::full(&[4, 4, 5], -30.0);
        let dets = decode(&head, "img", None, &cfg).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn decode_single_positive_cell() {
        let cfg = small_cfg();
        let mut data = vec![-30.0; 4 * 4 * 5];
        // cell (1, 2): center (2.5, 1.5); dx=dy=0, w=h=2
        let q = (4 + 2) * 5;
        data[q] = 10.0;
        data[q + 1] = 0.0;
        data[q + 2] = 0.0;
        data[q + 3] = 2.0 / BOX_SCALE;
        data[q + 4] = 2.0 / BOX_SCALE;
        let head = Tensor::from_parts(vec![4, 4, 5], data);
        let dets = decode(&head, "img", Some(Modality::Ir), &cfg).unwrap();
        assert_eq!(dets.len(), 1);
        let b = dets[0].bbox;
        assert!((b.x - 1.5).abs() < 1e-12 && (b.y - 0.5).abs() < 1e-12);
        assert!((b.w - 2.0).abs() < 1e-12 && (b.h - 2.0).abs() < 1e-12);
        assert_eq!(dets[0].modality, Some(Modality::Ir));
    }

    #[test]
    fn nms_suppresses_lower_scored_overlap() {
        let cfg = small_cfg();
        let mut data = vec![-30.0; 4 * 4 * 5];
        // two adjacent cells predicting nearly the same large box
        for (row, col, logit) in [(1usize, 1usize, 8.0), (1, 2, 4.0)] {
            let q = (row * 4 + col) * 5;
            data[q] = logit;
            let cx = 2.0 - (col as f64 + 0.5);
            data[q + 1] = cx / BOX_SCALE; // shift both centers to x=2
            data[q + 2] = (2.0 - (row as f64 + 0.5)) / BOX_SCALE;
            data[q + 3] = 3.0 / BOX_SCALE;
            data[q + 4] = 3.0 / BOX_SCALE;
        }
        let head = Tensor::from_parts(vec![4, 4, 5], data);
        let dets = decode(&head, "img", None, &cfg).unwrap();
        assert_eq!(dets.len(), 1);
        assert!(dets[0].score > 0.9);
    }
}

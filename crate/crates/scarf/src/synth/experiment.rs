//! Training loop and robustness experiments over dropout policies.
//!
//! One experiment trains one model per dropout policy (none / vanilla /
//! pseudo at the configured ratio) on identical scenes and identical
//! initialization, then scores every model on the complete split, both
//! single-modality splits, and the mixed modality-incomplete manifests. The
//! single-modality splits are additionally re-scored with double sampling
//! disabled, which is the inference-side ablation of the incomplete path.
//!
//! All randomness derives from `ExperimentConfig::seed`:
//! data = seed, test data = seed + 1, init = seed + 1000,
//! dropout = seed + 2000, shuffle = seed + 3000 + epoch,
//! manifests = seed + 4000 (+ 100·fraction).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batching::{
    batch_for_epoch, paired_input, BatchItem, DropoutMode, DropoutPolicy, ItemInput, Modality,
    SamplePair,
};
use crate::benchmark::{
    evaluate, evaluate_split, generate_manifest, Detection, EvalResult, GroundTruth, MiManifest,
};
use crate::error::{Result, ScarfError};
use crate::params::{zero_grads, Adam};
use crate::synth::detector::{
    decode, detection_loss, forward_detector, ground_truth_of, ToyConfig, ToyDetectorParams,
};
use crate::synth::scene::{generate_pairs, SceneSpec};
use crate::tape::Tape;

pub const SPLIT_COMPLETE: &str = "complete";
pub const SPLIT_VIS_ONLY: &str = "vis_only";
pub const SPLIT_IR_ONLY: &str = "ir_only";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 5e-3,
        }
    }
}

/// Everything one experiment run depends on; echoed verbatim into the report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scene: SceneSpec,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub model: ToyConfig,
    pub train: TrainConfig,
    /// Ratio used by the vanilla and pseudo arms.
    pub dropout_ratio: f64,
    /// Visible fractions of the mixed modality-incomplete splits.
    pub mixed_fractions: Vec<f64>,
    /// Master seed; all other seeds derive from it.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scene: SceneSpec::default(),
            train_scenes: 200,
            test_scenes: 100,
            model: ToyConfig::default(),
            train: TrainConfig::default(),
            dropout_ratio: 0.6,
            mixed_fractions: vec![0.3, 0.5, 0.7],
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn data_seed(&self) -> u64 {
        self.seed
    }
    pub fn test_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }
    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(1000)
    }
    pub fn dropout_seed(&self) -> u64 {
        self.seed.wrapping_add(2000)
    }
    pub fn shuffle_seed(&self) -> u64 {
        self.seed.wrapping_add(3000)
    }
    pub fn manifest_seed(&self) -> u64 {
        self.seed.wrapping_add(4000)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.train_scenes == 0 || self.test_scenes == 0 {
            return Err(ScarfError::Argument("scene counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_ratio) {
            return Err(ScarfError::Argument(format!(
                "dropout ratio {} outside [0, 1]",
                self.dropout_ratio
            )));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(ScarfError::Argument("epochs and batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn policy(&self, mode: DropoutMode) -> DropoutPolicy {
        DropoutPolicy {
            mode,
            ratio: match mode {
                DropoutMode::None => 0.0,
                _ => self.dropout_ratio,
            },
            seed: self.dropout_seed(),
        }
    }
}

/// The modality whose images cover more objects under the scene spec.
/// Coverage of VIS is `p_both + p_vis_only`; ties count IR as dominant.
pub fn dominant_modality(scene: &SceneSpec) -> Modality {
    let vis_cover = scene.p_both + scene.p_vis_only;
    let ir_cover = scene.p_both + scene.p_ir_only;
    if ir_cover >= vis_cover {
        Modality::Ir
    } else {
        Modality::Vis
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean item loss per optimizer step.
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Trains in place: per epoch, rebuild the batch under the policy, shuffle,
/// and take one Adam step per minibatch of mean loss. A non-finite loss
/// aborts with a diagnostic error.
pub fn train_detector(
    params: &mut ToyDetectorParams,
    pairs: &[SamplePair],
    policy: &DropoutPolicy,
    train: &TrainConfig,
    model: &ToyConfig,
    shuffle_seed: u64,
) -> Result<TrainLog> {
    let mut opt = Adam::new(train.learning_rate);
    let mut losses = Vec::new();
    for epoch in 0..train.epochs {
        let mut items = batch_for_epoch(pairs, policy, epoch as u64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed.wrapping_add(epoch as u64));
        items.shuffle(&mut rng);
        for chunk in items.chunks(train.batch_size) {
            zero_grads(params);
            let mut chunk_loss = 0.0;
            for item in chunk {
                let mut tape = Tape::new();
                let head = forward_detector(&mut tape, item, params, model)?;
                let loss = detection_loss(&mut tape, head, &item.labels, model)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(ScarfError::Validation(format!(
                        "training diverged: non-finite loss at epoch {epoch} on pair {}",
                        item.pair_id
                    )));
                }
                chunk_loss += value;
                let scaled = tape.scale(loss, 1.0 / chunk.len() as f64)?;
                tape.backward_into(scaled, params)?;
            }
            opt.step(params);
            losses.push(chunk_loss / chunk.len() as f64);
        }
    }
    Ok(TrainLog { losses })
}

fn detect_item(
    params: &ToyDetectorParams,
    model: &ToyConfig,
    item: &BatchItem,
    modality: Option<Modality>,
) -> Result<Vec<Detection>> {
    let mut tape = Tape::new();
    let head = forward_detector(&mut tape, item, params, model)?;
    decode(tape.value(head), &item.pair_id, modality, model)
}

/// Detections of the complete (paired) path over all pairs.
pub fn detect_complete(
    params: &ToyDetectorParams,
    model: &ToyConfig,
    pairs: &[SamplePair],
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for pair in pairs {
        let item = BatchItem {
            pair_id: pair.pair_id.clone(),
            input: ItemInput::Paired(paired_input(pair)?),
            labels: pair.labels.clone(),
        };
        out.extend(detect_item(params, model, &item, None)?);
    }
    Ok(out)
}

/// Detections under a manifest: each pair contributes only its retained
/// modality, run through the incomplete path and tagged accordingly.
pub fn detect_with_manifest(
    params: &ToyDetectorParams,
    model: &ToyConfig,
    pairs: &[SamplePair],
    manifest: &MiManifest,
) -> Result<Vec<Detection>> {
    let kept = manifest.kept_by_pair();
    let mut out = Vec::new();
    for pair in pairs {
        let Some(&modality) = kept.get(pair.pair_id.as_str()) else {
            return Err(ScarfError::Validation(format!(
                "pair {} missing from manifest",
                pair.pair_id
            )));
        };
        let image = match modality {
            Modality::Vis => pair.vis_image.clone(),
            Modality::Ir => pair.ir_image.clone(),
        };
        let item = BatchItem {
            pair_id: pair.pair_id.clone(),
            input: ItemInput::Single(modality, image),
            labels: pair.labels.clone(),
        };
        out.extend(detect_item(params, model, &item, Some(modality))?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
}

impl From<&EvalResult> for SplitMetrics {
    fn from(r: &EvalResult) -> Self {
        SplitMetrics {
            map: r.map,
            ap50: r.ap50,
            ap75: r.ap75,
        }
    }
}

/// Name of a mixed split, e.g. `mi_030` for 30% visible.
pub fn mixed_split_name(fraction: f64) -> String {
    format!("mi_{:03}", (fraction * 100.0).round() as u32)
}

/// All splits scored for one trained model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSuite {
    pub metrics: BTreeMap<String, SplitMetrics>,
    /// vis_only / ir_only re-scored with double sampling disabled.
    pub single_sampling: BTreeMap<String, SplitMetrics>,
}

/// Scores a model on complete, VIS-only, IR-only, and every configured mixed
/// split, plus the single-sampling variants of the single-modality splits.
pub fn evaluate_model(
    params: &ToyDetectorParams,
    config: &ExperimentConfig,
    test_pairs: &[SamplePair],
    gt: &GroundTruth,
) -> Result<EvalSuite> {
    let ids: Vec<String> = test_pairs.iter().map(|p| p.pair_id.clone()).collect();
    let model = &config.model;
    let mut metrics = BTreeMap::new();

    let complete = detect_complete(params, model, test_pairs)?;
    metrics.insert(
        SPLIT_COMPLETE.to_string(),
        SplitMetrics::from(&evaluate(&complete, gt)?),
    );

    let mut single_manifests: Vec<(String, MiManifest)> = vec![
        (
            SPLIT_VIS_ONLY.to_string(),
            generate_manifest(&ids, 1.0, config.manifest_seed())?,
        ),
        (
            SPLIT_IR_ONLY.to_string(),
            generate_manifest(&ids, 0.0, config.manifest_seed())?,
        ),
    ];
    for &f in &config.mixed_fractions {
        let seed = config
            .manifest_seed()
            .wrapping_add((f * 100.0).round() as u64);
        single_manifests.push((mixed_split_name(f), generate_manifest(&ids, f, seed)?));
    }
    for (name, manifest) in &single_manifests {
        let dets = detect_with_manifest(params, model, test_pairs, manifest)?;
        let result = evaluate_split(&dets, gt, manifest)?;
        metrics.insert(name.clone(), SplitMetrics::from(&result));
    }

    // Inference-side double-sampling ablation on the single-modality splits.
    let mut off_model = model.clone();
    off_model.double_sampling = false;
    let mut single_sampling = BTreeMap::new();
    for (name, manifest) in single_manifests.iter().take(2) {
        let dets = detect_with_manifest(params, &off_model, test_pairs, manifest)?;
        let result = evaluate_split(&dets, gt, manifest)?;
        single_sampling.insert(name.clone(), SplitMetrics::from(&result));
    }
    Ok(EvalSuite {
        metrics,
        single_sampling,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmReport {
    pub label: String,
    pub policy: DropoutPolicy,
    /// `None` means the arm trained and evaluated; `Some` carries the
    /// divergence diagnostic.
    pub failure: Option<String>,
    pub final_loss: Option<f64>,
    #[serde(default)]
    pub metrics: BTreeMap<String, SplitMetrics>,
    #[serde(default)]
    pub single_sampling: BTreeMap<String, SplitMetrics>,
    /// mAP difference to the no-dropout arm, per split.
    #[serde(default)]
    pub map_delta_vs_none: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub dominant_modality: Modality,
    pub arms: Vec<ArmReport>,
}

impl ExperimentReport {
    pub fn arm(&self, label: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.label == label)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

/// Trains one model per policy (none, vanilla, pseudo) on identical data and
/// initialization, evaluates each on every split, and reports per-policy
/// deltas against the no-dropout arm. A diverged arm is reported with its
/// diagnostic while the remaining arms continue.
pub fn run_robustness_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let train_pairs = generate_pairs(&config.scene, config.train_scenes, config.data_seed())?;
    let test_pairs = generate_pairs(&config.scene, config.test_scenes, config.test_seed())?;
    let gt = ground_truth_of(&test_pairs, config.model.num_classes);

    let arms = [
        ("none", DropoutMode::None),
        ("vanilla", DropoutMode::Vanilla),
        ("pseudo", DropoutMode::Pseudo),
    ];
    let mut reports = Vec::new();
    for (label, mode) in arms {
        let policy = config.policy(mode);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed());
        let mut params = ToyDetectorParams::init(&config.model, &mut rng)?;
        let outcome = train_detector(
            &mut params,
            &train_pairs,
            &policy,
            &config.train,
            &config.model,
            config.shuffle_seed(),
        );
        let report = match outcome {
            Err(e) => ArmReport {
                label: label.to_string(),
                policy,
                failure: Some(e.to_string()),
                final_loss: None,
                metrics: BTreeMap::new(),
                single_sampling: BTreeMap::new(),
                map_delta_vs_none: BTreeMap::new(),
            },
            Ok(log) => {
                let suite = evaluate_model(&params, config, &test_pairs, &gt)?;
                ArmReport {
                    label: label.to_string(),
                    policy,
                    failure: None,
                    final_loss: log.final_loss(),
                    metrics: suite.metrics,
                    single_sampling: suite.single_sampling,
                    map_delta_vs_none: BTreeMap::new(),
                }
            }
        };
        reports.push(report);
    }

    let baseline = reports
        .iter()
        .find(|a| a.label == "none" && a.failure.is_none())
        .map(|a| a.metrics.clone());
    if let Some(base) = baseline {
        for arm in reports.iter_mut() {
            for (split, m) in &arm.metrics {
                if let Some(b) = base.get(split) {
                    arm.map_delta_vs_none.insert(split.clone(), m.map - b.map);
                }
            }
        }
    }

    Ok(ExperimentReport {
        config: config.clone(),
        dominant_modality: dominant_modality(&config.scene),
        arms: reports,
    })
}

/// Renders the report as a fixed-width text table of mAP per split, with the
/// delta-to-baseline block underneath.
pub fn experiment_table(report: &ExperimentReport) -> String {
    let splits: Vec<String> = report
        .arms
        .iter()
        .find(|a| a.failure.is_none())
        .map(|a| a.metrics.keys().cloned().collect())
        .unwrap_or_default();
    let mut out = String::new();
    out.push_str(&format!("dominant modality: {}\n", report.dominant_modality));
    out.push_str(&format!("{:<12}", "policy"));
    for s in &splits {
        out.push_str(&format!("{s:>10}"));
    }
    out.push('\n');
    for arm in &report.arms {
        out.push_str(&format!("{:<12}", arm.label));
        match &arm.failure {
            Some(diag) => out.push_str(&format!("  FAILED: {diag}")),
            None => {
                for s in &splits {
                    out.push_str(&format!("{:>10.3}", arm.metrics[s].map));
                }
            }
        }
        out.push('\n');
    }
    out.push_str("\nmAP delta vs none:\n");
    for arm in &report.arms {
        if arm.label == "none" || arm.failure.is_some() {
            continue;
        }
        out.push_str(&format!("{:<12}", arm.label));
        for s in &splits {
            match arm.map_delta_vs_none.get(s) {
                Some(d) => out.push_str(&format!("{d:>+10.3}")),
                None => out.push_str(&format!("{:>10}", "-")),
            }
        }
        out.push('\n');
    }
    out.push_str("\nsingle-modality mAP with double sampling off (same weights):\n");
    for arm in &report.arms {
        if arm.failure.is_some() {
            continue;
        }
        out.push_str(&format!("{:<12}", arm.label));
        for s in [SPLIT_VIS_ONLY, SPLIT_IR_ONLY] {
            match arm.single_sampling.get(s) {
                Some(m) => out.push_str(&format!("{:>10.3}", m.map)),
                None => out.push_str(&format!("{:>10}", "-")),
            }
        }
        out.push('\n');
    }
    out
}

// ── ablations ────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub metrics: BTreeMap<String, SplitMetrics>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: String,
    pub config: ExperimentConfig,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    pub fn table(&self) -> String {
        let splits: Vec<String> = self
            .rows
            .first()
            .map(|r| r.metrics.keys().cloned().collect())
            .unwrap_or_default();
        let mut out = String::new();
        out.push_str(&format!("axis: {}\n{:<22}", self.axis, "setting"));
        for s in &splits {
            out.push_str(&format!("{s:>10}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:<22}", row.label));
            for s in &splits {
                out.push_str(&format!("{:>10.3}", row.metrics[s].map));
            }
            out.push('\n');
        }
        out
    }
}

fn core_splits(suite: &EvalSuite) -> BTreeMap<String, SplitMetrics> {
    suite
        .metrics
        .iter()
        .filter(|(k, _)| {
            k.as_str() == SPLIT_COMPLETE || k.as_str() == SPLIT_VIS_ONLY || k.as_str() == SPLIT_IR_ONLY
        })
        .map(|(k, v)| (k.clone(), *v))
        .collect()
}

fn train_and_score(
    config: &ExperimentConfig,
    mode: DropoutMode,
    train_pairs: &[SamplePair],
    test_pairs: &[SamplePair],
    gt: &GroundTruth,
) -> Result<BTreeMap<String, SplitMetrics>> {
    let policy = config.policy(mode);
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed());
    let mut params = ToyDetectorParams::init(&config.model, &mut rng)?;
    train_detector(
        &mut params,
        train_pairs,
        &policy,
        &config.train,
        &config.model,
        config.shuffle_seed(),
    )?;
    let suite = evaluate_model(&params, config, test_pairs, gt)?;
    Ok(core_splits(&suite))
}

fn experiment_data(
    config: &ExperimentConfig,
) -> Result<(Vec<SamplePair>, Vec<SamplePair>, GroundTruth)> {
    let train_pairs = generate_pairs(&config.scene, config.train_scenes, config.data_seed())?;
    let test_pairs = generate_pairs(&config.scene, config.test_scenes, config.test_seed())?;
    let gt = ground_truth_of(&test_pairs, config.model.num_classes);
    Ok((train_pairs, test_pairs, gt))
}

/// Sweeps the number of Scarf Blocks with the pseudo policy.
pub fn ablate_blocks(config: &ExperimentConfig, blocks: &[usize]) -> Result<AblationReport> {
    config.validate()?;
    let (train_pairs, test_pairs, gt) = experiment_data(config)?;
    let mut rows = Vec::new();
    for &b in blocks {
        let mut cfg = config.clone();
        cfg.model.blocks = b;
        let metrics = train_and_score(&cfg, DropoutMode::Pseudo, &train_pairs, &test_pairs, &gt)?;
        rows.push(AblationRow {
            label: format!("blocks={b}"),
            metrics,
        });
    }
    Ok(AblationReport {
        axis: "blocks".into(),
        config: config.clone(),
        rows,
    })
}

/// Sweeps the dropout ratio; each non-zero ratio trains both a vanilla and a
/// pseudo arm so the pseudo gain is visible per ratio.
pub fn ablate_ratio(config: &ExperimentConfig, ratios: &[f64]) -> Result<AblationReport> {
    config.validate()?;
    let (train_pairs, test_pairs, gt) = experiment_data(config)?;
    let mut rows = Vec::new();
    for &ratio in ratios {
        let mut cfg = config.clone();
        cfg.dropout_ratio = ratio;
        if ratio == 0.0 {
            let metrics = train_and_score(&cfg, DropoutMode::None, &train_pairs, &test_pairs, &gt)?;
            rows.push(AblationRow {
                label: "ratio=0%".into(),
                metrics,
            });
            continue;
        }
        for mode in [DropoutMode::Vanilla, DropoutMode::Pseudo] {
            let metrics = train_and_score(&cfg, mode, &train_pairs, &test_pairs, &gt)?;
            rows.push(AblationRow {
                label: format!("ratio={:.0}% {}", ratio * 100.0, mode),
                metrics,
            });
        }
    }
    Ok(AblationReport {
        axis: "ratio".into(),
        config: config.clone(),
        rows,
    })
}

/// Trains with double sampling on and off (the toggle applies to every
/// incomplete-path forward, in training and evaluation alike).
pub fn ablate_double_sampling(config: &ExperimentConfig) -> Result<AblationReport> {
    config.validate()?;
    let (train_pairs, test_pairs, gt) = experiment_data(config)?;
    let mut rows = Vec::new();
    for on in [true, false] {
        let mut cfg = config.clone();
        cfg.model.double_sampling = on;
        let metrics = train_and_score(&cfg, DropoutMode::Pseudo, &train_pairs, &test_pairs, &gt)?;
        rows.push(AblationRow {
            label: format!("double_sampling={}", if on { "on" } else { "off" }),
            metrics,
        });
    }
    Ok(AblationReport {
        axis: "double".into(),
        config: config.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            scene: SceneSpec {
                height: 8,
                width: 8,
                min_objects: 1,
                max_objects: 2,
                min_size: 2,
                max_size: 4,
                ..SceneSpec::default()
            },
            train_scenes: 6,
            test_scenes: 4,
            model: ToyConfig {
                channels: 4,
                heads: 1,
                points: 1,
                blocks: 1,
                ..ToyConfig::default()
            },
            train: TrainConfig {
                epochs: 2,
                batch_size: 3,
                learning_rate: 5e-3,
            },
            dropout_ratio: 0.5,
            mixed_fractions: vec![0.5],
            seed: 17,
        }
    }

    #[test]
    fn training_is_deterministic_over_first_steps() {
        let cfg = tiny_config();
        let pairs = generate_pairs(&cfg.scene, cfg.train_scenes, cfg.data_seed()).unwrap();
        let policy = cfg.policy(DropoutMode::Pseudo);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed());
            let mut params = ToyDetectorParams::init(&cfg.model, &mut rng).unwrap();
            train_detector(
                &mut params,
                &pairs,
                &policy,
                &cfg.train,
                &cfg.model,
                cfg.shuffle_seed(),
            )
            .unwrap()
            .losses
        };
        let a = run();
        let b = run();
        assert!(a.len() >= 4);
        for (x, y) in a.iter().zip(&b).take(10) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn pseudo_arm_sees_all_images_every_epoch() {
        let cfg = tiny_config();
        let pairs = generate_pairs(&cfg.scene, 10, 3).unwrap();
        let policy = DropoutPolicy {
            mode: DropoutMode::Pseudo,
            ratio: 0.6,
            seed: 9,
        };
        for epoch in 0..5 {
            let batch = batch_for_epoch(&pairs, &policy, epoch).unwrap();
            let c = crate::batching::count_images(&batch);
            assert_eq!(c.total_images, 20);
        }
        let vanilla = DropoutPolicy {
            mode: DropoutMode::Vanilla,
            ratio: 0.6,
            seed: 9,
        };
        for epoch in 0..5 {
            let batch = batch_for_epoch(&pairs, &vanilla, epoch).unwrap();
            let c = crate::batching::count_images(&batch);
            assert_eq!(c.total_images, 20 - 6);
        }
    }

    #[test]
    fn experiment_report_covers_all_arms_and_splits() {
        let cfg = tiny_config();
        let report = run_robustness_experiment(&cfg).unwrap();
        assert_eq!(report.arms.len(), 3);
        for arm in &report.arms {
            assert!(arm.failure.is_none(), "{:?}", arm.failure);
            for split in [SPLIT_COMPLETE, SPLIT_VIS_ONLY, SPLIT_IR_ONLY, "mi_050"] {
                assert!(arm.metrics.contains_key(split), "missing {split}");
            }
            assert!(arm.single_sampling.contains_key(SPLIT_VIS_ONLY));
        }
        // Deltas exist for the non-baseline arms.
        assert!(!report.arm("pseudo").unwrap().map_delta_vs_none.is_empty());
        let rendered = experiment_table(&report);
        assert!(rendered.contains("pseudo"));
        let json = report.to_json();
        assert!(json.contains("dominant_modality"));
    }
}

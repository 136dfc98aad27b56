//! Dataset assembly, the SGD training loop, batched prediction,
//! checkpoints, and single ablation-cell runs.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::det::boxes::DetectionBox;
use crate::det::eval::{evaluate_map, EvalResult};
use crate::det::model::{assign_targets, detection_loss, ArchConfig, Detector};
use crate::det::sgd::{sgd_step, SgdState, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{GradStore, ParamStore};
use crate::parallel::map_indexed;
use crate::sim::{degrade_scenes, generate_scenes, split_seed, OpticalParams, SceneItem, SceneSpec};
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Desk-scale split sizes.
pub const TRAIN_COUNT: usize = 256;
pub const VAL_COUNT: usize = 36;
pub const TEST_COUNT: usize = 72;

/// Score floor when collecting predictions for mAP (low, so the PR curve
/// is swept) and the suppression threshold used everywhere.
pub const EVAL_SCORE_THRESH: f64 = 0.05;
pub const EVAL_NMS_THRESH: f64 = 0.45;
/// Match threshold for mAP@0.5.
pub const MAP_IOU_THRESH: f64 = 0.5;

/// Stream tag mixed into the seed for epoch shuffling, so shuffle order
/// is decoupled from weight init and scene content.
const SHUFFLE_STREAM: u64 = 0x54C8;

pub struct DatasetSplits {
    pub train: Vec<SceneItem>,
    pub val: Vec<SceneItem>,
    pub test: Vec<SceneItem>,
}

impl DatasetSplits {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Generate `train + val + test` scenes from one root seed and split them
/// contiguously; optionally push every image through the water model.
pub fn build_dataset(
    spec: &SceneSpec,
    optics: Option<&OpticalParams>,
    seed: u64,
    counts: (usize, usize, usize),
) -> Result<DatasetSplits> {
    let (n_train, n_val, n_test) = counts;
    let mut items = generate_scenes(spec, n_train + n_val + n_test, seed)?;
    if let Some(params) = optics {
        items = degrade_scenes(&items, params)?;
    }
    let test = items.split_off(n_train + n_val);
    let val = items.split_off(n_train);
    Ok(DatasetSplits {
        train: items,
        val,
        test,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub obj_loss: f64,
    pub box_loss: f64,
    pub val_map50: f64,
}

pub struct TrainOutcome {
    pub log: Vec<EpochRow>,
    pub final_val_map50: f64,
}

/// Minibatch SGD over the train split; gradients are averaged over the
/// batch. Validation mAP is computed after every epoch.
pub fn train_detector(
    ps: &mut ParamStore,
    det: &Detector,
    data: &DatasetSplits,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Training("empty train split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, SHUFFLE_STREAM));
    let mut state = SgdState::new(ps);
    let targets: Vec<_> = data
        .train
        .iter()
        .map(|item| assign_targets(&item.boxes, item.image.height()))
        .collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_obj = 0.0;
        let mut epoch_box = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut gs = GradStore::zeros_like(ps);
            let inv = 1.0 / batch.len() as f64;
            for &idx in batch {
                let item = &data.train[idx];
                let (heads, cache) = det.forward(ps, &item.image)?;
                let (loss, head_grads) = detection_loss(&heads, &targets[idx])?;
                epoch_loss += loss.total;
                epoch_obj += loss.obj;
                epoch_box += loss.boxes;
                let scaled: std::collections::BTreeMap<usize, Tensor> = head_grads
                    .into_iter()
                    .map(|(level, g)| (level, g.scale(inv)))
                    .collect();
                det.backward(ps, &cache, &scaled, &mut gs)?;
            }
            sgd_step(ps, &gs, &mut state, cfg)?;
        }
        let n = data.train.len() as f64;
        let val_map50 = if data.val.is_empty() {
            0.0
        } else {
            evaluate_detector(ps, det, &data.val)?.map50
        };
        log.push(EpochRow {
            epoch,
            train_loss: epoch_loss / n,
            obj_loss: epoch_obj / n,
            box_loss: epoch_box / n,
            val_map50,
        });
    }
    let final_val_map50 = log.last().map(|r| r.val_map50).unwrap_or(0.0);
    Ok(TrainOutcome {
        log,
        final_val_map50,
    })
}

/// Per-image predictions, in item order.
pub fn predictions_for(
    ps: &ParamStore,
    det: &Detector,
    items: &[SceneItem],
) -> Result<Vec<Vec<DetectionBox>>> {
    map_indexed(items.len(), |i| {
        det.predict(ps, &items[i].image, EVAL_SCORE_THRESH, EVAL_NMS_THRESH)
    })
    .into_iter()
    .collect()
}

pub fn evaluate_detector(
    ps: &ParamStore,
    det: &Detector,
    items: &[SceneItem],
) -> Result<EvalResult> {
    let preds = predictions_for(ps, det, items)?;
    let gts: Vec<_> = items.iter().map(|item| item.boxes.clone()).collect();
    evaluate_map(&preds, &gts, MAP_IOU_THRESH)
}

/// Checkpoint layout: `checkpoint.json` (architecture, train config, epoch,
/// parameter names in registration order) next to `weights.fsnt` (all
/// parameter scalars concatenated in that same order).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub tensors: Vec<String>,
}

pub fn save_checkpoint(
    dir: &Path,
    arch: &ArchConfig,
    train: &TrainConfig,
    epoch: usize,
    ps: &ParamStore,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let ids: Vec<_> = ps.ids().collect();
    let meta = CheckpointMeta {
        arch: arch.clone(),
        train: train.clone(),
        epoch,
        tensors: ids.iter().map(|&id| ps.name(id).to_string()).collect(),
    };
    fs::write(
        dir.join("checkpoint.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    let mut flat = Vec::with_capacity(ps.scalar_count());
    for &id in &ids {
        flat.extend_from_slice(ps.get(id).data());
    }
    let n = flat.len();
    let tensor = Tensor::from_vec([1, 1, 1, n], flat)?;
    let mut w = BufWriter::new(fs::File::create(dir.join("weights.fsnt"))?);
    write_tensor(&mut w, &tensor)
}

/// Rebuild the detector from a checkpoint directory and load its weights.
pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointMeta, ParamStore, Detector)> {
    let meta: CheckpointMeta =
        serde_json::from_str(&fs::read_to_string(dir.join("checkpoint.json"))?)?;
    let mut ps = ParamStore::new(meta.train.seed);
    let det = Detector::new(&mut ps, &meta.arch)?;
    let ids: Vec<_> = ps.ids().collect();
    if ids.len() != meta.tensors.len() {
        return Err(Error::Parse(format!(
            "checkpoint lists {} tensors, architecture has {}",
            meta.tensors.len(),
            ids.len()
        )));
    }
    for (&id, recorded) in ids.iter().zip(&meta.tensors) {
        if ps.name(id) != recorded {
            return Err(Error::Parse(format!(
                "checkpoint tensor {recorded:?} does not match parameter {:?}",
                ps.name(id)
            )));
        }
    }
    let mut r = BufReader::new(fs::File::open(dir.join("weights.fsnt"))?);
    let flat = read_tensor(&mut r)?;
    if flat.numel() != ps.scalar_count() {
        return Err(Error::Dimension(format!(
            "checkpoint holds {} scalars, architecture wants {}",
            flat.numel(),
            ps.scalar_count()
        )));
    }
    let mut offset = 0;
    for &id in &ids {
        let n = ps.get(id).numel();
        ps.get_mut(id)
            .data_mut()
            .copy_from_slice(&flat.data()[offset..offset + n]);
        offset += n;
    }
    Ok((meta, ps, det))
}

/// One row of the ablation table.
#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub label: String,
    pub map50: f64,
    pub params: usize,
    pub latency_ms: f64,
}

/// Train one architecture on the given data and score it on the test
/// split. Latency is the wall-clock time of a single-image predict, so it
/// varies run to run; everything else in the row is deterministic.
pub fn run_cell(
    arch: &ArchConfig,
    data: &DatasetSplits,
    cfg: &TrainConfig,
) -> Result<AblationCell> {
    let mut ps = ParamStore::new(cfg.seed);
    let det = Detector::new(&mut ps, arch)?;
    train_detector(&mut ps, &det, data, cfg)?;
    let result = evaluate_detector(&ps, &det, &data.test)?;
    let probe = data
        .test
        .first()
        .or(data.train.first())
        .ok_or_else(|| Error::Training("no image available for latency probe".into()))?;
    let start = Instant::now();
    det.predict(&ps, &probe.image, EVAL_SCORE_THRESH, EVAL_NMS_THRESH)?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(AblationCell {
        label: arch.label(),
        map50: result.map50,
        params: ps.scalar_count(),
        latency_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_spec() -> SceneSpec {
        SceneSpec {
            size: 64,
            fish_min: 1,
            fish_max: 2,
            fish_len: (16.0, 28.0),
            ..SceneSpec::default()
        }
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn dataset_split_sizes_and_determinism() {
        let spec = tiny_spec();
        let a = build_dataset(&spec, None, 42, (6, 2, 3)).unwrap();
        assert_eq!(a.counts(), (6, 2, 3));
        let b = build_dataset(&spec, None, 42, (6, 2, 3)).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.seed, y.seed);
        }
        // The test split starts where train+val end, so growing the earlier
        // splits changes which scenes land in test, but scene i is scene i.
        let c = build_dataset(&spec, None, 42, (8, 2, 1)).unwrap();
        assert_eq!(a.train[0].image.data(), c.train[0].image.data());
        assert_eq!(a.val[0].image.data(), c.train[6].image.data());
        assert_eq!(a.test[0].image.data(), c.val[0].image.data());
    }

    #[test]
    fn smoke_train_runs_and_logs_are_finite() {
        let data = build_dataset(&tiny_spec(), None, 7, (6, 2, 2)).unwrap();
        let cfg = tiny_cfg(2);
        let mut ps = ParamStore::new(cfg.seed);
        let det = Detector::new(&mut ps, &ArchConfig::baseline()).unwrap();
        let out = train_detector(&mut ps, &det, &data, &cfg).unwrap();
        assert_eq!(out.log.len(), 2);
        for row in &out.log {
            assert!(row.train_loss.is_finite() && row.train_loss > 0.0);
            assert!((0.0..=1.0).contains(&row.val_map50));
        }
        let preds = predictions_for(&ps, &det, &data.test).unwrap();
        assert_eq!(preds.len(), 2);
        for list in preds.iter().flatten() {
            list.validate().unwrap();
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = build_dataset(&tiny_spec(), None, 7, (4, 1, 1)).unwrap();
        let cfg = tiny_cfg(1);
        let run = || {
            let mut ps = ParamStore::new(cfg.seed);
            let det = Detector::new(&mut ps, &ArchConfig::baseline()).unwrap();
            let out = train_detector(&mut ps, &det, &data, &cfg).unwrap();
            let ids: Vec<_> = ps.ids().collect();
            let weights: Vec<f64> = ids
                .iter()
                .flat_map(|&id| ps.get(id).data().to_vec())
                .collect();
            (out.log.last().unwrap().train_loss, weights)
        };
        let (l1, w1) = run();
        let (l2, w2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(w1.len(), w2.len());
        assert!(w1.iter().zip(&w2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let data = build_dataset(&tiny_spec(), None, 3, (4, 1, 1)).unwrap();
        let cfg = tiny_cfg(1);
        let arch = ArchConfig::full();
        let mut ps = ParamStore::new(cfg.seed);
        let det = Detector::new(&mut ps, &arch).unwrap();
        train_detector(&mut ps, &det, &data, &cfg).unwrap();
        let dir = tempdir().unwrap();
        save_checkpoint(dir.path(), &arch, &cfg, cfg.epochs, &ps).unwrap();
        let (meta, ps2, det2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(meta.epoch, 1);
        assert_eq!(meta.arch.label(), "full");
        let ids1: Vec<_> = ps.ids().collect();
        let ids2: Vec<_> = ps2.ids().collect();
        assert_eq!(ids1.len(), ids2.len());
        for (&a, &b) in ids1.iter().zip(&ids2) {
            assert_eq!(ps.name(a), ps2.name(b));
            let (da, db) = (ps.get(a).data(), ps2.get(b).data());
            assert!(da.iter().zip(db).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let p1 = predictions_for(&ps, &det, &data.test).unwrap();
        let p2 = predictions_for(&ps2, &det2, &data.test).unwrap();
        assert_eq!(format!("{p1:?}"), format!("{p2:?}"));
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let cfg = tiny_cfg(1);
        let arch = ArchConfig::baseline();
        let ps = {
            let mut ps = ParamStore::new(0);
            Detector::new(&mut ps, &arch).unwrap();
            ps
        };
        let dir = tempdir().unwrap();
        save_checkpoint(dir.path(), &arch, &cfg, 0, &ps).unwrap();
        // Rewrite the meta to claim a different architecture: the weight
        // blob no longer matches and loading must fail.
        let meta_path = dir.path().join("checkpoint.json");
        let mut meta: CheckpointMeta =
            serde_json::from_str(&fs::read_to_string(&meta_path).unwrap()).unwrap();
        meta.arch = ArchConfig::full();
        fs::write(&meta_path, serde_json::to_string(&meta).unwrap()).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}

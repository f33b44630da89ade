//! Mini-batch training of the joint objective.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::adam::Adam;
use super::config::TrainConfig;
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::eval::{recalls_up_to, score_all, sentence_id, GroundTruth, DEFAULT_KS};
use crate::model::{prepare, ModelConfig, PreparedSample, SmfeaModel};
use crate::objective::FusionWeights;
use crate::real::Real;
use crate::vocab::{CategoryDicts, WordVocab};

/// One optimizer step's losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: u64,
    pub rank: f64,
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    /// `(k, i2t, t2i)` on the validation split for every `k` it can hold.
    pub val_recall: Vec<(usize, f64, f64)>,
}

pub struct TrainOutcome<F: Real> {
    pub model: SmfeaModel<F>,
    pub optimizer: Adam<F>,
    pub epochs_run: usize,
    pub steps: Vec<StepMetrics>,
    pub epochs: Vec<EpochSummary>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Seeded shuffle of `0..n`; the first `round(n · fraction)` become validation.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

pub fn write_metrics_csv(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    let mut out = String::from("epoch,step,rank,ce,kl,total\n");
    for r in rows {
        out.push_str(&format!("{},{},{:e},{:e},{:e},{:e}\n", r.epoch, r.step, r.rank, r.ce, r.kl, r.total));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Validation recalls on fused embeddings with one caption per image.
pub fn validate_split<F: Real>(
    model: &SmfeaModel<F>,
    samples: &[PreparedSample],
    fusion: &FusionWeights,
) -> Result<Vec<(usize, f64, f64)>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let (images, sentences) = model.encode(samples, fusion)?;
    let image_ids: Vec<String> = samples.iter().map(|s| s.image_id.clone()).collect();
    let sentence_ids: Vec<String> = image_ids.iter().map(|id| sentence_id(id, 0)).collect();
    let vi: Vec<_> = images.into_iter().map(|e| e.bundle.fused).collect();
    let vs: Vec<_> = sentences.into_iter().map(|e| e.bundle.fused).collect();
    let sim = score_all(&vi, image_ids, &vs, sentence_ids)?;
    recalls_up_to(&sim, &GroundTruth::one_to_one(samples.len()), &DEFAULT_KS)
}

fn check_grads<F: Real>(model: &SmfeaModel<F>, grads: &[ndarray::Array2<F>]) -> Result<()> {
    for (name, g) in model.store.names().iter().zip(grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
        }
    }
    Ok(())
}

fn clip<F: Real>(grads: &mut [ndarray::Array2<F>], max_norm: f64) {
    let norm: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.to_f64().unwrap_or(0.0).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = F::from_f64_lossy(max_norm / norm);
        for g in grads {
            g.mapv_inplace(|v| v * s);
        }
    }
}

/// Train from a fresh initialization.
pub fn train<F: Real>(
    cfg: &TrainConfig,
    dataset: &Dataset,
    vocab: &WordVocab,
    dicts: &CategoryDicts,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    let d_region = dataset
        .region_dim()
        .ok_or_else(|| Error::Config("cannot train on an empty dataset".into()))?;
    let model = SmfeaModel::<F>::new(cfg.model_config(d_region, vocab, dicts), cfg.seed)?;
    train_model(cfg, model, None, dataset, vocab, dicts)
}

/// Continue optimizing `model` (optionally with saved optimizer state).
pub fn train_model<F: Real>(
    cfg: &TrainConfig,
    mut model: SmfeaModel<F>,
    optimizer: Option<Adam<F>>,
    dataset: &Dataset,
    vocab: &WordVocab,
    dicts: &CategoryDicts,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    let expected: ModelConfig = cfg.model_config(model.config.d_region, vocab, dicts);
    if expected != model.config {
        return Err(Error::ConfigConflict("model architecture differs from the training config".into()));
    }
    let prepared = prepare(dataset, vocab, dicts)?;
    let (train_idx, val_idx) = split_indices(prepared.len(), cfg.val_fraction, cfg.seed);
    if train_idx.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "training split has {} samples but batch_size is {}",
            train_idx.len(),
            cfg.batch_size
        )));
    }
    let val: Vec<PreparedSample> = val_idx.iter().map(|&i| prepared[i].clone()).collect();
    let objective = cfg.objective();
    let mut adam = optimizer.unwrap_or_else(|| Adam::new(&model.store));
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut steps = Vec::new();
    let mut epochs = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &prepared[i]).collect();
            let (loss, mut grads) = model.loss_and_grads(&batch, &objective)?;
            if let Some(term) = loss.non_finite_term() {
                return Err(Error::Numeric(format!(
                    "{term} loss is not finite at epoch {epoch}, step {} ({loss:?})",
                    adam.step + 1
                )));
            }
            check_grads(&model, &grads)?;
            if let Some(c) = cfg.grad_clip {
                clip(&mut grads, c);
            }
            adam.update(&mut model.store, &grads, lr);
            steps.push(StepMetrics {
                epoch,
                step: adam.step,
                rank: loss.rank,
                ce: loss.ce,
                kl: loss.kl,
                total: loss.total,
            });
            sum += loss.total;
            n_batches += 1;
        }
        let val_recall = validate_split(&model, &val, &objective.fusion)?;
        let summary = EpochSummary {
            epoch,
            lr,
            mean_total: sum / n_batches.max(1) as f64,
            val_recall,
        };
        log::info!(
            "epoch {epoch} lr {lr:e} loss {:.4} val {:?}",
            summary.mean_total,
            summary.val_recall
        );
        epochs.push(summary);
    }
    Ok(TrainOutcome {
        model,
        optimizer: adam,
        epochs_run: cfg.max_epochs,
        steps,
        epochs,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};
    use crate::vocab::{build_category_dicts, build_word_vocab};

    fn small() -> (TrainConfig, Dataset, WordVocab, CategoryDicts) {
        let spec = SyntheticSpec {
            n_pairs: 10,
            d_region: 8,
            regions_per_image: 5,
            ..SyntheticSpec::default()
        };
        let ds = Dataset { samples: generate_synthetic(&spec).unwrap().samples };
        let vocab = build_word_vocab(ds.sentences(), 1).unwrap();
        let dicts = build_category_dicts(ds.trees());
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 4,
            d_word: 6,
            d_v: 8,
            d_node: 4,
            lr: 1e-2,
            val_fraction: 0.2,
            ..TrainConfig::default()
        };
        (cfg, ds, vocab, dicts)
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (a_train, a_val) = split_indices(32, 0.1, 7);
        let (b_train, b_val) = split_indices(32, 0.1, 7);
        assert_eq!((&a_train, &a_val), (&b_train, &b_val));
        assert_eq!(a_val.len(), 3);
        assert_eq!(a_train.len() + a_val.len(), 32);
        assert!(a_val.iter().all(|i| !a_train.contains(i)));
        assert_ne!(split_indices(32, 0.1, 8).1, a_val);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (mut cfg, ds, vocab, dicts) = small();
        cfg.max_epochs = 0;
        let out = train::<f64>(&cfg, &ds, &vocab, &dicts).unwrap();
        let init = SmfeaModel::<f64>::new(out.model.config.clone(), cfg.seed).unwrap();
        assert_eq!(out.model.store, init.store);
        assert!(out.steps.is_empty());
    }

    #[test]
    fn repeat_runs_are_identical() {
        let (cfg, ds, vocab, dicts) = small();
        let a = train::<f32>(&cfg, &ds, &vocab, &dicts).unwrap();
        let b = train::<f32>(&cfg, &ds, &vocab, &dicts).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.model.store, b.model.store);
        assert_eq!(a.steps.len(), 3 * 2);
        assert_eq!(a.epochs.len(), 3);
    }

    #[test]
    fn loss_goes_down_on_a_tiny_corpus() {
        let (mut cfg, ds, vocab, dicts) = small();
        cfg.max_epochs = 15;
        let out = train::<f64>(&cfg, &ds, &vocab, &dicts).unwrap();
        assert!(out.epochs.last().unwrap().mean_total < out.epochs[0].mean_total);
    }

    #[test]
    fn batch_larger_than_split_is_rejected() {
        let (mut cfg, ds, vocab, dicts) = small();
        cfg.batch_size = 9;
        assert!(matches!(train::<f32>(&cfg, &ds, &vocab, &dicts), Err(Error::Config(_))));
    }

    #[test]
    fn exploding_loss_names_the_term() {
        let (mut cfg, ds, vocab, dicts) = small();
        cfg.max_epochs = 1;
        let d_region = ds.region_dim().unwrap();
        let mut model = SmfeaModel::<f64>::new(cfg.model_config(d_region, &vocab, &dicts), 1).unwrap();
        let id = model.store.id("vtree.cls_fragment.weight").unwrap();
        model.store.get_mut(id).fill(f64::NAN);
        let err = train_model(&cfg, model, None, &ds, &vocab, &dicts).err().unwrap();
        assert!(err.to_string().contains("ce") || err.to_string().contains("kl"), "{err}");
    }

    #[test]
    fn metrics_csv_has_the_expected_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = [StepMetrics { epoch: 1, step: 1, rank: 0.5, ce: 1.0, kl: 0.0, total: 1.5 }];
        write_metrics_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,step,rank,ce,kl,total"));
        assert_eq!(lines.next().unwrap().split(',').count(), 6);
    }
}

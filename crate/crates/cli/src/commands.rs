use std::path::{Path, PathBuf};

use serde_json::json;

use smfea::corpus::{gen_synthetic_dataset, load_manifest, read_manifest_lines, write_manifest_lines, Dataset, SyntheticSpec, MANIFEST_FILE};
use smfea::engine::{
    gradcheck, load_checkpoint, peek_dtype, save_checkpoint, train, write_metrics_csv, Checkpoint, GradcheckOptions,
    Precision, TrainConfig,
};
use smfea::eval::{evaluate, retrieve, score_all, sentence_id, Direction, GroundTruth, SimilarityMatrix};
use smfea::model::{prepare, PreparedSample};
use smfea::referral::{build_label_tree, tagger_registry, whiten_sentence, TaggerOptions};
use smfea::treeenc::node_predictions;
use smfea::vocab::{build_category_dicts, build_word_vocab, load_word_vocab, save_word_vocab, CategoryDicts};
use smfea::{Error, Real, Result};

use crate::{Command, ConfigOverrides, EvalArgs, ExportArgs, GenArgs, GradArgs, RetrieveArgs, TrainArgs, TreesArgs, VocabArgs};

pub const CHECKPOINT_FILE: &str = "model.smck";

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynthetic(a) => gen(a),
        Command::BuildVocab(a) => vocab(a),
        Command::BuildTrees(a) => trees(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Retrieve(a) => retrieve_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::ExportTrees(a) => export(a),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn gen(a: GenArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad synthetic spec: {e}")))?
        }
        None => SyntheticSpec::default(),
    };
    if let Ok(v) = std::env::var(smfea::engine::SEED_ENV) {
        spec.seed = v.trim().parse().map_err(|_| Error::Config(format!("bad SMFEA_SEED `{v}`")))?;
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = a.$flag { spec.$field = v; })* };
    }
    set!(seed => seed, n_pairs => n_pairs, fragment_types => n_fragment_types, relation_types => n_relation_types,
         regions => regions_per_image, d_region => d_region, noise => noise_sigma);
    ensure_dir(&a.out)?;
    let m = gen_synthetic_dataset(&spec, &a.out)?;
    println!("wrote {} samples to {}", m.n_samples, m.path.display());
    Ok(())
}

fn vocab(a: VocabArgs) -> Result<()> {
    let lines = read_manifest_lines(&a.manifest)?;
    let vocab = build_word_vocab(lines.iter().map(|l| l.tokens.as_slice()), a.min_count)?;
    ensure_dir(&a.out)?;
    save_word_vocab(&vocab, &a.out)?;
    println!("vocabulary of {} entries written to {}", vocab.size(), a.out.display());
    Ok(())
}

fn trees(a: TreesArgs) -> Result<()> {
    let tagger = tagger_registry().create_with(&a.tagger, &TaggerOptions { lexicon: a.lexicon.clone() })?;
    let mut lines = read_manifest_lines(&a.manifest)?;
    ensure_dir(&a.out)?;
    let src = manifest_dir(&a.manifest);
    let same_dir = src.canonicalize().ok() == a.out.canonicalize().ok();
    let mut trees = Vec::with_capacity(lines.len());
    let mut changed = 0usize;
    for line in &mut lines {
        let tagged = whiten_sentence(&line.tokens, tagger.as_ref());
        let tree = build_label_tree(&tagged, None);
        let entries = tree.to_entries();
        if line.tree.as_ref().is_some_and(|old| *old != entries) {
            changed += 1;
        }
        line.tree = Some(entries);
        if !same_dir {
            let abs = src.join(&line.features_path);
            let abs = abs.canonicalize().unwrap_or(abs);
            line.features_path = abs.to_string_lossy().into_owned();
        }
        trees.push(tree);
    }
    let dicts = build_category_dicts(trees.iter());
    write_manifest_lines(&a.out.join(MANIFEST_FILE), &lines)?;
    dicts.save(&a.out)?;
    println!(
        "{} trees built with tagger `{}` ({} differ from the input manifest); {} fragment and {} relation labels",
        trees.len(),
        tagger.name(),
        changed,
        dicts.n_fragments(),
        dicts.n_relations()
    );
    Ok(())
}

fn resolve_config(o: &ConfigOverrides) -> Result<TrainConfig> {
    let mut cfg = match &o.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = &o.cell_variant {
        cfg.cell_variant = v.clone();
    }
    if let Some(v) = &o.negatives {
        cfg.negatives = v.clone();
    }
    if let Some(v) = &o.precision {
        cfg.precision = v.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.overrides)?;
    let ds = load_manifest(&a.manifest)?;
    let root = manifest_dir(&a.manifest);
    let vocab = load_word_vocab(a.vocab.as_deref().unwrap_or(&root))?;
    let dicts = CategoryDicts::load(a.dicts.as_deref().unwrap_or(&root))?;
    ensure_dir(&a.out)?;
    match cfg.precision {
        Precision::Single => train_typed::<f32>(&cfg, &ds, vocab, dicts, &a.out),
        Precision::Double => train_typed::<f64>(&cfg, &ds, vocab, dicts, &a.out),
    }
}

fn train_typed<F: Real>(
    cfg: &TrainConfig,
    ds: &Dataset,
    vocab: smfea::vocab::WordVocab,
    dicts: CategoryDicts,
    out: &Path,
) -> Result<()> {
    let outcome = train::<F>(cfg, ds, &vocab, &dicts)?;
    write_metrics_csv(&out.join("metrics.csv"), &outcome.steps)?;
    write_json(&out.join("epochs.json"), &serde_json::to_value(&outcome.epochs)?)?;
    write_json(&out.join("config.json"), &serde_json::to_value(cfg)?)?;
    let ck = Checkpoint {
        model: outcome.model,
        optimizer: Some(outcome.optimizer),
        epoch: outcome.epochs_run,
        train: cfg.clone(),
        vocab,
        dicts,
    };
    save_checkpoint(&out.join(CHECKPOINT_FILE), &ck)?;
    let last = outcome.steps.last().map_or(f64::NAN, |s| s.total);
    println!(
        "trained {} epochs ({} steps), final batch loss {last:.4}; checkpoint at {}",
        outcome.epochs_run,
        outcome.steps.len(),
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

/// Load a checkpoint in its stored precision and evaluate the body with it.
macro_rules! with_checkpoint {
    ($path:expr, $config:expr, $manifest:expr, |$ck:ident, $ds:ident| $body:expr) => {{
        let ds_ = load_manifest($manifest)?;
        match peek_dtype($path)?.as_str() {
            "f64" => {
                let $ck = open_checkpoint::<f64>($path, $config, &ds_)?;
                let $ds = &ds_;
                $body
            }
            _ => {
                let $ck = open_checkpoint::<f32>($path, $config, &ds_)?;
                let $ds = &ds_;
                $body
            }
        }
    }};
}

fn open_checkpoint<F: Real>(path: &Path, config: Option<&Path>, ds: &Dataset) -> Result<Checkpoint<F>> {
    let unchecked = load_checkpoint::<F>(path, None)?;
    let Some(cfg_path) = config else {
        return Ok(unchecked);
    };
    let mut cfg = TrainConfig::load(cfg_path)?;
    cfg.apply_env()?;
    let d_region = ds.region_dim().unwrap_or(unchecked.model.config.d_region);
    let expect = cfg.model_config(d_region, &unchecked.vocab, &unchecked.dicts);
    load_checkpoint::<F>(path, Some(&expect))
}

struct Scored {
    sim: SimilarityMatrix,
    samples: Vec<PreparedSample>,
}

fn score<F: Real>(ck: &Checkpoint<F>, ds: &Dataset) -> Result<Scored> {
    let samples = prepare(ds, &ck.vocab, &ck.dicts)?;
    let (images, sentences) = ck.model.encode(&samples, &ck.train.fusion())?;
    let ids: Vec<String> = samples.iter().map(|s| s.image_id.clone()).collect();
    let sids: Vec<String> = ids.iter().map(|i| sentence_id(i, 0)).collect();
    let vi: Vec<_> = images.into_iter().map(|e| e.bundle.fused).collect();
    let vs: Vec<_> = sentences.into_iter().map(|e| e.bundle.fused).collect();
    Ok(Scored { sim: score_all(&vi, ids, &vs, sids)?, samples })
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let scored = with_checkpoint!(&a.checkpoint, a.config.as_deref(), &a.manifest, |ck, ds| score(&ck, ds)?);
    let report = evaluate(&scored.sim, &GroundTruth::one_to_one(scored.samples.len()))?;
    ensure_dir(&a.out)?;
    let value = serde_json::to_value(report)?;
    write_json(&a.out.join("eval.json"), &value)?;
    println!("{}", serde_json::to_string(&value)?);
    Ok(())
}

fn retrieve_cmd(a: RetrieveArgs) -> Result<()> {
    let dir: Direction = a.direction.parse()?;
    let scored = with_checkpoint!(&a.checkpoint, a.config.as_deref(), &a.manifest, |ck, ds| score(&ck, ds)?);
    let hits = retrieve(&scored.sim, &a.query, dir, a.k)?;
    ensure_dir(&a.out)?;
    let value = json!({ "query": a.query, "direction": dir, "results": hits });
    write_json(&a.out.join("retrieval.json"), &value)?;
    for (rank, h) in hits.iter().enumerate() {
        println!("{}\t{}\t{:.6}", rank + 1, h.id, h.score);
    }
    Ok(())
}

fn gradcheck_cmd(a: GradArgs) -> Result<()> {
    let opts = GradcheckOptions {
        eps: a.eps,
        seed: a.seed,
        d_node: a.d_node,
        d_v: a.d_v,
        batch: a.batch,
        max_entries: a.max_entries,
        cell_variant: a.cell_variant.clone(),
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&a.component, &opts)?;
    ensure_dir(&a.out)?;
    write_json(&a.out.join("gradcheck.json"), &serde_json::to_value(&report)?)?;
    println!(
        "{}: max relative error {:.3e} in {} ({} blocks, {} kink samples rejected)",
        report.component,
        report.max_rel_error,
        report.worst_block,
        report.blocks.len(),
        report.rejected_kinks
    );
    if let Some(tol) = a.tolerance {
        if !(report.max_rel_error < tol) {
            return Err(Error::Numeric(format!("relative error {:.3e} exceeds tolerance {tol:e}", report.max_rel_error)));
        }
    }
    Ok(())
}

fn export_typed<F: Real>(ck: &Checkpoint<F>, ds: &Dataset, limit: Option<usize>) -> Result<serde_json::Value> {
    let mut samples = prepare(ds, &ck.vocab, &ck.dicts)?;
    samples.truncate(limit.unwrap_or(usize::MAX));
    let (images, sentences) = ck.model.encode(&samples, &ck.train.fusion())?;
    let rows: Vec<serde_json::Value> = samples
        .iter()
        .zip(images.iter().zip(&sentences))
        .map(|(s, (vi, ts))| {
            json!({
                "image_id": s.image_id,
                "visual": node_predictions(&vi.node_probs, &ck.dicts),
                "textual": node_predictions(&ts.node_probs, &ck.dicts),
            })
        })
        .collect();
    Ok(serde_json::Value::Array(rows))
}

fn export(a: ExportArgs) -> Result<()> {
    let value = with_checkpoint!(&a.checkpoint, None, &a.manifest, |ck, ds| export_typed(&ck, ds, a.limit)?);
    ensure_dir(&a.out)?;
    let path = a.out.join("tree_predictions.json");
    write_json(&path, &value)?;
    println!("node predictions for {} samples written to {}", value.as_array().map_or(0, Vec::len), path.display());
    Ok(())
}

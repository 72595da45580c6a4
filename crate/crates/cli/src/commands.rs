use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use emde::density::{nk_sweep, write_sweep_csv};
use emde::embeddings::load_embeddings;
use emde::model::{train, write_loss_csv, Model};
use emde::partition::{assign_codes, fit_dlsh, fit_random_codes};
use emde::recsys::{
    build_session_examples, build_topk_examples, evaluate_session, evaluate_topk, format_table, recommend_all,
    session_points, topk_points, write_metrics_csv, write_predictions_csv, BuildStats, Channel, Example, InputLayout,
    InteractionLog, MetricRow, Popularity, Predictor, Task,
};
use emde::sketch::{aggregate_items, SketchBundle};
use emde::synth::{GaussianMixture, ToyDataset, ToySpec};
use emde::{Aggregator, CodesMatrix, EmbeddingTable};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModalityConfig};

const CHECKPOINT: &str = "model.ckpt";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn codes_path(cfg: &ExperimentConfig, m: &ModalityConfig) -> PathBuf {
    cfg.out_dir().join("codes").join(format!("{}.codes", m.name))
}

fn modality_seed(cfg: &ExperimentConfig, index: usize) -> u64 {
    cfg.seed.wrapping_add(index as u64)
}

fn load_log(cfg: &ExperimentConfig, p: &Path) -> Result<InteractionLog> {
    let path = cfg.resolve(p);
    InteractionLog::load(&path).with_context(|| format!("loading interaction log {}", path.display()))
}

fn log_items(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let data = cfg.data()?;
    let mut ids: Vec<String> = [&data.train, &data.test]
        .into_iter()
        .map(|p| load_log(cfg, p))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .flat_map(|l| l.item_counts().into_keys())
        .collect();
    ids.sort();
    ids.dedup();
    Ok(ids)
}

pub fn fit_partitions(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.modalities.is_empty() {
        bail!("no [[modality]] configured");
    }
    for (i, m) in cfg.modalities.iter().enumerate() {
        let seed = modality_seed(cfg, i);
        let codes = if m.random_codes {
            let ids = match &m.embeddings {
                Some(p) => load_embeddings(cfg.resolve(p), &m.name)?.ids().to_vec(),
                None => log_items(cfg)?,
            };
            fit_random_codes(&ids, m.depth, m.width(), seed)?
        } else {
            let path = cfg.resolve(m.embeddings.as_ref().expect("validated"));
            let table = load_embeddings(&path, &m.name)?;
            let mut p = fit_dlsh(&table, m.depth, m.bits, seed)?;
            if let Some(w) = m.width {
                p = p.with_width(w)?;
            }
            let part_path = cfg.out_dir().join("partitions").join(format!("{}.part", m.name));
            let mut w = create(&part_path)?;
            p.write_to(&mut w)?;
            w.flush()?;
            assign_codes(&p, &table)?
        };
        let path = codes_path(cfg, m);
        let mut w = create(&path)?;
        codes.write_to(&mut w)?;
        w.flush()?;
        log::info!(
            "{}: {} items, N={} W={} -> {}",
            m.name,
            codes.len(),
            codes.depth(),
            codes.width(),
            path.display()
        );
    }
    Ok(())
}

fn load_channels(cfg: &ExperimentConfig) -> Result<Vec<Channel>> {
    if cfg.modalities.is_empty() {
        bail!("no [[modality]] configured");
    }
    cfg.modalities
        .iter()
        .map(|m| {
            let path = codes_path(cfg, m);
            let codes = CodesMatrix::load(&path)
                .with_context(|| format!("loading codes {} (run `fit-partitions` first)", path.display()))?;
            let mut ch = Channel::new(&m.name, codes);
            ch.event_type = m.event_type.clone();
            Ok(ch)
        })
        .collect()
}

fn report(split: &str, st: &BuildStats) {
    log::info!("{split}: {} examples", st.examples);
    if st.too_short + st.missing_target + st.missing_input_items > 0 {
        log::warn!(
            "{split}: skipped {} too-short sessions and {} unknown targets; dropped {} unknown input items",
            st.too_short,
            st.missing_target,
            st.missing_input_items
        );
    }
}

fn examples(cfg: &ExperimentConfig, channels: &[Channel], log: &InteractionLog, split: &str) -> Result<Vec<Example>> {
    let data = cfg.data()?;
    let target = cfg.target_index();
    let (ex, st) = match data.task {
        Task::Session => build_session_examples(log, channels, target, cfg.decay)?,
        Task::Topk => build_topk_examples(log, channels, target, data.split_ratio, cfg.seed)?,
    };
    report(split, &st);
    if ex.is_empty() {
        bail!("{split} split produced no examples");
    }
    Ok(ex)
}

/// Writes one bundle per split and modality with the aggregate sketch of
/// every session's accepted events.
pub fn encode(cfg: &ExperimentConfig) -> Result<()> {
    let channels = load_channels(cfg)?;
    let data = cfg.data()?;
    for (split, p) in [("train", &data.train), ("test", &data.test)] {
        let log = load_log(cfg, p)?;
        for ch in &channels {
            let mut missing = 0;
            let entries = log
                .sessions()
                .iter()
                .map(|s| {
                    let items: Vec<(&str, f64)> = s
                        .events
                        .iter()
                        .filter(|e| ch.event_type.as_deref().is_none_or(|t| t == e.event_type))
                        .map(|e| (e.item_id.as_str(), e.weight))
                        .collect();
                    let (sk, miss) = aggregate_items(&ch.codes, &items);
                    missing += miss;
                    (s.id.clone(), sk)
                })
                .collect();
            if missing > 0 {
                log::warn!("{split}/{}: dropped {missing} events with unknown items", ch.name);
            }
            let path = cfg.out_dir().join("sketches").join(format!("{split}_{}.skb", ch.name));
            let mut w = create(&path)?;
            SketchBundle { entries }.write_to(&mut w)?;
            w.flush()?;
            log::info!("wrote {}", path.display());
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CheckpointLayout {
    input: InputLayout,
    modalities: Vec<String>,
}

pub fn train_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let channels = load_channels(cfg)?;
    let layout = InputLayout::new(cfg.data()?.task, &channels, cfg.target_index())?;
    let log = load_log(cfg, &cfg.data()?.train)?;
    let ex = examples(cfg, &channels, &log, "train")?;
    let inputs: Vec<Vec<f64>> = ex.iter().map(|e| e.input.clone()).collect();
    let targets: Vec<Vec<f64>> = ex.iter().map(|e| e.target.values().to_vec()).collect();
    let tc = cfg.train_config();
    let (model, history) = train(&cfg.model_spec(), &inputs, &targets, layout.target_shape().0, &tc)?;
    for h in &history {
        log::info!("epoch {}: loss {:.6} lr {}", h.epoch, h.loss, h.lr);
    }
    let meta = serde_json::to_value(CheckpointLayout {
        input: layout,
        modalities: channels.iter().map(|c| c.name.clone()).collect(),
    })?;
    let ckpt = cfg.out_dir().join(CHECKPOINT);
    let mut w = create(&ckpt)?;
    model.write_checkpoint(&mut w, &meta)?;
    w.flush()?;
    let mut w = create(&cfg.out_dir().join("loss.csv"))?;
    write_loss_csv(&history, &mut w)?;
    w.flush()?;
    log::info!("wrote {}", ckpt.display());
    Ok(())
}

fn load_model(path: &Path, layout: &InputLayout) -> Result<Model> {
    let (model, meta) = Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let stored: CheckpointLayout = serde_json::from_value(meta).context("checkpoint has no input layout")?;
    if &stored.input != layout {
        bail!(
            "checkpoint {} was trained with a different input layout (modalities {:?}); refit or retrain",
            path.display(),
            stored.modalities
        );
    }
    Ok(model)
}

fn metric_rows(
    cfg: &ExperimentConfig,
    method: &str,
    ex: &[Example],
    ranked: &[Vec<(String, f64)>],
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    match cfg.data()?.task {
        Task::Session => {
            let pts = session_points(ex, ranked);
            for &k in &cfg.eval.k {
                rows.extend(evaluate_session(&pts, k)?.rows(method));
            }
        }
        Task::Topk => rows.extend(evaluate_topk(&topk_points(ex, ranked), &cfg.eval.k)?.rows(method)),
    }
    Ok(rows)
}

fn max_k(cfg: &ExperimentConfig) -> usize {
    cfg.eval.k.iter().copied().max().unwrap_or(20)
}

pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub pure: bool,
    pub aggregator: Option<Aggregator>,
}

pub fn evaluate(cfg: &ExperimentConfig, args: &EvalArgs) -> Result<()> {
    let channels = load_channels(cfg)?;
    let target = cfg.target_index();
    let layout = InputLayout::new(cfg.data()?.task, &channels, target)?;
    let log = load_log(cfg, &cfg.data()?.test)?;
    let ex = examples(cfg, &channels, &log, "test")?;
    let agg = args.aggregator.unwrap_or(cfg.eval.aggregator);
    let model;
    let predictor = if args.pure {
        Predictor::Pure
    } else {
        let path = args
            .checkpoint
            .clone()
            .unwrap_or_else(|| cfg.out_dir().join(CHECKPOINT));
        if !path.exists() {
            bail!("checkpoint {} not found (train first, or pass --pure)", path.display());
        }
        model = load_model(&path, &layout)?;
        Predictor::Conditional(&model)
    };
    let codes = &channels[target].codes;
    let ranked = recommend_all(predictor, &ex, &layout, codes, max_k(cfg), agg, cfg.exclude_seen()?)?;
    let method = format!("{}-{}", predictor.name(), agg);
    let rows = metric_rows(cfg, &method, &ex, &ranked)?;
    let dir = cfg.out_dir().join("eval");
    let mut w = create(&dir.join(format!("metrics_{}.csv", predictor.name())))?;
    write_metrics_csv(&rows, &mut w)?;
    w.flush()?;
    let table = format_table(&rows);
    let mut w = create(&dir.join(format!("metrics_{}.txt", predictor.name())))?;
    w.write_all(table.as_bytes())?;
    w.flush()?;
    let mut w = create(&dir.join(format!("predictions_{}.csv", predictor.name())))?;
    write_predictions_csv(&ex, &ranked, &mut w)?;
    w.flush()?;
    print!("{table}");
    Ok(())
}

/// Pure EMDE with DLSH vs random codes, each aggregator, popularity
/// baselines, and the trained model when a checkpoint is available.
pub fn ablate(cfg: &ExperimentConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let channels = load_channels(cfg)?;
    let target = cfg.target_index();
    let task = cfg.data()?.task;
    let layout = InputLayout::new(task, &channels, target)?;
    let train_log = load_log(cfg, &cfg.data()?.train)?;
    let test_log = load_log(cfg, &cfg.data()?.test)?;
    let ex = examples(cfg, &channels, &test_log, "test")?;
    let k = max_k(cfg);
    let excl = cfg.exclude_seen()?;
    let pop = Popularity::from_log(&train_log);
    let codes = &channels[target].codes;

    let mut rows = Vec::new();
    let mut run = |name: String, pred: Predictor<'_>, ex: &[Example], lay: &InputLayout, codes: &CodesMatrix, agg| {
        let ranked = recommend_all(pred, ex, lay, codes, k, agg, excl)?;
        rows.extend(metric_rows(cfg, &name, ex, &ranked)?);
        anyhow::Ok(())
    };
    for agg in Aggregator::ALL {
        run(format!("pure-{agg}"), Predictor::Pure, &ex, &layout, codes, agg)?;
    }
    run(
        "pure+pop-gmean".into(),
        Predictor::PurePop(&pop),
        &ex,
        &layout,
        codes,
        Aggregator::Gmean,
    )?;
    run(
        "toppop".into(),
        Predictor::Popularity(&pop),
        &ex,
        &layout,
        codes,
        Aggregator::Gmean,
    )?;

    // same shapes, no metric prior
    let random = fit_random_codes(
        codes.ids(),
        codes.depth(),
        codes.width(),
        cfg.seed.wrapping_add(0x7261_6e64),
    )?;
    let mut rchannels = channels.clone();
    rchannels[target].codes = random.clone();
    let rex = examples(cfg, &rchannels, &test_log, "test/random-codes")?;
    run(
        "pure-random-codes-gmean".into(),
        Predictor::Pure,
        &rex,
        &layout,
        &random,
        Aggregator::Gmean,
    )?;

    let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir().join(CHECKPOINT));
    if ckpt.exists() {
        let model = load_model(&ckpt, &layout)?;
        for agg in Aggregator::ALL {
            run(
                format!("conditional-{agg}"),
                Predictor::Conditional(&model),
                &ex,
                &layout,
                codes,
                agg,
            )?;
        }
    } else {
        log::info!("no checkpoint at {}; skipping conditional rows", ckpt.display());
    }

    let mut w = create(&cfg.out_dir().join("ablation.csv"))?;
    write_metrics_csv(&rows, &mut w)?;
    w.flush()?;
    let table = format_table(&rows);
    let mut w = create(&cfg.out_dir().join("ablation.txt"))?;
    w.write_all(table.as_bytes())?;
    w.flush()?;
    print!("{table}");
    Ok(())
}

pub fn density_sweep(cfg: &ExperimentConfig) -> Result<()> {
    let d = cfg.density.as_ref().context("config has no [density] section")?;
    let (data, queries) = match (&d.embeddings, &d.mixture) {
        (Some(p), None) => {
            let data = load_embeddings(cfg.resolve(p), "density")?;
            let stride = (data.len() / d.queries.max(1)).max(1);
            let q: Vec<Vec<f64>> = (0..data.len())
                .step_by(stride)
                .take(d.queries)
                .map(|i| data.row(i).to_vec())
                .collect();
            (data, q)
        }
        (None, Some(m)) => {
            let g = GaussianMixture::random(m.dim, m.components, m.spread, cfg.seed)?;
            let data: EmbeddingTable = g.sample_table(m.points, cfg.seed.wrapping_add(1), "density")?;
            (data, g.sample(d.queries, cfg.seed.wrapping_add(2)))
        }
        _ => bail!("[density] needs exactly one of `embeddings` or `mixture`"),
    };
    let rows = nk_sweep(&data, &queries, &d.depths, &d.bits, &d.seeds, d.aggregator, d.bandwidth)?;
    let path = cfg.out_dir().join("density_sweep.csv");
    let mut w = create(&path)?;
    write_sweep_csv(&rows, &mut w)?;
    w.flush()?;
    log::info!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

pub fn generate_toy(out: &Path, seed: u64) -> Result<()> {
    ToyDataset::generate(&ToySpec::default(), seed)?.write(out)?;
    log::info!("wrote toy dataset to {}", out.display());
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use muxgcl::analysis::{
    all_layer_pairs, export_fits_csv, export_samples_csv, export_similarity_csv, similarity_distributions,
    t_statistics, view_embeddings,
};
use muxgcl::encoder::{load_checkpoint, save_checkpoint};
use muxgcl::eval::{embed_clean, evaluate_classification, evaluate_clustering};
use muxgcl::pae::{cached_patch_embeddings, PatchTopoEmbeddings};
use muxgcl::trainer::{affinity_for, benchmark_epoch, checkpoint_hook, train_with, BenchmarkReport, TrainConfig};
use muxgcl::{Error, GraphDataset, LossMode, RunConfig};
use serde_json::json;

use crate::{AnalyzeArgs, BenchmarkArgs, EvalArgs, GlobalArgs, PrepareArgs, TaskArg, TrainArgs, WhatArg};

/// Bad invocation that clap could not catch.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::MissingFile(_) | Error::Config(_) | Error::InvalidArgument(_)) => 2,
        Some(Error::NonFinite(_)) => 4,
        _ => 3,
    }
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| usage("--config is required for this command"))?;
    let mut cfg = RunConfig::from_file(path, &g.overrides)?;
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
        cfg.analysis.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(g: &GlobalArgs, default: &str) -> Result<PathBuf> {
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(default));
    if dir.exists() {
        let non_empty = fs::read_dir(&dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !g.force {
            return Err(usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write(&dir.join("config.resolved.toml"), cfg.to_toml())
}

fn load(cfg: &RunConfig) -> Result<GraphDataset> {
    cfg.validate()?;
    Ok(cfg.load_dataset()?)
}

fn topo_for(
    dataset: &GraphDataset,
    tc: &TrainConfig,
    cache: Option<&PathBuf>,
) -> Result<Option<Arc<PatchTopoEmbeddings>>> {
    match cache {
        Some(path) if tc.uses_pae() => {
            let h = cached_patch_embeddings(dataset, &tc.pae.topo(), tc.encoder.num_layers(), tc.seed, path)?;
            Ok(Some(Arc::new(h)))
        }
        _ => Ok(None),
    }
}

pub fn prepare(g: &GlobalArgs, a: &PrepareArgs) -> Result<()> {
    let cfg = match (&a.dataset, &g.config) {
        (Some(dir), _) => {
            let mut cfg = match &g.config {
                Some(_) => load_config(g)?,
                None => RunConfig::from_str_with("", &g.overrides)?,
            };
            cfg.dataset.path = dir.clone();
            cfg
        }
        (None, Some(_)) => load_config(g)?,
        (None, None) => return Err(usage("prepare needs --dataset or --config")),
    };
    let dataset = load(&cfg)?;
    let isolated = (0..dataset.num_nodes())
        .filter(|&i| dataset.adjacency().degree(i) == 0)
        .count();
    let summary = json!({
        "name": dataset.name(),
        "path": cfg.dataset.path,
        "num_nodes": dataset.num_nodes(),
        "num_features": dataset.num_features(),
        "num_classes": dataset.num_classes(),
        "num_edges": dataset.adjacency().num_edges(),
        "isolated_nodes": isolated,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if let Some(path) = &a.pae_cache {
        let tc = cfg.train_config();
        if !tc.uses_pae() {
            return Err(usage("the configuration does not use patch affinities"));
        }
        let h = cached_patch_embeddings(&dataset, &tc.pae.topo(), tc.encoder.num_layers(), tc.seed, path)?;
        println!(
            "patch embeddings: {} nodes, {} hops, dim {} -> {}",
            h.num_nodes(),
            h.num_layers() + 1,
            h.dim(),
            path.display()
        );
    }
    if g.out.is_some() {
        let dir = out_dir(g, "prepare")?;
        echo_config(&dir, &cfg)?;
        write(&dir.join("dataset.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(())
}

pub fn train(g: &GlobalArgs, a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(g)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let dataset = load(&cfg)?;
    let dir = out_dir(g, "train")?;
    echo_config(&dir, &cfg)?;
    let tc = cfg.train_config();
    let topo = topo_for(&dataset, &tc, a.pae_cache.as_ref())?;

    let mut save = tc.checkpoint_every.map(|every| {
        let ckdir = dir.join("checkpoints");
        (ckdir.clone(), checkpoint_hook(ckdir, every))
    });
    if let Some((ckdir, _)) = &save {
        fs::create_dir_all(ckdir).with_context(|| format!("creating {}", ckdir.display()))?;
    }
    let epochs = tc.epochs;
    let outcome = train_with(&dataset, &tc, topo, |ev| {
        if ev.record.epoch % 50 == 0 || ev.record.epoch == epochs {
            log::info!("epoch {:>5}/{epochs}  loss {:.6}", ev.record.epoch, ev.record.loss);
        }
        match &mut save {
            Some((_, hook)) => hook(ev),
            None => Ok(()),
        }
    })?;

    save_checkpoint(&outcome.params, dir.join("encoder.bin"))?;
    write(&dir.join("history.csv"), outcome.history.to_csv())?;
    let snaps = outcome.history.snapshots();
    if !snaps.is_empty() {
        export_fits_csv(&snaps, dir.join("tstats.csv"))?;
    }
    let total: f64 = outcome.history.records.iter().map(|r| r.seconds).sum();
    let summary = json!({
        "epochs": outcome.history.len(),
        "final_loss": outcome.history.losses().last(),
        "train_seconds": total,
        "pae_seconds": outcome.pae_seconds,
        "mean_epoch_seconds": total / outcome.history.len().max(1) as f64,
    });
    write(&dir.join("train_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "trained {} epochs in {:.1}s -> {}",
        outcome.history.len(),
        total,
        dir.display()
    );
    Ok(())
}

fn load_matching_checkpoint(path: &Path, dataset: &GraphDataset) -> Result<muxgcl::EncoderParams<f32>> {
    let params = load_checkpoint(path)?;
    let expects = params.layers[0].nrows();
    if expects != dataset.num_features() {
        return Err(Error::Shape(format!(
            "checkpoint {} expects {expects} input features ({} layers: {:?}), dataset {} has {} features",
            path.display(),
            params.num_layers(),
            params.layers.iter().map(|w| w.dim()).collect::<Vec<_>>(),
            dataset.name(),
            dataset.num_features()
        ))
        .into());
    }
    Ok(params)
}

pub fn eval(g: &GlobalArgs, a: &EvalArgs) -> Result<()> {
    let cfg = load_config(g)?;
    let dataset = load(&cfg)?;
    let params = load_matching_checkpoint(&a.checkpoint, &dataset)?;
    let dir = out_dir(g, "eval")?;
    echo_config(&dir, &cfg)?;
    let emb = embed_clean(&dataset, &params)?;
    let (labels, c) = (dataset.labels(), dataset.num_classes());
    let mut reports = Vec::new();
    if matches!(a.task, TaskArg::Classification | TaskArg::Both) {
        reports.push(("classification", evaluate_classification(&emb, labels, c, &cfg.eval)?));
    }
    if matches!(a.task, TaskArg::Clustering | TaskArg::Both) {
        reports.push(("clustering", evaluate_clustering(&emb, labels, c, &cfg.eval)?));
    }
    for (name, mut report) in reports {
        report.checkpoint = Some(a.checkpoint.display().to_string());
        println!("{name}\n{}", report.table());
        write(
            &dir.join(format!("eval_{name}.json")),
            serde_json::to_string_pretty(&report)?,
        )?;
    }
    Ok(())
}

fn epoch_of(path: &Path) -> usize {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("epoch_"))
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

pub fn analyze(g: &GlobalArgs, a: &AnalyzeArgs) -> Result<()> {
    let cfg = load_config(g)?;
    let dataset = load(&cfg)?;
    let mut checkpoints: Vec<PathBuf> = Vec::new();
    if let Some(pattern) = &a.epoch_glob {
        for entry in glob::glob(pattern).map_err(|e| usage(format!("bad --epoch-glob: {e}")))? {
            checkpoints.push(entry.context("reading glob match")?);
        }
        if checkpoints.is_empty() {
            return Err(Error::MissingFile(PathBuf::from(pattern)).into());
        }
        checkpoints.sort_by_key(|p| (epoch_of(p), p.clone()));
    }
    let single = a.checkpoint.clone().or_else(|| checkpoints.last().cloned());
    let single = single.expect("clap requires --checkpoint or --epoch-glob");
    if checkpoints.is_empty() {
        checkpoints.push(single.clone());
    }
    let dir = out_dir(g, "analyze")?;
    echo_config(&dir, &cfg)?;
    let an = &cfg.analysis;

    if matches!(a.what, WhatArg::Similarity | WhatArg::Both) {
        let params = load_matching_checkpoint(&single, &dataset)?;
        let (zu, zv) = view_embeddings(&dataset, &params, &cfg.augment, an.seed)?;
        let pairs = all_layer_pairs(params.num_layers());
        let dists = similarity_distributions(&zu, &zv, &pairs, an.negatives_per_node, an.seed)?;
        export_similarity_csv(&dists, an.bins, &dir, "")?;
        let mut summary = String::from("m,n,median_positive,median_negative,separation\n");
        println!("{:>3} {:>3} {:>10} {:>10} {:>10}", "m", "n", "med_pos", "med_neg", "W1");
        for d in &dists {
            let (p, q, w) = (d.median_positive(), d.median_negative(), d.separation());
            println!("{:>3} {:>3} {p:>10.4} {q:>10.4} {w:>10.4}", d.m, d.n);
            summary.push_str(&format!("{},{},{p},{q},{w}\n", d.m, d.n));
        }
        write(&dir.join("similarity_summary.csv"), summary)?;
    }

    if matches!(a.what, WhatArg::Tstats | WhatArg::Both) {
        let tc = cfg.train_config();
        let topo = topo_for(&dataset, &tc, a.pae_cache.as_ref())?;
        let (table, _) = affinity_for(&dataset, &tc, topo)?;
        let mut fits = Vec::new();
        println!(
            "{:>6} {:>10} {:>10} {:>10} {:>10}",
            "epoch", "mean T_S", "P(T_S>0)", "mean T_D", "P(T_D>0)"
        );
        for (idx, path) in checkpoints.iter().enumerate() {
            let params = load_matching_checkpoint(path, &dataset)?;
            let epoch = epoch_of(path);
            let seed = an.seed.wrapping_add(epoch as u64);
            let (zu, zv) = view_embeddings(&dataset, &params, &cfg.augment, seed)?;
            let (sample, fit) = t_statistics(&zu, &zv, &table, an.tstat_samples, seed)?;
            println!(
                "{epoch:>6} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                fit.t_s.mean, fit.t_s.frac_positive, fit.t_d.mean, fit.t_d.frac_positive
            );
            if idx + 1 == checkpoints.len() {
                export_samples_csv(&sample, dir.join("tstat_samples.csv"))?;
            }
            fits.push((epoch, fit));
        }
        export_fits_csv(&fits, dir.join("tstat_fits.csv"))?;
    }
    Ok(())
}

fn stage_rows(r: &BenchmarkReport) -> [(&'static str, f64); 6] {
    let m = &r.median;
    [
        ("augment", m.augment),
        ("forward", m.forward),
        ("loss", m.loss),
        ("backward", m.backward),
        ("update", m.update),
        ("epoch", r.median_total),
    ]
}

pub fn benchmark(g: &GlobalArgs, a: &BenchmarkArgs) -> Result<()> {
    if a.epochs < muxgcl::trainer::BENCH_MIN_MEASURED {
        return Err(usage(format!(
            "--epochs {} is below the minimum of {} measured epochs (plus {} warm-up)",
            a.epochs,
            muxgcl::trainer::BENCH_MIN_MEASURED,
            muxgcl::trainer::BENCH_WARMUP
        )));
    }
    let cfg = load_config(g)?;
    let dataset = load(&cfg)?;
    let dir = out_dir(g, "benchmark")?;
    echo_config(&dir, &cfg)?;
    let mut mux = cfg.train_config();
    mux.loss.mode = LossMode::Mux;
    let mut grace = mux.clone();
    grace.loss.mode = LossMode::Grace;
    let topo = topo_for(&dataset, &mux, a.pae_cache.as_ref())?;
    let rm = benchmark_epoch(&dataset, &mux, a.epochs, topo)?;
    let rg = benchmark_epoch(&dataset, &grace, a.epochs, None)?;

    println!(
        "median seconds over {} epochs ({} warm-up), dataset {}",
        a.epochs,
        rm.warmup_epochs,
        dataset.name()
    );
    println!("{:<10} {:>12} {:>12}", "stage", "grace", "mux");
    for ((name, g), (_, m)) in stage_rows(&rg).into_iter().zip(stage_rows(&rm)) {
        println!("{name:<10} {g:>12.5} {m:>12.5}");
    }
    println!("{:<10} {:>12.3} {:>12.3}", "pae (once)", rg.pae_seconds, rm.pae_seconds);
    println!("ratio mux/grace: {:.2}", rm.median_total / rg.median_total);
    let report = json!({ "dataset": dataset.name(), "grace": rg, "mux": rm });
    write(&dir.join("benchmark.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

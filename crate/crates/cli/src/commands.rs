use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use dlab_core::diagnostics::{
    block_contrast, build_heatmaps, class_order_by_group, correlate_pt_omega, pt_histogram, truncate_rows_topk,
    write_records_csv, BlockContrast, HeatmapBundle,
};
use dlab_core::distill::{load_teacher_cache, save_teacher_cache, CacheKind, DistillConfig, Method, SoftScale};
use dlab_core::experiment::{
    kd_temperature, run_sweep, write_sweep_csv, BenchmarkConfig, CellReport, ResultStore, SweepPlan,
};
use dlab_core::mathcore::save_matrix;
use dlab_core::mlp::{load_checkpoint, save_checkpoint, Checkpoint};
use dlab_core::synthgen::{gen_dataset, load_dataset, save_dataset, Split, SyntheticSpec};
use dlab_core::trainer::{
    diagnostics_for, precompute_teacher, predict_probs, train as run_training, write_metrics_csv, RunInputs,
    TeacherInputs,
};
use ndarray::Array2;
use serde_json::json;

use crate::knobs::RunKnobs;
use crate::manifest::{read_manifest, Staged};
use crate::{env_seed, DiagnoseArgs, GenArgs, PrecomputeArgs, ReportArgs, SweepArgs, TrainArgs};

/// Outcome of a command that ran to completion.
pub enum Status {
    Clean,
    /// Outputs were written but something the user asked for did not finish.
    Flagged(String),
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn gen(a: GenArgs) -> Result<Status> {
    let seed = env_seed()?.unwrap_or(a.seed);
    let spec = SyntheticSpec::new(a.d, a.k, a.c, a.tau, a.m, a.n_train, a.n_valid, seed)?;
    let staged = Staged::new(&a.out)?;
    let (train, valid) = gen_dataset(&spec)?;
    save_dataset(&staged.path(&format!("{}.train.dset", a.name)), &train)?;
    save_dataset(&staged.path(&format!("{}.valid.dset", a.name)), &valid)?;
    write_json(&staged.path(&format!("{}.spec.json", a.name)), &spec)?;
    staged.commit("gen", serde_json::to_value(&spec)?, Some(seed))?;
    println!(
        "wrote {} train / {} valid examples to {}",
        train.len(),
        valid.len(),
        a.out.display()
    );
    Ok(Status::Clean)
}

pub fn train(a: TrainArgs, distill: bool) -> Result<Status> {
    let file_knobs = match &a.config {
        Some(path) => RunKnobs::from_file(path)?,
        None => RunKnobs::default(),
    };
    let mut knobs = a.knobs.clone().over(file_knobs)?;
    if let Some(seed) = env_seed()? {
        knobs.seed = Some(seed);
    }
    let train_ds = load_dataset(&a.train, Split::Train)?;
    let valid_ds = load_dataset(&a.valid, Split::Valid)?;
    let default_method = if distill { Method::Kd } else { Method::Ce };
    let cfg = knobs.resolve(train_ds.dim(), train_ds.k, train_ds.tau, default_method)?;
    let method = cfg.distill.method;
    if distill && a.teacher.is_none() {
        bail!("distill needs --teacher");
    }
    if method.needs_teacher() && a.teacher.is_none() {
        bail!("{method} needs a teacher checkpoint (--teacher); use `dlab distill`");
    }

    let staged = Staged::new(&a.out)?;
    let teacher = a.teacher.as_deref().map(load_checkpoint).transpose()?;
    let cache = match (&a.teacher_cache, method.cache_kind(cfg.distill.k), &teacher) {
        (Some(path), _, _) => Some(load_teacher_cache(path)?),
        (None, Some(kind), Some(t)) => {
            let kind = if cfg.diagnostics_enabled { CacheKind::Full } else { kind };
            Some(precompute_teacher(&t.params, &train_ds, kind)?)
        }
        (None, None, Some(t)) if cfg.diagnostics_enabled => Some(precompute_teacher(&t.params, &train_ds, CacheKind::Full)?),
        _ => None,
    };
    let inputs = RunInputs {
        train: &train_ds,
        valid: &valid_ds,
        teacher: TeacherInputs {
            cache: cache.as_ref(),
            logit_weights: teacher.as_ref().map(|t| t.params.logit_weights()),
        },
    };
    let out = run_training(&cfg, &inputs)?;

    save_checkpoint(
        &staged.path("best.ckpt"),
        &Checkpoint {
            params: out.best.clone(),
            step: out.best_step,
        },
    )?;
    save_checkpoint(
        &staged.path("last.ckpt"),
        &Checkpoint {
            params: out.last.clone(),
            step: out.updates,
        },
    )?;
    write_metrics_csv(create(&staged.path("metrics.csv"))?, &out.history)?;
    write_json(&staged.path("run.json"), &cfg)?;
    if !out.diagnostics.is_empty() {
        write_records_csv(create(&staged.path("diagnostics.csv"))?, &out.diagnostics)?;
    }
    write_json(
        &staged.path("summary.json"),
        &json!({
            "best_top1": out.best_accuracy,
            "best_step": out.best_step,
            "updates": out.updates,
        }),
    )?;
    let config = json!({
        "run": cfg,
        "train": a.train,
        "valid": a.valid,
        "teacher": a.teacher,
        "teacher_cache": a.teacher_cache,
    });
    staged.commit(if distill { "distill" } else { "train" }, config, Some(cfg.seed))?;
    println!(
        "{method}: best valid top-1 {:.4} at step {} ({} updates) -> {}",
        out.best_accuracy,
        out.best_step,
        out.updates,
        a.out.display()
    );
    Ok(Status::Clean)
}

fn parse_kind(kind: &str, k: usize) -> Result<CacheKind> {
    Ok(match kind {
        "full" => CacheKind::Full,
        "pt" => CacheKind::Pt,
        "topk" => CacheKind::TopK(k),
        _ => bail!("unknown cache kind {kind:?} (full, pt, topk)"),
    })
}

pub fn precompute(a: PrecomputeArgs) -> Result<Status> {
    let kind = parse_kind(&a.kind, a.topk)?;
    let teacher = load_checkpoint(&a.teacher)?;
    let data = load_dataset(&a.data, Split::Train)?;
    let staged = Staged::new(&a.out)?;
    let cache = precompute_teacher(&teacher.params, &data, kind)?;
    save_teacher_cache(&staged.path("teacher.dtch"), &cache)?;

    let full = CacheKind::Full.record_bytes(cache.n_classes);
    let payload = cache.payload_bytes_per_example();
    let mut w = csv::Writer::from_writer(create(&staged.path("storage.csv"))?);
    w.write_record([
        "kind",
        "classes",
        "examples",
        "payload_bytes_per_example",
        "full_bytes_per_example",
        "ratio_to_full",
        "file_bytes",
    ])?;
    w.write_record([
        kind.name(),
        cache.n_classes.to_string(),
        cache.len().to_string(),
        payload.to_string(),
        full.to_string(),
        (payload as f64 / full as f64).to_string(),
        cache.file_bytes().to_string(),
    ])?;
    w.flush()?;
    drop(w);
    staged.commit(
        "precompute",
        json!({ "teacher": a.teacher, "data": a.data, "kind": kind.name() }),
        None,
    )?;
    println!(
        "{}: {} bytes/example ({:.1}x smaller than full), {} examples -> {}",
        kind.name(),
        payload,
        full as f64 / payload as f64,
        cache.len(),
        a.out.display()
    );
    Ok(Status::Clean)
}

pub fn sweep(a: SweepArgs) -> Result<Status> {
    let b = &a.bench;
    let bench = BenchmarkConfig {
        d: b.d,
        k: b.k,
        c: b.c,
        m: b.m,
        n_train: b.n_train,
        n_valid: b.n_valid,
        teacher_hidden: b.teacher_hidden,
        student_hidden: b.student_hidden,
        batch_size: b.batch_size,
        steps: b.steps,
        eval_every: b.eval_every,
        lr: b.lr.unwrap_or(BenchmarkConfig::desk().lr),
    };
    bench.validate()?;
    let base = env_seed()?.unwrap_or(a.base_seed);
    let plan = SweepPlan {
        axis: a.axis.parse()?,
        values: a.values.clone(),
        methods: a.methods.clone(),
        tau: a.tau,
        seeds: (base..base + a.seeds).collect(),
    };
    let store = match &a.store {
        Some(dir) => ResultStore::at(dir, a.refresh)?,
        None => ResultStore::ephemeral(),
    };
    let staged = Staged::new(&a.out)?;
    let cells: Mutex<Vec<CellReport>> = Mutex::new(Vec::new());
    let progress = |r: &CellReport| {
        match &r.outcome {
            Ok(c) => eprintln!("{}={} {} seed {}: {:.4}", a.axis, r.axis_value, r.method, r.seed, c.best_accuracy),
            Err(e) => eprintln!("{}={} {} seed {}: FAILED {e}", a.axis, r.axis_value, r.method, r.seed),
        }
        cells.lock().expect("progress lock").push(r.clone());
    };
    let rows = run_sweep(&bench, &plan, &store, a.jobs, &progress)?;
    write_sweep_csv(create(&staged.path("sweep.csv"))?, plan.axis, &rows)?;

    let mut cells = cells.into_inner().expect("progress lock");
    cells.sort_by(|x, y| {
        (x.axis_value, x.method.name(), x.seed)
            .partial_cmp(&(y.axis_value, y.method.name(), y.seed))
            .expect("finite axis values")
    });
    let mut w = csv::Writer::from_writer(create(&staged.path("cells.csv"))?);
    w.write_record(["axis_value", "method", "seed", "best_top1", "best_step", "error"])?;
    for c in &cells {
        let (acc, step, err) = match &c.outcome {
            Ok(r) => (r.best_accuracy.to_string(), r.best_step.to_string(), String::new()),
            Err(e) => (String::new(), String::new(), e.clone()),
        };
        w.write_record([c.axis_value.to_string(), c.method.to_string(), c.seed.to_string(), acc, step, err])?;
    }
    w.flush()?;
    drop(w);
    staged.commit("sweep", json!({ "bench": bench, "plan": plan }), Some(base))?;

    println!("{:>8} {:>10} {:>8} {:>8} {:>5}", a.axis, "method", "mean", "std", "runs");
    for r in &rows {
        println!(
            "{:>8} {:>10} {:>8.4} {:>8.4} {:>5}",
            r.axis_value, r.method, r.mean, r.std, r.runs
        );
    }
    eprintln!("reused {} cached runs, trained {}", store.hits(), store.misses());
    let failed: usize = rows.iter().map(|r| r.failures.len()).sum();
    if failed > 0 {
        return Ok(Status::Flagged(format!("{failed} sweep cells failed; see cells.csv")));
    }
    Ok(Status::Clean)
}

fn heatmap_summary(h: &HeatmapBundle, groups: &[usize]) -> Result<(BlockContrast, serde_json::Value)> {
    let contrast = block_contrast(&h.pearson, groups)?;
    let value = json!({
        "intra": contrast.intra,
        "inter": contrast.inter,
        "inter_abs": contrast.inter_abs,
        "gap": contrast.gap(),
        "degenerate_classes": h.degenerate,
    });
    Ok((contrast, value))
}

pub fn diagnose(a: DiagnoseArgs) -> Result<Status> {
    let teacher = load_checkpoint(&a.teacher)?.params;
    let student = a.student.as_deref().map(load_checkpoint).transpose()?.map(|c| c.params);
    let data = load_dataset(&a.data, Split::Train)?;
    if teacher.config.k != data.k {
        bail!("teacher has {} classes, data has {}", teacher.config.k, data.k);
    }
    let temperature = a.temperature.unwrap_or_else(|| kd_temperature(data.tau));
    let scale = if a.raw_scale { SoftScale::Raw } else { SoftScale::TSquared };
    let cfg = DistillConfig::kd(a.lambda, temperature).with_scale(scale);
    cfg.validate()?;
    let staged = Staged::new(&a.out)?;
    let mut flags: Vec<String> = Vec::new();
    let mut summary = serde_json::Map::new();
    summary.insert("examples".into(), json!(data.len()));
    summary.insert("distill".into(), serde_json::to_value(&cfg)?);

    if let Some(student) = &student {
        let cache = precompute_teacher(&teacher, &data, CacheKind::Full)?;
        let records = diagnostics_for(student, &data, &cache, &cfg, a.limit)?;
        write_records_csv(create(&staged.path("records.csv"))?, &records)?;
        let corr = correlate_pt_omega(&records);
        if corr.r.is_none() {
            flags.push("p_tilde_t vs log omega_t correlation is degenerate".into());
        }
        let held: Vec<f64> = records
            .iter()
            .filter(|r| r.assumption_holds)
            .map(|r| (r.omega_sum_ratio - r.prop1_rhs).abs())
            .collect();
        summary.insert("pt_omega_correlation".into(), serde_json::to_value(corr)?);
        summary.insert(
            "rescaling_identity".into(),
            json!({
                "records": records.len(),
                "assumption_holds": held.len(),
                "max_abs_gap": held.iter().copied().fold(0.0f64, f64::max),
            }),
        );
    }

    let probs = predict_probs(&teacher, &data, 1.0)?;
    let groups = data.super_of();
    let order = class_order_by_group(&groups);
    let ordered_groups: Vec<usize> = order.iter().map(|&c| groups[c]).collect();
    let w = teacher.logit_weights();
    let full = build_heatmaps(probs.view(), w, &order, a.heatmap_temperature)?;
    save_matrix(&staged.path("heatmap_pearson.mat"), full.pearson.view())?;
    save_matrix(&staged.path("heatmap_cosine.mat"), full.cosine.view())?;
    fs::write(
        staged.path("class_order.csv"),
        "position,class,group\n".to_string()
            + &order
                .iter()
                .enumerate()
                .map(|(i, &c)| format!("{i},{c},{}\n", groups[c]))
                .collect::<String>(),
    )?;
    let (_, value) = heatmap_summary(&full, &ordered_groups)?;
    if !full.degenerate.is_empty() {
        flags.push(format!("{} classes have constant teacher probability", full.degenerate.len()));
    }
    summary.insert("heatmap".into(), value);
    summary.insert("heatmap_temperature".into(), json!(a.heatmap_temperature));
    if let Some(k) = a.topk {
        let truncated: Array2<f64> = truncate_rows_topk(probs.view(), k)?;
        let top = build_heatmaps(truncated.view(), w, &order, a.heatmap_temperature)?;
        save_matrix(&staged.path(&format!("heatmap_top{k}_pearson.mat")), top.pearson.view())?;
        let (_, value) = heatmap_summary(&top, &ordered_groups)?;
        summary.insert(format!("heatmap_top{k}"), value);
    }

    let pt: Vec<f64> = probs
        .rows()
        .into_iter()
        .zip(&data.labels)
        .map(|(row, &t)| row[t as usize])
        .collect();
    let hist = pt_histogram(&pt, a.bins)?;
    hist.write_csv(create(&staged.path("pt_histogram.csv"))?)?;
    summary.insert("pt".into(), json!({ "mean": hist.mean, "variance": hist.variance }));
    summary.insert("flags".into(), json!(flags));
    write_json(&staged.path("summary.json"), &summary)?;
    staged.commit(
        "diagnose",
        json!({ "teacher": a.teacher, "student": a.student, "data": a.data, "distill": cfg }),
        None,
    )?;
    for f in &flags {
        eprintln!("note: {f}");
    }
    println!("diagnostics -> {}", a.out.display());
    Ok(Status::Clean)
}

fn best_from_metrics(path: &Path) -> Result<Option<f64>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut r = csv::Reader::from_path(path)?;
    let col = r
        .headers()?
        .iter()
        .position(|h| h == "valid_top1")
        .context("metrics file has no valid_top1 column")?;
    let mut best: Option<f64> = None;
    for rec in r.records() {
        let v: f64 = rec?[col].parse()?;
        best = Some(best.map_or(v, |b: f64| b.max(v)));
    }
    Ok(best)
}

fn copy_tree(from: &Path, to: &Path) -> Result<usize> {
    fs::create_dir_all(to)?;
    let mut n = 0;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        let dest = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            n += copy_tree(&entry.path(), &dest)?;
        } else {
            fs::copy(entry.path(), &dest)?;
            n += 1;
        }
    }
    Ok(n)
}

pub fn report(a: ReportArgs) -> Result<Status> {
    let manifests = a
        .runs
        .iter()
        .map(|dir| read_manifest(dir).map(|m| (dir, m)))
        .collect::<Result<Vec<_>>>()?;
    let staged = Staged::new(&a.out)?;
    let mut w = csv::Writer::from_writer(create(&staged.path("index.csv"))?);
    w.write_record(["run", "subcommand", "seed", "files", "best_top1"])?;
    for (i, (dir, m)) in manifests.iter().enumerate() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        let slot = format!("{i:02}-{name}");
        let files = copy_tree(dir, &staged.path(&slot))?;
        let best = best_from_metrics(&dir.join("metrics.csv"))?;
        w.write_record([
            slot,
            m.subcommand.clone(),
            m.seed.map(|s| s.to_string()).unwrap_or_default(),
            files.to_string(),
            best.map(|b| b.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    drop(w);
    staged.commit("report", json!({ "runs": a.runs }), None)?;
    println!("report of {} runs -> {}", manifests.len(), a.out.display());
    Ok(Status::Clean)
}

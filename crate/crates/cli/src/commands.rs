use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use forget::als::{self, ConfidencePolicy, FactorModel, PassRecord};
use forget::audit::{self, AuditCell, VulnerabilityRecord, VULNERABILITY_HEADER};
use forget::data::{self, RemovalSet};
use forget::eval::{self, CurvePoint, EvalSet, SweepConfig, SweepMode, CURVE_HEADER};
use forget::model_io;
use forget::unlearn::{self, DowndateCache, UnlearnRequest, UnlearnSolver};
use serde::{Deserialize, Serialize};

use crate::artifacts::{input_entry, sha256_hex, ArtifactEntry, ManifestParts, OutDir, Stages};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline::{self, coords_tsv, Dataset};

pub const MODEL_FILE: &str = "model.fgt";
pub const CURVE_FILE: &str = "curve.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.jsonl";
pub const REMOVAL_FILE: &str = "removal.tsv";
pub const CELLS_FILE: &str = "cells.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const VULNERABILITY_FILE: &str = "vulnerability.csv";
pub const SWEEP_FILE: &str = "curves.csv";
pub const BENCH_FILE: &str = "bench.csv";
pub const BENCH_SUMMARY_FILE: &str = "bench.json";

/// Everything a command needs besides its own arguments.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub sequential: bool,
    pub out: Option<PathBuf>,
}

impl Ctx {
    fn parallel(&self) -> bool {
        !self.sequential
    }

    fn out_root(&self) -> CliResult<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::config("--out is required for this command".into()))
    }

    fn fresh_out(&self) -> CliResult<OutDir> {
        OutDir::fresh(self.out_root()?)
    }

    fn finish(&self, out: OutDir, command: &str, ds: Option<&Dataset>, inputs: Vec<ArtifactEntry>, stages: Stages) -> CliResult<()> {
        let root = self.out_root()?.display().to_string();
        out.finish(
            ManifestParts {
                command,
                sequential: self.sequential,
                config: &self.cfg,
                dataset: ds.map(|d| &d.info),
                inputs,
            },
            stages,
        )?;
        println!("{command}: wrote {root}");
        Ok(())
    }
}

fn csv(header: &str, rows: impl IntoIterator<Item = String>) -> Vec<u8> {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row);
        out.push('\n');
    }
    out.into_bytes()
}

fn jsonl<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("row serializes");
        out.push(b'\n');
    }
    out
}

/// One per-pass diagnostics line.
#[derive(Debug, Serialize)]
struct PassDiagnostics {
    #[serde(flatten)]
    record: PassRecord,
    auc: f64,
}

/// Per-pass curve and diagnostics of a run, filled from its pass callback.
struct Tracker<'a> {
    eval: &'a EvalSet,
    mode: SweepMode,
    fraction: f64,
    seed: u64,
    elapsed: f64,
    curve: Vec<CurvePoint>,
    diagnostics: Vec<PassDiagnostics>,
}

impl<'a> Tracker<'a> {
    fn new(eval: &'a EvalSet, mode: SweepMode, fraction: f64, seed: u64) -> Self {
        Tracker {
            eval,
            mode,
            fraction,
            seed,
            elapsed: 0.0,
            curve: Vec::new(),
            diagnostics: Vec::new(),
        }
    }

    fn point(&mut self, passes: usize, loss: f64, model: &FactorModel) -> forget::Result<f64> {
        let auc = eval::evaluate_model(model, self.eval)?;
        self.curve.push(CurvePoint {
            mode: self.mode,
            fraction: self.fraction,
            passes,
            seed: self.seed,
            auc,
            loss,
            wall_time_s: self.elapsed,
        });
        Ok(auc)
    }

    fn on_pass(&mut self, r: &PassRecord, model: &FactorModel) -> forget::Result<()> {
        self.elapsed += r.wall_time_s;
        let auc = self.point(r.pass, r.loss, model)?;
        log::info!("pass {}: loss {:.6e} auc {auc:.4}", r.pass, r.loss);
        self.diagnostics.push(PassDiagnostics { record: r.clone(), auc });
        Ok(())
    }

    fn write(&self, out: &mut OutDir) -> CliResult<()> {
        out.write(CURVE_FILE, &csv(CURVE_HEADER, self.curve.iter().map(CurvePoint::csv_row)))?;
        out.write(DIAGNOSTICS_FILE, &jsonl(&self.diagnostics))
    }
}

pub fn ingest(ctx: &Ctx) -> CliResult<()> {
    let mut out = ctx.fresh_out()?;
    let mut stages = Stages::default();
    let ds = stages.time("load", || pipeline::load(&ctx.cfg))?;
    stages.time("write", || -> CliResult<()> {
        out.write("train.tsv", &coords_tsv(ds.split.train.coords()))?;
        out.write("test.tsv", &coords_tsv(ds.split.test_positives.iter().copied()))?;
        if let Some(ids) = &ds.ids {
            out.ensure()?;
            ids.write_sidecars(&out.path(""))?;
            out.register("users.map")?;
            out.register("items.map")?;
        }
        Ok(())
    })?;
    ctx.finish(out, "ingest", Some(&ds), Vec::new(), stages)
}

pub fn train(ctx: &Ctx) -> CliResult<()> {
    let hp = ctx.cfg.hyperparams(ctx.parallel())?;
    let mut out = ctx.fresh_out()?;
    let mut stages = Stages::default();
    let ds = stages.time("load", || pipeline::load(&ctx.cfg))?;
    let eval = stages.time("negatives", || pipeline::eval_set(&ds, &ctx.cfg))?;
    let mut tracker = Tracker::new(&eval, SweepMode::Retrain, 0.0, ctx.cfg.seeds.base);
    let fit = stages.time("train", || {
        als::train_als_with(&ds.split.train, &hp, ctx.cfg.seeds.init(), |r, m| tracker.on_pass(r, m))
    })?;
    log::info!("trained {} passes (converged: {})", fit.model.passes_run, fit.converged);
    out.write(MODEL_FILE, &model_io::encode(&fit.model))?;
    tracker.write(&mut out)?;
    ctx.finish(out, "train", Some(&ds), Vec::new(), stages)
}

fn removal_for(ctx: &Ctx, ds: &Dataset) -> CliResult<RemovalSet> {
    let removal = pipeline::removal(&ctx.cfg, &ds.split.train)?;
    log::info!("removing {} of {} training positives", removal.len(), ds.split.train.len());
    Ok(removal)
}

pub fn retrain(ctx: &Ctx) -> CliResult<()> {
    let hp = ctx.cfg.hyperparams(ctx.parallel())?;
    let mut out = ctx.fresh_out()?;
    let mut stages = Stages::default();
    let ds = stages.time("load", || pipeline::load(&ctx.cfg))?;
    let eval = stages.time("negatives", || pipeline::eval_set(&ds, &ctx.cfg))?;
    let removal = removal_for(ctx, &ds)?;
    let (remaining, _) = unlearn::apply_deletion(&ds.split.train, &ConfidencePolicy::new(hp.scheme), &removal)?;
    let mut tracker = Tracker::new(&eval, SweepMode::Retrain, removal.fraction, ctx.cfg.seeds.base);
    let fit = stages.time("retrain", || {
        als::train_als_with(&remaining, &hp, ctx.cfg.seeds.init(), |r, m| tracker.on_pass(r, m))
    })?;
    out.write(MODEL_FILE, &model_io::encode(&fit.model))?;
    out.write(REMOVAL_FILE, &coords_tsv(removal.coords.iter().copied()))?;
    tracker.write(&mut out)?;
    ctx.finish(out, "retrain", Some(&ds), Vec::new(), stages)
}

fn load_model(path: &Path, ds: &Dataset) -> CliResult<FactorModel> {
    let model = model_io::load(path)?;
    model.check_shape(&ds.split.train)?;
    Ok(model)
}

pub fn untrain(ctx: &Ctx, model_path: &Path) -> CliResult<()> {
    let mut out = ctx.fresh_out()?;
    let mut stages = Stages::default();
    let ds = stages.time("load", || pipeline::load(&ctx.cfg))?;
    let base = load_model(model_path, &ds)?;
    let inputs = vec![input_entry(model_path)?];
    let eval = stages.time("negatives", || pipeline::eval_set(&ds, &ctx.cfg))?;
    let removal = removal_for(ctx, &ds)?;
    let req = UnlearnRequest {
        base_model: &base,
        train: &ds.split.train,
        removal: &removal,
        untrain_passes: ctx.cfg.unlearn.passes,
        solver: ctx.cfg.unlearn_solver(),
        tolerance: ctx.cfg.unlearn.tolerance,
        parallel: ctx.parallel(),
    };
    let mut tracker = Tracker::new(&eval, SweepMode::Untrain, removal.fraction, ctx.cfg.seeds.base);
    let remaining_loss = |m: &FactorModel| unlearn::untrain_loss(m, &ds.split.train, &removal, &m.policy());
    tracker.point(0, remaining_loss(&base), &base)?;
    let fit = stages.time("untrain", || unlearn::untrain_als_with(&req, |r, m| tracker.on_pass(r, m)))?;
    let fallbacks: usize = fit.history.iter().map(|r| r.fallbacks).sum();
    if fallbacks > 0 {
        log::warn!("{fallbacks} rows fell back to a direct solve");
    }
    out.write(MODEL_FILE, &model_io::encode(&fit.model))?;
    out.write(REMOVAL_FILE, &coords_tsv(removal.coords.iter().copied()))?;
    tracker.write(&mut out)?;
    ctx.finish(out, "untrain", Some(&ds), inputs, stages)
}

#[derive(Debug, Serialize)]
struct ModelEval {
    model: String,
    auc: f64,
    train_loss: f64,
    positives: usize,
    negatives: usize,
    passes_run: usize,
}

pub fn eval_model(ctx: &Ctx, model_path: &Path) -> CliResult<()> {
    let out = ctx.out.as_deref().map(OutDir::fresh).transpose()?;
    let mut stages = Stages::default();
    let ds = stages.time("load", || pipeline::load(&ctx.cfg))?;
    let model = load_model(model_path, &ds)?;
    let eval = stages.time("negatives", || pipeline::eval_set(&ds, &ctx.cfg))?;
    let report = ModelEval {
        model: model_path.display().to_string(),
        auc: stages.time("score", || eval::evaluate_model(&model, &eval))?,
        train_loss: als::als_loss(&model, &ds.split.train, &model.policy()),
        positives: eval.positives.len(),
        negatives: eval.negatives.len(),
        passes_run: model.passes_run,
    };
    let text = serde_json::to_string(&report).expect("report serializes");
    println!("{text}");
    if let Some(mut out) = out {
        out.write("eval.json", format!("{text}\n").as_bytes())?;
        ctx.finish(out, "eval", Some(&ds), vec![input_entry(model_path)?], stages)?;
    }
    Ok(())
}

pub fn eval_sweep(ctx: &Ctx) -> CliResult<()> {
    let hp = ctx.cfg.hyperparams(ctx.parallel())?;
    let mut out = ctx.fresh_out()?;
    let mut stages = Stages::default();
    let ds = stages.time("load", || pipeline::load(&ctx.cfg))?;
    let eval = stages.time("negatives", || pipeline::eval_set(&ds, &ctx.cfg))?;
    let s = &ctx.cfg.sweep;
    let cfg = SweepConfig {
        mode: s.mode,
        fractions: s.fractions.clone(),
        pass_grid: s.pass_grid.clone(),
        hp,
        seeds: s.seeds.clone(),
        untrain_solver: ctx.cfg.unlearn_solver(),
        parallel_cells: ctx.parallel(),
    };
    let points = stages.time("sweep", || eval::convergence_sweep(&ds.split, &eval, &cfg))?;
    out.write(SWEEP_FILE, &csv(CURVE_HEADER, points.iter().map(CurvePoint::csv_row)))?;
    ctx.finish(out, "eval", Some(&ds), Vec::new(), stages)
}

/// A finished audit cell, as persisted for resumption.
#[derive(Debug, Serialize, Deserialize)]
struct CellLine {
    key: String,
    config: String,
    record: VulnerabilityRecord,
}

#[derive(Debug, Serialize)]
struct CellFailure<'a> {
    key: String,
    kind: &'a str,
    error: String,
}

/// Hash of everything besides the grids that a cell's outcome depends on.
fn audit_config_hash(cfg: &ExperimentConfig) -> String {
    let relevant = serde_json::json!({
        "data": cfg.data,
        "model": cfg.model,
        "unlearn_solver": cfg.unlearn.solver,
        "seeds": cfg.seeds,
    });
    sha256_hex(relevant.to_string().as_bytes())[..16].to_string()
}

fn completed_cells(path: &Path, config: &str) -> CliResult<HashMap<String, VulnerabilityRecord>> {
    let mut done = HashMap::new();
    let Ok(file) = fs::File::open(path) else {
        return Ok(done);
    };
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        // a torn final line from an interrupted write is simply redone
        let Ok(cell) = serde_json::from_str::<CellLine>(&line) else {
            log::warn!("{}:{}: unreadable cell record skipped", path.display(), idx + 1);
            continue;
        };
        if cell.config != config {
            return Err(CliError::new(
                "resume_mismatch",
                format!("{} was produced under a different configuration", path.display()),
            ));
        }
        done.insert(cell.key, cell.record);
    }
    Ok(done)
}

pub fn audit(ctx: &Ctx, resume: bool) -> CliResult<()> {
    let hp = ctx.cfg.hyperparams(ctx.parallel())?;
    let root = ctx.out_root()?;
    let mut out = if resume { OutDir::reuse(root)? } else { OutDir::fresh(root)? };
    let mut stages = Stages::default();
    let ds = stages.time("load", || pipeline::load(&ctx.cfg))?;
    let s = &ctx.cfg.sweep;
    if s.fractions.is_empty() || s.train_passes.is_empty() || s.untrain_passes.is_empty() || s.seeds.is_empty() {
        return Err(CliError::config("audit grids must be non-empty".into()));
    }
    let cells = audit::audit_cells(&s.fractions, &s.train_passes, &s.untrain_passes, &s.seeds);
    let config = audit_config_hash(&ctx.cfg);
    let cells_path = out.path(CELLS_FILE);
    let mut done = completed_cells(&cells_path, &config)?;
    let todo: Vec<AuditCell> = cells.iter().filter(|c| !done.contains_key(&c.key())).copied().collect();
    if todo.len() < cells.len() {
        log::info!("resuming: {} of {} cells already complete", cells.len() - todo.len(), cells.len());
    }
    out.ensure()?;
    let sink = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&cells_path)
        .map_err(|e| CliError::io(&cells_path, e))?;
    let sink = Mutex::new(sink);
    let solver = ctx.cfg.unlearn_solver();
    let results = stages.time("audit", || {
        audit::audit_sweep(&ds.split, &todo, &hp, solver, ctx.parallel(), |cell, res| {
            let Ok(record) = res else { return };
            let line = CellLine {
                key: cell.key(),
                config: config.clone(),
                record: record.clone(),
            };
            let mut text = serde_json::to_string(&line).expect("cell serializes");
            text.push('\n');
            let mut f = sink.lock().expect("sink lock");
            if let Err(e) = f.write_all(text.as_bytes()).and_then(|_| f.flush()) {
                log::error!("could not persist cell {}: {e}", line.key);
            }
        })
    });
    let mut failures = Vec::new();
    for (cell, res) in results {
        match res {
            Ok(record) => {
                done.insert(cell.key(), record);
            }
            Err(e) => failures.push(CellFailure {
                key: cell.key(),
                kind: e.kind(),
                error: e.to_string(),
            }),
        }
    }
    let rows: Vec<String> = cells.iter().filter_map(|c| done.get(&c.key())).map(|r| r.csv_row()).collect();
    out.write(VULNERABILITY_FILE, &csv(VULNERABILITY_HEADER, rows))?;
    out.register(CELLS_FILE)?;
    let failures_path = out.path(FAILURES_FILE);
    if failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path).map_err(|e| CliError::io(&failures_path, e))?;
        }
    } else {
        out.write(FAILURES_FILE, &jsonl(&failures))?;
    }
    ctx.finish(out, "audit", Some(&ds), Vec::new(), stages)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(
            "partial",
            format!("{} of {} cells failed; see {FAILURES_FILE}", failures.len(), cells.len()),
        ))
    }
}

#[derive(Debug, Clone, Serialize)]
struct BenchRow {
    k: usize,
    deletions: usize,
    repeats: usize,
    plain_pass_s: f64,
    direct_pass_s: f64,
    direct_user_half_s: f64,
    downdate_pass_s: f64,
    downdate_user_half_s: f64,
    downdate_fallbacks: usize,
    downdate_refreshes: usize,
}

const BENCH_HEADER: &str = "k,deletions,repeats,plain_pass_s,direct_pass_s,direct_user_half_s,downdate_pass_s,downdate_user_half_s,downdate_fallbacks,downdate_refreshes";

impl BenchRow {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.k,
            self.deletions,
            self.repeats,
            self.plain_pass_s,
            self.direct_pass_s,
            self.direct_user_half_s,
            self.downdate_pass_s,
            self.downdate_user_half_s,
            self.downdate_fallbacks,
            self.downdate_refreshes
        )
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Least-squares slope of `ln t` against `ln k`.
pub fn log_log_slope(ks: &[usize], ts: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = ks
        .iter()
        .zip(ts)
        .filter(|(_, &t)| t > 0.0)
        .map(|(&k, &t)| ((k as f64).ln(), t.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Debug, Serialize)]
struct BenchSummary {
    k_grid: Vec<usize>,
    slope_direct_user_half: Option<f64>,
    slope_downdate_user_half: Option<f64>,
    slope_direct_pass: Option<f64>,
    slope_downdate_pass: Option<f64>,
    total_fallbacks: usize,
}

fn bench_k(ctx: &Ctx, ds: &Dataset, k: usize) -> CliResult<BenchRow> {
    let b = &ctx.cfg.bench;
    let hp = forget::Hyperparams {
        k,
        max_passes: b.base_passes,
        tolerance: 0.0,
        ..ctx.cfg.hyperparams(ctx.parallel())?
    };
    let train = &ds.split.train;
    let base = als::train_als(train, &hp, ctx.cfg.seeds.init())?.model;
    let removal = data::sample_removal_count(train, b.deletions, ctx.cfg.seeds.removal())?;
    let mut req = UnlearnRequest::new(&base, train, &removal, 1);
    req.parallel = hp.parallel;
    let cache = DowndateCache::build(&base, train, hp.parallel)?;
    let policy = base.policy();
    let opts = als::RunOptions {
        max_passes: 1,
        tolerance: 0.0,
        solver: als::Solver::Direct,
        parallel: hp.parallel,
    };
    let (mut plain, mut direct, mut direct_user, mut down, mut down_user) = (vec![], vec![], vec![], vec![], vec![]);
    let (mut fallbacks, mut refreshes) = (0, 0);
    for _ in 0..b.repeats.max(1) {
        let mut m = base.clone();
        let (h, _) = als::run_passes(&mut m, train, &policy, opts, |_, _| Ok(()))?;
        plain.push(h[0].wall_time_s);

        req.solver = UnlearnSolver::Direct;
        let fit = unlearn::untrain_als(&req)?;
        direct.push(fit.history[0].wall_time_s);
        direct_user.push(fit.history[0].user_half_s);

        let (_, r) = unlearn::untrain_pass_downdate(&req, &cache)?;
        down.push(r.wall_time_s);
        down_user.push(r.user_half_s);
        fallbacks = r.fallbacks;
        refreshes = r.refreshes;
    }
    let row = BenchRow {
        k,
        deletions: removal.len(),
        repeats: b.repeats.max(1),
        plain_pass_s: median(plain),
        direct_pass_s: median(direct),
        direct_user_half_s: median(direct_user),
        downdate_pass_s: median(down),
        downdate_user_half_s: median(down_user),
        downdate_fallbacks: fallbacks,
        downdate_refreshes: refreshes,
    };
    log::info!(
        "k={k}: user half direct {:.4}s, downdate {:.4}s",
        row.direct_user_half_s,
        row.downdate_user_half_s
    );
    Ok(row)
}

pub fn bench(ctx: &Ctx) -> CliResult<()> {
    ctx.cfg.hyperparams(ctx.parallel())?;
    let b = &ctx.cfg.bench;
    if b.k_grid.is_empty() || b.k_grid.contains(&0) || b.base_passes == 0 {
        return Err(CliError::config("bench.k_grid must hold positive ranks and bench.base_passes must be >= 1".into()));
    }
    let mut out = ctx.fresh_out()?;
    let mut stages = Stages::default();
    let ds = stages.time("load", || pipeline::load(&ctx.cfg))?;
    let rows = stages.time("bench", || b.k_grid.iter().map(|&k| bench_k(ctx, &ds, k)).collect::<CliResult<Vec<_>>>())?;
    let slope = |f: fn(&BenchRow) -> f64| log_log_slope(&b.k_grid, &rows.iter().map(f).collect::<Vec<_>>());
    let summary = BenchSummary {
        k_grid: b.k_grid.clone(),
        slope_direct_user_half: slope(|r| r.direct_user_half_s),
        slope_downdate_user_half: slope(|r| r.downdate_user_half_s),
        slope_direct_pass: slope(|r| r.direct_pass_s),
        slope_downdate_pass: slope(|r| r.downdate_pass_s),
        total_fallbacks: rows.iter().map(|r| r.downdate_fallbacks).sum(),
    };
    out.write(BENCH_FILE, &csv(BENCH_HEADER, rows.iter().map(BenchRow::csv_row)))?;
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    out.write(BENCH_SUMMARY_FILE, format!("{text}\n").as_bytes())?;
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    ctx.finish(out, "bench", Some(&ds), Vec::new(), stages)
}

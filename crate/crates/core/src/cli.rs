//! Command implementations behind the `m2repa` binary: training, evaluation,
//! ablation tables, sweeps and feature export. Every command writes only
//! into its `--out` directory, and identical inputs give identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use nalgebra::{DMatrix, SymmetricEigen};

use crate::align::linear_cka_value;
use crate::backbone::Backbone;
use crate::config;
use crate::error::{Error, Result};
use crate::experts::Modality;
use crate::flowmatch::VelocityModel;
use crate::format::{write_tensor_file, Bundle};
use crate::numcore::{Graph, Tensor};
use crate::params::Binder;
use crate::synthworld::clip_from_seed;
use crate::trainer::{run_parallel, sweep, worker_threads, Horizon, MetricRow, RunReport, StepRecord, SweepAxis, TrainConfig, Trainer, Variant};

pub const LOSS_CSV_HEADER: &str = "step,fm,align,decouple,total,lambda_align,lambda_decouple,mixing_error";
pub const METRIC_CSV_HEADER: &str = "variant,horizon,psnr,ssim,abs_rel,delta1,miou,matched_fraction";
pub const ABLATION_CSV_HEADER: &str = "variant,seed,psnr,ssim,abs_rel,delta1,miou,matched_fraction,proj_cka,final_total";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.display().to_string(), source }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

/// Loads `path`, or the defaults when absent.
pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => config::load(p),
        None => Ok(TrainConfig::default()),
    }
}

pub fn loss_csv(history: &[StepRecord]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in history {
        let l = &r.loss;
        writeln!(s, "{},{},{},{},{},{},{},{}", r.step, l.fm, l.align, l.decouple, l.total, l.lambda_align, l.lambda_decouple, r.mixing_error).unwrap();
    }
    s
}

pub fn metric_csv_row(variant: Variant, horizon: Horizon, m: &MetricRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        variant.name(),
        horizon.name(),
        m.psnr,
        m.ssim,
        m.abs_rel,
        m.delta1,
        m.miou,
        m.matched_fraction
    )
}

pub fn metric_csv(variant: Variant, horizon: Horizon, m: &MetricRow) -> String {
    format!("{METRIC_CSV_HEADER}\n{}\n", metric_csv_row(variant, horizon, m))
}

/// Plain-text run summary. Wall-clock time is logged, not written, so the
/// file is reproducible.
pub fn summary_text(r: &RunReport) -> String {
    let c = &r.config;
    let on_off = |b: bool| if b { "enabled" } else { "disabled" };
    let experts: Vec<&str> = c.variant.experts().iter().map(|m| m.name()).collect();
    let mut s = String::new();
    writeln!(s, "variant: {}", c.variant.name()).unwrap();
    writeln!(s, "seed: {}", c.seed).unwrap();
    writeln!(s, "steps: {}", r.history.len()).unwrap();
    writeln!(s, "code hash: {}", r.code_hash).unwrap();
    writeln!(s, "align: {} (lambda {}, experts [{}])", on_off(!experts.is_empty()), c.align.lambda_align, experts.join(", ")).unwrap();
    writeln!(
        s,
        "decouple: {} (lambda {}, kind {:?})",
        on_off(c.variant.decouple() != crate::trainer::Decouple::None),
        c.align.lambda_decouple,
        c.variant.decouple()
    )
    .unwrap();
    if let Some(last) = r.history.last() {
        let l = &last.loss;
        writeln!(s, "final loss: fm {} align {} decouple {} total {}", l.fm, l.align, l.decouple, l.total).unwrap();
    }
    let n = r.history.len();
    if n >= 16 {
        writeln!(s, "mean total steps 5-15: {}", r.mean_total(5..16)).unwrap();
        writeln!(s, "mean total last 10: {}", r.mean_total(n - 10..n)).unwrap();
    }
    if let Some(m) = &r.metrics {
        writeln!(s, "{METRIC_CSV_HEADER}\n{}", metric_csv_row(c.variant, c.eval.horizon, m)).unwrap();
    }
    match r.projected_cka {
        Some(v) => writeln!(s, "projected mean pairwise CKA: {v}").unwrap(),
        None => writeln!(s, "projected mean pairwise CKA: n/a").unwrap(),
    }
    let sums: Vec<String> = r.expert_checksums.iter().map(|c| format!("{c:016x}")).collect();
    writeln!(s, "expert checksums: {}", sums.join(" ")).unwrap();
    s.push_str("\n# config\n");
    s.push_str(&config::to_text(c));
    s
}

/// Writes `checkpoint.m2rp`, `loss.csv`, `metrics.csv` and `summary.txt`.
pub fn write_run(trainer: &Trainer<f32>, report: &RunReport, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    trainer.checkpoint()?.save(&out.join("checkpoint.m2rp"))?;
    write_file(&out.join("loss.csv"), loss_csv(&report.history))?;
    if let Some(m) = &report.metrics {
        write_file(&out.join("metrics.csv"), metric_csv(report.config.variant, report.config.eval.horizon, m))?;
    }
    write_file(&out.join("summary.txt"), summary_text(report))
}

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub seed: Option<u64>,
    pub variant: Option<&'a str>,
    pub steps: Option<usize>,
    pub out: &'a Path,
}

pub fn cmd_train(a: &TrainArgs) -> Result<RunReport> {
    let mut cfg = load_config(a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.variant {
        cfg.variant = Variant::parse(v)?;
    }
    if let Some(n) = a.steps {
        cfg.steps = n;
    }
    let mut trainer = Trainer::<f32>::new(cfg)?;
    let report = trainer.run_loop()?;
    info!("trained {} steps in {:.1}s", report.history.len(), report.wall_clock_secs);
    write_run(&trainer, &report, a.out)?;
    Ok(report)
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer<f32>> {
    Trainer::<f32>::from_checkpoint(&Bundle::load(path)?)
}

/// Evaluates a checkpoint and writes `eval_{horizon}.csv`.
pub fn cmd_eval(checkpoint: &Path, horizon: Horizon, out: &Path) -> Result<MetricRow> {
    let trainer = load_checkpoint(checkpoint)?;
    let m = trainer.evaluate(horizon)?;
    ensure_dir(out)?;
    write_file(&out.join(format!("eval_{}.csv", horizon.name())), metric_csv(trainer.config.variant, horizon, &m))?;
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: MetricRow,
    pub proj_cka: Option<f64>,
    pub final_total: f64,
}

/// Per-variant means over seeds; `proj_cka` is absent for variants without
/// two projectors.
#[derive(Clone, Debug)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub means: Vec<AblationRow>,
}

impl AblationTable {
    pub fn mean_for(&self, v: Variant) -> Option<&AblationRow> {
        self.means.iter().find(|r| r.variant == v)
    }
}

fn mean_row(variant: Variant, rows: &[&AblationRow]) -> AblationRow {
    let n = rows.len() as f64;
    let avg = |f: &dyn Fn(&AblationRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    AblationRow {
        variant,
        seed: 0,
        metrics: MetricRow {
            psnr: avg(&|r| r.metrics.psnr),
            ssim: avg(&|r| r.metrics.ssim),
            abs_rel: avg(&|r| r.metrics.abs_rel),
            delta1: avg(&|r| r.metrics.delta1),
            miou: avg(&|r| r.metrics.miou),
            matched_fraction: avg(&|r| r.metrics.matched_fraction),
        },
        proj_cka: if rows.iter().all(|r| r.proj_cka.is_some()) { Some(avg(&|r| r.proj_cka.unwrap())) } else { None },
        final_total: avg(&|r| r.final_total),
    }
}

fn ablation_line(r: &AblationRow, seed: &str) -> String {
    let m = &r.metrics;
    let cka = r.proj_cka.map_or("na".to_string(), |v| v.to_string());
    format!(
        "{},{seed},{},{},{},{},{},{},{cka},{}",
        r.variant.name(),
        m.psnr,
        m.ssim,
        m.abs_rel,
        m.delta1,
        m.miou,
        m.matched_fraction,
        r.final_total
    )
}

pub fn ablation_csv(t: &AblationTable) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for v in Variant::ALL {
        for r in t.rows.iter().filter(|r| r.variant == v) {
            writeln!(s, "{}", ablation_line(r, &r.seed.to_string())).unwrap();
        }
        if let Some(m) = t.mean_for(v) {
            writeln!(s, "{}", ablation_line(m, "mean")).unwrap();
        }
    }
    s
}

/// The seven-row comparison table of seed means.
pub fn ablation_means_csv(t: &AblationTable) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for m in &t.means {
        writeln!(s, "{}", ablation_line(m, "mean")).unwrap();
    }
    s
}

/// Trains every variant for every seed (concurrently, capped by
/// `M2REPA_THREADS`); each seed also fixes that run's data split.
pub fn run_ablation(base: &TrainConfig, seeds: &[u64], out: Option<&Path>) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let jobs: Vec<(Variant, u64)> = Variant::ALL.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let results = run_parallel(jobs.len(), worker_threads(), |i| -> Result<AblationRow> {
        let (variant, seed) = jobs[i];
        let wrap = |e: Error| Error::Run { variant: variant.name().to_string(), seed, source: Box::new(e) };
        let mut cfg = base.clone();
        cfg.variant = variant;
        cfg.seed = seed;
        let mut trainer = Trainer::<f32>::new(cfg).map_err(wrap)?;
        let report = trainer.run_loop().map_err(wrap)?;
        if let Some(dir) = out {
            write_run(&trainer, &report, &dir.join(format!("{}-seed{seed}", variant.name()))).map_err(wrap)?;
        }
        Ok(AblationRow {
            variant,
            seed,
            metrics: report.metrics.expect("run_loop evaluates"),
            proj_cka: report.projected_cka,
            final_total: report.history.last().map_or(f64::NAN, |r| r.loss.total),
        })
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let means = Variant::ALL
        .iter()
        .map(|&v| {
            let rs: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == v).collect();
            mean_row(v, &rs)
        })
        .collect();
    Ok(AblationTable { seeds: seeds.to_vec(), rows, means })
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds = s
        .split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|_| Error::Config(format!("bad seed {p:?} in {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    Ok(seeds)
}

pub fn cmd_ablate(config: Option<&Path>, seeds: &[u64], steps: Option<usize>, out: &Path) -> Result<AblationTable> {
    let mut base = load_config(config)?;
    if let Some(n) = steps {
        base.steps = n;
    }
    ensure_dir(out)?;
    let t = run_ablation(&base, seeds, Some(out))?;
    write_file(&out.join("ablation.csv"), ablation_csv(&t))?;
    write_file(&out.join("ablation_means.csv"), ablation_means_csv(&t))?;
    Ok(t)
}

pub fn parse_values(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad sweep value {p:?}"))))
        .collect()
}

pub fn sweep_csv(axis: SweepAxis, values: &[f64], reports: &[RunReport]) -> String {
    let mut s = format!("{},psnr,ssim,abs_rel,delta1,miou,matched_fraction,proj_cka,final_total\n", axis.name());
    for (v, r) in values.iter().zip(reports) {
        let m = r.metrics.expect("run_loop evaluates");
        let cka = r.projected_cka.map_or("na".to_string(), |c| c.to_string());
        let last = r.history.last().map_or(f64::NAN, |h| h.loss.total);
        writeln!(s, "{v},{},{},{},{},{},{},{cka},{last}", m.psnr, m.ssim, m.abs_rel, m.delta1, m.miou, m.matched_fraction).unwrap();
    }
    s
}

pub fn cmd_sweep(config: Option<&Path>, axis: SweepAxis, values: &[f64], out: &Path) -> Result<Vec<RunReport>> {
    let base = load_config(config)?;
    let reports = sweep::<f32>(axis, values, &base)?;
    ensure_dir(out)?;
    write_file(&out.join(format!("sweep_{}.csv", axis.name())), sweep_csv(axis, values, &reports))?;
    Ok(reports)
}

/// Top three principal components of `rows × dim` features, each scaled to
/// 0..=255 over all rows. Component signs are fixed so the largest loading is
/// positive.
pub fn pca_rgb(x: &Tensor<f32>) -> Result<Vec<[u8; 3]>> {
    let s = x.shape();
    let d = *s.last().unwrap();
    let n = x.numel() / d;
    let m = DMatrix::<f64>::from_row_iterator(n, d, x.data().iter().map(|&v| v as f64));
    let mean = m.row_mean();
    let mut c = m.clone();
    for mut r in c.row_iter_mut() {
        r -= &mean;
    }
    let cov = c.transpose() * &c / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut comps = Vec::new();
    for &k in order.iter().take(3) {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let big = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        if big < 0.0 {
            v = -v;
        }
        let p = &c * v;
        let (lo, hi) = p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
        let span = if hi - lo > 1e-12 { hi - lo } else { 1.0 };
        comps.push(p.iter().map(|&x| ((x - lo) / span * 255.0).round() as u8).collect::<Vec<u8>>());
    }
    while comps.len() < 3 {
        comps.push(vec![0; n]);
    }
    Ok((0..n).map(|i| [comps[0][i], comps[1][i], comps[2][i]]).collect())
}

/// Binary PPM of `[F, N, D]` features: frames side by side, each token a
/// `patch × patch` block on a `grid_h × grid_w` token grid.
pub fn pca_ppm(features: &Tensor<f32>, grid_h: usize, grid_w: usize, patch: usize) -> Result<(usize, usize, Vec<u8>)> {
    let s = features.shape();
    if s.len() != 3 || s[1] != grid_h * grid_w {
        return Err(Error::Shape(format!("features {s:?} do not fit a {grid_h}×{grid_w} token grid")));
    }
    let frames = s[0];
    let colors = pca_rgb(features)?;
    let (w, h) = (frames * grid_w * patch, grid_h * patch);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let (f, gx) = (x / (grid_w * patch), (x % (grid_w * patch)) / patch);
            out.extend_from_slice(&colors[f * grid_h * grid_w + (y / patch) * grid_w + gx]);
        }
    }
    Ok((w, h, out))
}

#[derive(Clone, Debug)]
pub struct ExportSummary {
    pub files: Vec<PathBuf>,
    /// Pairwise CKA of expert features, as (i, j, value).
    pub expert_cka: Vec<(usize, usize, f64)>,
    pub projected_cka: Vec<(usize, usize, f64)>,
    pub image_size: (usize, usize),
}

/// Exports the hidden state after block `layer`, the projector outputs on it
/// and the expert features for one clean clip, with PCA images of each.
pub fn cmd_export_features(checkpoint: &Path, layer: usize, clip_seed: u64, out: &Path) -> Result<ExportSummary> {
    let trainer = load_checkpoint(checkpoint)?;
    let cfg = &trainer.config;
    let mut mcfg = cfg.model.clone();
    mcfg.tap_layer = layer;
    mcfg.validate()?;
    let model = Backbone::<f32>::from_params(mcfg.clone(), trainer.model.params.clone())?;
    let frames = cfg.data.frames;
    let clip = clip_from_seed::<f32>(clip_seed, &cfg.scene(), frames, cfg.data.context)?;
    let pixels = clip.to_tensor();
    let flow = model.to_flow(&pixels)?;
    let t = vec![1.0f32; frames];

    let mut g = Graph::new();
    let mut mb = Binder::frozen(&model.params);
    let x = g.constant(flow)?;
    let fwd = model.forward(&mut g, &mut mb, x, &t, &clip.controls, frames)?;
    let tap = g.value(fwd.tap).clone();
    let projected: Vec<Tensor<f32>> = match &trainer.bank {
        Some(bank) => {
            let mut pb = Binder::frozen(&bank.params);
            let vs = bank.project(&mut g, &mut pb, fwd.tap)?;
            vs.iter().map(|&v| g.value(v).clone()).collect()
        }
        None => Vec::new(),
    };
    let expert_feats = trainer.experts.iter().map(|e| e.extract(&pixels)).collect::<Result<Vec<_>>>()?;

    ensure_dir(out)?;
    let (gh, gw) = (mcfg.height / mcfg.patch, mcfg.width / mcfg.patch);
    let mut files = Vec::new();
    let mut image_size = (0, 0);
    let mut emit = |stem: &str, t: &Tensor<f32>| -> Result<()> {
        let bin = out.join(format!("{stem}.bin"));
        write_tensor_file(&bin, stem, t)?;
        let (w, h, ppm) = pca_ppm(t, gh, gw, mcfg.patch)?;
        image_size = (w, h);
        let img = out.join(format!("{stem}.ppm"));
        write_file(&img, ppm)?;
        files.push(bin);
        files.push(img);
        Ok(())
    };
    emit(&format!("tap_layer{layer}"), &tap)?;
    let active = cfg.variant.experts();
    for (k, p) in projected.iter().enumerate() {
        emit(&format!("projected_{}", active[k].name()), p)?;
    }
    for (m, f) in Modality::ALL.iter().zip(&expert_feats) {
        emit(&format!("expert_{}", m.name()), f)?;
    }

    let pairwise = |xs: &[Tensor<f32>]| -> Result<Vec<(usize, usize, f64)>> {
        let mut v = Vec::new();
        for i in 0..xs.len() {
            for j in i + 1..xs.len() {
                let d = |t: &Tensor<f32>| t.reshape(&[t.shape()[0] * t.shape()[1], t.shape()[2]]);
                v.push((i, j, linear_cka_value(&d(&xs[i])?.cast::<f64>(), &d(&xs[j])?.cast::<f64>())?));
            }
        }
        Ok(v)
    };
    let expert_cka = pairwise(&expert_feats)?;
    let projected_cka = pairwise(&projected)?;
    let mut report = String::from("kind,i,j,cka\n");
    for (i, j, c) in &expert_cka {
        writeln!(report, "expert,{},{},{c}", Modality::ALL[*i].name(), Modality::ALL[*j].name()).unwrap();
    }
    for (i, j, c) in &projected_cka {
        writeln!(report, "projected,{},{},{c}", active[*i].name(), active[*j].name()).unwrap();
    }
    let cka_path = out.join("cka.csv");
    write_file(&cka_path, report)?;
    files.push(cka_path);
    Ok(ExportSummary { files, expert_cka, projected_cka, image_size })
}

//! Losses, optimizer, learning-rate schedule and the experiment drivers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{fmt_real, CaseMetrics, MetricsReport, Summary};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::insilico::{Dataset, RegistrationSample, Split};
use crate::nets::{forward_graph, Model, NetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Supervised,
    Unsupervised,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::Unsupervised => "unsupervised",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Mode::Supervised),
            "unsupervised" => Ok(Mode::Unsupervised),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lambda: f64,
    pub smooth_order: u32,
    pub lr0: f64,
    pub momentum: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Relative improvement a validation loss needs to count as better.
    pub plateau_threshold: f64,
    pub lr_stop: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub max_epochs: usize,
    /// Writes 0 in the log's seconds column so logs compare bitwise.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Unsupervised,
            lambda: 0.1,
            smooth_order: 1,
            lr0: 1e-2,
            momentum: 0.9,
            plateau_factor: 0.5,
            plateau_patience: 10,
            plateau_threshold: 1e-4,
            lr_stop: 1e-6,
            batch_size: 8,
            seed: 0,
            max_epochs: 500,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must be in [0, 1], got {}", self.lambda));
        }
        if !(self.smooth_order == 1 || self.smooth_order == 2) {
            return bad(format!("smooth_order must be 1 or 2, got {}", self.smooth_order));
        }
        if !(self.lr0 > 0.0 && self.lr_stop < self.lr0) {
            return bad(format!("need 0 < lr_stop < lr0, got lr0={} lr_stop={}", self.lr0, self.lr_stop));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor must be in (0, 1), got {}", self.plateau_factor));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("mode", self.mode.as_str().into()),
            ("lambda", self.lambda.to_string()),
            ("smooth_order", self.smooth_order.to_string()),
            ("lr0", self.lr0.to_string()),
            ("momentum", self.momentum.to_string()),
            ("plateau_factor", self.plateau_factor.to_string()),
            ("plateau_patience", self.plateau_patience.to_string()),
            ("plateau_threshold", self.plateau_threshold.to_string()),
            ("lr_stop", self.lr_stop.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("deterministic", self.deterministic.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
        }
        match key {
            "mode" => self.mode = Mode::parse(value)?,
            "lambda" => self.lambda = p(key, value)?,
            "smooth_order" => self.smooth_order = p(key, value)?,
            "lr0" => self.lr0 = p(key, value)?,
            "momentum" => self.momentum = p(key, value)?,
            "plateau_factor" => self.plateau_factor = p(key, value)?,
            "plateau_patience" => self.plateau_patience = p(key, value)?,
            "plateau_threshold" => self.plateau_threshold = p(key, value)?,
            "lr_stop" => self.lr_stop = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "max_epochs" => self.max_epochs = p(key, value)?,
            "deterministic" => self.deterministic = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Network and training settings read from one `key=value` file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { net: NetConfig::default(), train: TrainConfig::default() }
    }
}

impl ExperimentConfig {
    /// Parses `key=value` lines; `#` starts a comment. A `model=<preset>`
    /// line selects the network family before the other keys apply.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut model = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "model" {
                model = Some(v.to_string());
            } else {
                pairs.push((n + 1, k.to_string(), v.to_string()));
            }
        }
        let mut cfg = Self::default();
        if let Some(m) = model {
            cfg.net = NetConfig::preset(&m)?;
        }
        for (line, k, v) in pairs {
            if !(cfg.net.set(&k, &v)? || cfg.train.set(&k, &v)?) {
                return Err(Error::Config(format!("line {line}: unknown key '{k}'")));
            }
        }
        cfg.net.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.net
            .to_pairs()
            .into_iter()
            .chain(self.train.to_pairs())
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

/// Per-voxel mean squared component error; the same quantity as
/// [`crate::analysis::flow_sse`].
pub fn loss_supervised(g: &mut Graph, phi: Var, phi_hat: Var) -> Result<Var> {
    g.mse(phi, phi_hat)
}

/// `(1 − λ)·(−NCC(f1 ∘ φ, f0)) + λ·L_smooth(u, n)`.
pub fn loss_unsupervised(g: &mut Graph, f0: Var, f1: Var, phi: Var, lambda: f64, n: u32) -> Result<Var> {
    let warped = g.warp(f1, phi)?;
    let sim = g.ncc(warped, f0)?;
    let sim = g.scale(sim, -(1.0 - lambda));
    let smooth = g.smoothness(phi, n)?;
    let smooth = g.scale(smooth, lambda);
    g.add(sim, smooth)
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    pub buffers: Vec<Vec<f64>>,
}

impl MomentumState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Self { buffers: params.iter().map(|t| vec![0.0; t.len()]).collect() }
    }
}

/// `m ← β·m + g; θ ← θ − lr·m`.
pub fn sgd_momentum_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut MomentumState,
    lr: f64,
    beta: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.buffers.len() {
        return Err(Error::shape("sgd_momentum_step", "parameter, gradient and state counts differ"));
    }
    for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut state.buffers) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::shape("sgd_momentum_step", format!("tensor of {} vs gradient of {}", p.len(), g.len())));
        }
        for ((x, &gi), mi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()) {
            *mi = beta * *mi + gi;
            *x -= lr * *mi;
        }
    }
    Ok(())
}

/// Reduce-on-plateau in "min" mode with a relative threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub lr_stop: f64,
    best: f64,
    bad_epochs: usize,
    reductions: usize,
}

impl PlateauScheduler {
    pub fn new(lr0: f64, factor: f64, patience: usize, threshold: f64, lr_stop: f64) -> Self {
        Self { lr: lr0, factor, patience, threshold, lr_stop, best: f64::INFINITY, bad_epochs: 0, reductions: 0 }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.lr0, c.plateau_factor, c.plateau_patience, c.plateau_threshold, c.lr_stop)
    }

    pub fn reductions(&self) -> usize {
        self.reductions
    }

    /// Feeds one validation loss; returns the learning rate for the next
    /// epoch and whether training should stop.
    pub fn step(&mut self, val_loss: f64) -> Result<(f64, bool)> {
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("validation loss is {val_loss}")));
        }
        if val_loss < self.best * (1.0 - self.threshold) || self.best.is_infinite() {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            self.reductions += 1;
        }
        Ok((self.lr, self.lr < self.lr_stop))
    }
}

/// Loss of one sample and, on request, its parameter gradients.
pub fn sample_loss(model: &Model, s: &RegistrationSample, tc: &TrainConfig, with_grad: bool) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let f0 = g.constant(Tensor::from_volume(&s.f0));
    let f1 = g.constant(Tensor::from_volume(&s.f1));
    let out = forward_graph(&model.config, &p, &mut g, f0, f1)?;
    let loss = match tc.mode {
        Mode::Unsupervised => loss_unsupervised(&mut g, f0, f1, out.phi, tc.lambda, tc.smooth_order)?,
        Mode::Supervised => {
            let hat = s
                .phi_hat
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("sample '{}' has no ground-truth deformation", s.id)))?;
            let hat = g.constant(Tensor::from_field(hat));
            loss_supervised(&mut g, out.phi, hat)?
        }
    };
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is {value} on sample '{}'", s.id)));
    }
    let grads = if with_grad {
        let gr = g.backward(loss)?;
        Some(p.vars.iter().zip(model.params.tensors()).map(|(v, t)| gr.get_or_zeros(*v, t.len())).collect())
    } else {
        None
    };
    Ok((value, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub const LOG_COLUMNS: &str = "epoch\ttrain_loss\tval_loss\tlr\tseconds";

pub fn format_log(provenance: &str, records: &[EpochRecord]) -> String {
    let mut s = format!("# {provenance}\n{LOG_COLUMNS}\n");
    for r in records {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{:e}\t{}",
            r.epoch,
            fmt_real(r.train_loss),
            fmt_real(r.val_loss),
            r.lr,
            fmt_real(r.seconds)
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss.
    pub best: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub stopped_by_lr: bool,
}

/// Trains `net` on the train split of `data`, validating on the val split.
/// When `out_dir` is given, writes `train_log.tsv` and `best.svck` there.
pub fn train(net: &NetConfig, data: &Dataset, tc: &TrainConfig, out_dir: Option<&Path>, provenance: &str) -> Result<TrainOutcome> {
    net.validate()?;
    tc.validate()?;
    let train_set = data.load_split(Split::Train)?;
    let val_set = data.load_split(Split::Val)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("train and val splits must be non-empty".into()));
    }
    if tc.mode == Mode::Supervised && train_set.iter().chain(&val_set).any(|s| s.phi_hat.is_none()) {
        return Err(Error::InvalidArgument("supervised training needs ground-truth deformations".into()));
    }
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut model = Model::new(*net, tc.seed)?;
    let mut state = MomentumState::zeros_like(model.params.tensors());
    let mut sched = PlateauScheduler::from_config(tc);
    let mut order_rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut lr = tc.lr0;
    let mut stopped_by_lr = false;
    for epoch in 0..tc.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut order_rng);
        let mut train_sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let mut acc: Vec<Vec<f64>> = model.params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            for &i in batch {
                let (l, g) = sample_loss(&model, &train_set[i], tc, true)?;
                train_sum += l;
                for (a, gi) in acc.iter_mut().zip(g.expect("gradients requested")) {
                    a.iter_mut().zip(&gi).for_each(|(x, y)| *x += y);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            acc.iter_mut().for_each(|a| a.iter_mut().for_each(|x| *x *= inv));
            sgd_momentum_step(model.params.tensors_mut(), &acc, &mut state, lr, tc.momentum)?;
        }
        let mut val_sum = 0.0;
        for s in &val_set {
            val_sum += sample_loss(&model, s, tc, false)?.0;
        }
        let train_loss = train_sum / train_set.len() as f64;
        let val_loss = val_sum / val_set.len() as f64;
        let elapsed = start.elapsed().as_secs_f64();
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} lr {lr:e} ({elapsed:.1}s)");
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            seconds: if tc.deterministic { 0.0 } else { elapsed },
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.clone()));
            if let Some(d) = out_dir {
                model.save(d.join("best.svck"))?;
            }
        }
        if let Some(d) = out_dir {
            let p = d.join("train_log.tsv");
            std::fs::write(&p, format_log(provenance, &log)).map_err(|e| Error::io(&p, e))?;
        }
        let (next_lr, stop) = sched.step(val_loss)?;
        lr = next_lr;
        if stop {
            stopped_by_lr = true;
            break;
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome { best, best_epoch, log, stopped_by_lr })
}

/// Metrics of `model` on every sample of `split`.
pub fn evaluate_split(model: &Model, data: &Dataset, split: Split) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    for id in data.ids(split) {
        let s = data.load(&id)?;
        let r = model.register(&s.f0, &s.f1)?;
        rows.push(CaseMetrics::evaluate(&s.id, &r.phi, s.phi_hat.as_ref(), Some((&s.f0, &s.f1)))?);
    }
    Ok(MetricsReport { rows })
}

/// Network configuration for a named model with the shared size settings
/// of `template`.
pub fn model_config(name: &str, template: &NetConfig) -> Result<NetConfig> {
    let mut c = NetConfig::preset(name)?;
    c.levels = template.levels;
    c.base_channels = template.base_channels;
    c.exp_steps = template.exp_steps;
    c.bchd = template.bchd;
    c.validate()?;
    Ok(c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub model: String,
    pub lambda: f64,
    pub eps_flow: Summary,
    pub eps_img: Summary,
    pub eps_reg_total: usize,
    pub eps_reg_max: usize,
    pub best_epoch: usize,
    pub epochs: usize,
}

pub const ABLATION_COLUMNS: &str = "model,lambda,eps_flow_median,eps_flow_mean,eps_flow_sd,eps_img_median,eps_img_mean,eps_img_sd,eps_reg_total,eps_reg_max,best_epoch,epochs";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.model,
            fmt_real(self.lambda),
            fmt_real(self.eps_flow.median),
            fmt_real(self.eps_flow.mean),
            fmt_real(self.eps_flow.sd),
            fmt_real(self.eps_img.median),
            fmt_real(self.eps_img.mean),
            fmt_real(self.eps_img.sd),
            self.eps_reg_total,
            self.eps_reg_max,
            self.best_epoch,
            self.epochs
        )
    }
}

pub fn ablation_csv(provenance: &str, rows: &[AblationRow]) -> String {
    let mut s = format!("# {provenance}\n{ABLATION_COLUMNS}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub row: AblationRow,
    pub outcome: TrainOutcome,
    pub report: MetricsReport,
}

/// Trains every listed model with the same seed and data and evaluates it
/// on the test split. Per-model artifacts go to `out_dir/<model>/`.
pub fn ablation(
    data: &Dataset,
    tc: &TrainConfig,
    template: &NetConfig,
    models: &[String],
    out_dir: Option<&Path>,
    provenance: &str,
) -> Result<Vec<AblationRun>> {
    if models.len() < 2 {
        return Err(Error::InvalidArgument("ablation needs at least two models".into()));
    }
    let mut runs = Vec::new();
    let mut seen = BTreeMap::new();
    for name in models {
        let cfg = model_config(name, template)?;
        let k = seen.entry(name.clone()).or_insert(0usize);
        let sub = if *k == 0 { name.clone() } else { format!("{name}.{k}") };
        *k += 1;
        let dir = out_dir.map(|d| d.join(&sub));
        let outcome = train(&cfg, data, tc, dir.as_deref(), provenance)?;
        let report = evaluate_split(&outcome.best, data, Split::Test)?;
        if let Some(d) = &dir {
            let p = d.join("test_metrics.csv");
            std::fs::write(&p, report.to_csv(provenance)).map_err(|e| Error::io(&p, e))?;
        }
        let row = AblationRow {
            model: name.clone(),
            lambda: tc.lambda,
            eps_flow: Summary::of(&report.eps_flow_values())?,
            eps_img: Summary::of(&report.eps_img_values())?,
            eps_reg_total: report.total_eps_reg(),
            eps_reg_max: report.max_eps_reg(),
            best_epoch: outcome.best_epoch,
            epochs: outcome.log.len(),
        };
        log::info!("{}", row.csv_row());
        runs.push(AblationRun { row, outcome, report });
    }
    Ok(runs)
}

/// Regularisation weights of the unsupervised sweep.
pub const LAMBDA_SWEEP: [f64; 3] = [0.1, 0.01, 0.001];

/// Runs [`ablation`] once per λ in [`LAMBDA_SWEEP`].
pub fn lambda_sweep(
    data: &Dataset,
    tc: &TrainConfig,
    template: &NetConfig,
    models: &[String],
    out_dir: Option<&Path>,
    provenance: &str,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for lambda in LAMBDA_SWEEP {
        let t = TrainConfig { lambda, mode: Mode::Unsupervised, ..*tc };
        let dir = out_dir.map(|d| d.join(format!("lambda_{lambda}")));
        rows.extend(ablation(data, &t, template, models, dir.as_deref(), provenance)?.into_iter().map(|r| r.row));
    }
    Ok(rows)
}

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::derive_seed;
use crate::aggregation::{aggregate, fedavg, Method, ParamMatrix};
use crate::attacks::{
    flip_labels, gaussian_noise, mix_models, poison_batches, replacement_scale, AttackKind,
};
use crate::datasets::{BackdoorPattern, Dataset};
use crate::error::{Error, Result};
use crate::models::{evaluate_all, init_model, sgd_train, sgd_train_with, FlatModel, TrainConfig};

const INIT_STREAM: u64 = u64::MAX;
const NOISE_SALT: u64 = 1;
const MIX_SALT: u64 = 2;
const ADVERSARY_SALT: u64 = 3;

/// One line of the per-round metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub round: usize,
    pub aggregator: String,
    pub attack: String,
    pub num_attackers: usize,
    pub accuracy: f64,
    pub asr: Option<f64>,
    pub seed: u64,
    pub wall_ms: u64,
}

pub const CSV_HEADER: &str = "round,aggregator,attack,num_attackers,accuracy,asr,seed,wall_ms";

/// Everything a round produces. `locals` holds the submitted models in
/// participant order.
#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub global: FlatModel,
    pub locals: Vec<FlatModel>,
    pub row: MetricsRow,
}

/// A configured federation: data, partition and attacker roster.
#[derive(Debug, Clone)]
pub struct Simulation {
    cfg: ExperimentConfig,
    shards: Vec<Dataset>,
    flipped: Vec<Option<Dataset>>,
    test: Dataset,
    attackers: Vec<bool>,
    pattern: Option<BackdoorPattern>,
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        Self::with_base_dir(cfg, None)
    }

    pub fn with_base_dir(cfg: ExperimentConfig, base_dir: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let data = cfg.dataset.load(cfg.seed, base_dir)?;
        let partition = cfg.dataset.partition.apply(&data.train, cfg.participants, derive_seed(cfg.seed, 0, 0, 0))?;
        let shards: Vec<Dataset> = partition.assignments.iter().map(|ids| data.train.subset(ids)).collect();

        let attackers = select_attackers(&cfg, &shards);
        let pattern = cfg.attack.backdoor_pattern()?;
        if let Some(p) = &pattern {
            p.check(data.train.dim())?;
            if p.target_label() >= data.train.classes() {
                return Err(Error::Config(format!("target label {} out of range", p.target_label())));
            }
        }
        let flips = matches!(cfg.attack.kind, AttackKind::LabelFlip | AttackKind::ModelMixing);
        let flipped = shards
            .iter()
            .zip(&attackers)
            .map(|(shard, &bad)| match (bad && flips, cfg.attack.src_label, cfg.attack.dst_label) {
                (true, Some(src), Some(dst)) => flip_labels(shard, src, dst).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            shards,
            flipped,
            test: data.test,
            attackers,
            pattern,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn shards(&self) -> &[Dataset] {
        &self.shards
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn attackers(&self) -> Vec<usize> {
        (0..self.attackers.len()).filter(|&i| self.attackers[i]).collect()
    }

    pub fn pattern(&self) -> Option<&BackdoorPattern> {
        self.pattern.as_ref()
    }

    pub fn initial_model(&self) -> Result<FlatModel> {
        let arch = self.cfg.model.architecture(self.test.dim(), self.test.classes())?;
        Ok(init_model(&arch, derive_seed(self.cfg.seed, 0, INIT_STREAM, 0)))
    }

    fn honest_cfg(&self, round: usize, participant: usize) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.cfg.seed, round as u64, participant as u64, 0),
            ..self.cfg.train
        }
    }

    fn attacker_cfg(&self, round: usize, participant: usize) -> TrainConfig {
        let honest = self.honest_cfg(round, participant);
        TrainConfig {
            epochs: honest.epochs + self.cfg.attack.extra_epochs,
            lr: self.cfg.attack.attacker_lr.unwrap_or(honest.lr),
            ..honest
        }
    }

    /// The model participant `p` submits in `round` (1-based).
    pub fn local_update(&self, global: &FlatModel, round: usize, p: usize) -> Result<FlatModel> {
        let data = &self.shards[p];
        if !self.attackers[p] {
            return sgd_train(global, data, &self.honest_cfg(round, p));
        }
        let attack = &self.cfg.attack;
        let stream = |salt| ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, round as u64, p as u64, salt));
        let adversarial_data = self.flipped[p].as_ref().unwrap_or(data);
        match attack.kind {
            AttackKind::None => sgd_train(global, data, &self.honest_cfg(round, p)),
            AttackKind::LabelFlip => sgd_train(global, adversarial_data, &self.attacker_cfg(round, p)),
            AttackKind::GaussianNoise => {
                let trained = sgd_train(global, data, &self.honest_cfg(round, p))?;
                gaussian_noise(&trained, attack.noise_std.unwrap_or(0.0), &mut stream(NOISE_SALT))
            }
            AttackKind::BackdoorNaive | AttackKind::BackdoorReplacement => {
                let replacing = attack.kind == AttackKind::BackdoorReplacement;
                if replacing && round != attack.attack_round {
                    return sgd_train(global, data, &self.honest_cfg(round, p));
                }
                let pattern = self.pattern.as_ref().ok_or_else(|| Error::Config("backdoor needs a pattern".into()))?;
                let cfg = self.attacker_cfg(round, p);
                let poisoner = poison_batches(pattern, attack.poison_per_batch, cfg.batch_size, data.dim())?;
                let trained = sgd_train_with(global, data, &cfg, Some(&poisoner))?;
                if replacing {
                    replacement_scale(&trained, global, attack.scale)
                } else {
                    Ok(trained)
                }
            }
            AttackKind::ModelMixing => {
                let honest = sgd_train(global, data, &self.honest_cfg(round, p))?;
                let adv_cfg = TrainConfig {
                    seed: derive_seed(self.cfg.seed, round as u64, p as u64, ADVERSARY_SALT),
                    ..self.attacker_cfg(round, p)
                };
                let adversarial = sgd_train(global, adversarial_data, &adv_cfg)?;
                mix_models(&honest, &adversarial, attack.mix_rate.unwrap_or(0.0), &mut stream(MIX_SALT))
            }
        }
    }

    /// Local training at every participant, aggregation, evaluation.
    pub fn run_round(&self, global: &FlatModel, round: usize) -> Result<RoundOutput> {
        let start = Instant::now();
        let locals = (0..self.shards.len())
            .into_par_iter()
            .map(|p| self.local_update(global, round, p))
            .collect::<Result<Vec<_>>>()?;
        let matrix = ParamMatrix::from_rows(&locals.iter().map(FlatModel::params).collect::<Vec<_>>())?;
        let spec = &self.cfg.aggregator;
        let params = if spec.method == Method::Fedavg {
            let counts: Vec<f64> = self.shards.iter().map(|s| s.len() as f64).collect();
            fedavg(&matrix, Some(&counts))?
        } else {
            aggregate(&matrix, spec)?.global
        };
        let next = global.with_params(params)?;
        let eval = evaluate_all(&next, &self.test, self.pattern.as_ref())?;
        let wall_ms = if self.cfg.wall_clock {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        let row = MetricsRow {
            round,
            aggregator: spec.method.name().to_string(),
            attack: self.cfg.attack.kind.name().to_string(),
            num_attackers: self.attackers.iter().filter(|&&a| a).count(),
            accuracy: eval.accuracy,
            asr: eval.attack_success_rate,
            seed: self.cfg.seed,
            wall_ms,
        };
        Ok(RoundOutput {
            global: next,
            locals,
            row,
        })
    }

    pub fn run(&self) -> Result<Vec<MetricsRow>> {
        let mut global = self.initial_model()?;
        let mut rows = Vec::with_capacity(self.cfg.rounds);
        for round in 1..=self.cfg.rounds {
            let out = self.run_round(&global, round)?;
            global = out.global;
            rows.push(out.row);
        }
        Ok(rows)
    }
}

/// Explicit ids win. Otherwise a label-flipping attack recruits holders of
/// the source label first (most source samples first), then the lowest
/// remaining indices.
fn select_attackers(cfg: &ExperimentConfig, shards: &[Dataset]) -> Vec<bool> {
    let k = shards.len();
    let mut flags = vec![false; k];
    if let Some(ids) = &cfg.attacker_ids {
        for &i in ids {
            flags[i] = true;
        }
        return flags;
    }
    let mut order: Vec<usize> = (0..k).collect();
    if let Some(src) = cfg.attack.src_label {
        let held = |p: usize| shards[p].labels().iter().filter(|&&l| l == src).count();
        order.sort_by_key(|&p| (std::cmp::Reverse(held(p)), p));
    }
    for &p in order.iter().take(cfg.num_attackers()) {
        flags[p] = true;
    }
    flags
}

/// `repeat` runs with seeds `seed, seed + 1, ...`, concatenated.
pub fn run_experiment(cfg: &ExperimentConfig, repeat: usize, base_dir: Option<&Path>) -> Result<Vec<MetricsRow>> {
    if repeat == 0 {
        return Err(Error::Config("repeat must be at least 1".into()));
    }
    let mut rows = Vec::with_capacity(repeat * cfg.rounds);
    for r in 0..repeat {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = cfg.seed.wrapping_add(r as u64);
        rows.extend(Simulation::with_base_dir(run_cfg, base_dir)?.run()?);
    }
    Ok(rows)
}

pub fn write_metrics<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(PathBuf::from("<csv>"), e))
}

pub fn write_metrics_file(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics(std::io::BufWriter::new(file), rows)
}

/// Override grid for [`sweep`]; an empty axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepGrid {
    pub lambdas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub attackers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub delta: f64,
    pub attackers: usize,
    pub metrics: MetricsRow,
}

impl SweepGrid {
    /// Every override combination, lambda slowest.
    pub fn points(&self, base: &ExperimentConfig) -> Vec<(f64, f64, usize)> {
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let lambdas = or(&self.lambdas, base.aggregator.lambda);
        let deltas = or(&self.deltas, base.aggregator.delta);
        let attackers = if self.attackers.is_empty() {
            vec![base.num_attackers()]
        } else {
            self.attackers.clone()
        };
        let mut points = Vec::new();
        for &l in &lambdas {
            for &d in &deltas {
                for &a in &attackers {
                    points.push((l, d, a));
                }
            }
        }
        points
    }
}

pub fn sweep(base: &ExperimentConfig, grid: &SweepGrid, repeat: usize, base_dir: Option<&Path>) -> Result<Vec<SweepRow>> {
    let mut out = Vec::new();
    for (lambda, delta, attackers) in grid.points(base) {
        let mut cfg = base.clone();
        cfg.aggregator.lambda = lambda;
        cfg.aggregator.delta = delta;
        if !grid.attackers.is_empty() {
            cfg.attackers = attackers;
            cfg.attacker_ids = None;
        }
        cfg.validate()?;
        for metrics in run_experiment(&cfg, repeat, base_dir)? {
            out.push(SweepRow {
                lambda,
                delta,
                attackers,
                metrics,
            });
        }
    }
    Ok(out)
}

pub fn write_sweep<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda", "delta", "attackers"].into_iter().chain(CSV_HEADER.split(',')))?;
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.lambda.to_string(),
            r.delta.to_string(),
            r.attackers.to_string(),
            m.round.to_string(),
            m.aggregator.clone(),
            m.attack.clone(),
            m.num_attackers.to_string(),
            m.accuracy.to_string(),
            m.asr.map(|a| a.to_string()).unwrap_or_default(),
            m.seed.to_string(),
            m.wall_ms.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(PathBuf::from("<csv>"), e))
}

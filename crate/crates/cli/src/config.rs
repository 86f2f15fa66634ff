//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys carry a section
//! prefix (`model.`, `router.`, `train.`, `task.<name>.`, `pretrain.`,
//! `eval.`, `profile.`, `bench.`, `paths.`) except the top-level `seed`.
//! Unknown or repeated keys are rejected with the offending line number.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use flux_core::bench::BenchConfig;
use flux_core::entropy::{default_omega_grid, TruncationPolicy};
use flux_core::model::ModelConfig;
use flux_core::router::{PoolingConfig, RouterConfig, TemperatureSchedule};
use flux_core::tasks::{NeedleDepth, TaskCategory, TaskSpec};
use flux_core::train::{PretrainConfig, RouterTrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSettings {
    pub probe_examples: usize,
    pub truncation: TruncationPolicy,
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub timing: BenchConfig,
    /// Sparsity of the measured layer-level plan.
    pub omega: f64,
    pub modeled_context_lengths: Vec<usize>,
    pub bandwidth_gb_s: f64,
    pub overhead_us: f64,
    pub router_lengths: Vec<usize>,
    pub router_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub backbone: PathBuf,
    pub routed: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// `None` means half the model width.
    pub router_hidden: Option<usize>,
    pub pool_size: usize,
    pub tau_init: f64,
    pub tau_final: f64,
    pub tasks: Vec<TaskSpec>,
    pub pretrain: PretrainConfig,
    pub train: RouterTrainConfig,
    pub eval_probe_examples: usize,
    pub profile: ProfileSettings,
    pub bench: BenchSettings,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tasks = vec![
            TaskSpec::new("retrieval", TaskCategory::Retrieval, 0.45, 96, 128).expect("valid default"),
            TaskSpec::new("holistic", TaskCategory::Holistic, 1.0, 96, 128).expect("valid default"),
        ];
        Self {
            seed: 0,
            model: ModelConfig::default(),
            router_hidden: None,
            pool_size: 16,
            tau_init: TemperatureSchedule::default().tau_init,
            tau_final: TemperatureSchedule::default().tau_final,
            tasks,
            pretrain: PretrainConfig::default(),
            train: RouterTrainConfig::default(),
            eval_probe_examples: 64,
            profile: ProfileSettings {
                probe_examples: 8,
                truncation: TruncationPolicy::default(),
                grid: default_omega_grid(),
            },
            bench: BenchSettings {
                timing: BenchConfig::default(),
                omega: 0.5,
                modeled_context_lengths: vec![4096, 16384, 65536],
                bandwidth_gb_s: 20.0,
                overhead_us: 5.0,
                router_lengths: vec![512, 2048, 8192, 32768],
                router_iters: 200,
            },
            paths: Paths {
                backbone: PathBuf::from("backbone.flxa"),
                routed: PathBuf::from("routed.flxa"),
            },
        }
    }
}

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    raw.parse()
        .map_err(|e| CliError::config_at(line, format!("bad value '{raw}' for {key}: {e}")))
}

fn list<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<Vec<T>, CliError>
where
    T::Err: Display,
{
    let items: Vec<T> = raw
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| value(line, key, s))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(CliError::config_at(line, format!("{key} needs at least one value")));
    }
    Ok(items)
}

fn needle_from(line: usize, raw: &str) -> Result<NeedleDepth, CliError> {
    match raw {
        "distant" => Ok(NeedleDepth::Distant),
        "local" => Ok(NeedleDepth::Local),
        _ => Err(CliError::config_at(line, format!("needle must be 'distant' or 'local', got '{raw}'"))),
    }
}

fn needle_str(n: NeedleDepth) -> &'static str {
    match n {
        NeedleDepth::Distant => "distant",
        NeedleDepth::Local => "local",
    }
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        let mut order = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| CliError::config_at(line, format!("expected 'key = value', got '{t}'")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(CliError::config_at(line, "empty key"));
            }
            if let Some((first, _)) = entries.get(k) {
                return Err(CliError::config_at(line, format!("duplicate key {k} (first set on line {first})")));
            }
            entries.insert(k.to_string(), (line, v.to_string()));
            order.push(k.to_string());
        }

        let mut cfg = RunConfig::default();
        let mut task_lines: BTreeMap<String, usize> = BTreeMap::new();
        let mut selected: Option<(usize, Vec<String>)> = None;
        for k in &order {
            let (line, v) = &entries[k];
            let (line, v) = (*line, v.as_str());
            if let Some(rest) = k.strip_prefix("task.") {
                let (name, field) = rest
                    .split_once('.')
                    .ok_or_else(|| CliError::config_at(line, format!("unknown key {k}")))?;
                task_lines.entry(name.to_string()).or_insert(line);
                cfg.set_task_field(line, k, name, field, v)?;
                continue;
            }
            if k == "train.tasks" {
                selected = Some((line, list(line, k, v)?));
                continue;
            }
            cfg.set(line, k, v)?;
        }

        if let Some((line, names)) = selected {
            let mut tasks = Vec::with_capacity(names.len());
            for n in &names {
                let t = cfg
                    .tasks
                    .iter()
                    .find(|t| &t.name == n)
                    .ok_or_else(|| CliError::config_at(line, format!("train.tasks names undefined task '{n}'")))?;
                if tasks.iter().any(|x: &TaskSpec| &x.name == n) {
                    return Err(CliError::config_at(line, format!("task '{n}' listed twice")));
                }
                tasks.push(t.clone());
            }
            cfg.tasks = tasks;
        }
        for t in &cfg.tasks {
            t.validate().map_err(|e| match task_lines.get(&t.name) {
                Some(&line) => CliError::config_at(line, e.to_string()),
                None => CliError::Config(e.to_string()),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| e.in_file(path))
    }

    fn set(&mut self, line: usize, k: &str, v: &str) -> Result<(), CliError> {
        let m = &mut self.model;
        let p = &mut self.pretrain;
        let t = &mut self.train;
        let b = &mut self.bench;
        match k {
            "seed" => self.seed = value(line, k, v)?,
            "model.n_layers" => m.n_layers = value(line, k, v)?,
            "model.n_heads" => m.n_heads = value(line, k, v)?,
            "model.head_dim" => m.head_dim = value(line, k, v)?,
            "model.vocab_size" => m.vocab_size = value(line, k, v)?,
            "model.max_seq_len" => m.max_seq_len = value(line, k, v)?,
            "model.mlp_hidden" => m.mlp_hidden = value(line, k, v)?,
            "model.sink" => m.ssa_sink = value(line, k, v)?,
            "model.local" => m.ssa_local = value(line, k, v)?,
            "router.hidden" => {
                self.router_hidden = if v == "auto" { None } else { Some(value(line, k, v)?) }
            }
            "router.pool_size" => self.pool_size = value(line, k, v)?,
            "router.tau_init" => self.tau_init = value(line, k, v)?,
            "router.tau_final" => self.tau_final = value(line, k, v)?,
            "train.steps" => t.steps = value(line, k, v)?,
            "train.batch" => t.batch = value(line, k, v)?,
            "train.lr_router" => t.lr_router = value(line, k, v)?,
            "train.lr_dual" => t.lr_dual = value(line, k, v)?,
            "train.beta1" => t.adam.beta1 = value(line, k, v)?,
            "train.beta2" => t.adam.beta2 = value(line, k, v)?,
            "train.eps" => t.adam.eps = value(line, k, v)?,
            "train.weight_decay" => t.adam.weight_decay = value(line, k, v)?,
            "train.warmup_ratio" => t.warmup_ratio = value(line, k, v)?,
            "train.dual_updates" => t.dual_updates = value(line, k, v)?,
            "train.probe_every" => t.probe_every = value(line, k, v)?,
            "train.probe_examples" => t.probe_examples = value(line, k, v)?,
            "pretrain.steps" => p.steps = value(line, k, v)?,
            "pretrain.batch" => p.batch = value(line, k, v)?,
            "pretrain.lr" => p.lr = value(line, k, v)?,
            "pretrain.warmup_ratio" => p.warmup_ratio = value(line, k, v)?,
            "pretrain.weight_decay" => p.weight_decay = value(line, k, v)?,
            "pretrain.probe_examples" => p.probe_examples = value(line, k, v)?,
            "pretrain.min_retrieval_accuracy" => p.min_retrieval_accuracy = value(line, k, v)?,
            "pretrain.max_perplexity_ratio" => p.max_perplexity_ratio = value(line, k, v)?,
            "pretrain.sparse_layer_prob" => p.sparse_layer_prob = value(line, k, v)?,
            "eval.probe_examples" => self.eval_probe_examples = value(line, k, v)?,
            "profile.probe_examples" => self.profile.probe_examples = value(line, k, v)?,
            "profile.mass" => self.profile.truncation.mass = value(line, k, v)?,
            "profile.grid" => self.profile.grid = list(line, k, v)?,
            "bench.warmup_steps" => b.timing.warmup_steps = value(line, k, v)?,
            "bench.measure_iters" => b.timing.measure_iters = value(line, k, v)?,
            "bench.context_lengths" => b.timing.context_lengths = list(line, k, v)?,
            "bench.repetitions" => b.timing.repetitions = value(line, k, v)?,
            "bench.omega" => b.omega = value(line, k, v)?,
            "bench.modeled_context_lengths" => b.modeled_context_lengths = list(line, k, v)?,
            "bench.bandwidth_gb_s" => b.bandwidth_gb_s = value(line, k, v)?,
            "bench.overhead_us" => b.overhead_us = value(line, k, v)?,
            "bench.router_lengths" => b.router_lengths = list(line, k, v)?,
            "bench.router_iters" => b.router_iters = value(line, k, v)?,
            "paths.backbone" => self.paths.backbone = PathBuf::from(v),
            "paths.routed" => self.paths.routed = PathBuf::from(v),
            _ => return Err(CliError::config_at(line, format!("unknown key {k}"))),
        }
        Ok(())
    }

    fn set_task_field(&mut self, line: usize, k: &str, name: &str, field: &str, v: &str) -> Result<(), CliError> {
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(CliError::config_at(line, format!("bad task name '{name}'")));
        }
        let idx = match self.tasks.iter().position(|t| t.name == name) {
            Some(i) => i,
            None => {
                let mut t = self.tasks[0].clone();
                t.name = name.to_string();
                self.tasks.push(t);
                self.tasks.len() - 1
            }
        };
        let t = &mut self.tasks[idx];
        match field {
            "category" => t.category = v.parse().map_err(|e| CliError::config_at(line, format!("{e}")))?,
            "budget" => t.budget = value(line, k, v)?,
            "min_len" => t.min_len = value(line, k, v)?,
            "max_len" => t.max_len = value(line, k, v)?,
            "n_pairs" => t.n_pairs = value(line, k, v)?,
            "n_recalls" => t.n_recalls = value(line, k, v)?,
            "needle" => t.needle = needle_from(line, v)?,
            _ => return Err(CliError::config_at(line, format!("unknown key {k}"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.tasks.is_empty() {
            return bad("no tasks configured".into());
        }
        if self.pool_size == 0 {
            return bad("router.pool_size must be positive".into());
        }
        if !(self.tau_init > 0.0 && self.tau_final > 0.0) {
            return bad("router temperatures must be positive".into());
        }
        for t in &self.tasks {
            if t.max_len > self.model.max_seq_len {
                return bad(format!(
                    "task '{}': max_len {} exceeds model.max_seq_len {}",
                    t.name, t.max_len, self.model.max_seq_len
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.bench.omega) {
            return bad("bench.omega must lie in [0, 1]".into());
        }
        if self.profile.grid.iter().any(|o| !(0.0..=1.0).contains(o)) {
            return bad("profile.grid values must lie in [0, 1]".into());
        }
        if !(self.bench.bandwidth_gb_s > 0.0) || self.bench.overhead_us < 0.0 {
            return bad("bench.bandwidth_gb_s must be positive and bench.overhead_us non-negative".into());
        }
        Ok(())
    }

    pub fn router_config(&self) -> RouterConfig {
        let mut rc = RouterConfig::for_model_dim(self.model.model_dim());
        if let Some(h) = self.router_hidden {
            rc.hidden = h;
        }
        rc.pooling = PoolingConfig {
            pool_size: self.pool_size,
        };
        rc
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    pub fn router_train_config(&self) -> RouterTrainConfig {
        RouterTrainConfig {
            seed: self.seed,
            tau: TemperatureSchedule {
                tau_init: self.tau_init,
                tau_final: self.tau_final,
                total_steps: self.train.steps,
            },
            ..self.train.clone()
        }
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            seed: self.seed,
            ..self.bench.timing.clone()
        }
    }

    /// Every key with its resolved value, one `key = value` per line in
    /// sorted order. Parsing the result gives back the same configuration.
    pub fn canonical(&self) -> String {
        let m = &self.model;
        let p = &self.pretrain;
        let t = &self.train;
        let b = &self.bench;
        let mut kv: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("model.n_layers".into(), m.n_layers.to_string()),
            ("model.n_heads".into(), m.n_heads.to_string()),
            ("model.head_dim".into(), m.head_dim.to_string()),
            ("model.vocab_size".into(), m.vocab_size.to_string()),
            ("model.max_seq_len".into(), m.max_seq_len.to_string()),
            ("model.mlp_hidden".into(), m.mlp_hidden.to_string()),
            ("model.sink".into(), m.ssa_sink.to_string()),
            ("model.local".into(), m.ssa_local.to_string()),
            (
                "router.hidden".into(),
                self.router_hidden.map_or("auto".to_string(), |h| h.to_string()),
            ),
            ("router.pool_size".into(), self.pool_size.to_string()),
            ("router.tau_init".into(), self.tau_init.to_string()),
            ("router.tau_final".into(), self.tau_final.to_string()),
            (
                "train.tasks".into(),
                self.tasks.iter().map(|t| t.name.as_str()).collect::<Vec<_>>().join(","),
            ),
            ("train.steps".into(), t.steps.to_string()),
            ("train.batch".into(), t.batch.to_string()),
            ("train.lr_router".into(), t.lr_router.to_string()),
            ("train.lr_dual".into(), t.lr_dual.to_string()),
            ("train.beta1".into(), t.adam.beta1.to_string()),
            ("train.beta2".into(), t.adam.beta2.to_string()),
            ("train.eps".into(), t.adam.eps.to_string()),
            ("train.weight_decay".into(), t.adam.weight_decay.to_string()),
            ("train.warmup_ratio".into(), t.warmup_ratio.to_string()),
            ("train.dual_updates".into(), t.dual_updates.to_string()),
            ("train.probe_every".into(), t.probe_every.to_string()),
            ("train.probe_examples".into(), t.probe_examples.to_string()),
            ("pretrain.steps".into(), p.steps.to_string()),
            ("pretrain.batch".into(), p.batch.to_string()),
            ("pretrain.lr".into(), p.lr.to_string()),
            ("pretrain.warmup_ratio".into(), p.warmup_ratio.to_string()),
            ("pretrain.weight_decay".into(), p.weight_decay.to_string()),
            ("pretrain.probe_examples".into(), p.probe_examples.to_string()),
            ("pretrain.min_retrieval_accuracy".into(), p.min_retrieval_accuracy.to_string()),
            ("pretrain.max_perplexity_ratio".into(), p.max_perplexity_ratio.to_string()),
            ("pretrain.sparse_layer_prob".into(), p.sparse_layer_prob.to_string()),
            ("eval.probe_examples".into(), self.eval_probe_examples.to_string()),
            ("profile.probe_examples".into(), self.profile.probe_examples.to_string()),
            ("profile.mass".into(), self.profile.truncation.mass.to_string()),
            ("profile.grid".into(), join(&self.profile.grid)),
            ("bench.warmup_steps".into(), b.timing.warmup_steps.to_string()),
            ("bench.measure_iters".into(), b.timing.measure_iters.to_string()),
            ("bench.context_lengths".into(), join(&b.timing.context_lengths)),
            ("bench.repetitions".into(), b.timing.repetitions.to_string()),
            ("bench.omega".into(), b.omega.to_string()),
            ("bench.modeled_context_lengths".into(), join(&b.modeled_context_lengths)),
            ("bench.bandwidth_gb_s".into(), b.bandwidth_gb_s.to_string()),
            ("bench.overhead_us".into(), b.overhead_us.to_string()),
            ("bench.router_lengths".into(), join(&b.router_lengths)),
            ("bench.router_iters".into(), b.router_iters.to_string()),
            ("paths.backbone".into(), self.paths.backbone.display().to_string()),
            ("paths.routed".into(), self.paths.routed.display().to_string()),
        ];
        for task in &self.tasks {
            let pre = format!("task.{}.", task.name);
            kv.extend([
                (format!("{pre}category"), task.category.as_str().to_string()),
                (format!("{pre}budget"), task.budget.to_string()),
                (format!("{pre}min_len"), task.min_len.to_string()),
                (format!("{pre}max_len"), task.max_len.to_string()),
                (format!("{pre}n_pairs"), task.n_pairs.to_string()),
                (format!("{pre}n_recalls"), task.n_recalls.to_string()),
                (format!("{pre}needle"), needle_str(task.needle).to_string()),
            ]);
        }
        kv.sort();
        kv.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::canonical`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = RunConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.steps, 300);
        assert_eq!(c.train.lr_router, 5e-4);
        assert_eq!(c.train.lr_dual, 1e-3);
        assert_eq!(c.train.warmup_ratio, 0.2);
        assert_eq!((c.train.adam.beta1, c.train.adam.beta2), (0.9, 0.95));
        assert_eq!(c.train.adam.weight_decay, 0.1);
        assert_eq!(c.tasks[0].budget, 0.45);
        assert_eq!(c.tasks[1].budget, 1.0);
    }

    #[test]
    fn keys_override_defaults() {
        let c = RunConfig::parse(
            "seed = 9\nmodel.n_layers=4\nrouter.hidden = 12\nbench.context_lengths = 64, 128\n\
             task.retrieval.budget = 0.3\ntask.local.category = retrieval\ntask.local.needle = local\n\
             train.tasks = local,holistic\n",
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.model.n_layers, 4);
        assert_eq!(c.router_config().hidden, 12);
        assert_eq!(c.bench.timing.context_lengths, vec![64, 128]);
        let names: Vec<&str> = c.tasks.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["local", "holistic"]);
        assert_eq!(c.tasks[0].needle, NeedleDepth::Local);
    }

    #[test]
    fn errors_name_the_line() {
        let cases = [
            ("seed = 1\nmodel.bogus = 3\n", 2),
            ("\n\nnot a pair\n", 3),
            ("seed = x\n", 1),
            ("seed = 1\nseed = 2\n", 2),
            ("task.retrieval.colour = red\n", 1),
            ("task.retrieval.budget = 1.5\n", 1),
            ("model.n_heads = 2\ntrain.tasks = nope\n", 2),
        ];
        for (text, line) in cases {
            match RunConfig::parse(text) {
                Err(CliError::ConfigLine { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn canonical_round_trips() {
        let c = RunConfig::parse("seed = 4\ntask.extra.category = holistic\ntrain.tasks = retrieval,extra\n").unwrap();
        let back = RunConfig::parse(&c.canonical()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 16);
        assert_ne!(RunConfig::default().hash(), c.hash());
    }
}

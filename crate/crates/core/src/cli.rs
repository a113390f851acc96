//! Command-line front end. Every subcommand reads a JSON run config, writes
//! its outputs into the configured output directory and records a manifest
//! of input and output hashes next to them.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::contrastive::{Aggregation, DirectionCandidate, PromptPairSet};
use crate::data::{read_sequences, read_vocab, write_file, write_json, IdsLine};
use crate::error::{Error, ErrorKind};
use crate::eval::{evaluate, perplexity, toxicity_proxy, EvalReport};
use crate::fixture::{gen_planted_model, FixtureShape};
use crate::interventions::{
    build_probe, enhance_sweep, mean_activation, rank_value_vectors, reverse_pair, shift_and_project,
    suppress_sweep, SweepPoint, UnitRef, DEFAULT_ENHANCE_FACTOR, DEFAULT_SHIFT_ALPHA,
};
use crate::microformer::Transformer;
use crate::numerics::Centering;
use crate::pipeline::{extract_scored, SubspaceParams};
use crate::ranking::{build_global_subspace, read_badwords, select_high, BadWordsList, GlobalSubspace};
use crate::surgery::{
    apply_gloss, default_layer_start, random_control_subspace, reference_ratio_flag, reference_settings, EditPlan,
    REFERENCE_RATIO_FLAG,
};
use crate::tensorstore::{sha256_hex, TensorMap};

const CANDIDATES_FILE: &str = "candidates.json";
const SUBSPACE_FILE: &str = "subspace.json";

fn default_k() -> usize {
    10
}
fn default_m() -> usize {
    crate::ranking::DEFAULT_TOP_M
}
fn default_alpha() -> f64 {
    1.0
}
fn default_eta() -> f64 {
    0.8
}
fn default_steps() -> usize {
    crate::eval::DEFAULT_STEPS
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Run configuration. Relative paths are resolved against the directory of
/// the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: PathBuf,
    pub pairs: PathBuf,
    /// One word per line; resolved through `vocab` when given, otherwise
    /// each line must be a token id.
    pub badwords: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    /// Prompts for toxicity evaluation (JSON lines of `{"ids": [...]}`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PathBuf>,
    /// Neutral sequences for perplexity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_alpha")]
    pub alpha_sel: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_start: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub centering: Centering,
}

impl RunConfig {
    /// Reads, resolves and validates a config file.
    pub fn load(path: &Path) -> crate::Result<Self> {
        let mut cfg: RunConfig = crate::data::read_json(path).map_err(|e| match e {
            Error::Json(e) => Error::InvalidConfig(format!("{}: {e}", path.display())),
            other => other,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.model);
        resolve(&mut cfg.pairs);
        resolve(&mut cfg.badwords);
        resolve(&mut cfg.out_dir);
        for p in [&mut cfg.vocab, &mut cfg.prompts, &mut cfg.corpus].into_iter().flatten() {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad(format!("eta must be in (0, 1], got {}", self.eta));
        }
        if !(self.alpha_sel >= 0.0 && self.alpha_sel.is_finite()) {
            return bad(format!("alpha_sel must be a finite value ≥ 0, got {}", self.alpha_sel));
        }
        if self.k == 0 || self.m == 0 || self.steps == 0 {
            return bad("k, m and steps must be at least 1".into());
        }
        let files = [Some(&self.model), Some(&self.pairs), Some(&self.badwords)];
        let optional = [self.vocab.as_ref(), self.prompts.as_ref(), self.corpus.as_ref()];
        for p in files.into_iter().chain(optional).flatten() {
            if !p.is_file() {
                return bad(format!("referenced file does not exist: {}", p.display()));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> SubspaceParams {
        SubspaceParams {
            k: self.k,
            m: self.m,
            alpha_sel: self.alpha_sel,
            eta: self.eta,
            centering: self.centering,
            aggregation: self.aggregation,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "toxspace", version, about = "Find and project out a toxic subspace of FFN value vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Run config (JSON).
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-layer contrastive SVD candidates with tox scores.
    Extract(ConfigArg),
    /// Threshold candidates and build the global subspace.
    Subspace {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Candidates file; defaults to the one in the output directory.
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Project the subspace out of the FFN value vectors.
    Apply {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        subspace: Option<PathBuf>,
        #[arg(long)]
        layer_start: Option<usize>,
    },
    /// Edit with a random subspace orthogonal to the toxic one.
    Control {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        subspace: Option<PathBuf>,
        #[arg(long)]
        layer_start: Option<usize>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Enhance / suppress / reverse sweeps over probe-ranked units.
    Intervene {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_enum)]
        mode: SweepMode,
        /// Layer whose FFN input the probe is built from (default L/2).
        #[arg(long)]
        probe_layer: Option<usize>,
        /// Numbers of top-ranked units to enhance.
        #[arg(long, value_delimiter = ',', default_value = "0,1,5,20")]
        counts: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_ENHANCE_FACTOR)]
        factor: f64,
        /// Number of top-ranked units considered "toxic" for suppression.
        #[arg(long, default_value_t = 20)]
        toxic_count: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        proportions: Vec<f64>,
        /// Layers reversed as a whole (default: layer_start through the last).
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        /// Prompt set (default: toxic pair prompts for enhance, the config
        /// prompts otherwise).
        #[arg(long, value_enum)]
        on: Option<PromptSet>,
    },
    /// Shift the mean activation along a direction and read off the vocabulary.
    Shift {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_SHIFT_ALPHA)]
        alpha: f64,
        /// Rows per table (default: the config `m`).
        #[arg(long)]
        top: Option<usize>,
        #[arg(long, value_enum, default_value = "probe")]
        direction: ShiftDirection,
    },
    /// Perplexity and bad-word mass of a checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Checkpoint to evaluate instead of the config model.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Report file name inside the output directory.
        #[arg(long, default_value = "eval.json")]
        report: String,
    },
    /// Edit from every possible start layer and evaluate each.
    #[command(name = "sweep-l0")]
    SweepL0 {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        subspace: Option<PathBuf>,
    },
    /// Synthetic model generation.
    #[command(subcommand)]
    Fixture(FixtureCommand),
}

#[derive(Debug, Subcommand)]
enum FixtureCommand {
    /// Write a planted-direction model with its prompts and ground truth.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 32)]
        d_model: usize,
        #[arg(long, default_value_t = 64)]
        d_ff: usize,
        #[arg(long, default_value_t = 100)]
        vocab: usize,
        #[arg(long, default_value_t = 10)]
        n_bad: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepMode {
    Enhance,
    Suppress,
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PromptSet {
    /// Toxic side of the prompt pairs.
    ToxicPairs,
    /// The config `prompts` file.
    Prompts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ShiftDirection {
    Probe,
    Subspace,
}

/// Hashes of everything a run read and wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub args: Vec<String>,
    pub config_sha256: Option<String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

struct Run {
    subcommand: String,
    args: Vec<String>,
    out_dir: PathBuf,
    config_sha256: Option<String>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Run {
    fn new(subcommand: &str, args: &[String], out_dir: PathBuf) -> anyhow::Result<Self> {
        fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        Ok(Self {
            subcommand: subcommand.to_string(),
            args: args.to_vec(),
            out_dir,
            config_sha256: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    fn read(&mut self, role: &str, path: &Path) -> anyhow::Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.insert(role.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn input_hash(&mut self, role: &str, path: &Path) -> anyhow::Result<()> {
        self.read(role, path).map(|_| ())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
        let path = self.out_dir.join(name);
        write_file(&path, bytes)?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn write_checkpoint(&mut self, name: &str, map: &TensorMap) -> anyhow::Result<PathBuf> {
        let bytes = map.to_bytes()?;
        self.write(name, &bytes)
    }

    fn write_csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> anyhow::Result<PathBuf> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow!("csv: {e}"))?;
        self.write(name, &bytes)
    }

    fn finish(self) -> anyhow::Result<()> {
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: self.subcommand.clone(),
            args: self.args,
            config_sha256: self.config_sha256,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let path = self.out_dir.join(format!("manifest.{}.json", self.subcommand.replace(' ', "-")));
        write_json(&path, &manifest)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}

/// Config plus the commonly needed loaded inputs.
struct Loaded {
    cfg: RunConfig,
    map: TensorMap,
    model: Transformer,
    bad: BadWordsList,
}

fn load_common(run_name: &str, args: &[String], config: &Path) -> anyhow::Result<(Run, Loaded)> {
    let cfg = RunConfig::load(config)?;
    let mut run = Run::new(run_name, args, cfg.out_dir.clone())?;
    let cfg_bytes = fs::read(config).map_err(|e| Error::io(config, e))?;
    run.config_sha256 = Some(sha256_hex(&cfg_bytes));
    let map = TensorMap::from_bytes(&run.read("model", &cfg.model)?)?;
    let model = Transformer::new(&map)?;
    run.input_hash("badwords", &cfg.badwords)?;
    let words = read_badwords(&cfg.badwords)?;
    let bad = match &cfg.vocab {
        Some(v) => {
            run.input_hash("vocab", v)?;
            let vocab = read_vocab(v)?;
            if vocab.len() != map.config().vocab_size {
                return Err(Error::InvalidConfig(format!(
                    "vocab file has {} entries, model has {}",
                    vocab.len(),
                    map.config().vocab_size
                ))
                .into());
            }
            let (list, unresolved) = BadWordsList::resolve(&words, &vocab)?;
            if !unresolved.is_empty() {
                log::warn!("{} bad words not in vocabulary: {:?}", unresolved.len(), unresolved);
            }
            list
        }
        None => {
            let ids = words
                .iter()
                .map(|w| w.parse::<u32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| Error::InvalidConfig("bad words must be token ids when no vocab is configured".into()))?;
            BadWordsList::from_ids(ids, map.config().vocab_size)?
        }
    };
    Ok((run, Loaded { cfg, map, model, bad }))
}

impl Loaded {
    fn pairs(&self, run: &mut Run) -> anyhow::Result<PromptPairSet> {
        run.input_hash("pairs", &self.cfg.pairs)?;
        Ok(PromptPairSet::load(&self.cfg.pairs)?)
    }

    fn prompts(&self, run: &mut Run) -> anyhow::Result<Vec<Vec<u32>>> {
        let p = self.cfg.prompts.as_ref().ok_or_else(|| Error::InvalidConfig("config has no `prompts`".into()))?;
        run.input_hash("prompts", p)?;
        Ok(read_sequences(p)?)
    }

    fn corpus(&self, run: &mut Run) -> anyhow::Result<Vec<Vec<u32>>> {
        let p = self.cfg.corpus.as_ref().ok_or_else(|| Error::InvalidConfig("config has no `corpus`".into()))?;
        run.input_hash("corpus", p)?;
        Ok(read_sequences(p)?)
    }

    fn subspace(&self, run: &mut Run, path: Option<&PathBuf>) -> anyhow::Result<GlobalSubspace> {
        let p = path.cloned().unwrap_or_else(|| self.cfg.out_dir.join(SUBSPACE_FILE));
        run.input_hash("subspace", &p)?;
        Ok(GlobalSubspace::load(&p)?)
    }

    fn layer_start(&self, flag: Option<usize>) -> usize {
        flag.or(self.cfg.layer_start).unwrap_or_else(|| default_layer_start(self.map.config()))
    }
}

#[derive(Serialize, Deserialize)]
struct CandidatesFile {
    k: usize,
    m: usize,
    /// `(layer, 1-based rank)` of skipped degenerate components.
    degenerate: Vec<(usize, usize)>,
    candidates: Vec<DirectionCandidate>,
}

#[derive(Serialize)]
struct SubspaceReport {
    r: usize,
    d_model: usize,
    ratio: f64,
    tau: f64,
    score_mean: f64,
    score_std: f64,
    selected: usize,
    reference_model: Option<&'static str>,
    /// Set only for recognized full-size models.
    ratio_above_reference: Option<bool>,
}

#[derive(Serialize)]
struct SweepL0Row {
    layer_start: usize,
    badword_mass: f64,
    badword_rate: f64,
    perplexity: f64,
}

#[derive(Serialize)]
struct ShiftRow {
    alpha: f64,
    rank: usize,
    token: u32,
    text: String,
    score: f64,
    is_bad: bool,
}

fn cmd_extract(args: &[String], c: &ConfigArg) -> anyhow::Result<()> {
    let (mut run, l) = load_common("extract", args, &c.config)?;
    let pairs = l.pairs(&mut run)?;
    let (candidates, degenerate) = extract_scored(&l.model, &pairs, &l.bad, &l.cfg.params())?;
    log::info!("{} candidates, {} degenerate", candidates.len(), degenerate.len());
    run.write_json(CANDIDATES_FILE, &CandidatesFile { k: l.cfg.k, m: l.cfg.m, degenerate, candidates })?;
    run.finish()
}

fn cmd_subspace(args: &[String], c: &ConfigArg, candidates: Option<&PathBuf>) -> anyhow::Result<()> {
    let (mut run, l) = load_common("subspace", args, &c.config)?;
    let path = candidates.cloned().unwrap_or_else(|| l.cfg.out_dir.join(CANDIDATES_FILE));
    let file: CandidatesFile = serde_json::from_slice(&run.read("candidates", &path)?)
        .with_context(|| format!("reading {}", path.display()))?;
    if file.m != l.cfg.m {
        log::warn!("candidates were scored with m = {}, config has m = {}; rescoring", file.m, l.cfg.m);
    }
    let mut cands = file.candidates;
    crate::ranking::score_candidates(&mut cands, l.model.embedding(), &l.bad, l.cfg.m)?;
    let selection = select_high(&cands, l.cfg.alpha_sel)?;
    let sub = build_global_subspace(&selection, l.cfg.eta, l.cfg.centering, l.model.embedding(), &l.bad, l.cfg.m)?;
    let reference = reference_settings(l.map.config());
    let report = SubspaceReport {
        r: sub.r(),
        d_model: sub.d_model(),
        ratio: sub.ratio(),
        tau: sub.tau,
        score_mean: sub.score_mean,
        score_std: sub.score_std,
        selected: selection.selected.len(),
        reference_model: reference.map(|r| r.name),
        ratio_above_reference: reference_ratio_flag(l.map.config(), &sub),
    };
    if report.ratio_above_reference == Some(true) {
        log::warn!("subspace ratio {:.4} exceeds {REFERENCE_RATIO_FLAG}", report.ratio);
    }
    run.write_json(SUBSPACE_FILE, &sub)?;
    run.write_json("subspace_report.json", &report)?;
    run.finish()
}

fn cmd_apply(args: &[String], c: &ConfigArg, sub: Option<&PathBuf>, start: Option<usize>) -> anyhow::Result<()> {
    let (mut run, l) = load_common("apply", args, &c.config)?;
    let subspace = l.subspace(&mut run, sub)?;
    let plan = EditPlan::to_last(subspace, l.layer_start(start), l.map.config())?;
    let edited = apply_gloss(&l.map, &plan)?;
    run.write_checkpoint("edited.tsr", &edited)?;
    run.finish()
}

fn cmd_control(
    args: &[String],
    c: &ConfigArg,
    sub: Option<&PathBuf>,
    start: Option<usize>,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let (mut run, l) = load_common("control", args, &c.config)?;
    let subspace = l.subspace(&mut run, sub)?;
    let control = random_control_subspace(&subspace, seed.unwrap_or(l.cfg.seed))?;
    let plan = EditPlan::to_last(control.clone(), l.layer_start(start), l.map.config())?;
    let edited = apply_gloss(&l.map, &plan)?;
    run.write_json("control_subspace.json", &control)?;
    run.write_checkpoint("control.tsr", &edited)?;
    run.finish()
}

#[allow(clippy::too_many_arguments)]
fn cmd_intervene(
    args: &[String],
    c: &ConfigArg,
    mode: SweepMode,
    probe_layer: Option<usize>,
    counts: &[usize],
    factor: f64,
    toxic_count: usize,
    proportions: &[f64],
    layers: &[usize],
    on: Option<PromptSet>,
) -> anyhow::Result<()> {
    let (mut run, l) = load_common("intervene", args, &c.config)?;
    let pairs = l.pairs(&mut run)?;
    let n_layers = l.map.config().n_layers;
    let probe = build_probe(&l.model, &pairs, probe_layer.unwrap_or(n_layers / 2))?;
    let set = on.unwrap_or(if mode == SweepMode::Enhance { PromptSet::ToxicPairs } else { PromptSet::Prompts });
    let prompts = match set {
        PromptSet::ToxicPairs => pairs.positives().map(<[u32]>::to_vec).collect(),
        PromptSet::Prompts => l.prompts(&mut run)?,
    };
    let ranked = rank_value_vectors(&l.model, &probe)?;
    let refs: Vec<UnitRef> = ranked.iter().map(|r| r.unit_ref()).collect();
    let steps = l.cfg.steps;
    let points: Vec<SweepPoint> = match mode {
        SweepMode::Enhance => enhance_sweep(&l.model, &refs, counts, factor, &prompts, &l.bad, steps)?,
        SweepMode::Suppress => suppress_sweep(&l.model, &refs, toxic_count, proportions, &prompts, &l.bad, steps)?,
        SweepMode::Reverse => {
            let layers: Vec<usize> =
                if layers.is_empty() { (l.layer_start(None)..n_layers).collect() } else { layers.to_vec() };
            let base = toxicity_proxy(&l.model, &prompts, &l.bad, steps, None)?;
            let (toward, away) = reverse_pair(&l.model, &probe, &layers, &prompts, &l.bad, steps)?;
            vec![away, SweepPoint { x: 0.0, badword_mass: base.mass, badword_rate: base.rate }, toward]
        }
    };
    let name = match mode {
        SweepMode::Enhance => "enhance",
        SweepMode::Suppress => "suppress",
        SweepMode::Reverse => "reverse",
    };
    run.write_json("probe.json", &probe)?;
    run.write_csv(&format!("intervene_{name}.csv"), &points)?;
    run.finish()
}

fn cmd_shift(
    args: &[String],
    c: &ConfigArg,
    layer: Option<usize>,
    alpha: f64,
    top: Option<usize>,
    direction: ShiftDirection,
) -> anyhow::Result<()> {
    let (mut run, l) = load_common("shift", args, &c.config)?;
    let corpus = l.corpus(&mut run)?;
    let layer = layer.unwrap_or(l.map.config().n_layers / 2);
    let dir = match direction {
        ShiftDirection::Probe => build_probe(&l.model, &l.pairs(&mut run)?, layer)?.direction,
        ShiftDirection::Subspace => l.subspace(&mut run, None)?.basis.vector(0).to_vec(),
    };
    let xbar = mean_activation(&l.model, &corpus, layer)?;
    let vocab = match &l.cfg.vocab {
        Some(v) => Some(read_vocab(v)?),
        None => None,
    };
    let m = top.unwrap_or(l.cfg.m);
    let mut rows = Vec::new();
    for a in [0.0, alpha] {
        for (rank, s) in shift_and_project(&xbar, &dir, a, l.model.embedding(), m)?.into_iter().enumerate() {
            rows.push(ShiftRow {
                alpha: a,
                rank: rank + 1,
                token: s.token,
                text: vocab.as_ref().map_or_else(|| s.token.to_string(), |v| v[s.token as usize].clone()),
                score: s.score,
                is_bad: l.bad.contains(s.token),
            });
        }
    }
    run.write_csv("shift.csv", &rows)?;
    run.finish()
}

fn cmd_eval(args: &[String], c: &ConfigArg, model: Option<&PathBuf>, report: &str) -> anyhow::Result<()> {
    let (mut run, mut l) = load_common("eval", args, &c.config)?;
    if let Some(p) = model {
        l.map = TensorMap::from_bytes(&run.read("model", p)?)?;
        l.model = Transformer::new(&l.map)?;
    }
    let prompts = l.prompts(&mut run)?;
    let corpus = l.corpus(&mut run)?;
    let r: EvalReport = evaluate(&l.model, l.map.content_hash()?, &prompts, &corpus, &l.bad, l.cfg.steps)?;
    run.write_json(report, &r)?;
    run.finish()
}

fn cmd_sweep_l0(args: &[String], c: &ConfigArg, sub: Option<&PathBuf>) -> anyhow::Result<()> {
    let (mut run, l) = load_common("sweep-l0", args, &c.config)?;
    let subspace = l.subspace(&mut run, sub)?;
    let prompts = l.prompts(&mut run)?;
    let corpus = l.corpus(&mut run)?;
    let mut rows = Vec::new();
    for start in 0..l.map.config().n_layers {
        let plan = EditPlan::to_last(subspace.clone(), start, l.map.config())?;
        let edited = Transformer::new(&apply_gloss(&l.map, &plan)?)?;
        let tox = toxicity_proxy(&edited, &prompts, &l.bad, l.cfg.steps, None)?;
        rows.push(SweepL0Row {
            layer_start: start,
            badword_mass: tox.mass,
            badword_rate: tox.rate,
            perplexity: perplexity(&edited, &corpus)?,
        });
    }
    run.write_csv("sweep_l0.csv", &rows)?;
    run.finish()
}

fn jsonl_bytes<T: Serialize>(items: &[T]) -> anyhow::Result<Vec<u8>> {
    let mut out = Vec::new();
    for it in items {
        out.extend(serde_json::to_vec(it)?);
        out.push(b'\n');
    }
    Ok(out)
}

fn cmd_fixture_gen(args: &[String], out: &Path, shape: FixtureShape) -> anyhow::Result<()> {
    let fx = gen_planted_model(shape)?;
    let mut run = Run::new("fixture-gen", args, out.to_path_buf())?;
    run.write_checkpoint("model.tsr", &fx.model)?;
    run.write("pairs.jsonl", &jsonl_bytes(&fx.pairs.to_lines())?)?;
    let mut words = String::from("# one word per line, matched case-insensitively\n");
    for w in &fx.bad_words {
        words.push_str(w);
        words.push('\n');
    }
    run.write("badwords.txt", words.as_bytes())?;
    run.write_json("vocab.json", &fx.vocab)?;
    for (name, seqs) in [
        ("prompts.jsonl", &fx.toxic_prompts),
        ("neutral_prompts.jsonl", &fx.neutral_prompts),
        ("corpus.jsonl", &fx.neutral_corpus),
    ] {
        let lines: Vec<IdsLine> = seqs.iter().map(|s| IdsLine { ids: s.clone() }).collect();
        run.write(name, &jsonl_bytes(&lines)?)?;
    }
    run.write_json("ground_truth.json", &fx.ground_truth(shape))?;
    let cfg = RunConfig {
        model: "model.tsr".into(),
        pairs: "pairs.jsonl".into(),
        badwords: "badwords.txt".into(),
        vocab: Some("vocab.json".into()),
        prompts: Some("prompts.jsonl".into()),
        corpus: Some("corpus.jsonl".into()),
        k: default_k(),
        // The fixture vocabulary has only 100 tokens, so the full-scale
        // top-100 window would cover all of it.
        m: 10,
        alpha_sel: default_alpha(),
        eta: default_eta(),
        layer_start: Some(fx.planted_layers[0]),
        seed: shape.seed,
        steps: default_steps(),
        out_dir: default_out(),
        aggregation: Aggregation::AllPositions,
        centering: Centering::Uncentered,
    };
    run.write_json("config.json", &cfg)?;
    run.finish()
}

fn dispatch(cli: Cli, args: &[String]) -> anyhow::Result<()> {
    match &cli.command {
        Command::Extract(c) => cmd_extract(args, c),
        Command::Subspace { cfg, candidates } => cmd_subspace(args, cfg, candidates.as_ref()),
        Command::Apply { cfg, subspace, layer_start } => cmd_apply(args, cfg, subspace.as_ref(), *layer_start),
        Command::Control { cfg, subspace, layer_start, seed } => {
            cmd_control(args, cfg, subspace.as_ref(), *layer_start, *seed)
        }
        Command::Intervene { cfg, mode, probe_layer, counts, factor, toxic_count, proportions, layers, on } => {
            cmd_intervene(args, cfg, *mode, *probe_layer, counts, *factor, *toxic_count, proportions, layers, *on)
        }
        Command::Shift { cfg, layer, alpha, top, direction } => cmd_shift(args, cfg, *layer, *alpha, *top, *direction),
        Command::Eval { cfg, model, report } => cmd_eval(args, cfg, model.as_ref(), report),
        Command::SweepL0 { cfg, subspace } => cmd_sweep_l0(args, cfg, subspace.as_ref()),
        Command::Fixture(FixtureCommand::Gen { out, seed, layers, d_model, d_ff, vocab, n_bad }) => {
            let shape = FixtureShape {
                n_layers: *layers,
                d_model: *d_model,
                d_ff: *d_ff,
                vocab_size: *vocab,
                n_bad: *n_bad,
                seed: *seed,
            };
            cmd_fixture_gen(args, out, shape)
        }
    }
}

/// Exit-code class of an error chain; anything not raised by the library is
/// treated as a configuration problem.
pub fn error_kind(err: &anyhow::Error) -> ErrorKind {
    err.chain().find_map(|e| e.downcast_ref::<Error>()).map_or(ErrorKind::Config, Error::kind)
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { ErrorKind::Config.exit_code() } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli, &args) {
        Ok(()) => 0,
        Err(e) => {
            let kind = error_kind(&e);
            let body = serde_json::json!({
                "error": {
                    "kind": kind.as_str(),
                    "message": format!("{e:#}"),
                    "exit_code": kind.exit_code(),
                }
            });
            eprintln!("{body}");
            kind.exit_code()
        }
    }
}

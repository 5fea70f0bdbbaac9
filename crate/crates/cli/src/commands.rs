use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use blockcore::core_tensor::{gauge_matched_blocks, matched_blocks, Preset};
use blockcore::data::{build_dataset, load_dataset_dir, read_fact_file, RawFact};
use blockcore::eval::evaluate_report;
use blockcore::io::{self, read_architecture, read_checkpoint, write_architecture, write_checkpoint, write_json, write_theta};
use blockcore::planted::{generate_planted, quantile_margin, PlantedSpec};
use blockcore::search::search_loop;
use blockcore::train::train_fixed;
use blockcore::{ArchitectureSet, Dataset, Error, FilterIndex, Result, Split};
use serde::Serialize;

use crate::config::{DataFlags, Mode, RunConfig, SearchFlags, TrainFlags};

pub const CONFIG_ECHO: &str = "config.json";
pub const STATS_FILE: &str = "stats.json";
pub const HIDDEN_TRUTH_FILE: &str = "hidden_truth.json";
pub const THETA_FILE: &str = "theta.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const HISTORY_FILE: &str = "history.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn print_json<T: Serialize>(value: &T) {
    print!("{}", io::to_json_string(value));
    let _ = std::io::stdout().flush();
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let text: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect();
    write_text(path, &text)
}

/// Facts per arity for each split.
#[derive(Debug, Serialize)]
pub struct DatasetStats {
    pub entities: usize,
    pub relations: usize,
    pub max_arity: usize,
    pub facts: BTreeMap<String, BTreeMap<usize, usize>>,
}

impl DatasetStats {
    pub fn of(dataset: &Dataset) -> Self {
        let facts = Split::ALL
            .iter()
            .map(|&split| {
                let mut counts = BTreeMap::new();
                for f in dataset.split(split) {
                    *counts.entry(f.arity()).or_insert(0) += 1;
                }
                (split.name().to_string(), counts)
            })
            .collect();
        Self {
            entities: dataset.entity_count(),
            relations: dataset.relation_count(),
            max_arity: dataset.max_arity,
            facts,
        }
    }
}

/// Keep only facts of arity `n`.
fn restrict_to_arity(mut dataset: Dataset, n: usize) -> Result<Dataset> {
    for split in [&mut dataset.train, &mut dataset.valid, &mut dataset.test] {
        split.retain(|f| f.arity() == n);
    }
    if dataset.train.is_empty() {
        return Err(Error::Data(format!("training split has no arity-{n} facts")));
    }
    dataset.max_arity = n;
    Ok(dataset)
}

fn load(data: &Path, config: &RunConfig) -> Result<Dataset> {
    config.check()?;
    let dataset = load_dataset_dir(data, &config.build_options())?;
    match (config.mode, config.arity) {
        (Mode::FixedArity, Some(n)) => restrict_to_arity(dataset, n),
        _ => Ok(dataset),
    }
}

fn echo(dir: &Path, config: &impl Serialize) -> Result<()> {
    write_json(&dir.join(CONFIG_ECHO), config)
}

pub struct IngestArgs {
    pub train: PathBuf,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn ingest(args: &IngestArgs, config: &RunConfig) -> Result<()> {
    config.check()?;
    let keep = |facts: Vec<RawFact>| -> Vec<RawFact> {
        match config.arity {
            Some(n) => facts.into_iter().filter(|f| f.arity() == n).collect(),
            None => facts,
        }
    };
    let train = keep(read_fact_file(&args.train)?);
    let valid = args.valid.as_deref().map(read_fact_file).transpose()?.map(keep);
    let test = args.test.as_deref().map(read_fact_file).transpose()?.map(keep).unwrap_or_default();
    if train.is_empty() {
        return Err(Error::Data(format!("{}: no training facts to ingest", args.train.display())));
    }
    let dataset = build_dataset(train, valid, test, &config.build_options())?;
    dataset.write_dir(&args.out)?;
    let stats = DatasetStats::of(&dataset);
    write_json(&args.out.join(STATS_FILE), &stats)?;
    echo(&args.out, config)?;
    print_json(&stats);
    Ok(())
}

/// Planted-generation settings; echoed next to the generated dataset.
#[derive(Debug, Clone, Serialize)]
pub struct SynthConfig {
    pub entities: usize,
    pub relations: usize,
    pub arities: Vec<usize>,
    pub dim: usize,
    pub segment_count: usize,
    pub truth: String,
    pub facts_per_arity: usize,
    /// Explicit margin; when absent it is the score quantile admitting `keep`.
    pub margin: Option<f64>,
    pub keep: f64,
    pub probe_samples: usize,
    pub seed: u64,
    pub max_draws: u64,
}

pub fn synth(settings: &SynthConfig, truth_file: Option<&Path>, out: &Path) -> Result<()> {
    let max_arity = settings.arities.iter().copied().max().unwrap_or(2);
    let truth = match truth_file {
        Some(path) => read_architecture(path)?,
        None => ArchitectureSet::preset(settings.truth.parse::<Preset>()?, settings.segment_count, max_arity)?,
    };
    let mut spec = PlantedSpec {
        entity_count: settings.entities,
        relation_count: settings.relations,
        arities: settings.arities.clone(),
        dim: settings.dim,
        segment_count: settings.segment_count,
        truth,
        facts_per_arity: settings.facts_per_arity,
        margin: 0.0,
        seed: settings.seed,
        max_draws: settings.max_draws,
    };
    spec.margin = match settings.margin {
        Some(m) => m,
        None => quantile_margin(&spec, settings.keep, settings.probe_samples)?,
    };
    eprintln!("generating with margin {:.6}", spec.margin);
    let planted = generate_planted(&spec)?;
    planted.dataset.write_dir(out)?;
    write_architecture(&out.join(HIDDEN_TRUTH_FILE), &planted.truth)?;
    let stats = DatasetStats::of(&planted.dataset);
    write_json(&out.join(STATS_FILE), &stats)?;
    let mut echoed = settings.clone();
    echoed.margin = Some(spec.margin);
    echo(out, &echoed)?;
    print_json(&stats);
    Ok(())
}

pub fn search(data: &DataFlags, flags: &TrainFlags, search: &SearchFlags, config: &RunConfig, out: &Path) -> Result<()> {
    let mut config = config.clone();
    data.apply(&mut config);
    flags.apply(&mut config);
    search.apply(&mut config);
    let dataset = load(&data.data, &config)?;
    create_dir(out)?;
    echo(out, &config)?;
    let outcome = search_loop(&dataset, &config.search(), &config.train())?;
    write_architecture(&out.join(io::ARCHITECTURE_FILE), &outcome.architecture)?;
    write_theta(&out.join(THETA_FILE), &outcome.theta)?;
    write_lines(&out.join(TRACE_FILE), &outcome.trace.records)?;
    let last = outcome.trace.records.last();
    print_json(&serde_json::json!({
        "iterations": outcome.trace.records.len(),
        "final_theta_entropy": outcome.theta.mean_entropy(),
        "final_valid_mrr": last.map(|r| r.valid_mrr),
        "architecture": out.join(io::ARCHITECTURE_FILE),
    }));
    Ok(())
}

pub enum ArchitectureSource {
    File(PathBuf),
    Preset(Preset),
}

pub fn train(
    data: &DataFlags,
    flags: &TrainFlags,
    source: &ArchitectureSource,
    config: &RunConfig,
    out: &Path,
) -> Result<()> {
    let mut config = config.clone();
    data.apply(&mut config);
    flags.apply(&mut config);
    let dataset = load(&data.data, &config)?;
    let architecture = match source {
        ArchitectureSource::File(path) => {
            let arch = read_architecture(path)?;
            if arch.segment_count() != config.segment_count {
                eprintln!(
                    "using the architecture's {} segments instead of {}",
                    arch.segment_count(),
                    config.segment_count
                );
                config.segment_count = arch.segment_count();
            }
            arch
        }
        ArchitectureSource::Preset(p) => ArchitectureSet::preset(*p, config.segment_count, dataset.max_arity)?,
    };
    architecture.ensure_covers(dataset.arities())?;
    create_dir(out)?;
    echo(out, &config)?;

    let outcome = train_fixed(&architecture, &dataset, &config.train())?;
    let mut stored = outcome.embeddings;
    stored.quantize_f32();
    let valid_mrr = if dataset.valid.is_empty() {
        None
    } else {
        let filter = FilterIndex::for_dataset(&dataset);
        let m = blockcore::eval::evaluate(&stored, &architecture, &dataset, Split::Valid, &filter, config.tie_policy)?;
        Some(m.mrr)
    };
    write_checkpoint(out, &stored, &architecture, config.to_json(), valid_mrr)?;
    write_lines(&out.join(HISTORY_FILE), &outcome.history)?;
    print_json(&serde_json::json!({
        "epochs_run": outcome.epochs_run,
        "initial_loss": outcome.initial_loss,
        "final_loss": outcome.history.last().map(|h| h.mean_loss),
        "valid_mrr": valid_mrr,
        "checkpoint": out,
    }));
    Ok(())
}

pub fn eval(
    checkpoint: &Path,
    data: &DataFlags,
    split: &str,
    config_file: Option<&PathBuf>,
    out: Option<&Path>,
) -> Result<()> {
    let split: Split = split.parse()?;
    let ck = read_checkpoint(checkpoint)?;
    // the run that wrote the checkpoint supplies the defaults
    let recorded: RunConfig = serde_json::from_value(ck.meta.config.clone()).unwrap_or_default();
    let mut config = match config_file {
        Some(path) => recorded.overlay_file(path)?,
        None => recorded,
    };
    data.apply(&mut config);
    let dataset = load(&data.data, &config)?;
    if dataset.entity_count() != ck.meta.entity_count || dataset.relation_count() != ck.meta.relation_count {
        return Err(Error::Data(format!(
            "checkpoint has {} entities and {} relations but the dataset has {} and {}",
            ck.meta.entity_count,
            ck.meta.relation_count,
            dataset.entity_count(),
            dataset.relation_count()
        )));
    }
    let report = evaluate_report(&ck.embeddings, &ck.architecture, &dataset, split, config.tie_policy)?;
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    print_json(&report);
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct ArityDiff {
    pub blocks: usize,
    pub matched: usize,
    /// Best match over segment relabelings and sign flips that leave scores unchanged.
    pub matched_up_to_symmetry: Option<usize>,
}

pub fn diff_arch(a: &Path, b: &Path) -> Result<BTreeMap<usize, ArityDiff>> {
    let (a, b) = (read_architecture(a)?, read_architecture(b)?);
    if a.segment_count() != b.segment_count() {
        return Err(Error::Shape(format!(
            "architectures use {} and {} segments",
            a.segment_count(),
            b.segment_count()
        )));
    }
    let mut out = BTreeMap::new();
    for (n, core) in a.iter() {
        let other = b.get(n)?;
        out.insert(
            n,
            ArityDiff {
                blocks: core.block_count(),
                matched: matched_blocks(core, other)?,
                matched_up_to_symmetry: gauge_matched_blocks(core, other)?,
            },
        );
    }
    Ok(out)
}

pub fn print_diff(a: &Path, b: &Path) -> Result<()> {
    let diff = diff_arch(a, b)?;
    let blocks: usize = diff.values().map(|d| d.blocks).sum();
    let matched: usize = diff.values().map(|d| d.matched).sum();
    print_json(&serde_json::json!({ "arities": diff, "blocks": blocks, "matched": matched }));
    Ok(())
}

const PRESETS: [Preset; 4] = [Preset::Cp, Preset::DistMult, Preset::Complex, Preset::Simple];

#[derive(Debug, Serialize)]
pub struct ArityView {
    pub blocks: usize,
    pub nonzero: usize,
    /// Codes grouped by relation segment, one row per relation segment.
    pub rows: Vec<Vec<i64>>,
    /// Name of a preset with exactly these codes, if any.
    pub preset: Option<String>,
}

pub fn inspect_arch(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (arch, entropy) = match io::architecture_from_json(&text) {
        Ok(arch) => (arch, None),
        Err(first) => match io::theta_from_json(&text) {
            Ok(theta) => (theta.derive_final(), Some(theta.mean_entropy())),
            Err(_) => return Err(first),
        },
    };
    let mut arities = BTreeMap::new();
    for (n, core) in arch.iter() {
        let values = core.values();
        let width = values.len() / core.active_segments();
        let preset = PRESETS.iter().find(|&&p| {
            blockcore::CoreAssignment::preset(p, n, arch.segment_count()).is_ok_and(|c| c == *core)
        });
        arities.insert(
            n,
            ArityView {
                blocks: core.block_count(),
                nonzero: core.nonzero_count(),
                rows: values.chunks(width).map(<[i64]>::to_vec).collect(),
                preset: preset.map(ToString::to_string),
            },
        );
    }
    print_json(&serde_json::json!({
        "segment_count": arch.segment_count(),
        "max_arity": arch.max_arity(),
        "theta_entropy": entropy,
        "arities": arities,
    }));
    Ok(())
}

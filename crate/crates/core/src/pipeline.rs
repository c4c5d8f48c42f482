//! End-to-end stages shared by the command line and the Python bindings.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::build_graphs;
use crate::ingest::{
    filter_users, make_instances, merge_consecutive, parse_events, parse_instances, parse_poi, reconstruct_sessions,
    reindex_by_train, segment_sessions, split_coldstart, split_standard, write_instances, AppVocab, DatasetSplit,
    PredictionInstance, Reindexed, SessionConfig, SplitMode, MIN_USER_EVENTS, PAD,
};
use crate::interpret::{
    alignment_study, perturb, select_candidates, AlignmentSample, DonorIndex, PerturbOutcome, PerturbationResult,
    PmiTable, ReplaceMode,
};
use crate::model::{batch_loss, trace_json, Misapp, ModelConfig};
use crate::numeric::finite_diff_check;
use crate::spatial::{categorize_stations, StationCategories, DEFAULT_K_LOC};
use crate::train_eval::{baseline_mfu, baseline_mru, rank_instances, MetricsReport, MrrMode, RankingResult, UsageCounts};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub window: usize,
    pub delimiter: char,
    pub min_user_events: usize,
    pub session: SessionConfig,
    pub k_loc: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            window: 8,
            delimiter: ',',
            min_user_events: MIN_USER_EVENTS,
            session: SessionConfig::default(),
            k_loc: DEFAULT_K_LOC,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub events: usize,
    pub row_errors: usize,
    pub users_kept: usize,
    pub users_dropped: usize,
    pub events_after_merge: usize,
    pub sessions: usize,
    pub dropped_long_sessions: usize,
    pub repeat_violations: usize,
    pub instances: usize,
    pub station_categories: usize,
    pub splits: Vec<SplitSummary>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub mode: String,
    pub apps: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub dropped_val: usize,
    pub dropped_test: usize,
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub standard: Reindexed,
    /// Absent when there are too few users for a user-level split.
    pub cold_start: Option<Reindexed>,
    pub categories: Option<StationCategories>,
    pub report: PreprocessReport,
}

impl Prepared {
    pub fn get(&self, mode: SplitMode) -> Option<&Reindexed> {
        match mode {
            SplitMode::Standard => Some(&self.standard),
            SplitMode::ColdStart => self.cold_start.as_ref(),
        }
    }
}

/// Parse, merge, filter, sessionize, build instances and split both ways.
pub fn preprocess(events_text: &str, poi_text: Option<&str>, config: &PreprocessConfig, seed: u64) -> Result<Prepared> {
    if config.window == 0 {
        return Err(Error::config("preprocess.window", "must be >= 1"));
    }
    let mut report = PreprocessReport::default();
    let log = parse_events(events_text, config.delimiter);
    report.events = log.event_count();
    report.row_errors = log.errors.len();
    for e in log.errors.iter().take(20) {
        report.warnings.push(format!("line {}: {}", e.line, e.message));
    }

    let categories = match poi_text {
        Some(text) => {
            let rows = parse_poi(text, config.delimiter).map_err(|e| Error::Parse {
                path: "poi".into(),
                line: e.line,
                msg: e.message,
            })?;
            Some(categorize_stations(rows, config.k_loc)?)
        }
        None => None,
    };
    let lookup = categories.as_ref().map(StationCategories::lookup);
    report.station_categories = categories.as_ref().map_or(0, |c| c.count);

    let users_total = log.users.len();
    let merged = log
        .users
        .into_iter()
        .map(|(u, evs)| (u, merge_consecutive(&evs)))
        .collect();
    let kept = filter_users(merged, config.min_user_events);
    report.users_kept = kept.len();
    report.users_dropped = users_total - kept.len();

    let mut sessions = Vec::new();
    for evs in kept.values() {
        report.events_after_merge += evs.len();
        let seg = segment_sessions(evs, &config.session);
        report.dropped_long_sessions += seg.dropped_long;
        report.repeat_violations += seg.repeat_violations;
        sessions.extend(seg.sessions);
    }
    report.sessions = sessions.len();
    let mut provisional = AppVocab::new();
    let instances = make_instances(
        &sessions,
        config.window,
        &mut provisional,
        |station| lookup.as_ref().and_then(|m| m.get(station).copied()),
        config.session.utc_offset_secs,
    );
    report.instances = instances.len();
    if instances.is_empty() {
        return Err(Error::invalid("preprocess", "no prediction instances survived cleaning"));
    }

    let (standard, warnings) = split_standard(&instances);
    report.warnings.extend(warnings);
    let standard = reindex_by_train(standard, &provisional);
    let cold_start = match split_coldstart(&instances, seed) {
        Ok(s) => Some(reindex_by_train(s, &provisional)),
        Err(e) => {
            warn!("cold-start split skipped: {e}");
            report.warnings.push(format!("cold-start split skipped: {e}"));
            None
        }
    };
    for r in std::iter::once(&standard).chain(cold_start.as_ref()) {
        report.splits.push(SplitSummary {
            mode: r.split.mode.as_str().into(),
            apps: r.vocab.len(),
            train: r.split.train.len(),
            val: r.split.val.len(),
            test: r.split.test.len(),
            dropped_val: r.dropped_val,
            dropped_test: r.dropped_test,
        });
    }
    Ok(Prepared {
        standard,
        cold_start,
        categories,
        report,
    })
}

/// A split as stored on disk, plus what the model needs to size itself.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub split: DatasetSplit,
    pub vocab: AppVocab,
    pub num_categories: usize,
}

impl SplitData {
    pub fn from_reindexed(r: &Reindexed, categories: Option<&StationCategories>) -> Self {
        SplitData {
            split: r.split.clone(),
            vocab: r.vocab.clone(),
            num_categories: categories.map_or(0, |c| c.count),
        }
    }

    /// Model config sized to this split.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            num_apps: self.vocab.len(),
            num_categories: self.num_categories,
            window: self.split.train.first().map_or(base.window, |i| i.window.len()),
            ..base.clone()
        }
    }

    /// Per-user app sequences rebuilt from the training instances.
    pub fn train_sequences(&self) -> Vec<(String, Vec<u32>)> {
        reconstruct_sessions(&self.split.train)
    }
}

pub fn split_dir(out: &Path, mode: SplitMode) -> PathBuf {
    out.join(mode.as_str())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::from)
}

/// Writes each split under `out/<mode>/` and the report to `out/report.json`.
pub fn write_prepared(prepared: &Prepared, out: &Path) -> Result<()> {
    for r in std::iter::once(&prepared.standard).chain(prepared.cold_start.as_ref()) {
        let dir = split_dir(out, r.split.mode);
        fs::create_dir_all(&dir)?;
        write(&dir.join("instances_train.txt"), &write_instances(&r.split.train))?;
        write(&dir.join("instances_val.txt"), &write_instances(&r.split.val))?;
        write(&dir.join("instances_test.txt"), &write_instances(&r.split.test))?;
        let mut vocab = r.vocab.names().join("\n");
        vocab.push('\n');
        write(&dir.join("vocab.txt"), &vocab)?;
        if let Some(c) = &prepared.categories {
            write(&dir.join("categories.csv"), &c.to_csv())?;
        }
    }
    write(&out.join("report.json"), &(serde_json::to_string_pretty(&prepared.report)? + "\n"))?;
    info!("wrote splits to {}", out.display());
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

/// Reads a split written by [`write_prepared`].
pub fn load_split(out: &Path, mode: SplitMode) -> Result<SplitData> {
    let dir = split_dir(out, mode);
    let load = |name: &str| -> Result<Vec<_>> {
        let path = dir.join(name);
        parse_instances(&read(&path)?, &path.display().to_string())
    };
    let split = DatasetSplit {
        train: load("instances_train.txt")?,
        val: load("instances_val.txt")?,
        test: load("instances_test.txt")?,
        mode,
    };
    let vocab = AppVocab::from_names(read(&dir.join("vocab.txt"))?.lines().filter(|l| !l.is_empty()).map(String::from));
    let cats = dir.join("categories.csv");
    let num_categories = if cats.exists() {
        StationCategories::from_csv(&read(&cats)?)?.count
    } else {
        0
    };
    Ok(SplitData {
        split,
        vocab,
        num_categories,
    })
}

/// Model and baseline metrics on one set of instances.
pub fn evaluate_all(
    model: &Misapp,
    data: &SplitData,
    which: &str,
    mode: MrrMode,
) -> Result<MetricsReport> {
    let instances = data.instances(which)?;
    let seqs = data.train_sequences();
    let counts = UsageCounts::from_sequences(seqs.iter().map(|(u, s)| (u.as_str(), s.as_slice())), data.vocab.len());
    let row = |ranks: Vec<usize>| RankingResult::from_ranks(ranks, mode).row();
    Ok(MetricsReport {
        split: format!("{}/{which}", data.split.mode.as_str()),
        instances: instances.len(),
        mrr_mode: mode,
        methods: vec![
            ("misapp".into(), row(rank_instances(model, instances)?)),
            ("mfu".into(), row(baseline_mfu(&counts, instances))),
            ("mru".into(), row(baseline_mru(instances))),
        ],
    })
}

/// Randomness stages derived from one root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Synth = 1,
    Split = 2,
    Train = 3,
    Explain = 4,
}

/// Independent per-stage seed (SplitMix64 finalizer over root and stage).
pub fn stage_seed(root: u64, stage: Stage) -> u64 {
    let mut z = root ^ (stage as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Two full-length windows used for whole-model gradient checks, folded
/// into `1..=num_apps`.
pub fn gradcheck_batch(config: &ModelConfig) -> Vec<PredictionInstance> {
    let n = config.num_apps.max(1) as u32;
    let base: [(&[u32], u32, u8, u32); 2] = [
        (&[1, 2, 3, 4, 2, 5, 6, 3], 7, 3, 1),
        (&[8, 9, 10, 8, 11, 12, 9, 7], 2, 20, 2),
    ];
    base.iter()
        .map(|&(w, target, tau, rho)| {
            let fold = |a: u32| (a - 1) % n + 1;
            let apps: Vec<u32> = w.iter().rev().take(config.window).rev().map(|&a| fold(a)).collect();
            let mut window = vec![PAD; config.window - apps.len()];
            window.extend_from_slice(&apps);
            PredictionInstance {
                user_id: "gradcheck".into(),
                window_len: apps.len(),
                window,
                target: fold(target),
                tau: tau % config.num_hours.max(1) as u8,
                rho_category: (config.num_categories > 0).then(|| (rho - 1) % config.num_categories as u32 + 1),
                timestamp: 0,
            }
        })
        .collect()
}

/// Largest finite-difference relative error per named parameter tensor.
pub fn gradcheck(config: &ModelConfig, seed: u64, h: f64) -> Result<Vec<(String, f64)>> {
    let config = ModelConfig { dropout: 0.0, ..config.clone() };
    let model = Misapp::new(config.clone(), seed)?;
    let batch = gradcheck_batch(&config);
    let refs: Vec<&PredictionInstance> = batch.iter().collect();
    let layout = &model.params.layout;
    let errors = finite_diff_check(
        |tape, vars| batch_loss(tape, vars, layout, &config, &refs, None),
        &model.params.tensors,
        h,
    )?;
    Ok(model.params.names.iter().cloned().zip(errors).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    /// Samples selected for the alignment study.
    pub samples: usize,
    pub replace: ReplaceMode,
    pub on: String,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            samples: 50,
            replace: ReplaceMode::All,
            on: "test".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExplainSample {
    pub sequence: Vec<String>,
    pub target: String,
    pub alignment: AlignmentSample,
    pub trace: serde_json::Value,
    pub edges: String,
    pub perturbation: Option<PerturbationResult>,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExplainReport {
    pub candidates: usize,
    pub mean_tau: f64,
    pub consistency_rate: f64,
    pub mean_delta: Option<f64>,
    pub top1_change_rate: Option<f64>,
    pub samples: Vec<ExplainSample>,
    #[serde(skip)]
    pub table: String,
}

impl SplitData {
    pub fn instances(&self, which: &str) -> Result<&[PredictionInstance]> {
        match which {
            "test" => Ok(&self.split.test),
            "val" => Ok(&self.split.val),
            "train" => Ok(&self.split.train),
            other => Err(Error::config("on", format!("unknown set `{other}`"))),
        }
    }

    pub fn pmi(&self) -> PmiTable {
        PmiTable::build(self.train_sequences().iter().map(|(_, s)| s.as_slice()))
    }

    pub fn donors(&self) -> DonorIndex {
        DonorIndex::new(self.train_sequences().iter().map(|(_, s)| s.as_slice()))
    }
}

/// Alignment of learned hop weights with PMI relevance on the samples where
/// multi-hop structure helps most, plus a perturbation per sample.
pub fn explain(full: &Misapp, one_hop: &Misapp, data: &SplitData, config: &ExplainConfig) -> Result<ExplainReport> {
    let instances = data.instances(&config.on)?;
    let candidates = select_candidates(full, one_hop, instances, config.samples)?;
    let indices: Vec<usize> = candidates.iter().map(|c| c.index).collect();
    let pmi = data.pmi();
    let donors = data.donors();
    let report = alignment_study(&indices, instances, &pmi, |inst| Ok(full.forward(inst)?.hop_weights))?;
    let name = |a: u32| data.vocab.name(a).map_or_else(|| a.to_string(), String::from);
    let mut samples = Vec::with_capacity(report.samples.len());
    for a in &report.samples {
        let inst = &instances[a.index];
        let (perturbation, skipped) = match perturb(full, inst, a.index, &pmi, &donors, config.replace)? {
            PerturbOutcome::Done(r) => (Some(r), None),
            PerturbOutcome::Skipped { reason, .. } => (None, Some(reason)),
        };
        samples.push(ExplainSample {
            sequence: inst.apps().iter().map(|&x| name(x)).collect(),
            target: name(inst.target),
            alignment: a.clone(),
            trace: trace_json(&full.forward(inst)?, Some(&data.vocab)),
            edges: build_graphs(&inst.window)?.dump(),
            perturbation,
            skipped,
        });
    }
    let done: Vec<&PerturbationResult> = samples.iter().filter_map(|s| s.perturbation.as_ref()).collect();
    let k = done.len() as f64;
    Ok(ExplainReport {
        candidates: candidates.len(),
        mean_tau: report.mean_tau,
        consistency_rate: report.consistency_rate,
        mean_delta: (!done.is_empty()).then(|| done.iter().map(|r| r.delta).sum::<f64>() / k),
        top1_change_rate: (!done.is_empty()).then(|| done.iter().filter(|r| r.top1_changed()).count() as f64 / k),
        table: report.to_csv(instances, Some(&data.vocab)),
        samples,
    })
}

//! File-level stages: prepare, train, evaluate, baselines and attention dumps.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{checkpoint, ParameterStore, Tensor};
use crate::baselines;
use crate::competition::{cluster_labels, competition_matrix, write_labels_csv, CompetitionMatrix};
use crate::config::{derive_seed, RunConfig, TrainConfig, STREAMS};
use crate::error::{Error, Result};
use crate::geodata::{
    build_attribute_matrix, build_distance_matrix, build_od_series, bucketize, parse_timestamp, read_attributes,
    read_regions, read_trips, read_vocab, OdSeries, Region, SpanSummary, TripRecord,
};
use crate::head::{evaluate, MetricsReport};
use crate::model::{Dataset, Model, Split};
use crate::population::{discretize, write_levels_csv, LogisticFit, PopulationLevels};
use crate::train::{self, attention_table, evaluate_targets, TrainOutcome};
use crate::transform::{write_attention_csv, HOURS};

pub const PREPARED_DIR: &str = "prepared";

/// Raw inputs after parsing.
#[derive(Clone, Debug)]
pub struct Inputs {
    pub regions: Vec<Region>,
    pub vocab: Vec<String>,
    pub trips: Vec<TripRecord>,
    pub rejected: usize,
}

impl Inputs {
    pub fn read(cfg: &RunConfig) -> Result<Self> {
        let mut regions = read_regions(&cfg.data.regions)?;
        let vocab = read_vocab(&cfg.data.vocab)?;
        read_attributes(&cfg.data.attributes, &mut regions, vocab.len())?;
        let parsed = read_trips(&cfg.data.trips, regions.len())?;
        for r in parsed.rejects.iter().take(5) {
            log::warn!("{}: line {} rejected: {}", cfg.data.trips.display(), r.line, r.reason);
        }
        Ok(Inputs { regions, vocab, trips: parsed.records, rejected: parsed.rejects.len() })
    }

    pub fn populations(&self) -> Vec<f64> {
        self.regions.iter().map(|r| r.population).collect()
    }
}

/// Framing and clustering choices for one preparation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareParams {
    pub start: Option<i64>,
    pub frames: Option<usize>,
    pub tau: i64,
    pub tz_offset_hours: i64,
    pub k1: usize,
    pub k2: usize,
    pub seed: u64,
}

impl PrepareParams {
    pub fn from_config(cfg: &RunConfig) -> Self {
        PrepareParams {
            start: cfg.start.as_deref().and_then(parse_timestamp),
            frames: cfg.frames,
            tau: cfg.tau,
            tz_offset_hours: cfg.tz_offset_hours,
            k1: cfg.train.k1,
            k2: cfg.train.k2,
            seed: cfg.train.seed,
        }
    }
}

/// Everything computed once before training.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub series: OdSeries,
    pub hours: Vec<usize>,
    pub attr: Tensor,
    pub dist: Tensor,
    pub populations: Vec<f64>,
    pub vocab: Vec<String>,
    pub fit: LogisticFit,
    pub levels: PopulationLevels,
    pub k2: usize,
    pub clusters: Vec<usize>,
    pub competition: CompetitionMatrix,
    pub split: Split,
    pub span: SpanSummary,
}

impl Prepared {
    pub fn build(inputs: &Inputs, params: &PrepareParams) -> Result<Self> {
        let n = inputs.regions.len();
        if params.tau <= 0 {
            return Err(Error::Config("tau: must be positive".into()));
        }
        let t0 = match params.start {
            Some(t) => t,
            None => {
                let first = inputs.trips.iter().map(|t| t.timestamp).min().ok_or_else(|| Error::invalid("no trips"))?;
                first.div_euclid(params.tau) * params.tau
            }
        };
        let frames = match params.frames {
            Some(f) => f,
            None => {
                let last = inputs.trips.iter().map(|t| t.timestamp).max().ok_or_else(|| Error::invalid("no trips"))?;
                if last < t0 {
                    return Err(Error::invalid("every trip precedes the configured start"));
                }
                ((last - t0).div_euclid(params.tau) + 1) as usize
            }
        };
        let (series, span) = build_od_series(&inputs.trips, n, t0, params.tau, frames as i64)?;
        if span.before + span.after > 0 {
            log::warn!("{} trip(s) before and {} after the framed span", span.before, span.after);
        }
        let hours = hours_of(&series, params.tz_offset_hours);
        let attr = build_attribute_matrix(&inputs.regions, inputs.vocab.len())?;
        let dist = build_distance_matrix(&inputs.regions);
        let populations = inputs.populations();
        let (fit, levels) = discretize(&populations, params.k1)?;
        let cluster_seed = derive_seed(params.seed, "clustering");
        let clusters = cluster_labels(&attr, params.k2, cluster_seed)
            .map_err(|e| Error::invalid(format!("clustering regions by attributes (k2 = {}): {e}", params.k2)))?;
        let competition = competition_matrix(&attr, &dist, params.k2, cluster_seed)
            .map_err(|e| Error::invalid(format!("building the competition matrix (k2 = {}): {e}", params.k2)))?;
        Ok(Prepared {
            split: Split::new(series.len()),
            series,
            hours,
            attr,
            dist,
            populations,
            vocab: inputs.vocab.clone(),
            fit,
            levels,
            k2: params.k2,
            clusters,
            competition,
            span,
        })
    }

    pub fn frames(&self) -> Vec<Tensor> {
        (0..self.series.len()).map(|k| self.series.frame_tensor(k)).collect()
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::assemble(
            self.frames(),
            self.hours.clone(),
            &self.attr,
            &self.levels,
            self.k2,
            self.clusters.clone(),
            self.competition.clone(),
        )
    }
}

pub fn hours_of(series: &OdSeries, tz_offset_hours: i64) -> Vec<usize> {
    (0..series.len()).map(|k| bucketize(series.frame_start(k), tz_offset_hours * 3600)).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn render(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Contents of `prepared/manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepManifest {
    pub created_at: String,
    pub inputs: BTreeMap<String, String>,
    pub params: PrepareParams,
    pub regions: usize,
    pub attributes: usize,
    pub frames: usize,
    pub t0: i64,
    pub split: Split,
    pub trips_in_span: usize,
    pub trips_outside_span: usize,
    pub trips_rejected: usize,
    pub logistic_fit: LogisticFit,
    pub competition_labels: Vec<usize>,
    pub clustering_seed: u64,
    pub artifacts: BTreeMap<String, String>,
}

fn input_hashes(cfg: &RunConfig) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (k, p) in [
        ("regions", &cfg.data.regions),
        ("attributes", &cfg.data.attributes),
        ("vocab", &cfg.data.vocab),
        ("trips", &cfg.data.trips),
    ] {
        out.insert(k.to_string(), hash_file(p)?);
    }
    Ok(out)
}

/// Prepared artifacts depend on the seed and cluster counts, so each combination gets its own directory.
pub fn prepared_dir(cfg: &RunConfig) -> PathBuf {
    let t = &cfg.train;
    cfg.output_dir.join(PREPARED_DIR).join(format!("k1-{}_k2-{}_s{}", t.k1, t.k2, t.seed))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PrepareStatus {
    Written,
    UpToDate,
}

/// Writes the prepared artifacts unless an identical preparation already exists.
pub fn prepare(cfg: &RunConfig) -> Result<(PrepManifest, PrepareStatus)> {
    let dir = prepared_dir(cfg);
    let inputs_hash = input_hashes(cfg)?;
    let params = PrepareParams::from_config(cfg);
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        if let Ok(old) = read_json::<PrepManifest>(&manifest_path) {
            if old.inputs == inputs_hash && old.params == params && artifacts_intact(&dir, &old) {
                return Ok((old, PrepareStatus::UpToDate));
            }
        }
    }
    let inputs = Inputs::read(cfg)?;
    let prep = Prepared::build(&inputs, &params)?;

    let files: Vec<(&str, Vec<u8>)> = vec![
        ("od_series.json", to_json(&prep.series)),
        ("cluster_labels.csv", render(|w| write_labels_csv(w, &prep.clusters))),
        ("competition_matrix.csv", render(|w| prep.competition.write_csv(w))),
        ("population_levels.csv", render(|w| write_levels_csv(w, &prep.populations, &prep.levels.levels))),
    ];
    let mut artifacts = BTreeMap::new();
    for (name, bytes) in &files {
        write_bytes(&dir.join(name), bytes)?;
        artifacts.insert(name.to_string(), sha256_hex(bytes));
    }
    let manifest = PrepManifest {
        created_at: now(),
        inputs: inputs_hash,
        params: params.clone(),
        regions: inputs.regions.len(),
        attributes: inputs.vocab.len(),
        frames: prep.series.len(),
        t0: prep.series.t0,
        split: prep.split,
        trips_in_span: prep.span.in_span,
        trips_outside_span: prep.span.before + prep.span.after,
        trips_rejected: inputs.rejected,
        logistic_fit: prep.fit,
        competition_labels: prep.competition.labels.clone(),
        clustering_seed: derive_seed(params.seed, "clustering"),
        artifacts,
    };
    write_bytes(&manifest_path, &to_json(&manifest))?;
    Ok((manifest, PrepareStatus::Written))
}

fn artifacts_intact(dir: &Path, m: &PrepManifest) -> bool {
    m.artifacts.iter().all(|(name, h)| hash_file(&dir.join(name)).is_ok_and(|x| &x == h))
}

fn read_csv_column(path: &Path, col: usize) -> Result<Vec<String>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let field = line
            .split(',')
            .nth(col)
            .ok_or_else(|| Error::data(path, format!("line {}: missing column {col}", i + 1)))?;
        out.push(field.trim().to_string());
    }
    Ok(out)
}

fn parse_usizes(path: &Path, col: usize) -> Result<Vec<usize>> {
    read_csv_column(path, col)?
        .iter()
        .map(|s| s.parse().map_err(|_| Error::data(path, format!("invalid integer {s:?}"))))
        .collect()
}

/// Loads prepared artifacts, refusing when inputs or parameters changed since `prepare`.
pub fn load_prepared(cfg: &RunConfig) -> Result<(Prepared, PrepManifest)> {
    let dir = prepared_dir(cfg);
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::data(&manifest_path, "prepared artifacts missing; run `odr prepare` first"));
    }
    let manifest: PrepManifest = read_json(&manifest_path)?;
    if manifest.inputs != input_hashes(cfg)? || manifest.params != PrepareParams::from_config(cfg) {
        return Err(Error::data(&manifest_path, "prepared artifacts are stale for this config; rerun `odr prepare`"));
    }
    if !artifacts_intact(&dir, &manifest) {
        return Err(Error::data(&dir, "prepared artifacts were modified; rerun `odr prepare`"));
    }
    let series: OdSeries = read_json(&dir.join("od_series.json"))?;
    let mut regions = read_regions(&cfg.data.regions)?;
    let vocab = read_vocab(&cfg.data.vocab)?;
    read_attributes(&cfg.data.attributes, &mut regions, vocab.len())?;
    let clusters = parse_usizes(&dir.join("cluster_labels.csv"), 1)?;
    let levels = parse_usizes(&dir.join("population_levels.csv"), 2)?;
    let hours = hours_of(&series, manifest.params.tz_offset_hours);
    let prep = Prepared {
        split: Split::new(series.len()),
        hours,
        attr: build_attribute_matrix(&regions, vocab.len())?,
        dist: build_distance_matrix(&regions),
        populations: regions.iter().map(|r| r.population).collect(),
        vocab,
        fit: manifest.logistic_fit,
        levels: PopulationLevels::from_levels(manifest.params.k1, levels),
        k2: manifest.params.k2,
        clusters,
        competition: CompetitionMatrix::from_labels(manifest.competition_labels.clone()),
        span: SpanSummary { in_span: manifest.trips_in_span, before: 0, after: manifest.trips_outside_span },
        series,
    };
    Ok((prep, manifest))
}

/// Directory for one training run, named by variant, ablations and seed.
pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    let t = &cfg.train;
    let mut name = t.variant.name().to_string();
    for a in t.ablations.active() {
        name.push('-');
        name.push_str(a);
    }
    name.push_str(&format!("-s{}", t.seed));
    cfg.output_dir.join("runs").join(name)
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    run_dir(cfg).join("best.ckpt")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub created_at: String,
    pub seed: u64,
    pub streams: BTreeMap<String, u64>,
    pub config: TrainConfig,
    pub config_hash: String,
    pub dataset: BTreeMap<String, String>,
    pub target_scale: f64,
    pub epochs: usize,
    pub steps: u64,
    pub best_epoch: usize,
    pub best_step: u64,
    pub history_sha256: String,
    pub checkpoint_sha256: String,
}

pub struct TrainReport {
    pub dir: PathBuf,
    pub outcome: TrainOutcome,
    pub test: MetricsReport,
    pub manifest: RunManifest,
}

/// Trains on prepared data and writes history, checkpoint, attention and manifest.
pub fn run_training(cfg: &RunConfig, on_epoch: impl FnMut(&train::EpochRecord)) -> Result<TrainReport> {
    let (prep, prep_manifest) = load_prepared(cfg)?;
    let data = prep.dataset()?;
    let outcome = train::train(&cfg.train, &data, on_epoch)?;
    let dir = run_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let history = render(|w| train::write_history_csv(w, &outcome.history));
    write_bytes(&dir.join("history.csv"), &history)?;
    write_bytes(
        &dir.join("attention_history.csv"),
        &render(|w| train::write_attention_history_csv(w, &outcome.attention, &prep.vocab)),
    )?;
    let model = Model::new(&cfg.train, &data);
    let table = attention_table(&model, &outcome.best)?;
    write_bytes(&dir.join("attention.csv"), &render(|w| write_attention_csv(w, &table, &prep.vocab)))?;

    let ckpt = dir.join("best.ckpt");
    let cm = checkpoint::CheckpointManifest { seed: cfg.train.seed, step: outcome.best_step, config_hash: cfg.train.hash() };
    checkpoint::save(&ckpt, &outcome.best, &cm)?;

    let test_targets = data.targets(data.split.test_range(), cfg.train.window);
    let test = evaluate_targets(&model, &outcome.best, &test_targets)?;
    write_bytes(&dir.join("metrics_test.json"), &to_json(&MetricsJson::model(&cfg.train, &test)))?;

    let streams = STREAMS.iter().map(|s| (s.to_string(), derive_seed(cfg.train.seed, s))).collect();
    let manifest = RunManifest {
        created_at: now(),
        seed: cfg.train.seed,
        streams,
        config: cfg.train.clone(),
        config_hash: cfg.train.hash(),
        dataset: prep_manifest.artifacts.clone(),
        target_scale: data.scale,
        epochs: outcome.history.len(),
        steps: outcome.steps,
        best_epoch: outcome.best_epoch,
        best_step: outcome.best_step,
        history_sha256: sha256_hex(&history),
        checkpoint_sha256: hash_file(&ckpt)?,
    };
    write_bytes(&dir.join("run_manifest.json"), &to_json(&manifest))?;
    Ok(TrainReport { dir, outcome, test, manifest })
}

/// Loads a checkpoint, refusing one written under a different training config.
pub fn load_checkpoint(path: &Path, train: &TrainConfig) -> Result<ParameterStore> {
    let (store, m) = checkpoint::load(path)?;
    let expected = train.hash();
    if m.config_hash != expected {
        return Err(Error::CheckpointMismatch(format!(
            "{} was trained with config {} but the current config hashes to {expected}",
            path.display(),
            m.config_hash
        )));
    }
    Ok(store)
}

/// Shape of every metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsJson {
    pub model: String,
    pub variant: Option<String>,
    pub seed: u64,
    pub rmse: f64,
    pub mae: f64,
    pub smape: f64,
    pub pcc: f64,
    pub frames: usize,
}

impl MetricsJson {
    pub fn model(cfg: &TrainConfig, r: &MetricsReport) -> Self {
        let mut model = "ractc".to_string();
        for a in cfg.ablations.active() {
            model.push('-');
            model.push_str(a);
        }
        MetricsJson::new(model, Some(cfg.variant.name().to_string()), cfg.seed, r)
    }

    pub fn new(model: String, variant: Option<String>, seed: u64, r: &MetricsReport) -> Self {
        MetricsJson { model, variant, seed, rmse: r.rmse, mae: r.mae, smape: r.smape, pcc: r.pcc, frames: r.frames.len() }
    }
}

/// Test-split metrics of a checkpoint, written to `out`.
pub fn run_evaluation(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<MetricsJson> {
    let store = load_checkpoint(ckpt, &cfg.train)?;
    let (prep, _) = load_prepared(cfg)?;
    let data = prep.dataset()?;
    let model = Model::new(&cfg.train, &data);
    let targets = data.targets(data.split.test_range(), cfg.train.window);
    let report = evaluate_targets(&model, &store, &targets)?;
    let json = MetricsJson::model(&cfg.train, &report);
    write_bytes(out, &to_json(&json))?;
    Ok(json)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Ha,
    Gm,
    Iom,
    Rm,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [BaselineKind::Ha, BaselineKind::Gm, BaselineKind::Iom, BaselineKind::Rm];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Ha => "ha",
            BaselineKind::Gm => "gm",
            BaselineKind::Iom => "iom",
            BaselineKind::Rm => "rm",
        }
    }

    pub fn parse(s: &str) -> Result<Vec<Self>> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(Self::ALL.to_vec()),
            other => Self::ALL
                .iter()
                .find(|k| k.name() == other)
                .map(|k| vec![*k])
                .ok_or_else(|| Error::Config(format!("unknown baseline {s:?}; expected ha, gm, iom, rm or all"))),
        }
    }
}

/// Per-hour predictions of one baseline from the training split.
pub fn baseline_predictions(kind: BaselineKind, prep: &Prepared, frames: &[Tensor]) -> Result<Vec<Tensor>> {
    let train = prep.split.train_range();
    let train_frames = &frames[train.clone()];
    let train_hours = &prep.hours[train];
    let ha: Vec<Tensor> = (0..HOURS).map(|h| baselines::historical_average(train_frames, train_hours, h)).collect::<Result<_>>()?;
    Ok(match kind {
        BaselineKind::Ha => ha,
        BaselineKind::Gm => {
            let n = prep.populations.len();
            let mut pooled = Tensor::zeros(&[n, n]);
            for m in &ha {
                pooled.add_assign(m)?;
            }
            let pooled = pooled.map(|v| v / HOURS as f64);
            let pooled_fit = baselines::gravity_fit(&pooled, &prep.populations, &prep.dist);
            let mut out = Vec::with_capacity(HOURS);
            for (h, m) in ha.iter().enumerate() {
                let fit = match baselines::gravity_fit(m, &prep.populations, &prep.dist) {
                    Ok(f) => f,
                    Err(e) => {
                        log::warn!("gravity fit at hour {h} failed ({e}); using the pooled fit");
                        match &pooled_fit {
                            Ok(f) => *f,
                            Err(e) => return Err(Error::invalid(format!("gravity fit failed for every hour: {e}"))),
                        }
                    }
                };
                out.push(baselines::gravity_predict(&fit, &prep.populations, &prep.dist));
            }
            out
        }
        BaselineKind::Iom => {
            let fit = baselines::iom_fit(&ha, &prep.populations, &prep.dist)?;
            ha.iter().map(|m| baselines::iom_predict(&fit, &prep.populations, &baselines::outflows(m))).collect()
        }
        BaselineKind::Rm => ha
            .iter()
            .map(|m| baselines::radiation_predict(&prep.populations, &baselines::outflows(m), &prep.dist))
            .collect(),
    })
}

/// Test-split metrics for one baseline over the model's test targets.
pub fn baseline_report(kind: BaselineKind, prep: &Prepared, window: usize) -> Result<MetricsReport> {
    let frames = prep.frames();
    let per_hour = baseline_predictions(kind, prep, &frames)?;
    let targets: Vec<usize> = prep.split.test_range().filter(|&t| t >= window).collect();
    let yhat: Vec<Tensor> = targets.iter().map(|&t| per_hour[prep.hours[t]].clone()).collect();
    let y: Vec<Tensor> = targets.iter().map(|&t| frames[t].clone()).collect();
    evaluate(&yhat, &y)
}

pub fn run_baselines(cfg: &RunConfig, kinds: &[BaselineKind], dir: &Path) -> Result<Vec<MetricsJson>> {
    let (prep, _) = load_prepared(cfg)?;
    let mut out = Vec::new();
    for &k in kinds {
        let report = baseline_report(k, &prep, cfg.train.window)?;
        let json = MetricsJson::new(k.name().to_string(), None, cfg.train.seed, &report);
        write_bytes(&dir.join(format!("metrics_{}.json", k.name())), &to_json(&json))?;
        out.push(json);
    }
    Ok(out)
}

/// Writes the hour-by-attribute attention table of a checkpoint.
pub fn dump_attention(cfg: &RunConfig, ckpt: &Path, hours: &[usize], out: &Path) -> Result<Vec<(usize, Vec<f64>)>> {
    if let Some(&h) = hours.iter().find(|&&h| h >= HOURS) {
        return Err(Error::Config(format!("hour {h} out of range 0..{HOURS}")));
    }
    let store = load_checkpoint(ckpt, &cfg.train)?;
    let (prep, _) = load_prepared(cfg)?;
    let data = prep.dataset()?;
    let model = Model::new(&cfg.train, &data);
    let rows: Vec<(usize, Vec<f64>)> = hours.iter().map(|&h| Ok((h, model.attention(&store, h)?))).collect::<Result<_>>()?;
    let mut w = BufWriter::new(File::create(out).map_err(|e| Error::io(out, e))?);
    write_attention_csv(&mut w, &rows, &prep.vocab).map_err(|e| Error::io(out, e))?;
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(rows)
}

//! Analysis pipeline: configuration, the on-disk artifact layout, and the
//! stage functions shared by the command-line driver and integration tests.
//!
//! Stages communicate only through files in one workspace directory, so
//! every intermediate is inspectable and any stage can be rerun in
//! isolation. All reports embed a hash of the configuration, and every
//! stage is deterministic: rerunning with unchanged inputs reproduces each
//! artifact byte for byte.
//!
//! Estimation stages read the control-region files and the signal-region 3b
//! file only; the signal-region 4b file is consumed exclusively by the
//! validation and test stages.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimators::{
    abcd_mass, estimate_fvt, estimate_ot_fvt, estimate_ot_knn_from_weights, normalize,
    read_estimate, write_estimate, EstimateMeta, Method, SampleCounts, WeightedEstimate,
};
use crate::event::{
    classify_region, delta_r_close, delta_r_other, m_hh, Event, RegionLabel, RegionParams,
};
use crate::inference::{
    bin_events, closure_auc, fit_mu, poisson_toy_data, ratio_plot_data, uniform_edges, Histogram,
    RatioPlotBin, SignalFit,
};
use crate::io::{read_events_csv, write_events_csv};
use crate::metric::{
    distance_matrix, read_distance_matrix, write_distance_matrix, DistanceMatrix, MetricParams,
};
use crate::net::{build_model, read_model, train, write_model, NetConfig, RatioModel};
use crate::toygen::{generate, generate_signal, GenConfig};
use crate::transport::{
    fit_coupling_from_distances, knn_weights_from_distances, read_coupling, write_coupling,
    KnnWeights,
};

pub const SAMPLE_3B: &str = "sample3b.csv";
pub const SAMPLE_4B: &str = "sample4b.csv";
pub const TRUTH_4B: &str = "truth4b.csv";
pub const GEN_REPORT: &str = "gen.json";
pub const CR_3B: &str = "cr3b.csv";
pub const SR_3B: &str = "sr3b.csv";
pub const CR_4B: &str = "cr4b.csv";
pub const SR_4B: &str = "sr4b.csv";
pub const COUNTS: &str = "counts.json";
pub const DIST_FIT: &str = "dist_fit.csv";
pub const DIST_KNN: &str = "dist_knn.csv";
pub const COUPLING: &str = "coupling.csv";
pub const FVT_MODEL: &str = "fvt_model.json";
pub const SVB_MODEL: &str = "svb_model.json";
pub const SIGNAL_TEMPLATE: &str = "signal_template.csv";
pub const VALIDATION: &str = "validation.json";

pub fn estimate_file(method: Method) -> String {
    format!("estimate_{}.csv", method.as_str())
}

pub fn scatter_file(a: Method, b: Method) -> String {
    format!("scatter_{}_{}.csv", a.as_str(), b.as_str())
}

pub fn fit_file(method: Method) -> String {
    format!("fit_{}.json", method.as_str())
}

/// Full parameter set of one analysis. Everything downstream of the raw
/// samples is a pure function of this struct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub gen: GenConfig,
    pub region: RegionParams,
    /// Jet-metric parameters for the control-to-signal coupling.
    pub metric_fit: MetricParams,
    /// Jet-metric parameters for the nearest-neighbor extension.
    pub metric_knn: MetricParams,
    /// Neighbor count of the OT-kNN estimator.
    pub k: usize,
    pub fvt_net: NetConfig,
    pub svb_net: NetConfig,
    pub closure_net: NetConfig,
    /// Uniform classifier-score bins on [0, 1] for the final fit.
    pub score_bins: usize,
    /// Total expected signal events the template is normalized to at μ = 1.
    pub signal_yield: f64,
    /// Size of the generated pure-signal training/template sample.
    pub n_signal_template: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            gen: GenConfig::default(),
            region: RegionParams::default(),
            metric_fit: MetricParams {
                r: 0.4,
                ..MetricParams::default()
            },
            metric_knn: MetricParams {
                r: 2.75,
                ..MetricParams::default()
            },
            k: 10,
            fvt_net: NetConfig {
                seed: 11,
                ..NetConfig::default()
            },
            svb_net: NetConfig {
                seed: 12,
                ..NetConfig::default()
            },
            closure_net: NetConfig {
                seed: 13,
                ..NetConfig::default()
            },
            score_bins: 10,
            signal_yield: 60.0,
            n_signal_template: 4000,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.fvt_net.validate()?;
        self.svb_net.validate()?;
        self.closure_net.validate()?;
        if self.k == 0 {
            return Err(Error::Domain("k must be at least 1".into()));
        }
        if self.score_bins == 0 {
            return Err(Error::Domain("score_bins must be at least 1".into()));
        }
        if !(self.signal_yield.is_finite() && self.signal_yield > 0.0) {
            return Err(Error::Domain(format!(
                "signal_yield must be finite and positive, got {}",
                self.signal_yield
            )));
        }
        if self.n_signal_template == 0 {
            return Err(Error::Domain("n_signal_template must be at least 1".into()));
        }
        Ok(())
    }

    /// Hex digest of the canonical JSON form, embedded in every report.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }
}

pub fn read_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: PipelineConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Workspace directory holding all pipeline artifacts.
#[derive(Clone, Debug)]
pub struct Workspace {
    dir: PathBuf,
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Workspace { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn create(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))
    }

    fn require(&self, name: &str, produced_by: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::Format(format!(
                "missing artifact `{}`; run the {produced_by} stage first",
                path.display()
            )));
        }
        Ok(path)
    }

    fn file_hash(&self, name: &str) -> Result<String> {
        let bytes = fs::read(self.path(name)).map_err(|e| Error::io(&self.path(name), e))?;
        Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
    }

    fn input_hashes(&self, names: &[&str]) -> Result<BTreeMap<String, String>> {
        names
            .iter()
            .map(|&n| Ok((n.to_string(), self.file_hash(n)?)))
            .collect()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenReport {
    pub config: String,
    pub n_3b: usize,
    pub n_4b: usize,
    pub n_truth: usize,
    pub outputs: BTreeMap<String, String>,
}

/// Generate the 3b, 4b, and held-out truth samples.
pub fn stage_gen(ws: &Workspace, cfg: &PipelineConfig) -> Result<GenReport> {
    cfg.validate()?;
    ws.create()?;
    let samples = generate(&cfg.gen)?;
    write_events_csv(&ws.path(SAMPLE_3B), &samples.sample3b)?;
    write_events_csv(&ws.path(SAMPLE_4B), &samples.sample4b)?;
    write_events_csv(&ws.path(TRUTH_4B), &samples.truth4b)?;
    let report = GenReport {
        config: cfg.hash(),
        n_3b: samples.sample3b.len(),
        n_4b: samples.sample4b.len(),
        n_truth: samples.truth4b.len(),
        outputs: ws.input_hashes(&[SAMPLE_3B, SAMPLE_4B, TRUTH_4B])?,
    };
    write_json(&ws.path(GEN_REPORT), &report)?;
    Ok(report)
}

/// Control/signal/outside partition of one sample.
pub struct RegionSplit {
    pub control: Vec<Event>,
    pub signal: Vec<Event>,
    pub outside: usize,
}

pub fn split_regions(events: &[Event], params: &RegionParams) -> RegionSplit {
    let mut split = RegionSplit {
        control: Vec::new(),
        signal: Vec::new(),
        outside: 0,
    };
    for event in events {
        match classify_region(event, params) {
            RegionLabel::Control => split.control.push(event.clone()),
            RegionLabel::Signal => split.signal.push(event.clone()),
            RegionLabel::Outside => split.outside += 1,
        }
    }
    split
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub config: String,
    pub counts: SampleCounts,
    pub outside_3b: usize,
    pub outside_4b: usize,
    pub inputs: BTreeMap<String, String>,
}

/// Split both samples into control and signal regions.
pub fn stage_split(ws: &Workspace, cfg: &PipelineConfig) -> Result<SplitReport> {
    let path3b = ws.require(SAMPLE_3B, "gen")?;
    let path4b = ws.require(SAMPLE_4B, "gen")?;
    let split3b = split_regions(&read_events_csv(&path3b)?, &cfg.region);
    let split4b = split_regions(&read_events_csv(&path4b)?, &cfg.region);
    write_events_csv(&ws.path(CR_3B), &split3b.control)?;
    write_events_csv(&ws.path(SR_3B), &split3b.signal)?;
    write_events_csv(&ws.path(CR_4B), &split4b.control)?;
    write_events_csv(&ws.path(SR_4B), &split4b.signal)?;
    let report = SplitReport {
        config: cfg.hash(),
        counts: SampleCounts {
            n_c: split3b.control.len(),
            n_s: split3b.signal.len(),
            m_c: split4b.control.len(),
            m_s: split4b.signal.len(),
        },
        outside_3b: split3b.outside,
        outside_4b: split4b.outside,
        inputs: ws.input_hashes(&[SAMPLE_3B, SAMPLE_4B])?,
    };
    write_json(&ws.path(COUNTS), &report)?;
    Ok(report)
}

fn read_counts(ws: &Workspace) -> Result<SplitReport> {
    let path = ws.require(COUNTS, "split")?;
    read_json(&path)
}

/// Compute the two distance matrices: control-3b × signal-3b for the
/// coupling fit, and control-4b × control-3b for the neighbor extension.
pub fn stage_dist(ws: &Workspace, cfg: &PipelineConfig) -> Result<()> {
    let cr3b = read_events_csv(&ws.require(CR_3B, "split")?)?;
    let sr3b = read_events_csv(&ws.require(SR_3B, "split")?)?;
    let cr4b = read_events_csv(&ws.require(CR_4B, "split")?)?;
    let fit = distance_matrix(&cr3b, &sr3b, &cfg.metric_fit)?;
    write_distance_matrix(&ws.path(DIST_FIT), &fit)?;
    let knn = distance_matrix(&cr4b, &cr3b, &cfg.metric_knn)?;
    write_distance_matrix(&ws.path(DIST_KNN), &knn)?;
    Ok(())
}

/// Solve the optimal coupling between the control and signal 3b samples.
pub fn stage_couple(ws: &Workspace, _cfg: &PipelineConfig) -> Result<()> {
    let matrix = read_distance_matrix(&ws.require(DIST_FIT, "dist")?)?;
    let solution = fit_coupling_from_distances(&matrix)?;
    write_coupling(&ws.path(COUPLING), &solution.coupling)
}

/// Train the four-vs-three channel classifier on the control region.
pub fn stage_train_fvt(ws: &Workspace, cfg: &PipelineConfig) -> Result<()> {
    let cr3b = read_events_csv(&ws.require(CR_3B, "split")?)?;
    let cr4b = read_events_csv(&ws.require(CR_4B, "split")?)?;
    let model = build_model(&cfg.fvt_net, cfg.fvt_net.seed)?;
    let trained = train(&model, &cr3b, &cr4b)?;
    write_model(&ws.path(FVT_MODEL), &trained)
}

/// Train the signal-vs-background classifier on truth background against a
/// generated pure-signal sample, and persist the signal template.
pub fn stage_train_svb(ws: &Workspace, cfg: &PipelineConfig) -> Result<()> {
    let truth = read_events_csv(&ws.require(TRUTH_4B, "gen")?)?;
    let signal = generate_signal(&cfg.gen, cfg.n_signal_template)?;
    write_events_csv(&ws.path(SIGNAL_TEMPLATE), &signal)?;
    let model = build_model(&cfg.svb_net, cfg.svb_net.seed)?;
    let trained = train(&model, &truth, &signal)?;
    write_model(&ws.path(SVB_MODEL), &trained)
}

/// Run one background estimator over the signal-region 3b sample and write
/// the normalized per-event weights.
pub fn stage_estimate(ws: &Workspace, cfg: &PipelineConfig, method: Method) -> Result<WeightedEstimate> {
    let report = read_counts(ws)?;
    let counts = report.counts;
    let sr3b = read_events_csv(&ws.require(SR_3B, "split")?)?;

    let raw = match method {
        Method::Raw3b => WeightedEstimate::from_weights(vec![1.0; sr3b.len()])?,
        Method::Fvt => {
            let model = read_model(&ws.require(FVT_MODEL, "train-fvt")?)?;
            estimate_fvt(&model, &sr3b)?
        }
        Method::OtFvt => {
            let model = read_model(&ws.require(FVT_MODEL, "train-fvt")?)?;
            let coupling = read_coupling(&ws.require(COUPLING, "couple")?)?;
            let cr3b = read_events_csv(&ws.require(CR_3B, "split")?)?;
            estimate_ot_fvt(&coupling, &model, &cr3b, &counts)?
        }
        Method::OtKnn => {
            let coupling = read_coupling(&ws.require(COUPLING, "couple")?)?;
            let dist = read_distance_matrix(&ws.require(DIST_KNN, "dist")?)?;
            let weights = knn_from_matrix(&dist, cfg.k)?;
            estimate_ot_knn_from_weights(&coupling, &weights, &counts)?
        }
    };
    let estimate = normalize(&raw, abcd_mass(&counts)?)?;
    let meta = EstimateMeta {
        method,
        counts,
        config_hash: cfg.hash(),
    };
    write_estimate(&ws.path(&estimate_file(method)), &estimate, &meta)?;
    Ok(estimate)
}

fn knn_from_matrix(dist: &DistanceMatrix, k: usize) -> Result<Vec<KnnWeights>> {
    (0..dist.n_rows())
        .map(|i| {
            let row: Vec<f64> = dist.values.row(i).to_vec();
            knn_weights_from_distances(&row, k)
        })
        .collect()
}

/// Per-event weight pairs of two estimates over the same atoms, emitted as
/// plot-ready CSV for a bivariate comparison.
pub fn stage_scatter(ws: &Workspace, _cfg: &PipelineConfig, a: Method, b: Method) -> Result<()> {
    let stage = |m: Method| format!("estimate --method {}", m.as_str());
    let (est_a, _) = read_estimate(&ws.require(&estimate_file(a), &stage(a))?)?;
    let (est_b, _) = read_estimate(&ws.require(&estimate_file(b), &stage(b))?)?;
    if est_a.atoms() != est_b.atoms() {
        return Err(Error::Dimension(
            "scatter requires estimates over identical atoms".into(),
        ));
    }
    let path = ws.path(&scatter_file(a, b));
    let mut text = format!("atom_index,{},{}\n", a.as_str(), b.as_str());
    for ((&atom, &wa), &wb) in est_a.atoms().iter().zip(est_a.weights()).zip(est_b.weights()) {
        text.push_str(&format!("{atom},{wa},{wb}\n"));
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// One observable's estimate-versus-truth comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableComparison {
    pub variable: String,
    pub estimate: Histogram,
    pub truth: Histogram,
    pub ratio: Vec<RatioPlotBin>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodValidation {
    pub method: String,
    pub auc: f64,
    pub auc_lo: f64,
    pub auc_hi: f64,
    pub variables: Vec<VariableComparison>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub config: String,
    /// Methods sorted by closure AUC, best (lowest) first.
    pub methods: Vec<MethodValidation>,
    pub inputs: BTreeMap<String, String>,
}

/// Closure-test every available estimate against the held-out truth:
/// discrimination AUC with bootstrap interval plus estimate-versus-truth
/// histograms of the main observables. The raw 3b baseline is always
/// included.
pub fn stage_validate(ws: &Workspace, cfg: &PipelineConfig) -> Result<ValidationReport> {
    let sr3b = read_events_csv(&ws.require(SR_3B, "split")?)?;
    let truth_all = read_events_csv(&ws.require(TRUTH_4B, "gen")?)?;
    let truth_sr = split_regions(&truth_all, &cfg.region).signal;
    if truth_sr.is_empty() {
        return Err(Error::Dimension(
            "validation needs truth events in the signal region".into(),
        ));
    }
    let svb = read_model(&ws.require(SVB_MODEL, "train-svb")?)?;
    let oversample = cfg.gen.truth_oversample.max(1) as f64;

    let mut methods = Vec::new();
    for method in Method::ALL {
        let name = estimate_file(method);
        let estimate = if method == Method::Raw3b {
            let report = read_counts(ws)?;
            normalize(
                &WeightedEstimate::from_weights(vec![1.0; sr3b.len()])?,
                abcd_mass(&report.counts)?,
            )?
        } else if ws.path(&name).exists() {
            read_estimate(&ws.path(&name))?.0
        } else {
            continue;
        };

        let closure = closure_auc(&estimate, &sr3b, &truth_sr, &cfg.closure_net, cfg.gen.seed)?;
        let variables = variable_comparisons(&estimate, &sr3b, &truth_sr, oversample, &svb, cfg)?;
        methods.push(MethodValidation {
            method: method.as_str().to_string(),
            auc: closure.point,
            auc_lo: closure.lo,
            auc_hi: closure.hi,
            variables,
        });
    }
    methods.sort_by(|a, b| a.auc.total_cmp(&b.auc));

    let report = ValidationReport {
        config: cfg.hash(),
        methods,
        inputs: ws.input_hashes(&[SR_3B, TRUTH_4B])?,
    };
    write_json(&ws.path(VALIDATION), &report)?;
    Ok(report)
}

fn variable_comparisons(
    estimate: &WeightedEstimate,
    sr3b: &[Event],
    truth_sr: &[Event],
    oversample: f64,
    svb: &RatioModel,
    cfg: &PipelineConfig,
) -> Result<Vec<VariableComparison>> {
    let mut est_events = Vec::with_capacity(estimate.len());
    let mut est_weights = Vec::with_capacity(estimate.len());
    for (&atom, &v) in estimate.atoms().iter().zip(estimate.weights()) {
        let event = sr3b.get(atom as usize).ok_or_else(|| {
            Error::Dimension(format!(
                "estimate atom {atom} out of range for {} events",
                sr3b.len()
            ))
        })?;
        est_events.push(event.clone());
        est_weights.push(event.weight * v);
    }
    let truth_weights: Vec<f64> = truth_sr.iter().map(|e| e.weight / oversample).collect();

    let compare = |variable: &str, value: &dyn Fn(&Event) -> f64, edges: Vec<f64>| {
        let est_hist = bin_events(&est_events, &est_weights, |e| value(e), &edges, variable)?;
        let truth_hist = bin_events(truth_sr, &truth_weights, |e| value(e), &edges, variable)?;
        let ratio = ratio_plot_data(&est_hist, &truth_hist)?;
        Ok(VariableComparison {
            variable: variable.to_string(),
            estimate: est_hist,
            truth: truth_hist,
            ratio,
        })
    };

    let m_h = cfg.region.m_h;
    Ok(vec![
        compare(
            "svb",
            &|e| svb.predict(e),
            uniform_edges(0.0, 1.0, cfg.score_bins)?,
        )?,
        compare(
            "m_hh",
            &|e| m_hh(e, m_h).unwrap_or(-1.0),
            uniform_edges(200.0, 800.0, 12)?,
        )?,
        compare("dr_close", &|e| delta_r_close(e), uniform_edges(0.0, 4.0, 10)?)?,
        compare("dr_other", &|e| delta_r_other(e), uniform_edges(0.0, 4.0, 10)?)?,
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub config: String,
    pub method: String,
    pub fit: SignalFit,
    pub edges: Vec<f64>,
    pub data: Vec<f64>,
    pub background: Vec<f64>,
    pub signal: Vec<f64>,
    pub inputs: BTreeMap<String, String>,
}

/// Bin the observed signal-region 4b data in the signal-vs-background score
/// and fit the signal strength against the background estimate.
pub fn stage_test(ws: &Workspace, cfg: &PipelineConfig, method: Method) -> Result<FitReport> {
    let estimate_name = estimate_file(method);
    let (estimate, _) = read_estimate(&ws.require(
        &estimate_name,
        &format!("estimate --method {}", method.as_str()),
    )?)?;
    let sr3b = read_events_csv(&ws.require(SR_3B, "split")?)?;
    let sr4b = read_events_csv(&ws.require(SR_4B, "split")?)?;
    let svb = read_model(&ws.require(SVB_MODEL, "train-svb")?)?;
    let signal_all = read_events_csv(&ws.require(SIGNAL_TEMPLATE, "train-svb")?)?;
    let signal_sr = split_regions(&signal_all, &cfg.region).signal;

    let edges = uniform_edges(0.0, 1.0, cfg.score_bins)?;
    let background = binned_scores(&svb, &sr3b, Some(&estimate), &edges, "background")?;
    let data = binned_scores(&svb, &sr4b, None, &edges, "data")?;
    let mut signal = binned_scores(&svb, &signal_sr, None, &edges, "signal")?;
    let total = signal.total() + signal.underflow + signal.overflow;
    if total <= 0.0 {
        return Err(Error::Domain(
            "signal template is empty in the signal region".into(),
        ));
    }
    let scale = cfg.signal_yield / total;
    for v in signal.content.iter_mut() {
        *v *= scale;
    }
    for v in signal.sumw2.iter_mut() {
        *v *= scale * scale;
    }

    let fit = fit_mu(&background, &signal, &data)?;
    let report = FitReport {
        config: cfg.hash(),
        method: method.as_str().to_string(),
        fit,
        edges,
        data: data.content.clone(),
        background: background.content.clone(),
        signal: signal.content.clone(),
        inputs: ws.input_hashes(&[&estimate_name, SR_3B, SR_4B, SVB_MODEL, SIGNAL_TEMPLATE])?,
    };
    write_json(&ws.path(&fit_file(method)), &report)?;
    Ok(report)
}

/// Score events with the classifier and histogram them. With an estimate,
/// each event's weight is its estimator weight; without, plain unit counts.
pub fn binned_scores(
    model: &RatioModel,
    events: &[Event],
    estimate: Option<&WeightedEstimate>,
    edges: &[f64],
    label: &str,
) -> Result<Histogram> {
    match estimate {
        Some(est) => {
            let mut selected = Vec::with_capacity(est.len());
            let mut weights = Vec::with_capacity(est.len());
            for (&atom, &v) in est.atoms().iter().zip(est.weights()) {
                let event = events.get(atom as usize).ok_or_else(|| {
                    Error::Dimension(format!(
                        "estimate atom {atom} out of range for {} events",
                        events.len()
                    ))
                })?;
                selected.push(event.clone());
                weights.push(v);
            }
            bin_events(&selected, &weights, |e| model.predict(e), edges, label)
        }
        None => {
            let weights = vec![1.0; events.len()];
            bin_events(events, &weights, |e| model.predict(e), edges, label)
        }
    }
}

/// Draw one Poisson toy dataset from a fit report's expected yields and
/// refit it; used for calibration studies.
pub fn refit_toy(report: &FitReport, mu: f64, seed: u64) -> Result<SignalFit> {
    let background = histogram_from(&report.edges, &report.background, "background")?;
    let signal = histogram_from(&report.edges, &report.signal, "signal")?;
    let data = poisson_toy_data(&background, &signal, mu, seed)?;
    fit_mu(&background, &signal, &data)
}

fn histogram_from(edges: &[f64], content: &[f64], label: &str) -> Result<Histogram> {
    let mut hist = Histogram::new(edges.to_vec(), label)?;
    if content.len() != hist.content.len() {
        return Err(Error::Dimension(format!(
            "{label}: {} bins of content for {} edges",
            content.len(),
            edges.len()
        )));
    }
    hist.content = content.to_vec();
    hist.sumw2 = content.to_vec();
    hist.validate()?;
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> PipelineConfig {
        PipelineConfig {
            gen: GenConfig {
                n_3b: 700,
                n_4b: 260,
                truth_oversample: 2,
                seed: 5,
                ..GenConfig::default()
            },
            metric_fit: MetricParams {
                r: 0.4,
                grid_size: 12,
                refine_iters: 4,
            },
            metric_knn: MetricParams {
                r: 2.75,
                grid_size: 12,
                refine_iters: 4,
            },
            k: 5,
            fvt_net: NetConfig {
                channel_width: 4,
                epochs: 3,
                seed: 11,
                ..NetConfig::default()
            },
            svb_net: NetConfig {
                channel_width: 4,
                epochs: 3,
                seed: 12,
                ..NetConfig::default()
            },
            closure_net: NetConfig {
                channel_width: 4,
                epochs: 3,
                seed: 13,
                ..NetConfig::default()
            },
            score_bins: 5,
            n_signal_template: 400,
            ..PipelineConfig::default()
        }
    }

    #[test]
    #[ignore = "default-scale rehearsal, run manually"]
    fn default_scale_rehearsal() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let cfg = PipelineConfig::default();
        let started = std::time::Instant::now();
        let mut lap = std::time::Instant::now();
        let mut mark = |stage: &str| {
            println!(
                "{stage}: {:.1}s (total {:.1}s)",
                lap.elapsed().as_secs_f64(),
                started.elapsed().as_secs_f64()
            );
            lap = std::time::Instant::now();
        };

        stage_gen(&ws, &cfg).unwrap();
        mark("gen");
        let split = stage_split(&ws, &cfg).unwrap();
        println!("counts: {:?}", split.counts);
        mark("split");
        stage_dist(&ws, &cfg).unwrap();
        mark("dist");
        stage_couple(&ws, &cfg).unwrap();
        mark("couple");
        stage_train_fvt(&ws, &cfg).unwrap();
        mark("train-fvt");
        stage_train_svb(&ws, &cfg).unwrap();
        mark("train-svb");
        for method in [Method::Fvt, Method::OtKnn, Method::OtFvt] {
            stage_estimate(&ws, &cfg, method).unwrap();
            mark(method.as_str());
        }
        let report = stage_validate(&ws, &cfg).unwrap();
        for m in &report.methods {
            println!(
                "{}: auc {:.4} [{:.4}, {:.4}]",
                m.method, m.auc, m.auc_lo, m.auc_hi
            );
        }
        mark("validate");
        let fit = stage_test(&ws, &cfg, Method::OtKnn).unwrap();
        println!(
            "fit: mu_hat {:.3} q0 {:.3} z {:.3}",
            fit.fit.mu_hat, fit.fit.q0, fit.fit.z
        );
        mark("test");
    }

    #[test]
    fn config_hash_tracks_content() {
        let cfg = tiny_config();
        assert_eq!(cfg.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
        let mut other = cfg.clone();
        other.k = 6;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn config_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let cfg = tiny_config();
        write_json(&path, &cfg).unwrap();
        let back = read_config(&path).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn default_config_is_valid() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_config();
        cfg.k = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.signal_yield = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.score_bins = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn split_partitions_every_event() {
        let cfg = tiny_config();
        let samples = generate(&cfg.gen).unwrap();
        let split = split_regions(&samples.sample3b, &cfg.region);
        assert_eq!(
            split.control.len() + split.signal.len() + split.outside,
            samples.sample3b.len()
        );
        assert!(!split.control.is_empty());
        assert!(!split.signal.is_empty());
    }

    #[test]
    fn missing_artifacts_name_the_producing_stage() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let cfg = tiny_config();
        let err = stage_split(&ws, &cfg).unwrap_err();
        assert!(err.to_string().contains("gen"), "{err}");
        let err = stage_test(&ws, &cfg, Method::Fvt).unwrap_err();
        assert!(err.to_string().contains("estimate"), "{err}");
    }

    #[test]
    fn gen_and_split_stages_produce_consistent_reports() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let cfg = tiny_config();
        let gen = stage_gen(&ws, &cfg).unwrap();
        assert_eq!(gen.n_3b, cfg.gen.n_3b);
        assert_eq!(gen.outputs.len(), 3);

        let split = stage_split(&ws, &cfg).unwrap();
        assert_eq!(
            split.counts.n_c + split.counts.n_s + split.outside_3b,
            cfg.gen.n_3b
        );
        assert_eq!(
            split.counts.m_c + split.counts.m_s + split.outside_4b,
            cfg.gen.n_4b
        );
        assert_eq!(split.config, cfg.hash());

        let back: SplitReport = read_json(&ws.path(COUNTS)).unwrap();
        assert_eq!(back, split);

        let cr3b = read_events_csv(&ws.path(CR_3B)).unwrap();
        assert_eq!(cr3b.len(), split.counts.n_c);
        let sr4b = read_events_csv(&ws.path(SR_4B)).unwrap();
        assert_eq!(sr4b.len(), split.counts.m_s);
    }

    #[test]
    fn rerunning_gen_and_split_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let cfg = tiny_config();
        stage_gen(&ws, &cfg).unwrap();
        stage_split(&ws, &cfg).unwrap();
        let names = [SAMPLE_3B, SAMPLE_4B, TRUTH_4B, GEN_REPORT, CR_3B, SR_3B, CR_4B, SR_4B, COUNTS];
        let before: Vec<Vec<u8>> = names
            .iter()
            .map(|n| fs::read(ws.path(n)).unwrap())
            .collect();
        stage_gen(&ws, &cfg).unwrap();
        stage_split(&ws, &cfg).unwrap();
        for (name, bytes) in names.iter().zip(&before) {
            assert_eq!(&fs::read(ws.path(name)).unwrap(), bytes, "{name} changed");
        }
    }

    #[test]
    fn full_pipeline_smoke() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let cfg = tiny_config();

        stage_gen(&ws, &cfg).unwrap();
        let split = stage_split(&ws, &cfg).unwrap();
        stage_dist(&ws, &cfg).unwrap();
        stage_couple(&ws, &cfg).unwrap();
        stage_train_fvt(&ws, &cfg).unwrap();
        stage_train_svb(&ws, &cfg).unwrap();

        let expected_mass = split.counts.m_c as f64 * split.counts.n_s as f64
            / split.counts.n_c as f64;
        for method in [Method::Fvt, Method::OtKnn, Method::OtFvt] {
            let estimate = stage_estimate(&ws, &cfg, method).unwrap();
            assert_eq!(estimate.len(), split.counts.n_s);
            assert!((estimate.total_mass() - expected_mass).abs() <= 1e-9 * expected_mass);
        }
        stage_scatter(&ws, &cfg, Method::Fvt, Method::OtKnn).unwrap();
        let scatter =
            fs::read_to_string(ws.path(&scatter_file(Method::Fvt, Method::OtKnn))).unwrap();
        assert_eq!(scatter.lines().count(), split.counts.n_s + 1);
        assert!(scatter.starts_with("atom_index,fvt,ot-knn"));

        let report = stage_validate(&ws, &cfg).unwrap();
        assert_eq!(report.methods.len(), 4);
        assert!(report
            .methods
            .iter()
            .any(|m| m.method == Method::Raw3b.as_str()));
        for pair in report.methods.windows(2) {
            assert!(pair[0].auc <= pair[1].auc);
        }
        for m in &report.methods {
            assert!(m.auc_lo <= m.auc && m.auc <= m.auc_hi);
            assert_eq!(m.variables.len(), 4);
        }

        let fit = stage_test(&ws, &cfg, Method::Fvt).unwrap();
        assert!(fit.fit.mu_hat.is_finite() && fit.fit.mu_hat >= 0.0);
        assert!(fit.fit.q0 >= 0.0);
        assert_eq!(fit.data.len(), cfg.score_bins);
        let total_signal: f64 = fit.signal.iter().sum();
        assert!(total_signal <= cfg.signal_yield + 1e-9);

        let toy = refit_toy(&fit, 1.0, 3).unwrap();
        assert!(toy.mu_hat.is_finite());
    }

    #[test]
    fn signal_template_scaling_hits_the_configured_yield() {
        let edges = uniform_edges(0.0, 1.0, 4).unwrap();
        let mut hist = Histogram::new(edges.clone(), "signal").unwrap();
        hist.content = vec![4.0, 3.0, 2.0, 1.0];
        let report = FitReport {
            config: "x".into(),
            method: "fvt".into(),
            fit: SignalFit {
                mu_hat: 0.0,
                q0: 0.0,
                z: 0.0,
                logl_at_0: 0.0,
                logl_at_hat: 0.0,
            },
            edges,
            data: vec![10.0, 10.0, 10.0, 10.0],
            background: vec![10.0, 10.0, 10.0, 10.0],
            signal: vec![4.0, 3.0, 2.0, 1.0],
            inputs: BTreeMap::new(),
        };
        let toy = refit_toy(&report, 0.0, 9).unwrap();
        assert!(toy.mu_hat >= 0.0);
    }
}

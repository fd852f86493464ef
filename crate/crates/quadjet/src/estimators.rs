//! Background estimators over the signal-region 3b sample.
//!
//! All three methods produce the same output shape: nonnegative weights
//! `v_j` attached to the signal-region 3b events, interpreted as an atomic
//! measure `Σ_j v_j δ_{H_j}`. Estimators emit their natural raw weights;
//! rescaling to a physical yield (usually [`abcd_mass`]) is the caller's
//! explicit step via [`normalize`]. No estimator accepts signal-region 4b
//! events, so blindness holds by construction — [`SampleCounts::m_s`] is
//! carried for reporting only and never enters a formula.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::Event;
use crate::metric::MetricParams;
use crate::net::RatioModel;
use crate::transport::{self, Coupling, KnnWeights};

/// Region population sizes. `n_*` count 3b events and `m_*` count 4b
/// events; `*_c` is the control region, `*_s` the signal region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub n_c: usize,
    pub n_s: usize,
    pub m_c: usize,
    pub m_s: usize,
}

/// An atomic background estimate: weights over signal-region 3b events.
///
/// `atoms` are indices into the signal-region 3b sample, `weights` the
/// matching `v_j ≥ 0`. `total_mass` is the declared normalization and
/// agrees with `Σ v_j` to 1e-9 (relative, floored at 1).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedEstimate {
    atoms: Vec<u32>,
    weights: Vec<f64>,
    total_mass: f64,
}

impl WeightedEstimate {
    pub fn new(atoms: Vec<u32>, weights: Vec<f64>) -> Result<Self> {
        if atoms.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        let mut seen = atoms.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Domain("duplicate atom index in estimate".into()));
        }
        for (&a, &w) in atoms.iter().zip(&weights) {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Domain(format!(
                    "weight {w} for atom {a} must be finite and nonnegative"
                )));
            }
        }
        let total_mass = weights.iter().sum();
        Ok(Self {
            atoms,
            weights,
            total_mass,
        })
    }

    /// Dense estimate over atoms `0..weights.len()`.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.len() > u32::MAX as usize {
            return Err(Error::Dimension("estimate too large for u32 atoms".into()));
        }
        let atoms = (0..weights.len() as u32).collect();
        Self::new(atoms, weights)
    }

    pub fn atoms(&self) -> &[u32] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

/// Classifier-odds estimator: `v_j = ψ(H_j)/(1-ψ(H_j))` for every
/// signal-region 3b event, no normalization applied.
pub fn estimate_fvt(model: &RatioModel, signal3b: &[Event]) -> Result<WeightedEstimate> {
    let weights: Vec<f64> = signal3b.par_iter().map(|e| model.odds_ratio(e)).collect();
    WeightedEstimate::from_weights(weights)
}

/// Transported-odds estimator: `v_j = (n_c/m_c) · Σ_i odds(H_i) · q̂_ij`
/// where `q̂` couples the 3b control sample (rows) to the 3b signal sample
/// (columns) and the odds come from the control-region classifier.
pub fn estimate_ot_fvt(
    coupling: &Coupling,
    model: &RatioModel,
    control3b: &[Event],
    counts: &SampleCounts,
) -> Result<WeightedEstimate> {
    check_counts(coupling, counts)?;
    if control3b.len() != coupling.n_rows() {
        return Err(Error::Dimension(format!(
            "{} control 3b events but coupling has {} rows",
            control3b.len(),
            coupling.n_rows()
        )));
    }
    let odds: Vec<f64> = control3b.par_iter().map(|e| model.odds_ratio(e)).collect();
    let prefactor = counts.n_c as f64 / counts.m_c as f64;
    let mut weights = vec![0.0; coupling.n_cols()];
    for e in coupling.entries() {
        weights[e.col as usize] += odds[e.row as usize] * e.mass;
    }
    for w in &mut weights {
        *w *= prefactor;
    }
    WeightedEstimate::from_weights(weights)
}

/// Nearest-neighbor transport estimator: every 4b control event is pushed
/// through the coupling via the conditional rows of its `k` nearest 3b
/// control neighbors, and the resulting mixtures are averaged:
/// `v_j = (1/m_c) · Σ_ℓ Σ_i ω_i(G_ℓ) · q̂(j|i)`. The weights form a
/// probability measure by construction.
pub fn estimate_ot_knn(
    coupling: &Coupling,
    control4b: &[Event],
    control3b: &[Event],
    k: usize,
    params: &MetricParams,
    counts: &SampleCounts,
) -> Result<WeightedEstimate> {
    if control3b.len() != coupling.n_rows() {
        return Err(Error::Dimension(format!(
            "{} control 3b events but coupling has {} rows",
            control3b.len(),
            coupling.n_rows()
        )));
    }
    if control4b.len() != counts.m_c {
        return Err(Error::Dimension(format!(
            "{} control 4b events but counts say m_c = {}",
            control4b.len(),
            counts.m_c
        )));
    }
    let neighbor_weights: Vec<KnnWeights> = control4b
        .par_iter()
        .map(|g| transport::knn_weights(g, control3b, k, params))
        .collect::<Result<Vec<_>>>()?;
    estimate_ot_knn_from_weights(coupling, &neighbor_weights, counts)
}

/// [`estimate_ot_knn`] with the neighbor search already done, one
/// [`KnnWeights`] per 4b control event.
pub fn estimate_ot_knn_from_weights(
    coupling: &Coupling,
    neighbor_weights: &[KnnWeights],
    counts: &SampleCounts,
) -> Result<WeightedEstimate> {
    check_counts(coupling, counts)?;
    if neighbor_weights.len() != counts.m_c {
        return Err(Error::Dimension(format!(
            "{} neighbor rows but counts say m_c = {}",
            neighbor_weights.len(),
            counts.m_c
        )));
    }
    let mut weights = vec![0.0; coupling.n_cols()];
    for knn in neighbor_weights {
        for (col, mass) in transport::extend_conditional(coupling, knn)? {
            weights[col as usize] += mass;
        }
    }
    let scale = 1.0 / counts.m_c as f64;
    for w in &mut weights {
        *w *= scale;
    }
    WeightedEstimate::from_weights(weights)
}

fn check_counts(coupling: &Coupling, counts: &SampleCounts) -> Result<()> {
    if counts.n_c != coupling.n_rows() || counts.n_s != coupling.n_cols() {
        return Err(Error::Dimension(format!(
            "counts (n_c={}, n_s={}) do not match the {}x{} coupling",
            counts.n_c,
            counts.n_s,
            coupling.n_rows(),
            coupling.n_cols()
        )));
    }
    if counts.m_c == 0 {
        return Err(Error::Domain("m_c must be positive".into()));
    }
    Ok(())
}

/// The region-ratio yield `m_c · n_s / n_c`: the expected number of 4b
/// signal-region background events under the factorization assumption.
pub fn abcd_mass(counts: &SampleCounts) -> Result<f64> {
    if counts.n_c == 0 {
        return Err(Error::Domain("n_c must be positive for the abcd mass".into()));
    }
    Ok(counts.m_c as f64 * counts.n_s as f64 / counts.n_c as f64)
}

/// Rescale so the weights sum to `mass`.
pub fn normalize(est: &WeightedEstimate, mass: f64) -> Result<WeightedEstimate> {
    if !(mass.is_finite() && mass >= 0.0) {
        return Err(Error::Domain(format!(
            "target mass {mass} must be finite and nonnegative"
        )));
    }
    let sum: f64 = est.weights.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Domain(
            "cannot normalize an estimate with zero total weight".into(),
        ));
    }
    let scale = mass / sum;
    Ok(WeightedEstimate {
        atoms: est.atoms.clone(),
        weights: est.weights.iter().map(|w| w * scale).collect(),
        total_mass: mass,
    })
}

/// The background-estimation method that produced an estimate file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Fvt,
    OtKnn,
    OtFvt,
    /// Unweighted signal-region 3b sample, the comparison baseline.
    Raw3b,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Fvt, Method::OtKnn, Method::OtFvt, Method::Raw3b];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Fvt => "fvt",
            Method::OtKnn => "ot-knn",
            Method::OtFvt => "ot-fvt",
            Method::Raw3b => "raw-3b",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown estimation method `{s}`")))
    }
}

/// Provenance carried in an estimate file next to the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateMeta {
    pub method: Method,
    pub counts: SampleCounts,
    pub config_hash: String,
}

const ESTIMATE_CSV_HEADER: &str = "atom_index,weight";

/// Write an estimate as `atom_index,weight` CSV with `# key=value` comment
/// lines recording method, mass, counts, and config hash.
pub fn write_estimate(path: &Path, est: &WeightedEstimate, meta: &EstimateMeta) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |line: String| -> Result<()> {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))
    };
    emit(format!("# method={}", meta.method))?;
    emit(format!("# mass={}", est.total_mass))?;
    emit(format!("# n_c={}", meta.counts.n_c))?;
    emit(format!("# n_s={}", meta.counts.n_s))?;
    emit(format!("# m_c={}", meta.counts.m_c))?;
    emit(format!("# m_s={}", meta.counts.m_s))?;
    emit(format!("# config={}", meta.config_hash))?;
    emit(ESTIMATE_CSV_HEADER.to_string())?;
    for (&a, &v) in est.atoms.iter().zip(&est.weights) {
        emit(format!("{a},{v}"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_estimate(path: &Path) -> Result<(WeightedEstimate, EstimateMeta)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let mut method = None;
    let mut mass = None;
    let mut n_c = None;
    let mut n_s = None;
    let mut m_c = None;
    let mut m_s = None;
    let mut config_hash = None;

    let mut header_seen = false;
    let mut atoms = Vec::new();
    let mut weights = Vec::new();

    for (idx, line) in &mut lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# ") {
            if header_seen {
                return Err(Error::parse(path, lineno, "comment after data header"));
            }
            let (key, value) = rest
                .split_once('=')
                .ok_or_else(|| Error::parse(path, lineno, "expected `key=value` comment"))?;
            let slot: &mut Option<String> = match key {
                "method" => &mut method,
                "mass" => &mut mass,
                "n_c" => &mut n_c,
                "n_s" => &mut n_s,
                "m_c" => &mut m_c,
                "m_s" => &mut m_s,
                "config" => &mut config_hash,
                other => {
                    return Err(Error::parse(path, lineno, format!("unknown key `{other}`")));
                }
            };
            if slot.replace(value.to_string()).is_some() {
                return Err(Error::parse(path, lineno, format!("duplicate key `{key}`")));
            }
            continue;
        }
        if !header_seen {
            if line != ESTIMATE_CSV_HEADER {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("bad header, expected `{ESTIMATE_CSV_HEADER}`"),
                ));
            }
            header_seen = true;
            continue;
        }
        let (a, v) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(path, lineno, "expected `atom_index,weight`"))?;
        let a: u32 = a
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad atom index `{a}`")))?;
        let v: f64 = v
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad weight `{v}`")))?;
        atoms.push(a);
        weights.push(v);
    }

    if !header_seen {
        return Err(Error::Format(format!(
            "{}: missing `{ESTIMATE_CSV_HEADER}` header",
            path.display()
        )));
    }
    let missing = |what: &str| Error::Format(format!("{}: missing `{what}`", path.display()));
    let method = Method::from_str(&method.ok_or_else(|| missing("method"))?)?;
    let mass: f64 = mass
        .ok_or_else(|| missing("mass"))?
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad mass", path.display())))?;
    let parse_count = |slot: Option<String>, what: &str| -> Result<usize> {
        slot.ok_or_else(|| missing(what))?
            .parse()
            .map_err(|_| Error::Format(format!("{}: bad {what}", path.display())))
    };
    let counts = SampleCounts {
        n_c: parse_count(n_c, "n_c")?,
        n_s: parse_count(n_s, "n_s")?,
        m_c: parse_count(m_c, "m_c")?,
        m_s: parse_count(m_s, "m_s")?,
    };
    let config_hash = config_hash.ok_or_else(|| missing("config"))?;

    let mut est = WeightedEstimate::new(atoms, weights)?;
    let residual = (est.total_mass - mass).abs() / est.total_mass.abs().max(mass.abs()).max(1.0);
    if residual > 1e-9 {
        return Err(Error::Format(format!(
            "{}: declared mass {} does not match weight sum {}",
            path.display(),
            mass,
            est.total_mass
        )));
    }
    est.total_mass = mass;
    Ok((
        est,
        EstimateMeta {
            method,
            counts,
            config_hash,
        },
    ))
}

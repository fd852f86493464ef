//! Discrete Kantorovich transport between event samples.
//!
//! `solve_kantorovich` solves the transportation linear program exactly and
//! exposes the optimal basic coupling together with its dual potentials.
//! `fit_coupling` specializes to the uniform-marginal problem between two
//! event samples; internally the uniform masses are rescaled to integers so
//! the simplex works in exact integer flows, which keeps the marginal sums
//! correct to machine precision. `knn_weights` / `extend_conditional` extend
//! the fitted conditional coupling to out-of-sample events through inverse
//! distance weighting over nearest neighbors.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::event::Event;
use crate::metric::{distance_matrix, emd, DistanceMatrix, MetricParams};
use crate::simplex::NetworkSimplex;

/// Default neighbor count for the out-of-sample extension.
pub const DEFAULT_KNN_K: usize = 10;

/// One positive entry of a sparse coupling matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CouplingEntry {
    pub row: u32,
    pub col: u32,
    pub mass: f64,
}

/// Sparse optimal coupling between two empirical samples. Entries are sorted
/// by (row, col) and strictly positive; a vertex solution has at most
/// `n_rows + n_cols - 1` of them.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    n_rows: usize,
    n_cols: usize,
    entries: Vec<CouplingEntry>,
    row_start: Vec<u32>,
    objective: f64,
}

impl Coupling {
    fn new(n_rows: usize, n_cols: usize, entries: Vec<CouplingEntry>, objective: f64) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::Dimension("coupling needs nonempty samples".into()));
        }
        if !objective.is_finite() {
            return Err(Error::Numerical(format!("non-finite objective {objective}")));
        }
        let mut row_start = vec![0u32; n_rows + 1];
        let mut prev: Option<(u32, u32)> = None;
        for e in &entries {
            if (e.row as usize) >= n_rows || (e.col as usize) >= n_cols {
                return Err(Error::Dimension(format!(
                    "coupling entry ({}, {}) out of range {n_rows}x{n_cols}",
                    e.row, e.col
                )));
            }
            if !(e.mass.is_finite() && e.mass > 0.0) {
                return Err(Error::Domain(format!(
                    "coupling mass at ({}, {}) must be finite and positive, got {}",
                    e.row, e.col, e.mass
                )));
            }
            if let Some(p) = prev {
                if (e.row, e.col) <= p {
                    return Err(Error::Format("coupling entries must be sorted by (row, col)".into()));
                }
            }
            prev = Some((e.row, e.col));
            row_start[e.row as usize + 1] += 1;
        }
        for i in 0..n_rows {
            row_start[i + 1] += row_start[i];
        }
        Ok(Coupling {
            n_rows,
            n_cols,
            entries,
            row_start,
            objective,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn entries(&self) -> &[CouplingEntry] {
        &self.entries
    }

    pub fn row_entries(&self, i: usize) -> &[CouplingEntry] {
        let lo = self.row_start[i] as usize;
        let hi = self.row_start[i + 1] as usize;
        &self.entries[lo..hi]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_rows];
        for e in &self.entries {
            sums[e.row as usize] += e.mass;
        }
        sums
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_cols];
        for e in &self.entries {
            sums[e.col as usize] += e.mass;
        }
        sums
    }

    /// Largest deviation of any row or column sum from the given target
    /// marginals.
    pub fn marginal_residual(&self, row_masses: &[f64], col_masses: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (sum, target) in self.row_sums().iter().zip(row_masses) {
            worst = worst.max((sum - target).abs());
        }
        for (sum, target) in self.col_sums().iter().zip(col_masses) {
            worst = worst.max((sum - target).abs());
        }
        worst
    }
}

/// Conditional distribution over target atoms given a source atom:
/// q_{j|i} = n_rows * q_ij.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalRow {
    pub source_index: usize,
    pub targets: Vec<(u32, f64)>,
}

/// Optimal coupling plus the dual potentials certifying its optimality.
#[derive(Clone, Debug)]
pub struct KantorovichSolution {
    pub coupling: Coupling,
    pub row_duals: Vec<f64>,
    pub col_duals: Vec<f64>,
}

impl KantorovichSolution {
    /// Worst violation of the optimality certificate: complementary
    /// slackness on the support and dual feasibility everywhere.
    pub fn certificate_residual(&self, cost: &Array2<f64>) -> f64 {
        let mut worst = 0.0f64;
        for e in self.coupling.entries() {
            let c = cost[(e.row as usize, e.col as usize)];
            worst = worst.max((c - self.row_duals[e.row as usize] - self.col_duals[e.col as usize]).abs());
        }
        for i in 0..self.coupling.n_rows() {
            for j in 0..self.coupling.n_cols() {
                let slack = self.row_duals[i] + self.col_duals[j] - cost[(i, j)];
                worst = worst.max(slack.max(0.0));
            }
        }
        worst
    }
}

/// Exact transportation LP with the given marginals.
pub fn solve_kantorovich(
    cost: &Array2<f64>,
    row_masses: &[f64],
    col_masses: &[f64],
) -> Result<KantorovichSolution> {
    let (n, m) = cost.dim();
    if row_masses.len() != n || col_masses.len() != m {
        return Err(Error::Dimension(format!(
            "marginal lengths ({}, {}) do not match cost matrix {n}x{m}",
            row_masses.len(),
            col_masses.len()
        )));
    }
    let total_r: f64 = row_masses.iter().sum();
    let total_c: f64 = col_masses.iter().sum();
    if (total_r - total_c).abs() > 1e-12 * total_r.abs().max(1.0) {
        return Err(Error::Domain(format!(
            "unbalanced marginals: rows sum to {total_r}, columns to {total_c}"
        )));
    }
    let cost_slice = cost
        .as_slice()
        .ok_or_else(|| Error::Dimension("cost matrix must be contiguous row-major".into()))?;
    let mut nx = NetworkSimplex::new();
    let objective = nx.solve(n, m, row_masses, col_masses, cost_slice)?;
    build_solution(&nx, n, m, objective, 1.0)
}

fn build_solution(
    nx: &NetworkSimplex,
    n: usize,
    m: usize,
    objective: f64,
    mass_scale: f64,
) -> Result<KantorovichSolution> {
    let entries: Vec<CouplingEntry> = nx
        .flows()
        .map(|(i, j, f)| CouplingEntry {
            row: i as u32,
            col: j as u32,
            mass: f * mass_scale,
        })
        .collect();
    let coupling = Coupling::new(n, m, entries, objective * mass_scale)?;
    let row_duals = (0..n).map(|i| nx.row_dual(i)).collect();
    let col_duals = (0..m).map(|j| nx.col_dual(j)).collect();
    Ok(KantorovichSolution {
        coupling,
        row_duals,
        col_duals,
    })
}

/// Uniform-marginal optimal coupling for a precomputed distance matrix. The
/// uniform masses 1/n and 1/m are scaled up to integer supplies (m per row,
/// n per column), solved in exact integer flows, and scaled back down.
pub fn fit_coupling_from_matrix(matrix: &Array2<f64>) -> Result<KantorovichSolution> {
    let (n, m) = matrix.dim();
    if n == 0 || m == 0 {
        return Err(Error::Dimension("coupling needs nonempty samples".into()));
    }
    let cost_slice = matrix
        .as_slice()
        .ok_or_else(|| Error::Dimension("cost matrix must be contiguous row-major".into()))?;
    let supplies = vec![m as f64; n];
    let demands = vec![n as f64; m];
    let mut nx = NetworkSimplex::new();
    let objective = nx.solve(n, m, &supplies, &demands, cost_slice)?;
    build_solution(&nx, n, m, objective, 1.0 / (n as f64 * m as f64))
}

/// Fit the uniform coupling between two event samples under the event-level
/// distance.
pub fn fit_coupling(
    control3b: &[Event],
    signal3b: &[Event],
    params: &MetricParams,
) -> Result<Coupling> {
    let matrix = distance_matrix(control3b, signal3b, params)?;
    Ok(fit_coupling_from_matrix(&matrix.values)?.coupling)
}

/// Uniform coupling from a stored distance matrix.
pub fn fit_coupling_from_distances(matrix: &DistanceMatrix) -> Result<KantorovichSolution> {
    fit_coupling_from_matrix(&matrix.values)
}

/// Conditional target distribution of coupling row `i`.
pub fn conditional(coupling: &Coupling, i: usize) -> Result<ConditionalRow> {
    if i >= coupling.n_rows() {
        return Err(Error::Dimension(format!(
            "row {i} out of range for coupling with {} rows",
            coupling.n_rows()
        )));
    }
    let scale = coupling.n_rows() as f64;
    let targets = coupling
        .row_entries(i)
        .iter()
        .map(|e| (e.col, e.mass * scale))
        .collect();
    Ok(ConditionalRow {
        source_index: i,
        targets,
    })
}

/// Inverse-distance weights over the `k` nearest entries of a distance row.
/// Ties are broken by smaller index; if any distance is zero the weight is
/// split uniformly over the zero-distance neighbors.
pub fn knn_weights_from_distances(distances: &[f64], k: usize) -> Result<KnnWeights> {
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    if distances.is_empty() {
        return Err(Error::Dimension("knn over an empty sample".into()));
    }
    for (i, d) in distances.iter().enumerate() {
        if !(d.is_finite() && *d >= 0.0) {
            return Err(Error::Domain(format!(
                "distance {d} at index {i} must be finite and nonnegative"
            )));
        }
    }
    let mut order: Vec<u32> = (0..distances.len() as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        distances[a as usize]
            .partial_cmp(&distances[b as usize])
            .expect("distances validated finite")
            .then(a.cmp(&b))
    });
    order.truncate(k.min(distances.len()));
    order.sort_unstable();

    let selected: Vec<f64> = order.iter().map(|&i| distances[i as usize]).collect();
    let n_zero = selected.iter().filter(|&&d| d == 0.0).count();
    let weights: Vec<f64> = if n_zero > 0 {
        selected
            .iter()
            .map(|&d| if d == 0.0 { 1.0 / n_zero as f64 } else { 0.0 })
            .collect()
    } else {
        let inv: Vec<f64> = selected.iter().map(|&d| 1.0 / d).collect();
        let total: f64 = inv.iter().sum();
        inv.iter().map(|w| w / total).collect()
    };
    Ok(KnnWeights {
        indices: order,
        weights,
    })
}

/// Nearest neighbors of `g` within a reference sample and their
/// inverse-distance weights.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnWeights {
    pub indices: Vec<u32>,
    pub weights: Vec<f64>,
}

pub fn knn_weights(
    g: &Event,
    control3b: &[Event],
    k: usize,
    params: &MetricParams,
) -> Result<KnnWeights> {
    let distances = control3b
        .iter()
        .map(|h| emd(g, h, params))
        .collect::<Result<Vec<f64>>>()?;
    knn_weights_from_distances(&distances, k)
}

/// Mixture of conditional rows under nearest-neighbor weights: the
/// out-of-sample conditional distribution over target atoms.
pub fn extend_conditional(coupling: &Coupling, knn: &KnnWeights) -> Result<Vec<(u32, f64)>> {
    if knn.indices.len() != knn.weights.len() {
        return Err(Error::Dimension("knn indices and weights differ in length".into()));
    }
    let scale = coupling.n_rows() as f64;
    let mut mixture: std::collections::BTreeMap<u32, f64> = std::collections::BTreeMap::new();
    for (&i, &w) in knn.indices.iter().zip(&knn.weights) {
        if i as usize >= coupling.n_rows() {
            return Err(Error::Dimension(format!(
                "neighbor index {i} out of range for coupling with {} rows",
                coupling.n_rows()
            )));
        }
        if w == 0.0 {
            continue;
        }
        for e in coupling.row_entries(i as usize) {
            *mixture.entry(e.col).or_insert(0.0) += w * e.mass * scale;
        }
    }
    Ok(mixture.into_iter().collect())
}

/// Exhaustive uniform-marginal transport objective for small square costs:
/// the minimum over all assignments of the mean assignment cost.
pub fn brute_force_ot(cost: &Array2<f64>) -> Result<f64> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(Error::Dimension(format!("brute force needs a square cost, got {n}x{m}")));
    }
    if n == 0 || n > 6 {
        return Err(Error::Dimension(format!("brute force supports 1..=6 atoms, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, n, &mut |p| {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
        let mean = total / n as f64;
        if mean < best {
            best = mean;
        }
    });
    Ok(best)
}

fn permute(items: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k <= 1 {
        visit(items);
        return;
    }
    for i in 0..k {
        permute(items, k - 1, visit);
        if k % 2 == 0 {
            items.swap(i, k - 1);
        } else {
            items.swap(0, k - 1);
        }
    }
}

pub fn write_coupling(path: &Path, coupling: &Coupling) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "{} {} {}",
        coupling.n_rows(),
        coupling.n_cols(),
        coupling.objective()
    )
    .map_err(|e| Error::io(path, e))?;
    for e in coupling.entries() {
        writeln!(w, "{} {} {}", e.row, e.col, e.mass).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_coupling(path: &Path) -> Result<Coupling> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty coupling file"))?;
    let header = header.map_err(|e| Error::io(path, e))?;
    let mut parts = header.split_whitespace();
    let mut next_field = |name: &str| -> Result<String> {
        parts
            .next()
            .map(str::to_owned)
            .ok_or_else(|| Error::parse(path, 1, format!("missing {name} in header")))
    };
    let n_rows: usize = next_field("n_rows")?
        .parse()
        .map_err(|e| Error::parse(path, 1, format!("bad n_rows: {e}")))?;
    let n_cols: usize = next_field("n_cols")?
        .parse()
        .map_err(|e| Error::parse(path, 1, format!("bad n_cols: {e}")))?;
    let objective: f64 = next_field("objective")?
        .parse()
        .map_err(|e| Error::parse(path, 1, format!("bad objective: {e}")))?;

    let mut entries = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let mut field = |name: &str| -> Result<String> {
            fields
                .next()
                .map(str::to_owned)
                .ok_or_else(|| Error::parse(path, line_no, format!("missing {name}")))
        };
        let row: u32 = field("row")?
            .parse()
            .map_err(|e| Error::parse(path, line_no, format!("bad row: {e}")))?;
        let col: u32 = field("col")?
            .parse()
            .map_err(|e| Error::parse(path, line_no, format!("bad col: {e}")))?;
        let mass: f64 = field("mass")?
            .parse()
            .map_err(|e| Error::parse(path, line_no, format!("bad mass: {e}")))?;
        if fields.next().is_some() {
            return Err(Error::parse(path, line_no, "trailing fields"));
        }
        entries.push(CouplingEntry { row, col, mass });
    }
    let coupling = Coupling::new(n_rows, n_cols, entries, objective)?;
    let total: f64 = coupling.entries().iter().map(|e| e.mass).sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Format(format!(
            "coupling mass sums to {total}, expected 1"
        )));
    }
    Ok(coupling)
}

//! Event-level earth-mover distance.
//!
//! `emd_tilde` is the raw unbalanced four-jet transport cost: jets trade
//! transverse momentum over the (η, φ) cylinder at ground distance
//! `√(Δη² + Δφ²)/R`, any pT imbalance is left untransported and charged
//! linearly, `|s_T(g) − s_T(h)|`. The unbalanced problem is solved exactly by
//! padding with a zero-cost virtual jet that absorbs the imbalance, which
//! turns it into a balanced transportation problem.
//!
//! `emd` minimizes `emd_tilde` over the symmetry group (η-reflection,
//! φ-reflection, azimuthal rotation): a uniform rotation grid, then the exact
//! jet-alignment candidates near the grid winner, then golden-section
//! refinement. The identity transform is evaluated through the same code path
//! as `emd_tilde`, so `emd(g, h) <= emd_tilde(g, h)` holds exactly.

use std::cell::RefCell;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::event::{phi_distance, wrap_phi, Event, TAU};
use crate::simplex::NetworkSimplex;

/// Metric configuration: angular scale `R` of the ground distance, rotation
/// grid size, and golden-section refinement iterations.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MetricParams {
    pub r: f64,
    pub grid_size: usize,
    pub refine_iters: usize,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            r: 0.4,
            grid_size: 36,
            refine_iters: 20,
        }
    }
}

impl MetricParams {
    fn validate(&self) -> Result<()> {
        if !(self.r.is_finite() && self.r > 0.0) {
            return Err(Error::Domain(format!("metric R must be > 0, got {}", self.r)));
        }
        if self.grid_size == 0 {
            return Err(Error::Domain("rotation grid must have at least one point".into()));
        }
        Ok(())
    }
}

/// Optimal pT flow between the four jets of two events (row: source jet of
/// `g`, column: target jet of `h`). Mass absorbed by the virtual jet is not
/// included.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JetFlow {
    pub flows: [[f64; 4]; 4],
}

impl JetFlow {
    pub fn total(&self) -> f64 {
        self.flows.iter().flatten().sum()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.flows[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> f64 {
        self.flows.iter().map(|row| row[j]).sum()
    }
}

struct Workspace {
    nx: NetworkSimplex,
    cost: Vec<f64>,
    sup: Vec<f64>,
    dem: Vec<f64>,
}

impl Workspace {
    fn new() -> Self {
        Workspace {
            nx: NetworkSimplex::new(),
            cost: Vec::with_capacity(25),
            sup: Vec::with_capacity(5),
            dem: Vec::with_capacity(5),
        }
    }
}

thread_local! {
    static WORKSPACE: RefCell<Workspace> = RefCell::new(Workspace::new());
}

/// Precomputed per-pair tables; index 0 of a reflection axis means `+1`,
/// index 1 means `-1`.
struct PairTables {
    deta2: [[f64; 16]; 2],
    base: [[f64; 16]; 2],
    pt_g: [f64; 4],
    pt_h: [f64; 4],
    sg: f64,
    sh: f64,
    inv_r: f64,
}

impl PairTables {
    fn new(g: &Event, h: &Event, r: f64) -> Self {
        let mut t = PairTables {
            deta2: [[0.0; 16]; 2],
            base: [[0.0; 16]; 2],
            pt_g: [0.0; 4],
            pt_h: [0.0; 4],
            sg: 0.0,
            sh: 0.0,
            inv_r: 1.0 / r,
        };
        for i in 0..4 {
            t.pt_g[i] = g.jets[i].pt;
            t.pt_h[i] = h.jets[i].pt;
        }
        t.sg = t.pt_g.iter().sum();
        t.sh = t.pt_h.iter().sum();
        for (sign_idx, sign) in [(0usize, 1.0f64), (1, -1.0)] {
            for i in 0..4 {
                for j in 0..4 {
                    let deta = sign * g.jets[i].eta - h.jets[j].eta;
                    t.deta2[sign_idx][i * 4 + j] = deta * deta;
                    t.base[sign_idx][i * 4 + j] =
                        wrap_phi(sign * g.jets[i].phi - h.jets[j].phi);
                }
            }
        }
        t
    }

    /// Transport cost of `g` transformed by `(ι₁ = eta_idx, ι₂ = phi_idx, Δ)`
    /// against `h`, including the pT-imbalance term.
    fn eval(&self, ws: &mut Workspace, eta_idx: usize, phi_idx: usize, delta: f64) -> Result<f64> {
        self.fill_costs(ws, eta_idx, phi_idx, delta);
        self.solve_filled(ws)
    }

    fn fill_costs(&self, ws: &mut Workspace, eta_idx: usize, phi_idx: usize, delta: f64) {
        let (n, m) = self.padded_dims();
        ws.cost.clear();
        ws.cost.resize(n * m, 0.0);
        for i in 0..4 {
            for j in 0..4 {
                let mut w = (self.base[phi_idx][i * 4 + j] + delta) % TAU;
                if w < 0.0 {
                    w += TAU;
                }
                let dphi = w.min(TAU - w);
                let de2 = self.deta2[eta_idx][i * 4 + j];
                ws.cost[i * m + j] = (de2 + dphi * dphi).sqrt() * self.inv_r;
            }
        }
    }

    /// Provable lower bound on the cost of the candidate whose ground costs
    /// are currently in the workspace: the smaller side ships in full, so
    /// every one of its units pays at least its cheapest ground distance.
    fn bound_filled(&self, ws: &Workspace) -> f64 {
        let (_, m) = self.padded_dims();
        let mut bound = (self.sg - self.sh).abs();
        if self.sg <= self.sh {
            for i in 0..4 {
                let row = &ws.cost[i * m..i * m + 4];
                bound += self.pt_g[i] * row.iter().fold(f64::INFINITY, |a, &c| a.min(c));
            }
        } else {
            for j in 0..4 {
                let mut cheapest = f64::INFINITY;
                for i in 0..4 {
                    cheapest = cheapest.min(ws.cost[i * m + j]);
                }
                bound += self.pt_h[j] * cheapest;
            }
        }
        bound
    }

    fn solve_filled(&self, ws: &mut Workspace) -> Result<f64> {
        let (n, m) = self.padded_dims();
        ws.sup.clear();
        ws.sup.extend_from_slice(&self.pt_g);
        ws.dem.clear();
        ws.dem.extend_from_slice(&self.pt_h);
        if n == 5 {
            ws.sup.push(self.sh - self.sg);
        }
        if m == 5 {
            ws.dem.push(self.sg - self.sh);
        }
        let objective = ws.nx.solve(n, m, &ws.sup, &ws.dem, &ws.cost)?;
        Ok(objective + (self.sg - self.sh).abs())
    }

    fn padded_dims(&self) -> (usize, usize) {
        if self.sg > self.sh {
            (4, 5)
        } else if self.sh > self.sg {
            (5, 4)
        } else {
            (4, 4)
        }
    }
}

/// Unbalanced transport cost between two events without any symmetry search.
/// Returns the cost and the optimal jet-to-jet flow.
pub fn emd_tilde(g: &Event, h: &Event, params: &MetricParams) -> Result<(f64, JetFlow)> {
    params.validate()?;
    let tables = PairTables::new(g, h, params.r);
    WORKSPACE.with(|cell| {
        let ws = &mut cell.borrow_mut();
        let cost = tables.eval(ws, 0, 0, 0.0)?;
        let mut flow = JetFlow::default();
        for (i, row) in flow.flows.iter_mut().enumerate() {
            for (j, f) in row.iter_mut().enumerate() {
                *f = ws.nx.flow_between(i, j);
            }
        }
        Ok((cost, flow))
    })
}

/// Symmetry-minimized distance `min over transforms of emd_tilde(t·g, h)`.
pub fn emd(g: &Event, h: &Event, params: &MetricParams) -> Result<f64> {
    params.validate()?;
    let tables = PairTables::new(g, h, params.r);
    WORKSPACE.with(|cell| emd_inner(&tables, &mut cell.borrow_mut(), params))
}

fn emd_inner(tables: &PairTables, ws: &mut Workspace, params: &MetricParams) -> Result<f64> {
    let l = params.grid_size;
    let step = TAU / l as f64;

    let mut best = f64::INFINITY;
    let mut best_axes = (0usize, 0usize);
    let mut best_delta = 0.0f64;
    // Two passes over the same grid: the sparse pass establishes a strong
    // incumbent cheaply, which lets the bound prune most of the dense pass.
    for pass in 0..2 {
        for eta_idx in 0..2 {
            for phi_idx in 0..2 {
                for k in 0..l {
                    if (k % 4 == 0) != (pass == 0) {
                        continue;
                    }
                    let delta = k as f64 * step;
                    tables.fill_costs(ws, eta_idx, phi_idx, delta);
                    if tables.bound_filled(ws) >= best {
                        continue;
                    }
                    let value = tables.solve_filled(ws)?;
                    if value < best {
                        best = value;
                        best_axes = (eta_idx, phi_idx);
                        best_delta = delta;
                    }
                }
            }
        }
    }

    // Rotations that align some transformed jet of g exactly onto a jet of h:
    // for equivalent events the optimum is one of these, and the grid alone
    // cannot resolve it (the objective is only Lipschitz in Δ).
    let (eta_idx, phi_idx) = best_axes;
    for i in 0..4 {
        for j in 0..4 {
            let candidate = wrap_phi(-tables.base[phi_idx][i * 4 + j]);
            if phi_distance(candidate, best_delta) <= step {
                tables.fill_costs(ws, eta_idx, phi_idx, candidate);
                if tables.bound_filled(ws) >= best {
                    continue;
                }
                let value = tables.solve_filled(ws)?;
                if value < best {
                    best = value;
                    best_delta = candidate;
                }
            }
        }
    }

    // Golden-section refinement around the best rotation found so far.
    let inv_phi = 0.5 * (5.0f64.sqrt() - 1.0);
    let mut a = best_delta - step;
    let mut b = best_delta + step;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = tables.eval(ws, eta_idx, phi_idx, x1)?;
    let mut f2 = tables.eval(ws, eta_idx, phi_idx, x2)?;
    for _ in 0..params.refine_iters {
        if f1 < best {
            best = f1;
        }
        if f2 < best {
            best = f2;
        }
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = tables.eval(ws, eta_idx, phi_idx, x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = tables.eval(ws, eta_idx, phi_idx, x2)?;
        }
    }
    Ok(best.min(f1).min(f2))
}

/// Dense matrix of pairwise `emd` distances with the metric parameters that
/// produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub values: Array2<f64>,
    pub r: f64,
    pub grid_size: u32,
}

impl DistanceMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }
}

/// All pairwise distances `emd(rows[i], cols[j])`, computed in parallel with
/// deterministic placement.
pub fn distance_matrix(
    rows: &[Event],
    cols: &[Event],
    params: &MetricParams,
) -> Result<DistanceMatrix> {
    params.validate()?;
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::Dimension("distance matrix needs nonempty samples".into()));
    }
    let row_data: Vec<Vec<f64>> = rows
        .par_iter()
        .map(|g| {
            cols.iter()
                .map(|h| emd(g, h, params))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut values = Array2::zeros((rows.len(), cols.len()));
    for (i, row) in row_data.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            values[(i, j)] = v;
        }
    }
    Ok(DistanceMatrix {
        values,
        r: params.r,
        grid_size: params.grid_size as u32,
    })
}

const MATRIX_MAGIC: &[u8; 4] = b"QJDM";
const MATRIX_VERSION: u32 = 1;

pub fn write_distance_matrix(path: &Path, matrix: &DistanceMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(MATRIX_MAGIC)?;
    put(&MATRIX_VERSION.to_le_bytes())?;
    put(&(matrix.n_rows() as u64).to_le_bytes())?;
    put(&(matrix.n_cols() as u64).to_le_bytes())?;
    put(&matrix.r.to_le_bytes())?;
    put(&matrix.grid_size.to_le_bytes())?;
    for v in matrix.values.iter() {
        put(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_distance_matrix(path: &Path) -> Result<DistanceMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut read_exact = |buf: &mut [u8]| -> Result<()> {
        r.read_exact(buf).map_err(|e| Error::io(path, e))
    };
    let mut magic = [0u8; 4];
    read_exact(&mut magic)?;
    if &magic != MATRIX_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a distance matrix file",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != MATRIX_VERSION {
        return Err(Error::Format(format!(
            "unsupported distance matrix version {version}"
        )));
    }
    read_exact(&mut u64buf)?;
    let n = u64::from_le_bytes(u64buf) as usize;
    read_exact(&mut u64buf)?;
    let m = u64::from_le_bytes(u64buf) as usize;
    read_exact(&mut u64buf)?;
    let radius = f64::from_le_bytes(u64buf);
    read_exact(&mut u32buf)?;
    let grid_size = u32::from_le_bytes(u32buf);
    let mut data = vec![0.0f64; n * m];
    for v in &mut data {
        read_exact(&mut u64buf)?;
        *v = f64::from_le_bytes(u64buf);
    }
    let values = Array2::from_shape_vec((n, m), data)
        .map_err(|e| Error::Format(format!("bad matrix shape: {e}")))?;
    Ok(DistanceMatrix {
        values,
        r: radius,
        grid_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{apply_symmetry, Channel, Jet, SymmetryTransform};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use tempfile::tempdir;

    fn jet(pt: f64, eta: f64, phi: f64) -> Jet {
        Jet::new(pt, eta, phi, 0.0).unwrap()
    }

    fn event(jets: [Jet; 4]) -> Event {
        Event::new(jets, 1.0, Channel::ThreeTag, None).unwrap()
    }

    fn spread_event() -> Event {
        event([
            jet(50.0, -1.5, 0.5),
            jet(60.0, -0.5, 2.0),
            jet(70.0, 0.5, 3.5),
            jet(80.0, 1.5, 5.0),
        ])
    }

    fn random_event(rng: &mut impl Rng) -> Event {
        let mut jets = [jet(1.0, 0.0, 0.0); 4];
        for j in &mut jets {
            *j = jet(
                rng.gen_range(20.0..200.0),
                rng.gen_range(-2.5..2.5),
                rng.gen_range(0.0..TAU),
            );
        }
        event(jets)
    }

    #[test]
    fn small_azimuthal_shift_costs_pt_times_distance_over_r() {
        let params = MetricParams::default();
        let g = spread_event();
        let mut h = g;
        h.jets[0].phi += 0.1;
        let (cost, flow) = emd_tilde(&g, &h, &params).unwrap();
        assert!((cost - 50.0 * 0.1 / params.r).abs() < 1e-9);
        for i in 0..4 {
            assert!((flow.flows[i][i] - g.jets[i].pt).abs() < 1e-9);
        }
    }

    #[test]
    fn pure_pt_imbalance_costs_the_difference() {
        let params = MetricParams::default();
        let g = spread_event();
        let mut h = g;
        h.jets[0].pt += 10.0;
        let (cost, flow) = emd_tilde(&g, &h, &params).unwrap();
        assert!((cost - 10.0).abs() < 1e-9);
        assert!((flow.total() - g.scalar_pt()).abs() < 1e-9);
    }

    #[test]
    fn flow_respects_marginal_capacities() {
        let params = MetricParams::default();
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        for _ in 0..50 {
            let g = random_event(&mut rng);
            let h = random_event(&mut rng);
            let (cost, flow) = emd_tilde(&g, &h, &params).unwrap();
            let (sg, sh) = (g.scalar_pt(), h.scalar_pt());
            assert!(cost >= (sg - sh).abs() - 1e-9);
            assert!((flow.total() - sg.min(sh)).abs() < 1e-9);
            for i in 0..4 {
                assert!(flow.row_sum(i) <= g.jets[i].pt + 1e-9);
            }
            for j in 0..4 {
                assert!(flow.col_sum(j) <= h.jets[j].pt + 1e-9);
            }
            for i in 0..4 {
                for j in 0..4 {
                    assert!(flow.flows[i][j] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn emd_never_exceeds_emd_tilde() {
        let params = MetricParams {
            grid_size: 12,
            refine_iters: 8,
            ..MetricParams::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        for _ in 0..30 {
            let g = random_event(&mut rng);
            let h = random_event(&mut rng);
            let (tilde, _) = emd_tilde(&g, &h, &params).unwrap();
            let full = emd(&g, &h, &params).unwrap();
            assert!(full <= tilde, "emd {full} > emd_tilde {tilde}");
        }
    }

    #[test]
    fn self_distance_is_exactly_zero() {
        let params = MetricParams::default();
        let g = spread_event();
        assert_eq!(emd(&g, &g, &params).unwrap(), 0.0);
    }

    #[test]
    fn grid_aligned_rotations_are_recovered_exactly() {
        let params = MetricParams::default();
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        for k in [0usize, 7, 18, 35] {
            let g = random_event(&mut rng);
            let delta = k as f64 * TAU / params.grid_size as f64;
            let h = apply_symmetry(&g, &SymmetryTransform::new(delta, false, false));
            assert!(emd(&g, &h, &params).unwrap() < 1e-9);
        }
    }

    #[test]
    fn random_symmetry_images_are_recovered_after_refinement() {
        let params = MetricParams::default();
        let mut rng = ChaCha12Rng::seed_from_u64(47);
        for _ in 0..25 {
            let g = random_event(&mut rng);
            let t = SymmetryTransform::new(rng.gen_range(0.0..TAU), rng.gen(), rng.gen());
            let h = apply_symmetry(&g, &t);
            let d = emd(&g, &h, &params).unwrap();
            assert!(d <= 1e-6, "equivalent events at distance {d}");
        }
    }

    #[test]
    fn grid_tolerance_holds_before_refinement() {
        let params = MetricParams {
            refine_iters: 0,
            ..MetricParams::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(53);
        for _ in 0..20 {
            let g = random_event(&mut rng);
            let t = SymmetryTransform::new(rng.gen_range(0.0..TAU), rng.gen(), rng.gen());
            let h = apply_symmetry(&g, &t);
            let tol = g.scalar_pt() * (std::f64::consts::PI / params.grid_size as f64) / params.r;
            assert!(emd(&g, &h, &params).unwrap() <= tol);
        }
    }

    #[test]
    fn distance_matrix_round_trips_and_is_deterministic() {
        let params = MetricParams {
            grid_size: 8,
            refine_iters: 4,
            ..MetricParams::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(59);
        let rows: Vec<Event> = (0..6).map(|_| random_event(&mut rng)).collect();
        let cols: Vec<Event> = (0..5).map(|_| random_event(&mut rng)).collect();
        let m1 = distance_matrix(&rows, &cols, &params).unwrap();
        let m2 = distance_matrix(&rows, &cols, &params).unwrap();
        assert_eq!(m1, m2);
        for i in 0..6 {
            for j in 0..5 {
                let direct = emd(&rows[i], &cols[j], &params).unwrap();
                assert_eq!(m1.values[(i, j)].to_bits(), direct.to_bits());
            }
        }

        let dir = tempdir().unwrap();
        let path = dir.path().join("dist.bin");
        write_distance_matrix(&path, &m1).unwrap();
        let back = read_distance_matrix(&path).unwrap();
        assert_eq!(m1, back);
    }

    #[test]
    fn matrix_reader_rejects_foreign_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("not_a_matrix.bin");
        std::fs::write(&path, b"junkjunkjunk").unwrap();
        assert!(matches!(
            read_distance_matrix(&path),
            Err(Error::Format(_))
        ));
    }

    #[test]
    #[ignore = "throughput probe, run manually"]
    fn emd_throughput_probe() {
        let params = MetricParams::default();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let rows: Vec<Event> = (0..200).map(|_| random_event(&mut rng)).collect();
        let cols: Vec<Event> = (0..200).map(|_| random_event(&mut rng)).collect();
        let t0 = std::time::Instant::now();
        let m = distance_matrix(&rows, &cols, &params).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        let n = (m.n_rows() * m.n_cols()) as f64;
        println!("{n} pairs in {dt:.2}s -> {:.1} us/pair", dt * 1e6 / n);
    }

    #[test]
    fn bad_params_are_rejected() {
        let g = spread_event();
        let bad_r = MetricParams {
            r: 0.0,
            ..MetricParams::default()
        };
        assert!(emd(&g, &g, &bad_r).is_err());
        let bad_grid = MetricParams {
            grid_size: 0,
            ..MetricParams::default()
        };
        assert!(emd(&g, &g, &bad_grid).is_err());
    }
}

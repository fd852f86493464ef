//! Probabilistic two-class event classifier with the symmetry-aware
//! convolutional architecture and hand-derived backpropagation.
//!
//! The forward pass maps 4 jet pixels through a shared jet convolution, forms
//! all 6 dijet pixels from pair sums and absolute differences (plus optional
//! engineered dijet features), combines complementary dijets into 3 quadjet
//! pixels the same way, and collapses them into one event pixel by a learned
//! softmax score. Residual skips carry the mean of each combined pair
//! forward. The event pixel is averaged over the four η/φ reflection images
//! of the input before the final two-logit softmax, which makes the predicted
//! probability reflection invariant by construction: bitwise for η
//! reflections, and up to one angle-wrap rounding (~1e-15) for φ reflections.
//! Jets are put in a canonical pT-descending order first, so jet-order
//! permutations cannot change the output at all.
//!
//! Rotation invariance is not architectural; it is trained in by applying a
//! shared random φ rotation to every event of a batch, and measured by
//! [`rotation_invariance_gap`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::event::{
    invariant_mass, signal_distance, wrap_phi, Event, Jet, RegionParams, TAU,
};

/// Architecture and training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub channel_width: usize,
    pub use_engineered_features: bool,
    pub rotation_augmentation: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub prob_clamp_eps: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channel_width: 8,
            use_engineered_features: true,
            rotation_augmentation: true,
            learning_rate: 0.01,
            batch_size: 128,
            epochs: 30,
            seed: 1,
            prob_clamp_eps: 1e-4,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_width == 0 {
            return Err(Error::Domain("channel_width must be at least 1".into()));
        }
        if !(self.prob_clamp_eps > 0.0 && self.prob_clamp_eps < 0.5) {
            return Err(Error::Domain(format!(
                "prob_clamp_eps must lie in (0, 0.5), got {}",
                self.prob_clamp_eps
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Domain(format!(
                "learning_rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Closed-form parameter count of the architecture:
/// `4C² + 14C + 3` with engineered features, `4C² + 10C + 3` without.
pub fn parameter_count(config: &NetConfig) -> usize {
    let c = config.channel_width;
    if config.use_engineered_features {
        4 * c * c + 14 * c + 3
    } else {
        4 * c * c + 10 * c + 3
    }
}

/// All 6 unordered jet pairs, arranged so that consecutive pairs (2q, 2q+1)
/// are complementary and form the three dijet partitions of the event.
const PAIRS: [(usize, usize); 6] = [(0, 1), (2, 3), (0, 2), (1, 3), (0, 3), (1, 2)];

const N_BRANCHES: usize = 4;
/// Reflection branches (η sign, φ sign), ordered so that branches sharing a φ
/// sign are adjacent: summing adjacent pairs first makes the η-reflection
/// average commutative, hence bitwise invariant.
const BRANCHES: [(f64, f64); N_BRANCHES] = [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)];

#[derive(Clone, Copy)]
struct Seg {
    start: usize,
    len: usize,
}

impl Seg {
    fn of<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.start..self.start + self.len]
    }

    fn of_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.start..self.start + self.len]
    }
}

struct LayerMap {
    c: usize,
    n_eng: usize,
    w1: Seg,
    b1: Seg,
    w2s: Seg,
    w2d: Seg,
    w2e: Seg,
    b2: Seg,
    w3s: Seg,
    w3d: Seg,
    w3e: Seg,
    b3: Seg,
    w4: Seg,
    b4: Seg,
    wout: Seg,
    bout: Seg,
    total: usize,
}

fn layer_map(config: &NetConfig) -> LayerMap {
    let c = config.channel_width;
    let n_eng = if config.use_engineered_features { 2 } else { 0 };
    let mut at = 0usize;
    let mut seg = |len: usize| {
        let s = Seg { start: at, len };
        at += len;
        s
    };
    let map = LayerMap {
        c,
        n_eng,
        w1: seg(c * 4),
        b1: seg(c),
        w2s: seg(c * c),
        w2d: seg(c * c),
        w2e: seg(c * n_eng),
        b2: seg(c),
        w3s: seg(c * c),
        w3d: seg(c * c),
        w3e: seg(c * n_eng),
        b3: seg(c),
        w4: seg(c),
        b4: seg(1),
        wout: seg(2 * c),
        bout: seg(2),
        total: 0,
    };
    LayerMap { total: at, ..map }
}

/// Per-epoch training record.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// A trained (or freshly initialized) classifier.
#[derive(Clone, Debug)]
pub struct RatioModel {
    pub config: NetConfig,
    params: Vec<f64>,
    pub training_log: Vec<EpochStats>,
}

/// Initialize a model with seeded symmetric-uniform draws, fan-in scaled.
pub fn build_model(config: &NetConfig, seed: u64) -> Result<RatioModel> {
    config.validate()?;
    let map = layer_map(config);
    let mut params = vec![0.0; map.total];
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let layers: [(Seg, usize); 8] = [
        (map.w1, 4),
        (map.w2s, map.c),
        (map.w2d, map.c),
        (map.w2e, map.n_eng.max(1)),
        (map.w3s, map.c),
        (map.w3d, map.c),
        (map.w3e, map.n_eng.max(1)),
        (map.w4, map.c),
    ];
    for (seg, fan_in) in layers {
        let r = 1.0 / (fan_in as f64).sqrt();
        for w in seg.of_mut(&mut params) {
            *w = rng.gen_range(-r..r);
        }
    }
    let r = 1.0 / (map.c as f64).sqrt();
    for w in map.wout.of_mut(&mut params) {
        *w = rng.gen_range(-r..r);
    }
    Ok(RatioModel {
        config: *config,
        params,
        training_log: Vec::new(),
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn dsilu(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Event featurization shared by all reflection branches: canonically sorted
/// jets plus the symmetry-invariant engineered features, computed once from
/// the original coordinates so every branch sees bitwise-identical values.
struct EventFeatures {
    pt: [f64; 4],
    eta: [f64; 4],
    phi: [f64; 4],
    mass: [f64; 4],
    dijet_eng: [[f64; 2]; 6],
    quadjet_eng: [[f64; 2]; 3],
}

fn canonical_jets(event: &Event) -> [Jet; 4] {
    let mut jets = event.jets;
    jets.sort_by(|a, b| {
        b.pt.total_cmp(&a.pt)
            .then(a.eta.total_cmp(&b.eta))
            .then(a.phi.total_cmp(&b.phi))
            .then(a.mass.total_cmp(&b.mass))
    });
    jets
}

fn quadjet_engineered(jets: &[Jet; 4], q: usize) -> [f64; 2] {
    use crate::event::FourMomentum;
    let (a, b) = PAIRS[2 * q];
    let (c, d) = PAIRS[2 * q + 1];
    let g1 = FourMomentum::from_jet(&jets[a]).add(&FourMomentum::from_jet(&jets[b]));
    let g2 = FourMomentum::from_jet(&jets[c]).add(&FourMomentum::from_jet(&jets[d]));
    let m1 = g1.mass().max(1e-9);
    let m2 = g2.mass().max(1e-9);
    let region = RegionParams::default();
    let sr = signal_distance(m1, m2, &region).min(10.0);
    let m_hh = g1
        .scale(region.m_h / m1)
        .add(&g2.scale(region.m_h / m2))
        .mass();
    [(m_hh / 1000.0).min(10.0), sr]
}

fn event_features(event: &Event) -> EventFeatures {
    let jets = canonical_jets(event);
    let mut f = EventFeatures {
        pt: [0.0; 4],
        eta: [0.0; 4],
        phi: [0.0; 4],
        mass: [0.0; 4],
        dijet_eng: [[0.0; 2]; 6],
        quadjet_eng: [[0.0; 2]; 3],
    };
    for i in 0..4 {
        f.pt[i] = jets[i].pt / 100.0;
        f.eta[i] = jets[i].eta;
        f.phi[i] = jets[i].phi;
        f.mass[i] = jets[i].mass;
    }
    for (p, &(a, b)) in PAIRS.iter().enumerate() {
        f.dijet_eng[p][0] = invariant_mass(&[jets[a], jets[b]]) / 100.0;
        f.dijet_eng[p][1] = crate::event::delta_r(&jets[a], &jets[b]);
    }
    for q in 0..3 {
        f.quadjet_eng[q] = quadjet_engineered(&jets, q);
    }
    f
}

/// Forward-pass intermediates of one reflection branch, kept for backprop.
struct BranchTrace {
    x: [[f64; 4]; 4],
    a1: Vec<f64>,
    z: Vec<f64>,
    a2: Vec<f64>,
    d: Vec<f64>,
    a3: Vec<f64>,
    y: Vec<f64>,
    t: [f64; 3],
    alpha: [f64; 3],
    epix: Vec<f64>,
}

impl BranchTrace {
    fn new(c: usize) -> Self {
        BranchTrace {
            x: [[0.0; 4]; 4],
            a1: vec![0.0; 4 * c],
            z: vec![0.0; 4 * c],
            a2: vec![0.0; 6 * c],
            d: vec![0.0; 6 * c],
            a3: vec![0.0; 3 * c],
            y: vec![0.0; 3 * c],
            t: [0.0; 3],
            alpha: [0.0; 3],
            epix: vec![0.0; c],
        }
    }
}

struct Scratch {
    branches: Vec<BranchTrace>,
    epix: Vec<f64>,
    d_epix: Vec<f64>,
    dy: Vec<f64>,
    dd: Vec<f64>,
    dz: Vec<f64>,
    da: Vec<f64>,
    du: Vec<f64>,
    dv: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl Scratch {
    fn new(c: usize) -> Self {
        Scratch {
            branches: (0..N_BRANCHES).map(|_| BranchTrace::new(c)).collect(),
            epix: vec![0.0; c],
            d_epix: vec![0.0; c],
            dy: vec![0.0; 3 * c],
            dd: vec![0.0; 6 * c],
            dz: vec![0.0; 4 * c],
            da: vec![0.0; c],
            du: vec![0.0; c],
            dv: vec![0.0; c],
            u: vec![0.0; c],
            v: vec![0.0; c],
        }
    }
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64], add: bool) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (wj, xj) in row.iter().zip(x) {
            acc += wj * xj;
        }
        if add {
            out[r] += acc;
        } else {
            out[r] = acc;
        }
    }
}

fn matvec_t_add(w: &[f64], rows: usize, cols: usize, dy: &[f64], dx: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let g = dy[r];
        for (wj, dxj) in row.iter().zip(dx.iter_mut()) {
            *dxj += wj * g;
        }
    }
}

fn outer_add(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, g) in dy.iter().enumerate() {
        let row = &mut dw[r * cols..(r + 1) * cols];
        for (dwj, xj) in row.iter_mut().zip(x) {
            *dwj += g * xj;
        }
    }
}

/// Forward pass of all four reflection branches; fills the scratch traces and
/// the averaged event pixel, and returns the two logits.
fn forward(
    params: &[f64],
    map: &LayerMap,
    feats: &EventFeatures,
    delta: f64,
    scratch: &mut Scratch,
) -> [f64; 2] {
    let c = map.c;
    let Scratch {
        branches,
        epix,
        u,
        v,
        ..
    } = scratch;
    for (bi, &(eta_sign, phi_sign)) in BRANCHES.iter().enumerate() {
        let tr = &mut branches[bi];
        for i in 0..4 {
            tr.x[i] = [
                feats.pt[i],
                eta_sign * feats.eta[i],
                wrap_phi(phi_sign * (feats.phi[i] + delta)),
                feats.mass[i],
            ];
        }
        for i in 0..4 {
            let a1 = &mut tr.a1[i * c..(i + 1) * c];
            matvec(map.w1.of(params), c, 4, &tr.x[i], a1, false);
            for (a, b) in a1.iter_mut().zip(map.b1.of(params)) {
                *a += b;
            }
            for (zi, ai) in tr.z[i * c..(i + 1) * c].iter_mut().zip(a1.iter()) {
                *zi = silu(*ai);
            }
        }
        for (p, &(a, b)) in PAIRS.iter().enumerate() {
            for k in 0..c {
                u[k] = tr.z[a * c + k] + tr.z[b * c + k];
                v[k] = (tr.z[a * c + k] - tr.z[b * c + k]).abs();
            }
            let a2 = &mut tr.a2[p * c..(p + 1) * c];
            matvec(map.w2s.of(params), c, c, u, a2, false);
            matvec(map.w2d.of(params), c, c, v, a2, true);
            if map.n_eng > 0 {
                matvec(map.w2e.of(params), c, map.n_eng, &feats.dijet_eng[p], a2, true);
            }
            for (ak, bk) in a2.iter_mut().zip(map.b2.of(params)) {
                *ak += bk;
            }
            for k in 0..c {
                tr.d[p * c + k] = silu(tr.a2[p * c + k]) + 0.5 * u[k];
            }
        }
        for q in 0..3 {
            let (pa, pb) = (2 * q, 2 * q + 1);
            for k in 0..c {
                u[k] = tr.d[pa * c + k] + tr.d[pb * c + k];
                v[k] = (tr.d[pa * c + k] - tr.d[pb * c + k]).abs();
            }
            let a3 = &mut tr.a3[q * c..(q + 1) * c];
            matvec(map.w3s.of(params), c, c, u, a3, false);
            matvec(map.w3d.of(params), c, c, v, a3, true);
            if map.n_eng > 0 {
                matvec(map.w3e.of(params), c, map.n_eng, &feats.quadjet_eng[q], a3, true);
            }
            for (ak, bk) in a3.iter_mut().zip(map.b3.of(params)) {
                *ak += bk;
            }
            for k in 0..c {
                tr.y[q * c + k] = silu(tr.a3[q * c + k]) + 0.5 * u[k];
            }
            let mut t = map.b4.of(params)[0];
            for k in 0..c {
                t += map.w4.of(params)[k] * tr.y[q * c + k];
            }
            tr.t[q] = t;
        }
        let tmax = tr.t.iter().fold(f64::NEG_INFINITY, |a, &t| a.max(t));
        let mut norm = 0.0;
        for q in 0..3 {
            tr.alpha[q] = (tr.t[q] - tmax).exp();
            norm += tr.alpha[q];
        }
        for q in 0..3 {
            tr.alpha[q] /= norm;
        }
        for k in 0..c {
            tr.epix[k] =
                tr.alpha[0] * tr.y[k] + tr.alpha[1] * tr.y[c + k] + tr.alpha[2] * tr.y[2 * c + k];
        }
    }

    // Average the event pixel over reflection images. The adjacent-pair
    // grouping keeps the sum commutative under the η-reflection branch swap.
    let [b0, b1, b2, b3] = &branches[..] else {
        unreachable!()
    };
    for k in 0..c {
        epix[k] = ((b0.epix[k] + b1.epix[k]) + (b2.epix[k] + b3.epix[k])) / 4.0;
    }

    let wout = map.wout.of(params);
    let bout = map.bout.of(params);
    let mut logits = [bout[0], bout[1]];
    for k in 0..c {
        logits[0] += wout[k] * epix[k];
        logits[1] += wout[c + k] * epix[k];
    }
    logits
}

fn psi_from_logits(logits: [f64; 2]) -> f64 {
    sigmoid(logits[1] - logits[0])
}

/// Backward pass given the loss gradient with respect to the two logits.
fn backward(
    params: &[f64],
    map: &LayerMap,
    feats: &EventFeatures,
    scratch: &mut Scratch,
    dlogits: [f64; 2],
    grad: &mut [f64],
) {
    let c = map.c;
    let wout = map.wout.of(params);
    let Scratch {
        branches,
        epix,
        d_epix,
        dy,
        dd,
        dz,
        da,
        du,
        dv,
        u,
        v,
    } = scratch;

    outer_add(map.wout.of_mut(grad), &dlogits, epix);
    map.bout.of_mut(grad)[0] += dlogits[0];
    map.bout.of_mut(grad)[1] += dlogits[1];
    for k in 0..c {
        d_epix[k] = (wout[k] * dlogits[0] + wout[c + k] * dlogits[1]) / 4.0;
    }

    for bi in 0..N_BRANCHES {
        let tr = &branches[bi];
        dy.iter_mut().for_each(|g| *g = 0.0);

        let mut dalpha = [0.0f64; 3];
        for q in 0..3 {
            for k in 0..c {
                dalpha[q] += d_epix[k] * tr.y[q * c + k];
                dy[q * c + k] += tr.alpha[q] * d_epix[k];
            }
        }
        let inner: f64 = (0..3).map(|q| tr.alpha[q] * dalpha[q]).sum();
        let mut dt = [0.0f64; 3];
        for q in 0..3 {
            dt[q] = tr.alpha[q] * (dalpha[q] - inner);
        }
        for q in 0..3 {
            map.b4.of_mut(grad)[0] += dt[q];
            for k in 0..c {
                map.w4.of_mut(grad)[k] += dt[q] * tr.y[q * c + k];
                dy[q * c + k] += dt[q] * map.w4.of(params)[k];
            }
        }

        dd.iter_mut().for_each(|g| *g = 0.0);
        for q in 0..3 {
            let (pa, pb) = (2 * q, 2 * q + 1);
            for k in 0..c {
                let g = dy[q * c + k];
                da[k] = g * dsilu(tr.a3[q * c + k]);
                dd[pa * c + k] += 0.5 * g;
                dd[pb * c + k] += 0.5 * g;
            }
            for k in 0..c {
                u[k] = tr.d[pa * c + k] + tr.d[pb * c + k];
                v[k] = (tr.d[pa * c + k] - tr.d[pb * c + k]).abs();
            }
            outer_add(map.w3s.of_mut(grad), da, u);
            outer_add(map.w3d.of_mut(grad), da, v);
            if map.n_eng > 0 {
                outer_add(map.w3e.of_mut(grad), da, &feats.quadjet_eng[q]);
            }
            for (gk, dk) in map.b3.of_mut(grad).iter_mut().zip(da.iter()) {
                *gk += dk;
            }
            du.iter_mut().for_each(|g| *g = 0.0);
            dv.iter_mut().for_each(|g| *g = 0.0);
            matvec_t_add(map.w3s.of(params), c, c, da, du);
            matvec_t_add(map.w3d.of(params), c, c, da, dv);
            for k in 0..c {
                let diff = tr.d[pa * c + k] - tr.d[pb * c + k];
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                dd[pa * c + k] += du[k] + sign * dv[k];
                dd[pb * c + k] += du[k] - sign * dv[k];
            }
        }

        dz.iter_mut().for_each(|g| *g = 0.0);
        for (p, &(a, b)) in PAIRS.iter().enumerate() {
            for k in 0..c {
                let g = dd[p * c + k];
                da[k] = g * dsilu(tr.a2[p * c + k]);
                dz[a * c + k] += 0.5 * g;
                dz[b * c + k] += 0.5 * g;
            }
            for k in 0..c {
                u[k] = tr.z[a * c + k] + tr.z[b * c + k];
                v[k] = (tr.z[a * c + k] - tr.z[b * c + k]).abs();
            }
            outer_add(map.w2s.of_mut(grad), da, u);
            outer_add(map.w2d.of_mut(grad), da, v);
            if map.n_eng > 0 {
                outer_add(map.w2e.of_mut(grad), da, &feats.dijet_eng[p]);
            }
            for (gk, dk) in map.b2.of_mut(grad).iter_mut().zip(da.iter()) {
                *gk += dk;
            }
            du.iter_mut().for_each(|g| *g = 0.0);
            dv.iter_mut().for_each(|g| *g = 0.0);
            matvec_t_add(map.w2s.of(params), c, c, da, du);
            matvec_t_add(map.w2d.of(params), c, c, da, dv);
            for k in 0..c {
                let diff = tr.z[a * c + k] - tr.z[b * c + k];
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                dz[a * c + k] += du[k] + sign * dv[k];
                dz[b * c + k] += du[k] - sign * dv[k];
            }
        }

        for i in 0..4 {
            for k in 0..c {
                da[k] = dz[i * c + k] * dsilu(tr.a1[i * c + k]);
            }
            outer_add(map.w1.of_mut(grad), da, &tr.x[i]);
            for (gk, dk) in map.b1.of_mut(grad).iter_mut().zip(da.iter()) {
                *gk += dk;
            }
        }
    }
}

struct Sample<'a> {
    event: &'a Event,
    label: bool,
}

/// Weighted cross-entropy of one event plus, optionally, its parameter
/// gradient contribution (both unnormalized by the weight sum).
#[allow(clippy::too_many_arguments)]
fn event_loss(
    params: &[f64],
    map: &LayerMap,
    config: &NetConfig,
    sample: &Sample,
    delta: f64,
    scratch: &mut Scratch,
    feats: &EventFeatures,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let w = sample.event.weight;
    if w == 0.0 {
        return 0.0;
    }
    let logits = forward(params, map, feats, delta, scratch);
    let psi = psi_from_logits(logits);
    let eps = config.prob_clamp_eps;
    let clamped = psi.clamp(eps, 1.0 - eps);
    let ce = if sample.label {
        -clamped.ln()
    } else {
        -(1.0 - clamped).ln()
    };
    if let Some(grad) = grad.as_deref_mut() {
        if psi > eps && psi < 1.0 - eps {
            let y1 = if sample.label { 1.0 } else { 0.0 };
            let d1 = w * (psi - y1);
            backward(params, map, feats, scratch, [-d1, d1], grad);
        }
    }
    w * ce
}

fn pooled<'a>(class0: &'a [Event], class1: &'a [Event]) -> Vec<Sample<'a>> {
    class0
        .iter()
        .map(|event| Sample { event, label: false })
        .chain(class1.iter().map(|event| Sample { event, label: true }))
        .collect()
}

/// Mean weighted cross-entropy over the pooled classes and its gradient with
/// respect to every parameter, without augmentation. This is the exact
/// objective the trainer descends, exposed for finite-difference checks.
pub fn loss_and_gradient(
    model: &RatioModel,
    class0: &[Event],
    class1: &[Event],
) -> Result<(f64, Vec<f64>)> {
    if class0.is_empty() || class1.is_empty() {
        return Err(Error::Dimension("both classes must be nonempty".into()));
    }
    let map = layer_map(&model.config);
    let samples = pooled(class0, class1);
    let total_w: f64 = samples.iter().map(|s| s.event.weight).sum();
    if total_w <= 0.0 {
        return Err(Error::Domain("total training weight must be positive".into()));
    }
    let mut scratch = Scratch::new(map.c);
    let mut grad = vec![0.0; map.total];
    let mut loss = 0.0;
    for sample in &samples {
        let feats = event_features(sample.event);
        loss += event_loss(
            &model.params,
            &map,
            &model.config,
            sample,
            0.0,
            &mut scratch,
            &feats,
            Some(&mut grad),
        );
    }
    loss /= total_w;
    for g in &mut grad {
        *g /= total_w;
    }
    Ok((loss, grad))
}

fn dataset_loss(
    params: &[f64],
    map: &LayerMap,
    config: &NetConfig,
    samples: &[Sample],
    feats: &[EventFeatures],
    indices: &[usize],
    scratch: &mut Scratch,
) -> f64 {
    let mut loss = 0.0;
    let mut total_w = 0.0;
    for &i in indices {
        loss += event_loss(params, map, config, &samples[i], 0.0, scratch, &feats[i], None);
        total_w += samples[i].event.weight;
    }
    if total_w > 0.0 {
        loss / total_w
    } else {
        0.0
    }
}

/// Train a copy of the model on the two classes with Adam, per-batch shared
/// rotation augmentation, and best-validation-epoch selection over a 20%
/// holdout.
pub fn train(model: &RatioModel, class0: &[Event], class1: &[Event]) -> Result<RatioModel> {
    if class0.is_empty() || class1.is_empty() {
        return Err(Error::Dimension("both classes must be nonempty".into()));
    }
    let config = model.config;
    config.validate()?;
    let map = layer_map(&config);
    let samples = pooled(class0, class1);
    let feats: Vec<EventFeatures> = samples.iter().map(|s| event_features(s.event)).collect();
    let n = samples.len();

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = n / 5;
    let val_idx: Vec<usize> = order[..n_val].to_vec();
    let mut train_idx: Vec<usize> = order[n_val..].to_vec();
    if train_idx.is_empty() {
        return Err(Error::Dimension("training split is empty".into()));
    }

    let mut params = model.params.clone();
    let mut grad = vec![0.0; map.total];
    let mut adam_m = vec![0.0; map.total];
    let mut adam_v = vec![0.0; map.total];
    let mut step = 0u64;
    let (beta1, beta2, adam_eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut scratch = Scratch::new(map.c);

    let mut log = Vec::with_capacity(config.epochs);
    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;

    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        for batch in train_idx.chunks(config.batch_size) {
            let delta = if config.rotation_augmentation {
                rng.gen_range(0.0..TAU)
            } else {
                0.0
            };
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_w = 0.0;
            for &i in batch {
                event_loss(
                    &params,
                    &map,
                    &config,
                    &samples[i],
                    delta,
                    &mut scratch,
                    &feats[i],
                    Some(&mut grad),
                );
                batch_w += samples[i].event.weight;
            }
            if batch_w <= 0.0 {
                continue;
            }
            step += 1;
            let bc1 = 1.0 - beta1.powi(step as i32);
            let bc2 = 1.0 - beta2.powi(step as i32);
            for k in 0..map.total {
                let g = grad[k] / batch_w;
                adam_m[k] = beta1 * adam_m[k] + (1.0 - beta1) * g;
                adam_v[k] = beta2 * adam_v[k] + (1.0 - beta2) * g * g;
                let m_hat = adam_m[k] / bc1;
                let v_hat = adam_v[k] / bc2;
                params[k] -= config.learning_rate * m_hat / (v_hat.sqrt() + adam_eps);
            }
        }

        let train_loss = dataset_loss(&params, &map, &config, &samples, &feats, &train_idx, &mut scratch);
        let val_loss = if val_idx.is_empty() {
            train_loss
        } else {
            dataset_loss(&params, &map, &config, &samples, &feats, &val_idx, &mut scratch)
        };
        if !(train_loss.is_finite() && val_loss.is_finite())
            || params.iter().any(|p| !p.is_finite())
        {
            return Err(Error::Numerical(format!(
                "training diverged at epoch {epoch}: train loss {train_loss}, validation loss {val_loss}"
            )));
        }
        log.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_params.copy_from_slice(&params);
        }
    }

    Ok(RatioModel {
        config,
        params: if config.epochs > 0 { best_params } else { params },
        training_log: log,
    })
}

impl RatioModel {
    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access for finite-difference probing.
    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Clamped class-1 probability of one event.
    pub fn predict(&self, event: &Event) -> f64 {
        let map = layer_map(&self.config);
        let mut scratch = Scratch::new(map.c);
        let feats = event_features(event);
        let logits = forward(&self.params, &map, &feats, 0.0, &mut scratch);
        let eps = self.config.prob_clamp_eps;
        psi_from_logits(logits).clamp(eps, 1.0 - eps)
    }

    /// ψ/(1−ψ) for the clamped prediction.
    pub fn odds_ratio(&self, event: &Event) -> f64 {
        psi_to_odds(self.predict(event))
    }
}

pub(crate) fn psi_to_odds(psi: f64) -> f64 {
    psi / (1.0 - psi)
}

/// Mean |ψ(g) − ψ(rotated g)| over events and seeded random rotations.
pub fn rotation_invariance_gap(
    model: &RatioModel,
    events: &[Event],
    rotations_per_event: usize,
    seed: u64,
) -> f64 {
    use crate::event::{apply_symmetry, SymmetryTransform};
    if events.is_empty() || rotations_per_event == 0 {
        return 0.0;
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for event in events {
        let base = model.predict(event);
        for _ in 0..rotations_per_event {
            let t = SymmetryTransform::new(rng.gen_range(0.0..TAU), false, false);
            total += (model.predict(&apply_symmetry(event, &t)) - base).abs();
        }
    }
    total / (events.len() * rotations_per_event) as f64
}

/// Scores, binary labels, and weights of a scored sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub weights: Vec<f64>,
}

impl ScoredSample {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>, weights: Vec<f64>) -> Result<Self> {
        if scores.len() != labels.len() || scores.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "scored sample lengths differ: {} scores, {} labels, {} weights",
                scores.len(),
                labels.len(),
                weights.len()
            )));
        }
        for s in &scores {
            if !s.is_finite() {
                return Err(Error::Domain(format!("non-finite score {s}")));
            }
        }
        for w in &weights {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::Domain(format!("invalid weight {w}")));
            }
        }
        Ok(ScoredSample {
            scores,
            labels,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Score both classes with a model, carrying the event weights.
pub fn score_sample(model: &RatioModel, class0: &[Event], class1: &[Event]) -> ScoredSample {
    let mut scores = Vec::with_capacity(class0.len() + class1.len());
    let mut labels = Vec::with_capacity(scores.capacity());
    let mut weights = Vec::with_capacity(scores.capacity());
    for (events, label) in [(class0, false), (class1, true)] {
        for event in events {
            scores.push(model.predict(event));
            labels.push(label);
            weights.push(event.weight);
        }
    }
    ScoredSample {
        scores,
        labels,
        weights,
    }
}

/// Weighted probability that a class-1 score exceeds a class-0 score, ties
/// counted half.
pub fn auc(scored: &ScoredSample) -> Result<f64> {
    let n = scored.len();
    let w0: f64 = (0..n).filter(|&i| !scored.labels[i]).map(|i| scored.weights[i]).sum();
    let w1: f64 = (0..n).filter(|&i| scored.labels[i]).map(|i| scored.weights[i]).sum();
    if w0 <= 0.0 || w1 <= 0.0 {
        return Err(Error::Domain(
            "auc needs positive weight in both classes".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| scored.scores[a].total_cmp(&scored.scores[b]));
    let mut concordant = 0.0;
    let mut cum0 = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        let mut g0 = 0.0;
        let mut g1 = 0.0;
        while j < n && scored.scores[order[j]] == scored.scores[order[i]] {
            if scored.labels[order[j]] {
                g1 += scored.weights[order[j]];
            } else {
                g0 += scored.weights[order[j]];
            }
            j += 1;
        }
        concordant += g1 * (cum0 + 0.5 * g0);
        cum0 += g0;
        i = j;
    }
    Ok(concordant / (w0 * w1))
}

/// Point AUC with a percentile bootstrap interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapAuc {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub skipped: usize,
}

pub fn bootstrap_auc(scored: &ScoredSample, replications: usize, seed: u64) -> Result<BootstrapAuc> {
    if replications == 0 {
        return Err(Error::Domain("bootstrap needs at least one replication".into()));
    }
    let point = auc(scored)?;
    let n = scored.len();
    let mut values = Vec::with_capacity(replications);
    let mut skipped = 0usize;
    for rep in 0..replications {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(rep as u64 + 1);
        let mut resample = ScoredSample {
            scores: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
            weights: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            resample.scores.push(scored.scores[i]);
            resample.labels.push(scored.labels[i]);
            resample.weights.push(scored.weights[i]);
        }
        match auc(&resample) {
            Ok(v) => values.push(v),
            Err(_) => skipped += 1,
        }
    }
    if values.is_empty() {
        return Err(Error::Numerical(
            "all bootstrap replications were single-class".into(),
        ));
    }
    values.sort_unstable_by(f64::total_cmp);
    Ok(BootstrapAuc {
        point,
        lo: percentile(&values, 0.025),
        hi: percentile(&values, 0.975),
        skipped,
    })
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = q * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

const MODEL_VERSION: u32 = 1;

pub fn write_model(path: &Path, model: &RatioModel) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let c = &model.config;
    let mut bytes = Vec::with_capacity(model.params.len() * 8);
    for p in &model.params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    write!(
        w,
        "quadjet ratio model v{MODEL_VERSION}\n\
         channel_width={}\n\
         use_engineered_features={}\n\
         rotation_augmentation={}\n\
         learning_rate={}\n\
         batch_size={}\n\
         epochs={}\n\
         seed={}\n\
         prob_clamp_eps={}\n\
         param_count={}\n\
         {}\n",
        c.channel_width,
        c.use_engineered_features,
        c.rotation_augmentation,
        c.learning_rate,
        c.batch_size,
        c.epochs,
        c.seed,
        c.prob_clamp_eps,
        model.params.len(),
        hex::encode(&bytes)
    )
    .map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_model(path: &Path) -> Result<RatioModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let mut next_line = |expect: &str| -> Result<(usize, String)> {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| Error::Format(format!("model file truncated, expected {expect}")))?;
        Ok((idx + 1, line.map_err(|e| Error::io(path, e))?))
    };

    let (_, header) = next_line("version header")?;
    let version: u32 = header
        .strip_prefix("quadjet ratio model v")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("not a ratio model file: {header:?}")))?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported model version {version}, expected {MODEL_VERSION}"
        )));
    }

    let mut config = NetConfig::default();
    let mut param_count = 0usize;
    let keys = [
        "channel_width",
        "use_engineered_features",
        "rotation_augmentation",
        "learning_rate",
        "batch_size",
        "epochs",
        "seed",
        "prob_clamp_eps",
        "param_count",
    ];
    for key in keys {
        let (line_no, line) = next_line(key)?;
        let value = line
            .strip_prefix(key)
            .and_then(|rest| rest.strip_prefix('='))
            .ok_or_else(|| Error::parse(path, line_no, format!("expected {key}=...")))?;
        let bad = |e: &dyn std::fmt::Display| Error::parse(path, line_no, format!("bad {key}: {e}"));
        match key {
            "channel_width" => config.channel_width = value.parse().map_err(|e| bad(&e))?,
            "use_engineered_features" => {
                config.use_engineered_features = value.parse().map_err(|e| bad(&e))?
            }
            "rotation_augmentation" => {
                config.rotation_augmentation = value.parse().map_err(|e| bad(&e))?
            }
            "learning_rate" => config.learning_rate = value.parse().map_err(|e| bad(&e))?,
            "batch_size" => config.batch_size = value.parse().map_err(|e| bad(&e))?,
            "epochs" => config.epochs = value.parse().map_err(|e| bad(&e))?,
            "seed" => config.seed = value.parse().map_err(|e| bad(&e))?,
            "prob_clamp_eps" => config.prob_clamp_eps = value.parse().map_err(|e| bad(&e))?,
            "param_count" => param_count = value.parse().map_err(|e| bad(&e))?,
            _ => unreachable!(),
        }
    }
    if param_count != parameter_count(&config) {
        return Err(Error::Format(format!(
            "param_count {param_count} does not match architecture ({} expected)",
            parameter_count(&config)
        )));
    }
    let (line_no, blob) = next_line("parameter blob")?;
    let bytes = hex::decode(blob.trim())
        .map_err(|e| Error::parse(path, line_no, format!("bad parameter hex: {e}")))?;
    if bytes.len() != param_count * 8 {
        return Err(Error::parse(
            path,
            line_no,
            format!(
                "parameter blob holds {} bytes, expected {}",
                bytes.len(),
                param_count * 8
            ),
        ));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|chunk| f64::from_le_bytes(chunk.try_into().expect("chunked by 8")))
        .collect();
    Ok(RatioModel {
        config,
        params,
        training_log: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{apply_symmetry, Channel, SymmetryTransform};
    use tempfile::tempdir;

    fn random_jet(rng: &mut impl Rng) -> Jet {
        Jet::new(
            rng.gen_range(25.0..250.0),
            rng.gen_range(-2.5..2.5),
            rng.gen_range(0.0..TAU),
            0.0,
        )
        .unwrap()
    }

    fn random_event(rng: &mut impl Rng) -> Event {
        let jets = [(); 4].map(|_| random_jet(rng));
        Event::new(jets, 1.0, Channel::ThreeTag, None).unwrap()
    }

    /// Events whose leading-jet pT is 300 + Normal(mu, sigma) GeV while the
    /// three soft jets are drawn identically below 100 GeV: the true density
    /// ratio between two such classes is a closed-form function of the
    /// leading pT alone. The rejection bound sits several sigmas out, so the
    /// truncation bias is negligible against the tested tolerances.
    fn gaussian_pt_event(rng: &mut impl Rng, mu: f64, sigma: f64) -> Event {
        let lead = loop {
            let draw: f64 = rand_distr::StandardNormal.sample(rng);
            let shifted = mu + sigma * draw;
            if shifted > -199.0 {
                break shifted;
            }
        };
        let soft = |rng: &mut dyn RngCore| {
            Jet::new(
                rng.gen_range(25.0..100.0),
                rng.gen_range(-2.5..2.5),
                rng.gen_range(0.0..TAU),
                0.0,
            )
            .unwrap()
        };
        let jets = [
            Jet::new(
                300.0 + lead,
                rng.gen_range(-2.5..2.5),
                rng.gen_range(0.0..TAU),
                0.0,
            )
            .unwrap(),
            soft(rng),
            soft(rng),
            soft(rng),
        ];
        Event::new(jets, 1.0, Channel::ThreeTag, None).unwrap()
    }

    #[test]
    fn builds_are_deterministic_and_counted() {
        for c in 1..=5 {
            for eng in [false, true] {
                let config = NetConfig {
                    channel_width: c,
                    use_engineered_features: eng,
                    ..NetConfig::default()
                };
                let a = build_model(&config, 7).unwrap();
                let b = build_model(&config, 7).unwrap();
                assert_eq!(a.parameters(), b.parameters());
                assert_eq!(a.parameters().len(), parameter_count(&config));
                let expected = if eng { 4 * c * c + 14 * c + 3 } else { 4 * c * c + 10 * c + 3 };
                assert_eq!(parameter_count(&config), expected);
                let other = build_model(&config, 8).unwrap();
                assert_ne!(a.parameters(), other.parameters());
            }
        }
    }

    #[test]
    fn minimal_model_predicts_a_probability() {
        let config = NetConfig {
            channel_width: 1,
            ..NetConfig::default()
        };
        let model = build_model(&config, 3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let psi = model.predict(&random_event(&mut rng));
        assert!(psi > 0.0 && psi < 1.0);
    }

    #[test]
    fn eta_reflection_is_bitwise_invariant() {
        let model = build_model(&NetConfig::default(), 11).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..200 {
            let event = random_event(&mut rng);
            let flipped = apply_symmetry(&event, &SymmetryTransform::new(0.0, true, false));
            assert_eq!(model.predict(&event).to_bits(), model.predict(&flipped).to_bits());
        }
    }

    #[test]
    fn phi_reflection_is_invariant_to_wrap_rounding() {
        let model = build_model(&NetConfig::default(), 17).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        for _ in 0..200 {
            let event = random_event(&mut rng);
            let flipped = apply_symmetry(&event, &SymmetryTransform::new(0.0, false, true));
            let gap = (model.predict(&event) - model.predict(&flipped)).abs();
            assert!(gap <= 1e-12, "phi reflection moved psi by {gap}");
        }
    }

    #[test]
    fn jet_permutations_cannot_change_the_prediction() {
        let model = build_model(&NetConfig::default(), 23).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let perms = all_permutations();
        for _ in 0..50 {
            let event = random_event(&mut rng);
            let reference = model.predict(&event);
            for perm in &perms {
                let mut shuffled = event;
                for (slot, &src) in perm.iter().enumerate() {
                    shuffled.jets[slot] = event.jets[src];
                }
                assert_eq!(model.predict(&shuffled).to_bits(), reference.to_bits());
            }
        }
    }

    fn all_permutations() -> Vec<[usize; 4]> {
        let mut out = Vec::with_capacity(24);
        let mut items = [0usize, 1, 2, 3];
        permute_rec(&mut items, 4, &mut out);
        out
    }

    fn permute_rec(items: &mut [usize; 4], k: usize, out: &mut Vec<[usize; 4]>) {
        if k == 1 {
            out.push(*items);
            return;
        }
        for i in 0..k {
            permute_rec(items, k - 1, out);
            if k % 2 == 0 {
                items.swap(i, k - 1);
            } else {
                items.swap(0, k - 1);
            }
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let config = NetConfig {
            channel_width: 2,
            ..NetConfig::default()
        };
        let mut model = build_model(&config, 31).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let class0: Vec<Event> = (0..5).map(|_| random_event(&mut rng)).collect();
        let class1: Vec<Event> = (0..5).map(|_| random_event(&mut rng)).collect();

        let (_, grad) = loss_and_gradient(&model, &class0, &class1).unwrap();
        for k in 0..model.parameters().len() {
            let orig = model.parameters()[k];
            let h = 1e-5 * (1.0 + orig.abs());
            model.parameters_mut()[k] = orig + h;
            let (up, _) = loss_and_gradient(&model, &class0, &class1).unwrap();
            model.parameters_mut()[k] = orig - h;
            let (down, _) = loss_and_gradient(&model, &class0, &class1).unwrap();
            model.parameters_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let denom = grad[k].abs().max(fd.abs()).max(1e-8);
            let rel = (grad[k] - fd).abs() / denom;
            assert!(
                rel <= 1e-4,
                "parameter {k}: analytic {} vs finite difference {fd} (rel {rel})",
                grad[k]
            );
        }
    }

    #[test]
    fn identical_classes_train_to_coin_flip() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let events: Vec<Event> = (0..300).map(|_| random_event(&mut rng)).collect();
        let config = NetConfig {
            epochs: 5,
            ..NetConfig::default()
        };
        let model = build_model(&config, 43).unwrap();
        let trained = train(&model, &events, &events).unwrap();
        let holdout: Vec<Event> = (0..200).map(|_| random_event(&mut rng)).collect();
        let scored = score_sample(&trained, &holdout, &holdout);
        let a = auc(&scored).unwrap();
        assert!((0.48..=0.52).contains(&a), "auc {a} on identical classes");
    }

    #[test]
    fn separable_toy_is_learned_with_rotation_invariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(47);
        let class0: Vec<Event> = (0..600).map(|_| gaussian_pt_event(&mut rng, 0.0, 30.0)).collect();
        let class1: Vec<Event> = (0..600).map(|_| gaussian_pt_event(&mut rng, 150.0, 30.0)).collect();
        let config = NetConfig {
            epochs: 15,
            ..NetConfig::default()
        };
        let model = build_model(&config, 53).unwrap();
        let trained = train(&model, &class0, &class1).unwrap();

        assert_eq!(trained.training_log.len(), config.epochs);
        let first = trained.training_log.first().unwrap().train_loss;
        let last = trained.training_log.last().unwrap().train_loss;
        assert!(last <= first, "loss rose from {first} to {last}");

        let test0: Vec<Event> = (0..250).map(|_| gaussian_pt_event(&mut rng, 0.0, 30.0)).collect();
        let test1: Vec<Event> = (0..250).map(|_| gaussian_pt_event(&mut rng, 150.0, 30.0)).collect();
        let a = auc(&score_sample(&trained, &test0, &test1)).unwrap();
        assert!(a >= 0.9, "held-out auc {a}");

        let probe: Vec<Event> = test0.iter().take(60).cloned().collect();
        let gap = rotation_invariance_gap(&trained, &probe, 4, 59);
        assert!(gap < 0.05, "rotation gap {gap}");

        let retrained = train(&model, &class0, &class1).unwrap();
        assert_eq!(trained.parameters(), retrained.parameters());
    }

    #[test]
    fn odds_are_monotone_in_psi() {
        assert!((psi_to_odds(0.5) - 1.0).abs() < 1e-12);
        assert!((psi_to_odds(0.75) - 3.0).abs() < 1e-12);
        let model = build_model(&NetConfig::default(), 61).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(67);
        let mut pairs: Vec<(f64, f64)> = (0..100)
            .map(|_| {
                let event = random_event(&mut rng);
                (model.predict(&event), model.odds_ratio(&event))
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
        for (psi, odds) in pairs {
            assert!((odds - psi / (1.0 - psi)).abs() < 1e-12);
            assert!(odds > 0.0);
        }
    }

    #[test]
    fn learned_odds_track_the_true_density_ratio() {
        let mut rng = ChaCha12Rng::seed_from_u64(71);
        let (mu0, mu1, sigma) = (0.0, 40.0, 50.0);
        let n = 2500;
        let class0: Vec<Event> = (0..n).map(|_| gaussian_pt_event(&mut rng, mu0, sigma)).collect();
        let class1: Vec<Event> = (0..n).map(|_| gaussian_pt_event(&mut rng, mu1, sigma)).collect();
        let config = NetConfig {
            epochs: 25,
            ..NetConfig::default()
        };
        let trained = train(&build_model(&config, 73).unwrap(), &class0, &class1).unwrap();

        let mut lead: Vec<f64> = class0.iter().chain(&class1).map(|e| {
            e.jets.iter().map(|j| j.pt).fold(0.0, f64::max) - 300.0
        }).collect();
        lead.sort_unstable_by(f64::total_cmp);
        let lo = lead[(lead.len() as f64 * 0.05) as usize];
        let hi = lead[(lead.len() as f64 * 0.95) as usize];

        let eval: Vec<Event> = (0..400).map(|_| gaussian_pt_event(&mut rng, mu0, sigma)).collect();
        let mut total_rel = 0.0;
        let mut used = 0usize;
        for event in &eval {
            let x = event.jets.iter().map(|j| j.pt).fold(0.0, f64::max) - 300.0;
            if x < lo || x > hi {
                continue;
            }
            let true_ratio = ((mu1 - mu0) / (sigma * sigma) * (x - 0.5 * (mu0 + mu1))).exp();
            let odds = trained.odds_ratio(event);
            total_rel += ((odds - true_ratio) / true_ratio).abs();
            used += 1;
        }
        let mean_rel = total_rel / used as f64;
        assert!(used >= 300);
        assert!(mean_rel <= 0.15, "mean relative odds error {mean_rel}");
    }

    #[test]
    fn auc_handles_ties_and_weights() {
        let all_same = ScoredSample::new(vec![0.3; 6], vec![false, true, false, true, false, true], vec![1.0; 6]).unwrap();
        assert_eq!(auc(&all_same).unwrap(), 0.5);

        let separated = ScoredSample::new(
            vec![0.1, 0.2, 0.8, 0.9],
            vec![false, false, true, true],
            vec![1.0; 4],
        )
        .unwrap();
        assert_eq!(auc(&separated).unwrap(), 1.0);

        let example = ScoredSample::new(
            vec![0.1, 0.4, 0.35, 0.8],
            vec![false, false, true, true],
            vec![1.0; 4],
        )
        .unwrap();
        assert!((auc(&example).unwrap() - 0.75).abs() < 1e-12);

        let weighted = ScoredSample::new(
            vec![0.1, 0.4, 0.35, 0.8],
            vec![false, false, true, true],
            vec![1.0, 2.0, 1.0, 1.0],
        )
        .unwrap();
        assert!((auc(&weighted).unwrap() - (1.0 + 3.0) / 6.0).abs() < 1e-12);

        let single = ScoredSample::new(vec![0.5, 0.5], vec![true, true], vec![1.0, 1.0]).unwrap();
        assert!(auc(&single).is_err());
    }

    #[test]
    fn bootstrap_is_deterministic_and_brackets_the_point() {
        let mut rng = ChaCha12Rng::seed_from_u64(79);
        let scores: Vec<f64> = (0..40).map(|i| i as f64 / 40.0 + rng.gen_range(-0.2..0.2)).collect();
        let labels: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        let scored = ScoredSample::new(scores, labels, vec![1.0; 40]).unwrap();
        let a = bootstrap_auc(&scored, 200, 83).unwrap();
        let b = bootstrap_auc(&scored, 200, 83).unwrap();
        assert_eq!(a, b);
        assert!(a.lo <= a.point && a.point <= a.hi);

        let degenerate = ScoredSample::new(
            vec![0.2, 0.2, 0.2, 0.8, 0.8, 0.8],
            vec![false, false, false, true, true, true],
            vec![1.0; 6],
        )
        .unwrap();
        let d = bootstrap_auc(&degenerate, 500, 89).unwrap();
        assert_eq!((d.lo, d.hi), (1.0, 1.0));

        let tiny = ScoredSample::new(vec![0.1, 0.9], vec![false, true], vec![1.0, 1.0]).unwrap();
        let t = bootstrap_auc(&tiny, 300, 97).unwrap();
        assert!(t.skipped > 0, "two-element resamples should sometimes be single-class");
    }

    #[test]
    fn model_file_round_trips_and_rejects_tampering() {
        let config = NetConfig {
            channel_width: 3,
            use_engineered_features: false,
            ..NetConfig::default()
        };
        let model = build_model(&config, 101).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.txt");
        write_model(&path, &model).unwrap();
        let back = read_model(&path).unwrap();
        assert_eq!(model.parameters(), back.parameters());
        assert_eq!(model.config, back.config);

        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replace("model v1", "model v2");
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(read_model(&path), Err(Error::Format(_))));
    }

    #[test]
    fn divergent_training_is_reported() {
        let mut rng = ChaCha12Rng::seed_from_u64(103);
        let class0: Vec<Event> = (0..40).map(|_| random_event(&mut rng)).collect();
        let class1: Vec<Event> = (0..40).map(|_| random_event(&mut rng)).collect();
        let config = NetConfig {
            learning_rate: 1e300,
            epochs: 3,
            ..NetConfig::default()
        };
        let model = build_model(&config, 107).unwrap();
        match train(&model, &class0, &class1) {
            Err(Error::Numerical(_)) => {}
            other => panic!("expected numerical divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut config = NetConfig::default();
        config.channel_width = 0;
        assert!(build_model(&config, 1).is_err());
        config = NetConfig::default();
        config.prob_clamp_eps = 0.7;
        assert!(build_model(&config, 1).is_err());
        config = NetConfig::default();
        config.learning_rate = -1.0;
        assert!(build_model(&config, 1).is_err());
    }
}

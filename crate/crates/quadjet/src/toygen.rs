//! Parametric synthetic-event generator.
//!
//! Events are built from two parent resonance candidates that decay
//! back-to-back into massless quarks in their rest frames; the lab-frame
//! quarks are Gaussian-smeared in energy and weighted with flavor-dependent
//! b-tagging scale factors. The 3b and 4b streams share one base
//! distribution and differ by a configurable smooth kinematic shift.
//!
//! In factorized mode the 4b shift is applied after smearing as a common
//! transverse boost plus a common pseudorapidity shift. Both operations
//! preserve every pairwise invariant mass, so the analysis pairing and the
//! region label of each event are unchanged, and the acceptance cut is
//! evaluated on the shifted and unshifted configurations alike for every
//! stream. Channel and region are therefore independent by construction and
//! the count identity `m_s ≈ m_c·n_s/n_c` holds up to sampling noise. With
//! the flag off, the same shift acts on the quarks before smearing, which
//! couples the channel to the mass resolution and leaves the identity only
//! approximate.
//!
//! Every event draws from its own counter-indexed random stream, so
//! generation is deterministic under any parallel schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{wrap_phi, Channel, Event, FourMomentum, Jet, Truth, TAU};

const SIGNAL_MASS: f64 = 125.0;
const MAX_ABS_ETA: f64 = 2.5;
const MIN_JET_PT: f64 = 25.0;
const MAX_ATTEMPTS: usize = 100_000;

const PARENT_PT_SHAPE: f64 = 2.5;
const PARENT_PT_SCALE: f64 = 45.0;
const PARENT_ETA_SIGMA: f64 = 0.9;
const PHI_BALANCE_SIGMA: f64 = 0.4;
const MASS_MEDIAN: f64 = 127.0;
const MASS_LOG_SIGMA: f64 = 0.24;

/// Relative calorimeter resolution `(σ(E)/E)² = (S/√E)² + (N/E)² + C²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmearParams {
    pub s: f64,
    pub n: f64,
    pub c: f64,
}

impl Default for SmearParams {
    fn default() -> Self {
        SmearParams {
            s: 0.98,
            n: 0.0,
            c: 0.054,
        }
    }
}

impl SmearParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("s", self.s), ("n", self.n), ("c", self.c)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!(
                    "smear parameter {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Absolute resolution `σ(e) = √(S²e + N² + C²e²)`.
    pub fn sigma(&self, e: f64) -> f64 {
        (self.s * self.s * e + self.n * self.n + self.c * self.c * e * e).sqrt()
    }
}

/// One draw from `Normal(e, σ(e)²)` truncated below at 1 GeV.
pub fn smear_energy(e: f64, params: &SmearParams, rng: &mut impl Rng) -> f64 {
    let sigma = params.sigma(e);
    if sigma == 0.0 {
        return e;
    }
    for _ in 0..MAX_ATTEMPTS {
        let z: f64 = StandardNormal.sample(rng);
        let smeared = e + sigma * z;
        if smeared >= 1.0 {
            return smeared;
        }
    }
    1.0
}

/// True quark flavor behind a tagged jet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flavor {
    Bottom,
    Charm,
    Light,
}

/// b-tagging scale factor for a tagged jet of true `flavor`, `pt` in TeV.
pub fn scale_factor(flavor: Flavor, pt_tev: f64) -> f64 {
    match flavor {
        Flavor::Bottom => (2.5 * pt_tev * (-7.0 * pt_tev).exp() + 0.6) / 0.75,
        Flavor::Charm => (pt_tev * (-10.0 * pt_tev).exp() + 0.2) / 0.15,
        Flavor::Light => (0.03 * pt_tev + 0.01) / 0.01,
    }
}

/// Four-quark final state of a background event: the first parent always
/// decays to b quarks, the second carries the state's other flavor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinalState {
    FourB,
    TwoBTwoC,
    TwoBTwoLight,
}

impl FinalState {
    pub fn second_pair_flavor(self) -> Flavor {
        match self {
            FinalState::FourB => Flavor::Bottom,
            FinalState::TwoBTwoC => Flavor::Charm,
            FinalState::TwoBTwoLight => Flavor::Light,
        }
    }
}

/// Final-state proportions of one tag channel. The values are treated as
/// relative weights and normalized when drawing, so rounded percentage
/// sets that do not add up to exactly one are accepted as given.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub bbbb: f64,
    pub bbcc: f64,
    pub bbll: f64,
}

impl Composition {
    pub fn four_tag() -> Self {
        Composition {
            bbbb: 0.90,
            bbcc: 0.07,
            bbll: 0.04,
        }
    }

    pub fn three_tag() -> Self {
        Composition {
            bbbb: 0.10,
            bbcc: 0.09,
            bbll: 0.80,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("bbbb", self.bbbb), ("bbcc", self.bbcc), ("bbll", self.bbll)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!(
                    "composition fraction {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        let total = self.bbbb + self.bbcc + self.bbll;
        if total <= 0.0 {
            return Err(Error::Domain(
                "composition fractions must not all be zero".into(),
            ));
        }
        Ok(())
    }

    /// Normalized fractions `(bbbb, bbcc, bbll)`.
    pub fn fractions(&self) -> (f64, f64, f64) {
        let total = self.bbbb + self.bbcc + self.bbll;
        (self.bbbb / total, self.bbcc / total, self.bbll / total)
    }

    pub fn draw(&self, rng: &mut impl Rng) -> FinalState {
        let (p_bbbb, p_bbcc, _) = self.fractions();
        let u: f64 = rng.gen();
        if u < p_bbbb {
            FinalState::FourB
        } else if u < p_bbbb + p_bbcc {
            FinalState::TwoBTwoC
        } else {
            FinalState::TwoBTwoLight
        }
    }
}

/// Smooth kinematic difference of the 4b stream relative to the 3b stream:
/// a common transverse boost of velocity `boost` in a per-event random
/// direction, plus a common pseudorapidity shift `eta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftParams {
    pub boost: f64,
    pub eta: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        ShiftParams {
            boost: 0.22,
            eta: 0.35,
        }
    }
}

impl ShiftParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.boost.is_finite() && (0.0..1.0).contains(&self.boost)) {
            return Err(Error::Domain(format!(
                "shift boost must be a velocity in [0, 1), got {}",
                self.boost
            )));
        }
        if !self.eta.is_finite() {
            return Err(Error::Domain(format!(
                "shift eta must be finite, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Accepted events in the 3b stream (before the region split).
    pub n_3b: usize,
    /// Accepted events in the 4b stream (before the region split).
    pub n_4b: usize,
    /// Fraction of the 4b stream drawn from the signal process.
    pub signal_fraction: f64,
    pub composition_3b: Composition,
    pub composition_4b: Composition,
    pub smear: SmearParams,
    pub shift: ShiftParams,
    pub factorized_mode: bool,
    /// The held-out truth sample has `truth_oversample * n_4b` events.
    pub truth_oversample: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_3b: 11_800,
            n_4b: 1_650,
            signal_fraction: 0.0,
            composition_3b: Composition::three_tag(),
            composition_4b: Composition::four_tag(),
            smear: SmearParams::default(),
            shift: ShiftParams::default(),
            factorized_mode: true,
            truth_oversample: 10,
            seed: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.signal_fraction.is_finite() && (0.0..1.0).contains(&self.signal_fraction)) {
            return Err(Error::Domain(format!(
                "signal fraction must lie in [0, 1), got {}",
                self.signal_fraction
            )));
        }
        self.composition_3b.validate()?;
        self.composition_4b.validate()?;
        self.smear.validate()?;
        self.shift.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSamples {
    pub sample3b: Vec<Event>,
    pub sample4b: Vec<Event>,
    /// Signal-free oversampled 4b stream held out as ground truth.
    pub truth4b: Vec<Event>,
}

pub fn generate(cfg: &GenConfig) -> Result<GeneratedSamples> {
    cfg.validate()?;
    Ok(GeneratedSamples {
        sample3b: gen_stream(cfg, Stream::Tag3b, cfg.n_3b)?,
        sample4b: gen_stream(cfg, Stream::Tag4b, cfg.n_4b)?,
        truth4b: gen_stream(cfg, Stream::Truth4b, cfg.truth_oversample * cfg.n_4b)?,
    })
}

/// A pure signal sample of `n` events in the 4b channel, drawn from its own
/// random stream of the same base seed.
pub fn generate_signal(cfg: &GenConfig, n: usize) -> Result<Vec<Event>> {
    cfg.validate()?;
    gen_stream(cfg, Stream::Signal, n)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stream {
    Tag3b,
    Tag4b,
    Truth4b,
    Signal,
}

impl Stream {
    fn code(self) -> u64 {
        match self {
            Stream::Tag3b => 1,
            Stream::Tag4b => 2,
            Stream::Truth4b => 3,
            Stream::Signal => 4,
        }
    }

    fn is_shifted(self) -> bool {
        !matches!(self, Stream::Tag3b)
    }
}

fn gen_stream(cfg: &GenConfig, stream: Stream, n: usize) -> Result<Vec<Event>> {
    if n > u32::MAX as usize {
        return Err(Error::Dimension(format!("stream of {n} events is too large")));
    }
    (0..n)
        .into_par_iter()
        .map(|i| gen_event(cfg, stream, i as u64))
        .collect()
}

fn event_rng(seed: u64, stream: Stream, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream((stream.code() << 32) | index);
    rng
}

fn gen_event(cfg: &GenConfig, stream: Stream, index: u64) -> Result<Event> {
    let mut rng = event_rng(cfg.seed, stream, index);
    let is_signal = stream == Stream::Signal
        || (stream == Stream::Tag4b
            && cfg.signal_fraction > 0.0
            && rng.gen::<f64>() < cfg.signal_fraction);

    for _ in 0..MAX_ATTEMPTS {
        let masses = if is_signal {
            (SIGNAL_MASS, SIGNAL_MASS)
        } else {
            (draw_mass(&mut rng), draw_mass(&mut rng))
        };
        let mut quarks = draw_quarks(masses, &mut rng);

        if !cfg.factorized_mode && stream.is_shifted() {
            let alpha = rng.gen_range(0.0..TAU);
            quarks = quarks.map(|q| shift_momentum(&q, &cfg.shift, alpha));
        }
        for q in &mut quarks {
            let scale = smear_energy(q.e, &cfg.smear, &mut rng) / q.e;
            *q = q.scale(scale);
        }

        let jets = if cfg.factorized_mode {
            let alpha = rng.gen_range(0.0..TAU);
            let shifted = quarks.map(|q| shift_momentum(&q, &cfg.shift, alpha));
            let (Some(base), Some(shifted)) = (to_jets(&quarks), to_jets(&shifted)) else {
                continue;
            };
            if stream.is_shifted() {
                shifted
            } else {
                base
            }
        } else {
            let Some(jets) = to_jets(&quarks) else {
                continue;
            };
            jets
        };

        let weight = draw_weight(cfg, stream, is_signal, &jets, &mut rng);
        let channel = match stream {
            Stream::Tag3b => Channel::ThreeTag,
            _ => Channel::FourTag,
        };
        let truth = if is_signal {
            Truth::Signal
        } else {
            Truth::Background
        };
        return Event::new(jets, weight, channel, Some(truth));
    }
    Err(Error::Numerical(format!(
        "no accepted event after {MAX_ATTEMPTS} attempts (stream {}, index {index})",
        stream.code()
    )))
}

fn draw_mass(rng: &mut impl Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    MASS_MEDIAN * (MASS_LOG_SIGMA * z).exp()
}

/// Two parents decayed to massless quark pairs, boosted to the lab frame.
/// The pre-smearing invariant mass of each quark pair equals its parent
/// mass exactly.
fn draw_quarks(masses: (f64, f64), rng: &mut impl Rng) -> [FourMomentum; 4] {
    let pt_dist = Gamma::new(PARENT_PT_SHAPE, PARENT_PT_SCALE).expect("fixed parameters");
    let pt1 = pt_dist.sample(rng);
    let pt2 = pt_dist.sample(rng);
    let eta1 = PARENT_ETA_SIGMA * rng.sample::<f64, _>(StandardNormal);
    let eta2 = PARENT_ETA_SIGMA * rng.sample::<f64, _>(StandardNormal);
    let phi1 = rng.gen_range(0.0..TAU);
    let phi2 = wrap_phi(
        phi1 + std::f64::consts::PI + PHI_BALANCE_SIGMA * rng.sample::<f64, _>(StandardNormal),
    );

    let (q1, q2) = decay_parent(masses.0, pt1, eta1, phi1, rng);
    let (q3, q4) = decay_parent(masses.1, pt2, eta2, phi2, rng);
    [q1, q2, q3, q4]
}

fn decay_parent(
    mass: f64,
    pt: f64,
    eta: f64,
    phi: f64,
    rng: &mut impl Rng,
) -> (FourMomentum, FourMomentum) {
    let cos_theta: f64 = rng.gen_range(-1.0..1.0);
    let sin_theta = (1.0 - cos_theta * cos_theta).sqrt();
    let phi_star = rng.gen_range(0.0..TAU);
    let e_star = mass / 2.0;
    let rest = FourMomentum {
        e: e_star,
        px: e_star * sin_theta * phi_star.cos(),
        py: e_star * sin_theta * phi_star.sin(),
        pz: e_star * cos_theta,
    };
    let mirror = FourMomentum {
        e: rest.e,
        px: -rest.px,
        py: -rest.py,
        pz: -rest.pz,
    };

    let px = pt * phi.cos();
    let py = pt * phi.sin();
    let pz = pt * eta.sinh();
    let e = (mass * mass + px * px + py * py + pz * pz).sqrt();
    let parent = FourMomentum { e, px, py, pz };
    (boost_into(&rest, &parent, mass), boost_into(&mirror, &parent, mass))
}

/// Boost a rest-frame four-momentum into the lab frame of a parent with the
/// given lab four-momentum and mass.
fn boost_into(p: &FourMomentum, parent: &FourMomentum, mass: f64) -> FourMomentum {
    let gamma = parent.e / mass;
    let bx = parent.px / parent.e;
    let by = parent.py / parent.e;
    let bz = parent.pz / parent.e;
    let bp = bx * p.px + by * p.py + bz * p.pz;
    let coeff = gamma * gamma / (gamma + 1.0) * bp + gamma * p.e;
    FourMomentum {
        e: gamma * (p.e + bp),
        px: p.px + coeff * bx,
        py: p.py + coeff * by,
        pz: p.pz + coeff * bz,
    }
}

/// The 4b channel shift: transverse boost of velocity `shift.boost` along
/// the azimuth `alpha`, then a longitudinal boost of rapidity `shift.eta`.
/// Both preserve all pairwise invariant masses.
fn shift_momentum(p: &FourMomentum, shift: &ShiftParams, alpha: f64) -> FourMomentum {
    let mut out = *p;
    if shift.boost != 0.0 {
        let beta = shift.boost;
        let gamma = 1.0 / (1.0 - beta * beta).sqrt();
        let (ca, sa) = (alpha.cos(), alpha.sin());
        let par = out.px * ca + out.py * sa;
        let perp = -out.px * sa + out.py * ca;
        let boosted_par = gamma * (par + beta * out.e);
        out = FourMomentum {
            e: gamma * (out.e + beta * par),
            px: boosted_par * ca - perp * sa,
            py: boosted_par * sa + perp * ca,
            pz: out.pz,
        };
    }
    if shift.eta != 0.0 {
        let (ch, sh) = (shift.eta.cosh(), shift.eta.sinh());
        out = FourMomentum {
            e: ch * out.e + sh * out.pz,
            px: out.px,
            py: out.py,
            pz: sh * out.e + ch * out.pz,
        };
    }
    out
}

/// Convert to massless jets, applying the acceptance cuts; `None` rejects
/// the whole event.
fn to_jets(quarks: &[FourMomentum; 4]) -> Option<[Jet; 4]> {
    let mut jets = Vec::with_capacity(4);
    for q in quarks {
        let pt = (q.px * q.px + q.py * q.py).sqrt();
        if !(pt.is_finite() && pt >= MIN_JET_PT) {
            return None;
        }
        let eta = (q.pz / pt).asinh();
        if eta.abs() > MAX_ABS_ETA {
            return None;
        }
        jets.push(Jet::new(pt, eta, wrap_phi(q.py.atan2(q.px)), 0.0).ok()?);
    }
    Some([jets[0], jets[1], jets[2], jets[3]])
}

/// Event weight: product of scale factors over the tagged jets, using each
/// tagged jet's true flavor. Jets 0-1 are the first parent's b quarks;
/// jets 2-3 carry the final state's second flavor. A 4b event tags all
/// four jets; a 3b event tags three, dropping one b (for bbbb) or one
/// second-pair jet at random.
fn draw_weight(
    cfg: &GenConfig,
    stream: Stream,
    is_signal: bool,
    jets: &[Jet; 4],
    rng: &mut impl Rng,
) -> f64 {
    let state = if is_signal {
        FinalState::FourB
    } else {
        match stream {
            Stream::Tag3b => cfg.composition_3b.draw(rng),
            _ => cfg.composition_4b.draw(rng),
        }
    };
    let flavor = |j: usize| {
        if j < 2 {
            Flavor::Bottom
        } else {
            state.second_pair_flavor()
        }
    };
    let tagged: Vec<usize> = match stream {
        Stream::Tag3b => {
            if state == FinalState::FourB {
                let dropped = rng.gen_range(0..4);
                (0..4).filter(|&j| j != dropped).collect()
            } else {
                vec![0, 1, 2 + rng.gen_range(0..2usize)]
            }
        }
        _ => vec![0, 1, 2, 3],
    };
    tagged
        .into_iter()
        .map(|j| scale_factor(flavor(j), jets[j].pt / 1000.0))
        .product()
}

//! Event model and four-jet kinematics.
//!
//! An event is exactly four jets plus a Monte-Carlo weight, a channel tag
//! (3b or 4b) and an optional truth tag. Jets are treated as massless when
//! four-vectors are built: `E = pt·cosh(eta)`. The jet mass field is kept in
//! the data model so files round-trip, but it does not enter the kinematics.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub const TAU: f64 = std::f64::consts::TAU;

/// Wrap an azimuthal angle into the canonical interval `[0, 2π)`.
pub fn wrap_phi(phi: f64) -> f64 {
    let mut w = phi % TAU;
    if w < 0.0 {
        w += TAU;
    }
    if w >= TAU {
        w = 0.0;
    }
    w
}

/// Angular difference between two azimuths, wrapped into `[0, π]`.
pub fn phi_distance(a: f64, b: f64) -> f64 {
    let mut d = (a - b).abs() % TAU;
    if d > std::f64::consts::PI {
        d = TAU - d;
    }
    d
}

/// Pseudorapidity `η = −ln tan(θ/2)` of a polar angle `θ ∈ (0, π)`.
pub fn pseudorapidity(theta: f64) -> Result<f64> {
    if !(theta > 0.0 && theta < std::f64::consts::PI) {
        return Err(Error::Domain(format!(
            "polar angle must lie strictly inside (0, pi), got {theta}"
        )));
    }
    Ok(-(theta / 2.0).tan().ln())
}

/// One jet: transverse momentum (GeV), pseudorapidity, azimuth in `[0, 2π)`,
/// and a mass field that is carried but not used in kinematics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet {
    pub pt: f64,
    pub eta: f64,
    pub phi: f64,
    pub mass: f64,
}

impl Jet {
    pub fn new(pt: f64, eta: f64, phi: f64, mass: f64) -> Result<Self> {
        if !(pt.is_finite() && pt > 0.0) {
            return Err(Error::Domain(format!("jet pt must be finite and > 0, got {pt}")));
        }
        if !eta.is_finite() {
            return Err(Error::Domain(format!("jet eta must be finite, got {eta}")));
        }
        if !phi.is_finite() {
            return Err(Error::Domain(format!("jet phi must be finite, got {phi}")));
        }
        if !(mass.is_finite() && mass >= 0.0) {
            return Err(Error::Domain(format!("jet mass must be finite and >= 0, got {mass}")));
        }
        Ok(Jet {
            pt,
            eta,
            phi: wrap_phi(phi),
            mass,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    ThreeTag,
    FourTag,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::ThreeTag => "3b",
            Channel::FourTag => "4b",
        }
    }
}

/// Truth tag for toy events; `None` corresponds to "na" on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Truth {
    Background,
    Signal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub jets: [Jet; 4],
    pub weight: f64,
    pub channel: Channel,
    pub truth: Option<Truth>,
}

impl Event {
    pub fn new(jets: [Jet; 4], weight: f64, channel: Channel, truth: Option<Truth>) -> Result<Self> {
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::Domain(format!(
                "event weight must be finite and >= 0, got {weight}"
            )));
        }
        Ok(Event {
            jets,
            weight,
            channel,
            truth,
        })
    }

    /// Scalar transverse-momentum sum `s_T = Σ pt_i`.
    pub fn scalar_pt(&self) -> f64 {
        self.jets.iter().map(|j| j.pt).sum()
    }
}

/// Element of the symmetry group of Eq-style equivalence: an azimuthal
/// rotation by `delta` composed with optional η- and φ-reflections.
/// Signs are `+1.0` or `-1.0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymmetryTransform {
    pub delta: f64,
    pub eta_sign: f64,
    pub phi_sign: f64,
}

impl SymmetryTransform {
    pub fn new(delta: f64, flip_eta: bool, flip_phi: bool) -> Self {
        SymmetryTransform {
            delta,
            eta_sign: if flip_eta { -1.0 } else { 1.0 },
            phi_sign: if flip_phi { -1.0 } else { 1.0 },
        }
    }

    pub fn identity() -> Self {
        SymmetryTransform::new(0.0, false, false)
    }
}

/// Apply `(pt, η, φ, m) ↦ (pt, ι₁·η, wrap(Δ + ι₂·φ), m)` to every jet.
pub fn apply_symmetry(event: &Event, t: &SymmetryTransform) -> Event {
    let mut out = *event;
    for jet in &mut out.jets {
        jet.eta *= t.eta_sign;
        jet.phi = wrap_phi(t.delta + t.phi_sign * jet.phi);
    }
    out
}

static CLAMPED_RADICANDS: AtomicU64 = AtomicU64::new(0);

/// Number of invariant-mass evaluations whose radicand `E² − |p|²` came out
/// negative (roundoff or pathological input) and was clamped to zero.
pub fn clamped_radicand_count() -> u64 {
    CLAMPED_RADICANDS.load(Ordering::Relaxed)
}

/// Massless-jet four-momentum; `E = pt·cosh(eta)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FourMomentum {
    pub e: f64,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
}

impl FourMomentum {
    pub fn from_jet(jet: &Jet) -> Self {
        FourMomentum {
            e: jet.pt * jet.eta.cosh(),
            px: jet.pt * jet.phi.cos(),
            py: jet.pt * jet.phi.sin(),
            pz: jet.pt * jet.eta.sinh(),
        }
    }

    pub fn add(&self, other: &FourMomentum) -> FourMomentum {
        FourMomentum {
            e: self.e + other.e,
            px: self.px + other.px,
            py: self.py + other.py,
            pz: self.pz + other.pz,
        }
    }

    pub fn scale(&self, k: f64) -> FourMomentum {
        FourMomentum {
            e: k * self.e,
            px: k * self.px,
            py: k * self.py,
            pz: k * self.pz,
        }
    }

    /// `√(E² − |p|²)` with a negative radicand clamped to zero and counted.
    pub fn mass(&self) -> f64 {
        let radicand =
            self.e * self.e - (self.px * self.px + self.py * self.py + self.pz * self.pz);
        if radicand < 0.0 {
            CLAMPED_RADICANDS.fetch_add(1, Ordering::Relaxed);
            0.0
        } else {
            radicand.sqrt()
        }
    }
}

/// Invariant mass of a set of jets under the massless-jet convention.
pub fn invariant_mass(jets: &[Jet]) -> f64 {
    let mut total = FourMomentum::default();
    for jet in jets {
        total = total.add(&FourMomentum::from_jet(jet));
    }
    total.mass()
}

/// A partition of the four jets into two dijets. `first` always contains
/// jet 0 and both index pairs are sorted ascending.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DijetPairing {
    pub first: [usize; 2],
    pub second: [usize; 2],
}

/// The three possible partitions in lexicographic order of `first`.
pub const PARTITIONS: [DijetPairing; 3] = [
    DijetPairing {
        first: [0, 1],
        second: [2, 3],
    },
    DijetPairing {
        first: [0, 2],
        second: [1, 3],
    },
    DijetPairing {
        first: [0, 3],
        second: [1, 2],
    },
];

/// Dijet masses `(m(g¹), m(g²))` of a given partition.
pub fn dijet_masses(event: &Event, pairing: &DijetPairing) -> (f64, f64) {
    let m1 = invariant_mass(&[event.jets[pairing.first[0]], event.jets[pairing.first[1]]]);
    let m2 = invariant_mass(&[event.jets[pairing.second[0]], event.jets[pairing.second[1]]]);
    (m1, m2)
}

/// Pick the partition minimizing `|m(g¹) − m(g²)|`; ties keep the
/// lexicographically smallest `first` pair.
pub fn pair_dijets(event: &Event) -> DijetPairing {
    let mut best = PARTITIONS[0];
    let mut best_gap = f64::INFINITY;
    for pairing in &PARTITIONS {
        let (m1, m2) = dijet_masses(event, pairing);
        let gap = (m1 - m2).abs();
        if gap < best_gap {
            best_gap = gap;
            best = *pairing;
        }
    }
    best
}

/// Region geometry: Higgs mass, control-center scale, signal radius
/// (relative), control radius (GeV).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RegionParams {
    pub m_h: f64,
    pub sigma_c: f64,
    pub kappa_s: f64,
    pub kappa_c: f64,
}

impl Default for RegionParams {
    fn default() -> Self {
        RegionParams {
            m_h: 125.0,
            sigma_c: 1.03,
            kappa_s: 0.16,
            kappa_c: 30.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RegionLabel {
    Signal,
    Control,
    Outside,
}

/// Distance of the paired dijet masses from the signal-region center,
/// `√((1 − m_H/m₁)² + (1 − m_H/m₂)²)`.
pub fn signal_distance(m1: f64, m2: f64, params: &RegionParams) -> f64 {
    let d1 = 1.0 - params.m_h / m1;
    let d2 = 1.0 - params.m_h / m2;
    (d1 * d1 + d2 * d2).sqrt()
}

/// Distance from the control-region center, `√((m₁ − σ_c·m_H)² + (m₂ − σ_c·m_H)²)`.
pub fn control_distance(m1: f64, m2: f64, params: &RegionParams) -> f64 {
    let c = params.sigma_c * params.m_h;
    let d1 = m1 - c;
    let d2 = m2 - c;
    (d1 * d1 + d2 * d2).sqrt()
}

/// Classify an event: signal region if the relative mass distance is within
/// `kappa_s`; otherwise control region if within the `kappa_c` disk (the
/// control region excludes the signal region by construction); otherwise
/// outside.
pub fn classify_region(event: &Event, params: &RegionParams) -> RegionLabel {
    let pairing = pair_dijets(event);
    let (m1, m2) = dijet_masses(event, &pairing);
    if signal_distance(m1, m2, params) <= params.kappa_s {
        RegionLabel::Signal
    } else if control_distance(m1, m2, params) <= params.kappa_c {
        RegionLabel::Control
    } else {
        RegionLabel::Outside
    }
}

/// Four-jet mass after scaling each paired dijet four-vector to the Higgs
/// mass: `m((m_H/m(g¹))·g¹ + (m_H/m(g²))·g²)`.
pub fn m_hh(event: &Event, m_h: f64) -> Result<f64> {
    let pairing = pair_dijets(event);
    m_hh_for_pairing(event, &pairing, m_h)
}

/// Same as [`m_hh`] but for an explicitly chosen partition.
pub fn m_hh_for_pairing(event: &Event, pairing: &DijetPairing, m_h: f64) -> Result<f64> {
    let g1 = FourMomentum::from_jet(&event.jets[pairing.first[0]])
        .add(&FourMomentum::from_jet(&event.jets[pairing.first[1]]));
    let g2 = FourMomentum::from_jet(&event.jets[pairing.second[0]])
        .add(&FourMomentum::from_jet(&event.jets[pairing.second[1]]));
    let (m1, m2) = (g1.mass(), g2.mass());
    if m1 <= 0.0 || m2 <= 0.0 {
        return Err(Error::Domain(format!(
            "zero dijet mass in m_hh (m1={m1}, m2={m2})"
        )));
    }
    Ok(g1.scale(m_h / m1).add(&g2.scale(m_h / m2)).mass())
}

/// Angular distance `ΔR = √(Δη² + Δφ²)` between two jets, with the azimuthal
/// difference wrapped into `[0, π]`.
pub fn delta_r(a: &Jet, b: &Jet) -> f64 {
    let deta = a.eta - b.eta;
    let dphi = phi_distance(a.phi, b.phi);
    (deta * deta + dphi * dphi).sqrt()
}

const JET_PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// Angular distance between the two closest jets of the event.
pub fn delta_r_close(event: &Event) -> f64 {
    closest_pair(event).1
}

/// Angular distance between the two jets other than the two closest.
pub fn delta_r_other(event: &Event) -> f64 {
    let (i, j) = closest_pair(event).0;
    let rest: Vec<usize> = (0..4).filter(|&k| k != i && k != j).collect();
    delta_r(&event.jets[rest[0]], &event.jets[rest[1]])
}

fn closest_pair(event: &Event) -> ((usize, usize), f64) {
    let mut best = JET_PAIRS[0];
    let mut best_r = f64::INFINITY;
    for &(i, j) in &JET_PAIRS {
        let r = delta_r(&event.jets[i], &event.jets[j]);
        if r < best_r {
            best_r = r;
            best = (i, j);
        }
    }
    (best, best_r)
}

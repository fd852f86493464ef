//! Binned Poisson likelihood, signal-strength fit, and validation plot data.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::WeightedEstimate;
use crate::event::Event;
use crate::net::{self, BootstrapAuc, NetConfig, ScoredSample};

/// A one-dimensional weighted histogram with explicit under/overflow.
///
/// Bins are half-open `[edges[j], edges[j+1])`; the last bin also includes
/// its upper edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub content: Vec<f64>,
    pub sumw2: Vec<f64>,
    pub underflow: f64,
    pub overflow: f64,
    pub label: String,
}

impl Histogram {
    pub fn new(edges: Vec<f64>, label: &str) -> Result<Self> {
        validate_edges(&edges)?;
        let bins = edges.len() - 1;
        Ok(Self {
            edges,
            content: vec![0.0; bins],
            sumw2: vec![0.0; bins],
            underflow: 0.0,
            overflow: 0.0,
            label: label.to_string(),
        })
    }

    pub fn n_bins(&self) -> usize {
        self.content.len()
    }

    /// In-range content, excluding under/overflow.
    pub fn total(&self) -> f64 {
        self.content.iter().sum()
    }

    pub fn fill(&mut self, value: f64, weight: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "cannot bin non-finite value {value}"
            )));
        }
        let last = *self.edges.last().expect("validated edges");
        if value < self.edges[0] {
            self.underflow += weight;
        } else if value > last {
            self.overflow += weight;
        } else {
            let bin = if value == last {
                self.n_bins() - 1
            } else {
                self.edges.partition_point(|&e| e <= value) - 1
            };
            self.content[bin] += weight;
            self.sumw2[bin] += weight * weight;
        }
        Ok(())
    }

    /// Re-check the structural invariants, e.g. after deserializing.
    pub fn validate(&self) -> Result<()> {
        validate_edges(&self.edges)?;
        if self.content.len() != self.edges.len() - 1 || self.sumw2.len() != self.content.len() {
            return Err(Error::Dimension(format!(
                "histogram `{}` has inconsistent lengths",
                self.label
            )));
        }
        if self.content.iter().any(|&c| !(c.is_finite() && c >= 0.0)) {
            return Err(Error::Domain(format!(
                "histogram `{}` has negative or non-finite content",
                self.label
            )));
        }
        Ok(())
    }
}

fn validate_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 {
        return Err(Error::Dimension("need at least two bin edges".into()));
    }
    if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain(
            "bin edges must be finite and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// `J` uniform bins spanning `[lo, hi]`.
pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(Error::Dimension("need at least one bin".into()));
    }
    let edges: Vec<f64> = (0..=bins)
        .map(|j| lo + (hi - lo) * j as f64 / bins as f64)
        .collect();
    validate_edges(&edges)?;
    Ok(edges)
}

/// Histogram `score(item)` with the given per-item weights.
pub fn bin_events<T>(
    items: &[T],
    weights: &[f64],
    score: impl Fn(&T) -> f64,
    edges: &[f64],
    label: &str,
) -> Result<Histogram> {
    if items.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} items but {} weights",
            items.len(),
            weights.len()
        )));
    }
    let mut hist = Histogram::new(edges.to_vec(), label)?;
    for (item, &w) in items.iter().zip(weights) {
        hist.fill(score(item), w)?;
    }
    Ok(hist)
}

fn check_matching_edges(a: &Histogram, b: &Histogram) -> Result<()> {
    if a.edges != b.edges {
        return Err(Error::Dimension(format!(
            "histograms `{}` and `{}` have different binning",
            a.label, b.label
        )));
    }
    Ok(())
}

/// Poisson log-likelihood of `data` under expected content `B_j + mu*S_j`:
/// `Σ_j D_j ln(B_j + mu S_j) - (B_j + mu S_j) - ln Γ(D_j + 1)`.
pub fn binned_loglik(
    mu: f64,
    background: &Histogram,
    signal: &Histogram,
    data: &Histogram,
) -> Result<f64> {
    check_matching_edges(background, signal)?;
    check_matching_edges(background, data)?;
    if !mu.is_finite() {
        return Err(Error::Domain(format!("signal strength {mu} must be finite")));
    }
    let mut loglik = 0.0;
    for j in 0..background.n_bins() {
        let expected = background.content[j] + mu * signal.content[j];
        let observed = data.content[j];
        if observed < 0.0 {
            return Err(Error::Domain(format!(
                "negative data content {observed} in bin {j}"
            )));
        }
        if expected < 0.0 || (expected == 0.0 && observed > 0.0) {
            return Err(Error::Domain(format!(
                "expected content {expected} in bin {j} with {observed} observed"
            )));
        }
        if observed > 0.0 {
            loglik += observed * expected.ln();
        }
        loglik -= expected + libm::lgamma(observed + 1.0);
    }
    if !loglik.is_finite() {
        return Err(Error::Numerical(format!(
            "log-likelihood is not finite at mu = {mu}"
        )));
    }
    Ok(loglik)
}

/// Result of the one-parameter signal-strength fit and likelihood-ratio
/// test against the background-only hypothesis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalFit {
    pub mu_hat: f64,
    pub q0: f64,
    pub z: f64,
    #[serde(rename = "logl0")]
    pub logl_at_0: f64,
    #[serde(rename = "logl_hat")]
    pub logl_at_hat: f64,
}

/// Maximize the binned log-likelihood over `mu >= 0`.
///
/// The objective is concave in `mu`, so the gradient is decreasing: either
/// the boundary `mu = 0` is optimal or bisection on the gradient finds the
/// interior stationary point.
pub fn fit_mu(background: &Histogram, signal: &Histogram, data: &Histogram) -> Result<SignalFit> {
    check_matching_edges(background, signal)?;
    check_matching_edges(background, data)?;
    if signal.total() <= 0.0 {
        return Err(Error::Domain(
            "signal template has no content, nothing to fit".into(),
        ));
    }
    let logl_at_0 = binned_loglik(0.0, background, signal, data)?;
    let gradient = |mu: f64| -> Result<f64> {
        let mut g = 0.0;
        for j in 0..background.n_bins() {
            let s = signal.content[j];
            if s == 0.0 {
                continue;
            }
            let expected = background.content[j] + mu * s;
            let observed = data.content[j];
            if expected <= 0.0 {
                if observed > 0.0 {
                    return Err(Error::Domain(format!(
                        "expected content {expected} in occupied bin {j}"
                    )));
                }
                g -= s;
                continue;
            }
            g += s * (observed / expected - 1.0);
        }
        Ok(g)
    };

    let fit = |mu_hat: f64| -> Result<SignalFit> {
        let logl_at_hat = if mu_hat == 0.0 {
            logl_at_0
        } else {
            binned_loglik(mu_hat, background, signal, data)?
        };
        let q0 = (2.0 * (logl_at_hat - logl_at_0)).max(0.0);
        Ok(SignalFit {
            mu_hat,
            q0,
            z: q0.sqrt(),
            logl_at_0,
            logl_at_hat,
        })
    };

    if gradient(0.0)? <= 0.0 {
        return fit(0.0);
    }
    let mut hi = 1.0;
    let mut expansions = 0;
    while gradient(hi)? > 0.0 {
        hi *= 2.0;
        expansions += 1;
        if expansions > 200 {
            return Err(Error::Numerical(
                "signal-strength gradient never changes sign".into(),
            ));
        }
    }
    let mut lo = if hi == 1.0 { 0.0 } else { hi / 2.0 };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let g = gradient(mid)?;
        if g.abs() <= 1e-10 {
            return fit(mid);
        }
        if g > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi.max(1.0) {
            break;
        }
    }
    fit(0.5 * (lo + hi))
}

/// One ratio-plot bin: `estimate/truth` with the statistical bar
/// `sqrt(estimate)/truth` and the reference band `sqrt(1/truth)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioPlotBin {
    pub lo: f64,
    pub hi: f64,
    pub ratio: Option<f64>,
    pub bar: Option<f64>,
    pub band: Option<f64>,
    pub empty_truth: bool,
}

pub fn ratio_plot_data(estimate: &Histogram, truth: &Histogram) -> Result<Vec<RatioPlotBin>> {
    check_matching_edges(estimate, truth)?;
    Ok((0..truth.n_bins())
        .map(|j| {
            let t = truth.content[j];
            let e = estimate.content[j];
            if t > 0.0 {
                RatioPlotBin {
                    lo: truth.edges[j],
                    hi: truth.edges[j + 1],
                    ratio: Some(e / t),
                    bar: Some(e.max(0.0).sqrt() / t),
                    band: Some((1.0 / t).sqrt()),
                    empty_truth: false,
                }
            } else {
                RatioPlotBin {
                    lo: truth.edges[j],
                    hi: truth.edges[j + 1],
                    ratio: None,
                    bar: None,
                    band: None,
                    empty_truth: true,
                }
            }
        })
        .collect())
}

/// Draw toy data `D_j ~ Poisson(B_j + mu S_j)` bin by bin.
pub fn poisson_toy_data(
    background: &Histogram,
    signal: &Histogram,
    mu: f64,
    seed: u64,
) -> Result<Histogram> {
    check_matching_edges(background, signal)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut data = Histogram::new(background.edges.clone(), "toy data")?;
    for j in 0..background.n_bins() {
        let expected = background.content[j] + mu * signal.content[j];
        if !(expected.is_finite() && expected >= 0.0) {
            return Err(Error::Domain(format!(
                "expected content {expected} in bin {j} must be nonnegative"
            )));
        }
        let count = if expected == 0.0 {
            0.0
        } else {
            let poisson = Poisson::new(expected)
                .map_err(|e| Error::Numerical(format!("poisson({expected}): {e}")))?;
            poisson.sample(&mut rng)
        };
        data.content[j] = count;
        data.sumw2[j] = count;
    }
    Ok(data)
}

/// Closure test: train a fresh classifier to tell the weighted estimate
/// apart from a held-out truth sample and report the test-split AUC with a
/// bootstrap confidence interval. An accurate estimate is unlearnable and
/// scores near 0.5.
pub fn closure_auc(
    estimate: &WeightedEstimate,
    atoms: &[Event],
    truth4b: &[Event],
    netcfg: &NetConfig,
    seed: u64,
) -> Result<BootstrapAuc> {
    if truth4b.is_empty() {
        return Err(Error::Dimension("closure test needs truth events".into()));
    }
    let mut class0 = Vec::with_capacity(estimate.len());
    for (&atom, &v) in estimate.atoms().iter().zip(estimate.weights()) {
        let event = atoms.get(atom as usize).ok_or_else(|| {
            Error::Dimension(format!(
                "estimate atom {atom} out of range for {} events",
                atoms.len()
            ))
        })?;
        let mut event = event.clone();
        event.weight *= v;
        class0.push(event);
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let split = |events: &mut Vec<Event>, rng: &mut ChaCha12Rng| -> (Vec<Event>, Vec<Event>) {
        for i in (1..events.len()).rev() {
            events.swap(i, rand::Rng::gen_range(rng, 0..=i));
        }
        let n_test = (events.len() * 3) / 10;
        let test = events.split_off(events.len() - n_test);
        (std::mem::take(events), test)
    };
    let (train0, test0) = split(&mut class0, &mut rng);
    let mut class1 = truth4b.to_vec();
    let (train1, test1) = split(&mut class1, &mut rng);
    if train0.is_empty() || train1.is_empty() || test0.is_empty() || test1.is_empty() {
        return Err(Error::Dimension(
            "closure test needs enough events for a 70/30 split".into(),
        ));
    }

    let model = net::build_model(netcfg, netcfg.seed)?;
    let trained = net::train(&model, &train0, &train1)?;
    let scored = net::score_sample(&trained, &test0, &test1);
    net::bootstrap_auc(&scored, 1000, seed.wrapping_add(1))
}

/// Weighted AUC of precollected scores; re-exported here so validation
/// reports and closure tests share one implementation.
pub fn auc(scored: &ScoredSample) -> Result<f64> {
    net::auc(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{Channel, Jet, TAU};
    use rand::{Rng, RngCore, SeedableRng};

    fn single_bin(content: f64, label: &str) -> Histogram {
        let mut h = Histogram::new(vec![0.0, 1.0], label).unwrap();
        h.content[0] = content;
        h
    }

    #[test]
    fn empty_input_gives_a_zero_histogram() {
        let hist = bin_events::<f64>(&[], &[], |&x| x, &[0.0, 0.5, 1.0], "empty").unwrap();
        assert_eq!(hist.content, vec![0.0, 0.0]);
        assert_eq!(hist.sumw2, vec![0.0, 0.0]);
        assert_eq!(hist.underflow + hist.overflow, 0.0);
    }

    #[test]
    fn bin_lookup_handles_interior_edges_and_flows() {
        let edges = [0.0, 0.25, 0.5, 0.75, 1.0];
        let values = [0.1, 0.25, 0.5, 1.0, -0.3, 1.2, 0.0];
        let weights = vec![1.0; values.len()];
        let hist = bin_events(&values, &weights, |&x| x, &edges, "probe").unwrap();
        assert_eq!(hist.content, vec![2.0, 1.0, 1.0, 1.0]);
        assert_eq!(hist.underflow, 1.0);
        assert_eq!(hist.overflow, 1.0);
    }

    #[test]
    fn weights_accumulate_content_and_sumw2() {
        let values = [0.3, 0.4];
        let hist = bin_events(&values, &[2.0, 3.0], |&x| x, &[0.0, 1.0], "w").unwrap();
        assert_eq!(hist.content, vec![5.0]);
        assert_eq!(hist.sumw2, vec![13.0]);
    }

    #[test]
    fn binning_conserves_total_weight() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2);
        let values: Vec<f64> = (0..500).map(|_| rng.gen_range(-0.5..1.5)).collect();
        let weights: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..3.0)).collect();
        let hist = bin_events(&values, &weights, |&x| x, &[0.0, 0.2, 0.9, 1.0], "mass").unwrap();
        let binned = hist.total() + hist.underflow + hist.overflow;
        let direct: f64 = weights.iter().sum();
        assert!((binned - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn bad_histogram_inputs_are_rejected() {
        assert!(Histogram::new(vec![0.0], "short").is_err());
        assert!(Histogram::new(vec![0.0, 0.0], "flat").is_err());
        assert!(Histogram::new(vec![1.0, 0.0], "reversed").is_err());
        assert!(bin_events(&[0.1], &[1.0, 2.0], |&x: &f64| x, &[0.0, 1.0], "n").is_err());
        assert!(bin_events(&[f64::NAN], &[1.0], |&x: &f64| x, &[0.0, 1.0], "nan").is_err());

        let mut hist = single_bin(1.0, "neg");
        hist.content[0] = -1.0;
        assert!(hist.validate().is_err());
    }

    #[test]
    fn single_bin_loglik_matches_the_poisson_log_pmf() {
        let background = single_bin(10.0, "b");
        let signal = single_bin(0.0, "s");
        let data = single_bin(10.0, "d");
        let value = binned_loglik(0.0, &background, &signal, &data).unwrap();
        let factorial_10: f64 = (1..=10).product::<u64>() as f64;
        let expect = 10.0 * 10.0f64.ln() - 10.0 - factorial_10.ln();
        assert!((value - expect).abs() < 1e-12, "{value} vs {expect}");

        for mu in [0.3, 1.7, 40.0] {
            assert_eq!(binned_loglik(mu, &background, &signal, &data).unwrap(), value);
        }
    }

    #[test]
    fn zero_signal_strength_reduces_to_pure_background() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(4);
        let edges = uniform_edges(0.0, 1.0, 5).unwrap();
        let mut background = Histogram::new(edges.clone(), "b").unwrap();
        let mut signal = Histogram::new(edges.clone(), "s").unwrap();
        let mut data = Histogram::new(edges.clone(), "d").unwrap();
        let zero_signal = Histogram::new(edges, "s0").unwrap();
        for j in 0..5 {
            background.content[j] = rng.gen_range(5.0..50.0);
            signal.content[j] = rng.gen_range(0.0..5.0);
            data.content[j] = rng.gen_range(0..60u32) as f64;
        }
        assert_eq!(
            binned_loglik(0.0, &background, &signal, &data).unwrap(),
            binned_loglik(0.0, &background, &zero_signal, &data).unwrap()
        );
    }

    #[test]
    fn real_valued_data_maximizes_at_the_poisson_mean() {
        let background = single_bin(7.0, "b");
        let signal = single_bin(2.0, "s");
        let data = single_bin(7.0 + 1.3 * 2.0, "d");
        let at_opt = binned_loglik(1.3, &background, &signal, &data).unwrap();
        for delta in [-0.5, -0.01, 0.01, 0.5] {
            let off = binned_loglik(1.3 + delta, &background, &signal, &data).unwrap();
            assert!(off < at_opt, "mu = {} beat the mean", 1.3 + delta);
        }
    }

    #[test]
    fn loglik_is_concave_in_mu() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(6);
        let edges = uniform_edges(0.0, 1.0, 8).unwrap();
        for _ in 0..20 {
            let mut background = Histogram::new(edges.clone(), "b").unwrap();
            let mut signal = Histogram::new(edges.clone(), "s").unwrap();
            let mut data = Histogram::new(edges.clone(), "d").unwrap();
            for j in 0..8 {
                background.content[j] = rng.gen_range(1.0..40.0);
                signal.content[j] = rng.gen_range(0.0..6.0);
                data.content[j] = rng.gen_range(0..50u32) as f64;
            }
            let ll = |mu: f64| binned_loglik(mu, &background, &signal, &data).unwrap();
            for step in 0..30 {
                let mu = 0.05 * step as f64;
                let second = ll(mu + 0.1) - 2.0 * ll(mu + 0.05) + ll(mu);
                assert!(second < 1e-9, "second difference {second} at mu {mu}");
            }
        }
    }

    #[test]
    fn occupied_bins_with_no_expectation_are_rejected() {
        let background = single_bin(0.0, "b");
        let signal = single_bin(0.0, "s");
        let data = single_bin(3.0, "d");
        assert!(binned_loglik(0.0, &background, &signal, &data).is_err());

        let other = single_bin(5.0, "different");
        let coarse = Histogram::new(vec![0.0, 0.5, 1.0], "coarse").unwrap();
        assert!(binned_loglik(0.0, &coarse, &signal, &other).is_err());
    }

    #[test]
    fn single_bin_fit_matches_the_closed_form() {
        let background = single_bin(10.0, "b");
        let signal = single_bin(5.0, "s");
        let excess = single_bin(20.0, "d");
        let fit = fit_mu(&background, &signal, &excess).unwrap();
        assert!((fit.mu_hat - 2.0).abs() < 1e-8, "mu_hat {}", fit.mu_hat);
        assert!(fit.q0 > 0.0);
        assert!((fit.z - fit.q0.sqrt()).abs() < 1e-15);
        assert!((fit.q0 - 2.0 * (fit.logl_at_hat - fit.logl_at_0)).abs() < 1e-12);

        let deficit = single_bin(8.0, "d");
        let fit = fit_mu(&background, &signal, &deficit).unwrap();
        assert_eq!(fit.mu_hat, 0.0);
        assert_eq!(fit.q0, 0.0);
        assert_eq!(fit.z, 0.0);
    }

    #[test]
    fn multi_bin_fits_agree_with_a_grid_scan() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(8);
        let edges = uniform_edges(0.0, 1.0, 6).unwrap();
        for _ in 0..10 {
            let mut background = Histogram::new(edges.clone(), "b").unwrap();
            let mut signal = Histogram::new(edges.clone(), "s").unwrap();
            let mut data = Histogram::new(edges.clone(), "d").unwrap();
            for j in 0..6 {
                background.content[j] = rng.gen_range(5.0..40.0);
                signal.content[j] = rng.gen_range(0.0..8.0);
                data.content[j] = rng.gen_range(0..60u32) as f64;
            }
            if signal.total() == 0.0 {
                continue;
            }
            let fit = fit_mu(&background, &signal, &data).unwrap();
            let ll = |mu: f64| binned_loglik(mu, &background, &signal, &data).unwrap();
            for step in 0..400 {
                let mu = 0.02 * step as f64;
                assert!(
                    ll(mu) <= fit.logl_at_hat + 1e-9,
                    "grid point mu {mu} beats the fit"
                );
            }
            assert!(fit.q0 >= 0.0);
        }
    }

    #[test]
    fn background_only_toys_pile_up_at_the_boundary() {
        let mut background = Histogram::new(uniform_edges(0.0, 1.0, 4).unwrap(), "b").unwrap();
        let mut signal = Histogram::new(uniform_edges(0.0, 1.0, 4).unwrap(), "s").unwrap();
        for j in 0..4 {
            background.content[j] = 40.0 + 10.0 * j as f64;
            signal.content[j] = 2.0 + j as f64;
        }
        let mut at_zero = 0;
        let toys = 200;
        for toy in 0..toys {
            let data = poisson_toy_data(&background, &signal, 0.0, 900 + toy).unwrap();
            let fit = fit_mu(&background, &signal, &data).unwrap();
            if fit.q0 == 0.0 {
                at_zero += 1;
            }
        }
        let fraction = at_zero as f64 / toys as f64;
        assert!(
            (0.35..=0.65).contains(&fraction),
            "boundary fraction {fraction}"
        );
    }

    #[test]
    fn empty_signal_templates_are_rejected() {
        let background = single_bin(10.0, "b");
        let signal = single_bin(0.0, "s");
        let data = single_bin(12.0, "d");
        assert!(fit_mu(&background, &signal, &data).is_err());
    }

    #[test]
    fn ratio_plot_reports_bars_bands_and_flags() {
        let mut truth = Histogram::new(vec![0.0, 0.5, 1.0, 1.5], "truth").unwrap();
        let mut estimate = Histogram::new(vec![0.0, 0.5, 1.0, 1.5], "estimate").unwrap();
        truth.content = vec![100.0, 100.0, 0.0];
        estimate.content = vec![100.0, 90.0, 4.0];
        let rows = ratio_plot_data(&estimate, &truth).unwrap();

        assert_eq!(rows[0].ratio, Some(1.0));
        assert!((rows[1].ratio.unwrap() - 0.9).abs() < 1e-15);
        assert!((rows[1].band.unwrap() - 0.1).abs() < 1e-15);
        assert!((rows[1].bar.unwrap() - 90.0f64.sqrt() / 100.0).abs() < 1e-15);
        assert!(rows[2].empty_truth);
        assert_eq!(rows[2].ratio, None);

        let mismatched = Histogram::new(vec![0.0, 1.5], "coarse").unwrap();
        assert!(ratio_plot_data(&mismatched, &truth).is_err());
    }

    #[test]
    fn histogram_json_round_trips() {
        let values = [0.1, 0.7, 0.7, 2.0];
        let weights = [1.0, 2.0, 0.5, 1.0];
        let hist = bin_events(&values, &weights, |&x| x, &[0.0, 0.5, 1.0], "svb").unwrap();
        let text = serde_json::to_string(&hist).unwrap();
        let back: Histogram = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back, hist);
        assert!(text.contains("\"overflow\":1.0"));
    }

    #[test]
    fn poisson_toys_are_deterministic_and_nonnegative() {
        let mut background = Histogram::new(uniform_edges(0.0, 1.0, 3).unwrap(), "b").unwrap();
        background.content = vec![0.0, 3.5, 800.0];
        let signal = Histogram::new(uniform_edges(0.0, 1.0, 3).unwrap(), "s").unwrap();
        let a = poisson_toy_data(&background, &signal, 0.0, 5).unwrap();
        let b = poisson_toy_data(&background, &signal, 0.0, 5).unwrap();
        let c = poisson_toy_data(&background, &signal, 0.0, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.content[0], 0.0);
        assert!(a.content.iter().all(|&d| d >= 0.0 && d.fract() == 0.0));
    }

    fn shifted_event(rng: &mut impl Rng, shift: f64) -> Event {
        let lead = loop {
            let draw: f64 = rand_distr::StandardNormal.sample(rng);
            let value = shift + 30.0 * draw;
            if value > -199.0 {
                break value;
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
        Event::new(jets, 1.0, Channel::FourTag, None).unwrap()
    }

    fn closure_config() -> NetConfig {
        NetConfig {
            channel_width: 4,
            epochs: 6,
            seed: 3,
            ..NetConfig::default()
        }
    }

    #[test]
    fn perfect_estimates_are_unlearnable() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(21);
        let atoms: Vec<Event> = (0..500).map(|_| shifted_event(&mut rng, 0.0)).collect();
        let truth: Vec<Event> = (0..700).map(|_| shifted_event(&mut rng, 0.0)).collect();
        let estimate = WeightedEstimate::from_weights(vec![1.0; atoms.len()]).unwrap();
        let result = closure_auc(&estimate, &atoms, &truth, &closure_config(), 11).unwrap();
        assert!(
            (0.47..=0.53).contains(&result.point),
            "closure AUC {}",
            result.point
        );
        assert!(result.lo <= result.point && result.point <= result.hi);
    }

    #[test]
    fn shifted_samples_are_flagged_by_the_closure_test() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(23);
        let atoms: Vec<Event> = (0..500).map(|_| shifted_event(&mut rng, 0.0)).collect();
        let truth: Vec<Event> = (0..700).map(|_| shifted_event(&mut rng, 60.0)).collect();
        let estimate = WeightedEstimate::from_weights(vec![1.0; atoms.len()]).unwrap();
        let result = closure_auc(&estimate, &atoms, &truth, &closure_config(), 13).unwrap();
        assert!(result.point > 0.55, "closure AUC {}", result.point);
    }

    #[test]
    fn closure_test_rejects_degenerate_inputs() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(25);
        let atoms: Vec<Event> = (0..10).map(|_| shifted_event(&mut rng, 0.0)).collect();
        let estimate = WeightedEstimate::from_weights(vec![1.0; atoms.len()]).unwrap();
        assert!(closure_auc(&estimate, &atoms, &[], &closure_config(), 1).is_err());

        let out_of_range = WeightedEstimate::new(vec![99], vec![1.0]).unwrap();
        let truth = atoms.clone();
        assert!(closure_auc(&out_of_range, &atoms, &truth, &closure_config(), 1).is_err());
    }
}

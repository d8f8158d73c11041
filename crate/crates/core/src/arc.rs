//! Recursive universe belief propagation and the narrative arc.
//!
//! The belief over universes starts uniform and absorbs one utterance at a
//! time: the classifier output `z` for the new utterance multiplies the prior
//! pointwise and the product is renormalized,
//!
//! ```text
//! p_t(u) = p_{t-1}(u) z(u | x_t) / sum_u' p_{t-1}(u') z(u' | x_t)
//! ```
//!
//! Entropy is measured in nats. The change `delta = H(p_{t-1}) - H(p_t)` is
//! positive when an utterance concentrates the belief (reveals) and negative
//! when it spreads it (conceals). The score `exp(alpha * delta)` is clipped at
//! a configurable maximum so that rejection sampling has a finite envelope.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{check_version, Dialogue, Utterance};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::universe::{UniverseDistribution, UniverseModel, UniverseSet, PROB_FLOOR};

pub const ARC_VERSION: u32 = 1;

/// Upper bound on the default max score.
pub const MAX_SCORE_CAP: f64 = 10.0;

pub const DEFAULT_MAX_SAMPLES: usize = 100;

/// Posterior over universes after `step` utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState {
    distribution: UniverseDistribution,
    step: usize,
}

impl BeliefState {
    /// Uniform belief over `n` universes at step 0.
    pub fn uniform(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::TooFewUniverses(n));
        }
        Ok(BeliefState {
            distribution: UniverseDistribution::uniform(n),
            step: 0,
        })
    }

    /// An arbitrary belief, e.g. to resume from a stored arc.
    pub fn from_distribution(distribution: UniverseDistribution, step: usize) -> Self {
        BeliefState { distribution, step }
    }

    pub fn distribution(&self) -> &UniverseDistribution {
        &self.distribution
    }

    pub fn probs(&self) -> &[f64] {
        self.distribution.probs()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.distribution)
    }
}

pub fn init_belief(universe_set: &UniverseSet) -> Result<BeliefState> {
    BeliefState::uniform(universe_set.len())
}

/// One step of the recursive update, followed by the probability floor.
pub fn update_belief(prior: &BeliefState, z: &UniverseDistribution) -> Result<BeliefState> {
    let p = prior.probs();
    if z.len() != p.len() {
        return Err(Error::InvalidDistribution(format!(
            "classifier output has {} entries, belief has {}",
            z.len(),
            p.len()
        )));
    }
    let joint: Vec<f64> = p.iter().zip(z.probs()).map(|(a, b)| a * b).collect();
    let distribution = UniverseDistribution::from_weights(joint)?.floored(PROB_FLOOR);
    Ok(BeliefState {
        distribution,
        step: prior.step + 1,
    })
}

/// Shannon entropy in nats, clamped to its mathematical range `[0, ln n]`.
pub fn entropy(d: &UniverseDistribution) -> f64 {
    let h: f64 = -d
        .probs()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>();
    h.clamp(0.0, (d.len() as f64).ln())
}

/// `H(prior) - H(posterior)`; the posterior must be exactly one step later.
pub fn entropy_change(prior: &BeliefState, posterior: &BeliefState) -> Result<f64> {
    if posterior.step != prior.step + 1 {
        return Err(Error::StepMismatch {
            prior: prior.step,
            posterior: posterior.step,
        });
    }
    Ok(prior.entropy() - posterior.entropy())
}

/// Modulation strength, score envelope and rejection budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapingConfig {
    pub alpha: f64,
    pub max_score: f64,
    pub max_samples: usize,
}

impl ShapingConfig {
    pub fn new(alpha: f64, max_score: f64, max_samples: usize) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "alpha must be finite, got {alpha}"
            )));
        }
        if !(max_score >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "max score must be >= 1, got {max_score}"
            )));
        }
        if max_samples == 0 {
            return Err(Error::InvalidArgument("max samples must be >= 1".into()));
        }
        Ok(ShapingConfig {
            alpha,
            max_score,
            max_samples,
        })
    }

    /// Default envelope for `n_universes`: the largest attainable score
    /// `exp(|alpha| ln n)`, capped at [`MAX_SCORE_CAP`]. Exactly 1 when alpha is 0.
    pub fn with_defaults(alpha: f64, n_universes: usize) -> Result<Self> {
        ShapingConfig::new(
            alpha,
            default_max_score(alpha, n_universes),
            DEFAULT_MAX_SAMPLES,
        )
    }
}

pub fn default_max_score(alpha: f64, n_universes: usize) -> f64 {
    if alpha == 0.0 {
        return 1.0;
    }
    (alpha.abs() * (n_universes as f64).ln())
        .exp()
        .clamp(1.0, MAX_SCORE_CAP)
}

/// `min(exp(alpha * delta), max_score)`.
pub fn score(delta: f64, config: &ShapingConfig) -> f64 {
    (config.alpha * delta).exp().min(config.max_score)
}

/// One step of a narrative arc.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArcPoint {
    pub step: usize,
    pub probs: UniverseDistribution,
    pub entropy: f64,
    /// 0 at step 0.
    pub delta: f64,
    pub utterance_text: Option<String>,
}

/// The sequence of beliefs a dialogue induces, starting from the uniform prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NarrativeArc {
    labels: UniverseSet,
    points: Vec<ArcPoint>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArcFile {
    version: u32,
    labels: UniverseSet,
    points: Vec<ArcPoint>,
}

impl NarrativeArc {
    pub fn new(universe_set: UniverseSet) -> Self {
        let prior = UniverseDistribution::uniform(universe_set.len());
        NarrativeArc {
            points: vec![ArcPoint {
                step: 0,
                entropy: entropy(&prior),
                probs: prior,
                delta: 0.0,
                utterance_text: None,
            }],
            labels: universe_set,
        }
    }

    pub fn universe_set(&self) -> &UniverseSet {
        &self.labels
    }

    pub fn points(&self) -> &[ArcPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> &ArcPoint {
        self.points.last().expect("arc always holds the prior")
    }

    /// The belief at the end of the arc.
    pub fn belief(&self) -> BeliefState {
        let last = self.last();
        BeliefState::from_distribution(last.probs.clone(), last.step)
    }

    /// Append the belief reached after absorbing `utterance`.
    pub fn push(&mut self, utterance: &Utterance, posterior: &BeliefState) -> Result<&ArcPoint> {
        let prev = self.last();
        if posterior.step != prev.step + 1 {
            return Err(Error::StepMismatch {
                prior: prev.step,
                posterior: posterior.step,
            });
        }
        let h = posterior.entropy();
        let point = ArcPoint {
            step: posterior.step,
            probs: posterior.distribution.clone(),
            entropy: h,
            delta: prev.entropy - h,
            utterance_text: Some(utterance.text().to_owned()),
        };
        self.points.push(point);
        Ok(self.last())
    }

    /// Classify, update and record one utterance.
    pub fn absorb(
        &mut self,
        model: &dyn UniverseModel,
        utterance: &Utterance,
    ) -> Result<&ArcPoint> {
        let posterior = update_belief(&self.belief(), &model.classify(utterance))?;
        self.push(utterance, &posterior)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ArcFile {
            version: ARC_VERSION,
            labels: self.labels.clone(),
            points: self.points.clone(),
        })
        .expect("arc serialization is infallible")
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::from_str(&self.to_json()).expect("arc json is valid")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        check_version(&v, "arc", ARC_VERSION)?;
        let f: ArcFile = serde_json::from_value(v)?;
        if f.points.is_empty() {
            return Err(Error::Parse("arc has no points".into()));
        }
        Ok(NarrativeArc {
            labels: f.labels,
            points: f.points,
        })
    }

    /// One row per step: `step,<one column per universe>,entropy,delta`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for l in self.labels.labels() {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push_str(",entropy,delta\n");
        for p in &self.points {
            write!(out, "{}", p.step).unwrap();
            for x in p.probs.probs() {
                write!(out, ",{x}").unwrap();
            }
            writeln!(out, ",{},{}", p.entropy, p.delta).unwrap();
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Run every line of `dialogue` through the model and record the arc.
pub fn compute_arc(dialogue: &Dialogue, model: &dyn UniverseModel) -> Result<NarrativeArc> {
    compute_arc_of(dialogue.utterances(), model)
}

pub fn compute_arc_of(utterances: &[Utterance], model: &dyn UniverseModel) -> Result<NarrativeArc> {
    let mut arc = NarrativeArc::new(model.universe_set().clone());
    for u in utterances {
        arc.absorb(model, u)?;
    }
    Ok(arc)
}

/// Arcs for many dialogues against one shared model.
pub fn compute_arcs(
    exec: Exec,
    dialogues: &[Dialogue],
    model: &dyn UniverseModel,
) -> Result<Vec<NarrativeArc>> {
    par::try_map(exec, dialogues, |d| compute_arc(d, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::universe::TableModel;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> UniverseDistribution {
        UniverseDistribution::new(p.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn init_belief_examples() {
        let b = BeliefState::uniform(5).unwrap();
        assert!(b.probs().iter().all(|&p| p == 0.2));
        assert_eq!(b.step(), 0);
        assert_eq!(BeliefState::uniform(2).unwrap().probs(), &[0.5, 0.5]);
        assert!(matches!(
            BeliefState::uniform(1),
            Err(Error::TooFewUniverses(1))
        ));
    }

    #[test]
    fn update_examples() {
        let u = BeliefState::uniform(2).unwrap();
        let z = dist(&[0.8, 0.2]);
        let p1 = update_belief(&u, &z).unwrap();
        assert!(close(p1.probs(), &[0.8, 0.2], 1e-15));
        assert_eq!(p1.step(), 1);
        let p2 = update_belief(&p1, &z).unwrap();
        assert!(close(p2.probs(), &[16.0 / 17.0, 1.0 / 17.0], 1e-15));
        assert!((p2.probs()[0] - 0.9412).abs() < 1e-4);
        let p3 = update_belief(&p2, &UniverseDistribution::uniform(2)).unwrap();
        assert!(close(p3.probs(), p2.probs(), 1e-15));
        assert!(update_belief(&u, &UniverseDistribution::uniform(3)).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&UniverseDistribution::uniform(5)) - 5f64.ln()).abs() < 1e-15);
        assert!((entropy(&UniverseDistribution::uniform(5)) - 1.6094).abs() < 1e-4);
        assert_eq!(entropy(&dist(&[1.0, 0.0, 0.0])), 0.0);
        let h = entropy(&dist(&[0.8, 0.2]));
        assert!((h - 0.500_402_423_538_188_3).abs() < 1e-15);
    }

    #[test]
    fn entropy_change_examples() {
        let u = BeliefState::uniform(2).unwrap();
        let p = update_belief(&u, &dist(&[0.8, 0.2])).unwrap();
        let d = entropy_change(&u, &p).unwrap();
        assert!((d - (2f64.ln() - 0.500_402_423_538_188_3)).abs() < 1e-15);
        assert!((d - 0.1927).abs() < 1e-4);

        let same = BeliefState::from_distribution(u.distribution().clone(), 1);
        assert_eq!(entropy_change(&u, &same).unwrap(), 0.0);

        let point = BeliefState::from_distribution(dist(&[1.0, 0.0]), 0);
        let spread = BeliefState::from_distribution(UniverseDistribution::uniform(2), 1);
        assert!((entropy_change(&point, &spread).unwrap() + 2f64.ln()).abs() < 1e-15);

        assert!(matches!(
            entropy_change(&u, &u),
            Err(Error::StepMismatch { .. })
        ));
    }

    #[test]
    fn score_examples() {
        let c = ShapingConfig::new(0.0, 1.0, 1).unwrap();
        assert_eq!(score(0.37, &c), 1.0);
        let c = ShapingConfig::new(1.0, 10.0, 1).unwrap();
        assert!((score(0.1927, &c) - 0.1927f64.exp()).abs() < 1e-15);
        assert!((score(0.1927, &c) - 1.2126).abs() < 1e-4);
        let c = ShapingConfig::new(20.0, 10.0, 1).unwrap();
        assert_eq!(score(5f64.ln(), &c), 10.0);
    }

    #[test]
    fn config_defaults() {
        assert_eq!(default_max_score(0.0, 5), 1.0);
        assert!((default_max_score(1.0, 2) - 2.0).abs() < 1e-12);
        assert_eq!(default_max_score(20.0, 2), MAX_SCORE_CAP);
        assert_eq!(default_max_score(-25.0, 5), MAX_SCORE_CAP);
        assert!(ShapingConfig::new(1.0, 0.5, 1).is_err());
        assert!(ShapingConfig::new(1.0, 2.0, 0).is_err());
        assert!(ShapingConfig::new(f64::NAN, 2.0, 1).is_err());
    }

    fn toy_model() -> TableModel {
        let set = UniverseSet::new(["A", "B"]).unwrap();
        let mut m = TableModel::new(set);
        m.insert("strongly a", dist(&[0.9, 0.1])).unwrap();
        m
    }

    #[test]
    fn arc_of_uninformative_line() {
        let m = toy_model();
        let d = Dialogue::from_lines(&["nothing to see"]).unwrap();
        let arc = compute_arc(&d, &m).unwrap();
        assert_eq!(arc.len(), 2);
        assert!(arc.points()[1].probs.is_uniform());
        assert_eq!(arc.points()[1].delta, 0.0);
        assert_eq!(arc.points()[0].delta, 0.0);
    }

    #[test]
    fn repeated_evidence_concentrates_monotonically() {
        let m = toy_model();
        let d = Dialogue::from_lines(&["strongly a"; 8]).unwrap();
        let arc = compute_arc(&d, &m).unwrap();
        // Hand iteration: p_t(A) = 9^t / (9^t + 1).
        for (t, p) in arc.points().iter().enumerate() {
            let expect = 9f64.powi(t as i32) / (9f64.powi(t as i32) + 1.0);
            assert!((p.probs.probs()[0] - expect).abs() < 1e-12);
        }
        assert!(arc
            .points()
            .windows(2)
            .all(|w| w[1].probs.probs()[0] >= w[0].probs.probs()[0]));
        assert!(arc.points().iter().skip(1).all(|p| p.delta > 0.0));
    }

    #[test]
    fn arc_json_and_csv() {
        let m = toy_model();
        let d = Dialogue::from_lines(&["strongly a", "meh"]).unwrap();
        let arc = compute_arc(&d, &m).unwrap();
        let back = NarrativeArc::from_json(&arc.to_json()).unwrap();
        assert_eq!(arc, back);
        let csv = arc.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,A,B,entropy,delta");
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.split(',').count() == 1 + 2 + 2));
        let bad = arc.to_json().replacen("\"version\":1", "\"version\":3", 1);
        assert!(NarrativeArc::from_json(&bad).is_err());
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.001f64..1.0, n).prop_map(|w| {
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn uniform_z_is_identity(p in simplex(4)) {
            let b = BeliefState::from_distribution(UniverseDistribution::from_weights(p).unwrap(), 3);
            let post = update_belief(&b, &UniverseDistribution::uniform(4)).unwrap();
            prop_assert!(close(post.probs(), b.probs(), 1e-15));
        }

        #[test]
        fn entropy_and_delta_bounds(zs in proptest::collection::vec(simplex(3), 1..12)) {
            let ln_n = 3f64.ln();
            let mut b = BeliefState::uniform(3).unwrap();
            for z in zs {
                let post = update_belief(&b, &UniverseDistribution::from_weights(z).unwrap()).unwrap();
                let h = post.entropy();
                let d = entropy_change(&b, &post).unwrap();
                prop_assert!((0.0..=ln_n).contains(&h));
                prop_assert!(d.abs() <= ln_n);
                b = post;
            }
        }

        #[test]
        fn score_is_monotone_in_delta(alpha in -5f64..5.0, d1 in -1f64..1.0, d2 in -1f64..1.0) {
            prop_assume!(alpha != 0.0 && d1 < d2);
            let c = ShapingConfig::new(alpha, f64::MAX, 1).unwrap();
            if alpha > 0.0 {
                prop_assert!(score(d1, &c) < score(d2, &c) || score(d2, &c) == f64::MAX);
            } else {
                prop_assert!(score(d1, &c) > score(d2, &c));
            }
        }

        #[test]
        fn relabeling_permutes_arc(zs in proptest::collection::vec(simplex(3), 1..6)) {
            let set = UniverseSet::new(["a", "b", "c"]).unwrap();
            let rev = UniverseSet::new(["c", "b", "a"]).unwrap();
            let mut m = TableModel::new(set);
            let mut mr = TableModel::new(rev);
            let mut lines = Vec::new();
            for (i, z) in zs.iter().enumerate() {
                let text = format!("line {i}");
                m.insert(&text, UniverseDistribution::from_weights(z.clone()).unwrap()).unwrap();
                let zr: Vec<f64> = z.iter().rev().copied().collect();
                mr.insert(&text, UniverseDistribution::from_weights(zr).unwrap()).unwrap();
                lines.push(text);
            }
            let d = Dialogue::from_lines(&lines).unwrap();
            let a = compute_arc(&d, &m).unwrap();
            let b = compute_arc(&d, &mr).unwrap();
            for (p, q) in a.points().iter().zip(b.points()) {
                let rq: Vec<f64> = q.probs.probs().iter().rev().copied().collect();
                prop_assert!(close(p.probs.probs(), &rq, 1e-14));
            }
        }
    }
}
